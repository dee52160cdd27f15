use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cogradar_core::deep::{
    ddqn_target, dqn_target, export_lut, load_agent_checkpoint, DeepAgent, DeepConfig, ReplayBuffer, ReplayEntry,
    StateEncoder, Variant,
};
use cogradar_core::env::Kinematics;
use cogradar_core::neural::{
    deserialize, gradient_check, serialize, Batch, NetworkSpec, QNetwork, SgdConfig, WeightInit,
};

fn entry(tag: usize, episode: u64) -> ReplayEntry {
    ReplayEntry {
        obs: vec![tag as f64],
        action: tag % 15,
        reward: 0.0,
        next_obs: vec![tag as f64 + 1.0],
        terminal: false,
        episode,
    }
}

proptest! {
    #[test]
    fn replay_keeps_the_newest_entries(capacity in 1usize..50, n in 0usize..200) {
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..n {
            buf.push(entry(i, 0));
        }
        prop_assert_eq!(buf.len(), n.min(capacity));
        let kept: Vec<f64> = buf.iter().map(|e| e.obs[0]).collect();
        let expected: Vec<f64> = (n.saturating_sub(capacity)..n).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn replay_samples_are_distinct_and_in_range(capacity in 1usize..60, n in 0usize..100, k in 1usize..40, seed in any::<u64>()) {
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..n {
            buf.push(entry(i, 0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match buf.sample(&mut rng, k) {
            None => prop_assert!(buf.len() < k),
            Some(idx) => {
                prop_assert_eq!(idx.len(), k);
                let mut sorted = idx.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), k);
                prop_assert!(idx.iter().all(|&i| i < buf.len()));
            }
        }
    }

    #[test]
    fn replay_sequences_never_cross_episodes(lengths in proptest::collection::vec(1usize..15, 1..8), len in 1usize..10) {
        let mut buf = ReplayBuffer::new(1000);
        let mut t = 0;
        for (ep, &l) in lengths.iter().enumerate() {
            for _ in 0..l {
                buf.push(entry(t, ep as u64));
                t += 1;
            }
        }
        let oracle: Vec<usize> = (0..buf.len())
            .filter(|&j| j + 1 >= len && (j + 1 - len..=j).all(|i| buf.get(i).episode == buf.get(j).episode))
            .collect();
        prop_assert_eq!(buf.sequence_ends(len), oracle);
    }

    #[test]
    fn dqn_target_is_reward_plus_discounted_max(r in -1.0f64..1.0, gamma in 0.0f64..1.0, q in proptest::collection::vec(-5.0f64..5.0, 1..16)) {
        let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((dqn_target(r, false, gamma, &q) - (r + gamma * max)).abs() < 1e-12);
        prop_assert_eq!(dqn_target(r, true, gamma, &q), r);
    }

    #[test]
    fn ddqn_target_evaluates_the_policy_choice(
        r in -1.0f64..1.0,
        gamma in 0.0f64..1.0,
        qs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..16),
    ) {
        let (qp, qt): (Vec<f64>, Vec<f64>) = qs.into_iter().unzip();
        // first index attaining the policy maximum
        let best = qp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pick = qp.iter().position(|&v| v == best).unwrap();
        let t = ddqn_target(r, false, gamma, &qp, &qt);
        prop_assert!((t - (r + gamma * qt[pick])).abs() < 1e-12);
        prop_assert!(t <= dqn_target(r, false, gamma, &qt) + 1e-12);
        prop_assert_eq!(ddqn_target(r, true, gamma, &qp, &qt), r);
    }
}

fn small_agent(variant: Variant, seed: u64) -> DeepAgent {
    let mut cfg = DeepConfig::new(variant);
    cfg.hidden = vec![16, 12];
    cfg.lstm_units = 8;
    let enc = StateEncoder::new(5, 1, &Kinematics::default());
    DeepAgent::new(cfg, enc, 15, seed).unwrap()
}

#[test]
fn lut_agrees_with_greedy_network_on_whole_domain() {
    for seed in 0..5 {
        let agent = small_agent(Variant::Dqn, seed);
        let lut = export_lut(&agent).unwrap();
        assert_eq!(lut.len(), 32);
        let enc = *agent.encoder();
        for key in 0..32 {
            let obs = enc.encode_parts(&lut.history_of(key), 0.5, 0.5);
            assert_eq!(lut.lookup(key), agent.act_greedy_on(&[obs]).unwrap(), "seed {seed} key {key}");
            assert_eq!(lut.key(&lut.history_of(key)), key);
        }
    }
}

#[test]
fn recurrent_agents_have_no_lut() {
    assert!(export_lut(&small_agent(Variant::Ddrqn, 0)).is_err());
}

fn random_batch(rng: &mut ChaCha8Rng, dim: usize, steps: usize, rows: usize, n_actions: usize) -> Batch {
    Batch {
        inputs: (0..steps)
            .map(|_| Array2::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0..1.0)))
            .collect(),
        actions: (0..rows).map(|_| rng.gen_range(0..n_actions)).collect(),
        targets: (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn spec(hidden: Vec<usize>, lstm: Option<usize>) -> NetworkSpec {
    NetworkSpec {
        input_dim: 6,
        hidden,
        lstm_units: lstm,
        output_dim: 4,
        hidden_init: WeightInit::He,
    }
}

#[test]
fn gradients_match_central_differences_on_twenty_seeds() {
    let stacks = [
        ("dense", spec(vec![8, 7], None)),
        ("lstm", spec(vec![], Some(5))),
        ("mixed", spec(vec![7], Some(4))),
    ];
    for (name, s) in &stacks {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = QNetwork::new(s, &mut rng).unwrap();
            let steps = if s.lstm_units.is_some() { 3 } else { 1 };
            let batch = random_batch(&mut rng, s.input_dim, steps, 4, s.output_dim);
            let report = gradient_check(&net, &batch, 1e-5).unwrap();
            assert!(
                report.max_rel_error() <= 1e-4,
                "{name} seed {seed}: {report:?}"
            );
            assert_eq!(report.lstm_max_rel_error.is_some(), s.lstm_units.is_some());
        }
    }
}

#[test]
fn sgd_reduces_loss_on_a_fixed_batch() {
    for (seed, s) in [spec(vec![16], None), spec(vec![8], Some(6))].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut net = QNetwork::new(s, &mut rng).unwrap();
        let steps = if s.lstm_units.is_some() { 3 } else { 1 };
        let batch = random_batch(&mut rng, s.input_dim, steps, 8, s.output_dim);
        let cfg = SgdConfig {
            learning_rate: 0.05,
            clip_norm: None,
        };
        let first = net.loss(&batch).unwrap();
        let mut last = first;
        for _ in 0..300 {
            let (g, _) = net.backward(&batch).unwrap();
            net.sgd_step(&g, &cfg).unwrap();
            last = net.loss(&batch).unwrap();
        }
        assert!(last < 0.2 * first, "stack {seed}: {first} -> {last}");
    }
}

#[test]
fn agent_checkpoint_round_trips() {
    for variant in [Variant::Dqn, Variant::Ddqn, Variant::Drqn, Variant::Ddrqn] {
        let agent = small_agent(variant, 9);
        let ck = load_agent_checkpoint(&agent.save()).unwrap();
        assert_eq!(ck.variant, variant);
        assert_eq!(ck.encoder, *agent.encoder());
        assert_eq!(&ck.network, agent.policy_net());
        let restored = DeepAgent::with_network(agent.config().clone(), ck.encoder, ck.network, 0).unwrap();
        let obs = vec![vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.3, 0.7]; 3];
        assert_eq!(
            restored.policy_net().forward_sequence(&obs).unwrap(),
            agent.policy_net().forward_sequence(&obs).unwrap()
        );
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = small_agent(Variant::Dqn, 1).save();
    let mut flipped = bytes.clone();
    let last = flipped.len() - 40;
    flipped[last] ^= 0x01;
    assert!(load_agent_checkpoint(&flipped).is_err());
    assert!(load_agent_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    assert!(load_agent_checkpoint(b"not a checkpoint").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn network_serialisation_is_lossless(seed in any::<u64>(), h in 1usize..10, lstm in proptest::option::of(1usize..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = QNetwork::new(&spec(vec![h], lstm), &mut rng).unwrap();
        prop_assert_eq!(deserialize(&serialize(&net)).unwrap(), net);
    }
}
