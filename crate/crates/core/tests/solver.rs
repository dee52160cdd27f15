use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cogradar_core::tabular::{
    policy_evaluation, policy_improvement, policy_iteration_solve, SolverConfig, TabularModel,
};

/// Random dense MDP: every state has every action, each with up to three
/// weighted outcomes.
struct RandomMdp {
    n_states: usize,
    n_actions: usize,
    /// `outcomes[s][a]` = (next, weight, reward)
    outcomes: Vec<Vec<Vec<(usize, f64, f64)>>>,
}

impl RandomMdp {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_states = rng.gen_range(1..=50);
        let n_actions = rng.gen_range(1..=6);
        let outcomes = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        (0..rng.gen_range(1..=3))
                            .map(|_| {
                                (
                                    rng.gen_range(0..n_states),
                                    rng.gen_range(0.1..5.0),
                                    rng.gen_range(-1.0..1.0),
                                )
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            n_states,
            n_actions,
            outcomes,
        }
    }

    fn model(&self) -> TabularModel {
        let mut m = TabularModel::new(self.n_actions);
        for (s, per_action) in self.outcomes.iter().enumerate() {
            for (a, outs) in per_action.iter().enumerate() {
                for &(next, w, r) in outs {
                    m.add_outcome(s as u64, a, next as u64, w, r);
                }
            }
        }
        m
    }

    fn q(&self, v: &[f64], s: usize, a: usize, gamma: f64) -> f64 {
        let outs = &self.outcomes[s][a];
        let total: f64 = outs.iter().map(|o| o.1).sum();
        outs.iter().map(|&(n, w, r)| w / total * (r + gamma * v[n])).sum()
    }

    /// Bellman optimality iteration to a fixed point.
    fn value_iteration(&self, gamma: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        loop {
            let next: Vec<f64> = (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| self.q(&v, s, a, gamma))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < 1e-13 {
                return v;
            }
        }
    }
}

#[test]
fn policy_iteration_matches_value_iteration_on_random_mdps() {
    for seed in 0..50 {
        let mdp = RandomMdp::new(seed);
        let gamma = ChaCha8Rng::seed_from_u64(1000 + seed).gen_range(0.5..0.95);
        let cfg = SolverConfig {
            gamma,
            epsilon: 1e-12,
            min_visits: 0.0,
            ..SolverConfig::default()
        };
        let (policy, values) = policy_iteration_solve(&mdp.model(), &cfg, 0).unwrap();
        let oracle = mdp.value_iteration(gamma);
        let worst = (0..mdp.n_states)
            .map(|s| (values.get(s as u64) - oracle[s]).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "seed {seed}: |dV| = {worst:e}");
        // the returned policy is greedy with respect to the optimal values
        for s in 0..mdp.n_states {
            let a = policy.action(s as u64).unwrap();
            let best = (0..mdp.n_actions)
                .map(|b| mdp.q(&oracle, s, b, gamma))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best - mdp.q(&oracle, s, a, gamma) <= 1e-6, "seed {seed} state {s}");
        }
    }
}

#[test]
fn absorbing_unit_reward_chain_is_worth_ten() {
    let mut m = TabularModel::new(1);
    m.add_outcome(0, 0, 0, 1.0, 1.0);
    let cfg = SolverConfig {
        gamma: 0.9,
        epsilon: 1e-12,
        ..SolverConfig::default()
    };
    let (_, v) = policy_iteration_solve(&m, &cfg, 0).unwrap();
    assert!((v.get(0) - 10.0).abs() <= 1e-6, "V = {}", v.get(0));
}

#[test]
fn improvement_never_lowers_values() {
    for seed in 0..30 {
        let mdp = RandomMdp::new(500 + seed);
        let model = mdp.model();
        let cfg = SolverConfig {
            gamma: 0.9,
            epsilon: 1e-12,
            min_visits: 0.0,
            ..SolverConfig::default()
        };
        // start from the myopic policy of a zero value table, then improve
        let zero = policy_evaluation(
            &policy_improvement(&Default::default(), &model, &cfg, 0),
            &model,
            &cfg,
        )
        .unwrap();
        let mut policy = policy_improvement(&zero, &model, &cfg, 0);
        let mut values = policy_evaluation(&policy, &model, &cfg).unwrap();
        for _ in 0..5 {
            policy = policy_improvement(&values, &model, &cfg, 0);
            let next = policy_evaluation(&policy, &model, &cfg).unwrap();
            for s in 0..mdp.n_states as u64 {
                assert!(next.get(s) >= values.get(s) - 1e-9, "seed {seed} state {s}");
            }
            values = next;
        }
    }
}

#[test]
fn solver_rejects_bad_parameters() {
    let mut m = TabularModel::new(1);
    m.add_outcome(0, 0, 0, 1.0, 1.0);
    let bad = SolverConfig {
        gamma: 1.5,
        ..SolverConfig::default()
    };
    assert!(policy_iteration_solve(&m, &bad, 0).is_err());
    assert!(policy_iteration_solve(&TabularModel::new(2), &SolverConfig::default(), 0).is_err());
}

