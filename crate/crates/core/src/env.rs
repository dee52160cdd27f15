//! The shared-channel MDP.
//!
//! Time advances one radar pulse per step. The agent sees a state holding the
//! interference observed on the previous pulse, picks a waveform, and only
//! then does the environment draw the interference present during that pulse.
//! Reward is scored against that freshly drawn mask, which also becomes the
//! newest entry of the next state.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::EnvError;
use crate::interference::InterferenceSource;
use crate::mask::{SubbandMask, MAX_SUBBANDS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    n_subbands: usize,
    total_bandwidth_hz: f64,
}

impl ChannelSpec {
    pub fn new(n_subbands: usize, total_bandwidth_hz: f64) -> Result<Self, EnvError> {
        if !(1..=MAX_SUBBANDS).contains(&n_subbands) {
            return Err(EnvError::InvalidChannel(format!(
                "n_subbands {n_subbands} outside 1..={MAX_SUBBANDS}"
            )));
        }
        if !(total_bandwidth_hz.is_finite() && total_bandwidth_hz > 0.0) {
            return Err(EnvError::InvalidChannel(format!(
                "total bandwidth {total_bandwidth_hz} Hz must be positive"
            )));
        }
        Ok(Self {
            n_subbands,
            total_bandwidth_hz,
        })
    }

    pub fn n_subbands(&self) -> usize {
        self.n_subbands
    }

    pub fn total_bandwidth_hz(&self) -> f64 {
        self.total_bandwidth_hz
    }

    pub fn subband_bandwidth_hz(&self) -> f64 {
        self.total_bandwidth_hz / self.n_subbands as f64
    }

    pub fn n_actions(&self) -> usize {
        self.n_subbands * (self.n_subbands + 1) / 2
    }
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            n_subbands: 5,
            total_bandwidth_hz: 100e6,
        }
    }
}

/// Every contiguous run of sub-bands, ordered by start index then length.
/// The position of a mask in this list is its action index.
pub fn enumerate_actions(n_subbands: usize) -> Vec<SubbandMask> {
    let mut out = Vec::with_capacity(n_subbands * (n_subbands + 1) / 2);
    for start in 0..n_subbands {
        for run in 1..=n_subbands - start {
            out.push(SubbandMask::run(n_subbands, start, run));
        }
    }
    out
}

/// Action list plus reverse lookup from mask to index.
#[derive(Debug, Clone)]
pub struct ActionSpace {
    masks: Vec<SubbandMask>,
    index: HashMap<SubbandMask, usize>,
}

impl ActionSpace {
    pub fn new(n_subbands: usize) -> Self {
        let masks = enumerate_actions(n_subbands);
        let index = masks.iter().enumerate().map(|(i, m)| (*m, i)).collect();
        Self { masks, index }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn n_subbands(&self) -> usize {
        self.masks[0].len()
    }

    pub fn masks(&self) -> &[SubbandMask] {
        &self.masks
    }

    pub fn mask(&self, index: usize) -> Result<SubbandMask, EnvError> {
        self.masks.get(index).copied().ok_or(EnvError::InvalidAction {
            index,
            count: self.masks.len(),
        })
    }

    pub fn index_of(&self, mask: SubbandMask) -> Option<usize> {
        self.index.get(&mask).copied()
    }
}

/// Sub-bands used by both radar and communications.
pub fn count_collisions(a: SubbandMask, theta: SubbandMask) -> Result<usize, EnvError> {
    a.check_same_len(&theta)?;
    Ok(a.and(&theta).count_ones())
}

/// Longest run of vacant sub-bands; the lowest-starting run wins ties. An
/// all-occupied θ gives the empty mask.
pub fn largest_free_block(theta: SubbandMask) -> SubbandMask {
    let n = theta.len();
    let (mut best_start, mut best_len) = (0, 0);
    let mut i = 0;
    while i < n {
        if theta.get(i) {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && !theta.get(i) {
            i += 1;
        }
        if i - start > best_len {
            best_start = start;
            best_len = i - start;
        }
    }
    if best_len == 0 {
        SubbandMask::empty(n)
    } else {
        SubbandMask::run(n, best_start, best_len)
    }
}

/// Vacant bands of the largest free block that the action left unused.
pub fn count_missed_opportunities(a: SubbandMask, theta: SubbandMask) -> Result<usize, EnvError> {
    a.check_same_len(&theta)?;
    let best = largest_free_block(theta);
    Ok(best.count_ones() - best.and(&a).count_ones())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub large_penalty: f64,
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let finite = [self.beta1, self.beta2, self.alpha1, self.alpha2, self.large_penalty]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.beta1 < 0.0 || self.beta2 <= self.beta1 {
            return Err(EnvError::InvalidParams(format!(
                "reward parameters need 0 <= beta1 < beta2 (got {}, {})",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            beta1: 5.0,
            beta2: 6.0,
            alpha1: 1.0,
            alpha2: 1.0,
            large_penalty: -10.0,
        }
    }
}

/// Reward from collision and missed-opportunity counts.
pub fn reward_from_counts(n_collisions: usize, n_missed: usize, params: &RewardParams) -> f64 {
    if n_collisions > 0 {
        0.0
    } else if n_missed == 0 {
        1.0
    } else {
        params.beta1 / (params.beta2 * n_missed as f64)
    }
}

pub fn reward(a: SubbandMask, theta: SubbandMask, params: &RewardParams) -> Result<f64, EnvError> {
    let nc = count_collisions(a, theta)?;
    let nmo = count_missed_opportunities(a, theta)?;
    Ok(reward_from_counts(nc, nmo, params))
}

/// SINR/bandwidth trade-off reward; `bandwidth_subbands` is a sub-band count.
pub fn reward_sinr_bw(sinr_db: f64, bandwidth_subbands: f64, params: &RewardParams) -> f64 {
    if sinr_db >= 0.0 {
        params.alpha1 * sinr_db + params.alpha2 * bandwidth_subbands
    } else {
        params.large_penalty
    }
}

/// Quantized target kinematics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub n_positions: usize,
    pub n_velocities: usize,
    pub range_min_m: f64,
    pub range_max_m: f64,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self {
            n_positions: 50,
            n_velocities: 10,
            range_min_m: 2000.0,
            range_max_m: 3000.0,
        }
    }
}

impl Kinematics {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_positions == 0 || self.n_velocities == 0 {
            return Err(EnvError::InvalidParams(
                "position and velocity grids must be non-empty".into(),
            ));
        }
        if !(self.range_min_m > 0.0 && self.range_max_m > self.range_min_m) {
            return Err(EnvError::InvalidParams(format!(
                "range span [{}, {}] m must be positive and increasing",
                self.range_min_m, self.range_max_m
            )));
        }
        Ok(())
    }

    pub fn range_step_m(&self) -> f64 {
        (self.range_max_m - self.range_min_m) / self.n_positions as f64
    }

    /// Cell-centre range for a position index.
    pub fn range_m(&self, position: usize) -> f64 {
        self.range_min_m + (position as f64 + 0.5) * self.range_step_m()
    }

    /// Signed position step per pulse. An even grid has no stationary
    /// index: V = 10 maps to -5..=-1 then 1..=5.
    pub fn velocity_step(&self, velocity: usize) -> i64 {
        let v = velocity as i64;
        let half = self.n_velocities as i64 / 2;
        if self.n_velocities % 2 == 1 || v < half {
            v - half
        } else {
            v - half + 1
        }
    }

    /// Index with the opposite step.
    pub fn flip_velocity(&self, velocity: usize) -> usize {
        self.n_velocities - 1 - velocity
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetState {
    pub position: usize,
    pub velocity: usize,
    pub range_m: f64,
}

impl TargetState {
    pub fn new(position: usize, velocity: usize, kin: &Kinematics) -> Result<Self, EnvError> {
        if position >= kin.n_positions || velocity >= kin.n_velocities {
            return Err(EnvError::InvalidParams(format!(
                "target ({position}, {velocity}) outside {}x{} grid",
                kin.n_positions, kin.n_velocities
            )));
        }
        Ok(Self {
            position,
            velocity,
            range_m: kin.range_m(position),
        })
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, kin: &Kinematics) -> Self {
        let position = rng.gen_range(0..kin.n_positions);
        let velocity = rng.gen_range(0..kin.n_velocities);
        Self {
            position,
            velocity,
            range_m: kin.range_m(position),
        }
    }

    /// Radial speed in m/s for a given pulse repetition interval.
    pub fn radial_speed_mps(&self, kin: &Kinematics, pri_s: f64) -> f64 {
        kin.velocity_step(self.velocity) as f64 * kin.range_step_m() / pri_s
    }
}

/// Constant-velocity move with mirror reflection at both ends of the grid.
pub fn advance_target(t: TargetState, kin: &Kinematics) -> TargetState {
    let p = kin.n_positions as i64;
    let step = kin.velocity_step(t.velocity);
    if p == 1 || step == 0 {
        return t;
    }
    let mut pos = t.position as i64 + step;
    let mut flipped = false;
    loop {
        if pos < 0 {
            pos = -pos;
        } else if pos > p - 1 {
            pos = 2 * (p - 1) - pos;
        } else {
            break;
        }
        flipped = !flipped;
    }
    let velocity = if flipped {
        kin.flip_velocity(t.velocity)
    } else {
        t.velocity
    };
    TargetState {
        position: pos as usize,
        velocity,
        range_m: kin.range_m(pos as usize),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub interference: SubbandMask,
    pub target: TargetState,
    /// Most recent interference masks, newest first.
    pub history: Vec<SubbandMask>,
}

impl EnvState {
    /// History padded with empty masks to exactly `h` entries.
    pub fn padded_history(&self, h: usize) -> Vec<SubbandMask> {
        let n = self.interference.len();
        (0..h)
            .map(|i| self.history.get(i).copied().unwrap_or(SubbandMask::empty(n)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub action_index: usize,
    pub reward: f64,
    pub next_state: EnvState,
    /// Set when the step consumed the final frame of a non-repeating trace
    /// segment.
    pub terminal: bool,
}

/// Per-pulse quantities that feed the Table-style metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub action: SubbandMask,
    pub theta: SubbandMask,
    pub collisions: usize,
    pub missed_opportunities: usize,
    pub bandwidth_subbands: usize,
    /// `None` on the first pulse, which has no predecessor.
    pub adapted: Option<bool>,
    pub reward: f64,
    pub range_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub channel: ChannelSpec,
    pub kinematics: Kinematics,
    pub reward: RewardParams,
    pub history_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            channel: ChannelSpec::default(),
            kinematics: Kinematics::default(),
            reward: RewardParams::default(),
            history_len: 1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.kinematics.validate()?;
        self.reward.validate()?;
        if self.history_len == 0 {
            return Err(EnvError::InvalidParams("history length must be at least 1".into()));
        }
        Ok(())
    }
}

/// One channel, one interferer, one target.
#[derive(Debug, Clone)]
pub struct SpectrumEnv {
    config: EnvConfig,
    actions: ActionSpace,
    source: InterferenceSource,
    interference_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    state: EnvState,
    last_action: Option<usize>,
    steps: u64,
}

impl SpectrumEnv {
    /// Draws the initial interference mask and target from the seed.
    pub fn new(config: EnvConfig, source: InterferenceSource, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let n = config.channel.n_subbands();
        if source.n_subbands() != n {
            return Err(EnvError::LengthMismatch {
                left: n,
                right: source.n_subbands(),
            });
        }
        let mut interference_rng = ChaCha8Rng::seed_from_u64(seed);
        interference_rng.set_stream(1);
        let mut target_rng = ChaCha8Rng::seed_from_u64(seed);
        target_rng.set_stream(2);
        let mut source = source;
        let theta = source.next_theta(&mut interference_rng)?;
        let target = TargetState::random(&mut target_rng, &config.kinematics);
        let actions = ActionSpace::new(n);
        Ok(Self {
            config,
            actions,
            source,
            interference_rng,
            target_rng,
            state: EnvState {
                interference: theta,
                target,
                history: vec![theta],
            },
            last_action: None,
            steps: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn source(&self) -> &InterferenceSource {
        &self.source
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Redraws the target for a new episode; interference continues.
    pub fn new_episode(&mut self) {
        self.state.target = TargetState::random(&mut self.target_rng, &self.config.kinematics);
    }

    /// Transmits `action_index` into the next pulse's interference.
    pub fn step(&mut self, action_index: usize) -> Result<(Transition, StepMetrics), EnvError> {
        let action = self.actions.mask(action_index)?;
        let theta = self.source.next_theta(&mut self.interference_rng)?;
        let terminal = self.source.at_trace_end();

        let collisions = count_collisions(action, theta)?;
        let missed = count_missed_opportunities(action, theta)?;
        let r = reward_from_counts(collisions, missed, &self.config.reward);

        let target = advance_target(self.state.target, &self.config.kinematics);
        let mut history = Vec::with_capacity(self.config.history_len);
        history.push(theta);
        history.extend(
            self.state
                .history
                .iter()
                .take(self.config.history_len - 1)
                .copied(),
        );
        let next = EnvState {
            interference: theta,
            target,
            history,
        };

        let metrics = StepMetrics {
            action,
            theta,
            collisions,
            missed_opportunities: missed,
            bandwidth_subbands: action.count_ones(),
            adapted: self.last_action.map(|prev| prev != action_index),
            reward: r,
            range_m: self.state.target.range_m,
        };
        let transition = Transition {
            state: std::mem::replace(&mut self.state, next.clone()),
            action_index,
            reward: r,
            next_state: next,
            terminal,
        };
        self.last_action = Some(action_index);
        self.steps += 1;
        Ok((transition, metrics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::{MarkovGenerator, SweepGenerator};

    fn m(s: &str) -> SubbandMask {
        s.parse().unwrap()
    }

    #[test]
    fn action_order_small() {
        let got: Vec<String> = enumerate_actions(3).iter().map(|a| a.to_string()).collect();
        assert_eq!(got, ["100", "110", "111", "010", "011", "001"]);
        assert_eq!(enumerate_actions(1), vec![m("1")]);
        assert_eq!(enumerate_actions(5).len(), 15);
    }

    #[test]
    fn collision_examples() {
        assert_eq!(count_collisions(m("00111"), m("11000")).unwrap(), 0);
        assert_eq!(count_collisions(m("11100"), m("11000")).unwrap(), 2);
        assert_eq!(count_collisions(m("11111"), m("11111")).unwrap(), 5);
        assert!(count_collisions(m("111"), m("11000")).is_err());
    }

    #[test]
    fn free_block_examples() {
        assert_eq!(largest_free_block(m("11000")), m("00111"));
        assert_eq!(largest_free_block(m("00100")), m("11000"));
        assert_eq!(largest_free_block(m("11111")), m("00000"));
        assert_eq!(largest_free_block(m("00000")), m("11111"));
    }

    #[test]
    fn missed_opportunity_examples() {
        assert_eq!(count_missed_opportunities(m("00111"), m("11000")).unwrap(), 0);
        assert_eq!(count_missed_opportunities(m("00011"), m("11000")).unwrap(), 1);
        assert_eq!(count_missed_opportunities(m("10000"), m("11000")).unwrap(), 3);
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        assert!((reward_from_counts(0, 1, &p) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(reward_from_counts(2, 3, &p), 0.0);
        assert!((reward_from_counts(0, 4, &p) - 5.0 / 24.0).abs() < 1e-15);
        assert_eq!(reward_from_counts(0, 0, &p), 1.0);
    }

    #[test]
    fn sinr_bw_reward_examples() {
        let p = RewardParams::default();
        assert_eq!(reward_sinr_bw(10.0, 4.0, &p), 14.0);
        assert_eq!(reward_sinr_bw(-1.0, 4.0, &p), p.large_penalty);
        let zero = RewardParams {
            alpha1: 0.0,
            alpha2: 0.0,
            ..p
        };
        assert_eq!(reward_sinr_bw(3.0, 5.0, &zero), 0.0);
    }

    #[test]
    fn reward_params_validation() {
        let bad = RewardParams {
            beta1: 6.0,
            beta2: 5.0,
            ..RewardParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(RewardParams::default().validate().is_ok());
    }

    #[test]
    fn velocity_steps_are_symmetric() {
        let kin = Kinematics::default();
        let steps: Vec<i64> = (0..10).map(|v| kin.velocity_step(v)).collect();
        assert_eq!(steps, [-5, -4, -3, -2, -1, 1, 2, 3, 4, 5]);
        for v in 0..10 {
            assert_eq!(kin.velocity_step(kin.flip_velocity(v)), -kin.velocity_step(v));
        }
        let odd = Kinematics {
            n_velocities: 5,
            ..kin
        };
        let steps: Vec<i64> = (0..5).map(|v| odd.velocity_step(v)).collect();
        assert_eq!(steps, [-2, -1, 0, 1, 2]);
    }

    #[test]
    fn target_moves_and_reflects() {
        let kin = Kinematics::default();
        let plus_one = 5;
        assert_eq!(kin.velocity_step(plus_one), 1);
        let t = TargetState::new(10, plus_one, &kin).unwrap();
        assert_eq!(advance_target(t, &kin).position, 11);

        let t = TargetState::new(49, plus_one, &kin).unwrap();
        let next = advance_target(t, &kin);
        assert_eq!(next.position, 48);
        assert_eq!(kin.velocity_step(next.velocity), -1);

        let still = Kinematics {
            n_velocities: 5,
            ..kin
        };
        let t = TargetState::new(7, 2, &still).unwrap();
        assert_eq!(advance_target(t, &still), t);
    }

    #[test]
    fn sweep_step_scores_against_next_theta() {
        let src = InterferenceSource::Sweep(SweepGenerator::new(5));
        let mut env = SpectrumEnv::new(EnvConfig::default(), src, 0).unwrap();
        assert_eq!(env.state().interference, m("10000"));
        let dodge = env.actions().index_of(m("00111")).unwrap();
        let (tr, metrics) = env.step(dodge).unwrap();
        assert_eq!(tr.reward, 1.0);
        assert_eq!(tr.next_state.interference, m("01000"));
        assert_eq!(tr.state.interference, m("10000"));
        assert_eq!(metrics.adapted, None);

        let wide = env.actions().index_of(m("01111")).unwrap();
        let (tr, metrics) = env.step(wide).unwrap();
        assert_eq!(tr.reward, 0.0);
        assert_eq!(metrics.collisions, 1);
        assert_eq!(metrics.adapted, Some(true));
    }

    #[test]
    fn history_keeps_newest_first() {
        let cfg = EnvConfig {
            history_len: 3,
            ..EnvConfig::default()
        };
        let src = InterferenceSource::Sweep(SweepGenerator::new(5));
        let mut env = SpectrumEnv::new(cfg, src, 0).unwrap();
        for _ in 0..4 {
            env.step(0).unwrap();
        }
        let h = &env.state().history;
        assert_eq!(h, &vec![m("00001"), m("00010"), m("00100")]);
        assert_eq!(h[0], env.state().interference);
    }

    #[test]
    fn seeded_env_is_reproducible() {
        let run = || {
            let src = InterferenceSource::Markov(MarkovGenerator::new(0.4, m("11000")).unwrap());
            let mut env = SpectrumEnv::new(EnvConfig::default(), src, 42).unwrap();
            (0..200)
                .map(|i| env.step(i % 15).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_action_and_width() {
        let src = InterferenceSource::Sweep(SweepGenerator::new(5));
        let mut env = SpectrumEnv::new(EnvConfig::default(), src, 0).unwrap();
        assert!(matches!(env.step(15), Err(EnvError::InvalidAction { .. })));
        let src = InterferenceSource::Sweep(SweepGenerator::new(4));
        assert!(SpectrumEnv::new(EnvConfig::default(), src, 0).is_err());
    }
}
