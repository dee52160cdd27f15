//! Agent interface, baseline agents and the two rollout phases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{ActionSpace, EnvState, SpectrumEnv, StepMetrics, Transition};
use crate::error::{AgentError, EnvError};
use crate::tabular::{fit_model, policy_iteration_solve, saa_act, SolverConfig, StateKeyer, TabularModel};
use crate::tabular::TabularPolicy;

/// A radar waveform selector.
pub trait Agent {
    fn name(&self) -> &str;

    /// Called before the first pulse of every CPI.
    fn begin_cpi(&mut self, _cpi: usize) {}

    /// Picks an action index. `explore` is set during the offline phase.
    fn act(&mut self, state: &EnvState, explore: bool) -> Result<usize, AgentError>;

    /// Receives the transition produced by the last action. Learning agents
    /// store it and, when `learn` is set, update; the return value is a
    /// training loss when an update happened.
    fn observe(&mut self, _t: &Transition, _learn: bool) -> Result<Option<f64>, AgentError> {
        Ok(None)
    }

    /// Called once after the offline phase.
    fn finish_offline(&mut self) -> Result<(), AgentError> {
        Ok(())
    }
}

/// Reacts to the previous pulse's interference.
#[derive(Debug, Clone)]
pub struct SaaAgent {
    actions: ActionSpace,
}

impl SaaAgent {
    pub fn new(actions: ActionSpace) -> Self {
        Self { actions }
    }
}

impl Agent for SaaAgent {
    fn name(&self) -> &str {
        "saa"
    }

    fn act(&mut self, state: &EnvState, _explore: bool) -> Result<usize, AgentError> {
        let mask = saa_act(state.interference);
        Ok(self.actions.index_of(mask).expect("SAA output is a contiguous run"))
    }
}

#[derive(Debug, Clone)]
pub struct RandomAgent {
    n_actions: usize,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(n_actions: usize, seed: u64) -> Self {
        Self {
            n_actions,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&mut self, _state: &EnvState, _explore: bool) -> Result<usize, AgentError> {
        Ok(self.rng.gen_range(0..self.n_actions))
    }
}

/// Always transmits across the whole channel.
#[derive(Debug, Clone)]
pub struct FullBandAgent {
    index: usize,
}

impl FullBandAgent {
    pub fn new(actions: &ActionSpace) -> Self {
        let full = crate::mask::SubbandMask::full(actions.n_subbands());
        Self {
            index: actions.index_of(full).expect("full band is an action"),
        }
    }
}

impl Agent for FullBandAgent {
    fn name(&self) -> &str {
        "full-band"
    }

    fn act(&mut self, _state: &EnvState, _explore: bool) -> Result<usize, AgentError> {
        Ok(self.index)
    }
}

/// Tabular policy lookup with the SAA fallback for states it has no entry
/// for.
fn tabular_act(policy: &TabularPolicy, keyer: &StateKeyer, actions: &ActionSpace, state: &EnvState) -> usize {
    policy.action(keyer.key(state)).unwrap_or_else(|| {
        actions
            .index_of(saa_act(state.interference))
            .expect("SAA output is a contiguous run")
    })
}

/// Explores uniformly offline, fits an empirical model, and acts on the
/// policy-iteration solution of that model. The policy is frozen once
/// solved.
#[derive(Debug, Clone)]
pub struct PolicyIterationAgent {
    actions: ActionSpace,
    keyer: StateKeyer,
    solver: SolverConfig,
    transitions: Vec<Transition>,
    policy: Option<TabularPolicy>,
    rng: ChaCha8Rng,
}

impl PolicyIterationAgent {
    pub fn new(actions: ActionSpace, keyer: StateKeyer, solver: SolverConfig, seed: u64) -> Self {
        Self {
            actions,
            keyer,
            solver,
            transitions: Vec::new(),
            policy: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Agent restored from an exported policy.
    pub fn from_policy(actions: ActionSpace, keyer: StateKeyer, policy: TabularPolicy) -> Self {
        let mut a = Self::new(actions, keyer, SolverConfig::default(), 0);
        a.policy = Some(policy);
        a
    }

    pub fn policy(&self) -> Option<&TabularPolicy> {
        self.policy.as_ref()
    }

    pub fn keyer(&self) -> &StateKeyer {
        &self.keyer
    }

    pub fn model(&self) -> TabularModel {
        fit_model(&self.transitions, &self.keyer, self.actions.len())
    }
}

impl Agent for PolicyIterationAgent {
    fn name(&self) -> &str {
        "policy-iteration"
    }

    fn act(&mut self, state: &EnvState, explore: bool) -> Result<usize, AgentError> {
        match (&self.policy, explore) {
            (Some(p), false) => Ok(tabular_act(p, &self.keyer, &self.actions, state)),
            (None, false) => Ok(self
                .actions
                .index_of(saa_act(state.interference))
                .expect("SAA output is a contiguous run")),
            (_, true) => Ok(self.rng.gen_range(0..self.actions.len())),
        }
    }

    fn observe(&mut self, t: &Transition, _learn: bool) -> Result<Option<f64>, AgentError> {
        if self.policy.is_none() {
            self.transitions.push(t.clone());
        }
        Ok(None)
    }

    fn finish_offline(&mut self) -> Result<(), AgentError> {
        let model = self.model();
        if model.is_empty() {
            return Ok(());
        }
        let full = self
            .actions
            .index_of(crate::mask::SubbandMask::full(self.actions.n_subbands()))
            .expect("full band is an action");
        let (policy, _) = policy_iteration_solve(&model, &self.solver, full)?;
        self.policy = Some(policy);
        self.transitions.clear();
        Ok(())
    }
}

/// Optimal stationary policy from the true interference dynamics. For a
/// scheduled interferer, one policy per schedule segment keyed by the CPI at
/// which it takes effect.
#[derive(Debug, Clone)]
pub struct OracleAgent {
    actions: ActionSpace,
    keyer: StateKeyer,
    segments: Vec<(usize, TabularPolicy)>,
    current: usize,
}

impl OracleAgent {
    pub fn new(actions: ActionSpace, keyer: StateKeyer, segments: Vec<(usize, TabularPolicy)>) -> Result<Self, AgentError> {
        if segments.is_empty() {
            return Err(AgentError::Config("oracle needs at least one policy".into()));
        }
        Ok(Self {
            actions,
            keyer,
            segments,
            current: 0,
        })
    }
}

impl Agent for OracleAgent {
    fn name(&self) -> &str {
        "oracle"
    }

    fn begin_cpi(&mut self, cpi: usize) {
        self.current = self
            .segments
            .iter()
            .rposition(|(start, _)| *start <= cpi)
            .unwrap_or(0);
    }

    fn act(&mut self, state: &EnvState, _explore: bool) -> Result<usize, AgentError> {
        Ok(tabular_act(&self.segments[self.current].1, &self.keyer, &self.actions, state))
    }
}

/// Everything recorded during one phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseLog {
    /// Mean reward of each completed (or final partial) CPI.
    pub cpi_mean_reward: Vec<f64>,
    pub steps: Vec<StepMetrics>,
    pub losses: Vec<f64>,
    /// Set when a non-repeating trace ran out before the phase finished.
    pub ended_early: bool,
}

fn run_phase(
    agent: &mut dyn Agent,
    env: &mut SpectrumEnv,
    n_cpis: usize,
    pulses_per_cpi: usize,
    explore: bool,
    learn: bool,
) -> Result<PhaseLog, AgentError> {
    let mut log = PhaseLog::default();
    'cpis: for cpi in 0..n_cpis {
        env.new_episode();
        agent.begin_cpi(cpi);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..pulses_per_cpi {
            let a = agent.act(env.state(), explore)?;
            let (t, m) = match env.step(a) {
                Ok(v) => v,
                Err(EnvError::EndOfEpisode) => {
                    log.ended_early = true;
                    if count > 0 {
                        log.cpi_mean_reward.push(total / count as f64);
                    }
                    break 'cpis;
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(loss) = agent.observe(&t, learn)? {
                log.losses.push(loss);
            }
            total += m.reward;
            count += 1;
            log.steps.push(m);
        }
        log.cpi_mean_reward.push(total / count.max(1) as f64);
    }
    Ok(log)
}

/// Offline phase: uniform exploration, every transition stored, learning on.
pub fn run_offline_training(
    agent: &mut dyn Agent,
    env: &mut SpectrumEnv,
    n_cpis: usize,
    pulses_per_cpi: usize,
) -> Result<PhaseLog, AgentError> {
    let log = run_phase(agent, env, n_cpis, pulses_per_cpi, true, true)?;
    agent.finish_offline()?;
    Ok(log)
}

/// Online phase: greedy actions; learning continues only when asked.
pub fn run_online_evaluation(
    agent: &mut dyn Agent,
    env: &mut SpectrumEnv,
    n_cpis: usize,
    pulses_per_cpi: usize,
    continue_learning: bool,
) -> Result<PhaseLog, AgentError> {
    run_phase(agent, env, n_cpis, pulses_per_cpi, false, continue_learning)
}
