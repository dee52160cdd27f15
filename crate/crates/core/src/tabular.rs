//! Tabular model fitting and policy iteration.
//!
//! States are identified by packed `u64` keys (see [`StateKeyer`]). Every map
//! is ordered so that solver sweeps visit states in the same order on every
//! run, which keeps floating-point sums and tie-breaks reproducible.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::env::{count_collisions, count_missed_opportunities, largest_free_block};
use crate::env::{reward_from_counts, ActionSpace, EnvState, RewardParams, Transition};
use crate::error::TabularError;
use crate::interference::ThetaDynamics;
use crate::mask::SubbandMask;

/// Which parts of the environment state make up a tabular state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateKeyMode {
    /// Interference history only.
    #[default]
    Interference,
    /// Interference history plus target position and velocity indices.
    InterferenceAndTarget,
}

/// Packs an [`EnvState`] into a canonical integer key: history slot `i`
/// occupies bits `i*N..(i+1)*N`, followed by 16 bits each of position and
/// velocity when the target is included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateKeyer {
    n_subbands: usize,
    history_len: usize,
    mode: StateKeyMode,
}

impl StateKeyer {
    pub fn new(n_subbands: usize, history_len: usize, mode: StateKeyMode) -> Result<Self, TabularError> {
        let extra = match mode {
            StateKeyMode::Interference => 0,
            StateKeyMode::InterferenceAndTarget => 32,
        };
        if history_len == 0 || n_subbands * history_len + extra > 64 {
            return Err(TabularError::InvalidParam(format!(
                "{history_len} x {n_subbands} history bits do not fit a 64-bit state key"
            )));
        }
        Ok(Self {
            n_subbands,
            history_len,
            mode,
        })
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn mode(&self) -> StateKeyMode {
        self.mode
    }

    pub fn key(&self, state: &EnvState) -> u64 {
        let mut key = self.history_key(&state.padded_history(self.history_len));
        if self.mode == StateKeyMode::InterferenceAndTarget {
            let shift = self.n_subbands * self.history_len;
            key |= (state.target.position as u64 & 0xffff) << shift;
            key |= (state.target.velocity as u64 & 0xffff) << (shift + 16);
        }
        key
    }

    /// Key of a history (newest first); missing slots count as empty.
    pub fn history_key(&self, history: &[SubbandMask]) -> u64 {
        history
            .iter()
            .take(self.history_len)
            .enumerate()
            .fold(0u64, |acc, (i, m)| acc | (m.bits() as u64) << (i * self.n_subbands))
    }

    /// Inverse of [`Self::history_key`] for the interference part of a key.
    pub fn decode_history(&self, key: u64) -> Vec<SubbandMask> {
        let low = (1u64 << self.n_subbands) - 1;
        (0..self.history_len)
            .map(|i| SubbandMask::from_bits(self.n_subbands, (key >> (i * self.n_subbands) & low) as u32))
            .collect()
    }

    /// Newest interference mask encoded in a key.
    pub fn newest(&self, key: u64) -> SubbandMask {
        self.decode_history(key)[0]
    }
}

/// Sense-and-avoid: transmit on the largest block that was vacant on the
/// previous pulse. With nothing vacant there is nothing to avoid, so the full
/// band is used.
pub fn saa_act(previous_theta: SubbandMask) -> SubbandMask {
    let block = largest_free_block(previous_theta);
    if block.is_empty() {
        SubbandMask::full(previous_theta.len())
    } else {
        block
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Outcome {
    weight: f64,
    reward_sum: f64,
}

/// Empirical (or exactly specified) transition and reward model.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    n_actions: usize,
    table: BTreeMap<(u64, usize), BTreeMap<u64, Outcome>>,
}

impl TabularModel {
    pub fn new(n_actions: usize) -> Self {
        Self {
            n_actions,
            table: BTreeMap::new(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Records one observed transition.
    pub fn observe(&mut self, s: u64, a: usize, r: f64, s_next: u64) {
        self.add_outcome(s, a, s_next, 1.0, r);
    }

    /// Adds probability mass `weight` for `s_next` with the given reward.
    /// Weights are normalised per `(s, a)` when the model is read.
    pub fn add_outcome(&mut self, s: u64, a: usize, s_next: u64, weight: f64, reward: f64) {
        assert!(a < self.n_actions, "action {a} outside 0..{}", self.n_actions);
        let o = self.table.entry((s, a)).or_default().entry(s_next).or_default();
        o.weight += weight;
        o.reward_sum += weight * reward;
    }

    /// Total observation weight of `(s, a)`; zero when absent.
    pub fn visits(&self, s: u64, a: usize) -> f64 {
        self.table
            .get(&(s, a))
            .map(|m| m.values().map(|o| o.weight).sum())
            .unwrap_or(0.0)
    }

    /// `(s′, P(s′|s,a), mean r(s,a,s′))` for a known pair, in key order.
    pub fn outcomes(&self, s: u64, a: usize) -> Option<Vec<(u64, f64, f64)>> {
        let m = self.table.get(&(s, a))?;
        let total: f64 = m.values().map(|o| o.weight).sum();
        Some(
            m.iter()
                .map(|(&s2, o)| (s2, o.weight / total, o.reward_sum / o.weight))
                .collect(),
        )
    }

    /// Every state that appears as a source or a successor.
    pub fn states(&self) -> BTreeSet<u64> {
        let mut out = BTreeSet::new();
        for ((s, _), succ) in &self.table {
            out.insert(*s);
            out.extend(succ.keys().copied());
        }
        out
    }

    fn compile(&self, min_visits: f64) -> Compiled {
        let states: Vec<u64> = self.states().into_iter().collect();
        let index: BTreeMap<u64, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut rows = vec![vec![None; self.n_actions]; states.len()];
        for &(s, a) in self.table.keys() {
            if self.visits(s, a) < min_visits {
                continue;
            }
            let outs = self
                .outcomes(s, a)
                .expect("present key")
                .into_iter()
                .map(|(s2, p, r)| (index[&s2], p, r))
                .collect::<Vec<_>>();
            rows[index[&s]][a] = Some(outs);
        }
        Compiled { states, rows }
    }
}

/// Dense view of a model: `rows[s][a]` lists `(s′ index, prob, reward)`.
struct Compiled {
    states: Vec<u64>,
    rows: Vec<Vec<Option<Vec<(usize, f64, f64)>>>>,
}

impl Compiled {
    fn q(&self, s: usize, a: usize, v: &[f64], gamma: f64) -> Option<f64> {
        self.rows[s][a]
            .as_ref()
            .map(|outs| outs.iter().map(|&(j, p, r)| p * (r + gamma * v[j])).sum())
    }
}

/// Builds a model from recorded transitions.
pub fn fit_model(transitions: &[Transition], keyer: &StateKeyer, n_actions: usize) -> TabularModel {
    let mut model = TabularModel::new(n_actions);
    for t in transitions {
        model.observe(keyer.key(&t.state), t.action_index, t.reward, keyer.key(&t.next_state));
    }
    model
}

/// Builds the model implied by known one-step interference dynamics. States
/// are interference histories; the reward of an action is scored against the
/// successor mask, matching the environment's timing.
pub fn exact_model(
    dynamics: &ThetaDynamics,
    keyer: &StateKeyer,
    actions: &ActionSpace,
    params: &RewardParams,
) -> Result<TabularModel, TabularError> {
    if dynamics.is_empty() {
        return Err(TabularError::EmptyModel);
    }
    let h = keyer.history_len();
    let n = dynamics[0].0.len();
    let lookup: BTreeMap<SubbandMask, &Vec<(SubbandMask, f64)>> =
        dynamics.iter().map(|(m, succ)| (*m, succ)).collect();

    let mut model = TabularModel::new(actions.len());
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<Vec<SubbandMask>> = dynamics
        .iter()
        .map(|(m, _)| {
            let mut hist = vec![*m];
            hist.resize(h, SubbandMask::empty(n));
            hist
        })
        .collect();
    while let Some(hist) = queue.pop_front() {
        let key = keyer.history_key(&hist);
        if !seen.insert(key) {
            continue;
        }
        let Some(succ) = lookup.get(&hist[0]) else {
            continue;
        };
        for &(theta, p) in succ.iter() {
            if p <= 0.0 {
                continue;
            }
            let mut next = Vec::with_capacity(h);
            next.push(theta);
            next.extend(hist.iter().take(h - 1).copied());
            let key_next = keyer.history_key(&next);
            for (a, &mask) in actions.masks().iter().enumerate() {
                let nc = count_collisions(mask, theta).map_err(|e| TabularError::InvalidParam(e.to_string()))?;
                let nmo = count_missed_opportunities(mask, theta)
                    .map_err(|e| TabularError::InvalidParam(e.to_string()))?;
                model.add_outcome(key, a, key_next, p, reward_from_counts(nc, nmo, params));
            }
            queue.push_back(next);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValueTable {
    pub values: BTreeMap<u64, f64>,
}

impl ValueTable {
    pub fn get(&self, s: u64) -> f64 {
        self.values.get(&s).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub action_by_state: BTreeMap<u64, usize>,
    pub default_action: usize,
}

impl TabularPolicy {
    pub fn action(&self, s: u64) -> Option<usize> {
        self.action_by_state.get(&s).copied()
    }

    /// Plain-text table: a `default <index>` line, then one
    /// `state_key history action_index action_mask` row per state.
    pub fn export(&self, keyer: &StateKeyer, actions: &ActionSpace) -> String {
        let mut out = String::from("# state_key history(newest first) action_index action_mask\n");
        let _ = writeln!(out, "default {}", self.default_action);
        for (&s, &a) in &self.action_by_state {
            let hist: Vec<String> = keyer.decode_history(s).iter().map(|m| m.to_string()).collect();
            let mask = actions.masks()[a];
            let _ = writeln!(out, "{s} {} {a} {mask}", hist.join("|"));
        }
        out
    }
}

/// Reads a table written by [`TabularPolicy::export`]. Only the key and
/// action columns are used.
pub fn parse_policy(text: &str, n_actions: usize) -> Result<TabularPolicy, TabularError> {
    let bad = |line: usize, what: &str| TabularError::InvalidParam(format!("policy line {line}: {what}"));
    let mut default_action = None;
    let mut action_by_state = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let action = |s: &str| -> Result<usize, TabularError> {
            let a: usize = s.parse().map_err(|_| bad(line_no, "action index is not an integer"))?;
            if a >= n_actions {
                return Err(bad(line_no, "action index out of range"));
            }
            Ok(a)
        };
        match fields.as_slice() {
            ["default", a] => default_action = Some(action(a)?),
            [key, _, a, _] => {
                let key: u64 = key.parse().map_err(|_| bad(line_no, "state key is not an integer"))?;
                action_by_state.insert(key, action(a)?);
            }
            _ => return Err(bad(line_no, "expected `key history action mask`")),
        }
    }
    Ok(TabularPolicy {
        action_by_state,
        default_action: default_action.ok_or_else(|| TabularError::InvalidParam("policy has no default line".into()))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub max_iterations: usize,
    /// Pairs observed fewer times than this are treated as unknown.
    pub min_visits: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            epsilon: 1e-8,
            max_sweeps: 100_000,
            max_iterations: 1_000,
            min_visits: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), TabularError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TabularError::InvalidParam(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.epsilon > 0.0) || self.max_sweeps == 0 || self.max_iterations == 0 {
            return Err(TabularError::InvalidParam(
                "epsilon and iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn evaluate(
    compiled: &Compiled,
    actions: &[Option<usize>],
    cfg: &SolverConfig,
) -> Result<Vec<f64>, TabularError> {
    let n = compiled.states.len();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut last_delta = f64::INFINITY;
    for _ in 0..cfg.max_sweeps {
        let mut delta = 0.0f64;
        for s in 0..n {
            next[s] = actions[s]
                .and_then(|a| compiled.q(s, a, &v, cfg.gamma))
                .unwrap_or(0.0);
            delta = delta.max((next[s] - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        last_delta = delta;
        if delta < cfg.epsilon {
            return Ok(v);
        }
    }
    Err(TabularError::NotConverged {
        sweeps: cfg.max_sweeps,
        last_delta,
    })
}

const TIE_TOLERANCE: f64 = 1e-12;

fn greedy(compiled: &Compiled, v: &[f64], gamma: f64) -> Vec<Option<usize>> {
    (0..compiled.states.len())
        .map(|s| {
            let qs: Vec<(usize, f64)> = (0..compiled.rows[s].len())
                .filter_map(|a| compiled.q(s, a, v, gamma).map(|q| (a, q)))
                .collect();
            let best = qs.iter().map(|&(_, q)| q).fold(f64::NEG_INFINITY, f64::max);
            qs.iter().find(|&&(_, q)| q >= best - TIE_TOLERANCE).map(|&(a, _)| a)
        })
        .collect()
}

fn policy_actions(compiled: &Compiled, policy: &TabularPolicy) -> Vec<Option<usize>> {
    compiled
        .states
        .iter()
        .map(|&s| policy.action(s).filter(|&a| a < compiled.rows[0].len()))
        .collect()
}

fn to_values(compiled: &Compiled, v: &[f64]) -> ValueTable {
    ValueTable {
        values: compiled.states.iter().copied().zip(v.iter().copied()).collect(),
    }
}

fn to_policy(compiled: &Compiled, actions: &[Option<usize>], default_action: usize) -> TabularPolicy {
    TabularPolicy {
        action_by_state: compiled
            .states
            .iter()
            .zip(actions)
            .filter_map(|(&s, a)| a.map(|a| (s, a)))
            .collect(),
        default_action,
    }
}

/// Iterative evaluation of a fixed policy. States whose policy action has no
/// data are valued at zero.
pub fn policy_evaluation(
    policy: &TabularPolicy,
    model: &TabularModel,
    cfg: &SolverConfig,
) -> Result<ValueTable, TabularError> {
    cfg.validate()?;
    let compiled = model.compile(cfg.min_visits);
    let v = evaluate(&compiled, &policy_actions(&compiled, policy), cfg)?;
    Ok(to_values(&compiled, &v))
}

/// Greedy one-step lookahead; ties go to the lowest action index.
pub fn policy_improvement(
    values: &ValueTable,
    model: &TabularModel,
    cfg: &SolverConfig,
    default_action: usize,
) -> TabularPolicy {
    let compiled = model.compile(cfg.min_visits);
    let v: Vec<f64> = compiled.states.iter().map(|&s| values.get(s)).collect();
    to_policy(&compiled, &greedy(&compiled, &v, cfg.gamma), default_action)
}

/// Alternates evaluation and improvement until the policy stops changing.
pub fn policy_iteration_solve(
    model: &TabularModel,
    cfg: &SolverConfig,
    default_action: usize,
) -> Result<(TabularPolicy, ValueTable), TabularError> {
    cfg.validate()?;
    if model.is_empty() {
        return Err(TabularError::EmptyModel);
    }
    let compiled = model.compile(cfg.min_visits);
    let mut actions = greedy(&compiled, &vec![0.0; compiled.states.len()], cfg.gamma);
    for _ in 0..cfg.max_iterations {
        let v = evaluate(&compiled, &actions, cfg)?;
        let improved = greedy(&compiled, &v, cfg.gamma);
        if improved == actions {
            return Ok((to_policy(&compiled, &actions, default_action), to_values(&compiled, &v)));
        }
        actions = improved;
    }
    Err(TabularError::PolicyUnstable {
        iterations: cfg.max_iterations,
    })
}
