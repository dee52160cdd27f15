//! Deep Q-learning agents (DQN, DDQN, DRQN, DDRQN) and look-up-table export.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::Agent;
use crate::env::{EnvState, Kinematics, Transition};
use crate::error::{AgentError, NetError};
use crate::mask::SubbandMask;
use crate::neural::{self, Batch, NetworkSpec, QNetwork, SgdConfig, WeightInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dqn,
    Ddqn,
    Drqn,
    Ddrqn,
}

impl Variant {
    pub fn is_double(self) -> bool {
        matches!(self, Self::Ddqn | Self::Ddrqn)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Self::Drqn | Self::Ddrqn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dqn => "dqn",
            Self::Ddqn => "ddqn",
            Self::Drqn => "drqn",
            Self::Ddrqn => "ddrqn",
        }
    }
}

impl FromStr for Variant {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dqn" => Ok(Self::Dqn),
            "ddqn" => Ok(Self::Ddqn),
            "drqn" => Ok(Self::Drqn),
            "ddrqn" => Ok(Self::Ddrqn),
            other => Err(AgentError::Config(format!("unknown deep variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub batch_size: usize,
    pub target_update_period: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub history_len: usize,
    pub sequence_length: usize,
    pub hidden: Vec<usize>,
    pub lstm_units: usize,
    pub buffer_capacity: usize,
    /// Train once every this many stored transitions.
    pub train_interval: usize,
    /// Hidden-layer initialisation. Recurrent variants default to He: with
    /// Glorot the ReLU stack shrinks the LSTM input until the gates carry no
    /// state information under plain SGD.
    pub hidden_init: WeightInit,
}

impl DeepConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            gamma: 0.9,
            batch_size: 32,
            target_update_period: 250,
            learning_rate: 1e-3,
            clip_norm: None,
            history_len: 1,
            sequence_length: 10,
            hidden: vec![256, 128, 84],
            lstm_units: 84,
            buffer_capacity: 2000,
            train_interval: 1,
            hidden_init: if variant.is_recurrent() {
                WeightInit::He
            } else {
                WeightInit::Glorot
            },
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let positive = [
            self.batch_size,
            self.target_update_period,
            self.history_len,
            self.sequence_length,
            self.lstm_units,
            self.buffer_capacity,
            self.train_interval,
        ];
        if positive.contains(&0) || self.hidden.contains(&0) {
            return Err(AgentError::Config("sizes and periods must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AgentError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        SgdConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
        }
        .validate()?;
        if self.batch_size > self.buffer_capacity {
            return Err(AgentError::Config("batch size exceeds replay capacity".into()));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
        }
    }
}

/// Network input: `H` interference masks (newest first) as 0/1 values, then
/// position and velocity indices scaled into `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateEncoder {
    pub n_subbands: usize,
    pub history_len: usize,
    pub n_positions: usize,
    pub n_velocities: usize,
}

impl StateEncoder {
    pub fn new(n_subbands: usize, history_len: usize, kin: &Kinematics) -> Self {
        Self {
            n_subbands,
            history_len,
            n_positions: kin.n_positions,
            n_velocities: kin.n_velocities,
        }
    }

    pub fn width(&self) -> usize {
        self.history_len * self.n_subbands + 2
    }

    pub fn encode(&self, state: &EnvState) -> Vec<f64> {
        self.encode_parts(
            &state.padded_history(self.history_len),
            state.target.position as f64 / self.n_positions as f64,
            state.target.velocity as f64 / self.n_velocities as f64,
        )
    }

    pub fn encode_parts(&self, history: &[SubbandMask], position: f64, velocity: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        for i in 0..self.history_len {
            match history.get(i) {
                Some(m) => out.extend(m.iter().map(|b| f64::from(u8::from(b)))),
                None => out.extend(std::iter::repeat_n(0.0, self.n_subbands)),
            }
        }
        out.push(position);
        out.push(velocity);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    /// Entries share an id only when they come from one contiguous episode.
    pub episode: u64,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(entry);
    }

    pub fn get(&self, i: usize) -> &ReplayEntry {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.items.iter()
    }

    /// Indices `j` such that entries `j+1-len..=j` exist and share an episode.
    pub fn sequence_ends(&self, len: usize) -> Vec<usize> {
        (len.saturating_sub(1)..self.items.len())
            .filter(|&j| self.items[j + 1 - len].episode == self.items[j].episode)
            .collect()
    }

    /// `n` distinct indices, uniform over the buffer; `None` when too few.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Option<Vec<usize>> {
        (self.items.len() >= n).then(|| index::sample(rng, self.items.len(), n).into_vec())
    }

    /// End indices of `n` distinct valid sequences of length `len`.
    pub fn sample_sequences<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, len: usize) -> Option<Vec<usize>> {
        let ends = self.sequence_ends(len);
        (ends.len() >= n).then(|| {
            index::sample(rng, ends.len(), n)
                .into_iter()
                .map(|i| ends[i])
                .collect()
        })
    }
}

/// Lowest index among the maxima.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// `r + γ max_a′ Q(s′, a′; w′)`, or `r` for a terminal transition.
pub fn dqn_target(reward: f64, terminal: bool, gamma: f64, q_target_next: &[f64]) -> f64 {
    if terminal {
        return reward;
    }
    reward + gamma * q_target_next[argmax(q_target_next)]
}

/// `r + γ Q(s′, argmax_a′ Q(s′, a′; w); w′)`, or `r` for a terminal transition.
pub fn ddqn_target(reward: f64, terminal: bool, gamma: f64, q_policy_next: &[f64], q_target_next: &[f64]) -> f64 {
    if terminal {
        return reward;
    }
    reward + gamma * q_target_next[argmax(q_policy_next)]
}

#[derive(Debug, Clone)]
pub struct DeepAgent {
    cfg: DeepConfig,
    encoder: StateEncoder,
    n_actions: usize,
    policy: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    train_steps: u64,
    stored: u64,
    episode: u64,
    window: VecDeque<Vec<f64>>,
    pending_obs: Option<Vec<f64>>,
}

impl DeepAgent {
    pub fn new(cfg: DeepConfig, encoder: StateEncoder, n_actions: usize, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(1);
        let spec = NetworkSpec {
            input_dim: encoder.width(),
            hidden: cfg.hidden.clone(),
            lstm_units: cfg.variant.is_recurrent().then_some(cfg.lstm_units),
            output_dim: n_actions,
            hidden_init: cfg.hidden_init,
        };
        let policy = QNetwork::new(&spec, &mut init_rng)?;
        Self::with_network(cfg, encoder, policy, seed)
    }

    /// Wraps an existing policy network (e.g. one loaded from a checkpoint).
    pub fn with_network(cfg: DeepConfig, encoder: StateEncoder, policy: QNetwork, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        if policy.input_dim() != encoder.width() {
            return Err(AgentError::Config(format!(
                "network expects {} inputs, encoder produces {}",
                policy.input_dim(),
                encoder.width()
            )));
        }
        if policy.is_recurrent() != cfg.variant.is_recurrent() {
            return Err(AgentError::Config(format!(
                "network topology does not match variant {}",
                cfg.variant.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(Self {
            n_actions: policy.output_dim(),
            target: policy.clone(),
            policy,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            encoder,
            rng,
            train_steps: 0,
            stored: 0,
            episode: 0,
            window: VecDeque::new(),
            pending_obs: None,
        })
    }

    pub fn config(&self) -> &DeepConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &StateEncoder {
        &self.encoder
    }

    pub fn policy_net(&self) -> &QNetwork {
        &self.policy
    }

    pub fn target_net(&self) -> &QNetwork {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Uniform over all actions.
    pub fn act_explore(&mut self) -> usize {
        self.rng.gen_range(0..self.n_actions)
    }

    /// Greedy action for an encoded observation (feed-forward) or an
    /// observation window, oldest first (recurrent).
    pub fn act_greedy_on(&self, window: &[Vec<f64>]) -> Result<usize, AgentError> {
        let q = if self.policy.is_recurrent() {
            self.policy.forward_sequence(window)?
        } else {
            let last = window.last().ok_or(NetError::EmptySequence)?;
            self.policy.forward(last)?
        };
        Ok(argmax(&q))
    }

    /// Stores a transition without training.
    pub fn remember(&mut self, t: &Transition) {
        let obs = self
            .pending_obs
            .take()
            .unwrap_or_else(|| self.encoder.encode(&t.state));
        self.buffer.push(ReplayEntry {
            obs,
            action: t.action_index,
            reward: t.reward,
            next_obs: self.encoder.encode(&t.next_state),
            terminal: t.terminal,
            episode: self.episode,
        });
        self.stored += 1;
    }

    /// One SGD step on a sampled batch. `None` when the buffer cannot yet
    /// supply a full batch.
    pub fn train_step(&mut self) -> Result<Option<f64>, AgentError> {
        let b = self.cfg.batch_size;
        let (inputs, next_inputs, picks) = if self.cfg.variant.is_recurrent() {
            let l = self.cfg.sequence_length;
            let Some(ends) = self.buffer.sample_sequences(&mut self.rng, b, l) else {
                return Ok(None);
            };
            let width = self.encoder.width();
            let mut xs = Vec::with_capacity(l);
            let mut xs_next = Vec::with_capacity(l);
            for k in 0..l {
                let mut x = Array2::zeros((b, width));
                let mut x_next = Array2::zeros((b, width));
                for (row, &end) in ends.iter().enumerate() {
                    let e = self.buffer.get(end + 1 + k - l);
                    x.row_mut(row).assign(&ndarray::aview1(&e.obs));
                    x_next.row_mut(row).assign(&ndarray::aview1(&e.next_obs));
                }
                xs.push(x);
                xs_next.push(x_next);
            }
            (xs, xs_next, ends)
        } else {
            let Some(picks) = self.buffer.sample(&mut self.rng, b) else {
                return Ok(None);
            };
            let width = self.encoder.width();
            let mut x = Array2::zeros((b, width));
            let mut x_next = Array2::zeros((b, width));
            for (row, &i) in picks.iter().enumerate() {
                let e = self.buffer.get(i);
                x.row_mut(row).assign(&ndarray::aview1(&e.obs));
                x_next.row_mut(row).assign(&ndarray::aview1(&e.next_obs));
            }
            (vec![x], vec![x_next], picks)
        };

        let q_target = self.target.forward_batch(&next_inputs)?;
        let q_policy = if self.cfg.variant.is_double() {
            Some(self.policy.forward_batch(&next_inputs)?)
        } else {
            None
        };
        let mut actions = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for (row, &i) in picks.iter().enumerate() {
            let e = self.buffer.get(i);
            let qt = q_target.row(row).to_vec();
            let y = match &q_policy {
                Some(qp) => ddqn_target(e.reward, e.terminal, self.cfg.gamma, &qp.row(row).to_vec(), &qt),
                None => dqn_target(e.reward, e.terminal, self.cfg.gamma, &qt),
            };
            actions.push(e.action);
            targets.push(y);
        }
        let batch = Batch {
            inputs,
            actions,
            targets,
        };
        let (grads, loss) = self.policy.backward(&batch)?;
        self.policy.sgd_step(&grads, &self.cfg.sgd())?;
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.cfg.target_update_period as u64) {
            self.target.copy_weights_from(&self.policy)?;
        }
        Ok(Some(loss))
    }

    /// Checkpoint: a text header describing the agent, then the network.
    pub fn save(&self) -> Vec<u8> {
        let mut header = String::from("cogradar-agent 1\n");
        let c = &self.cfg;
        let e = &self.encoder;
        let _ = writeln!(header, "variant={}", c.variant.name());
        let _ = writeln!(header, "n_subbands={}", e.n_subbands);
        let _ = writeln!(header, "history_len={}", e.history_len);
        let _ = writeln!(header, "n_positions={}", e.n_positions);
        let _ = writeln!(header, "n_velocities={}", e.n_velocities);
        let _ = writeln!(header, "sequence_length={}", c.sequence_length);
        let _ = writeln!(header, "train_steps={}", self.train_steps);
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend(neural::serialize(&self.policy));
        out
    }
}

/// Decoded checkpoint header plus network.
#[derive(Debug, Clone)]
pub struct AgentCheckpoint {
    pub variant: Variant,
    pub encoder: StateEncoder,
    pub sequence_length: usize,
    pub train_steps: u64,
    pub network: QNetwork,
}

pub fn load_agent_checkpoint(bytes: &[u8]) -> Result<AgentCheckpoint, AgentError> {
    let bad = |m: String| AgentError::Net(NetError::Checkpoint(m));
    let marker = b"end\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing agent header".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    let mut lines = header.lines();
    if lines.next() != Some("cogradar-agent 1") {
        return Err(bad("not an agent checkpoint".into()));
    }
    let mut fields = std::collections::BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| -> Result<&str, AgentError> {
        fields.get(k).copied().ok_or_else(|| bad(format!("header lacks {k}")))
    };
    let num = |k: &str| -> Result<usize, AgentError> {
        get(k)?.parse().map_err(|_| bad(format!("header field {k} is not a number")))
    };
    let network = neural::deserialize(&bytes[split + marker.len()..])?;
    Ok(AgentCheckpoint {
        variant: get("variant")?.parse()?,
        encoder: StateEncoder {
            n_subbands: num("n_subbands")?,
            history_len: num("history_len")?,
            n_positions: num("n_positions")?,
            n_velocities: num("n_velocities")?,
        },
        sequence_length: num("sequence_length")?,
        train_steps: num("train_steps")? as u64,
        network,
    })
}

impl Agent for DeepAgent {
    fn name(&self) -> &str {
        self.cfg.variant.name()
    }

    fn begin_cpi(&mut self, _cpi: usize) {
        self.episode += 1;
        self.window.clear();
    }

    fn act(&mut self, state: &EnvState, explore: bool) -> Result<usize, AgentError> {
        let obs = self.encoder.encode(state);
        if self.cfg.variant.is_recurrent() {
            if self.window.len() == self.cfg.sequence_length {
                self.window.pop_front();
            }
            self.window.push_back(obs.clone());
        }
        let a = if explore {
            self.act_explore()
        } else if self.cfg.variant.is_recurrent() {
            self.window.make_contiguous();
            self.act_greedy_on(self.window.as_slices().0)?
        } else {
            self.act_greedy_on(std::slice::from_ref(&obs))?
        };
        self.pending_obs = Some(obs);
        Ok(a)
    }

    fn observe(&mut self, t: &Transition, learn: bool) -> Result<Option<f64>, AgentError> {
        self.remember(t);
        if learn && self.stored.is_multiple_of(self.cfg.train_interval as u64) {
            self.train_step()
        } else {
            Ok(None)
        }
    }
}

/// Largest history domain that may be enumerated into a table.
pub const LUT_MAX_BITS: usize = 20;

/// Frozen mapping from interference history to action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookUpTable {
    n_subbands: usize,
    history_len: usize,
    actions: Vec<u16>,
}

impl LookUpTable {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    /// History packed with slot `i` at bits `i*N..(i+1)*N`, newest first.
    pub fn key(&self, history: &[SubbandMask]) -> usize {
        history
            .iter()
            .take(self.history_len)
            .enumerate()
            .fold(0usize, |acc, (i, m)| acc | (m.bits() as usize) << (i * self.n_subbands))
    }

    pub fn history_of(&self, key: usize) -> Vec<SubbandMask> {
        let low = (1usize << self.n_subbands) - 1;
        (0..self.history_len)
            .map(|i| SubbandMask::from_bits(self.n_subbands, (key >> (i * self.n_subbands) & low) as u32))
            .collect()
    }

    pub fn lookup(&self, key: usize) -> usize {
        self.actions[key] as usize
    }

    pub fn act(&self, state: &EnvState) -> usize {
        self.lookup(self.key(&state.padded_history(self.history_len)))
    }

    /// Text form: a `#` header then one `h0|h1|... -> action` row per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# lut n_subbands={} history_len={} (history newest first)\n",
            self.n_subbands, self.history_len
        );
        for (key, &a) in self.actions.iter().enumerate() {
            let hist: Vec<String> = self.history_of(key).iter().map(|m| m.to_string()).collect();
            let _ = writeln!(out, "{} -> {a}", hist.join("|"));
        }
        out
    }
}

/// Enumerates every interference history and records the greedy action,
/// with target features fixed at the middle of their ranges.
pub fn export_lut(agent: &DeepAgent) -> Result<LookUpTable, AgentError> {
    if agent.cfg.variant.is_recurrent() {
        return Err(AgentError::Unsupported(
            "recurrent agents depend on an observation window, not a single history; export a feed-forward variant"
                .into(),
        ));
    }
    let enc = agent.encoder;
    let bits = enc.history_len * enc.n_subbands;
    if bits > LUT_MAX_BITS {
        return Err(AgentError::LutDomainTooLarge {
            bits,
            limit: LUT_MAX_BITS,
        });
    }
    let mut lut = LookUpTable {
        n_subbands: enc.n_subbands,
        history_len: enc.history_len,
        actions: Vec::with_capacity(1 << bits),
    };
    for key in 0..1usize << bits {
        let hist = lut.history_of(key);
        let obs = enc.encode_parts(&hist, 0.5, 0.5);
        lut.actions.push(agent.act_greedy_on(std::slice::from_ref(&obs))? as u16);
    }
    Ok(lut)
}

/// Acts from an exported table only.
#[derive(Debug, Clone)]
pub struct LutAgent {
    lut: LookUpTable,
}

impl LutAgent {
    pub fn new(lut: LookUpTable) -> Self {
        Self { lut }
    }
}

impl Agent for LutAgent {
    fn name(&self) -> &str {
        "lut"
    }

    fn act(&mut self, state: &EnvState, _explore: bool) -> Result<usize, AgentError> {
        Ok(self.lut.act(state))
    }
}
