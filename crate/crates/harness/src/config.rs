//! Scenario files: schema, defaults, validation and the builders that turn a
//! scenario into environments and agents.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cogradar_core::agent::{FullBandAgent, OracleAgent, PolicyIterationAgent, RandomAgent, SaaAgent};
use cogradar_core::deep::{DeepAgent, DeepConfig, LutAgent, StateEncoder, Variant};
use cogradar_core::env::{ActionSpace, ChannelSpec, EnvConfig, Kinematics, RewardParams, SpectrumEnv};
use cogradar_core::interference::{
    load_power_trace, load_trace, InterferenceSource, MarkovGenerator, PatternGenerator, ScheduleGenerator,
    SweepGenerator, TraceEnd,
};
use cogradar_core::mask::SubbandMask;
use cogradar_core::neural::WeightInit;
use cogradar_core::radar::{CfarConfig, LinkBudget, RadarConfig};
use cogradar_core::tabular::{exact_model, policy_iteration_solve, SolverConfig, StateKeyMode, StateKeyer};

use crate::agents::AnyAgent;

/// Pulses, offline CPIs and evaluation CPIs for full-length runs.
pub const PAPER_SCALE: (usize, usize, usize) = (1000, 500, 70);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub channel: ChannelCfg,
    pub interference: InterferenceCfg,
    pub agent: AgentCfg,
    #[serde(default)]
    pub reward: RewardCfg,
    #[serde(default)]
    pub kinematics: KinematicsCfg,
    #[serde(default)]
    pub phases: PhasesCfg,
    #[serde(default)]
    pub link: LinkCfg,
    #[serde(default)]
    pub radar: RadarCfg,
    #[serde(default)]
    pub seeds: SeedsCfg,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelCfg {
    pub n_subbands: usize,
    pub total_bandwidth_mhz: f64,
}

impl Default for ChannelCfg {
    fn default() -> Self {
        Self {
            n_subbands: 5,
            total_bandwidth_mhz: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TraceEndCfg {
    #[default]
    Wrap,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    /// One mask per line.
    #[default]
    Mask,
    /// Per-band power in dB with a threshold header.
    Power,
}

fn default_probabilities() -> Vec<f64> {
    vec![0.1, 0.2, 0.4, 0.6, 0.8]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InterferenceCfg {
    Sweep {
        #[serde(default)]
        phase: usize,
    },
    Markov {
        p_switch: f64,
        active: String,
    },
    /// Markov interferer whose switch probability steps through
    /// `probabilities`, one value per `segment_cpis` evaluation CPIs.
    Schedule {
        active: String,
        segment_cpis: usize,
        #[serde(default = "default_probabilities")]
        probabilities: Vec<f64>,
    },
    Trace {
        path: PathBuf,
        #[serde(default)]
        end: TraceEndCfg,
        #[serde(default)]
        format: TraceFormat,
    },
    Pattern {
        frames: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Saa,
    Random,
    FullBand,
    PolicyIteration,
    Oracle,
    Dqn,
    Ddqn,
    Drqn,
    Ddrqn,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Saa => "saa",
            Self::Random => "random",
            Self::FullBand => "full-band",
            Self::PolicyIteration => "policy-iteration",
            Self::Oracle => "oracle",
            Self::Dqn => "dqn",
            Self::Ddqn => "ddqn",
            Self::Drqn => "drqn",
            Self::Ddrqn => "ddrqn",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Self::Dqn => Some(Variant::Dqn),
            Self::Ddqn => Some(Variant::Ddqn),
            Self::Drqn => Some(Variant::Drqn),
            Self::Ddrqn => Some(Variant::Ddrqn),
            _ => None,
        }
    }

    /// Agents whose behaviour comes from offline training.
    pub fn is_trained(self) -> bool {
        self == Self::PolicyIteration || self.variant().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StateKeyCfg {
    #[default]
    Interference,
    InterferenceAndTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitCfg {
    Glorot,
    He,
}

/// Agent choice and hyper-parameters. Unset learning parameters take the
/// defaults of the chosen variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentCfg {
    pub kind: AgentKind,
    #[serde(default = "one")]
    pub history_len: usize,
    #[serde(default)]
    pub state_key: StateKeyCfg,
    #[serde(default = "one_f")]
    pub min_visits: f64,
    pub gamma: Option<f64>,
    pub batch_size: Option<usize>,
    pub target_update_period: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub sequence_length: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub lstm_units: Option<usize>,
    pub buffer_capacity: Option<usize>,
    pub train_interval: Option<usize>,
    pub hidden_init: Option<InitCfg>,
    /// Act through the exported look-up table during evaluation.
    #[serde(default)]
    pub lut: bool,
    pub checkpoint: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl AgentCfg {
    pub fn new(kind: AgentKind) -> Self {
        Self {
            kind,
            history_len: 1,
            state_key: StateKeyCfg::Interference,
            min_visits: 1.0,
            gamma: None,
            batch_size: None,
            target_update_period: None,
            learning_rate: None,
            clip_norm: None,
            sequence_length: None,
            hidden: None,
            lstm_units: None,
            buffer_capacity: None,
            train_interval: None,
            hidden_init: None,
            lut: false,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardCfg {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for RewardCfg {
    fn default() -> Self {
        let r = RewardParams::default();
        Self {
            beta1: r.beta1,
            beta2: r.beta2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicsCfg {
    pub n_positions: usize,
    pub n_velocities: usize,
    pub range_min_m: f64,
    pub range_max_m: f64,
}

impl Default for KinematicsCfg {
    fn default() -> Self {
        let k = Kinematics::default();
        Self {
            n_positions: k.n_positions,
            n_velocities: k.n_velocities,
            range_min_m: k.range_min_m,
            range_max_m: k.range_max_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasesCfg {
    pub offline_cpis: usize,
    pub eval_cpis: usize,
    pub pulses_per_cpi: usize,
    pub continue_learning: bool,
}

impl Default for PhasesCfg {
    fn default() -> Self {
        Self {
            offline_cpis: 100,
            eval_cpis: 30,
            pulses_per_cpi: 128,
            continue_learning: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkCfg {
    pub transmit_power_w: f64,
    pub tx_gain_db: f64,
    pub rx_gain_db: f64,
    pub carrier_ghz: f64,
    pub rcs_m2: f64,
    pub noise_temp_k: f64,
    pub loss_db: f64,
    pub interference_power_dbm: f64,
}

impl Default for LinkCfg {
    fn default() -> Self {
        let b = LinkBudget::default();
        let db = |x: f64| 10.0 * x.log10();
        Self {
            transmit_power_w: b.transmit_power_w,
            tx_gain_db: db(b.tx_gain),
            rx_gain_db: db(b.rx_gain),
            carrier_ghz: b.carrier_hz() / 1e9,
            rcs_m2: b.rcs_m2,
            noise_temp_k: b.noise_temp_k,
            loss_db: db(b.loss_factor),
            interference_power_dbm: db(b.interference_power_w * 1e3),
        }
    }
}

impl LinkCfg {
    pub fn budget(&self) -> LinkBudget {
        let lin = |db: f64| 10f64.powf(db / 10.0);
        LinkBudget {
            transmit_power_w: self.transmit_power_w,
            tx_gain: lin(self.tx_gain_db),
            rx_gain: lin(self.rx_gain_db),
            wavelength_m: cogradar_core::radar::SPEED_OF_LIGHT / (self.carrier_ghz * 1e9),
            rcs_m2: self.rcs_m2,
            noise_temp_k: self.noise_temp_k,
            loss_factor: lin(self.loss_db),
            interference_power_w: lin(self.interference_power_dbm) * 1e-3,
        }
    }
}

fn default_pfas() -> Vec<f64> {
    vec![1e-6, 3e-6, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarCfg {
    pub sample_rate_mhz: f64,
    pub pulse_duration_us: f64,
    pub pri_ms: f64,
    /// Radial speed per unit of the environment's velocity index.
    pub speed_per_velocity_step_mps: f64,
    /// Multiplies the target echo; zero gives a noise-only scene.
    pub target_amplitude: f64,
    pub guard_cells: [usize; 2],
    pub training_cells: [usize; 2],
    pub pfa_sweep: Vec<f64>,
    pub roc_cpis: usize,
    pub roc_pulses_per_cpi: usize,
}

impl Default for RadarCfg {
    fn default() -> Self {
        let c = CfarConfig::default();
        Self {
            sample_rate_mhz: 200.0,
            pulse_duration_us: 20.0,
            pri_ms: 0.41,
            speed_per_velocity_step_mps: 2.0,
            target_amplitude: 1.0,
            guard_cells: [c.guard_cells.0, c.guard_cells.1],
            training_cells: [c.training_cells.0, c.training_cells.1],
            pfa_sweep: default_pfas(),
            roc_cpis: 100,
            roc_pulses_per_cpi: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsCfg {
    pub env: u64,
    pub agent: u64,
    pub noise: u64,
}

impl Default for SeedsCfg {
    fn default() -> Self {
        Self {
            env: 1,
            agent: 2,
            noise: 3,
        }
    }
}

/// Command-line overrides applied after loading.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed_env: Option<u64>,
    pub seed_agent: Option<u64>,
    pub seed_noise: Option<u64>,
    pub paper_scale: bool,
    pub out: Option<PathBuf>,
    pub continue_learning: Option<bool>,
    pub checkpoint: Option<PathBuf>,
}

/// Independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn parse_mask(s: &str, n: usize, field: &str) -> Result<SubbandMask> {
    let m: SubbandMask = s.parse().with_context(|| format!("{field}: cannot parse mask {s:?}"))?;
    if m.len() != n {
        bail!("{field}: mask {s:?} has {} sub-bands, channel has {n}", m.len());
    }
    Ok(m)
}

fn check_probability(p: f64, field: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        bail!("{field}: probability {p} outside [0, 1]");
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid scenario")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a scenario. A relative trace path is resolved against the
    /// scenario file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("invalid scenario {}", path.display()))?;
        if let InterferenceCfg::Trace { path: trace, .. } = &mut cfg.interference {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        cfg.validate().with_context(|| format!("invalid scenario {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed_env {
            self.seeds.env = s;
        }
        if let Some(s) = o.seed_agent {
            self.seeds.agent = s;
        }
        if let Some(s) = o.seed_noise {
            self.seeds.noise = s;
        }
        if o.paper_scale {
            let (pulses, offline, eval) = PAPER_SCALE;
            self.phases.pulses_per_cpi = pulses;
            self.phases.offline_cpis = offline;
            self.phases.eval_cpis = eval;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(c) = o.continue_learning {
            self.phases.continue_learning = c;
        }
        if let Some(c) = &o.checkpoint {
            self.agent.checkpoint = Some(c.clone());
        }
        self.validate()
    }

    /// Checks every cross-field constraint; messages name the field.
    pub fn validate(&self) -> Result<()> {
        let n = self.channel.n_subbands;
        self.channel_spec().context("channel")?;
        if !(1..=32).contains(&n) {
            bail!("channel.n_subbands: {n} outside 1..=32");
        }
        match &self.interference {
            InterferenceCfg::Sweep { phase } => {
                if *phase >= n {
                    bail!("interference.phase: {phase} must be below n_subbands {n}");
                }
            }
            InterferenceCfg::Markov { p_switch, active } => {
                check_probability(*p_switch, "interference.p_switch")?;
                parse_mask(active, n, "interference.active")?;
            }
            InterferenceCfg::Schedule {
                active,
                segment_cpis,
                probabilities,
            } => {
                parse_mask(active, n, "interference.active")?;
                if *segment_cpis == 0 {
                    bail!("interference.segment_cpis must be positive");
                }
                if probabilities.is_empty() {
                    bail!("interference.probabilities must not be empty");
                }
                for p in probabilities {
                    check_probability(*p, "interference.probabilities")?;
                }
            }
            InterferenceCfg::Trace { path, .. } => {
                if path.as_os_str().is_empty() {
                    bail!("interference.path must not be empty");
                }
            }
            InterferenceCfg::Pattern { frames } => {
                if frames.is_empty() {
                    bail!("interference.frames must not be empty");
                }
                for f in frames {
                    parse_mask(f, n, "interference.frames")?;
                }
            }
        }

        let a = &self.agent;
        if a.history_len == 0 {
            bail!("agent.history_len must be at least 1");
        }
        if a.kind == AgentKind::PolicyIteration || a.kind == AgentKind::Oracle {
            StateKeyer::new(n, a.history_len, self.state_key_mode()).context("agent.history_len")?;
            self.solver().validate().context("agent.min_visits")?;
        }
        if a.kind == AgentKind::Oracle {
            if !matches!(
                self.interference,
                InterferenceCfg::Sweep { .. } | InterferenceCfg::Markov { .. } | InterferenceCfg::Schedule { .. }
            ) {
                bail!("agent.kind: the oracle needs sweep, markov or schedule interference");
            }
            if a.history_len != 1 {
                bail!("agent.history_len: the oracle uses first-order dynamics (history_len = 1)");
            }
        }
        let deep_fields = [
            ("gamma", a.gamma.is_some()),
            ("batch_size", a.batch_size.is_some()),
            ("target_update_period", a.target_update_period.is_some()),
            ("learning_rate", a.learning_rate.is_some()),
            ("clip_norm", a.clip_norm.is_some()),
            ("sequence_length", a.sequence_length.is_some()),
            ("hidden", a.hidden.is_some()),
            ("lstm_units", a.lstm_units.is_some()),
            ("buffer_capacity", a.buffer_capacity.is_some()),
            ("train_interval", a.train_interval.is_some()),
            ("hidden_init", a.hidden_init.is_some()),
        ];
        match a.kind.variant() {
            Some(v) => {
                self.deep_config().context("agent")?;
                if a.lut && v.is_recurrent() {
                    bail!("agent.lut: look-up tables need a feed-forward variant");
                }
                if a.lut && a.history_len * n > cogradar_core::deep::LUT_MAX_BITS {
                    bail!(
                        "agent.lut: {} history bits exceed the table limit {}",
                        a.history_len * n,
                        cogradar_core::deep::LUT_MAX_BITS
                    );
                }
            }
            None => {
                if let Some((f, _)) = deep_fields.iter().find(|(_, set)| *set) {
                    bail!("agent.{f}: only learning agents take network parameters");
                }
                if a.lut {
                    bail!("agent.lut: only learning agents export look-up tables");
                }
            }
        }
        if a.kind != AgentKind::PolicyIteration && a.kind != AgentKind::Oracle && a.state_key != StateKeyCfg::Interference {
            bail!("agent.state_key: only tabular agents use a state key");
        }

        self.reward_params().validate().context("reward")?;
        self.kinematics().validate().context("kinematics")?;
        if self.phases.eval_cpis == 0 {
            bail!("phases.eval_cpis must be positive");
        }
        if self.phases.pulses_per_cpi == 0 {
            bail!("phases.pulses_per_cpi must be positive");
        }
        if let InterferenceCfg::Schedule {
            segment_cpis,
            probabilities,
            ..
        } = &self.interference
        {
            if segment_cpis * probabilities.len() > self.phases.eval_cpis {
                bail!(
                    "interference.segment_cpis: {} segments of {segment_cpis} CPIs exceed phases.eval_cpis {}",
                    probabilities.len(),
                    self.phases.eval_cpis
                );
            }
        }
        self.link.budget().validate().context("link")?;
        self.radar_config().validate().context("radar")?;
        self.cfar().validate().context("radar")?;
        if self.radar.pfa_sweep.is_empty() {
            bail!("radar.pfa_sweep must not be empty");
        }
        for &p in &self.radar.pfa_sweep {
            if !(p > 0.0 && p < 1.0) {
                bail!("radar.pfa_sweep: {p} outside (0, 1)");
            }
        }
        if !(self.radar.target_amplitude >= 0.0 && self.radar.target_amplitude.is_finite()) {
            bail!("radar.target_amplitude must be non-negative");
        }
        if !self.radar.speed_per_velocity_step_mps.is_finite() {
            bail!("radar.speed_per_velocity_step_mps must be finite");
        }
        if self.radar.roc_cpis == 0 || self.radar.roc_pulses_per_cpi == 0 {
            bail!("radar.roc_cpis and radar.roc_pulses_per_cpi must be positive");
        }
        Ok(())
    }

    pub fn channel_spec(&self) -> Result<ChannelSpec> {
        Ok(ChannelSpec::new(
            self.channel.n_subbands,
            self.channel.total_bandwidth_mhz * 1e6,
        )?)
    }

    pub fn kinematics(&self) -> Kinematics {
        Kinematics {
            n_positions: self.kinematics.n_positions,
            n_velocities: self.kinematics.n_velocities,
            range_min_m: self.kinematics.range_min_m,
            range_max_m: self.kinematics.range_max_m,
        }
    }

    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            beta1: self.reward.beta1,
            beta2: self.reward.beta2,
            ..RewardParams::default()
        }
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        Ok(EnvConfig {
            channel: self.channel_spec()?,
            kinematics: self.kinematics(),
            reward: self.reward_params(),
            history_len: self.agent.history_len,
        })
    }

    pub fn state_key_mode(&self) -> StateKeyMode {
        match self.agent.state_key {
            StateKeyCfg::Interference => StateKeyMode::Interference,
            StateKeyCfg::InterferenceAndTarget => StateKeyMode::InterferenceAndTarget,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            gamma: self.agent.gamma.unwrap_or(SolverConfig::default().gamma),
            min_visits: self.agent.min_visits,
            ..SolverConfig::default()
        }
    }

    pub fn deep_config(&self) -> Result<DeepConfig> {
        let a = &self.agent;
        let Some(v) = a.kind.variant() else {
            bail!("agent.kind {} is not a learning variant", a.kind.name());
        };
        let mut c = DeepConfig::new(v);
        c.history_len = a.history_len;
        if let Some(x) = a.gamma {
            c.gamma = x;
        }
        if let Some(x) = a.batch_size {
            c.batch_size = x;
        }
        if let Some(x) = a.target_update_period {
            c.target_update_period = x;
        }
        if let Some(x) = a.learning_rate {
            c.learning_rate = x;
        }
        if a.clip_norm.is_some() {
            c.clip_norm = a.clip_norm;
        }
        if let Some(x) = a.sequence_length {
            c.sequence_length = x;
        }
        if let Some(x) = &a.hidden {
            c.hidden = x.clone();
        }
        if let Some(x) = a.lstm_units {
            c.lstm_units = x;
        }
        if let Some(x) = a.buffer_capacity {
            c.buffer_capacity = x;
        }
        if let Some(x) = a.train_interval {
            c.train_interval = x;
        }
        if let Some(x) = a.hidden_init {
            c.hidden_init = match x {
                InitCfg::Glorot => WeightInit::Glorot,
                InitCfg::He => WeightInit::He,
            };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn encoder(&self) -> StateEncoder {
        StateEncoder::new(self.channel.n_subbands, self.agent.history_len, &self.kinematics())
    }

    pub fn radar_config(&self) -> RadarConfig {
        RadarConfig {
            channel: self.channel_spec().unwrap_or_default(),
            pulse_duration_s: self.radar.pulse_duration_us * 1e-6,
            sample_rate_hz: self.radar.sample_rate_mhz * 1e6,
            pri_s: self.radar.pri_ms * 1e-3,
            range_min_m: self.kinematics.range_min_m,
            range_max_m: self.kinematics.range_max_m,
            include_noise: true,
        }
    }

    pub fn cfar(&self) -> CfarConfig {
        CfarConfig {
            guard_cells: (self.radar.guard_cells[0], self.radar.guard_cells[1]),
            training_cells: (self.radar.training_cells[0], self.radar.training_cells[1]),
            desired_pfa: self.radar.pfa_sweep.first().copied().unwrap_or(1e-3),
        }
    }

    fn active_mask(&self, active: &str) -> Result<SubbandMask> {
        parse_mask(active, self.channel.n_subbands, "interference.active")
    }

    /// Interference for a phase. A schedule holds its first probability
    /// during offline training and runs its full course in evaluation.
    pub fn interference_source(&self, phase: Phase) -> Result<InterferenceSource> {
        let n = self.channel.n_subbands;
        Ok(match &self.interference {
            InterferenceCfg::Sweep { phase } => InterferenceSource::Sweep(SweepGenerator::with_phase(n, *phase)),
            InterferenceCfg::Markov { p_switch, active } => {
                InterferenceSource::Markov(MarkovGenerator::new(*p_switch, self.active_mask(active)?)?)
            }
            InterferenceCfg::Schedule {
                active,
                segment_cpis,
                probabilities,
            } => match phase {
                Phase::Offline => {
                    InterferenceSource::Markov(MarkovGenerator::new(probabilities[0], self.active_mask(active)?)?)
                }
                Phase::Eval => InterferenceSource::Schedule(ScheduleGenerator::new(
                    probabilities
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| (i * segment_cpis, p))
                        .collect(),
                    self.active_mask(active)?,
                    self.phases.pulses_per_cpi,
                )?),
            },
            InterferenceCfg::Trace { path, end, format } => {
                let buf = match format {
                    TraceFormat::Mask => load_trace(path)?,
                    TraceFormat::Power => load_power_trace(path)?,
                };
                if buf.n_subbands() != n {
                    bail!(
                        "interference.path: trace has {} sub-bands, channel has {n}",
                        buf.n_subbands()
                    );
                }
                InterferenceSource::Trace(buf.with_end(match end {
                    TraceEndCfg::Wrap => TraceEnd::Wrap,
                    TraceEndCfg::Terminate => TraceEnd::Terminate,
                }))
            }
            InterferenceCfg::Pattern { frames } => InterferenceSource::Pattern(PatternGenerator::new(
                frames
                    .iter()
                    .map(|f| parse_mask(f, n, "interference.frames"))
                    .collect::<Result<_>>()?,
            )?),
        })
    }

    pub fn build_env(&self, phase: Phase) -> Result<SpectrumEnv> {
        let seed = derive_seed(self.seeds.env, phase.label());
        Ok(SpectrumEnv::new(self.env_config()?, self.interference_source(phase)?, seed)?)
    }

    /// Exact-dynamics optimal policies, one per schedule segment. `None` for
    /// trace and pattern interference.
    pub fn oracle(&self) -> Result<Option<OracleAgent>> {
        let actions = ActionSpace::new(self.channel.n_subbands);
        let keyer = StateKeyer::new(self.channel.n_subbands, 1, StateKeyMode::Interference)?;
        let mut segments = Vec::new();
        let starts: Vec<(usize, InterferenceSource)> = match &self.interference {
            InterferenceCfg::Schedule {
                active,
                segment_cpis,
                probabilities,
            } => probabilities
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    Ok((
                        i * segment_cpis,
                        InterferenceSource::Markov(MarkovGenerator::new(p, self.active_mask(active)?)?),
                    ))
                })
                .collect::<Result<_>>()?,
            InterferenceCfg::Trace { .. } | InterferenceCfg::Pattern { .. } => return Ok(None),
            _ => vec![(0, self.interference_source(Phase::Eval)?)],
        };
        for (start, src) in starts {
            let Some(dyns) = src.exact_dynamics() else {
                return Ok(None);
            };
            let model = exact_model(&dyns, &keyer, &actions, &self.reward_params())?;
            let full = actions
                .index_of(SubbandMask::full(self.channel.n_subbands))
                .expect("full band is an action");
            let (policy, _) = policy_iteration_solve(&model, &SolverConfig::default(), full)?;
            segments.push((start, policy));
        }
        Ok(Some(OracleAgent::new(actions, keyer, segments)?))
    }

    /// Fresh agent for offline training.
    pub fn build_agent(&self) -> Result<AnyAgent> {
        let n = self.channel.n_subbands;
        let actions = ActionSpace::new(n);
        let seed = self.seeds.agent;
        Ok(match self.agent.kind {
            AgentKind::Saa => AnyAgent::Saa(SaaAgent::new(actions)),
            AgentKind::Random => AnyAgent::Random(RandomAgent::new(actions.len(), seed)),
            AgentKind::FullBand => AnyAgent::FullBand(FullBandAgent::new(&actions)),
            AgentKind::PolicyIteration => {
                let keyer = StateKeyer::new(n, self.agent.history_len, self.state_key_mode())?;
                AnyAgent::PolicyIteration(PolicyIterationAgent::new(actions, keyer, self.solver(), seed))
            }
            AgentKind::Oracle => AnyAgent::Oracle(self.oracle()?.expect("validated interference kind")),
            AgentKind::Dqn | AgentKind::Ddqn | AgentKind::Drqn | AgentKind::Ddrqn => {
                AnyAgent::Deep(DeepAgent::new(self.deep_config()?, self.encoder(), actions.len(), seed)?)
            }
        })
    }

    /// Replaces a trained deep agent with its look-up table when asked to.
    pub fn maybe_lut(&self, agent: AnyAgent) -> Result<AnyAgent> {
        match agent {
            AnyAgent::Deep(d) if self.agent.lut => {
                Ok(AnyAgent::Lut(LutAgent::new(cogradar_core::deep::export_lut(&d)?)))
            }
            other => Ok(other),
        }
    }

    pub fn sha256(&self) -> String {
        let text = toml::to_string(self).expect("scenario serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Eval,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Self::Offline => "offline",
            Self::Eval => "eval",
        }
    }
}
