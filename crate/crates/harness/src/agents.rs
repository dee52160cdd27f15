//! One enum over every agent the runner can drive, plus checkpoint I/O.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use cogradar_core::agent::{Agent, FullBandAgent, OracleAgent, PolicyIterationAgent, RandomAgent, SaaAgent};
use cogradar_core::deep::{load_agent_checkpoint, DeepAgent, LutAgent};
use cogradar_core::env::{ActionSpace, EnvState, Transition};
use cogradar_core::error::AgentError;
use cogradar_core::tabular::{parse_policy, StateKeyer};

use crate::config::{AgentKind, ScenarioConfig};

/// Policy file of a policy-iteration agent that never saw data; it falls
/// back to sense-and-avoid when loaded.
const UNTRAINED_POLICY: &str = "# untrained\n";

pub enum AnyAgent {
    Saa(SaaAgent),
    Random(RandomAgent),
    FullBand(FullBandAgent),
    PolicyIteration(PolicyIterationAgent),
    Oracle(OracleAgent),
    Deep(DeepAgent),
    Lut(LutAgent),
}

impl AnyAgent {
    fn inner(&mut self) -> &mut dyn Agent {
        match self {
            Self::Saa(a) => a,
            Self::Random(a) => a,
            Self::FullBand(a) => a,
            Self::PolicyIteration(a) => a,
            Self::Oracle(a) => a,
            Self::Deep(a) => a,
            Self::Lut(a) => a,
        }
    }

    fn inner_ref(&self) -> &dyn Agent {
        match self {
            Self::Saa(a) => a,
            Self::Random(a) => a,
            Self::FullBand(a) => a,
            Self::PolicyIteration(a) => a,
            Self::Oracle(a) => a,
            Self::Deep(a) => a,
            Self::Lut(a) => a,
        }
    }

    /// Writes learned state; returns the written path.
    pub fn save(&self, cfg: &ScenarioConfig, dir: &Path) -> Result<Option<PathBuf>> {
        let (name, bytes) = match self {
            Self::Deep(d) => ("agent.ckpt", d.save()),
            Self::PolicyIteration(p) => {
                let text = match p.policy() {
                    Some(policy) => policy.export(p.keyer(), &ActionSpace::new(cfg.channel.n_subbands)),
                    None => UNTRAINED_POLICY.to_string(),
                };
                ("policy.txt", text.into_bytes())
            }
            _ => return Ok(None),
        };
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(Some(path))
    }

    /// Rebuilds a trained agent from a checkpoint and checks that it fits
    /// the scenario.
    pub fn load(cfg: &ScenarioConfig, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let n = cfg.channel.n_subbands;
        let actions = ActionSpace::new(n);
        match cfg.agent.kind {
            AgentKind::PolicyIteration => {
                let text = String::from_utf8(bytes).context("policy checkpoint is not text")?;
                let keyer = StateKeyer::new(n, cfg.agent.history_len, cfg.state_key_mode())?;
                if text == UNTRAINED_POLICY {
                    return Ok(Self::PolicyIteration(PolicyIterationAgent::new(
                        actions,
                        keyer,
                        cfg.solver(),
                        cfg.seeds.agent,
                    )));
                }
                let policy = parse_policy(&text, actions.len())
                    .with_context(|| format!("parsing policy {}", path.display()))?;
                Ok(Self::PolicyIteration(PolicyIterationAgent::from_policy(actions, keyer, policy)))
            }
            kind if kind.variant().is_some() => {
                let ck = load_agent_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))?;
                let dc = cfg.deep_config()?;
                if ck.variant != dc.variant {
                    bail!(
                        "checkpoint holds a {} agent, scenario asks for {}",
                        ck.variant.name(),
                        dc.variant.name()
                    );
                }
                let enc = cfg.encoder();
                if ck.encoder != enc {
                    bail!("checkpoint state encoding {:?} does not match scenario {:?}", ck.encoder, enc);
                }
                if ck.network.output_dim() != actions.len() {
                    bail!(
                        "checkpoint has {} actions, scenario has {}",
                        ck.network.output_dim(),
                        actions.len()
                    );
                }
                let agent = DeepAgent::with_network(dc, enc, ck.network, cfg.seeds.agent)?;
                cfg.maybe_lut(Self::Deep(agent))
            }
            kind => bail!("{} agents have no checkpoint", kind.name()),
        }
    }
}

impl Agent for AnyAgent {
    fn name(&self) -> &str {
        self.inner_ref().name()
    }

    fn begin_cpi(&mut self, cpi: usize) {
        self.inner().begin_cpi(cpi)
    }

    fn act(&mut self, state: &EnvState, explore: bool) -> Result<usize, AgentError> {
        self.inner().act(state, explore)
    }

    fn observe(&mut self, t: &Transition, learn: bool) -> Result<Option<f64>, AgentError> {
        self.inner().observe(t, learn)
    }

    fn finish_offline(&mut self) -> Result<(), AgentError> {
        self.inner().finish_offline()
    }
}
