//! The runner's commands. Each writes its outputs under the scenario's
//! output directory and finishes with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cogradar_core::agent::{run_offline_training, run_online_evaluation, Agent, PhaseLog};
use cogradar_core::env::StepMetrics;
use cogradar_core::error::EnvError;
use cogradar_core::interference::{format_trace, InterferenceSource, MarkovGenerator, SweepGenerator};
use cogradar_core::mask::SubbandMask;
use cogradar_core::radar::{
    aggregate_metrics, ca_cfar_sweep, roc_points, score_detections, simulate_cpi, CpiOutcome, MetricsRow, RocPoint,
    TargetTrack,
};

use crate::agents::AnyAgent;
use crate::config::{derive_seed, AgentCfg, AgentKind, Phase, ScenarioConfig};
use crate::manifest::ManifestBuilder;

/// Everything a training run produced.
pub struct TrainOutcome {
    pub log: PhaseLog,
    pub checkpoint: Option<PathBuf>,
    pub manifest: PathBuf,
}

/// Everything an evaluation run produced.
pub struct EvalOutcome {
    pub log: PhaseLog,
    pub metrics: MetricsRow,
    pub manifest: PathBuf,
}

fn write_file(m: &mut ManifestBuilder, path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    m.add(path);
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn curve_csv(rewards: &[f64]) -> String {
    let mut s = String::from("cpi_index,mean_reward\n");
    for (i, r) in rewards.iter().enumerate() {
        let _ = writeln!(s, "{i},{r:.6}");
    }
    s
}

pub fn metrics_csv(row: &MetricsRow) -> String {
    format!("{}\n{}\n", MetricsRow::CSV_HEADER, row.to_csv_row())
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold_pfa,fa_rate,pd_rate\n");
    for p in points {
        let _ = writeln!(s, "{:e},{:e},{:.6}", p.threshold, p.fa_rate, p.pd_rate);
    }
    s
}

fn offline(cfg: &ScenarioConfig, agent: &mut AnyAgent) -> Result<PhaseLog> {
    let mut env = cfg.build_env(Phase::Offline)?;
    Ok(run_offline_training(
        agent,
        &mut env,
        cfg.phases.offline_cpis,
        cfg.phases.pulses_per_cpi,
    )?)
}

/// Agent ready for evaluation: from the configured checkpoint, or trained
/// in place when the kind learns offline.
pub fn prepare_agent(cfg: &ScenarioConfig) -> Result<AnyAgent> {
    if let Some(ck) = &cfg.agent.checkpoint {
        return AnyAgent::load(cfg, ck);
    }
    let mut agent = cfg.build_agent()?;
    if cfg.agent.kind.is_trained() {
        offline(cfg, &mut agent)?;
    }
    cfg.maybe_lut(agent)
}

pub fn cmd_train(cfg: &ScenarioConfig) -> Result<TrainOutcome> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let mut m = ManifestBuilder::new("train", &[cfg], dir);
    let mut agent = cfg.build_agent()?;
    let log = offline(cfg, &mut agent)?;
    let checkpoint = agent.save(cfg, dir)?;
    if let Some(p) = &checkpoint {
        m.add(p.clone());
    }
    if cfg.agent.lut {
        if let AnyAgent::Deep(d) = &agent {
            let lut = cogradar_core::deep::export_lut(d)?;
            write_file(&mut m, dir.join("lut.txt"), &lut.to_text())?;
        }
    }
    write_file(&mut m, dir.join("train_curve.csv"), &curve_csv(&log.cpi_mean_reward))?;
    let manifest = m.finish()?;
    Ok(TrainOutcome {
        log,
        checkpoint,
        manifest,
    })
}

pub fn cmd_eval(cfg: &ScenarioConfig) -> Result<EvalOutcome> {
    if cfg.agent.kind.is_trained() && cfg.agent.checkpoint.is_none() {
        bail!(
            "agent.checkpoint: evaluating a {} agent needs a checkpoint from `train`",
            cfg.agent.kind.name()
        );
    }
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let mut m = ManifestBuilder::new("eval", &[cfg], dir);
    let mut agent = prepare_agent(cfg)?;
    let (log, metrics) = evaluate(cfg, &mut agent)?;
    write_file(&mut m, dir.join("eval_curve.csv"), &curve_csv(&log.cpi_mean_reward))?;
    write_file(&mut m, dir.join("metrics.csv"), &metrics_csv(&metrics))?;
    let manifest = m.finish()?;
    Ok(EvalOutcome { log, metrics, manifest })
}

/// Evaluation phase plus its metrics row.
pub fn evaluate(cfg: &ScenarioConfig, agent: &mut AnyAgent) -> Result<(PhaseLog, MetricsRow)> {
    let mut env = cfg.build_env(Phase::Eval)?;
    let log = run_online_evaluation(
        agent,
        &mut env,
        cfg.phases.eval_cpis,
        cfg.phases.pulses_per_cpi,
        cfg.phases.continue_learning,
    )?;
    let metrics = aggregate_metrics(&log.steps, &cfg.channel_spec()?, &cfg.link.budget())?;
    Ok((log, metrics))
}

/// Configuration of the exact-dynamics oracle that shares `cfg`'s scene.
pub fn oracle_config(cfg: &ScenarioConfig) -> ScenarioConfig {
    let mut c = cfg.clone();
    c.agent = AgentCfg::new(AgentKind::Oracle);
    c
}

fn scene_key(cfg: &ScenarioConfig) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Scene<'a> {
        channel: &'a crate::config::ChannelCfg,
        interference: &'a crate::config::InterferenceCfg,
        reward: &'a crate::config::RewardCfg,
        kinematics: &'a crate::config::KinematicsCfg,
        phases: &'a crate::config::PhasesCfg,
        link: &'a crate::config::LinkCfg,
        seeds: &'a crate::config::SeedsCfg,
    }
    Ok(toml::to_string(&Scene {
        channel: &cfg.channel,
        interference: &cfg.interference,
        reward: &cfg.reward,
        kinematics: &cfg.kinematics,
        phases: &cfg.phases,
        link: &cfg.link,
        seeds: &cfg.seeds,
    })?)
}

/// Unique column labels: agent kinds, suffixed on repeats.
pub fn agent_labels(cfgs: &[ScenarioConfig]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    cfgs.iter()
        .map(|c| {
            let name = c.agent.kind.name();
            let k = seen.entry(name).or_insert(0);
            *k += 1;
            if *k == 1 {
                name.to_string()
            } else {
                format!("{name}_{k}")
            }
        })
        .collect()
}

fn require_shared_scene(cfgs: &[ScenarioConfig]) -> Result<()> {
    let Some(first) = cfgs.first() else {
        bail!("no configurations given");
    };
    let key = scene_key(first)?;
    for (i, c) in cfgs.iter().enumerate().skip(1) {
        if scene_key(c)? != key {
            bail!("configuration {i} differs from the first in channel, interference, reward, kinematics, phases, link or seeds");
        }
    }
    Ok(())
}

/// Runs each configuration's agent on one thread apiece.
fn fan_out<T: Send>(
    cfgs: &[ScenarioConfig],
    f: impl Fn(&ScenarioConfig) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = cfgs.iter().map(|c| s.spawn(|| f(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("worker panicked")))
            .collect()
    })
}

pub struct CompareOutcome {
    pub labels: Vec<String>,
    pub curves: Vec<Vec<f64>>,
    pub metrics: Vec<MetricsRow>,
    /// Per-CPI reward of the exact-dynamics oracle, when one exists.
    pub pi_star: Option<Vec<f64>>,
    pub manifest: PathBuf,
}

pub fn cmd_compare(cfgs: &[ScenarioConfig], out: &Path) -> Result<CompareOutcome> {
    require_shared_scene(cfgs)?;
    ensure_dir(out)?;
    let refs: Vec<&ScenarioConfig> = cfgs.iter().collect();
    let mut m = ManifestBuilder::new("compare", &refs, out);
    let labels = agent_labels(cfgs);

    let results = fan_out(cfgs, |c| {
        let mut agent = prepare_agent(c)?;
        evaluate(c, &mut agent)
    })?;
    let pi_star = match cfgs[0].oracle()? {
        Some(oracle) => {
            let oc = oracle_config(&cfgs[0]);
            let mut agent = AnyAgent::Oracle(oracle);
            Some(evaluate(&oc, &mut agent)?)
        }
        None => None,
    };

    let mut columns: Vec<(&str, &[f64])> = labels
        .iter()
        .zip(&results)
        .map(|(l, (log, _))| (l.as_str(), log.cpi_mean_reward.as_slice()))
        .collect();
    if let Some((log, _)) = &pi_star {
        columns.push(("pi_star", log.cpi_mean_reward.as_slice()));
    }
    let rows = columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut curve = String::from("cpi_index");
    for (l, _) in &columns {
        let _ = write!(curve, ",{l}_mean_reward");
    }
    curve.push('\n');
    for i in 0..rows {
        let _ = write!(curve, "{i}");
        for (_, c) in &columns {
            match c.get(i) {
                Some(r) => {
                    let _ = write!(curve, ",{r:.6}");
                }
                None => curve.push(','),
            }
        }
        curve.push('\n');
    }
    write_file(&mut m, out.join("compare_curve.csv"), &curve)?;

    let mut summary = format!("agent,mean_reward,{}\n", MetricsRow::CSV_HEADER);
    let mut all: Vec<(&str, &(PhaseLog, MetricsRow))> = labels.iter().map(|l| l.as_str()).zip(&results).collect();
    if let Some(p) = &pi_star {
        all.push(("pi_star", p));
    }
    for (l, (log, row)) in &all {
        let _ = writeln!(summary, "{l},{:.6},{}", mean(&log.cpi_mean_reward), row.to_csv_row());
    }
    write_file(&mut m, out.join("compare_summary.csv"), &summary)?;
    let manifest = m.finish()?;
    Ok(CompareOutcome {
        labels,
        curves: results.iter().map(|(l, _)| l.cpi_mean_reward.clone()).collect(),
        metrics: results.iter().map(|(_, r)| *r).collect(),
        pi_star: pi_star.map(|(l, _)| l.cpi_mean_reward),
        manifest,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Pulses of one radar CPI as chosen by an agent.
pub struct RadarCpi {
    pub steps: Vec<StepMetrics>,
    pub target: TargetTrack,
}

/// Greedy rollout of `roc_cpis` CPIs of `roc_pulses_per_cpi` pulses. The
/// target track starts at the environment's range cell with a physical
/// radial speed proportional to its velocity index.
pub fn radar_rollout(cfg: &ScenarioConfig, agent: &mut AnyAgent) -> Result<Vec<RadarCpi>> {
    let mut c = cfg.clone();
    c.phases.pulses_per_cpi = cfg.radar.roc_pulses_per_cpi;
    let mut env = c.build_env(Phase::Eval)?;
    let kin = c.kinematics();
    let mut cpis = Vec::with_capacity(cfg.radar.roc_cpis);
    'cpis: for i in 0..cfg.radar.roc_cpis {
        env.new_episode();
        agent.begin_cpi(i);
        let t0 = env.state().target;
        let target = TargetTrack {
            initial_range_m: t0.range_m,
            radial_velocity_mps: cfg.radar.speed_per_velocity_step_mps * kin.velocity_step(t0.velocity) as f64,
            amplitude_scale: cfg.radar.target_amplitude,
        };
        let mut steps = Vec::with_capacity(cfg.radar.roc_pulses_per_cpi);
        for _ in 0..cfg.radar.roc_pulses_per_cpi {
            let a = agent.act(env.state(), false)?;
            let (t, m) = match env.step(a) {
                Ok(v) => v,
                Err(EnvError::EndOfEpisode) => break 'cpis,
                Err(e) => return Err(e.into()),
            };
            agent.observe(&t, false)?;
            steps.push(m);
        }
        cpis.push(RadarCpi { steps, target });
    }
    Ok(cpis)
}

/// CFAR outcomes per threshold for one agent's rollout.
pub fn roc_for_agent(cfg: &ScenarioConfig, cpis: &[RadarCpi]) -> Result<Vec<RocPoint>> {
    let radar = cfg.radar_config();
    let link = cfg.link.budget();
    let cfar = cfg.cfar();
    let pfas = &cfg.radar.pfa_sweep;
    let mut outcomes: Vec<Vec<CpiOutcome>> = vec![Vec::with_capacity(cpis.len()); pfas.len()];
    for (i, cpi) in cpis.iter().enumerate() {
        let actions: Vec<SubbandMask> = cpi.steps.iter().map(|s| s.action).collect();
        let thetas: Vec<SubbandMask> = cpi.steps.iter().map(|s| s.theta).collect();
        if actions.is_empty() {
            continue;
        }
        let seed = derive_seed(cfg.seeds.noise, &format!("roc-cpi-{i}"));
        let map = simulate_cpi(&radar, &link, &actions, &thetas, Some(&cpi.target), seed)?;
        let truth = map
            .gate_of(cpi.target.initial_range_m)
            .map(|g| (g, map.doppler_bin_of(cpi.target.radial_velocity_mps, link.wavelength_m)));
        for (k, det) in ca_cfar_sweep(&map, &cfar, pfas)?.iter().enumerate() {
            outcomes[k].push(score_detections(det, truth));
        }
    }
    Ok(roc_points(pfas, &outcomes)?)
}

pub struct RocOutcome {
    pub labels: Vec<String>,
    pub curves: Vec<Vec<RocPoint>>,
    pub metrics: Vec<MetricsRow>,
    pub manifest: PathBuf,
}

pub fn cmd_roc(cfgs: &[ScenarioConfig], out: &Path) -> Result<RocOutcome> {
    require_shared_scene(cfgs)?;
    ensure_dir(out)?;
    let refs: Vec<&ScenarioConfig> = cfgs.iter().collect();
    let mut m = ManifestBuilder::new("roc", &refs, out);
    let labels = agent_labels(cfgs);
    let results = fan_out(cfgs, |c| {
        let mut agent = prepare_agent(c)?;
        let cpis = radar_rollout(c, &mut agent)?;
        let steps: Vec<StepMetrics> = cpis.iter().flat_map(|c| c.steps.iter().copied()).collect();
        let metrics = aggregate_metrics(&steps, &c.channel_spec()?, &c.link.budget())?;
        Ok((roc_for_agent(c, &cpis)?, metrics))
    })?;
    let mut summary = format!("agent,{}\n", MetricsRow::CSV_HEADER);
    for (l, (points, row)) in labels.iter().zip(&results) {
        write_file(&mut m, out.join(format!("roc_{l}.csv")), &roc_csv(points))?;
        let _ = writeln!(summary, "{l},{}", row.to_csv_row());
    }
    write_file(&mut m, out.join("roc_metrics.csv"), &summary)?;
    let manifest = m.finish()?;
    let (curves, metrics) = results.into_iter().unzip();
    Ok(RocOutcome {
        labels,
        curves,
        metrics,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TraceKind {
    Sweep,
    Markov,
}

/// Generator parameters for `trace-gen`.
#[derive(Debug, Clone)]
pub struct TraceSpec {
    pub kind: TraceKind,
    pub n_subbands: usize,
    pub phase: usize,
    pub p_switch: f64,
    pub active: String,
    pub length: usize,
    pub seed: u64,
}

pub fn generate_trace(spec: &TraceSpec) -> Result<Vec<SubbandMask>> {
    let mut src = match spec.kind {
        TraceKind::Sweep => {
            if spec.phase >= spec.n_subbands {
                bail!("phase {} must be below n_subbands {}", spec.phase, spec.n_subbands);
            }
            InterferenceSource::Sweep(SweepGenerator::with_phase(spec.n_subbands, spec.phase))
        }
        TraceKind::Markov => {
            let active: SubbandMask = spec.active.parse().with_context(|| format!("active mask {:?}", spec.active))?;
            if active.len() != spec.n_subbands {
                bail!("active mask has {} sub-bands, expected {}", active.len(), spec.n_subbands);
            }
            InterferenceSource::Markov(MarkovGenerator::new(spec.p_switch, active)?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "trace"));
    (0..spec.length).map(|_| Ok(src.next_theta(&mut rng)?)).collect()
}

pub fn cmd_trace_gen(spec: &TraceSpec, path: &Path) -> Result<()> {
    let frames = generate_trace(spec)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    std::fs::write(path, format_trace(&frames)).with_context(|| format!("writing {}", path.display()))
}
