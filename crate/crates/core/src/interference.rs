//! Interference sources.
//!
//! Each source emits one occupancy mask θ per radar pulse. Stochastic sources
//! draw from an RNG handed in by the owning environment, which keeps one
//! dedicated stream per source.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{EnvError, TraceError};
use crate::mask::SubbandMask;

/// One-band frequency-hopping sweep across the channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGenerator {
    n_subbands: usize,
    phase: usize,
}

impl SweepGenerator {
    pub fn new(n_subbands: usize) -> Self {
        Self { n_subbands, phase: 0 }
    }

    pub fn with_phase(n_subbands: usize, phase: usize) -> Self {
        Self { n_subbands, phase: phase % n_subbands }
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn next_theta(&mut self) -> SubbandMask {
        let theta = SubbandMask::one_hot(self.n_subbands, self.phase);
        self.phase = (self.phase + 1) % self.n_subbands;
        theta
    }
}

/// Two-state on/off interferer switching with a fixed probability per step.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGenerator {
    p_switch: f64,
    active_mask: SubbandMask,
    is_active: bool,
}

impl MarkovGenerator {
    /// Starts in the inactive state.
    pub fn new(p_switch: f64, active_mask: SubbandMask) -> Result<Self, EnvError> {
        check_probability(p_switch)?;
        Ok(Self {
            p_switch,
            active_mask,
            is_active: false,
        })
    }

    pub fn p_switch(&self) -> f64 {
        self.p_switch
    }

    pub fn set_p_switch(&mut self, p: f64) -> Result<(), EnvError> {
        check_probability(p)?;
        self.p_switch = p;
        Ok(())
    }

    pub fn active_mask(&self) -> SubbandMask {
        self.active_mask
    }

    pub fn is_active(&self) -> bool {
        self.is_active
    }

    /// One Bernoulli draw, flip if it succeeds, then emit.
    pub fn next_theta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SubbandMask {
        if rng.gen_bool(self.p_switch) {
            self.is_active = !self.is_active;
        }
        self.emission()
    }

    fn emission(&self) -> SubbandMask {
        if self.is_active {
            self.active_mask
        } else {
            SubbandMask::empty(self.active_mask.len())
        }
    }
}

fn check_probability(p: f64) -> Result<(), EnvError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(EnvError::InvalidParams(format!(
            "switch probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Markov interferer whose switch probability changes at CPI boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleGenerator {
    schedule: Vec<(usize, f64)>,
    inner: MarkovGenerator,
    pulses_per_cpi: usize,
    step: u64,
}

impl ScheduleGenerator {
    /// `schedule` holds `(cpi_index, p_switch)` pairs; each takes effect at
    /// the first pulse of its CPI and holds until the next entry.
    pub fn new(
        schedule: Vec<(usize, f64)>,
        active_mask: SubbandMask,
        pulses_per_cpi: usize,
    ) -> Result<Self, EnvError> {
        if schedule.is_empty() {
            return Err(EnvError::InvalidParams("empty schedule".into()));
        }
        if pulses_per_cpi == 0 {
            return Err(EnvError::InvalidParams("pulses_per_cpi must be positive".into()));
        }
        for w in schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(EnvError::InvalidParams(format!(
                    "schedule CPI indices must increase strictly ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(_, p) in &schedule {
            check_probability(p)?;
        }
        let inner = MarkovGenerator::new(schedule[0].1, active_mask)?;
        Ok(Self {
            schedule,
            inner,
            pulses_per_cpi,
            step: 0,
        })
    }

    /// The doubling schedule 0.1 → 0.2 → 0.4 → 0.6 → 0.8, one change every
    /// `segment_cpis` CPIs.
    pub fn escalating(
        active_mask: SubbandMask,
        pulses_per_cpi: usize,
        segment_cpis: usize,
    ) -> Result<Self, EnvError> {
        let ps = [0.1, 0.2, 0.4, 0.6, 0.8];
        let schedule = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| (i * segment_cpis, p))
            .collect();
        Self::new(schedule, active_mask, pulses_per_cpi)
    }

    pub fn schedule(&self) -> &[(usize, f64)] {
        &self.schedule
    }

    pub fn current_cpi(&self) -> usize {
        (self.step / self.pulses_per_cpi as u64) as usize
    }

    pub fn current_p(&self) -> f64 {
        self.inner.p_switch()
    }

    pub fn inner(&self) -> &MarkovGenerator {
        &self.inner
    }

    /// Switch probability in force at `cpi`.
    pub fn p_at(&self, cpi: usize) -> f64 {
        self.schedule
            .iter()
            .take_while(|(start, _)| *start <= cpi)
            .last()
            .map(|&(_, p)| p)
            .unwrap_or(self.schedule[0].1)
    }

    pub fn next_theta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SubbandMask {
        if self.step.is_multiple_of(self.pulses_per_cpi as u64) {
            let p = self.p_at(self.current_cpi());
            // probabilities were validated at construction
            self.inner.set_p_switch(p).expect("validated probability");
        }
        self.step += 1;
        self.inner.next_theta(rng)
    }
}

/// What happens when a trace replay reaches its last frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceEnd {
    #[default]
    Wrap,
    Terminate,
}

/// Replay of recorded (or generated) occupancy frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBuffer {
    frames: Vec<SubbandMask>,
    cursor: usize,
    end: TraceEnd,
}

impl TraceBuffer {
    pub fn new(frames: Vec<SubbandMask>) -> Result<Self, TraceError> {
        let Some(first) = frames.first() else {
            return Err(TraceError::Empty);
        };
        let width = first.len();
        if let Some(i) = frames.iter().position(|f| f.len() != width) {
            return Err(TraceError::Parse {
                line: i + 1,
                message: format!("expected {width} sub-bands, found {}", frames[i].len()),
            });
        }
        Ok(Self {
            frames,
            cursor: 0,
            end: TraceEnd::Wrap,
        })
    }

    pub fn with_end(mut self, end: TraceEnd) -> Self {
        self.end = end;
        self
    }

    pub fn frames(&self) -> &[SubbandMask] {
        &self.frames
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn n_subbands(&self) -> usize {
        self.frames[0].len()
    }

    /// True when the most recent emission was the final frame.
    pub fn at_end(&self) -> bool {
        self.cursor == self.frames.len()
    }

    pub fn next_theta(&mut self) -> Result<SubbandMask, EnvError> {
        if self.at_end() {
            match self.end {
                TraceEnd::Wrap => self.cursor = 0,
                TraceEnd::Terminate => return Err(EnvError::EndOfEpisode),
            }
        }
        let theta = self.frames[self.cursor];
        self.cursor += 1;
        Ok(theta)
    }
}

/// Deterministic cyclic sequence of masks (sweeps, TDD-like frame patterns).
#[derive(Debug, Clone, PartialEq)]
pub struct PatternGenerator {
    frames: Vec<SubbandMask>,
    phase: usize,
}

impl PatternGenerator {
    pub fn new(frames: Vec<SubbandMask>) -> Result<Self, EnvError> {
        let Some(first) = frames.first() else {
            return Err(EnvError::InvalidParams("empty pattern".into()));
        };
        if frames.iter().any(|f| f.len() != first.len()) {
            return Err(EnvError::InvalidParams("pattern frames differ in width".into()));
        }
        Ok(Self { frames, phase: 0 })
    }

    pub fn frames(&self) -> &[SubbandMask] {
        &self.frames
    }

    pub fn next_theta(&mut self) -> SubbandMask {
        let theta = self.frames[self.phase];
        self.phase = (self.phase + 1) % self.frames.len();
        theta
    }
}

/// One-step θ dynamics: for each source mask, successor masks and their
/// probabilities.
pub type ThetaDynamics = Vec<(SubbandMask, Vec<(SubbandMask, f64)>)>;

#[derive(Debug, Clone, PartialEq)]
pub enum InterferenceSource {
    Sweep(SweepGenerator),
    Markov(MarkovGenerator),
    Schedule(ScheduleGenerator),
    Trace(TraceBuffer),
    Pattern(PatternGenerator),
}

impl InterferenceSource {
    pub fn n_subbands(&self) -> usize {
        match self {
            Self::Sweep(g) => g.n_subbands,
            Self::Markov(g) => g.active_mask.len(),
            Self::Schedule(g) => g.inner.active_mask.len(),
            Self::Trace(t) => t.n_subbands(),
            Self::Pattern(p) => p.frames[0].len(),
        }
    }

    pub fn next_theta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<SubbandMask, EnvError> {
        Ok(match self {
            Self::Sweep(g) => g.next_theta(),
            Self::Markov(g) => g.next_theta(rng),
            Self::Schedule(g) => g.next_theta(rng),
            Self::Trace(t) => t.next_theta()?,
            Self::Pattern(p) => p.next_theta(),
        })
    }

    /// True right after a trace replay has emitted its final frame.
    pub fn at_trace_end(&self) -> bool {
        matches!(self, Self::Trace(t) if t.at_end())
    }

    /// Exact one-step θ → θ′ dynamics under the current parameters, for
    /// sources whose next mask depends only on the current one.
    pub fn exact_dynamics(&self) -> Option<ThetaDynamics> {
        match self {
            Self::Sweep(g) => {
                let n = g.n_subbands;
                Some(
                    (0..n)
                        .map(|k| {
                            (
                                SubbandMask::one_hot(n, k),
                                vec![(SubbandMask::one_hot(n, (k + 1) % n), 1.0)],
                            )
                        })
                        .collect(),
                )
            }
            Self::Markov(g) => Some(markov_dynamics(g.p_switch, g.active_mask)),
            Self::Schedule(g) => Some(markov_dynamics(g.current_p(), g.inner.active_mask)),
            Self::Trace(_) | Self::Pattern(_) => None,
        }
    }
}

fn markov_dynamics(p: f64, active: SubbandMask) -> ThetaDynamics {
    let off = SubbandMask::empty(active.len());
    vec![
        (off, vec![(off, 1.0 - p), (active, p)]),
        (active, vec![(active, 1.0 - p), (off, p)]),
    ]
}

/// Thresholds per-band power (dB) into occupancy; a band at exactly the
/// threshold counts as occupied.
pub fn binarize_power(powers_db: &[f64], threshold_db: f64) -> Result<SubbandMask, EnvError> {
    if let Some(i) = powers_db.iter().position(|p| !p.is_finite()) {
        return Err(EnvError::InvalidParams(format!("non-finite power at band {i}")));
    }
    let values: Vec<u8> = powers_db.iter().map(|&p| u8::from(p >= threshold_db)).collect();
    SubbandMask::from_slice(&values)
}

/// Parses the binary trace format: one comma-separated row of `0`/`1` per
/// time step. A single trailing newline is allowed; any other blank line is
/// an error.
pub fn parse_trace(text: &str) -> Result<TraceBuffer, TraceError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let body = body.strip_suffix('\r').unwrap_or(body);
    if body.trim().is_empty() {
        return Err(TraceError::Empty);
    }
    let mut frames = Vec::new();
    let mut width = None;
    for (i, raw) in body.split('\n').enumerate() {
        let line = i + 1;
        let row = raw.trim_end_matches('\r');
        let mut values = Vec::new();
        for tok in row.split(',') {
            match tok.trim() {
                "0" => values.push(0u8),
                "1" => values.push(1u8),
                other => {
                    return Err(TraceError::Parse {
                        line,
                        message: format!("token {other:?} is not 0 or 1"),
                    })
                }
            }
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(TraceError::Parse {
                    line,
                    message: format!("expected {w} sub-bands, found {}", values.len()),
                })
            }
            _ => {}
        }
        let mask = SubbandMask::from_slice(&values).map_err(|e| TraceError::Parse {
            line,
            message: e.to_string(),
        })?;
        frames.push(mask);
    }
    TraceBuffer::new(frames)
}

pub fn load_trace(path: &Path) -> Result<TraceBuffer, TraceError> {
    let text = read(path)?;
    parse_trace(&text)
}

/// Parses the power-spectrum variant: a header `threshold_db=<value>` and
/// then one comma-separated row of per-band powers in dB per time step.
pub fn parse_power_trace(text: &str) -> Result<TraceBuffer, TraceError> {
    let mut lines = text.lines().enumerate();
    let threshold = match lines.next() {
        Some((_, header)) => header
            .trim()
            .strip_prefix("threshold_db=")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or_else(|| TraceError::Parse {
                line: 1,
                message: "expected header `threshold_db=<value>`".into(),
            })?,
        None => return Err(TraceError::Empty),
    };
    let mut frames = Vec::new();
    for (i, row) in lines {
        let line = i + 1;
        if row.trim().is_empty() {
            return Err(TraceError::Parse {
                line,
                message: "blank row".into(),
            });
        }
        let powers = row
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TraceError::Parse {
                line,
                message: e.to_string(),
            })?;
        let mask = binarize_power(&powers, threshold).map_err(|e| TraceError::Parse {
            line,
            message: e.to_string(),
        })?;
        frames.push(mask);
    }
    if frames.is_empty() {
        return Err(TraceError::Empty);
    }
    TraceBuffer::new(frames)
}

pub fn load_power_trace(path: &Path) -> Result<TraceBuffer, TraceError> {
    let text = read(path)?;
    parse_power_trace(&text)
}

fn read(path: &Path) -> Result<String, TraceError> {
    fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders frames in the binary trace format.
pub fn format_trace(frames: &[SubbandMask]) -> String {
    let mut out = String::with_capacity(frames.len() * 10);
    for f in frames {
        out.push_str(&f.to_csv_row());
        out.push('\n');
    }
    out
}
