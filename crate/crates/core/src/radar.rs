//! Physical-layer evaluation: link-budget SINR, LFM pulses, pulse-Doppler
//! processing, CA-CFAR detection, ROC points and per-run metrics.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::env::{ChannelSpec, StepMetrics};
use crate::error::RadarError;
use crate::mask::SubbandMask;

pub const BOLTZMANN: f64 = 1.380649e-23;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Monostatic link budget. Gains are linear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub transmit_power_w: f64,
    pub tx_gain: f64,
    pub rx_gain: f64,
    pub wavelength_m: f64,
    pub rcs_m2: f64,
    pub noise_temp_k: f64,
    pub loss_factor: f64,
    pub interference_power_w: f64,
}

impl Default for LinkBudget {
    /// A 3.5 GHz, 100 W radar with 15 dBi antennas against a 0.1 m² target.
    fn default() -> Self {
        Self {
            transmit_power_w: 100.0,
            tx_gain: 31.622_776_601_683_793,
            rx_gain: 31.622_776_601_683_793,
            wavelength_m: SPEED_OF_LIGHT / 3.5e9,
            rcs_m2: 0.1,
            noise_temp_k: 290.0,
            loss_factor: 2.0,
            interference_power_w: 1e-11,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<(), RadarError> {
        let fields = [
            ("transmit_power_w", self.transmit_power_w),
            ("tx_gain", self.tx_gain),
            ("rx_gain", self.rx_gain),
            ("wavelength_m", self.wavelength_m),
            ("rcs_m2", self.rcs_m2),
            ("noise_temp_k", self.noise_temp_k),
            ("loss_factor", self.loss_factor),
            ("interference_power_w", self.interference_power_w),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(RadarError::InvalidLink(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn carrier_hz(&self) -> f64 {
        SPEED_OF_LIGHT / self.wavelength_m
    }

    /// Received target power at `range_m`.
    pub fn signal_power_w(&self, range_m: f64) -> f64 {
        self.transmit_power_w * self.tx_gain * self.rx_gain * self.wavelength_m.powi(2) * self.rcs_m2
            / ((4.0 * PI).powi(3) * range_m.powi(4))
    }

    /// Thermal noise power in `bandwidth_hz`.
    pub fn noise_power_w(&self, bandwidth_hz: f64) -> f64 {
        BOLTZMANN * self.noise_temp_k * self.loss_factor * bandwidth_hz
    }
}

/// SINR in dB for a waveform of `bandwidth_hz` that collides with
/// `n_collisions` of `n_subbands` occupied sub-bands.
pub fn sinr(
    link: &LinkBudget,
    range_m: f64,
    n_collisions: usize,
    n_subbands: usize,
    bandwidth_hz: f64,
) -> Result<f64, RadarError> {
    link.validate()?;
    if !(range_m > 0.0) {
        return Err(RadarError::InvalidLink(format!("range {range_m} m must be positive")));
    }
    if !(bandwidth_hz > 0.0) {
        return Err(RadarError::InvalidLink(format!("bandwidth {bandwidth_hz} Hz must be positive")));
    }
    if n_subbands == 0 || n_collisions > n_subbands {
        return Err(RadarError::InvalidLink(format!(
            "{n_collisions} collisions out of {n_subbands} sub-bands"
        )));
    }
    let signal = link.signal_power_w(range_m);
    let interference = n_collisions as f64 / n_subbands as f64 * link.interference_power_w;
    Ok(10.0 * (signal / (link.noise_power_w(bandwidth_hz) + interference)).log10())
}

pub fn adaptation_flag(a_t: SubbandMask, a_prev: SubbandMask) -> bool {
    a_t != a_prev
}

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub avg_sinr_db: f64,
    pub avg_bandwidth_mhz: f64,
    pub pct_collision_steps: f64,
    pub pct_missed_opp_steps: f64,
    pub pct_adaptation_steps: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "avg_sinr_db,avg_bandwidth_mhz,collision_steps_percent,missed_opportunity_steps_percent,adaptation_steps_percent";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.avg_sinr_db,
            self.avg_bandwidth_mhz,
            self.pct_collision_steps,
            self.pct_missed_opp_steps,
            self.pct_adaptation_steps
        )
    }
}

/// Aggregates a step log.
///
/// A missed-opportunity step is a collision-free step that still left free
/// sub-bands unused. Adaptation is a percentage of the steps that have a
/// predecessor.
pub fn aggregate_metrics(
    steps: &[StepMetrics],
    channel: &ChannelSpec,
    link: &LinkBudget,
) -> Result<MetricsRow, RadarError> {
    if steps.is_empty() {
        return Err(RadarError::Empty("no steps to aggregate".into()));
    }
    let n = steps.len() as f64;
    let sub_bw = channel.subband_bandwidth_hz();
    let mut sinr_sum = 0.0;
    let mut bw_sum = 0.0;
    let mut collisions = 0usize;
    let mut missed = 0usize;
    let mut adapted = 0usize;
    let mut with_prev = 0usize;
    for m in steps {
        let bw = m.bandwidth_subbands as f64 * sub_bw;
        sinr_sum += sinr(link, m.range_m, m.collisions, channel.n_subbands(), bw)?;
        bw_sum += bw;
        if m.collisions > 0 {
            collisions += 1;
        } else if m.missed_opportunities > 0 {
            missed += 1;
        }
        if let Some(a) = m.adapted {
            with_prev += 1;
            adapted += usize::from(a);
        }
    }
    Ok(MetricsRow {
        avg_sinr_db: sinr_sum / n,
        avg_bandwidth_mhz: bw_sum / n / 1e6,
        pct_collision_steps: 100.0 * collisions as f64 / n,
        pct_missed_opp_steps: 100.0 * missed as f64 / n,
        pct_adaptation_steps: if with_prev == 0 {
            0.0
        } else {
            100.0 * adapted as f64 / with_prev as f64
        },
    })
}

/// Complex-baseband LFM pulse. Frequencies are relative to the channel centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfmWaveform {
    pub center_freq_hz: f64,
    pub sweep_bandwidth_hz: f64,
    pub pulse_duration_s: f64,
    pub sample_rate_hz: f64,
}

impl LfmWaveform {
    /// Chirp spanning exactly the sub-bands of `action`.
    pub fn from_action(
        action: SubbandMask,
        channel: &ChannelSpec,
        pulse_duration_s: f64,
        sample_rate_hz: f64,
    ) -> Result<Self, RadarError> {
        let (start, len) = action
            .run_bounds()
            .ok_or_else(|| RadarError::InvalidWaveform(format!("{action} is not a contiguous run")))?;
        let sub = channel.subband_bandwidth_hz();
        let lo = -channel.total_bandwidth_hz() / 2.0 + start as f64 * sub;
        let bw = len as f64 * sub;
        let w = Self {
            center_freq_hz: lo + bw / 2.0,
            sweep_bandwidth_hz: bw,
            pulse_duration_s,
            sample_rate_hz,
        };
        if bw > channel.total_bandwidth_hz() {
            return Err(RadarError::InvalidWaveform("sweep exceeds the channel".into()));
        }
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RadarError> {
        if !(self.pulse_duration_s > 0.0 && self.sample_rate_hz > 0.0 && self.sweep_bandwidth_hz >= 0.0) {
            return Err(RadarError::InvalidWaveform(format!("{self:?}")));
        }
        let nyquist_bw = 2.0 * self.sweep_bandwidth_hz;
        let edge = 2.0 * (self.center_freq_hz.abs() + self.sweep_bandwidth_hz / 2.0);
        let required = nyquist_bw.max(edge);
        if self.sample_rate_hz < required {
            return Err(RadarError::Undersampled {
                sample_rate_hz: self.sample_rate_hz,
                required_hz: required,
            });
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.pulse_duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn f_lo(&self) -> f64 {
        self.center_freq_hz - self.sweep_bandwidth_hz / 2.0
    }

    /// Value at continuous time `t`; zero outside the pulse.
    pub fn value_at(&self, t: f64) -> Complex64 {
        if !(0.0..self.pulse_duration_s).contains(&t) {
            return Complex64::new(0.0, 0.0);
        }
        let k = self.sweep_bandwidth_hz / self.pulse_duration_s;
        Complex64::from_polar(1.0, 2.0 * PI * (self.f_lo() * t + 0.5 * k * t * t))
    }
}

pub fn synth_chirp(w: &LfmWaveform) -> Result<Vec<Complex64>, RadarError> {
    w.validate()?;
    Ok((0..w.n_samples())
        .map(|n| w.value_at(n as f64 / w.sample_rate_hz))
        .collect())
}

/// Pulse-Doppler processing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarConfig {
    pub channel: ChannelSpec,
    pub pulse_duration_s: f64,
    pub sample_rate_hz: f64,
    pub pri_s: f64,
    pub range_min_m: f64,
    pub range_max_m: f64,
    pub include_noise: bool,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            channel: ChannelSpec::default(),
            pulse_duration_s: 20e-6,
            sample_rate_hz: 200e6,
            pri_s: 0.41e-3,
            range_min_m: 2000.0,
            range_max_m: 3000.0,
            include_noise: true,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<(), RadarError> {
        if !(self.pulse_duration_s > 0.0 && self.pri_s > self.pulse_duration_s) {
            return Err(RadarError::InvalidWaveform("PRI must exceed a positive pulse length".into()));
        }
        if !(self.range_min_m > 0.0 && self.range_max_m > self.range_min_m) {
            return Err(RadarError::InvalidWaveform("range window must be positive and increasing".into()));
        }
        if self.sample_rate_hz < self.channel.total_bandwidth_hz() {
            return Err(RadarError::Undersampled {
                sample_rate_hz: self.sample_rate_hz,
                required_hz: self.channel.total_bandwidth_hz(),
            });
        }
        Ok(())
    }

    pub fn gate_spacing_m(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.sample_rate_hz)
    }

    pub fn n_gates(&self) -> usize {
        ((self.range_max_m - self.range_min_m) / self.gate_spacing_m()).floor() as usize + 1
    }

    pub fn pulse_samples(&self) -> usize {
        (self.pulse_duration_s * self.sample_rate_hz).round() as usize
    }
}

/// Constant-velocity point target. Positive velocity recedes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTrack {
    pub initial_range_m: f64,
    pub radial_velocity_mps: f64,
    /// Scales the echo amplitude; zero removes the target.
    pub amplitude_scale: f64,
}

impl TargetTrack {
    pub fn range_at(&self, pulse: usize, pri_s: f64) -> f64 {
        self.initial_range_m + self.radial_velocity_mps * pulse as f64 * pri_s
    }
}

/// Complex range-Doppler response, gates by Doppler bins. Doppler bin 0 is
/// zero Doppler; bins are not shifted.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeDopplerMap {
    pub data: Array2<Complex64>,
    pub range_start_m: f64,
    pub gate_spacing_m: f64,
    pub pri_s: f64,
}

impl RangeDopplerMap {
    pub fn n_gates(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_doppler(&self) -> usize {
        self.data.ncols()
    }

    pub fn power(&self) -> Array2<f64> {
        self.data.mapv(|z| z.norm_sqr())
    }

    pub fn gate_of(&self, range_m: f64) -> Option<usize> {
        let g = ((range_m - self.range_start_m) / self.gate_spacing_m).round();
        (g >= 0.0 && (g as usize) < self.n_gates()).then_some(g as usize)
    }

    /// Bin holding the echo of a target with this radial velocity.
    pub fn doppler_bin_of(&self, radial_velocity_mps: f64, wavelength_m: f64) -> usize {
        let n = self.n_doppler() as f64;
        let f = -2.0 * radial_velocity_mps / wavelength_m;
        let bin = (f * self.pri_s * n).round().rem_euclid(n);
        bin as usize % self.n_doppler()
    }

    /// Strongest Doppler sidelobe at `gate` relative to the peak, excluding
    /// the peak bin and its two neighbours.
    pub fn doppler_sidelobe_ratio(&self, gate: usize) -> f64 {
        let row: Vec<f64> = self.data.row(gate).iter().map(|z| z.norm_sqr()).collect();
        let n = row.len();
        let (peak_bin, peak) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        if peak <= 0.0 {
            return 0.0;
        }
        let side = row
            .iter()
            .enumerate()
            .filter(|(i, _)| circular_distance(*i, peak_bin, n) > 1)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        side / peak
    }

    /// Binary dump: `RDM1`, rows and columns as little-endian u64, then
    /// row-major (re, im) pairs as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"RDM1")?;
        w.write_all(&(self.n_gates() as u64).to_le_bytes())?;
        w.write_all(&(self.n_doppler() as u64).to_le_bytes())?;
        for z in self.data.iter() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
        Ok(())
    }

    /// Power in dB, one row per range gate.
    pub fn write_magnitude_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "range_m")?;
        for d in 0..self.n_doppler() {
            write!(w, ",bin{d}_db")?;
        }
        writeln!(w)?;
        for (g, row) in self.data.rows().into_iter().enumerate() {
            write!(w, "{:.3}", self.range_start_m + g as f64 * self.gate_spacing_m)?;
            for z in row {
                write!(w, ",{:.3}", 10.0 * z.norm_sqr().max(1e-300).log10())?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn circular_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

fn complex_noise(rng: &mut ChaCha8Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Simulates one CPI and returns its range-Doppler map.
///
/// Each pulse is the chirp of its action delayed to the target, phased by
/// the carrier, plus white noise over the sampled band and band-limited
/// interference in every occupied sub-band the chirp overlaps. Each occupied
/// sub-band carries an equal share of the interference power.
pub fn simulate_cpi(
    cfg: &RadarConfig,
    link: &LinkBudget,
    actions: &[SubbandMask],
    interference: &[SubbandMask],
    target: Option<&TargetTrack>,
    noise_seed: u64,
) -> Result<RangeDopplerMap, RadarError> {
    cfg.validate()?;
    link.validate()?;
    if actions.len() != interference.len() {
        return Err(RadarError::Misaligned(format!(
            "{} actions vs {} interference masks",
            actions.len(),
            interference.len()
        )));
    }
    if actions.is_empty() {
        return Err(RadarError::Empty("CPI has no pulses".into()));
    }
    let n_sub = cfg.channel.n_subbands();
    if let Some(m) = actions.iter().chain(interference).find(|m| m.len() != n_sub) {
        return Err(RadarError::Misaligned(format!("mask {m} does not have {n_sub} sub-bands")));
    }

    let fs = cfg.sample_rate_hz;
    let n_pulse = cfg.pulse_samples();
    let n_gates = cfg.n_gates();
    let n_window = n_gates + n_pulse - 1;
    let fft_len = n_window.next_power_of_two();
    let t0 = 2.0 * cfg.range_min_m / SPEED_OF_LIGHT;
    let carrier = link.carrier_hz();
    let noise_var = link.noise_power_w(fs);
    let sub_bw = cfg.channel.subband_bandwidth_hz();
    let half_band = cfg.channel.total_bandwidth_hz() / 2.0;

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);

    let bin_freq = |k: usize| -> f64 {
        let k = if k < fft_len / 2 { k as f64 } else { k as f64 - fft_len as f64 };
        k * fs / fft_len as f64
    };

    let n_pulses = actions.len();
    let mut slow = Array2::<Complex64>::zeros((n_gates, n_pulses));
    let mut rx = vec![Complex64::new(0.0, 0.0); fft_len];
    let mut reference = vec![Complex64::new(0.0, 0.0); fft_len];

    for (p, (&action, &theta)) in actions.iter().zip(interference).enumerate() {
        let w = LfmWaveform::from_action(action, &cfg.channel, cfg.pulse_duration_s, fs)?;

        rx.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        if let Some(t) = target {
            let range = t.range_at(p, cfg.pri_s);
            let amp = t.amplitude_scale * link.signal_power_w(range).sqrt();
            if amp > 0.0 {
                let tau = 2.0 * range / SPEED_OF_LIGHT;
                let carrier_phase = Complex64::from_polar(amp, -2.0 * PI * carrier * tau);
                for (n, z) in rx.iter_mut().take(n_window).enumerate() {
                    let v = w.value_at(t0 + n as f64 / fs - tau);
                    if v.re != 0.0 || v.im != 0.0 {
                        *z = v * carrier_phase;
                    }
                }
            }
        }
        fwd.process(&mut rx);

        // Additive terms are drawn directly in the frequency domain: a time
        // series of variance v has per-bin variance `fft_len * v` under the
        // unnormalised transform.
        if cfg.include_noise {
            let bin_var = fft_len as f64 * noise_var;
            for z in rx.iter_mut() {
                *z += complex_noise(&mut rng, bin_var);
            }
        }
        let occupied = theta.count_ones();
        if occupied > 0 {
            let share = link.interference_power_w / occupied as f64;
            let (a_lo, a_hi) = (w.f_lo(), w.f_lo() + w.sweep_bandwidth_hz);
            for j in theta.iter().enumerate().filter(|(_, on)| *on).map(|(j, _)| j) {
                let lo = -half_band + j as f64 * sub_bw;
                let hi = lo + sub_bw;
                if hi <= a_lo || lo >= a_hi {
                    continue;
                }
                let bins: Vec<usize> = (0..fft_len).filter(|&k| (lo..hi).contains(&bin_freq(k))).collect();
                if bins.is_empty() {
                    continue;
                }
                let bin_var = (fft_len as f64).powi(2) * share / bins.len() as f64;
                for k in bins {
                    rx[k] += complex_noise(&mut rng, bin_var);
                }
            }
        }

        reference.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for (n, z) in reference.iter_mut().take(n_pulse).enumerate() {
            *z = w.value_at(n as f64 / fs);
        }
        fwd.process(&mut reference);
        for (r, s) in rx.iter_mut().zip(&reference) {
            *r *= s.conj();
        }
        inv.process(&mut rx);
        let scale = 1.0 / fft_len as f64;
        for g in 0..n_gates {
            slow[[g, p]] = rx[g] * scale;
        }
    }

    let doppler = planner.plan_fft_forward(n_pulses);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_pulses];
    for mut row in slow.rows_mut() {
        buf.iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        doppler.process(&mut buf);
        row.iter_mut().zip(&buf).for_each(|(v, b)| *v = *b);
    }
    Ok(RangeDopplerMap {
        data: slow,
        range_start_m: cfg.range_min_m,
        gate_spacing_m: cfg.gate_spacing_m(),
        pri_s: cfg.pri_s,
    })
}

/// Cell-averaging CFAR window: `(range, doppler)` half-widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfarConfig {
    pub guard_cells: (usize, usize),
    pub training_cells: (usize, usize),
    pub desired_pfa: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            guard_cells: (12, 2),
            training_cells: (16, 4),
            desired_pfa: 1e-3,
        }
    }
}

impl CfarConfig {
    pub fn validate(&self) -> Result<(), RadarError> {
        if self.training_cells.0 == 0 || self.training_cells.1 == 0 {
            return Err(RadarError::DegenerateWindow("training cells must be at least 1 per side".into()));
        }
        if !(self.desired_pfa > 0.0 && self.desired_pfa < 1.0) {
            return Err(RadarError::DegenerateWindow(format!("pfa {} outside (0, 1)", self.desired_pfa)));
        }
        Ok(())
    }
}

/// Threshold multiplier for `n` exponentially distributed training cells.
pub fn ca_cfar_scale(pfa: f64, n: usize) -> f64 {
    n as f64 * (pfa.powf(-1.0 / n as f64) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfarOutput {
    pub detections: Array2<bool>,
    pub threshold: Array2<f64>,
}

/// Training-cell power sums and counts, with the window truncated at the
/// map edges.
struct TrainingStats {
    mean: Array2<f64>,
    count: Array2<usize>,
}

fn training_stats(power: &Array2<f64>, cfg: &CfarConfig) -> TrainingStats {
    let (rows, cols) = power.dim();
    let mut prefix = Array2::<f64>::zeros((rows + 1, cols + 1));
    for r in 0..rows {
        for c in 0..cols {
            prefix[[r + 1, c + 1]] = power[[r, c]] + prefix[[r, c + 1]] + prefix[[r + 1, c]] - prefix[[r, c]];
        }
    }
    // Inclusive box sum and area, clipped to the map.
    let boxed = |r: usize, c: usize, hr: usize, hc: usize| -> (f64, usize) {
        let r0 = r.saturating_sub(hr);
        let c0 = c.saturating_sub(hc);
        let r1 = (r + hr + 1).min(rows);
        let c1 = (c + hc + 1).min(cols);
        let s = prefix[[r1, c1]] - prefix[[r0, c1]] - prefix[[r1, c0]] + prefix[[r0, c0]];
        (s, (r1 - r0) * (c1 - c0))
    };
    let (gr, gc) = cfg.guard_cells;
    let (tr, tc) = cfg.training_cells;
    let mut mean = Array2::<f64>::zeros((rows, cols));
    let mut count = Array2::<usize>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let (outer, n_outer) = boxed(r, c, gr + tr, gc + tc);
            let (inner, n_inner) = boxed(r, c, gr, gc);
            let n = n_outer - n_inner;
            count[[r, c]] = n;
            if n > 0 {
                mean[[r, c]] = (outer - inner).max(0.0) / n as f64;
            }
        }
    }
    TrainingStats { mean, count }
}

/// Two-dimensional cell-averaging CFAR over a square annulus. A cell is a
/// detection when its power strictly exceeds its threshold.
pub fn ca_cfar(map: &RangeDopplerMap, cfg: &CfarConfig) -> Result<CfarOutput, RadarError> {
    cfar_power(&map.power(), cfg)
}

pub fn cfar_power(power: &Array2<f64>, cfg: &CfarConfig) -> Result<CfarOutput, RadarError> {
    cfg.validate()?;
    let stats = checked_stats(power, cfg)?;
    let (rows, cols) = power.dim();
    let mut threshold = Array2::<f64>::zeros((rows, cols));
    let mut detections = Array2::from_elem((rows, cols), false);
    for ((r, c), &p) in power.indexed_iter() {
        let n = stats.count[[r, c]];
        if n == 0 {
            threshold[[r, c]] = f64::INFINITY;
            continue;
        }
        let t = ca_cfar_scale(cfg.desired_pfa, n) * stats.mean[[r, c]];
        threshold[[r, c]] = t;
        detections[[r, c]] = p > t;
    }
    Ok(CfarOutput { detections, threshold })
}

fn checked_stats(power: &Array2<f64>, cfg: &CfarConfig) -> Result<TrainingStats, RadarError> {
    let (rows, cols) = power.dim();
    let (gr, gc) = cfg.guard_cells;
    if rows <= 2 * gr + 1 && cols <= 2 * gc + 1 {
        return Err(RadarError::DegenerateWindow(format!(
            "{rows}x{cols} map leaves no training cells outside the guard band"
        )));
    }
    Ok(training_stats(power, cfg))
}

/// Detection masks for several false-alarm settings over one window; the
/// `desired_pfa` of `cfg` is ignored.
pub fn ca_cfar_sweep(map: &RangeDopplerMap, cfg: &CfarConfig, pfas: &[f64]) -> Result<Vec<Array2<bool>>, RadarError> {
    for &pfa in pfas {
        CfarConfig { desired_pfa: pfa, ..*cfg }.validate()?;
    }
    let power = map.power();
    let stats = checked_stats(&power, cfg)?;
    Ok(pfas
        .iter()
        .map(|&pfa| {
            let mut det = Array2::from_elem(power.dim(), false);
            for ((r, c), &p) in power.indexed_iter() {
                let n = stats.count[[r, c]];
                det[[r, c]] = n > 0 && p > ca_cfar_scale(pfa, n) * stats.mean[[r, c]];
            }
            det
        })
        .collect())
}

/// Detection outcome of one CPI at one threshold setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpiOutcome {
    pub target_detected: bool,
    /// Detections outside the target neighbourhood.
    pub false_alarms: usize,
    /// Cells outside the target neighbourhood.
    pub n_cells: usize,
}

/// Scores a detection mask: a hit within one gate and one Doppler bin of
/// the truth (Doppler wraps) detects the target, every other hit is a false
/// alarm. With no target every hit is a false alarm.
pub fn score_detections(detections: &Array2<bool>, truth: Option<(usize, usize)>) -> CpiOutcome {
    let (rows, cols) = detections.dim();
    let near = |r: usize, c: usize| match truth {
        Some((tg, tb)) => r.abs_diff(tg) <= 1 && circular_distance(c, tb, cols) <= 1,
        None => false,
    };
    let mut detected = false;
    let mut false_alarms = 0;
    let mut n_near = 0;
    for r in 0..rows {
        for c in 0..cols {
            if near(r, c) {
                n_near += 1;
                detected |= detections[[r, c]];
            } else if detections[[r, c]] {
                false_alarms += 1;
            }
        }
    }
    CpiOutcome {
        target_detected: detected,
        false_alarms,
        n_cells: rows * cols - n_near,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa_rate: f64,
    pub pd_rate: f64,
}

/// `(fa_rate, pd_rate)` over a set of CPIs at one threshold.
pub fn roc_point(outcomes: &[CpiOutcome]) -> Result<(f64, f64), RadarError> {
    if outcomes.is_empty() {
        return Err(RadarError::Empty("no CPIs".into()));
    }
    let n = outcomes.len() as f64;
    let missed = outcomes.iter().filter(|o| !o.target_detected).count() as f64;
    let fa: usize = outcomes.iter().map(|o| o.false_alarms).sum();
    let cells: usize = outcomes.iter().map(|o| o.n_cells).sum();
    let fa_rate = if cells == 0 { 0.0 } else { fa as f64 / cells as f64 };
    Ok((fa_rate, 1.0 - missed / n))
}

/// One ROC point per threshold; `outcomes[i]` holds every CPI scored at
/// `thresholds[i]`. Points come back sorted by FA rate.
pub fn roc_points(thresholds: &[f64], outcomes: &[Vec<CpiOutcome>]) -> Result<Vec<RocPoint>, RadarError> {
    if thresholds.len() != outcomes.len() {
        return Err(RadarError::Misaligned(format!(
            "{} thresholds vs {} outcome sets",
            thresholds.len(),
            outcomes.len()
        )));
    }
    let mut points = thresholds
        .iter()
        .zip(outcomes)
        .map(|(&threshold, o)| {
            roc_point(o).map(|(fa_rate, pd_rate)| RocPoint {
                threshold,
                fa_rate,
                pd_rate,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|a, b| a.fa_rate.total_cmp(&b.fa_rate).then(a.pd_rate.total_cmp(&b.pd_rate)));
    Ok(points)
}

/// Linear interpolation of PD at `fa` along a sorted ROC; `None` outside
/// the covered FA span.
pub fn pd_at_fa(points: &[RocPoint], fa: f64) -> Option<f64> {
    let i = points.iter().position(|p| p.fa_rate >= fa)?;
    if points[i].fa_rate == fa || i == 0 {
        return (points[i].fa_rate == fa).then_some(points[i].pd_rate);
    }
    let (a, b) = (points[i - 1], points[i]);
    let w = (fa - a.fa_rate) / (b.fa_rate - a.fa_rate);
    Some(a.pd_rate + w * (b.pd_rate - a.pd_rate))
}
