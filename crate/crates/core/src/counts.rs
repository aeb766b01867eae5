//! Photon counting for a pulsed pair source.
//!
//! Each pump pulse emits a random number of pairs. Every photon survives its
//! arm independently with probability `η = coupling · filter · detector`, and
//! detectors are threshold (click / no click). A coincidence is a signal and
//! an idler click inside one window; it is *true* when some pair had both
//! photons detected, otherwise accidental.
//!
//! Thinning a pair-number distribution with generating function `G` gives
//! `P(no detected photon in categories of total probability q) = G(1 − q)`,
//! which yields every closed form used below.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::rng::stream_rng;
use crate::source::{predicted_fidelity, predicted_visibility, FringeBasis, SourceParams};

/// Pulses per simulation block. Blocks are seeded independently, so results
/// do not depend on how blocks are spread over threads.
pub const BLOCK_PULSES: u64 = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairStatistics {
    /// Many spectral modes.
    #[default]
    Poisson,
    /// Single spectral mode.
    Thermal,
}

impl PairStatistics {
    /// `G(1 − q)`: probability that none of the pairs lands in a category of
    /// per-pair probability `q`.
    fn none_in(self, mu: f64, q: f64) -> f64 {
        match self {
            PairStatistics::Poisson => (-mu * q).exp(),
            PairStatistics::Thermal => 1.0 / (1.0 + mu * q),
        }
    }

    fn pmf(self, mu: f64, n: u64) -> f64 {
        match self {
            PairStatistics::Poisson => (-mu + n as f64 * mu.ln() - ln_factorial(n)).exp(),
            PairStatistics::Thermal => (n as f64 * (mu / (1.0 + mu)).ln()).exp() / (1.0 + mu),
        }
    }
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionChain {
    /// Fiber and optics coupling per arm.
    pub coupling_efficiency: f64,
    /// Idler coupling when the arms differ; the signal value otherwise.
    pub idler_coupling_efficiency: Option<f64>,
    pub filter_peak_transmission: f64,
    pub detector_efficiency: f64,
    pub rep_rate_hz: f64,
    pub coincidence_window_s: f64,
    pub dark_count_rate_hz: f64,
    pub statistics: PairStatistics,
    /// Count signal/idler clicks from different pulses that fall inside one
    /// window. Only matters when the window spans at least two pulse periods.
    pub adjacent_pulse_accidentals: bool,
}

impl Default for DetectionChain {
    fn default() -> Self {
        DetectionChain {
            coupling_efficiency: 0.4,
            idler_coupling_efficiency: None,
            filter_peak_transmission: 0.75,
            detector_efficiency: 0.5,
            rep_rate_hz: 76e6,
            coincidence_window_s: 4.4e-9,
            dark_count_rate_hz: 0.0,
            statistics: PairStatistics::Poisson,
            adjacent_pulse_accidentals: false,
        }
    }
}

fn unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in [0, 1], got {x}")))
    }
}

impl DetectionChain {
    pub fn validate(&self) -> Result<()> {
        unit("coupling_efficiency", self.coupling_efficiency)?;
        if let Some(c) = self.idler_coupling_efficiency {
            unit("idler_coupling_efficiency", c)?;
        }
        unit("filter_peak_transmission", self.filter_peak_transmission)?;
        unit("detector_efficiency", self.detector_efficiency)?;
        if !(self.rep_rate_hz > 0.0) || !self.rep_rate_hz.is_finite() {
            return Err(invalid("rep_rate_hz must be positive"));
        }
        if !(self.coincidence_window_s > 0.0) || !self.coincidence_window_s.is_finite() {
            return Err(invalid("coincidence_window_s must be positive"));
        }
        if !(self.dark_count_rate_hz >= 0.0) || !self.dark_count_rate_hz.is_finite() {
            return Err(invalid("dark_count_rate_hz must be nonnegative"));
        }
        Ok(())
    }

    /// `(η_s, η_i)`.
    pub fn efficiencies(&self) -> (f64, f64) {
        let rest = self.filter_peak_transmission * self.detector_efficiency;
        (
            self.coupling_efficiency * rest,
            self.idler_coupling_efficiency.unwrap_or(self.coupling_efficiency) * rest,
        )
    }

    /// Dark-click probability per window.
    pub fn dark_probability(&self) -> f64 {
        -(-self.dark_count_rate_hz * self.coincidence_window_s).exp_m1()
    }

    /// Neighbouring pulses on each side that fall inside a window centred on
    /// a pulse.
    pub fn adjacent_pulses(&self) -> u64 {
        if !self.adjacent_pulse_accidentals {
            return 0;
        }
        (0.5 * self.coincidence_window_s * self.rep_rate_hz + 1e-12).floor() as u64
    }
}

/// Count rates, flattened to `key=value` lines by [`RateReport::to_key_value`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub singles_signal_hz: f64,
    pub singles_idler_hz: f64,
    /// All coincidences, true and accidental.
    pub coincidences_hz: f64,
    pub accidentals_hz: f64,
    /// `C / √(S_s · S_i)`.
    pub coincidence_to_singles: f64,
    /// Set by [`RateReport::with_brightness`].
    pub spectral_brightness: Option<f64>,
    /// Simulated pulses (0 for closed-form reports).
    pub pulses: u64,
    pub coincidence_counts: u64,
    pub accidental_counts: u64,
}

impl RateReport {
    fn from_per_pulse(ps: f64, pi: f64, pc: f64, pa: f64, chain: &DetectionChain, pulses: u64) -> Self {
        let r = chain.rep_rate_hz;
        let denom = (ps * pi).sqrt();
        RateReport {
            singles_signal_hz: ps * r,
            singles_idler_hz: pi * r,
            coincidences_hz: pc * r,
            accidentals_hz: pa * r,
            coincidence_to_singles: if denom > 0.0 { (pc / denom).min(1.0) } else { 0.0 },
            spectral_brightness: None,
            pulses,
            coincidence_counts: (pc * pulses as f64).round() as u64,
            accidental_counts: (pa * pulses as f64).round() as u64,
        }
    }

    pub fn with_brightness(mut self, pump_mw: f64, bandwidth_nm: f64) -> Result<Self> {
        self.spectral_brightness = Some(spectral_brightness(self.coincidences_hz, pump_mw, bandwidth_nm)?);
        Ok(self)
    }

    /// Fraction of coincidences that are accidental.
    pub fn accidental_fraction(&self) -> f64 {
        if self.coincidences_hz > 0.0 {
            self.accidentals_hz / self.coincidences_hz
        } else {
            0.0
        }
    }

    /// Poissonian standard error of `coincidences_hz` (simulated reports).
    pub fn coincidences_error_hz(&self) -> f64 {
        if self.pulses == 0 {
            return 0.0;
        }
        (self.coincidence_counts as f64).sqrt() * self.coincidences_hz / (self.coincidence_counts.max(1) as f64)
    }

    pub fn to_key_value(&self) -> String {
        let mut out = format!(
            "singles_signal_hz={:.6}\nsingles_idler_hz={:.6}\ncoincidences_hz={:.6}\naccidentals_hz={:.6}\ncoincidence_to_singles={:.6}\n",
            self.singles_signal_hz,
            self.singles_idler_hz,
            self.coincidences_hz,
            self.accidentals_hz,
            self.coincidence_to_singles
        );
        if let Some(b) = self.spectral_brightness {
            out.push_str(&format!("spectral_brightness={b:.6}\n"));
        }
        if self.pulses > 0 {
            out.push_str(&format!(
                "pulses={}\ncoincidence_counts={}\naccidental_counts={}\n",
                self.pulses, self.coincidence_counts, self.accidental_counts
            ));
        }
        out
    }
}

/// Per-pulse probabilities `(signal click, idler click, coincidence,
/// accidental)` for a single window, without adjacent-pulse terms.
pub fn per_pulse_probabilities(mu: f64, chain: &DetectionChain) -> (f64, f64, f64, f64) {
    let (es, ei) = chain.efficiencies();
    let d = chain.dark_probability();
    let g = |q: f64| chain.statistics.none_in(mu, q);
    let no_s = g(es) * (1.0 - d);
    let no_i = g(ei) * (1.0 - d);
    let neither = g(es + ei - es * ei) * (1.0 - d) * (1.0 - d);
    let no_true = g(es * ei);
    let coinc = 1.0 - no_s - no_i + neither;
    let acc = no_true - no_s - no_i + neither;
    (1.0 - no_s, 1.0 - no_i, coinc.max(0.0), acc.max(0.0))
}

/// Closed-form rates (the infinite-pulse limit of [`simulate_rates`]).
pub fn analytic_rates(mu: f64, chain: &DetectionChain) -> Result<RateReport> {
    check_mu(mu)?;
    chain.validate()?;
    let (ps, pi, pc, pa) = per_pulse_probabilities(mu, chain);
    let adj = 2.0 * chain.adjacent_pulses() as f64 * ps * pi;
    Ok(RateReport::from_per_pulse(ps, pi, pc + adj, pa + adj, chain, 0))
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(invalid(format!("mean pairs per pulse must be nonnegative, got {mu}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    signal: u64,
    idler: u64,
    coinc: u64,
    acc: u64,
}

impl std::ops::Add for Tally {
    type Output = Tally;
    fn add(self, o: Tally) -> Tally {
        Tally {
            signal: self.signal + o.signal,
            idler: self.idler + o.idler,
            coinc: self.coinc + o.coinc,
            acc: self.acc + o.acc,
        }
    }
}

struct PulseSampler {
    mu: f64,
    stats: PairStatistics,
    es: f64,
    ei: f64,
    dark: f64,
    p_zero: f64,
    p_dark_any: f64,
    p_event: f64,
}

impl PulseSampler {
    fn new(mu: f64, chain: &DetectionChain) -> Self {
        let (es, ei) = chain.efficiencies();
        let dark = chain.dark_probability();
        let p_zero = chain.statistics.none_in(mu, 1.0);
        let p_dark_any = 1.0 - (1.0 - dark) * (1.0 - dark);
        PulseSampler {
            mu,
            stats: chain.statistics,
            es,
            ei,
            dark,
            p_zero,
            p_dark_any,
            p_event: 1.0 - p_zero * (1.0 - p_dark_any),
        }
    }

    /// Pair number conditioned on `n ≥ 1`, by inverse CDF.
    fn sample_pairs<R: Rng>(&self, rng: &mut R) -> u64 {
        let target = rng.random::<f64>() * (1.0 - self.p_zero);
        let mut acc = 0.0;
        let mut n = 1;
        loop {
            acc += self.stats.pmf(self.mu, n);
            if acc >= target || n > 10_000 {
                return n;
            }
            n += 1;
        }
    }

    /// Clicks `(signal, idler, true coincidence)` of a pulse known to contain
    /// at least one pair or dark count.
    fn sample_event<R: Rng>(&self, rng: &mut R) -> (bool, bool, bool) {
        let dark_only = self.p_zero * self.p_dark_any / self.p_event;
        if rng.random::<f64>() < dark_only {
            let s = rng.random::<f64>() * self.p_dark_any < self.dark;
            let i = if s { rng.random::<f64>() < self.dark } else { true };
            return (s, i, false);
        }
        let n = self.sample_pairs(rng);
        let mut s = rng.random::<f64>() < self.dark;
        let mut i = rng.random::<f64>() < self.dark;
        let mut both = false;
        for _ in 0..n {
            let ds = rng.random::<f64>() < self.es;
            let di = rng.random::<f64>() < self.ei;
            s |= ds;
            i |= di;
            both |= ds && di;
        }
        (s, i, both)
    }
}

fn simulate_block(sampler: &PulseSampler, len: u64, adjacent: u64, seed: u64, block: u64) -> Tally {
    let mut t = Tally::default();
    if sampler.p_event <= 0.0 {
        return t;
    }
    let mut rng = stream_rng(seed, block);
    let geo = Geometric::new(sampler.p_event.min(1.0)).expect("probability in (0, 1]");
    // Recent event pulses for adjacent-pulse pairing: (index, signal, idler).
    let mut recent: Vec<(u64, bool, bool)> = Vec::new();
    let mut pos = 0u64;
    loop {
        pos = pos.saturating_add(geo.sample(&mut rng));
        if pos >= len {
            break;
        }
        let (s, i, both) = sampler.sample_event(&mut rng);
        t.signal += s as u64;
        t.idler += i as u64;
        if s && i {
            t.coinc += 1;
            if !both {
                t.acc += 1;
            }
        }
        if adjacent > 0 {
            recent.retain(|&(p, _, _)| p + adjacent >= pos);
            for &(_, ps, pi) in &recent {
                let cross = (ps && i) as u64 + (pi && s) as u64;
                t.coinc += cross;
                t.acc += cross;
            }
            recent.push((pos, s, i));
        }
        pos += 1;
    }
    t
}

/// Monte-Carlo rates over `n_pulses` pulses. Adjacent-pulse pairs that
/// straddle a block boundary (one in 2²² pulses) are not counted.
pub fn simulate_rates(mu: f64, chain: &DetectionChain, n_pulses: u64, seed: u64) -> Result<RateReport> {
    check_mu(mu)?;
    chain.validate()?;
    if n_pulses == 0 {
        return Err(invalid("n_pulses must be positive"));
    }
    let sampler = PulseSampler::new(mu, chain);
    let adjacent = chain.adjacent_pulses();
    let blocks = n_pulses.div_ceil(BLOCK_PULSES);
    let tally = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = (n_pulses - b * BLOCK_PULSES).min(BLOCK_PULSES);
            simulate_block(&sampler, len, adjacent, seed, b)
        })
        .reduce(Tally::default, |a, b| a + b);
    let n = n_pulses as f64;
    let mut report = RateReport::from_per_pulse(
        tally.signal as f64 / n,
        tally.idler as f64 / n,
        tally.coinc as f64 / n,
        tally.acc as f64 / n,
        chain,
        n_pulses,
    );
    report.coincidence_counts = tally.coinc;
    report.accidental_counts = tally.acc;
    Ok(report)
}

/// Coincidences per second, per mW of pump, per nm of filter bandwidth.
pub fn spectral_brightness(coincidences_hz: f64, pump_mw: f64, bandwidth_nm: f64) -> Result<f64> {
    if !(pump_mw > 0.0) || !(bandwidth_nm > 0.0) {
        return Err(invalid("pump power and bandwidth must be positive"));
    }
    if !(coincidences_hz >= 0.0) {
        return Err(invalid("coincidence rate must be nonnegative"));
    }
    Ok(coincidences_hz / (pump_mw * bandwidth_nm))
}

/// Mean pair number and coupling efficiency reproducing a measured
/// coincidence rate and coincidence-to-singles ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCalibration {
    pub mu: f64,
    pub chain: DetectionChain,
    pub report: RateReport,
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f increasing, f(lo) < 0 < f(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Solves for μ and the (symmetric) coupling efficiency, keeping filter,
/// detector, timing and statistics from `template`.
pub fn calibrate_rates(
    coincidences_hz: f64,
    coincidence_to_singles: f64,
    template: &DetectionChain,
) -> Result<RateCalibration> {
    template.validate()?;
    let rest = template.filter_peak_transmission * template.detector_efficiency;
    if !(coincidences_hz > 0.0) || !(coincidence_to_singles > 0.0 && coincidence_to_singles < 1.0) {
        return Err(invalid("targets must be a positive rate and a ratio in (0, 1)"));
    }
    let chain_for = |coupling: f64| DetectionChain {
        coupling_efficiency: coupling,
        idler_coupling_efficiency: None,
        ..*template
    };
    let max_rate = |chain: &DetectionChain| analytic_rates(1e3, chain).map(|r| r.coincidences_hz).unwrap_or(0.0);
    let mu_for = |chain: &DetectionChain| -> Option<f64> {
        if max_rate(chain) <= coincidences_hz {
            return None;
        }
        Some(bisect(0.0, 1e3, |mu| {
            analytic_rates(mu, chain).map(|r| r.coincidences_hz).unwrap_or(0.0) - coincidences_hz
        }))
    };
    let ratio_gap = |coupling: f64| -> f64 {
        let chain = chain_for(coupling);
        match mu_for(&chain) {
            Some(mu) => analytic_rates(mu, &chain).map(|r| r.coincidence_to_singles).unwrap_or(0.0) - coincidence_to_singles,
            None => -1.0,
        }
    };
    if ratio_gap(1.0) < 0.0 {
        return Err(Error::NoSolution {
            reason: format!(
                "coincidence-to-singles {coincidence_to_singles} needs coupling above 1 with filter x detector = {rest}"
            ),
            feasible: format!("ratio <= {:.6}", ratio_gap(1.0) + coincidence_to_singles),
        });
    }
    let coupling = bisect(1e-9, 1.0, ratio_gap);
    let chain = chain_for(coupling);
    let mu = mu_for(&chain).ok_or_else(|| Error::NumericalConsistency("rate calibration lost its root".into()))?;
    Ok(RateCalibration {
        mu,
        chain,
        report: analytic_rates(mu, &chain)?,
    })
}

/// Optional brightness derating at high power, linear between
/// `(power_mw, factor)` points and constant beyond them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Derating {
    points: Vec<(f64, f64)>,
}

impl Derating {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|&(p, f)| !(p >= 0.0) || !(f > 0.0 && f <= 1.0)) {
            return Err(invalid("derating points need power >= 0 and factor in (0, 1]"));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Derating { points })
    }

    pub fn factor(&self, power_mw: f64) -> f64 {
        let pts = &self.points;
        match pts.iter().position(|&(p, _)| p >= power_mw) {
            None => pts.last().map_or(1.0, |p| p.1),
            Some(0) => pts[0].1,
            Some(k) => {
                let (p0, f0) = pts[k - 1];
                let (p1, f1) = pts[k];
                f0 + (f1 - f0) * (power_mw - p0) / (p1 - p0)
            }
        }
    }
}

/// One point of a pump-power scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPoint {
    pub power_mw: f64,
    pub mu: f64,
    /// Closed-form accidental fraction of all coincidences.
    pub accidental_fraction: f64,
    /// Monte-Carlo estimate and its standard error, when pulses were simulated.
    pub accidental_fraction_mc: Option<(f64, f64)>,
    pub white_noise_eff: f64,
    pub visibility: f64,
    pub fidelity: f64,
}

/// Visibility (diagonal basis) against pump power. Multi-pair accidentals
/// enter the state as extra white noise `noise_scale · a(μ)` on top of the
/// intrinsic `w₀`; `noise_scale = 1` is the bare physical fraction.
pub fn visibility_vs_power_scaled(
    powers_mw: &[f64],
    base: &SourceParams,
    chain: &DetectionChain,
    n_pulses: u64,
    seed: u64,
    noise_scale: f64,
) -> Result<Vec<PowerPoint>> {
    base.validate()?;
    chain.validate()?;
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(invalid("noise scale must be nonnegative"));
    }
    powers_mw
        .iter()
        .enumerate()
        .map(|(k, &power)| {
            if !(power > 0.0) || !power.is_finite() {
                return Err(invalid(format!("pump power must be positive, got {power}")));
            }
            let p = base.at_power(power);
            let mu = p.mean_pairs_per_pulse();
            let a = analytic_rates(mu, chain)?.accidental_fraction();
            let mc = if n_pulses > 0 {
                let r = simulate_rates(mu, chain, n_pulses, seed.wrapping_add(k as u64))?;
                let n = r.coincidence_counts as f64;
                let frac = r.accidental_fraction();
                Some((frac, if n > 0.0 { (frac * (1.0 - frac) / n).sqrt() } else { 0.0 }))
            } else {
                None
            };
            let extra = (noise_scale * a).min(1.0);
            let w_eff = 1.0 - (1.0 - base.white_noise_w) * (1.0 - extra);
            let noisy = SourceParams {
                white_noise_w: w_eff,
                ..p
            };
            Ok(PowerPoint {
                power_mw: power,
                mu,
                accidental_fraction: a,
                accidental_fraction_mc: mc,
                white_noise_eff: w_eff,
                visibility: predicted_visibility(&noisy, FringeBasis::Diag),
                fidelity: predicted_fidelity(&noisy),
            })
        })
        .collect()
}

pub fn visibility_vs_power(
    powers_mw: &[f64],
    base: &SourceParams,
    chain: &DetectionChain,
    n_pulses: u64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    Ok(visibility_vs_power_scaled(powers_mw, base, chain, n_pulses, seed, 1.0)?
        .into_iter()
        .map(|p| (p.power_mw, p.visibility))
        .collect())
}

/// Fidelity model `F(P) = 1/4 + (1 − κ·a(μ(P)))·g` fitted to two measured
/// points. `g = F₀ − 1/4` is the zero-power excess and `κ` the noise scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSlope {
    pub noise_scale: f64,
    pub zero_power_excess: f64,
    pub mu_per_mw: f64,
    pub chain: DetectionChain,
}

impl PowerSlope {
    /// Passes exactly through both points.
    pub fn calibrate(chain: &DetectionChain, mu_per_mw: f64, first: (f64, f64), second: (f64, f64)) -> Result<Self> {
        chain.validate()?;
        let a1 = analytic_rates(mu_per_mw * first.0, chain)?.accidental_fraction();
        let a2 = analytic_rates(mu_per_mw * second.0, chain)?.accidental_fraction();
        let (e1, e2) = (first.1 - 0.25, second.1 - 0.25);
        if !(e1 > 0.0 && e2 > 0.0) {
            return Err(invalid("calibration fidelities must exceed 1/4"));
        }
        let r = e1 / e2;
        let denom = a1 - r * a2;
        if denom.abs() < 1e-15 {
            return Err(Error::NoSolution {
                reason: "calibration powers give identical accidental fractions".into(),
                feasible: "two distinct powers".into(),
            });
        }
        let noise_scale = (1.0 - r) / denom;
        let zero_power_excess = e1 / (1.0 - noise_scale * a1);
        if !(noise_scale >= 0.0) || !(zero_power_excess > 0.0 && zero_power_excess <= 0.75) {
            return Err(Error::NoSolution {
                reason: format!(
                    "fidelities {:?}, {:?} need noise scale {noise_scale:.4} and F0 {:.4}",
                    first,
                    second,
                    zero_power_excess + 0.25
                ),
                feasible: "fidelity non-increasing in power, F0 <= 1".into(),
            });
        }
        Ok(PowerSlope {
            noise_scale,
            zero_power_excess,
            mu_per_mw,
            chain: *chain,
        })
    }

    pub fn predict_fidelity(&self, power_mw: f64) -> Result<f64> {
        let a = analytic_rates(self.mu_per_mw * power_mw, &self.chain)?.accidental_fraction();
        Ok(0.25 + (1.0 - (self.noise_scale * a).min(1.0)) * self.zero_power_excess)
    }

    pub fn intrinsic_fidelity(&self) -> f64 {
        0.25 + self.zero_power_excess
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain() -> DetectionChain {
        DetectionChain::default()
    }

    /// Brute-force per-pulse probabilities by summing over pair numbers and
    /// per-pair outcome multiplicities (no darks).
    fn brute_force(mu: f64, es: f64, ei: f64, stats: PairStatistics) -> (f64, f64, f64, f64) {
        let (pb, psx, pix) = (es * ei, es * (1.0 - ei), ei * (1.0 - es));
        let pnone = 1.0 - pb - psx - pix;
        let (mut s, mut i, mut c, mut a) = (0.0, 0.0, 0.0, 0.0);
        for n in 0..60u64 {
            let w = stats.pmf(mu, n);
            // multinomial over (both, s-only, i-only, none)
            for nb in 0..=n {
                for ns in 0..=(n - nb) {
                    for ni in 0..=(n - nb - ns) {
                        let nn = n - nb - ns - ni;
                        let coef = (ln_factorial(n) - ln_factorial(nb) - ln_factorial(ns) - ln_factorial(ni) - ln_factorial(nn)).exp();
                        let p = w * coef * pb.powi(nb as i32) * psx.powi(ns as i32) * pix.powi(ni as i32) * pnone.powi(nn as i32);
                        let sc = nb + ns > 0;
                        let ic = nb + ni > 0;
                        if sc {
                            s += p;
                        }
                        if ic {
                            i += p;
                        }
                        if sc && ic {
                            c += p;
                            if nb == 0 {
                                a += p;
                            }
                        }
                    }
                }
            }
        }
        (s, i, c, a)
    }

    #[test]
    fn closed_forms_match_brute_force() {
        for stats in [PairStatistics::Poisson, PairStatistics::Thermal] {
            for &(mu, es, ei) in &[(0.3, 0.15, 0.15), (1.2, 0.4, 0.7), (0.05, 0.9, 0.2)] {
                let chain = DetectionChain {
                    coupling_efficiency: es,
                    idler_coupling_efficiency: Some(ei),
                    filter_peak_transmission: 1.0,
                    detector_efficiency: 1.0,
                    statistics: stats,
                    ..chain()
                };
                let got = per_pulse_probabilities(mu, &chain);
                let want = brute_force(mu, es, ei, stats);
                for (g, w) in [(got.0, want.0), (got.1, want.1), (got.2, want.2), (got.3, want.3)] {
                    assert!((g - w).abs() < 1e-12, "{stats:?} mu={mu}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn zero_mu_gives_zero_rates() {
        let r = simulate_rates(0.0, &chain(), 100_000, 1).unwrap();
        assert_eq!(r.singles_signal_hz, 0.0);
        assert_eq!(r.coincidences_hz, 0.0);
        assert_eq!(r.coincidence_to_singles, 0.0);
        assert!(simulate_rates(-1.0, &chain(), 10, 1).is_err());
    }

    #[test]
    fn small_mu_limit() {
        let c = DetectionChain {
            coupling_efficiency: 1.0,
            filter_peak_transmission: 1.0,
            detector_efficiency: 0.3,
            ..chain()
        };
        let (eta, mu) = (0.3, 1e-3);
        let n = 200_000_000u64;
        let r = simulate_rates(mu, &c, n, 42).unwrap();
        let per = |hz: f64| hz / c.rep_rate_hz;
        let sigma = |p: f64| (p / n as f64).sqrt();
        let cc = per(r.coincidences_hz);
        assert!((cc - mu * eta * eta).abs() < 3.0 * sigma(mu * eta * eta) + 1e-3 * mu * eta * eta);
        let ss = per(r.singles_signal_hz);
        assert!((ss - mu * eta).abs() < 3.0 * sigma(mu * eta) + 1e-3 * mu * eta);
        let ratio_sigma = r.coincidence_to_singles * (1.0 / r.coincidence_counts as f64).sqrt();
        assert!((r.coincidence_to_singles - eta).abs() < 3.0 * ratio_sigma + 1e-3);
    }

    #[test]
    fn simulation_agrees_with_closed_form() {
        let mut c = chain();
        c.dark_count_rate_hz = 2e5;
        for stats in [PairStatistics::Poisson, PairStatistics::Thermal] {
            c.statistics = stats;
            let mu = 0.4;
            let n = 20_000_000;
            let sim = simulate_rates(mu, &c, n, 9).unwrap();
            let exact = analytic_rates(mu, &c).unwrap();
            for (s, e) in [
                (sim.singles_signal_hz, exact.singles_signal_hz),
                (sim.singles_idler_hz, exact.singles_idler_hz),
                (sim.coincidences_hz, exact.coincidences_hz),
                (sim.accidentals_hz, exact.accidentals_hz),
            ] {
                let p = e / c.rep_rate_hz;
                let sigma = (p * (1.0 - p) / n as f64).sqrt() * c.rep_rate_hz;
                assert!((s - e).abs() < 4.0 * sigma, "{stats:?}: {s} vs {e} (sigma {sigma})");
            }
        }
    }

    #[test]
    fn adjacent_pulse_accidentals() {
        let mut c = chain();
        c.coincidence_window_s = 30e-9;
        c.adjacent_pulse_accidentals = true;
        assert_eq!(c.adjacent_pulses(), 1);
        let mu = 0.3;
        let n = 20_000_000;
        let sim = simulate_rates(mu, &c, n, 5).unwrap();
        let exact = analytic_rates(mu, &c).unwrap();
        let p = exact.accidentals_hz / c.rep_rate_hz;
        let sigma = (p / n as f64).sqrt() * c.rep_rate_hz;
        assert!((sim.accidentals_hz - exact.accidentals_hz).abs() < 4.0 * sigma);
        // The default 4.4 ns window never reaches the neighbouring pulse.
        let mut short = chain();
        short.adjacent_pulse_accidentals = true;
        assert_eq!(short.adjacent_pulses(), 0);
    }

    #[test]
    fn pulsed_accidentals_against_singles_product() {
        // Same-pulse accidentals approach (1 − η_s)(1 − η_i)·S_s·S_i/R as μ → 0.
        let c = chain();
        let (es, ei) = c.efficiencies();
        let r = analytic_rates(1e-5, &c).unwrap();
        let estimate = r.singles_signal_hz * r.singles_idler_hz / c.rep_rate_hz;
        let ratio = r.accidentals_hz / estimate;
        assert!((ratio - (1.0 - es) * (1.0 - ei)).abs() < 1e-3, "ratio {ratio}");
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = simulate_rates(0.1, &chain(), 10_000_000, 3).unwrap();
        let b = simulate_rates(0.1, &chain(), 10_000_000, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_rates(0.1, &chain(), 10_000_000, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn log_log_slopes() {
        let c = chain();
        let mus: Vec<f64> = (0..=8).map(|k| 1e-4 * 10f64.powf(k as f64 / 4.0)).collect();
        let slope = |f: &dyn Fn(&RateReport) -> f64| {
            let pts: Vec<(f64, f64)> = mus
                .iter()
                .map(|&m| (m.ln(), f(&analytic_rates(m, &c).unwrap()).ln()))
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
        };
        assert!((slope(&|r| r.singles_signal_hz) - 1.0).abs() < 0.1);
        assert!((slope(&|r| r.coincidences_hz - r.accidentals_hz) - 1.0).abs() < 0.1);
        assert!((slope(&|r| r.accidentals_hz) - 2.0).abs() < 0.1);
    }

    #[test]
    fn doubling_mu_doubles_accidental_fraction() {
        let c = chain();
        let n = 400_000_000;
        let a = simulate_rates(0.02, &c, n, 1).unwrap();
        let b = simulate_rates(0.04, &c, n, 2).unwrap();
        let err = |r: &RateReport| (r.accidental_counts.max(1) as f64).sqrt() / r.coincidence_counts as f64;
        let ratio = b.accidental_fraction() / a.accidental_fraction();
        let sigma = ratio * ((err(&a) / a.accidental_fraction()).powi(2) + (err(&b) / b.accidental_fraction()).powi(2)).sqrt();
        assert!((ratio - 2.0).abs() < 3.0 * sigma + 0.02, "ratio {ratio} sigma {sigma}");
    }

    #[test]
    fn brightness_arithmetic() {
        assert!((spectral_brightness(15000.0, 30.0, 3.0).unwrap() - 166.666_666_666_666_66).abs() < 1e-9);
        assert_eq!(spectral_brightness(0.0, 10.0, 3.0).unwrap(), 0.0);
        assert!((spectral_brightness(240.0 * 50.0 * 3.0, 50.0, 3.0).unwrap() - 240.0).abs() < 1e-12);
        assert!(spectral_brightness(1.0, 0.0, 3.0).is_err());
        assert!(spectral_brightness(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn rate_calibration_hits_targets() {
        let cal = calibrate_rates(15000.0, 0.15, &chain()).unwrap();
        assert!((cal.report.coincidences_hz - 15000.0).abs() < 1e-6);
        assert!((cal.report.coincidence_to_singles - 0.15).abs() < 1e-9);
        assert!((cal.chain.coupling_efficiency - 0.4).abs() < 0.01);
        assert!(cal.mu > 0.005 && cal.mu < 0.015);
        assert!(calibrate_rates(15000.0, 0.5, &chain()).is_err());
    }

    #[test]
    fn key_value_output() {
        let r = analytic_rates(0.01, &chain()).unwrap().with_brightness(30.0, 3.0).unwrap();
        let text = r.to_key_value();
        assert!(text.lines().all(|l| l.split_once('=').is_some()));
        assert!(text.contains("spectral_brightness="));
    }

    #[test]
    fn derating_interpolates() {
        let d = Derating::new(vec![(100.0, 1.0), (300.0, 0.8)]).unwrap();
        assert_eq!(d.factor(50.0), 1.0);
        assert!((d.factor(200.0) - 0.9).abs() < 1e-12);
        assert_eq!(d.factor(400.0), 0.8);
        assert_eq!(Derating::default().factor(10.0), 1.0);
        assert!(Derating::new(vec![(1.0, 0.0)]).is_err());
    }

    #[test]
    fn zero_power_limit_is_intrinsic() {
        let base = SourceParams {
            mu_per_mw: 3e-4,
            ..SourceParams::with_noise(0.96, 0.01)
        };
        let pts = visibility_vs_power(&[1e-9], &base, &chain(), 0, 0).unwrap();
        assert!((pts[0].1 - 0.99 * 0.96).abs() < 1e-9);
        assert!(visibility_vs_power(&[0.0], &base, &chain(), 0, 0).is_err());
    }

    #[test]
    fn power_slope_reproduces_calibration_points() {
        let cal = calibrate_rates(15000.0, 0.15, &chain()).unwrap();
        let slope = PowerSlope::calibrate(&cal.chain, cal.mu / 30.0, (30.0, 0.958), (140.0, 0.950)).unwrap();
        assert!((slope.predict_fidelity(30.0).unwrap() - 0.958).abs() < 1e-12);
        assert!((slope.predict_fidelity(140.0).unwrap() - 0.950).abs() < 1e-12);
        let f325 = slope.predict_fidelity(325.0).unwrap();
        assert!(f325 < 0.950 && f325 > 0.9);
        assert!(PowerSlope::calibrate(&cal.chain, cal.mu / 30.0, (30.0, 0.95), (140.0, 0.96)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn coincidences_never_exceed_singles(
            mu in 0.0f64..2.0,
            coupling in 0.0f64..1.0,
            idler in 0.0f64..1.0,
            dark in 0.0f64..1e6,
            seed in any::<u64>(),
        ) {
            let c = DetectionChain {
                coupling_efficiency: coupling,
                idler_coupling_efficiency: Some(idler),
                dark_count_rate_hz: dark,
                ..chain()
            };
            let r = simulate_rates(mu, &c, 20_000, seed).unwrap();
            prop_assert!(r.coincidences_hz <= r.singles_signal_hz.min(r.singles_idler_hz));
            prop_assert!(r.coincidences_hz <= r.singles_signal_hz.min(r.singles_idler_hz) + r.accidentals_hz);
            prop_assert!((0.0..=1.0).contains(&r.coincidence_to_singles));
            let e = analytic_rates(mu, &c).unwrap();
            prop_assert!(e.coincidences_hz <= e.singles_signal_hz.min(e.singles_idler_hz) * (1.0 + 1e-12));
            prop_assert!(e.accidentals_hz <= e.coincidences_hz * (1.0 + 1e-12));
        }

        #[test]
        fn visibility_non_increasing_in_power(
            mut powers in proptest::collection::vec(0.1f64..500.0, 2..8),
            v in 0.5f64..1.0,
            w in 0.0f64..0.2,
            scale in 0.0f64..3.0,
        ) {
            powers.sort_by(|a, b| a.total_cmp(b));
            let base = SourceParams { mu_per_mw: 3e-4, ..SourceParams::with_noise(v, w) };
            let pts = visibility_vs_power_scaled(&powers, &base, &chain(), 0, 0, scale).unwrap();
            for pair in pts.windows(2) {
                prop_assert!(pair[1].visibility <= pair[0].visibility + 1e-12);
            }
        }

        #[test]
        fn deterministic_under_seed(mu in 0.0f64..0.5, seed in any::<u64>()) {
            let a = simulate_rates(mu, &chain(), 50_000, seed).unwrap();
            let b = simulate_rates(mu, &chain(), 50_000, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
