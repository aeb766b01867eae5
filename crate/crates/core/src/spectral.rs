//! Joint spectral amplitude, Schmidt analysis and two-source HOM dips.
//!
//! Frequencies are detunings from the carrier in rad/fs, group slownesses in
//! fs/mm. The phase mismatch is taken to first order:
//! `Δk = (k′_p − k′_s)·ν_s + (k′_p − k′_i)·ν_i`.

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::optics::C_UM_PER_FS;
use crate::rng::{poisson, stream_rng};

type C64 = Complex<f64>;

const LN2: f64 = std::f64::consts::LN_2;

/// Full width of `sinc²(x/2)` at half maximum, in units of `x`.
const SINC2_FWHM: f64 = 5.566_229_2;

/// Minimum samples across the narrowest spectral feature.
pub const MIN_SAMPLES_PER_FWHM: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralParams {
    pub pump_center_nm: f64,
    pub signal_center_nm: f64,
    pub idler_center_nm: f64,
    /// Intensity FWHM of the transform-limited pump pulse.
    pub pump_fwhm_duration_fs: f64,
    pub crystal_length_mm: f64,
    pub gv_inverse_pump: f64,
    pub gv_inverse_signal: f64,
    pub gv_inverse_idler: f64,
    /// Intensity FWHM of the Gaussian filters; `f64::INFINITY` for none.
    pub filter_fwhm_signal_nm: f64,
    pub filter_fwhm_idler_nm: f64,
    /// Relative tolerance on `1/λ_p = 1/λ_s + 1/λ_i`.
    pub energy_tolerance: f64,
}

impl SpectralParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pump_center_nm", self.pump_center_nm),
            ("signal_center_nm", self.signal_center_nm),
            ("idler_center_nm", self.idler_center_nm),
            ("pump_fwhm_duration_fs", self.pump_fwhm_duration_fs),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("filter_fwhm_signal_nm", self.filter_fwhm_signal_nm),
            ("filter_fwhm_idler_nm", self.filter_fwhm_idler_nm),
        ] {
            if !(v > 0.0) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.crystal_length_mm >= 0.0) || !self.crystal_length_mm.is_finite() {
            return Err(invalid("crystal_length_mm must be nonnegative"));
        }
        if ![self.gv_inverse_pump, self.gv_inverse_signal, self.gv_inverse_idler]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(invalid("group slownesses must be finite"));
        }
        let inv_p = 1.0 / self.pump_center_nm;
        let mismatch = (inv_p - 1.0 / self.signal_center_nm - 1.0 / self.idler_center_nm).abs() / inv_p;
        if mismatch > self.energy_tolerance {
            return Err(invalid(format!(
                "center wavelengths violate energy conservation by {:.3}%",
                mismatch * 100.0
            )));
        }
        Ok(())
    }

    /// Spectral intensity FWHM of the pump, rad/fs.
    pub fn pump_bandwidth(&self) -> f64 {
        4.0 * LN2 / self.pump_fwhm_duration_fs
    }

    /// Filter intensity FWHMs `(signal, idler)`, rad/fs.
    pub fn filter_bandwidths(&self) -> (f64, f64) {
        let conv = |fwhm_nm: f64, center_nm: f64| {
            2.0 * std::f64::consts::PI * C_UM_PER_FS * (fwhm_nm * 1e-3) / (center_nm * 1e-3).powi(2)
        };
        (
            conv(self.filter_fwhm_signal_nm, self.signal_center_nm),
            conv(self.filter_fwhm_idler_nm, self.idler_center_nm),
        )
    }

    /// `(k′_p − k′_s, k′_p − k′_i)`, fs/mm.
    pub fn mismatch_slopes(&self) -> (f64, f64) {
        (
            self.gv_inverse_pump - self.gv_inverse_signal,
            self.gv_inverse_pump - self.gv_inverse_idler,
        )
    }

    fn phase_matching_bandwidth(&self, slope: f64) -> f64 {
        let x = slope.abs() * self.crystal_length_mm;
        if x > 0.0 {
            SINC2_FWHM / x
        } else {
            f64::INFINITY
        }
    }

    /// Frequency extent used for each axis (before the span factor).
    pub fn axis_widths(&self) -> (f64, f64) {
        let (fs, fi) = self.filter_bandwidths();
        let (ks, ki) = self.mismatch_slopes();
        let pump = self.pump_bandwidth();
        let width = |filter: f64, slope: f64| {
            let w = filter.min(pump + self.phase_matching_bandwidth(slope));
            if w.is_finite() {
                w
            } else {
                pump
            }
        };
        (width(fs, ks), width(fi, ki))
    }
}

/// `n × n` amplitude table, rows signal and columns idler, normalized so that
/// `Σ|f|²·Δν_s·Δν_i = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct JsaGrid {
    pub nu_signal: Vec<f64>,
    pub nu_idler: Vec<f64>,
    pub amplitude: DMatrix<C64>,
}

fn centered_axis(n: usize, span: f64) -> Vec<f64> {
    let step = span / n as f64;
    (0..n).map(|k| (k as f64 - 0.5 * (n as f64 - 1.0)) * step).collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn gaussian_amplitude(nu: f64, fwhm: f64) -> f64 {
    if fwhm.is_infinite() {
        1.0
    } else {
        (-2.0 * LN2 * (nu / fwhm).powi(2)).exp()
    }
}

/// Default grid size and span factor.
pub const DEFAULT_GRID: usize = 256;
pub const DEFAULT_SPAN: f64 = 4.0;

pub fn build_jsa(p: &SpectralParams, n: usize, span_factor: f64) -> Result<JsaGrid> {
    p.validate()?;
    if n < 64 {
        return Err(invalid(format!("grid size must be at least 64, got {n}")));
    }
    if !(span_factor > 0.0) || !span_factor.is_finite() {
        return Err(invalid("span factor must be positive"));
    }
    let (ws, wi) = p.axis_widths();
    let (span_s, span_i) = (span_factor * ws, span_factor * wi);
    let (step_s, step_i) = (span_s / n as f64, span_i / n as f64);
    let (fs, fi) = p.filter_bandwidths();
    let (ks, ki) = p.mismatch_slopes();
    let pump = p.pump_bandwidth();
    let features = [
        ("signal filter", fs, step_s),
        ("idler filter", fi, step_i),
        ("pump", pump, step_s.max(step_i)),
        ("signal phase matching", p.phase_matching_bandwidth(ks), step_s),
        ("idler phase matching", p.phase_matching_bandwidth(ki), step_i),
    ];
    for (name, fwhm, step) in features {
        if fwhm.is_finite() && fwhm / step < MIN_SAMPLES_PER_FWHM {
            return Err(Error::Resolution(format!(
                "{name} FWHM spans {:.2} samples (need {MIN_SAMPLES_PER_FWHM}); raise the grid size",
                fwhm / step
            )));
        }
    }
    let nu_s = centered_axis(n, span_s);
    let nu_i = centered_axis(n, span_i);
    let l = p.crystal_length_mm;
    let amp = DMatrix::from_fn(n, n, |r, c| {
        let (s, i) = (nu_s[r], nu_i[c]);
        let dk = ks * s + ki * i;
        let v = gaussian_amplitude(s + i, pump) * sinc(0.5 * dk * l) * gaussian_amplitude(s, fs) * gaussian_amplitude(i, fi);
        C64::new(v, 0.0)
    });
    JsaGrid::new(nu_s, nu_i, amp)
}

fn uniform_step(axis: &[f64]) -> Result<f64> {
    if axis.len() < 2 {
        return Err(invalid("axis needs at least two points"));
    }
    let step = axis[1] - axis[0];
    let ok = step > 0.0
        && axis
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.max(w[1].abs()));
    if !ok {
        return Err(invalid("axis must be uniformly increasing"));
    }
    Ok(step)
}

impl JsaGrid {
    /// Normalizes an arbitrary table on uniform axes.
    pub fn new(nu_signal: Vec<f64>, nu_idler: Vec<f64>, amplitude: DMatrix<C64>) -> Result<Self> {
        if amplitude.nrows() != nu_signal.len() || amplitude.ncols() != nu_idler.len() {
            return Err(invalid("amplitude table does not match the axes"));
        }
        if nu_signal.len() != nu_idler.len() {
            return Err(invalid("JSA grid must be square"));
        }
        let cell = uniform_step(&nu_signal)? * uniform_step(&nu_idler)?;
        let norm2: f64 = amplitude.iter().map(|z| z.norm_sqr()).sum::<f64>() * cell;
        if !(norm2 > 0.0) || !norm2.is_finite() {
            return Err(Error::NumericalConsistency("JSA has zero or non-finite norm".into()));
        }
        let amplitude = amplitude.unscale(norm2.sqrt());
        Ok(JsaGrid {
            nu_signal,
            nu_idler,
            amplitude,
        })
    }

    pub fn n(&self) -> usize {
        self.nu_signal.len()
    }

    pub fn steps(&self) -> (f64, f64) {
        (
            self.nu_signal[1] - self.nu_signal[0],
            self.nu_idler[1] - self.nu_idler[0],
        )
    }

    /// `Σ|f|²·Δν_s·Δν_i`.
    pub fn norm(&self) -> f64 {
        let (a, b) = self.steps();
        self.amplitude.iter().map(|z| z.norm_sqr()).sum::<f64>() * a * b
    }

    /// Amplitude table weighted by `√(Δν_s·Δν_i)` (unit Frobenius norm).
    fn discrete(&self) -> DMatrix<C64> {
        let (a, b) = self.steps();
        self.amplitude.scale((a * b).sqrt())
    }

    /// Reduced idler density matrix on the idler axis (heralding arm traced).
    pub fn idler_state(&self) -> DMatrix<C64> {
        let a = self.discrete();
        a.transpose() * a.conjugate()
    }

    /// Header with both axes, then rows of `magnitude,phase` pairs.
    pub fn to_dsv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(",");
        let mut out = format!(
            "# rows: signal detuning (rad/fs)\n# {}\n# columns: idler detuning (rad/fs)\n# {}\n# entries: magnitude,phase\n",
            join(&self.nu_signal),
            join(&self.nu_idler)
        );
        for r in 0..self.n() {
            let row: Vec<String> = (0..self.n())
                .map(|c| {
                    let z = self.amplitude[(r, c)];
                    format!("{:.9e},{:.6}", z.norm(), z.arg())
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schmidt {
    /// Descending, `Σc² = 1`.
    pub coefficients: Vec<f64>,
    pub schmidt_number: f64,
    pub purity: f64,
}

pub fn schmidt(jsa: &JsaGrid) -> Result<Schmidt> {
    let a = jsa.discrete();
    let mut sv: Vec<f64> = if a.iter().all(|z| z.im == 0.0) {
        let re = a.map(|z| z.re);
        re.try_svd(false, false, 1e-14, 0)
            .ok_or_else(|| Error::NumericalConsistency("SVD did not converge".into()))?
            .singular_values
            .iter()
            .copied()
            .collect()
    } else {
        a.try_svd(false, false, 1e-14, 0)
            .ok_or_else(|| Error::NumericalConsistency("SVD did not converge".into()))?
            .singular_values
            .iter()
            .copied()
            .collect()
    };
    sv.sort_by(|x, y| y.total_cmp(x));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if !(total > 0.0) {
        return Err(Error::NumericalConsistency("JSA has no nonzero singular value".into()));
    }
    let coefficients: Vec<f64> = sv.iter().map(|s| s / total.sqrt()).collect();
    let purity: f64 = coefficients.iter().map(|c| c.powi(4)).sum();
    Ok(Schmidt {
        coefficients,
        schmidt_number: 1.0 / purity,
        purity,
    })
}

/// Optical delay of a free-space stage displacement (µm → fs).
pub fn stage_to_delay_fs(stage_um: f64) -> f64 {
    stage_um / C_UM_PER_FS
}

pub fn delay_to_stage_um(delay_fs: f64) -> f64 {
    delay_fs * C_UM_PER_FS
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HomMode {
    /// Coincidence probability normalized to 1 at large delay.
    Exact,
    /// Poissonian fourfold counts with mean `mean_fourfolds` at large delay,
    /// fitted with a Gaussian dip.
    Sampled { mean_fourfolds: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomPoint {
    pub delay_fs: f64,
    pub stage_um: f64,
    /// Counts in sampled mode, the normalized probability in exact mode.
    pub rate: f64,
    pub normalized_rate: f64,
}

/// Gaussian dip `A·(1 − V·exp(−(τ − τ₀)²/(2σ²)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipFit {
    pub plateau: f64,
    pub visibility: f64,
    pub center_fs: f64,
    pub sigma_fs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomCurve {
    pub points: Vec<HomPoint>,
    /// `(I_max − I_min)/I_max` with `I_max` the plateau.
    pub visibility: f64,
    pub visibility_error: f64,
    pub fit: Option<DipFit>,
}

impl HomCurve {
    pub fn to_dsv(&self) -> String {
        let mut out = String::from("delay_fs,stage_um,rate,normalized_rate\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:.6},{:.6},{},{:.9}\n",
                p.delay_fs, p.stage_um, p.rate, p.normalized_rate
            ));
        }
        out
    }
}

/// `R(τ) = 1 − Re Tr[ρ_a D(τ) ρ_b D(−τ)]` with `D(τ) = diag(e^{iν τ})`.
struct Overlap {
    weights: DMatrix<C64>,
    nu: Vec<f64>,
}

impl Overlap {
    fn new(a: &JsaGrid, b: &JsaGrid) -> Result<Self> {
        let same = a.n() == b.n()
            && a.nu_idler
                .iter()
                .zip(&b.nu_idler)
                .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1e-300))
            && a.nu_signal.len() == b.nu_signal.len();
        if !same {
            return Err(invalid("HOM sources must share the same idler axis"));
        }
        let ra = a.idler_state();
        let rb = b.idler_state();
        // Tr[ρa D ρb D†] = Σ_jk ρa_jk ρb_kj e^{i(ν_k − ν_j)τ}
        let weights = DMatrix::from_fn(a.n(), a.n(), |j, k| ra[(j, k)] * rb[(k, j)]);
        Ok(Overlap {
            weights,
            nu: a.nu_idler.clone(),
        })
    }

    fn rate(&self, tau: f64) -> f64 {
        let phase: Vec<C64> = self.nu.iter().map(|v| C64::from_polar(1.0, v * tau)).collect();
        let mut acc = 0.0;
        for (j, pj) in phase.iter().enumerate() {
            let pj = pj.conj();
            for (k, pk) in phase.iter().enumerate() {
                acc += (self.weights[(j, k)] * pk * pj).re;
            }
        }
        1.0 - acc
    }
}

pub fn hom_dip(a: &JsaGrid, b: &JsaGrid, delays_fs: &[f64], mode: HomMode) -> Result<HomCurve> {
    if delays_fs.is_empty() || delays_fs.iter().any(|d| !d.is_finite()) {
        return Err(invalid("delays must be finite and non-empty"));
    }
    let overlap = Overlap::new(a, b)?;
    let exact: Vec<f64> = delays_fs.par_iter().map(|&t| overlap.rate(t)).collect();
    match mode {
        HomMode::Exact => {
            let points = delays_fs
                .iter()
                .zip(&exact)
                .map(|(&d, &r)| HomPoint {
                    delay_fs: d,
                    stage_um: delay_to_stage_um(d),
                    rate: r,
                    normalized_rate: r,
                })
                .collect();
            let rmin = exact.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(HomCurve {
                points,
                visibility: (1.0 - rmin).clamp(0.0, 1.0),
                visibility_error: 0.0,
                fit: None,
            })
        }
        HomMode::Sampled { mean_fourfolds, seed } => {
            if !(mean_fourfolds > 0.0) || !mean_fourfolds.is_finite() {
                return Err(invalid("mean fourfold count must be positive"));
            }
            let counts: Vec<f64> = exact
                .iter()
                .enumerate()
                .map(|(k, r)| poisson(&mut stream_rng(seed, k as u64), mean_fourfolds * r.max(0.0)) as f64)
                .collect();
            let (fit, err) = fit_gaussian_dip(delays_fs, &counts)?;
            let points = delays_fs
                .iter()
                .zip(&counts)
                .map(|(&d, &n)| HomPoint {
                    delay_fs: d,
                    stage_um: delay_to_stage_um(d),
                    rate: n,
                    normalized_rate: n / fit.plateau,
                })
                .collect();
            Ok(HomCurve {
                points,
                visibility: fit.visibility.clamp(0.0, 1.0),
                visibility_error: err,
                fit: Some(fit),
            })
        }
    }
}

/// Weighted fit of a Gaussian dip; returns the fit and the visibility error.
pub fn fit_gaussian_dip(delays_fs: &[f64], counts: &[f64]) -> Result<(DipFit, f64)> {
    if delays_fs.len() != counts.len() || delays_fs.len() < 5 {
        return Err(invalid("dip fit needs at least 5 matching points"));
    }
    let imin = (0..counts.len())
        .min_by(|&a, &b| counts[a].total_cmp(&counts[b]))
        .expect("non-empty");
    let cmax = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(cmax > 0.0) {
        return Err(Error::InsufficientStatistics("no counts in the HOM scan".into()));
    }
    let half = 0.5 * (cmax + counts[imin]);
    let below: Vec<f64> = delays_fs
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c <= half)
        .map(|(&d, _)| d)
        .collect();
    let lo = below.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = delays_fs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - delays_fs.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma0 = ((hi - lo) / 2.3548).max(span / (4.0 * delays_fs.len() as f64));
    let p0 = DVector::from_vec(vec![cmax, 1.0 - counts[imin] / cmax, delays_fs[imin], sigma0]);
    let model = |p: &DVector<f64>, t: f64| {
        let z = (t - p[2]) / p[3];
        let g = (-0.5 * z * z).exp();
        (
            p[0] * (1.0 - p[1] * g),
            DVector::from_vec(vec![
                1.0 - p[1] * g,
                -p[0] * g,
                -p[0] * p[1] * g * z / p[3],
                -p[0] * p[1] * g * z * z / p[3],
            ]),
        )
    };
    let w: Vec<f64> = counts.iter().map(|&n| 1.0 / n.max(1.0)).collect();
    let fit = levenberg_marquardt(model, delays_fs, counts, &w, p0, LmOptions::default())?;
    let p = &fit.params;
    Ok((
        DipFit {
            plateau: p[0],
            visibility: p[1],
            center_fs: p[2],
            sigma_fs: p[3].abs(),
        },
        fit.covariance[(1, 1)].max(0.0).sqrt(),
    ))
}

/// Arrival-time spread of photons from separate pump pulses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingJitter {
    pub total_fs: f64,
    pub pump_fs: f64,
    pub walkoff_fs: f64,
}

/// Linear extent convention: pump duration plus the pump-idler walk-off over
/// the crystal.
pub fn timing_jitter(p: &SpectralParams) -> Result<TimingJitter> {
    p.validate()?;
    let walkoff = (p.gv_inverse_pump - p.gv_inverse_idler).abs() * p.crystal_length_mm;
    Ok(TimingJitter {
        total_fs: p.pump_fwhm_duration_fs + walkoff,
        pump_fs: p.pump_fwhm_duration_fs,
        walkoff_fs: walkoff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Group slownesses (fs/mm) of the default KTP data at 392.1 / 760 / 810 nm.
    fn params(idler_nm: f64) -> SpectralParams {
        SpectralParams {
            pump_center_nm: 392.1019,
            signal_center_nm: 760.0,
            idler_center_nm: 810.0,
            pump_fwhm_duration_fs: 150.0,
            crystal_length_mm: 1.0,
            gv_inverse_pump: 7220.685,
            gv_inverse_signal: 6051.399,
            gv_inverse_idler: 6369.504,
            filter_fwhm_signal_nm: 3.0,
            filter_fwhm_idler_nm: idler_nm,
            energy_tolerance: 5e-3,
        }
    }

    /// Purity at n = 1024, span 4 (frozen).
    const PURITY_1NM: f64 = 0.898_213_9;

    #[test]
    fn normalization_and_validation() {
        let g = build_jsa(&params(1.0), 128, DEFAULT_SPAN).unwrap();
        assert!((g.norm() - 1.0).abs() < 1e-9);
        assert!(build_jsa(&params(1.0), 32, DEFAULT_SPAN).is_err());
        let mut bad = params(1.0);
        bad.pump_center_nm = 380.0;
        assert!(build_jsa(&bad, 128, DEFAULT_SPAN).is_err());
    }

    #[test]
    fn coarse_grid_is_a_resolution_error() {
        // An 80-width span leaves under one sample across the idler filter.
        assert!(matches!(build_jsa(&params(1.0), 64, 80.0), Err(Error::Resolution(_))));
    }

    #[test]
    fn unfiltered_without_phase_matching_is_anticorrelated() {
        let mut p = params(1.0);
        p.filter_fwhm_signal_nm = f64::INFINITY;
        p.filter_fwhm_idler_nm = f64::INFINITY;
        p.gv_inverse_signal = p.gv_inverse_pump;
        p.gv_inverse_idler = p.gv_inverse_pump;
        // Wide window so the stripe along ν_s + ν_i = 0 is long.
        let g = build_jsa(&p, 256, 16.0).unwrap();
        let n = g.n();
        let a = g.amplitude[(10, n - 11)];
        let b = g.amplitude[(60, n - 61)];
        assert!((a - b).norm() < 1e-12 * a.norm());
        let k = schmidt(&g).unwrap().schmidt_number;
        assert!(k > 5.0, "K = {k}");
        let narrow = schmidt(&build_jsa(&p, 256, 4.0).unwrap()).unwrap().schmidt_number;
        assert!(k > 3.0 * narrow);
    }

    #[test]
    fn narrow_filters_without_walkoff_are_separable() {
        let mut p = params(0.01);
        p.filter_fwhm_signal_nm = 0.01;
        p.gv_inverse_signal = p.gv_inverse_pump;
        p.gv_inverse_idler = p.gv_inverse_pump;
        let k = schmidt(&build_jsa(&p, 128, DEFAULT_SPAN).unwrap()).unwrap().schmidt_number;
        assert!((k - 1.0).abs() < 1e-3, "K = {k}");
    }

    fn product_grid(n: usize) -> JsaGrid {
        let axis = centered_axis(n, 1.0);
        let amp = DMatrix::from_fn(n, n, |r, c| {
            C64::new((-(axis[r] / 0.1).powi(2)).exp() * (-(axis[c] / 0.2).powi(2)).exp(), 0.0)
        });
        JsaGrid::new(axis.clone(), axis, amp).unwrap()
    }

    #[test]
    fn schmidt_of_product_and_two_mode_states() {
        let s = schmidt(&product_grid(64)).unwrap();
        assert!((s.coefficients[0] - 1.0).abs() < 1e-12);
        assert!(s.coefficients[1] < 1e-7);
        assert!((s.purity - 1.0).abs() < 1e-12);

        // Two orthogonal product terms with equal weight.
        let n = 64;
        let axis = centered_axis(n, 1.0);
        let amp = DMatrix::from_fn(n, n, |r, c| {
            let a = if r == 10 && c == 20 { 1.0 } else { 0.0 };
            let b = if r == 40 && c == 50 { 1.0 } else { 0.0 };
            C64::new(a + b, 0.0)
        });
        let g = JsaGrid::new(axis.clone(), axis, amp).unwrap();
        let s = schmidt(&g).unwrap();
        assert!((s.purity - 0.5).abs() < 1e-12);
        assert!((s.coefficients[0] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn complex_amplitudes_use_complex_svd() {
        let g = product_grid(64);
        let n = g.n();
        let chirped = DMatrix::from_fn(n, n, |r, c| g.amplitude[(r, c)] * C64::from_polar(1.0, 3.0 * r as f64 / n as f64));
        let g2 = JsaGrid::new(g.nu_signal.clone(), g.nu_idler.clone(), chirped).unwrap();
        assert!((schmidt(&g2).unwrap().purity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paper_parameter_purity_is_frozen_and_converged() {
        let p256 = schmidt(&build_jsa(&params(1.0), 256, DEFAULT_SPAN).unwrap()).unwrap().purity;
        let p512 = schmidt(&build_jsa(&params(1.0), 512, DEFAULT_SPAN).unwrap()).unwrap().purity;
        assert!((p256 - p512).abs() < 1e-3);
        assert!((p256 - PURITY_1NM).abs() < 1e-3, "purity {p256}");
    }

    #[test]
    fn narrower_idler_filter_increases_purity() {
        let pur = |nm: f64| schmidt(&build_jsa(&params(nm), 256, DEFAULT_SPAN).unwrap()).unwrap().purity;
        let (a, b, c) = (pur(3.0), pur(1.0), pur(0.3));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn hom_identical_pure_sources() {
        let g = product_grid(64);
        let delays: Vec<f64> = (-20..=20).map(|k| k as f64 * 5.0).collect();
        let c = hom_dip(&g, &g, &delays, HomMode::Exact).unwrap();
        assert!((c.visibility - 1.0).abs() < 1e-9);
        assert!(c.points[20].rate.abs() < 1e-9);
    }

    #[test]
    fn hom_orthogonal_sources_are_flat() {
        let n = 64;
        let axis = centered_axis(n, 1.0);
        let mk = |lo: usize| {
            let amp = DMatrix::from_fn(n, n, |r, c| C64::new(if (lo..lo + 8).contains(&c) && r == 5 { 1.0 } else { 0.0 }, 0.0));
            JsaGrid::new(axis.clone(), axis.clone(), amp).unwrap()
        };
        let delays: Vec<f64> = (-10..=10).map(|k| k as f64 * 7.0).collect();
        let c = hom_dip(&mk(4), &mk(40), &delays, HomMode::Exact).unwrap();
        assert!(c.visibility.abs() < 1e-12);
        assert!(c.points.iter().all(|p| (p.rate - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hom_visibility_equals_purity() {
        let g = build_jsa(&params(1.0), 256, DEFAULT_SPAN).unwrap();
        let delays: Vec<f64> = (-40..=40).map(|k| k as f64 * 50.0).collect();
        let c = hom_dip(&g, &g, &delays, HomMode::Exact).unwrap();
        let s = schmidt(&g).unwrap();
        assert!((c.visibility - s.purity).abs() < 1e-6);
        assert!((0.80..=1.0).contains(&c.visibility));
        for k in 0..40 {
            assert!((c.points[k].rate - c.points[80 - k].rate).abs() < 1e-9);
        }
    }

    #[test]
    fn hom_rejects_mismatched_grids() {
        let a = build_jsa(&params(1.0), 128, DEFAULT_SPAN).unwrap();
        let b = build_jsa(&params(3.0), 128, DEFAULT_SPAN).unwrap();
        assert!(hom_dip(&a, &b, &[0.0], HomMode::Exact).is_err());
        let c = build_jsa(&params(1.0), 64, DEFAULT_SPAN).unwrap();
        assert!(hom_dip(&a, &c, &[0.0], HomMode::Exact).is_err());
    }

    #[test]
    fn sampled_hom_fit_recovers_visibility() {
        let g = build_jsa(&params(1.0), 128, DEFAULT_SPAN).unwrap();
        let delays: Vec<f64> = (-30..=30).map(|k| k as f64 * 100.0).collect();
        let exact = hom_dip(&g, &g, &delays, HomMode::Exact).unwrap();
        let c = hom_dip(&g, &g, &delays, HomMode::Sampled { mean_fourfolds: 20_000.0, seed: 3 }).unwrap();
        assert!(c.visibility_error > 0.0);
        // The dip is not exactly Gaussian; allow a small model error.
        assert!((c.visibility - exact.visibility).abs() < 5.0 * c.visibility_error + 0.02);
        let again = hom_dip(&g, &g, &delays, HomMode::Sampled { mean_fourfolds: 20_000.0, seed: 3 }).unwrap();
        assert_eq!(c, again);
        assert!(c.to_dsv().starts_with("delay_fs,stage_um,rate,normalized_rate\n"));
    }

    #[test]
    fn stage_conversion() {
        assert!((stage_to_delay_fs(10.0) - 33.356_409_5).abs() < 1e-6);
        assert!((delay_to_stage_um(stage_to_delay_fs(7.5)) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn jitter_examples() {
        let j = timing_jitter(&params(1.0)).unwrap();
        assert!((j.walkoff_fs - 851.181).abs() < 1e-3);
        assert!((j.total_fs - 1001.181).abs() < 1e-3);
        let mut p = params(1.0);
        p.crystal_length_mm = 0.0;
        assert_eq!(timing_jitter(&p).unwrap().total_fs, 150.0);
        p.crystal_length_mm = 2.0;
        assert!((timing_jitter(&p).unwrap().walkoff_fs - 2.0 * j.walkoff_fs).abs() < 1e-9);
    }

    #[test]
    fn export_has_axes_and_rows() {
        let g = build_jsa(&params(1.0), 64, DEFAULT_SPAN).unwrap();
        let text = g.to_dsv();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 64);
        assert_eq!(rows[0].split(',').count(), 128);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn schmidt_invariants(
            duration in 50.0f64..400.0,
            fs in 0.3f64..6.0,
            fi in 0.3f64..6.0,
            ks in 0.0f64..1500.0,
            ki in 0.0f64..1500.0,
        ) {
            let mut p = params(fi);
            p.filter_fwhm_signal_nm = fs;
            p.pump_fwhm_duration_fs = duration;
            p.gv_inverse_signal = p.gv_inverse_pump - ks;
            p.gv_inverse_idler = p.gv_inverse_pump - ki;
            let g = build_jsa(&p, 128, DEFAULT_SPAN).unwrap();
            let s = schmidt(&g).unwrap();
            let sum: f64 = s.coefficients.iter().map(|c| c * c).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.purity > 0.0 && s.purity <= 1.0 + 1e-12);
            prop_assert!(s.schmidt_number >= 1.0 - 1e-12);
            prop_assert!(s.coefficients.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn hom_symmetric_for_identical_sources(
            fi in 0.3f64..6.0,
            ki in 0.0f64..2000.0,
            tau in 0.0f64..3000.0,
        ) {
            let mut p = params(fi);
            p.gv_inverse_idler = p.gv_inverse_pump - ki;
            let g = build_jsa(&p, 128, DEFAULT_SPAN).unwrap();
            let c = hom_dip(&g, &g, &[tau, -tau], HomMode::Exact).unwrap();
            prop_assert!((c.points[0].rate - c.points[1].rate).abs() < 1e-9);
            prop_assert!(c.points.iter().all(|p| p.rate >= -1e-12));
        }
    }
}
