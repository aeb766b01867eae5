//! Projective polarization analysis.
//!
//! An analyzer is an optional quarter-wave plate followed by a linear
//! polarizer. Photons pass the plate first, so the projected single-photon
//! state is `J_QWP† |θ⟩`.

use nalgebra::{DVector, Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::num::{Real, C};
use crate::polcore::{DensityMatrix, Ket, Projector};
use crate::rng::{poisson, stream_rng};

/// Single-arm analyzer, angles in degrees canonicalized to `[0, 180)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Analyzer {
    qwp_deg: Option<f64>,
    pol_deg: f64,
}

fn canonical(deg: f64) -> f64 {
    let d = deg.rem_euclid(180.0);
    if d >= 180.0 {
        0.0
    } else {
        d
    }
}

impl Analyzer {
    pub fn new(pol_deg: f64, qwp_deg: Option<f64>) -> Result<Self> {
        if !pol_deg.is_finite() || qwp_deg.is_some_and(|q| !q.is_finite()) {
            return Err(invalid("analyzer angles must be finite"));
        }
        Ok(Analyzer {
            qwp_deg: qwp_deg.map(canonical),
            pol_deg: canonical(pol_deg),
        })
    }

    /// Polarizer only.
    pub fn linear(pol_deg: f64) -> Self {
        Analyzer::new(pol_deg, None).expect("finite angle")
    }

    pub fn h() -> Self {
        Analyzer::linear(0.0)
    }
    pub fn v() -> Self {
        Analyzer::linear(90.0)
    }
    pub fn d() -> Self {
        Analyzer::linear(45.0)
    }
    /// Left circular, `(|H⟩ + i|V⟩)/√2`: quarter-wave plate at 45°, polarizer at 0°.
    pub fn l() -> Self {
        Analyzer::new(0.0, Some(45.0)).expect("finite angle")
    }

    pub fn pol_deg(&self) -> f64 {
        self.pol_deg
    }

    pub fn qwp_deg(&self) -> Option<f64> {
        self.qwp_deg
    }

    /// Same plate, polarizer rotated by 90°.
    pub fn orthogonal(&self) -> Self {
        Analyzer {
            qwp_deg: self.qwp_deg,
            pol_deg: canonical(self.pol_deg + 90.0),
        }
    }

    /// Normalized single-photon state selected by this analyzer.
    pub fn state<T: Real>(&self) -> Vector2<C<T>> {
        let th = T::lit(self.pol_deg.to_radians());
        let pol = Vector2::new(C::new(th.cos(), T::zero()), C::new(th.sin(), T::zero()));
        match self.qwp_deg {
            None => pol,
            Some(q) => qwp_jones::<T>(T::lit(q.to_radians())).adjoint() * pol,
        }
    }
}

/// Jones matrix of an ideal quarter-wave plate with its fast axis at `angle`.
pub fn qwp_jones<T: Real>(angle: T) -> Matrix2<C<T>> {
    let (s, c) = angle.sin_cos();
    let i = C::new(T::zero(), T::one());
    let re = |x: T| C::new(x, T::zero());
    Matrix2::new(
        re(c * c) + i * (s * s),
        re(s * c) - i * (s * c),
        re(s * c) - i * (s * c),
        re(s * s) + i * (c * c),
    )
}

/// Analyzer pair for the signal and idler arms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasSetting {
    pub signal: Analyzer,
    pub idler: Analyzer,
}

impl MeasSetting {
    pub fn new(signal: Analyzer, idler: Analyzer) -> Self {
        MeasSetting { signal, idler }
    }

    /// Polarizers only, angles in degrees.
    pub fn linear(signal_deg: f64, idler_deg: f64) -> Self {
        MeasSetting::new(Analyzer::linear(signal_deg), Analyzer::linear(idler_deg))
    }

    pub fn ket<T: Real>(&self) -> Ket<T> {
        Ket::product(&self.signal.state::<T>(), &self.idler.state::<T>())
            .expect("analyzer states are normalized")
    }

    /// Rank-1 two-photon projector.
    pub fn projector<T: Real>(&self) -> Projector<T> {
        Projector::onto(&self.ket::<T>())
    }
}

pub fn projector_from_setting<T: Real>(s: &MeasSetting) -> Projector<T> {
    s.projector()
}

pub fn coincidence_probability<T: Real>(rho: &DensityMatrix<T>, s: &MeasSetting) -> Result<T> {
    rho.expectation(&s.projector())
}

/// Counts acquired (or simulated) for one setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountRecord {
    pub setting: MeasSetting,
    pub counts: u64,
    pub duration_s: f64,
}

impl CountRecord {
    pub fn new(setting: MeasSetting, counts: u64, duration_s: f64) -> Result<Self> {
        if !(duration_s > 0.0) || !duration_s.is_finite() {
            return Err(invalid("count duration must be positive"));
        }
        Ok(CountRecord {
            setting,
            counts,
            duration_s,
        })
    }
}

/// How detector counts are produced from probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    /// Expected values, no sampling (the infinite-duration limit).
    Exact,
    /// Poissonian counts from a seed.
    Sampled { seed: u64 },
}

fn check_rate(rate_hz: f64, duration_s: f64) -> Result<()> {
    if !(rate_hz >= 0.0) || !rate_hz.is_finite() {
        return Err(invalid("rate must be nonnegative"));
    }
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(invalid("duration must be positive"));
    }
    Ok(())
}

/// Poissonian counts with mean `rate · duration · p(setting)`.
pub fn simulate_counts(
    rho: &DensityMatrix<f64>,
    s: &MeasSetting,
    rate_hz: f64,
    duration_s: f64,
    seed: u64,
) -> Result<CountRecord> {
    simulate_counts_stream(rho, s, rate_hz, duration_s, seed, 0)
}

pub(crate) fn simulate_counts_stream(
    rho: &DensityMatrix<f64>,
    s: &MeasSetting,
    rate_hz: f64,
    duration_s: f64,
    seed: u64,
    stream: u64,
) -> Result<CountRecord> {
    check_rate(rate_hz, duration_s)?;
    let p = coincidence_probability(rho, s)?;
    let mut rng = stream_rng(seed, stream);
    let counts = poisson(&mut rng, rate_hz * duration_s * p);
    CountRecord::new(*s, counts, duration_s)
}

fn expected_or_sampled(
    rho: &DensityMatrix<f64>,
    s: &MeasSetting,
    rate_hz: f64,
    duration_s: f64,
    mode: CountMode,
    stream: u64,
) -> Result<f64> {
    match mode {
        CountMode::Exact => Ok(rate_hz * duration_s * coincidence_probability(rho, s)?),
        CountMode::Sampled { seed } => {
            Ok(simulate_counts_stream(rho, s, rate_hz, duration_s, seed, stream)?.counts as f64)
        }
    }
}

/// Result of fitting `a·sin²(θ − θ₀) + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinSqFit {
    pub amplitude: f64,
    pub offset: f64,
    pub phase_deg: f64,
    pub visibility: f64,
    pub visibility_error: f64,
    pub iterations: usize,
}

impl SinSqFit {
    pub fn value(&self, angle_deg: f64) -> f64 {
        let s = (angle_deg - self.phase_deg).to_radians().sin();
        self.amplitude * s * s + self.offset
    }
}

/// Polarization-correlation fringe with its fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeCurve {
    pub idler: Analyzer,
    /// `(signal polarizer angle in degrees, counts)`; counts are expected
    /// values in exact mode.
    pub points: Vec<(f64, f64)>,
    pub fit: SinSqFit,
}

impl FringeCurve {
    /// Comma-separated table `angle_deg,counts,fit_value`.
    pub fn to_dsv(&self) -> String {
        let mut out = String::from("angle_deg,counts,fit_value\n");
        for &(a, n) in &self.points {
            out.push_str(&format!("{a},{n},{:.6}\n", self.fit.value(a)));
        }
        out
    }
}

/// Scans the signal polarizer with the idler analyzer fixed and fits the
/// resulting fringe.
pub fn fringe_scan(
    rho: &DensityMatrix<f64>,
    idler: Analyzer,
    signal_angles_deg: &[f64],
    rate_hz: f64,
    duration_s: f64,
    mode: CountMode,
) -> Result<FringeCurve> {
    if signal_angles_deg.len() < 8 {
        return Err(invalid("a fringe scan needs at least 8 angles"));
    }
    let lo = signal_angles_deg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = signal_angles_deg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 180.0 - 1e-9 {
        return Err(invalid("fringe scan must span at least 180 degrees"));
    }
    check_rate(rate_hz, duration_s)?;
    let points = signal_angles_deg
        .par_iter()
        .enumerate()
        .map(|(k, &a)| {
            let s = MeasSetting::new(Analyzer::linear(a), idler);
            expected_or_sampled(rho, &s, rate_hz, duration_s, mode, k as u64).map(|n| (a, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_sin_squared(&points)?;
    Ok(FringeCurve { idler, points, fit })
}

/// Weighted (Poissonian) fit of `a·sin²(θ − θ₀) + b`, seeded from the
/// discrete maximum and minimum.
pub fn fit_sin_squared(points: &[(f64, f64)]) -> Result<SinSqFit> {
    let x: Vec<f64> = points.iter().map(|p| p.0.to_radians()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let w: Vec<f64> = y.iter().map(|&n| 1.0 / n.max(1.0)).collect();
    let (imin, _) = y
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .ok_or_else(|| invalid("empty fringe"))?;
    let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ymax - y[imin] <= 1e-12 * ymax.abs().max(1.0) {
        return flat_fringe(&x, &y, &w);
    }
    let p0 = DVector::from_vec(vec![ymax - y[imin], y[imin], x[imin]]);
    let model = |p: &DVector<f64>, th: f64| {
        let (s, c) = (th - p[2]).sin_cos();
        (
            p[0] * s * s + p[1],
            DVector::from_vec(vec![s * s, 1.0, -2.0 * p[0] * s * c]),
        )
    };
    let fit = levenberg_marquardt(model, &x, &y, &w, p0, LmOptions::default())?;
    let (mut a, mut b, mut phase) = (fit.params[0], fit.params[1], fit.params[2]);
    if a < 0.0 {
        b += a;
        a = -a;
        phase += std::f64::consts::FRAC_PI_2;
    }
    let denom = a + 2.0 * b;
    if !(denom > 0.0) {
        return Err(Error::FitFailure {
            iterations: fit.iterations,
            rss: fit.chi2,
            residuals: fit.residuals,
        });
    }
    let vis = a / denom;
    // dV/da and dV/db; the sign flip above leaves the (a, b) covariance
    // block transformed by [[-1, 0], [1, 1]].
    let (ga, gb) = (2.0 * b / (denom * denom), -2.0 * a / (denom * denom));
    let cov = &fit.covariance;
    let var = if fit.params[0] < 0.0 {
        let (caa, cab, cbb) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        // a' = -a, b' = b + a
        let v_aa = caa;
        let v_ab = -caa - cab;
        let v_bb = caa + 2.0 * cab + cbb;
        ga * ga * v_aa + 2.0 * ga * gb * v_ab + gb * gb * v_bb
    } else {
        ga * ga * cov[(0, 0)] + 2.0 * ga * gb * cov[(0, 1)] + gb * gb * cov[(1, 1)]
    };
    Ok(SinSqFit {
        amplitude: a,
        offset: b,
        phase_deg: phase.to_degrees().rem_euclid(180.0),
        visibility: vis.clamp(0.0, 1.0),
        visibility_error: var.max(0.0).sqrt(),
        iterations: fit.iterations,
    })
}

/// Constant data: the phase is undetermined, so it is pinned at 0 and only
/// the amplitude and offset enter the error.
fn flat_fringe(x: &[f64], y: &[f64], w: &[f64]) -> Result<SinSqFit> {
    let b = y.iter().sum::<f64>() / y.len() as f64;
    let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
    for (th, wi) in x.iter().zip(w) {
        let s2 = th.sin().powi(2);
        saa += wi * s2 * s2;
        sab += wi * s2;
        sbb += wi;
    }
    let det = saa * sbb - sab * sab;
    if !(b > 0.0) || !(det > 0.0) {
        return Err(Error::FitFailure {
            iterations: 0,
            rss: 0.0,
            residuals: vec![0.0; y.len()],
        });
    }
    let caa = sbb / det;
    Ok(SinSqFit {
        amplitude: 0.0,
        offset: b,
        phase_deg: 0.0,
        visibility: 0.0,
        visibility_error: caa.sqrt() / (2.0 * b),
        iterations: 0,
    })
}

/// CHSH analyzer angles (degrees): `a, a′` on the signal arm, `b, b′` on the idler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChshAngles {
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl Default for ChshAngles {
    fn default() -> Self {
        ChshAngles {
            a: 0.0,
            a_prime: 45.0,
            b: 22.5,
            b_prime: 67.5,
        }
    }
}

impl ChshAngles {
    /// The four `(signal, idler)` pairs in the order `(a,b), (a,b′), (a′,b), (a′,b′)`.
    pub fn pairs(&self) -> [(f64, f64); 4] {
        [
            (self.a, self.b),
            (self.a, self.b_prime),
            (self.a_prime, self.b),
            (self.a_prime, self.b_prime),
        ]
    }
}

/// Sixteen-measurement CHSH evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChshResult {
    pub s: f64,
    pub s_error: f64,
    pub correlations: [f64; 4],
    pub correlation_errors: [f64; 4],
    /// Per angle pair: counts for `(θ,θ), (θ⊥,θ⊥), (θ,θ⊥), (θ⊥,θ)`.
    pub counts: [[f64; 4]; 4],
    pub angles: ChshAngles,
}

impl ChshResult {
    /// Comma-separated table of the 16 counts followed by `S` and `S_error` rows.
    pub fn to_dsv(&self) -> String {
        let mut out = String::from("label,theta_s_deg,theta_i_deg,value\n");
        for (k, (a, b)) in self.angles.pairs().iter().enumerate() {
            let combos = [(a, b), (&(a + 90.0), &(b + 90.0)), (a, &(b + 90.0)), (&(a + 90.0), b)];
            for (j, (sa, ib)) in combos.iter().enumerate() {
                out.push_str(&format!("C{k}{j},{sa},{ib},{}\n", self.counts[k][j]));
            }
        }
        out.push_str(&format!("S,,,{:.9}\n", self.s));
        out.push_str(&format!("S_error,,,{:.9}\n", self.s_error));
        out
    }
}

/// CHSH value `S = −[E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)]`, signed so the
/// singlet gives `+2√2` at the default angles. Orthogonal settings use
/// `θ⊥ = θ + 90°`.
pub fn chsh(
    rho: &DensityMatrix<f64>,
    angles: ChshAngles,
    mode: CountMode,
    rate_hz: f64,
    duration_s: f64,
) -> Result<ChshResult> {
    check_rate(rate_hz, duration_s)?;
    let mut counts = [[0.0; 4]; 4];
    let mut correlations = [0.0; 4];
    let mut correlation_errors = [0.0; 4];
    for (k, &(sa, ib)) in angles.pairs().iter().enumerate() {
        let a = Analyzer::linear(sa);
        let b = Analyzer::linear(ib);
        let combos = [
            MeasSetting::new(a, b),
            MeasSetting::new(a.orthogonal(), b.orthogonal()),
            MeasSetting::new(a, b.orthogonal()),
            MeasSetting::new(a.orthogonal(), b),
        ];
        for (j, s) in combos.iter().enumerate() {
            counts[k][j] = match mode {
                CountMode::Exact => coincidence_probability(rho, s)?,
                _ => expected_or_sampled(rho, s, rate_hz, duration_s, mode, (4 * k + j) as u64)?,
            };
        }
        let total: f64 = counts[k].iter().sum();
        if !(total > 0.0) {
            return Err(Error::InsufficientStatistics(format!(
                "no coincidences for angle pair ({sa}, {ib})"
            )));
        }
        let e = (counts[k][0] + counts[k][1] - counts[k][2] - counts[k][3]) / total;
        correlations[k] = e;
        correlation_errors[k] = match mode {
            CountMode::Exact => 0.0,
            CountMode::Sampled { .. } => ((1.0 - e * e).max(0.0) / total).sqrt(),
        };
    }
    let s = -(correlations[0] - correlations[1] + correlations[2] + correlations[3]);
    let s_error = correlation_errors.iter().map(|e| e * e).sum::<f64>().sqrt();
    Ok(ChshResult {
        s,
        s_error,
        correlations,
        correlation_errors,
        counts,
        angles,
    })
}
