//! Two-qubit polarization state tomography.
//!
//! Sixteen analyzer settings are inverted linearly, then refined by a
//! maximum-likelihood fit over physical states `ρ = T†T / Tr(T†T)` with `T`
//! lower triangular (real diagonal, 16 real parameters). Statistical errors
//! come from Poissonian resampling of the counts.

use nalgebra::{Complex, DMatrix, DVector, Matrix4};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::measure::{Analyzer, CountRecord, MeasSetting};
use crate::optimize::{bfgs, BfgsOptions};
use crate::polcore::{pauli_product, DensityMatrix, Ket, Mat4};
use crate::rng::{poisson, stream_rng};

type M4 = Mat4<f64>;

/// Analyzer for a tomography label: `H`, `V`, `D` (+45°), `A` (−45°),
/// `L` and `R` (circular).
pub fn analyzer_for_label(label: char) -> Option<Analyzer> {
    match label {
        'H' => Some(Analyzer::h()),
        'V' => Some(Analyzer::v()),
        'D' => Some(Analyzer::d()),
        'A' => Some(Analyzer::linear(135.0)),
        'L' => Some(Analyzer::l()),
        'R' => Some(Analyzer::new(90.0, Some(45.0)).expect("finite")),
        _ => None,
    }
}

/// Ordered, informationally complete list of 16 settings.
#[derive(Debug, Clone)]
pub struct TomoSettings {
    labels: Vec<String>,
    settings: Vec<MeasSetting>,
    projectors: Vec<M4>,
    /// `p = B·r` with `ρ = Σₖ rₖ σₖ/4` over the Pauli products.
    design: DMatrix<f64>,
    design_inverse: DMatrix<f64>,
    condition_number: f64,
}

impl TomoSettings {
    /// Builds from two-letter labels (signal, idler), e.g. `"HD"`.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        if labels.len() != 16 {
            return Err(invalid(format!("tomography needs 16 settings, got {}", labels.len())));
        }
        let mut settings = Vec::with_capacity(16);
        for l in labels {
            let l = l.as_ref();
            let chars: Vec<char> = l.chars().collect();
            let parsed = match chars.as_slice() {
                [s, i] => analyzer_for_label(*s).zip(analyzer_for_label(*i)),
                _ => None,
            };
            let (s, i) = parsed.ok_or_else(|| invalid(format!("unknown setting label `{l}`")))?;
            settings.push(MeasSetting::new(s, i));
        }
        let labels = labels.iter().map(|l| l.as_ref().to_string()).collect();
        Self::build(labels, settings)
    }

    fn build(labels: Vec<String>, settings: Vec<MeasSetting>) -> Result<Self> {
        let projectors: Vec<M4> = settings.iter().map(|s| *s.projector::<f64>().matrix()).collect();
        let design = DMatrix::from_fn(16, 16, |nu, k| {
            (projectors[nu] * pauli_product::<f64>(k / 4, k % 4)).trace().re / 4.0
        });
        let sv = design.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !condition_number.is_finite() || condition_number > 1e10 {
            return Err(Error::Config(format!(
                "tomography settings are not informationally complete (condition number {condition_number:.3e})"
            )));
        }
        let design_inverse = design
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("singular tomography design matrix".into()))?;
        Ok(TomoSettings {
            labels,
            settings,
            projectors,
            design,
            design_inverse,
            condition_number,
        })
    }

    pub fn settings(&self) -> &[MeasSetting] {
        &self.settings
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    /// Probabilities `Tr(ρ P_ν)` for every setting.
    pub fn probabilities(&self, rho: &M4) -> Vec<f64> {
        self.projectors.iter().map(|p| (rho * p).trace().re).collect()
    }

    pub fn design_matrix(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Records whose counts are the exact expected values, rounded to the
    /// nearest integer only when `round` is set.
    pub fn expected_records(&self, rho: &M4, rate_hz: f64, duration_s: f64) -> Vec<(f64, f64)> {
        self.probabilities(rho)
            .into_iter()
            .map(|p| (rate_hz * duration_s * p, duration_s))
            .collect()
    }
}

/// `{H, V, D, L} ⊗ {H, V, D, L}`, signal label first.
pub fn canonical_settings() -> TomoSettings {
    let letters = ['H', 'V', 'D', 'L'];
    let labels: Vec<String> = letters
        .iter()
        .flat_map(|s| letters.iter().map(move |i| format!("{s}{i}")))
        .collect();
    TomoSettings::from_labels(&labels).expect("canonical settings are complete")
}

/// Tomography input: counts (possibly non-integer expected values) and
/// durations aligned with a [`TomoSettings`].
#[derive(Debug, Clone, PartialEq)]
pub struct TomoData {
    pub counts: Vec<f64>,
    pub durations: Vec<f64>,
}

impl TomoData {
    pub fn new(counts: Vec<f64>, durations: Vec<f64>) -> Result<Self> {
        if counts.len() != 16 || durations.len() != 16 {
            return Err(invalid("tomography data needs 16 counts and durations"));
        }
        if counts.iter().any(|&n| !(n >= 0.0) || !n.is_finite()) {
            return Err(invalid("counts must be finite and nonnegative"));
        }
        if durations.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(invalid("durations must be positive"));
        }
        Ok(TomoData { counts, durations })
    }

    /// Checks that the records follow `settings` in order.
    pub fn from_records(records: &[CountRecord], settings: &TomoSettings) -> Result<Self> {
        if records.len() != 16 {
            return Err(invalid(format!("expected 16 count records, got {}", records.len())));
        }
        for (k, (r, s)) in records.iter().zip(settings.settings()).enumerate() {
            if r.setting != *s {
                return Err(invalid(format!("count record {k} does not match setting {}", settings.labels[k])));
            }
        }
        TomoData::new(
            records.iter().map(|r| r.counts as f64).collect(),
            records.iter().map(|r| r.duration_s).collect(),
        )
    }

    /// Noiseless data: expected counts at `rate_hz` for `duration_s` each.
    pub fn expected(rho: &M4, settings: &TomoSettings, rate_hz: f64, duration_s: f64) -> Self {
        let (counts, durations) = settings.expected_records(rho, rate_hz, duration_s).into_iter().unzip();
        TomoData { counts, durations }
    }

    /// Poissonian counts around the expectation, one stream per setting.
    pub fn sampled(rho: &M4, settings: &TomoSettings, rate_hz: f64, duration_s: f64, seed: u64) -> Self {
        let counts = settings
            .probabilities(rho)
            .iter()
            .enumerate()
            .map(|(k, p)| poisson(&mut stream_rng(seed, k as u64), rate_hz * duration_s * p.max(0.0)) as f64)
            .collect();
        TomoData {
            counts,
            durations: vec![duration_s; 16],
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    fn rates(&self) -> DVector<f64> {
        DVector::from_iterator(16, self.counts.iter().zip(&self.durations).map(|(n, t)| n / t))
    }
}

/// Linear inversion; Hermitian with unit trace but not necessarily positive.
#[derive(Debug, Clone)]
pub struct LinearEstimate {
    pub matrix: M4,
    /// Fitted total pair rate (`Tr ρ̃`, counts per second).
    pub intensity: f64,
}

pub fn linear_reconstruct(data: &TomoData, settings: &TomoSettings) -> Result<LinearEstimate> {
    if !(data.total() > 0.0) {
        return Err(invalid("tomography data contains no counts"));
    }
    let r = &settings.design_inverse * data.rates();
    let mut m = M4::zeros();
    for k in 0..16 {
        m += pauli_product::<f64>(k / 4, k % 4).scale(r[k] / 4.0);
    }
    let intensity = r[0];
    if !(intensity > 0.0) {
        return Err(Error::NumericalConsistency(format!(
            "linear inversion gives non-positive intensity {intensity}"
        )));
    }
    let m = m.unscale(intensity);
    Ok(LinearEstimate {
        matrix: (m + m.adjoint()).scale(0.5),
        intensity,
    })
}

/// Normalization of the expected counts inside the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodNorm {
    /// Expected counts `t_ν·⟨ψ_ν|T†T|ψ_ν⟩`; the total rate is a fit parameter.
    FittedIntensity,
    /// Expected counts `t_ν·R̂·p_ν(ρ)` with `R̂` fixed by the linear inversion.
    FixedExposure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    Analytic,
    /// Central differences with step 1e-6.
    Numerical,
}

#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    pub norm: LikelihoodNorm,
    pub gradient: GradientMethod,
    pub optimizer: BfgsOptions,
    /// Lower clamp on `p_ν` inside the likelihood.
    pub probability_floor: f64,
    /// Eigenvalue floor used when seeding from the linear estimate.
    pub init_eigen_floor: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            norm: LikelihoodNorm::FittedIntensity,
            gradient: GradientMethod::Analytic,
            optimizer: BfgsOptions::default(),
            probability_floor: 1e-12,
            init_eigen_floor: 1e-6,
        }
    }
}

/// Lower-triangular `T` from 16 reals: 4 diagonal entries, then real and
/// imaginary parts of `T₁₀, T₂₀, T₃₀, T₂₁, T₃₁, T₃₂`.
pub fn t_matrix(t: &[f64]) -> M4 {
    let mut m = M4::zeros();
    for i in 0..4 {
        m[(i, i)] = Complex::new(t[i], 0.0);
    }
    for (k, (r, c)) in LOWER.iter().enumerate() {
        m[(*r, *c)] = Complex::new(t[4 + 2 * k], t[5 + 2 * k]);
    }
    m
}

const LOWER: [(usize, usize); 6] = [(1, 0), (2, 0), (3, 0), (2, 1), (3, 1), (3, 2)];

/// Negative log-likelihood (Gaussian approximation to Poisson statistics)
/// `L = Σ_ν (m_ν − n_ν)² / (2 m_ν)`.
#[derive(Debug, Clone)]
pub struct Likelihood<'a> {
    settings: &'a TomoSettings,
    data: &'a TomoData,
    norm: LikelihoodNorm,
    fixed_rate: f64,
    floor: f64,
}

impl<'a> Likelihood<'a> {
    pub fn new(settings: &'a TomoSettings, data: &'a TomoData, norm: LikelihoodNorm, fixed_rate: f64, floor: f64) -> Self {
        Likelihood {
            settings,
            data,
            norm,
            fixed_rate,
            floor,
        }
    }

    pub fn value(&self, t: &[f64]) -> f64 {
        self.eval(t, false).0
    }

    /// Objective and analytic gradient with respect to the 16 parameters.
    pub fn value_and_gradient(&self, t: &[f64]) -> (f64, DVector<f64>) {
        let (v, g) = self.eval(t, true);
        (v, g.expect("gradient requested"))
    }

    pub fn numerical_gradient(&self, t: &[f64], step: f64) -> DVector<f64> {
        let mut x = t.to_vec();
        DVector::from_fn(16, |k, _| {
            let orig = x[k];
            x[k] = orig + step;
            let up = self.value(&x);
            x[k] = orig - step;
            let down = self.value(&x);
            x[k] = orig;
            (up - down) / (2.0 * step)
        })
    }

    fn eval(&self, t: &[f64], want_grad: bool) -> (f64, Option<DVector<f64>>) {
        let tm = t_matrix(t);
        let m = tm.adjoint() * tm;
        let tr = m.trace().re.max(1e-300);
        let mut value = 0.0;
        let mut g = M4::zeros();
        for (nu, proj) in self.settings.projectors.iter().enumerate() {
            let n = self.data.counts[nu];
            let dur = self.data.durations[nu];
            let raw = (m * proj).trace().re;
            let p = raw / tr;
            let clamped = p < self.floor;
            let expected = match self.norm {
                LikelihoodNorm::FittedIntensity => dur * tr * p.max(self.floor),
                LikelihoodNorm::FixedExposure => dur * self.fixed_rate * p.max(self.floor),
            };
            value += (expected - n).powi(2) / (2.0 * expected);
            if want_grad {
                let dl = 0.5 * (1.0 - (n / expected).powi(2));
                match (self.norm, clamped) {
                    (LikelihoodNorm::FittedIntensity, false) => g += proj.scale(dl * dur),
                    (LikelihoodNorm::FittedIntensity, true) => {
                        g += M4::identity().scale(dl * dur * self.floor)
                    }
                    (LikelihoodNorm::FixedExposure, false) => {
                        let scale = dl * dur * self.fixed_rate / tr;
                        g += (proj - M4::identity().scale(p)).scale(scale);
                    }
                    (LikelihoodNorm::FixedExposure, true) => {}
                }
            }
        }
        if !want_grad {
            return (value, None);
        }
        // dL = Re Tr(G dM), dM = dT†T + T†dT  ⇒  ∂L/∂Re T_ab = 2 Re (TG)_ab,
        // ∂L/∂Im T_ab = 2 Im (TG)_ab.
        let k = tm * g;
        let mut grad = DVector::zeros(16);
        for i in 0..4 {
            grad[i] = 2.0 * k[(i, i)].re;
        }
        for (idx, (r, c)) in LOWER.iter().enumerate() {
            grad[4 + 2 * idx] = 2.0 * k[(*r, *c)].re;
            grad[5 + 2 * idx] = 2.0 * k[(*r, *c)].im;
        }
        (value, Some(grad))
    }
}

/// Lower-triangular `T` with `T†T = m` (m positive definite).
pub fn t_params_from_matrix(m: &M4) -> Result<[f64; 16]> {
    // Cholesky of the index-reversed matrix gives m = U U† with U upper
    // triangular; T = U†.
    let rev = Matrix4::from_fn(|r, c| m[(3 - r, 3 - c)]);
    let chol = rev
        .cholesky()
        .ok_or_else(|| Error::NumericalConsistency("initial state is not positive definite".into()))?;
    let l = chol.l();
    let u = Matrix4::from_fn(|r, c| l[(3 - r, 3 - c)]);
    let t = u.adjoint();
    let mut out = [0.0; 16];
    for i in 0..4 {
        out[i] = t[(i, i)].re;
    }
    for (k, (r, c)) in LOWER.iter().enumerate() {
        out[4 + 2 * k] = t[(*r, *c)].re;
        out[5 + 2 * k] = t[(*r, *c)].im;
    }
    Ok(out)
}

/// Projects a Hermitian unit-trace matrix onto positive definite states by
/// clamping eigenvalues from below and renormalizing.
pub fn clamp_to_physical(m: &M4, floor: f64) -> M4 {
    let eig = m.symmetric_eigen();
    let vals = eig.eigenvalues.map(|e| e.max(floor));
    let total: f64 = vals.iter().sum();
    let d = M4::from_diagonal(&vals.map(|v| Complex::new(v / total, 0.0)));
    let out = eig.eigenvectors * d * eig.eigenvectors.adjoint();
    (out + out.adjoint()).scale(0.5)
}

#[derive(Debug, Clone)]
pub struct MleResult {
    pub state: DensityMatrix<f64>,
    pub likelihood: f64,
    pub initial_likelihood: f64,
    pub iterations: usize,
    pub params: [f64; 16],
}

pub fn mle_reconstruct(data: &TomoData, settings: &TomoSettings, opts: &MleOptions) -> Result<MleResult> {
    let lin = linear_reconstruct(data, settings)?;
    let init = clamp_to_physical(&lin.matrix, opts.init_eigen_floor).scale(lin.intensity);
    let t0 = t_params_from_matrix(&init)?;
    let lik = Likelihood::new(settings, data, opts.norm, lin.intensity, opts.probability_floor);
    let x0 = DVector::from_column_slice(&t0);
    let min = match opts.gradient {
        GradientMethod::Analytic => bfgs(|x| lik.value_and_gradient(x.as_slice()), x0, opts.optimizer)?,
        GradientMethod::Numerical => bfgs(
            |x| (lik.value(x.as_slice()), lik.numerical_gradient(x.as_slice(), 1e-6)),
            x0,
            opts.optimizer,
        )?,
    };
    let tm = t_matrix(min.x.as_slice());
    let m = tm.adjoint() * tm;
    let m = m.unscale(m.trace().re);
    let state = DensityMatrix::new((m + m.adjoint()).scale(0.5))?;
    let mut params = [0.0; 16];
    params.copy_from_slice(min.x.as_slice());
    Ok(MleResult {
        state,
        likelihood: min.value,
        initial_likelihood: min.initial_value,
        iterations: min.iterations,
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSummary {
    pub fidelity_mean: f64,
    pub fidelity_std: f64,
    pub runs: usize,
    pub failures: usize,
}

/// Resamples every count as Poisson with mean equal to the observed count,
/// reconstructs, and reports the fidelity spread. Run `r` draws from stream
/// `r` of `seed`.
pub fn monte_carlo_errors(
    data: &TomoData,
    settings: &TomoSettings,
    n_runs: usize,
    target: &Ket<f64>,
    seed: u64,
    opts: &MleOptions,
) -> Result<MonteCarloSummary> {
    if n_runs < 2 {
        return Err(invalid("Monte-Carlo error estimation needs at least 2 runs"));
    }
    let outcomes: Vec<Option<f64>> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream_rng(seed, run as u64);
            let counts = data.counts.iter().map(|&n| poisson(&mut rng, n) as f64).collect();
            let resampled = TomoData {
                counts,
                durations: data.durations.clone(),
            };
            mle_reconstruct(&resampled, settings, opts)
                .ok()
                .map(|r| r.state.fidelity(target))
        })
        .collect();
    let fids: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failures = n_runs - fids.len();
    if failures * 10 > n_runs || fids.len() < 2 {
        return Err(Error::InsufficientStatistics(format!(
            "{failures} of {n_runs} Monte-Carlo reconstructions failed"
        )));
    }
    let mean = fids.iter().sum::<f64>() / fids.len() as f64;
    let var = fids.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (fids.len() - 1) as f64;
    Ok(MonteCarloSummary {
        fidelity_mean: mean,
        fidelity_std: var.sqrt(),
        runs: n_runs,
        failures,
    })
}

#[derive(Debug, Clone)]
pub struct TomoResult {
    pub rho_linear: M4,
    pub rho_mle: DensityMatrix<f64>,
    pub fidelity: f64,
    pub fidelity_std: f64,
    pub mle_likelihood: f64,
    pub mc_runs: usize,
}

impl TomoResult {
    pub fn summary_line(&self) -> String {
        format!("F={:.6} +/- {:.6}", self.fidelity, self.fidelity_std)
    }
}

/// Linear and maximum-likelihood reconstruction plus Monte-Carlo errors.
pub fn run_tomography(
    data: &TomoData,
    settings: &TomoSettings,
    target: &Ket<f64>,
    mc_runs: usize,
    seed: u64,
    opts: &MleOptions,
) -> Result<TomoResult> {
    let lin = linear_reconstruct(data, settings)?;
    let mle = mle_reconstruct(data, settings, opts)?;
    let mc = monte_carlo_errors(data, settings, mc_runs, target, seed, opts)?;
    Ok(TomoResult {
        rho_linear: lin.matrix,
        fidelity: mle.state.fidelity(target),
        rho_mle: mle.state,
        fidelity_std: mc.fidelity_std,
        mle_likelihood: mle.likelihood,
        mc_runs,
    })
}

/// Parses a count file: 16 lines `setting_id counts duration_s`, `#`
/// comments allowed. Returns the settings in file order and the data.
pub fn parse_count_file(text: &str) -> Result<(TomoSettings, TomoData)> {
    let mut labels = Vec::new();
    let mut counts = Vec::new();
    let mut durations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| Error::Schema {
            path: "counts".into(),
            line: lineno + 1,
            message: msg.into(),
        };
        if toks.len() != 3 {
            return Err(err("expected `setting_id counts duration_s`"));
        }
        let n: u64 = toks[1].parse().map_err(|_| err("counts must be a nonnegative integer"))?;
        let t: f64 = toks[2].parse().map_err(|_| err("duration must be a number"))?;
        if !(t > 0.0) {
            return Err(err("duration must be positive"));
        }
        labels.push(toks[0].to_string());
        counts.push(n as f64);
        durations.push(t);
    }
    let settings = TomoSettings::from_labels(&labels)?;
    Ok((settings, TomoData::new(counts, durations)?))
}

/// Writes counts in the format read by [`parse_count_file`]; counts are
/// rounded to integers.
pub fn format_count_file(settings: &TomoSettings, data: &TomoData) -> String {
    let mut out = String::new();
    for (k, label) in settings.labels().iter().enumerate() {
        out.push_str(&format!("{label} {} {}\n", data.counts[k].round() as u64, data.durations[k]));
    }
    out
}
