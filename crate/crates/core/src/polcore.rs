//! Two-photon polarization algebra.
//!
//! Every vector and matrix here uses the basis order `HH, HV, VH, VV`
//! (signal first, idler second). Values are validated once at construction
//! and are immutable afterwards.

use nalgebra::{Complex, Matrix4, Vector2, Vector4};

use crate::error::{invalid, Error, Result};
use crate::num::{c, cr, Real, C};

/// 4×4 complex matrix over the two-photon polarization space.
pub type Mat4<T> = Matrix4<C<T>>;
/// Four complex amplitudes over the two-photon polarization space.
pub type Vec4<T> = Vector4<C<T>>;

pub const HH: usize = 0;
pub const HV: usize = 1;
pub const VH: usize = 2;
pub const VV: usize = 3;

const NORM_REJECT: f64 = 1e-6;
const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const IDEMPOTENT_TOL: f64 = 1e-10;
const PROBABILITY_SLACK: f64 = 1e-10;

/// Normalized two-photon pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct Ket<T: Real> {
    amps: Vec4<T>,
}

impl<T: Real> Ket<T> {
    /// Accepts amplitudes whose norm is within 1e-6 of one and renormalizes
    /// them exactly.
    pub fn new(amps: Vec4<T>) -> Result<Self> {
        let norm = amps.norm();
        if (norm - T::one()).abs() > T::tol(NORM_REJECT) {
            return Err(invalid(format!(
                "ket norm {} deviates from 1 by more than {NORM_REJECT}",
                norm.to_f64()
            )));
        }
        Ok(Ket {
            amps: amps.unscale(norm),
        })
    }

    /// Normalizes arbitrary nonzero amplitudes.
    pub fn normalized(amps: Vec4<T>) -> Result<Self> {
        let norm = amps.norm();
        if norm <= T::default_epsilon() {
            return Err(invalid("cannot normalize a zero vector"));
        }
        Ok(Ket {
            amps: amps.unscale(norm),
        })
    }

    pub fn basis(index: usize) -> Self {
        assert!(index < 4, "basis index out of range");
        let mut amps = Vec4::<T>::zeros();
        amps[index] = cr(T::one());
        Ket { amps }
    }

    /// Tensor product of a signal and an idler single-photon state.
    pub fn product(signal: &Vector2<C<T>>, idler: &Vector2<C<T>>) -> Result<Self> {
        let amps = Vec4::new(
            signal[0] * idler[0],
            signal[0] * idler[1],
            signal[1] * idler[0],
            signal[1] * idler[1],
        );
        Ket::normalized(amps)
    }

    /// `(|HV⟩ − e^{−iφ}|VH⟩)/√2`, the crossed-crystal state.
    pub fn crossed_crystal(phi: T) -> Self {
        let h = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let phase = Complex::new(phi.cos(), -phi.sin());
        let mut amps = Vec4::<T>::zeros();
        amps[HV] = cr(h);
        amps[VH] = -phase * h;
        Ket { amps }
    }

    /// `(|HV⟩ − |VH⟩)/√2`.
    pub fn psi_minus() -> Self {
        Self::bell(HV, VH, -1.0)
    }

    /// `(|HV⟩ + |VH⟩)/√2`.
    pub fn psi_plus() -> Self {
        Self::bell(HV, VH, 1.0)
    }

    /// `(|HH⟩ − |VV⟩)/√2`.
    pub fn phi_minus() -> Self {
        Self::bell(HH, VV, -1.0)
    }

    /// `(|HH⟩ + |VV⟩)/√2`.
    pub fn phi_plus() -> Self {
        Self::bell(HH, VV, 1.0)
    }

    fn bell(a: usize, b: usize, sign: f64) -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut amps = Vec4::<T>::zeros();
        amps[a] = c(h, 0.0);
        amps[b] = c(sign * h, 0.0);
        Ket { amps }
    }

    pub fn amplitudes(&self) -> &Vec4<T> {
        &self.amps
    }

    /// `|⟨self|other⟩|²`.
    pub fn overlap(&self, other: &Ket<T>) -> T {
        self.amps.dotc(&other.amps).norm_sqr()
    }
}

/// Validated two-photon density matrix: Hermitian, unit trace, positive
/// semidefinite within tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    m: Mat4<T>,
}

impl<T: Real> DensityMatrix<T> {
    /// Validates a matrix. States violating positivity are rejected, never
    /// projected.
    pub fn new(m: Mat4<T>) -> Result<Self> {
        check_hermitian(&m, T::tol(HERMITIAN_TOL))?;
        let tr = m.trace();
        if (tr.re - T::one()).abs() > T::tol(TRACE_TOL) || tr.im.abs() > T::tol(TRACE_TOL) {
            return Err(invalid(format!(
                "trace {}{:+}i is not 1",
                tr.re.to_f64(),
                tr.im.to_f64()
            )));
        }
        let min_eig = m
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(T::max_value().unwrap(), T::min);
        if min_eig < -T::tol(PSD_TOL) {
            return Err(invalid(format!(
                "density matrix has negative eigenvalue {}",
                min_eig.to_f64()
            )));
        }
        Ok(DensityMatrix { m })
    }

    /// `|k⟩⟨k|`.
    pub fn from_ket(k: &Ket<T>) -> Self {
        DensityMatrix {
            m: k.amps * k.amps.adjoint(),
        }
    }

    /// `I/4`.
    pub fn maximally_mixed() -> Self {
        DensityMatrix {
            m: Mat4::<T>::identity().scale(T::lit(0.25)),
        }
    }

    /// Convex combination `Σ wₖ ρₖ`; weights must be nonnegative and sum to one.
    pub fn mixture(parts: &[(T, &DensityMatrix<T>)]) -> Result<Self> {
        let mut total = T::zero();
        let mut m = Mat4::<T>::zeros();
        for (w, rho) in parts {
            if *w < T::zero() {
                return Err(invalid("negative mixture weight"));
            }
            total += *w;
            m += rho.m.scale(*w);
        }
        if (total - T::one()).abs() > T::tol(1e-12) {
            return Err(invalid(format!(
                "mixture weights sum to {}",
                total.to_f64()
            )));
        }
        DensityMatrix::new(m)
    }

    pub fn matrix(&self) -> &Mat4<T> {
        &self.m
    }

    pub fn into_matrix(self) -> Mat4<T> {
        self.m
    }

    /// `Tr(ρP)`, clipped into [0, 1] when it lies within 1e-10 outside.
    pub fn expectation(&self, p: &Projector<T>) -> Result<T> {
        let v = (self.m * p.m).trace().re;
        let slack = T::tol(PROBABILITY_SLACK);
        if v < -slack || v > T::one() + slack {
            return Err(Error::NumericalConsistency(format!(
                "Tr(rho P) = {} outside [0, 1]",
                v.to_f64()
            )));
        }
        Ok(v.clamp(T::zero(), T::one()))
    }

    /// `⟨target|ρ|target⟩`.
    pub fn fidelity(&self, target: &Ket<T>) -> T {
        let v = target.amps.dotc(&(self.m * target.amps)).re;
        v.clamp(T::zero(), T::one())
    }

    /// `Tr(ρ²)`.
    pub fn purity(&self) -> T {
        (self.m * self.m).trace().re
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [T; 4] {
        let e = self.m.symmetric_eigenvalues();
        let mut out = [e[0], e[1], e[2], e[3]];
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    /// `UρU†` for a unitary `U`.
    pub fn transformed(&self, u: &Mat4<T>) -> Result<Self> {
        DensityMatrix::new(u * self.m * u.adjoint())
    }

    /// Expectation value of a two-qubit Pauli product `σ_a ⊗ σ_b`
    /// (indices 0..4 for I, X, Y, Z).
    pub fn pauli_correlator(&self, a: usize, b: usize) -> T {
        (self.m * pauli_product::<T>(a, b)).trace().re
    }

    /// Plain-text serialization, see [`format_matrix_text`].
    pub fn to_text(&self) -> String {
        format_matrix_text(&self.m.map(|z| Complex::new(z.re.to_f64(), z.im.to_f64())))
    }

    pub fn cast_f64(&self) -> DensityMatrix<f64> {
        DensityMatrix {
            m: self.m.map(|z| Complex::new(z.re.to_f64(), z.im.to_f64())),
        }
    }
}

/// Rank-1 or rank-2 orthogonal projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T: Real> {
    m: Mat4<T>,
}

impl<T: Real> Projector<T> {
    pub fn new(m: Mat4<T>) -> Result<Self> {
        check_hermitian(&m, T::tol(IDEMPOTENT_TOL))?;
        let dev = max_abs(&(m * m - m));
        if dev > T::tol(IDEMPOTENT_TOL) {
            return Err(invalid(format!(
                "matrix is not idempotent (max |P²−P| = {})",
                dev.to_f64()
            )));
        }
        Ok(Projector { m })
    }

    /// `|k⟩⟨k|`.
    pub fn onto(k: &Ket<T>) -> Self {
        Projector {
            m: k.amps * k.amps.adjoint(),
        }
    }

    /// Sum of two projectors with orthogonal ranges.
    pub fn sum(&self, other: &Projector<T>) -> Result<Self> {
        Projector::new(self.m + other.m)
    }

    pub fn matrix(&self) -> &Mat4<T> {
        &self.m
    }
}

/// `|k⟩⟨k|` as a density matrix.
pub fn density_from_ket<T: Real>(k: &Ket<T>) -> DensityMatrix<T> {
    DensityMatrix::from_ket(k)
}

pub fn expectation<T: Real>(rho: &DensityMatrix<T>, p: &Projector<T>) -> Result<T> {
    rho.expectation(p)
}

pub fn fidelity<T: Real>(rho: &DensityMatrix<T>, target: &Ket<T>) -> T {
    rho.fidelity(target)
}

pub fn purity<T: Real>(rho: &DensityMatrix<T>) -> T {
    rho.purity()
}

/// Trace distance `½‖a − b‖₁` between two Hermitian matrices.
pub fn trace_distance<T: Real>(a: &Mat4<T>, b: &Mat4<T>) -> T {
    let d = a - b;
    d.symmetric_eigenvalues()
        .iter()
        .fold(T::zero(), |acc, e| acc + e.abs())
        * T::lit(0.5)
}

/// Single-qubit Pauli matrix, index 0..4 for I, X, Y, Z.
pub fn pauli<T: Real>(i: usize) -> nalgebra::Matrix2<C<T>> {
    let z = c::<T>(0.0, 0.0);
    let one = c::<T>(1.0, 0.0);
    let im = c::<T>(0.0, 1.0);
    match i {
        0 => nalgebra::Matrix2::new(one, z, z, one),
        1 => nalgebra::Matrix2::new(z, one, one, z),
        2 => nalgebra::Matrix2::new(z, -im, im, z),
        3 => nalgebra::Matrix2::new(one, z, z, -one),
        _ => panic!("pauli index {i} out of range"),
    }
}

/// `σ_a ⊗ σ_b` in the (HH, HV, VH, VV) basis.
pub fn pauli_product<T: Real>(a: usize, b: usize) -> Mat4<T> {
    kron2(&pauli::<T>(a), &pauli::<T>(b))
}

/// Largest entry modulus.
pub fn max_abs<T: Real>(m: &Mat4<T>) -> T {
    m.iter().fold(T::zero(), |acc, z| acc.max(nalgebra::ComplexField::modulus(*z)))
}

/// Kronecker product of a signal and an idler 2×2 operator.
pub fn kron2<T: Real>(s: &nalgebra::Matrix2<C<T>>, i: &nalgebra::Matrix2<C<T>>) -> Mat4<T> {
    Mat4::from_fn(|r, col| s[(r / 2, col / 2)] * i[(r % 2, col % 2)])
}

fn check_hermitian<T: Real>(m: &Mat4<T>, tol: T) -> Result<()> {
    let dev = max_abs(&(m - m.adjoint()));
    if dev > tol {
        return Err(invalid(format!(
            "matrix is not Hermitian (max deviation {})",
            dev.to_f64()
        )));
    }
    Ok(())
}

/// Four lines of four whitespace-separated `re+imj` tokens, row-major.
pub fn format_matrix_text(m: &Matrix4<Complex<f64>>) -> String {
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4)
            .map(|col| {
                let z = m[(r, col)];
                format!("{:.17e}{:+.17e}j", z.re, z.im)
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses the output of [`format_matrix_text`].
pub fn parse_matrix_text(text: &str) -> Result<Matrix4<Complex<f64>>> {
    let rows: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if rows.len() != 4 {
        return Err(invalid(format!("expected 4 matrix rows, found {}", rows.len())));
    }
    let mut m = Matrix4::zeros();
    for (r, line) in rows.iter().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(invalid(format!(
                "row {}: expected 4 entries, found {}",
                r + 1,
                toks.len()
            )));
        }
        for (col, tok) in toks.iter().enumerate() {
            m[(r, col)] = parse_complex_token(tok)
                .ok_or_else(|| invalid(format!("row {}: bad complex token `{tok}`", r + 1)))?;
        }
    }
    Ok(m)
}

fn parse_complex_token(tok: &str) -> Option<Complex<f64>> {
    let body = tok.strip_suffix('j')?;
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&i| (bytes[i] == b'+' || bytes[i] == b'-') && !matches!(bytes[i - 1], b'e' | b'E'))?;
    let re = body[..split].parse().ok()?;
    let im = body[split..].parse().ok()?;
    Some(Complex::new(re, im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ket_from(v: [(f64, f64); 4]) -> Vec4<f64> {
        Vec4::new(
            Complex::new(v[0].0, v[0].1),
            Complex::new(v[1].0, v[1].1),
            Complex::new(v[2].0, v[2].1),
            Complex::new(v[3].0, v[3].1),
        )
    }

    #[test]
    fn psi_minus_density_entries() {
        let rho = density_from_ket(&Ket::<f64>::psi_minus());
        let m = rho.matrix();
        for r in 0..4 {
            for col in 0..4 {
                let expected = match (r, col) {
                    (1, 1) | (2, 2) => 0.5,
                    (1, 2) | (2, 1) => -0.5,
                    _ => 0.0,
                };
                assert!((m[(r, col)] - Complex::new(expected, 0.0)).norm() < 1e-15);
            }
        }
        assert!((rho.purity() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn basis_state_density() {
        let rho = density_from_ket(&Ket::<f64>::basis(HH));
        assert_eq!(rho.matrix()[(0, 0)], Complex::new(1.0, 0.0));
        assert_eq!(rho.matrix().iter().filter(|z| z.norm() > 0.0).count(), 1);
    }

    #[test]
    fn crossed_crystal_phase_off_diagonal() {
        let rho = density_from_ket(&Ket::<f64>::crossed_crystal(std::f64::consts::FRAC_PI_2));
        assert!((rho.matrix()[(1, 2)] - Complex::new(0.0, -0.5)).norm() < 1e-15);
    }

    #[test]
    fn unnormalized_ket_rejected() {
        let err = Ket::new(ket_from([(1.0, 0.0), (0.1, 0.0), (0.0, 0.0), (0.0, 0.0)]));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        assert!(Ket::new(ket_from([(1.0 + 5e-7, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)])).is_ok());
    }

    #[test]
    fn expectation_examples() {
        let rho = density_from_ket(&Ket::<f64>::psi_minus());
        let p_hv = Projector::onto(&Ket::basis(HV));
        let p_hh = Projector::onto(&Ket::basis(HH));
        assert!((rho.expectation(&p_hv).unwrap() - 0.5).abs() < 1e-15);
        assert!(rho.expectation(&p_hh).unwrap().abs() < 1e-15);
        let mixed = DensityMatrix::<f64>::maximally_mixed();
        let p = Projector::onto(&Ket::<f64>::phi_plus());
        assert!((mixed.expectation(&p).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn expectation_out_of_range_is_error() {
        let rho = DensityMatrix::<f64>::maximally_mixed();
        // A non-projector smuggled in past validation.
        let p = Projector {
            m: Mat4::identity().scale(2.0),
        };
        assert!(matches!(rho.expectation(&p), Err(Error::NumericalConsistency(_))));
    }

    #[test]
    fn fidelity_examples() {
        let rho = density_from_ket(&Ket::<f64>::psi_minus());
        assert!((rho.fidelity(&Ket::psi_minus()) - 1.0).abs() < 1e-15);
        let plus = density_from_ket(&Ket::<f64>::psi_plus());
        assert!(plus.fidelity(&Ket::psi_minus()).abs() < 1e-15);
    }

    #[test]
    fn purity_examples() {
        assert!((DensityMatrix::<f64>::maximally_mixed().purity() - 0.25).abs() < 1e-15);
        let hv = density_from_ket(&Ket::<f64>::basis(HV));
        let vh = density_from_ket(&Ket::<f64>::basis(VH));
        let mix = DensityMatrix::mixture(&[(0.5, &hv), (0.5, &vh)]).unwrap();
        assert!((mix.purity() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_matrices_rejected() {
        let mut m = Mat4::<f64>::zeros();
        m[(0, 0)] = Complex::new(1.5, 0.0);
        m[(1, 1)] = Complex::new(-0.5, 0.0);
        assert!(DensityMatrix::new(m).is_err());
        let mut m = Mat4::<f64>::identity().scale(0.25);
        m[(0, 1)] = Complex::new(0.1, 0.0);
        assert!(DensityMatrix::new(m).is_err());
        assert!(DensityMatrix::new(Mat4::<f64>::identity()).is_err());
    }

    #[test]
    fn single_precision_states() {
        let rho = density_from_ket(&Ket::<f32>::psi_minus());
        assert!((rho.purity() - 1.0).abs() < 1e-6);
        assert!(DensityMatrix::new(*rho.matrix()).is_ok());
        let p = Projector::onto(&Ket::<f32>::basis(HV));
        assert!((rho.expectation(&p).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn text_format_parses_back() {
        let rho = density_from_ket(&Ket::<f64>::crossed_crystal(0.3));
        let text = rho.to_text();
        assert_eq!(text.lines().count(), 4);
        let back = parse_matrix_text(&text).unwrap();
        assert_eq!(&back, rho.matrix());
        assert!(parse_matrix_text("1+0j 0+0j\n").is_err());
        assert_eq!(parse_complex_token("-2.5e-3-1e2j"), Some(Complex::new(-2.5e-3, -1e2)));
    }

    prop_compose! {
        fn arb_ket()(v in proptest::collection::vec(-1.0f64..1.0, 8)) -> Ket<f64> {
            let mut amps = ket_from([(v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7])]);
            if amps.norm() < 1e-3 { amps[0] = Complex::new(1.0, 0.0); }
            Ket::normalized(amps).unwrap()
        }
    }

    prop_compose! {
        fn arb_state()(kets in proptest::collection::vec(arb_ket(), 4),
                       w in proptest::collection::vec(0.01f64..1.0, 4)) -> DensityMatrix<f64> {
            let total: f64 = w.iter().sum();
            let parts: Vec<DensityMatrix<f64>> = kets.iter().map(density_from_ket).collect();
            let mut m = Mat4::zeros();
            for (wi, p) in w.iter().zip(&parts) {
                m += p.matrix().scale(wi / total);
            }
            DensityMatrix::new(m).unwrap()
        }
    }

    fn random_unitary(v: &[f64]) -> Mat4<f64> {
        let a = Mat4::from_fn(|r, c| Complex::new(v[2 * (4 * r + c)], v[2 * (4 * r + c) + 1]));
        let h = (a + a.adjoint()).scale(0.5);
        // exp(iH) via eigen-decomposition
        let eig = h.symmetric_eigen();
        let d = Mat4::from_diagonal(&eig.eigenvalues.map(|e| Complex::new(e.cos(), e.sin())));
        eig.eigenvectors * d * eig.eigenvectors.adjoint()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn self_fidelity_is_one(k in arb_ket()) {
            let rho = density_from_ket(&k);
            prop_assert!((rho.fidelity(&k) - 1.0).abs() < 1e-10);
        }

        #[test]
        fn complete_projector_set_sums_to_one(rho in arb_state(), basis in proptest::collection::vec(arb_ket(), 4)) {
            // Gram–Schmidt the random kets into an orthonormal basis.
            let mut ortho: Vec<Vec4<f64>> = Vec::new();
            for k in &basis {
                let mut v = *k.amplitudes();
                for u in &ortho { v -= u * u.dotc(&v); }
                if v.norm() < 1e-6 { return Ok(()); }
                ortho.push(v.unscale(v.norm()));
            }
            let total: f64 = ortho.iter()
                .map(|v| rho.expectation(&Projector::onto(&Ket::new(*v).unwrap())).unwrap())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn purity_unitarily_invariant(rho in arb_state(), v in proptest::collection::vec(-2.0f64..2.0, 32)) {
            let u = random_unitary(&v);
            let rotated = rho.transformed(&u).unwrap();
            prop_assert!((rotated.purity() - rho.purity()).abs() < 1e-9);
        }

        #[test]
        fn eigenvalues_sum_to_one(rho in arb_state()) {
            let s: f64 = rho.eigenvalues().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
            prop_assert!(rho.eigenvalues()[0] >= -1e-10);
        }
    }
}
