//! Crossed-crystal source model.
//!
//! The emitted state is
//!
//! ```text
//! ρ = (1−w)·[(1−f)·ρ_D + f·X_i ρ_D X_i] + w·I/4
//! ρ_D = V·|ψ(φ)⟩⟨ψ(φ)| + (1−V)·½(|HV⟩⟨HV| + |VH⟩⟨VH|)
//! ```
//!
//! with `|ψ(φ)⟩ = (|HV⟩ − e^{−iφ}|VH⟩)/√2`. `V` is the coherence kept between
//! the two crystal amplitudes (temporal which-crystal dephasing), `w` the
//! isotropic admixture from multi-pair emission and accidentals, and `f` the
//! probability of an H↔V flip of the idler polarization after the crystals.
//! `f` leaves the ±45° fringe untouched and lowers the H/V and circular
//! correlations.

use nalgebra::Matrix2;

use crate::error::{invalid, Error, Result};
use crate::num::{Real, C};
use crate::polcore::{kron2, pauli, DensityMatrix, Ket, Mat4, HV, VH};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    pub phase_phi_rad: f64,
    pub dephasing_v: f64,
    pub white_noise_w: f64,
    pub polarization_flip_f: f64,
    /// Mean pairs per pulse per mW of average pump power.
    pub mu_per_mw: f64,
    pub pump_power_mw: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            phase_phi_rad: 0.0,
            dephasing_v: 1.0,
            white_noise_w: 0.0,
            polarization_flip_f: 0.0,
            mu_per_mw: 0.0,
            pump_power_mw: 0.0,
        }
    }
}

impl SourceParams {
    /// Noise-only parameters with zero pump power.
    pub fn with_noise(dephasing_v: f64, white_noise_w: f64) -> Self {
        SourceParams {
            dephasing_v,
            white_noise_w,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if !self.phase_phi_rad.is_finite() {
            return Err(invalid("phase_phi_rad must be finite"));
        }
        unit("dephasing_v", self.dephasing_v)?;
        unit("white_noise_w", self.white_noise_w)?;
        if !(0.0..=0.5).contains(&self.polarization_flip_f) {
            return Err(invalid(format!(
                "polarization_flip_f = {} outside [0, 0.5]",
                self.polarization_flip_f
            )));
        }
        if !(self.mu_per_mw >= 0.0) || !self.mu_per_mw.is_finite() {
            return Err(invalid("mu_per_mw must be nonnegative"));
        }
        if !(self.pump_power_mw >= 0.0) || !self.pump_power_mw.is_finite() {
            return Err(invalid("pump_power_mw must be nonnegative"));
        }
        Ok(())
    }

    /// μ, proportional to pump power.
    pub fn mean_pairs_per_pulse(&self) -> f64 {
        self.mu_per_mw * self.pump_power_mw
    }

    pub fn at_power(&self, pump_power_mw: f64) -> Self {
        SourceParams {
            pump_power_mw,
            ..*self
        }
    }
}

pub fn build_state<T: Real>(p: &SourceParams) -> Result<DensityMatrix<T>> {
    p.validate()?;
    let v = T::lit(p.dephasing_v);
    let w = T::lit(p.white_noise_w);
    let f = T::lit(p.polarization_flip_f);
    let half = T::lit(0.5);

    let coherent = DensityMatrix::from_ket(&Ket::<T>::crossed_crystal(T::lit(p.phase_phi_rad)));
    let mut dephased = Mat4::<T>::zeros();
    dephased[(HV, HV)] = C::new(half, T::zero());
    dephased[(VH, VH)] = C::new(half, T::zero());
    let rho_d = coherent.matrix().scale(v) + dephased.scale(T::one() - v);

    let x_idler = kron2(&Matrix2::identity(), &pauli::<T>(1));
    let flipped = x_idler * rho_d * x_idler;
    let emitted = rho_d.scale(T::one() - f) + flipped.scale(f);
    let m = emitted.scale(T::one() - w) + Mat4::<T>::identity().scale(w * T::lit(0.25));
    DensityMatrix::new(m)
}

/// Analysis basis of a fringe measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FringeBasis {
    /// Idler analyzer at H or V.
    Hv,
    /// Idler analyzer at ±45°.
    Diag,
}

/// Closed-form fringe visibility for linear-polarizer scans.
pub fn predicted_visibility(p: &SourceParams, basis: FringeBasis) -> f64 {
    let kept = 1.0 - p.white_noise_w;
    match basis {
        FringeBasis::Diag => kept * p.dephasing_v * p.phase_phi_rad.cos().abs(),
        FringeBasis::Hv => kept * (1.0 - 2.0 * p.polarization_flip_f),
    }
}

/// Closed-form `⟨ψ⁻|ρ|ψ⁻⟩` for the model state.
pub fn predicted_fidelity(p: &SourceParams) -> f64 {
    let kept = 1.0 - p.white_noise_w;
    kept * (1.0 - p.polarization_flip_f) * (1.0 + p.dephasing_v * p.phase_phi_rad.cos()) / 2.0
        + p.white_noise_w / 4.0
}

/// Two-parameter noise solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseFit {
    pub dephasing_v: f64,
    pub white_noise_w: f64,
}

impl NoiseFit {
    pub fn params(&self) -> SourceParams {
        SourceParams::with_noise(self.dephasing_v, self.white_noise_w)
    }
}

/// Solves `vis = (1−w)V` and `F = (1−w)(1+V)/2 + w/4` for `(V, w)`.
///
/// Eliminating `V` gives `w = 2 + 2·vis − 4F`, so the pair is feasible only
/// for `F ∈ [(1 + 3·vis)/4, (1 + vis)/2]`.
pub fn fit_noise_to_observations(vis_diag: f64, fidelity: f64) -> Result<NoiseFit> {
    if !(0.0..=1.0).contains(&vis_diag) {
        return Err(invalid(format!("visibility {vis_diag} outside [0, 1]")));
    }
    if !(0.25..=1.0).contains(&fidelity) {
        return Err(invalid(format!("fidelity {fidelity} outside [0.25, 1]")));
    }
    let f_lo = (1.0 + 3.0 * vis_diag) / 4.0;
    let f_hi = (1.0 + vis_diag) / 2.0;
    let slack = 1e-12;
    if fidelity < f_lo - slack || fidelity > f_hi + slack {
        return Err(Error::NoSolution {
            reason: format!(
                "(visibility {vis_diag}, fidelity {fidelity}) is not reachable with dephasing and white noise"
            ),
            feasible: format!("fidelity in [{f_lo:.6}, {f_hi:.6}] for visibility {vis_diag}"),
        });
    }
    let w = (2.0 + 2.0 * vis_diag - 4.0 * fidelity).clamp(0.0, 1.0 - vis_diag);
    let v = if w < 1.0 {
        (vis_diag / (1.0 - w)).min(1.0)
    } else {
        0.0
    };
    Ok(NoiseFit {
        dephasing_v: v,
        white_noise_w: w,
    })
}

/// Source calibration with equal H/V and ±45° visibilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropicCalibration {
    pub params: SourceParams,
    /// Fidelity of the calibrated model state.
    pub model_fidelity: f64,
    /// `model_fidelity − target`; zero when the target is reachable.
    pub fidelity_residual: f64,
}

/// Calibrates `(V, w, f)` so that both fringe bases show `vis`, matching the
/// expectation `S = 2√2·vis`, and the singlet fidelity comes as close to the
/// target as the model allows.
///
/// With `x = z = vis` the model gives `F = (1 + 2·vis + vis²/(1−w))/4`, so
/// reachable fidelities lie in `[(1+vis)²/4, (1+3·vis)/4]`; targets outside
/// are clamped to the nearest end.
pub fn calibrate_isotropic(vis: f64, fidelity: f64) -> Result<IsotropicCalibration> {
    if !(vis > 0.0 && vis <= 1.0) {
        return Err(invalid(format!("visibility {vis} outside (0, 1]")));
    }
    if !(0.25..=1.0).contains(&fidelity) {
        return Err(invalid(format!("fidelity {fidelity} outside [0.25, 1]")));
    }
    let denom = 4.0 * fidelity - 1.0 - 2.0 * vis;
    let kept = if denom <= vis * vis {
        1.0
    } else if denom >= vis {
        vis
    } else {
        vis * vis / denom
    };
    let params = SourceParams {
        dephasing_v: (vis / kept).min(1.0),
        white_noise_w: (1.0 - kept).max(0.0),
        polarization_flip_f: ((1.0 - vis / kept) / 2.0).max(0.0),
        ..Default::default()
    };
    let model_fidelity = predicted_fidelity(&params);
    Ok(IsotropicCalibration {
        params,
        model_fidelity,
        fidelity_residual: model_fidelity - fidelity,
    })
}
