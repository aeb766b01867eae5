//! Crystal dispersion: Sellmeier models, group indices, quasi-phase-matching
//! and birefringent delay compensation.
//!
//! Coefficients are data, loaded from TOML files of the form
//!
//! ```toml
//! material = "KTP"
//! citation = "..."
//!
//! [axes.Y]
//! a = 3.0     # n² = a + Σ b/(λ² − c) − d·λ², λ in µm
//! terms = [[0.04, 0.05]]
//! d = 0.01
//! range_um = [0.35, 3.5]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{invalid, Error, Result};

/// Speed of light in µm/fs.
pub const C_UM_PER_FS: f64 = 0.299_792_458;

/// Central-difference step for group indices.
pub const GROUP_INDEX_STEP_NM: f64 = 0.1;

/// Default relative tolerance of the energy-conservation gate.
pub const DEFAULT_ENERGY_TOLERANCE: f64 = 5e-3;

/// Vacuum wavelength; construct from either unit.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Wavelength(f64);

impl Wavelength {
    pub fn from_um(um: f64) -> Result<Self> {
        if !(um > 0.0) || !um.is_finite() {
            return Err(invalid(format!("wavelength must be positive, got {um} um")));
        }
        Ok(Wavelength(um))
    }

    pub fn from_nm(nm: f64) -> Result<Self> {
        Self::from_um(nm * 1e-3)
    }

    pub fn um(self) -> f64 {
        self.0
    }

    pub fn nm(self) -> f64 {
        self.0 * 1e3
    }

    /// Angular frequency in rad/fs.
    pub fn angular_frequency(self) -> f64 {
        2.0 * std::f64::consts::PI * C_UM_PER_FS / self.0
    }

    /// Wavelength fixed by energy conservation with two others.
    pub fn energy_sum(signal: Wavelength, idler: Wavelength) -> Wavelength {
        Wavelength(1.0 / (1.0 / signal.0 + 1.0 / idler.0))
    }
}

impl fmt::Display for Wavelength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} nm", self.nm())
    }
}

/// Principal axes: crystal X, Y, Z, or ordinary / extraordinary for uniaxial
/// materials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
    O,
    E,
}

impl Axis {
    /// Axis along which a given lab polarization lies in the second,
    /// 90°-rotated crystal of a crossed pair.
    pub fn crossed(self) -> Result<Axis> {
        match self {
            Axis::Y => Ok(Axis::Z),
            Axis::Z => Ok(Axis::Y),
            other => Err(invalid(format!("axis {other} has no crossed counterpart"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
            Axis::O => "o",
            Axis::E => "e",
        };
        f.write_str(s)
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" | "x" => Ok(Axis::X),
            "Y" | "y" => Ok(Axis::Y),
            "Z" | "z" => Ok(Axis::Z),
            "o" | "O" => Ok(Axis::O),
            "e" | "E" => Ok(Axis::E),
            _ => Err(invalid(format!("unknown axis `{s}` (expected X, Y, Z, o or e)"))),
        }
    }
}

/// `n²(λ) = a + Σⱼ bⱼ/(λ² − cⱼ) − d·λ²`, λ in µm.
#[derive(Debug, Clone, PartialEq)]
pub struct Sellmeier {
    pub a: f64,
    pub terms: Vec<(f64, f64)>,
    pub d: f64,
    /// Validity range in µm.
    pub range_um: (f64, f64),
}

impl Sellmeier {
    fn n_squared(&self, um: f64) -> f64 {
        let l2 = um * um;
        self.a + self.terms.iter().map(|&(b, c)| b / (l2 - c)).sum::<f64>() - self.d * l2
    }

    fn check(&self) -> std::result::Result<(), String> {
        let (lo, hi) = self.range_um;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(format!("invalid validity range [{lo}, {hi}] um"));
        }
        if let Some(&(_, c)) = self.terms.iter().find(|&&(_, c)| c >= lo * lo && c <= hi * hi) {
            return Err(format!("pole at {} um lies inside the validity range", c.sqrt()));
        }
        for k in 0..=1000 {
            let um = lo + (hi - lo) * k as f64 / 1000.0;
            let n2 = self.n_squared(um);
            if !n2.is_finite() || n2 <= 1.0 {
                return Err(format!("n^2 = {n2} at {um} um; the index must exceed 1"));
            }
        }
        Ok(())
    }

    fn index_unchecked(&self, um: f64) -> f64 {
        self.n_squared(um).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionModel {
    pub material: String,
    pub citation: String,
    axes: BTreeMap<Axis, Sellmeier>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    material: String,
    citation: String,
    axes: BTreeMap<String, toml::Spanned<RawAxis>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAxis {
    a: f64,
    #[serde(default)]
    terms: Vec<[f64; 2]>,
    #[serde(default)]
    d: f64,
    range_um: [f64; 2],
    #[serde(default)]
    #[allow(dead_code)]
    citation: Option<String>,
}

/// 1-based line of a byte offset.
pub(crate) fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl DispersionModel {
    pub fn new(material: &str, citation: &str, axes: BTreeMap<Axis, Sellmeier>) -> Result<Self> {
        if axes.is_empty() {
            return Err(invalid("dispersion model needs at least one axis"));
        }
        for (axis, s) in &axes {
            s.check()
                .map_err(|m| Error::UnusableMaterial(format!("{material} axis {axis}: {m}")))?;
        }
        Ok(DispersionModel {
            material: material.into(),
            citation: citation.into(),
            axes,
        })
    }

    /// Parses a TOML dispersion file; `origin` names it in error messages.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let schema = |line: usize, message: String| Error::Schema {
            path: origin.to_string(),
            line,
            message,
        };
        let raw: RawModel = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            schema(line, e.message().to_string())
        })?;
        if raw.axes.is_empty() {
            return Err(schema(1, "no [axes.*] sections".into()));
        }
        let mut axes = BTreeMap::new();
        for (name, spanned) in raw.axes {
            let line = line_of(text, spanned.span().start);
            let axis: Axis = name.parse().map_err(|e: Error| schema(line, e.to_string()))?;
            let r = spanned.into_inner();
            let s = Sellmeier {
                a: r.a,
                terms: r.terms.iter().map(|t| (t[0], t[1])).collect(),
                d: r.d,
                range_um: (r.range_um[0], r.range_um[1]),
            };
            s.check().map_err(|m| schema(line, format!("axis {axis}: {m}")))?;
            axes.insert(axis, s);
        }
        Ok(DispersionModel {
            material: raw.material,
            citation: raw.citation,
            axes,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn axes(&self) -> impl Iterator<Item = (&Axis, &Sellmeier)> {
        self.axes.iter()
    }

    pub fn axis(&self, axis: Axis) -> Result<&Sellmeier> {
        self.axes
            .get(&axis)
            .ok_or_else(|| invalid(format!("{} model has no {axis} axis", self.material)))
    }

    fn in_range(&self, axis: Axis, um: f64) -> Result<&Sellmeier> {
        let s = self.axis(axis)?;
        let (lo, hi) = s.range_um;
        if um < lo || um > hi {
            return Err(Error::OutOfRange {
                material: format!("{} {axis}", self.material),
                lambda_um: um,
                min_um: lo,
                max_um: hi,
            });
        }
        Ok(s)
    }

    pub fn refractive_index(&self, axis: Axis, lambda: Wavelength) -> Result<f64> {
        Ok(self.in_range(axis, lambda.um())?.index_unchecked(lambda.um()))
    }

    /// `n_g = n − λ·dn/dλ`, with `dn/dλ` from central differences at
    /// `step_nm` and `step_nm/2` combined by Richardson extrapolation.
    pub fn group_index_with_step(&self, axis: Axis, lambda: Wavelength, step_nm: f64) -> Result<f64> {
        let um = lambda.um();
        let h = step_nm * 1e-3;
        self.in_range(axis, um - h)?;
        let s = self.in_range(axis, um + h)?;
        let central = |h: f64| (s.index_unchecked(um + h) - s.index_unchecked(um - h)) / (2.0 * h);
        let dn = (4.0 * central(0.5 * h) - central(h)) / 3.0;
        Ok(s.index_unchecked(um) - um * dn)
    }

    /// Group index with the default 0.1 nm step, cross-checked against a
    /// 0.05 nm step.
    pub fn group_index(&self, axis: Axis, lambda: Wavelength) -> Result<f64> {
        let coarse = self.group_index_with_step(axis, lambda, GROUP_INDEX_STEP_NM)?;
        let fine = self.group_index_with_step(axis, lambda, 0.5 * GROUP_INDEX_STEP_NM)?;
        if (coarse - fine).abs() > 1e-7 {
            return Err(Error::NumericalConsistency(format!(
                "group index not converged at {lambda} ({coarse} vs {fine})"
            )));
        }
        Ok(coarse)
    }

    /// Inverse group velocity `n_g/c` in fs/mm.
    pub fn group_slowness(&self, axis: Axis, lambda: Wavelength) -> Result<f64> {
        Ok(self.group_index(axis, lambda)? * 1e3 / C_UM_PER_FS)
    }

    /// Wave number `2πn/λ` in rad/µm.
    pub fn wave_number(&self, axis: Axis, lambda: Wavelength) -> Result<f64> {
        Ok(2.0 * std::f64::consts::PI * self.refractive_index(axis, lambda)? / lambda.um())
    }
}

pub fn refractive_index(m: &DispersionModel, axis: Axis, lambda_nm: f64) -> Result<f64> {
    m.refractive_index(axis, Wavelength::from_nm(lambda_nm)?)
}

pub fn group_index(m: &DispersionModel, axis: Axis, lambda_nm: f64) -> Result<f64> {
    m.group_index(axis, Wavelength::from_nm(lambda_nm)?)
}

/// Three-wave mixing process `pump → signal + idler`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpmProblem {
    pub pump: Wavelength,
    pub signal: Wavelength,
    pub idler: Wavelength,
    pub pump_axis: Axis,
    pub signal_axis: Axis,
    pub idler_axis: Axis,
    pub order: u32,
}

impl QpmProblem {
    /// Rejects triplets whose relative energy mismatch exceeds `tolerance`.
    pub fn new(
        pump: Wavelength,
        signal: Wavelength,
        idler: Wavelength,
        axes: (Axis, Axis, Axis),
        order: u32,
        tolerance: f64,
    ) -> Result<Self> {
        if order == 0 {
            return Err(invalid("QPM order must be at least 1"));
        }
        let p = QpmProblem {
            pump,
            signal,
            idler,
            pump_axis: axes.0,
            signal_axis: axes.1,
            idler_axis: axes.2,
            order,
        };
        let mismatch = p.energy_mismatch();
        if mismatch > tolerance {
            return Err(invalid(format!(
                "1/lambda_p = 1/lambda_s + 1/lambda_i violated by {:.3}% (tolerance {:.3}%)",
                mismatch * 100.0,
                tolerance * 100.0
            )));
        }
        Ok(p)
    }

    /// Type-II `Y_p → Y_s + Z_i`, first order, pump from energy conservation.
    pub fn type2_from_signal_idler(signal: Wavelength, idler: Wavelength) -> Self {
        QpmProblem {
            pump: Wavelength::energy_sum(signal, idler),
            signal,
            idler,
            pump_axis: Axis::Y,
            signal_axis: Axis::Y,
            idler_axis: Axis::Z,
            order: 1,
        }
    }

    /// `|1/λ_p − 1/λ_s − 1/λ_i| / (1/λ_p)`.
    pub fn energy_mismatch(&self) -> f64 {
        let inv_p = 1.0 / self.pump.um();
        (inv_p - 1.0 / self.signal.um() - 1.0 / self.idler.um()).abs() / inv_p
    }
}

/// `k_p − k_s − k_i` in rad/µm.
pub fn phase_mismatch(m: &DispersionModel, prob: &QpmProblem) -> Result<f64> {
    Ok(m.wave_number(prob.pump_axis, prob.pump)?
        - m.wave_number(prob.signal_axis, prob.signal)?
        - m.wave_number(prob.idler_axis, prob.idler)?)
}

/// Poling period `Λ = 2π·order/|k_p − k_s − k_i|` in µm.
pub fn qpm_period(m: &DispersionModel, prob: &QpmProblem) -> Result<f64> {
    let dk = phase_mismatch(m, prob)?;
    let kp = m.wave_number(prob.pump_axis, prob.pump)?;
    if dk.abs() <= 1e-12 * kp {
        return Err(Error::DegeneratePhaseMatching);
    }
    let period = 2.0 * std::f64::consts::PI * prob.order as f64 / dk.abs();
    let residual = (dk.abs() - 2.0 * std::f64::consts::PI * prob.order as f64 / period).abs();
    if residual >= 1e-9 * kp {
        return Err(Error::NumericalConsistency(format!("QPM residual {residual} rad/um")));
    }
    Ok(period)
}

/// Group delay difference `|n_g,a − n_g,b|·L/c` in fs.
pub fn gvm_walkoff(
    m: &DispersionModel,
    axis_a: Axis,
    lambda_a: Wavelength,
    axis_b: Axis,
    lambda_b: Wavelength,
    length_mm: f64,
) -> Result<f64> {
    if !(length_mm >= 0.0) {
        return Err(invalid("crystal length must be nonnegative"));
    }
    Ok((m.group_slowness(axis_a, lambda_a)? - m.group_slowness(axis_b, lambda_b)?).abs() * length_mm)
}

/// How the which-crystal delay of each arm is sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelayConvention {
    /// Mean arrival-time difference between pairs born in the first and in
    /// the second of two crossed crystals: the pump traverses the whole first
    /// crystal before reaching the second, and the first crystal's photons
    /// traverse the whole second crystal on the rotated axis.
    #[default]
    CrossedCrystal,
    /// Half the photon's own Y/Z group-delay difference over one crystal.
    HalfLength,
    /// The full Y/Z group-delay difference over one crystal.
    FullLength,
}

impl FromStr for DelayConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossed_crystal" => Ok(DelayConvention::CrossedCrystal),
            "half_length" => Ok(DelayConvention::HalfLength),
            "full_length" => Ok(DelayConvention::FullLength),
            _ => Err(invalid(format!(
                "unknown delay convention `{s}` (crossed_crystal, half_length, full_length)"
            ))),
        }
    }
}

/// Which-crystal delays to be removed in each arm, fs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmDelays {
    pub signal_fs: f64,
    pub idler_fs: f64,
}

pub fn which_crystal_delays(
    m: &DispersionModel,
    prob: &QpmProblem,
    length_mm: f64,
    convention: DelayConvention,
) -> Result<ArmDelays> {
    if !(length_mm >= 0.0) {
        return Err(invalid("crystal length must be nonnegative"));
    }
    let own = |axis: Axis, l: Wavelength| -> Result<f64> {
        Ok((m.group_slowness(axis, l)? - m.group_slowness(axis.crossed()?, l)?).abs() * length_mm)
    };
    match convention {
        DelayConvention::CrossedCrystal => {
            let pump_rotated = m.group_slowness(prob.pump_axis.crossed()?, prob.pump)?;
            let arm = |axis: Axis, l: Wavelength| -> Result<f64> {
                Ok((m.group_slowness(axis.crossed()?, l)? - pump_rotated).abs() * length_mm)
            };
            Ok(ArmDelays {
                signal_fs: arm(prob.signal_axis, prob.signal)?,
                idler_fs: arm(prob.idler_axis, prob.idler)?,
            })
        }
        DelayConvention::HalfLength | DelayConvention::FullLength => {
            let f = if convention == DelayConvention::HalfLength { 0.5 } else { 1.0 };
            Ok(ArmDelays {
                signal_fs: f * own(prob.signal_axis, prob.signal)?,
                idler_fs: f * own(prob.idler_axis, prob.idler)?,
            })
        }
    }
}

/// Compensator thickness (mm) whose group birefringence between `axes`
/// equals `delay_fs` at `lambda`.
pub fn compensation_thickness(
    delay_fs: f64,
    comp: &DispersionModel,
    axes: (Axis, Axis),
    lambda: Wavelength,
) -> Result<f64> {
    if !(delay_fs >= 0.0) {
        return Err(invalid("target delay must be nonnegative"));
    }
    let per_mm = (comp.group_slowness(axes.0, lambda)? - comp.group_slowness(axes.1, lambda)?).abs();
    if per_mm < 1e-9 {
        return Err(Error::UnusableMaterial(format!(
            "{} has no group birefringence between {} and {} at {lambda}",
            comp.material, axes.0, axes.1
        )));
    }
    Ok(delay_fs / per_mm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompensationPlan {
    pub convention: DelayConvention,
    pub delays: ArmDelays,
    pub signal_mm: f64,
    pub idler_mm: f64,
}

pub fn compensation_plan(
    crystal: &DispersionModel,
    comp: &DispersionModel,
    prob: &QpmProblem,
    length_mm: f64,
    convention: DelayConvention,
) -> Result<CompensationPlan> {
    let delays = which_crystal_delays(crystal, prob, length_mm, convention)?;
    let axes = (Axis::O, Axis::E);
    Ok(CompensationPlan {
        convention,
        delays,
        signal_mm: compensation_thickness(delays.signal_fs, comp, axes, prob.signal)?,
        idler_mm: compensation_thickness(delays.idler_fs, comp, axes, prob.idler)?,
    })
}
