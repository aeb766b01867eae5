//! Experiment configuration: TOML with nested sections and unit-suffixed keys.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use pairsource::counts::{DetectionChain, PairStatistics};
use pairsource::optics::{Axis, DelayConvention, DispersionModel, QpmProblem, Wavelength};
use pairsource::tomo::LikelihoodNorm;
use serde::Deserialize;
use toml::de::{DeTable, DeValue};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required by every scenario that samples.
    pub seed: Option<u64>,
    pub source: SourceSection,
    pub detection: DetectionSection,
    pub rates: RatesSection,
    pub fringe: FringeSection,
    pub chsh: ChshSection,
    pub tomography: TomographySection,
    pub power_scan: PowerScanSection,
    pub spectral: SpectralSection,
    pub hom: HomSection,
    pub dispersion: DispersionSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub fringe_visibility: f64,
    pub singlet_fidelity: f64,
    pub phase_phi_rad: f64,
    pub pump_power_mw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistics {
    Poisson,
    Thermal,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    pub filter_peak_transmission: f64,
    pub detector_efficiency: f64,
    pub rep_rate_mhz: f64,
    pub coincidence_window_ns: f64,
    pub dark_count_rate_hz: f64,
    pub statistics: Statistics,
    pub adjacent_pulse_accidentals: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesSection {
    pub coincidences_hz: f64,
    pub coincidence_to_singles: f64,
    pub filter_bandwidth_nm: f64,
    pub pulses: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FringeSection {
    pub rate_hz: f64,
    pub dwell_s: f64,
    pub step_deg: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChshSection {
    pub rate_hz: f64,
    pub dwell_s: f64,
    pub a_deg: f64,
    pub a_prime_deg: f64,
    pub b_deg: f64,
    pub b_prime_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    FittedIntensity,
    FixedExposure,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomographySection {
    pub rate_hz: f64,
    pub dwell_s: f64,
    pub mc_runs: usize,
    pub likelihood: Likelihood,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerScanSection {
    pub powers_mw: Vec<f64>,
    pub calibration_powers_mw: [f64; 2],
    pub calibration_fidelities: [f64; 2],
    pub pulses: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSection {
    pub signal_nm: f64,
    pub idler_nm: f64,
    pub use_printed_pump_wavelength: bool,
    pub printed_pump_nm: f64,
    pub pump_duration_fs: f64,
    pub crystal_length_mm: f64,
    pub filter_fwhm_signal_nm: f64,
    pub filter_fwhm_idler_nm: f64,
    pub energy_tolerance: f64,
    pub grid: usize,
    pub span_factor: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomSection {
    pub delay_start_fs: f64,
    pub delay_stop_fs: f64,
    pub delay_step_fs: f64,
    pub mean_fourfolds: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionSection {
    pub crystal: PathBuf,
    pub compensator: PathBuf,
    pub delay_convention: String,
}

/// Largest HOM delay table accepted.
pub const MAX_HOM_POINTS: usize = 20_000;

impl SpectralSection {
    /// Pump center: the printed value when selected, otherwise from energy
    /// conservation.
    pub fn pump_nm(&self) -> f64 {
        if self.use_printed_pump_wavelength {
            self.printed_pump_nm
        } else {
            1.0 / (1.0 / self.signal_nm + 1.0 / self.idler_nm)
        }
    }
}

impl HomSection {
    pub fn delays_fs(&self) -> Vec<f64> {
        let n = ((self.delay_stop_fs - self.delay_start_fs) / self.delay_step_fs + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|k| self.delay_start_fs + k as f64 * self.delay_step_fs)
            .collect()
    }
}

impl DetectionSection {
    /// Detection chain with the coupling efficiency still to be calibrated.
    pub fn template(&self) -> DetectionChain {
        DetectionChain {
            filter_peak_transmission: self.filter_peak_transmission,
            detector_efficiency: self.detector_efficiency,
            rep_rate_hz: self.rep_rate_mhz * 1e6,
            coincidence_window_s: self.coincidence_window_ns * 1e-9,
            dark_count_rate_hz: self.dark_count_rate_hz,
            statistics: match self.statistics {
                Statistics::Poisson => PairStatistics::Poisson,
                Statistics::Thermal => PairStatistics::Thermal,
            },
            adjacent_pulse_accidentals: self.adjacent_pulse_accidentals,
            ..DetectionChain::default()
        }
    }
}

impl TomographySection {
    pub fn norm(&self) -> LikelihoodNorm {
        match self.likelihood {
            Likelihood::FittedIntensity => LikelihoodNorm::FittedIntensity,
            Likelihood::FixedExposure => LikelihoodNorm::FixedExposure,
        }
    }
}

/// One schema or physics violation, located in the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub line: usize,
    pub message: String,
}

/// All violations found in one config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub path: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "{}: valid", self.path);
        }
        for v in &self.violations {
            writeln!(f, "{}:{}: {}: {}", self.path, v.line, v.field, v.message)?;
        }
        Ok(())
    }
}

/// A parsed config with its source text and key locations.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
    pub path: PathBuf,
    lines: BTreeMap<String, usize>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn collect_lines(text: &str, prefix: &str, table: &DeTable<'_>, out: &mut BTreeMap<String, usize>) {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.get_ref().to_string()
        } else {
            format!("{prefix}.{}", key.get_ref())
        };
        out.insert(path.clone(), line_of(text, key.span().start));
        if let DeValue::Table(inner) = value.get_ref() {
            collect_lines(text, &path, inner, out);
        }
    }
}

impl LoadedConfig {
    /// Parses `text`; schema errors come back as a report.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ValidationReport> {
        let origin = path.display().to_string();
        let fail = |line: usize, field: &str, message: String| ValidationReport {
            path: origin.clone(),
            violations: vec![Violation {
                field: field.to_string(),
                line,
                message,
            }],
        };
        let table = DeTable::parse(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            fail(line, "syntax", e.message().to_string())
        })?;
        let mut lines = BTreeMap::new();
        collect_lines(text, "", table.get_ref(), &mut lines);
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            fail(line, "schema", e.message().to_string())
        })?;
        Ok(LoadedConfig {
            config,
            text: text.to_string(),
            path: path.to_path_buf(),
            lines,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ValidationReport> {
        let text = std::fs::read_to_string(path).map_err(|e| ValidationReport {
            path: path.display().to_string(),
            violations: vec![Violation {
                field: "file".into(),
                line: 0,
                message: e.to_string(),
            }],
        })?;
        Self::parse(&text, path)
    }

    /// Line of a dotted key, or of its closest enclosing table.
    pub fn line(&self, field: &str) -> usize {
        let mut key = field;
        loop {
            if let Some(&l) = self.lines.get(key) {
                return l;
            }
            match key.rfind('.') {
                Some(k) => key = &key[..k],
                None => return 0,
            }
        }
    }

    /// Resolves a path from the config relative to the config's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn crystal_model(&self) -> pairsource::Result<DispersionModel> {
        DispersionModel::load(self.resolve(&self.config.dispersion.crystal))
    }

    pub fn compensator_model(&self) -> pairsource::Result<DispersionModel> {
        DispersionModel::load(self.resolve(&self.config.dispersion.compensator))
    }

    /// Type-II `Y_p → Y_s + Z_i` problem from the spectral section.
    pub fn qpm_problem(&self) -> pairsource::Result<QpmProblem> {
        let s = &self.config.spectral;
        QpmProblem::new(
            Wavelength::from_nm(s.pump_nm())?,
            Wavelength::from_nm(s.signal_nm)?,
            Wavelength::from_nm(s.idler_nm)?,
            (Axis::Y, Axis::Y, Axis::Z),
            1,
            s.energy_tolerance,
        )
    }

    /// Schema and physics checks; every violation is reported.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Checker {
            cfg: self,
            violations: Vec::new(),
        };
        let c = &self.config;

        let s = &c.source;
        v.check("source.fringe_visibility", s.fringe_visibility > 0.0 && s.fringe_visibility <= 1.0, "must lie in (0, 1]");
        v.check("source.singlet_fidelity", (0.25..=1.0).contains(&s.singlet_fidelity), "must lie in [0.25, 1]");
        v.check("source.phase_phi_rad", s.phase_phi_rad.is_finite(), "must be finite");
        v.positive("source.pump_power_mw", s.pump_power_mw);

        let d = &c.detection;
        v.unit_interval("detection.filter_peak_transmission", d.filter_peak_transmission);
        v.unit_interval("detection.detector_efficiency", d.detector_efficiency);
        v.positive("detection.rep_rate_mhz", d.rep_rate_mhz);
        v.positive("detection.coincidence_window_ns", d.coincidence_window_ns);
        v.check("detection.dark_count_rate_hz", d.dark_count_rate_hz >= 0.0 && d.dark_count_rate_hz.is_finite(), "must be nonnegative");

        let r = &c.rates;
        v.positive("rates.coincidences_hz", r.coincidences_hz);
        v.check("rates.coincidence_to_singles", r.coincidence_to_singles > 0.0 && r.coincidence_to_singles < 1.0, "must lie in (0, 1)");
        v.positive("rates.filter_bandwidth_nm", r.filter_bandwidth_nm);
        v.check("rates.pulses", r.pulses > 0, "must be positive");

        v.positive("fringe.rate_hz", c.fringe.rate_hz);
        v.positive("fringe.dwell_s", c.fringe.dwell_s);
        v.check("fringe.step_deg", c.fringe.step_deg > 0.0 && c.fringe.step_deg <= 22.5, "must lie in (0, 22.5] so that a half turn holds 8 points");

        let ch = &c.chsh;
        v.positive("chsh.rate_hz", ch.rate_hz);
        v.positive("chsh.dwell_s", ch.dwell_s);
        for (name, a) in [("a_deg", ch.a_deg), ("a_prime_deg", ch.a_prime_deg), ("b_deg", ch.b_deg), ("b_prime_deg", ch.b_prime_deg)] {
            v.check(&format!("chsh.{name}"), a.is_finite(), "must be finite");
        }

        v.positive("tomography.rate_hz", c.tomography.rate_hz);
        v.positive("tomography.dwell_s", c.tomography.dwell_s);
        v.check("tomography.mc_runs", c.tomography.mc_runs >= 2, "needs at least 2 runs");

        let p = &c.power_scan;
        v.check("power_scan.powers_mw", !p.powers_mw.is_empty() && p.powers_mw.iter().all(|&x| x > 0.0 && x.is_finite()), "must be a non-empty list of positive powers");
        v.check("power_scan.calibration_powers_mw", p.calibration_powers_mw.iter().all(|&x| x > 0.0) && p.calibration_powers_mw[0] != p.calibration_powers_mw[1], "must be two distinct positive powers");
        v.check("power_scan.calibration_fidelities", p.calibration_fidelities.iter().all(|&f| f > 0.25 && f <= 1.0), "must lie in (0.25, 1]");

        let sp = &c.spectral;
        v.positive("spectral.signal_nm", sp.signal_nm);
        v.positive("spectral.idler_nm", sp.idler_nm);
        v.positive("spectral.printed_pump_nm", sp.printed_pump_nm);
        v.positive("spectral.pump_duration_fs", sp.pump_duration_fs);
        v.check("spectral.crystal_length_mm", sp.crystal_length_mm >= 0.0 && sp.crystal_length_mm.is_finite(), "must be nonnegative");
        v.check("spectral.filter_fwhm_signal_nm", sp.filter_fwhm_signal_nm > 0.0, "filter bandwidth must be positive");
        v.check("spectral.filter_fwhm_idler_nm", sp.filter_fwhm_idler_nm > 0.0, "filter bandwidth must be positive");
        v.positive("spectral.energy_tolerance", sp.energy_tolerance);
        v.check("spectral.grid", sp.grid >= 64, "must be at least 64");
        v.positive("spectral.span_factor", sp.span_factor);
        let wavelengths_ok = sp.signal_nm > 0.0 && sp.idler_nm > 0.0 && sp.pump_nm() > 0.0;
        if wavelengths_ok {
            let inv_p = 1.0 / sp.pump_nm();
            let mismatch = (inv_p - 1.0 / sp.signal_nm - 1.0 / sp.idler_nm).abs() / inv_p;
            let field = if sp.use_printed_pump_wavelength {
                "spectral.printed_pump_nm"
            } else {
                "spectral.signal_nm"
            };
            v.check(
                field,
                mismatch <= sp.energy_tolerance,
                &format!(
                    "energy conservation 1/pump = 1/signal + 1/idler violated: mismatch {:.4}% exceeds tolerance {:.4}%",
                    mismatch * 100.0,
                    sp.energy_tolerance * 100.0
                ),
            );
        }

        let h = &c.hom;
        v.positive("hom.delay_step_fs", h.delay_step_fs);
        v.check("hom.delay_stop_fs", h.delay_stop_fs > h.delay_start_fs, "must exceed delay_start_fs");
        if h.delay_step_fs > 0.0 && h.delay_stop_fs > h.delay_start_fs {
            let n = (h.delay_stop_fs - h.delay_start_fs) / h.delay_step_fs;
            v.check("hom.delay_step_fs", n < MAX_HOM_POINTS as f64, &format!("more than {MAX_HOM_POINTS} delays"));
        }
        v.positive("hom.mean_fourfolds", h.mean_fourfolds);

        if let Err(e) = c.dispersion.delay_convention.parse::<DelayConvention>() {
            v.push("dispersion.delay_convention", e.to_string());
        }
        let crystal = v.model("dispersion.crystal", self.crystal_model());
        let comp = v.model("dispersion.compensator", self.compensator_model());
        if wavelengths_ok {
            if let Some(m) = &crystal {
                for (field, axis, nm) in [
                    ("spectral.pump_nm", Axis::Y, sp.pump_nm()),
                    ("spectral.signal_nm", Axis::Y, sp.signal_nm),
                    ("spectral.idler_nm", Axis::Z, sp.idler_nm),
                ] {
                    v.in_range(field, m, axis, nm);
                }
            }
            if let Some(m) = &comp {
                for (field, nm) in [("spectral.signal_nm", sp.signal_nm), ("spectral.idler_nm", sp.idler_nm)] {
                    v.in_range(field, m, Axis::O, nm);
                    v.in_range(field, m, Axis::E, nm);
                }
            }
        }

        ValidationReport {
            path: self.path.display().to_string(),
            violations: v.violations,
        }
    }
}

struct Checker<'a> {
    cfg: &'a LoadedConfig,
    violations: Vec<Violation>,
}

impl Checker<'_> {
    fn push(&mut self, field: &str, message: String) {
        let line = self.cfg.line(field);
        self.violations.push(Violation {
            field: field.to_string(),
            line,
            message,
        });
    }

    fn check(&mut self, field: &str, ok: bool, message: &str) {
        if !ok {
            self.push(field, message.to_string());
        }
    }

    fn positive(&mut self, field: &str, x: f64) {
        self.check(field, x > 0.0 && x.is_finite(), "must be positive");
    }

    fn unit_interval(&mut self, field: &str, x: f64) {
        self.check(field, x > 0.0 && x <= 1.0, "must lie in (0, 1]");
    }

    fn model(&mut self, field: &str, m: pairsource::Result<DispersionModel>) -> Option<DispersionModel> {
        match m {
            Ok(m) => Some(m),
            Err(e) => {
                self.push(field, e.to_string());
                None
            }
        }
    }

    fn in_range(&mut self, field: &str, m: &DispersionModel, axis: Axis, nm: f64) {
        let r = Wavelength::from_nm(nm).and_then(|l| m.refractive_index(axis, l));
        if let Err(e) = r {
            self.push(field, format!("axis {axis}: {e}"));
        }
    }
}
