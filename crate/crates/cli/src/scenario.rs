//! Named scenarios. Each returns its summary keys, a one-line headline and
//! the tables to write.

use pairsource::counts::{self, PowerSlope, RateCalibration};
use pairsource::measure::{self, Analyzer, ChshAngles, CountMode};
use pairsource::optics::{self, DelayConvention, DispersionModel, QpmProblem};
use pairsource::polcore::format_matrix_text;
use pairsource::source::{self, SourceParams};
use pairsource::spectral::{self, HomMode, SpectralParams};
use pairsource::tomo::{self, MleOptions, TomoData};
use pairsource::{Ket4, PolState};

use crate::config::LoadedConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Fringe,
    Chsh,
    Tomography,
    PowerScan,
    Brightness,
    Hom,
    Qpm,
    Compensation,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fringe => "fringe",
            Scenario::Chsh => "chsh",
            Scenario::Tomography => "tomography",
            Scenario::PowerScan => "power-scan",
            Scenario::Brightness => "brightness",
            Scenario::Hom => "hom",
            Scenario::Qpm => "qpm",
            Scenario::Compensation => "compensation",
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub exact: bool,
    pub pulses: Option<u64>,
    pub mc_runs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub headline: String,
    /// Ordered `key=value` pairs for `summary.txt`.
    pub summary: Vec<(String, String)>,
    /// `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

impl ScenarioOutput {
    pub fn summary_text(&self) -> String {
        self.summary.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

struct Out {
    summary: Vec<(String, String)>,
    files: Vec<(String, String)>,
}

impl Out {
    fn new(scenario: Scenario, mode: &str, seed: Option<u64>) -> Self {
        let mut out = Out {
            summary: Vec::new(),
            files: Vec::new(),
        };
        out.text("scenario", scenario.name());
        out.text("mode", mode);
        out.text("seed", &seed.map_or("none".to_string(), |s| s.to_string()));
        out
    }

    fn text(&mut self, key: &str, value: &str) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    fn num(&mut self, key: &str, value: f64) {
        self.text(key, &format!("{value:.9}"));
    }

    fn sci(&mut self, key: &str, value: f64) {
        self.text(key, &format!("{value:.9e}"));
    }

    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    fn finish(self, headline: String) -> ScenarioOutput {
        ScenarioOutput {
            headline,
            summary: self.summary,
            files: self.files,
        }
    }
}

fn need_seed(cfg: &LoadedConfig, opts: &RunOptions, scenario: Scenario) -> Result<u64, CliError> {
    opts.seed.or(cfg.config.seed).ok_or_else(|| {
        CliError::Config(format!(
            "{}: scenario `{}` samples and needs a seed (config `seed` or --seed)",
            cfg.path.display(),
            scenario.name()
        ))
    })
}

/// Source parameters calibrated to the configured visibility and fidelity.
pub fn source_params(cfg: &LoadedConfig) -> pairsource::Result<SourceParams> {
    let s = &cfg.config.source;
    let cal = source::calibrate_isotropic(s.fringe_visibility, s.singlet_fidelity)?;
    Ok(SourceParams {
        phase_phi_rad: s.phase_phi_rad,
        pump_power_mw: s.pump_power_mw,
        ..cal.params
    })
}

pub fn source_state(cfg: &LoadedConfig) -> pairsource::Result<PolState> {
    source::build_state(&source_params(cfg)?)
}

pub fn rate_calibration(cfg: &LoadedConfig) -> pairsource::Result<RateCalibration> {
    let r = &cfg.config.rates;
    counts::calibrate_rates(r.coincidences_hz, r.coincidence_to_singles, &cfg.config.detection.template())
}

/// Spectral parameters with group slownesses from the crystal model.
pub fn spectral_params(cfg: &LoadedConfig, crystal: &DispersionModel, prob: &QpmProblem) -> pairsource::Result<SpectralParams> {
    let s = &cfg.config.spectral;
    Ok(SpectralParams {
        pump_center_nm: prob.pump.nm(),
        signal_center_nm: prob.signal.nm(),
        idler_center_nm: prob.idler.nm(),
        pump_fwhm_duration_fs: s.pump_duration_fs,
        crystal_length_mm: s.crystal_length_mm,
        gv_inverse_pump: crystal.group_slowness(prob.pump_axis, prob.pump)?,
        gv_inverse_signal: crystal.group_slowness(prob.signal_axis, prob.signal)?,
        gv_inverse_idler: crystal.group_slowness(prob.idler_axis, prob.idler)?,
        filter_fwhm_signal_nm: s.filter_fwhm_signal_nm,
        filter_fwhm_idler_nm: s.filter_fwhm_idler_nm,
        energy_tolerance: s.energy_tolerance,
    })
}

fn mode_name(exact: bool) -> &'static str {
    if exact {
        "exact"
    } else {
        "sampled"
    }
}

pub fn run_scenario(scenario: Scenario, cfg: &LoadedConfig, opts: &RunOptions) -> Result<ScenarioOutput, CliError> {
    let report = cfg.validate();
    if !report.is_valid() {
        return Err(CliError::Config(report.to_string().trim_end().to_string()));
    }
    match scenario {
        Scenario::Fringe => fringe(cfg, opts),
        Scenario::Chsh => chsh(cfg, opts),
        Scenario::Tomography => tomography(cfg, opts),
        Scenario::PowerScan => power_scan(cfg, opts),
        Scenario::Brightness => brightness(cfg, opts),
        Scenario::Hom => hom(cfg, opts),
        Scenario::Qpm => qpm(cfg),
        Scenario::Compensation => compensation(cfg),
    }
}

fn fringe(cfg: &LoadedConfig, opts: &RunOptions) -> Result<ScenarioOutput, CliError> {
    let seed = if opts.exact { opts.seed.or(cfg.config.seed) } else { Some(need_seed(cfg, opts, Scenario::Fringe)?) };
    let f = &cfg.config.fringe;
    let rho = source_state(cfg)?;
    let n = (360.0 / f.step_deg - 1e-9).floor() as usize + 1;
    let angles: Vec<f64> = (0..n).map(|k| k as f64 * f.step_deg).collect();
    let mode = |offset: u64| match (opts.exact, seed) {
        (false, Some(s)) => CountMode::Sampled { seed: s.wrapping_add(offset) },
        _ => CountMode::Exact,
    };
    let hv = measure::fringe_scan(&rho, Analyzer::h(), &angles, f.rate_hz, f.dwell_s, mode(0))?;
    let diag = measure::fringe_scan(&rho, Analyzer::d(), &angles, f.rate_hz, f.dwell_s, mode(1))?;
    let mut out = Out::new(Scenario::Fringe, mode_name(opts.exact), seed);
    out.num("visibility_hv", hv.fit.visibility);
    out.num("visibility_hv_error", hv.fit.visibility_error);
    out.num("visibility_diag", diag.fit.visibility);
    out.num("visibility_diag_error", diag.fit.visibility_error);
    out.file("fringe_hv.csv", hv.to_dsv());
    out.file("fringe_diag.csv", diag.to_dsv());
    let headline = format!(
        "fringe: V_HV={:.4} +/- {:.4}, V_D={:.4} +/- {:.4}",
        hv.fit.visibility, hv.fit.visibility_error, diag.fit.visibility, diag.fit.visibility_error
    );
    Ok(out.finish(headline))
}

fn chsh(cfg: &LoadedConfig, opts: &RunOptions) -> Result<ScenarioOutput, CliError> {
    let seed = if opts.exact { opts.seed.or(cfg.config.seed) } else { Some(need_seed(cfg, opts, Scenario::Chsh)?) };
    let c = &cfg.config.chsh;
    let rho = source_state(cfg)?;
    let angles = ChshAngles {
        a: c.a_deg,
        a_prime: c.a_prime_deg,
        b: c.b_deg,
        b_prime: c.b_prime_deg,
    };
    let mode = match (opts.exact, seed) {
        (false, Some(s)) => CountMode::Sampled { seed: s },
        _ => CountMode::Exact,
    };
    let r = measure::chsh(&rho, angles, mode, c.rate_hz, c.dwell_s)?;
    let mut out = Out::new(Scenario::Chsh, mode_name(opts.exact), seed);
    out.num("s", r.s);
    out.num("s_error", r.s_error);
    for (k, e) in r.correlations.iter().enumerate() {
        out.num(&format!("correlation_{k}"), *e);
    }
    out.file("chsh.csv", r.to_dsv());
    Ok(out.finish(format!("chsh: S={:.4} +/- {:.4}", r.s, r.s_error)))
}

fn tomography(cfg: &LoadedConfig, opts: &RunOptions) -> Result<ScenarioOutput, CliError> {
    let seed = need_seed(cfg, opts, Scenario::Tomography)?;
    let t = &cfg.config.tomography;
    let rho = source_state(cfg)?;
    let settings = tomo::canonical_settings();
    let data = if opts.exact {
        TomoData::expected(rho.matrix(), &settings, t.rate_hz, t.dwell_s)
    } else {
        TomoData::sampled(rho.matrix(), &settings, t.rate_hz, t.dwell_s, seed)
    };
    let mle = MleOptions {
        norm: t.norm(),
        ..MleOptions::default()
    };
    let runs = opts.mc_runs.unwrap_or(t.mc_runs);
    let target = Ket4::psi_minus();
    let r = tomo::run_tomography(&data, &settings, &target, runs, seed.wrapping_add(1), &mle)?;
    let mut out = Out::new(Scenario::Tomography, mode_name(opts.exact), Some(seed));
    out.num("fidelity", r.fidelity);
    out.num("fidelity_std", r.fidelity_std);
    out.num("model_fidelity", rho.fidelity(&target));
    out.num("purity", r.rho_mle.purity());
    out.sci("mle_likelihood", r.mle_likelihood);
    out.text("mc_runs", &r.mc_runs.to_string());
    out.text("total_counts", &format!("{}", data.total().round()));
    out.file("counts.txt", tomo::format_count_file(&settings, &data));
    out.file("rho_linear.txt", format_matrix_text(&r.rho_linear));
    out.file("rho_mle.txt", r.rho_mle.to_text());
    Ok(out.finish(format!("tomography: {}", r.summary_line())))
}

fn power_scan(cfg: &LoadedConfig, opts: &RunOptions) -> Result<ScenarioOutput, CliError> {
    let p = &cfg.config.power_scan;
    let pulses = if opts.exact { 0 } else { opts.pulses.unwrap_or(p.pulses) };
    let seed = if pulses > 0 { Some(need_seed(cfg, opts, Scenario::PowerScan)?) } else { opts.seed.or(cfg.config.seed) };
    let cal = rate_calibration(cfg)?;
    let mu_per_mw = cal.mu / cfg.config.source.pump_power_mw;
    let (cp, cf) = (p.calibration_powers_mw, p.calibration_fidelities);
    let slope = PowerSlope::calibrate(&cal.chain, mu_per_mw, (cp[0], cf[0]), (cp[1], cf[1]))?;
    let base = SourceParams {
        mu_per_mw,
        ..source_params(cfg)?
    };
    let points = counts::visibility_vs_power_scaled(&p.powers_mw, &base, &cal.chain, pulses, seed.unwrap_or(0), slope.noise_scale)?;
    let mut table = String::from(
        "power_mw,mu,accidental_fraction,accidental_fraction_mc,accidental_fraction_mc_error,white_noise_eff,visibility,fidelity_predicted\n",
    );
    let mut out = Out::new(Scenario::PowerScan, mode_name(pulses == 0), seed);
    out.num("mu_per_mw", mu_per_mw);
    out.num("noise_scale", slope.noise_scale);
    out.num("intrinsic_fidelity", slope.intrinsic_fidelity());
    let mut headline = Vec::new();
    for pt in &points {
        let f = slope.predict_fidelity(pt.power_mw)?;
        let (mc, mc_err) = pt.accidental_fraction_mc.map_or((String::new(), String::new()), |(a, e)| (format!("{a:.9}"), format!("{e:.9}")));
        table.push_str(&format!(
            "{},{:.9},{:.9},{mc},{mc_err},{:.9},{:.9},{:.9}\n",
            pt.power_mw, pt.mu, pt.accidental_fraction, pt.white_noise_eff, pt.visibility, f
        ));
        out.num(&format!("fidelity_{}mw", pt.power_mw), f);
        headline.push(format!("F({} mW)={f:.4}", pt.power_mw));
    }
    out.file("power_scan.csv", table);
    Ok(out.finish(format!("power-scan: {}", headline.join(", "))))
}

fn brightness(cfg: &LoadedConfig, opts: &RunOptions) -> Result<ScenarioOutput, CliError> {
    let r = &cfg.config.rates;
    let seed = if opts.exact { opts.seed.or(cfg.config.seed) } else { Some(need_seed(cfg, opts, Scenario::Brightness)?) };
    let cal = rate_calibration(cfg)?;
    let report = match (opts.exact, seed) {
        (false, Some(s)) => counts::simulate_rates(cal.mu, &cal.chain, opts.pulses.unwrap_or(r.pulses), s)?,
        _ => cal.report,
    };
    let report = report.with_brightness(cfg.config.source.pump_power_mw, r.filter_bandwidth_nm)?;
    let b = report.spectral_brightness.unwrap_or(f64::NAN);
    let mut out = Out::new(Scenario::Brightness, mode_name(opts.exact), seed);
    out.num("mu", cal.mu);
    out.num("coupling_efficiency", cal.chain.coupling_efficiency);
    out.num("spectral_brightness", b);
    out.num("coincidences_hz", report.coincidences_hz);
    out.num("coincidences_error_hz", report.coincidences_error_hz());
    out.num("accidental_fraction", report.accidental_fraction());
    out.file("rates.txt", report.to_key_value());
    Ok(out.finish(format!(
        "brightness: {b:.1} cc/(s mW nm), {:.0} cc/s",
        report.coincidences_hz
    )))
}

fn hom(cfg: &LoadedConfig, opts: &RunOptions) -> Result<ScenarioOutput, CliError> {
    let seed = if opts.exact { opts.seed.or(cfg.config.seed) } else { Some(need_seed(cfg, opts, Scenario::Hom)?) };
    let s = &cfg.config.spectral;
    let h = &cfg.config.hom;
    let crystal = cfg.crystal_model()?;
    let prob = cfg.qpm_problem()?;
    let params = spectral_params(cfg, &crystal, &prob)?;
    let jsa = spectral::build_jsa(&params, s.grid, s.span_factor)?;
    let sch = spectral::schmidt(&jsa)?;
    let mode = match (opts.exact, seed) {
        (false, Some(seed)) => HomMode::Sampled {
            mean_fourfolds: h.mean_fourfolds,
            seed,
        },
        _ => HomMode::Exact,
    };
    let curve = spectral::hom_dip(&jsa, &jsa, &h.delays_fs(), mode)?;
    let jitter = spectral::timing_jitter(&params)?;
    let mut out = Out::new(Scenario::Hom, mode_name(opts.exact), seed);
    out.num("purity", sch.purity);
    out.num("schmidt_number", sch.schmidt_number);
    out.num("visibility", curve.visibility);
    out.num("visibility_error", curve.visibility_error);
    if let Some(fit) = curve.fit {
        out.num("dip_center_fs", fit.center_fs);
        out.num("dip_sigma_fs", fit.sigma_fs);
    }
    out.num("timing_jitter_fs", jitter.total_fs);
    let mut coeffs = String::from("index,coefficient\n");
    for (k, c) in sch.coefficients.iter().take(64).enumerate() {
        coeffs.push_str(&format!("{k},{c:.12}\n"));
    }
    out.file("hom.csv", curve.to_dsv());
    out.file("schmidt.csv", coeffs);
    Ok(out.finish(format!(
        "hom: V={:.4} +/- {:.4}, purity={:.4}",
        curve.visibility, curve.visibility_error, sch.purity
    )))
}

fn qpm(cfg: &LoadedConfig) -> Result<ScenarioOutput, CliError> {
    let s = &cfg.config.spectral;
    let crystal = cfg.crystal_model()?;
    let prob = cfg.qpm_problem()?;
    let period = optics::qpm_period(&crystal, &prob)?;
    let len = s.crystal_length_mm;
    let pi = optics::gvm_walkoff(&crystal, prob.pump_axis, prob.pump, prob.idler_axis, prob.idler, len)?;
    let ps = optics::gvm_walkoff(&crystal, prob.pump_axis, prob.pump, prob.signal_axis, prob.signal, len)?;
    let jitter = spectral::timing_jitter(&spectral_params(cfg, &crystal, &prob)?)?;
    let mut table = String::from("wave,wavelength_nm,axis,refractive_index,group_index,group_slowness_fs_per_mm\n");
    for (wave, axis, l) in [
        ("pump", prob.pump_axis, prob.pump),
        ("signal", prob.signal_axis, prob.signal),
        ("idler", prob.idler_axis, prob.idler),
    ] {
        table.push_str(&format!(
            "{wave},{:.6},{axis},{:.9},{:.9},{:.6}\n",
            l.nm(),
            crystal.refractive_index(axis, l)?,
            crystal.group_index(axis, l)?,
            crystal.group_slowness(axis, l)?
        ));
    }
    let mut out = Out::new(Scenario::Qpm, "exact", None);
    out.text("material", &crystal.material);
    out.num("pump_nm", prob.pump.nm());
    out.num("energy_mismatch", prob.energy_mismatch());
    out.num("poling_period_um", period);
    out.num("walkoff_pump_idler_fs", pi);
    out.num("walkoff_pump_signal_fs", ps);
    out.num("timing_jitter_fs", jitter.total_fs);
    out.file("qpm.csv", table);
    Ok(out.finish(format!(
        "qpm: period={period:.3} um, pump-idler walk-off={pi:.0} fs, jitter={:.0} fs",
        jitter.total_fs
    )))
}

fn compensation(cfg: &LoadedConfig) -> Result<ScenarioOutput, CliError> {
    let crystal = cfg.crystal_model()?;
    let comp = cfg.compensator_model()?;
    let prob = cfg.qpm_problem()?;
    let len = cfg.config.spectral.crystal_length_mm;
    let chosen: DelayConvention = cfg.config.dispersion.delay_convention.parse()?;
    let mut table = String::from("convention,signal_delay_fs,idler_delay_fs,signal_mm,idler_mm\n");
    let mut plan = None;
    for (name, conv) in [
        ("crossed_crystal", DelayConvention::CrossedCrystal),
        ("half_length", DelayConvention::HalfLength),
        ("full_length", DelayConvention::FullLength),
    ] {
        let p = optics::compensation_plan(&crystal, &comp, &prob, len, conv)?;
        table.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6}\n",
            p.delays.signal_fs, p.delays.idler_fs, p.signal_mm, p.idler_mm
        ));
        if conv == chosen {
            plan = Some(p);
        }
    }
    let p = plan.expect("every convention is tabulated");
    let mut out = Out::new(Scenario::Compensation, "exact", None);
    out.text("crystal", &crystal.material);
    out.text("compensator", &comp.material);
    out.text("delay_convention", &cfg.config.dispersion.delay_convention);
    out.num("signal_delay_fs", p.delays.signal_fs);
    out.num("idler_delay_fs", p.delays.idler_fs);
    out.num("signal_mm", p.signal_mm);
    out.num("idler_mm", p.idler_mm);
    out.file("compensation.csv", table);
    Ok(out.finish(format!(
        "compensation: signal {:.2} mm, idler {:.2} mm of {} ({})",
        p.signal_mm, p.idler_mm, comp.material, cfg.config.dispersion.delay_convention
    )))
}
