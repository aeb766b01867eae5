use std::path::{Path, PathBuf};
use std::process::Command;

use pairsource_cli::{
    run_scenario, write_output, LoadedConfig, RunOptions, Scenario, CONFIG_ENV, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK,
    EXIT_USAGE,
};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn default_path() -> PathBuf {
    data_dir().join("experiment.toml")
}

/// Default config with `edits` applied, written into `dir` with absolute
/// dispersion paths.
fn config_with(dir: &Path, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = std::fs::read_to_string(default_path()).unwrap();
    let abs = format!("\"{}/dispersion/", data_dir().display());
    text = text.replace("\"dispersion/", &abs);
    for (from, to) in edits {
        assert!(text.contains(from), "edit target `{from}` missing");
        text = text.replacen(from, to, 1);
    }
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn load(path: &Path) -> LoadedConfig {
    LoadedConfig::load(path).unwrap()
}

fn value(out: &pairsource_cli::ScenarioOutput, key: &str) -> f64 {
    out.value(key).unwrap_or_else(|| panic!("missing {key}")).parse().unwrap()
}

fn exact() -> RunOptions {
    RunOptions {
        exact: true,
        ..Default::default()
    }
}

#[test]
fn shipped_config_is_valid() {
    let report = load(&default_path()).validate();
    assert!(report.is_valid(), "{report}");
}

#[test]
fn negative_filter_bandwidth_is_named_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = config_with(dir.path(), &[("filter_fwhm_idler_nm = 1.0", "filter_fwhm_idler_nm = -1.0")]);
    let cfg = load(&path);
    let report = cfg.validate();
    assert!(report.mentions("spectral.filter_fwhm_idler_nm"), "{report}");
    let v = &report.violations[0];
    let line = cfg.text.lines().nth(v.line - 1).unwrap();
    assert!(line.starts_with("filter_fwhm_idler_nm"), "line {}: {line}", v.line);
}

#[test]
fn energy_violation_cites_the_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = config_with(
        dir.path(),
        &[
            ("use_printed_pump_wavelength = false", "use_printed_pump_wavelength = true"),
            ("printed_pump_nm = 391.2", "printed_pump_nm = 380.0"),
        ],
    );
    let report = load(&path).validate();
    assert!(report.mentions("spectral.printed_pump_nm"), "{report}");
    let text = report.to_string();
    // 1 - 380·(1/760 + 1/810) = 0.03086
    assert!(text.contains("3.0864%"), "{text}");
}

#[test]
fn printed_pump_wavelength_is_within_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let path = config_with(dir.path(), &[("use_printed_pump_wavelength = false", "use_printed_pump_wavelength = true")]);
    let report = load(&path).validate();
    assert!(report.is_valid(), "{report}");
}

#[test]
fn every_violation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = config_with(
        dir.path(),
        &[
            ("detector_efficiency = 0.5", "detector_efficiency = 1.5"),
            ("mc_runs = 100", "mc_runs = 1"),
            ("delay_convention = \"crossed_crystal\"", "delay_convention = \"sideways\""),
        ],
    );
    let report = load(&path).validate();
    for f in ["detection.detector_efficiency", "tomography.mc_runs", "dispersion.delay_convention"] {
        assert!(report.mentions(f), "{f} missing from {report}");
    }
    assert_eq!(report.violations.len(), 3, "{report}");
}

#[test]
fn unknown_key_is_a_schema_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = config_with(dir.path(), &[("step_deg = 22.5", "step_deg = 22.5\nstep_size_deg = 1.0")]);
    let report = LoadedConfig::load(&path).unwrap_err();
    let v = &report.violations[0];
    assert!(v.message.contains("step_size_deg"), "{report}");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(v.line - 1).unwrap().starts_with("step_size_deg"));
}

#[test]
fn missing_dispersion_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = config_with(dir.path(), &[("calcite_ghosh1999.toml", "calcite_missing.toml")]);
    let report = load(&path).validate();
    assert!(report.mentions("dispersion.compensator"), "{report}");
}

#[test]
fn chsh_exact_summary() {
    let out = run_scenario(Scenario::Chsh, &load(&default_path()), &exact()).unwrap();
    assert!((value(&out, "s") - 2.7153).abs() < 1e-4, "{}", out.headline);
    assert!(out.headline.starts_with("chsh: S=2.715"));
}

#[test]
fn qpm_summary_in_band() {
    let out = run_scenario(Scenario::Qpm, &load(&default_path()), &RunOptions::default()).unwrap();
    let period = value(&out, "poling_period_um");
    assert!((7.6..=8.2).contains(&period), "{period}");
    let walkoff = value(&out, "walkoff_pump_idler_fs");
    assert!((750.0..=950.0).contains(&walkoff), "{walkoff}");
}

#[test]
fn compensation_summary_in_band() {
    let out = run_scenario(Scenario::Compensation, &load(&default_path()), &RunOptions::default()).unwrap();
    assert!((value(&out, "signal_mm") - 3.0).abs() <= 0.9);
    assert!((value(&out, "idler_mm") - 3.6).abs() <= 1.08);
    let table = &out.files[0].1;
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn sampled_scenario_without_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = config_with(dir.path(), &[("seed = 20090318\n", "")]);
    let cfg = load(&path);
    let err = run_scenario(Scenario::Fringe, &cfg, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
    let opts = RunOptions {
        seed: Some(7),
        ..Default::default()
    };
    assert!(run_scenario(Scenario::Fringe, &cfg, &opts).is_ok());
    assert!(run_scenario(Scenario::Fringe, &cfg, &exact()).is_ok());
}

fn run_to_dir(scenario: Scenario, cfg: &LoadedConfig, opts: &RunOptions, dir: &Path) {
    let out = run_scenario(scenario, cfg, opts).unwrap();
    write_output(dir, cfg, &out).unwrap();
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn same_seed_gives_identical_files_across_runs_and_thread_counts() {
    let cfg = load(&default_path());
    let opts = RunOptions {
        pulses: Some(1 << 23),
        mc_runs: Some(20),
        ..Default::default()
    };
    for scenario in [Scenario::Fringe, Scenario::Tomography, Scenario::Brightness, Scenario::Hom] {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
        run_to_dir(scenario, &cfg, &opts, &a);
        run_to_dir(scenario, &cfg, &opts, &b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        pool.install(|| run_to_dir(scenario, &cfg, &opts, &c));
        let fa = files(&a);
        assert!(fa.len() >= 3, "{scenario:?}");
        assert_eq!(fa, files(&b), "{scenario:?} differs between runs");
        assert_eq!(fa, files(&c), "{scenario:?} differs with one worker");
    }
}

#[test]
fn different_seeds_differ() {
    let cfg = load(&default_path());
    let run = |seed| {
        let opts = RunOptions {
            seed: Some(seed),
            ..Default::default()
        };
        run_scenario(Scenario::Chsh, &cfg, &opts).unwrap().files
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn output_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load(&default_path());
    run_to_dir(Scenario::PowerScan, &cfg, &exact(), tmp.path());
    let names: Vec<String> = files(tmp.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["config.toml", "power_scan.csv", "summary.txt"]);
    let summary = std::fs::read_to_string(tmp.path().join("summary.txt")).unwrap();
    assert!(summary.lines().all(|l| l.split_once('=').is_some()));
    assert!(summary.starts_with("scenario=power-scan\nmode=exact\n"));
    let snapshot = std::fs::read_to_string(tmp.path().join("config.toml")).unwrap();
    assert_eq!(snapshot, cfg.text);
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pairsource"));
    c.env_remove(CONFIG_ENV);
    c
}

fn code(c: &mut Command) -> i32 {
    c.output().unwrap().status.code().unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let good = default_path();
    let out = tmp.path().join("qpm");
    assert_eq!(code(bin().args(["qpm", "--config"]).arg(&good).arg("--out").arg(&out)), EXIT_OK as i32);
    assert!(out.join("summary.txt").exists());
    assert_eq!(code(bin().arg("teleport").arg("--config").arg(&good)), EXIT_USAGE as i32);
    assert_eq!(code(bin().arg("qpm")), EXIT_USAGE as i32);

    let bad = tempfile::tempdir().unwrap();
    let bad_path = config_with(bad.path(), &[("filter_fwhm_signal_nm = 3.0", "filter_fwhm_signal_nm = -3.0")]);
    let o = bin().args(["validate", "--config"]).arg(&bad_path).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG as i32));
    assert!(String::from_utf8_lossy(&o.stdout).contains("spectral.filter_fwhm_signal_nm"));
    let dir = tmp.path().join("hom");
    assert_eq!(code(bin().args(["hom", "--config"]).arg(&bad_path).arg("--out").arg(&dir)), EXIT_CONFIG as i32);
    assert!(!dir.exists());

    // Fidelity rising with power has no non-negative noise slope.
    let rising = tempfile::tempdir().unwrap();
    let rising_path = config_with(rising.path(), &[("[0.958, 0.950]", "[0.950, 0.958]")]);
    let o = bin()
        .args(["power-scan", "--exact", "--config"])
        .arg(&rising_path)
        .arg("--out")
        .arg(tmp.path().join("ps"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_NUMERICAL as i32), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_from_environment_and_headline() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .env(CONFIG_ENV, default_path())
        .args(["chsh", "--exact", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("chsh: S=2.7153"), "{stdout}");
}
