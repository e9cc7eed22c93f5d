use std::path::Path;
use std::process::{Command, Output};

use ocvkit::io::{parse_params, parse_r0_report, read_log};
use ocvkit::pipeline::parse_truth;
use ocvkit::soc::Mode;

fn ocvkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocvkit"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ocvkit(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Single stderr line with an error-code prefix.
fn fails(args: &[&str], code: &str) -> String {
    let out = ocvkit(args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("{code}: ")), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generative_config(dir: &Path, hysteresis: &str, value: f64, noise: f64) -> std::path::PathBuf {
    let text = format!(
        "# format=1\nseed = 5\n[cell]\ncell_id = \"gen\"\ncapacity_As = 14400.0\nr_ohmic_Ohm = 0.1\nr_sei_Ohm = 0.0\n\
         r_ct_Ohm = 0.0\nhysteresis = \"{hysteresis}\"\nhysteresis_value = {value:?}\ntrue_ocv = \"combined3\"\n\
         noise_std_V = {noise:?}\n"
    );
    let path = dir.join(format!("{hysteresis}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn repo_config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn default_config_is_printed_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["default-config"]);
    assert!(text.starts_with("# format=1\n"));
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &text).unwrap();
    ocvkit::config::RunConfig::load(&path).unwrap();
}

#[test]
fn simulate_row_count_follows_the_sampling_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let stdout = ok(&[
        "simulate",
        "--config",
        &repo_config("default.toml"),
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("seed=2024"));
    assert!(out.join("truth.toml").exists());
    let log = read_log(&out.join("log.csv")).unwrap();
    assert_eq!(log.metadata["seed"], "2024");

    let segs = log.segments();
    let modes: Vec<Mode> = segs.iter().map(|s| s.mode).collect();
    assert_eq!(
        modes,
        [
            Mode::Charge,
            Mode::Rest,
            Mode::Discharge,
            Mode::Charge,
            Mode::Rest,
            Mode::Pulse
        ]
    );
    // one hour of rest at 60 s
    assert_eq!(segs[1].range.len(), 60);
    assert_eq!(segs[4].range.len(), 60);
    // pulse test: eight samples
    assert_eq!(segs[5].range.len(), 8);
    // a branch logs control steps 0, 60, 120, ... plus the terminating step
    for seg in &segs[2..4] {
        let r = &log.records()[seg.range.clone()];
        let last_step = (r[r.len() - 1].t_s - r[0].t_s).ceil() as usize;
        let expected = last_step / 60 + 1 + usize::from(last_step % 60 != 0);
        assert_eq!(seg.range.len(), expected);
    }
}

#[test]
fn repeated_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("default.toml");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&[
            "simulate",
            "--config",
            &cfg,
            "--out",
            s(&out),
            "--seed",
            "77",
        ]);
        ok(&[
            "estimate-ocv",
            "--log",
            s(&out.join("log.csv")),
            "--out",
            s(&out),
        ]);
        files.push(
            ["log.csv", "params.toml", "table.csv"].map(|f| std::fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn noiseless_generative_round_trip_matches_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generative_config(dir.path(), "resistive", 0.02, 0.0);
    let out = dir.path().join("run");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    ok(&[
        "estimate-ocv",
        "--log",
        s(&out.join("log.csv")),
        "--out",
        s(&out),
        "--epsilon",
        "0.175",
    ]);
    let truth = parse_truth(
        &std::fs::read_to_string(out.join("truth.toml")).unwrap(),
        "truth",
    )
    .unwrap();
    let want = truth.expected.unwrap();
    let params = parse_params(
        &std::fs::read_to_string(out.join("params.toml")).unwrap(),
        "params",
    )
    .unwrap();
    assert_eq!(params.cell_id.as_deref(), Some("gen"));
    for (g, w) in params
        .k
        .iter()
        .chain([&params.r0h_ohm])
        .zip(want.k.iter().chain([&want.r0h_ohm]))
    {
        assert!(((g - w) / w).abs() < 1e-4, "{g} vs {w}");
    }
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 202);
    assert!(std::fs::read_to_string(out.join("fit_report.toml"))
        .unwrap()
        .contains("residual_rms_V"));
}

#[test]
fn default_cell_table_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&[
        "simulate",
        "--config",
        &repo_config("default.toml"),
        "--out",
        s(&out),
    ]);
    ok(&[
        "estimate-ocv",
        "--log",
        s(&out.join("log.csv")),
        "--out",
        s(&out),
        "--table-n",
        "101",
    ]);
    let (soc, ocv) = ocvkit::io::parse_table(
        &std::fs::read_to_string(out.join("table.csv")).unwrap(),
        "table",
    )
    .unwrap();
    assert_eq!(soc.len(), 101);
    assert!(ocv.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn missing_capacity_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n[cell]\nr_ohmic_Ohm = 0.1\n").unwrap();
    let err = fails(
        &["simulate", "--config", s(&cfg), "--out", s(dir.path())],
        "E_PARSE",
    );
    assert!(err.contains("capacity"), "{err}");
}

#[test]
fn bad_inputs_exit_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    fails(
        &["estimate-ocv", "--log", s(&empty), "--out", s(dir.path())],
        "E_PARSE",
    );
    fails(
        &[
            "estimate-ocv",
            "--log",
            s(&dir.path().join("nope.csv")),
            "--out",
            s(dir.path()),
        ],
        "E_PARSE",
    );

    let discharge_only = dir.path().join("d.csv");
    std::fs::write(
        &discharge_only,
        "# format=1\nt_s,i_A,v_V,mode\n0,-1,3.7,D\n60,-1,3.6,D\n120,0,3.65,R\n",
    )
    .unwrap();
    let err = fails(
        &[
            "estimate-ocv",
            "--log",
            s(&discharge_only),
            "--out",
            s(dir.path()),
        ],
        "E_SEGMENTS",
    );
    assert!(err.contains("D R"), "{err}");
    let err = fails(
        &[
            "estimate-r0",
            "--log",
            s(&discharge_only),
            "--out",
            s(dir.path()),
        ],
        "E_SEGMENTS",
    );
    assert!(err.contains("pulse"), "{err}");

    fails(&["simulate"], "E_USAGE");
}

fn r0_std(args: &[&str]) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let mut full = vec!["estimate-r0", "--config", "", "--out", s(dir.path())];
    let cfg = repo_config("default.toml");
    full[2] = &cfg;
    full.extend_from_slice(args);
    ok(&full);
    let report = parse_r0_report(
        &std::fs::read_to_string(dir.path().join("r0_report.csv")).unwrap(),
        "r0",
    )
    .unwrap();
    report.summary["empirical_std_Ohm"].parse().unwrap()
}

#[test]
fn monte_carlo_mode_reproduces_the_two_stds() {
    let d = r0_std(&[]);
    assert!((d * 1e3 - 0.1414).abs() / 0.1414 < 0.03, "{d}");
    let a = r0_std(&["--kind", "optimized_alternating", "--cycles", "1"]);
    assert!((a * 1e3 - 0.0707).abs() / 0.0707 < 0.03, "{a}");
}

#[test]
fn noiseless_log_reports_the_bound_and_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generative_config(dir.path(), "resistive", 0.02, 0.0);
    let out = dir.path().join("run");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    ok(&[
        "estimate-r0",
        "--log",
        s(&out.join("log.csv")),
        "--out",
        s(&out),
        "--sigma",
        "2e-4",
    ]);
    let report = parse_r0_report(
        &std::fs::read_to_string(out.join("r0_report.csv")).unwrap(),
        "r0",
    )
    .unwrap();
    assert_eq!(report.summary["empirical_std_Ohm"], "0");
    let crlb: f64 = report.summary["crlb_var_Ohm2"].parse().unwrap();
    assert!((crlb - 2e-8).abs() < 1e-20);
}

/// Writes a resistance report carrying an externally known R0.
fn r0_file(dir: &Path, cell_id: &str, r0: f64) -> std::path::PathBuf {
    let path = dir.join(format!("r0_{cell_id}.csv"));
    std::fs::write(
        &path,
        format!(
            "# format=1\n# cell_id={cell_id}\n# r0_hat_Ohm={r0}\ntrial,r0_hat,e_hat\n0,{r0},0\n"
        ),
    )
    .unwrap();
    path
}

fn hysteresis_run(hysteresis: &str, value: f64) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generative_config(dir.path(), hysteresis, value, 0.0);
    let out = dir.path().join("run");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    ok(&[
        "estimate-ocv",
        "--log",
        s(&out.join("log.csv")),
        "--out",
        s(&out),
    ]);
    let r0 = r0_file(dir.path(), "gen", 0.1);
    ok(&[
        "hysteresis",
        "--log",
        s(&out.join("log.csv")),
        "--params",
        s(&out.join("params.toml")),
        "--r0",
        s(&r0),
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(out.join("hysteresis.csv")).unwrap();
    let (meta, h1, h2) = ocvkit::io::parse_hysteresis(&text, "h").unwrap();
    (
        meta["r_h_Ohm"].parse().unwrap(),
        meta["rms_divergence_V"].parse().unwrap(),
        h1,
        h2,
    )
}

#[test]
fn hysteresis_examples_through_files() {
    let (r_h, rms, h1, h2) = hysteresis_run("resistive", 0.02);
    assert!((r_h - 0.02).abs() < 1e-6, "{r_h}");
    assert!(rms < 1e-6);
    assert!(h1.iter().zip(&h2).all(|(a, b)| (a - b).abs() < 1e-6));

    let (r_h, _, h1, h2) = hysteresis_run("none", 0.0);
    assert!(r_h.abs() < 1e-6);
    assert!(h1.iter().chain(&h2).all(|h| h.abs() < 1e-6));

    let (r_h, rms, h1, _) = hysteresis_run("constant_magnitude", 5e-3);
    assert!((r_h - 0.08).abs() < 4e-3, "{r_h}");
    assert!(rms.is_finite());
    assert!(h1.iter().all(|h| (h.abs() - 5e-3).abs() < 1e-3));
}

#[test]
fn cell_id_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generative_config(dir.path(), "resistive", 0.02, 0.0);
    let out = dir.path().join("run");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    ok(&[
        "estimate-ocv",
        "--log",
        s(&out.join("log.csv")),
        "--out",
        s(&out),
    ]);
    let r0 = r0_file(dir.path(), "other", 0.1);
    let err = fails(
        &[
            "hysteresis",
            "--log",
            s(&out.join("log.csv")),
            "--params",
            s(&out.join("params.toml")),
            "--r0",
            s(&r0),
            "--out",
            s(&out),
        ],
        "E_CELL_MISMATCH",
    );
    assert!(err.contains("other"), "{err}");
}
