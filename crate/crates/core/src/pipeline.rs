//! End-to-end estimation on a logged low-rate OCV test.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::battery_model::SimulatedCell;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{
    emit_hysteresis, emit_log, emit_params, emit_r0_report, emit_table, emit_versioned_toml,
    parse_params, parse_r0_report, parse_versioned_toml, read_log, read_text, write_text,
    FitMetadata, ParamsFile, R0Report,
};
use crate::ocv_estimation::{build_design, build_table, fit, OcvFit, OcvTable, DEFAULT_TABLE_N};
use crate::ocv_model::DEFAULT_EPSILON;
use crate::parallel::Execution;
use crate::protocols::low_rate_ocv_test;
use crate::resistance::{
    estimate_r0, monte_carlo, recover_hysteresis, HysteresisRecovery, MonteCarloConfig,
    MonteCarloReport,
};
use crate::rng::{stream, Subsystem};
use crate::soc::{compute_capacity, coulomb_count, Capacity, Mode, SocTrajectory, TimeSeriesLog};

#[derive(Debug, Clone)]
pub struct OcvEstimation {
    /// The discharge branch followed by the charge branch.
    pub branches: TimeSeriesLog,
    pub capacity: Capacity,
    pub soc: SocTrajectory,
    pub fit: OcvFit,
    pub table: OcvTable,
}

/// Finds the OCV branches, computes capacity, Coulomb counts from
/// `s_initial`, fits the Combined+3 model and builds an `table_n`-node table.
pub fn estimate_ocv(
    log: &TimeSeriesLog,
    epsilon: f64,
    table_n: usize,
    s_initial: f64,
) -> Result<OcvEstimation> {
    let branches = log.ocv_branches()?;
    let capacity = compute_capacity(&branches)?;
    let soc = coulomb_count(&branches, capacity.qc_as, capacity.qd_as, s_initial)?;
    let fit = fit(&build_design(&branches, &soc.soc, epsilon)?)?;
    let table = build_table(&branches, &soc.soc, table_n)?;
    Ok(OcvEstimation {
        branches,
        capacity,
        soc,
        fit,
        table,
    })
}

/// Where a command writes its files.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let probe = dir.join(".ocvkit-write-probe");
        std::fs::write(&probe, b"")?;
        std::fs::remove_file(&probe)?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub const LOG_FILE: &str = "log.csv";
pub const TRUTH_FILE: &str = "truth.toml";
pub const PARAMS_FILE: &str = "params.toml";
pub const TABLE_FILE: &str = "table.csv";
pub const FIT_REPORT_FILE: &str = "fit_report.toml";
pub const R0_REPORT_FILE: &str = "r0_report.csv";
pub const HYSTERESIS_FILE: &str = "hysteresis.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedParameters {
    pub k: [f64; 8],
    #[serde(rename = "r0h_Ohm")]
    pub r0h_ohm: f64,
    pub epsilon: f64,
}

/// Generative truth written next to a simulated log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSidecar {
    pub seed: u64,
    pub cell_id: String,
    #[serde(rename = "capacity_As")]
    pub capacity_as: f64,
    #[serde(rename = "r0_Ohm")]
    pub r0_ohm: f64,
    pub hysteresis: String,
    pub hysteresis_value: f64,
    #[serde(rename = "ocv_min_V")]
    pub ocv_min_v: f64,
    #[serde(rename = "ocv_max_V")]
    pub ocv_max_v: f64,
    #[serde(rename = "noise_std_V")]
    pub noise_std_v: f64,
    #[serde(rename = "branch_current_A")]
    pub branch_current_a: f64,
    #[serde(rename = "expected_r0h_Ohm")]
    pub expected_r0h_ohm: f64,
    /// True SOC at the first and last record of the OCV branches.
    pub branch_true_soc: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<ExpectedParameters>,
}

pub fn parse_truth(text: &str, source: &str) -> Result<TruthSidecar> {
    parse_versioned_toml(text, source)
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub log: TimeSeriesLog,
    pub true_soc: Vec<f64>,
    pub truth: TruthSidecar,
}

/// Runs the configured low-rate OCV test on a simulated cell.
pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<Simulation> {
    let truth = cfg.ground_truth()?;
    let test = cfg.ocv_test_config()?;
    let mut cell = SimulatedCell::new(
        truth.clone(),
        cfg.cell.initial_soc,
        stream(seed, Subsystem::CellNoise, 0),
    )?;
    let mut out = low_rate_ocv_test(&mut cell, &test)?;
    out.log.metadata.insert("seed".into(), seed.to_string());

    let modes: Vec<_> = out.log.records().iter().map(|r| r.mode).collect();
    let first = modes.iter().position(|m| *m == Mode::Discharge);
    let last = modes.iter().rposition(|m| *m == Mode::Charge);
    let branch_true_soc = match (first, last) {
        (Some(a), Some(b)) => [out.true_soc[a], out.true_soc[b]],
        _ => [f64::NAN, f64::NAN],
    };
    let sidecar = TruthSidecar {
        seed,
        cell_id: truth.cell_id.clone(),
        capacity_as: truth.capacity_as,
        r0_ohm: truth.reduce_to_rint(),
        hysteresis: cfg.cell.hysteresis.clone(),
        hysteresis_value: cfg.cell.hysteresis_value,
        ocv_min_v: truth.ocv_min_v,
        ocv_max_v: truth.ocv_max_v,
        noise_std_v: truth.noise_std_v,
        branch_current_a: test.branch_current_a(),
        expected_r0h_ohm: cfg.expected_r0h_ohm()?,
        branch_true_soc,
        expected: cfg.expected_parameters()?.map(|p| ExpectedParameters {
            k: p.k,
            r0h_ohm: p.r0h_ohm,
            epsilon: p.epsilon,
        }),
    };
    Ok(Simulation {
        log: out.log,
        true_soc: out.true_soc,
        truth: sidecar,
    })
}

pub fn cmd_simulate(cfg: &RunConfig, seed: u64, out: &Outputs) -> Result<Simulation> {
    let sim = simulate(cfg, seed)?;
    write_text(&out.path(LOG_FILE), &emit_log(&sim.log))?;
    write_text(&out.path(TRUTH_FILE), &emit_versioned_toml(&sim.truth))?;
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_id: Option<String>,
    pub epsilon: f64,
    pub s_initial: f64,
    pub rows: usize,
    #[serde(rename = "residual_rms_V")]
    pub residual_rms_v: f64,
    pub condition_number: f64,
    pub scaled_condition_number: f64,
    #[serde(rename = "qc_As")]
    pub qc_as: f64,
    #[serde(rename = "qd_As")]
    pub qd_as: f64,
    pub table_nodes: usize,
    pub extrapolated_nodes: usize,
    pub monotonicity_violations: usize,
    pub soc_warnings: usize,
}

/// Estimation options taken from flags or the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub epsilon: f64,
    pub table_n: usize,
    pub s_initial: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            table_n: DEFAULT_TABLE_N,
            s_initial: 1.0,
        }
    }
}

pub fn cmd_estimate_ocv(
    log_path: &Path,
    opts: EstimateOptions,
    out: &Outputs,
) -> Result<(OcvEstimation, FitReport)> {
    let log = read_log(log_path)?;
    let est = estimate_ocv(&log, opts.epsilon, opts.table_n, opts.s_initial)?;
    let cell_id = log.cell_id().map(str::to_string);
    let d = &est.fit.diagnostics;
    let report = FitReport {
        cell_id: cell_id.clone(),
        epsilon: opts.epsilon,
        s_initial: opts.s_initial,
        rows: d.rows,
        residual_rms_v: d.residual_rms_v,
        condition_number: d.condition_number,
        scaled_condition_number: d.scaled_condition_number,
        qc_as: est.capacity.qc_as,
        qd_as: est.capacity.qd_as,
        table_nodes: est.table.soc.len(),
        extrapolated_nodes: est.table.extrapolated.iter().filter(|e| **e).count(),
        monotonicity_violations: est.table.monotonicity_violations().len(),
        soc_warnings: est.soc.warnings.len(),
    };
    let params = ParamsFile::new(&est.fit.params, cell_id, Some(FitMetadata::from(d)));
    write_text(&out.path(PARAMS_FILE), &emit_params(&params))?;
    write_text(&out.path(TABLE_FILE), &emit_table(&est.table))?;
    write_text(&out.path(FIT_REPORT_FILE), &emit_versioned_toml(&report))?;
    Ok((est, report))
}

/// Resistance from the pulse records of a log.
pub fn r0_report_from_log(log: &TimeSeriesLog, sigma_v: f64) -> Result<R0Report> {
    let pulses = log.pulse_records();
    if pulses.is_empty() {
        return Err(Error::Segments {
            reason: "no pulse segment found".into(),
            sequence: log.mode_sequence(),
        });
    }
    let i: Vec<f64> = pulses.iter().map(|r| r.i_a).collect();
    let v: Vec<f64> = pulses.iter().map(|r| r.v_v).collect();
    let est = estimate_r0(&i, &v, sigma_v)?;
    let mut s = BTreeMap::new();
    if let Some(id) = log.cell_id() {
        s.insert("cell_id".into(), id.to_string());
    }
    s.insert("source".into(), "log".into());
    s.insert("sigma_V".into(), sigma_v.to_string());
    s.insert("n_samples".into(), est.n_samples.to_string());
    s.insert("r0_hat_Ohm".into(), est.r0_ohm.to_string());
    s.insert("e_hat_V".into(), est.e_v.to_string());
    s.insert("crlb_var_Ohm2".into(), est.predicted_var_ohm2.to_string());
    s.insert(
        "crlb_std_Ohm".into(),
        est.predicted_var_ohm2.sqrt().to_string(),
    );
    s.insert("empirical_std_Ohm".into(), "0".into());
    Ok(R0Report {
        summary: s,
        trials: vec![(est.r0_ohm, est.e_v)],
    })
}

pub fn r0_report_from_monte_carlo(mc: &MonteCarloReport) -> R0Report {
    let c = &mc.config;
    let m = &mc.summary;
    let mut s = BTreeMap::new();
    s.insert("source".into(), "monte_carlo".into());
    s.insert("pulse_kind".into(), c.kind.name());
    s.insert("seed".into(), c.seed.to_string());
    s.insert("trials".into(), m.trials.to_string());
    s.insert("sigma_V".into(), c.sigma_v.to_string());
    s.insert("amplitude_A".into(), c.i_b_a.to_string());
    s.insert("r0_true_Ohm".into(), c.r0_true_ohm.to_string());
    s.insert("r0_hat_Ohm".into(), m.mean_r0_ohm.to_string());
    s.insert("e_hat_V".into(), m.mean_e_v.to_string());
    s.insert("empirical_std_Ohm".into(), m.std_r0_ohm.to_string());
    s.insert("empirical_var_Ohm2".into(), m.var_r0_ohm2.to_string());
    s.insert("crlb_var_Ohm2".into(), m.crlb_var_ohm2.to_string());
    s.insert("crlb_std_Ohm".into(), m.crlb_var_ohm2.sqrt().to_string());
    s.insert("var_to_crlb".into(), m.ratio.to_string());
    R0Report {
        summary: s,
        trials: mc.estimates.clone(),
    }
}

pub enum R0Source<'a> {
    Log { path: &'a Path, sigma_v: f64 },
    MonteCarlo(MonteCarloConfig),
}

pub fn cmd_estimate_r0(source: R0Source<'_>, out: &Outputs) -> Result<R0Report> {
    let report = match source {
        R0Source::Log { path, sigma_v } => r0_report_from_log(&read_log(path)?, sigma_v)?,
        R0Source::MonteCarlo(cfg) => {
            r0_report_from_monte_carlo(&monte_carlo(&cfg, Execution::default())?)
        }
    };
    write_text(&out.path(R0_REPORT_FILE), &emit_r0_report(&report))?;
    Ok(report)
}

/// Splits the fitted `R0h` with a resistance report and writes both
/// hysteresis series over the OCV branches.
pub fn cmd_hysteresis(
    log_path: &Path,
    params_path: &Path,
    r0_path: &Path,
    s_initial: f64,
    out: &Outputs,
) -> Result<HysteresisRecovery> {
    let log = read_log(log_path)?;
    let params_src = params_path.display().to_string();
    let params_file = parse_params(&read_text(params_path)?, &params_src)?;
    let r0_src = r0_path.display().to_string();
    let r0 = parse_r0_report(&read_text(r0_path)?, &r0_src)?;

    let ids = [
        (
            log_path.display().to_string(),
            log.cell_id().map(str::to_string),
        ),
        (params_src, params_file.cell_id.clone()),
        (r0_src.clone(), r0.cell_id().map(str::to_string)),
    ];
    let named: Vec<_> = ids
        .iter()
        .filter_map(|(src, id)| id.as_ref().map(|id| (src, id)))
        .collect();
    if let Some((first_src, first_id)) = named.first() {
        if let Some((src, id)) = named.iter().find(|(_, id)| id != first_id) {
            return Err(Error::CellMismatch {
                left: format!("{first_src} ({first_id})"),
                right: format!("{src} ({id})"),
            });
        }
    }

    let branches = log.ocv_branches()?;
    let cap = compute_capacity(&branches)?;
    let soc = coulomb_count(&branches, cap.qc_as, cap.qd_as, s_initial)?;
    let rec = recover_hysteresis(
        &branches,
        &soc.soc,
        &params_file.params()?,
        r0.r0_hat_ohm(&r0_src)?,
    )?;
    let mut meta = BTreeMap::new();
    if let Some((_, id)) = named.first() {
        meta.insert("cell_id".to_string(), id.to_string());
    }
    meta.insert("r0_hat_Ohm".into(), r0.r0_hat_ohm(&r0_src)?.to_string());
    meta.insert("r0h_Ohm".into(), params_file.r0h_ohm.to_string());
    write_text(&out.path(HYSTERESIS_FILE), &emit_hysteresis(&rec, meta))?;
    Ok(rec)
}
