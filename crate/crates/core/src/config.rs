//! Run configuration: a flat TOML document with one section per concern.
//!
//! Only `[cell] capacity_As` is required; everything else falls back to the
//! default 4 Ah cell and the standard C/64 test.

use serde::{Deserialize, Serialize};

use crate::battery_model::{
    BatteryGroundTruth, GenerativeCombined3, Hysteresis, TrueOcv, DEFAULT_TABLE_POINTS,
    REFERENCE_CELL_K,
};
use crate::error::{Error, Result};
use crate::interp::PiecewiseLinear;
use crate::io::{emit_versioned_toml, parse_versioned_toml, toml_err};
use crate::ocv_model::{OcvParameters, DEFAULT_EPSILON};
use crate::protocols::{OcvTestConfig, PulseTestConfig};
use crate::resistance::{MonteCarloConfig, PulseKind, DEFAULT_PULSE_DT_S};

pub const DEFAULT_SEED: u64 = 0;

/// The shipped default configuration.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

fn d_cell_id() -> String {
    "default-4Ah".into()
}
fn d_r_ohmic() -> f64 {
    0.05
}
fn d_r_sei() -> f64 {
    0.03
}
fn d_c_sei() -> f64 {
    500.0
}
fn d_r_ct() -> f64 {
    0.02
}
fn d_c_dl() -> f64 {
    20_000.0
}
fn d_hysteresis() -> String {
    "resistive".into()
}
fn d_hysteresis_value() -> f64 {
    0.02
}
fn d_noise() -> f64 {
    2e-4
}
fn d_initial_soc() -> f64 {
    0.5
}
fn d_true_ocv() -> String {
    "table".into()
}
fn d_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn d_k() -> [f64; 8] {
    REFERENCE_CELL_K
}
fn d_window() -> [f64; 2] {
    [0.02, 0.98]
}
fn d_n() -> f64 {
    64.0
}
fn d_temperature() -> f64 {
    25.0
}
fn d_sample_dt() -> f64 {
    60.0
}
fn d_rest() -> f64 {
    3600.0
}
fn d_control_dt() -> f64 {
    1.0
}
fn d_delay() -> f64 {
    1e-4
}
fn d_overshoot() -> f64 {
    5e-3
}
fn d_guard() -> f64 {
    2.0
}
fn d_true() -> bool {
    true
}
fn d_pulse_kind() -> String {
    "discharge_at_full".into()
}
fn d_one() -> usize {
    1
}
fn d_amplitude() -> f64 {
    1.0
}
fn d_pulse_dt() -> f64 {
    DEFAULT_PULSE_DT_S
}
fn d_table_n() -> usize {
    201
}
fn d_s_initial() -> f64 {
    1.0
}
fn d_trials() -> usize {
    100_000
}
fn d_sigma() -> f64 {
    2e-4
}
fn d_r0_true() -> f64 {
    0.05
}
fn d_e_true() -> f64 {
    3.7
}
fn d_out_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    #[serde(default = "d_cell_id")]
    pub cell_id: String,
    #[serde(rename = "capacity_As")]
    pub capacity_as: f64,
    #[serde(rename = "r_ohmic_Ohm", default = "d_r_ohmic")]
    pub r_ohmic_ohm: f64,
    #[serde(rename = "r_sei_Ohm", default = "d_r_sei")]
    pub r_sei_ohm: f64,
    #[serde(rename = "c_sei_F", default = "d_c_sei")]
    pub c_sei_f: f64,
    #[serde(rename = "r_ct_Ohm", default = "d_r_ct")]
    pub r_ct_ohm: f64,
    #[serde(rename = "c_dl_F", default = "d_c_dl")]
    pub c_dl_f: f64,
    /// `resistive` (value in Ohm) or `constant_magnitude` (value in V).
    #[serde(default = "d_hysteresis")]
    pub hysteresis: String,
    #[serde(default = "d_hysteresis_value")]
    pub hysteresis_value: f64,
    /// `table` or `combined3`.
    #[serde(default = "d_true_ocv")]
    pub true_ocv: String,
    /// Omitted limits default to 2.9 / 4.18 V for a table curve, and to the
    /// window edges offset by the branch drop for a Combined+3 curve.
    #[serde(rename = "ocv_min_V", default, skip_serializing_if = "Option::is_none")]
    pub ocv_min_v: Option<f64>,
    #[serde(rename = "ocv_max_V", default, skip_serializing_if = "Option::is_none")]
    pub ocv_max_v: Option<f64>,
    #[serde(rename = "noise_std_V", default = "d_noise")]
    pub noise_std_v: f64,
    #[serde(default = "d_initial_soc")]
    pub initial_soc: f64,
    #[serde(default)]
    pub limits_outside_curve: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcvTableSection {
    pub soc: Vec<f64>,
    #[serde(rename = "ocv_V")]
    pub ocv_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Combined3Section {
    #[serde(default = "d_k")]
    pub k: [f64; 8],
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_window")]
    pub soc_window: [f64; 2],
}

impl Default for Combined3Section {
    fn default() -> Self {
        Self {
            k: d_k(),
            epsilon: d_epsilon(),
            soc_window: d_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(rename = "N", default = "d_n")]
    pub n: f64,
    #[serde(rename = "temperature_C", default = "d_temperature")]
    pub temperature_c: f64,
    /// Defaults to the cell's R0 plus resistive hysteresis.
    #[serde(
        rename = "r0_hat_Ohm",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub r0_hat_ohm: Option<f64>,
    #[serde(default = "d_sample_dt")]
    pub sample_dt_s: f64,
    #[serde(default = "d_rest")]
    pub rest_s: f64,
    #[serde(default = "d_control_dt")]
    pub control_dt_s: f64,
    #[serde(default = "d_delay")]
    pub step_sample_delay_s: f64,
    #[serde(rename = "overshoot_V", default = "d_overshoot")]
    pub overshoot_v: f64,
    #[serde(default = "d_guard")]
    pub branch_guard_factor: f64,
    #[serde(default = "d_true")]
    pub pulse_enabled: bool,
    #[serde(default = "d_pulse_kind")]
    pub pulse_kind: String,
    #[serde(default = "d_one")]
    pub pulse_cycles: usize,
    #[serde(rename = "pulse_amplitude_A", default = "d_amplitude")]
    pub pulse_amplitude_a: f64,
    #[serde(default = "d_pulse_dt")]
    pub pulse_dt_s: f64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        toml::from_str("").expect("all protocol fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_table_n")]
    pub table_n: usize,
    #[serde(default = "d_s_initial")]
    pub s_initial: f64,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            epsilon: d_epsilon(),
            table_n: d_table_n(),
            s_initial: d_s_initial(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    #[serde(default = "d_trials")]
    pub trials: usize,
    #[serde(default = "d_pulse_kind")]
    pub pulse_kind: String,
    #[serde(default = "d_one")]
    pub cycles: usize,
    #[serde(rename = "sigma_V", default = "d_sigma")]
    pub sigma_v: f64,
    #[serde(rename = "amplitude_A", default = "d_amplitude")]
    pub amplitude_a: f64,
    #[serde(default = "d_pulse_dt")]
    pub dt_s: f64,
    #[serde(rename = "r0_true_Ohm", default = "d_r0_true")]
    pub r0_true_ohm: f64,
    #[serde(rename = "e_true_V", default = "d_e_true")]
    pub e_true_v: f64,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        toml::from_str("").expect("all Monte Carlo fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "d_out_dir")]
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: d_out_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub cell: CellSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocv_table: Option<OcvTableSection>,
    #[serde(default)]
    pub ocv_combined3: Combined3Section,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub monte_carlo: MonteCarloSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses a config document. The `# format=1` line is optional here so
    /// hand-written configs stay short; a different version is rejected.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or("").trim();
        let cfg: RunConfig = if first.starts_with("# format=") {
            parse_versioned_toml(text, source)?
        } else {
            toml::from_str(text).map_err(|e| toml_err(text, source, e))?
        };
        cfg.validate().map_err(|e| Error::Parse {
            source_name: source.into(),
            line: None,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn default_config() -> Self {
        Self::parse(DEFAULT_CONFIG_TOML, "default config").expect("shipped default config parses")
    }

    pub fn emit(&self) -> String {
        emit_versioned_toml(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn validate(&self) -> Result<()> {
        self.ground_truth()?.validate()?;
        self.ocv_test_config()?.validate()?;
        self.monte_carlo_config(self.seed(), None)?;
        if !(0.0..=1.0).contains(&self.cell.initial_soc) {
            return Err(Error::invalid("cell.initial_soc must lie in [0, 1]"));
        }
        if self.estimation.table_n < 2 {
            return Err(Error::invalid("estimation.table_n must be at least 2"));
        }
        Ok(())
    }

    fn hysteresis(&self) -> Result<Hysteresis> {
        match self.cell.hysteresis.as_str() {
            "resistive" => Ok(Hysteresis::Resistive {
                r_h_ohm: self.cell.hysteresis_value,
            }),
            "constant_magnitude" => Ok(Hysteresis::ConstantMagnitude {
                magnitude_v: self.cell.hysteresis_value,
            }),
            "none" => Ok(Hysteresis::none()),
            other => Err(Error::invalid(format!(
                "cell.hysteresis must be resistive, constant_magnitude or none, got {other:?}"
            ))),
        }
    }

    pub fn generative_curve(&self) -> Option<GenerativeCombined3> {
        (self.cell.true_ocv == "combined3").then(|| GenerativeCombined3 {
            k: self.ocv_combined3.k,
            epsilon: self.ocv_combined3.epsilon,
            soc_window: (
                self.ocv_combined3.soc_window[0],
                self.ocv_combined3.soc_window[1],
            ),
        })
    }

    fn r0_total(&self) -> f64 {
        self.cell.r_ohmic_ohm + self.cell.r_sei_ohm + self.cell.r_ct_ohm
    }

    pub fn branch_current_a(&self) -> f64 {
        self.cell.capacity_as / (self.protocol.n * 3600.0)
    }

    /// `R0h` the low-rate fit should see: R0 plus the resistive hysteresis,
    /// or plus `M / I` for constant-magnitude hysteresis at branch current `I`.
    pub fn expected_r0h_ohm(&self) -> Result<f64> {
        Ok(self.r0_total()
            + match self.hysteresis()? {
                Hysteresis::Resistive { r_h_ohm } => r_h_ohm,
                Hysteresis::ConstantMagnitude { magnitude_v } => {
                    magnitude_v / self.branch_current_a()
                }
            })
    }

    /// Limits lie exactly one branch drop outside the generative window edges.
    fn window_limits(&self) -> bool {
        self.generative_curve().is_some()
            && self.cell.ocv_min_v.is_none()
            && self.cell.ocv_max_v.is_none()
    }

    pub fn ground_truth(&self) -> Result<BatteryGroundTruth> {
        let c = &self.cell;
        let true_ocv = match c.true_ocv.as_str() {
            "table" => TrueOcv::Table(match &self.ocv_table {
                Some(t) => PiecewiseLinear::new(t.soc.clone(), t.ocv_v.clone())?,
                None => GenerativeCombined3::reference().tabulate(DEFAULT_TABLE_POINTS)?,
            }),
            "combined3" => TrueOcv::Combined3(self.generative_curve().expect("combined3 selected")),
            other => {
                return Err(Error::invalid(format!(
                    "cell.true_ocv must be table or combined3, got {other:?}"
                )))
            }
        };
        let (ocv_min_v, ocv_max_v, outside) = if self.window_limits() {
            let g = self.generative_curve().expect("combined3 selected");
            let drop = self.branch_current_a() * self.expected_r0h_ohm()?;
            (
                g.eval(g.soc_window.0) - drop,
                g.eval(g.soc_window.1) + drop,
                true,
            )
        } else {
            (
                c.ocv_min_v.unwrap_or(2.9),
                c.ocv_max_v.unwrap_or(4.18),
                c.limits_outside_curve,
            )
        };
        Ok(BatteryGroundTruth {
            cell_id: c.cell_id.clone(),
            capacity_as: c.capacity_as,
            r_ohmic_ohm: c.r_ohmic_ohm,
            r_sei_ohm: c.r_sei_ohm,
            c_sei_f: c.c_sei_f,
            r_ct_ohm: c.r_ct_ohm,
            c_dl_f: c.c_dl_f,
            hysteresis: self.hysteresis()?,
            true_ocv,
            ocv_min_v,
            ocv_max_v,
            noise_std_v: c.noise_std_v,
            limits_outside_curve: outside,
        })
    }

    /// Parameters the OCV fit should recover: known only for a Combined+3
    /// truth whose limits were derived from its window.
    pub fn expected_parameters(&self) -> Result<Option<OcvParameters>> {
        if !self.window_limits() {
            return Ok(None);
        }
        let g = self.generative_curve().expect("combined3 selected");
        Ok(Some(OcvParameters::new(
            g.k,
            self.expected_r0h_ohm()?,
            g.epsilon,
        )?))
    }

    pub fn ocv_test_config(&self) -> Result<OcvTestConfig> {
        let p = &self.protocol;
        let truth_limits = self.ground_truth()?;
        let r0_hat = match p.r0_hat_ohm {
            Some(r) => r,
            None => {
                self.r0_total()
                    + match self.hysteresis()? {
                        Hysteresis::Resistive { r_h_ohm } => r_h_ohm,
                        Hysteresis::ConstantMagnitude { .. } => 0.0,
                    }
            }
        };
        let mut cfg = OcvTestConfig::new(
            p.n,
            self.cell.capacity_as,
            truth_limits.ocv_min_v,
            truth_limits.ocv_max_v,
            r0_hat,
        );
        cfg.temperature_c = p.temperature_c;
        cfg.sample_dt_s = p.sample_dt_s;
        cfg.rest_s = p.rest_s;
        cfg.control_dt_s = p.control_dt_s;
        cfg.step_sample_delay_s = p.step_sample_delay_s;
        cfg.overshoot_v = p.overshoot_v;
        cfg.branch_guard_factor = p.branch_guard_factor;
        cfg.pulse = PulseTestConfig {
            enabled: p.pulse_enabled,
            kind: PulseKind::parse(&p.pulse_kind, p.pulse_cycles)?,
            amplitude_a: p.pulse_amplitude_a,
            dt_s: p.pulse_dt_s,
        };
        Ok(cfg)
    }

    pub fn monte_carlo_config(&self, seed: u64, trials: Option<usize>) -> Result<MonteCarloConfig> {
        let m = &self.monte_carlo;
        Ok(MonteCarloConfig {
            kind: PulseKind::parse(&m.pulse_kind, m.cycles)?,
            i_b_a: m.amplitude_a,
            dt_s: m.dt_s,
            sigma_v: m.sigma_v,
            r0_true_ohm: m.r0_true_ohm,
            e_true_v: m.e_true_v,
            trials: trials.unwrap_or(m.trials),
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_matches_the_default_cell() {
        let cfg = RunConfig::default_config();
        let t = cfg.ground_truth().unwrap();
        let d = BatteryGroundTruth::default_4ah();
        assert_eq!(t.capacity_as, d.capacity_as);
        assert_eq!(t.r_ohmic_ohm, d.r_ohmic_ohm);
        assert_eq!(t.hysteresis, d.hysteresis);
        assert_eq!(t.true_ocv, d.true_ocv);
        assert_eq!((t.ocv_min_v, t.ocv_max_v), (d.ocv_min_v, d.ocv_max_v));
        assert_eq!(cfg.ocv_test_config().unwrap().n, 64.0);
    }

    #[test]
    fn minimal_config_needs_only_capacity() {
        let cfg = RunConfig::parse("[cell]\ncapacity_As = 14400.0\n", "mini").unwrap();
        assert_eq!(cfg.seed(), DEFAULT_SEED);
        assert_eq!(cfg.estimation.table_n, 201);
        assert_eq!(cfg.protocol.sample_dt_s, 60.0);
    }

    #[test]
    fn missing_capacity_is_named() {
        let err = RunConfig::parse("seed = 3\n[cell]\nr_ohmic_Ohm = 0.1\n", "c.toml").unwrap_err();
        assert_eq!(err.code(), "E_PARSE");
        assert!(err.to_string().contains("capacity"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_report_lines() {
        match RunConfig::parse(
            "[cell]\ncapacity_As = 14400.0\n\n[protocol]\nN = \"many\"\n",
            "c.toml",
        ) {
            Err(Error::Parse { line: Some(5), .. }) => {}
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("[cell]\ncapacity_As = 14400.0\ncapacity = 1.0\n", "c.toml") {
            Err(Error::Parse {
                line: Some(3),
                message,
                ..
            }) => assert!(message.contains("capacity")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_are_reported() {
        assert!(RunConfig::parse("[cell]\ncapacity_As = -1.0\n", "c").is_err());
        assert!(
            RunConfig::parse("[cell]\ncapacity_As = 14400.0\nhysteresis = \"odd\"\n", "c").is_err()
        );
        assert!(RunConfig::parse(
            "[cell]\ncapacity_As = 14400.0\n[protocol]\npulse_kind = \"x\"\n",
            "c"
        )
        .is_err());
    }

    #[test]
    fn generative_window_limits() {
        let text = "[cell]\ncapacity_As = 14400.0\nr_sei_Ohm = 0.0\nr_ct_Ohm = 0.0\nr_ohmic_Ohm = 0.1\ntrue_ocv = \"combined3\"\n";
        let cfg = RunConfig::parse(text, "g").unwrap();
        let t = cfg.ground_truth().unwrap();
        let g = cfg.generative_curve().unwrap();
        let drop = 0.0625 * 0.12;
        assert!((t.ocv_min_v - (g.eval(0.02) - drop)).abs() < 1e-15);
        assert!((t.ocv_max_v - (g.eval(0.98) + drop)).abs() < 1e-15);
        let p = cfg.expected_parameters().unwrap().unwrap();
        assert_eq!(p.k, REFERENCE_CELL_K);
        assert!((p.r0h_ohm - 0.12).abs() < 1e-15);
    }

    #[test]
    fn emitted_config_parses_back() {
        let cfg = RunConfig::default_config();
        assert_eq!(RunConfig::parse(&cfg.emit(), "e").unwrap(), cfg);
    }
}
