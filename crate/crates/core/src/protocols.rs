//! Cycler protocols: CC-CV charging and the low-rate OCV test, run against
//! any [`CellBackend`].
//!
//! The inner control loop runs at `control_dt_s`. When a step crosses a
//! termination threshold the backend locates the crossing inside the step,
//! so phase end points do not depend on the control rate.

use crate::battery_model::SimulatedCell;
use crate::error::{Error, Result};
use crate::resistance::{generate_pulse, PulseKind, DEFAULT_PULSE_DT_S};
use crate::soc::{Mode, Record, TimeSeriesLog};

/// Width to which threshold crossings are located inside a control step.
pub const EVENT_TOLERANCE_S: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    Never,
    VoltageAtLeast(f64),
    VoltageAtMost(f64),
    /// The CV regulator's next current would drop below `i_sd_a`.
    CvCurrentBelow {
        v_set: f64,
        i_sd_a: f64,
        dt_s: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub dt_s: f64,
    pub voltage_v: f64,
    pub stopped: bool,
}

pub trait CellBackend {
    fn time_s(&self) -> f64;

    /// Applies `current_a` for up to `dt_s`, ending early at the first
    /// instant the stop condition holds.
    fn apply_until(&mut self, current_a: f64, dt_s: f64, stop: Stop) -> Result<StepReport>;

    /// Terminal voltage reading at zero current.
    fn rested_voltage(&mut self) -> f64;

    /// Current that pins the terminal voltage at `v_set` over the next step.
    fn cv_current(&self, v_set: f64, dt_s: f64) -> Result<f64>;

    /// True SOC, when the backend knows it.
    fn true_soc(&self) -> Option<f64> {
        None
    }

    fn cell_id(&self) -> String {
        String::from("cell")
    }
}

/// Smallest `tau` in `(0, dt]` with `hit(tau)`, given `hit(dt)`.
fn locate(dt_s: f64, hit: impl Fn(f64) -> Result<bool>) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, dt_s);
    while hi - lo > EVENT_TOLERANCE_S {
        let mid = 0.5 * (lo + hi);
        if hit(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

impl CellBackend for SimulatedCell {
    fn time_s(&self) -> f64 {
        self.state().t_s
    }

    fn apply_until(&mut self, current_a: f64, dt_s: f64, stop: Stop) -> Result<StepReport> {
        let noise = {
            let truth = self.truth().clone();
            truth.sample_noise(self.rng_mut())
        };
        let truth = self.truth();
        let start = *self.state();
        let full = truth.advance(&start, current_a, dt_s)?;
        let measured = full.voltage_v + noise;

        // voltage stops trigger on the reading, the CV stop on the regulator
        let (triggered, model_hit): (bool, Box<dyn Fn(f64) -> Result<bool> + '_>) = match stop {
            Stop::Never => (false, Box::new(|_| Ok(false))),
            Stop::VoltageAtLeast(v) => (
                measured >= v,
                Box::new(move |tau| Ok(truth.advance(&start, current_a, tau)?.voltage_v >= v)),
            ),
            Stop::VoltageAtMost(v) => (
                measured <= v,
                Box::new(move |tau| Ok(truth.advance(&start, current_a, tau)?.voltage_v <= v)),
            ),
            Stop::CvCurrentBelow {
                v_set,
                i_sd_a,
                dt_s: ctrl,
            } => {
                let hit = move |tau: f64| -> Result<bool> {
                    let s = truth.advance(&start, current_a, tau)?.state;
                    Ok(truth.cv_current(&s, v_set, ctrl)? < i_sd_a)
                };
                (hit(dt_s)?, Box::new(hit))
            }
        };

        let outcome = if triggered && model_hit(dt_s)? {
            let tau = locate(dt_s, &model_hit)?;
            truth.advance(&start, current_a, tau)?
        } else {
            full
        };
        drop(model_hit);
        let report = StepReport {
            dt_s: outcome.state.t_s - start.t_s,
            voltage_v: outcome.voltage_v + noise,
            stopped: triggered,
        };
        self.commit(&outcome);
        Ok(report)
    }

    fn rested_voltage(&mut self) -> f64 {
        self.measure_rested()
    }

    fn cv_current(&self, v_set: f64, dt_s: f64) -> Result<f64> {
        self.truth().cv_current(self.state(), v_set, dt_s)
    }

    fn true_soc(&self) -> Option<f64> {
        Some(self.state().soc_true)
    }

    fn cell_id(&self) -> String {
        self.truth().cell_id.clone()
    }
}

/// Collects records and, when available, the true SOC at each record.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    pub log: TimeSeriesLog,
    pub true_soc: Vec<f64>,
}

impl Recorder {
    fn record<B: CellBackend + ?Sized>(
        &mut self,
        cell: &B,
        i_a: f64,
        v_v: f64,
        mode: Mode,
    ) -> Result<()> {
        self.log.push(Record {
            t_s: cell.time_s(),
            i_a,
            v_v,
            mode,
        })?;
        if let Some(s) = cell.true_soc() {
            self.true_soc.push(s);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeConfig {
    pub i_cc_a: f64,
    pub i_sd_a: f64,
    pub ocv_max_v: f64,
    pub ocv_min_v: f64,
    pub r0_hat_ohm: f64,
    pub control_dt_s: f64,
    /// Length of the first step of a phase.
    pub step_sample_delay_s: f64,
    /// Per-phase time limit.
    pub max_phase_s: f64,
    /// Readings further than this past a voltage limit abort the run.
    pub overshoot_v: f64,
}

impl ChargeConfig {
    pub fn new(i_cc_a: f64, i_sd_a: f64, ocv_min_v: f64, ocv_max_v: f64, r0_hat_ohm: f64) -> Self {
        Self {
            i_cc_a,
            i_sd_a,
            ocv_max_v,
            ocv_min_v,
            r0_hat_ohm,
            control_dt_s: 1.0,
            step_sample_delay_s: 1e-4,
            max_phase_s: 48.0 * 3600.0,
            overshoot_v: 5e-3,
        }
    }

    /// `(OCV_max - OCV_min) / R0_hat`
    pub fn i_max_a(&self) -> f64 {
        (self.ocv_max_v - self.ocv_min_v) / self.r0_hat_ohm
    }

    /// `OCV_max - i_cc R0_hat`; a rested cell at or above this starts in CV.
    pub fn v_cv1(&self) -> f64 {
        self.ocv_max_v - self.i_cc_a * self.r0_hat_ohm
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("i_cc_A", self.i_cc_a),
            ("i_sd_A", self.i_sd_a),
            ("ocv_max_V", self.ocv_max_v),
            ("ocv_min_V", self.ocv_min_v),
            ("r0_hat_Ohm", self.r0_hat_ohm),
            ("control_dt_s", self.control_dt_s),
            ("step_sample_delay_s", self.step_sample_delay_s),
            ("max_phase_s", self.max_phase_s),
            ("overshoot_V", self.overshoot_v),
        ] {
            crate::error::ensure_finite(name, v)?;
        }
        if self.r0_hat_ohm <= 0.0 || self.ocv_max_v <= self.ocv_min_v {
            return Err(Error::invalid("need r0_hat > 0 and ocv_max > ocv_min"));
        }
        if !(0.0 < self.i_sd_a && self.i_sd_a < self.i_cc_a && self.i_cc_a <= self.i_max_a()) {
            return Err(Error::invalid(format!(
                "need 0 < i_sd ({}) < i_cc ({}) <= i_max ({})",
                self.i_sd_a,
                self.i_cc_a,
                self.i_max_a()
            )));
        }
        if self.control_dt_s <= 0.0 || self.step_sample_delay_s <= 0.0 || self.max_phase_s <= 0.0 {
            return Err(Error::invalid(
                "step lengths and time limits must be positive",
            ));
        }
        if self.overshoot_v < 0.0 {
            return Err(Error::invalid("overshoot_V must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargeOutcome {
    pub cc_skipped: bool,
    /// CV steps whose regulator current was clipped to `i_max`.
    pub clipped_steps: usize,
    pub duration_s: f64,
    pub final_current_a: f64,
}

/// Constant current until the reading reaches `OCV_max`, then constant
/// voltage until the current falls below `i_sd`. Every control step is logged.
pub fn cccv_charge<B: CellBackend + ?Sized>(
    cell: &mut B,
    cfg: &ChargeConfig,
) -> Result<(TimeSeriesLog, ChargeOutcome)> {
    let mut rec = Recorder::default();
    let out = cccv_into(cell, cfg, &mut rec)?;
    Ok((rec.log, out))
}

fn check_timeout(phase: &'static str, elapsed_s: f64, limit_s: f64) -> Result<()> {
    if elapsed_s > limit_s {
        return Err(Error::Timeout { phase, elapsed_s });
    }
    Ok(())
}

fn cccv_into<B: CellBackend + ?Sized>(
    cell: &mut B,
    cfg: &ChargeConfig,
    rec: &mut Recorder,
) -> Result<ChargeOutcome> {
    cfg.validate()?;
    let t0 = cell.time_s();
    let v0 = cell.rested_voltage();
    let cc_skipped = v0 >= cfg.v_cv1();

    if !cc_skipped {
        let mut dt = cfg.step_sample_delay_s;
        loop {
            let r = cell.apply_until(cfg.i_cc_a, dt, Stop::VoltageAtLeast(cfg.ocv_max_v))?;
            rec.record(cell, cfg.i_cc_a, r.voltage_v, Mode::Charge)?;
            if r.voltage_v > cfg.ocv_max_v + cfg.overshoot_v {
                return Err(Error::SafetyLimit {
                    phase: "cc charge",
                    voltage_v: r.voltage_v,
                    limit_v: cfg.ocv_max_v + cfg.overshoot_v,
                });
            }
            if r.stopped {
                break;
            }
            check_timeout("cc charge", cell.time_s() - t0, cfg.max_phase_s)?;
            dt = cfg.control_dt_s;
        }
    }

    let cv = cv_hold_into(cell, cfg, rec)?;
    Ok(ChargeOutcome {
        cc_skipped,
        clipped_steps: cv.0,
        duration_s: cell.time_s() - t0,
        final_current_a: cv.1,
    })
}

/// Holds `OCV_max` until the regulator current drops below `i_sd`.
pub fn cv_hold<B: CellBackend + ?Sized>(
    cell: &mut B,
    cfg: &ChargeConfig,
) -> Result<(TimeSeriesLog, usize)> {
    cfg.validate()?;
    let mut rec = Recorder::default();
    let (clipped, _) = cv_hold_into(cell, cfg, &mut rec)?;
    Ok((rec.log, clipped))
}

/// Returns (clipped steps, last regulator current).
fn cv_hold_into<B: CellBackend + ?Sized>(
    cell: &mut B,
    cfg: &ChargeConfig,
    rec: &mut Recorder,
) -> Result<(usize, f64)> {
    let t0 = cell.time_s();
    let dt = cfg.control_dt_s;
    let i_max = cfg.i_max_a();
    let mut clipped = 0;
    loop {
        let mut i = cell.cv_current(cfg.ocv_max_v, dt)?;
        if i < cfg.i_sd_a {
            return Ok((clipped, i));
        }
        if i > i_max {
            i = i_max;
            clipped += 1;
        }
        let stop = Stop::CvCurrentBelow {
            v_set: cfg.ocv_max_v,
            i_sd_a: cfg.i_sd_a,
            dt_s: dt,
        };
        let r = cell.apply_until(i, dt, stop)?;
        rec.record(cell, i, r.voltage_v, Mode::Charge)?;
        if r.stopped {
            return Ok((clipped, cell.cv_current(cfg.ocv_max_v, dt)?));
        }
        check_timeout("cv charge", cell.time_s() - t0, cfg.max_phase_s)?;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseTestConfig {
    pub enabled: bool,
    pub kind: PulseKind,
    pub amplitude_a: f64,
    pub dt_s: f64,
}

impl Default for PulseTestConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kind: PulseKind::DischargeAtFull,
            amplitude_a: 1.0,
            dt_s: DEFAULT_PULSE_DT_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcvTestConfig {
    /// C-rate divisor: the branches run at `capacity / N` per hour.
    pub n: f64,
    pub temperature_c: f64,
    pub rated_capacity_as: f64,
    pub ocv_min_v: f64,
    pub ocv_max_v: f64,
    /// Resistance estimate used by the CC-CV precharge.
    pub r0_hat_ohm: f64,
    pub sample_dt_s: f64,
    pub rest_s: f64,
    pub control_dt_s: f64,
    pub step_sample_delay_s: f64,
    pub overshoot_v: f64,
    /// Time limit per branch, as a multiple of the nominal `N` hours.
    pub branch_guard_factor: f64,
    pub pulse: PulseTestConfig,
}

impl OcvTestConfig {
    pub fn new(
        n: f64,
        rated_capacity_as: f64,
        ocv_min_v: f64,
        ocv_max_v: f64,
        r0_hat_ohm: f64,
    ) -> Self {
        Self {
            n,
            temperature_c: 25.0,
            rated_capacity_as,
            ocv_min_v,
            ocv_max_v,
            r0_hat_ohm,
            sample_dt_s: 60.0,
            rest_s: 3600.0,
            control_dt_s: 1.0,
            step_sample_delay_s: 1e-4,
            overshoot_v: 5e-3,
            branch_guard_factor: 2.0,
            pulse: PulseTestConfig::default(),
        }
    }

    pub fn branch_current_a(&self) -> f64 {
        self.rated_capacity_as / (self.n * 3600.0)
    }

    pub fn one_c_a(&self) -> f64 {
        self.rated_capacity_as / 3600.0
    }

    /// The CC-CV precharge: CC-CV-Charge(1C, C/N).
    pub fn precharge(&self) -> ChargeConfig {
        let mut c = ChargeConfig::new(
            self.one_c_a(),
            self.branch_current_a(),
            self.ocv_min_v,
            self.ocv_max_v,
            self.r0_hat_ohm,
        );
        c.control_dt_s = self.control_dt_s;
        c.step_sample_delay_s = self.step_sample_delay_s;
        c.overshoot_v = self.overshoot_v;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n > 0.0 && self.n.is_finite()) {
            return Err(Error::invalid(format!(
                "N must be positive, got {}",
                self.n
            )));
        }
        if !(self.sample_dt_s > 0.0 && self.control_dt_s > 0.0 && self.step_sample_delay_s > 0.0) {
            return Err(Error::invalid(
                "sample, control and delay intervals must be positive",
            ));
        }
        let ratio = self.sample_dt_s / self.control_dt_s;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::invalid(
                "sample_dt_s must be a whole multiple of control_dt_s",
            ));
        }
        if !(self.rest_s >= 0.0 && self.branch_guard_factor > 0.0) {
            return Err(Error::invalid(
                "rest_s must be non-negative and the guard factor positive",
            ));
        }
        self.precharge().validate()?;
        if self.pulse.enabled {
            generate_pulse(self.pulse.kind, self.pulse.amplitude_a, self.pulse.dt_s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OcvTestOutcome {
    pub log: TimeSeriesLog,
    /// True SOC at every record, when the backend exposes it.
    pub true_soc: Vec<f64>,
    pub charge: ChargeOutcome,
}

fn rest_into<B: CellBackend + ?Sized>(
    cell: &mut B,
    rest_s: f64,
    sample_dt_s: f64,
    rec: &mut Recorder,
) -> Result<()> {
    let mut left = rest_s;
    while left > 0.0 {
        let dt = left.min(sample_dt_s);
        let r = cell.apply_until(0.0, dt, Stop::Never)?;
        rec.record(cell, 0.0, r.voltage_v, Mode::Rest)?;
        left -= dt;
        if left < EVENT_TOLERANCE_S {
            break;
        }
    }
    Ok(())
}

fn branch_into<B: CellBackend + ?Sized>(
    cell: &mut B,
    cfg: &OcvTestConfig,
    current_a: f64,
    mode: Mode,
    rec: &mut Recorder,
) -> Result<()> {
    let (phase, stop) = match mode {
        Mode::Discharge => ("discharge", Stop::VoltageAtMost(cfg.ocv_min_v)),
        _ => ("charge", Stop::VoltageAtLeast(cfg.ocv_max_v)),
    };
    let decimation = (cfg.sample_dt_s / cfg.control_dt_s).round() as u64;
    let guard_s = cfg.branch_guard_factor * cfg.n * 3600.0;
    let t0 = cell.time_s();
    let mut dt = cfg.step_sample_delay_s;
    let mut k: u64 = 0;
    loop {
        let r = cell.apply_until(current_a, dt, stop)?;
        let beyond = match mode {
            Mode::Discharge => r.voltage_v < cfg.ocv_min_v - cfg.overshoot_v,
            _ => r.voltage_v > cfg.ocv_max_v + cfg.overshoot_v,
        };
        if r.stopped || k % decimation == 0 {
            rec.record(cell, current_a, r.voltage_v, mode)?;
        }
        if beyond {
            let limit_v = match mode {
                Mode::Discharge => cfg.ocv_min_v - cfg.overshoot_v,
                _ => cfg.ocv_max_v + cfg.overshoot_v,
            };
            return Err(Error::SafetyLimit {
                phase,
                voltage_v: r.voltage_v,
                limit_v,
            });
        }
        if r.stopped {
            return Ok(());
        }
        check_timeout(phase, cell.time_s() - t0, guard_s)?;
        dt = cfg.control_dt_s;
        k += 1;
    }
}

/// Precharge, rest, discharge and charge branches at C/N, rest, then the
/// resistance pulse test.
pub fn low_rate_ocv_test<B: CellBackend + ?Sized>(
    cell: &mut B,
    cfg: &OcvTestConfig,
) -> Result<OcvTestOutcome> {
    cfg.validate()?;
    let mut rec = Recorder::default();
    rec.log.metadata.insert("cell_id".into(), cell.cell_id());
    rec.log
        .metadata
        .insert("temperature_C".into(), format!("{}", cfg.temperature_c));
    rec.log.metadata.insert("N".into(), format!("{}", cfg.n));

    let charge = cccv_into(cell, &cfg.precharge(), &mut rec)?;
    rest_into(cell, cfg.rest_s, cfg.sample_dt_s, &mut rec)?;
    let i = cfg.branch_current_a();
    branch_into(cell, cfg, -i, Mode::Discharge, &mut rec)?;
    branch_into(cell, cfg, i, Mode::Charge, &mut rec)?;
    rest_into(cell, cfg.rest_s, cfg.sample_dt_s, &mut rec)?;

    if cfg.pulse.enabled {
        let profile = generate_pulse(cfg.pulse.kind, cfg.pulse.amplitude_a, cfg.pulse.dt_s)?;
        for &ip in &profile.samples {
            let r = cell.apply_until(ip, profile.dt_s, Stop::Never)?;
            rec.record(cell, ip, r.voltage_v, Mode::Pulse)?;
        }
    }
    Ok(OcvTestOutcome {
        log: rec.log,
        true_soc: rec.true_soc,
        charge,
    })
}
