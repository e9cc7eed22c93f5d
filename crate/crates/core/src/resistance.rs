//! Pulse-based internal resistance estimation: the `[R0, E]` least-squares
//! estimator, its Cramér-Rao bound, Monte Carlo studies and hysteresis
//! recovery.

use rand_distr::{Distribution, Normal};

use crate::battery_model::{BatteryGroundTruth, Hysteresis};
use crate::error::{ensure_finite, Error, Result};
use crate::ocv_model::{evaluate_ocv_lenient, OcvParameters};
use crate::parallel::{map_indexed, Execution};
use crate::rng::{stream, Subsystem};
use crate::soc::TimeSeriesLog;

/// Reproduces an SOC step of 1 -> 0.9962 over four 1 A samples on a 4 Ah cell.
pub const DEFAULT_PULSE_DT_S: f64 = 13.68;

/// Samples per pulse cycle: four on, four off (or four each way).
pub const SAMPLES_PER_CYCLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseKind {
    /// `-I_b` for four samples, then rest.
    DischargeAtFull,
    /// `+I_b` for four samples, then rest.
    ChargeAtEmpty,
    /// `m` cycles of `+I_b` x4 then `-I_b` x4.
    OptimizedAlternating { cycles: usize },
}

impl PulseKind {
    pub fn name(&self) -> String {
        match self {
            PulseKind::DischargeAtFull => "discharge_at_full".into(),
            PulseKind::ChargeAtEmpty => "charge_at_empty".into(),
            PulseKind::OptimizedAlternating { cycles } => {
                format!("optimized_alternating_m{cycles}")
            }
        }
    }

    /// Parses `discharge_at_full`, `charge_at_empty` or `optimized_alternating`
    /// (the latter with `cycles`).
    pub fn parse(name: &str, cycles: usize) -> Result<Self> {
        match name {
            "discharge_at_full" => Ok(PulseKind::DischargeAtFull),
            "charge_at_empty" => Ok(PulseKind::ChargeAtEmpty),
            "optimized_alternating" => Ok(PulseKind::OptimizedAlternating { cycles }),
            other => Err(Error::invalid(format!(
                "unknown pulse kind {other:?} (expected discharge_at_full, charge_at_empty or optimized_alternating)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseProfile {
    pub samples: Vec<f64>,
    pub dt_s: f64,
    pub kind: PulseKind,
}

pub fn generate_pulse(kind: PulseKind, i_b_a: f64, dt_s: f64) -> Result<PulseProfile> {
    if !(i_b_a > 0.0 && i_b_a.is_finite()) {
        return Err(Error::invalid(format!(
            "pulse amplitude must be positive, got {i_b_a}"
        )));
    }
    if !(dt_s > 0.0 && dt_s.is_finite()) {
        return Err(Error::invalid(format!(
            "pulse sample interval must be positive, got {dt_s}"
        )));
    }
    let half = SAMPLES_PER_CYCLE / 2;
    let samples = match kind {
        PulseKind::DischargeAtFull => [vec![-i_b_a; half], vec![0.0; half]].concat(),
        PulseKind::ChargeAtEmpty => [vec![i_b_a; half], vec![0.0; half]].concat(),
        PulseKind::OptimizedAlternating { cycles } => {
            if cycles == 0 {
                return Err(Error::invalid(
                    "alternating profile needs at least one cycle",
                ));
            }
            let block = [vec![i_b_a; half], vec![-i_b_a; half]].concat();
            block.repeat(cycles)
        }
    };
    Ok(PulseProfile {
        samples,
        dt_s,
        kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResistanceEstimate {
    pub r0_ohm: f64,
    pub e_v: f64,
    /// CRLB for `R0` at the noise level supplied to the estimator.
    pub predicted_var_ohm2: f64,
    pub n_samples: usize,
}

/// `Σ(i - ī)^2`, equal to `Σi^2 - (Σi)^2 / L`.
fn centered_sum_of_squares(currents: &[f64]) -> Result<f64> {
    if currents.len() < 2 {
        return Err(Error::invalid("need at least two pulse samples"));
    }
    for i in currents {
        ensure_finite("current", *i)?;
    }
    let n = currents.len() as f64;
    let mean = currents.iter().sum::<f64>() / n;
    let sxx: f64 = currents.iter().map(|i| (i - mean).powi(2)).sum();
    let scale: f64 = currents.iter().map(|i| i * i).sum();
    if !(sxx > 1e-12 * scale) {
        return Err(Error::IllConditioned {
            condition: f64::INFINITY,
        });
    }
    Ok(sxx)
}

/// `σ^2 / (Σi^2 - (Σi)^2 / L)`.
pub fn crlb_variance(currents: &[f64], sigma_v: f64) -> Result<f64> {
    ensure_finite("sigma", sigma_v)?;
    Ok(sigma_v * sigma_v / centered_sum_of_squares(currents)?)
}

/// Least-squares fit of `z = i R0 + E`. The intercept column is
/// orthogonalized out first (one Gram-Schmidt step, i.e. a QR of `[1, i]`),
/// which avoids forming the normal equations.
pub fn estimate_r0(currents: &[f64], voltages: &[f64], sigma_v: f64) -> Result<ResistanceEstimate> {
    if currents.len() != voltages.len() {
        return Err(Error::invalid(format!(
            "{} currents but {} voltages",
            currents.len(),
            voltages.len()
        )));
    }
    let sxx = centered_sum_of_squares(currents)?;
    for v in voltages {
        ensure_finite("voltage", *v)?;
    }
    let n = currents.len() as f64;
    let i_mean = currents.iter().sum::<f64>() / n;
    let z_mean = voltages.iter().sum::<f64>() / n;
    let sxz: f64 = currents
        .iter()
        .zip(voltages)
        .map(|(i, z)| (i - i_mean) * (z - z_mean))
        .sum();
    let r0 = sxz / sxx;
    Ok(ResistanceEstimate {
        r0_ohm: r0,
        e_v: z_mean - r0 * i_mean,
        predicted_var_ohm2: crlb_variance(currents, sigma_v)?,
        n_samples: currents.len(),
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct RunningStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloConfig {
    pub kind: PulseKind,
    pub i_b_a: f64,
    pub dt_s: f64,
    pub sigma_v: f64,
    pub r0_true_ohm: f64,
    pub e_true_v: f64,
    pub trials: usize,
    pub seed: u64,
}

impl MonteCarloConfig {
    pub fn new(kind: PulseKind, sigma_v: f64, trials: usize, seed: u64) -> Self {
        Self {
            kind,
            i_b_a: 1.0,
            dt_s: DEFAULT_PULSE_DT_S,
            sigma_v,
            r0_true_ohm: 0.05,
            e_true_v: 3.7,
            trials,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSummary {
    pub trials: usize,
    pub mean_r0_ohm: f64,
    pub std_r0_ohm: f64,
    pub var_r0_ohm2: f64,
    pub mean_e_v: f64,
    pub crlb_var_ohm2: f64,
    /// Empirical variance over CRLB; zero when the bound is zero.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub config: MonteCarloConfig,
    /// `(R0_hat, E_hat)` per trial, in trial order.
    pub estimates: Vec<(f64, f64)>,
    pub summary: MonteCarloSummary,
}

/// Repeats the pulse experiment on `z = E + i R0 + noise`. Trial `t` draws
/// from its own stream, so the result does not depend on scheduling.
pub fn monte_carlo(config: &MonteCarloConfig, exec: Execution) -> Result<MonteCarloReport> {
    if config.trials == 0 {
        return Err(Error::invalid("Monte Carlo needs at least one trial"));
    }
    ensure_finite("sigma", config.sigma_v)?;
    if config.sigma_v < 0.0 {
        return Err(Error::invalid("sigma must be non-negative"));
    }
    let profile = generate_pulse(config.kind, config.i_b_a, config.dt_s)?;
    let currents = &profile.samples;
    let crlb = crlb_variance(currents, config.sigma_v)?;
    let noise = Normal::new(0.0, config.sigma_v).map_err(|e| Error::invalid(e.to_string()))?;

    let results = map_indexed(config.trials, exec, |t| {
        let mut rng = stream(config.seed, Subsystem::PulseMonteCarlo, t as u64);
        let z: Vec<f64> = currents
            .iter()
            .map(|i| config.e_true_v + i * config.r0_true_ohm + noise.sample(&mut rng))
            .collect();
        estimate_r0(currents, &z, config.sigma_v).map(|e| (e.r0_ohm, e.e_v))
    });
    let estimates: Vec<(f64, f64)> = results.into_iter().collect::<Result<_>>()?;

    let mut r0 = RunningStats::default();
    let mut e = RunningStats::default();
    for (r, ev) in &estimates {
        r0.push(*r);
        e.push(*ev);
    }
    let var = r0.variance();
    Ok(MonteCarloReport {
        config: *config,
        estimates,
        summary: MonteCarloSummary {
            trials: config.trials,
            mean_r0_ohm: r0.mean,
            std_r0_ohm: var.sqrt(),
            var_r0_ohm2: var,
            mean_e_v: e.mean,
            crlb_var_ohm2: crlb,
            ratio: if crlb > 0.0 { var / crlb } else { 0.0 },
        },
    })
}

/// How far the constant-EMF assumption is off when a pulse profile is run
/// on a real OCV curve, and what that does to `R0_hat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmfAssumptionCheck {
    pub soc_start: f64,
    pub soc_end: f64,
    pub emf_spread_v: f64,
    pub r0_true_ohm: f64,
    pub r0_hat_ohm: f64,
    pub r0_bias_ohm: f64,
}

/// Runs `profile` noiselessly on the R-int reduction of `truth` (hysteresis
/// removed) starting rested at `soc_start`. Sample `k` is read at the start
/// of its interval, as in Coulomb counting.
pub fn emf_assumption_check(
    truth: &BatteryGroundTruth,
    profile: &PulseProfile,
    soc_start: f64,
) -> Result<EmfAssumptionCheck> {
    let r0 = truth.reduce_to_rint();
    let mut cell = BatteryGroundTruth::rint(
        &truth.cell_id,
        truth.capacity_as,
        r0,
        Hysteresis::none(),
        truth.true_ocv.clone(),
        truth.ocv_min_v,
        truth.ocv_max_v,
        0.0,
    );
    cell.limits_outside_curve = truth.limits_outside_curve;
    let mut state = cell.rested_state(soc_start);
    let mut volts = Vec::with_capacity(profile.samples.len());
    let mut emf = Vec::with_capacity(profile.samples.len());
    for &i in &profile.samples {
        emf.push(cell.true_ocv.eval(state.soc_true));
        volts.push(cell.voltage_at(&state, i));
        state = cell.advance(&state, i, profile.dt_s)?.state;
    }
    let est = estimate_r0(&profile.samples, &volts, 0.0)?;
    let max = emf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = emf.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EmfAssumptionCheck {
        soc_start,
        soc_end: state.soc_true,
        emf_spread_v: max - min,
        r0_true_ohm: r0,
        r0_hat_ohm: est.r0_ohm,
        r0_bias_ohm: est.r0_ohm - r0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HysteresisRecovery {
    pub r_h_ohm: f64,
    /// `v - E(s) - i R0_hat`
    pub h1_v: Vec<f64>,
    /// `i R_h`
    pub h2_v: Vec<f64>,
    /// RMS of `h1 - h2`.
    pub rms_divergence_v: f64,
    /// `R_h < 0`: physically odd, kept rather than rejected.
    pub negative_r_h: bool,
}

/// Splits the fitted `R0h` into `R0_hat` and `R_h` and forms both hysteresis
/// series per record.
pub fn recover_hysteresis(
    log: &TimeSeriesLog,
    soc: &[f64],
    params: &OcvParameters,
    r0_hat_ohm: f64,
) -> Result<HysteresisRecovery> {
    ensure_finite("r0_hat", r0_hat_ohm)?;
    params.validate()?;
    if soc.len() != log.len() {
        return Err(Error::invalid("SOC trajectory and log are not aligned"));
    }
    let r_h = params.r0h_ohm - r0_hat_ohm;
    let mut h1 = Vec::with_capacity(log.len());
    let mut h2 = Vec::with_capacity(log.len());
    for (r, s) in log.records().iter().zip(soc) {
        h1.push(r.v_v - evaluate_ocv_lenient(params, *s)? - r.i_a * r0_hat_ohm);
        h2.push(r.i_a * r_h);
    }
    let rms = if h1.is_empty() {
        0.0
    } else {
        (h1.iter()
            .zip(&h2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / h1.len() as f64)
            .sqrt()
    };
    Ok(HysteresisRecovery {
        r_h_ohm: r_h,
        h1_v: h1,
        h2_v: h2,
        rms_divergence_v: rms,
        negative_r_h: r_h < 0.0,
    })
}
