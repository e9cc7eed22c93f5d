//! Stacked least-squares fit of `[k0..k7, R0h]` and the branch-averaged
//! OCV-SOC table.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite, Error, Result};
use crate::interp::PiecewiseLinear;
use crate::ocv_model::{
    regressor, scale_soc_unchecked, validate_epsilon, OcvParameters, N_OCV_PARAMS,
};
use crate::parallel::{map_indexed, Execution};
use crate::soc::{Mode, TimeSeriesLog};

pub const N_FIT_PARAMS: usize = N_OCV_PARAMS + 1;
pub const MAX_CONDITION: f64 = 1e12;
pub const DEFAULT_TABLE_N: usize = 201;

/// One design row per charge/discharge record: `[p_o(s'), i]` against `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSystem {
    pub rows: Vec<[f64; N_FIT_PARAMS]>,
    pub v: Vec<f64>,
    pub epsilon: f64,
}

impl DesignSystem {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The same system with every row repeated `times` times.
    pub fn replicated(&self, times: usize) -> Self {
        let mut rows = Vec::with_capacity(self.rows.len() * times);
        let mut v = Vec::with_capacity(self.v.len() * times);
        for _ in 0..times {
            rows.extend_from_slice(&self.rows);
            v.extend_from_slice(&self.v);
        }
        Self {
            rows,
            v,
            epsilon: self.epsilon,
        }
    }
}

pub fn design_row(soc: f64, current_a: f64, epsilon: f64) -> Result<[f64; N_FIT_PARAMS]> {
    ensure_finite("current", current_a)?;
    let p = regressor(scale_soc_unchecked(soc, epsilon))?;
    let mut row = [0.0; N_FIT_PARAMS];
    row[..N_OCV_PARAMS].copy_from_slice(&p);
    row[N_OCV_PARAMS] = current_a;
    Ok(row)
}

/// Rows for every charge and discharge record; rest and pulse records are
/// skipped. The SOC trajectory must be aligned 1:1 with the log.
pub fn build_design(log: &TimeSeriesLog, soc: &[f64], epsilon: f64) -> Result<DesignSystem> {
    build_design_with(log, soc, epsilon, Execution::default())
}

pub fn build_design_with(
    log: &TimeSeriesLog,
    soc: &[f64],
    epsilon: f64,
    exec: Execution,
) -> Result<DesignSystem> {
    validate_epsilon(epsilon)?;
    if soc.len() != log.len() {
        return Err(Error::invalid(format!(
            "SOC trajectory has {} entries for {} log records",
            soc.len(),
            log.len()
        )));
    }
    let picked: Vec<usize> = log
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r.mode, Mode::Charge | Mode::Discharge))
        .map(|(k, _)| k)
        .collect();
    let recs = log.records();
    let built = map_indexed(picked.len(), exec, |j| {
        let k = picked[j];
        design_row(soc[k], recs[k].i_a, epsilon).map(|row| (row, recs[k].v_v))
    });
    let mut rows = Vec::with_capacity(built.len());
    let mut v = Vec::with_capacity(built.len());
    for item in built {
        let (row, volts) = item?;
        rows.push(row);
        v.push(volts);
    }
    if rows.len() < N_FIT_PARAMS {
        return Err(Error::Underdetermined {
            rows: rows.len(),
            required: N_FIT_PARAMS,
        });
    }
    Ok(DesignSystem { rows, v, epsilon })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics {
    pub residual_rms_v: f64,
    /// 2-norm condition number of the design matrix as built.
    pub condition_number: f64,
    /// Condition number after scaling each column to unit norm, which is
    /// what the solver actually works with.
    pub scaled_condition_number: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcvFit {
    pub params: OcvParameters,
    pub diagnostics: FitDiagnostics,
    /// `(P^T P)^-1`; multiply by σ² for the parameter covariance.
    pub unit_covariance: [[f64; N_FIT_PARAMS]; N_FIT_PARAMS],
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Least-squares minimizer of `||v - P k||` by Householder QR of the
/// column-normalized design matrix.
pub fn fit(system: &DesignSystem) -> Result<OcvFit> {
    let m = system.rows.len();
    if m < N_FIT_PARAMS || system.v.len() != m {
        return Err(Error::Underdetermined {
            rows: m,
            required: N_FIT_PARAMS,
        });
    }
    validate_epsilon(system.epsilon)?;
    if system
        .rows
        .iter()
        .flatten()
        .chain(&system.v)
        .any(|x| !x.is_finite())
    {
        return Err(Error::invalid("design system contains non-finite entries"));
    }

    let mut p = DMatrix::from_fn(m, N_FIT_PARAMS, |r, c| system.rows[r][c]);
    let mut scale = [0.0; N_FIT_PARAMS];
    for (c, s) in scale.iter_mut().enumerate() {
        let norm = p.column(c).norm();
        if norm == 0.0 {
            return Err(Error::IllConditioned {
                condition: f64::INFINITY,
            });
        }
        *s = norm;
        p.column_mut(c).unscale_mut(norm);
    }
    let v = DVector::from_column_slice(&system.v);

    let qr = p.qr();
    let r = qr.r();
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&scale));
    let scaled_condition_number = condition(&r);
    let condition_number = condition(&(&r * &d));
    if !(condition_number <= MAX_CONDITION) {
        return Err(Error::IllConditioned {
            condition: condition_number,
        });
    }

    let qtv = qr.q().tr_mul(&v);
    let y = r
        .solve_upper_triangular(&qtv)
        .ok_or(Error::IllConditioned {
            condition: f64::INFINITY,
        })?;
    let theta: Vec<f64> = y.iter().zip(&scale).map(|(yi, s)| yi / s).collect();

    let mut sq = 0.0;
    for (row, vk) in system.rows.iter().zip(&system.v) {
        let pred: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum();
        sq += (vk - pred).powi(2);
    }
    let residual_rms_v = (sq / m as f64).sqrt();

    let r_inv = r.clone().try_inverse().ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let scaled_cov = &r_inv * r_inv.transpose();
    let mut unit_covariance = [[0.0; N_FIT_PARAMS]; N_FIT_PARAMS];
    for (i, row) in unit_covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = scaled_cov[(i, j)] / (scale[i] * scale[j]);
        }
    }

    let mut k = [0.0; N_OCV_PARAMS];
    k.copy_from_slice(&theta[..N_OCV_PARAMS]);
    Ok(OcvFit {
        params: OcvParameters::new(k, theta[N_OCV_PARAMS], system.epsilon)?,
        diagnostics: FitDiagnostics {
            residual_rms_v,
            condition_number,
            scaled_condition_number,
            rows: m,
        },
        unit_covariance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcvTable {
    pub soc: Vec<f64>,
    pub ocv_v: Vec<f64>,
    /// Nodes where at least one branch had to use its endpoint value.
    pub extrapolated: Vec<bool>,
}

impl OcvTable {
    pub fn len(&self) -> usize {
        self.soc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soc.is_empty()
    }

    /// Indices `j` with `ocv[j+1] < ocv[j]`.
    pub fn monotonicity_violations(&self) -> Vec<usize> {
        self.ocv_v
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] < w[0])
            .map(|(j, _)| j)
            .collect()
    }

    pub fn interpolant(&self) -> Result<PiecewiseLinear> {
        PiecewiseLinear::new(self.soc.clone(), self.ocv_v.clone())
    }
}

/// Terminal voltage of one branch as a function of its own SOC.
pub fn branch_curve(log: &TimeSeriesLog, soc: &[f64], mode: Mode) -> Result<PiecewiseLinear> {
    if soc.len() != log.len() {
        return Err(Error::invalid("SOC trajectory and log are not aligned"));
    }
    let mut pts: Vec<(f64, f64)> = log
        .records()
        .iter()
        .zip(soc)
        .filter(|(r, _)| r.mode == mode)
        .map(|(r, s)| (*s, r.v_v))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Segments {
            reason: format!("{mode:?} branch needs at least two records"),
            sequence: log.mode_sequence(),
        });
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    PiecewiseLinear::new(xs, ys)
}

/// Interpolate each branch at `n` equally spaced SOC nodes and average, so the
/// symmetric `±|i| R0h` drops cancel.
pub fn build_table(log: &TimeSeriesLog, soc: &[f64], n: usize) -> Result<OcvTable> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "table needs at least 2 nodes, got {n}"
        )));
    }
    let dis = branch_curve(log, soc, Mode::Discharge)?;
    let chg = branch_curve(log, soc, Mode::Charge)?;
    let mut table = OcvTable {
        soc: Vec::with_capacity(n),
        ocv_v: Vec::with_capacity(n),
        extrapolated: Vec::with_capacity(n),
    };
    for j in 0..n {
        let s = j as f64 / (n - 1) as f64;
        let a = dis.lookup(s);
        let b = chg.lookup(s);
        table.soc.push(s);
        table.ocv_v.push(0.5 * (a.value + b.value));
        table.extrapolated.push(a.extrapolated || b.extrapolated);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery_model::REFERENCE_CELL_K;
    use crate::ocv_model::{evaluate_ocv, DEFAULT_EPSILON};
    use crate::soc::Record;
    use approx::assert_relative_eq;

    const R0H: f64 = 0.07;
    const I: f64 = 0.0625;

    fn truth() -> OcvParameters {
        OcvParameters::new(REFERENCE_CELL_K, R0H, DEFAULT_EPSILON).unwrap()
    }

    /// Discharge 1 -> 0 then charge 0 -> 1 with `n` steps per branch,
    /// voltages from the R-int observation model.
    fn synthetic(n: usize, i_d: f64, i_c: f64) -> (TimeSeriesLog, Vec<f64>) {
        let p = truth();
        let mut recs = Vec::new();
        let mut soc = Vec::new();
        let mut t = 0.0;
        for k in 0..=n {
            let s = 1.0 - k as f64 / n as f64;
            recs.push(Record {
                t_s: t,
                i_a: -i_d,
                v_v: evaluate_ocv(&p, s).unwrap() - i_d * R0H,
                mode: Mode::Discharge,
            });
            soc.push(s);
            t += 60.0;
        }
        for k in 0..=n {
            let s = k as f64 / n as f64;
            recs.push(Record {
                t_s: t,
                i_a: i_c,
                v_v: evaluate_ocv(&p, s).unwrap() + i_c * R0H,
                mode: Mode::Charge,
            });
            soc.push(s);
            t += 60.0;
        }
        (TimeSeriesLog::new(recs).unwrap(), soc)
    }

    #[test]
    fn boundary_rows_are_scaled_and_tiny_systems_rejected() {
        let r0 = design_row(0.0, -1.0, 0.175).unwrap();
        let r1 = design_row(1.0, 1.0, 0.175).unwrap();
        assert_relative_eq!(r0[5], 0.175, max_relative = 1e-15);
        assert_relative_eq!(r1[5], 0.825, max_relative = 1e-15);
        assert_eq!(r0[8], -1.0);

        let log = TimeSeriesLog::new(vec![
            Record {
                t_s: 0.0,
                i_a: -1.0,
                v_v: 3.0,
                mode: Mode::Discharge,
            },
            Record {
                t_s: 1.0,
                i_a: 1.0,
                v_v: 4.0,
                mode: Mode::Charge,
            },
        ])
        .unwrap();
        assert!(matches!(
            build_design(&log, &[0.0, 1.0], 0.175),
            Err(Error::Underdetermined {
                rows: 2,
                required: 9
            })
        ));
    }

    #[test]
    fn last_column_is_current_and_rest_is_skipped() {
        let (log, soc) = synthetic(50, I, I);
        let mut recs = log.records().to_vec();
        let t_end = recs.last().unwrap().t_s;
        recs.push(Record {
            t_s: t_end + 1.0,
            i_a: 0.0,
            v_v: 4.1,
            mode: Mode::Rest,
        });
        let mut soc2 = soc.clone();
        soc2.push(1.0);
        let log = TimeSeriesLog::new(recs).unwrap();
        let sys = build_design(&log, &soc2, DEFAULT_EPSILON).unwrap();
        assert_eq!(sys.len(), 102);
        for (row, r) in sys.rows.iter().zip(log.records()) {
            assert_eq!(row[8], r.i_a);
        }
    }

    #[test]
    fn sequential_and_parallel_designs_match() {
        let (log, soc) = synthetic(300, I, I);
        let a = build_design_with(&log, &soc, DEFAULT_EPSILON, Execution::Sequential).unwrap();
        let b = build_design_with(&log, &soc, DEFAULT_EPSILON, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_recovery() {
        let (log, soc) = synthetic(3840, I, I);
        let f = fit(&build_design(&log, &soc, DEFAULT_EPSILON).unwrap()).unwrap();
        let truth = truth().as_vector();
        for (est, t) in f.params.as_vector().iter().zip(&truth) {
            assert_relative_eq!(*est, *t, max_relative = 1e-6);
        }
        assert!(f.diagnostics.residual_rms_v < 1e-9);
        assert!(f.diagnostics.condition_number > 1e5 && f.diagnostics.condition_number < 1e8);
        assert!(f.diagnostics.scaled_condition_number < f.diagnostics.condition_number);
    }

    #[test]
    fn row_replication_does_not_change_the_estimate() {
        let (log, soc) = synthetic(400, I, I);
        let sys = build_design(&log, &soc, DEFAULT_EPSILON).unwrap();
        let a = fit(&sys).unwrap().params.as_vector();
        let b = fit(&sys.replicated(2)).unwrap().params.as_vector();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(*x, *y, max_relative = 1e-9);
        }
    }

    #[test]
    fn collinear_current_column_is_reported() {
        // a single constant-current branch cannot separate k0 from R0h
        let (log, soc) = synthetic(200, I, I);
        let n = log.len() / 2;
        let charge = log.slice(n..log.len());
        let sys = build_design(&charge, &soc[n..], DEFAULT_EPSILON).unwrap();
        assert!(matches!(fit(&sys), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn symmetric_table_cancels_drops() {
        let (log, soc) = synthetic(640, I, I);
        let table = build_table(&log, &soc, 201).unwrap();
        let p = truth();
        for (s, v) in table.soc.iter().zip(&table.ocv_v) {
            assert_relative_eq!(*v, evaluate_ocv(&p, *s).unwrap(), epsilon = 2e-3);
        }
        // at shared knots the average is exact
        let coarse = build_table(&log, &soc, 641).unwrap();
        for (s, v) in coarse.soc.iter().zip(&coarse.ocv_v) {
            assert_relative_eq!(*v, evaluate_ocv(&p, *s).unwrap(), epsilon = 1e-12);
        }
        assert!(coarse.extrapolated.iter().all(|e| !e));
        assert!(coarse.monotonicity_violations().is_empty());
    }

    #[test]
    fn asymmetric_currents_bias_the_table() {
        let (i_d, i_c) = (0.05, 0.08);
        let (log, soc) = synthetic(100, i_d, i_c);
        let table = build_table(&log, &soc, 101).unwrap();
        let p = truth();
        let bias = (i_c - i_d) * R0H / 2.0;
        for (s, v) in table.soc.iter().zip(&table.ocv_v) {
            assert_relative_eq!(v - evaluate_ocv(&p, *s).unwrap(), bias, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_node_table_hits_the_endpoints() {
        let (log, soc) = synthetic(10, I, I);
        let t = build_table(&log, &soc, 2).unwrap();
        assert_eq!(t.soc, vec![0.0, 1.0]);
        assert!(build_table(&log, &soc, 1).is_err());
    }

    #[test]
    fn branch_knots_are_reproduced() {
        let n = 33;
        let (log, soc) = synthetic(n - 1, I, I);
        let curve = branch_curve(&log, &soc, Mode::Discharge).unwrap();
        let table = build_table(&log, &soc, n).unwrap();
        for (r, s) in log
            .records()
            .iter()
            .zip(&soc)
            .filter(|(r, _)| r.mode == Mode::Discharge)
        {
            assert_eq!(curve.eval(*s), r.v_v);
        }
        let chg = branch_curve(&log, &soc, Mode::Charge).unwrap();
        for (j, s) in table.soc.iter().enumerate() {
            assert_eq!(table.ocv_v[j], 0.5 * (curve.eval(*s) + chg.eval(*s)));
        }
    }

    #[test]
    fn partial_coverage_is_flagged() {
        let (log, mut soc) = synthetic(100, I, I);
        for s in soc.iter_mut() {
            *s = 0.1 + 0.8 * *s;
        }
        let t = build_table(&log, &soc, 11).unwrap();
        assert!(t.extrapolated[0] && t.extrapolated[10]);
        assert!(!t.extrapolated[5]);
    }
}
