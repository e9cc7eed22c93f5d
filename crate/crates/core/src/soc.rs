//! Logged cycler data, capacity from constant-current segment durations, and
//! Coulomb-counted SOC trajectories.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{ensure_finite, Error, Result};

/// Relative spread around the median current tolerated in a CC segment.
pub const CC_TOLERANCE: f64 = 1e-3;

/// Coulomb-counted SOC outside this band raises a data-quality warning.
pub const SOC_WARN_BAND: (f64, f64) = (-0.01, 1.01);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Charge,
    Discharge,
    Rest,
    Pulse,
}

impl Mode {
    pub fn code(self) -> char {
        match self {
            Mode::Charge => 'C',
            Mode::Discharge => 'D',
            Mode::Rest => 'R',
            Mode::Pulse => 'P',
        }
    }

    pub fn from_code(c: &str) -> Option<Self> {
        match c {
            "C" => Some(Mode::Charge),
            "D" => Some(Mode::Discharge),
            "R" => Some(Mode::Rest),
            "P" => Some(Mode::Pulse),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Mode::Charge => "charge",
            Mode::Discharge => "discharge",
            Mode::Rest => "rest",
            Mode::Pulse => "pulse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub t_s: f64,
    pub i_a: f64,
    pub v_v: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub mode: Mode,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeriesLog {
    pub metadata: BTreeMap<String, String>,
    records: Vec<Record>,
}

impl TimeSeriesLog {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut log = Self::default();
        for r in records {
            log.push(r)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        ensure_finite("t_s", r.t_s)?;
        ensure_finite("i_A", r.i_a)?;
        ensure_finite("v_V", r.v_v)?;
        if let Some(last) = self.records.last() {
            if r.t_s <= last.t_s {
                return Err(Error::invalid(format!(
                    "timestamps must be strictly increasing ({} after {})",
                    r.t_s, last.t_s
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn extend(&mut self, other: TimeSeriesLog) -> Result<()> {
        for r in other.records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cell_id(&self) -> Option<&str> {
        self.metadata.get("cell_id").map(String::as_str)
    }

    /// Maximal runs of equal mode.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for (idx, r) in self.records.iter().enumerate() {
            match out.last_mut() {
                Some(seg) if seg.mode == r.mode => seg.range.end = idx + 1,
                _ => out.push(Segment {
                    mode: r.mode,
                    range: idx..idx + 1,
                }),
            }
        }
        out
    }

    /// Compact mode sequence such as `C R D C R P`, used in error messages.
    pub fn mode_sequence(&self) -> String {
        let codes: Vec<String> = self
            .segments()
            .iter()
            .map(|s| s.mode.code().to_string())
            .collect();
        if codes.is_empty() {
            "<empty>".into()
        } else {
            codes.join(" ")
        }
    }

    pub fn slice(&self, range: Range<usize>) -> TimeSeriesLog {
        TimeSeriesLog {
            metadata: self.metadata.clone(),
            records: self.records[range].to_vec(),
        }
    }

    /// The low-rate OCV data: the last discharge segment that is immediately
    /// followed by a charge segment, together with that charge segment.
    pub fn ocv_branches(&self) -> Result<TimeSeriesLog> {
        let segs = self.segments();
        let pair = segs
            .windows(2)
            .rev()
            .find(|w| w[0].mode == Mode::Discharge && w[1].mode == Mode::Charge);
        match pair {
            Some(w) => Ok(self.slice(w[0].range.start..w[1].range.end)),
            None => Err(Error::Segments {
                reason: "no discharge segment directly followed by a charge segment".into(),
                sequence: self.mode_sequence(),
            }),
        }
    }

    /// Records of every pulse segment, in order.
    pub fn pulse_records(&self) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| r.mode == Mode::Pulse)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capacity {
    pub qc_as: f64,
    pub qd_as: f64,
    pub charge_current_a: f64,
    pub discharge_current_a: f64,
    pub charge_duration_s: f64,
    pub discharge_duration_s: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Constant current and duration of one segment.
fn constant_current_segment(records: &[Record], mode: Mode) -> Result<(f64, f64)> {
    if records.len() < 2 {
        return Err(Error::ZeroLengthSegment { mode: mode.name() });
    }
    let duration = records[records.len() - 1].t_s - records[0].t_s;
    if duration <= 0.0 {
        return Err(Error::ZeroLengthSegment { mode: mode.name() });
    }
    let mut currents: Vec<f64> = records.iter().map(|r| r.i_a).collect();
    let med = median(&mut currents);
    let spread = currents.iter().map(|i| (i - med).abs()).fold(0.0, f64::max);
    if med == 0.0 || spread > CC_TOLERANCE * med.abs() {
        return Err(Error::NotConstantCurrent {
            mode: mode.name(),
            spread,
            median: med,
        });
    }
    Ok((med, duration))
}

/// `Qc = Ic * tc` and `Qd = -Id * td` from a log holding exactly one discharge
/// and one charge segment. Rest and pulse records are ignored.
pub fn compute_capacity(log: &TimeSeriesLog) -> Result<Capacity> {
    let segs = log.segments();
    let find = |mode: Mode| -> Result<Range<usize>> {
        let mut found = segs.iter().filter(|s| s.mode == mode);
        match (found.next(), found.next()) {
            (Some(s), None) => Ok(s.range.clone()),
            (None, _) => Err(Error::Segments {
                reason: format!("missing {} segment", mode.name()),
                sequence: log.mode_sequence(),
            }),
            (Some(_), Some(_)) => Err(Error::Segments {
                reason: format!("more than one {} segment", mode.name()),
                sequence: log.mode_sequence(),
            }),
        }
    };
    let d = find(Mode::Discharge)?;
    let c = find(Mode::Charge)?;
    let (i_d, t_d) = constant_current_segment(&log.records()[d], Mode::Discharge)?;
    let (i_c, t_c) = constant_current_segment(&log.records()[c], Mode::Charge)?;
    if i_d >= 0.0 || i_c <= 0.0 {
        return Err(Error::invalid(
            "discharge current must be negative and charge current positive",
        ));
    }
    Ok(Capacity {
        qc_as: i_c * t_c,
        qd_as: -i_d * t_d,
        charge_current_a: i_c,
        discharge_current_a: i_d,
        charge_duration_s: t_c,
        discharge_duration_s: t_d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocWarning {
    pub index: usize,
    pub soc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocTrajectory {
    pub soc: Vec<f64>,
    /// Records whose SOC left [`SOC_WARN_BAND`].
    pub warnings: Vec<SocWarning>,
}

/// `s(k+1) = s(k) + Δk i(k) / Q` with `Q = Qc` while charging and `Qd` while
/// discharging; zero-current samples leave the SOC unchanged.
pub fn coulomb_count(
    log: &TimeSeriesLog,
    qc_as: f64,
    qd_as: f64,
    s_initial: f64,
) -> Result<SocTrajectory> {
    if !(qc_as > 0.0 && qd_as > 0.0 && qc_as.is_finite() && qd_as.is_finite()) {
        return Err(Error::invalid("capacities must be positive and finite"));
    }
    ensure_finite("s_initial", s_initial)?;
    if log.is_empty() {
        return Err(Error::invalid("cannot Coulomb count an empty log"));
    }
    let recs = log.records();
    let mut soc = Vec::with_capacity(recs.len());
    soc.push(s_initial);
    for w in recs.windows(2) {
        let (now, next) = (w[0], w[1]);
        let dt = next.t_s - now.t_s;
        let ds = if now.i_a > 0.0 {
            dt * now.i_a / qc_as
        } else if now.i_a < 0.0 {
            dt * now.i_a / qd_as
        } else {
            0.0
        };
        let prev = *soc.last().expect("non-empty");
        soc.push(prev + ds);
    }
    let warnings = soc
        .iter()
        .enumerate()
        .filter(|(_, s)| **s < SOC_WARN_BAND.0 || **s > SOC_WARN_BAND.1)
        .map(|(index, s)| SocWarning { index, soc: *s })
        .collect();
    Ok(SocTrajectory { soc, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const I: f64 = 0.0625;

    /// C/64 discharge then charge of a 4 Ah cell, sampled every minute.
    fn c64_log() -> TimeSeriesLog {
        let per_branch = 64 * 60;
        let mut recs = Vec::new();
        for k in 0..=per_branch {
            recs.push(Record {
                t_s: 60.0 * k as f64,
                i_a: -I,
                v_v: 3.7,
                mode: Mode::Discharge,
            });
        }
        let t0 = 60.0 * per_branch as f64 + 1e-3;
        for k in 0..=per_branch {
            recs.push(Record {
                t_s: t0 + 60.0 * k as f64,
                i_a: I,
                v_v: 3.8,
                mode: Mode::Charge,
            });
        }
        TimeSeriesLog::new(recs).unwrap()
    }

    #[test]
    fn c64_capacity_is_four_amp_hours() {
        let cap = compute_capacity(&c64_log()).unwrap();
        assert_relative_eq!(cap.qc_as, 14_400.0, max_relative = 1e-12);
        assert_relative_eq!(cap.qd_as, 14_400.0, max_relative = 1e-12);
        assert_relative_eq!(cap.discharge_duration_s, 64.0 * 3600.0);
    }

    #[test]
    fn missing_and_empty_segments_are_rejected() {
        let only_d = TimeSeriesLog::new(vec![
            Record {
                t_s: 0.0,
                i_a: -I,
                v_v: 3.7,
                mode: Mode::Discharge,
            },
            Record {
                t_s: 1.0,
                i_a: -I,
                v_v: 3.7,
                mode: Mode::Discharge,
            },
        ])
        .unwrap();
        assert!(matches!(
            compute_capacity(&only_d),
            Err(Error::Segments { .. })
        ));

        let single = TimeSeriesLog::new(vec![
            Record {
                t_s: 0.0,
                i_a: -I,
                v_v: 3.7,
                mode: Mode::Discharge,
            },
            Record {
                t_s: 1.0,
                i_a: I,
                v_v: 3.7,
                mode: Mode::Charge,
            },
            Record {
                t_s: 2.0,
                i_a: I,
                v_v: 3.7,
                mode: Mode::Charge,
            },
        ])
        .unwrap();
        assert!(matches!(
            compute_capacity(&single),
            Err(Error::ZeroLengthSegment { .. })
        ));
    }

    #[test]
    fn varying_current_is_not_constant_current() {
        let mut recs: Vec<Record> = c64_log().records().to_vec();
        recs[10].i_a *= 1.01;
        let log = TimeSeriesLog::new(recs).unwrap();
        assert!(matches!(
            compute_capacity(&log),
            Err(Error::NotConstantCurrent { .. })
        ));
    }

    #[test]
    fn timestamps_must_increase() {
        let r = Record {
            t_s: 1.0,
            i_a: 0.0,
            v_v: 3.7,
            mode: Mode::Rest,
        };
        assert!(TimeSeriesLog::new(vec![r, r]).is_err());
    }

    #[test]
    fn full_cycle_closes() {
        let log = c64_log();
        let cap = compute_capacity(&log).unwrap();
        let traj = coulomb_count(&log, cap.qc_as, cap.qd_as, 1.0).unwrap();
        let m = 64 * 60;
        assert!(traj.soc[m].abs() < 1e-9);
        // the last discharge sample is held over the 1 ms gap before charging
        let gap = I * 1e-3 / 14_400.0;
        assert_relative_eq!(traj.soc[traj.soc.len() - 1], 1.0 - gap, epsilon = 1e-12);
        assert!(traj.warnings.is_empty());
    }

    #[test]
    fn single_step_increment() {
        let log = TimeSeriesLog::new(vec![
            Record {
                t_s: 0.0,
                i_a: -I,
                v_v: 3.7,
                mode: Mode::Discharge,
            },
            Record {
                t_s: 60.0,
                i_a: -I,
                v_v: 3.7,
                mode: Mode::Discharge,
            },
        ])
        .unwrap();
        let traj = coulomb_count(&log, 14_400.0, 14_400.0, 0.5).unwrap();
        assert_relative_eq!(
            traj.soc[1] - traj.soc[0],
            -2.604_166_666_666_667e-4,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_current_holds_soc_and_out_of_band_warns() {
        let log = TimeSeriesLog::new(vec![
            Record {
                t_s: 0.0,
                i_a: 0.0,
                v_v: 3.7,
                mode: Mode::Rest,
            },
            Record {
                t_s: 100.0,
                i_a: -1.0,
                v_v: 3.7,
                mode: Mode::Discharge,
            },
            Record {
                t_s: 200.0,
                i_a: -1.0,
                v_v: 3.7,
                mode: Mode::Discharge,
            },
        ])
        .unwrap();
        let traj = coulomb_count(&log, 50.0, 50.0, 0.5).unwrap();
        assert_eq!(traj.soc[1], 0.5);
        assert_relative_eq!(traj.soc[2], -1.5);
        assert_eq!(traj.warnings.len(), 1);
        assert_eq!(traj.warnings[0].index, 2);
    }

    #[test]
    fn branch_extraction_names_the_mode_sequence() {
        let log = TimeSeriesLog::new(vec![
            Record {
                t_s: 0.0,
                i_a: 1.0,
                v_v: 4.0,
                mode: Mode::Charge,
            },
            Record {
                t_s: 1.0,
                i_a: 0.0,
                v_v: 4.0,
                mode: Mode::Rest,
            },
            Record {
                t_s: 2.0,
                i_a: -1.0,
                v_v: 3.9,
                mode: Mode::Discharge,
            },
        ])
        .unwrap();
        match log.ocv_branches() {
            Err(Error::Segments { sequence, .. }) => assert_eq!(sequence, "C R D"),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn counting_is_scale_invariant(scale in 0.01f64..100.0, i in 0.01f64..2.0, q in 100.0f64..1e5) {
            let recs: Vec<Record> = (0..20)
                .map(|k| Record { t_s: 7.0 * k as f64, i_a: if k < 10 { -i } else { i }, v_v: 3.7, mode: if k < 10 { Mode::Discharge } else { Mode::Charge } })
                .collect();
            let scaled: Vec<Record> = recs.iter().map(|r| Record { i_a: r.i_a * scale, ..*r }).collect();
            let a = coulomb_count(&TimeSeriesLog::new(recs).unwrap(), q, q * 1.1, 0.9).unwrap();
            let b = coulomb_count(&TimeSeriesLog::new(scaled).unwrap(), q * scale, q * 1.1 * scale, 0.9).unwrap();
            for (x, y) in a.soc.iter().zip(&b.soc) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_current_gives_arithmetic_progression(i in 0.01f64..2.0, dt in 1.0f64..120.0) {
            let recs: Vec<Record> = (0..50)
                .map(|k| Record { t_s: dt * k as f64, i_a: -i, v_v: 3.7, mode: Mode::Discharge })
                .collect();
            let traj = coulomb_count(&TimeSeriesLog::new(recs).unwrap(), 14_400.0, 14_400.0, 1.0).unwrap();
            let step = -dt * i / 14_400.0;
            for w in traj.soc.windows(2) {
                prop_assert!((w[1] - w[0] - step).abs() < 1e-12);
            }
        }
    }
}
