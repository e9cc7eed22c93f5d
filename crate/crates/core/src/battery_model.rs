//! Equivalent-circuit cell simulator: EMF + hysteresis + ohmic resistance +
//! two RC pairs (SEI and charge transfer). Setting both RC resistances to zero
//! gives the R-int model.
//!
//! Sign convention: positive current charges the cell.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::interp::PiecewiseLinear;
use crate::ocv_model::{dot, regressor, validate_epsilon, DEFAULT_EPSILON, N_OCV_PARAMS};

/// Combined+3 coefficients of a 4 Ah lithium-ion cell. With ε = 0.175 the
/// curve runs from 2.886 V at empty to 4.1917 V at full.
pub const REFERENCE_CELL_K: [f64; N_OCV_PARAMS] = [
    -9.082, 103.087, -18.185, 2.062, -0.102, -76.604, 141.199, -1.117,
];

pub const DEFAULT_TABLE_POINTS: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Hysteresis {
    /// `h = i * R_h`
    Resistive { r_h_ohm: f64 },
    /// `h = M * sign(i)`, holding its last value while the current is zero.
    ConstantMagnitude { magnitude_v: f64 },
}

impl Hysteresis {
    pub fn none() -> Self {
        Hysteresis::Resistive { r_h_ohm: 0.0 }
    }

    fn value(&self, current_a: f64, previous_v: f64) -> f64 {
        match *self {
            Hysteresis::Resistive { r_h_ohm } => current_a * r_h_ohm,
            Hysteresis::ConstantMagnitude { magnitude_v } => {
                if current_a > 0.0 {
                    magnitude_v
                } else if current_a < 0.0 {
                    -magnitude_v
                } else {
                    previous_v
                }
            }
        }
    }
}

/// Combined+3 curve used generatively. The model's unit SOC interval is laid
/// over `soc_window` of the true SOC, so the curve extends smoothly past the
/// window on both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerativeCombined3 {
    pub k: [f64; N_OCV_PARAMS],
    pub epsilon: f64,
    pub soc_window: (f64, f64),
}

impl GenerativeCombined3 {
    pub fn reference() -> Self {
        Self {
            k: REFERENCE_CELL_K,
            epsilon: DEFAULT_EPSILON,
            soc_window: (0.0, 1.0),
        }
    }

    /// Window-relative SOC of a true SOC.
    pub fn relative_soc(&self, soc_true: f64) -> f64 {
        let (a, b) = self.soc_window;
        (soc_true - a) / (b - a)
    }

    pub fn eval(&self, soc_true: f64) -> f64 {
        let s_prime = (1.0 - 2.0 * self.epsilon) * self.relative_soc(soc_true) + self.epsilon;
        regressor(s_prime)
            .map(|p| dot(&p, &self.k))
            .unwrap_or(f64::NAN)
    }

    /// Samples the curve on `n` equally spaced true-SOC points.
    pub fn tabulate(&self, n: usize) -> Result<PiecewiseLinear> {
        if n < 2 {
            return Err(Error::invalid("table needs at least two points"));
        }
        let xs: Vec<f64> = (0..n).map(|j| j as f64 / (n - 1) as f64).collect();
        let ys = xs.iter().map(|&s| self.eval(s)).collect();
        PiecewiseLinear::new(xs, ys)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrueOcv {
    Table(PiecewiseLinear),
    Combined3(GenerativeCombined3),
}

impl TrueOcv {
    pub fn eval(&self, soc_true: f64) -> f64 {
        match self {
            TrueOcv::Table(t) => t.eval(soc_true),
            TrueOcv::Combined3(c) => c.eval(soc_true),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TrueOcv::Table(t) => {
                let xs = t.xs();
                if xs[0] != 0.0 || xs[xs.len() - 1] != 1.0 {
                    return Err(Error::invalid("OCV table must span SOC 0 to 1"));
                }
                if !t.is_strictly_increasing() {
                    return Err(Error::invalid("OCV table must be strictly increasing"));
                }
            }
            TrueOcv::Combined3(c) => {
                validate_epsilon(c.epsilon)?;
                let (a, b) = c.soc_window;
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(Error::invalid(format!("invalid SOC window ({a}, {b})")));
                }
                const GRID: usize = 2001;
                let mut prev = f64::NEG_INFINITY;
                for j in 0..GRID {
                    let v = c.eval(j as f64 / (GRID - 1) as f64);
                    if !v.is_finite() || v <= prev {
                        return Err(Error::invalid(
                            "generative OCV curve must be finite and strictly increasing on [0, 1]",
                        ));
                    }
                    prev = v;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryGroundTruth {
    pub cell_id: String,
    pub capacity_as: f64,
    pub r_ohmic_ohm: f64,
    pub r_sei_ohm: f64,
    pub c_sei_f: f64,
    pub r_ct_ohm: f64,
    pub c_dl_f: f64,
    pub hysteresis: Hysteresis,
    pub true_ocv: TrueOcv,
    pub ocv_min_v: f64,
    pub ocv_max_v: f64,
    pub noise_std_v: f64,
    /// Allows voltage limits outside the true OCV range.
    pub limits_outside_curve: bool,
}

impl BatteryGroundTruth {
    /// 4 Ah two-RC cell with a 201-point tabulated OCV curve and 20 mΩ
    /// resistive hysteresis, measured with 0.2 mV noise.
    pub fn default_4ah() -> Self {
        let table = GenerativeCombined3::reference()
            .tabulate(DEFAULT_TABLE_POINTS)
            .expect("reference curve tabulates");
        Self {
            cell_id: "default-4Ah".into(),
            capacity_as: 4.0 * 3600.0,
            r_ohmic_ohm: 0.05,
            r_sei_ohm: 0.03,
            c_sei_f: 500.0,
            r_ct_ohm: 0.02,
            c_dl_f: 20_000.0,
            hysteresis: Hysteresis::Resistive { r_h_ohm: 0.02 },
            true_ocv: TrueOcv::Table(table),
            ocv_min_v: 2.9,
            ocv_max_v: 4.18,
            noise_std_v: 2e-4,
            limits_outside_curve: false,
        }
    }

    /// R-int cell: the RC branches are removed and all resistance sits in `r0_ohm`.
    pub fn rint(
        cell_id: &str,
        capacity_as: f64,
        r0_ohm: f64,
        hysteresis: Hysteresis,
        true_ocv: TrueOcv,
        ocv_min_v: f64,
        ocv_max_v: f64,
        noise_std_v: f64,
    ) -> Self {
        Self {
            cell_id: cell_id.into(),
            capacity_as,
            r_ohmic_ohm: r0_ohm,
            r_sei_ohm: 0.0,
            c_sei_f: 1.0,
            r_ct_ohm: 0.0,
            c_dl_f: 1.0,
            hysteresis,
            true_ocv,
            ocv_min_v,
            ocv_max_v,
            noise_std_v,
            limits_outside_curve: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("capacity_As", self.capacity_as),
            ("r_ohmic_Ohm", self.r_ohmic_ohm),
            ("r_sei_Ohm", self.r_sei_ohm),
            ("c_sei_F", self.c_sei_f),
            ("r_ct_Ohm", self.r_ct_ohm),
            ("c_dl_F", self.c_dl_f),
            ("ocv_min_V", self.ocv_min_v),
            ("ocv_max_V", self.ocv_max_v),
            ("noise_std_V", self.noise_std_v),
        ] {
            ensure_finite(name, v)?;
        }
        if self.capacity_as <= 0.0 {
            return Err(Error::invalid("capacity_As must be positive"));
        }
        if self.r_ohmic_ohm < 0.0 || self.r_sei_ohm < 0.0 || self.r_ct_ohm < 0.0 {
            return Err(Error::invalid("resistances must be non-negative"));
        }
        if self.c_sei_f <= 0.0 || self.c_dl_f <= 0.0 {
            return Err(Error::invalid("capacitances must be positive"));
        }
        if self.noise_std_v < 0.0 {
            return Err(Error::invalid("noise_std_V must be non-negative"));
        }
        match self.hysteresis {
            Hysteresis::Resistive { r_h_ohm: v }
            | Hysteresis::ConstantMagnitude { magnitude_v: v } => {
                ensure_finite("hysteresis", v)?;
                if v < 0.0 {
                    return Err(Error::invalid("hysteresis value must be non-negative"));
                }
            }
        }
        self.true_ocv.validate()?;
        if self.ocv_min_v >= self.ocv_max_v {
            return Err(Error::invalid("ocv_min_V must be below ocv_max_V"));
        }
        if !self.limits_outside_curve {
            let (lo, hi) = (self.true_ocv.eval(0.0), self.true_ocv.eval(1.0));
            if self.ocv_min_v < lo || self.ocv_max_v > hi {
                return Err(Error::invalid(format!(
                    "voltage limits [{}, {}] fall outside the OCV range [{lo}, {hi}]; \
                     set limits_outside_curve to allow this",
                    self.ocv_min_v, self.ocv_max_v
                )));
            }
        }
        Ok(())
    }

    /// Total R-int resistance `R0 = R_ohm + R_SEI + R_CT`.
    pub fn reduce_to_rint(&self) -> f64 {
        self.r_ohmic_ohm + self.r_sei_ohm + self.r_ct_ohm
    }

    pub fn rested_state(&self, soc_true: f64) -> CellState {
        CellState {
            soc_true: soc_true.clamp(0.0, 1.0),
            ..CellState::default()
        }
    }

    fn decay(r: f64, c: f64, dt_s: f64) -> f64 {
        if r == 0.0 {
            0.0
        } else {
            (-dt_s / (r * c)).exp()
        }
    }

    /// Noiseless terminal voltage with `current_a` flowing at `state`.
    pub fn voltage_at(&self, state: &CellState, current_a: f64) -> f64 {
        self.true_ocv.eval(state.soc_true)
            + self.hysteresis.value(current_a, state.h_v)
            + current_a * self.r_ohmic_ohm
            + state.v_sei_v
            + state.v_dl_v
    }

    /// Noiseless state transition over `dt_s` at constant current. RC branches
    /// use the exact zero-order-hold update, stable for any step length.
    pub fn advance(&self, state: &CellState, current_a: f64, dt_s: f64) -> Result<StepOutcome> {
        ensure_finite("current", current_a)?;
        ensure_finite("dt", dt_s)?;
        if dt_s <= 0.0 {
            return Err(Error::invalid(format!("dt must be positive, got {dt_s}")));
        }
        let t_s = state.t_s + dt_s;
        let requested = state.soc_true + current_a * dt_s / self.capacity_as;
        let soc_true = requested.clamp(0.0, 1.0);
        let clamp = (soc_true != requested).then_some(SocClamp {
            t_s,
            requested_soc: requested,
            clamped_to: soc_true,
        });

        let a_sei = Self::decay(self.r_sei_ohm, self.c_sei_f, dt_s);
        let a_dl = Self::decay(self.r_ct_ohm, self.c_dl_f, dt_s);
        let next = CellState {
            soc_true,
            v_sei_v: state.v_sei_v * a_sei + self.r_sei_ohm * (1.0 - a_sei) * current_a,
            v_dl_v: state.v_dl_v * a_dl + self.r_ct_ohm * (1.0 - a_dl) * current_a,
            h_v: self.hysteresis.value(current_a, state.h_v),
            t_s,
        };
        let voltage_v = self.voltage_at(&next, current_a);
        Ok(StepOutcome {
            state: next,
            voltage_v,
            clamp,
        })
    }

    /// [`advance`](Self::advance) plus Gaussian measurement noise on the voltage.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &CellState,
        current_a: f64,
        dt_s: f64,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let mut out = self.advance(state, current_a, dt_s)?;
        out.voltage_v += self.sample_noise(rng);
        Ok(out)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.noise_std_v > 0.0 {
            Normal::new(0.0, self.noise_std_v)
                .expect("validated noise std")
                .sample(rng)
        } else {
            0.0
        }
    }

    /// Current that holds the terminal voltage at `v_set` at the end of a
    /// `dt_s` step, with the EMF frozen at its present value. For the R-int
    /// model this is `(v_set - EMF - h) / R0`; hysteresis is solved
    /// consistently with the sign of the resulting current.
    pub fn cv_current(&self, state: &CellState, v_set: f64, dt_s: f64) -> Result<f64> {
        let a_sei = Self::decay(self.r_sei_ohm, self.c_sei_f, dt_s);
        let a_dl = Self::decay(self.r_ct_ohm, self.c_dl_f, dt_s);
        let base = self.true_ocv.eval(state.soc_true) + state.v_sei_v * a_sei + state.v_dl_v * a_dl;
        let gain = self.r_ohmic_ohm + self.r_sei_ohm * (1.0 - a_sei) + self.r_ct_ohm * (1.0 - a_dl);
        let gap = v_set - base;
        let current = match self.hysteresis {
            Hysteresis::Resistive { r_h_ohm } => {
                let g = gain + r_h_ohm;
                if g <= 0.0 {
                    return Err(Error::invalid(
                        "CV regulation needs a non-zero series resistance",
                    ));
                }
                gap / g
            }
            Hysteresis::ConstantMagnitude { magnitude_v } => {
                if gain <= 0.0 {
                    return Err(Error::invalid(
                        "CV regulation needs a non-zero series resistance",
                    ));
                }
                if gap > magnitude_v {
                    (gap - magnitude_v) / gain
                } else if gap < -magnitude_v {
                    (gap + magnitude_v) / gain
                } else {
                    0.0
                }
            }
        };
        Ok(current)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellState {
    pub soc_true: f64,
    pub v_sei_v: f64,
    pub v_dl_v: f64,
    pub h_v: f64,
    pub t_s: f64,
}

/// The simulator pinned SOC to `[0, 1]`; the cell was driven past full or empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocClamp {
    pub t_s: f64,
    pub requested_soc: f64,
    pub clamped_to: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: CellState,
    pub voltage_v: f64,
    pub clamp: Option<SocClamp>,
}

/// A simulated cell owning its state, noise stream and clamp history.
#[derive(Debug, Clone)]
pub struct SimulatedCell {
    truth: BatteryGroundTruth,
    state: CellState,
    rng: ChaCha8Rng,
    clamps: Vec<SocClamp>,
}

impl SimulatedCell {
    pub fn new(truth: BatteryGroundTruth, initial_soc: f64, rng: ChaCha8Rng) -> Result<Self> {
        truth.validate()?;
        if !(0.0..=1.0).contains(&initial_soc) {
            return Err(Error::SocOutOfRange { soc: initial_soc });
        }
        let state = truth.rested_state(initial_soc);
        Ok(Self {
            truth,
            state,
            rng,
            clamps: Vec::new(),
        })
    }

    pub fn truth(&self) -> &BatteryGroundTruth {
        &self.truth
    }

    pub fn state(&self) -> &CellState {
        &self.state
    }

    pub fn clamps(&self) -> &[SocClamp] {
        &self.clamps
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn commit(&mut self, outcome: &StepOutcome) {
        self.state = outcome.state;
        if let Some(c) = outcome.clamp {
            self.clamps.push(c);
        }
    }

    /// Applies a constant current for `dt_s` and returns the measured voltage.
    pub fn apply(&mut self, current_a: f64, dt_s: f64) -> Result<f64> {
        let out = self
            .truth
            .step(&self.state, current_a, dt_s, &mut self.rng)?;
        self.commit(&out);
        Ok(out.voltage_v)
    }

    /// Measured terminal voltage at zero current without advancing time.
    pub fn measure_rested(&mut self) -> f64 {
        self.truth.voltage_at(&self.state, 0.0) + self.truth.sample_noise(&mut self.rng)
    }
}
