//! The Combined+3 OCV-SOC function.
//!
//! `V(s) = k0 + k1/s + k2/s^2 + k3/s^3 + k4/s^4 + k5*s + k6*ln(s) + k7*ln(1-s)`,
//! evaluated on the linearly scaled SOC `s' = (1-2ε)s + ε` so the inverse
//! powers and logarithms stay finite at both ends of the SOC range.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.175;

/// Tolerance on `s` outside `[0, 1]` accepted by [`scale_soc`].
pub const SOC_TOLERANCE: f64 = 1e-9;

pub const N_OCV_PARAMS: usize = 8;

/// Combined+3 coefficients together with the joint resistance `R0h = R0 + Rh`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcvParameters {
    pub k: [f64; N_OCV_PARAMS],
    #[serde(rename = "r0h_Ohm")]
    pub r0h_ohm: f64,
    pub epsilon: f64,
}

impl OcvParameters {
    pub fn new(k: [f64; N_OCV_PARAMS], r0h_ohm: f64, epsilon: f64) -> Result<Self> {
        let p = Self {
            k,
            r0h_ohm,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.k.iter().enumerate() {
            ensure_finite(&format!("k{i}"), *v)?;
        }
        ensure_finite("r0h_Ohm", self.r0h_ohm)?;
        validate_epsilon(self.epsilon)
    }

    /// All nine estimated quantities, `[k0..k7, R0h]`.
    pub fn as_vector(&self) -> [f64; N_OCV_PARAMS + 1] {
        let mut out = [0.0; N_OCV_PARAMS + 1];
        out[..N_OCV_PARAMS].copy_from_slice(&self.k);
        out[N_OCV_PARAMS] = self.r0h_ohm;
        out
    }
}

pub(crate) fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..0.5).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "epsilon must lie in [0, 0.5), got {epsilon}"
        )));
    }
    Ok(())
}

/// `s' = (1 - 2ε)s + ε`. Maps `[0, 1]` onto `[ε, 1 - ε]`.
pub fn scale_soc(s: f64, epsilon: f64) -> Result<f64> {
    validate_epsilon(epsilon)?;
    if !s.is_finite() || s < -SOC_TOLERANCE || s > 1.0 + SOC_TOLERANCE {
        return Err(Error::SocOutOfRange { soc: s });
    }
    Ok(scale_soc_unchecked(s, epsilon))
}

/// The affine scaling without the range check. Logged data whose Coulomb
/// counted SOC strays a little outside `[0, 1]` goes through here; the
/// regressor still rejects anything that lands outside `(0, 1)`.
pub(crate) fn scale_soc_unchecked(s: f64, epsilon: f64) -> f64 {
    (1.0 - 2.0 * epsilon) * s + epsilon
}

/// `[1, 1/s', 1/s'^2, 1/s'^3, 1/s'^4, s', ln s', ln(1 - s')]`.
pub fn regressor(s_prime: f64) -> Result<[f64; N_OCV_PARAMS]> {
    if !(s_prime > 0.0 && s_prime < 1.0) {
        return Err(Error::RegressorDomain { s_prime });
    }
    let inv = 1.0 / s_prime;
    let inv2 = inv * inv;
    Ok([
        1.0,
        inv,
        inv2,
        inv2 * inv,
        inv2 * inv2,
        s_prime,
        s_prime.ln(),
        (1.0 - s_prime).ln(),
    ])
}

pub(crate) fn dot(a: &[f64; N_OCV_PARAMS], b: &[f64; N_OCV_PARAMS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Model OCV at unscaled SOC `s`.
pub fn evaluate_ocv(params: &OcvParameters, s: f64) -> Result<f64> {
    let s_prime = scale_soc(s, params.epsilon)?;
    Ok(dot(&regressor(s_prime)?, &params.k))
}

/// Model OCV without the `[0, 1]` range check on `s`, for Coulomb-counted
/// SOC that drifts slightly past the ends.
pub(crate) fn evaluate_ocv_lenient(params: &OcvParameters, s: f64) -> Result<f64> {
    let s_prime = scale_soc_unchecked(s, params.epsilon);
    Ok(dot(&regressor(s_prime)?, &params.k))
}

/// `V(s) + i * R0h`, the R-int observation model with resistive hysteresis.
pub fn predict_terminal_voltage(params: &OcvParameters, s: f64, current_a: f64) -> Result<f64> {
    ensure_finite("current", current_a)?;
    Ok(evaluate_ocv(params, s)? + current_a * params.r0h_ohm)
}
