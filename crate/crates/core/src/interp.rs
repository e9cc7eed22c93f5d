//! Piecewise-linear interpolation over strictly increasing knots.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

/// Interpolated value plus whether the query fell outside the knot range
/// (in which case the nearest endpoint value is returned).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub value: f64,
    pub extrapolated: bool,
}

impl PiecewiseLinear {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::invalid(format!(
                "knot/value length mismatch: {} vs {}",
                xs.len(),
                ys.len()
            )));
        }
        if xs.len() < 2 {
            return Err(Error::invalid("interpolation needs at least two knots"));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::invalid("interpolation knots must be finite"));
        }
        if let Some(w) = xs.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "knots must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { xs, ys })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn lookup(&self, x: f64) -> Lookup {
        let n = self.xs.len();
        if x < self.xs[0] {
            return Lookup {
                value: self.ys[0],
                extrapolated: true,
            };
        }
        if x > self.xs[n - 1] {
            return Lookup {
                value: self.ys[n - 1],
                extrapolated: true,
            };
        }
        // first knot strictly greater than x
        let hi = self.xs.partition_point(|&k| k <= x);
        if hi == 0 {
            return Lookup {
                value: self.ys[0],
                extrapolated: false,
            };
        }
        if hi == n {
            return Lookup {
                value: self.ys[n - 1],
                extrapolated: false,
            };
        }
        let lo = hi - 1;
        if x == self.xs[lo] {
            return Lookup {
                value: self.ys[lo],
                extrapolated: false,
            };
        }
        let w = (x - self.xs[lo]) / (self.xs[hi] - self.xs[lo]);
        Lookup {
            value: self.ys[lo] + w * (self.ys[hi] - self.ys[lo]),
            extrapolated: false,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.lookup(x).value
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.ys.windows(2).all(|w| w[1] > w[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knots_are_reproduced_exactly() {
        let xs = vec![0.0, 0.1, 0.35, 1.0];
        let ys = vec![3.0, 3.3, 3.71, 4.2];
        let f = PiecewiseLinear::new(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(f.eval(*x), *y);
        }
    }

    #[test]
    fn midpoint_and_clamping() {
        let f = PiecewiseLinear::new(vec![0.0, 1.0], vec![2.0, 4.0]).unwrap();
        assert_eq!(f.eval(0.5), 3.0);
        let below = f.lookup(-0.1);
        assert!(below.extrapolated);
        assert_eq!(below.value, 2.0);
        assert!(f.lookup(1.5).extrapolated);
        assert!(!f.lookup(1.0).extrapolated);
    }

    #[test]
    fn rejects_non_increasing_knots() {
        assert!(PiecewiseLinear::new(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(PiecewiseLinear::new(vec![0.0], vec![1.0]).is_err());
    }
}
