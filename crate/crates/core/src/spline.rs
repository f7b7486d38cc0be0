//! Cubic spline with prescribed first derivatives at both ends.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClampedCubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    // second derivative at each knot
    m: Vec<f64>,
}

impl ClampedCubicSpline {
    pub fn new(xs: &[f64], ys: &[f64], d_start: f64, d_end: f64) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::InvalidConfig("spline needs at least two knots".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("spline knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let slope: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();

        // Tridiagonal system for the knot second derivatives.
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        diag[0] = 2.0 * h[0];
        sup[0] = h[0];
        rhs[0] = 6.0 * (slope[0] - d_start);
        for i in 1..n - 1 {
            sub[i] = h[i - 1];
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            sup[i] = h[i];
            rhs[i] = 6.0 * (slope[i] - slope[i - 1]);
        }
        sub[n - 1] = h[n - 2];
        diag[n - 1] = 2.0 * h[n - 2];
        rhs[n - 1] = 6.0 * (d_end - slope[n - 2]);

        // Thomas algorithm
        for i in 1..n {
            let w = sub[i] / diag[i - 1];
            diag[i] -= w * sup[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = rhs[n - 1] / diag[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
        }
        Ok(Self { xs: xs.to_vec(), ys: ys.to_vec(), m })
    }

    fn interval(&self, x: f64) -> usize {
        let last = self.xs.len() - 2;
        match self.xs.binary_search_by(|k| k.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Less)) {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.interval(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = x - self.xs[i];
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let b = (self.ys[i + 1] - self.ys[i]) / h - h * (2.0 * m0 + m1) / 6.0;
        self.ys[i] + t * (b + t * (0.5 * m0 + t * (m1 - m0) / (6.0 * h)))
    }

    #[cfg(test)]
    pub fn derivative(&self, x: f64) -> f64 {
        let i = self.interval(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = x - self.xs[i];
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let b = (self.ys[i + 1] - self.ys[i]) / h - h * (2.0 * m0 + m1) / 6.0;
        b + t * (m0 + t * (m1 - m0) / (2.0 * h))
    }
}
