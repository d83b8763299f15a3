//! Shape-preserving cubic Hermite interpolation (Fritsch–Carlson slopes).
//!
//! Used for tabulated kernels, sampled density/velocity profiles, and the
//! monotone bridges of the extension operator. Node slopes are the weighted
//! harmonic means of adjacent secants, zeroed at local extrema, which keeps the
//! interpolant monotone wherever the data are.

use alloc::vec::Vec;

/// Errors from building an interpolant.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("need at least two sample points, got {0}")]
    TooFewSamples(usize),
    #[error("sample abscissae must be strictly increasing and finite")]
    UnsortedAbscissae,
    #[error("sample values must be finite")]
    NonFiniteValue,
}

/// A piecewise-cubic Hermite interpolant with shape-preserving slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, InterpError> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(InterpError::TooFewSamples(n.min(ys.len())));
        }
        if xs.iter().any(|x| !x.is_finite()) || xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(InterpError::UnsortedAbscissae);
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(InterpError::NonFiniteValue);
        }

        let mut secants = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            secants.push((ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]));
        }

        let mut slopes = Vec::with_capacity(n);
        for i in 0..n {
            let d = if i == 0 {
                endpoint_slope(secants[0], secants.get(1).copied(), xs[1] - xs[0], xs.get(2).map(|x| x - xs[1]))
            } else if i == n - 1 {
                endpoint_slope(
                    secants[n - 2],
                    if n >= 3 { Some(secants[n - 3]) } else { None },
                    xs[n - 1] - xs[n - 2],
                    if n >= 3 { Some(xs[n - 2] - xs[n - 3]) } else { None },
                )
            } else {
                interior_slope(
                    secants[i - 1],
                    secants[i],
                    xs[i] - xs[i - 1],
                    xs[i + 1] - xs[i],
                )
            };
            slopes.push(d);
        }

        Ok(MonotoneCubic { xs, ys, slopes })
    }

    /// Build a single monotone Hermite segment with prescribed (then clamped)
    /// endpoint derivatives. Used for bridging gaps with known one-sided slopes.
    pub fn bridge(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> Result<Self, InterpError> {
        if !(x1 > x0) || !x0.is_finite() || !x1.is_finite() {
            return Err(InterpError::UnsortedAbscissae);
        }
        if !y0.is_finite() || !y1.is_finite() {
            return Err(InterpError::NonFiniteValue);
        }
        let secant = (y1 - y0) / (x1 - x0);
        let clamp = |d: f64| {
            if secant == 0.0 {
                0.0
            } else if secant > 0.0 {
                // Fritsch-Carlson box: slopes in [0, 3*secant] keep the segment monotone.
                d.max(0.0).min(3.0 * secant)
            } else {
                d.min(0.0).max(3.0 * secant)
            }
        };
        Ok(MonotoneCubic {
            xs: alloc::vec![x0, x1],
            ys: alloc::vec![y0, y1],
            slopes: alloc::vec![clamp(d0), clamp(d1)],
        })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().expect("nonempty"))
    }

    fn segment_of(&self, x: f64) -> usize {
        match self.xs.partition_point(|&p| p <= x) {
            0 => 0,
            k if k >= self.xs.len() => self.xs.len() - 2,
            k => k - 1,
        }
    }

    /// Evaluate at `x`; outside the sample range the end values continue as
    /// constants.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= *self.xs.last().expect("nonempty") {
            return *self.ys.last().expect("nonempty");
        }
        let i = self.segment_of(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (h00, h10, h01, h11) = hermite_basis(t);
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }

    /// Derivative at `x`; zero outside the sample range (constant continuation).
    pub fn derivative(&self, x: f64) -> f64 {
        if x < self.xs[0] || x > *self.xs.last().expect("nonempty") {
            return 0.0;
        }
        let i = self.segment_of(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let dh00 = (6.0 * t * t - 6.0 * t) / h;
        let dh10 = 3.0 * t * t - 4.0 * t + 1.0;
        let dh01 = (-6.0 * t * t + 6.0 * t) / h;
        let dh11 = 3.0 * t * t - 2.0 * t;
        dh00 * self.ys[i] + dh10 * self.slopes[i] + dh01 * self.ys[i + 1] + dh11 * self.slopes[i + 1]
    }

    /// Exact integral of the interpolant over `[a, b]` within its domain
    /// (constant continuation applies outside).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if a == b {
            return 0.0;
        }
        if b < a {
            return -self.integral(b, a);
        }
        let (lo, hi) = self.domain();
        let mut total = 0.0;
        // constant tails
        if a < lo {
            total += (b.min(lo) - a) * self.ys[0];
        }
        if b > hi {
            total += (b - a.max(hi)) * *self.ys.last().expect("nonempty");
        }
        let a_in = a.max(lo);
        let b_in = b.min(hi);
        if a_in >= b_in {
            return total;
        }
        let first = self.segment_of(a_in);
        let last = self.segment_of(b_in);
        for i in first..=last {
            let x0 = self.xs[i].max(a_in);
            let x1 = self.xs[i + 1].min(b_in);
            if x1 > x0 {
                total += self.segment_integral(i, x0, x1);
            }
        }
        total
    }

    fn segment_integral(&self, i: usize, x0: f64, x1: f64) -> f64 {
        let h = self.xs[i + 1] - self.xs[i];
        let prim = |x: f64| {
            let t = (x - self.xs[i]) / h;
            let t2 = t * t;
            let t3 = t2 * t;
            let t4 = t2 * t2;
            // antiderivatives of the Hermite basis polynomials, scaled by h
            let ih00 = 0.5 * t4 - t3 + t;
            let ih10 = 0.25 * t4 - (2.0 / 3.0) * t3 + 0.5 * t2;
            let ih01 = -0.5 * t4 + t3;
            let ih11 = 0.25 * t4 - t3 / 3.0;
            h * (ih00 * self.ys[i]
                + ih10 * h * self.slopes[i]
                + ih01 * self.ys[i + 1]
                + ih11 * h * self.slopes[i + 1])
        };
        prim(x1) - prim(x0)
    }
}

fn hermite_basis(t: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + t,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    )
}

fn interior_slope(s_prev: f64, s_next: f64, h_prev: f64, h_next: f64) -> f64 {
    if s_prev * s_next <= 0.0 {
        0.0
    } else {
        let w1 = 2.0 * h_next + h_prev;
        let w2 = h_next + 2.0 * h_prev;
        (w1 + w2) / (w1 / s_prev + w2 / s_next)
    }
}

fn endpoint_slope(s0: f64, s1: Option<f64>, h0: f64, h1: Option<f64>) -> f64 {
    let d = match (s1, h1) {
        (Some(s1), Some(h1)) => ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1),
        _ => s0,
    };
    // keep the endpoint slope from overshooting the first secant
    if d * s0 <= 0.0 {
        0.0
    } else if d.abs() > 3.0 * s0.abs() {
        3.0 * s0
    } else {
        d
    }
}
