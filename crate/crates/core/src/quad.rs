//! Adaptive Gauss–Kronrod quadrature.
//!
//! A 7/15-point Gauss–Kronrod rule drives a globally adaptive bisection scheme:
//! the interval with the largest error estimate is split until the summed error
//! estimate falls below `max(abs_tol, rel_tol * sum |I_k|)`. Termination is
//! measured against the sum of absolute panel values rather than the signed
//! total, so integrals that vanish by symmetry still converge.
//!
//! Endpoint algebraic singularities of type `|y|^{-s}`, `s in (0,1)`, are
//! handled by [`integrate_singular_left`], which applies the substitution
//! `y = r^{1/(1-s)}`; the transformed integrand is bounded near the origin and
//! the Kronrod abscissae never touch the endpoint itself.

use alloc::collections::BinaryHeap;
use core::cmp::Ordering;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;

/// 15-point Kronrod abscissae on [0, 1] side of the symmetric rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

/// Kronrod weights matching `XGK`.
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];

/// 7-point Gauss weights for the odd-indexed abscissae of `XGK`.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Why an adaptive integration gave up.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadratureError {
    /// Refinement stalled before reaching the requested tolerance.
    #[error("quadrature tolerance not reached: estimated error {achieved:e} > requested {requested:e}")]
    ToleranceNotReached { achieved: f64, requested: f64 },
    /// The integrand produced a non-finite value.
    #[error("integrand returned a non-finite value near x = {at}")]
    NonFiniteIntegrand { at: f64 },
}

/// Tolerances and budget for one adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct QuadConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            rel_tol: 1e-12,
            abs_tol: 0.0,
            max_subdivisions: 4000,
        }
    }
}

impl QuadConfig {
    pub fn with_rel_tol(rel_tol: f64) -> Self {
        QuadConfig {
            rel_tol,
            ..QuadConfig::default()
        }
    }
}

/// Value and error estimate of a converged integration.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    abs_value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap by error estimate
        self.error.partial_cmp(&other.error).unwrap_or(Ordering::Equal)
    }
}

/// One Gauss–Kronrod 7/15 evaluation on [a, b].
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<Panel, QuadratureError> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);

    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    let mut res_abs = kronrod.abs();

    let mut fv = [0.0f64; 15];
    fv[7] = fc;
    for (j, &x) in XGK.iter().enumerate().take(7) {
        let dx = half * x;
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv[j] = f1;
        fv[14 - j] = f2;
        let sum = f1 + f2;
        kronrod += WGK[j] * sum;
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * sum;
        }
    }

    let mean = 0.5 * kronrod;
    let mut res_asc = WGK[7] * (fc - mean).abs();
    for (j, &v) in fv.iter().enumerate().take(7) {
        res_asc += WGK[j] * ((v - mean).abs() + (fv[14 - j] - mean).abs());
    }

    let value = kronrod * half;
    let abs_value = res_abs * half.abs();
    res_asc *= half.abs();

    if !value.is_finite() {
        return Err(QuadratureError::NonFiniteIntegrand { at: center });
    }

    // QUADPACK-style error rescaling.
    let mut err = ((kronrod - gauss) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        let scale = (200.0 * err / res_asc).powf(1.5);
        err = if scale < 1.0 { res_asc * scale } else { res_asc };
    }
    if abs_value > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * abs_value);
    }

    Ok(Panel {
        a,
        b,
        value,
        abs_value,
        error: err,
    })
}

/// Adaptive integral of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    cfg: &QuadConfig,
) -> Result<Quadrature, QuadratureError> {
    if a == b {
        return Ok(Quadrature {
            value: 0.0,
            error: 0.0,
        });
    }

    let mut heap = BinaryHeap::new();
    let first = gk15(&f, a, b)?;
    let mut total = first.value;
    let mut total_abs = first.abs_value;
    let mut total_err = first.error;
    heap.push(first);

    let mut splits = 0usize;
    loop {
        let target = cfg.abs_tol.max(cfg.rel_tol * total_abs).max(f64::MIN_POSITIVE);
        if total_err <= target {
            return Ok(Quadrature {
                value: total,
                error: total_err,
            });
        }
        if splits >= cfg.max_subdivisions {
            return Err(QuadratureError::ToleranceNotReached {
                achieved: total_err,
                requested: target,
            });
        }
        let worst = heap.pop().expect("heap holds at least one panel");
        // A panel at floating-point resolution cannot be refined further.
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a.min(worst.b) || mid >= worst.a.max(worst.b) {
            return Err(QuadratureError::ToleranceNotReached {
                achieved: total_err,
                requested: target,
            });
        }
        total -= worst.value;
        total_abs -= worst.abs_value;
        total_err -= worst.error;
        let left = gk15(&f, worst.a, mid)?;
        let right = gk15(&f, mid, worst.b)?;
        total += left.value + right.value;
        total_abs += left.abs_value + right.abs_value;
        total_err += left.error + right.error;
        heap.push(left);
        heap.push(right);
        splits += 1;
    }
}

/// Integral of `f` over `(0, b]`, `b > 0`, where `f(y)` behaves like
/// `y^(-s)` (or milder) as `y -> 0+`, for some `s in [0, 1)`.
///
/// Substituting `y = r^(1/(1-s))` turns the integrand into
/// `f(r^p) * p * r^(p-1)` with `p = 1/(1-s)`, which stays bounded near `r = 0`;
/// the Kronrod nodes are interior, so `f` is never evaluated at the singular
/// endpoint itself.
pub fn integrate_singular_left<F: Fn(f64) -> f64>(
    f: F,
    b: f64,
    s: f64,
    cfg: &QuadConfig,
) -> Result<Quadrature, QuadratureError> {
    debug_assert!(b >= 0.0);
    debug_assert!((0.0..1.0).contains(&s));
    if b == 0.0 {
        return Ok(Quadrature {
            value: 0.0,
            error: 0.0,
        });
    }
    if s == 0.0 {
        return integrate(f, 0.0, b, cfg);
    }
    let p = 1.0 / (1.0 - s);
    let upper = b.powf(1.0 - s);
    integrate(|r: f64| f(r.powf(p)) * p * r.powf(p - 1.0), 0.0, upper, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomial_is_exact() {
        let q = integrate(|x| 3.0 * x * x, 0.0, 2.0, &QuadConfig::default()).unwrap();
        assert_abs_diff_eq!(q.value, 8.0, epsilon = 1e-13);
    }

    #[test]
    fn oscillatory_integrand_converges() {
        let q = integrate(|x| (10.0 * x).sin(), 0.0, 3.0, &QuadConfig::default()).unwrap();
        let exact = (1.0 - (30.0f64).cos()) / 10.0;
        assert_abs_diff_eq!(q.value, exact, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_cancellation_terminates() {
        // Signed total is ~0; termination must key off sum of |panel| values.
        let q = integrate(|x| x, -1.0, 1.0, &QuadConfig::default()).unwrap();
        assert_abs_diff_eq!(q.value, 0.0, epsilon = 1e-13);
    }

    #[test]
    fn kink_integrand_reaches_tight_tolerance() {
        let q = integrate(|x: f64| x.abs().sqrt(), -1.0, 1.0, &QuadConfig::default()).unwrap();
        assert_abs_diff_eq!(q.value, 4.0 / 3.0, epsilon = 1e-11);
    }

    #[test]
    fn singular_substitution_integrates_power_law() {
        // int_0^1 y^(-1/2) dy = 2
        let q =
            integrate_singular_left(|y: f64| y.powf(-0.5), 1.0, 0.5, &QuadConfig::default())
                .unwrap();
        assert_abs_diff_eq!(q.value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_substitution_with_smooth_factor() {
        // int_0^1 y^(-1/4) e^{-y} dy, reference from a deeply refined plain rule
        // away from the endpoint plus the series near zero.
        let s = 0.25;
        let q = integrate_singular_left(
            |y: f64| y.powf(-s) * (-y).exp(),
            1.0,
            s,
            &QuadConfig::default(),
        )
        .unwrap();
        // Independent check: split at 1e-6 and integrate the outer part plainly,
        // with the inner part handled by the leading series.
        let outer = integrate(
            |y: f64| y.powf(-s) * (-y).exp(),
            1e-6,
            1.0,
            &QuadConfig::default(),
        )
        .unwrap()
        .value;
        let eps: f64 = 1e-6;
        let inner = eps.powf(1.0 - s) / (1.0 - s) - eps.powf(2.0 - s) / (2.0 - s);
        assert_abs_diff_eq!(q.value, outer + inner, epsilon = 1e-9);
    }

    #[test]
    fn impossible_tolerance_reports_failure() {
        let cfg = QuadConfig {
            rel_tol: 1e-16,
            abs_tol: 0.0,
            max_subdivisions: 8,
        };
        let r = integrate(|x: f64| (x * 37.0).sin() / (1.0 + x * x), 0.0, 20.0, &cfg);
        assert!(matches!(
            r,
            Err(QuadratureError::ToleranceNotReached { .. })
        ));
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let r = integrate(|x: f64| 1.0 / x, -1.0, 1.0, &QuadConfig::default());
        // 1/x hits the interior node x=0 only after subdivision; either failure
        // mode is acceptable, but it must not return Ok.
        assert!(r.is_err());
    }
}
