//! Cauchy problem data and its Lagrangian discretization.
//!
//! A [`Scenario`] is a finite union of separated open intervals carrying a
//! strictly positive density profile, a velocity profile, a coupling strength,
//! and an interaction kernel. [`Scenario::discretize`] turns it into a
//! [`MarkerSet`]: labels placed by a quadrature rule on each interval
//! separately, with masses `w_i * rho0(alpha_i)` realizing the initial mass
//! measure. Markers never straddle the gaps between intervals.

use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;

use crate::interp::MonotoneCubic;
use crate::kernel::{Extent, Kernel};
use crate::quad::{self, QuadConfig, QuadratureError};
use crate::threshold::{self, ThresholdError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid support geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("density is not strictly positive on the support (rho0({at}) = {value})")]
    NonpositiveDensity { at: f64, value: f64 },
    #[error("total mass is not finite and positive")]
    NonintegrableMass,
    #[error("invalid discretization: {0}")]
    InvalidDiscretization(&'static str),
    #[error("coupling strength must be positive and finite")]
    InvalidCoupling,
    #[error("threshold-width bisection found no sign change on [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// A scalar field given per interval.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Constant(f64),
    /// Coefficients `c0 + c1 x + c2 x^2 + c3 x^3` in the global coordinate;
    /// degree at most 3.
    Polynomial(Vec<f64>),
    /// Sampled values with shape-preserving interpolation.
    Sampled(MonotoneCubic),
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Profile::Constant(c) => *c,
            Profile::Polynomial(coeffs) => {
                coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
            }
            Profile::Sampled(interp) => interp.eval(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Profile::Constant(_) => 0.0,
            Profile::Polynomial(coeffs) => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c),
            Profile::Sampled(interp) => interp.derivative(x),
        }
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Profile::Constant(c) => c * (b - a),
            Profile::Polynomial(coeffs) => {
                let prim = |x: f64| {
                    coeffs
                        .iter()
                        .enumerate()
                        .fold(0.0, |acc, (k, c)| acc + c * x.powi(k as i32 + 1) / (k as f64 + 1.0))
                };
                prim(b) - prim(a)
            }
            Profile::Sampled(interp) => interp.integral(a, b),
        }
    }

    /// `int_a^b x f(x) dx`; closed form except for sampled data, which is
    /// integrated adaptively.
    pub fn first_moment(&self, a: f64, b: f64) -> Result<f64, QuadratureError> {
        match self {
            Profile::Constant(c) => Ok(c * 0.5 * (b * b - a * a)),
            Profile::Polynomial(coeffs) => {
                let prim = |x: f64| {
                    coeffs
                        .iter()
                        .enumerate()
                        .fold(0.0, |acc, (k, c)| acc + c * x.powi(k as i32 + 2) / (k as f64 + 2.0))
                };
                Ok(prim(b) - prim(a))
            }
            Profile::Sampled(interp) => Ok(quad::integrate(
                |x| x * interp.eval(x),
                a,
                b,
                &QuadConfig::default(),
            )?
            .value),
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            Profile::Constant(c) => c.is_finite(),
            Profile::Polynomial(coeffs) => {
                !coeffs.is_empty() && coeffs.len() <= 4 && coeffs.iter().all(|c| c.is_finite())
            }
            Profile::Sampled(_) => true,
        }
    }
}

/// One connected component of the support, with its data.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub left: f64,
    pub right: f64,
    pub rho0: Profile,
    pub u0: Profile,
}

impl Interval {
    pub fn length(&self) -> f64 {
        self.right - self.left
    }

    pub fn contains_closure(&self, x: f64) -> bool {
        x >= self.left && x <= self.right
    }
}

/// Outcome of [`Scenario::validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ValidationReport {
    /// Total mass `int rho0`.
    pub m0: f64,
    /// First moment `int x rho0(x) dx`.
    pub m1: f64,
    pub interval_count: usize,
}

/// Quadrature rule used to place markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureRule {
    Midpoint,
    /// Composite Gauss–Legendre with the given number of nodes per cell;
    /// `n_per_interval` counts cells, so an interval yields
    /// `n_per_interval * order` markers.
    CompositeGauss(u32),
}

/// A full Cauchy problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub intervals: Vec<Interval>,
    pub kappa: f64,
    pub kernel: Kernel,
}

impl Scenario {
    pub fn new(intervals: Vec<Interval>, kappa: f64, kernel: Kernel) -> Result<Self, ScenarioError> {
        let scenario = Scenario {
            intervals,
            kappa,
            kernel,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Confirms interval ordering, strict positivity of the density on a probe
    /// grid, and finiteness of the total mass; reports the mass and its first
    /// moment.
    pub fn validate(&self) -> Result<ValidationReport, ScenarioError> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(ScenarioError::InvalidCoupling);
        }
        if self.intervals.is_empty() {
            return Err(ScenarioError::InvalidGeometry("no intervals"));
        }
        for iv in &self.intervals {
            if !iv.left.is_finite() || !iv.right.is_finite() {
                return Err(ScenarioError::InvalidGeometry("interval endpoints must be finite"));
            }
            if !(iv.right > iv.left) {
                return Err(ScenarioError::InvalidGeometry("interval must have positive length"));
            }
            if !iv.rho0.is_valid() || !iv.u0.is_valid() {
                return Err(ScenarioError::InvalidGeometry(
                    "profiles must have finite coefficients and degree at most 3",
                ));
            }
        }
        for pair in self.intervals.windows(2) {
            if !(pair[1].left > pair[0].right) {
                return Err(ScenarioError::InvalidGeometry(
                    "intervals must be ordered and pairwise separated",
                ));
            }
        }

        let mut m0 = 0.0;
        let mut m1 = 0.0;
        for iv in &self.intervals {
            // strict positivity on an interior probe grid; the density may
            // degenerate toward the open endpoints
            for i in 0..64 {
                let x = iv.left + iv.length() * (i as f64 + 0.5) / 64.0;
                let v = iv.rho0.eval(x);
                if !(v > 0.0) || !v.is_finite() {
                    return Err(ScenarioError::NonpositiveDensity { at: x, value: v });
                }
            }
            m0 += iv.rho0.integral(iv.left, iv.right);
            m1 += iv.rho0.first_moment(iv.left, iv.right)?;
        }
        if !m0.is_finite() || !(m0 > 0.0) || !m1.is_finite() {
            return Err(ScenarioError::NonintegrableMass);
        }
        Ok(ValidationReport {
            m0,
            m1,
            interval_count: self.intervals.len(),
        })
    }

    /// Total mass (validated scenarios only).
    pub fn total_mass(&self) -> f64 {
        self.intervals
            .iter()
            .map(|iv| iv.rho0.integral(iv.left, iv.right))
            .sum()
    }

    /// Supremum of the density over the support, from its representation
    /// (probe grid; exact for constants).
    pub fn sup_rho0(&self) -> f64 {
        let mut sup = 0.0f64;
        for iv in &self.intervals {
            for i in 0..=128 {
                let x = iv.left + iv.length() * i as f64 / 128.0;
                sup = sup.max(iv.rho0.eval(x));
            }
        }
        sup
    }

    /// The interval whose closure contains `x`, if any. Closures are pairwise
    /// disjoint because the intervals are strictly separated.
    pub fn interval_at(&self, x: f64) -> Option<&Interval> {
        self.intervals.iter().find(|iv| iv.contains_closure(x))
    }

    /// Convex hull of the support.
    pub fn hull(&self) -> (f64, f64) {
        (
            self.intervals.first().expect("validated").left,
            self.intervals.last().expect("validated").right,
        )
    }

    /// Density at `x` (0 outside every interval closure).
    pub fn rho0_at(&self, x: f64) -> f64 {
        self.interval_at(x).map_or(0.0, |iv| iv.rho0.eval(x))
    }

    /// Velocity at `x`, defined on the closure of the support.
    pub fn u0_at(&self, x: f64) -> Option<f64> {
        self.interval_at(x).map(|iv| iv.u0.eval(x))
    }

    /// The scenario restricted to a sub-union of its intervals.
    pub fn restrict(&self, indices: &[usize]) -> Result<Scenario, ScenarioError> {
        let intervals = indices
            .iter()
            .filter_map(|&i| self.intervals.get(i).cloned())
            .collect();
        Scenario::new(intervals, self.kappa, self.kernel.clone())
    }

    /// Discretize into mass-weighted markers, `n_per_interval` cells per
    /// interval, never across gaps. At `t = 0`: `X = alpha`, `V = u0(alpha)`,
    /// `q = 1`.
    pub fn discretize(
        &self,
        n_per_interval: usize,
        rule: QuadratureRule,
    ) -> Result<MarkerSet, ScenarioError> {
        self.validate()?;
        if n_per_interval < 2 {
            return Err(ScenarioError::InvalidDiscretization(
                "need at least 2 cells per interval",
            ));
        }
        let (gauss_nodes, gauss_weights) = match rule {
            QuadratureRule::Midpoint => (vec![0.0], vec![2.0]),
            QuadratureRule::CompositeGauss(order) => {
                if order == 0 || order > 16 {
                    return Err(ScenarioError::InvalidDiscretization(
                        "Gauss order must lie in 1..=16",
                    ));
                }
                gauss_legendre(order as usize)
            }
        };

        let mut alphas = Vec::new();
        let mut masses = Vec::new();
        let mut rho0_vals = Vec::new();
        let mut u0_vals = Vec::new();
        let mut groups = Vec::new();
        for iv in &self.intervals {
            let start = alphas.len();
            let h = iv.length() / n_per_interval as f64;
            for cell in 0..n_per_interval {
                let c_left = iv.left + cell as f64 * h;
                let c_mid = c_left + 0.5 * h;
                for (node, weight) in gauss_nodes.iter().zip(&gauss_weights) {
                    let alpha = c_mid + 0.5 * h * node;
                    let w = 0.5 * h * weight;
                    let rho = iv.rho0.eval(alpha);
                    if !(rho > 0.0) {
                        return Err(ScenarioError::NonpositiveDensity {
                            at: alpha,
                            value: rho,
                        });
                    }
                    alphas.push(alpha);
                    masses.push(w * rho);
                    rho0_vals.push(rho);
                    u0_vals.push(iv.u0.eval(alpha));
                }
            }
            groups.push((start, alphas.len()));
        }

        let x = alphas.clone();
        let q = vec![1.0; alphas.len()];
        Ok(MarkerSet {
            alphas,
            masses,
            rho0_vals,
            x,
            v: u0_vals,
            q,
            t: 0.0,
            psi0_vals: None,
            groups,
        })
    }
}

/// The two-interval configuration with unit density and inward constant
/// velocities: support `(-1/2 - delta, -delta) U (delta, 1/2 + delta)`,
/// velocity `+epsilon` on the left component and `-epsilon` on the right.
pub fn hkk_scenario(
    epsilon: f64,
    delta: f64,
    kernel: Kernel,
    kappa: f64,
) -> Result<Scenario, ScenarioError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(ScenarioError::InvalidGeometry("epsilon must be positive"));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(ScenarioError::InvalidGeometry("delta must be positive"));
    }
    Scenario::new(
        vec![
            Interval {
                left: -0.5 - delta,
                right: -delta,
                rho0: Profile::Constant(1.0),
                u0: Profile::Constant(epsilon),
            },
            Interval {
                left: delta,
                right: 0.5 + delta,
                rho0: Profile::Constant(1.0),
                u0: Profile::Constant(-epsilon),
            },
        ],
        kappa,
        kernel,
    )
}

/// The critical half-gap `delta0` for the two-interval configuration: the
/// smallest `delta` (to tolerance `tol`, by bisection) for which
/// `psi0(delta) - psi0(-delta) >= 0`, i.e. for which the label function stops
/// decreasing across the gap. Returns [`Extent::Unbounded`] when no width in
/// the search bracket `[tol, 1e3]` achieves it.
pub fn hkk_delta0(
    epsilon: f64,
    kernel: &Kernel,
    kappa: f64,
    tol: f64,
) -> Result<Extent, ScenarioError> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(ScenarioError::InvalidDiscretization("tolerance must be positive"));
    }
    let gap_sign = |delta: f64| -> Result<f64, ScenarioError> {
        let scenario = hkk_scenario(epsilon, delta, kernel.clone(), kappa)?;
        let hi = threshold::psi0(&scenario, delta).map_err(flatten_threshold)?;
        let lo = threshold::psi0(&scenario, -delta).map_err(flatten_threshold)?;
        Ok(hi - lo)
    };

    let mut lo = tol;
    let mut hi = 1e3;
    let g_hi = gap_sign(hi)?;
    if g_hi < 0.0 {
        return Ok(Extent::Unbounded);
    }
    let g_lo = gap_sign(lo)?;
    if g_lo >= 0.0 {
        // No sign change and the unbounded sentinel does not apply: the
        // threshold sits below the resolvable bracket.
        return Err(ScenarioError::BracketFailure { lo, hi });
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if gap_sign(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Extent::Finite(hi))
}

fn flatten_threshold(e: ThresholdError) -> ScenarioError {
    match e {
        ThresholdError::Quadrature(q) => ScenarioError::Quadrature(q),
        // psi0 is only evaluated at support-closure points here
        _ => ScenarioError::InvalidGeometry("label evaluation failed"),
    }
}

/// Discretized Lagrangian state: labels, masses, positions, velocities,
/// deformation values, and the cached label function.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSet {
    alphas: Vec<f64>,
    masses: Vec<f64>,
    rho0_vals: Vec<f64>,
    /// `(start, end)` index ranges, one per source interval.
    groups: Vec<(usize, usize)>,
    /// `psi0(alpha_i)`, cached by [`crate::threshold::attach_psi0`].
    pub psi0_vals: Option<Vec<f64>>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub t: f64,
}

impl MarkerSet {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn rho0_vals(&self) -> &[f64] {
        &self.rho0_vals
    }

    pub fn groups(&self) -> &[(usize, usize)] {
        &self.groups
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Manual construction, mainly for tests and small closed-form checks.
    pub fn from_raw(
        alphas: Vec<f64>,
        masses: Vec<f64>,
        rho0_vals: Vec<f64>,
        u0_vals: Vec<f64>,
    ) -> MarkerSet {
        assert!(alphas.windows(2).all(|w| w[1] > w[0]), "labels must increase");
        assert!(masses.iter().all(|&m| m > 0.0), "masses must be positive");
        let n = alphas.len();
        assert_eq!(masses.len(), n);
        assert_eq!(rho0_vals.len(), n);
        assert_eq!(u0_vals.len(), n);
        MarkerSet {
            x: alphas.clone(),
            groups: vec![(0, n)],
            alphas,
            masses,
            rho0_vals,
            psi0_vals: None,
            v: u0_vals,
            q: vec![1.0; n],
            t: 0.0,
        }
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// Legendre polynomial.
fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n {
        // Chebyshev-based initial guess, then Newton.
        let mut x = (core::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[n - 1 - k] = x;
        weights[n - 1 - k] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
