//! The conserved label function `psi0`, its derivative `e0`, the monotonicity
//! classification that separates global existence from finite-time blowup, the
//! small-separation modulus condition, and the monotone extension of the data
//! to the whole line.
//!
//! `psi0(alpha) = u0(alpha) + kappa * int_Omega Phi(alpha - gamma) rho0(gamma) dgamma`
//! is constant along Lagrangian trajectories; whether it increases on the
//! support decides the fate of the solution. Classification happens on a
//! marker grid and is tolerance-based: a flat band of width
//! `flat_tol * (alpha_{i+1} - alpha_i)` separates "strictly increasing" from
//! "monotone" from "non-monotone".

use alloc::vec::Vec;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;

use crate::interp::MonotoneCubic;
use crate::kernel::Kernel;
use crate::quad::{self, QuadConfig, QuadratureError};
use crate::scenario::{MarkerSet, Scenario};

/// Default flat-band width per unit label distance for classification.
pub const DEFAULT_FLAT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ThresholdError {
    #[error("label {alpha} lies outside the closure of the support")]
    OutOfDomain { alpha: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("pair is not a monotonicity violation (psi(alpha) <= psi(beta))")]
    NotAViolation,
    #[error("data classify as non-monotone; no monotone extension exists")]
    NotMonotone,
    #[error("modulus parameters invalid: {0}")]
    InvalidModulus(&'static str),
    #[error("marker set has no cached psi0 values")]
    MissingPsi0,
}

/// `int_{d0}^{d1} k(d) w(d) dd` where `k(d)` may behave like `d^{-s}` at the
/// origin. The singular endpoint is removed by the power substitution; away
/// from zero the integrand is smooth and integrated directly.
fn kernel_distance_integral<K, W>(
    k: K,
    w: W,
    d0: f64,
    d1: f64,
    s: f64,
    cfg: &QuadConfig,
) -> Result<f64, QuadratureError>
where
    K: Fn(f64) -> f64,
    W: Fn(f64) -> f64,
{
    debug_assert!(d0 >= 0.0 && d1 >= d0);
    if d1 == d0 {
        return Ok(0.0);
    }
    let f = |d: f64| k(d) * w(d);
    if d0 == 0.0 {
        Ok(quad::integrate_singular_left(f, d1, s, cfg)?.value)
    } else {
        Ok(quad::integrate(f, d0, d1, cfg)?.value)
    }
}

/// `(Phi * rho0)(x) = int_Omega Phi(x - gamma) rho0(gamma) dgamma`, defined for
/// every real `x`. The integrand has a kink at `gamma = x`, which becomes a
/// panel endpoint, never a quadrature node.
pub fn primitive_convolution(scenario: &Scenario, x: f64) -> Result<f64, ThresholdError> {
    let cfg = QuadConfig::default();
    let kernel = &scenario.kernel;
    let s = kernel.constants().s;
    let phi_prim = |d: f64| kernel.primitive(d).unwrap_or(f64::NAN);
    let mut total = 0.0;
    for iv in &scenario.intervals {
        let piece = if x <= iv.left {
            -kernel_distance_integral(
                &phi_prim,
                |d| iv.rho0.eval(x + d),
                iv.left - x,
                iv.right - x,
                s,
                &cfg,
            )?
        } else if x >= iv.right {
            kernel_distance_integral(
                &phi_prim,
                |d| iv.rho0.eval(x - d),
                x - iv.right,
                x - iv.left,
                s,
                &cfg,
            )?
        } else {
            kernel_distance_integral(&phi_prim, |d| iv.rho0.eval(x - d), 0.0, x - iv.left, s, &cfg)?
                - kernel_distance_integral(
                    &phi_prim,
                    |d| iv.rho0.eval(x + d),
                    0.0,
                    iv.right - x,
                    s,
                    &cfg,
                )?
        };
        total += piece;
    }
    Ok(total)
}

/// `(phi * rho0)(x)`, defined for every real `x`; for weakly singular kernels
/// the interior singularity at `gamma = x` is handled by the power
/// substitution.
pub fn phi_convolution(scenario: &Scenario, x: f64) -> Result<f64, ThresholdError> {
    let cfg = QuadConfig::default();
    let kernel = &scenario.kernel;
    let s = kernel.constants().s;
    let phi = |d: f64| kernel.phi_abs(d);
    let mut total = 0.0;
    for iv in &scenario.intervals {
        let piece = if x <= iv.left {
            kernel_distance_integral(&phi, |d| iv.rho0.eval(x + d), iv.left - x, iv.right - x, s, &cfg)?
        } else if x >= iv.right {
            kernel_distance_integral(&phi, |d| iv.rho0.eval(x - d), x - iv.right, x - iv.left, s, &cfg)?
        } else {
            kernel_distance_integral(&phi, |d| iv.rho0.eval(x - d), 0.0, x - iv.left, s, &cfg)?
                + kernel_distance_integral(&phi, |d| iv.rho0.eval(x + d), 0.0, iv.right - x, s, &cfg)?
        };
        total += piece;
    }
    Ok(total)
}

/// The conserved label function at `alpha`, which must lie in the closure of
/// the support (boundary values are one-sided limits).
pub fn psi0(scenario: &Scenario, alpha: f64) -> Result<f64, ThresholdError> {
    let iv = scenario
        .interval_at(alpha)
        .ok_or(ThresholdError::OutOfDomain { alpha })?;
    Ok(iv.u0.eval(alpha) + scenario.kappa * primitive_convolution(scenario, alpha)?)
}

/// `e0(alpha) = u0'(alpha) + kappa * (phi * rho0)(alpha)`, the derivative of
/// the label function.
pub fn e0(scenario: &Scenario, alpha: f64) -> Result<f64, ThresholdError> {
    let iv = scenario
        .interval_at(alpha)
        .ok_or(ThresholdError::OutOfDomain { alpha })?;
    Ok(iv.u0.derivative(alpha) + scenario.kappa * phi_convolution(scenario, alpha)?)
}

/// Evaluate and cache `psi0` at every marker label.
pub fn attach_psi0(scenario: &Scenario, markers: &mut MarkerSet) -> Result<(), ThresholdError> {
    let mut vals = Vec::with_capacity(markers.len());
    for &alpha in markers.alphas() {
        vals.push(psi0(scenario, alpha)?);
    }
    markers.psi0_vals = Some(vals);
    Ok(())
}

/// `e0` at every marker label (the frozen slope input of the deformation
/// equation).
pub fn e0_at_markers(scenario: &Scenario, markers: &MarkerSet) -> Result<Vec<f64>, ThresholdError> {
    markers.alphas().iter().map(|&a| e0(scenario, a)).collect()
}

/// Monotonicity classes of the label function on a marker grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Classification {
    StrictlyIncreasing,
    MonotoneNonStrict,
    NonMonotone,
}

/// A marker pair relevant to the classification: a flat pair for monotone
/// non-strict data, or a violating pair (with its blowup time bound) for
/// non-monotone data.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Witness {
    pub alpha: f64,
    pub beta: f64,
    pub psi_alpha: f64,
    pub psi_beta: f64,
    /// `psi_beta - psi_alpha` (negative for violations).
    pub psi_gap: f64,
    /// Upper bound on the existence time implied by the pair; present only for
    /// violations.
    pub blowup_bound: Option<f64>,
}

/// Result of the modulus condition check `psi_gap >= c * separation^mu` at
/// small separations.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ModulusRecord {
    pub mu: f64,
    pub c: f64,
    pub r1: f64,
    /// Whether every marker pair with separation below `r1` satisfies the bound.
    pub satisfied: bool,
    /// Whether the exponent is usable for the convolution estimate:
    /// `mu < (1 - s) / s` (always true for bounded kernels).
    pub admissible: bool,
}

/// Classification outcome, the witnesses backing it, and optionally a modulus
/// record attached afterwards.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ThresholdReport {
    pub classification: Classification,
    /// Minimum slope of `psi0` over consecutive marker pairs (gaps included).
    pub min_slope: f64,
    pub witnesses: Vec<Witness>,
    pub modulus: Option<ModulusRecord>,
}

impl ThresholdReport {
    /// Smallest blowup time bound over all witnesses, if any.
    pub fn min_blowup_bound(&self) -> Option<f64> {
        self.witnesses
            .iter()
            .filter_map(|w| w.blowup_bound)
            .fold(None, |acc, b| Some(acc.map_or(b, |a: f64| a.min(b))))
    }
}

/// Upper bound on the existence time implied by a decreasing pair of label
/// values: `(beta - alpha) / (kappa * (psi_a - psi_b))`.
///
/// When the supplied values already include the coupling factor (as the cached
/// marker values do), pass `kappa = 1` so the coupling is not applied twice.
pub fn blowup_time_bound(
    alpha: f64,
    beta: f64,
    psi_a: f64,
    psi_b: f64,
    kappa: f64,
) -> Result<f64, ThresholdError> {
    if !(psi_a > psi_b) {
        return Err(ThresholdError::NotAViolation);
    }
    debug_assert!(beta > alpha);
    Ok((beta - alpha) / (kappa * (psi_a - psi_b)))
}

/// Classify the cached label values on the marker grid.
///
/// Consecutive differences (including across support gaps) decide the class;
/// for non-monotone data every violating pair `(i, j)`, `i < j`, is reported
/// with its blowup time bound. The cached values already carry the coupling
/// factor, so the bound is evaluated with unit coupling.
pub fn classify(markers: &MarkerSet, flat_tol: f64) -> Result<ThresholdReport, ThresholdError> {
    let psi = markers
        .psi0_vals
        .as_ref()
        .ok_or(ThresholdError::MissingPsi0)?;
    let alphas = markers.alphas();
    let n = alphas.len();

    let mut min_slope = f64::INFINITY;
    let mut any_flat = false;
    let mut any_violation = false;
    for i in 0..n.saturating_sub(1) {
        let da = alphas[i + 1] - alphas[i];
        let dpsi = psi[i + 1] - psi[i];
        min_slope = min_slope.min(dpsi / da);
        if dpsi < -flat_tol * da {
            any_violation = true;
        } else if dpsi <= flat_tol * da {
            any_flat = true;
        }
    }

    let (classification, witnesses) = if any_violation {
        let mut witnesses = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let da = alphas[j] - alphas[i];
                if psi[i] - psi[j] > flat_tol * da {
                    let bound = blowup_time_bound(alphas[i], alphas[j], psi[i], psi[j], 1.0)?;
                    witnesses.push(Witness {
                        alpha: alphas[i],
                        beta: alphas[j],
                        psi_alpha: psi[i],
                        psi_beta: psi[j],
                        psi_gap: psi[j] - psi[i],
                        blowup_bound: Some(bound),
                    });
                }
            }
        }
        (Classification::NonMonotone, witnesses)
    } else if any_flat {
        let mut witnesses = Vec::new();
        for i in 0..n - 1 {
            let da = alphas[i + 1] - alphas[i];
            let dpsi = psi[i + 1] - psi[i];
            if dpsi <= flat_tol * da {
                witnesses.push(Witness {
                    alpha: alphas[i],
                    beta: alphas[i + 1],
                    psi_alpha: psi[i],
                    psi_beta: psi[i + 1],
                    psi_gap: dpsi,
                    blowup_bound: None,
                });
            }
        }
        (Classification::MonotoneNonStrict, witnesses)
    } else {
        (Classification::StrictlyIncreasing, Vec::new())
    };

    Ok(ThresholdReport {
        classification,
        min_slope,
        witnesses,
        modulus: None,
    })
}

/// Check `psi(beta) - psi(alpha) >= c (beta - alpha)^mu` over all marker pairs
/// with separation below `r1`, and report whether the exponent is admissible
/// for the convolution estimate.
pub fn modulus_check(
    markers: &MarkerSet,
    mu: f64,
    c: f64,
    r1: f64,
    kernel: &Kernel,
) -> Result<ModulusRecord, ThresholdError> {
    if !(mu > 1.0) {
        return Err(ThresholdError::InvalidModulus("mu must exceed 1"));
    }
    if !(r1 > 0.0) || !kernel.constants().r0.exceeds(r1) {
        return Err(ThresholdError::InvalidModulus("need 0 < R1 < R0"));
    }
    let psi = markers
        .psi0_vals
        .as_ref()
        .ok_or(ThresholdError::MissingPsi0)?;
    let alphas = markers.alphas();
    let mut satisfied = true;
    'outer: for i in 0..alphas.len() {
        for j in i + 1..alphas.len() {
            let sep = alphas[j] - alphas[i];
            if sep >= r1 {
                break;
            }
            if psi[j] - psi[i] < c * sep.powf(mu) {
                satisfied = false;
                break 'outer;
            }
        }
    }
    let s = kernel.constants().s;
    let admissible = if s > 0.0 { mu < (1.0 - s) / s } else { true };
    Ok(ModulusRecord {
        mu,
        c,
        r1,
        satisfied,
        admissible,
    })
}

/// Largest coefficient `c` for which the modulus condition holds on the grid:
/// the minimum of `psi_gap / separation^mu` over pairs with separation below
/// `r1`. `None` when no pair qualifies.
pub fn fit_modulus_coef(markers: &MarkerSet, mu: f64, r1: f64) -> Option<f64> {
    let psi = markers.psi0_vals.as_ref()?;
    let alphas = markers.alphas();
    let mut best: Option<f64> = None;
    for i in 0..alphas.len() {
        for j in i + 1..alphas.len() {
            let sep = alphas[j] - alphas[i];
            if sep >= r1 {
                break;
            }
            let ratio = (psi[j] - psi[i]) / sep.powf(mu);
            best = Some(best.map_or(ratio, |b: f64| b.min(ratio)));
        }
    }
    best
}

/// The monotone extension of the label function to the whole line, together
/// with the extended velocity it induces.
#[derive(Debug, Clone)]
pub struct MonotoneExtension {
    scenario: Scenario,
    /// One bridge per support gap; `None` bridges degenerate to the constant
    /// left value.
    bridges: Vec<Option<MonotoneCubic>>,
    /// `psi0` at the left end of the first interval and right end of the last.
    hull_values: (f64, f64),
    /// Gap boundaries `(right_{j}, left_{j+1})` with their label values.
    gaps: Vec<GapData>,
}

#[derive(Debug, Clone, Copy)]
struct GapData {
    right_end: f64,
    left_next: f64,
    psi_right: f64,
}

impl MonotoneExtension {
    /// Extended label function; agrees with `psi0` on the support, bridges the
    /// gaps monotonically, and continues as a constant outside the hull.
    pub fn psi_tilde(&self, x: f64) -> Result<f64, ThresholdError> {
        let (lo, hi) = self.scenario.hull();
        if x <= lo {
            return Ok(self.hull_values.0);
        }
        if x >= hi {
            return Ok(self.hull_values.1);
        }
        if self.scenario.interval_at(x).is_some() {
            return psi0(&self.scenario, x);
        }
        for (gap, bridge) in self.gaps.iter().zip(&self.bridges) {
            if x >= gap.right_end && x <= gap.left_next {
                return Ok(match bridge {
                    Some(b) => b.eval(x),
                    None => gap.psi_right,
                });
            }
        }
        // Unreachable for validated scenarios: every point is in an interval
        // closure, a gap, or outside the hull.
        Err(ThresholdError::OutOfDomain { alpha: x })
    }

    /// Extended velocity `u_tilde(x) = psi_tilde(x) - kappa (Phi * rho0)(x)`,
    /// defined on the whole line and equal to `u0` on the support.
    pub fn u_tilde(&self, x: f64) -> Result<f64, ThresholdError> {
        Ok(self.psi_tilde(x)?
            - self.scenario.kappa * primitive_convolution(&self.scenario, x)?)
    }
}

/// Construct the monotone extension. Fails with [`ThresholdError::NotMonotone`]
/// when the marker grid classifies as non-monotone.
pub fn monotone_extension(
    scenario: &Scenario,
    markers: &MarkerSet,
) -> Result<MonotoneExtension, ThresholdError> {
    let report = classify(markers, DEFAULT_FLAT_TOL)?;
    if report.classification == Classification::NonMonotone {
        return Err(ThresholdError::NotMonotone);
    }

    let first = scenario.intervals.first().expect("validated scenario");
    let last = scenario.intervals.last().expect("validated scenario");
    let hull_values = (psi0(scenario, first.left)?, psi0(scenario, last.right)?);

    let mut bridges = Vec::new();
    let mut gaps = Vec::new();
    for pair in scenario.intervals.windows(2) {
        let right_end = pair[0].right;
        let left_next = pair[1].left;
        let psi_right = psi0(scenario, right_end)?;
        let psi_left_next = psi0(scenario, left_next)?;
        let bridge = if psi_left_next > psi_right {
            let d0 = e0(scenario, right_end)?;
            let d1 = e0(scenario, left_next)?;
            Some(
                MonotoneCubic::bridge(right_end, left_next, psi_right, psi_left_next, d0, d1)
                    .expect("gap has positive width and finite label values"),
            )
        } else {
            // Equal (or flat-band) boundary values force a constant bridge.
            None
        };
        bridges.push(bridge);
        gaps.push(GapData {
            right_end,
            left_next,
            psi_right,
        });
    }

    Ok(MonotoneExtension {
        scenario: scenario.clone(),
        bridges,
        hull_values,
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::PhiForm;
    use crate::scenario::{Interval, Profile, QuadratureRule};
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn constant_kernel(c: f64) -> Kernel {
        Kernel::new(PhiForm::Constant { c }).unwrap()
    }

    fn unit_scenario(u0: Profile, kappa: f64, kernel: Kernel) -> Scenario {
        Scenario::new(
            vec![Interval {
                left: 0.0,
                right: 1.0,
                rho0: Profile::Constant(1.0),
                u0,
            }],
            kappa,
            kernel,
        )
        .unwrap()
    }

    #[test]
    fn psi0_linear_closed_form() {
        // constant kernel on (0,1) with unit density: psi0(a) = a - 1/2
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        for a in [0.0, 0.25, 0.5, 0.9, 1.0] {
            assert_abs_diff_eq!(psi0(&s, a).unwrap(), a - 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn psi0_reduces_to_velocity_without_coupling() {
        // kappa must stay positive; a vanishingly small coupling approximates
        // the uncoupled limit.
        let s = unit_scenario(Profile::Polynomial(vec![0.2, 1.0]), 1e-300, constant_kernel(1.0));
        assert_abs_diff_eq!(psi0(&s, 0.3).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn psi0_power_law_closed_form() {
        // phi = |x|^{-1/2} untruncated on the unit interval:
        // psi0(a) = (4/3)(a^{3/2} - (1-a)^{3/2})
        let kernel = Kernel::new(PhiForm::PowerLawTruncated {
            s: 0.5,
            coef: 1.0,
            r_cut: 2.0,
        })
        .unwrap();
        let s = unit_scenario(Profile::Constant(0.0), 1.0, kernel);
        for a in [0.1, 0.3, 0.5, 0.75, 1.0] {
            let exact = (4.0 / 3.0) * (a.powf(1.5) - (1.0 - a).powf(1.5));
            assert_abs_diff_eq!(psi0(&s, a).unwrap(), exact, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(psi0(&s, 1.0).unwrap(), 4.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn psi0_rejects_points_outside_the_closure() {
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        assert!(matches!(
            psi0(&s, 1.5),
            Err(ThresholdError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn e0_constant_kernel_is_total_mass() {
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        for a in [0.1, 0.5, 0.99] {
            assert_abs_diff_eq!(e0(&s, a).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn e0_matches_centered_differences_of_psi0() {
        let kernel = Kernel::new(PhiForm::ExponentialDecay { c: 1.0, a: 1.0 }).unwrap();
        let s = unit_scenario(Profile::Polynomial(vec![0.0, 0.3]), 1.5, kernel);
        let a = 0.4;
        let exact = e0(&s, a).unwrap();
        let fd = |h: f64| (psi0(&s, a + h).unwrap() - psi0(&s, a - h).unwrap()) / (2.0 * h);
        let e1 = (fd(1e-2) - exact).abs();
        let e2 = (fd(5e-3) - exact).abs();
        // second-order convergence: quartering the error when halving h
        assert!(e2 < e1 * 0.3, "e1={e1:e} e2={e2:e}");
        assert!(e2 < 1e-5);
    }

    #[test]
    fn e0_with_singular_kernel() {
        // phi = |x|^{-1/4} untruncated on (0,1):
        // phi*rho(a) = (a^{3/4} + (1-a)^{3/4}) / (3/4)
        let kernel = Kernel::new(PhiForm::PowerLawTruncated {
            s: 0.25,
            coef: 1.0,
            r_cut: 2.0,
        })
        .unwrap();
        let s = unit_scenario(Profile::Constant(0.0), 1.0, kernel);
        for a in [0.2, 0.5, 0.8] {
            let exact = (a.powf(0.75) + (1.0 - a).powf(0.75)) / 0.75;
            assert_abs_diff_eq!(e0(&s, a).unwrap(), exact, epsilon = 1e-10);
        }
    }

    #[test]
    fn classify_linear_increasing() {
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        let mut m = s.discretize(50, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        let r = classify(&m, DEFAULT_FLAT_TOL).unwrap();
        assert_eq!(r.classification, Classification::StrictlyIncreasing);
        assert_abs_diff_eq!(r.min_slope, 1.0, epsilon = 1e-9);
        assert!(r.witnesses.is_empty());
    }

    #[test]
    fn classify_flat_label_function() {
        // u0 = kappa*(1/2 - x) cancels the convolution: psi0 == 0
        let s = unit_scenario(Profile::Polynomial(vec![0.5, -1.0]), 1.0, constant_kernel(1.0));
        let mut m = s.discretize(20, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        let r = classify(&m, DEFAULT_FLAT_TOL).unwrap();
        assert_eq!(r.classification, Classification::MonotoneNonStrict);
        assert!(!r.witnesses.is_empty());
        assert!(r.witnesses.iter().all(|w| w.blowup_bound.is_none()));
    }

    #[test]
    fn classify_two_interval_violation() {
        // inward velocities with a narrow gap: the label function drops across it
        let kernel = constant_kernel(1.0);
        let s = crate::scenario::hkk_scenario(0.1, 0.05, kernel, 1.0).unwrap();
        let mut m = s.discretize(40, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        let r = classify(&m, DEFAULT_FLAT_TOL).unwrap();
        assert_eq!(r.classification, Classification::NonMonotone);
        // the reported gap across the two components matches the closed form
        // psi0(d) - psi0(-d) = -2 eps + 2 kappa d at the innermost marker pair
        let worst = r
            .witnesses
            .iter()
            .min_by(|a, b| a.psi_gap.partial_cmp(&b.psi_gap).unwrap())
            .unwrap();
        assert!(worst.alpha < 0.0 && worst.beta > 0.0);
        assert!(r.min_blowup_bound().unwrap() > 0.0);
        assert!(r.witnesses.iter().all(|w| {
            let b = w.blowup_bound.unwrap();
            b.is_finite() && b > 0.0
        }));
    }

    #[test]
    fn blowup_bound_formula() {
        let b = blowup_time_bound(0.0, 0.5, 0.25, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(b, 2.0, epsilon = 1e-15);
        let half = blowup_time_bound(0.0, 0.5, 0.25, 0.0, 2.0).unwrap();
        assert_abs_diff_eq!(half, 1.0, epsilon = 1e-15);
        assert!(matches!(
            blowup_time_bound(0.0, 0.5, 0.0, 0.25, 1.0),
            Err(ThresholdError::NotAViolation)
        ));
    }

    #[test]
    fn modulus_admissibility_table() {
        let k25 = Kernel::new(PhiForm::PowerLawTruncated {
            s: 0.25,
            coef: 1.0,
            r_cut: 1.0,
        })
        .unwrap();
        let k50 = Kernel::new(PhiForm::PowerLawTruncated {
            s: 0.5,
            coef: 1.0,
            r_cut: 1.0,
        })
        .unwrap();
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        let mut m = s.discretize(10, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();

        let r = modulus_check(&m, 2.0, 1e-6, 0.5, &k25).unwrap();
        assert!(r.admissible);
        let r = modulus_check(&m, 3.0, 1e-6, 0.5, &k25).unwrap();
        assert!(!r.admissible);
        for mu in [1.5, 2.0, 4.0] {
            let r = modulus_check(&m, mu, 1e-6, 0.5, &k50).unwrap();
            assert!(!r.admissible);
        }
    }

    #[test]
    fn modulus_satisfaction_linear_psi() {
        // psi(a) = a - 1/2 has unit slope: gap >= gap^2 for separations < 1
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        let mut m = s.discretize(30, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        let k = constant_kernel(1.0);
        let r = modulus_check(&m, 2.0, 1.0, 0.5, &k).unwrap();
        assert!(r.satisfied);
        // an absurdly large coefficient must fail
        let r = modulus_check(&m, 2.0, 1e6, 0.5, &k).unwrap();
        assert!(!r.satisfied);
    }

    #[test]
    fn fitted_coefficient_saturates_the_grid() {
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        let mut m = s.discretize(30, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        let c = fit_modulus_coef(&m, 2.0, 0.5).unwrap();
        let k = constant_kernel(1.0);
        assert!(modulus_check(&m, 2.0, c * (1.0 - 1e-12), 0.5, &k).unwrap().satisfied);
        assert!(!modulus_check(&m, 2.0, c * (1.0 + 1e-9), 0.5, &k).unwrap().satisfied);
    }

    #[test]
    fn extension_clamps_outside_the_hull() {
        let s = unit_scenario(Profile::Constant(0.0), 1.0, constant_kernel(1.0));
        let mut m = s.discretize(30, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        let ext = monotone_extension(&s, &m).unwrap();
        // psi_tilde = clamp(x - 1/2, -1/2, 1/2)
        assert_abs_diff_eq!(ext.psi_tilde(-3.0).unwrap(), -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ext.psi_tilde(0.25).unwrap(), -0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(ext.psi_tilde(7.0).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn extension_recovers_velocity_on_support() {
        let kernel = Kernel::new(PhiForm::ExponentialDecay { c: 1.0, a: 2.0 }).unwrap();
        let s = Scenario::new(
            vec![
                Interval {
                    left: 0.0,
                    right: 1.0,
                    rho0: Profile::Constant(1.0),
                    u0: Profile::Polynomial(vec![0.0, 0.2]),
                },
                Interval {
                    left: 1.5,
                    right: 2.5,
                    rho0: Profile::Constant(1.0),
                    u0: Profile::Polynomial(vec![0.1, 0.2]),
                },
            ],
            1.0,
            kernel,
        )
        .unwrap();
        let mut m = s.discretize(40, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        let ext = monotone_extension(&s, &m).unwrap();
        for &x in &[0.1, 0.6, 0.95, 1.6, 2.2] {
            assert_abs_diff_eq!(ext.u_tilde(x).unwrap(), s.u0_at(x).unwrap(), epsilon = 1e-10);
        }
        // bridge stays monotone and between the boundary values
        let lo = psi0(&s, 1.0).unwrap();
        let hi = psi0(&s, 1.5).unwrap();
        assert!(hi > lo);
        let mut prev = lo;
        for i in 0..=100 {
            let x = 1.0 + 0.5 * i as f64 / 100.0;
            let v = ext.psi_tilde(x).unwrap();
            assert!(v >= prev - 1e-12);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn extension_refuses_non_monotone_data() {
        let s = crate::scenario::hkk_scenario(0.1, 0.05, constant_kernel(1.0), 1.0).unwrap();
        let mut m = s.discretize(20, QuadratureRule::Midpoint).unwrap();
        attach_psi0(&s, &mut m).unwrap();
        assert!(matches!(
            monotone_extension(&s, &m),
            Err(ThresholdError::NotMonotone)
        ));
    }

    #[test]
    fn psi0_is_affine_in_kappa() {
        let kernel = Kernel::new(PhiForm::ExponentialDecay { c: 1.0, a: 1.0 }).unwrap();
        let (k1, k2) = (0.7, 1.9);
        let s1 = unit_scenario(Profile::Polynomial(vec![0.1, 0.4]), k1, kernel.clone());
        let s2 = unit_scenario(Profile::Polynomial(vec![0.1, 0.4]), k2, kernel);
        for a in [0.2, 0.5, 0.8] {
            let u = 0.1 + 0.4 * a;
            let g1 = psi0(&s1, a).unwrap() - u;
            let g2 = psi0(&s2, a).unwrap() - u;
            assert_abs_diff_eq!(g2, (k2 / k1) * g1, epsilon = 1e-9);
        }
    }

    #[test]
    fn hkk_delta0_constant_kernel_closed_form() {
        // psi0(d) - psi0(-d) = -2 eps + 2 kappa d, so delta0 = eps / kappa
        let k = constant_kernel(1.0);
        let d = crate::scenario::hkk_delta0(0.1, &k, 1.0, 1e-10).unwrap();
        assert_abs_diff_eq!(d.finite().unwrap(), 0.1, epsilon = 1e-9);
        let d = crate::scenario::hkk_delta0(0.1, &k, 2.0, 1e-10).unwrap();
        assert_abs_diff_eq!(d.finite().unwrap(), 0.05, epsilon = 1e-9);
    }

    #[test]
    fn hkk_delta0_bisection_self_consistency() {
        let k = Kernel::new(PhiForm::ExponentialDecay { c: 1.0, a: 1.0 }).unwrap();
        let d = crate::scenario::hkk_delta0(0.1, &k, 1.0, 1e-12)
            .unwrap()
            .finite()
            .unwrap();
        let s = crate::scenario::hkk_scenario(0.1, d, k, 1.0).unwrap();
        let residual = psi0(&s, d).unwrap() - psi0(&s, -d).unwrap();
        assert!(residual.abs() < 1e-10, "residual {residual:e}");
    }

    #[test]
    fn hkk_delta0_monotone_in_coupling_and_velocity() {
        let k = Kernel::new(PhiForm::ExponentialDecay { c: 1.0, a: 1.0 }).unwrap();
        let d = |eps: f64, kappa: f64| {
            crate::scenario::hkk_delta0(eps, &k, kappa, 1e-10)
                .unwrap()
                .finite()
                .unwrap()
        };
        assert!(d(0.1, 2.0) <= d(0.1, 1.0));
        assert!(d(0.1, 1.0) <= d(0.1, 0.5));
        assert!(d(0.05, 1.0) <= d(0.1, 1.0));
        assert!(d(0.1, 1.0) <= d(0.2, 1.0));
    }
}
