//! Closed-form trajectory bounds and certification of simulation runs.
//!
//! The evaluators mirror the estimates that come out of the pair-separation
//! equation: an exponential-relaxation lower bound on the deformation, an
//! exponential-relaxation lower bound on pair separations for bounded kernels,
//! uniform-in-time lower and upper separation bounds for weakly singular
//! kernels, and a uniform bound on the alignment convolution built from the
//! small-separation modulus of the label function.
//!
//! [`certify`] evaluates every applicable bound against a recorded run at its
//! output samples and reports the worst signed margin per bound: lower bounds
//! report `observed - bound`, upper bounds `bound - observed`; a check passes
//! when its worst margin stays above `-max(rel_tol * |bound|, abs_floor)`.
//!
//! Coupling convention: the bound formulas take the product `kappa * phi` as
//! the effective protocol, so `Lambda`, `lambda`, and sup-norm rates are
//! scaled by `kappa` exactly once, and label-gap inputs are the cached
//! `psi0` values which already carry the coupling.

use alloc::vec::Vec;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;

use crate::dynamics::{EventKind, TrajectoryRecord};
use crate::kernel::{Extent, Kernel};
use crate::scenario::{MarkerSet, Scenario};
use crate::threshold::{Classification, ModulusRecord, ThresholdError, ThresholdReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BoundsError {
    #[error("bound hypothesis violated: {0}")]
    HypothesisViolated(&'static str),
    #[error("modulus exponent is not admissible: mu * s / (1 - s) >= 1")]
    NotAdmissible,
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error("record and marker set disagree: {0}")]
    RecordMismatch(&'static str),
}

/// Lower bound on the deformation value at time `t` under a uniform
/// convolution rate `c_rate`:
/// `exp(-C t) + (psi0'/C) (1 - exp(-C t))`.
pub fn deformation_lower(t: f64, psi0_prime: f64, c_rate: f64) -> Result<f64, BoundsError> {
    if !(c_rate > 0.0) {
        return Err(BoundsError::HypothesisViolated("convolution rate must be positive"));
    }
    if psi0_prime < 0.0 {
        return Err(BoundsError::HypothesisViolated("psi0' must be nonnegative"));
    }
    let decay = (-c_rate * t).exp();
    Ok(decay + psi0_prime / c_rate * (1.0 - decay))
}

/// Lower bound on a pair separation for bounded kernels:
/// `d0 exp(-K t) + (psi_gap/K)(1 - exp(-K t))` with `K = kappa |phi|_sup M0`.
pub fn separation_lower_smooth(t: f64, d0: f64, psi_gap: f64, k_rate: f64) -> Result<f64, BoundsError> {
    if !(k_rate > 0.0) {
        return Err(BoundsError::HypothesisViolated("relaxation rate must be positive"));
    }
    if psi_gap < 0.0 {
        return Err(BoundsError::HypothesisViolated("label gap must be nonnegative"));
    }
    let decay = (-k_rate * t).exp();
    Ok(d0 * decay + psi_gap / k_rate * (1.0 - decay))
}

/// Uniform-in-time separation bounds for weakly singular kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SingularLowerBound {
    /// `inf_t X >= min{d0, ((1-s) psi_gap / (2^s Lambda M0))^{1/(1-s)}, 2 R0}`.
    pub inf_bound: f64,
    /// The large-time floor: the same minimum without the `d0` entry.
    pub liminf_bound: f64,
    /// Set when `d0` lies below the floor; the separation then increases
    /// monotonically at least until it reaches the floor.
    pub monotone_until_liminf: bool,
}

/// Lower bound parameters: `lambda_up` is the near-origin upper coefficient of
/// the *unscaled* kernel; pass the coupling separately.
pub fn separation_lower_singular(
    d0: f64,
    psi_gap: f64,
    s: f64,
    lambda_up: f64,
    kappa: f64,
    m0: f64,
    r0: Extent,
) -> Result<SingularLowerBound, BoundsError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(BoundsError::HypothesisViolated("need s in (0, 1)"));
    }
    if !(lambda_up > 0.0 && kappa > 0.0 && m0 > 0.0) {
        return Err(BoundsError::HypothesisViolated("need positive Lambda, kappa, M0"));
    }
    let mid = if psi_gap > 0.0 {
        ((1.0 - s) * psi_gap / ((2.0f64).powf(s) * kappa * lambda_up * m0)).powf(1.0 / (1.0 - s))
    } else {
        0.0
    };
    let liminf_bound = match r0 {
        Extent::Finite(r) => mid.min(2.0 * r),
        Extent::Unbounded => mid,
    };
    Ok(SingularLowerBound {
        inf_bound: liminf_bound.min(d0),
        liminf_bound,
        monotone_until_liminf: d0 < liminf_bound,
    })
}

/// Uniform-in-time upper bound on a pair separation:
/// `max{d0, ((1-s) psi_gap / (lambda m_ab))^{1/(1-s)}}`, valid under the
/// hypothesis that this value does not exceed `R0`. `lambda_low` is the
/// near-origin lower coefficient of the unscaled kernel.
pub fn separation_upper(
    d0: f64,
    psi_gap: f64,
    s: f64,
    lambda_low: f64,
    kappa: f64,
    mass_ab: f64,
    r0: Extent,
) -> Result<f64, BoundsError> {
    if !(0.0..1.0).contains(&s) {
        return Err(BoundsError::HypothesisViolated("need s in [0, 1)"));
    }
    if !(lambda_low > 0.0 && kappa > 0.0) {
        return Err(BoundsError::HypothesisViolated("need positive lambda and kappa"));
    }
    if !(mass_ab > 0.0) {
        return Err(BoundsError::HypothesisViolated("need positive pair mass"));
    }
    let mid = if psi_gap > 0.0 {
        ((1.0 - s) * psi_gap / (kappa * lambda_low * mass_ab)).powf(1.0 / (1.0 - s))
    } else {
        // a nonpositive label gap only pulls the pair together; the initial
        // separation is never exceeded
        0.0
    };
    let bound = d0.max(mid);
    if !r0.exceeds(bound) && r0 != Extent::Finite(bound) {
        return Err(BoundsError::HypothesisViolated(
            "upper-bound hypothesis fails: max{d0, relaxation value} exceeds R0",
        ));
    }
    Ok(bound)
}

/// Measured and analytic uniform bounds on the alignment convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ConvolutionBound {
    /// `sup_i kappa sum_j phi(X_i - X_j) m_j` at the supplied state.
    pub measured_sup: f64,
    /// The modulus-based uniform constant, when available.
    pub analytic: Option<f64>,
    /// Separation floor `R2` entering the analytic constant.
    pub r2: Option<f64>,
}

/// Evaluate the measured convolution sup at the markers' current positions
/// and, when the modulus record is satisfied and admissible, the analytic
/// uniform constant
/// `kappa [ phi(R2) M0 + Lambda c~^{-s} sup(rho0) sup_a I(a) ]` with
/// `I(a) = int_{Omega, |a-g| < R1} |a-g|^{-mu s/(1-s)} dg`.
pub fn convolution_bound(
    scenario: &Scenario,
    markers: &MarkerSet,
    modulus: Option<&ModulusRecord>,
) -> Result<ConvolutionBound, BoundsError> {
    let kernel = &scenario.kernel;
    let kappa = scenario.kappa;
    let measured = crate::dynamics::phi_mass_sums(&markers.x, markers.masses(), kernel, kappa)
        .map_err(|_| BoundsError::HypothesisViolated("markers in exact contact"))?;
    let measured_sup = measured.iter().cloned().fold(0.0f64, f64::max);

    let consts = kernel.constants();
    let m0 = markers.total_mass();

    let analytic = match modulus {
        Some(rec) if rec.satisfied => {
            let s = consts.s;
            if s == 0.0 {
                // bounded kernels carry the trivial constant
                Some((convolution_rate_bounded(kernel, kappa, m0), None))
            } else {
                let nu = rec.mu * s / (1.0 - s);
                if nu >= 1.0 {
                    return Err(BoundsError::NotAdmissible);
                }
                if !(rec.c > 0.0) {
                    None
                } else {
                    let lambda_eff = kappa * consts.lambda_up;
                    let c_tilde = ((1.0 - s) * rec.c
                        / ((2.0f64).powf(s) * lambda_eff * m0))
                        .powf(1.0 / (1.0 - s));
                    let r2 = c_tilde * rec.r1.powf(rec.mu / (1.0 - s));
                    let far = kappa * kernel.phi_abs(r2) * m0;
                    let sup_rho = scenario.sup_rho0();
                    let mut worst_i = 0.0f64;
                    let mut probes: Vec<f64> = markers.alphas().to_vec();
                    for iv in &scenario.intervals {
                        probes.push(iv.left);
                        probes.push(iv.right);
                    }
                    for &a in &probes {
                        worst_i = worst_i.max(window_power_integral(scenario, a, rec.r1, nu));
                    }
                    let near = kappa * consts.lambda_up * c_tilde.powf(-s) * sup_rho * worst_i;
                    Some((far + near, Some(r2)))
                }
            }
        }
        _ => None,
    };

    let (analytic, r2) = match analytic {
        Some((c, r2)) => (Some(c), r2),
        None => (None, None),
    };
    Ok(ConvolutionBound {
        measured_sup,
        analytic,
        r2,
    })
}

fn convolution_rate_bounded(kernel: &Kernel, kappa: f64, m0: f64) -> f64 {
    let sup = kernel
        .constants()
        .sup_norm
        .finite()
        .expect("bounded kernel has a finite sup norm");
    kappa * sup * m0
}

/// `int_{Omega cap (a - r1, a + r1)} |a - g|^{-nu} dg` in closed form.
fn window_power_integral(scenario: &Scenario, a: f64, r1: f64, nu: f64) -> f64 {
    let g = |d: f64| d.max(0.0).powf(1.0 - nu) / (1.0 - nu);
    let mut total = 0.0;
    for iv in &scenario.intervals {
        let lo = iv.left.max(a - r1);
        let hi = iv.right.min(a + r1);
        if hi <= lo {
            continue;
        }
        total += if hi <= a {
            g(a - lo) - g(a - hi)
        } else if lo >= a {
            g(hi - a) - g(lo - a)
        } else {
            g(a - lo) + g(hi - a)
        };
    }
    total
}

/// Bound families checked by [`certify`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BoundKind {
    DeformationLower,
    SeparationLowerSmooth,
    SeparationLowerSingular,
    SeparationLiminf,
    SeparationUpper,
    ConvolutionUniform,
    ExistenceTimeUpper,
}

/// Outcome of one bound family on one run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct BoundCheck {
    pub kind: BoundKind,
    pub applicable: bool,
    /// The failed hypothesis when inapplicable.
    pub hypothesis: Option<&'static str>,
    /// Worst signed margin: `observed - bound` for lower bounds,
    /// `bound - observed` for upper bounds.
    pub worst_margin: Option<f64>,
    pub worst_time: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CertificateReport {
    pub checks: Vec<BoundCheck>,
    /// True when every applicable bound passed.
    pub all_pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyConfig {
    /// Tolerance relative to the bound's own magnitude.
    pub rel_tol: f64,
    /// Absolute floor for bounds near zero.
    pub abs_floor: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            rel_tol: 1e-6,
            abs_floor: 1e-12,
        }
    }
}

struct MarginTracker {
    worst: f64,
    scale: f64,
    time: f64,
    any: bool,
}

impl MarginTracker {
    fn new() -> Self {
        MarginTracker {
            worst: f64::INFINITY,
            scale: 0.0,
            time: 0.0,
            any: false,
        }
    }

    fn update(&mut self, margin: f64, scale: f64, time: f64) {
        self.any = true;
        if margin < self.worst {
            self.worst = margin;
            self.scale = scale;
            self.time = time;
        }
    }

    fn into_check(self, kind: BoundKind, cfg: &CertifyConfig) -> BoundCheck {
        if !self.any {
            return inapplicable(kind, "no qualifying pair or sample");
        }
        let tol = (cfg.rel_tol * self.scale.abs()).max(cfg.abs_floor);
        BoundCheck {
            kind,
            applicable: true,
            hypothesis: None,
            worst_margin: Some(self.worst),
            worst_time: Some(self.time),
            pass: self.worst >= -tol,
        }
    }
}

fn inapplicable(kind: BoundKind, why: &'static str) -> BoundCheck {
    BoundCheck {
        kind,
        applicable: false,
        hypothesis: Some(why),
        worst_margin: None,
        worst_time: None,
        pass: true,
    }
}

/// Check every analytic bound against a recorded run.
///
/// Pair quantities are rebuilt from the record's own initial sample
/// (`V_i(0) + kappa sum_j Phi(X_i(0) - X_j(0)) m_j`), which is the exact
/// conserved quantity of whichever discrete system produced the record; this
/// keeps the certificates free of the quadrature-versus-midpoint gap.
pub fn certify(
    record: &TrajectoryRecord,
    scenario: &Scenario,
    markers: &MarkerSet,
    report: &ThresholdReport,
    cfg: &CertifyConfig,
) -> Result<CertificateReport, BoundsError> {
    let n = markers.len();
    if record.positions.is_empty() || record.positions[0].len() != n {
        return Err(BoundsError::RecordMismatch(
            "record is empty or its marker count differs",
        ));
    }
    let kernel = &scenario.kernel;
    let kappa = scenario.kappa;
    let consts = kernel.constants();
    let masses = markers.masses();
    let m0 = markers.total_mass();

    // conserved labels of the recorded system, from its initial sample
    let x0 = &record.positions[0];
    let v0 = &record.velocities[0];
    let prim0 = crate::dynamics::primitive_mass_sums(x0, masses, kernel, kappa);
    let psi: Vec<f64> = (0..n).map(|i| v0[i] + prim0[i]).collect();
    let d0: Vec<f64> = (0..n - 1).map(|i| x0[i + 1] - x0[i]).collect();

    // frozen slopes, as the deformation equation consumed them
    let slopes = crate::threshold::e0_at_markers(scenario, markers)?;

    let mut checks = Vec::new();

    // uniform convolution rate, used by the deformation bound
    let modulus = report.modulus.as_ref();
    let conv_constant: Option<f64> = if consts.sup_norm.is_finite() {
        Some(convolution_rate_bounded(kernel, kappa, m0))
    } else {
        match modulus {
            Some(rec) if rec.satisfied && rec.admissible => {
                convolution_bound(scenario, markers, modulus)?.analytic
            }
            _ => None,
        }
    };

    // deformation lower bound
    checks.push(match conv_constant {
        None => inapplicable(
            BoundKind::DeformationLower,
            "no uniform convolution rate: kernel unbounded and modulus unavailable",
        ),
        Some(c_rate) => {
            if slopes.iter().any(|&e| e < 0.0) {
                inapplicable(BoundKind::DeformationLower, "psi0' is negative somewhere")
            } else {
                let mut tracker = MarginTracker::new();
                for (k, &t) in record.times.iter().enumerate() {
                    for i in 0..n {
                        let bound = deformation_lower(t - record.times[0], slopes[i], c_rate)?;
                        tracker.update(record.deformation[k][i] - bound, bound, t);
                    }
                }
                tracker.into_check(BoundKind::DeformationLower, cfg)
            }
        }
    });

    // exponential-relaxation lower bound on adjacent separations (bounded kernels)
    checks.push(if let Some(sup) = consts.sup_norm.finite() {
        let k_rate = kappa * sup * m0;
        let mut tracker = MarginTracker::new();
        for (k, &t) in record.times.iter().enumerate() {
            let x = &record.positions[k];
            for i in 0..n - 1 {
                let gap = psi[i + 1] - psi[i];
                if gap < 0.0 {
                    continue;
                }
                let bound = separation_lower_smooth(t - record.times[0], d0[i], gap, k_rate)?;
                tracker.update(x[i + 1] - x[i] - bound, bound, t);
            }
        }
        tracker.into_check(BoundKind::SeparationLowerSmooth, cfg)
    } else {
        inapplicable(BoundKind::SeparationLowerSmooth, "kernel is unbounded")
    });

    // uniform-in-time singular bounds
    if consts.s > 0.0 {
        let mut lower = MarginTracker::new();
        let mut liminf = MarginTracker::new();
        let mut upper = MarginTracker::new();
        let mut upper_hypothesis_failures = 0usize;
        for i in 0..n - 1 {
            let gap = psi[i + 1] - psi[i];
            if gap > 0.0 {
                let b = separation_lower_singular(
                    d0[i],
                    gap,
                    consts.s,
                    consts.lambda_up,
                    kappa,
                    m0,
                    consts.r0,
                )?;
                for (k, &t) in record.times.iter().enumerate() {
                    let sep = record.positions[k][i + 1] - record.positions[k][i];
                    lower.update(sep - b.inf_bound, b.inf_bound, t);
                }
                if b.monotone_until_liminf {
                    // the separation must not decrease before first reaching
                    // the floor
                    let mut prev = d0[i];
                    for (k, &t) in record.times.iter().enumerate().skip(1) {
                        let sep = record.positions[k][i + 1] - record.positions[k][i];
                        if prev >= b.liminf_bound {
                            break;
                        }
                        liminf.update(sep - prev, b.liminf_bound, t);
                        prev = sep;
                    }
                }
            }
            match separation_upper(
                d0[i],
                (psi[i + 1] - psi[i]).max(0.0),
                consts.s,
                consts.lambda_low,
                kappa,
                masses[i] + masses[i + 1],
                consts.r0,
            ) {
                Ok(bound) => {
                    for (k, &t) in record.times.iter().enumerate() {
                        let sep = record.positions[k][i + 1] - record.positions[k][i];
                        upper.update(bound - sep, bound, t);
                    }
                }
                Err(BoundsError::HypothesisViolated(_)) => upper_hypothesis_failures += 1,
                Err(e) => return Err(e),
            }
        }
        checks.push(lower.into_check(BoundKind::SeparationLowerSingular, cfg));
        checks.push(if liminf.any {
            liminf.into_check(BoundKind::SeparationLiminf, cfg)
        } else {
            inapplicable(
                BoundKind::SeparationLiminf,
                "no pair starts below its large-time floor",
            )
        });
        checks.push(if upper.any {
            upper.into_check(BoundKind::SeparationUpper, cfg)
        } else {
            let _ = upper_hypothesis_failures;
            inapplicable(
                BoundKind::SeparationUpper,
                "upper-bound hypothesis fails for every adjacent pair",
            )
        });
    } else {
        checks.push(inapplicable(
            BoundKind::SeparationLowerSingular,
            "kernel is bounded (s = 0)",
        ));
        checks.push(inapplicable(
            BoundKind::SeparationLiminf,
            "kernel is bounded (s = 0)",
        ));
        // the upper bound includes s = 0; certify it with the smooth constants
        let mut upper = MarginTracker::new();
        for i in 0..n - 1 {
            match separation_upper(
                d0[i],
                (psi[i + 1] - psi[i]).max(0.0),
                0.0,
                consts.lambda_low,
                kappa,
                masses[i] + masses[i + 1],
                consts.r0,
            ) {
                Ok(bound) => {
                    for (k, &t) in record.times.iter().enumerate() {
                        let sep = record.positions[k][i + 1] - record.positions[k][i];
                        upper.update(bound - sep, bound, t);
                    }
                }
                Err(BoundsError::HypothesisViolated(_)) => {}
                Err(e) => return Err(e),
            }
        }
        checks.push(if upper.any {
            upper.into_check(BoundKind::SeparationUpper, cfg)
        } else {
            inapplicable(
                BoundKind::SeparationUpper,
                "upper-bound hypothesis fails for every adjacent pair",
            )
        });
    }

    // uniform convolution bound, measured at every sample
    checks.push(match conv_constant {
        None => inapplicable(
            BoundKind::ConvolutionUniform,
            "no uniform convolution rate: kernel unbounded and modulus unavailable",
        ),
        Some(c_bound) => {
            let mut tracker = MarginTracker::new();
            for (k, &t) in record.times.iter().enumerate() {
                let sums =
                    crate::dynamics::phi_mass_sums(&record.positions[k], masses, kernel, kappa)
                        .map_err(|_| {
                            BoundsError::HypothesisViolated("markers in exact contact")
                        })?;
                let sup = sums.iter().cloned().fold(0.0f64, f64::max);
                tracker.update(c_bound - sup, c_bound, t);
            }
            tracker.into_check(BoundKind::ConvolutionUniform, cfg)
        }
    });

    // existence-time upper bound for non-monotone data
    checks.push(if report.classification == Classification::NonMonotone {
        match report.min_blowup_bound() {
            None => inapplicable(BoundKind::ExistenceTimeUpper, "no witness carries a bound"),
            Some(bound) => {
                let event = record.terminal_event();
                let observed = match event {
                    Some(e) if e.kind != EventKind::Completed => e.time,
                    // completion without blowup: the run outlived the bound
                    // exactly when the horizon did
                    _ => *record.times.last().expect("nonempty record"),
                };
                let margin = bound - (observed - record.times[0]);
                let tol = (cfg.rel_tol * bound.abs()).max(cfg.abs_floor);
                BoundCheck {
                    kind: BoundKind::ExistenceTimeUpper,
                    applicable: true,
                    hypothesis: None,
                    worst_margin: Some(margin),
                    worst_time: Some(observed),
                    pass: margin >= -tol,
                }
            }
        }
    } else {
        inapplicable(
            BoundKind::ExistenceTimeUpper,
            "data are monotone: no finite existence-time bound",
        )
    });

    let all_pass = checks.iter().filter(|c| c.applicable).all(|c| c.pass);
    Ok(CertificateReport { checks, all_pass })
}
