//! Interaction protocols `phi` and their primitives `Phi(x) = int_0^x phi`.
//!
//! Every kernel is radial, nonnegative, and radially non-increasing. Bounded
//! families report a finite sup norm; the weakly singular family behaves like
//! `coef * |x|^(-s)` near the origin with `s in (0,1)`, which keeps `phi`
//! locally integrable and `Phi` continuous (and odd) through zero.
//!
//! Near the origin every kernel carries two-sided bounds
//! `lambda * |x|^(-s) <= phi(x) <= Lambda * |x|^(-s)` valid for `|x| < R0`;
//! those four constants feed the trajectory-separation bounds in [`crate::bounds`].

use alloc::vec::Vec;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;

use crate::interp::MonotoneCubic;
use crate::quad::{self, QuadConfig, QuadratureError};

/// A quantity that is either a finite value or explicitly unbounded.
///
/// Used for `sup |phi|` and the near-origin radius `R0`; "unbounded" is never
/// encoded as a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum Extent {
    Finite(f64),
    Unbounded,
}

impl Extent {
    pub fn is_finite(&self) -> bool {
        matches!(self, Extent::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            Extent::Finite(v) => Some(*v),
            Extent::Unbounded => None,
        }
    }

    /// True when `x` is strictly below the extent (always true for unbounded).
    pub fn exceeds(&self, x: f64) -> bool {
        match self {
            Extent::Finite(v) => x < *v,
            Extent::Unbounded => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    /// `phi(0)` requested for a weakly singular kernel.
    #[error("phi is singular at x = 0 for this kernel")]
    SingularityEvaluation,
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("tabulated kernel: {0}")]
    Tabulation(#[from] crate::interp::InterpError),
}

/// Concrete functional forms for `phi`.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiForm {
    /// `phi(x) = c`
    Constant { c: f64 },
    /// `phi(x) = c * exp(-a |x|)`
    ExponentialDecay { c: f64, a: f64 },
    /// `phi(x) = c * (1 + x^2)^(-beta/2)`
    RationalDecay { c: f64, beta: f64 },
    /// `phi(x) = coef * |x|^(-s)` for `|x| < r_cut`, continued beyond the cutoff
    /// by the constant matched value `coef * r_cut^(-s)`.
    PowerLawTruncated { s: f64, coef: f64, r_cut: f64 },
    /// Sampled `phi(|x|)` with shape-preserving interpolation; continued beyond
    /// the last sample by the (smallest) last value.
    Tabulated { interp: MonotoneCubic },
}

/// How fast `phi` blows up at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KernelFamily {
    SmoothBounded,
    WeaklySingular,
}

/// The constants consumed by the bound evaluators.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct KernelConstants {
    /// Singularity order; 0 for bounded kernels.
    pub s: f64,
    /// Near-origin lower coefficient.
    pub lambda_low: f64,
    /// Near-origin upper coefficient.
    pub lambda_up: f64,
    /// Radius on which the two-sided near-origin bounds hold.
    pub r0: Extent,
    /// `sup |phi|`, finite exactly for bounded kernels.
    pub sup_norm: Extent,
    /// `int_0^{R0} phi`, i.e. `Phi(R0)`.
    pub l1_on_r0: Extent,
}

/// A validated interaction protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    form: PhiForm,
    family: KernelFamily,
    s: f64,
    lambda_low: f64,
    lambda_up: f64,
    r0: Extent,
    sup_norm: Extent,
}

impl Kernel {
    /// Build a kernel, deriving the family and near-origin constants from the
    /// functional form.
    pub fn new(form: PhiForm) -> Result<Self, KernelError> {
        let kernel = match &form {
            PhiForm::Constant { c } => {
                require(*c > 0.0 && c.is_finite(), "constant kernel needs c > 0")?;
                Kernel {
                    family: KernelFamily::SmoothBounded,
                    s: 0.0,
                    lambda_low: *c,
                    lambda_up: *c,
                    r0: Extent::Unbounded,
                    sup_norm: Extent::Finite(*c),
                    form,
                }
            }
            PhiForm::ExponentialDecay { c, a } => {
                require(*c > 0.0 && c.is_finite(), "exponential kernel needs c > 0")?;
                require(*a > 0.0 && a.is_finite(), "exponential kernel needs a > 0")?;
                // Natural near-origin window: one decay length.
                let r0 = 1.0 / *a;
                Kernel {
                    family: KernelFamily::SmoothBounded,
                    s: 0.0,
                    lambda_low: *c * (-1.0f64).exp(),
                    lambda_up: *c,
                    r0: Extent::Finite(r0),
                    sup_norm: Extent::Finite(*c),
                    form,
                }
            }
            PhiForm::RationalDecay { c, beta } => {
                require(*c > 0.0 && c.is_finite(), "rational kernel needs c > 0")?;
                require(*beta > 0.0 && beta.is_finite(), "rational kernel needs beta > 0")?;
                Kernel {
                    family: KernelFamily::SmoothBounded,
                    s: 0.0,
                    lambda_low: *c * (2.0f64).powf(-*beta / 2.0),
                    lambda_up: *c,
                    r0: Extent::Finite(1.0),
                    sup_norm: Extent::Finite(*c),
                    form,
                }
            }
            PhiForm::PowerLawTruncated { s, coef, r_cut } => {
                require((0.0..1.0).contains(s) && *s > 0.0, "power-law kernel needs s in (0,1)")?;
                require(*coef > 0.0 && coef.is_finite(), "power-law kernel needs coef > 0")?;
                require(*r_cut > 0.0 && r_cut.is_finite(), "power-law kernel needs r_cut > 0")?;
                Kernel {
                    family: KernelFamily::WeaklySingular,
                    s: *s,
                    lambda_low: *coef,
                    lambda_up: *coef,
                    r0: Extent::Finite(*r_cut),
                    sup_norm: Extent::Unbounded,
                    form,
                }
            }
            PhiForm::Tabulated { interp } => {
                let (lo, hi) = interp.domain();
                require(lo == 0.0, "tabulated kernel samples must start at |x| = 0")?;
                let first = interp.eval(0.0);
                let last = interp.eval(hi);
                require(first.is_finite() && first > 0.0, "tabulated kernel needs phi(0) > 0")?;
                require(last >= 0.0, "tabulated kernel values must be nonnegative")?;
                Kernel {
                    family: KernelFamily::SmoothBounded,
                    s: 0.0,
                    lambda_low: last,
                    lambda_up: first,
                    r0: Extent::Finite(hi),
                    sup_norm: Extent::Finite(first),
                    form,
                }
            }
        };
        kernel.validate()?;
        Ok(kernel)
    }

    /// Tabulated kernel from `(|x|, phi)` samples.
    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, KernelError> {
        let interp = MonotoneCubic::new(xs, ys)?;
        Kernel::new(PhiForm::Tabulated { interp })
    }

    /// Spot-checks radial monotonicity, nonnegativity, the two-sided
    /// near-origin bounds, and local integrability.
    fn validate(&self) -> Result<(), KernelError> {
        require(
            self.lambda_low <= self.lambda_up,
            "near-origin bounds need lambda <= Lambda",
        )?;
        let probe_radius = match self.r0 {
            Extent::Finite(r) => r,
            Extent::Unbounded => 1.0,
        };
        let mut prev = f64::INFINITY;
        for i in 1..=64 {
            let x = probe_radius * i as f64 / 64.0;
            let v = self.phi_abs(x);
            if !v.is_finite() || v < 0.0 {
                return Err(KernelError::InvalidParameter("phi must be finite and nonnegative away from 0"));
            }
            if v > prev + 1e-12 * prev.abs() {
                return Err(KernelError::InvalidParameter("phi must be radially non-increasing"));
            }
            prev = v;
            if self.r0.is_finite() && i < 64 {
                let envelope = x.powf(-self.s);
                if v > self.lambda_up * envelope * (1.0 + 1e-9)
                    || v < self.lambda_low * envelope * (1.0 - 1e-9)
                {
                    return Err(KernelError::InvalidParameter(
                        "two-sided near-origin bound violated inside R0",
                    ));
                }
            }
        }
        if self.family == KernelFamily::WeaklySingular {
            // Local integrability via the closed form of the primitive.
            let p = self.primitive(probe_radius.min(1.0))?;
            if !p.is_finite() {
                return Err(KernelError::InvalidParameter("phi is not locally integrable"));
            }
        }
        Ok(())
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn form(&self) -> &PhiForm {
        &self.form
    }

    pub fn is_singular(&self) -> bool {
        self.family == KernelFamily::WeaklySingular
    }

    /// `phi(x)`. Errors only at `x = 0` for weakly singular kernels.
    pub fn phi(&self, x: f64) -> Result<f64, KernelError> {
        if x == 0.0 && self.is_singular() {
            return Err(KernelError::SingularityEvaluation);
        }
        Ok(self.phi_abs(x.abs()))
    }

    /// `phi(|x|)` for `r = |x| > 0` (also valid at `r = 0` for bounded kernels).
    /// Callers on singular paths must rule out exact contact first.
    pub fn phi_abs(&self, r: f64) -> f64 {
        match &self.form {
            PhiForm::Constant { c } => *c,
            PhiForm::ExponentialDecay { c, a } => *c * (-*a * r).exp(),
            PhiForm::RationalDecay { c, beta } => *c * (1.0 + r * r).powf(-*beta / 2.0),
            PhiForm::PowerLawTruncated { s, coef, r_cut } => {
                if r < *r_cut {
                    *coef * r.powf(-*s)
                } else {
                    *coef * r_cut.powf(-*s)
                }
            }
            PhiForm::Tabulated { interp } => interp.eval(r),
        }
    }

    /// `Phi(x) = int_0^x phi(y) dy`, odd and continuous; closed form where the
    /// family admits one, adaptive quadrature otherwise.
    pub fn primitive(&self, x: f64) -> Result<f64, KernelError> {
        let r = x.abs();
        let magnitude = match &self.form {
            PhiForm::Constant { c } => *c * r,
            PhiForm::ExponentialDecay { c, a } => (*c / *a) * (1.0 - (-*a * r).exp()),
            PhiForm::PowerLawTruncated { s, coef, r_cut } => {
                if r <= *r_cut {
                    *coef * r.powf(1.0 - *s) / (1.0 - *s)
                } else {
                    *coef * r_cut.powf(1.0 - *s) / (1.0 - *s)
                        + *coef * r_cut.powf(-*s) * (r - *r_cut)
                }
            }
            PhiForm::RationalDecay { .. } => self.primitive_quadrature_abs(r, &QuadConfig::default())?,
            // the interpolant integrates segment-by-segment in closed form
            PhiForm::Tabulated { interp } => interp.integral(0.0, r),
        };
        Ok(magnitude * sign_of(x))
    }

    /// The quadrature route for `Phi(x)`, available for every family (used to
    /// cross-check the closed forms).
    pub fn primitive_quadrature(&self, x: f64, cfg: &QuadConfig) -> Result<f64, KernelError> {
        Ok(self.primitive_quadrature_abs(x.abs(), cfg)? * sign_of(x))
    }

    fn primitive_quadrature_abs(&self, r: f64, cfg: &QuadConfig) -> Result<f64, KernelError> {
        if r == 0.0 {
            return Ok(0.0);
        }
        let q = quad::integrate_singular_left(|y| self.phi_abs(y), r, self.s, cfg)?;
        Ok(q.value)
    }

    /// The bound parameters used by the certification module.
    pub fn constants(&self) -> KernelConstants {
        let l1_on_r0 = match self.r0 {
            Extent::Finite(r) => Extent::Finite(
                self.primitive(r)
                    .expect("primitive of a validated kernel is finite"),
            ),
            // Only the constant kernel has an unbounded near-origin window, and
            // its primitive grows without bound.
            Extent::Unbounded => Extent::Unbounded,
        };
        KernelConstants {
            s: self.s,
            lambda_low: self.lambda_low,
            lambda_up: self.lambda_up,
            r0: self.r0,
            sup_norm: self.sup_norm,
            l1_on_r0,
        }
    }
}

fn require(cond: bool, msg: &'static str) -> Result<(), KernelError> {
    if cond {
        Ok(())
    } else {
        Err(KernelError::InvalidParameter(msg))
    }
}

fn sign_of(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
