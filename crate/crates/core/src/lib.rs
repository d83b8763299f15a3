//! Simulation and certification toolkit for the one-dimensional Euler alignment
//! model posed on the support of the density.
//!
//! The crate is organized around the reduction of the second-order Lagrangian
//! dynamics to a first-order system driven by the conserved label function
//! `psi0 = u0 + kappa * (Phi * rho0)`, where `Phi` is the odd primitive of the
//! interaction kernel `phi`:
//!
//! * [`kernel`] — interaction protocols `phi` and their primitives `Phi`,
//!   with closed forms where available and singularity-aware quadrature otherwise;
//! * [`scenario`] — Cauchy problem data (support intervals, density, velocity,
//!   coupling) and its discretization into mass-weighted Lagrangian markers;
//! * [`threshold`] — `psi0`, `e0`, the monotonicity classification that decides
//!   global existence versus finite-time blowup, and the monotone extension to
//!   the whole line;
//! * [`dynamics`] — time integration of the first- and second-order marker
//!   systems with blowup event detection and density reconstruction;
//! * [`bounds`] — closed-form trajectory bounds and run certification.
//!
//! The crate is `no_std` (with `alloc`); all floating-point math goes through
//! `libm`, so results are bit-reproducible across platforms. IO, configuration
//! files, and the command-line front end live in the companion `align1d` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bounds;
pub mod dynamics;
pub mod interp;
pub mod kernel;
pub mod quad;
pub mod scenario;
pub mod threshold;

pub use kernel::{Extent, Kernel, KernelConstants, KernelError, PhiForm};
pub use scenario::{
    Interval, MarkerSet, Profile, QuadratureRule, Scenario, ScenarioError, ValidationReport,
};
pub use threshold::{Classification, ModulusRecord, ThresholdError, ThresholdReport, Witness};
