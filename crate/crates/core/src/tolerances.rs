//! Shared numeric tolerances. Every threshold used by tests and the
//! gradient checker is defined here rather than inlined at call sites.

/// Analytic identities evaluated in f64 (softmax row sums, reduction
/// identities between equivalent loss formulations). Allows a few digits
/// of accumulated rounding on top of ~16 significant digits.
pub const ANALYTIC: f64 = 1e-12;

/// Agreement between analytic gradients and central finite differences at
/// step [`FD_STEP`]: relative error in global L2 norm.
pub const GRAD_REL: f64 = 1e-6;

/// Central finite-difference step. With f64 and smooth (tanh/cos/exp)
/// networks the truncation error is O(h^2) = 1e-10, comfortably inside
/// [`GRAD_REL`] for desk-scale gradient magnitudes.
pub const FD_STEP: f64 = 1e-5;

/// Floor for the denominator of relative gradient error, so instances
/// with a vanishing gradient do not divide by zero.
pub const GRAD_NORM_FLOOR: f64 = 1e-8;

/// Hand-frozen closed-form values (computed once with an independent
/// reference and pinned in tests).
pub const FROZEN: f64 = 1e-9;

/// Norm deviation at which contrastive inputs are rejected as
/// non-normalized.
pub const NORMALIZED_INPUT: f64 = 1e-6;
