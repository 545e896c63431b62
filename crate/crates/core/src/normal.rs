//! Scalar standard-normal helpers shared by the robust modules.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Standard normal density.
pub fn phi(x: f64) -> f64 {
    Normal::standard().pdf(x)
}

/// Standard normal distribution function.
pub fn cap_phi(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// `E[psi_c(R)^2]` for standard normal `R` and the Huber influence function
/// with tuning constant `c`, in closed form:
/// `(2*Phi(c) - 1) - 2*c*phi(c) + 2*c^2*(1 - Phi(c))`.
pub fn huber_psi_sq_moment(c: f64) -> f64 {
    assert!(c > 0.0, "Huber constant must be positive");
    let p = cap_phi(c);
    (2.0 * p - 1.0) - 2.0 * c * phi(c) + 2.0 * c * c * (1.0 - p)
}
