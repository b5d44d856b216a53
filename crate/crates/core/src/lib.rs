//! Linear-quadratic leader-follower stochastic differential games with
//! Markov regime switching and conditional mean-field coupling.
//!
//! The crate solves the game in four stages:
//!
//! 1. [`model`] — problem data, standing-assumption validation, bundled
//!    reference instances.
//! 2. [`riccati`] — backward integration of the four regime-coupled matrix
//!    Riccati systems (follower pair at `n x n`, leader pair at `2n x 2n`
//!    after dimensional augmentation).
//! 3. [`synthesis`] — non-anticipating feedback gains for both players,
//!    adjoint reconstruction, and the closed-form game value.
//! 4. [`simulate`] / [`verify`] — Monte-Carlo simulation of the closed-loop
//!    switching diffusion and executable optimality checks.
//!
//! The default `std` feature enables thread-parallel Monte-Carlo drivers;
//! without it the crate is `no_std` (with `alloc`) and all solvers run
//! sequentially.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod chain;
pub mod error;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod synthesis;
pub mod verify;

pub use error::{Error, Result};

/// Scalar math shims: `std` intrinsics when available, `libm` otherwise.
pub(crate) mod scalar {
    #[cfg(feature = "std")]
    #[inline(always)]
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    #[cfg(not(feature = "std"))]
    #[inline(always)]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }

    #[cfg(feature = "std")]
    #[inline(always)]
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    #[cfg(not(feature = "std"))]
    #[inline(always)]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }

    #[cfg(feature = "std")]
    #[inline(always)]
    pub fn cos(x: f64) -> f64 {
        x.cos()
    }
    #[cfg(not(feature = "std"))]
    #[inline(always)]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }

    #[cfg(feature = "std")]
    #[inline(always)]
    pub fn sin(x: f64) -> f64 {
        x.sin()
    }
    #[cfg(not(feature = "std"))]
    #[inline(always)]
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
}
