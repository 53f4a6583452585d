//! Numerical construction and verification of Nash equilibrium points for
//! two-player nonzero-sum stochastic differential games.
//!
//! The equilibrium is read off the coupled backward SDE
//!
//! ```text
//! -dW^i = H_i(s, X, Z^i, u1*(s, X, Z^1, Z^2), u2*(s, X, Z^1, Z^2)) ds - Z^i dB,   W^i_T = g^i(X_T)
//! ```
//!
//! driven by the uncontrolled diffusion `dX = sigma(s, X) dB`. Controls act
//! on the dynamics through a Girsanov change of measure. The crate is split
//! into:
//!
//! - [`game`]: game data, Hamiltonians, best responses and the Isaacs check;
//! - [`sde`]: path simulation and Girsanov weights;
//! - [`mollify`]: truncated and mollified generators with their property checks;
//! - [`bsde`]: least-squares Monte Carlo solver for the coupled system;
//! - [`payoff`]: payoff estimators, `W_0 = J` check and deviation testing;
//! - [`density`]: transition densities, Aronson bounds and `L^q` domination.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Per-player loops index several parallel arrays at once.
#![allow(clippy::needless_range_loop)]

pub mod bsde;
pub mod density;
pub mod error;
pub mod game;
pub mod linalg;
pub mod mollify;
pub mod payoff;
pub mod quadrature;
pub mod sde;

pub use error::{Error, Result};
