//! Scalar transcendental functions for `no_std`. Backed by `libm`, which also
//! makes results identical across platforms.

pub use libm::{cos, exp, fabs as abs, log as ln, log10, pow, sin, sqrt, tanh};

pub const PI: f64 = core::f64::consts::PI;
