//! Design and exact coupled-dipole verification of metalenses made from
//! structured subwavelength arrays of two-level atomic emitters.
//!
//! Units throughout: lengths in resonant wavelengths (`k0 = 2π`), rates and
//! detunings in units of the single-emitter linewidth `Γ0`. Dipole amplitudes
//! are dimensionless ratios `p/𝓟0` obtained with the drive normalised so that
//! `Ω0 = Γ0`, which makes the Rabi drive numerically equal to `E_in/E0`.

pub mod beams;
pub mod cli;
pub mod collective2d;
pub mod disorder;
pub mod error;
pub mod greens;
pub mod metalens;
pub mod multilayer;
pub mod optimize;
pub mod solver;

pub use error::{Error, Result};

/// Resonant wavevector in units of `1/λ0`.
pub const K0: f64 = 2.0 * std::f64::consts::PI;

/// Wraps an angle onto `(−π, π]`.
pub fn wrap_phase(phi: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = phi.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}
