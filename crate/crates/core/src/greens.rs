//! Free-space dipole-dipole kernel and bare-emitter polarizability.
//!
//! All emitters share the `x̂` dipole axis, so only the `xx` component of the
//! dyadic Green's tensor is needed. It is returned in the dimensionless form
//! `G_ij = (3π/k0) x̂·G(r)·x̂`, whose imaginary part tends to `1/2` at contact.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, K0};

/// Separation vector between two emitters, in units of λ0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Displacement {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn norm(&self) -> f64 {
        (self.dx * self.dx + self.dy * self.dy + self.dz * self.dz).sqrt()
    }
}

/// Radiative rate (fixed to one) and extra broadening `Γ′`, in units of Γ0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterRates {
    pub gamma0: f64,
    pub gamma_prime: f64,
}

impl EmitterRates {
    pub fn new(gamma_prime: f64) -> Result<Self> {
        if !(gamma_prime >= 0.0) || !gamma_prime.is_finite() {
            return Err(Error::Invalid(format!(
                "gamma_prime must be finite and >= 0, got {gamma_prime}"
            )));
        }
        Ok(Self {
            gamma0: 1.0,
            gamma_prime,
        })
    }

    pub fn lossless() -> Self {
        Self {
            gamma0: 1.0,
            gamma_prime: 0.0,
        }
    }
}

/// Drive detuning `Δ = ω − ω0` in units of Γ0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detuning {
    pub delta: f64,
}

impl Detuning {
    pub fn new(delta: f64) -> Self {
        Self { delta }
    }

    pub fn resonant() -> Self {
        Self { delta: 0.0 }
    }
}

/// `xx` coupling from the three Cartesian components, without validation.
///
/// This is the hot path of matrix assembly; callers guarantee `r > 0`.
#[inline]
pub fn coupling_xx_raw(dx: f64, dy: f64, dz: f64) -> Complex64 {
    let r2 = dx * dx + dy * dy + dz * dz;
    let r = r2.sqrt();
    let kr = K0 * r;
    let inv = 1.0 / kr;
    let inv2 = inv * inv;
    let c2 = dx * dx / r2;
    // e^{ikr}/(kr) · [(1 + i/kr − 1/(kr)²) + (−1 − 3i/kr + 3/(kr)²) x²/r²]
    let re_part = 1.0 - inv2 + (-1.0 + 3.0 * inv2) * c2;
    let im_part = inv - 3.0 * inv * c2;
    let (s, c) = kr.sin_cos();
    let pref = 0.75 * inv;
    Complex64::new(
        pref * (c * re_part - s * im_part),
        pref * (s * re_part + c * im_part),
    )
}

/// Dimensionless coupling `(3π/k0) x̂·G(r)·x̂` between two `x̂` dipoles.
pub fn coupling_xx(r: Displacement) -> Result<Complex64> {
    if r.norm() == 0.0 {
        return Err(Error::SelfCoupling);
    }
    Ok(coupling_xx_raw(r.dx, r.dy, r.dz))
}

/// Bare polarizability `α0 k0³/(3π) = −Γ0/(Δ + i(Γ0+Γ′)/2)` in Γ0 units.
pub fn bare_polarizability(delta: Detuning, rates: EmitterRates) -> Complex64 {
    -rates.gamma0 / Complex64::new(delta.delta, 0.5 * (rates.gamma0 + rates.gamma_prime))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Scalar Helmholtz kernel e^{ikr}/(4πr).
    fn scalar(x: f64, y: f64, z: f64) -> Complex64 {
        let r = (x * x + y * y + z * z).sqrt();
        Complex64::new(0.0, K0 * r).exp() / (4.0 * PI * r)
    }

    /// (1 + ∂x²/k²) applied by central differences, scaled by 3π/k.
    fn finite_difference_xx(x: f64, y: f64, z: f64) -> Complex64 {
        let h = 1e-4;
        let d2 = (scalar(x + h, y, z) - 2.0 * scalar(x, y, z) + scalar(x - h, y, z)) / (h * h);
        (scalar(x, y, z) + d2 / (K0 * K0)) * (3.0 * PI / K0)
    }

    #[test]
    fn matches_finite_difference_kernel() {
        for &(x, y, z) in &[
            (0.2, 0.0, 0.0),
            (0.13, -0.07, 0.31),
            (0.0, 0.4, 0.0),
            (1.7, 0.3, -2.2),
        ] {
            let a = coupling_xx(Displacement::new(x, y, z)).unwrap();
            let b = finite_difference_xx(x, y, z);
            assert!((a - b).norm() / a.norm() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn far_field_on_axis() {
        let z = 200.0;
        let a = coupling_xx(Displacement::new(0.0, 0.0, z)).unwrap();
        let b = Complex64::new(0.0, K0 * z).exp() * (0.75 / (K0 * z));
        assert!((a - b).norm() / b.norm() < 1e-3);
    }

    #[test]
    fn imaginary_part_tends_to_half() {
        for dir in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.3, 0.5, 0.8)] {
            let s = 1e-4;
            let a = coupling_xx(Displacement::new(dir.0 * s, dir.1 * s, dir.2 * s)).unwrap();
            assert!((a.im - 0.5).abs() < 1e-6, "{}", a.im);
        }
    }

    #[test]
    fn zero_displacement_is_rejected() {
        assert!(matches!(
            coupling_xx(Displacement::new(0.0, 0.0, 0.0)),
            Err(Error::SelfCoupling)
        ));
    }

    #[test]
    fn polarizability_values() {
        let a = bare_polarizability(Detuning::resonant(), EmitterRates::lossless());
        assert!((a - Complex64::new(0.0, 2.0)).norm() < 1e-15);
        let b = bare_polarizability(Detuning::resonant(), EmitterRates::new(5.75).unwrap());
        assert!((b - Complex64::new(0.0, 2.0 / 6.75)).norm() < 1e-15);
        assert!((b.im - 0.2963).abs() < 1e-4);
        let far = bare_polarizability(Detuning::new(1e9), EmitterRates::lossless());
        assert!(far.norm() < 1e-8);
        assert!(EmitterRates::new(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn reciprocity_and_mirror_symmetry(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            prop_assume!(x * x + y * y + z * z > 1e-6);
            let g = coupling_xx_raw(x, y, z);
            for (sx, sy, sz) in [(-1.0, -1.0, -1.0), (-1.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, -1.0)] {
                let h = coupling_xx_raw(sx * x, sy * y, sz * z);
                prop_assert!((g - h).norm() <= 1e-14 * g.norm().max(1.0));
            }
        }
    }
}
