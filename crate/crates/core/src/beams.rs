//! Paraxial Gaussian modes, ideal-lens geometry and the efficiency metrics.
//!
//! Fields are scalar `x̂` amplitudes relative to the input peak `E0`. Dipoles
//! are relative amplitudes `p/𝓟0` as produced by [`crate::solver`], so the
//! mode projections reduce to `O(N)` sums over emitters.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::metalens::EmitterEnsemble;
use crate::solver::{DipoleSolution, DriveField, FieldPlane, PlaneKind};
use crate::{Error, Result, K0};

/// Input beam: waist `w0` located at `z = focus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    pub w0: f64,
    pub focus: f64,
}

impl BeamSpec {
    /// Waist below one wavelength breaks the paraxial identities.
    pub fn new(w0: f64) -> Result<Self> {
        if !(w0 >= 1.0) || !w0.is_finite() {
            return Err(Error::Invalid(format!(
                "beam waist {w0} must be at least one wavelength"
            )));
        }
        Ok(Self { w0, focus: 0.0 })
    }

    /// Input power `∫|E|² dR = π w0²/2` in units of `|E0|²`.
    pub fn power(&self) -> f64 {
        std::f64::consts::PI * self.w0 * self.w0 / 2.0
    }
}

impl DriveField for BeamSpec {
    fn at(&self, x: f64, y: f64, z: f64) -> Complex64 {
        gaussian_field(self, x, y, z)
    }
}

/// Ideal output mode of a thin lens of focal length `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetMode {
    pub f: f64,
    pub w_f: f64,
    pub z_f: f64,
    pub magnification: f64,
}

/// Beam waist `w(z)` at distance `z` from the focus.
pub fn waist_at(w0: f64, z: f64) -> f64 {
    let zr = K0 * w0 * w0 / 2.0;
    w0 * (1.0 + (z / zr).powi(2)).sqrt()
}

/// Paraxial Gaussian beam `E/E0`, including the carrier `e^{ik0 z}`.
pub fn gaussian_field(spec: &BeamSpec, x: f64, y: f64, z: f64) -> Complex64 {
    gauss(spec.w0, x * x + y * y, z - spec.focus)
}

fn gauss(w0: f64, r2: f64, z: f64) -> Complex64 {
    let zr = K0 * w0 * w0 / 2.0;
    let q = z / zr;
    let w2 = w0 * w0 * (1.0 + q * q);
    // k0 R²/(2ρ) with ρ = z(1 + (zr/z)²), written to stay finite at z = 0.
    let curvature = K0 * r2 * z / (2.0 * (z * z + zr * zr));
    let phase = K0 * z - q.atan() + curvature;
    Complex64::from_polar((w0 * w0 / w2).sqrt() * (-r2 / w2).exp(), phase)
}

/// Magnification, focal waist and focal plane of the ideal lens.
pub fn target_mode(w0: f64, f: f64) -> Result<TargetMode> {
    if !(w0 > 0.0) || !(f > 0.0) {
        return Err(Error::Invalid(format!(
            "target mode needs w0 > 0 and f > 0, got {w0}, {f}"
        )));
    }
    let m = (1.0 + (K0 * w0 * w0 / (2.0 * f)).powi(2)).sqrt();
    Ok(TargetMode {
        f,
        w_f: w0 / m,
        z_f: (1.0 - m.powi(-2)) * f,
        magnification: m,
    })
}

/// Ideal focused field `E_f/E0` at `(x, y, z)`.
pub fn target_field(target: &TargetMode, x: f64, y: f64, z: f64) -> Complex64 {
    gauss(target.w_f, x * x + y * y, z - target.z_f)
        * Complex64::from_polar(target.magnification, K0 * target.z_f)
}

/// Overlap `⟨E_f|E_in⟩` of the bare input with the target mode.
pub fn t0(w0: f64, target: &TargetMode) -> Complex64 {
    let wf = target.w_f;
    Complex64::new(K0 * w0 * wf, 0.0) / Complex64::new(K0 * (w0 * w0 + wf * wf) / 2.0, target.z_f)
}

fn projection<F>(ens: &EmitterEnsemble, sol: &DipoleSolution, w0: f64, mode: F) -> Complex64
where
    F: Fn(f64, f64, f64) -> Complex64,
{
    let sum: Complex64 = ens
        .positions
        .iter()
        .zip(&sol.amplitudes)
        .map(|(r, p)| mode(r[0], r[1], r[2]).conj() * p)
        .sum();
    Complex64::new(0.0, 3.0 / (K0 * w0).powi(2)) * sum
}

/// Projection amplitude `⟨E_f|E_out⟩`.
pub fn target_amplitude(
    ens: &EmitterEnsemble,
    sol: &DipoleSolution,
    target: &TargetMode,
    w0: f64,
) -> Complex64 {
    t0(w0, target) + projection(ens, sol, w0, |x, y, z| target_field(target, x, y, z))
}

/// Efficiency `η = |⟨E_f|E_out⟩|²`.
pub fn efficiency_eta(
    ens: &EmitterEnsemble,
    sol: &DipoleSolution,
    target: &TargetMode,
    w0: f64,
) -> f64 {
    target_amplitude(ens, sol, target, w0).norm_sqr()
}

/// Projection amplitude `⟨E_in|E_out⟩`.
pub fn input_amplitude(ens: &EmitterEnsemble, sol: &DipoleSolution, w0: f64) -> Complex64 {
    let spec = BeamSpec { w0, focus: 0.0 };
    Complex64::new(1.0, 0.0) + projection(ens, sol, w0, |x, y, z| gaussian_field(&spec, x, y, z))
}

/// Residual overlap `ε = |⟨E_in|E_out⟩|²` with the unfocused input.
pub fn overlap_epsilon(ens: &EmitterEnsemble, sol: &DipoleSolution, w0: f64) -> f64 {
    input_amplitude(ens, sol, w0).norm_sqr()
}

/// Reflected amplitude projected on the back-propagating input mode.
///
/// The backward mode is `conj(E_in(x, y, −z))`, so its overlap with the
/// scattered field is the forward sum with `z` mirrored.
pub fn reflection_amplitude(ens: &EmitterEnsemble, sol: &DipoleSolution, w0: f64) -> Complex64 {
    let spec = BeamSpec { w0, focus: 0.0 };
    projection(ens, sol, w0, |x, y, z| gaussian_field(&spec, x, y, -z))
}

/// Focal-plane quadrature grid: square `[−extent, extent]²` at `z_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalGrid {
    pub extent: f64,
    pub spacing: f64,
}

impl FocalGrid {
    /// Default grid: extent `2·r_lens`, spacing `λ0/8`.
    pub fn for_lens(r_lens: f64) -> Self {
        Self {
            extent: 2.0 * r_lens,
            spacing: 0.125,
        }
    }

    fn plane(&self, z: f64) -> FieldPlane {
        FieldPlane::square(PlaneKind::ConstZ(z), self.extent, self.spacing)
    }
}

/// Signal-to-background report of a focal-plane integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalReport {
    pub eta_tilde: f64,
    /// Transmitted power `P_t` through the focal plane.
    pub power: f64,
    /// `|E_out(0, z_f)|²`.
    pub focal_intensity: f64,
    /// Relative change of `η̃` when the grid spacing is doubled.
    pub refinement_change: f64,
    /// Set when that change exceeds 2%.
    pub coarse: bool,
}

/// Signal-to-background ratio `η̃ = η·P_in/P_t` with `P_t` integrated at `z_f`.
pub fn signal_to_background(
    ens: &EmitterEnsemble,
    sol: &DipoleSolution,
    target: &TargetMode,
    beam: &BeamSpec,
    grid: FocalGrid,
) -> Result<FocalReport> {
    let map = crate::solver::field_map(ens, sol, beam, &grid.plane(target.z_f))?;
    let (fine, coarse) = map.trapezoid_pair();
    let eta = efficiency_eta(ens, sol, target, beam.w0);
    let eta_tilde = eta * beam.power() / fine;
    let eta_coarse = eta * beam.power() / coarse;
    let change = ((eta_tilde - eta_coarse) / eta_tilde).abs();
    let focal_intensity =
        crate::solver::scattered_field(ens, sol, beam, [0.0, 0.0, target.z_f])?.norm_sqr();
    Ok(FocalReport {
        eta_tilde,
        power: fine,
        focal_intensity,
        refinement_change: change,
        coarse: change > 0.02,
    })
}

/// The quartet of lens metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensMetrics {
    pub eta: f64,
    pub epsilon: f64,
    pub eta_tilde: f64,
    pub focal_intensity: f64,
    #[serde(rename = "M")]
    pub magnification: f64,
    pub z_f: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma_prime: f64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn beam_is_unity_at_the_waist_centre() {
        let b = BeamSpec::new(3.0).unwrap();
        assert!((gaussian_field(&b, 0.0, 0.0, 0.0) - 1.0).norm() < 1e-15);
    }

    #[test]
    fn waist_is_the_one_over_e_radius() {
        let b = BeamSpec::new(2.0).unwrap();
        for z in [0.0, 3.0, -7.5] {
            let w = waist_at(2.0, z);
            let ratio =
                gaussian_field(&b, w, 0.0, z).norm() / gaussian_field(&b, 0.0, 0.0, z).norm();
            assert!(close(ratio, (-1.0f64).exp(), 1e-12));
        }
    }

    #[test]
    fn power_is_conserved_along_z() {
        let b = BeamSpec::new(2.0).unwrap();
        let h = 0.05;
        let n = 200;
        for z in [0.0, 5.0, 20.0] {
            let mut p = 0.0;
            for i in -n..=n {
                for j in -n..=n {
                    p += gaussian_field(&b, i as f64 * h, j as f64 * h, z).norm_sqr();
                }
            }
            p *= h * h;
            assert!((p / b.power() - 1.0).abs() < 1e-3, "z = {z}: {p}");
        }
    }

    #[test]
    fn curvature_matches_radius_formula() {
        let (w0, z, r) = (2.0, 9.0, 1.3);
        let zr = K0 * w0 * w0 / 2.0;
        let rho = z * (1.0 + (zr / z).powi(2));
        let expected = K0 * z - (z / zr).atan() + K0 * r * r / (2.0 * rho);
        let got = gaussian_field(&BeamSpec::new(w0).unwrap(), r, 0.0, z).arg();
        assert!(crate::wrap_phase(got - expected).abs() < 1e-12);
    }

    #[test]
    fn target_mode_identities() {
        let t = target_mode(4.0, 20.0).unwrap();
        assert!(close(t.magnification, 2.705, 1e-3));
        assert!(close(t.magnification.powi(2), 7.32, 1e-2));
        assert!(close(t.z_f, 17.27, 1e-2));
        assert!(close(4.0 / t.w_f, t.magnification, 1e-12));
        assert!(close(t.z_f / t.f, 1.0 - t.magnification.powi(-2), 1e-12));
        assert!(close(t0(4.0, &t).norm_sqr(), 0.39, 1e-2));
        assert!(close(
            target_field(&t, 0.0, 0.0, t.z_f).norm_sqr(),
            t.magnification.powi(2),
            1e-10
        ));
    }

    #[test]
    fn weak_lens_is_the_identity_mode() {
        let t = target_mode(3.0, 1e9).unwrap();
        assert!(close(t.magnification, 1.0, 1e-9));
        assert!((t0(3.0, &t) - 1.0).norm() < 1e-6);
    }

    #[test]
    fn t0_matches_overlap_quadrature() {
        // Direct ⟨E_f|E_in⟩ integral on the plane z = 2.
        let (w0, f) = (2.0, 6.0);
        let t = target_mode(w0, f).unwrap();
        let b = BeamSpec::new(w0).unwrap();
        let (h, n, z) = (0.04, 250, 2.0);
        let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
        for i in -n..=n {
            for j in -n..=n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let ef = target_field(&t, x, y, z);
                num += ef.conj() * gaussian_field(&b, x, y, z);
                den += ef.norm_sqr();
            }
        }
        let quad = num / den;
        assert!(
            (quad - t0(w0, &t)).norm() < 1e-6,
            "{quad} vs {}",
            t0(w0, &t)
        );
    }

    #[test]
    fn t0_is_a_contraction() {
        for w0 in [1.0, 2.0, 4.0, 8.0] {
            for f in [1.0, 5.0, 20.0, 200.0] {
                let t = target_mode(w0, f).unwrap();
                assert!(t0(w0, &t).norm() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(BeamSpec::new(0.5).is_err());
        assert!(target_mode(2.0, 0.0).is_err());
    }
}
