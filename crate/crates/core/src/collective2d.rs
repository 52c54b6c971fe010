//! Collective response of one infinite rectangular array of `x̂` dipoles.
//!
//! The in-plane lattice sum `Σ_{j≠0} G_0j = −ω_coop + i(Γ_coop − 1)/2` fixes
//! the cooperative shift. It is evaluated with a two-dimensional Ewald split
//! of the scalar Helmholtz kernel, to which `(1 + ∂x²/k0²)` is applied term by
//! term. A Gaussian-tapered real-space sum with a Richardson step is kept as
//! an independent second route.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use errorfunctions::{ComplexErrorFunctions, RealErrorFunctions};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::greens::{coupling_xx_raw, Detuning};
use crate::{Error, Result, K0};

/// Rectangular lattice constants in units of λ0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeConstants {
    pub dx: f64,
    pub dy: f64,
}

impl LatticeConstants {
    /// Validated constructor: both constants must lie in `[d_min, 1)`.
    pub fn new(dx: f64, dy: f64, d_min: f64) -> Result<Self> {
        let ok = |d: f64| d.is_finite() && d >= d_min * (1.0 - 1e-12) && d < 1.0;
        if !ok(dx) || !ok(dy) {
            return Err(Error::NotSubwavelength(format!(
                "dx = {dx}, dy = {dy}, d_min = {d_min}"
            )));
        }
        Ok(Self { dx, dy })
    }

    /// Square lattice without the lower bound check.
    pub fn square(d: f64) -> Self {
        Self { dx: d, dy: d }
    }
}

/// Cooperative shift and decay of the collective in-phase mode, Γ0 units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectiveResponse {
    pub omega_coop: f64,
    pub gamma_coop: f64,
}

impl CollectiveResponse {
    /// Shift in units of the cooperative decay.
    pub fn ratio(&self) -> f64 {
        self.omega_coop / self.gamma_coop
    }
}

fn check_subwavelength(lat: LatticeConstants) -> Result<()> {
    if !(lat.dx > 0.0 && lat.dy > 0.0 && lat.dx < 1.0 && lat.dy < 1.0) {
        return Err(Error::NotSubwavelength(format!(
            "dx = {}, dy = {}",
            lat.dx, lat.dy
        )));
    }
    Ok(())
}

/// `Γ_coop = 3/(4π dx dy)` in units of Γ0.
pub fn cooperative_decay(lat: LatticeConstants) -> Result<f64> {
    check_subwavelength(lat)?;
    Ok(3.0 / (4.0 * PI * lat.dx * lat.dy))
}

/// Full in-plane sum `Σ_{j≠0} G_0j` by Ewald summation.
pub fn lattice_sum(lat: LatticeConstants) -> Result<Complex64> {
    check_subwavelength(lat)?;
    let (dx, dy) = (lat.dx, lat.dy);
    let k = K0;
    let area = dx * dy;
    let e = (PI / area).sqrt();
    let a = k / (2.0 * e);
    let sqrt_pi = PI.sqrt();
    let ea2 = (a * a).exp();

    // Short-range part: Σ_{R≠0} (1 + ∂x²/k²) Re[e^{ikr} erfc(rE + ia)]/(4πr).
    let r_cut = 6.5 / e;
    let nx = (r_cut / dx).ceil() as i64;
    let ny = (r_cut / dy).ceil() as i64;
    let mut short = 0.0;
    for i in -nx..=nx {
        for j in -ny..=ny {
            if i == 0 && j == 0 {
                continue;
            }
            let x = i as f64 * dx;
            let y = j as f64 * dy;
            let r = (x * x + y * y).sqrt();
            if r > r_cut {
                continue;
            }
            let gam = (a * a - r * r * e * e).exp();
            let q = gam * Complex64::new(r * e, a).erfcx();
            let iq = Complex64::new(0.0, k);
            let q1 = iq * q - 2.0 * e / sqrt_pi * gam;
            let q2 = iq * q1 + 4.0 * r * e * e * e / sqrt_pi * gam;
            let (b, b1, b2) = (q.re, q1.re, q2.re);
            let fr = 4.0 * PI;
            let h = b / (fr * r);
            let h1 = b1 / (fr * r) - b / (fr * r * r);
            let h2 = b2 / (fr * r) - 2.0 * b1 / (fr * r * r) + 2.0 * b / (fr * r * r * r);
            let c2 = x * x / (r * r);
            short += h + (h2 * c2 + h1 * (1.0 / r - x * x / (r * r * r))) / (k * k);
        }
    }

    // Long-range part in reciprocal space, all reciprocal vectors included.
    let g_cut = 13.0 * e;
    let gx0 = 2.0 * PI / dx;
    let gy0 = 2.0 * PI / dy;
    let mx = (g_cut / gx0).ceil() as i64 + 1;
    let my = (g_cut / gy0).ceil() as i64 + 1;
    let mut long = Complex64::new(0.0, 0.0);
    for i in -mx..=mx {
        for j in -my..=my {
            let gx = i as f64 * gx0;
            let gy = j as f64 * gy0;
            let g2 = gx * gx + gy * gy;
            let factor = 1.0 - gx * gx / (k * k);
            if i == 0 && j == 0 {
                // erfc(−ia)/(−ik) = (i − erfi(a))/k
                long += Complex64::new(-a.erfi(), 1.0) / k * factor / (2.0 * area);
                continue;
            }
            if g2.sqrt() > g_cut {
                continue;
            }
            if g2 <= k * k {
                return Err(Error::NotSubwavelength(format!(
                    "propagating order ({i}, {j})"
                )));
            }
            let gam = (g2 - k * k).sqrt();
            long += factor * RealErrorFunctions::erfc(gam / (2.0 * e)) / (2.0 * area * gam);
        }
    }

    // Long-range part of the excluded origin term.
    let c1 = Complex64::new(-k * a.erfi() + 2.0 * e / sqrt_pi * ea2, k);
    let c3 = Complex64::new(
        k * k * k * a.erfi() - (2.0 * k * k * e + 4.0 * e * e * e) * ea2 / sqrt_pi,
        -k * k * k,
    ) / 6.0;
    let self_long = (c1 + 2.0 * c3 / (k * k)) / (4.0 * PI);

    let total = Complex64::new(short, 0.0) + long - self_long;
    Ok(total * (3.0 * PI / k))
}

/// Windowed real-space sum `Σ_{j≠0} G_0j e^{−R²/L²}` out to `cut·L`.
pub fn windowed_sum(lat: LatticeConstants, window: f64, cut: f64) -> Complex64 {
    let r_max = cut * window;
    let nx = (r_max / lat.dx).ceil() as i64;
    let ny = (r_max / lat.dy).ceil() as i64;
    let inv_l2 = 1.0 / (window * window);
    let mut acc = Complex64::new(0.0, 0.0);
    for i in -nx..=nx {
        let x = i as f64 * lat.dx;
        for j in -ny..=ny {
            if i == 0 && j == 0 {
                continue;
            }
            let y = j as f64 * lat.dy;
            let r2 = x * x + y * y;
            if r2 > r_max * r_max {
                continue;
            }
            acc += coupling_xx_raw(x, y, 0.0) * (-r2 * inv_l2).exp();
        }
    }
    acc
}

/// Tapered sum at windows `L` and `2L`, combined by one Richardson step.
pub fn windowed_sum_extrapolated(lat: LatticeConstants, window: f64) -> Complex64 {
    let s1 = windowed_sum(lat, window, 6.0);
    let s2 = windowed_sum(lat, 2.0 * window, 6.0);
    (s2 * 4.0 - s1) / 3.0
}

fn shift_memo() -> &'static Mutex<HashMap<(i64, i64), f64>> {
    static MEMO: OnceLock<Mutex<HashMap<(i64, i64), f64>>> = OnceLock::new();
    MEMO.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Cooperative shift `ω_coop = −Re Σ_{j≠0} G_0j` in Γ0 units.
///
/// Memoised on the lattice constants rounded to 1e−6. The imaginary part of
/// the same sum must reproduce `(Γ_coop − 1)/2`; a violation above 1e−6
/// signals a failed summation.
pub fn cooperative_shift(lat: LatticeConstants) -> Result<f64> {
    check_subwavelength(lat)?;
    let key = ((lat.dx * 1e6).round() as i64, (lat.dy * 1e6).round() as i64);
    if let Some(&w) = shift_memo().lock().expect("memo poisoned").get(&key) {
        return Ok(w);
    }
    let s = lattice_sum(lat)?;
    let residual = (2.0 * s.im + 1.0 - cooperative_decay(lat)?).abs();
    if residual > 1e-6 {
        return Err(Error::SumNotConverged(residual));
    }
    let w = -s.re;
    shift_memo().lock().expect("memo poisoned").insert(key, w);
    Ok(w)
}

/// Both collective quantities for a lattice.
pub fn collective_response(lat: LatticeConstants) -> Result<CollectiveResponse> {
    Ok(CollectiveResponse {
        omega_coop: cooperative_shift(lat)?,
        gamma_coop: cooperative_decay(lat)?,
    })
}

/// Transmission and reflection of one layer at `z = 0`.
pub fn single_layer_tr(
    delta: Detuning,
    resp: CollectiveResponse,
    gamma_prime: f64,
) -> (Complex64, Complex64) {
    let den = Complex64::new(
        delta.delta - resp.omega_coop,
        0.5 * (resp.gamma_coop + gamma_prime),
    );
    let t = 1.0 - Complex64::new(0.0, 0.5 * resp.gamma_coop) / den;
    (t, t - 1.0)
}

/// Reflection of one layer located at `z_m`, from the reciprocity relation.
pub fn single_layer_r_at(
    delta: Detuning,
    resp: CollectiveResponse,
    gamma_prime: f64,
    z_m: f64,
) -> Complex64 {
    let (t, _) = single_layer_tr(delta, resp, gamma_prime);
    (t - 1.0) * Complex64::new(0.0, 2.0 * K0 * z_m).exp()
}
