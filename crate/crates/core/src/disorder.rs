//! Stochastic imperfections: position disorder, inhomogeneous broadening and
//! the effective broadening that position disorder maps onto.
//!
//! Every configuration draws from its own ChaCha stream, selected by the
//! configuration index on top of a shared seed, so sample `i` does not depend
//! on how many samples or workers run.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::beams::{reflection_amplitude, BeamSpec};
use crate::collective2d::{collective_response, cooperative_decay, LatticeConstants};
use crate::greens::{bare_polarizability, Detuning, EmitterRates};
use crate::metalens::EmitterEnsemble;
use crate::solver::{solve_dipoles, Precision, SolveOptions};
use crate::{Error, Result};

/// Random stream for configuration `index` under `seed`.
pub fn config_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform-in-ball displacement of every emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderSpec {
    pub delta_d: f64,
    pub seed: u64,
}

impl DisorderSpec {
    pub fn new(delta_d: f64, seed: u64) -> Result<Self> {
        if !(delta_d >= 0.0) || !delta_d.is_finite() {
            return Err(Error::Invalid(format!(
                "displacement radius {delta_d} must be non-negative"
            )));
        }
        Ok(Self { delta_d, seed })
    }
}

/// Shape of the resonance-shift distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BroadeningKind {
    /// Half width at half maximum `width`.
    Lorentzian,
    /// Standard deviation `width`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BroadeningSpec {
    pub kind: BroadeningKind,
    pub width: f64,
    pub seed: u64,
}

impl BroadeningSpec {
    pub fn new(kind: BroadeningKind, width: f64, seed: u64) -> Result<Self> {
        if !(width >= 0.0) || !width.is_finite() {
            return Err(Error::Invalid(format!(
                "broadening width {width} must be non-negative"
            )));
        }
        Ok(Self { kind, width, seed })
    }
}

/// Point drawn uniformly from the ball of radius `r`, by rejection from the cube.
pub fn uniform_in_ball<R: Rng>(rng: &mut R, r: f64) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= 1.0 {
            return [r * v[0], r * v[1], r * v[2]];
        }
    }
}

/// Displace every emitter of configuration `index`.
///
/// The result is generally not mirror-closed, so it must be solved without the
/// quadrant reduction.
pub fn displace(ens: &EmitterEnsemble, spec: DisorderSpec, index: u64) -> EmitterEnsemble {
    if spec.delta_d == 0.0 {
        return ens.clone();
    }
    let mut rng = config_rng(spec.seed, index);
    let positions = ens
        .positions
        .iter()
        .map(|p| {
            let s = uniform_in_ball(&mut rng, spec.delta_d);
            [p[0] + s[0], p[1] + s[1], p[2] + s[2]]
        })
        .collect();
    EmitterEnsemble {
        positions,
        ..ens.clone()
    }
}

/// Resonance shifts `ω̃_i` of configuration `index`.
pub fn sample_shifts(n: usize, spec: BroadeningSpec, index: u64) -> Vec<f64> {
    if spec.width == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = config_rng(spec.seed, index);
    match spec.kind {
        BroadeningKind::Lorentzian => (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                spec.width * (std::f64::consts::PI * (u - 0.5)).tan()
            })
            .collect(),
        BroadeningKind::Gaussian => {
            let normal = Normal::new(0.0, spec.width).expect("width checked non-negative");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
    }
}

/// Disorder-averaged polarizability under Lorentzian shifts of half width
/// `sigma`: the bare form with `Γ′ → Γ′ + 2σ`.
pub fn averaged_polarizability(delta: Detuning, sigma: f64, rates: EmitterRates) -> Complex64 {
    bare_polarizability(
        delta,
        EmitterRates {
            gamma_prime: rates.gamma_prime + 2.0 * sigma,
            ..rates
        },
    )
}

/// Extra broadening that reduces the resonant reflection of an ideal array
/// from one to `|mean_r|`: `Γ_coop(1/|r| − 1)`.
pub fn effective_gamma_dis(mean_r: Complex64, gamma_coop: f64) -> Result<f64> {
    let m = mean_r.norm();
    if m == 0.0 {
        return Err(Error::FullyScrambled);
    }
    if m > 1.0 + 1e-9 {
        return Err(Error::Invalid(format!(
            "mean reflection magnitude {m} exceeds one"
        )));
    }
    Ok(gamma_coop * (1.0 / m - 1.0))
}

/// Quadratic law `prefactor·(π/2)(δd²/(dx dy))·Γ_coop`.
pub fn predicted_gamma_dis(delta_d: f64, lat: LatticeConstants, prefactor: f64) -> Result<f64> {
    Ok(
        prefactor * std::f64::consts::FRAC_PI_2 * delta_d * delta_d / (lat.dx * lat.dy)
            * cooperative_decay(lat)?,
    )
}

/// Centred single-layer `n × n` square array of spacing `d` at `z = 0`.
pub fn square_array(n: usize, d: f64) -> Vec<[f64; 3]> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push([(i as f64 - c) * d, (j as f64 - c) * d, 0.0]);
        }
    }
    out
}

/// One point of the reflection-based disorder extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderPoint {
    pub d: f64,
    pub delta_d: f64,
    pub mean_r: Complex64,
    pub gamma_dis: f64,
    pub predicted: f64,
    pub samples: usize,
}

/// Mean mode-projected reflection of a displaced square array at `Δ = ω_coop`.
///
/// The array has `n_side²` emitters at spacing `d`, is driven by a Gaussian of
/// waist `max(L/4, 1)` and the complex reflections are averaged before the
/// magnitude is taken.
pub fn disorder_point(
    d: f64,
    n_side: usize,
    delta_d: f64,
    samples: usize,
    seed: u64,
) -> Result<DisorderPoint> {
    let lat = LatticeConstants::square(d);
    let resp = collective_response(lat)?;
    let side = (n_side as f64 - 1.0) * d;
    let beam = BeamSpec::new((side / 4.0).max(1.0))?;
    let base = EmitterEnsemble::new(square_array(n_side, d), EmitterRates::lossless());
    let spec = DisorderSpec::new(delta_d, seed)?;
    let opts = SolveOptions {
        use_symmetry: false,
        precision: Precision::Double,
        memory_budget: None,
    };
    let mut sum = Complex64::new(0.0, 0.0);
    for k in 0..samples {
        let ens = displace(&base, spec, k as u64);
        let sol = solve_dipoles(&ens, &beam, Detuning::new(resp.omega_coop), opts)?;
        sum += reflection_amplitude(&ens, &sol, beam.w0);
    }
    let mean_r = sum / samples as f64;
    Ok(DisorderPoint {
        d,
        delta_d,
        mean_r,
        gamma_dis: effective_gamma_dis(mean_r, resp.gamma_coop)?,
        predicted: predicted_gamma_dis(delta_d, lat, 1.0)?,
        samples,
    })
}

/// Least-squares slope and intercept of `ln y` against `ln x`.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_radius_is_the_identity() {
        let ens = EmitterEnsemble::new(square_array(4, 0.2), EmitterRates::lossless());
        assert_eq!(displace(&ens, DisorderSpec::new(0.0, 1).unwrap(), 0), ens);
    }

    #[test]
    fn ball_moment_and_support() {
        let mut rng = config_rng(5, 0);
        let n = 200_000;
        let mut mean = 0.0;
        for _ in 0..n {
            let v = uniform_in_ball(&mut rng, 2.0);
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!(r <= 2.0);
            mean += r;
        }
        mean /= n as f64;
        assert!((mean - 1.5).abs() < 5e-3, "{mean}");
    }

    #[test]
    fn same_seed_same_configuration() {
        let ens = EmitterEnsemble::new(square_array(5, 0.1), EmitterRates::lossless());
        let spec = DisorderSpec::new(0.02, 42).unwrap();
        assert_eq!(displace(&ens, spec, 3), displace(&ens, spec, 3));
        assert_ne!(displace(&ens, spec, 3), displace(&ens, spec, 4));
    }

    #[test]
    fn zero_width_gives_no_shifts() {
        let s = BroadeningSpec::new(BroadeningKind::Lorentzian, 0.0, 1).unwrap();
        assert!(sample_shifts(10, s, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lorentzian_quartiles_sit_at_the_half_width() {
        let s = BroadeningSpec::new(BroadeningKind::Lorentzian, 2.5, 9).unwrap();
        let mut v: Vec<f64> = sample_shifts(100_000, s, 0)
            .into_iter()
            .map(f64::abs)
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = v[v.len() / 2];
        assert!((median / 2.5 - 1.0).abs() < 0.02, "{median}");
    }

    fn ks_statistic(mut v: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn samples_pass_kolmogorov_smirnov() {
        // Critical value at the 1% level for n = 10⁴.
        let crit = 1.628 / 100.0;
        let lor = sample_shifts(
            10_000,
            BroadeningSpec::new(BroadeningKind::Lorentzian, 1.3, 2).unwrap(),
            0,
        );
        let d = ks_statistic(lor, |x| 0.5 + (x / 1.3).atan() / std::f64::consts::PI);
        assert!(d < crit, "lorentzian D = {d}");
        let gau = sample_shifts(
            10_000,
            BroadeningSpec::new(BroadeningKind::Gaussian, 5.0, 3).unwrap(),
            0,
        );
        let d = ks_statistic(gau, |x| {
            0.5 * errorfunctions::RealErrorFunctions::erfc(-x / (5.0 * std::f64::consts::SQRT_2))
        });
        assert!(d < crit, "gaussian D = {d}");
    }

    #[test]
    fn averaged_polarizability_matches_quadrature() {
        // Integrate α(Δ − ω̃) against the Lorentzian with ω̃ = σ tan θ.
        let rates = EmitterRates::new(0.4).unwrap();
        let sigma = 2.5;
        for delta in [-3.0, 0.0, 1.7] {
            let n = 400_000;
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                let theta = -std::f64::consts::FRAC_PI_2
                    + (k as f64 + 0.5) * std::f64::consts::PI / n as f64;
                let w = sigma * theta.tan();
                acc += bare_polarizability(Detuning::new(delta - w), rates);
            }
            acc /= n as f64;
            let closed = averaged_polarizability(Detuning::new(delta), sigma, rates);
            assert!((acc - closed).norm() < 1e-8, "{delta}: {acc} vs {closed}");
        }
        let plain = averaged_polarizability(Detuning::new(0.3), 0.0, rates);
        assert_eq!(plain, bare_polarizability(Detuning::new(0.3), rates));
    }

    #[test]
    fn effective_broadening_values() {
        assert_eq!(
            effective_gamma_dis(Complex64::new(1.0, 0.0), 7.0).unwrap(),
            0.0
        );
        assert!((effective_gamma_dis(Complex64::new(0.0, -0.5), 7.0).unwrap() - 7.0).abs() < 1e-12);
        assert!(matches!(
            effective_gamma_dis(Complex64::new(0.0, 0.0), 7.0),
            Err(Error::FullyScrambled)
        ));
    }

    #[test]
    fn predicted_law_arithmetic() {
        let lat = LatticeConstants::square(0.2);
        let gc = cooperative_decay(lat).unwrap();
        assert_eq!(predicted_gamma_dis(0.0, lat, 1.0).unwrap(), 0.0);
        let v = predicted_gamma_dis(0.02, lat, 1.0).unwrap();
        assert!((v - std::f64::consts::FRAC_PI_2 * 0.01 * gc).abs() < 1e-12);
        // Equivalent wavelength form (3/8)(δd/d²)².
        assert!((v - 0.375 * (0.02 / 0.04f64).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn log_log_fit_recovers_a_power_law() {
        let xs = [0.1, 0.2, 0.4, 0.8];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let (slope, icpt) = log_log_fit(&xs, &ys);
        assert!((slope - 2.0).abs() < 1e-12 && (icpt.exp() - 3.0).abs() < 1e-12);
    }
}
