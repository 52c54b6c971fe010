//! Global-best particle swarm over the free lens parameters `(φ0, ΔR, α)`.
//!
//! Two objectives are provided: a table model scoring the power-weighted
//! lossy transmittance of the rings, and the full coupled-dipole efficiency.
//! Each particle draws from its own ChaCha stream, so a trajectory depends on
//! the seed only, never on the number of worker threads.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beams::{efficiency_eta, target_mode, BeamSpec};
use crate::collective2d::CollectiveResponse;
use crate::metalens::{
    assemble_metalens, ideal_phase, ring_power_weights, MetalensParams, RingSpec,
};
use crate::multilayer::{closed_form_from, LensCell, PhaseTable};
use crate::solver::{solve_dipoles, SolveOptions};
use crate::{wrap_phase, Error, Result};

/// One point of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub phi0: f64,
    pub delta_r: f64,
    pub alpha: f64,
}

impl Candidate {
    fn coords(&self) -> [f64; 3] {
        [self.phi0, self.delta_r, self.alpha]
    }

    fn from_coords(c: [f64; 3]) -> Self {
        Self {
            phi0: c[0],
            delta_r: c[1],
            alpha: c[2],
        }
    }

    /// Largest coordinate difference, with `φ0` compared on the circle.
    pub fn distance(&self, other: &Candidate) -> f64 {
        wrap_phase(self.phi0 - other.phi0)
            .abs()
            .max((self.delta_r - other.delta_r).abs())
            .max((self.alpha - other.alpha).abs())
    }
}

/// Swarm hyperparameters and the box for `ΔR` and `α`. `φ0` always spans the
/// whole circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub swarm_size: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
    pub delta_r_bounds: (f64, f64),
    pub alpha_bounds: (f64, f64),
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            swarm_size: 24,
            iterations: 40,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            seed: 0,
            delta_r_bounds: (0.2, 1.0),
            alpha_bounds: (0.0, 0.5),
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.swarm_size < 5 {
            return bad(format!("swarm size {} below 5", self.swarm_size));
        }
        if self.iterations == 0 {
            return bad("at least one iteration is required".into());
        }
        if !(self.inertia > 0.0 && self.inertia < 1.0) {
            return bad(format!("inertia {} outside (0, 1)", self.inertia));
        }
        if !(self.cognitive >= 0.0 && self.social >= 0.0)
            || !self.cognitive.is_finite()
            || !self.social.is_finite()
        {
            return bad("acceleration constants must be finite and non-negative".into());
        }
        let (r0, r1) = self.delta_r_bounds;
        if !(0.2..=1.0).contains(&r0) || !(0.2..=1.0).contains(&r1) || r0 > r1 {
            return bad(format!(
                "ring width bounds ({r0}, {r1}) must be ordered inside [0.2, 1]"
            ));
        }
        let (a0, a1) = self.alpha_bounds;
        if !(0.0..=0.5).contains(&a0) || !(0.0..=0.5).contains(&a1) || a0 > a1 {
            return bad(format!(
                "buffer bounds ({a0}, {a1}) must be ordered inside [0, 0.5]"
            ));
        }
        Ok(())
    }

    fn lower(&self) -> [f64; 3] {
        [-PI, self.delta_r_bounds.0, self.alpha_bounds.0]
    }

    fn upper(&self) -> [f64; 3] {
        [PI, self.delta_r_bounds.1, self.alpha_bounds.1]
    }
}

/// One objective evaluation as it appears in the log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub particle: usize,
    pub candidate: Candidate,
    /// `−∞` marks an infeasible particle.
    pub eta: f64,
}

/// Result of a swarm run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoOutcome {
    pub best: Candidate,
    pub best_value: f64,
    pub evaluations: usize,
    /// Global best after each iteration.
    pub history: Vec<f64>,
    pub log: Vec<LogRow>,
}

/// A particle's starting position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: Candidate,
    pub velocity: [f64; 3],
}

fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

/// Uniform positions in the box and velocities within a quarter of its span.
pub fn initial_swarm(cfg: &PsoConfig) -> Vec<Particle> {
    let (lo, hi) = (cfg.lower(), cfg.upper());
    (0..cfg.swarm_size)
        .map(|i| {
            let mut rng = particle_rng(cfg.seed, i);
            let mut x = [0.0; 3];
            let mut v = [0.0; 3];
            for d in 0..3 {
                x[d] = lo[d] + (hi[d] - lo[d]) * rng.gen::<f64>();
                v[d] = 0.25 * (hi[d] - lo[d]) * (2.0 * rng.gen::<f64>() - 1.0);
            }
            x[0] = wrap_phase(x[0]);
            Particle {
                position: Candidate::from_coords(x),
                velocity: v,
            }
        })
        .collect()
}

fn score<F>(objective: &F, c: &Candidate) -> f64
where
    F: Fn(&Candidate) -> Result<f64> + Sync,
{
    match objective(c) {
        Ok(v) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    }
}

/// Run the swarm from a random start.
pub fn run_pso<F>(cfg: &PsoConfig, objective: F) -> Result<PsoOutcome>
where
    F: Fn(&Candidate) -> Result<f64> + Sync,
{
    cfg.validate()?;
    run_pso_from(cfg, initial_swarm(cfg), objective)
}

/// Run the swarm from given particles. Iteration 0 evaluates the start, so
/// the objective is called exactly `swarm × iterations` times.
pub fn run_pso_from<F>(cfg: &PsoConfig, start: Vec<Particle>, objective: F) -> Result<PsoOutcome>
where
    F: Fn(&Candidate) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if start.len() != cfg.swarm_size {
        return Err(Error::Invalid(format!(
            "{} particles given for a swarm of {}",
            start.len(),
            cfg.swarm_size
        )));
    }
    let (lo, hi) = (cfg.lower(), cfg.upper());
    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.swarm_size)
        .map(|i| particle_rng(cfg.seed ^ 0x5eed, i))
        .collect();
    let mut x: Vec<[f64; 3]> = start.iter().map(|p| p.position.coords()).collect();
    let mut v: Vec<[f64; 3]> = start.iter().map(|p| p.velocity).collect();
    let mut pbest = x.clone();
    let mut pbest_val = vec![f64::NEG_INFINITY; cfg.swarm_size];
    let mut gbest = x[0];
    let mut gbest_val = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut log = Vec::with_capacity(cfg.swarm_size * cfg.iterations);

    for it in 0..cfg.iterations {
        if it > 0 {
            for i in 0..cfg.swarm_size {
                let rng = &mut rngs[i];
                for d in 0..3 {
                    let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
                    let (dp, dg) = if d == 0 {
                        (
                            wrap_phase(pbest[i][0] - x[i][0]),
                            wrap_phase(gbest[0] - x[i][0]),
                        )
                    } else {
                        (pbest[i][d] - x[i][d], gbest[d] - x[i][d])
                    };
                    v[i][d] =
                        cfg.inertia * v[i][d] + cfg.cognitive * u1 * dp + cfg.social * u2 * dg;
                    x[i][d] += v[i][d];
                }
                x[i][0] = wrap_phase(x[i][0]);
                for d in 1..3 {
                    x[i][d] = x[i][d].clamp(lo[d], hi[d]);
                }
            }
        }
        let values: Vec<f64> = x
            .par_iter()
            .map(|c| score(&objective, &Candidate::from_coords(*c)))
            .collect();
        for (i, &val) in values.iter().enumerate() {
            log.push(LogRow {
                iteration: it,
                particle: i,
                candidate: Candidate::from_coords(x[i]),
                eta: val,
            });
            if val > pbest_val[i] {
                pbest_val[i] = val;
                pbest[i] = x[i];
            }
            if val > gbest_val {
                gbest_val = val;
                gbest = x[i];
            }
        }
        history.push(gbest_val);
    }
    Ok(PsoOutcome {
        best: Candidate::from_coords(gbest),
        best_value: gbest_val,
        evaluations: log.len(),
        history,
        log,
    })
}

/// Parameters held fixed during a search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    pub f: f64,
    pub r_lens: f64,
    pub w0: f64,
    pub d_min: f64,
    pub gamma_prime: f64,
}

impl FixedParams {
    pub fn lens(&self, c: &Candidate) -> MetalensParams {
        MetalensParams {
            f: self.f,
            r_lens: self.r_lens,
            delta_r: c.delta_r,
            phi0: wrap_phase(c.phi0),
            alpha: c.alpha,
            d_min: self.d_min,
            gamma_prime: self.gamma_prime,
        }
    }
}

/// Objective used by the swarm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Fidelity {
    TableModel,
    FullSolve(SolveOptions),
}

/// Rings whose lattices come from the interpolated table lookup.
fn fast_rings(params: &MetalensParams, table: &PhaseTable) -> Vec<RingSpec> {
    let mut rings = Vec::new();
    let mut j = 1usize;
    loop {
        let r_inner = (j - 1) as f64 * params.delta_r;
        if r_inner >= params.r_lens - 1e-9 {
            break;
        }
        let r_outer = (j as f64 * params.delta_r).min(params.r_lens);
        let phi = ideal_phase(0.5 * (r_inner + r_outer), params.f, params.phi0);
        rings.push(RingSpec {
            index: j,
            r_inner,
            r_outer,
            phi,
            cell: table.interpolate(phi),
        });
        j += 1;
    }
    rings
}

/// Power-weighted mean of the lossy three-layer transmittance `|t|²` over
/// the rings. Empty rings focus nothing and score zero. `α` does not enter.
pub fn table_model_eta(fixed: &FixedParams, c: &Candidate, table: &PhaseTable) -> Result<f64> {
    let params = fixed.lens(c);
    params.validate()?;
    if (table.config.d_min - fixed.d_min).abs() > 1e-12 {
        return Err(Error::Invalid(format!(
            "design table built for d_min = {} but lens uses {}",
            table.config.d_min, fixed.d_min
        )));
    }
    let rings = fast_rings(&params, table);
    let weights = ring_power_weights(&rings, fixed.w0);
    let (mut num, mut den) = (0.0, 0.0);
    for (ring, w) in rings.iter().zip(weights) {
        den += w;
        if let LensCell::Filled(t) = ring.cell {
            let resp = CollectiveResponse {
                omega_coop: t.omega_coop,
                gamma_coop: t.gamma_coop,
            };
            let amp: Complex64 = closed_form_from(3, t.dz, 0.0, resp, fixed.gamma_prime);
            num += w * amp.norm_sqr();
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Efficiency `η` of the assembled lens from the full dipole solve.
pub fn full_solve_eta(
    fixed: &FixedParams,
    c: &Candidate,
    table: &PhaseTable,
    opts: SolveOptions,
) -> Result<f64> {
    let params = fixed.lens(c);
    let (ens, _) = assemble_metalens(&params, table)?;
    let beam = BeamSpec::new(fixed.w0)?;
    let target = target_mode(fixed.w0, fixed.f)?;
    let sol = solve_dipoles(&ens, &beam, crate::greens::Detuning::resonant(), opts)?;
    Ok(efficiency_eta(&ens, &sol, &target, fixed.w0))
}

/// Objective value of `c` at the chosen fidelity.
pub fn evaluate(
    fixed: &FixedParams,
    c: &Candidate,
    table: &PhaseTable,
    fidelity: Fidelity,
) -> Result<f64> {
    match fidelity {
        Fidelity::TableModel => table_model_eta(fixed, c, table),
        Fidelity::FullSolve(opts) => full_solve_eta(fixed, c, table, opts),
    }
}

/// Swarm search of the lens parameters at fixed `f`, `r_lens`, `w0`, `d_min`, `Γ′`.
pub fn optimize_lens(
    fixed: &FixedParams,
    cfg: &PsoConfig,
    fidelity: Fidelity,
    table: &PhaseTable,
) -> Result<PsoOutcome> {
    let probe = Candidate {
        phi0: 0.0,
        delta_r: cfg.delta_r_bounds.0,
        alpha: cfg.alpha_bounds.0,
    };
    fixed.lens(&probe).validate()?;
    BeamSpec::new(fixed.w0)?;
    run_pso(cfg, |c| evaluate(fixed, c, table, fidelity))
}

/// The `k` best logged candidates that differ by more than `min_separation`.
pub fn top_distinct(log: &[LogRow], k: usize, min_separation: f64) -> Vec<LogRow> {
    let mut rows: Vec<LogRow> = log.iter().copied().filter(|r| r.eta.is_finite()).collect();
    rows.sort_by(|a, b| {
        b.eta
            .total_cmp(&a.eta)
            .then(a.iteration.cmp(&b.iteration))
            .then(a.particle.cmp(&b.particle))
    });
    let mut out: Vec<LogRow> = Vec::new();
    for r in rows {
        if out.len() == k {
            break;
        }
        if out
            .iter()
            .all(|o| o.candidate.distance(&r.candidate) > min_separation)
        {
            out.push(r);
        }
    }
    out
}

/// A finalist re-scored by the full solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub candidate: Candidate,
    pub search_eta: f64,
    /// `None` when the full solve failed.
    pub full_eta: Option<f64>,
}

/// Re-score the top distinct candidates with full solves, best first.
pub fn rank_with_full_solve(
    fixed: &FixedParams,
    log: &[LogRow],
    table: &PhaseTable,
    opts: SolveOptions,
    k: usize,
    min_separation: f64,
) -> Vec<RankedCandidate> {
    let mut out: Vec<RankedCandidate> = top_distinct(log, k, min_separation)
        .into_iter()
        .map(|r| RankedCandidate {
            candidate: r.candidate,
            search_eta: r.eta,
            full_eta: full_solve_eta(fixed, &r.candidate, table, opts).ok(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.full_eta
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.full_eta.unwrap_or(f64::NEG_INFINITY))
    });
    out
}

/// Write the log with a unit header.
pub fn write_log_csv<W: std::io::Write>(log: &[LogRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "iteration",
        "particle",
        "phi0_rad",
        "delta_r_lambda0",
        "alpha",
        "eta",
    ])?;
    for r in log {
        wr.write_record([
            r.iteration.to_string(),
            r.particle.to_string(),
            r.candidate.phi0.to_string(),
            r.candidate.delta_r.to_string(),
            r.candidate.alpha.to_string(),
            r.eta.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Spearman rank correlation, ties given their mean rank.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let mean = 0.5 * (s + e) as f64;
            for &i in &idx[s..=e] {
                r[i] = mean;
            }
            s = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multilayer::{build_phase_table, PhaseTableConfig};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn bowl(c: &Candidate) -> Result<f64> {
        Ok(-(wrap_phase(c.phi0 - 1.0).powi(2)
            + (c.delta_r - 0.6).powi(2)
            + (c.alpha - 0.3).powi(2)))
    }

    #[test]
    fn degenerate_swarm_stays_put() {
        let cfg = PsoConfig {
            swarm_size: 6,
            iterations: 5,
            ..Default::default()
        };
        let p = Candidate {
            phi0: -2.0,
            delta_r: 0.5,
            alpha: 0.1,
        };
        let start = vec![
            Particle {
                position: p,
                velocity: [0.0; 3]
            };
            6
        ];
        let out = run_pso_from(&cfg, start, bowl).unwrap();
        assert_eq!(out.best, p);
        assert!(out.log.iter().all(|r| r.candidate == p));
    }

    #[test]
    fn budget_monotonicity_and_determinism() {
        let cfg = PsoConfig {
            swarm_size: 8,
            iterations: 15,
            seed: 11,
            ..Default::default()
        };
        let calls = AtomicUsize::new(0);
        let out = run_pso(&cfg, |c| {
            calls.fetch_add(1, Ordering::Relaxed);
            bowl(c)
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 8 * 15);
        assert_eq!(out.evaluations, 8 * 15);
        assert!(out.history.windows(2).all(|w| w[1] >= w[0]));
        assert!(out.best_value > -1e-2, "converged to {:?}", out.best);
        let again = run_pso(&cfg, bowl).unwrap();
        assert_eq!(out, again);
        let other = run_pso(&PsoConfig { seed: 12, ..cfg }, bowl).unwrap();
        assert_ne!(out.log, other.log);
    }

    #[test]
    fn positions_stay_in_bounds_and_phase_wraps() {
        let cfg = PsoConfig {
            swarm_size: 10,
            iterations: 20,
            seed: 3,
            ..Default::default()
        };
        // Optimum across the ±π seam and on the box corner.
        let out = run_pso(&cfg, |c| {
            Ok(-(wrap_phase(c.phi0 - PI).powi(2)) + c.delta_r + c.alpha)
        })
        .unwrap();
        for r in &out.log {
            let c = r.candidate;
            assert!(c.phi0 > -PI - 1e-12 && c.phi0 <= PI + 1e-12);
            assert!((0.2..=1.0).contains(&c.delta_r) && (0.0..=0.5).contains(&c.alpha));
        }
        assert!(wrap_phase(out.best.phi0 - PI).abs() < 0.1);
        assert!(out.best.delta_r > 0.99 && out.best.alpha > 0.49);
    }

    #[test]
    fn failures_are_infeasible_not_fatal() {
        let cfg = PsoConfig {
            swarm_size: 5,
            iterations: 4,
            seed: 1,
            ..Default::default()
        };
        let out = run_pso(&cfg, |c| {
            if c.alpha > 0.25 {
                Err(Error::Invalid("x".into()))
            } else {
                bowl(c)
            }
        })
        .unwrap();
        assert!(out
            .log
            .iter()
            .filter(|r| r.candidate.alpha > 0.25)
            .all(|r| r.eta == f64::NEG_INFINITY));
        assert!(out.best_value.is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(PsoConfig::default().validate().is_ok());
        assert!(PsoConfig {
            swarm_size: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PsoConfig {
            inertia: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PsoConfig {
            delta_r_bounds: (0.1, 1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PsoConfig {
            alpha_bounds: (0.3, 0.2),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn top_distinct_skips_neighbours() {
        let mk = |phi0: f64, eta: f64, i: usize| LogRow {
            iteration: 0,
            particle: i,
            candidate: Candidate {
                phi0,
                delta_r: 0.5,
                alpha: 0.2,
            },
            eta,
        };
        let log = vec![
            mk(PI, 0.9, 0),
            mk(-PI + 1e-5, 0.89, 1),
            mk(0.0, 0.5, 2),
            mk(1.0, f64::NEG_INFINITY, 3),
            mk(2.0, 0.1, 4),
        ];
        let top = top_distinct(&log, 3, 1e-3);
        assert_eq!(
            top.iter().map(|r| r.particle).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
    }

    #[test]
    fn rank_correlation_oracle() {
        assert!(
            (rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs()
                < 1e-12
        );
        assert!((rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Textbook value with one tie: ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4).
        let r = rank_correlation(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn table_model_is_a_weighted_transmittance() {
        let table = build_phase_table(PhaseTableConfig::new(0.05)).unwrap();
        let fixed = FixedParams {
            f: 10.0,
            r_lens: 5.0,
            w0: 2.0,
            d_min: 0.05,
            gamma_prime: 0.0,
        };
        let c = Candidate {
            phi0: -2.0,
            delta_r: 0.5,
            alpha: 0.2,
        };
        // Lossless filled rings transmit fully, so the score is the power share of filled rings.
        let eta = table_model_eta(&fixed, &c, &table).unwrap();
        let rings = fast_rings(&fixed.lens(&c), &table);
        let w = ring_power_weights(&rings, 2.0);
        let share: f64 = rings
            .iter()
            .zip(&w)
            .filter(|(r, _)| r.triple().is_some())
            .map(|(_, w)| w)
            .sum::<f64>()
            / w.iter().sum::<f64>();
        assert!((eta - share).abs() < 1e-6, "{eta} vs {share}");
        let lossy = table_model_eta(
            &FixedParams {
                gamma_prime: 5.75,
                ..fixed
            },
            &c,
            &table,
        )
        .unwrap();
        assert!(lossy < eta && lossy > 0.0);
        // The buffer fraction is invisible to the table model.
        let c2 = Candidate { alpha: 0.45, ..c };
        assert_eq!(table_model_eta(&fixed, &c2, &table).unwrap(), eta);
        let bad = FixedParams {
            d_min: 0.03,
            ..fixed
        };
        assert!(table_model_eta(&bad, &c, &table).is_err());
    }

    #[test]
    fn write_log_has_header() {
        let row = LogRow {
            iteration: 1,
            particle: 2,
            candidate: Candidate {
                phi0: 0.5,
                delta_r: 0.6,
                alpha: 0.1,
            },
            eta: 0.7,
        };
        let mut buf = Vec::new();
        write_log_csv(&[row], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s.lines().next().unwrap(),
            "iteration,particle,phi0_rad,delta_r_lambda0,alpha,eta"
        );
        assert_eq!(s.lines().nth(1).unwrap(), "1,2,0.5,0.6,0.1,0.7");
    }
}
