//! Exact coupled-dipole solve for finite ensembles.
//!
//! The unknowns are relative dipoles `p_j/𝓟0` satisfying
//! `(1/α_j) p_j − Σ_{k≠j} G_jk p_k = E_in(r_j)`, with `G` the dimensionless
//! [`coupling_xx`](crate::greens::coupling_xx_raw) kernel and
//! `1/α_j = −(Δ − ω̃_j + i(1 + Γ′)/2)`. The dense system is factorised by LU in
//! the working precision. When ensemble and drive are both even under
//! `x → −x` and `y → −y`, only the quadrant representatives are solved for.

use std::collections::HashMap;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::lu::partial_pivoting::{factor, solve};
use faer::prelude::Solve;
use faer::{Mat, Par};
use num_complex::{Complex, Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::greens::{coupling_xx_raw, Detuning};
use crate::metalens::EmitterEnsemble;
use crate::{Error, Result};

/// Scalar `x̂` drive `E_in/E0` as a function of position.
pub trait DriveField: Sync {
    fn at(&self, x: f64, y: f64, z: f64) -> Complex64;
}

/// Unit plane wave `e^{ik0 z}` at normal incidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneWave;

impl DriveField for PlaneWave {
    fn at(&self, _x: f64, _y: f64, z: f64) -> Complex64 {
        Complex64::from_polar(1.0, crate::K0 * z)
    }
}

/// Working precision of matrix storage and factorisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    fn bytes(self) -> u64 {
        match self {
            Precision::Single => 8,
            Precision::Double => 16,
        }
    }

    /// Relative residual accepted after a solve.
    pub fn residual_tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-3,
            Precision::Double => 1e-6,
        }
    }
}

/// Solve controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub use_symmetry: bool,
    pub precision: Precision,
    /// Matrix memory ceiling in bytes; `None` means 75% of physical memory.
    pub memory_budget: Option<u64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            use_symmetry: true,
            precision: Precision::Double,
            memory_budget: None,
        }
    }
}

/// Dipole amplitudes in full ensemble order plus solve metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleSolution {
    pub amplitudes: Vec<Complex64>,
    pub precision: Precision,
    /// Size of the linear system actually factorised.
    pub reduced_size: usize,
    /// Relative residual `‖A p − b‖/‖b‖` of the solved system.
    pub residual: f64,
    /// Whether the quadrant reduction was used.
    pub symmetric: bool,
}

impl DipoleSolution {
    /// All-zero amplitudes, e.g. for an inert ensemble.
    pub fn zeros(n: usize) -> Self {
        Self {
            amplitudes: vec![Complex64::new(0.0, 0.0); n],
            precision: Precision::Double,
            reduced_size: 0,
            residual: 0.0,
            symmetric: false,
        }
    }
}

/// Bytes needed for an `n × n` matrix in `precision`, with 10% overhead.
pub fn memory_estimate(n_unknowns: usize, precision: Precision) -> u64 {
    let n = n_unknowns as u64;
    n * n * precision.bytes() * 11 / 10
}

/// 75% of `MemTotal` from `/proc/meminfo`, or 8 GB when unavailable.
pub fn default_memory_budget() -> u64 {
    let total = std::fs::read_to_string("/proc/meminfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("MemTotal:"))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|kb| kb.parse::<u64>().ok())
            .map(|kb| kb * 1024)
    });
    total.map_or(8 << 30, |t| t / 4 * 3)
}

/// Mirror orbits of an ensemble under `x → −x`, `y → −y`.
#[derive(Debug, Clone)]
pub struct Orbits {
    /// Representative (x ≥ 0, y ≥ 0) atom index of each orbit.
    pub reps: Vec<usize>,
    /// Distinct member indices of each orbit, representative first.
    pub members: Vec<Vec<usize>>,
    /// Orbit of every atom.
    pub orbit_of: Vec<usize>,
}

fn position_key(x: f64, y: f64, z: f64) -> (i64, i64, i64) {
    let q = |v: f64| (v * 1e9).round() as i64;
    (q(x), q(y), q(z))
}

/// Orbit decomposition, or an error if the ensemble is not reflection-closed.
pub fn mirror_orbits(ens: &EmitterEnsemble) -> Result<Orbits> {
    let index: HashMap<(i64, i64, i64), usize> = ens
        .positions
        .iter()
        .enumerate()
        .map(|(i, r)| (position_key(r[0], r[1], r[2]), i))
        .collect();
    if index.len() != ens.positions.len() {
        return Err(Error::Invalid(
            "ensemble contains coincident emitters".into(),
        ));
    }
    let mut reps = Vec::new();
    let mut members = Vec::new();
    let mut orbit_of = vec![usize::MAX; ens.positions.len()];
    for (i, r) in ens.positions.iter().enumerate() {
        if r[0] < 0.0 || r[1] < 0.0 {
            continue;
        }
        let mut orbit = vec![i];
        for (sx, sy) in [(-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
            let key = position_key(sx * r[0], sy * r[1], r[2]);
            let j = *index.get(&key).ok_or_else(|| {
                Error::Invalid(format!(
                    "ensemble not reflection-closed at ({}, {}, {})",
                    r[0], r[1], r[2]
                ))
            })?;
            if !orbit.contains(&j) {
                orbit.push(j);
            }
        }
        for &j in &orbit {
            orbit_of[j] = reps.len();
        }
        reps.push(i);
        members.push(orbit);
    }
    if orbit_of.iter().any(|&o| o == usize::MAX) {
        return Err(Error::Invalid("ensemble not reflection-closed".into()));
    }
    Ok(Orbits {
        reps,
        members,
        orbit_of,
    })
}

fn inverse_polarizability(ens: &EmitterEnsemble, delta: Detuning, i: usize) -> Complex64 {
    let shift = ens.shifts.as_ref().map_or(0.0, |s| s[i]);
    -Complex64::new(delta.delta - shift, (1.0 + ens.rates.gamma_prime) / 2.0)
}

/// Linear system in orbit (or atom) coordinates, evaluated on demand.
struct System<'a> {
    ens: &'a EmitterEnsemble,
    /// Row atoms (representatives).
    rows: Vec<usize>,
    /// Source atoms of each column.
    cols: Vec<Vec<usize>>,
    inv_alpha: Vec<Complex64>,
}

impl System<'_> {
    fn entry(&self, i: usize, j: usize) -> Complex64 {
        let ri = self.ens.positions[self.rows[i]];
        let mut acc = Complex64::new(0.0, 0.0);
        for &s in &self.cols[j] {
            if s == self.rows[i] {
                continue;
            }
            let rs = self.ens.positions[s];
            acc -= coupling_xx_raw(ri[0] - rs[0], ri[1] - rs[1], ri[2] - rs[2]);
        }
        if i == j {
            acc += self.inv_alpha[i];
        }
        acc
    }

    fn size(&self) -> usize {
        self.rows.len()
    }

    fn residual(&self, p: &[Complex64], b: &[Complex64]) -> f64 {
        let n = self.size();
        let r2: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = -b[i];
                for (j, pj) in p.iter().enumerate() {
                    acc += self.entry(i, j) * pj;
                }
                acc.norm_sqr()
            })
            .sum();
        let b2: f64 = b.iter().map(|v| v.norm_sqr()).sum();
        if b2 == 0.0 {
            r2.sqrt()
        } else {
            (r2 / b2).sqrt()
        }
    }
}

trait WorkScalar: faer::traits::ComplexField + Copy + Send + Sync {
    fn from_c64(v: Complex64) -> Self;
    fn to_c64(self) -> Complex64;
}

impl WorkScalar for Complex32 {
    fn from_c64(v: Complex64) -> Self {
        Complex::new(v.re as f32, v.im as f32)
    }
    fn to_c64(self) -> Complex64 {
        Complex64::new(self.re as f64, self.im as f64)
    }
}

impl WorkScalar for Complex64 {
    fn from_c64(v: Complex64) -> Self {
        v
    }
    fn to_c64(self) -> Complex64 {
        self
    }
}

fn factor_and_solve<T: WorkScalar>(sys: &System, b: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = sys.size();
    let mut a = Mat::<T>::zeros(n, n);
    a.par_col_iter_mut().enumerate().for_each(|(j, mut col)| {
        for i in 0..n {
            col[i] = T::from_c64(sys.entry(i, j));
        }
    });
    let mut perm = vec![0usize; n];
    let mut perm_inv = vec![0usize; n];
    let par = Par::rayon(0);
    let lu_req = factor::lu_in_place_scratch::<usize, T>(n, n, par, Default::default());
    let solve_req = solve::solve_in_place_scratch::<usize, T>(n, 1, par);
    let mut buf = MemBuffer::new(lu_req.or(solve_req));
    let (_, p) = factor::lu_in_place(
        a.as_mut(),
        &mut perm,
        &mut perm_inv,
        par,
        MemStack::new(&mut buf),
        Default::default(),
    );

    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let u = a[(i, i)].to_c64().norm();
        lo = lo.min(u);
        hi = hi.max(u);
    }
    let estimate = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let eps = match std::mem::size_of::<T>() {
        8 => f32::EPSILON as f64,
        _ => f64::EPSILON,
    };
    if !estimate.is_finite() || estimate * eps > 1.0 {
        return Err(Error::Singular(format!(
            "pivot ratio {estimate:.3e} in an {n}×{n} factorisation"
        )));
    }

    let mut rhs = Mat::<T>::from_fn(n, 1, |i, _| T::from_c64(b[i]));
    solve::solve_in_place(
        a.as_ref(),
        a.as_ref(),
        p,
        rhs.as_mut(),
        par,
        MemStack::new(&mut buf),
    );
    Ok((0..n).map(|i| rhs[(i, 0)].to_c64()).collect())
}

/// Solve the coupled-dipole equations for `ens` under `drive` at detuning `delta`.
pub fn solve_dipoles(
    ens: &EmitterEnsemble,
    drive: &dyn DriveField,
    delta: Detuning,
    opts: SolveOptions,
) -> Result<DipoleSolution> {
    let n = ens.positions.len();
    if n == 0 {
        return Ok(DipoleSolution {
            precision: opts.precision,
            ..DipoleSolution::zeros(0)
        });
    }
    if let Some(s) = &ens.shifts {
        if s.len() != n {
            return Err(Error::Invalid(format!(
                "{} frequency shifts for {n} emitters",
                s.len()
            )));
        }
    }
    let orbits = if opts.use_symmetry {
        if ens.shifts.is_some() {
            return Err(Error::Invalid(
                "per-emitter shifts break the mirror symmetry".into(),
            ));
        }
        Some(mirror_orbits(ens)?)
    } else {
        None
    };
    let (rows, cols) = match &orbits {
        Some(o) => (o.reps.clone(), o.members.clone()),
        None => ((0..n).collect(), (0..n).map(|i| vec![i]).collect()),
    };
    let size = rows.len();
    let needed = memory_estimate(size, opts.precision);
    let budget = opts.memory_budget.unwrap_or_else(default_memory_budget);
    if needed > budget {
        return Err(Error::MemoryBudget { needed, budget });
    }
    let inv_alpha = rows
        .iter()
        .map(|&i| inverse_polarizability(ens, delta, i))
        .collect();
    let sys = System {
        ens,
        rows,
        cols,
        inv_alpha,
    };
    let b: Vec<Complex64> = sys
        .rows
        .iter()
        .map(|&i| {
            let r = ens.positions[i];
            drive.at(r[0], r[1], r[2])
        })
        .collect();
    let p = match opts.precision {
        Precision::Single => factor_and_solve::<Complex32>(&sys, &b)?,
        Precision::Double => factor_and_solve::<Complex64>(&sys, &b)?,
    };
    let residual = sys.residual(&p, &b);
    if !(residual < opts.precision.residual_tolerance()) {
        return Err(Error::Singular(format!(
            "relative residual {residual:.3e} above tolerance"
        )));
    }
    let amplitudes = match &orbits {
        Some(o) => o.orbit_of.iter().map(|&k| p[k]).collect(),
        None => p,
    };
    Ok(DipoleSolution {
        amplitudes,
        precision: opts.precision,
        reduced_size: size,
        residual,
        symmetric: orbits.is_some(),
    })
}

/// Dipoles of one ensemble at many detunings.
///
/// The system matrix is `B − Δ·I` with `B` independent of `Δ`, so a single
/// eigendecomposition `B = V Λ V⁻¹` gives `p(Δ) = V (Λ − Δ)⁻¹ V⁻¹ E_in`.
pub struct SpectralSolver {
    values: Vec<Complex64>,
    vectors: Mat<Complex64>,
    /// `V⁻¹ E_in`.
    coeffs: Vec<Complex64>,
}

impl SpectralSolver {
    pub fn new(ens: &EmitterEnsemble, drive: &dyn DriveField) -> Result<Self> {
        let n = ens.len();
        let rows: Vec<usize> = (0..n).collect();
        let cols = (0..n).map(|i| vec![i]).collect();
        // Entries at Δ = 0 are exactly B.
        let inv_alpha = rows
            .iter()
            .map(|&i| inverse_polarizability(ens, Detuning::resonant(), i))
            .collect();
        let sys = System {
            ens,
            rows,
            cols,
            inv_alpha,
        };
        let b = Mat::<Complex64>::from_fn(n, n, |i, j| sys.entry(i, j));
        let eig = faer::linalg::solvers::Eigen::new(b.as_ref())
            .map_err(|e| Error::Singular(format!("eigendecomposition failed: {e:?}")))?;
        let vectors = eig.U().to_owned();
        let values: Vec<Complex64> = (0..n).map(|k| eig.S()[k]).collect();
        let rhs = Mat::<Complex64>::from_fn(n, 1, |i, _| {
            let r = ens.positions[i];
            drive.at(r[0], r[1], r[2])
        });
        let coeffs_mat = vectors.partial_piv_lu().solve(&rhs);
        let coeffs = (0..n).map(|i| coeffs_mat[(i, 0)]).collect();
        Ok(Self {
            values,
            vectors,
            coeffs,
        })
    }

    /// Dipole amplitudes at detuning `delta`.
    pub fn dipoles(&self, delta: Detuning) -> Vec<Complex64> {
        let n = self.values.len();
        let scaled: Vec<Complex64> = (0..n)
            .map(|k| self.coeffs[k] / (self.values[k] - delta.delta))
            .collect();
        (0..n)
            .map(|i| (0..n).map(|k| self.vectors[(i, k)] * scaled[k]).sum())
            .collect()
    }

    /// Precompute `Σ_i w_i p_i(Δ)` for a fixed weight vector.
    pub fn projector(&self, weights: &[Complex64]) -> SpectralProjector<'_> {
        let n = self.values.len();
        let wv = (0..n)
            .map(|k| (0..n).map(|i| weights[i] * self.vectors[(i, k)]).sum())
            .collect();
        SpectralProjector { solver: self, wv }
    }
}

/// Linear functional of the dipoles evaluated in `O(n)` per detuning.
pub struct SpectralProjector<'a> {
    solver: &'a SpectralSolver,
    wv: Vec<Complex64>,
}

impl SpectralProjector<'_> {
    pub fn at(&self, delta: Detuning) -> Complex64 {
        let s = self.solver;
        (0..s.values.len())
            .map(|k| self.wv[k] * s.coeffs[k] / (s.values[k] - delta.delta))
            .sum()
    }
}

/// Total field `E_out/E0 = E_in + Σ_j G(r − r_j) p_j` at `point`.
pub fn scattered_field(
    ens: &EmitterEnsemble,
    sol: &DipoleSolution,
    drive: &dyn DriveField,
    point: [f64; 3],
) -> Result<Complex64> {
    let mut acc = drive.at(point[0], point[1], point[2]);
    for (r, p) in ens.positions.iter().zip(&sol.amplitudes) {
        let (dx, dy, dz) = (point[0] - r[0], point[1] - r[1], point[2] - r[2]);
        if dx * dx + dy * dy + dz * dz < 1e-12 {
            return Err(Error::OnEmitter);
        }
        acc += coupling_xx_raw(dx, dy, dz) * p;
    }
    Ok(acc)
}

/// Power bookkeeping of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBalance {
    /// Work done by the drive, `−Σ Im(p_j^* E_in(r_j))`.
    pub extinction: f64,
    /// Radiated power `Σ_jk p_j^* Im G_jk p_k` with `Im G_jj = 1/2`.
    pub radiated: f64,
    /// Non-radiative loss `(Γ′/2) Σ |p_j|²`.
    pub absorbed: f64,
}

/// Extinction, radiated and absorbed power of a solution, computed independently.
pub fn energy_balance(
    ens: &EmitterEnsemble,
    sol: &DipoleSolution,
    drive: &dyn DriveField,
) -> EnergyBalance {
    let pos = &ens.positions;
    let p = &sol.amplitudes;
    let extinction: f64 = pos
        .iter()
        .zip(p)
        .map(|(r, pj)| -(pj.conj() * drive.at(r[0], r[1], r[2])).im)
        .sum();
    let radiated: f64 = (0..pos.len())
        .into_par_iter()
        .map(|j| {
            let mut acc = Complex64::new(0.5, 0.0) * p[j];
            for k in 0..pos.len() {
                if k != j {
                    let (a, b) = (pos[j], pos[k]);
                    acc += coupling_xx_raw(a[0] - b[0], a[1] - b[1], a[2] - b[2]).im * p[k];
                }
            }
            (p[j].conj() * acc).re
        })
        .sum();
    let absorbed = ens.rates.gamma_prime / 2.0 * p.iter().map(|v| v.norm_sqr()).sum::<f64>();
    EnergyBalance {
        extinction,
        radiated,
        absorbed,
    }
}

/// Orientation of a field-map plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneKind {
    /// `y = 0`; grid axes `(x, z)`.
    Y0,
    /// `x = 0`; grid axes `(y, z)`.
    X0,
    /// `z = const`; grid axes `(x, y)`.
    ConstZ(f64),
}

/// Regular grid on a plane: `u` and `v` ranges with a common spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldPlane {
    pub kind: PlaneKind,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    pub spacing: f64,
}

impl FieldPlane {
    /// Square `[−extent, extent]²` grid.
    pub fn square(kind: PlaneKind, extent: f64, spacing: f64) -> Self {
        Self {
            kind,
            u_range: (-extent, extent),
            v_range: (-extent, extent),
            spacing,
        }
    }

    fn counts(&self) -> (usize, usize) {
        let c = |r: (f64, f64)| ((r.1 - r.0) / self.spacing).round() as usize + 1;
        (c(self.u_range), c(self.v_range))
    }

    fn point(&self, i: usize, j: usize) -> [f64; 3] {
        let u = self.u_range.0 + i as f64 * self.spacing;
        let v = self.v_range.0 + j as f64 * self.spacing;
        match self.kind {
            PlaneKind::Y0 => [u, 0.0, v],
            PlaneKind::X0 => [0.0, u, v],
            PlaneKind::ConstZ(z) => [u, v, z],
        }
    }

    fn symmetric_u(&self) -> bool {
        (self.u_range.0 + self.u_range.1).abs() < 1e-12
    }

    fn symmetric_v(&self) -> bool {
        matches!(self.kind, PlaneKind::ConstZ(_)) && (self.v_range.0 + self.v_range.1).abs() < 1e-12
    }
}

/// Intensities `|E_out/E0|²` on a plane; `values[j * nu + i]` sits at `(u_i, v_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMap {
    pub plane: FieldPlane,
    pub nu: usize,
    pub nv: usize,
    pub values: Vec<f64>,
    /// Grid points coinciding with an emitter; their value is `NaN`.
    pub flagged: Vec<bool>,
}

impl FieldMap {
    /// Trapezoidal integral on the grid and on the grid with doubled spacing.
    pub fn trapezoid_pair(&self) -> (f64, f64) {
        (self.trapezoid(1), self.trapezoid(2))
    }

    fn trapezoid(&self, stride: usize) -> f64 {
        let last = |n: usize| (n - 1) / stride * stride;
        let (iu, iv) = (last(self.nu), last(self.nv));
        let h = self.plane.spacing * stride as f64;
        let mut sum = 0.0;
        for j in (0..=iv).step_by(stride) {
            let wj = if j == 0 || j == iv { 0.5 } else { 1.0 };
            for i in (0..=iu).step_by(stride) {
                let wi = if i == 0 || i == iu { 0.5 } else { 1.0 };
                let v = self.values[j * self.nu + i];
                if v.is_finite() {
                    sum += wi * wj * v;
                }
            }
        }
        sum * h * h
    }

    /// Write `u, v, intensity` rows with a unit header.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let (u, v) = match self.plane.kind {
            PlaneKind::Y0 => ("x_lambda0", "z_lambda0"),
            PlaneKind::X0 => ("y_lambda0", "z_lambda0"),
            PlaneKind::ConstZ(_) => ("x_lambda0", "y_lambda0"),
        };
        wr.write_record([u, v, "intensity_rel_E0sq"])?;
        for j in 0..self.nv {
            for i in 0..self.nu {
                let p = self.plane.point(i, j);
                let (a, b) = match self.plane.kind {
                    PlaneKind::Y0 => (p[0], p[2]),
                    PlaneKind::X0 => (p[1], p[2]),
                    PlaneKind::ConstZ(_) => (p[0], p[1]),
                };
                wr.write_record([
                    a.to_string(),
                    b.to_string(),
                    self.values[j * self.nu + i].to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Evaluate `|E_out/E0|²` on a regular plane grid.
///
/// For solutions obtained with the mirror reduction the field is even in `x`
/// and `y`, so only one quadrant of a centred grid is computed.
pub fn field_map(
    ens: &EmitterEnsemble,
    sol: &DipoleSolution,
    drive: &dyn DriveField,
    plane: &FieldPlane,
) -> Result<FieldMap> {
    if !(plane.spacing > 0.0) {
        return Err(Error::Invalid("field-map spacing must be positive".into()));
    }
    let (nu, nv) = plane.counts();
    let mirror_u = sol.symmetric && plane.symmetric_u();
    let mirror_v = sol.symmetric && plane.symmetric_v();
    let canon = |i: usize, n: usize, on: bool| if on && 2 * i + 1 < n { n - 1 - i } else { i };
    let rows: Vec<Vec<f64>> = (0..nv)
        .into_par_iter()
        .map(|j| {
            if canon(j, nv, mirror_v) != j {
                return Vec::new();
            }
            (0..nu)
                .map(|i| {
                    if canon(i, nu, mirror_u) != i {
                        return f64::NAN;
                    }
                    scattered_field(ens, sol, drive, plane.point(i, j))
                        .map_or(f64::NAN, |e| e.norm_sqr())
                })
                .collect()
        })
        .collect();
    let mut values = vec![0.0; nu * nv];
    for j in 0..nv {
        let row = &rows[canon(j, nv, mirror_v)];
        for i in 0..nu {
            values[j * nu + i] = row[canon(i, nu, mirror_u)];
        }
    }
    let flagged = values.iter().map(|v| !v.is_finite()).collect();
    Ok(FieldMap {
        plane: *plane,
        nu,
        nv,
        values,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greens::{bare_polarizability, EmitterRates};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ensemble(positions: Vec<[f64; 3]>, gamma_prime: f64) -> EmitterEnsemble {
        EmitterEnsemble::new(positions, EmitterRates::new(gamma_prime).unwrap())
    }

    fn mirrored_cloud(n_quadrant: usize, seed: u64) -> EmitterEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = Vec::new();
        for _ in 0..n_quadrant {
            let (x, y, z): (f64, f64, f64) = (
                rng.gen_range(0.05..1.5),
                rng.gen_range(0.05..1.5),
                rng.gen_range(-0.5..0.5),
            );
            for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                pos.push([sx * x, sy * y, z]);
            }
        }
        // On-axis atoms have shorter orbits.
        pos.push([0.0, 0.0, 0.3]);
        pos.push([0.0, 0.7, 0.0]);
        pos.push([0.0, -0.7, 0.0]);
        pos.push([0.9, 0.0, -0.2]);
        pos.push([-0.9, 0.0, -0.2]);
        ensemble(pos, 1.5)
    }

    #[test]
    fn memory_estimate_arithmetic() {
        assert_eq!(memory_estimate(0, Precision::Double), 0);
        assert_eq!(memory_estimate(1000, Precision::Double), 17_600_000);
        let big = memory_estimate(120_000, Precision::Single) as f64;
        assert!((big / 1e9 - 126.7).abs() < 0.1);
    }

    #[test]
    fn single_emitter_is_the_polarizability() {
        let ens = ensemble(vec![[0.0, 0.0, 0.0]], 0.7);
        for d in [-3.0, 0.0, 1.2] {
            let sol =
                solve_dipoles(&ens, &PlaneWave, Detuning::new(d), SolveOptions::default()).unwrap();
            let alpha = bare_polarizability(Detuning::new(d), ens.rates);
            assert!((sol.amplitudes[0] - alpha).norm() < 1e-12);
        }
    }

    #[test]
    fn two_emitters_match_the_closed_form() {
        let g = coupling_xx_raw(0.0, 0.0, 0.37);
        let ens = ensemble(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.37]], 0.0);
        let inv = -Complex64::new(0.4, 0.5);
        let b = [Complex64::new(1.0, 0.0), PlaneWave.at(0.0, 0.0, 0.37)];
        let det = inv * inv - g * g;
        let p0 = (inv * b[0] + g * b[1]) / det;
        let p1 = (g * b[0] + inv * b[1]) / det;
        let opts = SolveOptions {
            use_symmetry: false,
            ..Default::default()
        };
        let sol = solve_dipoles(&ens, &PlaneWave, Detuning::new(0.4), opts).unwrap();
        assert!((sol.amplitudes[0] - p0).norm() < 1e-12);
        assert!((sol.amplitudes[1] - p1).norm() < 1e-12);
    }

    #[test]
    fn symmetry_reduction_matches_full_solve() {
        let ens = mirrored_cloud(50, 3);
        let full = solve_dipoles(
            &ens,
            &PlaneWave,
            Detuning::new(0.3),
            SolveOptions {
                use_symmetry: false,
                ..Default::default()
            },
        )
        .unwrap();
        let red = solve_dipoles(
            &ens,
            &PlaneWave,
            Detuning::new(0.3),
            SolveOptions::default(),
        )
        .unwrap();
        assert!(red.reduced_size < full.reduced_size / 3);
        let scale = full.amplitudes.iter().map(|p| p.norm()).fold(0.0, f64::max);
        for (a, b) in full.amplitudes.iter().zip(&red.amplitudes) {
            assert!((a - b).norm() < 1e-9 * scale);
        }
    }

    #[test]
    fn single_precision_tracks_double() {
        let ens = mirrored_cloud(40, 9);
        let d = solve_dipoles(
            &ens,
            &PlaneWave,
            Detuning::new(-0.5),
            SolveOptions::default(),
        )
        .unwrap();
        let s = solve_dipoles(
            &ens,
            &PlaneWave,
            Detuning::new(-0.5),
            SolveOptions {
                precision: Precision::Single,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.residual < 1e-3);
        let scale = d.amplitudes.iter().map(|p| p.norm()).fold(0.0, f64::max);
        for (a, b) in d.amplitudes.iter().zip(&s.amplitudes) {
            assert!((a - b).norm() < 1e-3 * scale);
        }
    }

    #[test]
    fn broken_symmetry_is_rejected() {
        let ens = ensemble(vec![[0.3, 0.2, 0.0], [-0.3, 0.2, 0.0]], 0.0);
        assert!(solve_dipoles(
            &ens,
            &PlaneWave,
            Detuning::resonant(),
            SolveOptions::default()
        )
        .is_err());
    }

    #[test]
    fn memory_budget_refuses_before_allocating() {
        let ens = mirrored_cloud(10, 1);
        let opts = SolveOptions {
            memory_budget: Some(100),
            ..Default::default()
        };
        match solve_dipoles(&ens, &PlaneWave, Detuning::resonant(), opts) {
            Err(Error::MemoryBudget { needed, budget }) => {
                assert_eq!(budget, 100);
                assert!(needed > 100);
            }
            other => panic!("expected a memory refusal, got {other:?}"),
        }
    }

    #[test]
    fn lossless_energy_audit() {
        let ens = mirrored_cloud(30, 5);
        let lossless = EmitterEnsemble {
            rates: EmitterRates::lossless(),
            ..ens
        };
        let sol = solve_dipoles(
            &lossless,
            &PlaneWave,
            Detuning::new(0.2),
            SolveOptions::default(),
        )
        .unwrap();
        let e = energy_balance(&lossless, &sol, &PlaneWave);
        assert!(e.absorbed == 0.0);
        assert!(
            (e.extinction - e.radiated).abs() < 1e-2 * e.extinction,
            "{e:?}"
        );
    }

    #[test]
    fn lossy_energy_audit() {
        let ens = mirrored_cloud(30, 6);
        let sol = solve_dipoles(
            &ens,
            &PlaneWave,
            Detuning::new(-0.4),
            SolveOptions::default(),
        )
        .unwrap();
        let e = energy_balance(&ens, &sol, &PlaneWave);
        assert!(
            (e.extinction - e.radiated - e.absorbed).abs() < 1e-9 * e.extinction,
            "{e:?}"
        );
    }

    #[test]
    fn zero_dipoles_leave_the_drive() {
        let ens = mirrored_cloud(5, 2);
        let sol = DipoleSolution::zeros(ens.positions.len());
        let e = scattered_field(&ens, &sol, &PlaneWave, [0.1, 0.2, 3.0]).unwrap();
        assert!((e - PlaneWave.at(0.1, 0.2, 3.0)).norm() < 1e-15);
        assert!(scattered_field(&ens, &sol, &PlaneWave, ens.positions[0]).is_err());
    }

    #[test]
    fn one_atom_far_field_dip() {
        // On the axis the kernel tends to (3/4)e^{ik0 z}/(k0 z), so the forward
        // field is e^{ik0 z}(1 + (3/4)α/(k0 z)) up to O((k0 z)^-2).
        let ens = ensemble(vec![[0.0, 0.0, 0.0]], 0.0);
        let z = 400.0;
        for d in [-1.0, 0.0, 2.0] {
            let sol =
                solve_dipoles(&ens, &PlaneWave, Detuning::new(d), SolveOptions::default()).unwrap();
            let e = scattered_field(&ens, &sol, &PlaneWave, [0.0, 0.0, z]).unwrap();
            let alpha = bare_polarizability(Detuning::new(d), EmitterRates::lossless());
            let k = crate::K0;
            let expected = Complex64::from_polar(1.0, k * z) * (1.0 + 0.75 * alpha / (k * z));
            assert!(
                (e - expected).norm() < 5e-3 / (k * z),
                "{d}: {e} vs {expected}"
            );
        }
    }

    #[test]
    fn field_map_mirror_matches_direct() {
        let ens = mirrored_cloud(20, 4);
        let sym = solve_dipoles(
            &ens,
            &PlaneWave,
            Detuning::resonant(),
            SolveOptions::default(),
        )
        .unwrap();
        let plain = DipoleSolution {
            symmetric: false,
            ..sym.clone()
        };
        let plane = FieldPlane::square(PlaneKind::ConstZ(2.0), 1.0, 0.25);
        let a = field_map(&ens, &sym, &PlaneWave, &plane).unwrap();
        let b = field_map(&ens, &plain, &PlaneWave, &plane).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
        }
        let empty = ensemble(vec![], 0.0);
        let m = field_map(&empty, &DipoleSolution::zeros(0), &PlaneWave, &plane).unwrap();
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let (fine, coarse) = m.trapezoid_pair();
        assert!((fine - 4.0).abs() < 1e-12 && (coarse - 4.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_sweep_matches_direct_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pos: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.3..0.3),
                ]
            })
            .collect();
        let shifts = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ens = EmitterEnsemble {
            shifts: Some(shifts),
            ..ensemble(pos, 0.5)
        };
        let spec = SpectralSolver::new(&ens, &PlaneWave).unwrap();
        let w: Vec<Complex64> = ens
            .positions
            .iter()
            .map(|r| PlaneWave.at(r[0], r[1], r[2]).conj())
            .collect();
        let proj = spec.projector(&w);
        let opts = SolveOptions {
            use_symmetry: false,
            ..Default::default()
        };
        for d in [-4.0, -0.3, 0.0, 2.5] {
            let direct = solve_dipoles(&ens, &PlaneWave, Detuning::new(d), opts).unwrap();
            let via = spec.dipoles(Detuning::new(d));
            for (a, b) in direct.amplitudes.iter().zip(&via) {
                assert!((a - b).norm() < 1e-9 * a.norm().max(1.0));
            }
            let s: Complex64 = direct.amplitudes.iter().zip(&w).map(|(p, wi)| p * wi).sum();
            assert!((proj.at(Detuning::new(d)) - s).norm() < 1e-9 * s.norm().max(1.0));
        }
    }

    #[test]
    fn random_cloud_is_well_posed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pos: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let ens = ensemble(pos, 0.0);
        let opts = SolveOptions {
            use_symmetry: false,
            ..Default::default()
        };
        let sol = solve_dipoles(&ens, &PlaneWave, Detuning::resonant(), opts).unwrap();
        assert!(sol.residual < 1e-10);
    }
}
