//! Metalens geometry: ideal phase profile, rings, per-ring lattices, buffer
//! zones and three-layer stacking.
//!
//! Every ring lattice has a node at the origin and nodes at integer multiples
//! of its spacings, so each ring is closed under `x → −x` and `y → −y`. Atoms
//! are placed as whole mirror orbits, which keeps the final ensemble closed
//! under both reflections.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::greens::EmitterRates;
use crate::multilayer::{lattice_for_phase, DesignTriple, LensCell, PhaseTable};
use crate::{wrap_phase, Error, Result, K0};

/// Default minimum spacing, 10 nm at λ0 = 737 nm / 2.4.
pub const DEFAULT_D_MIN: f64 = 0.03256;

/// Relative tolerance on "this spacing equals `d_min`".
const SPACING_MATCH: f64 = 1e-9;

/// Free and fixed parameters of a lens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetalensParams {
    pub f: f64,
    pub r_lens: f64,
    pub delta_r: f64,
    pub phi0: f64,
    /// Fraction of each ring reserved for the buffer zone.
    pub alpha: f64,
    pub d_min: f64,
    pub gamma_prime: f64,
}

impl MetalensParams {
    /// The `f = 20`, `R = 10` lens with its optimised free parameters.
    pub fn illustrative() -> Self {
        Self {
            f: 20.0,
            r_lens: 10.0,
            delta_r: 2.0 / 3.0,
            phi0: -2.06,
            alpha: 0.2,
            d_min: DEFAULT_D_MIN,
            gamma_prime: 5.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.f > 0.0 && self.f.is_finite()) || !(self.r_lens > 0.0 && self.r_lens.is_finite())
        {
            return bad(format!(
                "focal length {} and radius {} must be positive",
                self.f, self.r_lens
            ));
        }
        if !(self.d_min > 0.0) || !(self.delta_r > 2.0 * self.d_min) || self.delta_r > 1.0 {
            return bad(format!(
                "ring width {} must lie in (2·d_min, 1] with d_min = {}",
                self.delta_r, self.d_min
            ));
        }
        if !(0.0..=0.5).contains(&self.alpha) {
            return bad(format!("buffer fraction {} outside [0, 1/2]", self.alpha));
        }
        if !self.phi0.is_finite() || !(self.gamma_prime >= 0.0) {
            return bad("phase offset must be finite and Γ′ non-negative".into());
        }
        Ok(())
    }

    pub fn rates(&self) -> Result<EmitterRates> {
        EmitterRates::new(self.gamma_prime)
    }
}

/// One annulus of the lens and the lattice realising its phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub index: usize,
    pub r_inner: f64,
    pub r_outer: f64,
    pub phi: f64,
    pub cell: LensCell,
}

impl RingSpec {
    pub fn triple(&self) -> Option<DesignTriple> {
        self.cell.triple()
    }
}

/// Emitter positions (λ0 units), shared rates and optional per-emitter
/// resonance shifts `ω̃_j`. All dipoles are `x̂`-oriented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitterEnsemble {
    pub positions: Vec<[f64; 3]>,
    pub rates: EmitterRates,
    pub shifts: Option<Vec<f64>>,
}

impl EmitterEnsemble {
    pub fn new(positions: Vec<[f64; 3]>, rates: EmitterRates) -> Self {
        Self {
            positions,
            rates,
            shifts: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Ideal lens phase `k0(f − √(R² + f²)) + φ0`, wrapped onto `(−π, π]`.
pub fn ideal_phase(r: f64, f: f64, phi0: f64) -> f64 {
    wrap_phase(K0 * (f - (r * r + f * f).sqrt()) + phi0)
}

/// Rings of width `ΔR` out to `r_lens`, each with its table lattice.
pub fn build_rings(params: &MetalensParams, table: &PhaseTable) -> Result<Vec<RingSpec>> {
    params.validate()?;
    if (table.config.d_min - params.d_min).abs() > 1e-12 {
        return Err(Error::Invalid(format!(
            "design table built for d_min = {} but lens uses {}",
            table.config.d_min, params.d_min
        )));
    }
    let mut rings = Vec::new();
    let mut j = 1usize;
    loop {
        let r_inner = (j - 1) as f64 * params.delta_r;
        if r_inner >= params.r_lens - 1e-9 {
            break;
        }
        let r_outer = (j as f64 * params.delta_r).min(params.r_lens);
        let phi = ideal_phase(0.5 * (r_inner + r_outer), params.f, params.phi0);
        let cell = lattice_for_phase(phi, table)?;
        rings.push(RingSpec {
            index: j,
            r_inner,
            r_outer,
            phi,
            cell,
        });
        j += 1;
    }
    Ok(rings)
}

/// Fraction of the power of a Gaussian of waist `w0` falling on each ring.
pub fn ring_power_weights(rings: &[RingSpec], w0: f64) -> Vec<f64> {
    let inside = |r: f64| 1.0 - (-2.0 * r * r / (w0 * w0)).exp();
    rings
        .iter()
        .map(|r| inside(r.r_outer) - inside(r.r_inner))
        .collect()
}

/// Power-weighted mean cooperative decay rate of the non-empty rings.
pub fn weighted_gamma_coop(rings: &[RingSpec], w0: f64) -> f64 {
    let w = ring_power_weights(rings, w0);
    let (mut num, mut den) = (0.0, 0.0);
    for (r, wj) in rings.iter().zip(w) {
        if let Some(t) = r.triple() {
            num += wj * t.gamma_coop;
            den += wj;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// In-plane lattice nodes of `triple` with `r_min ≤ ρ < r_max`, quadrant
/// representatives only (`x ≥ 0`, `y ≥ 0`).
fn quadrant_nodes(triple: &DesignTriple, r_min: f64, r_max: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    let imax = (r_max / triple.dx).floor() as i64;
    for i in 0..=imax {
        let x = i as f64 * triple.dx;
        let jmax = (r_max / triple.dy).floor() as i64;
        for j in 0..=jmax {
            let y = j as f64 * triple.dy;
            let rho = x.hypot(y);
            if rho >= r_min && rho < r_max {
                out.push([x, y]);
            }
        }
    }
    out
}

fn mirror_orbit(p: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = vec![p];
    for q in [[-p[0], p[1]], [p[0], -p[1]], [-p[0], -p[1]]] {
        if !out.contains(&q) {
            out.push(q);
        }
    }
    out
}

fn expand_quadrant(q: &[[f64; 2]]) -> Vec<[f64; 2]> {
    q.iter().flat_map(|&p| mirror_orbit(p)).collect()
}

/// Single-layer lattice of a ring, clipped to `r_inner_eff ≤ ρ < r_outer`.
pub fn populate_ring(ring: &RingSpec, r_inner_eff: f64) -> Vec<[f64; 2]> {
    match ring.triple() {
        Some(t) => expand_quadrant(&quadrant_nodes(&t, r_inner_eff, ring.r_outer)),
        None => Vec::new(),
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= SPACING_MATCH * a.abs().max(b.abs())
}

/// Columns of constant `a`, with the extreme `b` coordinate of each, in the
/// `(a, b)` frame where `db` is the dense spacing. `top` picks the largest
/// `b`, otherwise the smallest `b ≥ 0`.
fn columns(da: f64, db: f64, r_min: f64, r_max: f64, top: bool) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let imax = (r_max / da).floor() as i64;
    for i in 0..=imax {
        let a = i as f64 * da;
        let jmax = (r_max / db).floor() as i64;
        let mut members = (0..=jmax).map(|j| j as f64 * db).filter(|&b| {
            let rho = a.hypot(b);
            rho >= r_min && rho < r_max
        });
        let pick = if top { members.last() } else { members.next() };
        if let Some(b) = pick {
            out.push((a, b));
        }
    }
    out
}

/// Buffer atoms between consecutive rings, single layer, full plane.
///
/// When both rings share `d_min` along one axis, the columns of the previous
/// ring's outer edge are joined to those of the current ring's inner edge by
/// straight lines filled at spacing `d_min`. Otherwise the buffer annulus is
/// filled with the current ring's own lattice.
pub fn build_buffer(
    prev: &RingSpec,
    cur: &RingSpec,
    alpha: f64,
    delta_r: f64,
    d_min: f64,
) -> Vec<[f64; 2]> {
    let (Some(tp), Some(tc)) = (prev.triple(), cur.triple()) else {
        return Vec::new();
    };
    if alpha <= 0.0 {
        return Vec::new();
    }
    let r_buf = cur.r_inner + alpha * delta_r;
    // Frame (a, b): b is the shared dense axis.
    let frame = if same(tp.dy, d_min) && same(tc.dy, d_min) {
        Some(false)
    } else if same(tp.dx, d_min) && same(tc.dx, d_min) {
        Some(true)
    } else {
        None
    };
    let Some(swap) = frame else {
        return expand_quadrant(&quadrant_nodes(&tc, cur.r_inner, r_buf));
    };
    let (dap, dac) = if swap { (tp.dy, tc.dy) } else { (tp.dx, tc.dx) };
    let prev_inner = prev.r_inner
        + if prev.index == 1 {
            0.0
        } else {
            alpha * delta_r
        };
    let prev_cols = columns(dap, d_min, prev_inner, prev.r_outer, true);
    let Some(&(a_last, _)) = prev_cols.last() else {
        return Vec::new();
    };
    let a_max = a_last + 0.75 * dap;
    let cur_cols: Vec<(f64, f64)> = columns(dac, d_min, r_buf, cur.r_outer, false)
        .into_iter()
        .filter(|c| c.0 <= a_max)
        .collect();
    if cur_cols.is_empty() {
        return Vec::new();
    }
    let nearest = |a: f64, set: &[(f64, f64)]| -> (f64, f64) {
        let mut best = set[0];
        for &c in set {
            if (c.0 - a).abs() < (best.0 - a).abs() {
                best = c;
            }
        }
        best
    };
    let pairs: Vec<((f64, f64), (f64, f64))> = if cur_cols.len() < prev_cols.len() {
        cur_cols
            .iter()
            .map(|&c| (nearest(c.0, &prev_cols), c))
            .collect()
    } else {
        prev_cols
            .iter()
            .map(|&p| (p, nearest(p.0, &cur_cols)))
            .collect()
    };
    let mut quad = Vec::new();
    for ((ap, bp), (ac, bc)) in pairs {
        if bc <= bp {
            continue;
        }
        let (jp, jc) = ((bp / d_min).round() as i64, (bc / d_min).round() as i64);
        for n in jp + 1..jc {
            let b = n as f64 * d_min;
            let a = ap + (ac - ap) * (b - bp) / (bc - bp);
            quad.push(if swap { [b, a] } else { [a, b] });
        }
    }
    expand_quadrant(&quad)
}

/// Per-ring bookkeeping of an assembled lens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingReport {
    pub ring: RingSpec,
    pub lattice_atoms: usize,
    pub buffer_atoms: usize,
    pub stitched: bool,
}

/// Design record exported next to the positions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetalensDesign {
    pub params: MetalensParams,
    pub rings: Vec<RingReport>,
    #[serde(rename = "N")]
    pub n: usize,
    /// Positions coinciding with an earlier atom within 1e−9.
    pub duplicates_removed: usize,
    /// Candidates dropped for sitting closer than 0.9·d_min to earlier atoms.
    pub seam_conflicts_removed: usize,
}

/// Uniform grid hash for nearest-neighbour queries.
struct SpatialHash {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl SpatialHash {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            map: HashMap::new(),
        }
    }

    fn key(&self, p: &[f64; 3]) -> (i64, i64, i64) {
        let q = |v: f64| (v / self.cell).floor() as i64;
        (q(p[0]), q(p[1]), q(p[2]))
    }

    fn insert(&mut self, p: &[f64; 3], idx: usize) {
        let k = self.key(p);
        self.map.entry(k).or_default().push(idx);
    }

    /// Closest stored point within `radius ≤ cell` of `p`.
    fn nearest(&self, p: &[f64; 3], pts: &[[f64; 3]]) -> Option<(usize, f64)> {
        let (kx, ky, kz) = self.key(p);
        let mut best: Option<(usize, f64)> = None;
        for ix in kx - 1..=kx + 1 {
            for iy in ky - 1..=ky + 1 {
                for iz in kz - 1..=kz + 1 {
                    if let Some(v) = self.map.get(&(ix, iy, iz)) {
                        for &i in v {
                            let d = dist(p, &pts[i]);
                            if best.map_or(true, |b| d < b.1) {
                                best = Some((i, d));
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Pairs of emitters closer than `min_dist`.
pub fn distance_audit(positions: &[[f64; 3]], min_dist: f64) -> Vec<(usize, usize, f64)> {
    let mut hash = SpatialHash::new(min_dist);
    for (i, p) in positions.iter().enumerate() {
        hash.insert(p, i);
    }
    let mut bad = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let (kx, ky, kz) = hash.key(p);
        for ix in kx - 1..=kx + 1 {
            for iy in ky - 1..=ky + 1 {
                for iz in kz - 1..=kz + 1 {
                    if let Some(v) = hash.map.get(&(ix, iy, iz)) {
                        for &j in v {
                            if j > i {
                                let d = dist(p, &positions[j]);
                                if d < min_dist {
                                    bad.push((i, j, d));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    bad.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    bad
}

/// Deterministic accumulator placing whole mirror orbits.
struct Placer {
    positions: Vec<[f64; 3]>,
    hash: SpatialHash,
    min_dist: f64,
    duplicates: usize,
    conflicts: usize,
}

impl Placer {
    fn new(min_dist: f64) -> Self {
        Self {
            positions: Vec::new(),
            hash: SpatialHash::new(min_dist),
            min_dist,
            duplicates: 0,
            conflicts: 0,
        }
    }

    /// Place the orbit of an in-plane representative at height `z`.
    fn place(&mut self, p: [f64; 2], z: f64) -> usize {
        let orbit: Vec<[f64; 3]> = mirror_orbit(p)
            .into_iter()
            .map(|q| [q[0], q[1], z])
            .collect();
        for (i, a) in orbit.iter().enumerate() {
            for b in &orbit[i + 1..] {
                if dist(a, b) < self.min_dist {
                    self.conflicts += orbit.len();
                    return 0;
                }
            }
        }
        let mut fresh = Vec::with_capacity(orbit.len());
        for q in orbit {
            match self.hash.nearest(&q, &self.positions) {
                Some((_, d)) if d <= 1e-9 => self.duplicates += 1,
                Some((_, d)) if d < self.min_dist => {
                    self.conflicts += 1;
                    return 0;
                }
                _ => fresh.push(q),
            }
        }
        for q in &fresh {
            self.hash.insert(q, self.positions.len());
            self.positions.push(*q);
        }
        fresh.len()
    }
}

fn quadrant_of(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    points
        .iter()
        .copied()
        .filter(|p| p[0] >= 0.0 && p[1] >= 0.0)
        .collect()
}

/// Assemble the full three-layer ensemble.
///
/// Rings are placed in order, lattice before buffer. A candidate orbit closer
/// than `0.9·d_min` to an already placed atom is dropped, which resolves the
/// seams between incommensurate ring lattices deterministically.
pub fn assemble_metalens(
    params: &MetalensParams,
    table: &PhaseTable,
) -> Result<(EmitterEnsemble, MetalensDesign)> {
    let rings = build_rings(params, table)?;
    assemble_rings(params, &rings)
}

/// Assemble a lens from precomputed rings.
pub fn assemble_rings(
    params: &MetalensParams,
    rings: &[RingSpec],
) -> Result<(EmitterEnsemble, MetalensDesign)> {
    params.validate()?;
    let layers: Vec<(Vec<[f64; 2]>, Vec<[f64; 2]>, bool)> = rings
        .par_iter()
        .enumerate()
        .map(|(k, ring)| {
            let Some(t) = ring.triple() else {
                return (Vec::new(), Vec::new(), false);
            };
            let prev = if k > 0 {
                rings[k - 1].triple().map(|_| &rings[k - 1])
            } else {
                None
            };
            match prev {
                Some(prev) if params.alpha > 0.0 => {
                    let r_buf = ring.r_inner + params.alpha * params.delta_r;
                    let lattice = quadrant_nodes(&t, r_buf, ring.r_outer);
                    let buffer =
                        build_buffer(prev, ring, params.alpha, params.delta_r, params.d_min);
                    let tp = prev.triple().expect("checked above");
                    let stitched = (same(tp.dy, params.d_min) && same(t.dy, params.d_min))
                        || (same(tp.dx, params.d_min) && same(t.dx, params.d_min));
                    (lattice, quadrant_of(&buffer), stitched)
                }
                _ => (
                    quadrant_nodes(&t, ring.r_inner, ring.r_outer),
                    Vec::new(),
                    false,
                ),
            }
        })
        .collect();

    let mut placer = Placer::new(0.9 * params.d_min);
    let mut reports = Vec::with_capacity(rings.len());
    for (ring, (lattice, buffer, stitched)) in rings.iter().zip(layers) {
        let (mut n_lat, mut n_buf) = (0, 0);
        if let Some(t) = ring.triple() {
            for z in [-t.dz, 0.0, t.dz] {
                for &p in &lattice {
                    n_lat += placer.place(p, z);
                }
                for &p in &buffer {
                    n_buf += placer.place(p, z);
                }
            }
        }
        reports.push(RingReport {
            ring: *ring,
            lattice_atoms: n_lat,
            buffer_atoms: n_buf,
            stitched,
        });
    }
    let bad = distance_audit(&placer.positions, 0.9 * params.d_min);
    if !bad.is_empty() {
        let list: Vec<String> = bad
            .iter()
            .take(10)
            .map(|(i, j, d)| format!("({i}, {j}) at {d:.3e}"))
            .collect();
        return Err(Error::DistanceAudit(format!(
            "{} close pairs: {}",
            bad.len(),
            list.join(", ")
        )));
    }
    let n = placer.positions.len();
    let design = MetalensDesign {
        params: *params,
        rings: reports,
        n,
        duplicates_removed: placer.duplicates,
        seam_conflicts_removed: placer.conflicts,
    };
    Ok((
        EmitterEnsemble::new(placer.positions, params.rates()?),
        design,
    ))
}

/// Write `x, y, z` rows with a unit header.
pub fn write_positions_csv<W: std::io::Write>(ens: &EmitterEnsemble, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x_lambda0", "y_lambda0", "z_lambda0"])?;
    for p in &ens.positions {
        wr.write_record([p[0].to_string(), p[1].to_string(), p[2].to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Read positions written by [`write_positions_csv`].
pub fn read_positions_csv<R: std::io::Read>(r: R) -> Result<Vec<[f64; 3]>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        let (x, y, z): (f64, f64, f64) = rec?;
        out.push([x, y, z]);
    }
    Ok(out)
}

/// Write `positions.csv` and `design.json` into `dir`.
pub fn export_design(dir: &Path, ens: &EmitterEnsemble, design: &MetalensDesign) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_positions_csv(ens, std::fs::File::create(dir.join("positions.csv"))?)?;
    let f = std::fs::File::create(dir.join("design.json"))?;
    serde_json::to_writer_pretty(f, design)?;
    Ok(())
}

/// Load an ensemble and its design record from `dir`.
pub fn import_design(dir: &Path) -> Result<(EmitterEnsemble, MetalensDesign)> {
    let design: MetalensDesign =
        serde_json::from_reader(std::fs::File::open(dir.join("design.json"))?)?;
    let positions = read_positions_csv(std::fs::File::open(dir.join("positions.csv"))?)?;
    if positions.len() != design.n {
        return Err(Error::Invalid(format!(
            "positions file has {} atoms, design records {}",
            positions.len(),
            design.n
        )));
    }
    let bad = distance_audit(&positions, 0.9 * design.params.d_min);
    if !bad.is_empty() {
        return Err(Error::DistanceAudit(format!(
            "{} close pairs in loaded design",
            bad.len()
        )));
    }
    Ok((
        EmitterEnsemble::new(positions, design.params.rates()?),
        design,
    ))
}
