//! Command-line driver: JSON run configuration, design, simulation, sweeps
//! and optimisation runs, each writing tidy CSV/JSON plus a manifest.

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::beams::{
    efficiency_eta, overlap_epsilon, signal_to_background, target_mode, BeamSpec, FocalGrid,
    LensMetrics, TargetMode,
};
use crate::collective2d::LatticeConstants;
use crate::disorder::{displace, predicted_gamma_dis, DisorderSpec};
use crate::greens::{Detuning, EmitterRates};
use crate::metalens::{
    assemble_metalens, export_design, import_design, weighted_gamma_coop, EmitterEnsemble,
    MetalensDesign, MetalensParams, RingSpec,
};
use crate::multilayer::{build_phase_table, PhaseTable, PhaseTableConfig};
use crate::optimize::{
    optimize_lens, rank_with_full_solve, write_log_csv, Candidate, Fidelity, FixedParams, PsoConfig,
};
use crate::solver::{
    field_map, memory_estimate, mirror_orbits, solve_dipoles, DipoleSolution, FieldPlane,
    PlaneKind, Precision, SolveOptions,
};
use crate::{Error, Result};

/// Objective used by the `optimize` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FidelityKind {
    TableModel,
    FullSolve,
}

/// Every parameter of a run. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lens: MetalensParams,
    /// Input waist in λ0.
    pub w0: f64,
    /// Probe detuning in Γ0 for single-point runs.
    pub delta: f64,
    pub precision: Precision,
    pub use_symmetry: bool,
    /// Matrix memory ceiling in bytes; `null` means 75% of physical memory.
    pub memory_budget: Option<u64>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Initial nodes per branch of the design table.
    pub table_resolution: usize,
    /// Focal-plane grid spacing for `η̃`.
    pub focal_spacing: f64,
    pub eta_tilde: bool,
    pub field_maps: bool,
    pub map_spacing: f64,
    pub detunings: Vec<f64>,
    /// `η` level defining the detuning bandwidth.
    pub bandwidth_threshold: f64,
    pub focal_lengths: Vec<f64>,
    pub optimize_each: bool,
    pub gamma_primes: Vec<f64>,
    /// Displacement radii in units of `d_min`.
    pub delta_d_fractions: Vec<f64>,
    pub n_configs: usize,
    /// Multiplier of the disorder broadening law when mapping `δd` onto `Γ′`.
    pub disorder_prefactor: f64,
    pub pso: PsoConfig,
    pub fidelity: FidelityKind,
    /// Finalists re-scored by full solves after a table-model search; 0 disables.
    pub rank_top: usize,
    /// Run sweep points concurrently. Multiplies peak memory.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lens: MetalensParams::illustrative(),
            w0: 4.0,
            delta: 0.0,
            precision: Precision::Double,
            use_symmetry: true,
            memory_budget: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            table_resolution: 400,
            focal_spacing: 0.125,
            eta_tilde: true,
            field_maps: true,
            map_spacing: 0.25,
            detunings: (-10..=10).map(|k| 20.0 * k as f64).collect(),
            bandwidth_threshold: 0.8,
            focal_lengths: vec![10.0, 15.0, 20.0, 30.0, 40.0],
            optimize_each: false,
            gamma_primes: vec![0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0],
            delta_d_fractions: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0],
            n_configs: 10,
            disorder_prefactor: 2.5,
            pso: PsoConfig::default(),
            fidelity: FidelityKind::TableModel,
            rank_top: 3,
            parallel: false,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Invalid(format!("key {path} does not name an object field")))?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), v);
            return Ok(());
        }
        cur = obj
            .get_mut(*k)
            .ok_or_else(|| Error::Invalid(format!("unknown key {k} in {path}")))?;
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the JSON file, then `key=value` overrides. Values are
    /// parsed as JSON and fall back to plain strings.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = file {
            let user: Value = serde_json::from_reader(File::open(p)?)?;
            if !user.is_object() {
                return Err(Error::Invalid("config file must hold a JSON object".into()));
            }
            merge(&mut v, user);
        }
        for (k, raw) in overrides {
            let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut v, k, val)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field before anything is allocated.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        self.lens.validate()?;
        BeamSpec::new(self.w0)?;
        self.pso.validate()?;
        if !self.delta.is_finite() {
            return bad("detuning must be finite".into());
        }
        if self.table_resolution < 2 {
            return bad("table resolution must be at least 2".into());
        }
        if !(self.focal_spacing > 0.0) || !(self.map_spacing > 0.0) {
            return bad("grid spacings must be positive".into());
        }
        if self.detunings.iter().any(|d| !d.is_finite()) {
            return bad("detunings must be finite".into());
        }
        if self
            .focal_lengths
            .iter()
            .any(|f| !(*f > 0.0) || !f.is_finite())
        {
            return bad("focal lengths must be positive".into());
        }
        if self
            .gamma_primes
            .iter()
            .any(|g| !(*g >= 0.0) || !g.is_finite())
        {
            return bad("Γ′ values must be non-negative".into());
        }
        if self
            .delta_d_fractions
            .iter()
            .any(|d| !(*d >= 0.0) || !d.is_finite())
        {
            return bad("displacement fractions must be non-negative".into());
        }
        if self.n_configs == 0 {
            return bad("at least one disorder configuration is required".into());
        }
        if !(self.disorder_prefactor >= 0.0) {
            return bad("disorder prefactor must be non-negative".into());
        }
        Ok(())
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            use_symmetry: self.use_symmetry,
            precision: self.precision,
            memory_budget: self.memory_budget,
        }
    }

    pub fn table_config(&self) -> PhaseTableConfig {
        PhaseTableConfig {
            resolution: self.table_resolution,
            gamma_prime: self.lens.gamma_prime,
            ..PhaseTableConfig::new(self.lens.d_min)
        }
    }

    pub fn fixed(&self) -> FixedParams {
        FixedParams {
            f: self.lens.f,
            r_lens: self.lens.r_lens,
            w0: self.w0,
            d_min: self.lens.d_min,
            gamma_prime: self.lens.gamma_prime,
        }
    }
}

/// Reproduction record written to every output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub precision: Precision,
    pub seed: u64,
    pub config: RunConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        precision: cfg.precision,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

fn prepare(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_rows<W: std::io::Write>(w: W, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r.iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Metrics of one solved lens plus solve diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    #[serde(flatten)]
    pub metrics: LensMetrics,
    pub delta: f64,
    pub residual: f64,
    pub reduced_size: usize,
    pub precision: Precision,
    /// Relative `η̃` change on halving the focal grid; `null` if `η̃` was skipped.
    pub focal_refinement_change: Option<f64>,
    pub focal_grid_coarse: bool,
}

/// Solve `ens` at detuning `delta` and collect the lens metrics.
pub fn measure_lens(
    ens: &EmitterEnsemble,
    cfg: &RunConfig,
    f: f64,
    delta: f64,
    opts: SolveOptions,
) -> Result<(LensReport, DipoleSolution)> {
    let beam = BeamSpec::new(cfg.w0)?;
    let target = target_mode(cfg.w0, f)?;
    let sol = solve_dipoles(ens, &beam, Detuning::new(delta), opts)?;
    let eta = efficiency_eta(ens, &sol, &target, cfg.w0);
    let epsilon = overlap_epsilon(ens, &sol, cfg.w0);
    let (eta_tilde, focal_intensity, change, coarse) = if cfg.eta_tilde {
        let grid = FocalGrid {
            extent: 2.0 * cfg.lens.r_lens.max(cfg.w0),
            spacing: cfg.focal_spacing,
        };
        let rep = signal_to_background(ens, &sol, &target, &beam, grid)?;
        (
            rep.eta_tilde,
            rep.focal_intensity,
            Some(rep.refinement_change),
            rep.coarse,
        )
    } else {
        let e = crate::solver::scattered_field(ens, &sol, &beam, [0.0, 0.0, target.z_f])?;
        (f64::NAN, e.norm_sqr(), None, false)
    };
    let metrics = LensMetrics {
        eta,
        epsilon,
        eta_tilde,
        focal_intensity,
        magnification: target.magnification,
        z_f: target.z_f,
        n: ens.len(),
        gamma_prime: ens.rates.gamma_prime,
        seed: cfg.seed,
    };
    let report = LensReport {
        metrics,
        delta,
        residual: sol.residual,
        reduced_size: sol.reduced_size,
        precision: sol.precision,
        focal_refinement_change: change,
        focal_grid_coarse: coarse,
    };
    Ok((report, sol))
}

/// Build the design table and assemble the configured lens.
pub fn build_lens(cfg: &RunConfig) -> Result<(EmitterEnsemble, MetalensDesign, PhaseTable)> {
    let table = build_phase_table(cfg.table_config())?;
    let (ens, design) = assemble_metalens(&cfg.lens, &table)?;
    Ok((ens, design, table))
}

fn with_gamma_prime(ens: &EmitterEnsemble, gamma_prime: f64) -> Result<EmitterEnsemble> {
    Ok(EmitterEnsemble {
        rates: EmitterRates::new(gamma_prime)?,
        ..ens.clone()
    })
}

/// Sizes reported by `design`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub reduced_size: usize,
    pub memory_single_bytes: u64,
    pub memory_double_bytes: u64,
}

pub fn cmd_design(cfg: &RunConfig) -> Result<DesignSummary> {
    let dir = &cfg.output_dir;
    prepare(dir)?;
    let (ens, design, _) = build_lens(cfg)?;
    export_design(dir, &ens, &design)?;
    let reduced = if cfg.use_symmetry && !ens.is_empty() {
        mirror_orbits(&ens)?.reps.len()
    } else {
        ens.len()
    };
    let summary = DesignSummary {
        n: ens.len(),
        reduced_size: reduced,
        memory_single_bytes: memory_estimate(reduced, Precision::Single),
        memory_double_bytes: memory_estimate(reduced, Precision::Double),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_manifest(dir, "design", cfg)?;
    if ens.is_empty() {
        eprintln!("warning: every ring falls in the unreachable phase band; the lens is empty");
    }
    println!(
        "N = {}, unknowns = {}, matrix memory ≈ {:.3} GB single / {:.3} GB double",
        summary.n,
        summary.reduced_size,
        summary.memory_single_bytes as f64 / 1e9,
        summary.memory_double_bytes as f64 / 1e9
    );
    Ok(summary)
}

#[derive(Serialize)]
struct MapSidecar<'a> {
    plane: &'a FieldPlane,
    nu: usize,
    nv: usize,
    quantity: &'static str,
    flagged_points: usize,
}

fn write_map(dir: &Path, name: &str, map: &crate::solver::FieldMap) -> Result<()> {
    map.write_csv(File::create(dir.join(format!("{name}.csv")))?)?;
    let side = MapSidecar {
        plane: &map.plane,
        nu: map.nu,
        nv: map.nv,
        quantity: "|E_out/E0|^2",
        flagged_points: map.flagged.iter().filter(|&&f| f).count(),
    };
    write_json(&dir.join(format!("{name}.json")), &side)
}

fn field_planes(cfg: &RunConfig, target: &TargetMode) -> [(&'static str, FieldPlane); 2] {
    let extent = 2.0 * cfg.lens.r_lens.max(cfg.w0);
    let side = FieldPlane {
        kind: PlaneKind::Y0,
        u_range: (-extent, extent),
        v_range: (-2.0, (target.z_f + 0.5 * cfg.lens.f).max(2.0)),
        spacing: cfg.map_spacing,
    };
    let focal = FieldPlane::square(PlaneKind::ConstZ(target.z_f), extent, cfg.map_spacing);
    [("field_y0", side), ("field_focal", focal)]
}

/// Solve the configured lens, or the design stored in `design_dir`.
pub fn cmd_simulate(cfg: &RunConfig, design_dir: Option<&Path>) -> Result<LensReport> {
    let dir = &cfg.output_dir;
    prepare(dir)?;
    let (ens, lens) = match design_dir {
        Some(d) => {
            let (ens, design) = import_design(d)?;
            (with_gamma_prime(&ens, cfg.lens.gamma_prime)?, design.params)
        }
        None => {
            let (ens, design, _) = build_lens(cfg)?;
            (ens, design.params)
        }
    };
    let cfg = &RunConfig {
        lens: MetalensParams {
            gamma_prime: cfg.lens.gamma_prime,
            ..lens
        },
        ..cfg.clone()
    };
    let (report, sol) = measure_lens(&ens, cfg, cfg.lens.f, cfg.delta, cfg.solve_options())?;
    write_json(&dir.join("metrics.json"), &report)?;
    if cfg.field_maps {
        let beam = BeamSpec::new(cfg.w0)?;
        let target = target_mode(cfg.w0, cfg.lens.f)?;
        for (name, plane) in field_planes(cfg, &target) {
            let map = field_map(&ens, &sol, &beam, &plane)?;
            write_map(dir, name, &map)?;
        }
    }
    write_manifest(dir, "simulate", cfg)?;
    println!(
        "eta = {:.4}, epsilon = {:.4}, eta_tilde = {:.4}",
        report.metrics.eta, report.metrics.epsilon, report.metrics.eta_tilde
    );
    Ok(report)
}

fn sweep<T, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<LensReport>>
where
    T: Sync,
    F: Fn(&T) -> Result<LensReport> + Sync,
{
    if parallel {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Detuning bandwidth estimate against the ring-weighted cooperative rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSummary {
    pub threshold: f64,
    /// Width of the contiguous detuning window around `Δ = 0` with `η ≥ threshold`.
    pub bandwidth: Option<f64>,
    /// Power-weighted mean cooperative rate of the rings, halved.
    pub half_weighted_gamma_coop: f64,
}

fn bandwidth(deltas: &[f64], etas: &[f64], threshold: f64) -> Option<f64> {
    let mut idx: Vec<usize> = (0..deltas.len()).collect();
    idx.sort_by(|&a, &b| deltas[a].total_cmp(&deltas[b]));
    let centre =
        (0..idx.len()).min_by(|&a, &b| deltas[idx[a]].abs().total_cmp(&deltas[idx[b]].abs()))?;
    if etas[idx[centre]] < threshold {
        return None;
    }
    let (mut lo, mut hi) = (centre, centre);
    while lo > 0 && etas[idx[lo - 1]] >= threshold {
        lo -= 1;
    }
    while hi + 1 < idx.len() && etas[idx[hi + 1]] >= threshold {
        hi += 1;
    }
    Some(deltas[idx[hi]] - deltas[idx[lo]])
}

pub fn cmd_scan_detuning(cfg: &RunConfig) -> Result<(Vec<LensReport>, BandwidthSummary)> {
    let dir = &cfg.output_dir;
    prepare(dir)?;
    let (ens, design, _) = build_lens(cfg)?;
    let opts = cfg.solve_options();
    let reports = sweep(&cfg.detunings, cfg.parallel, |&d| {
        Ok(measure_lens(&ens, cfg, cfg.lens.f, d, opts)?.0)
    })?;
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            vec![
                r.delta,
                r.metrics.eta,
                r.metrics.epsilon,
                r.metrics.eta_tilde,
            ]
        })
        .collect();
    write_rows(
        File::create(dir.join("detuning_scan.csv"))?,
        &["delta_gamma0", "eta", "epsilon", "eta_tilde"],
        &rows,
    )?;
    let rings: Vec<RingSpec> = design.rings.iter().map(|r| r.ring).collect();
    let etas: Vec<f64> = reports.iter().map(|r| r.metrics.eta).collect();
    let summary = BandwidthSummary {
        threshold: cfg.bandwidth_threshold,
        bandwidth: bandwidth(&cfg.detunings, &etas, cfg.bandwidth_threshold),
        half_weighted_gamma_coop: 0.5 * weighted_gamma_coop(&rings, cfg.w0),
    };
    write_json(&dir.join("detuning_summary.json"), &summary)?;
    write_manifest(dir, "scan-detuning", cfg)?;
    Ok((reports, summary))
}

/// One focal length of a magnification scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnificationPoint {
    pub f: f64,
    pub candidate: Candidate,
    pub report: LensReport,
}

pub fn cmd_scan_magnification(cfg: &RunConfig) -> Result<Vec<MagnificationPoint>> {
    let dir = &cfg.output_dir;
    prepare(dir)?;
    let table = build_phase_table(cfg.table_config())?;
    let opts = cfg.solve_options();
    let point = |&f: &f64| -> Result<MagnificationPoint> {
        let mut lens = MetalensParams { f, ..cfg.lens };
        if cfg.optimize_each {
            let fixed = FixedParams { f, ..cfg.fixed() };
            let best = optimize_lens(&fixed, &cfg.pso, Fidelity::TableModel, &table)?.best;
            lens = fixed.lens(&best);
        }
        let (ens, _) = assemble_metalens(&lens, &table)?;
        let sub = RunConfig {
            lens,
            ..cfg.clone()
        };
        let report = measure_lens(&ens, &sub, f, cfg.delta, opts)?.0;
        Ok(MagnificationPoint {
            f,
            candidate: Candidate {
                phi0: lens.phi0,
                delta_r: lens.delta_r,
                alpha: lens.alpha,
            },
            report,
        })
    };
    let points: Vec<MagnificationPoint> = if cfg.parallel {
        cfg.focal_lengths
            .par_iter()
            .map(point)
            .collect::<Result<_>>()?
    } else {
        cfg.focal_lengths.iter().map(point).collect::<Result<_>>()?
    };
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let m = &p.report.metrics;
            vec![
                p.f,
                m.magnification,
                m.eta,
                m.eta_tilde,
                m.epsilon,
                m.n as f64,
                p.candidate.phi0,
                p.candidate.delta_r,
                p.candidate.alpha,
            ]
        })
        .collect();
    write_rows(
        File::create(dir.join("magnification_scan.csv"))?,
        &[
            "f_lambda0",
            "magnification",
            "eta",
            "eta_tilde",
            "epsilon",
            "N",
            "phi0_rad",
            "delta_r_lambda0",
            "alpha",
        ],
        &rows,
    )?;
    write_manifest(dir, "scan-magnification", cfg)?;
    Ok(points)
}

/// Fixed geometry, varying `Γ′`.
pub fn cmd_gamma_sweep(cfg: &RunConfig) -> Result<Vec<LensReport>> {
    let dir = &cfg.output_dir;
    prepare(dir)?;
    let (ens, _, _) = build_lens(cfg)?;
    let opts = cfg.solve_options();
    let reports = sweep(&cfg.gamma_primes, cfg.parallel, |&g| {
        Ok(measure_lens(
            &with_gamma_prime(&ens, g)?,
            cfg,
            cfg.lens.f,
            cfg.delta,
            opts,
        )?
        .0)
    })?;
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            vec![
                r.metrics.gamma_prime,
                r.metrics.eta,
                r.metrics.eta_tilde,
                r.metrics.epsilon,
            ]
        })
        .collect();
    write_rows(
        File::create(dir.join("gamma_sweep.csv"))?,
        &["gamma_prime_gamma0", "eta", "eta_tilde", "epsilon"],
        &rows,
    )?;
    write_manifest(dir, "gamma-sweep", cfg)?;
    Ok(reports)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

/// Statistics over displaced configurations at one radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderRow {
    pub delta_d: f64,
    pub eta_mean: f64,
    pub eta_std: f64,
    pub eps_mean: f64,
    pub eps_std: f64,
    pub eta_tilde_mean: f64,
    pub eta_tilde_std: f64,
    pub n_configs: usize,
    pub seed0: u64,
}

/// Clean lens with the disorder radius mapped onto extra broadening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappedRow {
    pub delta_d: f64,
    pub gamma_prime: f64,
    pub eta: f64,
    pub eta_tilde: f64,
    pub epsilon: f64,
}

/// Extra broadening standing in for displacements of radius `delta_d`.
pub fn mapped_gamma_prime(base: f64, delta_d: f64, d_min: f64, prefactor: f64) -> Result<f64> {
    Ok(base
        + predicted_gamma_dis(
            delta_d,
            LatticeConstants {
                dx: d_min,
                dy: d_min,
            },
            prefactor,
        )?)
}

pub fn cmd_disorder_sweep(cfg: &RunConfig) -> Result<(Vec<DisorderRow>, Vec<MappedRow>)> {
    let dir = &cfg.output_dir;
    prepare(dir)?;
    let (ens, _, _) = build_lens(cfg)?;
    let d_min = cfg.lens.d_min;
    let clean = cfg.solve_options();
    let mut rows = Vec::new();
    let mut mapped = Vec::new();
    for &frac in &cfg.delta_d_fractions {
        let delta_d = frac * d_min;
        let spec = DisorderSpec::new(delta_d, cfg.seed)?;
        let opts = if delta_d == 0.0 {
            clean
        } else {
            SolveOptions {
                use_symmetry: false,
                ..clean
            }
        };
        let configs: Vec<u64> = (0..cfg.n_configs as u64).collect();
        let reports = sweep(&configs, cfg.parallel, |&k| {
            Ok(measure_lens(&displace(&ens, spec, k), cfg, cfg.lens.f, cfg.delta, opts)?.0)
        })?;
        let pick = |g: fn(&LensMetrics) -> f64| {
            mean_std(&reports.iter().map(|r| g(&r.metrics)).collect::<Vec<_>>())
        };
        let (eta_mean, eta_std) = pick(|m| m.eta);
        let (eps_mean, eps_std) = pick(|m| m.epsilon);
        let (eta_tilde_mean, eta_tilde_std) = pick(|m| m.eta_tilde);
        rows.push(DisorderRow {
            delta_d,
            eta_mean,
            eta_std,
            eps_mean,
            eps_std,
            eta_tilde_mean,
            eta_tilde_std,
            n_configs: cfg.n_configs,
            seed0: cfg.seed,
        });
        let g = mapped_gamma_prime(cfg.lens.gamma_prime, delta_d, d_min, cfg.disorder_prefactor)?;
        let m = measure_lens(
            &with_gamma_prime(&ens, g)?,
            cfg,
            cfg.lens.f,
            cfg.delta,
            clean,
        )?
        .0
        .metrics;
        mapped.push(MappedRow {
            delta_d,
            gamma_prime: g,
            eta: m.eta,
            eta_tilde: m.eta_tilde,
            epsilon: m.epsilon,
        });
    }
    let mut wr = csv::Writer::from_writer(File::create(dir.join("disorder_sweep.csv"))?);
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    let mut wr = csv::Writer::from_writer(File::create(dir.join("disorder_mapped.csv"))?);
    wr.write_record([
        "delta_d_lambda0",
        "gamma_prime_gamma0",
        "eta",
        "eta_tilde",
        "epsilon",
    ])?;
    for r in &mapped {
        wr.write_record(
            [r.delta_d, r.gamma_prime, r.eta, r.eta_tilde, r.epsilon].map(|v| v.to_string()),
        )?;
    }
    wr.flush()?;
    write_manifest(dir, "disorder-sweep", cfg)?;
    Ok((rows, mapped))
}

/// Best parameters found by `optimize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub phi0: f64,
    pub delta_r: f64,
    pub alpha: f64,
    pub eta: f64,
    pub fidelity: FidelityKind,
    pub evaluations: usize,
    /// Finalists re-scored by full solves, best first.
    pub ranked: Vec<crate::optimize::RankedCandidate>,
}

pub fn cmd_optimize(cfg: &RunConfig) -> Result<OptimizeResult> {
    let dir = &cfg.output_dir;
    prepare(dir)?;
    let table = build_phase_table(cfg.table_config())?;
    let fixed = cfg.fixed();
    let fidelity = match cfg.fidelity {
        FidelityKind::TableModel => Fidelity::TableModel,
        FidelityKind::FullSolve => Fidelity::FullSolve(cfg.solve_options()),
    };
    let pso = PsoConfig {
        seed: cfg.seed,
        ..cfg.pso
    };
    let out = optimize_lens(&fixed, &pso, fidelity, &table)?;
    write_log_csv(&out.log, File::create(dir.join("optimize_log.csv"))?)?;
    let ranked = if cfg.fidelity == FidelityKind::TableModel && cfg.rank_top > 0 {
        rank_with_full_solve(
            &fixed,
            &out.log,
            &table,
            cfg.solve_options(),
            cfg.rank_top,
            0.05,
        )
    } else {
        Vec::new()
    };
    let (best, eta) = match ranked.first() {
        Some(r) if r.full_eta.is_some() => (r.candidate, r.full_eta.unwrap_or(f64::NAN)),
        _ => (out.best, out.best_value),
    };
    let result = OptimizeResult {
        phi0: best.phi0,
        delta_r: best.delta_r,
        alpha: best.alpha,
        eta,
        fidelity: cfg.fidelity,
        evaluations: out.evaluations,
        ranked,
    };
    write_json(&dir.join("best.json"), &result)?;
    write_manifest(dir, "optimize", cfg)?;
    println!(
        "phi0 = {:.4}, delta_r = {:.4}, alpha = {:.4}, eta = {:.4}",
        result.phi0, result.delta_r, result.alpha, result.eta
    );
    Ok(result)
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `single` or `double`.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub gamma_prime: Option<f64>,
    #[arg(long)]
    pub w0: Option<f64>,
    /// Matrix memory ceiling in bytes.
    #[arg(long)]
    pub memory_budget: Option<u64>,
    /// Override any config key, e.g. `--set lens.f=10` or `--set detunings=[-5,0,5]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override {s} is not KEY=VALUE")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(p) = &self.out {
            push(
                "output_dir",
                Value::String(p.display().to_string()).to_string(),
            );
        }
        if let Some(s) = self.seed {
            push("seed", s.to_string());
        }
        if let Some(p) = &self.precision {
            push("precision", Value::String(p.clone()).to_string());
        }
        if let Some(g) = self.gamma_prime {
            push("lens.gamma_prime", g.to_string());
        }
        if let Some(w) = self.w0 {
            push("w0", w.to_string());
        }
        if let Some(m) = self.memory_budget {
            push("memory_budget", m.to_string());
        }
        Ok(out)
    }

    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the ring table and write the emitter positions.
    Design(CommonArgs),
    /// Solve a lens and write metrics and field maps.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding `positions.csv` and `design.json` from `design`.
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Efficiencies over a list of detunings.
    ScanDetuning(CommonArgs),
    /// Efficiencies over a list of focal lengths.
    ScanMagnification(CommonArgs),
    /// Efficiencies over a list of extra broadenings.
    GammaSweep(CommonArgs),
    /// Efficiencies under random position disorder.
    DisorderSweep(CommonArgs),
    /// Particle-swarm search of the lens parameters.
    Optimize(CommonArgs),
}

#[derive(Debug, Parser)]
#[command(
    name = "atomlens",
    version,
    about = "Atomic-array metalens design and coupled-dipole simulation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Design(a) => cmd_design(&a.load()?).map(|_| ()),
        Command::Simulate { common, design } => {
            cmd_simulate(&common.load()?, design.as_deref()).map(|_| ())
        }
        Command::ScanDetuning(a) => cmd_scan_detuning(&a.load()?).map(|_| ()),
        Command::ScanMagnification(a) => cmd_scan_magnification(&a.load()?).map(|_| ()),
        Command::GammaSweep(a) => cmd_gamma_sweep(&a.load()?).map(|_| ()),
        Command::DisorderSweep(a) => cmd_disorder_sweep(&a.load()?).map(|_| ()),
        Command::Optimize(a) => cmd_optimize(&a.load()?).map(|_| ()),
    }
}
