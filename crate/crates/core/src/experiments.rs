//! Configuration files, run harness, Monte Carlo sweep and mesh study.
//!
//! Configuration is INI-style `key = value` text. Keys may appear at the top
//! level or in the sections `[scenario]`, `[flux]`, `[sweep]`,
//! `[mesh_study]` and `[output]`; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use ini::Ini;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::fem::{write_snapshot_csv, FluxProfile, ScalarField};
use crate::geometry::{boundary_arcs, EdgeMarker, Mesh};
use crate::greens::ConvolutionMode;
use crate::intensities::approx_flux_hat;
use crate::metrics::{relative_error, DeviationCurves, NormKind};
use crate::models::{compare_runs, solve, uniform_times, MeshPair, RunResult, Scenario, SingleMethod, Variant};
use crate::{Error, Result, Vec2};

/// Monte Carlo settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub samples: usize,
    pub seed: u64,
    pub workers: usize,
    pub log10_d: (f64, f64),
    pub log10_rho: (f64, f64),
    pub h: f64,
    pub dt: f64,
    pub t_end: f64,
    pub window: (f64, f64),
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            samples: 50,
            seed: 20_240_601,
            workers: 4,
            log10_d: (-3.0, 1.5),
            log10_rho: (-3.0, 0.0),
            h: 0.2,
            dt: 0.08,
            t_end: 40.0,
            window: (10.0, 40.0),
        }
    }
}

/// Fine and coarse mesh sizes of the mesh study.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshStudyConfig {
    pub fine_h: f64,
    pub coarse_h: f64,
}

impl Default for MeshStudyConfig {
    fn default() -> Self {
        MeshStudyConfig { fine_h: 0.09577, coarse_h: 0.28773 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub scenario: Scenario,
    pub variants: Vec<Variant>,
    pub sweep: SweepConfig,
    pub mesh_study: MeshStudyConfig,
    pub output_dir: PathBuf,
    /// Write a snapshot CSV for every `snapshot_every`-th output time.
    pub snapshot_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scenario: Scenario::default(),
            variants: vec![Variant::Exclusion, Variant::PointGreen, Variant::PointSingle],
            sweep: SweepConfig::default(),
            mesh_study: MeshStudyConfig::default(),
            output_dir: PathBuf::from("out"),
            snapshot_every: 10,
        }
    }
}

const SCENARIO_KEYS: &[&str] = &[
    "n",
    "rho",
    "phi0",
    "D",
    "R",
    "r",
    "half_width",
    "dt",
    "T",
    "h",
    "center",
    "n_circle_points",
    "output_interval",
    "output_times",
    "variants",
    "green_convolution",
    "single_method",
    "snapshot_every",
];
const FLUX_KEYS: &[&str] = &["n", "rho", "phi0"];
const SWEEP_KEYS: &[&str] = &["samples", "seed", "workers", "h", "dt", "T", "log10_D_min", "log10_D_max"];
const MESH_STUDY_KEYS: &[&str] = &["fine_h", "coarse_h"];
const OUTPUT_KEYS: &[&str] = &["dir"];

fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))
}

fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| value(key, s)).collect()
}

/// Parse configuration text, applying defaults for omitted keys.
pub fn parse_config(text: &str) -> Result<Config> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut entries: Vec<(String, String, String)> = Vec::new();
    for (section, props) in &ini {
        let sec = section.unwrap_or("scenario");
        let allowed = match sec {
            "scenario" => SCENARIO_KEYS,
            "flux" => FLUX_KEYS,
            "sweep" => SWEEP_KEYS,
            "mesh_study" => MESH_STUDY_KEYS,
            "output" => OUTPUT_KEYS,
            other => return Err(Error::config(other, "unknown section")),
        };
        for (k, v) in props.iter() {
            if !allowed.contains(&k) {
                return Err(Error::config(k, format!("unknown key in [{sec}]")));
            }
            entries.push((sec.to_string(), k.to_string(), v.to_string()));
        }
    }
    let mut cfg = Config::default();
    let mut output_interval = None;
    let mut output_times = None;
    for (sec, key, raw) in &entries {
        let k = key.as_str();
        let s = &mut cfg.scenario;
        match (sec.as_str(), k) {
            ("scenario" | "flux", "n") => s.n = value(k, raw)?,
            ("scenario" | "flux", "rho") => s.rho = value(k, raw)?,
            ("scenario" | "flux", "phi0") => s.phi0 = value(k, raw)?,
            ("scenario", "D") => s.diffusivity = value(k, raw)?,
            ("scenario", "R") => s.radius = value(k, raw)?,
            ("scenario", "r") => s.r = value(k, raw)?,
            ("scenario", "half_width") => s.half_width = value(k, raw)?,
            ("scenario", "dt") => s.dt = value(k, raw)?,
            ("scenario", "T") => s.t_end = value(k, raw)?,
            ("scenario", "h") => s.h = value(k, raw)?,
            ("scenario", "center") => {
                let c: Vec<f64> = list(k, raw)?;
                if c.len() != 2 {
                    return Err(Error::config(k, "expected two comma-separated numbers"));
                }
                s.center = Vec2::new(c[0], c[1]);
            }
            ("scenario", "n_circle_points") => s.n_circle_points = Some(value(k, raw)?),
            ("scenario", "output_interval") => output_interval = Some(value::<f64>(k, raw)?),
            ("scenario", "output_times") => output_times = Some(list::<f64>(k, raw)?),
            ("scenario", "variants") => {
                cfg.variants = raw
                    .split(',')
                    .map(|v| Variant::from_name(v.trim()).ok_or_else(|| Error::config(k, format!("unknown variant `{}`", v.trim()))))
                    .collect::<Result<_>>()?;
            }
            ("scenario", "green_convolution") => {
                s.convolution = ConvolutionMode::from_name(raw.trim())
                    .ok_or_else(|| Error::config(k, "expected `frozen` or `history`"))?;
            }
            ("scenario", "single_method") => {
                s.single_method = SingleMethod::from_name(raw.trim())
                    .ok_or_else(|| Error::config(k, "expected `green` or `direct`"))?;
            }
            ("scenario", "snapshot_every") => cfg.snapshot_every = value(k, raw)?,
            ("sweep", "samples") => cfg.sweep.samples = value(k, raw)?,
            ("sweep", "seed") => cfg.sweep.seed = value(k, raw)?,
            ("sweep", "workers") => cfg.sweep.workers = value(k, raw)?,
            ("sweep", "h") => cfg.sweep.h = value(k, raw)?,
            ("sweep", "dt") => cfg.sweep.dt = value(k, raw)?,
            ("sweep", "T") => cfg.sweep.t_end = value(k, raw)?,
            ("sweep", "log10_D_min") => cfg.sweep.log10_d.0 = value(k, raw)?,
            ("sweep", "log10_D_max") => cfg.sweep.log10_d.1 = value(k, raw)?,
            ("mesh_study", "fine_h") => cfg.mesh_study.fine_h = value(k, raw)?,
            ("mesh_study", "coarse_h") => cfg.mesh_study.coarse_h = value(k, raw)?,
            ("output", "dir") => cfg.output_dir = PathBuf::from(raw.trim()),
            _ => return Err(Error::config(k, "unknown key")),
        }
    }
    let s = &mut cfg.scenario;
    s.output_times = match (output_times, output_interval) {
        (Some(_), Some(_)) => return Err(Error::config("output_times", "give either output_times or output_interval")),
        (Some(t), None) => t,
        (None, Some(iv)) => {
            if !(iv > 0.0) {
                return Err(Error::config("output_interval", "must be positive"));
            }
            uniform_times(iv, s.t_end)
        }
        (None, None) => uniform_times(0.4, s.t_end),
    };
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Scenario invariants reported against the key that breaks them.
fn validate_config(cfg: &Config) -> Result<()> {
    let s = &cfg.scenario;
    let positive = |key: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::config(key, format!("{v} must be positive")))
        }
    };
    if s.n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&s.rho) {
        return Err(Error::config("rho", format!("{} must lie in [0, 1]", s.rho)));
    }
    positive("phi0", s.phi0)?;
    positive("D", s.diffusivity)?;
    positive("R", s.radius)?;
    positive("h", s.h)?;
    positive("dt", s.dt)?;
    if !(s.r > 0.0 && s.r < s.radius) {
        return Err(Error::config("r", format!("{} must satisfy 0 < r < R = {}", s.r, s.radius)));
    }
    if !(s.t_end >= s.dt) {
        return Err(Error::config("T", format!("{} must be at least dt = {}", s.t_end, s.dt)));
    }
    if !(s.half_width > s.radius + s.center.abs().max()) {
        return Err(Error::config("half_width", "domain does not contain the cell"));
    }
    if s.n_circle_points.is_some_and(|n| n < 16) {
        return Err(Error::config("n_circle_points", "must be at least 16"));
    }
    s.output_steps().map_err(|e| Error::config("output_times", e.to_string()))?;
    if cfg.variants.is_empty() {
        return Err(Error::config("variants", "no variants requested"));
    }
    if cfg.snapshot_every == 0 {
        return Err(Error::config("snapshot_every", "must be at least 1"));
    }
    let sw = &cfg.sweep;
    if sw.samples == 0 {
        return Err(Error::config("samples", "must be at least 1"));
    }
    if sw.workers == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    positive("h", sw.h)?;
    positive("dt", sw.dt)?;
    if !(sw.t_end > sw.window.0) {
        return Err(Error::config("T", "sweep horizon must reach into the comparison window"));
    }
    if !(sw.log10_d.0 < sw.log10_d.1) {
        return Err(Error::config("log10_D_min", "range is empty"));
    }
    positive("fine_h", cfg.mesh_study.fine_h)?;
    positive("coarse_h", cfg.mesh_study.coarse_h)?;
    s.validate()
}

pub fn load_config(path: &Path) -> Result<Config> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Outcome of [`run_scenario`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub completed: Vec<Variant>,
    pub failed: Vec<(Variant, String)>,
    pub comparisons: Vec<PathBuf>,
}

impl RunSummary {
    pub fn numerical_failure(&self) -> bool {
        !self.failed.is_empty()
    }
}

fn write_metadata(path: &Path, scenario: &Scenario, extra: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in scenario.describe().iter().chain(extra) {
        let _ = writeln!(text, "{k} = {v}");
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_flux_trace(path: &Path, trace: &[FluxProfile]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,theta,flux")?;
    for p in trace {
        for (th, v) in &p.samples {
            writeln!(out, "{},{},{}", p.time, th, v)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_trace(path: &Path, result: &RunResult, scenario: &Scenario, curves: Option<&DeviationCurves>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let steps = scenario.output_steps()?;
    if curves.is_some() {
        writeln!(out, "t,mass,l2_dev,h1_dev,flux_dev,c_star")?;
    } else {
        writeln!(out, "t,mass")?;
    }
    for (j, &k) in steps.iter().enumerate() {
        let rec = result.mass_trace[k - 1];
        match curves {
            // Row 0 of the curves is t = 0.
            Some(c) => writeln!(
                out,
                "{},{},{},{},{},{}",
                rec.t,
                rec.mass,
                c.l2_dev[j + 1],
                c.h1_dev[j + 1],
                c.flux_dev[j + 1],
                c.c_star[j + 1]
            )?,
            None => writeln!(out, "{},{}", rec.t, rec.mass)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Run every requested variant, writing one directory per variant and a
/// deviation CSV for each point-source variant when the exclusion run is
/// present.
pub fn run_scenario(cfg: &Config, out: &Path) -> Result<RunSummary> {
    let s = &cfg.scenario;
    std::fs::create_dir_all(out)?;
    let pair = MeshPair::build(s)?;
    pair.full.write_to(&out.join("mesh.txt"))?;
    let spec = s.flux_spec()?;
    let mut summary = RunSummary { completed: Vec::new(), failed: Vec::new(), comparisons: Vec::new() };
    let mut variants = cfg.variants.clone();
    variants.sort();
    variants.dedup();
    let mut exclusion: Option<RunResult> = None;
    for &variant in &variants {
        let dir = out.join(variant.name());
        std::fs::create_dir_all(&dir)?;
        let mut meta = vec![("variant".to_string(), variant.name().to_string())];
        match solve(s, &pair, variant) {
            Ok(result) => {
                let curves = match (&exclusion, variant.is_point_source()) {
                    (Some(ex), true) => Some(compare_runs(ex, &result, &pair, &spec)?),
                    _ => None,
                };
                let mesh: &Mesh = if result.on_full_mesh { &pair.full } else { &pair.annulus };
                for snap in result.snapshots.iter().skip(cfg.snapshot_every - 1).step_by(cfg.snapshot_every) {
                    write_snapshot_csv(&dir, variant.name(), mesh, snap)?;
                }
                write_flux_trace(&dir.join("flux.csv"), &result.flux_trace)?;
                write_trace(&dir.join("trace.csv"), &result, s, curves.as_ref())?;
                if let Some(c) = &curves {
                    let path = out.join(format!("compare_{}.csv", variant.name()));
                    c.write_csv(&path)?;
                    summary.comparisons.push(path);
                }
                meta.push(("status".into(), "ok".into()));
                meta.push(("on_full_mesh".into(), result.on_full_mesh.to_string()));
                meta.push(("cg_iterations".into(), result.diagnostics.cg_iterations.to_string()));
                meta.push(("masked_nodes".into(), result.diagnostics.masked_nodes.len().to_string()));
                write_metadata(&dir.join("metadata.txt"), s, &meta)?;
                if variant == Variant::Exclusion {
                    exclusion = Some(result);
                }
                summary.completed.push(variant);
            }
            Err(e) if e.is_numerical_failure() => {
                meta.push(("status".into(), "failed".into()));
                meta.push(("error".into(), e.to_string()));
                write_metadata(&dir.join("metadata.txt"), s, &meta)?;
                summary.failed.push((variant, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

/// Intensities and approximate boundary flux as CSV files.
pub fn write_flux_tables(cfg: &Config, out: &Path) -> Result<()> {
    let s = &cfg.scenario;
    std::fs::create_dir_all(out)?;
    let spec = s.flux_spec()?;
    let schedule = s.schedule()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("intensities.csv"))?);
    let cols: Vec<String> = (0..schedule.len())
        .map(|i| if i == 0 { "phi_center".to_string() } else { format!("phi_{i}") })
        .collect();
    writeln!(f, "t,{}", cols.join(","))?;
    for &t in &s.output_times {
        let v: Vec<String> = schedule.eval(t)?.iter().map(|x| x.to_string()).collect();
        writeln!(f, "{t},{}", v.join(","))?;
    }
    f.flush()?;
    if spec.n <= 2 {
        let mut g = std::io::BufWriter::new(std::fs::File::create(out.join("approx_flux.csv"))?);
        writeln!(g, "theta,phi_prescribed,phi_hat_t,phi_hat_steady")?;
        for j in 0..512 {
            let th = std::f64::consts::TAU * j as f64 / 512.0;
            writeln!(
                g,
                "{th},{},{},{}",
                spec.density(th),
                approx_flux_hat(&spec, th, s.t_end, s.radius, s.r, s.diffusivity)?,
                crate::intensities::approx_flux_steady(&spec, th, s.radius, s.r)?
            )?;
        }
        g.flush()?;
    }
    Ok(())
}

/// Fields and flux profiles read back from a run directory.
#[derive(Clone, Debug)]
pub struct StoredRun {
    pub variant: Variant,
    pub snapshots: Vec<ScalarField>,
    pub flux_trace: Vec<FluxProfile>,
}

fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Load a run directory written by [`run_scenario`]; the mesh is taken from
/// `mesh.txt` in the parent directory.
pub fn load_run(dir: &Path) -> Result<(MeshPair, StoredRun)> {
    let meta = read_metadata(&dir.join("metadata.txt"))?;
    let variant = meta
        .get("variant")
        .and_then(|v| Variant::from_name(v))
        .ok_or_else(|| Error::Parse(format!("{}: missing variant", dir.display())))?;
    if meta.get("status").map(String::as_str) != Some("ok") {
        return Err(Error::Parse(format!("{}: run did not complete", dir.display())));
    }
    let parent = dir.parent().ok_or_else(|| Error::Parse("run directory has no parent".into()))?;
    let pair = MeshPair::from_full(Mesh::read_from(&parent.join("mesh.txt"))?)?;
    let mesh = if variant.is_point_source() { &pair.full } else { &pair.annulus };
    let mut files: Vec<(f64, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_string();
            let t = name.strip_prefix(&format!("{}_t", variant.name()))?.strip_suffix(".csv")?.parse().ok()?;
            Some((t, p))
        })
        .collect();
    files.sort_by(|a, b| a.0.total_cmp(&b.0));
    let snapshots = files
        .iter()
        .map(|(t, p)| ScalarField::new(mesh, *t, crate::fem::read_snapshot_values(p)?))
        .collect::<Result<Vec<_>>>()?;
    let text = std::fs::read_to_string(dir.join("flux.csv"))?;
    let mut profiles: Vec<FluxProfile> = Vec::new();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = list("flux.csv", line)?;
        if v.len() != 3 {
            return Err(Error::Parse(format!("bad flux row `{line}`")));
        }
        match profiles.last_mut() {
            Some(p) if p.time == v[0] => p.samples.push((v[1], v[2])),
            _ => profiles.push(FluxProfile { time: v[0], samples: vec![(v[1], v[2])] }),
        }
    }
    Ok((pair, StoredRun { variant, snapshots, flux_trace: profiles }))
}

/// Deviation curves between two stored runs at their shared snapshot times.
pub fn compare_stored(exclusion_dir: &Path, point_dir: &Path, cfg: &Config) -> Result<DeviationCurves> {
    let (pair, ex) = load_run(exclusion_dir)?;
    let (_, pt) = load_run(point_dir)?;
    let to_result = |run: &StoredRun| -> Result<RunResult> {
        let times: Vec<f64> = run.snapshots.iter().map(|s| s.time).collect();
        let flux = times
            .iter()
            .map(|t| {
                run.flux_trace
                    .iter()
                    .find(|p| (p.time - t).abs() < 1e-6)
                    .cloned()
                    .ok_or_else(|| Error::Parse(format!("no flux profile at t = {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mesh = if run.variant.is_point_source() { &pair.full } else { &pair.annulus };
        let snapshots = run
            .snapshots
            .iter()
            .map(|s| ScalarField::new(mesh, s.time, s.values.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunResult {
            variant: run.variant,
            on_full_mesh: run.variant.is_point_source(),
            snapshots,
            flux_trace: flux,
            mass_trace: Vec::new(),
            diagnostics: Default::default(),
        })
    };
    compare_runs(&to_result(&ex)?, &to_result(&pt)?, &pair, &cfg.scenario.flux_spec()?)
}

/// One Monte Carlo draw and its outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSample {
    pub sample: usize,
    pub log10_d: f64,
    pub log10_rho: f64,
    /// `-1` failure, `0` multi-Dirac strictly better on the whole window,
    /// `1` otherwise.
    pub label: i32,
    /// Window samples where the multi-Dirac deviation is not smaller.
    pub violations: usize,
}

/// Label from optional deviation curves (`None` marks a failed run).
pub fn label_run(multi: Option<&DeviationCurves>, single: Option<&DeviationCurves>, window: (f64, f64)) -> (i32, usize) {
    let (Some(m), Some(s)) = (multi, single) else {
        return (-1, 0);
    };
    let (wm, ws) = (m.l2_in_window(window.0, window.1), s.l2_in_window(window.0, window.1));
    let violations = wm.iter().zip(&ws).filter(|(a, b)| !(a.1 < b.1)).count();
    if violations == 0 && !wm.is_empty() && wm.len() == ws.len() {
        (0, 0)
    } else {
        (1, violations)
    }
}

/// Deterministic draw of `(log10 D, log10 ρ)` for a sample index.
pub fn draw_sample(cfg: &SweepConfig, index: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let d = rng.random_range(cfg.log10_d.0..cfg.log10_d.1);
    let rho = rng.random_range(cfg.log10_rho.0..cfg.log10_rho.1);
    (d, rho)
}

/// Base scenario of the sweep: coarse mesh, longer steps, `r = 0.01`.
pub fn sweep_scenario(base: &Scenario, cfg: &SweepConfig, n: u32) -> Scenario {
    Scenario {
        n,
        r: 0.01,
        h: cfg.h,
        dt: cfg.dt,
        t_end: cfg.t_end,
        n_circle_points: None,
        output_times: uniform_times(0.4, cfg.t_end),
        ..base.clone()
    }
}

/// Exclusion, multi-Dirac and single-Dirac runs for one parameter pair.
pub fn evaluate_sample(scenario: &Scenario, pair: &MeshPair, window: (f64, f64)) -> (i32, usize) {
    let run = || -> Result<(DeviationCurves, DeviationCurves)> {
        let spec = scenario.flux_spec()?;
        let multi = solve(scenario, pair, Variant::PointGreen)?;
        let ex = solve(scenario, pair, Variant::Exclusion)?;
        let single = solve(scenario, pair, Variant::PointSingle)?;
        Ok((compare_runs(&ex, &multi, pair, &spec)?, compare_runs(&ex, &single, pair, &spec)?))
    };
    match run() {
        Ok((m, s)) => label_run(Some(&m), Some(&s), window),
        Err(_) => label_run(None, None, window),
    }
}

/// Seeded Monte Carlo sweep over `(log10 D, log10 ρ)`; rows come back in
/// sample order.
pub fn mc_sweep(base: &Scenario, cfg: &SweepConfig, n: u32) -> Result<Vec<SweepSample>> {
    let scenario = sweep_scenario(base, cfg, n);
    let pair = MeshPair::build(&scenario)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::internal(e.to_string()))?;
    Ok(pool.install(|| {
        (0..cfg.samples)
            .into_par_iter()
            .map(|i| {
                let (ld, lr) = draw_sample(cfg, i);
                let sc = Scenario { diffusivity: 10f64.powf(ld), rho: 10f64.powf(lr), ..scenario.clone() };
                let (label, violations) = evaluate_sample(&sc, &pair, cfg.window);
                SweepSample { sample: i, log10_d: ld, log10_rho: lr, label, violations }
            })
            .collect()
    }))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sample,log10_D,log10_rho,label,violations")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.sample, r.log10_d, r.log10_rho, r.label, r.violations)?;
    }
    out.flush()?;
    Ok(())
}

/// Relative `L²` errors against the fine-mesh exclusion reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshStudy {
    pub times: Vec<f64>,
    pub green_fine: Vec<f64>,
    pub green_coarse: Vec<f64>,
    pub direct_fine: Vec<f64>,
    pub direct_coarse: Vec<f64>,
}

impl MeshStudy {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,green_fine,green_coarse,direct_fine,direct_coarse")?;
        for k in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.times[k], self.green_fine[k], self.green_coarse[k], self.direct_fine[k], self.direct_coarse[k]
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_excess(&self) -> (f64, f64) {
        let last = self.times.len() - 1;
        (
            self.green_coarse[last] - self.green_fine[last],
            self.direct_coarse[last] - self.direct_fine[last],
        )
    }
}

/// Multi-Dirac Green and direct runs on a fine and a coarse mesh, each
/// measured against the exclusion run on the fine mesh.
pub fn mesh_study(base: &Scenario, cfg: &MeshStudyConfig) -> Result<MeshStudy> {
    let fine = Scenario { h: cfg.fine_h, n_circle_points: None, ..base.clone() };
    let coarse = Scenario { h: cfg.coarse_h, n_circle_points: None, ..base.clone() };
    let (fine_pair, coarse_pair) = (MeshPair::build(&fine)?, MeshPair::build(&coarse)?);
    let reference = solve(&fine, &fine_pair, Variant::Exclusion)?.annulus_values(&fine_pair);
    let errors = |sc: &Scenario, pair: &MeshPair, variant: Variant| -> Result<Vec<f64>> {
        let vals = solve(sc, pair, variant)?.annulus_values(pair);
        let re = relative_error(&fine_pair.annulus, &reference, &pair.annulus, &vals, NormKind::L2)?;
        re.into_iter()
            .map(|v| v.ok_or_else(|| Error::Numerical("reference field vanishes".into())))
            .collect()
    };
    Ok(MeshStudy {
        times: fine.output_times.clone(),
        green_fine: errors(&fine, &fine_pair, Variant::PointGreen)?,
        green_coarse: errors(&coarse, &coarse_pair, Variant::PointGreen)?,
        direct_fine: errors(&fine, &fine_pair, Variant::PointDirect)?,
        direct_coarse: errors(&coarse, &coarse_pair, Variant::PointDirect)?,
    })
}

/// Arcs of the cell boundary of a mesh pair, for flux comparisons.
pub fn cell_arcs(pair: &MeshPair) -> Result<Vec<crate::geometry::BoundaryArc>> {
    boundary_arcs(&pair.annulus, EdgeMarker::CellBoundary)
}
