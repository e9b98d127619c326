//! `voxrecon`: dataset generation, training, meshing, evaluation,
//! diagnostics and the regularizer benchmark.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use voxrecon::diagnostics::{continuity_study, glitch_metric, CircleExperiment};
use voxrecon::meshing::{chamfer, marching_cubes, mean_distance_to, sample_surface};
use voxrecon::regularizer::{collect_vertices, regularize, RegMode};
use voxrecon::renderer::{sample_ray, GradientEstimator};
use voxrecon::scene_synth::{bake_grid, make_rig, sample_analytic_surface};
use voxrecon::training::{read_metrics_csv, write_metrics_csv, StepMetrics, TrainState};
use voxrecon::{AnalyticScene, Dataset, SdfGrid, TrainConfig, Trainer, TriangleMesh};

/// Tracks live and peak heap bytes for the benchmark report.
struct CountingAlloc;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn note_alloc(size: usize) {
    let now = LIVE.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            note_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            note_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
            note_alloc(new_size);
        }
        p
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "voxrecon", version, about = "Dense SDF voxel-grid surface reconstruction")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Optimize a grid and radiance field against a dataset.
    Train(TrainArgs),
    /// Extract a mesh from a checkpoint.
    Mesh(MeshArgs),
    /// Chamfer distance of a mesh against a scene or another mesh.
    Eval(EvalArgs),
    /// Junction continuity study and 2D ray traces.
    Diagnose(DiagnoseArgs),
    /// Time the regularizer implementations.
    BenchReg(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Preset name or scene JSON file.
    #[arg(long, default_value = "sphere")]
    scene: String,
    #[arg(long, default_value_t = 24)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gradient: Option<GradientEstimator>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Save a checkpoint every N steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Checkpoint and exit after this many steps; continue with `--resume`.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct MeshArgs {
    /// Checkpoint directory, training output directory or `.sdfg` grid.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian smoothing in world units before extraction.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    level: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Mesh to evaluate.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    mesh: Option<PathBuf>,
    /// Checkpoint to mesh and evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Preset name or scene JSON file to compare against.
    #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
    scene: Option<String>,
    /// Reference mesh to compare against.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Preset name or scene JSON file, sliced at z = 0.
    #[arg(long, default_value = "circle-2d")]
    scene: String,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Rays per batch.
    #[arg(long, default_value_t = 2048)]
    batch: usize,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    /// `tape-oracle`, `manual-serial`, `manual-parallel` or `all`.
    #[arg(long, default_value = "all")]
    mode: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// 1 usage, 2 I/O, 3 numeric failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    use voxrecon::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Io(_) | E::Format(_) | E::Json(_) => 2,
                E::InvalidConfig(_)
                | E::InvalidResolution(_)
                | E::GridTooSmall { .. }
                | E::ShapeMismatch(_)
                | E::FaceOnBoundary => 1,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
    }
    3
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.global.deterministic { Some(1) } else { cli.global.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.global.seed;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a, seed),
        Command::Mesh(a) => cmd_mesh(a),
        Command::Eval(a) => cmd_eval(a, seed.unwrap_or(0)),
        Command::Diagnose(a) => cmd_diagnose(a, seed.unwrap_or(0)),
        Command::BenchReg(a) => cmd_bench_reg(a, seed.unwrap_or(0)),
    }
}

fn load_scene(name: &str) -> Result<AnalyticScene> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "json") {
        return AnalyticScene::load(path).with_context(|| format!("loading scene {name}"));
    }
    AnalyticScene::preset(name).map_err(|_| {
        usage(format!(
            "unknown scene '{name}'; use a JSON file or one of: {}",
            AnalyticScene::preset_names().join(", ")
        ))
    })
}

fn write_report(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let data = Dataset::generate(&scene, a.views, a.width, a.height)?;
    data.save(&a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("wrote {} views to {}", data.cameras.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    if let Some(g) = a.gradient {
        cfg.render.gradient = g;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("checkpoint");
    let metrics_path = a.out.join("metrics.csv");

    let (mut trainer, mut log) = if a.resume {
        let state = TrainState::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        let mut log = if metrics_path.exists() { read_metrics_csv(&metrics_path)? } else { Vec::new() };
        log.retain(|m| m.step < state.step);
        (Trainer::resume(&data, cfg.clone(), state)?, log)
    } else {
        (Trainer::new(&data, cfg.clone())?, Vec::new())
    };
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;

    let t0 = Instant::now();
    let first = trainer.state.step;
    let stop = a.stop_after.map_or(usize::MAX, |n| first + n);
    while !trainer.is_done() && trainer.state.step < stop {
        let m = trainer.step()?;
        if !(m.l_rgb.is_finite() && trainer.state.log_s.is_finite()) {
            bail!(voxrecon::Error::Numeric(format!("non-finite loss at step {}", m.step)));
        }
        if m.step % 100 == 0 {
            eprintln!("step {:>6}  l_rgb {:.5}  psnr {:.2}  s {:.1}", m.step, m.l_rgb, m.psnr, m.s);
        }
        log.push(m);
        if a.checkpoint_every > 0 && trainer.state.step % a.checkpoint_every == 0 {
            trainer.state.save(&ckpt)?;
            write_metrics_csv(&metrics_path, &log)?;
        }
    }
    trainer.state.save(&ckpt)?;
    write_metrics_csv(&metrics_path, &log)?;
    let last: Option<&StepMetrics> = log.last();
    write_report(
        &json!({
            "steps": trainer.state.step,
            "steps_this_run": trainer.state.step - first,
            "seconds": t0.elapsed().as_secs_f64(),
            "gradient": cfg.render.gradient,
            "seed": trainer.state.seed,
            "grid_resolution": trainer.state.grid.resolution()[0],
            "final": last,
        }),
        Some(&a.out.join("report.json")),
    )?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

/// Accepts a grid file, a checkpoint directory or a training output
/// directory.
fn load_grid(path: &Path) -> Result<SdfGrid> {
    let file = if path.is_dir() {
        let direct = path.join("grid.sdfg");
        if direct.exists() {
            direct
        } else {
            path.join("checkpoint").join("grid.sdfg")
        }
    } else {
        path.to_path_buf()
    };
    SdfGrid::load(&file).with_context(|| format!("loading grid {}", file.display()))
}

fn cmd_mesh(a: MeshArgs) -> Result<()> {
    if !(a.sigma >= 0.0) {
        return Err(usage("--sigma must be non-negative"));
    }
    let grid = load_grid(&a.checkpoint)?;
    let grid = if a.sigma > 0.0 { grid.gaussian_filter(a.sigma) } else { grid };
    let mesh = marching_cubes(&grid, a.level)?;
    mesh.save_ply(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} vertices, {} triangles written to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let (mesh, eps) = match (&a.mesh, &a.checkpoint) {
        (Some(p), _) => (TriangleMesh::load_ply(p).with_context(|| format!("loading {}", p.display()))?, None),
        (None, Some(c)) => {
            let g = load_grid(c)?;
            (marching_cubes(&g, 0.0)?, Some(g.spacing()))
        }
        (None, None) => return Err(usage("give --mesh or --checkpoint")),
    };
    let pts = sample_surface(&mesh, a.samples, seed)?;
    let reference = match (&a.scene, &a.reference) {
        (Some(s), _) => sample_analytic_surface(&load_scene(s)?, a.samples, seed.wrapping_add(1))?,
        (None, Some(r)) => {
            let m = TriangleMesh::load_ply(r).with_context(|| format!("loading {}", r.display()))?;
            sample_surface(&m, a.samples, seed)?
        }
        (None, None) => return Err(usage("give --scene or --reference")),
    };
    let c = chamfer(&pts, &reference)?;
    write_report(
        &json!({
            "chamfer": c,
            "accuracy": mean_distance_to(&pts, &reference)?,
            "completeness": mean_distance_to(&reference, &pts)?,
            "samples": a.samples,
            "grid_spacing": eps,
            "chamfer_over_spacing": eps.map(|e| c / e),
        }),
        a.out.as_deref(),
    )
}

fn cmd_diagnose(a: DiagnoseArgs, seed: u64) -> Result<()> {
    if a.samples < 16 {
        return Err(usage("--samples must be at least 16"));
    }
    fs::create_dir_all(&a.out)?;
    let scene = load_scene(&a.scene)?;
    let c3 = continuity_study(a.trials, 3, 6, seed)?;
    let c2 = continuity_study(a.trials, 2, 8, seed.wrapping_add(1))?;
    let ex = CircleExperiment::with_scene(&scene)?;
    let coarse = ex.trace(a.samples, true)?;
    let fine = ex.trace(2 * a.samples, true)?;
    coarse.save_csv(a.out.join(format!("trace_{}.csv", a.samples)))?;
    fine.save_csv(a.out.join(format!("trace_{}.csv", 2 * a.samples)))?;
    let ga = glitch_metric(&coarse, GradientEstimator::Analytical);
    let gi = glitch_metric(&coarse, GradientEstimator::Interpolated);
    let gi_fine = glitch_metric(&fine, GradientEstimator::Interpolated);
    let report = json!({
        "continuity_3d": c3,
        "continuity_2d": c2,
        "max_analytical_gap": c3.max_analytical_gap.max(c2.max_analytical_gap),
        "max_interpolated_gap": c3.max_interpolated_gap.max(c2.max_interpolated_gap),
        "glitch": {
            "samples": a.samples,
            "sharpness": ex.s,
            "analytical": ga,
            "interpolated": gi,
            "ratio": ga / gi,
            "interpolated_refined": gi_fine,
            "refinement_ratio": gi_fine / gi,
        },
    });
    write_report(&report, Some(&a.out.join("report.json")))?;
    println!("diagnostics written to {}", a.out.display());
    Ok(())
}

fn cmd_bench_reg(a: BenchArgs, seed: u64) -> Result<()> {
    let modes: Vec<RegMode> = match a.mode.as_str() {
        "all" => vec![RegMode::TapeOracle, RegMode::ManualSerial, RegMode::ManualParallel],
        m => vec![m.parse().map_err(|e: voxrecon::Error| usage(e.to_string()))?],
    };
    if a.reps == 0 || a.batch == 0 || a.samples == 0 {
        return Err(usage("--reps, --batch and --samples must be positive"));
    }
    let scene = AnalyticScene::sphere();
    let mut grid = bake_grid(&scene, a.resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = 0.2 * grid.spacing();
    for v in grid.values_mut() {
        *v += rng.gen_range(-noise..noise) as f32;
    }
    let normals = grid.vertex_gradients()?;
    let cams = make_rig(&scene, 24, 96, 96)?;
    let mut points = Vec::new();
    for _ in 0..a.batch {
        let cam = &cams[rng.gen_range(0..cams.len())];
        let ray = cam.pixel_ray(rng.gen_range(0..96), rng.gen_range(0..96));
        if let Ok(seg) = sample_ray(&ray, &scene.aabb, 3, a.samples, Some(&mut rng)) {
            points.extend(seg.t.iter().map(|&t| ray.at(t)));
        }
    }
    let (w_eik, w_curv) = (1e-2, 5e-6);
    let oracle = regularize(&grid, &normals, &collect_vertices(&grid, &points)?, w_eik, w_curv, RegMode::TapeOracle)
        .grad
        .to_dense(grid.len());
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);

    let mut results = Vec::new();
    for mode in modes {
        let mut max_rel: f64 = 0.0;
        let mut n_vertices = 0;
        let base = LIVE.load(Ordering::Relaxed);
        PEAK.store(base, Ordering::Relaxed);
        let t0 = Instant::now();
        for _ in 0..a.reps {
            let verts = collect_vertices(&grid, &points)?;
            n_vertices = verts.len();
            let out = regularize(&grid, &normals, &verts, w_eik, w_curv, mode);
            for (i, g) in out.grad.iter() {
                max_rel = max_rel.max((g - oracle[i]).abs() / scale);
            }
            let touched: std::collections::HashSet<usize> = out.grad.indices().collect();
            for (i, o) in oracle.iter().enumerate() {
                if *o != 0.0 && !touched.contains(&i) {
                    max_rel = max_rel.max(o.abs() / scale);
                }
            }
        }
        let secs = t0.elapsed().as_secs_f64() / a.reps as f64;
        let peak = PEAK.load(Ordering::Relaxed).saturating_sub(base);
        results.push(json!({
            "mode": mode,
            "seconds_per_batch": secs,
            "batches_per_second": 1.0 / secs,
            "peak_heap_bytes": peak,
            "vertices": n_vertices,
            "max_rel_err_vs_oracle": max_rel,
        }));
    }
    write_report(
        &json!({
            "resolution": a.resolution,
            "batch_rays": a.batch,
            "samples_per_ray": a.samples,
            "reps": a.reps,
            "threads": rayon::current_num_threads(),
            "results": results,
        }),
        a.out.as_deref(),
    )
}
