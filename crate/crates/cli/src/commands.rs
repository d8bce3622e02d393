//! Command-line surface. Each command maps onto one pipeline operation and
//! leaves its artifacts plus the resolved config in the run directory.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curvesketch::curves::CurveSet;
use curvesketch::eval::evaluate;
use curvesketch::keypoints::{load_keypoints, save_keypoints, snap_keypoints, Keypoint};
use curvesketch::pipeline::{self, Checkpoint, RunConfig, StageControl};
use curvesketch::targets::{RenderCache, RenderKind, RenderOptions};
use curvesketch::{Error, Result};

use crate::rundir::RunDir;

#[derive(Debug, Parser)]
#[command(name = "curvesketch", version, about = "Abstract a mesh into a sparse set of 3D Bézier curves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run directory holding every artifact of one shape.
    #[arg(long)]
    pub run: PathBuf,
    /// Mesh file (OBJ/PLY) or fixture (builtin:sphere, builtin:cylinder, builtin:cube).
    /// Recorded on first use.
    #[arg(long)]
    pub mesh: Option<String>,
    /// TOML config; defaults to the run's stored copy.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shorthand for `--set preset=<name>`.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Config override, `key.path=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    /// Curve exchange document in source-mesh units.
    Curves,
    /// Tessellated polylines as OBJ line elements, source-mesh units.
    Obj,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit (or load the cached) neural distance field.
    FitSdf(Common),
    /// Detect keypoints from back-projected encoder features.
    DetectKeypoints(Common),
    /// Render and cache supervision targets for sampled views.
    RenderTargets {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        views: usize,
    },
    /// Optimize curves.
    Abstract {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Keypoint file for stage 2; defaults to the run's keypoints or detection.
        #[arg(long)]
        keypoints: Option<PathBuf>,
        /// Continue from an existing stage checkpoint.
        #[arg(long)]
        resume: bool,
        /// Resume even when the config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Add curves around new keypoints, freezing everything else.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keypoints: PathBuf,
    },
    /// Compute coverage and perceptual metrics of the run's curves.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Shape name used in the report; defaults to the run directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Write the run's curves in source-mesh units.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "curves")]
        format: ExportFormat,
    },
    /// Serve the run directory over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

/// 0 ok, 2 config error, 3 runtime failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::ConfigHashMismatch { .. } => 2,
        _ => 3,
    }
}

struct Prepared {
    run: RunDir,
    cfg: RunConfig,
}

fn prepare(c: &Common) -> Result<Prepared> {
    let run = RunDir::create(&c.run)?;
    run.bind_mesh(c.mesh.as_deref())?;
    let mut overrides = Vec::new();
    if let Some(p) = c.preset {
        overrides.push(format!("preset=\"{}\"", match p {
            PresetArg::Paper => "paper",
            PresetArg::Desk => "desk",
        }));
    }
    overrides.extend(c.overrides.iter().cloned());
    let cfg = run.resolve_config(c.config.as_deref(), &overrides)?;
    run.write_config(&cfg)?;
    Ok(Prepared { run, cfg })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitSdf(c) => {
            let p = prepare(&c)?;
            let mesh = p.run.mesh()?;
            let field = curvesketch::sdf::NeuralSdf::load_or_fit(&mesh, &p.cfg.sdf, &p.run.sdf_dir())?;
            let r = &field.report;
            println!(
                "sdf: {} steps, held-out median error {:.5}, surface median |phi| {:.5}",
                r.steps_run, r.heldout_median_error, r.surface_median_abs
            );
            Ok(())
        }
        Command::DetectKeypoints(c) => {
            let p = prepare(&c)?;
            let scene = p.run.scene(&p.cfg)?;
            let kps = pipeline::auto_keypoints(&scene, &p.cfg, &p.cfg.registry())?;
            save_keypoints(&kps, p.run.keypoints())?;
            println!("{} keypoints -> {}", kps.len(), p.run.keypoints().display());
            Ok(())
        }
        Command::RenderTargets { common, views } => {
            let p = prepare(&common)?;
            let mesh = p.run.mesh()?;
            let cache = RenderCache::new(p.run.targets_dir())?;
            let opts = RenderOptions {
                stroke_width: p.cfg.stroke_width,
                ..RenderOptions::default()
            };
            let cams = p.cfg.views.views(views);
            let renders = cache.cache_renders(&mesh, &cams, &[RenderKind::Surface, RenderKind::Contour], &opts)?;
            println!("{} renders cached in {}", renders.len(), cache.root().display());
            Ok(())
        }
        Command::Abstract {
            common,
            stage,
            keypoints,
            resume,
            force,
        } => {
            let p = prepare(&common)?;
            run_abstract(&p, stage, keypoints, resume, force)
        }
        Command::Refine { common, keypoints } => {
            let p = prepare(&common)?;
            let scene = p.run.scene(&p.cfg)?;
            let cs = CurveSet::load(p.run.curves())?;
            let mut new = load_keypoints(&keypoints)?;
            snap_keypoints(&mut new, &scene.oracle);
            let before = cs.len();
            let out = pipeline::refine(&scene, &p.cfg, &p.cfg.registry(), &cs, new.clone(), &control(p.run.refine_checkpoint()))?;
            out.curves.save(p.run.curves())?;
            append_keypoints(&p.run, &new)?;
            println!("refined: {before} -> {} curves", out.curves.len());
            Ok(())
        }
        Command::Evaluate { common, name } => {
            let p = prepare(&common)?;
            let mesh = p.run.mesh()?;
            let cs = CurveSet::load(p.run.curves())?;
            let shape = name.unwrap_or_else(|| {
                p.run.root().file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "shape".into())
            });
            let report = evaluate(&shape, &mesh, &cs, &p.cfg.views, &p.cfg.eval, &p.cfg.registry(), &p.cfg.hash())?;
            report.save(p.run.metrics_json(), Some(&p.run.metrics_csv()))?;
            println!(
                "coverage {:.5} ({}), patch similarity {:.4}, encoder similarity {:.4}",
                report.coverage, report.coverage_units, report.patch_similarity, report.encoder_similarity
            );
            Ok(())
        }
        Command::Export { common, out, format } => {
            let p = prepare(&common)?;
            let cs = CurveSet::load(p.run.curves())?.to_source_units();
            match format {
                ExportFormat::Curves => cs.save(&out)?,
                ExportFormat::Obj => write_polylines(&cs, &out)?,
            }
            println!("{} curves -> {}", cs.len(), out.display());
            Ok(())
        }
        Command::Serve { common, addr } => {
            let p = prepare(&common)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(p.run.root(), e))?;
            rt.block_on(crate::service::serve(p.run, p.cfg, addr))
        }
    }
}

fn control(checkpoint: PathBuf) -> StageControl {
    StageControl {
        checkpoint: Some(checkpoint),
        ..StageControl::default()
    }
}

fn run_stage(
    p: &Prepared,
    scene: &pipeline::Scene,
    ckpt: PathBuf,
    resume: bool,
    force: bool,
    fresh: impl FnOnce() -> Result<Checkpoint>,
) -> Result<Checkpoint> {
    let registry = p.cfg.registry();
    if resume && ckpt.exists() {
        log::info!("resuming from {}", ckpt.display());
        return pipeline::resume(scene, &p.cfg, &registry, &ckpt, &control(ckpt.clone()), force);
    }
    let mut state = fresh()?;
    pipeline::continue_stage(scene, &p.cfg, &registry, &mut state, &control(ckpt))?;
    Ok(state)
}

fn run_abstract(p: &Prepared, stage: StageArg, keypoints: Option<PathBuf>, resume: bool, force: bool) -> Result<()> {
    let scene = p.run.scene(&p.cfg)?;
    let mut stage1_curves = None;
    if stage != StageArg::Two && !p.cfg.ablation.no_stage1 {
        let s1 = run_stage(p, &scene, p.run.stage1_checkpoint(), resume, force, || pipeline::stage1_state(&scene, &p.cfg))?;
        s1.curves.save(p.run.stage1_curves())?;
        s1.curves.save(p.run.curves())?;
        report_stage("stage 1", &s1);
        stage1_curves = Some(s1.curves);
    }
    if stage == StageArg::One {
        return Ok(());
    }
    let base = match stage1_curves {
        Some(c) => c,
        None if p.cfg.ablation.no_stage1 => CurveSet::new(Vec::new(), p.cfg.stroke_width),
        None => CurveSet::load(p.run.stage1_curves())?,
    };
    let kps = match keypoints {
        Some(path) => {
            let mut k = load_keypoints(path)?;
            snap_keypoints(&mut k, &scene.oracle);
            k
        }
        None if p.cfg.ablation.no_local => Vec::new(),
        None if p.run.keypoints().exists() => load_keypoints(p.run.keypoints())?,
        None => {
            let k = pipeline::auto_keypoints(&scene, &p.cfg, &p.cfg.registry())?;
            save_keypoints(&k, p.run.keypoints())?;
            k
        }
    };
    let s2 = run_stage(p, &scene, p.run.stage2_checkpoint(), resume, force, || pipeline::stage2_state(&scene, &p.cfg, &base, kps))?;
    s2.curves.save(p.run.curves())?;
    report_stage("stage 2", &s2);
    Ok(())
}

fn report_stage(name: &str, c: &Checkpoint) {
    match c.window_means(50) {
        Some((lead, trail)) => println!(
            "{name}: {} iterations, {} curves, loss {lead:.5} -> {trail:.5}",
            c.iteration,
            c.curves.len()
        ),
        None => println!("{name}: {} curves (no iterations)", c.curves.len()),
    }
}

fn append_keypoints(run: &RunDir, new: &[Keypoint]) -> Result<()> {
    let mut all = if run.keypoints().exists() { load_keypoints(run.keypoints())? } else { Vec::new() };
    all.extend_from_slice(new);
    save_keypoints(&all, run.keypoints())
}

fn write_polylines(cs: &CurveSet, path: &std::path::Path) -> Result<()> {
    const SEGMENTS: usize = 64;
    let mut out = Vec::new();
    let mut base = 1;
    for c in &cs.curves {
        let pts = c.tessellate(SEGMENTS);
        for p in &pts {
            writeln!(out, "v {} {} {}", p.x, p.y, p.z).expect("write to memory");
        }
        let idx: Vec<String> = (base..base + pts.len()).map(|i| i.to_string()).collect();
        writeln!(out, "l {}", idx.join(" ")).expect("write to memory");
        base += pts.len();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
