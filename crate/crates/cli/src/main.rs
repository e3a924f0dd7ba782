//! `atom`: build the desk dataset, train, infer, render, export, check gradients.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use atom_core::checkpoint::Checkpoint;
use atom_core::config::{GuidanceMode, RunConfig};
use atom_core::dataset;
use atom_core::dmtet::TetGrid;
use atom_core::guidance::Guidance;
use atom_core::io::{write_ply, write_ppm};
use atom_core::model::Model;
use atom_core::train::{infer, render_view, Renderer, Trainer};
use atom_core::{par, selfcheck, Error};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "atom", version, about = "Amortized text-to-mesh: train one generator for many prompts")]
struct Cli {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Dataset operations.
    Dataset {
        #[command(subcommand)]
        op: DatasetOp,
    },
    /// Train stage 1, stage 2 or both.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a mesh for a prompt and report the elapsed time.
    Infer {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PLY output; defaults to `<output>/<prompt>.ply`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Render a prompt from a stored dataset view to PPM.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_enum, default_value = "mesh")]
        renderer: RendererArg,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the mesh for a prompt as PLY.
    Export {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Finite-difference check of every op and both render pipelines.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time inference and training steps with and without data parallelism.
    Bench {
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetOp {
    /// Render the compositional dataset into the dataset directory.
    Build {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RendererArg {
    Volume,
    Mesh,
}

/// A failure with its exit status: 1 for user errors, 2 for internal ones.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Io { .. }
            | Error::UnknownPrompt(_)
            | Error::EmptyPrompt
            | Error::AllPadding
            | Error::Invalid(_)
            | Error::Format(_)
            | Error::Checkpoint(_)
            | Error::Camera(_) => Failure::User(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn load_config(path: Option<&Path>) -> Res<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    Ok(cfg)
}

fn ckpt_path(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.paths.checkpoints.join(format!("stage{stage}.ckpt"))
}

/// Explicit checkpoint, else the latest stage checkpoint on disk.
fn find_checkpoint(cfg: &RunConfig, given: Option<PathBuf>) -> Res<PathBuf> {
    if let Some(p) = given {
        return Ok(p);
    }
    [2, 1]
        .into_iter()
        .map(|s| ckpt_path(cfg, s))
        .find(|p| p.is_file())
        .ok_or_else(|| Failure::User(format!("no checkpoint given and none found in {}", cfg.paths.checkpoints.display())))
}

fn load_model(cfg: &RunConfig, given: Option<PathBuf>) -> Res<Model<f32>> {
    let path = find_checkpoint(cfg, given)?;
    Ok(Checkpoint::load(&path)?.model()?)
}

fn slug(prompt: &str) -> String {
    let s: String = prompt.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

fn run_stage(t: &mut Trainer, g: &mut dyn Guidance, cfg: &RunConfig, stage: u8) -> Res<()> {
    let total = t.cfg.stage(stage).iterations;
    let every = if cfg.save_every == 0 { total.max(1) } else { cfg.save_every };
    let path = ckpt_path(cfg, stage);
    while t.state.iteration < total {
        let until = (t.state.iteration + every).min(total);
        t.run(g, until)?;
        Checkpoint::from_trainer(t).save(&path)?;
        info!("stage {stage}: {} / {total} iterations, saved {}", t.state.iteration, path.display());
    }
    if total == 0 {
        Checkpoint::from_trainer(t).save(&path)?;
    }
    let s = &t.state;
    println!(
        "stage {stage} done: {} iterations, {} skipped steps, {} empty-mesh samples, {} guidance failures, checkpoint {}",
        s.iteration,
        s.skipped_steps,
        s.empty_mesh_samples,
        s.guidance_failures,
        path.display()
    );
    Ok(())
}

fn train(cfg: RunConfig, stage: StageArg, resume: Option<PathBuf>) -> Res<()> {
    let mut cfg = cfg;
    let ds = if cfg.guidance.mode == GuidanceMode::Oracle || cfg.train.seen.is_empty() {
        Some(cfg.open_dataset()?)
    } else {
        None
    };
    if let Some(d) = &ds {
        cfg.resolve_prompts(d);
    }
    let resume = match (resume, stage) {
        (Some(p), _) => Some(p),
        (None, StageArg::Two) => {
            let p = ckpt_path(&cfg, 1);
            if !p.is_file() {
                return Err(Failure::User(format!("stage 2 needs a stage-1 checkpoint; {} not found", p.display())));
            }
            Some(p)
        }
        _ => None,
    };
    let mut trainer = match resume {
        Some(p) => Checkpoint::load(&p)?.trainer()?,
        None => Trainer::new(cfg.train.clone(), Model::new(cfg.model.clone())?)?,
    };
    let mut guidance = cfg.open_guidance(ds)?;
    if matches!(stage, StageArg::One | StageArg::Both) && trainer.state.stage == 1 {
        run_stage(&mut trainer, guidance.as_mut(), &cfg, 1)?;
    }
    if matches!(stage, StageArg::Two | StageArg::Both) {
        trainer.begin_stage2();
        run_stage(&mut trainer, guidance.as_mut(), &cfg, 2)?;
    }
    Ok(())
}

fn write_mesh_for(cfg: &RunConfig, prompt: &str, checkpoint: Option<PathBuf>, out: &Path, grid: Option<usize>) -> Res<()> {
    let model = load_model(cfg, checkpoint)?;
    let grid = TetGrid::build(grid.unwrap_or(cfg.export.grid_resolution), model.cfg.heads.half_extent)?;
    let r = infer(&model, prompt, &grid)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?;
    }
    write_ply(&r.mesh, out)?;
    println!(
        "{}: {} vertices, {} faces, watertight {}, elapsed_ms {:.1}",
        out.display(),
        r.stats.vertices,
        r.stats.faces,
        r.stats.watertight(),
        r.elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}

fn render(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    view: usize,
    prompt: Option<String>,
    renderer: RendererArg,
    resolution: Option<usize>,
    out: Option<PathBuf>,
) -> Res<()> {
    let path = find_checkpoint(cfg, checkpoint)?;
    let ck = Checkpoint::load(&path)?;
    let model = ck.model()?;
    let ds = cfg.open_dataset()?;
    let prompt = prompt
        .or_else(|| ck.header.train.seen.first().cloned())
        .ok_or_else(|| Failure::User("no --prompt and the checkpoint has no prompts".into()))?;
    let res = resolution.unwrap_or(cfg.export.render_resolution);
    let v = ds.view(view)?;
    let cam = v.camera(ds.manifest.config.views.distance, res, res);
    let grid = TetGrid::build(cfg.export.grid_resolution, model.cfg.heads.half_extent)?;
    let r = match renderer {
        RendererArg::Volume => Renderer::Volume { samples: ck.header.train.stage1.samples },
        RendererArg::Mesh => Renderer::Mesh,
    };
    let img = render_view(&model, &prompt, &cam, r, &grid, ck.header.train.background)?;
    let out = out.unwrap_or_else(|| cfg.paths.output.join(format!("{}_v{view:03}.ppm", slug(&prompt))));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?;
    }
    write_ppm(&img, &out)?;
    let key = atom_core::guidance::TargetKey {
        view,
        mode: atom_core::shading::ShadingMode::Diffuse,
        background: ck.header.train.background,
    };
    match ds.composite(&prompt, &key, res, res) {
        Ok(t) => println!("{}: PSNR {:.2} dB against the stored target", out.display(), img.psnr(&t)?),
        Err(_) => println!("{}", out.display()),
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Res<()> {
    let reports = selfcheck::suite(seed)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        // all-zero probed derivatives would pass vacuously
        let ok = r.passed() && r.nonzero > 0;
        println!(
            "{:<28} entries {:>4} ({:>4} non-trivial)  max rel err {:.3e}  max abs diff {:.3e}  {}",
            r.name,
            r.checked,
            r.nonzero,
            r.max_rel_err,
            r.max_abs_diff,
            if ok { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_err);
    }
    println!("max relative error {worst:.3e}");
    if reports.iter().all(|r| r.passed() && r.nonzero > 0) {
        Ok(())
    } else {
        Err(Failure::Internal(format!("gradient check failed: max relative error {worst:.3e}")))
    }
}

fn bench(cfg: &RunConfig, runs: usize) -> Res<()> {
    let model = Model::<f32>::new(cfg.model.clone())?;
    let grid = TetGrid::build(cfg.export.grid_resolution, model.cfg.heads.half_extent)?;
    for parallel in [true, false] {
        par::set_enabled(parallel);
        let mut times = Vec::new();
        for _ in 0..runs.max(1) {
            let start = Instant::now();
            infer(&model, "a red cube", &grid)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        println!(
            "infer ({}, grid {}): median {:.1} ms over {} runs",
            if parallel && par::enabled() { "parallel" } else { "sequential" },
            cfg.export.grid_resolution,
            times[times.len() / 2],
            times.len()
        );
    }
    par::set_enabled(true);
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Dataset { op: DatasetOp::Build { out } } => {
            let root = out.unwrap_or_else(|| cfg.paths.dataset.clone());
            let m = dataset::build(&cfg.dataset, &root)?;
            let gaps = dataset::audit(&m, &root);
            if !gaps.is_empty() {
                return Err(Failure::Internal(format!("coverage audit failed: {}", gaps.join("; "))));
            }
            println!(
                "{}: {} seen and {} unseen prompts, {} views each",
                root.display(),
                m.seen().len(),
                m.unseen().len(),
                m.views.len()
            );
            Ok(())
        }
        Cmd::Train { stage, resume } => train(cfg, stage, resume),
        Cmd::Infer { prompt, checkpoint, out, grid } => {
            let out = out.unwrap_or_else(|| cfg.paths.output.join(format!("{}.ply", slug(&prompt))));
            write_mesh_for(&cfg, &prompt, checkpoint, &out, grid)
        }
        Cmd::Render { checkpoint, view, prompt, renderer, resolution, out } => {
            render(&cfg, checkpoint, view, prompt, renderer, resolution, out)
        }
        Cmd::Export { prompt, out, checkpoint, grid } => write_mesh_for(&cfg, &prompt, checkpoint, &out, grid),
        Cmd::Gradcheck { seed } => gradcheck(seed),
        Cmd::Bench { runs } => bench(&cfg, runs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::User(_) => 1,
                Failure::Internal(_) => 2,
            })
        }
    }
}
