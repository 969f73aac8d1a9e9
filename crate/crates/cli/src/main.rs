use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use tcsfm::io;
use tcsfm::pipeline::run_pipeline;
use tcsfm::synth::{evaluate_against_gt, synthesize, SceneSpec};
use tcsfm::PipelineConfig;

/// File names written by `synth`.
const SCENE_FILE: &str = "scene.json";
const GT_FILE: &str = "ground_truth.json";

#[derive(Parser, Debug)]
#[command(name = "tcsfm", version, about = "Structure-from-motion with duplicate-structure disambiguation")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log stage progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic duplicate-structure scene and its ground truth.
    Synth(SynthArgs),
    /// Run the full pipeline on an ingest file.
    Run(RunArgs),
    /// Compare a model directory with ground truth.
    Eval(EvalArgs),
    /// Export a model directory as binary PLY.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene spec (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec mismatch ratio.
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    input: PathBuf,
    /// Pipeline config (TOML). Flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skip segmentation and disambiguation.
    #[arg(long)]
    no_disambiguation: bool,
    /// Scale the per-view track threshold by the sampled fraction.
    #[arg(long)]
    scale_min_tracks: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    ply: PathBuf,
    /// Append camera centres as red vertices.
    #[arg(long)]
    with_cameras: bool,
}

/// Failures that map to exit code 2 rather than 1.
enum Failure {
    Usage(anyhow::Error),
    Stage(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Stage(e.into())
    }
}

fn usage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn load_spec(args: &SynthArgs) -> Result<SceneSpec> {
    let mut spec = match &args.spec {
        Some(p) => io::read_scene_spec(p).with_context(|| format!("reading {}", p.display()))?,
        None => SceneSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(r) = args.rho {
        spec.rho = r;
    }
    spec.validate()?;
    Ok(spec)
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let spec = usage(load_spec(args))?;
    let scene = synthesize(&spec)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    io::write_ingest(&args.out.join(SCENE_FILE), &scene.views, &scene.matches)?;
    io::write_json(&args.out.join(GT_FILE), &scene.truth)?;
    println!(
        "{} views, {} matches ({} injected mismatches) -> {}",
        scene.views.len(),
        scene.matches.len(),
        scene.truth.injected.len(),
        args.out.display()
    );
    Ok(())
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if args.no_disambiguation {
        cfg.disambiguation = false;
    }
    if args.scale_min_tracks {
        cfg.scale_min_tracks = true;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = usage(load_config(args))?;
    let m = run_pipeline(&args.input, &cfg, &args.out)?;
    let c = &m.counts;
    println!(
        "registered {}/{} views, {} points, {} communities ({} ambiguous), {} sub-clusters, {} models -> {}",
        c.registered_views,
        c.views,
        c.points,
        c.communities,
        c.ambiguous_communities,
        c.sub_clusters,
        c.models,
        args.out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let model = io::read_model(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let gt = io::read_ground_truth(&args.gt).with_context(|| format!("reading {}", args.gt.display()))?;
    let metrics = evaluate_against_gt(&model, &gt)?;
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn export(args: &ExportArgs) -> Result<(), Failure> {
    let model = io::read_model(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let vertices = io::model_vertices(&model, args.with_cameras);
    io::write_ply_file(&args.ply, &vertices)?;
    info!("{} vertices -> {}", vertices.len(), args.ply.display());
    Ok(())
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        anyhow::ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
