use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use pointpose_core::config::RunConfig;
use pointpose_core::evaluation::{self, DEFAULT_MAX_THRESHOLD};
use pointpose_core::pipeline;
use pointpose_core::selftest;
use pointpose_core::sequence::Manifest;
use pointpose_core::simulator::{self, SceneSpec};

const THREADS_VAR: &str = "POINTPOSE_THREADS";

#[derive(Parser)]
#[command(name = "pointpose", version, about = "Multi-object 6D pose tracking from point tracks and depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene file into a sequence directory.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the scene's noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track every object of a sequence.
    Track {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, `section.key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score tracker output against a simulated sequence.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// AUC upper threshold in meters.
        #[arg(long, default_value_t = DEFAULT_MAX_THRESHOLD)]
        max_threshold: f64,
    },
    /// Run the acceptance checks.
    Selftest {
        /// Include the long sequence-level criteria.
        #[arg(long)]
        full: bool,
        /// Run only these criteria.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
}

enum Failure {
    /// Bad input: usage, missing files, invalid config or scene.
    Invalid(String),
    Runtime(String),
}

fn invalid<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn setup_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Invalid(format!("{THREADS_VAR} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{what} directory {} does not exist", path.display())))
    }
}

fn simulate(scene: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec = SceneSpec::load(scene).map_err(invalid)?;
    if let Some(s) = seed {
        spec.noise.seed = s;
    }
    let manifest = simulator::write_sequence(&spec, out).map_err(runtime)?;
    info!("wrote {} frames of {} objects to {}", manifest.frames, manifest.object_ids.len(), out.display());
    Ok(())
}

fn track(seq: &Path, out: &Path, config: Option<&Path>, overrides: &[String]) -> Result<(), Failure> {
    let run = match config {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::from_toml_str("", overrides),
    }
    .map_err(invalid)?;
    let cfg = run.pipeline().map_err(invalid)?;
    require_dir(seq, "sequence")?;
    Manifest::read(seq).map_err(invalid)?;
    let summary = pipeline::run_sequence(seq, out, &cfg).map_err(runtime)?;
    info!("tracked {} frames in {:.1} s", summary.frames, summary.seconds);
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, out: &Path, max_threshold: f64) -> Result<(), Failure> {
    if !(max_threshold > 0.0) {
        return Err(Failure::Invalid(format!("max threshold must be positive, got {max_threshold}")));
    }
    require_dir(pred, "prediction")?;
    Manifest::read(gt).map_err(invalid)?;
    let report = evaluation::evaluate_dirs(pred, gt, max_threshold).map_err(runtime)?;
    evaluation::write_report(&report, out).map_err(runtime)?;
    print!("{}", report.render_text());
    Ok(())
}

fn run_selftest(full: bool, only: &[usize]) -> Result<(), Failure> {
    let ids: Vec<usize> = if !only.is_empty() {
        if let Some(bad) = only.iter().find(|&&i| !selftest::ALL.contains(&i)) {
            return Err(Failure::Invalid(format!("no criterion {bad}")));
        }
        only.to_vec()
    } else if full {
        selftest::ALL.to_vec()
    } else {
        selftest::QUICK.to_vec()
    };
    let mut failed = 0;
    for id in ids {
        let r = selftest::run(id);
        println!("{r}");
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        Err(Failure::Runtime(format!("{failed} criteria failed")))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = setup_threads().and_then(|()| match &cli.command {
        Command::Simulate { scene, out, seed } => simulate(scene, out, *seed),
        Command::Track { seq, out, config, overrides } => track(seq, out, config.as_deref(), overrides),
        Command::Evaluate { pred, gt, out, max_threshold } => evaluate(pred, gt, out, *max_threshold),
        Command::Selftest { full, only } => run_selftest(*full, only),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
