use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_kl::envs::Trajectory;
use latent_kl::format;
use latent_kl::harness::{self, ExperimentConfig, HarnessError, SolverKind, Solved, Trained};
use log::info;

#[derive(Parser)]
#[command(name = "latent-kl", about = "Latent KL control experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's solver: exact, vkl, avkl or vi.
    #[arg(long)]
    solver: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write an exploration rollout to OUT/trajectory.txt.
    Collect(Common),
    /// Fit the latent model to trajectories; writes OUT/model.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Solve the latent control problem; writes OUT/policy.json.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Not needed for value iteration.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Closed-loop episodes; writes OUT/report.json, episodes.csv, steps.csv.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Reaching sweep over joint counts; writes OUT/scaling.csv.
    EvalScaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8,9,10")]
        joints: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "exact,vkl,avkl")]
        solvers: Vec<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::read(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &common.solver {
        cfg.solver.kind = SolverKind::parse(s)?;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).map_err(|e| HarnessError::io(&common.out, e))?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn read_envelope<T: serde::de::DeserializeOwned>(path: &Path, kind: &str) -> Result<T, HarnessError> {
    format::read_file(path, kind).map_err(|e| HarnessError::io(path, e))
}

fn write_envelope<T: serde::Serialize>(path: &Path, kind: &str, value: &T) -> Result<(), HarnessError> {
    format::write_file(path, kind, value).map_err(|e| HarnessError::io(path, e))
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Collect(common) => {
            let cfg = load(&common)?;
            let traj = harness::collect(&cfg)?;
            let path = common.out.join("trajectory.txt");
            traj.write_file(&path).map_err(|e| HarnessError::io(&path, e))?;
            info!("wrote {} records to {}", traj.len(), path.display());
        }
        Command::Train { common, data } => {
            let cfg = load(&common)?;
            let trajs = data
                .iter()
                .map(|p| Trajectory::read_file(p).map_err(|e| HarnessError::Config(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            let trained = harness::train(&cfg, &trajs)?;
            write_envelope(&common.out.join("model.json"), "model", &trained)?;
            info!("trained in {:.2}s, {} iterations", trained.seconds, trained.trace.len().saturating_sub(1));
        }
        Command::Solve { common, model } => {
            let cfg = load(&common)?;
            let trained: Option<Trained> = model.as_deref().map(|p| read_envelope(p, "model")).transpose()?;
            let solved = harness::solve(&cfg, trained.as_ref())?;
            write_envelope(&common.out.join("policy.json"), "policy", &solved)?;
            info!("{} solved in {:.3}s", solved.solver.name(), solved.seconds);
        }
        Command::Run { common, model, policy } => {
            let cfg = load(&common)?;
            let trained: Option<Trained> = model.as_deref().map(|p| read_envelope(p, "model")).transpose()?;
            let solved: Solved = read_envelope(&policy, "policy")?;
            let report = harness::run(&cfg, trained.as_ref(), &solved)?;
            write_envelope(&common.out.join("report.json"), "run-report", &report)?;
            write_text(&common.out.join("episodes.csv"), &report.episodes_csv())?;
            write_text(&common.out.join("steps.csv"), &report.steps_csv())?;
            let s = &report.summary;
            println!("{} mean {:.4} ± {:.4} success {:?}", s.metric, s.mean, s.ci95, s.success_rate);
        }
        Command::EvalScaling { common, joints, solvers } => {
            let cfg = load(&common)?;
            let kinds = solvers.iter().map(|s| SolverKind::parse(s)).collect::<Result<Vec<_>, _>>()?;
            let rows = harness::eval_scaling(&cfg, &joints, &kinds)?;
            let csv = harness::scaling_csv(&rows, &cfg.hash());
            write_text(&common.out.join("scaling.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
