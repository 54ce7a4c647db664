mod commands;
mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spvt::boundprop::BoundMethod;
use spvt::train::Toggles;

use crate::config::{EpsilonPolicy, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "spvt", version, about = "Train and certify camera-based lane-keeping controllers")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for verification and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum MethodArg {
    Ibp,
    Crown,
}

impl From<MethodArg> for BoundMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ibp => BoundMethod::Ibp,
            MethodArg::Crown => BoundMethod::Crown,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a dataset of state-image pairs.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the image generator and estimate its residual.
    TrainGenerator {
        /// Run directory (defaults to run.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset written by gen-data; rendered on the fly when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Best-fit error of generators with different latent sizes.
    ValidateAssumption {
        #[arg(long, default_value = "2,4,8,10")]
        dims: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Imitation-train the anchor controller.
    PretrainAnchor {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the anchor for verified safety.
    TrainSpvt {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_atd: bool,
        #[arg(long)]
        no_curriculum: bool,
        /// Role of the trained model (default spvt, with ablation suffixes).
        #[arg(long)]
        role: Option<String>,
        #[arg(long, default_value = "generator")]
        generator: String,
        #[arg(long, default_value = "anchor")]
        anchor: String,
    },
    /// Certify a controller over sampled initial states.
    Verify {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        epsilon_policy: Option<EpsilonPolicy>,
        /// Use this residual instead of the run's estimate.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Model role in the run directory, or a weight file.
        #[arg(long)]
        controller: Option<String>,
        /// Run directory holding the models (defaults to run.out_dir).
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out a controller on the rendered camera.
    Evaluate {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        controller: Option<String>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge certificates and reward tables into summary CSVs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_or_default(out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    out.unwrap_or_else(|| cfg.run.out_dir.clone())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    let force = cli.force;
    match cli.cmd {
        Command::GenData { n, seed, out } => commands::gen_data(&cfg, n, seed, &out, force),
        Command::TrainGenerator { out, data } => {
            commands::train_generator(&cfg, &out_or_default(out, &cfg), data.as_deref(), force)
        }
        Command::ValidateAssumption { dims, out, data } => {
            commands::validate_assumption_cmd(&cfg, &commands::parse_dims(&dims)?, &out, data.as_deref(), force)
        }
        Command::PretrainAnchor { out } => commands::pretrain_anchor_cmd(&cfg, &out_or_default(out, &cfg), force),
        Command::TrainSpvt {
            out,
            no_atd,
            no_curriculum,
            role,
            generator,
            anchor,
        } => {
            let out = out_or_default(out, &cfg);
            let args = commands::SpvtArgs {
                out: &out,
                toggles: Toggles {
                    atd: !no_atd,
                    curriculum: !no_curriculum,
                },
                role: role.as_deref(),
                generator: &generator,
                anchor: &anchor,
            };
            commands::train_spvt_cmd(&cfg, &args, force)
        }
        Command::Verify {
            n,
            delta,
            k,
            method,
            epsilon_policy,
            epsilon,
            controller,
            run,
            out,
        } => {
            let v = &mut cfg.verification;
            v.n = n.unwrap_or(v.n);
            v.delta = delta.unwrap_or(v.delta);
            v.k = k.unwrap_or(v.k);
            v.method = method.map_or(v.method, Into::into);
            v.epsilon_policy = epsilon_policy.unwrap_or(v.epsilon_policy);
            v.epsilon = epsilon.or(v.epsilon);
            if let Some(c) = controller {
                v.controller = c;
            }
            let run = out_or_default(run, &cfg);
            let out = out.unwrap_or_else(|| run.join(format!("cert-{}.json", file_stem(&cfg.verification.controller))));
            let args = commands::VerifyArgs {
                run: &run,
                controller: &cfg.verification.controller,
                out: &out,
                epsilon: cfg.verification.epsilon,
            };
            commands::verify_cmd(&cfg, &args, force).map(|_| ())
        }
        Command::Evaluate {
            episodes,
            steps,
            controller,
            run,
            out,
        } => {
            let e = &mut cfg.evaluation;
            e.episodes = episodes.unwrap_or(e.episodes);
            e.steps = steps.unwrap_or(e.steps);
            if let Some(c) = controller {
                e.controller = c;
            }
            cfg.validate()?;
            let run = out_or_default(run, &cfg);
            let out = out.unwrap_or_else(|| run.join(format!("rewards-{}.csv", file_stem(&cfg.evaluation.controller))));
            let args = commands::EvalArgs {
                run: &run,
                controller: &cfg.evaluation.controller,
                out: &out,
            };
            commands::evaluate_cmd(&cfg, &args, force)
        }
        Command::Report { runs, out } => commands::report_cmd(&runs, &out, force).map(|_| ()),
    }
}

/// A role, or the stem of a weight-file path.
fn file_stem(controller: &str) -> String {
    Path::new(controller)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(controller)
        .to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
