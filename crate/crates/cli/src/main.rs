//! `vshadow`: command-line front end of the shadowing pipeline.
//!
//! Exit status: 0 on success, 1 on a domain error (or an evaluation with
//! unscored utterances), 2 on a usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vshadow::alignkit::Metric;
use vshadow::data::{Role, Split};
use vshadow::features::EmbedderKind;
use vshadow::pipeline::{self, EvalSource, PipelineConfig, PipelineError, TrainTarget};

#[derive(Parser, Debug)]
#[command(name = "vshadow", version, about = "Virtual native-speaker shadowing pipeline")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the manifest path.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic triplet corpus with audio and latent mel features.
    GenSynthetic {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        corruption_rate: Option<f64>,
    },
    /// Extract feature containers from audio.
    Extract {
        /// Roles to process (default: all three).
        #[arg(long = "role")]
        roles: Vec<Role>,
        /// Embedder kinds to run (default: mel, s3r, ppg_bnf).
        #[arg(long = "kind")]
        kinds: Vec<EmbedderKind>,
        /// Rewrite containers even when they are up to date.
        #[arg(long)]
        force: bool,
    },
    /// Train a phase (one_step, enc_ft_stage1, ...) or ppg_to_spec.
    Train {
        #[arg(long)]
        phase: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Convert a split with a checkpoint and synthesize audio.
    Convert(ConvertArgs),
    /// Score converted outputs (or the references) against L1_S1.
    Eval {
        /// Label of a converted system.
        #[arg(long, conflicts_with = "references", required_unless_present = "references")]
        system: Option<String>,
        /// Evaluate the L1_S1 references against themselves.
        #[arg(long)]
        references: bool,
        #[arg(long)]
        split: Option<Split>,
    },
    /// DTW disfluency profile between two feature files.
    Align {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        metric: Option<Metric>,
        /// Fixed threshold; defaults to the configured rule.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Checkpoint file; defaults to the phase's checkpoint.
    #[arg(long, required_unless_present = "phase")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    phase: Option<String>,
    /// Output label; defaults to the phase or checkpoint name.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value = "test")]
    split: Split,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &cli.manifest {
        cfg.paths.manifest = m.clone();
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<ExitCode, PipelineError> {
    match &cli.command {
        Command::GenSynthetic { n, corruption_rate } => {
            let mut cfg = load_config(&cli)?;
            if let Some(n) = n {
                cfg.synthetic.n = *n;
            }
            if let Some(r) = corruption_rate {
                cfg.synthetic.corruption_rate = *r;
            }
            print_json(&pipeline::gen_synthetic(&cfg)?);
        }
        Command::Extract {
            roles,
            kinds,
            force,
        } => {
            let cfg = load_config(&cli)?;
            let roles = if roles.is_empty() {
                Role::ALL.to_vec()
            } else {
                roles.clone()
            };
            let kinds = if kinds.is_empty() {
                vec![EmbedderKind::Mel, EmbedderKind::S3r, EmbedderKind::PpgBnf]
            } else {
                kinds.clone()
            };
            print_json(&pipeline::extract(&cfg, &roles, &kinds, *force)?);
        }
        Command::Train { phase, steps } => {
            let mut cfg = load_config(&cli)?;
            let target: TrainTarget = phase.parse()?;
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            print_json(&pipeline::train(&cfg, target)?);
        }
        Command::Convert(args) => {
            let cfg = load_config(&cli)?;
            let (checkpoint, default_label) = match (&args.checkpoint, &args.phase) {
                (Some(path), _) => {
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "converted".into());
                    (path.clone(), stem)
                }
                (None, Some(phase)) => {
                    let target: TrainTarget = phase.parse()?;
                    (pipeline::checkpoint_path(&cfg, target.name()), target.name().to_string())
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let label = args.label.clone().unwrap_or(default_label);
            print_json(&pipeline::convert(&cfg, &checkpoint, &label, args.split)?);
        }
        Command::Eval {
            system,
            references,
            split,
        } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = split {
                cfg.eval.split = *s;
            }
            let source = match (system, references) {
                (_, true) => EvalSource::References,
                (Some(label), false) => EvalSource::System(label.clone()),
                (None, false) => unreachable!("clap requires one of them"),
            };
            let files = pipeline::evaluate(&cfg, &source)?;
            print!("{}", files.report.to_table());
            eprintln!("wrote {} and {}", files.table.display(), files.records.display());
            if files.report.has_failures() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Align {
            a,
            b,
            metric,
            threshold,
            out,
        } => {
            let settings = if cli.config.is_file() {
                load_config(&cli)?.align
            } else {
                Default::default()
            };
            let profile = pipeline::align(
                a,
                b,
                metric.unwrap_or(settings.metric),
                *threshold,
                settings.threshold,
                out,
            )?;
            println!(
                "{} steps, {} flagged, threshold {:.6}",
                profile.path.len(),
                profile.num_flagged(),
                profile.threshold
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
