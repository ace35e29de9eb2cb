use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ssan_core::config::{DataSpec, RunConfig, SEED_ENV};
use ssan_core::eval::{dump_attention, evaluate};
use ssan_core::model::{count_params, Model};
use ssan_core::training::trainer::{make_eval_batch, METRICS_FILE};
use ssan_core::training::{make_toy_task, Dataset, Trainer};
use ssan_core::Error;

#[derive(Parser)]
#[command(name = "ssan", version, about = "Train, score and inspect SAN/SSAN sequence-to-sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured toy task, logging metrics and checkpoints to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ssan-run")]
        out: PathBuf,
        /// Continue from the state saved in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy-decode a data set and report CER.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Data spec such as `copy:n=200,seed=2`.
        #[arg(long)]
        data: String,
    },
    /// Print the parameter audit of a configuration.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Second configuration to compare against the first.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Export last-layer attention matrices of one utterance as CSV.
    DumpAttention {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Data spec; `index=K` picks the utterance (default 0).
        #[arg(long)]
        input: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(m)) => Failure::Usage(m.clone()),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        usage(e)
    }
}

fn usage(e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Usage(m),
        other => Failure::Runtime(other.into()),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("reading config {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text).map_err(usage)?;
    for o in &args.overrides {
        cfg.apply_override(o).map_err(usage)?;
    }
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> anyhow::Result<Model<f32>> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    model
        .load(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(model)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            cfg,
            seed,
            out,
            resume,
        } => {
            let mut c = load_config(&cfg)?;
            let env = std::env::var(SEED_ENV).ok();
            c.resolve_seed(seed, env.as_deref()).map_err(usage)?;
            c.validate().map_err(usage)?;
            let vocab = c.model.vocab_size;
            let data = Dataset {
                train: make_toy_task(&c.data.train.task(vocab)).map_err(usage)?,
                dev: make_toy_task(&c.data.dev.task(vocab)).map_err(usage)?,
            };
            let model = Model::new(c.model.clone(), c.train.seed).map_err(usage)?;
            let mut trainer = if resume {
                Trainer::resume(model, c.train.clone(), &out)
                    .with_context(|| format!("resuming from {}", out.display()))?
            } else {
                if out.join(METRICS_FILE).exists() {
                    return Err(Failure::Runtime(anyhow::anyhow!(
                        "{} already holds a run; pass --resume or choose another --out",
                        out.display()
                    )));
                }
                Trainer::new(model, c.train.clone()).map_err(usage)?
            };
            let summary = trainer.run(&data, Some(&out)).context("training failed")?;
            println!("steps: {}", summary.steps);
            if let Some(b) = summary.best_dev_loss {
                println!("best dev loss: {b}");
            }
            println!("early stopped: {}", summary.early_stopped);
            println!("output: {}", out.display());
        }
        Command::Eval { cfg, ckpt, data } => {
            let c = load_config(&cfg)?;
            c.validate().map_err(usage)?;
            let spec: DataSpec = data.parse().map_err(usage)?;
            let model = load_model(&c, &ckpt)?;
            let examples = make_toy_task(&spec.task(c.model.vocab_size)).map_err(usage)?;
            let report = evaluate(&model, &examples, c.train.batch_size, c.data.decode_max_len)
                .context("evaluation failed")?;
            println!("utterances: {}", report.utterances.len());
            println!(
                "edits: sub {} del {} ins {} over {} reference tokens",
                report.edits.sub, report.edits.del, report.edits.ins, report.reference_tokens
            );
            println!("cer: {:.2}%", report.cer());
            println!("token accuracy: {:.2}%", 100.0 * report.token_accuracy());
            println!("exact match: {:.2}%", 100.0 * report.exact_match());
        }
        Command::CountParams { cfg, compare } => {
            let a = load_config(&cfg)?;
            a.model.validate().map_err(usage)?;
            let audit_a = count_params(&a.model);
            println!("{audit_a}");
            if let Some(path) = compare {
                let b = load_config(&ConfigArgs {
                    config: path,
                    overrides: cfg.overrides.clone(),
                })?;
                b.model.validate().map_err(usage)?;
                let audit_b = count_params(&b.model);
                println!();
                println!("{audit_b}");
                let (ta, tb) = (audit_a.total as f64, audit_b.total as f64);
                println!();
                println!(
                    "relative reduction: {:.2}% ({} -> {})",
                    100.0 * (ta - tb) / ta,
                    audit_a.total,
                    audit_b.total
                );
            }
        }
        Command::DumpAttention {
            cfg,
            ckpt,
            input,
            out,
        } => {
            let c = load_config(&cfg)?;
            c.validate().map_err(usage)?;
            let spec: DataSpec = input.parse().map_err(usage)?;
            let index = spec.index.unwrap_or(0);
            if index >= spec.n {
                return Err(Failure::Usage(format!("index {index} is outside a data set of {}", spec.n)));
            }
            let model = load_model(&c, &ckpt)?;
            let examples = make_toy_task(&spec.task(c.model.vocab_size)).map_err(usage)?;
            let (fb, _) = make_eval_batch(&[&examples[index]], c.model.vocab_size)?;
            let paths = dump_attention(&model, &fb, c.data.decode_max_len, &out)
                .with_context(|| format!("writing attention matrices to {}", out.display()))?;
            for p in paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
