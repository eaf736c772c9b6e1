//! `biaffine`: train, fine-tune, run and evaluate the parser, and drive the
//! synthetic transfer experiment.
//!
//! Config files are plain text, one `key=value` per line, `#` starts a
//! comment. Values given as flags override the file, which overrides the
//! built-in defaults.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser as ClapParser, Subcommand};

use biaffine::checkpoint::{load_checkpoint, save_checkpoint};
use biaffine::conllu::{read_conllu, split_treebank, write_conllu, Treebank};
use biaffine::eval::attachment_scores;
use biaffine::exec::Execution;
use biaffine::gradcheck;
use biaffine::synth::{build_datasets, run_experiment, write_datasets, ExperimentConfig};
use biaffine::trainer::{finetune_with, train_with, EpochRecord, Observer, TrainConfig};

#[derive(ClapParser)]
#[command(name = "biaffine", version, about = "Biaffine dependency parser")]
struct Cli {
    /// Run on one thread even when built with the parallel feature.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a parser from scratch.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue training a checkpoint on new data.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Update only the scorer.
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Predict heads and relations for every sentence of a CoNLL-U file.
    Parse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Allow more than one token attached to the root.
        #[arg(long)]
        no_single_root: bool,
    },
    /// Attachment scores of a prediction against gold annotation.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        include_punct: bool,
    },
    /// Random train/dev partition of a treebank.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_dev: PathBuf,
    },
    /// Synthetic treebanks and the three-regime transfer experiment.
    Synth {
        #[command(subcommand)]
        action: SynthAction,
    },
    /// Finite-difference check of the training objective.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum SynthAction {
    /// Write the A, B-train, B-dev and C treebanks.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the data, train all regimes and report scores on C.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Epoch history on stdout, notices on stderr.
struct Progress {
    start: Instant,
}

impl Observer for Progress {
    fn epoch(&mut self, r: &EpochRecord) {
        println!(
            "epoch {:>3}  loss {:.4}  dev UAS {:.2}%  LAS {:.2}%  ({:.0}s)",
            r.epoch,
            r.train_loss,
            100.0 * r.dev_uas,
            100.0 * r.dev_las,
            self.start.elapsed().as_secs_f64()
        );
        let _ = std::io::stdout().flush();
    }

    fn notice(&mut self, message: &str) {
        eprintln!("{message}");
    }
}

fn progress() -> Progress {
    Progress { start: Instant::now() }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_treebank(path: &Path) -> Result<Treebank> {
    read_conllu(&read_text(path)?).with_context(|| format!("{}", path.display()))
}

fn write_treebank(tb: &Treebank, path: &Path) -> Result<()> {
    std::fs::write(path, write_conllu(tb)?).with_context(|| format!("cannot write {}", path.display()))
}

fn overlay_file(config: &mut TrainConfig, file: Option<&Path>) -> Result<()> {
    if let Some(path) = file {
        config.overlay(&read_text(path)?).with_context(|| format!("{}", path.display()))?;
    }
    Ok(())
}

fn experiment_config(file: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = file {
        cfg.overlay(&read_text(path)?).with_context(|| format!("{}", path.display()))?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn best_line(history: &[EpochRecord]) -> String {
    match history.iter().max_by(|a, b| a.dev_las.total_cmp(&b.dev_las).then(b.epoch.cmp(&a.epoch))) {
        Some(r) => format!("best epoch {}: dev UAS {:.2}% LAS {:.2}%", r.epoch, 100.0 * r.dev_uas, 100.0 * r.dev_las),
        None => "no epochs run".to_owned(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match cli.command {
        Command::Train { train, dev, out, config, seed } => {
            let mut cfg = TrainConfig::default();
            overlay_file(&mut cfg, config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let (train_tb, dev_tb) = (read_treebank(&train)?, read_treebank(&dev)?);
            let ck = train_with(&cfg, &train_tb, &dev_tb, exec, &mut progress())?;
            save_checkpoint(&ck, &out).with_context(|| format!("cannot write {}", out.display()))?;
            println!("{}", best_line(&ck.history));
        }
        Command::Finetune { base, train, dev, out, config, seed, freeze_encoder } => {
            let base_ck = load_checkpoint(&base).with_context(|| format!("{}", base.display()))?;
            let mut cfg = TrainConfig::finetune_from(&base_ck.config);
            overlay_file(&mut cfg, config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.freeze_encoder |= freeze_encoder;
            cfg.validate()?;
            let (train_tb, dev_tb) = (read_treebank(&train)?, read_treebank(&dev)?);
            let ck = finetune_with(&base_ck, &cfg, &train_tb, &dev_tb, exec, &mut progress())?;
            save_checkpoint(&ck, &out).with_context(|| format!("cannot write {}", out.display()))?;
            println!("{}", best_line(&ck.history));
        }
        Command::Parse { model, input, output, no_single_root } => {
            let ck = load_checkpoint(&model).with_context(|| format!("{}", model.display()))?;
            let tb = read_treebank(&input)?;
            let single_root = !no_single_root;
            eprintln!("decoding: {}", if single_root { "single root" } else { "unconstrained root" });
            let parsed = ck.parser.parse_treebank(&tb, single_root, exec)?;
            write_treebank(&parsed, &output)?;
        }
        Command::Evaluate { gold, pred, include_punct } => {
            let m = attachment_scores(&read_treebank(&gold)?, &read_treebank(&pred)?, !include_punct)?;
            println!("UAS {:.1}% LAS {:.1}%", 100.0 * m.uas, 100.0 * m.las);
            println!("scored tokens {}, punctuation excluded {}", m.scored_tokens, m.excluded_punct);
        }
        Command::Split { input, fraction, seed, out_train, out_dev } => {
            let (train, dev) = split_treebank(&read_treebank(&input)?, fraction, seed)?;
            write_treebank(&train, &out_train)?;
            write_treebank(&dev, &out_dev)?;
            eprintln!("{} train, {} dev sentences", train.len(), dev.len());
        }
        Command::Synth { action } => match action {
            SynthAction::Generate { config, out_dir, seed } => {
                let cfg = experiment_config(config.as_deref(), seed)?;
                let data = build_datasets(&cfg)?;
                for path in write_datasets(&cfg, &data, &out_dir)? {
                    println!("{}", path.display());
                }
            }
            SynthAction::Experiment { config, out_dir, seed } => {
                let cfg = experiment_config(config.as_deref(), seed)?;
                let result = run_experiment(&cfg, Some(&out_dir), exec, &mut progress())?;
                print!("{}", result.report.text);
            }
        },
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            for case in gradcheck::run_suite(seed)? {
                let r = &case.report;
                println!(
                    "{:<4} {:<15} max rel err {:.3e} over {} entries (worst {}[{}])",
                    if case.passed() { "ok" } else { "FAIL" },
                    case.name,
                    r.max_relative_error,
                    r.entries_checked,
                    r.param,
                    r.index
                );
                failed += usize::from(!case.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient check(s) above tolerance {:e}", gradcheck::TOLERANCE);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
