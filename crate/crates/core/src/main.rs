use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use minibert::cli::{
    cmd_compare, cmd_distill, cmd_evaluate, cmd_finetune, cmd_prepare, cmd_pretrain,
    exit_code_for, ExperimentConfig,
};

/// Desk-scale BERT-family encoders with a treebank sentiment benchmark.
#[derive(Parser)]
#[command(name = "minibert", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// Flat key=value configuration file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment seed; every random stream derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model preset (bert_base, bert_large, albert_base, distilbert_base,
    /// roberta_base, roberta_large).
    #[arg(long)]
    preset: Option<String>,
    /// Model scale: tiny (desk) or full (published dimensions).
    #[arg(long)]
    scale: Option<String>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        if let Some(seed) = self.seed {
            v.push(("seed".into(), seed.to_string()));
        }
        if let Some(out) = &self.out {
            v.push(("out_dir".into(), out.display().to_string()));
        }
        if let Some(preset) = &self.preset {
            v.push(("preset".into(), preset.clone()));
        }
        if let Some(scale) = &self.scale {
            v.push(("scale".into(), scale.clone()));
        }
        v
    }
}

fn push(v: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(value) = value {
        v.push((key.to_string(), value.to_string()));
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse treebank files, extract examples, and build the vocabulary.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.txt, dev.txt, test.txt.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Label granularity: 5 (fine-grained) or 2 (binary).
        #[arg(long)]
        granularity: Option<String>,
        /// Which nodes become examples: root or all.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        max_vocab: Option<usize>,
        #[arg(long)]
        min_freq: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Masked-LM (+ next-sentence) pretraining on a prepared dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Prepared dataset directory (from `prepare`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Corpus file override (one sentence per line, blank line between
        /// documents).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Force the next-sentence objective on or off.
        #[arg(long)]
        nsp: Option<bool>,
        /// Re-sample masking every epoch instead of once.
        #[arg(long)]
        dynamic_masking: Option<bool>,
    },
    /// Distill a pretrained teacher checkpoint into a smaller student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Teacher checkpoint (.mbrt with a masked-token head).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Weight of the soft teacher-matching term in [0, 1].
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        student_layers: Option<usize>,
    },
    /// Fine-tune a classifier on the prepared sentiment dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Start from a pretrained checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        /// Early-stop metric: dev_loss or dev_accuracy.
        #[arg(long)]
        metric: Option<String>,
        /// Learning-rate schedule: constant or linear_decay.
        #[arg(long)]
        lr_schedule: Option<String>,
        #[arg(long)]
        grad_accum: Option<usize>,
        /// Split that drives early stopping: dev (default) or test (which
        /// replicates the published protocol but leaks the test set).
        #[arg(long)]
        monitor: Option<String>,
    },
    /// Evaluate a run's checkpoint on a split and write confusion matrices.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directory (holds checkpoint_best.mbrt and config.txt).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Checkpoint override.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prepared dataset directory override.
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, dev, or test.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Summarize finished runs into comparison.csv / comparison.txt.
    Compare {
        /// Run directories (each holding a run.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the comparison files (default: current directory).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run() -> minibert::Result<()> {
    match Cli::parse().command {
        Command::Prepare {
            common,
            data,
            granularity,
            mode,
            max_vocab,
            min_freq,
            max_len,
        } => {
            let mut o = common.overrides();
            push(&mut o, "data_dir", data.map(|p| p.display().to_string()));
            push(&mut o, "granularity", granularity);
            push(&mut o, "mode", mode);
            push(&mut o, "max_vocab", max_vocab);
            push(&mut o, "min_freq", min_freq);
            push(&mut o, "max_len", max_len);
            cmd_prepare(&ExperimentConfig::load(common.config.as_deref(), &o)?)?;
        }
        Command::Pretrain {
            common,
            data,
            corpus,
            steps,
            batch_size,
            lr,
            nsp,
            dynamic_masking,
        } => {
            let mut o = common.overrides();
            push(&mut o, "data_dir", data.map(|p| p.display().to_string()));
            push(&mut o, "corpus", corpus.map(|p| p.display().to_string()));
            push(&mut o, "pretrain_steps", steps);
            push(&mut o, "pretrain_batch_size", batch_size);
            push(&mut o, "pretrain_lr", lr);
            push(&mut o, "nsp_enabled", nsp);
            push(&mut o, "dynamic_masking", dynamic_masking);
            cmd_pretrain(&ExperimentConfig::load(common.config.as_deref(), &o)?)?;
        }
        Command::Distill {
            common,
            data,
            teacher,
            temperature,
            alpha,
            steps,
            batch_size,
            lr,
            student_layers,
        } => {
            let mut o = common.overrides();
            push(&mut o, "data_dir", data.map(|p| p.display().to_string()));
            push(&mut o, "teacher", teacher.map(|p| p.display().to_string()));
            push(&mut o, "temperature", temperature);
            push(&mut o, "alpha", alpha);
            push(&mut o, "pretrain_steps", steps);
            push(&mut o, "pretrain_batch_size", batch_size);
            push(&mut o, "pretrain_lr", lr);
            push(&mut o, "student_layers", student_layers);
            cmd_distill(&ExperimentConfig::load(common.config.as_deref(), &o)?)?;
        }
        Command::Finetune {
            common,
            data,
            init,
            lr,
            batch_size,
            max_epochs,
            dropout,
            patience,
            metric,
            lr_schedule,
            grad_accum,
            monitor,
        } => {
            let mut o = common.overrides();
            push(&mut o, "data_dir", data.map(|p| p.display().to_string()));
            push(&mut o, "init_checkpoint", init.map(|p| p.display().to_string()));
            push(&mut o, "learning_rate", lr);
            push(&mut o, "batch_size", batch_size);
            push(&mut o, "max_epochs", max_epochs);
            push(&mut o, "dropout_p", dropout);
            push(&mut o, "early_stop_patience", patience);
            push(&mut o, "early_stop_metric", metric);
            push(&mut o, "lr_schedule", lr_schedule);
            push(&mut o, "grad_accum_steps", grad_accum);
            push(&mut o, "monitor", monitor);
            cmd_finetune(&ExperimentConfig::load(common.config.as_deref(), &o)?)?;
        }
        Command::Evaluate {
            common,
            run,
            checkpoint,
            data,
            split,
            batch_size,
        } => {
            let mut o = common.overrides();
            push(&mut o, "run_dir", run.map(|p| p.display().to_string()));
            push(&mut o, "checkpoint", checkpoint.map(|p| p.display().to_string()));
            push(&mut o, "data_dir", data.map(|p| p.display().to_string()));
            push(&mut o, "split", split);
            push(&mut o, "batch_size", batch_size);
            cmd_evaluate(&ExperimentConfig::load(common.config.as_deref(), &o)?)?;
        }
        Command::Compare { runs, out } => {
            cmd_compare(&runs, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
