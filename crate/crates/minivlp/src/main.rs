//! CLI: corpus generation, pretraining, retrieval evaluation, mask dumps,
//! ablations, and the selfcheck gate.
//!
//! Exit codes: 0 success, 1 invariant/selfcheck failure, 2 config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use minivlp::ablate::{format_report, run_ablation, AblationAxis};
use minivlp::checkpoint;
use minivlp::config::TrainConfig;
use minivlp::datagen::{generate_corpus, read_corpus, write_corpus};
use minivlp::dump::dump_masks;
use minivlp::eval::evaluate_retrieval;
use minivlp::selfcheck::{all_pass, run_selfcheck};
use minivlp::train::{metrics_to_jsonl, Trainer};

#[derive(Parser)]
#[command(name = "minivlp", about = "desk-scale vision-language pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// JSON config supplying the model geometry (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a corpus; writes metrics.jsonl and model.ckpt into out_dir.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Recall@K retrieval on an eval corpus with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
        ks: Vec<usize>,
    },
    /// Dump per-pair attention summaries, mask indices, and P2 heatmaps.
    DumpMasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional trained checkpoint; defaults to a fresh init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the masking/grouping ablation grids and write a report.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which grids to run: masking, grouping, or both.
        #[arg(long, value_delimiter = ',', default_values_t = [String::from("masking"), String::from("grouping")])]
        axes: Vec<String>,
    },
    /// Invariant suite; exits nonzero if any check fails.
    Selfcheck,
}

fn config_exit(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {msg}");
    ExitCode::from(2)
}

fn failure_exit(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, items, views, seed, config } => {
            let model_cfg = match config {
                Some(p) => match TrainConfig::load(&p) {
                    Ok(c) => c.model,
                    Err(e) => return config_exit(e),
                },
                None => TrainConfig::default().model,
            };
            let corpus = match generate_corpus(items, views, &model_cfg, seed) {
                Ok(c) => c,
                Err(e) => return config_exit(e),
            };
            if let Err(e) = write_corpus(&out, &corpus, &model_cfg, seed) {
                return failure_exit(e);
            }
            println!("wrote {} pairs to {}", corpus.pairs.len(), out.display());
            ExitCode::SUCCESS
        }
        Command::Pretrain { config, data } => {
            let cfg = match TrainConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return config_exit(e),
            };
            let corpus = match read_corpus(&data) {
                Ok(c) => c,
                Err(e) => return failure_exit(e),
            };
            let out_dir = PathBuf::from(&cfg.out_dir);
            if let Err(e) = std::fs::create_dir_all(&out_dir) {
                return failure_exit(e);
            }
            let mut trainer = Trainer::new(cfg.clone());
            let metrics = match trainer.train(&corpus) {
                Ok(m) => m,
                Err(e) => return failure_exit(e),
            };
            if let Err(e) = std::fs::write(out_dir.join("metrics.jsonl"), metrics_to_jsonl(&metrics))
            {
                return failure_exit(e);
            }
            if let Err(e) = checkpoint::save(&out_dir.join("model.ckpt"), &cfg.model, &trainer.model)
            {
                return failure_exit(e);
            }
            let last = metrics.last().expect("at least one step");
            println!(
                "trained {} steps; final total loss {:.4}; artifacts in {}",
                metrics.len(),
                last.losses.total,
                out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Command::Eval { checkpoint: ckpt, data, ks } => {
            let (model_cfg, model) = match checkpoint::load(&ckpt) {
                Ok(x) => x,
                Err(e) => return failure_exit(e),
            };
            let corpus = match read_corpus(&data) {
                Ok(c) => c,
                Err(e) => return failure_exit(e),
            };
            match evaluate_retrieval(&model, &model_cfg, &corpus, &ks) {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).unwrap());
                    ExitCode::SUCCESS
                }
                Err(e) => failure_exit(e),
            }
        }
        Command::DumpMasks { config, data, checkpoint: ckpt, out, seed } => {
            let mut cfg = match TrainConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return config_exit(e),
            };
            let corpus = match read_corpus(&data) {
                Ok(c) => c,
                Err(e) => return failure_exit(e),
            };
            let mut trainer = Trainer::new(cfg.clone());
            if let Some(p) = ckpt {
                match checkpoint::load(&p) {
                    Ok((model_cfg, model)) => {
                        cfg.model = model_cfg;
                        trainer = Trainer::new(cfg);
                        trainer.model = model;
                    }
                    Err(e) => return failure_exit(e),
                }
            }
            match dump_masks(&trainer, &corpus, seed, &out) {
                Ok(()) => {
                    println!("dumped {} pairs to {}", corpus.pairs.len(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => failure_exit(e),
            }
        }
        Command::Ablate { config, data, eval_data, out, axes } => {
            let cfg = match TrainConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return config_exit(e),
            };
            let mut parsed = Vec::new();
            for a in &axes {
                match a.as_str() {
                    "masking" => parsed.push(AblationAxis::Masking),
                    "grouping" => parsed.push(AblationAxis::Grouping),
                    other => return config_exit(format!("unknown ablation axis {other:?}")),
                }
            }
            let corpus = match read_corpus(&data) {
                Ok(c) => c,
                Err(e) => return failure_exit(e),
            };
            let eval_corpus = match read_corpus(&eval_data) {
                Ok(c) => c,
                Err(e) => return failure_exit(e),
            };
            let rows = run_ablation(&cfg, &corpus, &eval_corpus, &parsed);
            let report = format_report(&rows);
            if let Err(e) = std::fs::write(&out, &report) {
                return failure_exit(e);
            }
            print!("{report}");
            ExitCode::SUCCESS
        }
        Command::Selfcheck => {
            let results = run_selfcheck();
            for r in &results {
                println!("[{}] {} — {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if all_pass(&results) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
