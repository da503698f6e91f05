//! `tdam`: synthesize data, analyze trajectories, train, evaluate and inspect
//! the detector from the command line.
//!
//! Exit codes: 0 success, 1 usage or contract error, 2 I/O error.
//!
//! Model settings resolve as command-line flag, then the `.cfg` stored next
//! to the checkpoint, then built-in defaults.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tdam_core::analysis::{analyze_manifest, class_summary, format_report};
use tdam_core::embedding_io::{read_embedding_file, Manifest};
use tdam_core::metrics::write_score_file;
use tdam_core::model::{load_checkpoint, save_checkpoint, Ablation, ModelConfig, TdamModel};
use tdam_core::pooling::PoolMode;
use tdam_core::synth::{gen_dataset, SplitCounts, SynthConfig};
use tdam_core::training::{evaluate, train, TrainConfig};
use tdam_core::Error;

#[derive(Parser, Debug)]
#[command(name = "tdam", version, about = "Partial-deepfake detection on frame embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/val/eval dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Utterances per split as train,val,eval.
        #[arg(long, default_value = "200,50,100", value_parser = parse_counts)]
        counts: SplitCounts,
        /// Embedding width.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Per-utterance directional statistics with a per-class summary.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        /// Report path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write the selected checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        /// Checkpoint to write; its config goes next to it as `.cfg`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Training log; defaults to `<ckpt stem>.log.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Input embedding width; read from the first utterance when omitted.
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Score a manifest and print `EER=...% AUC=...`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Score file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Print the spoof score of one embedding file.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Print per-frame confidences, optionally as a grayscale PGM strip.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
}

/// Overrides that do not change the parameter shapes.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Pooled sequence length.
    #[arg(long)]
    tprime: Option<usize>,
    #[arg(long, value_parser = parse_pool)]
    pool: Option<PoolMode>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ModelConfig) {
        if let Some(t) = self.tprime {
            cfg.t_prime = t;
        }
        if let Some(p) = self.pool {
            cfg.pool = p;
        }
    }
}

fn parse_counts(s: &str) -> Result<SplitCounts, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [train, val, eval] => Ok(SplitCounts { train, val, eval }),
        _ => Err(format!("expected train,val,eval counts, got {s:?}")),
    }
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pool(s: &str) -> Result<PoolMode, String> {
    s.parse::<PoolMode>().map_err(|e| e.to_string())
}

fn io_err(context: String, source: std::io::Error) -> Error {
    Error::Io { context, source }
}

/// Loads a checkpoint and applies the shape-preserving overrides.
fn open_model(ckpt: &Path, flags: &ModelFlags) -> Result<TdamModel, Error> {
    let mut model = load_checkpoint(ckpt)?;
    flags.apply(&mut model.config);
    model.config.validate()?;
    Ok(model)
}

fn log_path_for(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ckpt.with_file_name(format!("{stem}.log.csv"))
}

fn run(command: Command) -> Result<(), Error> {
    let mut stdout = std::io::stdout().lock();
    let mut emit = |text: &str| -> Result<(), Error> {
        stdout
            .write_all(text.as_bytes())
            .map_err(|e| io_err("writing to standard output".into(), e))
    };
    match command {
        Command::Synth { out, seed, counts, dim } => {
            let mut cfg = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            if let Some(d) = dim {
                cfg.dim = d;
            }
            let paths = gen_dataset(&cfg, counts, &out)?;
            emit(&format!(
                "wrote {} / {} / {} utterances to {}\n",
                counts.train,
                counts.val,
                counts.eval,
                out.display()
            ))?;
            emit(&format!("annotations: {}\n", paths.annotations.display()))?;
        }
        Command::Analyze { manifest, out } => {
            let m = Manifest::open(&manifest)?;
            let rows = analyze_manifest(&m)?;
            let report = format_report(&rows, &class_summary(&rows));
            match out {
                Some(path) => {
                    fs::write(&path, &report).map_err(|e| io_err(format!("writing {}", path.display()), e))?;
                    let footer: String = report.lines().filter(|l| l.starts_with('#')).map(|l| format!("{l}\n")).collect();
                    emit(&footer)?;
                }
                None => emit(&report)?,
            }
        }
        Command::Train {
            manifest,
            val_manifest,
            ckpt,
            out,
            seed,
            epochs,
            lr,
            dim,
            model,
            ablation,
        } => {
            let train_m = Manifest::open(&manifest)?;
            let val_m = Manifest::open(&val_manifest)?;
            let d_in = match dim {
                Some(d) => d,
                None => {
                    let first = train_m
                        .records
                        .first()
                        .ok_or_else(|| Error::Contract("training manifest is empty".into()))?;
                    train_m.load(first)?.width()
                }
            };
            let mut cfg = ModelConfig::standard(d_in);
            model.apply(&mut cfg);
            if let Some(a) = ablation {
                cfg.ablation = a;
            }
            cfg.validate()?;
            let defaults = TrainConfig::default();
            let tc = TrainConfig {
                seed,
                epochs: epochs.unwrap_or(defaults.epochs),
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                ..defaults
            };
            let outcome = train(&train_m, &val_m, &cfg, &tc, |r| {
                eprintln!(
                    "epoch {}: train_loss {:.5} val_loss {:.5} val_eer {:.4}",
                    r.epoch, r.train_loss, r.val_loss, r.val_eer
                )
            })?;
            save_checkpoint(&outcome.model, &ckpt)?;
            let log_path = out.unwrap_or_else(|| log_path_for(&ckpt));
            outcome.log.write(&log_path)?;
            emit(&format!(
                "selected epoch {} -> {}\n",
                outcome.log.selected_epoch().unwrap_or(0),
                ckpt.display()
            ))?;
        }
        Command::Eval {
            ckpt,
            manifest,
            out,
            model,
        } => {
            let model = open_model(&ckpt, &model)?;
            let (scores, report) = evaluate(&model, &Manifest::open(&manifest)?)?;
            if let Some(path) = out {
                write_score_file(&path, &scores)?;
            }
            emit(&format!("{report}\n"))?;
        }
        Command::Score { ckpt, input, model } => {
            let model = open_model(&ckpt, &model)?;
            let seq = read_embedding_file(&input)?;
            emit(&format!("{}\n", model.score(&seq)?))?;
        }
        Command::Heatmap {
            ckpt,
            input,
            pgm,
            model,
        } => {
            let model = open_model(&ckpt, &model)?;
            let seq = read_embedding_file(&input)?;
            let conf = model.export_confidence_map(&seq)?;
            let csv: Vec<String> = conf.iter().map(|c| c.to_string()).collect();
            emit(&format!("{}\n", csv.join(",")))?;
            if let Some(path) = pgm {
                fs::write(&path, pgm_strip(&conf)).map_err(|e| io_err(format!("writing {}", path.display()), e))?;
            }
        }
    }
    Ok(())
}

/// Binary PGM, one pixel row; darker pixels mark higher confidence.
fn pgm_strip(conf: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} 1\n255\n", conf.len()).into_bytes();
    out.extend(conf.iter().map(|&c| (255.0 * (1.0 - c.clamp(0.0, 1.0))).round() as u8));
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_parse() {
        assert_eq!(
            parse_counts("200,50,100").unwrap(),
            SplitCounts {
                train: 200,
                val: 50,
                eval: 100
            }
        );
        assert!(parse_counts("1,2").is_err());
        assert!(parse_counts("1,x,3").is_err());
    }

    #[test]
    fn pgm_header_and_pixels() {
        let img = pgm_strip(&[0.0, 1.0, 0.5]);
        assert_eq!(&img[..11], b"P5\n3 1\n255\n");
        assert_eq!(&img[11..], &[255, 0, 128]);
    }

    #[test]
    fn log_path_sits_next_to_checkpoint() {
        assert_eq!(log_path_for(Path::new("out/m.tdm")), Path::new("out/m.log.csv"));
    }
}
