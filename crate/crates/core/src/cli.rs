//! The `qformer` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 any
//! other error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::analysis;
use crate::error::{Error, Result};
use crate::flops;
use crate::gradcheck;
use crate::model::{self, Model, ModelConfig};
use crate::synth::{self, Dataset, Split, SynthSpec};
use crate::train::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "qformer", version, about = "Quadrangle attention: training, checks and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes metrics.jsonl, best.ckpt and last.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, cross-entropy and penalty of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A split file, or a directory holding test.bin.
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all`, `ops`, `model`, or one op name.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic FLOP counts.
    Flops {
        /// Model or training config JSON, or a preset name.
        #[arg(long)]
        config: String,
        /// Input size as HxW; defaults to the configured image size.
        #[arg(long)]
        input: Option<String>,
    },
    /// Quadrangle geometry of every layer, window and head as JSON lines.
    ExportQuads {
        #[arg(long)]
        ckpt: PathBuf,
        /// A split file holding the image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer attention distance as JSON lines.
    AttnDistance {
        #[arg(long)]
        ckpt: PathBuf,
        /// A split file, or a directory holding test.bin.
        #[arg(long)]
        data: PathBuf,
        /// Number of leading images to average over.
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_split(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        Dataset::load(path.join(Split::Test.file_name()))
    } else {
        Dataset::load(path)
    }
}

fn check_size(model: &Model, data: &Dataset) -> Result<()> {
    let s = model.config().image_size;
    if data.height != s || data.width != s || model.config().in_chans != 1 {
        return Err(Error::Config(format!(
            "images are {}×{}×1, model expects {s}×{s}×{}",
            data.height,
            data.width,
            model.config().in_chans
        )));
    }
    Ok(())
}

/// Model configuration from a file (model or training config) or preset name.
pub fn resolve_model_config(arg: &str) -> Result<ModelConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        return ModelConfig::preset(arg).ok_or_else(|| {
            Error::Config(format!("`{arg}` is neither a file nor a preset ({})", ModelConfig::PRESETS.join(", ")))
        });
    }
    let text = fs::read_to_string(path)?;
    let cfg = match serde_json::from_str::<ModelConfig>(&text) {
        Ok(c) => c,
        Err(_) => TrainConfig::from_json(&text)?.model_config()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_input(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--input expects HxW, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Executes `cmd`, writing results to `out`.
pub fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, out: dir } => {
            let text = fs::read_to_string(&config)?;
            let cfg = TrainConfig::from_json(&text)?;
            let a = train::run(&cfg, &dir)?;
            let last = a.outcome.history.last().expect("at least one epoch");
            print_json(
                out,
                &json!({
                    "schema": train::LOG_SCHEMA,
                    "best_epoch": a.outcome.best_epoch,
                    "best_test_acc": a.outcome.best_test_acc(),
                    "final_test_acc": last.test_acc,
                    "metrics": a.metrics,
                    "best": a.best,
                    "last": a.last,
                }),
            )
        }
        Command::Eval { ckpt, data } => {
            let model = model::load(&ckpt)?;
            let data = load_split(&data)?;
            check_size(&model, &data)?;
            let m = train::evaluate(&model, &data, 64)?;
            print_json(out, &m)
        }
        Command::Gradcheck { target, seed } => {
            let mut reports = Vec::new();
            match target.as_str() {
                "all" => {
                    reports.extend(gradcheck::check_ops(None, seed)?);
                    reports.extend(gradcheck::check_model(gradcheck::model_check_config(), seed, 5)?);
                }
                "ops" => reports.extend(gradcheck::check_ops(None, seed)?),
                "model" => reports.extend(gradcheck::check_model(gradcheck::model_check_config(), seed, 5)?),
                op => reports.extend(gradcheck::check_ops(Some(op), seed)?),
            }
            for r in &reports {
                print_json(out, r)?;
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Flops { config, input } => {
            let cfg = resolve_model_config(&config)?;
            let input = match input {
                Some(s) => parse_input(&s)?,
                None => (cfg.image_size, cfg.image_size),
            };
            let step = cfg.patch_size << (cfg.num_stages() - 1);
            if input.0 % step != 0 || input.1 % step != 0 || input.0 == 0 || input.1 == 0 {
                return Err(Error::Config(format!("input {}x{} is not a multiple of {step}", input.0, input.1)));
            }
            serde_json::to_writer_pretty(&mut *out, &flops::count(&cfg, input))?;
            out.write_all(b"\n")?;
            Ok(())
        }
        Command::ExportQuads {
            ckpt,
            image,
            index,
            out: path,
        } => {
            let model = model::load(&ckpt)?;
            let data = Dataset::load(&image)?;
            check_size(&model, &data)?;
            if index >= data.len() {
                return Err(Error::Config(format!("--index {index} but the file holds {} images", data.len())));
            }
            let (x, _) = data.batch(&[index]);
            let recs = analysis::export_quads(&model, &x)?;
            match path {
                Some(p) => analysis::write_jsonl(&recs, io::BufWriter::new(fs::File::create(p)?)),
                None => analysis::write_jsonl(&recs, out),
            }
        }
        Command::AttnDistance { ckpt, data, count } => {
            let model = model::load(&ckpt)?;
            let data = load_split(&data)?;
            check_size(&model, &data)?;
            let idx: Vec<usize> = (0..count.min(data.len())).collect();
            if idx.is_empty() {
                return Err(Error::Config("no images to analyse".into()));
            }
            let (x, _) = data.batch(&idx);
            analysis::write_jsonl(&analysis::attention_distance(&model, &x)?, out)
        }
        Command::GenData { spec, out: dir } => {
            let spec: SynthSpec = read_json(&spec)?;
            let (tr, te) = synth::write_dataset(&spec, &dir)?;
            print_json(
                out,
                &json!({
                    "train": {"count": tr.len(), "sha256": tr.checksum()},
                    "test": {"count": te.len(), "sha256": te.checksum()},
                    "dir": dir,
                }),
            )
        }
    }
}

/// Parses arguments, runs, reports errors on stderr and returns the exit
/// code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(cli.command, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_input_sizes() {
        assert_eq!(parse_input("224x224").unwrap(), (224, 224));
        assert_eq!(parse_input("16X32").unwrap(), (16, 32));
        assert!(matches!(parse_input("224"), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
        assert_eq!(exit_code(&Error::MissingParameter("x".into())), 1);
    }

    #[test]
    fn subcommands_parse() {
        for args in [
            vec!["qformer", "train", "--config", "c.json", "--out", "o"],
            vec!["qformer", "eval", "--ckpt", "a", "--data", "b"],
            vec!["qformer", "gradcheck"],
            vec!["qformer", "gradcheck", "--target", "matmul", "--seed", "3"],
            vec!["qformer", "flops", "--config", "qformer-p-b", "--input", "224x224"],
            vec!["qformer", "export-quads", "--ckpt", "a", "--image", "b"],
            vec!["qformer", "attn-distance", "--ckpt", "a", "--data", "b"],
            vec!["qformer", "gen-data", "--spec", "s.json"],
        ] {
            Cli::try_parse_from(&args).unwrap();
        }
    }

    #[test]
    fn flops_preset_runs() {
        let mut buf = Vec::new();
        run(
            Command::Flops {
                config: "qformer-micro-p".into(),
                input: None,
            },
            &mut buf,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert!(v["ratio"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn unknown_preset_is_config_error() {
        let e = resolve_model_config("no-such-model").unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }
}
