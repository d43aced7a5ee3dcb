// SPDX-License-Identifier: Apache-2.0

//! `ttalab`: experiment grids, theory checks and frozen-embedding prediction.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use ttalab::baselines::{Affinity, LameConfig};
use ttalab::data::{corrupt, generate_dataset, CorruptionKind, CorruptionSpec, ShapesToyConfig};
use ttalab::embed_io::{frozen_lame, frozen_predict, read_embeddings, write_with_manifest, DType, EmbeddingFile};
use ttalab::experiment::{emit_iteration_curve, parse_records, run_experiment, write_outputs, ExperimentConfig};
use ttalab::model::{pretrain_contrastive, zero_shot_accuracy, DualEncoderModel, ModelConfig, PretrainConfig};
use ttalab::par::Execution;
use ttalab::theory::{check_distance_cosine_identity, model_bundles, proposition_report};
use ttalab::tta::{build_instance_prompts, instance_topk, normalize_rows, zero_shot_probs};
use ttalab::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "ttalab", version, about = "Test-time adaptation laboratory for a toy dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid from a key=value config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Process batches on the calling thread only.
        #[arg(long)]
        sequential: bool,
    },
    /// Accuracy-vs-iteration CSV from a records file.
    Curve {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss-algebra checks on batches embedded by a checkpoint; prints JSON.
    CheckTheory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
    },
    /// Zero-shot (optionally LAME) predictions from embedding files; prints JSON.
    PredictFrozen {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        /// Also report LAME-refined predictions with this affinity (`full` or k).
        #[arg(long)]
        lame: Option<String>,
    },
    /// Contrastively pretrain a model on ShapesToy and save the checkpoint.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
    },
    /// Write image and prompt embeddings of a checkpoint as EMB1 files.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long)]
        corruption: Option<String>,
        #[arg(long, default_value_t = 5)]
        severity: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::Config(_) | Error::Io { .. }) {
        2
    } else {
        1
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            sequential,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::available()
            };
            let output = run_experiment(&cfg, exec)?;
            write_outputs(&out, &output)?;
            print!("{}", output.summary_csv);
            eprintln!("{} records written to {}", output.records.len(), out.display());
            Ok(())
        }
        Command::Curve { input, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::Io { path: input.clone(), source: e })?;
            let csv = emit_iteration_curve(&parse_records(&text)?)?;
            std::fs::write(&out, csv).map_err(|e| Error::Io { path: out.clone(), source: e })
        }
        Command::CheckTheory {
            checkpoint,
            batch_size,
            batches,
            top_k,
            dataset_seed,
        } => {
            let model = load_model(&checkpoint)?;
            let data = small_dataset(&model, dataset_seed, batch_size * batches)?;
            let idx: Vec<usize> = (0..(batch_size * batches).min(data.test.len())).collect();
            let images = data.test.images.select_rows(&idx);
            let bundles = model_bundles(&model, &images, &data.vocab, top_k, batch_size, &[1.0, 0.1, 0.01])?;
            let mut report = proposition_report(&bundles)?;
            report.distance_identity = Some(check_distance_cosine_identity(&bundles[0].1)?);
            println!("{}", report.to_json()?);
            Ok(())
        }
        Command::PredictFrozen {
            images,
            prompts,
            tau,
            lame,
        } => {
            let img = read_embeddings(&images)?;
            let txt = read_embeddings(&prompts)?;
            let pred = frozen_predict(&img, &txt, tau)?;
            let accuracy = img.labels.as_ref().map(|labels| {
                let hits = labels.iter().zip(&pred.top1).filter(|(&l, &p)| l >= 0 && l as usize == p).count();
                hits as f64 / labels.len().max(1) as f64
            });
            let mut body = json!({
                "count": img.count,
                "classes": txt.count,
                "top1": pred.top1,
                "accuracy": accuracy,
            });
            if let Some(a) = lame {
                let config = LameConfig {
                    affinity: a.parse::<Affinity>()?,
                    ..LameConfig::default()
                };
                let out = frozen_lame(&img, &pred, &config)?;
                let top1: Vec<usize> = (0..out.probs.rows()).map(|i| ttalab::tta::argmax(out.probs.row(i))).collect();
                body["lame"] = json!({ "top1": top1, "iterations": out.iterations, "converged": out.converged });
            }
            println!("{}", serde_json::to_string_pretty(&body)?);
            Ok(())
        }
        Command::Pretrain {
            out,
            seed,
            steps,
            lr,
            batch_size,
            dataset_seed,
        } => {
            let data = generate_dataset(&ShapesToyConfig {
                seed: dataset_seed,
                ..ShapesToyConfig::default()
            })?;
            let mut model = DualEncoderModel::new(ModelConfig::default(), &data.vocab, seed)?;
            let cfg = PretrainConfig {
                steps,
                lr,
                batch_size,
                seed,
            };
            let report = pretrain_contrastive(&mut model, &data.train, &data.vocab, &cfg)?;
            let acc = zero_shot_accuracy(&model, &data.test, &data.vocab)?;
            model.save(&out)?;
            let body = json!({
                "checkpoint": out.display().to_string(),
                "sha256": model.checkpoint_hash()?,
                "final_loss": report.losses.last(),
                "clean_top1": acc,
            });
            println!("{}", serde_json::to_string_pretty(&body)?);
            Ok(())
        }
        Command::Export {
            checkpoint,
            out,
            count,
            top_k,
            corruption,
            severity,
            seed,
            dataset_seed,
        } => export(&checkpoint, &out, count, top_k, corruption.as_deref(), severity, seed, dataset_seed),
    }
}

fn load_model(path: &Path) -> Result<DualEncoderModel> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint `{}` not found", path.display())));
    }
    DualEncoderModel::load(path)
}

/// A ShapesToy dataset with the checkpoint's class count and at least `n` test images.
fn small_dataset(model: &DualEncoderModel, seed: u64, n: usize) -> Result<ttalab::data::ShapesToy> {
    let num_classes = model.tokenizer().words().len().saturating_sub(ttalab::prompting::TEMPLATE_WORDS.len());
    let num_classes = if (1..=8).contains(&num_classes) { num_classes } else { 8 };
    generate_dataset(&ShapesToyConfig {
        num_classes,
        train_per_class: 1,
        test_per_class: n.div_ceil(num_classes).max(1),
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn export(
    checkpoint: &Path,
    out: &Path,
    count: usize,
    top_k: usize,
    corruption: Option<&str>,
    severity: u8,
    seed: u64,
    dataset_seed: u64,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let data = small_dataset(&model, dataset_seed, count)?;
    let idx: Vec<usize> = (0..count.min(data.test.len())).collect();
    let mut images = data.test.images.select_rows(&idx);
    if let Some(name) = corruption {
        let kind: CorruptionKind = name.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        let spec = CorruptionSpec::new(kind, severity).map_err(|e| Error::Config(e.to_string()))?;
        images = corrupt(&images, spec, seed)?;
    }
    let labels: Vec<i32> = idx.iter().map(|&i| data.test.labels[i] as i32).collect();
    let z_v = normalize_rows(&model.embed_images(&images)?)?;
    let class_unit = normalize_rows(&model.class_prompt_embeddings(&data.vocab)?)?;
    let probs = zero_shot_probs(&z_v, &class_unit, model.tau())?;
    let instance = normalize_rows(&model.embed_text(&build_instance_prompts(&probs, top_k, &data.vocab)?)?)?;
    let topk = instance_topk(&probs, top_k)?;
    let top1: Vec<usize> = topk.iter().map(|t| t[0]).collect();

    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let model_name = format!("ttalab:{}", &model.checkpoint_hash()?[..16]);
    let write = |name: &str, m: &Tensor, labels: Option<Vec<i32>>| -> Result<String> {
        let file = EmbeddingFile::new(m, labels, DType::F32)?;
        Ok(write_with_manifest(&out.join(name), &file, "ttalab export", &model_name)?.sha256)
    };
    let manifest = json!({
        "labels": labels,
        "top1": top1,
        "topk_ids": topk,
        "dim": z_v.cols(),
        "sha256": {
            "images.emb": write("images.emb", &z_v, Some(labels.clone()))?,
            "prompts.emb": write("prompts.emb", &class_unit, None)?,
            "instance_prompts.emb": write("instance_prompts.emb", &instance, None)?,
        },
    });
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}
