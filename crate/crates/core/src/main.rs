//! Command-line front end.
//!
//! Verbosity is controlled by the single environment variable
//! `FINETAIL_LOG` (`quiet`, `info` — the default, or `debug`): progress
//! notes go to stderr, results to stdout, and failures exit nonzero with
//! a stage-named diagnostic.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

use finetail::datagen::{class_count_schedule, generate, AugmentPolicy, Dataset, DatasetConfig, Split};
use finetail::gradcheck::run_full_suite;
use finetail::harness::run::{evaluate_split, load_model_from_checkpoint};
use finetail::harness::{
    ensemble, head_tail_f1, pseudo_label_select, run_with_options, FusionRule, PredictionSet,
    RunConfig, RunManifest, RunOptions, TtaPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd)]
enum Verbosity {
    Quiet,
    Info,
    Debug,
}

fn verbosity() -> Verbosity {
    match std::env::var("FINETAIL_LOG").as_deref() {
        Ok("quiet") => Verbosity::Quiet,
        Ok("debug") => Verbosity::Debug,
        _ => Verbosity::Info,
    }
}

fn note(msg: &str) {
    if verbosity() >= Verbosity::Info {
        eprintln!("{msg}");
    }
}

#[derive(Parser)]
#[command(
    name = "finetail",
    version,
    about = "Desk-scale fine-grained long-tail classification lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to a file.
    Generate {
        /// Dataset config file (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the class-count histogram CSV here.
        #[arg(long)]
        counts_csv: Option<PathBuf>,
    },
    /// Train per a run config; writes manifest, checkpoint, predictions.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier stopped run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split and report macro-F1.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the prediction set CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate with test-time augmentation.
    Tta {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 5)]
        views: usize,
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
        #[arg(long, default_value_t = 0.0)]
        mask_prob: f64,
        #[arg(long, default_value_t = 1.0)]
        scale_lo: f64,
        #[arg(long, default_value_t = 1.0)]
        scale_hi: f64,
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        /// Apply the deterministic recenter transform to every view.
        #[arg(long, default_value_t = false)]
        recenter: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Promote top-logit unlabeled samples into the train split.
    Pseudo {
        /// Prediction CSV over the unlabeled split.
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fraction: f64,
        /// Where to write the augmented dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse prediction sets and optionally score against a dataset.
    Ensemble {
        /// Two or more prediction CSVs.
        #[arg(long, num_args = 1.., required = true)]
        preds: Vec<PathBuf>,
        #[arg(long, default_value = "max_logit")]
        rule: String,
        /// Score the fused predictions against this dataset's labels.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 20260810)]
        seed: u64,
    },
    /// Emit the ablation table and class histogram CSVs from manifests.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" | "test_unlabeled" => Ok(Split::TestUnlabeled),
        other => bail!("unknown split '{other}' (use train, val, or test)"),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            config,
            seed,
            out,
            counts_csv,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("[generate] reading {}", path.display()))?;
                    serde_json::from_str::<DatasetConfig>(&text).context("[generate] parsing config")?
                }
                None => DatasetConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let dataset = generate(&cfg).context("[generate]")?;
            dataset.write_file(&out).context("[generate] writing dataset")?;
            if let Some(path) = counts_csv {
                std::fs::write(&path, dataset.class_counts_csv())
                    .context("[generate] writing counts csv")?;
            }
            note(&format!(
                "generated {} samples, {} classes (schedule {:?})",
                dataset.len(),
                dataset.num_classes(),
                class_count_schedule(cfg.num_classes(), cfg.head_count, cfg.imbalance_ratio)
                    .context("[generate]")?
            ));
            println!("dataset written to {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            resume,
            output_dir,
        } => {
            let mut cfg = RunConfig::read_file(&config).context("[train]")?;
            if let Some(dir) = output_dir {
                cfg.output_dir = Some(dir);
            }
            note(&format!(
                "training {} ({} epochs, batch {})",
                cfg.model_id(),
                cfg.epochs,
                cfg.batch_size
            ));
            let manifest = run_with_options(
                &cfg,
                &RunOptions {
                    resume_from: resume,
                    stop_after_main_epochs: None,
                },
            )
            .context("[train]")?;
            print_manifest_summary(&manifest);
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let ds = Dataset::read_file(&dataset).context("[eval] reading dataset")?;
            let (run_cfg, params) =
                load_model_from_checkpoint(&checkpoint, &ds).context("[eval]")?;
            let (preds, report) =
                evaluate_split(&run_cfg, &params, &ds, parse_split(&split)?, None)
                    .context("[eval]")?;
            report_split(&ds, &preds, &report, &split, out.as_deref())?;
            Ok(())
        }
        Command::Tta {
            checkpoint,
            dataset,
            split,
            views,
            jitter,
            mask_prob,
            scale_lo,
            scale_hi,
            shift,
            recenter,
            out,
        } => {
            let ds = Dataset::read_file(&dataset).context("[tta] reading dataset")?;
            let (run_cfg, params) =
                load_model_from_checkpoint(&checkpoint, &ds).context("[tta]")?;
            let policy = TtaPolicy {
                num_views: views,
                augment: AugmentPolicy {
                    jitter_sigma: jitter,
                    mask_prob,
                    scale_range: (scale_lo, scale_hi),
                    crop_shift_sigma: shift,
                },
                recenter,
            };
            policy.augment.validate().context("[tta]")?;
            let (preds, report) =
                evaluate_split(&run_cfg, &params, &ds, parse_split(&split)?, Some(&policy))
                    .context("[tta]")?;
            report_split(&ds, &preds, &report, &split, out.as_deref())?;
            Ok(())
        }
        Command::Pseudo {
            preds,
            dataset,
            fraction,
            out,
        } => {
            let mut ds = Dataset::read_file(&dataset).context("[pseudo] reading dataset")?;
            let set = PredictionSet::read_csv(&preds).context("[pseudo] reading predictions")?;
            for &id in &set.sample_ids {
                if id >= ds.len() {
                    bail!("[pseudo] prediction sample id {id} outside the dataset");
                }
            }
            let picked = pseudo_label_select(&set, fraction).context("[pseudo]")?;
            for p in &picked {
                ds.labels[p.sample_id] = p.label;
                ds.split[p.sample_id] = Split::Train;
            }
            // The file invariant is that class_counts matches the labels.
            let mut counts = vec![0usize; ds.num_classes()];
            for &l in &ds.labels {
                counts[l] += 1;
            }
            ds.class_counts = counts;
            ds.write_file(&out).context("[pseudo] writing dataset")?;
            println!(
                "promoted {} samples into the train split; dataset written to {}",
                picked.len(),
                out.display()
            );
            Ok(())
        }
        Command::Ensemble {
            preds,
            rule,
            dataset,
            out,
        } => {
            let rule = match rule.as_str() {
                "max_logit" => FusionRule::MaxLogit,
                "mean_prob" => FusionRule::MeanProb,
                other => bail!("unknown fusion rule '{other}'"),
            };
            let sets: Vec<PredictionSet> = preds
                .iter()
                .map(|p| PredictionSet::read_csv(p))
                .collect::<Result<_, _>>()
                .context("[ensemble] reading predictions")?;
            let fused = ensemble(&sets, rule).context("[ensemble]")?;
            if let Some(path) = &out {
                fused.write_csv(path).context("[ensemble] writing fused csv")?;
            }
            if let Some(path) = dataset {
                let ds = Dataset::read_file(&path).context("[ensemble] reading dataset")?;
                let truth: Vec<usize> = fused
                    .sample_ids
                    .iter()
                    .map(|&i| ds.labels[i])
                    .collect();
                let report =
                    finetail::harness::macro_f1(&fused.predicted, &truth, ds.num_classes())
                        .context("[ensemble]")?;
                println!("ensemble macro-F1: {:.6}", report.macro_f1);
            } else {
                println!("fused {} prediction sets", sets.len());
            }
            Ok(())
        }
        Command::Gradcheck { trials, seed } => {
            note(&format!("running gradient suite ({trials} trials per check)"));
            let reports = run_full_suite(trials, seed);
            let mut all_pass = true;
            for report in &reports {
                println!("{report}");
                all_pass &= report.pass;
            }
            if !all_pass {
                bail!("[gradcheck] at least one gradient check failed");
            }
            Ok(())
        }
        Command::Report { manifests, out_dir } => {
            let parsed: Vec<RunManifest> = manifests
                .iter()
                .map(|p| RunManifest::read_file(p))
                .collect::<Result<_, _>>()
                .context("[report] reading manifests")?;
            finetail::harness::emit_reports(&parsed, &out_dir).context("[report]")?;
            println!(
                "wrote {} and {}",
                out_dir.join("ablation.csv").display(),
                out_dir.join("class_counts.csv").display()
            );
            Ok(())
        }
    }
}

fn report_split(
    ds: &Dataset,
    preds: &PredictionSet,
    report: &finetail::harness::F1Report,
    split: &str,
    out: Option<&std::path::Path>,
) -> Result<()> {
    if let Some(path) = out {
        preds.write_csv(path).context("[eval] writing predictions")?;
    }
    let mut train_counts = vec![0usize; ds.num_classes()];
    for i in 0..ds.len() {
        if ds.split[i] == Split::Train {
            train_counts[ds.labels[i]] += 1;
        }
    }
    let (head, tail) = head_tail_f1(report, &train_counts);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    println!(
        "{split} macro-F1: {:.6} (head {}, tail {}, {} samples)",
        report.macro_f1,
        fmt(head),
        fmt(tail),
        preds.len()
    );
    Ok(())
}

fn print_manifest_summary(manifest: &RunManifest) {
    if verbosity() >= Verbosity::Debug {
        for e in &manifest.per_epoch {
            eprintln!(
                "epoch {:>3}: train loss {:.4}, val macro-F1 {}",
                e.epoch,
                e.train_loss,
                e.val_macro_f1
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into())
            );
        }
    }
    if manifest.incomplete {
        println!("run stopped early (checkpoint saved); resume with --resume");
        return;
    }
    let fm = &manifest.final_metrics;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    println!(
        "final {} macro-F1: {:.6} (head {}, tail {})",
        fm.split,
        fm.macro_f1,
        fmt(fm.head_f1),
        fmt(fm.tail_f1)
    );
    if let Some(dir) = &manifest.config.output_dir {
        println!("outputs in {}", dir.display());
    }
}
