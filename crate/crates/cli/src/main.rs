//! `ihd`: every pipeline stage from synthetic data to semi-supervised rounds.

mod config;
mod zoo;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ihd_autodiff::{grad_check, GradCheckOptions, Tape, Var};
use ihd_core::dataset::{LabeledSeries, Manifest, Split};
use ihd_core::ensemble::{
    ensemble_average, rank_weights, threshold_snap, truth_from_manifest, weighted_logloss, MetricConfig,
    PredictionTable,
};
use ihd_core::kv;
use ihd_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use ihd_core::preprocess::{preprocess, read_batch, read_volume, write_batch, SeriesBatch};
use ihd_core::ssl::{selection_csv, ssl_round, Zoo, ZooMember};
use ihd_core::synth::{generate_dataset, labeled_series};
use ihd_core::training::{fit, history_csv, label_array, predict_table};

use config::RunConfig;
use zoo::ZooFile;

#[derive(Parser)]
#[command(name = "ihd", version, about = "Intracranial hemorrhage detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Unlabeled,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Validation => Some(Split::Validation),
            SplitArg::Unlabeled => Some(Split::Unlabeled),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: volumes, manifest and hidden answers.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window, crop and resize every volume of a dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Dataset directory with `manifest.csv` and `volumes/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a preprocessed dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Preprocessed dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Extra pseudo-labeled manifest whose series live in `--data`.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write head-2 probabilities for one split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the weighted log-loss of a prediction table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preds: PathBuf,
        /// Manifest with labels; unlabeled rows are ignored.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Rank-weighted average of the prediction tables listed in a zoo file.
    Ensemble {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Push confident probabilities to the clip bounds.
    Snap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long = "tau-h")]
        tau_h: Option<f64>,
        #[arg(long = "tau-l")]
        tau_l: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One semi-supervised cycle over a checkpoint zoo.
    SslRound {
        #[command(flatten)]
        common: Common,
        /// Zoo file listing checkpoints with ranks.
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "tau-s")]
        tau_s: Option<f64>,
        #[arg(long = "tau-p")]
        tau_p: Option<f64>,
        #[arg(long, default_value_t = 0)]
        round: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the model gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Print a checkpoint's configuration and parameter count.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Recorded next to outputs. The timestamp lives only here so that primary
/// outputs stay byte-identical across runs.
fn write_run_manifest(
    path: &Path,
    command: &str,
    common: Option<&Common>,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let show = |ps: &[&Path]| ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
    let text = kv::render([
        ("command", command.to_string()),
        (
            "config",
            common
                .and_then(|c| c.config.as_ref())
                .map_or_else(|| "-".to_string(), |p| p.display().to_string()),
        ),
        ("overrides", common.map_or_else(String::new, |c| c.sets.join(" "))),
        ("seed", seed.map_or_else(|| "-".to_string(), |s| s.to_string())),
        ("inputs", show(inputs)),
        ("outputs", show(outputs)),
        ("timestamp_unix", stamp.to_string()),
        ("version", env!("CARGO_PKG_VERSION").to_string()),
    ]);
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<file>.run` beside a file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".run");
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest_of(data: &Path) -> Result<Manifest> {
    Ok(Manifest::read(&data.join("manifest.csv"))?)
}

fn load_batches(data: &Path, ids: &[String]) -> Result<Vec<SeriesBatch>> {
    ids.iter().map(|id| Ok(read_batch(data, id)?)).collect()
}

fn load_labeled(data: &Path, manifest: &Manifest, split: Split) -> Result<Vec<LabeledSeries>> {
    let labels = manifest.labels_by_series();
    manifest
        .series_in(split)
        .iter()
        .map(|id| {
            let l = labels
                .get(id)
                .with_context(|| format!("series {id} of the {split} split has unlabeled slices"))?;
            Ok(LabeledSeries::new(read_batch(data, id)?, l.clone())?)
        })
        .collect()
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { common, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), common.seed, &common.sets)?;
            let spec = cfg.synth()?;
            let generated = generate_dataset(&spec, cfg.fractions()?, &out)?;
            write_run_manifest(&out.join("run.txt"), "synth", Some(&common), Some(spec.seed), &[], &[&out])?;
            println!(
                "{} series, {} slices written to {}",
                spec.num_series,
                generated.manifest.rows.len(),
                out.display()
            );
        }
        Command::Preprocess { common, data, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), common.seed, &common.sets)?;
            let pre = cfg.preprocess()?;
            let manifest = manifest_of(&data)?;
            create_dir(&out)?;
            for id in manifest.series_ids() {
                let volume = read_volume(&data.join("volumes"), &id)?;
                write_batch(&preprocess(&volume, &pre)?, &out)?;
            }
            manifest.write(&out.join("manifest.csv"))?;
            write(&out.join("preprocess.cfg"), &pre.to_kv())?;
            write_run_manifest(&out.join("run.txt"), "preprocess", Some(&common), None, &[&data], &[&out])?;
            println!("{} series preprocessed at {} px", manifest.series_ids().len(), pre.size);
        }
        Command::Train {
            common,
            data,
            pseudo,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), common.seed, &common.sets)?;
            let model_cfg = cfg.model(&ModelConfig::tiny())?;
            let train_cfg = cfg.train()?;
            let manifest = manifest_of(&data)?;
            let labeled = load_labeled(&data, &manifest, Split::Train)?;
            let validation = load_labeled(&data, &manifest, Split::Validation)?;
            let pseudo_series = match &pseudo {
                Some(p) => {
                    let m = Manifest::read(p)?;
                    m.labels_by_series()
                        .into_iter()
                        .map(|(id, l)| Ok(LabeledSeries::new(read_batch(&data, &id)?, l)?))
                        .collect::<Result<Vec<_>>>()?
                }
                None => Vec::new(),
            };
            let mut model = Model::new(model_cfg.clone())?;
            let report = fit(&mut model, &labeled, &pseudo_series, &validation, &train_cfg)?;
            create_dir(&out)?;
            save_checkpoint(&model, &out.join("model.ckpt"))?;
            write(&out.join("history.csv"), &history_csv(&report.history))?;
            write(&out.join("config.cfg"), &format!("{}{}", model_cfg.to_kv(), train_cfg.to_kv()))?;
            let mut inputs: Vec<&Path> = vec![&data];
            if let Some(p) = &pseudo {
                inputs.push(p);
            }
            write_run_manifest(&out.join("run.txt"), "train", Some(&common), Some(train_cfg.seed), &inputs, &[&out])?;
            let last = report.history.last().map_or(f64::NAN, |r| r.loss.total);
            println!("trained {} iterations, final loss {last:.6}", report.history.len());
            if let Some((it, v)) = report.best {
                println!("best validation weighted log-loss {v:.6} at iteration {it}");
            }
        }
        Command::Predict {
            checkpoint,
            data,
            split,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let manifest = manifest_of(&data)?;
            let ids = match split.split() {
                Some(s) => manifest.series_in(s),
                None => manifest.series_ids(),
            };
            let batches = load_batches(&data, &ids)?;
            let refs: Vec<&SeriesBatch> = batches.iter().collect();
            predict_table(&model, &refs)?.write(&out)?;
            write_run_manifest(&sidecar(&out), "predict", None, None, &[&checkpoint, &data], &[&out])?;
            println!("{} series predicted", ids.len());
        }
        Command::Evaluate {
            common,
            preds,
            truth,
            split,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), None, &common.sets)?;
            let mut metric = MetricConfig::default();
            metric.epsilon = cfg.kv.get_or("epsilon", metric.epsilon)?;
            let table = PredictionTable::read(&preds)?;
            let mut manifest = Manifest::read(&truth)?;
            if let Some(s) = split.split() {
                manifest = manifest.filter(|r| r.split == s);
            }
            let truth = truth_from_manifest(&manifest);
            if truth.is_empty() {
                bail!("the truth file has no labeled rows for this split");
            }
            println!("{:.6}", weighted_logloss(&table, &truth, &metric)?);
        }
        Command::Ensemble { zoo, out } => {
            let file = ZooFile::read(&zoo)?;
            let tables = file
                .entries
                .iter()
                .map(|(_, p)| Ok(PredictionTable::read(p)?))
                .collect::<Result<Vec<_>>>()?;
            let weights = member_weights(&file)?;
            let refs: Vec<&PredictionTable> = tables.iter().collect();
            ensemble_average(&refs, &weights)?.write(&out)?;
            let mut inputs: Vec<&Path> = vec![&zoo];
            inputs.extend(file.entries.iter().map(|(_, p)| p.as_path()));
            write_run_manifest(&sidecar(&out), "ensemble", None, None, &inputs, &[&out])?;
            for ((rank, p), w) in file.entries.iter().zip(&weights) {
                println!("rank {rank} weight {w:.6} {}", p.display());
            }
        }
        Command::Snap {
            common,
            preds,
            tau_h,
            tau_l,
            out,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), None, &common.sets)?;
            cfg.set_if("tau_h", tau_h);
            cfg.set_if("tau_l", tau_l);
            let snap = cfg.snap()?;
            let table = PredictionTable::read(&preds)?;
            threshold_snap(&table, &snap)?.write(&out)?;
            write_run_manifest(&sidecar(&out), "snap", Some(&common), None, &[&preds], &[&out])?;
        }
        Command::SslRound {
            common,
            zoo,
            data,
            tau_s,
            tau_p,
            round,
            out,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), common.seed, &common.sets)?;
            cfg.set_if("tau_s", tau_s);
            cfg.set_if("tau_p", tau_p);
            let ssl = cfg.ssl()?;
            let train_cfg = cfg.train()?;
            let file = ZooFile::read(&zoo)?;
            let members = file
                .entries
                .iter()
                .map(|(rank, p)| {
                    Ok(ZooMember {
                        name: p.display().to_string(),
                        rank: *rank,
                        model: load_checkpoint(p)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut zoo_models = Zoo::new(members, file.rank_tree()?)?;
            let manifest = manifest_of(&data)?;
            let labeled = load_labeled(&data, &manifest, Split::Train)?;
            let validation = load_labeled(&data, &manifest, Split::Validation)?;
            // Unlabeled series enter as images only.
            let unlabeled = load_batches(&data, &manifest.series_in(Split::Unlabeled))?;
            let result = ssl_round(&mut zoo_models, &labeled, &unlabeled, &validation, &ssl, &train_cfg, round)?;
            let report = &result.report;
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }

            create_dir(&out)?;
            let model_path = out.join("model.ckpt");
            save_checkpoint(&result.model, &model_path)?;
            result.ensemble.write(&out.join("ensemble.csv"))?;
            write(&out.join("selection.csv"), &selection_csv(std::slice::from_ref(report)))?;
            report.pseudo.to_manifest().write(&out.join("pseudo.csv"))?;
            write(&out.join("history.csv"), &history_csv(&report.fit.history))?;

            // Members keep their files; a newcomer is the checkpoint written above.
            let out_abs = fs::canonicalize(&out)?;
            let entries = zoo_models
                .members
                .iter()
                .map(|m| {
                    let path = if m.name.starts_with("ssl-round-") {
                        out_abs.join("model.ckpt")
                    } else {
                        PathBuf::from(&m.name)
                    };
                    (m.rank, path)
                })
                .collect();
            let next = ZooFile {
                entries,
                tree: file.tree.clone(),
            };
            write(&out.join("zoo.txt"), &next.render(&out_abs))?;

            let mut summary = String::new();
            writeln!(summary, "round: {round}")?;
            writeln!(summary, "selected: {} of {}", report.num_selected(), report.selection.len())?;
            writeln!(summary, "pseudo_prevalence: {}", kv::join(&report.prevalence))?;
            writeln!(summary, "member_losses: {}", kv::join(&report.member_losses))?;
            if let Some(l) = report.new_model_loss {
                writeln!(summary, "new_model_loss: {l}")?;
            }
            match &report.replacement {
                Some(r) => {
                    let shown = pathdiff::diff_paths(&r.replaced, &out_abs).unwrap_or_else(|| PathBuf::from(&r.replaced));
                    writeln!(summary, "replaced: {} (loss {})", shown.display(), r.replaced_loss)?
                }
                None => writeln!(summary, "replaced: none")?,
            }
            write(&out.join("report.txt"), &summary)?;
            write_run_manifest(
                &out.join("run.txt"),
                "ssl-round",
                Some(&common),
                Some(train_cfg.seed),
                &[&zoo, &data],
                &[&out],
            )?;
            print!("{summary}");
        }
        Command::Gradcheck { common, coords, tol } => {
            let cfg = RunConfig::load(common.config.as_deref(), common.seed, &common.sets)?;
            let seed = cfg.seed()?;
            let model = Model::new(cfg.model(&ModelConfig::tiny())?)?;
            let c = model.config();
            let mut spec = cfg.synth()?;
            spec.frame = spec.frame.max(c.resolution);
            spec.max_slices = spec.max_slices.min(4);
            spec.min_slices = spec.min_slices.min(spec.max_slices);
            let pre = ihd_core::preprocess::PreprocessConfig::with_size(c.resolution);
            let series = labeled_series(&spec, 0..1, &pre)?.remove(0);
            let targets = label_array(&series.labels);
            let weights = cfg.train()?.static_weights;
            let loss = |tape: &Tape, vars: &[Var]| -> ihd_core::Result<Var> {
                let out = model.forward(tape, vars, &series.batch)?;
                let l1 = tape.bce_with_logits(&out.logits.aux, &targets, &weights)?;
                let l2 = tape.bce_with_logits(&out.logits.main, &targets, &weights)?;
                Ok(tape.add(&l1, &l2)?)
            };
            let opts = GradCheckOptions {
                tol,
                max_coords: Some(coords),
                seed,
                ..GradCheckOptions::default()
            };
            let report = grad_check(&model.params, loss, &opts)?;
            println!(
                "checked {} coordinates, {} failures, max relative error {:e}, tolerance {tol:e}",
                report.checked,
                report.failures,
                report.max_rel_err()
            );
            println!("{}", if report.passed() { "PASS" } else { "FAIL" });
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Inspect { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            print!("{}", model.config().to_kv());
            println!("parameters: {}", model.num_parameters());
            println!("intra_parameters: {}", model.intra_parameters());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Weights per zoo entry, in file order.
fn member_weights(file: &ZooFile) -> Result<Vec<f64>> {
    let tree = match file.rank_tree()? {
        Some(t) => t,
        None => {
            let mut ranks: Vec<u32> = file.entries.iter().map(|e| e.0).collect();
            ranks.sort_unstable();
            let mut it = ranks.into_iter().map(ihd_core::ensemble::RankTree::Member);
            let first = it.next().context("empty zoo")?;
            it.fold(first, |acc, r| ihd_core::ensemble::RankTree::Group(vec![acc, r]))
        }
    };
    let leaves = tree.members();
    let weights = rank_weights(&tree)?;
    file.entries
        .iter()
        .map(|(rank, _)| {
            leaves
                .iter()
                .position(|r| r == rank)
                .map(|i| weights[i])
                .with_context(|| format!("rank {rank} is not in the tree"))
        })
        .collect()
}
