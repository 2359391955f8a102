//! `rfctl`: synthesize datasets, train models and render reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rfctl_core::dataio::{read_dataset, write_dataset};
use rfctl_core::pipeline::{
    capture_set_digest, evaluate, pretrain, run_cnn_baseline, run_matrix, train_classifier, LabelSpace,
    RunManifest, RunSettings, TrainRun,
};
use rfctl_core::report::ReportBundle;
use rfctl_core::{CaptureSet, ClassifierHead, Error, ExperimentConfig, ModelKind, ModelState, Result, SetId};

const MODEL_FILE: &str = "model.ckpt";
const CLASSIFIER_FILE: &str = "classifier.ckpt";
const CLASSIFIER_META: &str = "classifier.json";
const PRETRAIN_META: &str = "pretrain.json";
const SETS_FILE: &str = "sets.json";

#[derive(Parser, Debug)]
#[command(name = "rfctl", version, about = "Contrastive domain adaptation for RF fingerprinting")]
struct Cli {
    /// Overrides every training seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON). Defaults to the desk-scale experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth,
    /// Window a dataset into capture sets and list them.
    MakeSets {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Contrastive pre-training on source (and target) frames.
    Pretrain {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source: SetId,
        /// Unlabeled target set. Omit for source-only pre-training.
        #[arg(long)]
        target: Option<SetId>,
    },
    /// Train a device classifier on a pre-trained encoder.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: SetId,
    },
    /// Evaluate a trained classifier on a target set.
    Eval {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: SetId,
    },
    /// Train and evaluate the supervised CNN baseline.
    Baseline {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source: SetId,
        #[arg(long)]
        target: SetId,
    },
    /// Run the full (pair, model, seed) grid and write a report bundle.
    Matrix {
        /// Dataset directory. Synthesized in memory from the config if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-render one or more result directories into a single bundle.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct PretrainMeta {
    model: ModelKind,
    source: SetId,
    target: Option<SetId>,
    seed: u64,
    epoch_losses: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    model: ModelKind,
    source: SetId,
    seed: u64,
    labels: LabelSpace,
    epoch_losses: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SetSummary {
    id: SetId,
    devices: Vec<usize>,
    frames: usize,
    transmission_ids: Vec<u64>,
    digest: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rfctl: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_run_seed(seed),
        None => cfg,
    })
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::invalid("--out is required for this command"))
}

/// Refuses an output directory that is, or sits inside, the dataset.
fn guard_output(data: &Path, out: &Path) -> Result<()> {
    let (Ok(d), Ok(o)) = (data.canonicalize(), absolute(out)) else {
        return Ok(());
    };
    if o.starts_with(&d) {
        return Err(Error::invalid(format!(
            "output {} lies inside the input dataset {}",
            out.display(),
            data.display()
        )));
    }
    Ok(())
}

fn absolute(p: &Path) -> std::io::Result<PathBuf> {
    // The output may not exist yet; resolve its closest existing ancestor.
    let mut existing = p.to_path_buf();
    let mut tail = Vec::new();
    while !existing.exists() {
        match existing.file_name() {
            Some(name) => tail.push(name.to_owned()),
            None => break,
        }
        if !existing.pop() {
            break;
        }
    }
    let base = if existing.as_os_str().is_empty() {
        std::env::current_dir()?
    } else {
        existing.canonicalize()?
    };
    Ok(tail.into_iter().rev().fold(base, |acc, n| acc.join(n)))
}

fn load_sets(cfg: &ExperimentConfig, data: &Path) -> Result<BTreeMap<SetId, CaptureSet>> {
    let raw = read_dataset(data)?;
    cfg.build_sets(&raw)
}

fn get_set(sets: &BTreeMap<SetId, CaptureSet>, id: SetId) -> Result<&CaptureSet> {
    sets.get(&id)
        .ok_or_else(|| Error::invalid(format!("capture set {id} is not in the dataset")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn settings(cfg: &ExperimentConfig) -> RunSettings {
    RunSettings {
        encoder: cfg.encoder.clone(),
        augment: cfg.augment.clone(),
        pretrain: cfg.pretrain.clone(),
        train: cfg.train.clone(),
    }
}

fn write_bundle(bundle: &ReportBundle, out: &Path) -> Result<()> {
    create_dir(out)?;
    for path in bundle.write(out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn config_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => {
            let out = out_dir(&cli)?;
            let raw = cfg.synthesize()?;
            let meta = write_dataset(out, &raw)?;
            write_json(&out.join("config.json"), &cfg)?;
            println!("wrote {} captures to {}", meta.captures.len(), out.display());
        }
        Command::MakeSets { data } => {
            let out = out_dir(&cli)?;
            guard_output(data, out)?;
            let sets = load_sets(&cfg, data)?;
            let summary: Vec<SetSummary> = sets
                .values()
                .map(|s| SetSummary {
                    id: s.id(),
                    devices: s.device_ids(),
                    frames: s.total_frames(),
                    transmission_ids: s.captures.iter().map(|c| c.transmission_id).collect(),
                    digest: capture_set_digest(s),
                })
                .collect();
            create_dir(out)?;
            write_json(&out.join(SETS_FILE), &summary)?;
            for s in &summary {
                println!("{} devices={} frames={}", s.id, s.devices.len(), s.frames);
            }
        }
        Command::Pretrain { data, source, target } => {
            let out = out_dir(&cli)?;
            guard_output(data, out)?;
            let sets = load_sets(&cfg, data)?;
            let src = get_set(&sets, *source)?;
            let (kind, tgt_frames) = match target {
                Some(t) => (ModelKind::Ctl, get_set(&sets, *t)?.unlabeled_frames()),
                None => (ModelKind::Ab, Vec::new()),
            };
            let pre = cfg.pretrain.for_kind(kind);
            let p = pretrain(&src.unlabeled_frames(), &tgt_frames, &cfg.encoder, &cfg.augment, &pre)?;
            create_dir(out)?;
            p.state.save(&out.join(MODEL_FILE))?;
            write_json(
                &out.join(PRETRAIN_META),
                &PretrainMeta {
                    model: kind,
                    source: *source,
                    target: *target,
                    seed: pre.seed,
                    epoch_losses: p.epoch_losses.clone(),
                },
            )?;
            println!(
                "{kind} pre-training done, final loss {:.6}",
                p.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train { data, checkpoint, source } => {
            let out = out_dir(&cli)?;
            guard_output(data, out)?;
            let sets = load_sets(&cfg, data)?;
            let state = ModelState::load(&checkpoint.join(MODEL_FILE))?;
            let pre: PretrainMeta = read_json(&checkpoint.join(PRETRAIN_META))?;
            let run = train_classifier(&state, &get_set(&sets, *source)?.labeled_frames(), &cfg.train)?;
            create_dir(out)?;
            run.state.save(&out.join(MODEL_FILE))?;
            run.classifier.save(&out.join(CLASSIFIER_FILE))?;
            write_json(
                &out.join(CLASSIFIER_META),
                &ClassifierMeta {
                    model: pre.model,
                    source: *source,
                    seed: run.seed,
                    labels: run.labels.clone(),
                    epoch_losses: run.epoch_losses.clone(),
                },
            )?;
            println!(
                "classifier trained on {source}, final loss {:.6}",
                run.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { data, model, target } => {
            let out = out_dir(&cli)?;
            guard_output(data, out)?;
            let sets = load_sets(&cfg, data)?;
            let meta: ClassifierMeta = read_json(&model.join(CLASSIFIER_META))?;
            let run = TrainRun {
                state: ModelState::load(&model.join(MODEL_FILE))?,
                classifier: ClassifierHead::load(&model.join(CLASSIFIER_FILE))?,
                labels: meta.labels,
                epoch_losses: meta.epoch_losses,
                seed: meta.seed,
            };
            let r = evaluate(&run, get_set(&sets, *target)?, meta.model, meta.seed, meta.source)?;
            println!("{} {}->{} accuracy {:.4}", r.model, r.source, r.target, r.accuracy);
            write_bundle(&ReportBundle::new(vec![r], None)?, out)?;
        }
        Command::Baseline { data, source, target } => {
            let out = out_dir(&cli)?;
            guard_output(data, out)?;
            let sets = load_sets(&cfg, data)?;
            let (src, tgt) = (get_set(&sets, *source)?, get_set(&sets, *target)?);
            let r = run_cnn_baseline(src, tgt, &cfg.encoder, &cfg.train)?;
            println!("CNN {}->{} accuracy {:.4}", r.source, r.target, r.accuracy);
            write_bundle(&ReportBundle::new(vec![r], None)?, out)?;
        }
        Command::Matrix { data } => {
            let out = out_dir(&cli)?;
            let sets = match data {
                Some(d) => {
                    guard_output(d, out)?;
                    load_sets(&cfg, d)?
                }
                None => cfg.build_sets(&cfg.synthesize()?)?,
            };
            let g = &cfg.grid;
            let results = run_matrix(&sets, &g.pairs, &g.models, &g.seeds, &settings(&cfg))?;
            for r in &results {
                println!("{} {}->{} seed {} accuracy {:.4}", r.model, r.source, r.target, r.seed, r.accuracy);
            }
            let manifest = RunManifest::new(config_value(&cfg), &g.seeds, &g.pairs, &g.models, &sets);
            write_bundle(&ReportBundle::new(results, Some(manifest))?, out)?;
        }
        Command::Report { inputs } => {
            let out = out_dir(&cli)?;
            let mut results = Vec::new();
            let mut manifest = None;
            for dir in inputs {
                let b = ReportBundle::read(dir)?;
                results.extend(b.results);
                manifest = manifest.or(b.manifest);
            }
            write_bundle(&ReportBundle::new(results, manifest)?, out)?;
        }
    }
    Ok(())
}
