//! CLI argument parsing and command dispatch.
//!
//! Every verb reads one declarative config file (all fields defaulted, so a
//! bare invocation works end to end on the toy corpus), applies flag
//! overrides, echoes the fully resolved configuration next to its outputs,
//! and exits nonzero with a one-line cause on failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DataSource, Mode, RunConfig, VisualEncoderKind};
use crate::dataset::toy::{generate_toy_corpus, toy_holdout_methods};
use crate::dataset::build_split;
use crate::error::{Error, Result};
use crate::manifest;
use crate::model::{explain, MSOCModel};
use crate::oc::OcHyper;
use crate::report;
use crate::train::{evaluate, run_seeds, train, ClipStore};
use crate::types::{BenchmarkManifest, Category, Split};

#[derive(Parser, Debug)]
#[command(name = "msoc", version, about = "Multi-stream audio-visual deepfake detection")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// TOML config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed: corpus + split seed for build-data, the training
    /// seed (single-run) elsewhere.
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest path (default: <data_dir>/manifest.txt).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint path (default: <out_dir>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for checkpoints, logs, and reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Decision mode: full fusion or the AV-branch-only ablation.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Visual encoder backbone.
    #[arg(long, value_enum)]
    visual_encoder: Option<VisualEncoderKind>,
    /// Disable the one-class loss terms (AVOC mode only).
    #[arg(long)]
    no_oc: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or ingest) a corpus and write a leakage-checked manifest.
    BuildData(CommonOpts),
    /// Train all branches and keep the best-validation-AUC checkpoint.
    Train(CommonOpts),
    /// Evaluate a checkpoint: accuracy tables, histograms, embeddings.
    Eval(CommonOpts),
    /// Print per-modality attribution for one sample.
    Explain {
        #[command(flatten)]
        opts: CommonOpts,
        /// Sample to explain (must exist in the manifest).
        sample_id: String,
    },
    /// Train and evaluate once per configured seed; aggregate accuracies.
    RunSeeds(CommonOpts),
}

/// Binary entry point; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildData(opts) => cmd_build_data(&load_config(&opts)?, &opts),
        Command::Train(opts) => cmd_train(&load_config(&opts)?, &opts),
        Command::Eval(opts) => cmd_eval(&load_config(&opts)?, &opts),
        Command::Explain { opts, sample_id } => {
            cmd_explain(&load_config(&opts)?, &opts, &sample_id)
        }
        Command::RunSeeds(opts) => cmd_run_seeds(&load_config(&opts)?, &opts),
    }
}

/// Load the config file (or defaults) and fold in the flag overrides.
fn load_config(opts: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out_dir) = &opts.out_dir {
        cfg.paths.out_dir = out_dir.clone();
    }
    if let Some(mode) = opts.mode {
        cfg.model.mode = mode;
    }
    if let Some(kind) = opts.visual_encoder {
        cfg.model.visual_encoder = kind;
    }
    if opts.no_oc {
        cfg.model.use_oc = false;
    }
    if let Some(seed) = opts.seed {
        cfg.data.toy.seed = seed;
        cfg.data.split.seed = seed;
        cfg.train.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_path(cfg: &RunConfig, opts: &CommonOpts) -> PathBuf {
    opts.manifest
        .clone()
        .unwrap_or_else(|| cfg.paths.data_dir.join("manifest.txt"))
}

fn checkpoint_path(cfg: &RunConfig, opts: &CommonOpts) -> PathBuf {
    opts.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join("model.ckpt"))
}

fn media_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("media")
}

/// One descriptive name for the configured model, used in report headers.
fn model_name(cfg: &RunConfig) -> String {
    let mut name = format!(
        "{}-{}",
        cfg.model.mode.as_str(),
        cfg.model.visual_encoder.as_str()
    );
    if !cfg.model.use_oc {
        name.push_str("-nooc");
    }
    name
}

fn training_seed(cfg: &RunConfig) -> u64 {
    cfg.train.seeds.first().copied().unwrap_or(0)
}

fn load_manifest(path: &Path) -> Result<BenchmarkManifest> {
    let m = manifest::load(path)?;
    let violations = m.validate();
    if !violations.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: manifest fails validation: {}",
            path.display(),
            violations[0]
        )));
    }
    Ok(m)
}

fn cmd_build_data(cfg: &RunConfig, opts: &CommonOpts) -> Result<()> {
    let media = media_dir(cfg);
    let manifest_file = manifest_path(cfg, opts);
    // Idempotent rebuild: clear previous outputs so a failed run can't leave
    // a stale mix, and remove partial outputs again on any error.
    let clear = || -> Result<()> {
        if media.exists() {
            std::fs::remove_dir_all(&media).map_err(|e| Error::io(media.clone(), e))?;
        }
        if manifest_file.exists() {
            std::fs::remove_file(&manifest_file)
                .map_err(|e| Error::io(manifest_file.clone(), e))?;
        }
        Ok(())
    };
    clear()?;
    let built = build_data_inner(cfg, &manifest_file, &media);
    if built.is_err() {
        let _ = clear();
        return built;
    }
    cfg.write_resolved(&cfg.paths.data_dir)?;
    let m = manifest::load(&manifest_file)?;
    println!("wrote {} ({} records)", manifest_file.display(), m.entries.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        let n = m.records(split).count();
        println!("  {}: {n}", split.as_str());
    }
    Ok(())
}

fn build_data_inner(cfg: &RunConfig, manifest_file: &Path, media: &Path) -> Result<()> {
    std::fs::create_dir_all(media).map_err(|e| Error::io(media.to_path_buf(), e))?;
    let (corpus, holdout) = match cfg.data.source {
        DataSource::Toy => {
            let corpus = generate_toy_corpus(&cfg.data.toy, &cfg.frontend, media)?;
            // The toy corpus defines its own holdout tags (styles, the
            // reserved combination, and the shift); the configured
            // split.holdout_methods list applies to external corpora.
            (corpus, toy_holdout_methods(&cfg.data.toy))
        }
        DataSource::Corpus => {
            return Err(Error::Config(
                "external corpus ingestion needs a metadata adapter; \
                 point data.corpus at a prepared manifest instead"
                    .into(),
            ));
        }
    };
    let mut split_spec = cfg.data.split.clone();
    split_spec.holdout_methods = holdout;
    let built = build_split(&corpus, &split_spec)?;
    manifest::save(&built, manifest_file)
}

fn cmd_train(cfg: &RunConfig, opts: &CommonOpts) -> Result<()> {
    let m = load_manifest(&manifest_path(cfg, opts))?;
    let store = ClipStore::load(&m, &media_dir(cfg), &cfg.frontend, &[Split::Train, Split::Val])?;
    let seed = opts.seed.unwrap_or_else(|| training_seed(cfg));
    let hyper = OcHyper::new(cfg.train.alpha, cfg.train.m0, cfg.train.m1)?;
    let mut model = MSOCModel::new(&cfg.model, hyper, seed);
    let summary = train(&m, &store, &mut model, &cfg.train, &cfg.frontend, seed)?;

    let out_dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.clone(), e))?;
    let ckpt = checkpoint_path(cfg, opts);
    model.save(&ckpt, &cfg.config_hash())?;
    report::write_training_log(&out_dir.join("train.log.jsonl"), &summary)?;
    cfg.write_resolved(out_dir)?;
    println!(
        "trained {} for {} epochs; best epoch {} (val AUC {:.4})",
        model_name(cfg),
        cfg.train.epochs,
        summary.best_epoch,
        summary.best_val_auc
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, opts: &CommonOpts) -> Result<()> {
    let m = load_manifest(&manifest_path(cfg, opts))?;
    let ckpt = checkpoint_path(cfg, opts);
    let (model, _config_hash) = MSOCModel::load(&ckpt)?;
    let store = ClipStore::load(&m, &media_dir(cfg), &cfg.frontend, &[Split::Test])?;
    let eval = evaluate(&m, &store, &model, &cfg.frontend, cfg.train.batch_size)?;

    for cat in Category::TEST_SETS {
        if eval.accuracy_for(cat).is_none() {
            eprintln!("warning: {} absent from manifest; skipped", cat.as_str());
        }
    }

    let out_dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.clone(), e))?;
    let name = model_name(cfg);
    let aggs = report::aggregate_single(&eval);
    let seeds = [training_seed(cfg)];
    report::write_accuracy_tables(out_dir, &aggs, &name, &seeds)?;
    report::write_decisions(out_dir, &eval)?;
    report::write_embeddings(out_dir, &eval)?;
    let figures = report::write_histograms(out_dir, &eval)?;
    cfg.write_resolved(out_dir)?;

    print!("{}", report::accuracy_table_pretty(&aggs, &name));
    println!(
        "branch AUC: audio {:.4}  visual {:.4}  av {:.4}",
        eval.branch_auc.audio, eval.branch_auc.visual, eval.branch_auc.av
    );
    println!("wrote {} figures under {}", figures.len(), out_dir.join("figures").display());
    Ok(())
}

fn cmd_explain(cfg: &RunConfig, opts: &CommonOpts, sample_id: &str) -> Result<()> {
    let m = load_manifest(&manifest_path(cfg, opts))?;
    let record = m
        .find(sample_id)
        .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))?;
    let (model, _) = MSOCModel::load(&checkpoint_path(cfg, opts))?;
    let store = ClipStore::load(&m, &media_dir(cfg), &cfg.frontend, &[record.split])?;
    let batch = store.batch(&[record], &cfg.frontend)?;
    let outputs = model.forward(&batch)?;
    let attribution = &explain(&outputs)[0];
    let decision = &crate::model::fuse(&outputs)[0];

    let verdict_word = |real: bool| if real { "real" } else { "fake" };
    println!("sample {sample_id} ({} / {})", record.category.as_str(), record.gen_method);
    println!(
        "  audio:  score {:+.4} -> {}",
        outputs.audio_oc_score[0],
        verdict_word(attribution.audio_real)
    );
    println!(
        "  visual: score {:+.4} -> {}",
        outputs.visual_oc_score[0],
        verdict_word(attribution.visual_real)
    );
    println!("  av:     p(real) {:.4}", attribution.av_real_prob);
    let verdict = match model.mode {
        Mode::Msoc => decision.verdict,
        Mode::Avoc => u8::from(attribution.av_real_prob <= 0.5),
    };
    println!(
        "  fused score {:.4} -> verdict {} (label {})",
        decision.fused_score,
        verdict_word(verdict == 0),
        verdict_word(record.av_label == 0)
    );
    Ok(())
}

fn cmd_run_seeds(cfg: &RunConfig, opts: &CommonOpts) -> Result<()> {
    let m = load_manifest(&manifest_path(cfg, opts))?;
    let store = ClipStore::load(
        &m,
        &media_dir(cfg),
        &cfg.frontend,
        &[Split::Train, Split::Val, Split::Test],
    )?;
    let rep = run_seeds(&m, &store, &cfg.model, &cfg.train, &cfg.frontend)?;

    let out_dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.clone(), e))?;
    let name = model_name(cfg);
    report::write_accuracy_tables(out_dir, &rep.per_category, &name, &cfg.train.seeds)?;
    for run in &rep.runs {
        report::write_training_log(
            &out_dir.join(format!("train-seed{}.log.jsonl", run.seed)),
            &run.summary,
        )?;
    }
    cfg.write_resolved(out_dir)?;

    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report::accuracy_table_pretty(&rep.per_category, &name));
    for run in &rep.runs {
        println!(
            "seed {}: best epoch {} (val AUC {:.4})",
            run.seed, run.summary.best_epoch, run.summary.best_val_auc
        );
    }
    Ok(())
}
