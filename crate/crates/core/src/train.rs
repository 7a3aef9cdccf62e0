//! Training loop, model selection, and evaluation metrics.
//!
//! One run trains all three branches on a shared batch schedule, scores the
//! validation split after every epoch, and keeps the parameters from the
//! epoch with the best validation AUC. Evaluation pairs every fake test
//! category with the shared real test pool and reports paper-style accuracy
//! per category plus per-branch AUCs. [`run_seeds`] repeats the whole run
//! per seed and aggregates mean and sample standard deviation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, Array5};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Mode, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::frontend::{desync_shift, extract_mfcc, normalize_clip, prepare_frames, FrontendConfig};
use crate::media;
use crate::model::{fuse, fuse_avoc, LossBreakdown, MSOCModel};
use crate::oc::OcHyper;
use crate::types::{BenchmarkManifest, Category, ClipBatch, FusionDecision, SampleRecord, Split};

/// In-memory clip cache: audio features are stored fully processed (they are
/// tiny), visual frames stay as raw bytes and are scaled per batch (a full
/// float copy of every clip would not fit in memory).
pub struct ClipStore {
    features: BTreeMap<String, Array2<f32>>,
    frames: BTreeMap<String, Array4<u8>>,
}

impl ClipStore {
    /// Load and preprocess every record of the given splits.
    pub fn load(
        manifest: &BenchmarkManifest,
        media_root: &Path,
        fe: &FrontendConfig,
        splits: &[Split],
    ) -> Result<ClipStore> {
        let mut store = ClipStore {
            features: BTreeMap::new(),
            frames: BTreeMap::new(),
        };
        for &split in splits {
            for r in manifest.records(split) {
                store.insert(r, media_root, fe)?;
            }
        }
        Ok(store)
    }

    fn insert(&mut self, r: &SampleRecord, media_root: &Path, fe: &FrontendConfig) -> Result<()> {
        if self.features.contains_key(&r.sample_id) {
            return Ok(());
        }
        let (wave, shift) = media::load_waveform(media_root, &r.audio_ref)?;
        let mut feats = extract_mfcc(
            wave.as_slice().ok_or_else(|| {
                Error::Invalid(format!("{}: waveform not contiguous", r.sample_id))
            })?,
            fe,
        )?;
        normalize_clip(&mut feats);
        if let Some(k) = shift {
            feats = desync_shift(&feats, k)?;
        }
        let frames = media::load_frames(media_root, &r.visual_ref)?;
        let t = fe.clip_frames;
        if frames.shape()[0] < t {
            return Err(Error::Invalid(format!(
                "{}: clip has {} frames, need {t}",
                r.sample_id,
                frames.shape()[0]
            )));
        }
        // Keep exactly the frames the model consumes; audio features are
        // already cut to 4*T rows by the extractor configuration.
        let ta = fe.audio_frames();
        if feats.shape()[0] < ta {
            return Err(Error::Invalid(format!(
                "{}: {} audio frames, need {ta}",
                r.sample_id,
                feats.shape()[0]
            )));
        }
        let feats = feats.slice(ndarray::s![..ta, ..]).to_owned();
        let frames = frames.slice(ndarray::s![..t, .., .., ..]).to_owned();
        self.features.insert(r.sample_id.clone(), feats);
        self.frames.insert(r.sample_id.clone(), frames);
        Ok(())
    }

    /// Assemble a batch in record order.
    pub fn batch(&self, records: &[&SampleRecord], fe: &FrontendConfig) -> Result<ClipBatch> {
        if records.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let b = records.len();
        let ta = fe.audio_frames();
        let n_mfcc = fe.n_mfcc;
        let t = fe.clip_frames;
        let side = crate::frontend::FRAME_SIDE;
        let mut audio = Array3::<f32>::zeros((b, ta, n_mfcc));
        let mut visual = Array5::<f32>::zeros((b, t, 3, side, side));
        let mut audio_labels = Array1::<u8>::zeros(b);
        let mut visual_labels = Array1::<u8>::zeros(b);
        let mut av_labels = Array1::<u8>::zeros(b);
        for (i, r) in records.iter().enumerate() {
            let feats = self
                .features
                .get(&r.sample_id)
                .ok_or_else(|| Error::UnknownSample(r.sample_id.clone()))?;
            let frames = &self.frames[&r.sample_id];
            audio.index_axis_mut(ndarray::Axis(0), i).assign(feats);
            let prepared = prepare_frames(&frames.view(), fe)?;
            visual.index_axis_mut(ndarray::Axis(0), i).assign(&prepared);
            audio_labels[i] = r.audio_label;
            visual_labels[i] = r.visual_label;
            av_labels[i] = r.av_label;
        }
        ClipBatch::new(audio, visual, audio_labels, visual_labels, av_labels)
    }
}

/// Deterministic shuffled index order for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Distinct stream per epoch, reproducible across runs.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// 1-based index of the first maximum: the checkpoint the run keeps.
pub fn select_best_epoch(val_aucs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in val_aucs.iter().enumerate() {
        if v > val_aucs[best] {
            best = i;
        }
    }
    best + 1
}

/// Area under the ROC curve via the rank-sum formulation, oriented so that
/// higher scores mean "more real" (label 0). Ties contribute half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc input scores".into()));
    }
    let n_real = labels.iter().filter(|&&l| l == 0).count();
    let n_fake = labels.len() - n_real;
    if n_real == 0 || n_fake == 0 {
        return Err(Error::Degenerate(format!(
            "auc needs both classes, got {n_real} real / {n_fake} fake"
        )));
    }
    // Average ranks with midpoints over tie groups, then the Mann-Whitney
    // identity: AUC = (R_real - n_real(n_real+1)/2) / (n_real * n_fake).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_real = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group spanning ranks i+1..=j shares the mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] == 0 {
                rank_sum_real += avg_rank;
            }
        }
        i = j;
    }
    let n_real_f = n_real as f64;
    Ok((rank_sum_real - n_real_f * (n_real_f + 1.0) / 2.0) / (n_real_f * n_fake as f64))
}

/// One line of the training log; batch lines carry losses, epoch lines carry
/// the validation AUC. Serialized as line-delimited JSON.
#[derive(Debug, Clone, Serialize)]
pub struct LogEntry {
    pub kind: &'static str,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
}

/// What one training run produced, besides the mutated model.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// 1-based epoch whose parameters the model now holds.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Validation AUC per epoch, in order.
    pub val_aucs: Vec<f64>,
    /// Line-delimited JSON log records.
    pub log: Vec<String>,
}

/// The score the deployed system thresholds, used for both validation-based
/// model selection and reporting: the fused score in full-fusion mode, the
/// AV head's real probability in AVOC mode.
fn selection_scores(model: &MSOCModel, decisions: &[FusionDecision]) -> Vec<f64> {
    match model.mode {
        Mode::Msoc => decisions.iter().map(|d| f64::from(d.fused_score)).collect(),
        Mode::Avoc => decisions.iter().map(|d| f64::from(d.av_real_prob)).collect(),
    }
}

/// Forward a record list in batches, returning per-record fusion decisions.
fn score_records(
    model: &MSOCModel,
    store: &ClipStore,
    records: &[&SampleRecord],
    fe: &FrontendConfig,
    batch_size: usize,
) -> Result<Vec<FusionDecision>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch = store.batch(chunk, fe)?;
        let outputs = model.forward(&batch)?;
        out.extend(fuse(&outputs));
    }
    Ok(out)
}

/// Run the full schedule: every epoch feeds each shuffled batch to the audio,
/// visual, and audio-visual branches in turn, then scores the validation
/// split; the model ends up holding the parameters of the epoch with the
/// highest validation AUC (earliest on ties).
pub fn train(
    manifest: &BenchmarkManifest,
    store: &ClipStore,
    model: &mut MSOCModel,
    cfg: &TrainConfig,
    fe: &FrontendConfig,
    seed: u64,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_records: Vec<&SampleRecord> = manifest.records(Split::Train).collect();
    let val_records: Vec<&SampleRecord> = manifest.records(Split::Val).collect();
    if train_records.is_empty() {
        return Err(Error::Invalid("manifest has no train records".into()));
    }
    if val_records.is_empty() {
        return Err(Error::Invalid("manifest has no val records".into()));
    }
    let val_labels: Vec<u8> = val_records.iter().map(|r| r.av_label).collect();

    let mut opts = model.optimizers(cfg.lr);
    let mut log = Vec::new();
    let mut val_aucs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<(String, ndarray::ArrayD<f32>)>)> = None;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train_records.len(), seed, epoch);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let records: Vec<&SampleRecord> = chunk.iter().map(|&i| train_records[i]).collect();
            let batch = store.batch(&records, fe)?;
            let loss = model.train_step(&batch, &mut opts).map_err(|e| {
                Error::NonFinite(format!("epoch {epoch} batch {batch_idx}: {e}"))
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {batch_idx}: loss diverged"
                )));
            }
            log.push(
                serde_json::to_string(&LogEntry {
                    kind: "batch",
                    epoch,
                    batch: Some(batch_idx),
                    loss: Some(loss),
                    val_auc: None,
                })
                .expect("log entries always serialize"),
            );
        }

        let decisions = score_records(model, store, &val_records, fe, cfg.batch_size)?;
        let scores = selection_scores(model, &decisions);
        let epoch_auc = auc(&scores, &val_labels)?;
        val_aucs.push(epoch_auc);
        log.push(
            serde_json::to_string(&LogEntry {
                kind: "epoch",
                epoch,
                batch: None,
                loss: None,
                val_auc: Some(epoch_auc),
            })
            .expect("log entries always serialize"),
        );
        if best.as_ref().is_none_or(|(b, _)| epoch_auc > *b) {
            best = Some((epoch_auc, model.snapshot()));
        }
    }

    let (best_val_auc, snapshot) = best.expect("epochs >= 1 guarantees a best");
    model.restore(&snapshot)?;
    let best_epoch = select_best_epoch(&val_aucs);
    Ok(TrainSummary {
        best_epoch,
        best_val_auc,
        val_aucs,
        log,
    })
}

/// Accuracy and score bookkeeping for one test category.
#[derive(Debug, Clone, Serialize)]
pub struct CategoryEval {
    pub category: Category,
    /// Percent of correct fused verdicts over this category's fakes plus the
    /// shared real pool.
    pub accuracy: f64,
    pub n: usize,
}

/// Per-branch ranking quality over the whole test pool, each branch scored
/// against the labels of its own modality.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BranchAuc {
    pub audio: f64,
    pub visual: f64,
    pub av: f64,
}

/// Raw per-record evaluation outputs, for score histograms and attribution.
#[derive(Debug, Clone, Serialize)]
pub struct RecordEval {
    pub sample_id: String,
    pub category: Category,
    pub av_label: u8,
    pub audio_score: f64,
    pub visual_score: f64,
    pub av_real_prob: f64,
    pub fused_score: f64,
    pub verdict: u8,
}

/// Evaluation of a single trained model on the test splits.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub per_category: Vec<CategoryEval>,
    pub branch_auc: BranchAuc,
    /// Fusion decision per test record, keyed by sample id.
    pub decisions: Vec<(String, FusionDecision)>,
    /// Raw scores per record, row-aligned with `embeddings`.
    pub records: Vec<RecordEval>,
    /// Concatenated audio-visual branch embeddings, one row per record.
    pub embeddings: ndarray::Array2<f32>,
}

impl EvalRun {
    pub fn accuracy_for(&self, category: Category) -> Option<f64> {
        self.per_category
            .iter()
            .find(|c| c.category == category)
            .map(|c| c.accuracy)
    }
}

/// Score the test splits: each fake category is paired with the shared real
/// test pool for its accuracy; branch AUCs are computed once over all test
/// records against each branch's own modality labels.
pub fn evaluate(
    manifest: &BenchmarkManifest,
    store: &ClipStore,
    model: &MSOCModel,
    fe: &FrontendConfig,
    batch_size: usize,
) -> Result<EvalRun> {
    let test_records: Vec<&SampleRecord> = manifest.records(Split::Test).collect();
    if test_records.is_empty() {
        return Err(Error::Invalid("manifest has no test records".into()));
    }
    // One forward pass per chunk yields the raw per-branch scores (for AUC,
    // where binarized values would destroy the ranking), the fused
    // decisions, and the concatenated AV-branch embeddings for export.
    let mut decisions = Vec::with_capacity(test_records.len());
    let mut avoc_verdicts = Vec::with_capacity(test_records.len());
    let mut audio = Vec::with_capacity(test_records.len());
    let mut visual = Vec::with_capacity(test_records.len());
    let mut av = Vec::with_capacity(test_records.len());
    let mut emb_rows: Vec<f32> = Vec::new();
    let mut emb_dim = 0usize;
    for chunk in test_records.chunks(batch_size.max(1)) {
        let batch = store.batch(chunk, fe)?;
        let o = model.forward(&batch)?;
        audio.extend(o.audio_oc_score.iter().map(|&v| f64::from(v)));
        visual.extend(o.visual_oc_score.iter().map(|&v| f64::from(v)));
        av.extend(o.av_real_prob.iter().map(|&v| f64::from(v)));
        emb_dim = o.av_audio_emb.ncols() + o.av_visual_emb.ncols();
        for i in 0..chunk.len() {
            emb_rows.extend(o.av_audio_emb.row(i).iter());
            emb_rows.extend(o.av_visual_emb.row(i).iter());
        }
        avoc_verdicts.extend(fuse_avoc(&o));
        decisions.extend(fuse(&o));
    }
    let outputs = (audio, visual, av);
    let embeddings = ndarray::Array2::from_shape_vec((test_records.len(), emb_dim), emb_rows)
        .expect("row count fixed by the loop above");
    let audio_labels: Vec<u8> = test_records.iter().map(|r| r.audio_label).collect();
    let visual_labels: Vec<u8> = test_records.iter().map(|r| r.visual_label).collect();
    let av_labels: Vec<u8> = test_records.iter().map(|r| r.av_label).collect();
    let branch_auc = BranchAuc {
        audio: auc(&outputs.0, &audio_labels)?,
        visual: auc(&outputs.1, &visual_labels)?,
        av: auc(&outputs.2, &av_labels)?,
    };

    // The deployed verdict: three-way fusion in full mode, the AV head alone
    // in the AVOC ablation.
    let verdict_at = |i: usize| match model.mode {
        Mode::Msoc => decisions[i].verdict,
        Mode::Avoc => avoc_verdicts[i],
    };

    // Per-category accuracy: category fakes plus the shared real pool.
    let verdicts: BTreeMap<&str, u8> = test_records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sample_id.as_str(), verdict_at(i)))
        .collect();
    let mut per_category = Vec::new();
    for cat in Category::TEST_SETS {
        let members: Vec<&&SampleRecord> = test_records
            .iter()
            .filter(|r| r.category == cat || r.category == Category::Rarv)
            .collect();
        let fakes = members.iter().filter(|r| r.category == cat).count();
        if fakes == 0 {
            continue; // category absent from this manifest
        }
        let correct = members
            .iter()
            .filter(|r| verdicts[r.sample_id.as_str()] == r.av_label)
            .count();
        per_category.push(CategoryEval {
            category: cat,
            accuracy: 100.0 * correct as f64 / members.len() as f64,
            n: members.len(),
        });
    }

    let records = test_records
        .iter()
        .enumerate()
        .map(|(i, r)| RecordEval {
            sample_id: r.sample_id.clone(),
            category: r.category,
            av_label: r.av_label,
            audio_score: outputs.0[i],
            visual_score: outputs.1[i],
            av_real_prob: outputs.2[i],
            fused_score: f64::from(decisions[i].fused_score),
            verdict: verdict_at(i),
        })
        .collect();

    Ok(EvalRun {
        per_category,
        branch_auc,
        decisions: test_records
            .iter()
            .zip(decisions)
            .map(|(r, d)| (r.sample_id.clone(), d))
            .collect(),
        records,
        embeddings,
    })
}

/// Accuracy aggregate for one category over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct CategoryAggregate {
    pub category: Category,
    pub mean: f64,
    /// Sample standard deviation (n-1); 0.0 for a single seed.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// One seed's full outcome inside an aggregated report.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub summary: TrainSummary,
    pub eval: EvalRun,
}

/// Aggregated multi-seed evaluation.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_category: Vec<CategoryAggregate>,
    pub runs: Vec<SeedRun>,
    pub warnings: Vec<String>,
}

pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Train and evaluate one model per seed, then aggregate accuracies.
pub fn run_seeds(
    manifest: &BenchmarkManifest,
    store: &ClipStore,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fe: &FrontendConfig,
) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("seeds list is empty".into()));
    }
    let hyper = OcHyper::new(cfg.alpha, cfg.m0, cfg.m1)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut model = MSOCModel::new(model_cfg, hyper, seed);
        let summary = train(manifest, store, &mut model, cfg, fe, seed)?;
        let eval = evaluate(manifest, store, &model, fe, cfg.batch_size)?;
        runs.push(SeedRun {
            seed,
            summary,
            eval,
        });
    }
    let mut warnings = Vec::new();
    if cfg.seeds.len() == 1 {
        warnings.push(
            "single seed: standard deviation reported as 0.00 and not meaningful".to_string(),
        );
    }
    let mut per_category = Vec::new();
    for cat in Category::TEST_SETS {
        let per_seed: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.eval.accuracy_for(cat))
            .collect();
        if per_seed.is_empty() {
            continue;
        }
        let (mean, std) = mean_and_sample_std(&per_seed);
        per_category.push(CategoryAggregate {
            category: cat,
            mean,
            std,
            per_seed,
        });
    }
    Ok(EvalReport {
        per_category,
        runs,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auc_matches_worked_examples() {
        // Perfect separation.
        assert_abs_diff_eq!(
            auc(&[0.9, 0.1], &[0, 1]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // Adding a tied pair at 0.5/0.5: pairs are (0.9>0.1)=1, (0.9>0.5)=1,
        // (0.5>0.1)=1, (0.5=0.5)=0.5 -> 3.5/4.
        assert_abs_diff_eq!(
            auc(&[0.9, 0.1, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(),
            0.875,
            epsilon = 1e-12
        );
        // Constant scores: all ties.
        assert_abs_diff_eq!(
            auc(&[0.3, 0.3, 0.3, 0.3], &[0, 1, 0, 1]).unwrap(),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn auc_rejects_single_class_and_non_finite() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[0, 0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            auc(&[f64::NAN, 0.2], &[0, 1]),
            Err(Error::NonFinite(_))
        ));
        assert!(auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn auc_equals_pairwise_brute_force_on_random_vectors() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(2..=20);
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                // Coarse grid forces frequent ties.
                scores.push(f64::from(rng.random_range(0..5)) / 4.0);
                labels.push(rng.random_range(0..2) as u8);
            }
            if !labels.contains(&0) || !labels.contains(&1) {
                continue;
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..n {
                if labels[i] != 0 {
                    continue;
                }
                for j in 0..n {
                    if labels[j] != 1 {
                        continue;
                    }
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
            let expect = num / den;
            assert_abs_diff_eq!(auc(&scores, &labels).unwrap(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn best_epoch_is_first_argmax() {
        assert_eq!(select_best_epoch(&[0.6, 0.9, 0.7]), 2);
        assert_eq!(select_best_epoch(&[0.1, 0.5, 0.9]), 3);
        assert_eq!(select_best_epoch(&[0.7, 0.7, 0.7]), 1);
        assert_eq!(select_best_epoch(&[0.4]), 1);
    }

    #[test]
    fn epoch_order_is_deterministic_and_epoch_dependent() {
        let a = epoch_order(100, 7, 1);
        let b = epoch_order(100, 7, 1);
        assert_eq!(a, b);
        let c = epoch_order(100, 7, 2);
        assert_ne!(a, c);
        let mut sorted = c.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn mean_and_std_match_hand_computation() {
        let (mean, std) = mean_and_sample_std(&[80.0, 82.0, 78.0, 80.0]);
        assert_abs_diff_eq!(mean, 80.0, epsilon = 1e-12);
        assert_abs_diff_eq!(std, (8.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert!((std - 1.63).abs() < 0.005);

        let (mean, std) = mean_and_sample_std(&[91.5]);
        assert_abs_diff_eq!(mean, 91.5, epsilon = 1e-12);
        assert_eq!(std, 0.0);
    }

    use crate::config::{ModelConfig, SplitSpec, ToyCorpusSpec, VisualEncoderKind};
    use crate::dataset::toy::{generate_toy_corpus, toy_holdout_methods};
    use crate::dataset::build_split;

    struct TinyRun {
        _dir: tempfile::TempDir,
        manifest: BenchmarkManifest,
        store: ClipStore,
        fe: FrontendConfig,
        cfg: TrainConfig,
        model_cfg: ModelConfig,
    }

    fn tiny_run() -> TinyRun {
        let dir = tempfile::tempdir().unwrap();
        let fe = FrontendConfig {
            clip_frames: 4,
            ..FrontendConfig::default()
        };
        let spec = ToyCorpusSpec {
            n_per_category: 9,
            seed: 1,
            ..ToyCorpusSpec::default()
        };
        let corpus = generate_toy_corpus(&spec, &fe, dir.path()).unwrap();
        let split = SplitSpec {
            train_per_category: 3,
            val_per_category: 2,
            test_per_category: 2,
            holdout_methods: toy_holdout_methods(&spec),
            seed: 0,
        };
        let manifest = build_split(&corpus, &split).unwrap();
        let store = ClipStore::load(
            &manifest,
            dir.path(),
            &fe,
            &[Split::Train, Split::Val, Split::Test],
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seeds: vec![0],
            ..TrainConfig::default()
        };
        let model_cfg = ModelConfig {
            mode: Mode::Msoc,
            visual_encoder: VisualEncoderKind::Resnet,
            use_oc: true,
        };
        TinyRun {
            _dir: dir,
            manifest,
            store,
            fe,
            cfg,
            model_cfg,
        }
    }

    fn new_model(r: &TinyRun, seed: u64) -> MSOCModel {
        let hyper = OcHyper::new(r.cfg.alpha, r.cfg.m0, r.cfg.m1).unwrap();
        MSOCModel::new(&r.model_cfg, hyper, seed)
    }

    #[test]
    fn tiny_toy_run_trains_selects_evaluates_and_reproduces() {
        let r = tiny_run();
        let mut model = new_model(&r, 0);
        let summary = train(&r.manifest, &r.store, &mut model, &r.cfg, &r.fe, 0).unwrap();

        // Bookkeeping: 12 train records in batches of 8 -> 2 batches/epoch,
        // plus one epoch line each; two validation AUC entries.
        assert_eq!(summary.val_aucs.len(), 2);
        assert_eq!(summary.log.len(), 2 * 2 + 2);
        let epoch_lines = summary
            .log
            .iter()
            .filter(|l| l.contains("\"kind\":\"epoch\""))
            .count();
        assert_eq!(epoch_lines, 2);
        for line in &summary.log {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("epoch").is_some());
        }
        let best = summary
            .val_aucs
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(summary.best_val_auc, best);
        assert_eq!(
            summary.best_epoch,
            select_best_epoch(&summary.val_aucs)
        );

        let eval = evaluate(&r.manifest, &r.store, &model, &r.fe, r.cfg.batch_size).unwrap();
        assert_eq!(eval.per_category.len(), 4);
        for c in &eval.per_category {
            assert_eq!(c.n, 4, "{:?}: 2 fakes + 2 shared reals", c.category);
            assert!((0.0..=100.0).contains(&c.accuracy));
        }
        // Test pool: 4 categories x 2 fakes + 2 shared reals.
        assert_eq!(eval.decisions.len(), 10);

        // Determinism: a fresh identical run reproduces parameters bitwise.
        let mut model2 = new_model(&r, 0);
        let summary2 = train(&r.manifest, &r.store, &mut model2, &r.cfg, &r.fe, 0).unwrap();
        assert_eq!(summary.val_aucs, summary2.val_aucs);
        assert_eq!(model.snapshot(), model2.snapshot());
    }

    #[test]
    fn train_aborts_on_poisoned_parameters_with_location() {
        let r = tiny_run();
        let mut model = new_model(&r, 0);
        let mut snap = model.snapshot();
        // Poison a parameter with an unbroken path to the loss: the OC
        // centre feeds the score directly, with no rectifier in between
        // that could mask the NaN.
        let center = snap
            .iter_mut()
            .find(|(name, _)| name.contains("oc_center"))
            .expect("model has an OC centre");
        center.1.fill(f32::NAN);
        model.restore(&snap).unwrap();
        match train(&r.manifest, &r.store, &mut model, &r.cfg, &r.fe, 0) {
            Err(Error::NonFinite(msg)) => {
                assert!(msg.contains("epoch 1"), "missing location in: {msg}");
                assert!(msg.contains("batch 0"), "missing location in: {msg}");
            }
            other => panic!("expected NonFinite abort, got {other:?}"),
        }
    }

    /// Calibration helper, not a correctness gate: run with
    /// `cargo test -p msoc --lib bench_epoch -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn bench_epoch_timing() {
        let dir = tempfile::tempdir().unwrap();
        let fe = FrontendConfig {
            clip_frames: 8,
            ..FrontendConfig::default()
        };
        let spec = ToyCorpusSpec {
            n_per_category: 39,
            seed: 1,
            ..ToyCorpusSpec::default()
        };
        let t0 = std::time::Instant::now();
        let corpus = generate_toy_corpus(&spec, &fe, dir.path()).unwrap();
        println!("corpus gen ({} records): {:?}", corpus.len(), t0.elapsed());
        let split = SplitSpec {
            train_per_category: 20,
            val_per_category: 5,
            test_per_category: 10,
            holdout_methods: toy_holdout_methods(&spec),
            seed: 0,
        };
        let manifest = build_split(&corpus, &split).unwrap();
        let t0 = std::time::Instant::now();
        let store = ClipStore::load(
            &manifest,
            dir.path(),
            &fe,
            &[Split::Train, Split::Val, Split::Test],
        )
        .unwrap();
        println!("store load: {:?}", t0.elapsed());
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            seeds: vec![0],
            ..TrainConfig::default()
        };
        let model_cfg = ModelConfig {
            mode: Mode::Msoc,
            visual_encoder: VisualEncoderKind::Resnet,
            use_oc: true,
        };
        let hyper = OcHyper::new(cfg.alpha, cfg.m0, cfg.m1).unwrap();
        let mut model = MSOCModel::new(&model_cfg, hyper, 0);
        let t0 = std::time::Instant::now();
        let summary = train(&manifest, &store, &mut model, &cfg, &fe, 0).unwrap();
        println!(
            "1 epoch over {} train clips (batch 64): {:?}  val_auc={:.3}",
            20 * 4,
            t0.elapsed(),
            summary.val_aucs[0]
        );
        let t0 = std::time::Instant::now();
        let eval = evaluate(&manifest, &store, &model, &fe, cfg.batch_size).unwrap();
        println!("eval over {} records: {:?}", eval.decisions.len(), t0.elapsed());
    }

    /// Full acceptance-scale rehearsal; run manually with
    /// `cargo test -p msoc --lib rehearsal -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn acceptance_scale_rehearsal() {
        let dir = tempfile::tempdir().unwrap();
        let fe = FrontendConfig {
            clip_frames: 8,
            ..FrontendConfig::default()
        };
        let spec = ToyCorpusSpec {
            n_per_category: 390,
            seed: 1,
            ..ToyCorpusSpec::default()
        };
        let wall = std::time::Instant::now();
        let t0 = std::time::Instant::now();
        let corpus = generate_toy_corpus(&spec, &fe, dir.path()).unwrap();
        println!("corpus gen ({} records): {:?}", corpus.len(), t0.elapsed());
        let split = SplitSpec {
            train_per_category: 200,
            val_per_category: 50,
            test_per_category: 100,
            holdout_methods: toy_holdout_methods(&spec),
            seed: 0,
        };
        let manifest = build_split(&corpus, &split).unwrap();
        let t0 = std::time::Instant::now();
        let store = ClipStore::load(
            &manifest,
            dir.path(),
            &fe,
            &[Split::Train, Split::Val, Split::Test],
        )
        .unwrap();
        println!("store load: {:?}", t0.elapsed());
        let cfg = TrainConfig {
            epochs: 10,
            seeds: vec![0],
            ..TrainConfig::default()
        };
        let model_cfg = ModelConfig {
            mode: Mode::Msoc,
            visual_encoder: VisualEncoderKind::Resnet,
            use_oc: true,
        };
        let hyper = OcHyper::new(cfg.alpha, cfg.m0, cfg.m1).unwrap();
        let mut model = MSOCModel::new(&model_cfg, hyper, 0);
        let t0 = std::time::Instant::now();
        let summary = train(&manifest, &store, &mut model, &cfg, &fe, 0).unwrap();
        println!(
            "train 10 epochs: {:?}  val_aucs={:?} best_epoch={}",
            t0.elapsed(),
            summary
                .val_aucs
                .iter()
                .map(|v| (v * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            summary.best_epoch
        );
        let t0 = std::time::Instant::now();
        let eval = evaluate(&manifest, &store, &model, &fe, cfg.batch_size).unwrap();
        println!("eval: {:?}", t0.elapsed());
        for c in &eval.per_category {
            println!("  {:?}: accuracy {:.2}% (n={})", c.category, c.accuracy, c.n);
        }
        println!(
            "  branch AUC: audio {:.3} visual {:.3} av {:.3}",
            eval.branch_auc.audio, eval.branch_auc.visual, eval.branch_auc.av
        );
        println!("total wall: {:?}", wall.elapsed());
    }
}

