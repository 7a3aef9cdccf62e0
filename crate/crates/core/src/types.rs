//! Shared domain types and label conventions.
//!
//! Label convention, used everywhere in this crate: `0` = real/bonafide,
//! `1` = fake. A video-level (audio-visual) label is fake when either
//! modality is fake or when the streams are out of sync.

use ndarray::{Array1, Array2, Array3, Array5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five sample categories of the benchmark.
///
/// The first four code (Real|Fake) Audio x (Real|Fake) Visual; `Unsynced`
/// marks clips whose streams are both real but temporally misaligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Rarv,
    Farv,
    Rafv,
    Fafv,
    Unsynced,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Rarv,
        Category::Farv,
        Category::Rafv,
        Category::Fafv,
        Category::Unsynced,
    ];

    /// The four fake test-set categories, in report order.
    pub const TEST_SETS: [Category; 4] = [
        Category::Rafv,
        Category::Fafv,
        Category::Farv,
        Category::Unsynced,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Rarv => "RARV",
            Category::Farv => "FARV",
            Category::Rafv => "RAFV",
            Category::Fafv => "FAFV",
            Category::Unsynced => "UNSYNCED",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        match s {
            "RARV" => Ok(Category::Rarv),
            "FARV" => Ok(Category::Farv),
            "RAFV" => Ok(Category::Rafv),
            "FAFV" => Ok(Category::Fafv),
            "UNSYNCED" => Ok(Category::Unsynced),
            other => Err(Error::msg(format!("unknown category `{other}`"))),
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::msg(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One video clip with per-modality labels and media references.
///
/// `audio_ref` / `visual_ref` address media through the store; an audio ref
/// may carry a `#shift=K` fragment, meaning the MFCC rows are cyclically
/// shifted by K after extraction (how unsynchronized clips are realized).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub audio_ref: String,
    pub visual_ref: String,
    /// 0 = real audio, 1 = fake audio.
    pub audio_label: u8,
    /// 0 = real visual, 1 = fake visual.
    pub visual_label: u8,
    /// Video-level label; see [`expected_av_label`].
    pub av_label: u8,
    pub synced: bool,
    pub category: Category,
    /// Generation-method tag, the split key for unseen-method evaluation.
    /// `"none"` exactly for RARV records.
    pub gen_method: String,
    pub split: Split,
}

/// Video-level label implied by the modality labels and the sync flag.
pub fn expected_av_label(audio_label: u8, visual_label: u8, synced: bool) -> u8 {
    if audio_label == 1 || visual_label == 1 || !synced {
        1
    } else {
        0
    }
}

/// A single invariant violation found by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub sample_id: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.sample_id, self.message)
    }
}

/// Checks every record-level invariant; violations are data, not errors.
pub fn validate_record(r: &SampleRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |message: String| {
        out.push(Violation {
            sample_id: r.sample_id.clone(),
            message,
        })
    };

    for (name, v) in [
        ("audio_label", r.audio_label),
        ("visual_label", r.visual_label),
        ("av_label", r.av_label),
    ] {
        if v > 1 {
            push(format!("{name} must be 0 or 1, got {v}"));
        }
    }

    let expect_av = expected_av_label(r.audio_label, r.visual_label, r.synced);
    if r.av_label != expect_av {
        push(format!(
            "av_label inconsistent: audio={}, visual={}, synced={} implies av_label={}",
            r.audio_label, r.visual_label, r.synced, expect_av
        ));
    }

    let (want_a, want_v, want_sync): (u8, u8, Option<bool>) = match r.category {
        Category::Rarv => (0, 0, Some(true)),
        Category::Farv => (1, 0, None),
        Category::Rafv => (0, 1, None),
        Category::Fafv => (1, 1, None),
        Category::Unsynced => (0, 0, Some(false)),
    };
    if r.audio_label != want_a {
        push(format!(
            "{} requires audio_label={}, got {}",
            r.category, want_a, r.audio_label
        ));
    }
    if r.visual_label != want_v {
        push(format!(
            "{} requires visual_label={}, got {}",
            r.category, want_v, r.visual_label
        ));
    }
    if let Some(want_sync) = want_sync {
        if r.synced != want_sync {
            push(format!(
                "{} requires synced={}, got {}",
                r.category, want_sync, r.synced
            ));
        }
    }

    let is_none = r.gen_method == "none";
    let is_rarv = r.category == Category::Rarv;
    if is_none != is_rarv {
        push(format!(
            "gen_method=\"none\" iff category=RARV (category={}, gen_method={})",
            r.category, r.gen_method
        ));
    }

    if r.sample_id.is_empty() || r.sample_id.contains(char::is_whitespace) {
        push("sample_id must be nonempty and whitespace-free".to_string());
    }
    for (name, v) in [("audio_ref", &r.audio_ref), ("visual_ref", &r.visual_ref)] {
        if v.is_empty() || v.contains(char::is_whitespace) {
            push(format!("{name} must be nonempty and whitespace-free"));
        }
    }
    if r.gen_method.is_empty() || r.gen_method.contains(char::is_whitespace) {
        push("gen_method must be nonempty and whitespace-free".to_string());
    }

    out
}

/// Aligned per-batch feature arrays. The audio frame rate is four times the
/// visual frame rate, so `Ta = 4 * T` always holds here.
#[derive(Debug, Clone)]
pub struct ClipBatch {
    /// `[B, Ta, n_mfcc]`
    pub audio_features: Array3<f32>,
    /// `[B, T, 3, H, W]`, values in `[0, 1]`.
    pub visual_frames: Array5<f32>,
    pub audio_labels: Array1<u8>,
    pub visual_labels: Array1<u8>,
    pub av_labels: Array1<u8>,
}

impl ClipBatch {
    pub fn new(
        audio_features: Array3<f32>,
        visual_frames: Array5<f32>,
        audio_labels: Array1<u8>,
        visual_labels: Array1<u8>,
        av_labels: Array1<u8>,
    ) -> Result<Self> {
        let b = audio_features.shape()[0];
        let ta = audio_features.shape()[1];
        let t = visual_frames.shape()[1];
        if visual_frames.shape()[0] != b
            || audio_labels.len() != b
            || visual_labels.len() != b
            || av_labels.len() != b
        {
            return Err(Error::Shape {
                expected: format!("batch size {b} across all fields"),
                got: format!(
                    "visual {}, labels {}/{}/{}",
                    visual_frames.shape()[0],
                    audio_labels.len(),
                    visual_labels.len(),
                    av_labels.len()
                ),
            });
        }
        if ta != 4 * t {
            return Err(Error::Shape {
                expected: format!("Ta = 4*T = {}", 4 * t),
                got: format!("Ta = {ta}"),
            });
        }
        for l in audio_labels
            .iter()
            .chain(visual_labels.iter())
            .chain(av_labels.iter())
        {
            if *l > 1 {
                return Err(Error::Invalid(format!("label entry {l} not in {{0,1}}")));
            }
        }
        Ok(ClipBatch {
            audio_features,
            visual_frames,
            audio_labels,
            visual_labels,
            av_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.audio_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embeddings and scores produced by the three branches for one batch.
///
/// `audio_emb` / `visual_emb` come from the dedicated unimodal branches;
/// `av_audio_emb` / `av_visual_emb` are the audio-visual branch's own
/// extractor outputs (their concatenation is what the embedding export and
/// the classifier head consume).
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    /// `[B, 128]`
    pub audio_emb: Array2<f32>,
    /// `[B, d_v]`
    pub visual_emb: Array2<f32>,
    /// `[B, 128]`
    pub av_audio_emb: Array2<f32>,
    /// `[B, d_v]`
    pub av_visual_emb: Array2<f32>,
    /// Cosine similarity to the audio branch center, in `[-1, 1]`.
    pub audio_oc_score: Array1<f32>,
    /// Cosine similarity to the visual branch center, in `[-1, 1]`.
    pub visual_oc_score: Array1<f32>,
    /// Softmax probability of the real class from the AV head, in `[0, 1]`.
    pub av_real_prob: Array1<f32>,
}

/// Per-sample fusion outcome. `fused_score = (audio_bin + visual_bin +
/// av_real_prob) / 3`; the verdict is real (0) iff `fused_score > 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionDecision {
    pub audio_bin: u8,
    pub visual_bin: u8,
    pub av_real_prob: f32,
    pub fused_score: f32,
    /// 0 = real, 1 = fake.
    pub verdict: u8,
}

/// Train/val/test partition listing with category and method bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    pub schema_version: String,
    pub seed: u64,
    pub entries: Vec<SampleRecord>,
}

pub const MANIFEST_SCHEMA_VERSION: &str = "1";

impl BenchmarkManifest {
    pub fn new(seed: u64, entries: Vec<SampleRecord>) -> Self {
        BenchmarkManifest {
            schema_version: MANIFEST_SCHEMA_VERSION.to_string(),
            seed,
            entries,
        }
    }

    /// Validates every record plus the manifest-level invariants:
    /// unique sample ids, and no generation method (other than "none")
    /// shared between {train, val} and {test}.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for r in &self.entries {
            out.extend(validate_record(r));
        }

        let mut seen = std::collections::HashSet::new();
        for r in &self.entries {
            if !seen.insert(r.sample_id.as_str()) {
                out.push(Violation {
                    sample_id: r.sample_id.clone(),
                    message: "duplicate sample_id".to_string(),
                });
            }
        }

        let mut fit_methods = std::collections::HashSet::new();
        for r in &self.entries {
            if matches!(r.split, Split::Train | Split::Val) && r.gen_method != "none" {
                fit_methods.insert(r.gen_method.as_str());
            }
        }
        for r in &self.entries {
            if r.split == Split::Test
                && r.gen_method != "none"
                && fit_methods.contains(r.gen_method.as_str())
            {
                out.push(Violation {
                    sample_id: r.sample_id.clone(),
                    message: format!(
                        "gen_method `{}` appears in both train/val and test",
                        r.gen_method
                    ),
                });
            }
        }

        out
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.entries.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.entries.iter().find(|r| r.sample_id == sample_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(a: u8, v: u8, synced: bool, category: Category, av: u8) -> SampleRecord {
        SampleRecord {
            sample_id: "s0".into(),
            audio_ref: "a0".into(),
            visual_ref: "v0".into(),
            audio_label: a,
            visual_label: v,
            av_label: av,
            synced,
            category,
            gen_method: if category == Category::Rarv {
                "none".into()
            } else {
                "m".into()
            },
            split: Split::Train,
        }
    }

    #[test]
    fn farv_synced_is_valid() {
        let r = record(1, 0, true, Category::Farv, 1);
        assert!(validate_record(&r).is_empty());
    }

    #[test]
    fn real_synced_with_fake_av_label_is_flagged() {
        let r = record(0, 0, true, Category::Rarv, 1);
        let v = validate_record(&r);
        assert!(v.iter().any(|x| x.message.contains("av_label inconsistent")));
    }

    #[test]
    fn unsynced_category_requires_unsynced_flag() {
        let mut r = record(0, 0, true, Category::Unsynced, 1);
        r.av_label = 0; // consistent with synced=true, so only the category rule fires
        let v = validate_record(&r);
        assert!(v.iter().any(|x| x.message.contains("requires synced=false")));
    }

    #[test]
    fn av_label_formula_over_all_combinations() {
        // Enumerate every (audio, visual, synced) combination and check that
        // validate_record accepts exactly the formula-consistent av_label.
        for a in [0u8, 1] {
            for v in [0u8, 1] {
                for synced in [false, true] {
                    let category = match (a, v, synced) {
                        (0, 0, true) => Category::Rarv,
                        (0, 0, false) => Category::Unsynced,
                        (1, 0, _) => Category::Farv,
                        (0, 1, _) => Category::Rafv,
                        (1, 1, _) => Category::Fafv,
                        _ => unreachable!(),
                    };
                    for av in [0u8, 1] {
                        let r = record(a, v, synced, category, av);
                        let ok = validate_record(&r)
                            .iter()
                            .all(|x| !x.message.contains("av_label inconsistent"));
                        assert_eq!(ok, av == expected_av_label(a, v, synced));
                    }
                }
            }
        }
    }

    #[test]
    fn gen_method_none_is_tied_to_rarv() {
        let mut r = record(0, 0, true, Category::Rarv, 0);
        r.gen_method = "faceswap".into();
        assert!(!validate_record(&r).is_empty());

        let mut r = record(1, 0, true, Category::Farv, 1);
        r.gen_method = "none".into();
        assert!(!validate_record(&r).is_empty());
    }

    #[test]
    fn manifest_catches_duplicates_and_leakage() {
        let mut a = record(1, 0, true, Category::Farv, 1);
        a.gen_method = "vc".into();
        let mut b = a.clone();
        b.sample_id = "s1".into();
        b.split = Split::Test;
        let m = BenchmarkManifest::new(0, vec![a.clone(), b]);
        let violations = m.validate();
        assert!(violations
            .iter()
            .any(|v| v.message.contains("appears in both train/val and test")));

        let m = BenchmarkManifest::new(0, vec![a.clone(), a]);
        let violations = m.validate();
        assert!(violations.iter().any(|v| v.message.contains("duplicate")));
    }

    #[test]
    fn clip_batch_enforces_frame_ratio() {
        let audio = Array3::<f32>::zeros((2, 100, 13));
        let visual = Array5::<f32>::zeros((2, 25, 3, 4, 4));
        let l = Array1::<u8>::zeros(2);
        assert!(ClipBatch::new(audio, visual, l.clone(), l.clone(), l.clone()).is_ok());

        let audio = Array3::<f32>::zeros((2, 99, 13));
        let visual = Array5::<f32>::zeros((2, 25, 3, 4, 4));
        assert!(ClipBatch::new(audio, visual, l.clone(), l.clone(), l).is_err());
    }
}
