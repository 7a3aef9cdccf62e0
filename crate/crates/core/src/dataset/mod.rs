//! Benchmark assembly: leakage-free splits and derived-record constructors.
//!
//! [`build_split`] turns a flat corpus of labelled clips into a
//! [`BenchmarkManifest`] whose test fakes come exclusively from held-out
//! generation methods, so evaluation always measures generalisation to
//! unseen manipulations rather than memorisation of seen ones.
//!
//! [`make_unsynced`] and [`make_substituted_audio`] derive the two benchmark
//! categories that cannot be sampled directly from a labelled corpus:
//! desynchronised real pairs, and real video re-voiced through an audio
//! substitution hook.

pub mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SplitSpec;
use crate::error::{Error, Result};
use crate::media;
use crate::types::{BenchmarkManifest, Category, SampleRecord, Split, MANIFEST_SCHEMA_VERSION};

/// An audio transformation used to fabricate FARV material from real clips.
///
/// Implementations must be pure: the output may depend only on the input
/// waveform, so that corpus generation stays reproducible. The tag names the
/// generation method recorded on derived samples and is matched against
/// `holdout_methods` when splitting.
pub trait SubstitutionHook {
    /// Method tag stamped on records produced through this hook.
    fn tag(&self) -> &str;

    /// Transform one waveform into its substituted counterpart.
    fn apply(&self, waveform: &Array1<f32>) -> Result<Array1<f32>>;
}

/// Assign train/val/test splits over `corpus`, enforcing method disjointness.
///
/// The incoming records' `split` field is ignored and overwritten. Per
/// category, records whose `gen_method` is listed in `spec.holdout_methods`
/// are reserved for the test set; train and val draw only from the rest.
/// A category with no non-holdout records at all (the unsynchronised
/// category, whose only method is the shift itself) is treated as test-only
/// and contributes nothing to train or val.
///
/// Test sets are built per fake category from holdout records, plus one
/// shared pool of extra real pairs drawn after train/val; the same real
/// records accompany every test category, since a real clip is category-free
/// until it is contrasted with a particular manipulation.
///
/// Selection is seeded and order-insensitive: records are keyed by
/// `sample_id` before shuffling, so permuting the input corpus cannot change
/// the resulting manifest.
pub fn build_split(corpus: &[SampleRecord], spec: &SplitSpec) -> Result<BenchmarkManifest> {
    if corpus.is_empty() {
        return Err(Error::Invalid("corpus is empty".into()));
    }
    let mut seen_ids = std::collections::BTreeSet::new();
    for r in corpus {
        if !seen_ids.insert(r.sample_id.as_str()) {
            return Err(Error::Invalid(format!(
                "duplicate sample_id in corpus: {}",
                r.sample_id
            )));
        }
    }
    // Every holdout tag must exist somewhere in the corpus; a typo here would
    // otherwise silently weaken the benchmark to a seen-methods test.
    for m in &spec.holdout_methods {
        if !corpus.iter().any(|r| &r.gen_method == m) {
            return Err(Error::UnknownMethod(m.clone()));
        }
    }

    // Order-insensitive deterministic shuffle: sort by sample_id, then
    // Fisher-Yates with a stream derived only from the spec seed.
    let mut by_category: BTreeMap<Category, Vec<&SampleRecord>> = BTreeMap::new();
    for cat in Category::ALL {
        by_category.insert(cat, Vec::new());
    }
    for r in corpus {
        by_category
            .get_mut(&r.category)
            .expect("all categories pre-seeded")
            .push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries: Vec<SampleRecord> = Vec::new();
    let mut real_pool: Vec<&SampleRecord> = Vec::new();

    for cat in Category::ALL {
        let mut records = by_category.remove(&cat).unwrap();
        records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        records.shuffle(&mut rng);

        let (seen, holdout): (Vec<_>, Vec<_>) = records
            .into_iter()
            .partition(|r| !spec.is_holdout(&r.gen_method));

        if cat == Category::Rarv {
            // Reals: train + val from the front, and remember the remainder
            // as the shared test pool.
            let need = spec.train_per_category + spec.val_per_category + spec.test_per_category;
            if seen.len() < need {
                return Err(Error::Insufficient {
                    category: cat.as_str().to_string(),
                    need,
                    have: seen.len(),
                });
            }
            let mut it = seen.into_iter();
            for r in it.by_ref().take(spec.train_per_category) {
                entries.push(with_split(r, Split::Train));
            }
            for r in it.by_ref().take(spec.val_per_category) {
                entries.push(with_split(r, Split::Val));
            }
            real_pool = it.take(spec.test_per_category).collect();
            continue;
        }

        // Fake categories: train/val from seen methods, test from holdout.
        let train_val_need = spec.train_per_category + spec.val_per_category;
        if seen.is_empty() {
            // Test-only category: none of its methods are trainable.
        } else {
            if seen.len() < train_val_need {
                return Err(Error::Insufficient {
                    category: cat.as_str().to_string(),
                    need: train_val_need,
                    have: seen.len(),
                });
            }
            let mut it = seen.into_iter();
            for r in it.by_ref().take(spec.train_per_category) {
                entries.push(with_split(r, Split::Train));
            }
            for r in it.take(spec.val_per_category) {
                entries.push(with_split(r, Split::Val));
            }
        }
        if holdout.len() < spec.test_per_category {
            return Err(Error::Insufficient {
                category: cat.as_str().to_string(),
                need: spec.test_per_category,
                have: holdout.len(),
            });
        }
        for r in holdout.into_iter().take(spec.test_per_category) {
            entries.push(with_split(r, Split::Test));
        }
    }

    // The shared real test pool rides along once, as RARV test records.
    for r in real_pool {
        entries.push(with_split(r, Split::Test));
    }

    let manifest = BenchmarkManifest {
        schema_version: MANIFEST_SCHEMA_VERSION.to_string(),
        seed: spec.seed,
        entries,
    };
    let violations = manifest.validate();
    if !violations.is_empty() {
        return Err(Error::Invalid(format!(
            "built manifest fails validation: {}",
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(manifest)
}

fn with_split(r: &SampleRecord, split: Split) -> SampleRecord {
    let mut out = r.clone();
    out.split = split;
    out
}

/// Derive unsynchronised records from real, synced source pairs.
///
/// Each derived record reuses its source's media and appends a
/// `#shift=k` fragment to the audio reference, with `k` drawn uniformly from
/// `[ta/4, 3*ta/4]` so the misalignment is always a substantial fraction of
/// the clip. No audio is duplicated on disk; the shift is applied by the
/// feature pipeline at load time.
pub fn make_unsynced(
    sources: &[SampleRecord],
    count: usize,
    ta: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if count > sources.len() {
        return Err(Error::Invalid(format!(
            "requested {count} unsynced records from {} sources",
            sources.len()
        )));
    }
    if ta < 4 {
        return Err(Error::Invalid(format!(
            "clip length {ta} too short to desynchronise"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = ta / 4;
    let hi = 3 * ta / 4;
    let mut out = Vec::with_capacity(count);
    for (i, src) in sources.iter().take(count).enumerate() {
        check_real_source(src)?;
        if src.audio_ref.contains('#') {
            return Err(Error::Invalid(format!(
                "source {} already carries a fragment: {}",
                src.sample_id, src.audio_ref
            )));
        }
        let k = rng.random_range(lo..=hi);
        out.push(SampleRecord {
            sample_id: format!("unsynced_{i:04}"),
            audio_ref: format!("{}#shift={k}", src.audio_ref),
            visual_ref: src.visual_ref.clone(),
            audio_label: 0,
            visual_label: 0,
            av_label: 1,
            synced: false,
            category: Category::Unsynced,
            gen_method: "shift".to_string(),
            split: Split::Test,
        });
    }
    Ok(out)
}

/// Derive fake-audio/real-visual records by rewriting the audio track.
///
/// For each source (a real, synced pair) the waveform is loaded from the
/// media store, passed through `hook`, and written back under
/// `audio/farv_{tag}_{i:04}.arr`; the derived record keeps the source's
/// visual reference. Hook failures are surfaced with the offending
/// sample id attached.
pub fn make_substituted_audio(
    sources: &[SampleRecord],
    hook: &dyn SubstitutionHook,
    count: usize,
    seed: u64,
    media_root: &Path,
) -> Result<Vec<SampleRecord>> {
    if count > sources.len() {
        return Err(Error::Invalid(format!(
            "requested {count} substituted records from {} sources",
            sources.len()
        )));
    }
    let tag = hook.tag().to_string();
    if tag.is_empty() || tag == "none" {
        return Err(Error::Invalid(format!("invalid hook tag: {tag:?}")));
    }
    // The seed is reserved for hooks that may later need sampling; ordering
    // itself is fixed by the source list.
    let _ = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for (i, src) in sources.iter().take(count).enumerate() {
        check_real_source(src)?;
        let (wave, shift) = media::load_waveform(media_root, &src.audio_ref)?;
        if shift.is_some() {
            return Err(Error::Invalid(format!(
                "source {} audio carries a shift fragment",
                src.sample_id
            )));
        }
        let substituted = hook.apply(&wave).map_err(|e| Error::Hook {
            sample_id: src.sample_id.clone(),
            message: e.to_string(),
        })?;
        if substituted.iter().any(|v| !v.is_finite()) {
            return Err(Error::Hook {
                sample_id: src.sample_id.clone(),
                message: "hook produced non-finite samples".to_string(),
            });
        }
        let audio_ref = format!("audio/farv_{tag}_{i:04}.arr");
        media::save_f32(
            &media_root.join(&audio_ref),
            substituted.view().into_dyn(),
        )?;
        out.push(SampleRecord {
            sample_id: format!("farv_{tag}_{i:04}"),
            audio_ref,
            visual_ref: src.visual_ref.clone(),
            audio_label: 1,
            visual_label: 0,
            av_label: 1,
            synced: true,
            category: Category::Farv,
            gen_method: tag.clone(),
            split: Split::Train,
        });
    }
    Ok(out)
}

fn check_real_source(src: &SampleRecord) -> Result<()> {
    if src.audio_label != 0 || src.visual_label != 0 || !src.synced {
        return Err(Error::Invalid(format!(
            "derivation source {} must be a real, synced pair",
            src.sample_id
        )));
    }
    Ok(())
}
