//! The full detector: three independently trained branches (audio one-class,
//! visual one-class, audio-visual classifier) plus the score-fusion rule and
//! checkpoint serialization.
//!
//! Each branch keeps its parameters in its own [`VarStore`], so "the branches
//! share no parameters" is structural rather than a convention: a gradient
//! step on one branch cannot touch another's weights.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, ModelConfig, VisualEncoderKind};
use crate::encoders::{AudioCache, AudioResNet, VisualCache, VisualEncoder, AUDIO_EMB_DIM};
use crate::error::{Error, Result};
use crate::nn::layers::{relu, relu_backward, Linear, LinearCache};
use crate::nn::{Adam, ParamId, VarStore};
use crate::oc::{
    cross_entropy_grads, init_center, oc_score, oc_softmax_loss_grads, real_prob, OcHyper,
};
use crate::types::{BranchOutputs, ClipBatch, FusionDecision};

const CKPT_MAGIC: &[u8; 8] = b"MSOCKPT1";

// ---------------------------------------------------------------------------
// Branches
// ---------------------------------------------------------------------------

fn new_center(vs: &mut VarStore<f32>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> ParamId {
    let id = vs.var(name, &[dim], crate::nn::Init::Zeros, rng);
    vs.set_value(id, init_center::<f32>(dim, rng).into_dyn());
    id
}

fn center_view(vs: &VarStore<f32>, id: ParamId) -> ndarray::ArrayView1<'_, f32> {
    vs.value(id).view().into_dimensionality().unwrap()
}

pub struct AudioBranch {
    pub vs: VarStore<f32>,
    enc: AudioResNet,
    center: ParamId,
}

pub struct VisualBranch {
    pub vs: VarStore<f32>,
    enc: VisualEncoder,
    center: ParamId,
}

/// Audio-visual branch: both encoders, one OC center per modality, and a
/// three-layer classifier head over the concatenated embeddings.
pub struct AvBranch {
    pub vs: VarStore<f32>,
    audio_enc: AudioResNet,
    visual_enc: VisualEncoder,
    audio_center: ParamId,
    visual_center: ParamId,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

struct AvTrace {
    audio: AudioCache<f32>,
    visual: VisualCache<f32>,
    fc1: LinearCache<f32>,
    h1: Array2<f32>,
    fc2: LinearCache<f32>,
    h2: Array2<f32>,
    fc3: LinearCache<f32>,
}

impl AvBranch {
    fn new(kind: VisualEncoderKind, rng: &mut ChaCha8Rng) -> Self {
        let mut vs = VarStore::new();
        let audio_enc = AudioResNet::new(&mut vs, "audio_enc", rng);
        let visual_enc = VisualEncoder::new(kind, &mut vs, "visual_enc", rng);
        let d_v = visual_enc.out_dim();
        let audio_center = new_center(&mut vs, "oc_center.audio", AUDIO_EMB_DIM, rng);
        let visual_center = new_center(&mut vs, "oc_center.visual", d_v, rng);
        let fc1 = Linear::new(&mut vs, "head.fc1", AUDIO_EMB_DIM + d_v, 128, rng);
        let fc2 = Linear::new(&mut vs, "head.fc2", 128, 64, rng);
        let fc3 = Linear::new(&mut vs, "head.fc3", 64, 2, rng);
        AvBranch {
            vs,
            audio_enc,
            visual_enc,
            audio_center,
            visual_center,
            fc1,
            fc2,
            fc3,
        }
    }

    /// Returns (audio emb, visual emb, logits, trace).
    fn forward(&self, batch: &ClipBatch) -> (Array2<f32>, Array2<f32>, Array2<f32>, AvTrace) {
        let (a_emb, a_cache) = self.audio_enc.forward(&self.vs, &batch.audio_features);
        let (v_emb, v_cache) = self.visual_enc.forward(&self.vs, &batch.visual_frames);
        let concat = concatenate(Axis(1), &[a_emb.view(), v_emb.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let (z1, c1) = self.fc1.forward(&self.vs, &concat);
        let h1 = relu(&z1);
        let (z2, c2) = self.fc2.forward(&self.vs, &h1);
        let h2 = relu(&z2);
        let (logits, c3) = self.fc3.forward(&self.vs, &h2);
        (
            a_emb,
            v_emb,
            logits,
            AvTrace {
                audio: a_cache,
                visual: v_cache,
                fc1: c1,
                h1,
                fc2: c2,
                h2,
                fc3: c3,
            },
        )
    }

    /// Backpropagate head and embedding gradients into the branch store.
    fn backward(
        &mut self,
        trace: AvTrace,
        d_logits: &Array2<f32>,
        d_audio_emb: Option<&Array2<f32>>,
        d_visual_emb: Option<&Array2<f32>>,
    ) {
        let g_h2 = self.fc3.backward(&mut self.vs, trace.fc3, d_logits);
        let g_z2 = relu_backward(&trace.h2, &g_h2);
        let g_h1 = self.fc2.backward(&mut self.vs, trace.fc2, &g_z2);
        let g_z1 = relu_backward(&trace.h1, &g_h1);
        let g_concat = self.fc1.backward(&mut self.vs, trace.fc1, &g_z1);

        let d_a_dim = AUDIO_EMB_DIM;
        let mut g_a = g_concat.slice(s![.., ..d_a_dim]).to_owned();
        let mut g_v = g_concat.slice(s![.., d_a_dim..]).to_owned();
        if let Some(d) = d_audio_emb {
            g_a.zip_mut_with(d, |a, &b| *a += b);
        }
        if let Some(d) = d_visual_emb {
            g_v.zip_mut_with(d, |a, &b| *a += b);
        }
        self.audio_enc.backward(&mut self.vs, trace.audio, &g_a);
        self.visual_enc.backward(&mut self.vs, trace.visual, &g_v);
    }
}

// ---------------------------------------------------------------------------
// Loss breakdown
// ---------------------------------------------------------------------------

/// Per-branch loss terms for one batch. Terms the active configuration does
/// not optimize are `None` (the unimodal pair in AVOC mode; the audio-visual
/// one-class pair when the one-class terms are disabled), so a logged `null`
/// means "not trained", never "diverged". `l_av_total` is stored as the
/// exact sum of the present audio-visual terms, so the decomposition
/// identity holds bitwise.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub l_aoc_audio: Option<f32>,
    pub l_voc_visual: Option<f32>,
    pub l_aoc_av: Option<f32>,
    pub l_voc_av: Option<f32>,
    pub l_ce_av: f32,
    pub l_av_total: f32,
}

impl LossBreakdown {
    /// True when every present term is a normal number.
    pub fn is_finite(&self) -> bool {
        [self.l_aoc_audio, self.l_voc_visual, self.l_aoc_av, self.l_voc_av]
            .iter()
            .all(|t| t.is_none_or(f32::is_finite))
            && self.l_ce_av.is_finite()
            && self.l_av_total.is_finite()
    }
}

/// Optimizer triple matching the three branch stores.
pub struct BranchOptimizers {
    pub audio: Adam<f32>,
    pub visual: Adam<f32>,
    pub av: Adam<f32>,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub struct MSOCModel {
    pub audio_branch: AudioBranch,
    pub visual_branch: VisualBranch,
    pub av_branch: AvBranch,
    pub mode: Mode,
    pub use_oc: bool,
    pub visual_kind: VisualEncoderKind,
    pub hyper: OcHyper<f32>,
}

impl MSOCModel {
    /// Builds all three branches deterministically from `seed`. The branches
    /// are constructed in all modes — AVOC simply never trains or consults
    /// the single-modality ones.
    pub fn new(cfg: &ModelConfig, hyper: OcHyper<f32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut audio_vs = VarStore::new();
        let audio_enc = AudioResNet::new(&mut audio_vs, "enc", &mut rng);
        let audio_center = new_center(&mut audio_vs, "oc_center", AUDIO_EMB_DIM, &mut rng);

        let mut visual_vs = VarStore::new();
        let visual_enc = VisualEncoder::new(cfg.visual_encoder, &mut visual_vs, "enc", &mut rng);
        let d_v = visual_enc.out_dim();
        let visual_center = new_center(&mut visual_vs, "oc_center", d_v, &mut rng);

        let av_branch = AvBranch::new(cfg.visual_encoder, &mut rng);

        MSOCModel {
            audio_branch: AudioBranch {
                vs: audio_vs,
                enc: audio_enc,
                center: audio_center,
            },
            visual_branch: VisualBranch {
                vs: visual_vs,
                enc: visual_enc,
                center: visual_center,
            },
            av_branch,
            mode: cfg.mode,
            use_oc: cfg.use_oc,
            visual_kind: cfg.visual_encoder,
            hyper,
        }
    }

    pub fn optimizers(&self, lr: f32) -> BranchOptimizers {
        BranchOptimizers {
            audio: Adam::new(&self.audio_branch.vs, lr),
            visual: Adam::new(&self.visual_branch.vs, lr),
            av: Adam::new(&self.av_branch.vs, lr),
        }
    }

    /// Inference pass through all three branches.
    pub fn forward(&self, batch: &ClipBatch) -> Result<BranchOutputs> {
        let (audio_emb, _) = self
            .audio_branch
            .enc
            .forward(&self.audio_branch.vs, &batch.audio_features);
        let audio_oc_score = oc_score(
            audio_emb.view(),
            center_view(&self.audio_branch.vs, self.audio_branch.center),
        )?;

        let (visual_emb, _) = self
            .visual_branch
            .enc
            .forward(&self.visual_branch.vs, &batch.visual_frames);
        let visual_oc_score = oc_score(
            visual_emb.view(),
            center_view(&self.visual_branch.vs, self.visual_branch.center),
        )?;

        let (av_audio_emb, av_visual_emb, logits, _) = self.av_branch.forward(batch);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio-visual head logits".into()));
        }
        let av_real_prob = real_prob(logits.view());

        Ok(BranchOutputs {
            audio_emb,
            visual_emb,
            av_audio_emb,
            av_visual_emb,
            audio_oc_score,
            visual_oc_score,
            av_real_prob,
        })
    }

    /// The loss terms the active configuration trains, at the current
    /// parameters (no gradient side effects). Mirrors [`train_step`]'s
    /// reporting exactly.
    ///
    /// [`train_step`]: MSOCModel::train_step
    pub fn compute_losses(&self, batch: &ClipBatch) -> Result<LossBreakdown> {
        let (l_aoc_audio, l_voc_visual) = match self.mode {
            Mode::Msoc => {
                let (audio_emb, _) = self
                    .audio_branch
                    .enc
                    .forward(&self.audio_branch.vs, &batch.audio_features);
                let l_a = crate::oc::oc_softmax_loss(
                    audio_emb.view(),
                    center_view(&self.audio_branch.vs, self.audio_branch.center),
                    batch.audio_labels.view(),
                    &self.hyper,
                )?;
                let (visual_emb, _) = self
                    .visual_branch
                    .enc
                    .forward(&self.visual_branch.vs, &batch.visual_frames);
                let l_v = crate::oc::oc_softmax_loss(
                    visual_emb.view(),
                    center_view(&self.visual_branch.vs, self.visual_branch.center),
                    batch.visual_labels.view(),
                    &self.hyper,
                )?;
                (Some(l_a), Some(l_v))
            }
            Mode::Avoc => (None, None),
        };

        let (a_emb, v_emb, logits, _) = self.av_branch.forward(batch);
        let (l_aoc_av, l_voc_av) = if self.use_oc {
            let l_a = crate::oc::oc_softmax_loss(
                a_emb.view(),
                center_view(&self.av_branch.vs, self.av_branch.audio_center),
                batch.audio_labels.view(),
                &self.hyper,
            )?;
            let l_v = crate::oc::oc_softmax_loss(
                v_emb.view(),
                center_view(&self.av_branch.vs, self.av_branch.visual_center),
                batch.visual_labels.view(),
                &self.hyper,
            )?;
            (Some(l_a), Some(l_v))
        } else {
            (None, None)
        };
        let (l_ce_av, _) = cross_entropy_grads(logits.view(), batch.av_labels.view())?;

        Ok(Self::breakdown(
            l_aoc_audio,
            l_voc_visual,
            l_aoc_av,
            l_voc_av,
            l_ce_av,
        ))
    }

    /// Assembles a [`LossBreakdown`], keeping `l_av_total` the exact
    /// left-to-right sum of the present audio-visual terms.
    fn breakdown(
        l_aoc_audio: Option<f32>,
        l_voc_visual: Option<f32>,
        l_aoc_av: Option<f32>,
        l_voc_av: Option<f32>,
        l_ce_av: f32,
    ) -> LossBreakdown {
        let l_av_total = match (l_aoc_av, l_voc_av) {
            (Some(a), Some(v)) => a + v + l_ce_av,
            _ => l_ce_av,
        };
        LossBreakdown {
            l_aoc_audio,
            l_voc_visual,
            l_aoc_av,
            l_voc_av,
            l_ce_av,
            l_av_total,
        }
    }

    /// One optimizer step on the audio branch's own loss. Returns the loss at
    /// the pre-step parameters.
    pub fn step_audio(&mut self, batch: &ClipBatch, opt: &mut Adam<f32>) -> Result<f32> {
        let branch = &mut self.audio_branch;
        branch.vs.zero_grads();
        let (emb, cache) = branch.enc.forward(&branch.vs, &batch.audio_features);
        let grads = oc_softmax_loss_grads(
            emb.view(),
            center_view(&branch.vs, branch.center),
            batch.audio_labels.view(),
            &self.hyper,
        )?;
        branch.enc.backward(&mut branch.vs, cache, &grads.d_emb);
        branch
            .vs
            .accum_grad(branch.center, grads.d_center.into_dyn().view());
        opt.step(&mut branch.vs);
        Ok(grads.loss)
    }

    /// One optimizer step on the visual branch's own loss.
    pub fn step_visual(&mut self, batch: &ClipBatch, opt: &mut Adam<f32>) -> Result<f32> {
        let branch = &mut self.visual_branch;
        branch.vs.zero_grads();
        let (emb, cache) = branch.enc.forward(&branch.vs, &batch.visual_frames);
        let grads = oc_softmax_loss_grads(
            emb.view(),
            center_view(&branch.vs, branch.center),
            batch.visual_labels.view(),
            &self.hyper,
        )?;
        branch.enc.backward(&mut branch.vs, cache, &grads.d_emb);
        branch
            .vs
            .accum_grad(branch.center, grads.d_center.into_dyn().view());
        opt.step(&mut branch.vs);
        Ok(grads.loss)
    }

    /// One optimizer step on the audio-visual branch. With `use_oc` off the
    /// one-class terms are neither computed nor trained and come back as
    /// `None`; only cross-entropy contributes gradients.
    /// Returns `(l_aoc_av, l_voc_av, l_ce_av)`.
    pub fn step_av(
        &mut self,
        batch: &ClipBatch,
        opt: &mut Adam<f32>,
    ) -> Result<(Option<f32>, Option<f32>, f32)> {
        self.av_branch.vs.zero_grads();
        let (a_emb, v_emb, logits, trace) = self.av_branch.forward(batch);
        let (l_ce, d_logits) = cross_entropy_grads(logits.view(), batch.av_labels.view())?;

        let (l_aoc_av, l_voc_av) = if self.use_oc {
            let aoc = oc_softmax_loss_grads(
                a_emb.view(),
                center_view(&self.av_branch.vs, self.av_branch.audio_center),
                batch.audio_labels.view(),
                &self.hyper,
            )?;
            let voc = oc_softmax_loss_grads(
                v_emb.view(),
                center_view(&self.av_branch.vs, self.av_branch.visual_center),
                batch.visual_labels.view(),
                &self.hyper,
            )?;
            self.av_branch
                .backward(trace, &d_logits, Some(&aoc.d_emb), Some(&voc.d_emb));
            let av = &mut self.av_branch;
            av.vs
                .accum_grad(av.audio_center, aoc.d_center.into_dyn().view());
            av.vs
                .accum_grad(av.visual_center, voc.d_center.into_dyn().view());
            (Some(aoc.loss), Some(voc.loss))
        } else {
            self.av_branch.backward(trace, &d_logits, None, None);
            (None, None)
        };
        opt.step(&mut self.av_branch.vs);
        Ok((l_aoc_av, l_voc_av, l_ce))
    }

    /// One scheduling step: in MSOC mode the three branches each take one
    /// optimizer step on the same batch (audio, then visual, then AV); in
    /// AVOC mode only the AV branch trains. Returns pre-step losses.
    pub fn train_step(
        &mut self,
        batch: &ClipBatch,
        opts: &mut BranchOptimizers,
    ) -> Result<LossBreakdown> {
        let (l_aoc_audio, l_voc_visual) = match self.mode {
            Mode::Msoc => (
                Some(self.step_audio(batch, &mut opts.audio)?),
                Some(self.step_visual(batch, &mut opts.visual)?),
            ),
            Mode::Avoc => (None, None),
        };
        let (l_aoc_av, l_voc_av, l_ce_av) = self.step_av(batch, &mut opts.av)?;
        Ok(Self::breakdown(
            l_aoc_audio,
            l_voc_visual,
            l_aoc_av,
            l_voc_av,
            l_ce_av,
        ))
    }
}

// ---------------------------------------------------------------------------
// Fusion and attribution
// ---------------------------------------------------------------------------

/// Decision for one sample from the three scores. Both thresholds are strict:
/// a score sitting exactly on a boundary counts toward fake.
pub fn fuse_one(audio_score: f32, visual_score: f32, av_real_prob: f32) -> FusionDecision {
    let audio_bin = u8::from(audio_score > 0.5);
    let visual_bin = u8::from(visual_score > 0.5);
    let fused_score = (audio_bin as f32 + visual_bin as f32 + av_real_prob) / 3.0;
    FusionDecision {
        audio_bin,
        visual_bin,
        av_real_prob,
        fused_score,
        verdict: u8::from(fused_score <= 0.5),
    }
}

pub fn fuse(outputs: &BranchOutputs) -> Vec<FusionDecision> {
    (0..outputs.av_real_prob.len())
        .map(|i| {
            fuse_one(
                outputs.audio_oc_score[i],
                outputs.visual_oc_score[i],
                outputs.av_real_prob[i],
            )
        })
        .collect()
}

/// AVOC ablation verdicts: real iff the head's real probability clears 0.5.
pub fn fuse_avoc(outputs: &BranchOutputs) -> Vec<u8> {
    outputs
        .av_real_prob
        .iter()
        .map(|&p| u8::from(p <= 0.5))
        .collect()
}

/// Which modality the detector blames, read off the binarized branch scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModalityAttribution {
    pub audio_real: bool,
    pub visual_real: bool,
    pub av_real_prob: f32,
}

pub fn explain(outputs: &BranchOutputs) -> Vec<ModalityAttribution> {
    (0..outputs.av_real_prob.len())
        .map(|i| ModalityAttribution {
            audio_real: outputs.audio_oc_score[i] > 0.5,
            visual_real: outputs.visual_oc_score[i] > 0.5,
            av_real_prob: outputs.av_real_prob[i],
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the f32 blob, in elements.
    offset: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    mode: Mode,
    visual_encoder: VisualEncoderKind,
    use_oc: bool,
    alpha: f32,
    m0: f32,
    m1: f32,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

impl MSOCModel {
    fn branch_stores(&self) -> [(&'static str, &VarStore<f32>); 3] {
        [
            ("audio", &self.audio_branch.vs),
            ("visual", &self.visual_branch.vs),
            ("av", &self.av_branch.vs),
        ]
    }

    /// Clones every parameter, prefixed by branch, for later [`restore`].
    ///
    /// [`restore`]: MSOCModel::restore
    pub fn snapshot(&self) -> Vec<(String, ndarray::ArrayD<f32>)> {
        let mut out = Vec::new();
        for (prefix, vs) in self.branch_stores() {
            for (name, value) in vs.iter_named() {
                out.push((format!("{prefix}/{name}"), value.clone()));
            }
        }
        out
    }

    /// Writes a [`snapshot`] back into the parameter stores.
    ///
    /// [`snapshot`]: MSOCModel::snapshot
    pub fn restore(&mut self, snapshot: &[(String, ndarray::ArrayD<f32>)]) -> Result<()> {
        for (full_name, value) in snapshot {
            let (prefix, name) = full_name
                .split_once('/')
                .ok_or_else(|| Error::Invalid(format!("malformed snapshot key {full_name}")))?;
            let vs = match prefix {
                "audio" => &mut self.audio_branch.vs,
                "visual" => &mut self.visual_branch.vs,
                "av" => &mut self.av_branch.vs,
                other => {
                    return Err(Error::Invalid(format!("unknown snapshot branch {other}")));
                }
            };
            let id = vs
                .id_of(name)
                .ok_or_else(|| Error::Invalid(format!("snapshot names unknown tensor {full_name}")))?;
            if vs.value(id).shape() != value.shape() {
                return Err(Error::Shape {
                    expected: format!("{:?}", vs.value(id).shape()),
                    got: format!("{:?}", value.shape()),
                });
            }
            vs.set_value(id, value.clone());
        }
        Ok(())
    }

    /// Writes every parameter of all three branches plus enough metadata to
    /// rebuild the model without the originating config file.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0u64;
        for (prefix, vs) in self.branch_stores() {
            for (name, value) in vs.iter_named() {
                let data = value.as_slice().expect("parameters are contiguous");
                for v in data {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: format!("{prefix}/{name}"),
                    shape: value.shape().to_vec(),
                    offset,
                    len: data.len(),
                });
                offset += data.len() as u64;
            }
        }
        let header = CheckpointHeader {
            schema_version: 1,
            mode: self.mode,
            visual_encoder: self.visual_kind,
            use_oc: self.use_oc,
            alpha: self.hyper.alpha,
            m0: self.hyper.m0,
            m1: self.hyper.m1,
            config_hash: config_hash.to_string(),
            tensors,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| ckpt_err(path, format!("encode: {e}")))?;

        let mut out = Vec::with_capacity(12 + header_json.len() + blob.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&blob);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint. Returns the model and the config
    /// hash recorded at save time.
    pub fn load(path: &Path) -> Result<(MSOCModel, String)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(ckpt_err(path, "not a model checkpoint (bad magic)"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let blob_start = 12 + header_len;
        if bytes.len() < blob_start {
            return Err(ckpt_err(path, "truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..blob_start])
            .map_err(|e| ckpt_err(path, format!("header: {e}")))?;
        if header.schema_version != 1 {
            return Err(ckpt_err(
                path,
                format!("unsupported schema version {}", header.schema_version),
            ));
        }
        let blob = &bytes[blob_start..];

        let cfg = ModelConfig {
            mode: header.mode,
            visual_encoder: header.visual_encoder,
            use_oc: header.use_oc,
        };
        let hyper = OcHyper::new(header.alpha, header.m0, header.m1)?;
        let mut model = MSOCModel::new(&cfg, hyper, 0);

        let mut loaded = 0usize;
        for entry in &header.tensors {
            let (prefix, rest) = entry
                .name
                .split_once('/')
                .ok_or_else(|| ckpt_err(path, format!("malformed tensor name `{}`", entry.name)))?;
            let vs: &mut VarStore<f32> = match prefix {
                "audio" => &mut model.audio_branch.vs,
                "visual" => &mut model.visual_branch.vs,
                "av" => &mut model.av_branch.vs,
                other => return Err(ckpt_err(path, format!("unknown branch `{other}`"))),
            };
            let id = vs
                .id_of(rest)
                .ok_or_else(|| ckpt_err(path, format!("unexpected tensor `{}`", entry.name)))?;
            if vs.value(id).shape() != entry.shape.as_slice() {
                return Err(ckpt_err(
                    path,
                    format!(
                        "shape mismatch on `{}`: file {:?}, model {:?}",
                        entry.name,
                        entry.shape,
                        vs.value(id).shape()
                    ),
                ));
            }
            let start = entry.offset as usize * 4;
            let end = start + entry.len * 4;
            if end > blob.len() {
                return Err(ckpt_err(path, format!("tensor `{}` out of range", entry.name)));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ndarray::ArrayD::from_shape_vec(entry.shape.clone(), data)
                .map_err(|e| ckpt_err(path, format!("tensor `{}`: {e}", entry.name)))?;
            vs.set_value(id, arr);
            loaded += 1;
        }
        let expected = model.audio_branch.vs.num_tensors()
            + model.visual_branch.vs.num_tensors()
            + model.av_branch.vs.num_tensors();
        if loaded != expected {
            return Err(ckpt_err(
                path,
                format!("checkpoint holds {loaded} tensors, model needs {expected}"),
            ));
        }
        Ok((model, header.config_hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array5};
    use rand_distr::{Distribution, StandardNormal};

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            mode: Mode::Msoc,
            visual_encoder: VisualEncoderKind::Resnet,
            use_oc: true,
        }
    }

    fn toy_batch(b: usize, t: usize, side: usize, seed: u64) -> ClipBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: Vec<usize>| -> Vec<f32> {
            (0..shape.iter().product::<usize>())
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect()
        };
        let audio =
            Array3::from_shape_vec((b, 4 * t, 13), draw(vec![b, 4 * t, 13])).unwrap();
        let visual =
            Array5::from_shape_vec((b, t, 3, side, side), draw(vec![b, t, 3, side, side]))
                .unwrap();
        let audio_labels = Array1::from_iter((0..b).map(|i| (i % 2) as u8));
        let visual_labels = Array1::from_iter((0..b).map(|i| ((i / 2) % 2) as u8));
        let av_labels = Array1::from_iter(
            audio_labels
                .iter()
                .zip(visual_labels.iter())
                .map(|(&a, &v)| a.max(v)),
        );
        ClipBatch::new(audio, visual, audio_labels, visual_labels, av_labels).unwrap()
    }

    #[test]
    fn forward_bounds_and_shapes() {
        let model = MSOCModel::new(&test_cfg(), OcHyper::default(), 7);
        let batch = toy_batch(4, 2, 32, 1);
        let out = model.forward(&batch).unwrap();
        assert_eq!(out.audio_emb.dim(), (4, 128));
        assert_eq!(out.visual_emb.dim(), (4, 128));
        assert_eq!(out.audio_oc_score.len(), 4);
        assert_eq!(out.visual_oc_score.len(), 4);
        assert_eq!(out.av_real_prob.len(), 4);
        for i in 0..4 {
            assert!((-1.0..=1.0).contains(&out.audio_oc_score[i]));
            assert!((-1.0..=1.0).contains(&out.visual_oc_score[i]));
            assert!((0.0..=1.0).contains(&out.av_real_prob[i]));
        }
    }

    #[test]
    fn forced_head_bias_saturates_real_prob() {
        let mut model = MSOCModel::new(&test_cfg(), OcHyper::default(), 7);
        let fc3 = &model.av_branch.fc3;
        let w_shape = model.av_branch.vs.value(fc3.w).raw_dim();
        model
            .av_branch
            .vs
            .set_value(fc3.w, ndarray::ArrayD::zeros(w_shape));
        model.av_branch.vs.set_value(
            fc3.b,
            ndarray::arr1(&[10.0f32, -10.0]).into_dyn(),
        );
        let out = model.forward(&toy_batch(3, 2, 32, 2)).unwrap();
        for &p in out.av_real_prob.iter() {
            assert!(p > 0.999_99, "got {p}");
        }
    }

    #[test]
    fn loss_breakdown_identity_and_positivity() {
        let model = MSOCModel::new(&test_cfg(), OcHyper::default(), 8);
        for seed in 0..3 {
            let batch = toy_batch(4, 2, 32, 100 + seed);
            let l = model.compute_losses(&batch).unwrap();
            assert_eq!(
                l.l_av_total,
                l.l_aoc_av.unwrap() + l.l_voc_av.unwrap() + l.l_ce_av
            );
            for term in [
                l.l_aoc_audio.unwrap(),
                l.l_voc_visual.unwrap(),
                l.l_aoc_av.unwrap(),
                l.l_voc_av.unwrap(),
                l.l_ce_av,
            ] {
                assert!(term >= 0.0, "negative loss term {term}");
            }
        }
    }

    #[test]
    fn modality_labels_feed_their_own_terms() {
        let model = MSOCModel::new(&test_cfg(), OcHyper::default(), 9);
        let base = toy_batch(4, 2, 32, 5);
        let mut flipped_audio = base.clone();
        flipped_audio
            .audio_labels
            .mapv_inplace(|y| 1 - y);

        let l0 = model.compute_losses(&base).unwrap();
        let l1 = model.compute_losses(&flipped_audio).unwrap();
        // Audio labels drive the two AOC terms; visual and CE terms are
        // untouched by the flip.
        assert_ne!(l0.l_aoc_audio, l1.l_aoc_audio);
        assert_ne!(l0.l_aoc_av, l1.l_aoc_av);
        assert_eq!(l0.l_voc_visual, l1.l_voc_visual);
        assert_eq!(l0.l_voc_av, l1.l_voc_av);
        assert_eq!(l0.l_ce_av, l1.l_ce_av);
    }

    #[test]
    fn fusion_worked_examples() {
        let d = fuse_one(0.8, 0.9, 0.9);
        assert_eq!((d.audio_bin, d.visual_bin), (1, 1));
        assert!((d.fused_score - 0.9667).abs() < 5e-5);
        assert_eq!(d.verdict, 0);

        let d = fuse_one(0.8, 0.3, 0.7);
        assert_eq!((d.audio_bin, d.visual_bin), (1, 0));
        assert!((d.fused_score - 0.5667).abs() < 5e-5);
        assert_eq!(d.verdict, 0);

        let d = fuse_one(-0.2, 0.1, 0.9);
        assert_eq!((d.audio_bin, d.visual_bin), (0, 0));
        assert!((d.fused_score - 0.3).abs() < 1e-6);
        assert_eq!(d.verdict, 1);

        // Exact boundary: (1 + 0 + 0.5)/3 = 0.5 → fake.
        let d = fuse_one(0.9, 0.1, 0.5);
        assert_eq!(d.fused_score, 0.5);
        assert_eq!(d.verdict, 1);
    }

    #[test]
    fn avoc_threshold_examples() {
        let mk = |p: f32| BranchOutputs {
            audio_emb: Array2::zeros((1, 2)),
            visual_emb: Array2::zeros((1, 2)),
            av_audio_emb: Array2::zeros((1, 2)),
            av_visual_emb: Array2::zeros((1, 2)),
            audio_oc_score: ndarray::arr1(&[0.0]),
            visual_oc_score: ndarray::arr1(&[0.0]),
            av_real_prob: ndarray::arr1(&[p]),
        };
        assert_eq!(fuse_avoc(&mk(0.51))[0], 0);
        assert_eq!(fuse_avoc(&mk(0.5))[0], 1);
        assert_eq!(fuse_avoc(&mk(0.49))[0], 1);
    }

    #[test]
    fn explain_reads_binarized_scores() {
        let out = BranchOutputs {
            audio_emb: Array2::zeros((2, 2)),
            visual_emb: Array2::zeros((2, 2)),
            av_audio_emb: Array2::zeros((2, 2)),
            av_visual_emb: Array2::zeros((2, 2)),
            audio_oc_score: ndarray::arr1(&[-0.3, 0.9]),
            visual_oc_score: ndarray::arr1(&[0.8, 0.2]),
            av_real_prob: ndarray::arr1(&[0.4, 0.6]),
        };
        let attr = explain(&out);
        // FARV-like: audio blamed, visual cleared.
        assert!(!attr[0].audio_real && attr[0].visual_real);
        // RAFV-like: the reverse.
        assert!(attr[1].audio_real && !attr[1].visual_real);
    }

    fn snapshot(vs: &VarStore<f32>) -> Vec<Vec<f32>> {
        vs.iter_named()
            .map(|(_, v)| v.iter().copied().collect())
            .collect()
    }

    #[test]
    fn branch_steps_are_isolated() {
        let mut model = MSOCModel::new(&test_cfg(), OcHyper::default(), 10);
        let batch = toy_batch(2, 2, 32, 3);
        let mut opts = model.optimizers(1e-3);

        let v0 = snapshot(&model.visual_branch.vs);
        let av0 = snapshot(&model.av_branch.vs);
        let a0 = snapshot(&model.audio_branch.vs);
        model.step_audio(&batch, &mut opts.audio).unwrap();
        assert_ne!(a0, snapshot(&model.audio_branch.vs));
        assert_eq!(v0, snapshot(&model.visual_branch.vs));
        assert_eq!(av0, snapshot(&model.av_branch.vs));

        let a1 = snapshot(&model.audio_branch.vs);
        model.step_visual(&batch, &mut opts.visual).unwrap();
        assert_ne!(v0, snapshot(&model.visual_branch.vs));
        assert_eq!(a1, snapshot(&model.audio_branch.vs));
        assert_eq!(av0, snapshot(&model.av_branch.vs));

        let v1 = snapshot(&model.visual_branch.vs);
        model.step_av(&batch, &mut opts.av).unwrap();
        assert_ne!(av0, snapshot(&model.av_branch.vs));
        assert_eq!(a1, snapshot(&model.audio_branch.vs));
        assert_eq!(v1, snapshot(&model.visual_branch.vs));
    }

    #[test]
    fn single_step_decreases_each_branch_loss() {
        let mut model = MSOCModel::new(&test_cfg(), OcHyper::default(), 11);
        let batch = toy_batch(4, 2, 32, 4);
        let mut opts = model.optimizers(1e-5);
        let before = model.compute_losses(&batch).unwrap();
        model.train_step(&batch, &mut opts).unwrap();
        let after = model.compute_losses(&batch).unwrap();
        assert!(after.l_aoc_audio.unwrap() < before.l_aoc_audio.unwrap());
        assert!(after.l_voc_visual.unwrap() < before.l_voc_visual.unwrap());
        assert!(after.l_av_total < before.l_av_total);
    }

    #[test]
    fn avoc_mode_trains_only_av_branch() {
        let cfg = ModelConfig {
            mode: Mode::Avoc,
            ..test_cfg()
        };
        let mut model = MSOCModel::new(&cfg, OcHyper::default(), 12);
        let batch = toy_batch(2, 2, 32, 6);
        let mut opts = model.optimizers(1e-3);
        let a0 = snapshot(&model.audio_branch.vs);
        let v0 = snapshot(&model.visual_branch.vs);
        let av0 = snapshot(&model.av_branch.vs);
        let l = model.train_step(&batch, &mut opts).unwrap();
        assert_eq!(a0, snapshot(&model.audio_branch.vs));
        assert_eq!(v0, snapshot(&model.visual_branch.vs));
        assert_ne!(av0, snapshot(&model.av_branch.vs));
        assert!(l.l_aoc_audio.is_none() && l.l_voc_visual.is_none());
        assert!(l.is_finite());
        assert!(l.l_av_total.is_finite());
    }

    #[test]
    fn no_oc_mode_freezes_centers_and_uses_ce_only() {
        let cfg = ModelConfig {
            mode: Mode::Avoc,
            visual_encoder: VisualEncoderKind::Resnet,
            use_oc: false,
        };
        let mut model = MSOCModel::new(&cfg, OcHyper::default(), 13);
        let batch = toy_batch(4, 2, 32, 7);
        let mut opts = model.optimizers(1e-4);
        let c_a0 = model.av_branch.vs.value(model.av_branch.audio_center).clone();
        let c_v0 = model.av_branch.vs.value(model.av_branch.visual_center).clone();
        let before = model.compute_losses(&batch).unwrap();
        model.train_step(&batch, &mut opts).unwrap();
        let after = model.compute_losses(&batch).unwrap();
        assert_eq!(
            c_a0,
            *model.av_branch.vs.value(model.av_branch.audio_center)
        );
        assert_eq!(
            c_v0,
            *model.av_branch.vs.value(model.av_branch.visual_center)
        );
        assert!(after.l_ce_av < before.l_ce_av);
        // Disabled terms are absent, and the total is exactly what trained.
        assert!(after.l_aoc_av.is_none() && after.l_voc_av.is_none());
        assert_eq!(after.l_av_total, after.l_ce_av);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = MSOCModel::new(&test_cfg(), OcHyper::default(), 14);
        let batch = toy_batch(2, 2, 32, 8);
        // Perturb away from init so the round trip isn't trivially the seed.
        let mut opts = model.optimizers(1e-3);
        model.train_step(&batch, &mut opts).unwrap();
        model.save(&path, "cfg-hash-123").unwrap();

        let (loaded, hash) = MSOCModel::load(&path).unwrap();
        assert_eq!(hash, "cfg-hash-123");
        assert_eq!(loaded.mode, Mode::Msoc);
        let a = model.forward(&batch).unwrap();
        let b = loaded.forward(&batch).unwrap();
        assert_eq!(a.audio_oc_score, b.audio_oc_score);
        assert_eq!(a.visual_oc_score, b.visual_oc_score);
        assert_eq!(a.av_real_prob, b.av_real_prob);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = match MSOCModel::load(&path) {
            Ok(_) => panic!("garbage file loaded as a checkpoint"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("magic"), "got: {err}");
    }
}
