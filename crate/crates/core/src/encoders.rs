//! Feature extractors: a residual audio encoder over the MFCC map (→128-d),
//! a residual visual encoder with a 3-D stem and a temporal conv block
//! (→128-d), and a self-calibrated visual encoder with spatio-temporal
//! inconsistency blocks (→512-d).
//!
//! Widths are deliberately small — each encoder stays well under five million
//! parameters so CPU training at clip scale finishes in minutes.

use ndarray::{concatenate, Array2, Array3, Array4, Array5, Axis, NdFloat};
use rand::Rng;

use crate::nn::conv::{Conv1d, Conv1dCache, Conv2d, Conv2dCache, Conv3d, Conv3dCache};
use crate::nn::layers::{
    avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, mean_over_t,
    mean_over_t_backward, merge_bt, relu, relu_backward, sigmoid, sigmoid_backward, split_bt,
    temporal_diff, temporal_diff_backward, upsample_nearest, upsample_nearest_backward, Linear,
    LinearCache,
};
use crate::nn::VarStore;

/// Join two feature maps along the channel axis. `concatenate` yields a
/// non-contiguous result for axis 1, so normalize before anything downstream
/// asks for a flat slice.
fn concat_channels<F: NdFloat>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    concatenate(Axis(1), &[a.view(), b.view()])
        .unwrap()
        .as_standard_layout()
        .to_owned()
}

// ---------------------------------------------------------------------------
// Basic residual block (3x3 → 3x3, projection skip when shape changes)
// ---------------------------------------------------------------------------

pub struct ResBlock2d {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Option<Conv2d>,
}

pub struct ResBlock2dCache<F> {
    c1: Conv2dCache<F>,
    y1: Array4<F>,
    c2: Conv2dCache<F>,
    proj: Option<Conv2dCache<F>>,
    y: Array4<F>,
}

impl ResBlock2d {
    pub fn new<F: NdFloat>(
        vs: &mut VarStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(
            vs,
            &format!("{name}.conv1"),
            cin,
            cout,
            (3, 3),
            (stride, stride),
            (1, 1),
            rng,
        );
        let conv2 = Conv2d::new(
            vs,
            &format!("{name}.conv2"),
            cout,
            cout,
            (3, 3),
            (1, 1),
            (1, 1),
            rng,
        );
        let proj = (cin != cout || stride != 1).then(|| {
            Conv2d::new(
                vs,
                &format!("{name}.proj"),
                cin,
                cout,
                (1, 1),
                (stride, stride),
                (0, 0),
                rng,
            )
        });
        ResBlock2d { conv1, conv2, proj }
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, ResBlock2dCache<F>) {
        let (h1, c1) = self.conv1.forward(vs, x);
        let y1 = relu(&h1);
        let (h2, c2) = self.conv2.forward(vs, &y1);
        let (skip, proj_cache) = match &self.proj {
            Some(p) => {
                let (s, pc) = p.forward(vs, x);
                (s, Some(pc))
            }
            None => (x.clone(), None),
        };
        let y = relu(&(h2 + &skip));
        (
            y.clone(),
            ResBlock2dCache {
                c1,
                y1,
                c2,
                proj: proj_cache,
                y,
            },
        )
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: ResBlock2dCache<F>,
        gout: &Array4<F>,
    ) -> Array4<F> {
        let gsum = relu_backward(&cache.y, gout);
        let g_h1 = self.conv2.backward(vs, cache.c2, &gsum);
        let g_y1 = relu_backward(&cache.y1, &g_h1);
        let mut gin = self.conv1.backward(vs, cache.c1, &g_y1);
        match (&self.proj, cache.proj) {
            (Some(p), Some(pc)) => {
                let g_skip = p.backward(vs, pc, &gsum);
                gin.zip_mut_with(&g_skip, |a, &b| *a = *a + b);
            }
            _ => gin.zip_mut_with(&gsum, |a, &b| *a = *a + b),
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Audio encoder: MFCC map as a 1-channel image, 4 residual stages, GAP, fc
// ---------------------------------------------------------------------------

pub const AUDIO_EMB_DIM: usize = 128;

pub struct AudioResNet {
    stem: Conv2d,
    stages: Vec<ResBlock2d>,
    fc: Linear,
}

pub struct AudioCache<F> {
    stem: Conv2dCache<F>,
    stem_y: Array4<F>,
    stages: Vec<ResBlock2dCache<F>>,
    gap_hw: (usize, usize),
    fc: LinearCache<F>,
}

impl AudioResNet {
    pub fn new<F: NdFloat>(vs: &mut VarStore<F>, name: &str, rng: &mut impl Rng) -> Self {
        let stem = Conv2d::new(vs, &format!("{name}.stem"), 1, 16, (3, 3), (1, 1), (1, 1), rng);
        let widths = [(16, 16, 1), (16, 32, 2), (32, 64, 2), (64, 128, 2)];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| {
                ResBlock2d::new(vs, &format!("{name}.stage{}", i + 1), cin, cout, s, rng)
            })
            .collect();
        let fc = Linear::new(vs, &format!("{name}.fc"), 128, AUDIO_EMB_DIM, rng);
        AudioResNet { stem, stages, fc }
    }

    /// `[B, Ta, n_mfcc] -> [B, 128]`. Needs `Ta >= 8` so the strided stages
    /// keep a nonzero time extent.
    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array3<F>,
    ) -> (Array2<F>, AudioCache<F>) {
        let (b, ta, nm) = x.dim();
        assert!(ta >= 8, "audio encoder needs Ta >= 8, got {ta}");
        let x4 = x
            .clone()
            .into_shape_with_order((b, 1, ta, nm))
            .unwrap();
        let (h, stem_c) = self.stem.forward(vs, &x4);
        let mut cur = relu(&h);
        let stem_y = cur.clone();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (next, cache) = stage.forward(vs, &cur);
            stage_caches.push(cache);
            cur = next;
        }
        let (_, _, gh, gw) = cur.dim();
        let pooled = global_avg_pool(&cur);
        let (emb, fc_c) = self.fc.forward(vs, &pooled);
        (
            emb,
            AudioCache {
                stem: stem_c,
                stem_y,
                stages: stage_caches,
                gap_hw: (gh, gw),
                fc: fc_c,
            },
        )
    }

    pub fn backward<F: NdFloat>(&self, vs: &mut VarStore<F>, cache: AudioCache<F>, gout: &Array2<F>) {
        let g_pool = self.fc.backward(vs, cache.fc, gout);
        let mut g = global_avg_pool_backward(&g_pool, cache.gap_hw);
        for (stage, c) in self.stages.iter().zip(cache.stages).rev() {
            g = stage.backward(vs, c, &g);
        }
        let g = relu_backward(&cache.stem_y, &g);
        let _ = self.stem.backward(vs, cache.stem, &g);
    }
}

// ---------------------------------------------------------------------------
// Visual residual encoder: 3-D stem, per-frame residual stages, temporal conv
// ---------------------------------------------------------------------------

pub const VISUAL_RESNET_EMB_DIM: usize = 128;

pub struct VisualResNet {
    stem: Conv3d,
    stages: Vec<ResBlock2d>,
    tconv: Conv1d,
    fc: Linear,
}

pub struct VisualResNetCache<F> {
    t: usize,
    stem: Conv3dCache<F>,
    stem_y: Array5<F>,
    stages: Vec<ResBlock2dCache<F>>,
    gap_hw: (usize, usize),
    tconv: Conv1dCache<F>,
    tconv_y: Array3<F>,
    fc: LinearCache<F>,
}

impl VisualResNet {
    pub fn new<F: NdFloat>(vs: &mut VarStore<F>, name: &str, rng: &mut impl Rng) -> Self {
        // Temporal kernel 3 fuses adjacent-frame motion before the per-frame
        // stages; spatial stride 4 brings 100x100 down to 25x25 immediately.
        let stem = Conv3d::new(
            vs,
            &format!("{name}.stem3d"),
            3,
            8,
            (3, 5, 5),
            (1, 4, 4),
            (1, 2, 2),
            rng,
        );
        let widths = [(8, 16, 2), (16, 32, 2), (32, 64, 2)];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| {
                ResBlock2d::new(vs, &format!("{name}.stage{}", i + 1), cin, cout, s, rng)
            })
            .collect();
        let tconv = Conv1d::new(vs, &format!("{name}.tconv"), 64, 128, 3, 1, 1, rng);
        let fc = Linear::new(vs, &format!("{name}.fc"), 128, VISUAL_RESNET_EMB_DIM, rng);
        VisualResNet {
            stem,
            stages,
            tconv,
            fc,
        }
    }

    /// `[B, T, 3, H, W] -> [B, 128]`.
    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array5<F>,
    ) -> (Array2<F>, VisualResNetCache<F>) {
        let (b, t, c, _, _) = x.dim();
        assert_eq!(c, 3, "visual input must be RGB");
        // [B, T, 3, H, W] -> [B, 3, T, H, W] for the 3-D stem.
        let xc = x
            .view()
            .permuted_axes([0, 2, 1, 3, 4])
            .as_standard_layout()
            .to_owned();
        let (hm, stem_c) = self.stem.forward(vs, &xc);
        let stem_y = relu(&hm);

        // Back to per-frame layout and through the 2-D stages.
        let per_frame = stem_y
            .view()
            .permuted_axes([0, 2, 1, 3, 4])
            .as_standard_layout()
            .to_owned();
        let mut cur = merge_bt(per_frame);
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (next, cache) = stage.forward(vs, &cur);
            stage_caches.push(cache);
            cur = next;
        }
        let (_, ch, gh, gw) = cur.dim();
        let pooled = global_avg_pool(&cur); // [B*T, 64]
        let seq = pooled
            .into_shape_with_order((b, t, ch))
            .unwrap()
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned(); // [B, 64, T]
        let (tc, tconv_c) = self.tconv.forward(vs, &seq);
        let tconv_y = relu(&tc); // [B, 128, T]
        let clip = mean_over_t(
            &tconv_y
                .view()
                .permuted_axes([0, 2, 1])
                .as_standard_layout()
                .to_owned(),
        ); // [B, 128]
        let (emb, fc_c) = self.fc.forward(vs, &clip);
        (
            emb,
            VisualResNetCache {
                t,
                stem: stem_c,
                stem_y,
                stages: stage_caches,
                gap_hw: (gh, gw),
                tconv: tconv_c,
                tconv_y,
                fc: fc_c,
            },
        )
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: VisualResNetCache<F>,
        gout: &Array2<F>,
    ) {
        let t = cache.t;
        let g_clip = self.fc.backward(vs, cache.fc, gout);
        let g_seq = mean_over_t_backward(&g_clip, t) // [B, T, 128]
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned(); // [B, 128, T]
        let g_tc = relu_backward(&cache.tconv_y, &g_seq);
        let g_pool_seq = self.tconv.backward(vs, cache.tconv, &g_tc); // [B, 64, T]
        let (b, ch, _) = g_pool_seq.dim();
        let g_pool = g_pool_seq
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * t, ch))
            .unwrap();
        let mut g = global_avg_pool_backward(&g_pool, cache.gap_hw);
        for (stage, c) in self.stages.iter().zip(cache.stages).rev() {
            g = stage.backward(vs, c, &g);
        }
        let g5 = split_bt(g, t)
            .permuted_axes([0, 2, 1, 3, 4])
            .as_standard_layout()
            .to_owned(); // [B, C, T, h, w]
        let g5 = relu_backward(&cache.stem_y, &g5);
        let _ = self.stem.backward(vs, cache.stem, &g5);
    }
}

// ---------------------------------------------------------------------------
// Self-calibrated convolution stage
// ---------------------------------------------------------------------------

/// Residual stage whose main path is a self-calibrated convolution: one
/// channel half takes a plain strided conv; the other is modulated by a
/// sigmoid gate built from its own 4x-downsampled context before its conv.
/// The downsample/upsample round trip is what widens the receptive field.
pub struct ScStage {
    conv_a: Conv2d,
    conv_g: Conv2d,
    conv_b: Conv2d,
    proj: Conv2d,
    cin: usize,
}

pub struct ScStageCache<F> {
    x2: Array4<F>,
    ca: Conv2dCache<F>,
    cg: Conv2dCache<F>,
    cb: Conv2dCache<F>,
    proj: Conv2dCache<F>,
    gate: Array4<F>,
    pool_hw: (usize, usize),
    in_hw: (usize, usize),
    y: Array4<F>,
}

const SC_POOL: usize = 4;

impl ScStage {
    pub fn new<F: NdFloat>(
        vs: &mut VarStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(cin % 2 == 0 && cout % 2 == 0, "SC stage needs even widths");
        let half_in = cin / 2;
        let half_out = cout / 2;
        let conv_a = Conv2d::new(
            vs,
            &format!("{name}.conv_a"),
            half_in,
            half_out,
            (3, 3),
            (stride, stride),
            (1, 1),
            rng,
        );
        let conv_g = Conv2d::new(
            vs,
            &format!("{name}.conv_g"),
            half_in,
            half_in,
            (3, 3),
            (1, 1),
            (1, 1),
            rng,
        );
        let conv_b = Conv2d::new(
            vs,
            &format!("{name}.conv_b"),
            half_in,
            half_out,
            (3, 3),
            (stride, stride),
            (1, 1),
            rng,
        );
        let proj = Conv2d::new(
            vs,
            &format!("{name}.proj"),
            cin,
            cout,
            (1, 1),
            (stride, stride),
            (0, 0),
            rng,
        );
        ScStage {
            conv_a,
            conv_g,
            conv_b,
            proj,
            cin,
        }
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, ScStageCache<F>) {
        let (_, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "SC stage channel mismatch");
        let half = cin / 2;
        let x1 = x.slice(ndarray::s![.., ..half, .., ..]).to_owned();
        let x2 = x.slice(ndarray::s![.., half.., .., ..]).to_owned();

        let (y1, ca) = self.conv_a.forward(vs, &x1);

        let pooled = avg_pool2d(&x2, SC_POOL);
        let (ph, pw) = (pooled.dim().2, pooled.dim().3);
        let (gp, cg) = self.conv_g.forward(vs, &pooled);
        let up = upsample_nearest(&gp, SC_POOL, (h, w));
        let gate = sigmoid(&(&x2 + &up));
        let x2g = &x2 * &gate;
        let (y2, cb) = self.conv_b.forward(vs, &x2g);

        let main = concat_channels(&y1, &y2);
        let (skip, pc) = self.proj.forward(vs, x);
        let y = relu(&(main + &skip));
        (
            y.clone(),
            ScStageCache {
                x2,
                ca,
                cg,
                cb,
                proj: pc,
                gate,
                pool_hw: (ph, pw),
                in_hw: (h, w),
                y,
            },
        )
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: ScStageCache<F>,
        gout: &Array4<F>,
    ) -> Array4<F> {
        let gsum = relu_backward(&cache.y, gout);
        let half_out = gsum.dim().1 / 2;
        let g_y1 = gsum.slice(ndarray::s![.., ..half_out, .., ..]).to_owned();
        let g_y2 = gsum.slice(ndarray::s![.., half_out.., .., ..]).to_owned();

        let g_x1 = self.conv_a.backward(vs, cache.ca, &g_y1);

        let g_x2g = self.conv_b.backward(vs, cache.cb, &g_y2);
        // x2g = x2 ⊙ gate, gate = σ(x2 + up): x2 receives three contributions.
        let mut g_x2 = &g_x2g * &cache.gate;
        let g_gate = &g_x2g * &cache.x2;
        let g_pre = sigmoid_backward(&cache.gate, &g_gate);
        g_x2.zip_mut_with(&g_pre, |a, &b| *a = *a + b);
        let g_up = upsample_nearest_backward(&g_pre, SC_POOL, cache.pool_hw);
        let g_pooled = self.conv_g.backward(vs, cache.cg, &g_up);
        let g_from_pool = avg_pool2d_backward(&g_pooled, SC_POOL, cache.in_hw);
        g_x2.zip_mut_with(&g_from_pool, |a, &b| *a = *a + b);

        let mut gin = concat_channels(&g_x1, &g_x2);
        let g_skip = self.proj.backward(vs, cache.proj, &gsum);
        gin.zip_mut_with(&g_skip, |a, &b| *a = *a + b);
        gin
    }
}

// ---------------------------------------------------------------------------
// Spatio-temporal inconsistency block
// ---------------------------------------------------------------------------

/// Shape-preserving residual block over per-frame features `[B·T, C, H, W]`:
/// one channel half feeds a spatial conv, the other feeds a conv over forward
/// temporal differences, and both rejoin the identity path. A clip that is
/// static in time zeroes the difference stream's input exactly.
pub struct StilBlock {
    conv_s: Conv2d,
    conv_t: Conv2d,
}

pub struct StilCache<F> {
    t: usize,
    cs: Conv2dCache<F>,
    ct: Conv2dCache<F>,
    c: usize,
}

impl StilBlock {
    pub fn new<F: NdFloat>(
        vs: &mut VarStore<F>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(channels % 2, 0, "STIL needs an even channel count");
        let half = channels / 2;
        let conv_s = Conv2d::new(
            vs,
            &format!("{name}.spatial"),
            half,
            channels,
            (3, 3),
            (1, 1),
            (1, 1),
            rng,
        );
        let conv_t = Conv2d::new(
            vs,
            &format!("{name}.tdiff"),
            half,
            channels,
            (3, 3),
            (1, 1),
            (1, 1),
            rng,
        );
        StilBlock { conv_s, conv_t }
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array4<F>,
        t: usize,
    ) -> (Array4<F>, StilCache<F>) {
        let (bt, c, _, _) = x.dim();
        assert_eq!(bt % t, 0, "batch not divisible by T");
        let half = c / 2;
        let x_a = x.slice(ndarray::s![.., ..half, .., ..]).to_owned();
        let x_b = x.slice(ndarray::s![.., half.., .., ..]).to_owned();
        let diff = temporal_diff(&x_b, t);

        let (s, cs) = self.conv_s.forward(vs, &x_a);
        let (d, ct) = self.conv_t.forward(vs, &diff);
        let y = x + &s + &d;
        (y, StilCache { t, cs, ct, c })
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: StilCache<F>,
        gout: &Array4<F>,
    ) -> Array4<F> {
        let half = cache.c / 2;
        let g_xa = self.conv_s.backward(vs, cache.cs, gout);
        let g_diff = self.conv_t.backward(vs, cache.ct, gout);
        let g_xb = temporal_diff_backward(&g_diff, cache.t);

        let mut gin = gout.clone();
        {
            let mut ga = gin.slice_mut(ndarray::s![.., ..half, .., ..]);
            ga.zip_mut_with(&g_xa, |a, &b| *a = *a + b);
        }
        let mut gb = gin.slice_mut(ndarray::s![.., half.., .., ..]);
        gb.zip_mut_with(&g_xb, |a, &b| *a = *a + b);
        gin
    }
}

// ---------------------------------------------------------------------------
// SCNet-STIL visual encoder
// ---------------------------------------------------------------------------

pub const SCNET_EMB_DIM: usize = 512;

pub struct ScnetStil {
    stem: Conv2d,
    stages: Vec<(ScStage, StilBlock)>,
    fc: Linear,
}

pub struct ScnetStilCache<F> {
    t: usize,
    stem: Conv2dCache<F>,
    stem_y: Array4<F>,
    stages: Vec<(ScStageCache<F>, StilCache<F>)>,
    gap_hw: (usize, usize),
    fc: LinearCache<F>,
}

impl ScnetStil {
    pub fn new<F: NdFloat>(vs: &mut VarStore<F>, name: &str, rng: &mut impl Rng) -> Self {
        let stem = Conv2d::new(vs, &format!("{name}.stem"), 3, 16, (5, 5), (4, 4), (2, 2), rng);
        let widths = [(16, 32), (32, 64), (64, 128)];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                (
                    ScStage::new(vs, &format!("{name}.sc{}", i + 1), cin, cout, 2, rng),
                    StilBlock::new(vs, &format!("{name}.stil{}", i + 1), cout, rng),
                )
            })
            .collect();
        let fc = Linear::new(vs, &format!("{name}.fc"), 128, SCNET_EMB_DIM, rng);
        ScnetStil { stem, stages, fc }
    }

    /// `[B, T, 3, H, W] -> [B, 512]`.
    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array5<F>,
    ) -> (Array2<F>, ScnetStilCache<F>) {
        let (b, t, _, _, _) = x.dim();
        let frames = merge_bt(x.clone());
        let (h, stem_c) = self.stem.forward(vs, &frames);
        let mut cur = relu(&h);
        let stem_y = cur.clone();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for (sc, stil) in &self.stages {
            let (a, sc_cache) = sc.forward(vs, &cur);
            let (bp, stil_cache) = stil.forward(vs, &a, t);
            stage_caches.push((sc_cache, stil_cache));
            cur = bp;
        }
        let (_, _, gh, gw) = cur.dim();
        let pooled = global_avg_pool(&cur); // [B*T, 128]
        let (per_frame, fc_c) = self.fc.forward(vs, &pooled); // [B*T, 512]
        let emb = mean_over_t(
            &per_frame
                .into_shape_with_order((b, t, SCNET_EMB_DIM))
                .unwrap(),
        );
        (
            emb,
            ScnetStilCache {
                t,
                stem: stem_c,
                stem_y,
                stages: stage_caches,
                gap_hw: (gh, gw),
                fc: fc_c,
            },
        )
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: ScnetStilCache<F>,
        gout: &Array2<F>,
    ) {
        let t = cache.t;
        let b = gout.dim().0;
        let g_frames = mean_over_t_backward(gout, t)
            .into_shape_with_order((b * t, SCNET_EMB_DIM))
            .unwrap();
        let g_pool = self.fc.backward(vs, cache.fc, &g_frames);
        let mut g = global_avg_pool_backward(&g_pool, cache.gap_hw);
        for ((sc, stil), (sc_cache, stil_cache)) in
            self.stages.iter().zip(cache.stages).rev()
        {
            g = stil.backward(vs, stil_cache, &g);
            g = sc.backward(vs, sc_cache, &g);
        }
        let g = relu_backward(&cache.stem_y, &g);
        let _ = self.stem.backward(vs, cache.stem, &g);
    }
}

// ---------------------------------------------------------------------------
// Kind-dispatched wrapper
// ---------------------------------------------------------------------------

pub enum VisualEncoder {
    Resnet(VisualResNet),
    ScnetStil(ScnetStil),
}

pub enum VisualCache<F> {
    Resnet(VisualResNetCache<F>),
    ScnetStil(ScnetStilCache<F>),
}

impl VisualEncoder {
    pub fn new<F: NdFloat>(
        kind: crate::config::VisualEncoderKind,
        vs: &mut VarStore<F>,
        name: &str,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            crate::config::VisualEncoderKind::Resnet => {
                VisualEncoder::Resnet(VisualResNet::new(vs, name, rng))
            }
            crate::config::VisualEncoderKind::ScnetStil => {
                VisualEncoder::ScnetStil(ScnetStil::new(vs, name, rng))
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            VisualEncoder::Resnet(_) => VISUAL_RESNET_EMB_DIM,
            VisualEncoder::ScnetStil(_) => SCNET_EMB_DIM,
        }
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array5<F>,
    ) -> (Array2<F>, VisualCache<F>) {
        match self {
            VisualEncoder::Resnet(e) => {
                let (y, c) = e.forward(vs, x);
                (y, VisualCache::Resnet(c))
            }
            VisualEncoder::ScnetStil(e) => {
                let (y, c) = e.forward(vs, x);
                (y, VisualCache::ScnetStil(c))
            }
        }
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: VisualCache<F>,
        gout: &Array2<F>,
    ) {
        match (self, cache) {
            (VisualEncoder::Resnet(e), VisualCache::Resnet(c)) => e.backward(vs, c, gout),
            (VisualEncoder::ScnetStil(e), VisualCache::ScnetStil(c)) => e.backward(vs, c, gout),
            _ => unreachable!("cache from a different encoder kind"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{fd_check, filled};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_f32<Sh: ndarray::ShapeBuilder + Clone>(
        shape: Sh,
        rng: &mut ChaCha8Rng,
    ) -> ndarray::Array<f32, Sh::Dim> {
        use rand_distr::{Distribution, StandardNormal};
        ndarray::Array::from_shape_simple_fn(shape, || {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
    }

    #[test]
    fn audio_encoder_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut vs = VarStore::<f32>::new();
        let enc = AudioResNet::new(&mut vs, "audio", &mut rng);
        let x = rand_f32((2, 100, 13), &mut rng);
        let (a, _) = enc.forward(&vs, &x);
        let (b, _) = enc.forward(&vs, &x);
        assert_eq!(a.dim(), (2, 128));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn audio_encoder_batch_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut vs = VarStore::<f32>::new();
        let enc = AudioResNet::new(&mut vs, "audio", &mut rng);
        let x2 = rand_f32((2, 32, 13), &mut rng);
        let x1 = x2.slice(ndarray::s![0..1, .., ..]).to_owned();
        let (y2, _) = enc.forward(&vs, &x2);
        let (y1, _) = enc.forward(&vs, &x1);
        for j in 0..128 {
            assert!((y1[[0, j]] - y2[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_rows_give_identical_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut vs = VarStore::<f32>::new();
        let enc = AudioResNet::new(&mut vs, "audio", &mut rng);
        let one = rand_f32((1, 32, 13), &mut rng);
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let (y, _) = enc.forward(&vs, &two);
        for j in 0..128 {
            assert_eq!(y[[0, j]], y[[1, j]]);
        }
    }

    #[test]
    fn visual_encoders_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut vs = VarStore::<f32>::new();
        let res = VisualResNet::new(&mut vs, "vres", &mut rng);
        let x = rand_f32((2, 4, 3, 100, 100), &mut rng);
        let (y, _) = res.forward(&vs, &x);
        assert_eq!(y.dim(), (2, 128));
        assert!(y.iter().all(|v| v.is_finite()));

        let mut vs2 = VarStore::<f32>::new();
        let sc = ScnetStil::new(&mut vs2, "vsc", &mut rng);
        let (y, _) = sc.forward(&vs2, &x);
        assert_eq!(y.dim(), (2, 512));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_budgets_stay_desk_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut a = VarStore::<f32>::new();
        AudioResNet::new(&mut a, "audio", &mut rng);
        let mut v = VarStore::<f32>::new();
        VisualResNet::new(&mut v, "visual", &mut rng);
        let mut s = VarStore::<f32>::new();
        ScnetStil::new(&mut s, "visual", &mut rng);
        for (name, vs) in [("audio", &a), ("visual resnet", &v), ("scnet-stil", &s)] {
            let n = vs.num_scalars();
            assert!(n < 5_000_000, "{name} has {n} parameters");
            assert!(n > 10_000, "{name} suspiciously small: {n}");
        }
    }

    /// Every parameter must see a nonzero gradient from one backward pass —
    /// dead branches would silently train a smaller model.
    #[test]
    fn gradient_reaches_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);

        let mut vs = VarStore::<f32>::new();
        let enc = AudioResNet::new(&mut vs, "audio", &mut rng);
        let x = rand_f32((2, 32, 13), &mut rng);
        let (y, cache) = enc.forward(&vs, &x);
        enc.backward(&mut vs, cache, &Array2::from_elem(y.raw_dim(), 1.0));
        assert_all_params_touched(&vs, "audio");

        let mut vs = VarStore::<f32>::new();
        let enc = VisualResNet::new(&mut vs, "visual", &mut rng);
        let x = rand_f32((2, 4, 3, 32, 32), &mut rng);
        let (y, cache) = enc.forward(&vs, &x);
        enc.backward(&mut vs, cache, &Array2::from_elem(y.raw_dim(), 1.0));
        assert_all_params_touched(&vs, "visual resnet");

        let mut vs = VarStore::<f32>::new();
        let enc = ScnetStil::new(&mut vs, "visual", &mut rng);
        let x = rand_f32((2, 4, 3, 64, 64), &mut rng);
        let (y, cache) = enc.forward(&vs, &x);
        enc.backward(&mut vs, cache, &Array2::from_elem(y.raw_dim(), 1.0));
        assert_all_params_touched(&vs, "scnet-stil");
    }

    fn assert_all_params_touched(vs: &VarStore<f32>, which: &str) {
        for id in vs.ids() {
            let nonzero = vs.grad(id).iter().any(|&g| g != 0.0);
            assert!(nonzero, "{which}: no gradient reached `{}`", vs.name_of(id));
        }
    }

    #[test]
    fn static_clip_zeroes_stil_difference_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut vs = VarStore::<f64>::new();
        let stil = StilBlock::new(&mut vs, "stil", 4, &mut rng);

        // Static clip: output minus the spatial contribution must equal the
        // bias-only response of the difference conv (its input is exactly 0).
        let frame = filled(&[1, 4, 5, 5], &mut rng);
        let clip = ndarray::concatenate(
            Axis(0),
            &[frame.view(), frame.view(), frame.view()],
        )
        .unwrap()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
        let (y, _) = stil.forward(&vs, &clip, 3);

        let zeros = Array4::<f64>::zeros((3, 2, 5, 5));
        let (bias_response, _) = stil.conv_t.forward(&vs, &zeros);
        let x_a = clip.slice(ndarray::s![.., ..2, .., ..]).to_owned();
        let (spatial, _) = stil.conv_s.forward(&vs, &x_a);
        let expect = &clip + &spatial + &bias_response;
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stil_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut vs = VarStore::<f64>::new();
        let stil = StilBlock::new(&mut vs, "stil", 4, &mut rng);
        let x = filled(&[4, 4, 3, 3], &mut rng); // 2 clips x 2 frames
        let seed = filled(&[4, 4, 3, 3], &mut rng);

        let (_, cache) = stil.forward(&vs, &x.clone().into_dimensionality().unwrap(), 2);
        vs.zero_grads();
        let gin = stil
            .backward(&mut vs, cache, &seed.clone().into_dimensionality().unwrap())
            .into_dyn();

        let ids: Vec<_> = vs.ids().collect();
        fd_check(&mut vs, &ids, &x, &seed, &gin, |vs, x| {
            stil.forward(vs, &x.clone().into_dimensionality().unwrap(), 2).0.into_dyn()
        });
    }

    #[test]
    fn sc_stage_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut vs = VarStore::<f64>::new();
        let sc = ScStage::new(&mut vs, "sc", 4, 6, 2, &mut rng);
        let x = filled(&[2, 4, 8, 8], &mut rng);
        let seed = filled(&[2, 6, 4, 4], &mut rng);

        let (y, cache) = sc.forward(&vs, &x.clone().into_dimensionality().unwrap());
        assert_eq!(y.dim(), (2, 6, 4, 4));
        vs.zero_grads();
        let gin = sc
            .backward(&mut vs, cache, &seed.clone().into_dimensionality().unwrap())
            .into_dyn();

        let ids: Vec<_> = vs.ids().collect();
        fd_check(&mut vs, &ids, &x, &seed, &gin, |vs, x| {
            sc.forward(vs, &x.clone().into_dimensionality().unwrap()).0.into_dyn()
        });
    }

    #[test]
    fn res_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut vs = VarStore::<f64>::new();
        let block = ResBlock2d::new(&mut vs, "rb", 3, 5, 2, &mut rng);
        let x = filled(&[2, 3, 6, 6], &mut rng);
        let seed = filled(&[2, 5, 3, 3], &mut rng);

        let (_, cache) = block.forward(&vs, &x.clone().into_dimensionality().unwrap());
        vs.zero_grads();
        let gin = block
            .backward(&mut vs, cache, &seed.clone().into_dimensionality().unwrap())
            .into_dyn();

        let ids: Vec<_> = vs.ids().collect();
        fd_check(&mut vs, &ids, &x, &seed, &gin, |vs, x| {
            block.forward(vs, &x.clone().into_dimensionality().unwrap()).0.into_dyn()
        });
    }

    /// End-to-end gradient check through a whole (tiny-input) encoder: the
    /// composition of layer backwards must match finite differences too.
    #[test]
    fn audio_encoder_end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut vs = VarStore::<f64>::new();
        let enc = AudioResNet::new(&mut vs, "audio", &mut rng);
        let x = filled(&[1, 8, 13], &mut rng);
        let seed = filled(&[1, 128], &mut rng);

        let (_, cache) = enc.forward(&vs, &x.clone().into_dimensionality().unwrap());
        vs.zero_grads();
        enc.backward(
            &mut vs,
            cache,
            &seed.clone().into_dimensionality().unwrap(),
        );

        // Spot-check a sample of parameters (full enumeration would be slow).
        let ids: Vec<_> = vs.ids().collect();
        let spot: Vec<_> = ids.iter().step_by(5).copied().collect();
        let loss = |vs: &VarStore<f64>| -> f64 {
            let (y, _) = enc.forward(vs, &x.clone().into_dimensionality().unwrap());
            y.iter().zip(seed.iter()).map(|(a, b)| a * b).sum()
        };
        for id in spot {
            let base = vs.value(id).clone();
            for idx in (0..base.len()).step_by(23.max(base.len() / 4)) {
                let mut p = base.clone();
                p.as_slice_mut().unwrap()[idx] += 1e-5;
                vs.set_value(id, p);
                let up = loss(&vs);
                let mut p = base.clone();
                p.as_slice_mut().unwrap()[idx] -= 1e-5;
                vs.set_value(id, p);
                let down = loss(&vs);
                vs.set_value(id, base.clone());
                let numeric = (up - down) / 2e-5;
                let analytic = vs.grad(id).as_slice().unwrap()[idx];
                crate::nn::check::assert_close(
                    numeric,
                    analytic,
                    &format!("{}[{idx}]", vs.name_of(id)),
                );
            }
        }
    }
}
