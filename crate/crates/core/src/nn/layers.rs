//! Dense, activation, pooling, and temporal plumbing layers.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, Array5, Axis, Dimension, Ix2, NdFloat};
use rand::Rng;

use super::{Init, ParamId, VarStore};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearCache<F> {
    input: Array2<F>,
}

impl Linear {
    pub fn new<F: NdFloat>(
        vs: &mut VarStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = vs.var(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::KaimingNormal { fan_in: in_dim },
            rng,
        );
        let b = vs.var(format!("{name}.bias"), &[out_dim], Init::Zeros, rng);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LinearCache<F>) {
        assert_eq!(x.ncols(), self.in_dim, "linear input width");
        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let bias = vs.value(self.b);
        let mut y = Array2::<F>::zeros((x.nrows(), self.out_dim));
        general_mat_mul(F::one(), x, &wmat.t(), F::zero(), &mut y.view_mut());
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + bias[j];
            }
        }
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: LinearCache<F>,
        gout: &Array2<F>,
    ) -> Array2<F> {
        let x = &cache.input;
        assert_eq!(gout.dim(), (x.nrows(), self.out_dim), "linear grad shape");
        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap().to_owned();

        let mut dw = Array2::<F>::zeros((self.out_dim, self.in_dim));
        general_mat_mul(F::one(), &gout.t(), x, F::zero(), &mut dw.view_mut());
        let db = gout.sum_axis(Axis(0));
        let mut gin = Array2::<F>::zeros(x.raw_dim());
        general_mat_mul(F::one(), gout, &wmat.view(), F::zero(), &mut gin.view_mut());

        vs.accum_grad(self.w, dw.into_dyn().view());
        vs.accum_grad(self.b, db.into_dyn().view());
        gin
    }
}

// ---------------------------------------------------------------------------
// Activations (stateless; the cache is the forward output)
// ---------------------------------------------------------------------------

pub fn relu<F: NdFloat, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v.max(F::zero()))
}

/// `y` is the relu output; gradient passes where the unit was active.
pub fn relu_backward<F: NdFloat, D: Dimension>(
    y: &ndarray::Array<F, D>,
    gout: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |gv, &yv| {
        if yv <= F::zero() {
            *gv = F::zero();
        }
    });
    g
}

pub fn sigmoid<F: NdFloat, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| {
        if v >= F::zero() {
            F::one() / (F::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (F::one() + e)
        }
    })
}

/// `y` is the sigmoid output: g · y · (1 − y).
pub fn sigmoid_backward<F: NdFloat, D: Dimension>(
    y: &ndarray::Array<F, D>,
    gout: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |gv, &yv| *gv = *gv * yv * (F::one() - yv));
    g
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// Global average pool over the spatial dims: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<F: NdFloat>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let scale = F::one() / F::from(h * w).unwrap();
    let mut y = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            y[[bi, ci]] = x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: NdFloat>(
    gout: &Array2<F>,
    (h, w): (usize, usize),
) -> Array4<F> {
    let (b, c) = gout.dim();
    let scale = F::one() / F::from(h * w).unwrap();
    let mut gin = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            gin.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(gout[[bi, ci]] * scale);
        }
    }
    gin
}

/// Non-overlapping k×k average pooling over full windows; a trailing extent
/// smaller than `k` is dropped (the paired upsample clamps onto the last
/// window, so every input position still receives gate information).
pub fn avg_pool2d<F: NdFloat>(x: &Array4<F>, k: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (ph, pw) = (h / k, w / k);
    assert!(ph >= 1 && pw >= 1, "pooling {h}x{w} by {k} leaves nothing");
    let scale = F::one() / F::from(k * k).unwrap();
    let mut y = Array4::<F>::zeros((b, c, ph, pw));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for oy in 0..ph {
                for ox in 0..pw {
                    let mut acc = F::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc = acc + plane[[oy * k + dy, ox * k + dx]];
                        }
                    }
                    y[[bi, ci, oy, ox]] = acc * scale;
                }
            }
        }
    }
    y
}

pub fn avg_pool2d_backward<F: NdFloat>(
    gout: &Array4<F>,
    k: usize,
    (h, w): (usize, usize),
) -> Array4<F> {
    let (b, c, ph, pw) = gout.dim();
    let scale = F::one() / F::from(k * k).unwrap();
    let mut gin = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ph {
                for ox in 0..pw {
                    let g = gout[[bi, ci, oy, ox]] * scale;
                    for dy in 0..k {
                        for dx in 0..k {
                            gin[[bi, ci, oy * k + dy, ox * k + dx]] = g;
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Nearest-neighbor upsampling to an explicit target size; source index is
/// `min(y/k, in−1)`, which covers target cells past `k·in` with the last row
/// or column.
pub fn upsample_nearest<F: NdFloat>(x: &Array4<F>, k: usize, (th, tw): (usize, usize)) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((b, c, th, tw));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..th {
                let sy = (oy / k).min(h - 1);
                for ox in 0..tw {
                    let sx = (ox / k).min(w - 1);
                    y[[bi, ci, oy, ox]] = x[[bi, ci, sy, sx]];
                }
            }
        }
    }
    y
}

pub fn upsample_nearest_backward<F: NdFloat>(
    gout: &Array4<F>,
    k: usize,
    (h, w): (usize, usize),
) -> Array4<F> {
    let (b, c, th, tw) = gout.dim();
    let mut gin = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..th {
                let sy = (oy / k).min(h - 1);
                for ox in 0..tw {
                    let sx = (ox / k).min(w - 1);
                    gin[[bi, ci, sy, sx]] = gin[[bi, ci, sy, sx]] + gout[[bi, ci, oy, ox]];
                }
            }
        }
    }
    gin
}

// ---------------------------------------------------------------------------
// Temporal plumbing for per-frame visual stacks
// ---------------------------------------------------------------------------

/// `[B, T, C, H, W] -> [B·T, C, H, W]` (zero-copy on standard layout).
pub fn merge_bt<F: NdFloat>(x: Array5<F>) -> Array4<F> {
    let (b, t, c, h, w) = x.dim();
    x.into_shape_with_order((b * t, c, h, w)).unwrap()
}

/// `[B·T, C, H, W] -> [B, T, C, H, W]`.
pub fn split_bt<F: NdFloat>(x: Array4<F>, t: usize) -> Array5<F> {
    let (bt, c, h, w) = x.dim();
    assert_eq!(bt % t, 0, "batch {bt} not divisible by T={t}");
    x.into_shape_with_order((bt / t, t, c, h, w)).unwrap()
}

/// Forward temporal difference within each clip of `t` frames:
/// `out[i] = x[i+1] − x[i]`, and the last frame of each clip maps to zero.
pub fn temporal_diff<F: NdFloat>(x: &Array4<F>, t: usize) -> Array4<F> {
    let (bt, _, _, _) = x.dim();
    assert_eq!(bt % t, 0, "batch {bt} not divisible by T={t}");
    let mut y = Array4::<F>::zeros(x.raw_dim());
    for i in 0..bt {
        if (i + 1) % t != 0 {
            let next = x.index_axis(Axis(0), i + 1);
            let cur = x.index_axis(Axis(0), i);
            let mut out = y.index_axis_mut(Axis(0), i);
            out.assign(&next);
            out.zip_mut_with(&cur, |o, &c| *o = *o - c);
        }
    }
    y
}

pub fn temporal_diff_backward<F: NdFloat>(gout: &Array4<F>, t: usize) -> Array4<F> {
    let (bt, _, _, _) = gout.dim();
    let mut gin = Array4::<F>::zeros(gout.raw_dim());
    for i in 0..bt {
        if (i + 1) % t != 0 {
            let g = gout.index_axis(Axis(0), i);
            {
                let mut gn = gin.index_axis_mut(Axis(0), i + 1);
                gn.zip_mut_with(&g, |a, &b| *a = *a + b);
            }
            let mut gc = gin.index_axis_mut(Axis(0), i);
            gc.zip_mut_with(&g, |a, &b| *a = *a - b);
        }
    }
    gin
}

/// Mean over the frame axis: `[B, T, D] -> [B, D]`.
pub fn mean_over_t<F: NdFloat>(x: &Array3<F>) -> Array2<F> {
    let (_, t, _) = x.dim();
    let scale = F::one() / F::from(t).unwrap();
    x.sum_axis(Axis(1)) * scale
}

pub fn mean_over_t_backward<F: NdFloat>(gout: &Array2<F>, t: usize) -> Array3<F> {
    let (b, d) = gout.dim();
    let scale = F::one() / F::from(t).unwrap();
    let mut gin = Array3::<F>::zeros((b, t, d));
    for bi in 0..b {
        for ti in 0..t {
            for di in 0..d {
                gin[[bi, ti, di]] = gout[[bi, di]] * scale;
            }
        }
    }
    gin
}
