//! 1-D, 2-D, and 3-D convolutions via im2col + matrix multiply.
//!
//! Weights are stored flat as `[cout, K]` with `K = cin · ∏kernel`. Each
//! sample's patches are lowered to a `[P, K]` matrix (`P` = output positions)
//! so both passes reduce to GEMM calls; the lowering is recomputed in the
//! backward pass instead of cached, which keeps live memory proportional to
//! the batch rather than to the patch expansion.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, Array5, Axis, Ix2, NdFloat};
use rand::Rng;

use super::{Init, ParamId, VarStore};

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "input extent {input} (+2·{pad} pad) shorter than kernel {kernel}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

// ---------------------------------------------------------------------------
// Shared per-sample kernels. `cols` is row-major [P, K]; `x` is one sample's
// contiguous [cin, ...spatial] block.
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn im2col_2d<F: NdFloat>(
    x: &[F],
    cin: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
    cols: &mut [F],
) {
    let mut ptr = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let iy0 = (oy * sh) as isize - ph as isize;
            let ix0 = (ox * sw) as isize - pw as isize;
            for c in 0..cin {
                let base = c * h * w;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        cols[ptr..ptr + kw].fill(F::zero());
                        ptr += kw;
                        continue;
                    }
                    let row = base + iy as usize * w;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        cols[ptr] = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            x[row + ix as usize]
                        };
                        ptr += 1;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d<F: NdFloat>(
    dcols: &[F],
    cin: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
    gx: &mut [F],
) {
    let mut ptr = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let iy0 = (oy * sh) as isize - ph as isize;
            let ix0 = (ox * sw) as isize - pw as isize;
            for c in 0..cin {
                let base = c * h * w;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        ptr += kw;
                        continue;
                    }
                    let row = base + iy as usize * w;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[row + ix as usize] = gx[row + ix as usize] + dcols[ptr];
                        }
                        ptr += 1;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    cin: usize,
    cout: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
}

pub struct Conv2dCache<F> {
    input: Array4<F>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: NdFloat>(
        vs: &mut VarStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let k = cin * kernel.0 * kernel.1;
        let w = vs.var(
            format!("{name}.weight"),
            &[cout, k],
            Init::KaimingNormal { fan_in: k },
            rng,
        );
        let b = vs.var(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Conv2d {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_len(h, self.kernel.0, self.stride.0, self.pad.0),
            out_len(w, self.kernel.1, self.stride.1, self.pad.1),
        )
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, Conv2dCache<F>) {
        // Channel-axis concatenations upstream can hand us a non-contiguous
        // array; im2col needs a flat slice, so normalize the layout once.
        let x = x.as_standard_layout();
        let (bsz, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv2d channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        let k = self.cin * self.kernel.0 * self.kernel.1;

        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let bias = vs.value(self.b);

        let mut y = Array4::<F>::zeros((bsz, self.cout, oh, ow));
        let mut cols = Array2::<F>::zeros((p, k));
        for bi in 0..bsz {
            let sample = x.index_axis(Axis(0), bi);
            im2col_2d(
                sample.as_slice().unwrap(),
                cin,
                (h, w),
                self.kernel,
                self.stride,
                self.pad,
                (oh, ow),
                cols.as_slice_mut().unwrap(),
            );
            let mut yv = y
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((self.cout, p))
                .unwrap();
            general_mat_mul(F::one(), &wmat, &cols.t(), F::zero(), &mut yv);
            for (c, mut row) in yv.rows_mut().into_iter().enumerate() {
                let b = bias[c];
                row.mapv_inplace(|v| v + b);
            }
        }
        (y, Conv2dCache { input: x.into_owned() })
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: Conv2dCache<F>,
        gout: &Array4<F>,
    ) -> Array4<F> {
        let gout = gout.as_standard_layout();
        let x = &cache.input;
        let (bsz, cin, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        let k = cin * self.kernel.0 * self.kernel.1;
        assert_eq!(gout.dim(), (bsz, self.cout, oh, ow), "conv2d grad shape");

        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut dw = Array2::<F>::zeros((self.cout, k));
        let mut db = ndarray::Array1::<F>::zeros(self.cout);
        let mut gin = Array4::<F>::zeros(x.raw_dim());
        let mut cols = Array2::<F>::zeros((p, k));
        let mut dcols = Array2::<F>::zeros((p, k));

        for bi in 0..bsz {
            let sample = x.index_axis(Axis(0), bi);
            im2col_2d(
                sample.as_slice().unwrap(),
                cin,
                (h, w),
                self.kernel,
                self.stride,
                self.pad,
                (oh, ow),
                cols.as_slice_mut().unwrap(),
            );
            let gmat = gout
                .index_axis(Axis(0), bi)
                .into_shape_with_order((self.cout, p))
                .unwrap();
            general_mat_mul(F::one(), &gmat, &cols, F::one(), &mut dw.view_mut());
            for (c, row) in gmat.rows().into_iter().enumerate() {
                db[c] = db[c] + row.sum();
            }
            general_mat_mul(F::one(), &gmat.t(), &wmat.view(), F::zero(), &mut dcols.view_mut());
            let mut gin_s = gin.index_axis_mut(Axis(0), bi);
            col2im_2d(
                dcols.as_slice().unwrap(),
                cin,
                (h, w),
                self.kernel,
                self.stride,
                self.pad,
                (oh, ow),
                gin_s.as_slice_mut().unwrap(),
            );
        }
        vs.accum_grad(self.w, dw.into_dyn().view());
        vs.accum_grad(self.b, db.into_dyn().view());
        gin
    }
}

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    cin: usize,
    cout: usize,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
}

pub struct Conv3dCache<F> {
    input: Array5<F>,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: NdFloat>(
        vs: &mut VarStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let k = cin * kernel.0 * kernel.1 * kernel.2;
        let w = vs.var(
            format!("{name}.weight"),
            &[cout, k],
            Init::KaimingNormal { fan_in: k },
            rng,
        );
        let b = vs.var(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Conv3d {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_dhw(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (
            out_len(d, self.kernel.0, self.stride.0, self.pad.0),
            out_len(h, self.kernel.1, self.stride.1, self.pad.1),
            out_len(w, self.kernel.2, self.stride.2, self.pad.2),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn lower<F: NdFloat>(
        &self,
        x: &[F],
        (d, h, w): (usize, usize, usize),
        (od, oh, ow): (usize, usize, usize),
        cols: &mut [F],
    ) {
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.pad;
        let mut ptr = 0;
        for ot in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let it0 = (ot * st) as isize - pt as isize;
                    let iy0 = (oy * sh) as isize - ph as isize;
                    let ix0 = (ox * sw) as isize - pw as isize;
                    for c in 0..self.cin {
                        let cbase = c * d * h * w;
                        for kt_i in 0..kt {
                            let it = it0 + kt_i as isize;
                            if it < 0 || it >= d as isize {
                                cols[ptr..ptr + kh * kw].fill(F::zero());
                                ptr += kh * kw;
                                continue;
                            }
                            let tbase = cbase + it as usize * h * w;
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    cols[ptr..ptr + kw].fill(F::zero());
                                    ptr += kw;
                                    continue;
                                }
                                let row = tbase + iy as usize * w;
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    cols[ptr] = if ix < 0 || ix >= w as isize {
                                        F::zero()
                                    } else {
                                        x[row + ix as usize]
                                    };
                                    ptr += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scatter<F: NdFloat>(
        &self,
        dcols: &[F],
        (d, h, w): (usize, usize, usize),
        (od, oh, ow): (usize, usize, usize),
        gx: &mut [F],
    ) {
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.pad;
        let mut ptr = 0;
        for ot in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let it0 = (ot * st) as isize - pt as isize;
                    let iy0 = (oy * sh) as isize - ph as isize;
                    let ix0 = (ox * sw) as isize - pw as isize;
                    for c in 0..self.cin {
                        let cbase = c * d * h * w;
                        for kt_i in 0..kt {
                            let it = it0 + kt_i as isize;
                            if it < 0 || it >= d as isize {
                                ptr += kh * kw;
                                continue;
                            }
                            let tbase = cbase + it as usize * h * w;
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    ptr += kw;
                                    continue;
                                }
                                let row = tbase + iy as usize * w;
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix >= 0 && ix < w as isize {
                                        gx[row + ix as usize] = gx[row + ix as usize] + dcols[ptr];
                                    }
                                    ptr += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array5<F>,
    ) -> (Array5<F>, Conv3dCache<F>) {
        let x = x.as_standard_layout();
        let (bsz, cin, d, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv3d channel mismatch");
        let (od, oh, ow) = self.out_dhw(d, h, w);
        let p = od * oh * ow;
        let k = cin * self.kernel.0 * self.kernel.1 * self.kernel.2;

        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let bias = vs.value(self.b);

        let mut y = Array5::<F>::zeros((bsz, self.cout, od, oh, ow));
        let mut cols = Array2::<F>::zeros((p, k));
        for bi in 0..bsz {
            let sample = x.index_axis(Axis(0), bi);
            self.lower(
                sample.as_slice().unwrap(),
                (d, h, w),
                (od, oh, ow),
                cols.as_slice_mut().unwrap(),
            );
            let mut yv = y
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((self.cout, p))
                .unwrap();
            general_mat_mul(F::one(), &wmat, &cols.t(), F::zero(), &mut yv);
            for (c, mut row) in yv.rows_mut().into_iter().enumerate() {
                let b = bias[c];
                row.mapv_inplace(|v| v + b);
            }
        }
        (y, Conv3dCache { input: x.into_owned() })
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: Conv3dCache<F>,
        gout: &Array5<F>,
    ) -> Array5<F> {
        let gout = gout.as_standard_layout();
        let x = &cache.input;
        let (bsz, cin, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_dhw(d, h, w);
        let p = od * oh * ow;
        let k = cin * self.kernel.0 * self.kernel.1 * self.kernel.2;
        assert_eq!(gout.dim(), (bsz, self.cout, od, oh, ow), "conv3d grad shape");

        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut dw = Array2::<F>::zeros((self.cout, k));
        let mut db = ndarray::Array1::<F>::zeros(self.cout);
        let mut gin = Array5::<F>::zeros(x.raw_dim());
        let mut cols = Array2::<F>::zeros((p, k));
        let mut dcols = Array2::<F>::zeros((p, k));

        for bi in 0..bsz {
            let sample = x.index_axis(Axis(0), bi);
            self.lower(
                sample.as_slice().unwrap(),
                (d, h, w),
                (od, oh, ow),
                cols.as_slice_mut().unwrap(),
            );
            let gmat = gout
                .index_axis(Axis(0), bi)
                .into_shape_with_order((self.cout, p))
                .unwrap();
            general_mat_mul(F::one(), &gmat, &cols, F::one(), &mut dw.view_mut());
            for (c, row) in gmat.rows().into_iter().enumerate() {
                db[c] = db[c] + row.sum();
            }
            general_mat_mul(F::one(), &gmat.t(), &wmat.view(), F::zero(), &mut dcols.view_mut());
            let mut gin_s = gin.index_axis_mut(Axis(0), bi);
            self.scatter(
                dcols.as_slice().unwrap(),
                (d, h, w),
                (od, oh, ow),
                gin_s.as_slice_mut().unwrap(),
            );
        }
        vs.accum_grad(self.w, dw.into_dyn().view());
        vs.accum_grad(self.b, db.into_dyn().view());
        gin
    }
}

// ---------------------------------------------------------------------------
// Conv1d
// ---------------------------------------------------------------------------

pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

pub struct Conv1dCache<F> {
    input: Array3<F>,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: NdFloat>(
        vs: &mut VarStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k = cin * kernel;
        let w = vs.var(
            format!("{name}.weight"),
            &[cout, k],
            Init::KaimingNormal { fan_in: k },
            rng,
        );
        let b = vs.var(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Conv1d {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, l: usize) -> usize {
        out_len(l, self.kernel, self.stride, self.pad)
    }

    fn lower<F: NdFloat>(&self, x: &[F], l: usize, ol: usize, cols: &mut [F]) {
        let mut ptr = 0;
        for o in 0..ol {
            let i0 = (o * self.stride) as isize - self.pad as isize;
            for c in 0..self.cin {
                let base = c * l;
                for kk in 0..self.kernel {
                    let i = i0 + kk as isize;
                    cols[ptr] = if i < 0 || i >= l as isize {
                        F::zero()
                    } else {
                        x[base + i as usize]
                    };
                    ptr += 1;
                }
            }
        }
    }

    fn scatter<F: NdFloat>(&self, dcols: &[F], l: usize, ol: usize, gx: &mut [F]) {
        let mut ptr = 0;
        for o in 0..ol {
            let i0 = (o * self.stride) as isize - self.pad as isize;
            for c in 0..self.cin {
                let base = c * l;
                for kk in 0..self.kernel {
                    let i = i0 + kk as isize;
                    if i >= 0 && i < l as isize {
                        gx[base + i as usize] = gx[base + i as usize] + dcols[ptr];
                    }
                    ptr += 1;
                }
            }
        }
    }

    pub fn forward<F: NdFloat>(
        &self,
        vs: &VarStore<F>,
        x: &Array3<F>,
    ) -> (Array3<F>, Conv1dCache<F>) {
        let x = x.as_standard_layout();
        let (bsz, cin, l) = x.dim();
        assert_eq!(cin, self.cin, "conv1d channel mismatch");
        let ol = self.out_len(l);
        let k = cin * self.kernel;

        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let bias = vs.value(self.b);

        let mut y = Array3::<F>::zeros((bsz, self.cout, ol));
        let mut cols = Array2::<F>::zeros((ol, k));
        for bi in 0..bsz {
            let sample = x.index_axis(Axis(0), bi);
            self.lower(sample.as_slice().unwrap(), l, ol, cols.as_slice_mut().unwrap());
            let mut yv = y.index_axis_mut(Axis(0), bi);
            general_mat_mul(F::one(), &wmat, &cols.t(), F::zero(), &mut yv);
            for (c, mut row) in yv.rows_mut().into_iter().enumerate() {
                let b = bias[c];
                row.mapv_inplace(|v| v + b);
            }
        }
        (y, Conv1dCache { input: x.into_owned() })
    }

    pub fn backward<F: NdFloat>(
        &self,
        vs: &mut VarStore<F>,
        cache: Conv1dCache<F>,
        gout: &Array3<F>,
    ) -> Array3<F> {
        let gout = gout.as_standard_layout();
        let x = &cache.input;
        let (bsz, cin, l) = x.dim();
        let ol = self.out_len(l);
        let k = cin * self.kernel;
        assert_eq!(gout.dim(), (bsz, self.cout, ol), "conv1d grad shape");

        let wmat = vs.value(self.w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut dw = Array2::<F>::zeros((self.cout, k));
        let mut db = ndarray::Array1::<F>::zeros(self.cout);
        let mut gin = Array3::<F>::zeros(x.raw_dim());
        let mut cols = Array2::<F>::zeros((ol, k));
        let mut dcols = Array2::<F>::zeros((ol, k));

        for bi in 0..bsz {
            let sample = x.index_axis(Axis(0), bi);
            self.lower(sample.as_slice().unwrap(), l, ol, cols.as_slice_mut().unwrap());
            let gmat = gout.index_axis(Axis(0), bi);
            general_mat_mul(F::one(), &gmat, &cols, F::one(), &mut dw.view_mut());
            for (c, row) in gmat.rows().into_iter().enumerate() {
                db[c] = db[c] + row.sum();
            }
            general_mat_mul(F::one(), &gmat.t(), &wmat.view(), F::zero(), &mut dcols.view_mut());
            let mut gin_s = gin.index_axis_mut(Axis(0), bi);
            self.scatter(dcols.as_slice().unwrap(), l, ol, gin_s.as_slice_mut().unwrap());
        }
        vs.accum_grad(self.w, dw.into_dyn().view());
        vs.accum_grad(self.b, db.into_dyn().view());
        gin
    }
}
