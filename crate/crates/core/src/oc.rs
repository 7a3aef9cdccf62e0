//! One-class softmax: the margin loss that compacts bonafide embeddings
//! around a learnable center direction, plus the cross-entropy used by the
//! audio-visual classifier head.
//!
//! With `ŵ` the normalized center and `x̂_i` the normalized embedding, the
//! OC score is `s_i = ŵ·x̂_i ∈ [-1, 1]` and the loss is
//!
//! ```text
//! L = 1/N Σ_i log(1 + exp(α (m_{y_i} − s_i) (−1)^{y_i}))
//! ```
//!
//! so real samples (y=0) are pushed above margin `m0` and fakes (y=1) below
//! the smaller `m1`. Everything here is generic over the float type: the
//! gradient checks run the same code in f64 that training runs in f32.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// OC-Softmax hyperparameters (the center itself lives with the model
/// parameters, one independent center per branch-modality pair).
#[derive(Debug, Clone, Copy)]
pub struct OcHyper<F> {
    /// Logit scale α.
    pub alpha: F,
    /// Margin for the real class.
    pub m0: F,
    /// Margin for the fake class.
    pub m1: F,
}

impl<F: NdFloat> OcHyper<F> {
    pub fn new(alpha: F, m0: F, m1: F) -> Result<Self> {
        if alpha <= F::zero() {
            return Err(Error::Config("oc alpha must be positive".into()));
        }
        if m1 >= m0 {
            return Err(Error::Config(
                "oc margin m1 (fake) must lie below m0 (real)".into(),
            ));
        }
        Ok(OcHyper { alpha, m0, m1 })
    }
}

impl Default for OcHyper<f32> {
    fn default() -> Self {
        OcHyper {
            alpha: 20.0,
            m0: 0.9,
            m1: 0.2,
        }
    }
}

/// Loss value with gradients w.r.t. the (unnormalized) embeddings and center.
#[derive(Debug, Clone)]
pub struct OcGrads<F> {
    pub loss: F,
    pub d_emb: Array2<F>,
    pub d_center: Array1<F>,
}

/// Fresh center direction: a unit-normalized standard-normal draw. Sampling
/// happens in f64 and is cast afterwards, so every float type sees the same
/// sequence from a given generator state.
pub fn init_center<F: NdFloat>(dim: usize, rng: &mut impl Rng) -> Array1<F> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return Array1::from_iter(v.into_iter().map(|x| F::from(x / norm).unwrap()));
        }
    }
}

/// Numerically stable `log(1 + e^z) = max(z, 0) + log1p(e^{−|z|})`.
pub fn softplus<F: NdFloat>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<F: NdFloat>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn check_norms<F: NdFloat>(emb: &ArrayView2<F>, center: &ArrayView1<F>) -> Result<Array1<F>> {
    let center_norm = center.dot(center).sqrt();
    if center_norm <= F::from(1e-12).unwrap() {
        return Err(Error::Degenerate("oc center has zero norm".into()));
    }
    let mut norms = Array1::zeros(emb.nrows());
    for (i, row) in emb.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n <= F::from(1e-12).unwrap() {
            return Err(Error::Degenerate(format!("embedding row {i} has zero norm")));
        }
        norms[i] = n;
    }
    Ok(norms)
}

fn check_labels(labels: &ArrayView1<u8>, batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape {
            expected: format!("{batch} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Clamp a cosine to `[-1, 1]`, letting NaN through. Float `max`/`min`
/// return the non-NaN operand, so clamping with them would convert a
/// poisoned score into a plausible one and hide the corruption from the
/// non-finite abort check downstream.
fn clamp_unit<F: NdFloat>(s: F) -> F {
    if s > F::one() {
        F::one()
    } else if s < -F::one() {
        -F::one()
    } else {
        s
    }
}

/// Cosine similarity of each embedding row to the center; in `[-1, 1]`.
pub fn oc_score<F: NdFloat>(emb: ArrayView2<F>, center: ArrayView1<F>) -> Result<Array1<F>> {
    let norms = check_norms(&emb, &center)?;
    let center_norm = center.dot(&center).sqrt();
    let raw = emb.dot(&center);
    let mut out = Array1::zeros(emb.nrows());
    for i in 0..emb.nrows() {
        // Clamp: rounding can push a cosine epsilon past ±1.
        out[i] = clamp_unit(raw[i] / (norms[i] * center_norm));
    }
    Ok(out)
}

/// Loss value only; see [`oc_softmax_loss_grads`] for the differentiable form.
pub fn oc_softmax_loss<F: NdFloat>(
    emb: ArrayView2<F>,
    center: ArrayView1<F>,
    labels: ArrayView1<u8>,
    hyper: &OcHyper<F>,
) -> Result<F> {
    Ok(oc_softmax_loss_grads(emb, center, labels, hyper)?.loss)
}

/// Loss with analytic gradients w.r.t. embeddings and center.
///
/// Writing `n_x = |x_i|`, `n_w = |w|`, the chain factors are
/// `∂s/∂x_i = (ŵ − s_i x̂_i)/n_x` and `∂s/∂w = (x̂_i − s_i ŵ)/n_w`,
/// with `∂L/∂s_i = −σ(z_i) · α (−1)^{y_i} / N`.
pub fn oc_softmax_loss_grads<F: NdFloat>(
    emb: ArrayView2<F>,
    center: ArrayView1<F>,
    labels: ArrayView1<u8>,
    hyper: &OcHyper<F>,
) -> Result<OcGrads<F>> {
    let batch = emb.nrows();
    if batch == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    check_labels(&labels, batch)?;
    let norms = check_norms(&emb, &center)?;
    let center_norm = center.dot(&center).sqrt();
    let w_hat = center.mapv(|v| v / center_norm);

    let inv_n = F::one() / F::from(batch).unwrap();
    let mut loss = F::zero();
    let mut d_emb = Array2::zeros(emb.raw_dim());
    let mut d_center = Array1::zeros(center.len());

    for i in 0..batch {
        let x_hat = emb.row(i).mapv(|v| v / norms[i]);
        let s = clamp_unit(w_hat.dot(&x_hat));
        let (margin, sign) = if labels[i] == 0 {
            (hyper.m0, F::one())
        } else {
            (hyper.m1, -F::one())
        };
        let z = hyper.alpha * (margin - s) * sign;
        loss = loss + softplus(z) * inv_n;

        // dL/ds for this sample.
        let dl_ds = sigmoid(z) * (-hyper.alpha) * sign * inv_n;

        let mut d_row = d_emb.row_mut(i);
        for j in 0..center.len() {
            d_row[j] = dl_ds * (w_hat[j] - s * x_hat[j]) / norms[i];
            d_center[j] = d_center[j] + dl_ds * (x_hat[j] - s * w_hat[j]) / center_norm;
        }
    }

    Ok(OcGrads {
        loss,
        d_emb,
        d_center,
    })
}

/// Mean negative log-softmax of the true class over a `[B, 2]` logit array.
pub fn cross_entropy<F: NdFloat>(logits: ArrayView2<F>, labels: ArrayView1<u8>) -> Result<F> {
    Ok(cross_entropy_grads(logits, labels)?.0)
}

/// Cross-entropy with the gradient w.r.t. the logits
/// (`softmax − one_hot`, averaged over the batch).
pub fn cross_entropy_grads<F: NdFloat>(
    logits: ArrayView2<F>,
    labels: ArrayView1<u8>,
) -> Result<(F, Array2<F>)> {
    let batch = logits.nrows();
    if batch == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if logits.ncols() != 2 {
        return Err(Error::Shape {
            expected: "[B, 2] logits".into(),
            got: format!("[{}, {}]", batch, logits.ncols()),
        });
    }
    check_labels(&labels, batch)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier logits".into()));
    }

    let inv_n = F::one() / F::from(batch).unwrap();
    let mut loss = F::zero();
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for i in 0..batch {
        let (l0, l1) = (logits[[i, 0]], logits[[i, 1]]);
        let m = l0.max(l1);
        let log_z = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let y = labels[i] as usize;
        loss = loss + (log_z - logits[[i, y]]) * inv_n;
        for c in 0..2 {
            let p = (logits[[i, c]] - log_z).exp();
            let target = if c == y { F::one() } else { F::zero() };
            d_logits[[i, c]] = (p - target) * inv_n;
        }
    }
    Ok((loss, d_logits))
}

/// Probability of the real class (index 0) from `[B, 2]` logits, computed as
/// `σ(l0 − l1)` per row.
pub fn real_prob<F: NdFloat>(logits: ArrayView2<F>) -> Array1<F> {
    let mut out = Array1::zeros(logits.nrows());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        out[i] = sigmoid(row[0] - row[1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyper64() -> OcHyper<f64> {
        OcHyper::new(20.0, 0.9, 0.2).unwrap()
    }

    /// Embedding row with an exact cosine `c` to the center (1, 0).
    fn emb_at_cos(c: f64) -> Array2<f64> {
        arr2(&[[c, (1.0 - c * c).sqrt()]])
    }

    #[test]
    fn score_matches_hand_cosines() {
        let w = arr1(&[0.0f64, 1.0]);
        let emb = arr2(&[[0.0f64, 2.0], [3.0, 0.0], [3.0, 4.0]]);
        let s = oc_score(emb.view(), w.view()).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12); // parallel
        assert!(s[1].abs() < 1e-12); // orthogonal
        assert!((s[2] - 0.8).abs() < 1e-12); // 4/5
    }

    #[test]
    fn loss_closed_forms() {
        let w = arr1(&[1.0, 0.0]);
        let h = hyper64();

        // Real sample at its center: log(1 + e^{-α(1 - m0)}) = log(1 + e^{-2}).
        let l = oc_softmax_loss(emb_at_cos(1.0).view(), w.view(), arr1(&[0u8]).view(), &h).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-6, "{l}");

        // Either class exactly at its margin: log 2.
        let l = oc_softmax_loss(emb_at_cos(0.9).view(), w.view(), arr1(&[0u8]).view(), &h).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-6);
        let l = oc_softmax_loss(emb_at_cos(0.2).view(), w.view(), arr1(&[1u8]).view(), &h).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-6);

        // Fake sample at the antipode: log(1 + e^{-24}).
        let l =
            oc_softmax_loss(emb_at_cos(-1.0).view(), w.view(), arr1(&[1u8]).view(), &h).unwrap();
        assert!((l - (1.0 + (-24.0f64).exp()).ln()).abs() < 1e-6);
    }

    #[test]
    fn loss_is_batch_mean() {
        let w = arr1(&[1.0, 0.0]);
        let h = hyper64();
        let e0 = emb_at_cos(0.3);
        let e1 = emb_at_cos(-0.6);
        let both = ndarray::concatenate(Axis(0), &[e0.view(), e1.view()]).unwrap();
        let l0 = oc_softmax_loss(e0.view(), w.view(), arr1(&[0u8]).view(), &hyper64()).unwrap();
        let l1 = oc_softmax_loss(e1.view(), w.view(), arr1(&[1u8]).view(), &hyper64()).unwrap();
        let l = oc_softmax_loss(both.view(), w.view(), arr1(&[0u8, 1]).view(), &h).unwrap();
        assert!((l - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn score_is_scale_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d = 2 + rng.random_range(0..7);
            let w = init_center::<f64>(d, &mut rng);
            let mut emb = Array2::<f64>::zeros((3, d));
            for v in emb.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let s = oc_score(emb.view(), w.view()).unwrap();
            let scaled = oc_score((emb.clone() * 7.5).view(), w.view()).unwrap();
            for i in 0..3 {
                assert!(s[i] >= -1.0 && s[i] <= 1.0);
                assert!((s[i] - scaled[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_monotone_in_score() {
        // Real loss strictly decreases as s rises; fake loss strictly increases.
        let w = arr1(&[1.0, 0.0]);
        let h = hyper64();
        let mut prev_real = f64::INFINITY;
        let mut prev_fake = -1.0;
        for k in 0..=20 {
            let s = -1.0 + 2.0 * k as f64 / 20.0;
            let real =
                oc_softmax_loss(emb_at_cos(s).view(), w.view(), arr1(&[0u8]).view(), &h).unwrap();
            let fake =
                oc_softmax_loss(emb_at_cos(s).view(), w.view(), arr1(&[1u8]).view(), &h).unwrap();
            assert!(real < prev_real, "real loss not decreasing at s={s}");
            assert!(fake > prev_fake, "fake loss not increasing at s={s}");
            assert!(real >= 0.0 && fake >= 0.0);
            prev_real = real;
            prev_fake = fake;
        }
    }

    #[test]
    fn margin_attainment_beats_log2() {
        let w = arr1(&[1.0, 0.0]);
        let h = hyper64();
        let l = oc_softmax_loss(emb_at_cos(0.95).view(), w.view(), arr1(&[0u8]).view(), &h)
            .unwrap();
        assert!(l < 2.0f64.ln());
        let l = oc_softmax_loss(emb_at_cos(0.1).view(), w.view(), arr1(&[1u8]).view(), &h)
            .unwrap();
        assert!(l < 2.0f64.ln());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let w = arr1(&[0.0, 0.0]);
        assert!(oc_score(emb_at_cos(0.5).view(), w.view()).is_err());
        let w = arr1(&[1.0, 0.0]);
        let z = arr2(&[[0.0, 0.0]]);
        assert!(oc_score(z.view(), w.view()).is_err());
        assert!(OcHyper::new(20.0, 0.2, 0.9).is_err());
        assert!(OcHyper::new(-1.0, 0.9, 0.2).is_err());
    }

    /// Central finite differences against the analytic gradients; the same
    /// check, at acceptance scale, gates the build in tests/acceptance.rs.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = hyper64();
        for _ in 0..5 {
            let d = 2 + rng.random_range(0..7);
            let b = 1 + rng.random_range(0..4);
            let w = init_center::<f64>(d, &mut rng) * 1.3;
            let mut emb = Array2::<f64>::zeros((b, d));
            for v in emb.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let labels = Array1::from_iter((0..b).map(|_| rng.random_range(0..2) as u8));

            let g = oc_softmax_loss_grads(emb.view(), w.view(), labels.view(), &h).unwrap();
            let fd = |f: &mut dyn FnMut(f64) -> f64, x: f64| {
                let hstep = 1e-5;
                (f(x + hstep) - f(x - hstep)) / (2.0 * hstep)
            };

            for r in 0..b {
                for c in 0..d {
                    let mut f = |x: f64| {
                        let mut e = emb.clone();
                        e[[r, c]] = x;
                        oc_softmax_loss(e.view(), w.view(), labels.view(), &h).unwrap()
                    };
                    let num = fd(&mut f, emb[[r, c]]);
                    let ana = g.d_emb[[r, c]];
                    assert!(
                        (num - ana).abs() <= 1e-4 * (1.0 + num.abs().max(ana.abs())),
                        "d_emb[{r},{c}]: fd {num} vs analytic {ana}"
                    );
                }
            }
            for c in 0..d {
                let mut f = |x: f64| {
                    let mut ww = w.clone();
                    ww[c] = x;
                    oc_softmax_loss(emb.view(), ww.view(), labels.view(), &h).unwrap()
                };
                let num = fd(&mut f, w[c]);
                let ana = g.d_center[c];
                assert!(
                    (num - ana).abs() <= 1e-4 * (1.0 + num.abs().max(ana.abs())),
                    "d_center[{c}]: fd {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let labels = arr1(&[0u8]);
        let (l, _) = cross_entropy_grads(arr2(&[[0.0f64, 0.0]]).view(), labels.view()).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);

        let (l, _) = cross_entropy_grads(arr2(&[[10.0f64, -10.0]]).view(), labels.view()).unwrap();
        assert!((l - (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-12); // ≈ 2.06e-9

        // Batch mean on two samples.
        let l2 = cross_entropy(
            arr2(&[[0.0f64, 0.0], [10.0, -10.0]]).view(),
            arr1(&[0u8, 0]).view(),
        )
        .unwrap();
        assert!((l2 - 0.5 * (2.0f64.ln() + (1.0 + (-20.0f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut logits = Array2::<f64>::zeros((3, 2));
        for v in logits.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let labels = arr1(&[0u8, 1, 0]);
        let (_, g) = cross_entropy_grads(logits.view(), labels.view()).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let h = 1e-6;
                let mut lp = logits.clone();
                lp[[r, c]] += h;
                let mut lm = logits.clone();
                lm[[r, c]] -= h;
                let num = (cross_entropy(lp.view(), labels.view()).unwrap()
                    - cross_entropy(lm.view(), labels.view()).unwrap())
                    / (2.0 * h);
                assert!((num - g[[r, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn real_prob_reads_class_zero() {
        let p = real_prob(arr2(&[[10.0f64, -10.0], [-10.0, 10.0], [0.0, 0.0]]).view());
        assert!(p[0] > 0.999999);
        assert!(p[1] < 0.000001);
        assert!((p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let w64 = arr1(&[0.6f64, 0.8]);
        let e64 = arr2(&[[1.0f64, 0.2], [-0.4, 0.9]]);
        let labels = arr1(&[0u8, 1]);
        let l64 =
            oc_softmax_loss(e64.view(), w64.view(), labels.view(), &hyper64()).unwrap();
        let l32 = oc_softmax_loss(
            e64.mapv(|v| v as f32).view(),
            w64.mapv(|v| v as f32).view(),
            labels.view(),
            &OcHyper::default(),
        )
        .unwrap();
        assert!((l64 - l32 as f64).abs() < 1e-5);
    }
}
