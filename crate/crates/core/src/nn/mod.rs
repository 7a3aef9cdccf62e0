//! Minimal CPU training stack: a named parameter store with accumulated
//! gradients, explicit forward/backward layers, and Adam.
//!
//! Everything is generic over the float type so the finite-difference checks
//! run the exact layer code in f64 while training runs in f32. All math is
//! single-threaded with fixed iteration order; given one seed, a training
//! run is reproducible bit-for-bit.
//!
//! Layers follow one pattern: `forward(&store, input) -> (output, cache)` and
//! `backward(&mut store, cache, grad_out) -> grad_in`, where backward adds
//! parameter gradients into the store. Caches own whatever forward state the
//! backward pass needs (usually the input; im2col matrices are recomputed
//! rather than held, keeping peak memory bounded by the batch itself).

pub mod conv;
pub mod layers;

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Handle to one parameter tensor inside a [`VarStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Weight initialization schemes. Draws happen in f64 and are cast to the
/// store's float type, so every precision sees the same random sequence.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// N(0, sqrt(2/fan_in)) — the ReLU-net default.
    KaimingNormal { fan_in: usize },
    /// Unit-normalized normal draw (one-class centers).
    UnitNormal,
}

struct Entry<F> {
    name: String,
    value: ArrayD<F>,
    grad: ArrayD<F>,
}

/// Named parameter container for one branch. Branches use separate stores,
/// which makes "the branches share no parameters" structural rather than a
/// convention.
pub struct VarStore<F> {
    entries: Vec<Entry<F>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<F: NdFloat> VarStore<F> {
    pub fn new() -> Self {
        VarStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names are unique per store by construction;
    /// a duplicate is a model-assembly bug.
    pub fn var(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => ArrayD::zeros(ndarray::IxDyn(shape)),
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let data: Vec<F> = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        F::from(z * std).unwrap()
                    })
                    .collect();
                ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
            }
            Init::UnitNormal => {
                let mut data: Vec<f64> = Vec::new();
                let mut norm = 0.0;
                while norm <= 1e-6 {
                    data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                    norm = data.iter().map(|x| x * x).sum::<f64>().sqrt();
                }
                ArrayD::from_shape_vec(
                    ndarray::IxDyn(shape),
                    data.into_iter().map(|x| F::from(x / norm).unwrap()).collect(),
                )
                .unwrap()
            }
        };
        let grad = ArrayD::zeros(value.raw_dim());
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<F>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "shape change on `{}`",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].grad
    }

    /// Adds `delta` into the parameter's gradient accumulator.
    pub fn accum_grad(&mut self, id: ParamId, delta: ArrayViewD<F>) {
        let entry = &mut self.entries[id.0];
        assert_eq!(
            entry.grad.shape(),
            delta.shape(),
            "gradient shape mismatch on `{}`",
            entry.name
        );
        entry.grad.zip_mut_with(&delta, |g, d| *g = *g + *d);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Parameters in name order (deterministic; used by checkpoints).
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.by_name
            .iter()
            .map(|(n, id)| (n.as_str(), &self.entries[id.0].value))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

impl<F: NdFloat> Default for VarStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam over every parameter of one store.
pub struct Adam<F> {
    pub lr: F,
    beta1: f64,
    beta2: f64,
    eps: F,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(store: &VarStore<F>, lr: F) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: F::from(1e-8).unwrap(),
            t: 0,
            m: store.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            v: store.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
        }
    }

    /// One update from the store's accumulated gradients (which the caller
    /// zeroes between batches).
    pub fn step(&mut self, store: &mut VarStore<F>) {
        assert_eq!(
            self.m.len(),
            store.entries.len(),
            "optimizer built for a different parameter set"
        );
        self.t += 1;
        let b1 = F::from(self.beta1).unwrap();
        let b2 = F::from(self.beta2).unwrap();
        let c1 = F::from(1.0 - self.beta1.powi(self.t)).unwrap();
        let c2 = F::from(1.0 - self.beta2.powi(self.t)).unwrap();
        let one = F::one();

        for (i, entry) in store.entries.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut entry.value)
                .and(&entry.grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}
