//! Neural-net building blocks on top of the tensor engine.
//!
//! Parameter initialization is derived from (global seed, parameter name), so
//! construction order never changes the initial weights.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image_ops::conv2d;
use super::param::{Param, ParamStore};
use super::tensor::{Elem, Tensor};

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for initializing the parameter with the given name.
pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name))
}

fn uniform_init<F: Elem>(seed: u64, name: &str, shape: &[usize], bound: f64) -> ArrayD<F> {
    let mut rng = init_rng(seed, name);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        F::c((rng.random::<f64>() * 2.0 - 1.0) * bound)
    })
}

#[derive(Clone)]
pub struct Linear<F: Elem> {
    pub w: Param<F>, // out × in
    pub b: Param<F>,
}

impl<F: Elem> Linear<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, name: &str, dim_in: usize, dim_out: usize) -> Self {
        let bound = (6.0 / (dim_in + dim_out) as f64).sqrt();
        let wname = format!("{name}.w");
        let w = store.register(&wname, uniform_init(seed, &wname, &[dim_out, dim_in], bound));
        let b = store.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[dim_out])));
        Linear { w, b }
    }

    /// Zero-initialized weights and bias (deformable offset heads start at the
    /// identity grid).
    pub fn new_zero(store: &mut ParamStore<F>, name: &str, dim_in: usize, dim_out: usize) -> Self {
        let w = store.register(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[dim_out, dim_in])));
        let b = store.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[dim_out])));
        Linear { w, b }
    }

    /// x: R×in -> R×out
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.matmul(&self.w.leaf().t()).add(&self.b.leaf())
    }
}

#[derive(Clone)]
pub struct Conv2dLayer<F: Elem> {
    pub w: Param<F>, // out × in × k × k
    pub b: Param<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Elem> Conv2dLayer<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<F>,
        seed: u64,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (ci * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt(); // He-uniform for ReLU stacks
        let wname = format!("{name}.w");
        let w = store.register(&wname, uniform_init(seed, &wname, &[co, ci, k, k], bound));
        let b = store.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        conv2d(x, &self.w.leaf(), &self.b.leaf(), self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct LayerNorm<F: Elem> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

impl<F: Elem> LayerNorm<F> {
    pub fn new(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.register(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim])));
        let beta = store.register(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])));
        LayerNorm { gamma, beta }
    }

    /// x: R×C, normalized over C.
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.layer_norm(&self.gamma.leaf(), &self.beta.leaf(), 1e-5)
    }
}

pub struct MhaOutput<F: Elem> {
    pub out: Tensor<F>,
    /// Per-head attention matrices (rows are probability distributions).
    pub attn: Vec<Tensor<F>>,
}

/// Multi-head attention with an optional additive mask on the logits.
#[derive(Clone)]
pub struct Mha<F: Elem> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<F: Elem> Mha<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "embed dim {dim} not divisible by heads {heads}");
        Mha {
            wq: Linear::new(store, seed, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, seed, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, seed, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, seed, &format!("{name}.wo"), dim, dim),
            heads,
            head_dim: dim / heads,
        }
    }

    /// q_in: R×C queries, kv_in: S×C keys/values, mask: optional R×S additive.
    pub fn forward(&self, q_in: &Tensor<F>, kv_in: &Tensor<F>, mask: Option<&Array2<F>>) -> MhaOutput<F> {
        self.forward_kv(q_in, kv_in, kv_in, mask)
    }

    /// Like [`Self::forward`] but with distinct key and value inputs (keys may
    /// carry positional encoding that values should not).
    pub fn forward_kv(
        &self,
        q_in: &Tensor<F>,
        k_in: &Tensor<F>,
        v_in: &Tensor<F>,
        mask: Option<&Array2<F>>,
    ) -> MhaOutput<F> {
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(k_in);
        let v = self.wv.forward(v_in);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mask_t = mask.map(|m| Tensor::new(m.clone().into_dyn()));
        let mut ctxs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let qh = q.narrow(1, off, self.head_dim);
            let kh = k.narrow(1, off, self.head_dim);
            let vh = v.narrow(1, off, self.head_dim);
            let mut scores = qh.matmul(&kh.t()).mul_scalar(scale);
            if let Some(m) = &mask_t {
                scores = scores.add(m);
            }
            let attn = scores.softmax_rows();
            ctxs.push(attn.matmul(&vh));
            attns.push(attn);
        }
        let ctx = Tensor::concat(1, &ctxs);
        MhaOutput { out: self.wo.forward(&ctx), attn: attns }
    }
}

/// Two-layer MLP with ReLU.
#[derive(Clone)]
pub struct Mlp<F: Elem> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Elem> Mlp<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, name: &str, dim_in: usize, hidden: usize, dim_out: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, seed, &format!("{name}.fc1"), dim_in, hidden),
            fc2: Linear::new(store, seed, &format!("{name}.fc2"), hidden, dim_out),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.fc2.forward(&self.fc1.forward(x).relu())
    }
}

/// Fixed 2-D sinusoidal positional encoding over an h×w grid, as (h·w)×dim.
pub fn sinusoidal_pos_enc<F: Elem>(h: usize, w: usize, dim: usize) -> Array2<F> {
    assert_eq!(dim % 4, 0, "positional encoding dim must be divisible by 4");
    let quarter = dim / 4;
    let mut out = Array2::<F>::zeros((h * w, dim));
    for i in 0..h {
        for j in 0..w {
            let y = (i as f64 + 0.5) / h as f64;
            let x = (j as f64 + 0.5) / w as f64;
            for q in 0..quarter {
                let freq = 10000f64.powf(-(q as f64) / quarter as f64) * std::f64::consts::PI * 2.0;
                let r = i * w + j;
                out[(r, q)] = F::c((x * freq).sin());
                out[(r, quarter + q)] = F::c((x * freq).cos());
                out[(r, 2 * quarter + q)] = F::c((y * freq).sin());
                out[(r, 3 * quarter + q)] = F::c((y * freq).cos());
            }
        }
    }
    out
}

/// Learned embedding table (used for query embeddings).
#[derive(Clone)]
pub struct Embedding<F: Elem> {
    pub table: Param<F>, // n × dim
}

impl<F: Elem> Embedding<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, name: &str, n: usize, dim: usize) -> Self {
        let tname = format!("{name}.table");
        let table = store.register(&tname, uniform_init(seed, &tname, &[n, dim], 1.0 / (dim as f64).sqrt()));
        Embedding { table }
    }

    pub fn leaf(&self) -> Tensor<F> {
        self.table.leaf()
    }
}

/// Standard-normal array helper for tests and data generation.
pub fn randn<F: Elem>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::c(normal_draw(rng)))
}

/// Box-Muller standard normal draw.
pub fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// 1-D array from f64 slice.
pub fn arr1_from<F: Elem>(v: &[f64]) -> Array1<F> {
    Array1::from_iter(v.iter().map(|&x| F::c(x)))
}
