//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! The engine is generic over the element type so the same model code runs
//! in f32 for training and in f64 for finite-difference gradient checks.

use std::collections::HashMap;
use std::fmt::Debug;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Element type of tensors: f32 or f64.
pub trait Elem:
    Float
    + ScalarOperand
    + LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Debug
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }
    fn f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap()
    }
}

impl Elem for f32 {}
impl Elem for f64 {}

type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

pub(crate) struct Node<F: Elem> {
    pub(crate) value: ArrayD<F>,
    pub(crate) parents: Vec<Tensor<F>>,
    pub(crate) back: Option<BackFn<F>>,
    pub(crate) param: Option<String>,
}

/// A value in the computation graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor<F: Elem> {
    pub(crate) node: Rc<Node<F>>,
}

/// Gradients produced by a backward pass, addressable by tensor identity or
/// by parameter name.
pub struct Gradients<F: Elem> {
    by_ptr: HashMap<usize, ArrayD<F>>,
    by_name: HashMap<String, ArrayD<F>>,
}

impl<F: Elem> Gradients<F> {
    pub fn wrt(&self, t: &Tensor<F>) -> Option<&ArrayD<F>> {
        self.by_ptr.get(&t.ptr())
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<F>> {
        self.by_name.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    pub fn into_named(self) -> HashMap<String, ArrayD<F>> {
        self.by_name
    }
}

/// Sums `g` down to `shape`, undoing broadcasting.
pub(crate) fn reduce_to<F: Elem>(g: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let mut g = g.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &ts) in shape.iter().enumerate() {
        if ts == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

impl<F: Elem> Tensor<F> {
    fn from_node(node: Node<F>) -> Self {
        Tensor { node: Rc::new(node) }
    }

    /// A leaf tensor; gradients are recorded but carry no parameter name.
    pub fn new(value: ArrayD<F>) -> Self {
        Tensor::from_node(Node { value, parents: vec![], back: None, param: None })
    }

    /// A leaf tensor tied to a named parameter.
    pub fn named(value: ArrayD<F>, name: String) -> Self {
        Tensor::from_node(Node { value, parents: vec![], back: None, param: Some(name) })
    }

    pub(crate) fn op(value: ArrayD<F>, parents: Vec<Tensor<F>>, back: BackFn<F>) -> Self {
        Tensor::from_node(Node { value, parents, back: Some(back), param: None })
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    pub fn value(&self) -> &ArrayD<F> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    /// The single element of a 0-d (or one-element) tensor.
    pub fn scalar(&self) -> F {
        assert_eq!(self.node.value.len(), 1, "scalar() on tensor with {} elements", self.node.value.len());
        *self.node.value.iter().next().unwrap()
    }

    /// Cuts the graph: same value, no parents.
    pub fn detach(&self) -> Tensor<F> {
        Tensor::new(self.node.value.clone())
    }

    /// Backpropagates from this tensor, seeding with ones.
    pub fn backward(&self) -> Gradients<F> {
        // Post-order DFS for a topological order.
        let mut topo: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr(), ());
        while let Some((t, ci)) = stack.pop() {
            if ci < t.node.parents.len() {
                let p = t.node.parents[ci].clone();
                stack.push((t, ci + 1));
                if !visited.contains_key(&p.ptr()) {
                    visited.insert(p.ptr(), ());
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<usize, ArrayD<F>> = HashMap::new();
        grads.insert(self.ptr(), ArrayD::ones(self.node.value.raw_dim()));
        for t in topo.iter().rev() {
            let Some(g) = grads.get(&t.ptr()).cloned() else { continue };
            if let Some(back) = &t.node.back {
                let pgrads = back(&g);
                debug_assert_eq!(pgrads.len(), t.node.parents.len());
                for (p, pg) in t.node.parents.iter().zip(pgrads) {
                    debug_assert_eq!(pg.shape(), p.shape(), "grad shape mismatch");
                    grads
                        .entry(p.ptr())
                        .and_modify(|acc| *acc = &*acc + &pg)
                        .or_insert(pg);
                }
            }
        }

        let mut by_name: HashMap<String, ArrayD<F>> = HashMap::new();
        for t in &topo {
            if let Some(name) = &t.node.param {
                if let Some(g) = grads.get(&t.ptr()) {
                    by_name
                        .entry(name.clone())
                        .and_modify(|acc| *acc = &*acc + g)
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Gradients { by_ptr: grads, by_name }
    }

    // ----- elementwise binary (broadcasting) -----

    pub fn add(&self, o: &Tensor<F>) -> Tensor<F> {
        let v = &self.node.value + &o.node.value;
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        Tensor::op(
            v,
            vec![self.clone(), o.clone()],
            Box::new(move |g| vec![reduce_to(g, &sa), reduce_to(g, &sb)]),
        )
    }

    pub fn sub(&self, o: &Tensor<F>) -> Tensor<F> {
        let v = &self.node.value - &o.node.value;
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        Tensor::op(
            v,
            vec![self.clone(), o.clone()],
            Box::new(move |g| vec![reduce_to(g, &sa), reduce_to(&g.mapv(|x| -x), &sb)]),
        )
    }

    pub fn mul(&self, o: &Tensor<F>) -> Tensor<F> {
        let v = &self.node.value * &o.node.value;
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        let (va, vb) = (self.node.value.clone(), o.node.value.clone());
        Tensor::op(
            v,
            vec![self.clone(), o.clone()],
            Box::new(move |g| vec![reduce_to(&(g * &vb), &sa), reduce_to(&(g * &va), &sb)]),
        )
    }

    pub fn div(&self, o: &Tensor<F>) -> Tensor<F> {
        let v = &self.node.value / &o.node.value;
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        let (va, vb) = (self.node.value.clone(), o.node.value.clone());
        Tensor::op(
            v,
            vec![self.clone(), o.clone()],
            Box::new(move |g| {
                let ga = g / &vb;
                let gb = g.mapv(|x| -x) * &va / (&vb * &vb);
                vec![reduce_to(&ga, &sa), reduce_to(&gb, &sb)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary(|x| -x, |_, g| g.mapv(|x| -x))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<F> {
        let s = F::c(s);
        self.unary(move |x| x + s, |_, g| g.clone())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<F> {
        let s = F::c(s);
        self.unary(move |x| x * s, move |_, g| g * s)
    }

    fn unary(
        &self,
        fwd: impl Fn(F) -> F,
        back: impl Fn(&ArrayD<F>, &ArrayD<F>) -> ArrayD<F> + 'static,
    ) -> Tensor<F> {
        let v = self.node.value.mapv(&fwd);
        let x = self.node.value.clone();
        Tensor::op(v, vec![self.clone()], Box::new(move |g| vec![back(&x, g)]))
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            |x| if x > F::zero() { x } else { F::zero() },
            |x, g| {
                let mask = x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                g * &mask
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let v = self.node.value.mapv(sigmoid_scalar);
        let y = v.clone();
        Tensor::op(
            v,
            vec![self.clone()],
            Box::new(move |g| vec![g * &y.mapv(|s| s * (F::one() - s))]),
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        let v = self.node.value.mapv(|x| x.exp());
        let y = v.clone();
        Tensor::op(v, vec![self.clone()], Box::new(move |g| vec![g * &y]))
    }

    pub fn ln(&self) -> Tensor<F> {
        self.unary(|x| x.ln(), |x, g| g / x)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        let v = self.node.value.mapv(|x| x.sqrt());
        let y = v.clone();
        Tensor::op(
            v,
            vec![self.clone()],
            Box::new(move |g| vec![g / &y.mapv(|s| s + s)]),
        )
    }

    pub fn square(&self) -> Tensor<F> {
        self.unary(|x| x * x, |x, g| g * &x.mapv(|v| v + v))
    }

    /// Clamp to [0, 1]; gradient is zero in the clamped region.
    pub fn clamp01(&self) -> Tensor<F> {
        self.unary(
            |x| x.max(F::zero()).min(F::one()),
            |x, g| {
                let mask = x.mapv(|v| {
                    if v >= F::zero() && v <= F::one() { F::one() } else { F::zero() }
                });
                g * &mask
            },
        )
    }

    // ----- shape ops -----

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        let orig = self.shape().to_vec();
        let v = self
            .node
            .value
            .clone()
            .into_shape_with_order(shape.to_vec())
            .expect("reshape: incompatible shape");
        Tensor::op(
            v,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g.clone().into_shape_with_order(orig.clone()).unwrap()]
            }),
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2);
        let v = self.node.value.t().to_owned();
        Tensor::op(v, vec![self.clone()], Box::new(move |g| vec![g.t().to_owned()]))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<F> {
        let v = self
            .node
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let full = self.shape().to_vec();
        Tensor::op(
            v,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = ArrayD::zeros(full.clone());
                out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![out]
            }),
        )
    }

    pub fn concat(axis: usize, parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.node.value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::op(
            v,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(lens.len());
                let mut start = 0;
                for &len in &lens {
                    out.push(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                            .to_owned(),
                    );
                    start += len;
                }
                out
            }),
        )
    }

    /// Gather rows of a 2-D tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2);
        let src = self.node.value.view().into_dimensionality::<Ix2>().unwrap();
        let cols = src.ncols();
        let mut v = ndarray::Array2::<F>::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        let full = self.shape().to_vec();
        let idx = idx.to_vec();
        Tensor::op(
            v.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = ndarray::Array2::<F>::zeros((full[0], full[1]));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &g2.row(r);
                }
                vec![out.into_dyn()]
            }),
        )
    }

    // ----- reductions -----

    pub fn sum_all(&self) -> Tensor<F> {
        let s = self.node.value.sum();
        let shape = self.shape().to_vec();
        Tensor::op(
            ndarray::arr0(s).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(shape.clone(), gs)]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.node.value.len().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Tensor<F> {
        let v = self.node.value.sum_axis(Axis(axis));
        let full = self.shape().to_vec();
        Tensor::op(
            v,
            vec![self.clone()],
            Box::new(move |g| {
                let gi = g.clone().insert_axis(Axis(axis));
                vec![gi.broadcast(full.clone()).unwrap().to_owned()]
            }),
        )
    }

    // ----- fused row ops on 2-D tensors -----

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor<F> {
        let x = self.node.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yv = y.clone();
        Tensor::op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = (&g2 * &yv).to_owned();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(yv.rows()) {
                    let dot = grow.sum();
                    ndarray::Zip::from(&mut grow).and(yrow).for_each(|gv, &yv| {
                        *gv -= dot * yv;
                    });
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self) -> Tensor<F> {
        let x = self.node.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - m).exp()).fold(F::zero(), |a, b| a + b).ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        let yv = y.clone();
        Tensor::op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = g2.to_owned();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(yv.rows()) {
                    let gsum = grow.sum();
                    ndarray::Zip::from(&mut grow).and(yrow).for_each(|gv, &yv| {
                        *gv -= gsum * yv.exp();
                    });
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    /// Layer normalization over the last axis of a 2-D tensor.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Tensor<F> {
        let x = self.node.value.view().into_dimensionality::<Ix2>().unwrap();
        let gam = gamma.node.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let eps = F::c(eps);
        let (r, c) = (x.nrows(), x.ncols());
        let cf = F::c(c as f64);
        let mut xhat = ndarray::Array2::<F>::zeros((r, c));
        let mut inv_std = ndarray::Array1::<F>::zeros(r);
        for i in 0..r {
            let row = x.row(i);
            let mu = row.sum() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).fold(F::zero(), |a, b| a + b) / cf;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                xhat[(i, j)] = (row[j] - mu) * istd;
            }
        }
        let mut y = xhat.clone();
        let bet = beta.node.value.view().into_dimensionality::<Ix1>().unwrap();
        for i in 0..r {
            for j in 0..c {
                y[(i, j)] = y[(i, j)] * gam[j] + bet[j];
            }
        }
        let xh = xhat;
        Tensor::op(
            y.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dgamma = ndarray::Array1::<F>::zeros(c);
                let mut dbeta = ndarray::Array1::<F>::zeros(c);
                let mut dx = ndarray::Array2::<F>::zeros((r, c));
                for i in 0..r {
                    let mut m1 = F::zero(); // mean(dxhat)
                    let mut m2 = F::zero(); // mean(dxhat * xhat)
                    for j in 0..c {
                        let dxh = g2[(i, j)] * gam[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh[(i, j)];
                        dgamma[j] = dgamma[j] + g2[(i, j)] * xh[(i, j)];
                        dbeta[j] = dbeta[j] + g2[(i, j)];
                    }
                    m1 = m1 / cf;
                    m2 = m2 / cf;
                    for j in 0..c {
                        let dxh = g2[(i, j)] * gam[j];
                        dx[(i, j)] = (dxh - m1 - xh[(i, j)] * m2) * inv_std[i];
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }

    // ----- linear algebra -----

    /// 2-D matrix product.
    pub fn matmul(&self, o: &Tensor<F>) -> Tensor<F> {
        let a = self.node.value.view().into_dimensionality::<Ix2>().expect("matmul lhs not 2-D");
        let b = o.node.value.view().into_dimensionality::<Ix2>().expect("matmul rhs not 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul: {}x{} · {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols());
        let v = a.dot(&b);
        let av = a.to_owned();
        let bv = b.to_owned();
        Tensor::op(
            v.into_dyn(),
            vec![self.clone(), o.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let ga = g2.dot(&bv.t());
                let gb = av.t().dot(&g2);
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        )
    }

    // ----- stable losses -----

    /// Elementwise binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&self, targets: &ArrayD<F>) -> Tensor<F> {
        assert_eq!(self.shape(), targets.shape());
        let x = self.node.value.clone();
        let t = targets.clone();
        let v = ndarray::Zip::from(&x).and(&t).map_collect(|&x, &t| {
            x.max(F::zero()) - x * t + (F::one() + (-x.abs()).exp()).ln()
        });
        Tensor::op(
            v,
            vec![self.clone()],
            Box::new(move |g| {
                let d = ndarray::Zip::from(&x).and(&t).map_collect(|&x, &t| sigmoid_scalar(x) - t);
                vec![g * &d]
            }),
        )
    }
}

pub(crate) fn sigmoid_scalar<F: Elem>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
