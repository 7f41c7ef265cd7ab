//! Lesion linker: link queries attend over both views' final object queries
//! and output pair-presence logits plus pointer distributions identifying the
//! linked CC and MLO objects.

use ndarray::Ix2;

use crate::autodiff::{Elem, Embedding, LayerNorm, Linear, Mha, Mlp, ParamStore, Tensor};
use crate::config::ModelConfig;

pub struct LinkPredictionSet<F: Elem> {
    /// L×1 pair-presence logits.
    pub pair_logits: Tensor<F>,
    /// L×N row-stochastic pointer distributions over CC object queries.
    pub cc_pointer: Tensor<F>,
    /// L×N row-stochastic pointer distributions over MLO object queries.
    pub mlo_pointer: Tensor<F>,
    /// L×N pre-softmax CC pointer scores (loss side: stable log-softmax CE).
    pub cc_pointer_scores: Tensor<F>,
    /// L×N pre-softmax MLO pointer scores.
    pub mlo_pointer_scores: Tensor<F>,
    /// L×C final link embeddings.
    pub embeddings: Tensor<F>,
}

struct LinkBlock<F: Elem> {
    ln_self: LayerNorm<F>,
    ln_cross: LayerNorm<F>,
    ln_ffn: LayerNorm<F>,
    selfattn: Mha<F>,
    cross: Mha<F>,
    ffn: Mlp<F>,
}

impl<F: Elem> LinkBlock<F> {
    fn new(store: &mut ParamStore<F>, seed: u64, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        LinkBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), c),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), c),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), c),
            selfattn: Mha::new(store, seed, &format!("{name}.selfattn"), c, cfg.num_heads),
            cross: Mha::new(store, seed, &format!("{name}.cross"), c, cfg.num_heads),
            ffn: Mlp::new(store, seed, &format!("{name}.ffn"), c, cfg.ffn_mult * c, c),
        }
    }

    fn forward(&self, x: &Tensor<F>, objects: &Tensor<F>) -> Tensor<F> {
        let y = self.ln_self.forward(x);
        let x = self.selfattn.forward(&y, &y, None).out.add(x);
        let x = self
            .cross
            .forward(&self.ln_cross.forward(&x), objects, None)
            .out
            .add(&x);
        self.ffn.forward(&self.ln_ffn.forward(&x)).add(&x)
    }
}

/// Two-block DETR-style link decoder with pair and pointer heads.
pub struct Linker<F: Elem> {
    blocks: Vec<LinkBlock<F>>,
    /// 2×C learned embeddings distinguishing which view a key came from.
    view_embed: Embedding<F>,
    pair_head: Linear<F>,
    pointer_q: Linear<F>,
    pointer_k: Linear<F>,
    embed_dim: usize,
}

impl<F: Elem> Linker<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        Linker {
            blocks: (0..2)
                .map(|i| LinkBlock::new(store, seed, &format!("linker.block{i}"), cfg))
                .collect(),
            view_embed: Embedding::new(store, seed, "linker.view_embed", 2, c),
            pair_head: Linear::new(store, seed, "linker.pair", c, 1),
            pointer_q: Linear::new(store, seed, "linker.pointer_q", c, c),
            pointer_k: Linear::new(store, seed, "linker.pointer_k", c, c),
            embed_dim: c,
        }
    }

    /// x_cc_final / x_mlo_final: N×C final decoder query states;
    /// link_queries: L×C initial link embeddings.
    pub fn link_forward(
        &self,
        x_cc_final: &Tensor<F>,
        x_mlo_final: &Tensor<F>,
        link_queries: &Tensor<F>,
    ) -> LinkPredictionSet<F> {
        let ve = self.view_embed.leaf();
        let kv = Tensor::concat(
            0,
            &[
                x_cc_final.add(&ve.narrow(0, 0, 1)),
                x_mlo_final.add(&ve.narrow(0, 1, 1)),
            ],
        );
        let mut x = link_queries.clone();
        for b in &self.blocks {
            x = b.forward(&x, &kv);
        }
        let scale = 1.0 / (self.embed_dim as f64).sqrt();
        let q = self.pointer_q.forward(&x).mul_scalar(scale);
        let scores = |objs: &Tensor<F>| q.matmul(&self.pointer_k.forward(objs).t());
        let (cc_scores, mlo_scores) = (scores(x_cc_final), scores(x_mlo_final));
        LinkPredictionSet {
            pair_logits: self.pair_head.forward(&x),
            cc_pointer: cc_scores.softmax_rows(),
            mlo_pointer: mlo_scores.softmax_rows(),
            cc_pointer_scores: cc_scores,
            mlo_pointer_scores: mlo_scores,
            embeddings: x,
        }
    }
}

/// Thresholded link decoding: every link whose pair probability clears the
/// threshold emits (argmax cc pointer, argmax mlo pointer, score); duplicate
/// (cc, mlo) pairs keep the highest score.
pub fn decode_links<F: Elem>(
    preds: &LinkPredictionSet<F>,
    pair_threshold: f64,
) -> Vec<(usize, usize, f64)> {
    let logits = preds.pair_logits.value();
    let ccp = preds.cc_pointer.value().view().into_dimensionality::<Ix2>().unwrap();
    let mlop = preds.mlo_pointer.value().view().into_dimensionality::<Ix2>().unwrap();
    let argmax = |row: ndarray::ArrayView1<F>| -> usize {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    };
    let mut best: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for l in 0..ccp.nrows() {
        let score = crate::autodiff::tensor::sigmoid_scalar(logits.as_slice().unwrap()[l].f64());
        if score >= pair_threshold {
            let key = (argmax(ccp.row(l)), argmax(mlop.row(l)));
            let e = best.entry(key).or_insert(score);
            if score > *e {
                *e = score;
            }
        }
    }
    best.into_iter().map(|((c, m), s)| (c, m, s)).collect()
}
