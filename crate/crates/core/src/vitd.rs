//! View-interactive transformer decoder: per-view object queries refined by
//! masked attention, self-attention, cross-view inter-attention, and an FFN
//! over a round-robin of the three decoder scales, with per-layer prediction
//! heads for deep supervision.

use ndarray::{Array2, Ix2};

use crate::autodiff::image_ops::{flatten_tokens, resize_bilinear};
use crate::autodiff::nn::sinusoidal_pos_enc;
use crate::autodiff::{Elem, LayerNorm, Linear, Mha, Mlp, ParamStore, Tensor};
use crate::config::ModelConfig;
use crate::fusion::FusedMaps;
use crate::types::View;

/// Additive masking constant: masked-out attention positions receive this
/// large negative value before the softmax; foreground positions receive 0.
pub const MASK_CONST: f64 = -1e9;

/// Converts previous-layer mask logits (N×(mh·mw)) into an additive attention
/// mask (N×(h·w)) for the target scale: resize, binarize at logit 0, 0 where
/// foreground and [`MASK_CONST`] elsewhere. A query with no foreground after
/// binarization falls back to an all-zero (unmasked) row.
pub fn compute_attention_mask<F: Elem>(
    mask_logits: &Array2<F>,
    mask_hw: (usize, usize),
    target_hw: (usize, usize),
) -> Array2<F> {
    let (mh, mw) = mask_hw;
    let (h, w) = target_hw;
    let n = mask_logits.nrows();
    assert_eq!(mask_logits.ncols(), mh * mw, "mask logits do not match mask resolution");
    let mut out = Array2::<F>::zeros((n, h * w));
    let masked = F::c(MASK_CONST);
    for q in 0..n {
        let row = mask_logits.row(q);
        let as2 = Array2::from_shape_fn((mh, mw), |(i, j)| row[i * mw + j]);
        let resized = resize_bilinear(&as2, h, w);
        let mut any = false;
        for i in 0..h {
            for j in 0..w {
                if resized[(i, j)] > F::zero() {
                    any = true;
                } else {
                    out[(q, i * w + j)] = masked;
                }
            }
        }
        if !any {
            for j in 0..h * w {
                out[(q, j)] = F::zero();
            }
        }
    }
    out
}

/// Per-view outputs of one decoder layer.
pub struct ViewPred<F: Elem> {
    /// N×2 logits: column 0 = lesion, column 1 = no-object.
    pub class_logits: Tensor<F>,
    /// N×1 malignancy logits.
    pub malignancy: Tensor<F>,
    /// N×mask_dim mask embeddings.
    pub mask_embed: Tensor<F>,
    /// N×(mask_h·mask_w) mask logits (inner product of embeddings with the
    /// high-resolution mask features at every location).
    pub masks: Tensor<F>,
    pub mask_h: usize,
    pub mask_w: usize,
}

impl<F: Elem> ViewPred<F> {
    pub fn mask_logits_2d(&self) -> Array2<F> {
        self.masks
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned()
    }
}

pub struct PredictionSet<F: Elem> {
    pub cc: ViewPred<F>,
    pub mlo: ViewPred<F>,
}

impl<F: Elem> PredictionSet<F> {
    pub fn view(&self, v: View) -> &ViewPred<F> {
        match v {
            View::Cc => &self.cc,
            View::Mlo => &self.mlo,
        }
    }
}

/// Prediction heads, shared across layers and views.
pub struct Heads<F: Elem> {
    pub class: Linear<F>,
    pub malignancy: Linear<F>,
    pub mask_embed: Mlp<F>,
}

impl<F: Elem> Heads<F> {
    fn new(store: &mut ParamStore<F>, seed: u64, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        Heads {
            class: Linear::new(store, seed, "vitd.head.class", c, 2),
            malignancy: Linear::new(store, seed, "vitd.head.malignancy", c, 1),
            mask_embed: Mlp::new(store, seed, "vitd.head.mask_embed", c, c, cfg.mask_dim),
        }
    }

    /// Runs all three heads for one view. `mask_flat` is (mask_h·mask_w)×mask_dim.
    pub fn predict(&self, x: &Tensor<F>, mask_flat: &Tensor<F>, mask_h: usize, mask_w: usize) -> ViewPred<F> {
        let e = self.mask_embed.forward(x);
        ViewPred {
            class_logits: self.class.forward(x),
            malignancy: self.malignancy.forward(x),
            masks: e.matmul(&mask_flat.t()),
            mask_embed: e,
            mask_h,
            mask_w,
        }
    }
}

/// One decoder layer's weights (shared between the two views).
pub struct DecoderBlock<F: Elem> {
    pub ln_masked: LayerNorm<F>,
    pub ln_self: LayerNorm<F>,
    pub ln_inter: Option<LayerNorm<F>>,
    pub ln_ffn: LayerNorm<F>,
    pub masked: Mha<F>,
    pub selfattn: Mha<F>,
    /// Absent in the single-branch (joint) configuration.
    pub inter: Option<Mha<F>>,
    pub ffn: Mlp<F>,
}

impl<F: Elem> DecoderBlock<F> {
    fn new(store: &mut ParamStore<F>, seed: u64, name: &str, cfg: &ModelConfig, with_inter: bool) -> Self {
        let c = cfg.embed_dim;
        DecoderBlock {
            ln_masked: LayerNorm::new(store, &format!("{name}.ln_masked"), c),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), c),
            ln_inter: with_inter.then(|| LayerNorm::new(store, &format!("{name}.ln_inter"), c)),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), c),
            masked: Mha::new(store, seed, &format!("{name}.masked"), c, cfg.num_heads),
            selfattn: Mha::new(store, seed, &format!("{name}.selfattn"), c, cfg.num_heads),
            inter: with_inter.then(|| Mha::new(store, seed, &format!("{name}.inter"), c, cfg.num_heads)),
            ffn: Mlp::new(store, seed, &format!("{name}.ffn"), c, cfg.ffn_mult * c, c),
        }
    }

    /// Eq. (1): softmax(M + QKᵀ/√d)V + X_prev, pre-norm on the query side.
    pub fn masked_attention(
        &self,
        x_prev: &Tensor<F>,
        k_in: &Tensor<F>,
        v_in: &Tensor<F>,
        mask: &Array2<F>,
    ) -> Tensor<F> {
        let q = self.ln_masked.forward(x_prev);
        self.masked.forward_kv(&q, k_in, v_in, Some(mask)).out.add(x_prev)
    }

    fn self_attention(&self, x: &Tensor<F>) -> Tensor<F> {
        let y = self.ln_self.forward(x);
        self.selfattn.forward(&y, &y, None).out.add(x)
    }

    /// Cross-view attention: queries from this view, keys/values from the
    /// other view's post-self-attention snapshot. Residual onto X_self.
    pub fn inter_attention(&self, x_self: &Tensor<F>, x_other: &Tensor<F>) -> Tensor<F> {
        let inter = self.inter.as_ref().expect("inter-attention disabled in this configuration");
        let ln = self.ln_inter.as_ref().expect("inter-attention disabled in this configuration");
        let q = ln.forward(x_self);
        let kv = ln.forward(x_other);
        inter.forward(&q, &kv, None).out.add(x_self)
    }

    fn ffn(&self, x: &Tensor<F>) -> Tensor<F> {
        self.ffn.forward(&self.ln_ffn.forward(x)).add(x)
    }

    /// Two-view block: masked attention → self-attention → inter-attention
    /// (both directions from the same snapshot) → FFN.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_pair(
        &self,
        x_cc: &Tensor<F>,
        x_mlo: &Tensor<F>,
        k_cc: &Tensor<F>,
        v_cc: &Tensor<F>,
        k_mlo: &Tensor<F>,
        v_mlo: &Tensor<F>,
        m_cc: &Array2<F>,
        m_mlo: &Array2<F>,
    ) -> (Tensor<F>, Tensor<F>) {
        let cc = self.self_attention(&self.masked_attention(x_cc, k_cc, v_cc, m_cc));
        let mlo = self.self_attention(&self.masked_attention(x_mlo, k_mlo, v_mlo, m_mlo));
        let cc2 = self.inter_attention(&cc, &mlo);
        let mlo2 = self.inter_attention(&mlo, &cc);
        (self.ffn(&cc2), self.ffn(&mlo2))
    }

    /// Single-branch block: one query set attends over the concatenation of
    /// both views' tokens; no inter-attention.
    pub fn forward_joint(
        &self,
        x: &Tensor<F>,
        k_joint: &Tensor<F>,
        v_joint: &Tensor<F>,
        m_joint: &Array2<F>,
    ) -> Tensor<F> {
        self.ffn(&self.self_attention(&self.masked_attention(x, k_joint, v_joint, m_joint)))
    }
}

pub struct VitdOutput<F: Elem> {
    /// One prediction set per layer, index 0 = initial (pre-block) predictions.
    pub preds: Vec<PredictionSet<F>>,
    /// Final query states, consumed by the linker.
    pub x_cc: Tensor<F>,
    pub x_mlo: Tensor<F>,
}

/// Per-scale key/value token tensors for one view.
struct ScaleTokens<F: Elem> {
    k: Tensor<F>,
    v: Tensor<F>,
    h: usize,
    w: usize,
}

pub struct Vitd<F: Elem> {
    pub blocks: Vec<DecoderBlock<F>>,
    pub heads: Heads<F>,
}

impl<F: Elem> Vitd<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, cfg: &ModelConfig, with_inter: bool) -> Self {
        let blocks = (0..cfg.num_vitd_blocks)
            .map(|i| DecoderBlock::new(store, seed, &format!("vitd.block{i}"), cfg, with_inter))
            .collect();
        Vitd { blocks, heads: Heads::new(store, seed, cfg) }
    }

    /// Scale index (into the stride-[32,16,8] decoder maps) used by block `i`
    /// (0-based): round-robin starting at the lowest resolution.
    pub fn scale_index(i: usize) -> usize {
        i % 3
    }

    fn scale_tokens(maps: &[Tensor<F>], dim: usize) -> Vec<ScaleTokens<F>> {
        maps.iter()
            .map(|m| {
                let s = m.shape().to_vec();
                let tokens = flatten_tokens(m);
                let pos = Tensor::new(sinusoidal_pos_enc::<F>(s[1], s[2], dim).into_dyn());
                ScaleTokens { k: tokens.add(&pos), v: tokens, h: s[1], w: s[2] }
            })
            .collect()
    }

    fn attention_mask(pred: &ViewPred<F>, h: usize, w: usize) -> Array2<F> {
        compute_attention_mask(&pred.mask_logits_2d(), (pred.mask_h, pred.mask_w), (h, w))
    }

    /// Full two-branch forward: initial predictions from the query embeddings,
    /// then every block, retaining all layers' outputs for deep supervision.
    pub fn forward(&self, fused: &FusedMaps<F>, q_cc: &Tensor<F>, q_mlo: &Tensor<F>) -> VitdOutput<F> {
        let dim = q_cc.shape()[1];
        let tok_cc = Self::scale_tokens(fused.decoder_maps(View::Cc), dim);
        let tok_mlo = Self::scale_tokens(fused.decoder_maps(View::Mlo), dim);
        let mf_cc = flatten_tokens(fused.mask_features(View::Cc));
        let mf_mlo = flatten_tokens(fused.mask_features(View::Mlo));
        let ms = fused.mask_features(View::Cc).shape().to_vec();
        let (mh, mw) = (ms[1], ms[2]);

        let predict = |x_cc: &Tensor<F>, x_mlo: &Tensor<F>| PredictionSet {
            cc: self.heads.predict(x_cc, &mf_cc, mh, mw),
            mlo: self.heads.predict(x_mlo, &mf_mlo, mh, mw),
        };

        let (mut x_cc, mut x_mlo) = (q_cc.clone(), q_mlo.clone());
        let mut preds = vec![predict(&x_cc, &x_mlo)];
        for (i, block) in self.blocks.iter().enumerate() {
            let s = Self::scale_index(i);
            let (tc, tm) = (&tok_cc[s], &tok_mlo[s]);
            let prev = preds.last().unwrap();
            let m_cc = Self::attention_mask(&prev.cc, tc.h, tc.w);
            let m_mlo = Self::attention_mask(&prev.mlo, tm.h, tm.w);
            let (nc, nm) = block.forward_pair(&x_cc, &x_mlo, &tc.k, &tc.v, &tm.k, &tm.v, &m_cc, &m_mlo);
            x_cc = nc;
            x_mlo = nm;
            preds.push(predict(&x_cc, &x_mlo));
        }
        VitdOutput { preds, x_cc, x_mlo }
    }

    /// Single-branch forward (the decoder-collapse ablation): one query set,
    /// keys/values are the concatenation of both views' tokens, and the
    /// attention mask is the union of the per-view masks of the same query.
    pub fn forward_joint(&self, fused: &FusedMaps<F>, q_joint: &Tensor<F>) -> VitdOutput<F> {
        let dim = q_joint.shape()[1];
        let tok_cc = Self::scale_tokens(fused.decoder_maps(View::Cc), dim);
        let tok_mlo = Self::scale_tokens(fused.decoder_maps(View::Mlo), dim);
        let mf_cc = flatten_tokens(fused.mask_features(View::Cc));
        let mf_mlo = flatten_tokens(fused.mask_features(View::Mlo));
        let ms = fused.mask_features(View::Cc).shape().to_vec();
        let (mh, mw) = (ms[1], ms[2]);

        // The same query index serves both views: shared class / malignancy /
        // embedding, per-view masks from the per-view mask features.
        let predict = |x: &Tensor<F>| PredictionSet {
            cc: self.heads.predict(x, &mf_cc, mh, mw),
            mlo: self.heads.predict(x, &mf_mlo, mh, mw),
        };

        let mut x = q_joint.clone();
        let mut preds = vec![predict(&x)];
        for (i, block) in self.blocks.iter().enumerate() {
            let s = Self::scale_index(i);
            let (tc, tm) = (&tok_cc[s], &tok_mlo[s]);
            let k = Tensor::concat(0, &[tc.k.clone(), tm.k.clone()]);
            let v = Tensor::concat(0, &[tc.v.clone(), tm.v.clone()]);
            let prev = preds.last().unwrap();
            let m_cc = Self::attention_mask(&prev.cc, tc.h, tc.w);
            let m_mlo = Self::attention_mask(&prev.mlo, tm.h, tm.w);
            let m = ndarray::concatenate(ndarray::Axis(1), &[m_cc.view(), m_mlo.view()]).unwrap();
            x = block.forward_joint(&x, &k, &v, &m);
            preds.push(predict(&x));
        }
        VitdOutput { x_cc: x.clone(), x_mlo: x.clone(), preds }
    }
}
