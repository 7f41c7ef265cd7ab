//! End-to-end model assembly: shared backbone → fusion pixel decoder →
//! view-interactive query decoder → lesion linker, with the two ablation
//! configurations that drop documented components.

use ndarray::Array2;

use crate::autodiff::nn::Embedding;
use crate::autodiff::param::ParamStore;
use crate::autodiff::tensor::{sigmoid_scalar, Elem};
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{resize_bilinear, PixelDecoder};
use crate::linker::{decode_links, LinkPredictionSet, Linker};
use crate::types::View;
use crate::vitd::{PredictionSet, ViewPred, Vitd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AblationMode {
    /// Complete model.
    Full,
    /// Cross-view fusion removed from the pixel decoder; the query decoder
    /// and linker are unchanged.
    VitdOnly,
    /// Pixel decoder unchanged; the query decoder collapses to a single
    /// branch without inter-attention and the linker is disabled.
    FpdOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Full, AblationMode::VitdOnly, AblationMode::FpdOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::VitdOnly => "vitd_only",
            AblationMode::FpdOnly => "fpd_only",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "vitd_only" => Ok(AblationMode::VitdOnly),
            "fpd_only" => Ok(AblationMode::FpdOnly),
            other => Err(Error::Config(format!(
                "unknown ablation mode {other:?}; valid values: full, vitd_only, fpd_only"
            ))),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub struct ModelOutput<F: Elem> {
    /// Per-layer prediction sets, index 0 = pre-block.
    pub preds: Vec<PredictionSet<F>>,
    /// Link predictions; None when the linker is disabled (fpd_only).
    pub link: Option<LinkPredictionSet<F>>,
}

enum Queries<F: Elem> {
    PerView { cc: Embedding<F>, mlo: Embedding<F> },
    Joint(Embedding<F>),
}

pub struct Model<F: Elem> {
    pub backbone: Backbone<F>,
    pub pixel_decoder: PixelDecoder<F>,
    pub vitd: Vitd<F>,
    pub linker: Option<Linker<F>>,
    queries: Queries<F>,
    link_queries: Option<Embedding<F>>,
    pub mode: AblationMode,
    pub cfg: ModelConfig,
}

impl<F: Elem> Model<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, cfg: &ModelConfig, mode: AblationMode) -> Result<Model<F>> {
        cfg.validate()?;
        let backbone = Backbone::new(store, seed, cfg);
        let pixel_decoder = PixelDecoder::new(store, seed, cfg, mode != AblationMode::VitdOnly);
        let vitd = Vitd::new(store, seed, cfg, mode != AblationMode::FpdOnly);
        let queries = match mode {
            AblationMode::FpdOnly => Queries::Joint(Embedding::new(
                store,
                seed,
                "vitd.query.joint",
                cfg.num_object_queries,
                cfg.embed_dim,
            )),
            _ => Queries::PerView {
                cc: Embedding::new(store, seed, "vitd.query.cc", cfg.num_object_queries, cfg.embed_dim),
                mlo: Embedding::new(store, seed, "vitd.query.mlo", cfg.num_object_queries, cfg.embed_dim),
            },
        };
        let (linker, link_queries) = if mode == AblationMode::FpdOnly {
            (None, None)
        } else {
            (
                Some(Linker::new(store, seed, cfg)),
                Some(Embedding::new(store, seed, "linker.query", cfg.num_link_queries, cfg.embed_dim)),
            )
        };
        Ok(Model { backbone, pixel_decoder, vitd, linker, queries, link_queries, mode, cfg: cfg.clone() })
    }

    pub fn forward(&self, cc: &Array2<F>, mlo: &Array2<F>) -> Result<ModelOutput<F>> {
        if cc.dim() != mlo.dim() {
            return Err(Error::Shape(format!(
                "view sizes differ: cc {:?} vs mlo {:?}",
                cc.dim(),
                mlo.dim()
            )));
        }
        let cc_pyr = self.backbone.extract_features(cc)?;
        let mlo_pyr = self.backbone.extract_features(mlo)?;
        let fused = self.pixel_decoder.pixel_decode(&cc_pyr, &mlo_pyr)?;
        let out = match &self.queries {
            Queries::PerView { cc, mlo } => self.vitd.forward(&fused, &cc.leaf(), &mlo.leaf()),
            Queries::Joint(q) => self.vitd.forward_joint(&fused, &q.leaf()),
        };
        let link = match (&self.linker, &self.link_queries) {
            (Some(lk), Some(q)) => Some(lk.link_forward(&out.x_cc, &out.x_mlo, &q.leaf())),
            _ => None,
        };
        Ok(ModelOutput { preds: out.preds, link })
    }
}

/// Lesion probability of query `q`: sigmoid(lesion logit − no-object logit).
pub fn lesion_probability<F: Elem>(pred: &ViewPred<F>, q: usize) -> f64 {
    let logits = pred.class_logits.value();
    sigmoid_scalar(logits[[q, 0]].to_f64().unwrap() - logits[[q, 1]].to_f64().unwrap())
}

/// One decoded instance at inference time.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Object-query index the detection came from (link decoding refers to it).
    pub query: usize,
    pub score: f64,
    pub malignancy: f64,
    /// Binary mask at input resolution.
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub cc: Vec<Detection>,
    pub mlo: Vec<Detection>,
    /// (cc query, mlo query, pair score) for every decoded link.
    pub links: Vec<(usize, usize, f64)>,
}

impl InferenceResult {
    pub fn view(&self, v: View) -> &[Detection] {
        match v {
            View::Cc => &self.cc,
            View::Mlo => &self.mlo,
        }
    }
}

/// Decodes one view's final-layer predictions: queries above the score floor,
/// mask logits bilinearly upsampled to (h, w) and binarized at probability
/// 0.5 (logit 0).
pub fn decode_view<F: Elem>(pred: &ViewPred<F>, h: usize, w: usize, score_floor: f64) -> Vec<Detection> {
    let n = pred.class_logits.shape()[0];
    let logits = pred.masks.value();
    let mal = pred.malignancy.value();
    let mut out = Vec::new();
    for q in 0..n {
        let score = lesion_probability(pred, q);
        if score <= score_floor {
            continue;
        }
        let flat = logits.index_axis(ndarray::Axis(0), q);
        let small = flat
            .to_shape((pred.mask_h, pred.mask_w))
            .expect("mask logits length must equal mask_h*mask_w")
            .to_owned();
        let big = resize_bilinear(&small, h, w);
        let mask = big.mapv(|v| v > F::zero());
        out.push(Detection {
            query: q,
            score,
            malignancy: sigmoid_scalar(mal[[q, 0]].to_f64().unwrap()),
            mask,
        });
    }
    out
}

/// Full inference decode: per-view detections above `score_floor` plus links
/// restricted to retained queries.
pub fn decode_output<F: Elem>(
    out: &ModelOutput<F>,
    h: usize,
    w: usize,
    score_floor: f64,
    link_threshold: f64,
) -> InferenceResult {
    let last = out.preds.last().expect("at least the pre-block prediction set exists");
    let cc = decode_view(&last.cc, h, w, score_floor);
    let mlo = decode_view(&last.mlo, h, w, score_floor);
    let links = match &out.link {
        Some(lk) => {
            let kept_cc: std::collections::BTreeSet<usize> = cc.iter().map(|d| d.query).collect();
            let kept_mlo: std::collections::BTreeSet<usize> = mlo.iter().map(|d| d.query).collect();
            decode_links(lk, link_threshold)
                .into_iter()
                .filter(|(c, m, _)| kept_cc.contains(c) && kept_mlo.contains(m))
                .collect()
        }
        None => Vec::new(),
    };
    InferenceResult { cc, mlo, links }
}

/// Converts an f32 image plane to the model element type.
pub fn image_plane<F: Elem>(img: &Array2<f32>) -> Array2<F> {
    img.mapv(|v| F::c(v as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_object_queries: 6,
            num_link_queries: 4,
            num_vitd_blocks: 3,
            num_heads: 2,
            fusion_downsample: 2,
            embed_dim: 16,
            backbone_channels: [4, 8, 8, 16],
            mask_dim: 16,
            ffn_mult: 2,
        }
    }

    fn names(mode: AblationMode) -> BTreeSet<String> {
        let mut store = ParamStore::<f32>::new();
        Model::new(&mut store, 0, &small_cfg(), mode).unwrap();
        store.names().into_iter().collect()
    }

    #[test]
    fn registry_diff_vitd_only_is_exactly_the_fuse_blocks() {
        let full = names(AblationMode::Full);
        let vitd_only = names(AblationMode::VitdOnly);
        assert!(vitd_only.is_subset(&full));
        let missing: Vec<String> = full.difference(&vitd_only).cloned().collect();
        assert!(!missing.is_empty());
        for n in &missing {
            assert!(
                n.starts_with("fpd.fuse32.") || n.starts_with("fpd.fuse16."),
                "unexpected extra parameter in full mode: {n}"
            );
        }
    }

    #[test]
    fn registry_diff_fpd_only_is_exactly_inter_attention_linker_and_queries() {
        let full = names(AblationMode::Full);
        let fpd_only = names(AblationMode::FpdOnly);
        for n in full.difference(&fpd_only) {
            assert!(
                n.contains(".inter.")
                    || n.contains(".ln_inter.")
                    || n.starts_with("linker.")
                    || n.starts_with("vitd.query."),
                "unexpected extra parameter in full mode: {n}"
            );
        }
        for n in fpd_only.difference(&full) {
            assert_eq!(n.as_str().split('.').take(3).collect::<Vec<_>>().join("."), "vitd.query.joint");
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, 3, &cfg, AblationMode::Full).unwrap();
        let img = Array2::<f32>::from_shape_fn((64, 64), |(i, j)| ((i * 7 + j) % 13) as f32 / 13.0);
        let out = model.forward(&img, &img).unwrap();
        assert_eq!(out.preds.len(), cfg.num_vitd_blocks + 1);
        let last = out.preds.last().unwrap();
        assert_eq!(last.cc.class_logits.shape(), &[cfg.num_object_queries, 2]);
        assert!(out.link.is_some());

        // Determinism: a second forward pass is bit-identical.
        let again = model.forward(&img, &img).unwrap();
        assert_eq!(
            out.preds.last().unwrap().cc.masks.value(),
            again.preds.last().unwrap().cc.masks.value()
        );

        // Mismatched view sizes are rejected.
        let small = Array2::<f32>::zeros((32, 32));
        assert!(model.forward(&img, &small).is_err());
    }

    #[test]
    fn untrained_decode_is_well_formed_at_input_resolution() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, 5, &cfg, AblationMode::Full).unwrap();
        let img = Array2::<f32>::from_shape_fn((64, 64), |(i, j)| ((i + 2 * j) % 9) as f32 / 9.0);
        let out = model.forward(&img, &img).unwrap();
        let dec = decode_output(&out, 64, 64, 0.0, 0.5);
        assert!(!dec.cc.is_empty());
        for d in dec.cc.iter().chain(&dec.mlo) {
            assert!(d.score.is_finite() && (0.0..=1.0).contains(&d.score));
            assert!((0.0..=1.0).contains(&d.malignancy));
            assert_eq!(d.mask.dim(), (64, 64));
        }
        for &(c, m, s) in &dec.links {
            assert!(c < cfg.num_object_queries && m < cfg.num_object_queries);
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn fpd_only_forward_has_no_link_output_and_shares_queries() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, 7, &cfg, AblationMode::FpdOnly).unwrap();
        let img = Array2::<f32>::from_shape_fn((64, 64), |(i, j)| ((3 * i + j) % 11) as f32 / 11.0);
        let out = model.forward(&img, &img).unwrap();
        assert!(out.link.is_none());
        // Shared query branch: class logits coincide across views.
        let last = out.preds.last().unwrap();
        assert_eq!(last.cc.class_logits.value(), last.mlo.class_logits.value());
    }
}
