//! Fusion pixel decoder: cross-view deformable-attention fusion at the two
//! lowest-resolution scales, FPN-style merging, and high-resolution mask
//! features per view.

use ndarray::{Array2, ArrayD};

use crate::autodiff::image_ops::{bilinear_sample, flatten_tokens, unflatten_tokens, upsample_nearest2};
use crate::autodiff::{Conv2dLayer, Elem, Mha, ParamStore, Tensor};
use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::types::View;

pub use crate::autodiff::image_ops::resize_bilinear;

/// Uniformly distributed reference points at the centers of r×r cells over an
/// h×w map, in normalized [0,1]² coordinates, row-major with x varying
/// fastest.
#[derive(Debug, Clone)]
pub struct ReferencePointGrid {
    pub rows: usize,
    pub cols: usize,
    /// P×2 array of (x, y).
    points: Array2<f64>,
}

impl ReferencePointGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn points_as<F: Elem>(&self) -> ArrayD<F> {
        self.points.mapv(F::c).into_dyn()
    }
}

/// `ceil(h/r) · ceil(w/r)` cell-center points for an h×w reference map with
/// downsample factor r.
pub fn uniform_reference_points(h: usize, w: usize, r: usize) -> Result<ReferencePointGrid> {
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("reference map has zero dimension: {h}×{w}")));
    }
    if r == 0 {
        return Err(Error::Shape("downsample factor must be at least 1".into()));
    }
    let rows = h.div_ceil(r);
    let cols = w.div_ceil(r);
    let mut points = Array2::<f64>::zeros((rows * cols, 2));
    for i in 0..rows {
        for j in 0..cols {
            let p = i * cols + j;
            points[(p, 0)] = (j as f64 + 0.5) / cols as f64;
            points[(p, 1)] = (i as f64 + 0.5) / rows as f64;
        }
    }
    Ok(ReferencePointGrid { rows, cols, points })
}

/// The offset network: a small conv stack pools the main map into a query
/// summary, which is sampled at each reference location and mapped to a
/// per-point (dx, dy) shared across heads. The head is zero-initialized so
/// training starts from the undeformed grid.
pub struct OffsetNet<F: Elem> {
    pub pool: Conv2dLayer<F>,
    pub head: crate::autodiff::Linear<F>,
}

impl<F: Elem> OffsetNet<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, name: &str, dim: usize) -> Self {
        OffsetNet {
            pool: Conv2dLayer::new(store, seed, &format!("{name}.pool"), dim, dim, 3, 1, 1),
            head: crate::autodiff::Linear::new_zero(store, &format!("{name}.head"), dim, 2),
        }
    }

    /// Offsets in normalized units, one (dx, dy) per reference point.
    pub fn predict_offsets(&self, main: &Tensor<F>, grid: &ReferencePointGrid) -> Tensor<F> {
        let summary = self.pool.forward(main).relu();
        let at_refs = bilinear_sample(&summary, &Tensor::new(grid.points_as::<F>()));
        self.head.forward(&at_refs)
    }
}

pub struct FusionLayerOutput<F: Elem> {
    pub out: Tensor<F>,
    /// Deformed sampling locations actually used (P×2, clamped to [0,1]²).
    pub deformed_points: Tensor<F>,
    /// Per-head attention over sampled points, each (h1·w1)×P.
    pub attn: Vec<Tensor<F>>,
}

/// One direction of cross-view fusion: queries from the main map, deformable
/// keys/values sampled from the reference map, standard multi-head attention,
/// residual back onto the main map.
pub struct FusionLayer<F: Elem> {
    pub offset_net: OffsetNet<F>,
    pub mha: Mha<F>,
    pub downsample: usize,
}

impl<F: Elem> FusionLayer<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, name: &str, cfg: &ModelConfig) -> Self {
        FusionLayer {
            offset_net: OffsetNet::new(store, seed, &format!("{name}.offset"), cfg.embed_dim),
            mha: Mha::new(store, seed, &format!("{name}.mha"), cfg.embed_dim, cfg.num_heads),
            downsample: cfg.fusion_downsample,
        }
    }

    pub fn forward(&self, main: &Tensor<F>, reference: &Tensor<F>) -> Result<FusionLayerOutput<F>> {
        let ms = main.shape().to_vec();
        let rs = reference.shape().to_vec();
        if ms[0] != rs[0] {
            return Err(Error::Shape(format!(
                "fusion layer channel mismatch: main has {}, reference has {}",
                ms[0], rs[0]
            )));
        }
        let grid = uniform_reference_points(rs[1], rs[2], self.downsample)?;
        let offsets = self.offset_net.predict_offsets(main, &grid);
        let deformed = Tensor::new(grid.points_as::<F>()).add(&offsets).clamp01();
        let sampled = bilinear_sample(reference, &deformed);
        let q = flatten_tokens(main);
        let mha = self.mha.forward(&q, &sampled, None);
        let out = unflatten_tokens(&mha.out, ms[1], ms[2]).add(main);
        Ok(FusionLayerOutput { out, deformed_points: deformed, attn: mha.attn })
    }
}

/// Bidirectional fusion at one scale: each view is fused with the other and
/// the result is concatenated with the original and reduced by a 1×1 conv.
pub struct FuseBlock<F: Elem> {
    pub cc_from_mlo: FusionLayer<F>,
    pub mlo_from_cc: FusionLayer<F>,
    pub cc_proj: Conv2dLayer<F>,
    pub mlo_proj: Conv2dLayer<F>,
}

impl<F: Elem> FuseBlock<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        FuseBlock {
            cc_from_mlo: FusionLayer::new(store, seed, &format!("{name}.cc_from_mlo"), cfg),
            mlo_from_cc: FusionLayer::new(store, seed, &format!("{name}.mlo_from_cc"), cfg),
            cc_proj: Conv2dLayer::new(store, seed, &format!("{name}.cc_proj"), 2 * c, c, 1, 1, 0),
            mlo_proj: Conv2dLayer::new(store, seed, &format!("{name}.mlo_proj"), 2 * c, c, 1, 1, 0),
        }
    }

    pub fn forward(&self, cc: &Tensor<F>, mlo: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        if cc.shape() != mlo.shape() {
            return Err(Error::Shape(format!(
                "fuse block shape mismatch: cc {:?} vs mlo {:?}",
                cc.shape(),
                mlo.shape()
            )));
        }
        let cc_fused = self.cc_from_mlo.forward(cc, mlo)?.out;
        let mlo_fused = self.mlo_from_cc.forward(mlo, cc)?.out;
        let cc_out = self.cc_proj.forward(&Tensor::concat(0, &[cc.clone(), cc_fused]));
        let mlo_out = self.mlo_proj.forward(&Tensor::concat(0, &[mlo.clone(), mlo_fused]));
        Ok((cc_out, mlo_out))
    }
}

/// Decoder-ready per-view maps: three low-resolution scales for the query
/// decoder plus high-resolution mask features.
pub struct FusedMaps<F: Elem> {
    /// Per view, maps at strides [32, 16, 8].
    cc_maps: Vec<Tensor<F>>,
    mlo_maps: Vec<Tensor<F>>,
    cc_mask: Tensor<F>,
    mlo_mask: Tensor<F>,
}

pub const DECODER_STRIDES: [usize; 3] = [32, 16, 8];

impl<F: Elem> FusedMaps<F> {
    /// Assembles fused maps directly (tests and ablation plumbing).
    pub fn new(
        cc_maps: Vec<Tensor<F>>,
        mlo_maps: Vec<Tensor<F>>,
        cc_mask: Tensor<F>,
        mlo_mask: Tensor<F>,
    ) -> Self {
        assert_eq!(cc_maps.len(), DECODER_STRIDES.len());
        assert_eq!(mlo_maps.len(), DECODER_STRIDES.len());
        FusedMaps { cc_maps, mlo_maps, cc_mask, mlo_mask }
    }

    pub fn decoder_maps(&self, v: View) -> &[Tensor<F>] {
        match v {
            View::Cc => &self.cc_maps,
            View::Mlo => &self.mlo_maps,
        }
    }

    pub fn mask_features(&self, v: View) -> &Tensor<F> {
        match v {
            View::Cc => &self.cc_mask,
            View::Mlo => &self.mlo_mask,
        }
    }
}

struct ViewLaterals<F: Elem> {
    convs: Vec<Conv2dLayer<F>>, // strides 4, 8, 16, 32
}

/// The full pixel decoder. With `fuse: false` (the view-interaction-only
/// ablation) the two fuse blocks are absent from the parameter registry and
/// the two views stay independent.
pub struct PixelDecoder<F: Elem> {
    cc_lateral: ViewLaterals<F>,
    mlo_lateral: ViewLaterals<F>,
    fuse32: Option<FuseBlock<F>>,
    fuse16: Option<FuseBlock<F>>,
    cc_mask_conv: Conv2dLayer<F>,
    mlo_mask_conv: Conv2dLayer<F>,
}

impl<F: Elem> PixelDecoder<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, cfg: &ModelConfig, fuse: bool) -> Self {
        let laterals = |store: &mut ParamStore<F>, view: &str| ViewLaterals {
            convs: crate::backbone::STRIDES
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Conv2dLayer::new(
                        store,
                        seed,
                        &format!("fpd.lateral{s}.{view}"),
                        cfg.backbone_channels[i],
                        cfg.embed_dim,
                        1,
                        1,
                        0,
                    )
                })
                .collect(),
        };
        let cc_lateral = laterals(store, "cc");
        let mlo_lateral = laterals(store, "mlo");
        let (fuse32, fuse16) = if fuse {
            (
                Some(FuseBlock::new(store, seed, "fpd.fuse32", cfg)),
                Some(FuseBlock::new(store, seed, "fpd.fuse16", cfg)),
            )
        } else {
            (None, None)
        };
        let cc_mask_conv = Conv2dLayer::new(store, seed, "fpd.mask_conv.cc", cfg.embed_dim, cfg.mask_dim, 3, 1, 1);
        let mlo_mask_conv = Conv2dLayer::new(store, seed, "fpd.mask_conv.mlo", cfg.embed_dim, cfg.mask_dim, 3, 1, 1);
        PixelDecoder { cc_lateral, mlo_lateral, fuse32, fuse16, cc_mask_conv, mlo_mask_conv }
    }

    pub fn pixel_decode(
        &self,
        cc_pyramid: &FeaturePyramid<F>,
        mlo_pyramid: &FeaturePyramid<F>,
    ) -> Result<FusedMaps<F>> {
        // Lateral projections to the shared embedding width, per view.
        let lat = |l: &ViewLaterals<F>, pyr: &FeaturePyramid<F>| -> Vec<Tensor<F>> {
            l.convs.iter().zip(&pyr.maps).map(|(c, m)| c.forward(m)).collect()
        };
        let cc = lat(&self.cc_lateral, cc_pyramid); // strides 4, 8, 16, 32
        let mlo = lat(&self.mlo_lateral, mlo_pyramid);

        // Cross-view fusion at the two lowest resolutions; identity otherwise.
        let (cc32, mlo32) = match &self.fuse32 {
            Some(f) => f.forward(&cc[3], &mlo[3])?,
            None => (cc[3].clone(), mlo[3].clone()),
        };
        let (cc16, mlo16) = match &self.fuse16 {
            Some(f) => f.forward(&cc[2], &mlo[2])?,
            None => (cc[2].clone(), mlo[2].clone()),
        };

        // FPN merge, low to high resolution, by upsample + elementwise add.
        let merge = |top: &Tensor<F>, lateral: &Tensor<F>| upsample_nearest2(top).add(lateral);
        let build = |s32: Tensor<F>, s16: Tensor<F>, s8: Tensor<F>, s4: Tensor<F>| {
            let p32 = s32;
            let p16 = merge(&p32, &s16);
            let p8 = merge(&p16, &s8);
            let p4 = merge(&p8, &s4);
            (vec![p32, p16, p8], p4)
        };
        let (cc_maps, cc_p4) = build(cc32, cc16, cc[1].clone(), cc[0].clone());
        let (mlo_maps, mlo_p4) = build(mlo32, mlo16, mlo[1].clone(), mlo[0].clone());

        Ok(FusedMaps {
            cc_maps,
            mlo_maps,
            cc_mask: self.cc_mask_conv.forward(&cc_p4),
            mlo_mask: self.mlo_mask_conv.forward(&mlo_p4),
        })
    }
}

/// Naive scalar-loop bilinear interpolation (the oracle convention: cell
/// centers, border clamp). Used by tests and by mask resizing.
pub fn bilinear_oracle<F: Elem>(map: &Array2<F>, x: f64, y: f64) -> F {
    let (h, w) = map.dim();
    let u = x * w as f64 - 0.5;
    let v = y * h as f64 - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let wx = F::c(u - x0);
    let wy = F::c(v - y0);
    let cl = |t: f64, hi: usize| -> usize { (t.max(0.0) as usize).min(hi - 1) };
    let (x0c, x1c) = (cl(x0, w), cl(x0 + 1.0, w));
    let (y0c, y1c) = (cl(y0, h), cl(y0 + 1.0, h));
    let one = F::one();
    (one - wx) * (one - wy) * map[(y0c, x0c)]
        + wx * (one - wy) * map[(y0c, x1c)]
        + (one - wx) * wy * map[(y1c, x0c)]
        + wx * wy * map[(y1c, x1c)]
}
