//! Shared-weight multi-scale feature extractor. Both views go through the
//! same parameters; the pyramid has exactly four maps at strides 4/8/16/32.

use ndarray::Array2;

use crate::autodiff::image_ops::{flatten_tokens, unflatten_tokens};
use crate::autodiff::{Conv2dLayer, Elem, LayerNorm, ParamStore, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Per-view multi-scale feature maps, `maps[i]` at stride `STRIDES[i]`.
pub struct FeaturePyramid<F: Elem> {
    pub maps: Vec<Tensor<F>>,
}

impl<F: Elem> FeaturePyramid<F> {
    pub fn at_stride(&self, stride: usize) -> &Tensor<F> {
        let i = STRIDES.iter().position(|&s| s == stride).expect("invalid stride");
        &self.maps[i]
    }
}

/// Channel-wise layer norm on a C×H×W map (normalizes each spatial position
/// over channels).
fn norm_map<F: Elem>(ln: &LayerNorm<F>, x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape().to_vec();
    unflatten_tokens(&ln.forward(&flatten_tokens(x)), s[1], s[2])
}

struct ResBlock<F: Elem> {
    norm: LayerNorm<F>,
    conv1: Conv2dLayer<F>,
    conv2: Conv2dLayer<F>,
}

impl<F: Elem> ResBlock<F> {
    fn new(store: &mut ParamStore<F>, seed: u64, name: &str, ch: usize) -> Self {
        ResBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), ch),
            conv1: Conv2dLayer::new(store, seed, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            conv2: Conv2dLayer::new(store, seed, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
        }
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let h = norm_map(&self.norm, x);
        x.add(&self.conv2.forward(&self.conv1.forward(&h).relu()))
    }
}

struct Stage<F: Elem> {
    down: Conv2dLayer<F>,
    norm: LayerNorm<F>,
    block: ResBlock<F>,
}

impl<F: Elem> Stage<F> {
    fn new(store: &mut ParamStore<F>, seed: u64, name: &str, ci: usize, co: usize) -> Self {
        Stage {
            down: Conv2dLayer::new(store, seed, &format!("{name}.down"), ci, co, 3, 2, 1),
            norm: LayerNorm::new(store, &format!("{name}.norm"), co),
            block: ResBlock::new(store, seed, &format!("{name}.res"), co),
        }
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let y = norm_map(&self.norm, &self.down.forward(x)).relu();
        self.block.forward(&y)
    }
}

/// Small residual CNN with four stride-2 stages after a stride-2 stem,
/// yielding the stride-4/8/16/32 pyramid downstream modules consume.
pub struct Backbone<F: Elem> {
    stem1: Conv2dLayer<F>,
    stem2: Conv2dLayer<F>,
    stem_norm: LayerNorm<F>,
    stem_res: ResBlock<F>,
    stages: Vec<Stage<F>>, // strides 8, 16, 32
}

impl<F: Elem> Backbone<F> {
    pub fn new(store: &mut ParamStore<F>, seed: u64, cfg: &ModelConfig) -> Self {
        let [c0, c1, c2, c3] = cfg.backbone_channels;
        let stem1 = Conv2dLayer::new(store, seed, "backbone.stem1", 1, c0, 3, 2, 1);
        let stem2 = Conv2dLayer::new(store, seed, "backbone.stem2", c0, c0, 3, 2, 1);
        let stem_norm = LayerNorm::new(store, "backbone.stem_norm", c0);
        let stem_res = ResBlock::new(store, seed, "backbone.stage1.res", c0);
        let stages = vec![
            Stage::new(store, seed, "backbone.stage2", c0, c1),
            Stage::new(store, seed, "backbone.stage3", c1, c2),
            Stage::new(store, seed, "backbone.stage4", c2, c3),
        ];
        Backbone { stem1, stem2, stem_norm, stem_res, stages }
    }

    /// Extracts the four-scale pyramid from an H×W grayscale image.
    pub fn extract_features(&self, image: &Array2<F>) -> Result<FeaturePyramid<F>> {
        let (h, w) = image.dim();
        if h % 32 != 0 {
            return Err(Error::Shape(format!("image height {h} not divisible by 32")));
        }
        if w % 32 != 0 {
            return Err(Error::Shape(format!("image width {w} not divisible by 32")));
        }
        let x = Tensor::new(
            image
                .clone()
                .into_shape_with_order((1, h, w))
                .unwrap()
                .into_dyn(),
        );
        let s4 = {
            let y = self.stem2.forward(&self.stem1.forward(&x).relu());
            self.stem_res.forward(&norm_map(&self.stem_norm, &y).relu())
        };
        let mut maps = vec![s4];
        for stage in &self.stages {
            let prev = maps.last().unwrap();
            maps.push(stage.forward(prev));
        }
        Ok(FeaturePyramid { maps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use ndarray::Array2;

    fn small_cfg() -> ModelConfig {
        ModelConfig { backbone_channels: [8, 12, 16, 24], embed_dim: 16, mask_dim: 16, num_heads: 4, ..Default::default() }
    }

    #[test]
    fn stride_geometry_exact() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, 0, &cfg);
        let img = Array2::<f32>::zeros((256, 256));
        let pyr = bb.extract_features(&img).unwrap();
        let expect = [(32, 64, 64), (64, 32, 32), (128, 16, 16), (256, 8, 8)];
        for (map, (c, h, w)) in pyr.maps.iter().zip(expect) {
            assert_eq!(map.shape(), &[c, h, w]);
        }
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, 3, &cfg);
        let pyr = bb.extract_features(&Array2::<f32>::zeros((64, 64))).unwrap();
        for map in &pyr.maps {
            assert!(map.value().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_size_names_offending_dimension() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, 0, &cfg);
        let err = bb.extract_features(&Array2::<f32>::zeros((60, 64))).err().unwrap();
        assert!(err.to_string().contains("height 60"), "{err}");
        let err = bb.extract_features(&Array2::<f32>::zeros((64, 40))).err().unwrap();
        assert!(err.to_string().contains("width 40"), "{err}");
    }

    #[test]
    fn both_views_share_every_parameter() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, 1, &cfg);
        // One backbone instance serves both views; the registry holds a single
        // copy of each weight, and identical inputs give bit-identical maps.
        let names = store.names();
        assert!(names.iter().all(|n| n.starts_with("backbone.")));
        let mut rng = crate::rng::seeded_rng(5);
        let img = Array2::from_shape_simple_fn((64, 64), || {
            rand::Rng::random::<f32>(&mut rng)
        });
        let a = bb.extract_features(&img).unwrap();
        let b = bb.extract_features(&img).unwrap();
        for (ma, mb) in a.maps.iter().zip(&b.maps) {
            assert_eq!(ma.value(), mb.value());
        }
    }

    #[test]
    fn gradient_flows_from_single_view_loss() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, 2, &cfg);
        let mut rng = crate::rng::seeded_rng(6);
        let img = Array2::from_shape_simple_fn((64, 64), || {
            rand::Rng::random::<f32>(&mut rng)
        });
        let pyr = bb.extract_features(&img).unwrap();
        let loss = pyr.maps[3].square().sum_all();
        let grads = loss.backward();
        for p in store.iter() {
            let g = grads.by_name(p.name());
            assert!(g.is_some(), "no gradient for {}", p.name());
            assert!(
                g.unwrap().iter().any(|&v| v != 0.0),
                "zero gradient for {}",
                p.name()
            );
        }
    }
}
