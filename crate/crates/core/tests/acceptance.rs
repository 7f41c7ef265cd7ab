//! Acceptance gate: one test per criterion, each printing a single
//! `acceptance N (<name>): pass|fail` line. Criteria 5 and 6 are small
//! CPU training runs and take minutes; everything else is fast.

use std::collections::{BTreeSet, HashMap};
use std::panic::AssertUnwindSafe;

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dualview_core::autodiff::{bilinear_sample, Mha, ParamStore, Tensor};
use dualview_core::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use dualview_core::config::{ModelConfig, TrainConfig};
use dualview_core::datagen::{
    generate_case, generate_dataset, load_dataset, rle_decode, rle_encode, PhantomConfig,
};
use dualview_core::eval::{
    froc_curve, malignancy_metrics, mask_iou, recall_at_fpi, DetectionRecord,
};
use dualview_core::fusion::{
    bilinear_oracle, uniform_reference_points, FusedMaps, FusionLayer, DECODER_STRIDES,
};
use dualview_core::losses::{hungarian_match, total_loss};
use dualview_core::model::{image_plane, AblationMode, Model};
use dualview_core::rng::{seeded_rng, substream_indexed};
use dualview_core::trainer::{evaluate, Trainer};
use dualview_core::vitd::{Vitd, MASK_CONST};
use dualview_core::View;

fn criterion(n: usize, name: &str, body: impl FnOnce()) {
    let r = std::panic::catch_unwind(AssertUnwindSafe(body));
    match &r {
        Ok(()) => println!("acceptance {n} ({name}): pass"),
        Err(_) => println!("acceptance {n} ({name}): fail"),
    }
    if r.is_err() {
        panic!("acceptance criterion {n} ({name}) failed");
    }
}

/// Tiny model used by the fast structural/gradient criteria.
fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        num_object_queries: 8,
        num_link_queries: 4,
        num_vitd_blocks: 3,
        num_heads: 2,
        embed_dim: 16,
        backbone_channels: [4, 8, 8, 16],
        mask_dim: 16,
        ffn_mult: 2,
        fusion_downsample: 2,
        ..ModelConfig::default()
    }
}

/// 32×32 phantom matching the tiny model.
fn tiny_phantom() -> PhantomConfig {
    PhantomConfig { image_size: 32, radius_min: 3.0, radius_max: 5.0, ..PhantomConfig::default() }
}

fn rand2(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(lo..hi))
}

fn rand3d(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ArrayD<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.5..1.5)).into_dyn()
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence
// ---------------------------------------------------------------------------

/// Min-cost injective column→row assignment by exhaustive recursion.
fn exhaustive_min(cost: &Array2<f64>) -> f64 {
    fn rec(cost: &Array2<f64>, col: usize, used: &mut [bool]) -> f64 {
        if col == cost.ncols() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.nrows() {
            if !used[r] {
                used[r] = true;
                best = best.min(cost[(r, col)] + rec(cost, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    rec(cost, 0, &mut vec![false; cost.nrows()])
}

/// Brute-force recall@FPI: sweep every distinct-score prefix.
fn brute_recall(records: &[DetectionRecord], n_images: usize, n_gts: usize, t: f64) -> f64 {
    let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.dedup();
    let mut best = 0.0f64;
    for &s in &scores {
        let kept: Vec<&DetectionRecord> = records.iter().filter(|r| r.score >= s).collect();
        let fp = kept.iter().filter(|r| r.matched_gt.is_none()).count();
        let tp = kept.iter().filter(|r| r.matched_gt.is_some()).count();
        if fp as f64 / n_images as f64 <= t {
            best = best.max(tp as f64 / n_gts as f64);
        }
    }
    best
}

#[test]
fn acceptance_1_oracle_equivalence() {
    criterion(1, "oracle equivalence", || {
        let mut rng = seeded_rng(101);

        // Hungarian vs exhaustive permutations, N,G ≤ 6, 1000 trials.
        for _ in 0..1000 {
            let n = rng.random_range(1..=6usize);
            let g = rng.random_range(1..=n);
            let cost = rand2(&mut rng, n, g, -5.0, 5.0);
            let m = hungarian_match(&cost).unwrap();
            let total: f64 = (0..g).map(|j| cost[(m.assignment[j], j)]).sum();
            assert!((total - m.total).abs() < 1e-9, "reported total inconsistent");
            let best = exhaustive_min(&cost);
            assert!(
                (total - best).abs() < 1e-9,
                "hungarian total {total} vs exhaustive {best}"
            );
        }

        // bilinear_sample vs the scalar oracle, including border coordinates.
        for _ in 0..25 {
            let (c, h, w) = (
                rng.random_range(1..=3usize),
                rng.random_range(2..=7usize),
                rng.random_range(2..=7usize),
            );
            let map = rand3d(&mut rng, c, h, w);
            let np = 12;
            let pts = Array2::from_shape_fn((np, 2), |(p, _)| {
                if p < 2 {
                    [0.0, 1.0][p]
                } else {
                    rng.random_range(0.0..1.0)
                }
            });
            let out = bilinear_sample(&Tensor::new(map.clone()), &Tensor::new(pts.clone().into_dyn()));
            let ov = out.value();
            for p in 0..np {
                for ch in 0..c {
                    let plane = map
                        .index_axis(ndarray::Axis(0), ch)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let want = bilinear_oracle(&plane, pts[(p, 0)], pts[(p, 1)]);
                    let got = ov[[p, ch]];
                    assert!((got - want).abs() <= 1e-6, "bilinear {got} vs oracle {want}");
                }
            }
        }

        // recall_at_fpi vs brute-force threshold sweep, 50 random sets.
        for _ in 0..50 {
            let n_images = rng.random_range(1..=6usize);
            let gpi = rng.random_range(1..=4usize);
            let n_gts = n_images * gpi;
            let mut records = Vec::new();
            for img in 0..n_images {
                let mut avail: Vec<usize> = (0..gpi).collect();
                for _ in 0..rng.random_range(0..=6usize) {
                    let matched = if !avail.is_empty() && rng.random::<bool>() {
                        let k = rng.random_range(0..avail.len());
                        Some(avail.swap_remove(k))
                    } else {
                        None
                    };
                    records.push(DetectionRecord {
                        image_id: img,
                        score: rng.random_range(0..20u32) as f64 / 20.0,
                        mask: Array2::from_elem((1, 1), false),
                        malignancy: 0.0,
                        matched_gt: matched,
                    });
                }
            }
            for &t in &[0.14, 0.25, 0.5, 1.0, 2.0] {
                let got = recall_at_fpi(&records, n_images, n_gts, t).unwrap();
                let want = brute_recall(&records, n_images, n_gts, t);
                assert_eq!(got, want, "recall@{t} mismatch");
            }
        }

        // mask_iou vs pixel-count oracle.
        for _ in 0..50 {
            let a = Array2::from_shape_fn((8, 8), |_| rng.random::<bool>());
            let b = Array2::from_shape_fn((8, 8), |_| rng.random::<bool>());
            let inter = a.iter().zip(b.iter()).filter(|(&x, &y)| x && y).count();
            let union = a.iter().zip(b.iter()).filter(|(&x, &y)| x || y).count();
            let want = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            assert_eq!(mask_iou(&a, &b).unwrap(), want);
        }
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 0.0);
    });
}

// ---------------------------------------------------------------------------
// 2. Gradient suite (f64 finite differences)
// ---------------------------------------------------------------------------

/// Central-difference check of `n_samples` randomly sampled parameter
/// elements whose names contain `filter`, against the supplied gradients.
fn fd_check(
    store: &ParamStore<f64>,
    loss: &dyn Fn() -> f64,
    grads: &HashMap<String, ArrayD<f64>>,
    filter: &str,
    rng: &mut ChaCha8Rng,
    n_samples: usize,
    tol: f64,
) {
    let names: Vec<String> =
        store.names().into_iter().filter(|n| n.contains(filter)).collect();
    assert!(!names.is_empty(), "no parameters match filter {filter:?}");
    let h = 1e-5;
    for _ in 0..n_samples {
        let name = &names[rng.random_range(0..names.len())];
        let p = store.get(name).unwrap();
        if p.len() == 0 {
            continue;
        }
        let idx = rng.random_range(0..p.len());
        let orig = p.get();
        let mut pert = orig.clone();
        pert.as_slice_mut().unwrap()[idx] += h;
        p.set(pert);
        let lp = loss();
        let mut pert = orig.clone();
        pert.as_slice_mut().unwrap()[idx] -= h;
        p.set(pert);
        let lm = loss();
        p.set(orig);
        let fd = (lp - lm) / (2.0 * h);
        let an = grads
            .get(name)
            .map_or(0.0, |g| g.as_standard_layout().as_slice().unwrap()[idx]);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        assert!(rel <= tol, "{name}[{idx}]: finite diff {fd} vs autodiff {an} (rel {rel:.2e})");
    }
}

/// Tiny shapes for module-level gradient checks.
fn fd_cfg() -> ModelConfig {
    ModelConfig {
        num_heads: 2,
        embed_dim: 4,
        fusion_downsample: 1,
        ..tiny_cfg()
    }
}

#[test]
fn acceptance_2_gradient_suite() {
    criterion(2, "finite-difference gradients", || {
        let mut rng = seeded_rng(202);

        // fusion_layer
        {
            let mut store = ParamStore::<f64>::new();
            let fl = FusionLayer::new(&mut store, 7, "t.fuse", &fd_cfg());
            // Move the zero-initialized offset head off the origin: offsets of
            // exactly zero put every sampling point on a pixel center, a kink
            // of the piecewise-linear interpolant where the FD is undefined.
            fl.offset_net.head.w.update(|w| {
                for (i, e) in w.iter_mut().enumerate() {
                    *e = 0.01 * ((i as f64) * 0.7).sin();
                }
            });
            fl.offset_net.head.b.update(|b| {
                let s = b.as_slice_mut().unwrap();
                s[0] = 0.017;
                s[1] = -0.011;
            });
            let main = rand3d(&mut rng, 4, 5, 6);
            let reference = rand3d(&mut rng, 4, 5, 6);
            let w = rand3d(&mut rng, 4, 5, 6);
            let loss = || {
                fl.forward(&Tensor::new(main.clone()), &Tensor::new(reference.clone()))
                    .unwrap()
                    .out
                    .mul(&Tensor::new(w.clone()))
                    .sum_all()
                    .scalar()
            };
            let grads = fl
                .forward(&Tensor::new(main.clone()), &Tensor::new(reference.clone()))
                .unwrap()
                .out
                .mul(&Tensor::new(w.clone()))
                .sum_all()
                .backward()
                .into_named();
            fd_check(&store, &loss, &grads, "t.fuse", &mut rng, 20, 1e-4);
        }

        // masked_attention (Eq. 1) and inter_attention
        {
            let mut store = ParamStore::<f64>::new();
            let vitd = Vitd::new(&mut store, 9, &fd_cfg(), true);
            let block = &vitd.blocks[0];
            let x = Tensor::new(rand2(&mut rng, 3, 4, -1.5, 1.5).into_dyn());
            let k = Tensor::new(rand2(&mut rng, 6, 4, -1.5, 1.5).into_dyn());
            let v = Tensor::new(rand2(&mut rng, 6, 4, -1.5, 1.5).into_dyn());
            let mut mask = Array2::<f64>::zeros((3, 6));
            for e in mask.iter_mut() {
                if rng.random::<bool>() {
                    *e = MASK_CONST;
                }
            }
            mask.row_mut(2).fill(0.0); // keep one fully unmasked row
            let w = rand2(&mut rng, 3, 4, -1.0, 1.0).into_dyn();
            let loss = || {
                block
                    .masked_attention(&x, &k, &v, &mask)
                    .mul(&Tensor::new(w.clone()))
                    .sum_all()
                    .scalar()
            };
            let grads = block
                .masked_attention(&x, &k, &v, &mask)
                .mul(&Tensor::new(w.clone()))
                .sum_all()
                .backward()
                .into_named();
            fd_check(&store, &loss, &grads, "block0.masked", &mut rng, 10, 1e-4);
            fd_check(&store, &loss, &grads, "block0.ln_masked", &mut rng, 6, 1e-4);

            let x_other = Tensor::new(rand2(&mut rng, 3, 4, -1.5, 1.5).into_dyn());
            let loss_i = || {
                block
                    .inter_attention(&x, &x_other)
                    .mul(&Tensor::new(w.clone()))
                    .sum_all()
                    .scalar()
            };
            let grads_i = block
                .inter_attention(&x, &x_other)
                .mul(&Tensor::new(w.clone()))
                .sum_all()
                .backward()
                .into_named();
            fd_check(&store, &loss_i, &grads_i, "block0.inter", &mut rng, 10, 1e-4);
            fd_check(&store, &loss_i, &grads_i, "block0.ln_inter", &mut rng, 6, 1e-4);
        }

        // total_loss through the full tiny model
        {
            let (pair, ann) = generate_case(&mut seeded_rng(3), &tiny_phantom(), "fd").unwrap();
            let mut store = ParamStore::<f64>::new();
            let model = Model::new(&mut store, 11, &tiny_cfg(), AblationMode::Full).unwrap();
            let cc = image_plane::<f64>(pair.cc());
            let mlo = image_plane::<f64>(pair.mlo());
            let w = TrainConfig::default().loss_weights;
            let loss = || {
                let out = model.forward(&cc, &mlo).unwrap();
                total_loss(&out.preds, out.link.as_ref(), &ann, &w).unwrap().total.scalar()
            };
            let out = model.forward(&cc, &mlo).unwrap();
            let grads = total_loss(&out.preds, out.link.as_ref(), &ann, &w)
                .unwrap()
                .total
                .backward()
                .into_named();
            fd_check(&store, &loss, &grads, "", &mut rng, 16, 1e-3);
        }
    });
}

// ---------------------------------------------------------------------------
// 3. Reduction identities
// ---------------------------------------------------------------------------

/// Hand-rolled multi-head attention from a module's weight matrices.
fn manual_mha(mha: &Mha<f64>, q_in: &Array2<f64>, kv_in: &Array2<f64>) -> Array2<f64> {
    let lin = |l: &dualview_core::autodiff::Linear<f64>, x: &Array2<f64>| -> Array2<f64> {
        let w = l.w.get().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = l.b.get().into_dimensionality::<ndarray::Ix1>().unwrap();
        x.dot(&w.t()) + &b
    };
    let q = lin(&mha.wq, q_in);
    let k = lin(&mha.wk, kv_in);
    let v = lin(&mha.wv, kv_in);
    let hd = mha.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Array2::<f64>::zeros((q_in.nrows(), mha.heads * hd));
    for h in 0..mha.heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t()) * scale;
        for mut row in scores.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|s| (s - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|s| s / sum);
        }
        let c = scores.dot(&vh);
        ctx.slice_mut(ndarray::s![.., cols]).assign(&c);
    }
    lin(&mha.wo, &ctx)
}

#[test]
fn acceptance_3_reduction_identities() {
    criterion(3, "reduction identities", || {
        let mut rng = seeded_rng(303);

        // (a) Zero-offset fusion layer (offsets are zero at init by
        // construction) equals plain cross-attention over the uniform grid,
        // computed by hand from the weight matrices.
        {
            let mut store = ParamStore::<f64>::new();
            let fl = FusionLayer::new(&mut store, 13, "r.fuse", &fd_cfg());
            let (c, h, w) = (4, 5, 6);
            let main = rand3d(&mut rng, c, h, w);
            let reference = rand3d(&mut rng, c, h, w);
            let out = fl
                .forward(&Tensor::new(main.clone()), &Tensor::new(reference.clone()))
                .unwrap()
                .out;

            // Oracle: downsample 1 puts reference points at pixel centers, so
            // the sampled keys/values are exactly the reference pixels.
            let grid = uniform_reference_points(h, w, 1).unwrap();
            let mut kv = Array2::<f64>::zeros((grid.len(), c));
            for (p, pt) in grid.points().rows().into_iter().enumerate() {
                let j = (pt[0] * w as f64 - 0.5).round() as usize;
                let i = (pt[1] * h as f64 - 0.5).round() as usize;
                for ch in 0..c {
                    kv[(p, ch)] = reference[[ch, i, j]];
                }
            }
            let mut q = Array2::<f64>::zeros((h * w, c));
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        q[(i * w + j, ch)] = main[[ch, i, j]];
                    }
                }
            }
            let att = manual_mha(&fl.mha, &q, &kv);
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let want = main[[ch, i, j]] + att[(i * w + j, ch)];
                        let got = out.value()[[ch, i, j]];
                        assert!(
                            (got - want).abs() <= 1e-5,
                            "fusion vs plain cross-attention: {got} vs {want}"
                        );
                    }
                }
            }
        }

        // (b) Zero-mask masked attention equals standard cross-attention.
        {
            let mut store = ParamStore::<f64>::new();
            let vitd = Vitd::new(&mut store, 17, &fd_cfg(), true);
            let block = &vitd.blocks[0];
            let x = rand2(&mut rng, 3, 4, -1.5, 1.5);
            let k = rand2(&mut rng, 6, 4, -1.5, 1.5);
            let v = rand2(&mut rng, 6, 4, -1.5, 1.5);
            let zeros = Array2::<f64>::zeros((3, 6));
            let got = block.masked_attention(
                &Tensor::new(x.clone().into_dyn()),
                &Tensor::new(k.clone().into_dyn()),
                &Tensor::new(v.clone().into_dyn()),
                &zeros,
            );
            // Hand-computed: pre-norm LayerNorm, q from x, separate k/v, residual.
            let gamma = block.ln_masked.gamma.get().into_dimensionality::<ndarray::Ix1>().unwrap();
            let beta = block.ln_masked.beta.get().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut xn = x.clone();
            for mut row in xn.rows_mut() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + 1e-5).sqrt();
                for (e, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta.iter())) {
                    *e = (*e - mean) * inv * g + b;
                }
            }
            // Distinct k and v paths: replicate forward_kv by hand.
            let qh = {
                let lin = |l: &dualview_core::autodiff::Linear<f64>, x: &Array2<f64>| {
                    let w = l.w.get().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let b = l.b.get().into_dimensionality::<ndarray::Ix1>().unwrap();
                    x.dot(&w.t()) + &b
                };
                let mha = &block.masked;
                let qm = lin(&mha.wq, &xn);
                let km = lin(&mha.wk, &k);
                let vm = lin(&mha.wv, &v);
                let hd = mha.head_dim;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut ctx = Array2::<f64>::zeros((3, mha.heads * hd));
                for h in 0..mha.heads {
                    let cols = h * hd..(h + 1) * hd;
                    let mut scores = qm.slice(ndarray::s![.., cols.clone()]).dot(&km.slice(ndarray::s![.., cols.clone()]).t()) * scale;
                    for mut row in scores.rows_mut() {
                        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        row.mapv_inplace(|s| (s - m).exp());
                        let sum = row.sum();
                        row.mapv_inplace(|s| s / sum);
                    }
                    let c = scores.dot(&vm.slice(ndarray::s![.., cols.clone()]));
                    ctx.slice_mut(ndarray::s![.., cols]).assign(&c);
                }
                lin(&mha.wo, &ctx)
            };
            let want = qh + &x;
            for (g, w) in got.value().iter().zip(want.iter()) {
                assert!((g - w).abs() <= 1e-6, "masked-attention reduction: {g} vs {w}");
            }
        }

        // (c) Zeroed value path is the residual identity, exactly.
        {
            let mut store = ParamStore::<f64>::new();
            let vitd = Vitd::new(&mut store, 19, &fd_cfg(), true);
            let block = &vitd.blocks[0];
            block.masked.wv.w.update(|w| w.fill(0.0));
            block.masked.wv.b.update(|w| w.fill(0.0));
            block.masked.wo.b.update(|w| w.fill(0.0));
            let x = Tensor::new(rand2(&mut rng, 3, 4, 0.1, 1.5).into_dyn());
            let k = Tensor::new(rand2(&mut rng, 6, 4, -1.5, 1.5).into_dyn());
            let v = Tensor::new(rand2(&mut rng, 6, 4, -1.5, 1.5).into_dyn());
            let zeros = Array2::<f64>::zeros((3, 6));
            let got = block.masked_attention(&x, &k, &v, &zeros);
            assert_eq!(got.value(), x.value(), "zero value path must be the identity");

            let mut store = ParamStore::<f64>::new();
            let fl = FusionLayer::new(&mut store, 23, "z.fuse", &fd_cfg());
            fl.mha.wv.w.update(|w| w.fill(0.0));
            fl.mha.wv.b.update(|w| w.fill(0.0));
            fl.mha.wo.b.update(|w| w.fill(0.0));
            let main = Tensor::new(rand3d(&mut rng, 4, 5, 6));
            let reference = Tensor::new(rand3d(&mut rng, 4, 5, 6));
            let out = fl.forward(&main, &reference).unwrap().out;
            assert_eq!(out.value(), main.value(), "zero-value fusion must be the identity");
        }
    });
}

// ---------------------------------------------------------------------------
// 4. Structural invariants
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_structural_invariants() {
    criterion(4, "structural invariants", || {
        let mut rng = seeded_rng(404);
        let cfg = fd_cfg();

        // View-swap equivariance of the decoder, bit-exact.
        {
            let mut store = ParamStore::<f64>::new();
            let vitd = Vitd::new(&mut store, 29, &cfg, true);
            let maps_a: Vec<Tensor<f64>> =
                (0..3).map(|i| Tensor::new(rand3d(&mut rng, 4, 2 + i, 2 + i))).collect();
            let maps_b: Vec<Tensor<f64>> =
                (0..3).map(|i| Tensor::new(rand3d(&mut rng, 4, 2 + i, 2 + i))).collect();
            let mask_a = Tensor::new(rand3d(&mut rng, cfg.mask_dim, 6, 6));
            let mask_b = Tensor::new(rand3d(&mut rng, cfg.mask_dim, 6, 6));
            let q_a = Tensor::new(rand2(&mut rng, 5, 4, -1.0, 1.0).into_dyn());
            let q_b = Tensor::new(rand2(&mut rng, 5, 4, -1.0, 1.0).into_dyn());
            let fused = FusedMaps::new(maps_a.clone(), maps_b.clone(), mask_a.clone(), mask_b.clone());
            let swapped = FusedMaps::new(maps_b, maps_a, mask_b, mask_a);
            let out = vitd.forward(&fused, &q_a, &q_b);
            let out_sw = vitd.forward(&swapped, &q_b, &q_a);
            assert_eq!(out.x_cc.value(), out_sw.x_mlo.value());
            assert_eq!(out.x_mlo.value(), out_sw.x_cc.value());
            for (p, ps) in out.preds.iter().zip(&out_sw.preds) {
                assert_eq!(p.cc.class_logits.value(), ps.mlo.class_logits.value());
                assert_eq!(p.cc.masks.value(), ps.mlo.masks.value());
                assert_eq!(p.mlo.malignancy.value(), ps.cc.malignancy.value());
            }
        }

        // Round-robin scale schedule 32,16,8 repeating over 10 blocks.
        assert_eq!(DECODER_STRIDES, [32, 16, 8]);
        let schedule: Vec<usize> =
            (0..10).map(|i| DECODER_STRIDES[Vitd::<f64>::scale_index(i)]).collect();
        assert_eq!(schedule, [32, 16, 8, 32, 16, 8, 32, 16, 8, 32]);

        // Attention rows sum to 1 (±1e-5), masked and unmasked, plus the
        // deformable fusion attention.
        {
            let mut store = ParamStore::<f64>::new();
            let mha = Mha::new(&mut store, 31, "a.mha", 4, 2);
            let q = Tensor::new(rand2(&mut rng, 5, 4, -2.0, 2.0).into_dyn());
            let kv = Tensor::new(rand2(&mut rng, 7, 4, -2.0, 2.0).into_dyn());
            let mut mask = Array2::<f64>::zeros((5, 7));
            for e in mask.iter_mut() {
                if rng.random::<bool>() {
                    *e = MASK_CONST;
                }
            }
            mask.row_mut(0).fill(0.0);
            for out in [mha.forward(&q, &kv, None), mha.forward(&q, &kv, Some(&mask))] {
                for a in &out.attn {
                    let a2 = a.value().view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                    for row in a2.rows() {
                        assert!((row.sum() - 1.0).abs() <= 1e-5, "attention row sums to {}", row.sum());
                    }
                }
            }

            let mut store = ParamStore::<f64>::new();
            let fl = FusionLayer::new(&mut store, 37, "a.fuse", &cfg);
            let fo = fl
                .forward(&Tensor::new(rand3d(&mut rng, 4, 4, 4)), &Tensor::new(rand3d(&mut rng, 4, 4, 4)))
                .unwrap();
            for a in &fo.attn {
                let a2 = a.value().view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                for row in a2.rows() {
                    assert!((row.sum() - 1.0).abs() <= 1e-5);
                }
            }
        }

        // Parameter-registry diffs between ablations are exactly the
        // documented module sets.
        {
            let names = |mode| {
                let mut s = ParamStore::<f32>::new();
                Model::new(&mut s, 5, &tiny_cfg(), mode).unwrap();
                s.names().into_iter().collect::<BTreeSet<String>>()
            };
            let full = names(AblationMode::Full);
            let vitd_only = names(AblationMode::VitdOnly);
            let fpd_only = names(AblationMode::FpdOnly);

            // full − vitd_only: exactly the cross-view fuse blocks.
            let d: BTreeSet<_> = full.difference(&vitd_only).collect();
            assert!(!d.is_empty());
            assert!(d.iter().all(|n| n.starts_with("fpd.fuse")), "unexpected diff: {d:?}");
            assert_eq!(vitd_only.difference(&full).count(), 0);

            // full − fpd_only: inter-view attention, the linker, and the
            // per-view query embeddings; fpd_only adds only the joint queries.
            let d: BTreeSet<_> = full.difference(&fpd_only).collect();
            let is_doc = |n: &str| {
                n.contains(".inter.")
                    || n.contains(".ln_inter.")
                    || n.starts_with("linker.")
                    || n.starts_with("vitd.query.cc")
                    || n.starts_with("vitd.query.mlo")
            };
            assert!(d.iter().all(|n| is_doc(n)), "unexpected diff: {d:?}");
            for probe in [".inter.", "linker.", "vitd.query.cc"] {
                assert!(d.iter().any(|n| n.contains(probe)), "missing {probe} in diff");
            }
            let d: BTreeSet<_> = fpd_only.difference(&full).collect();
            assert!(!d.is_empty());
            assert!(d.iter().all(|n| n.starts_with("vitd.query.joint")), "unexpected diff: {d:?}");
        }
    });
}

// ---------------------------------------------------------------------------
// 5. Overfit check (minutes of CPU)
// ---------------------------------------------------------------------------

/// Reduced-width model for the 128×128 overfit run; the spec pins data,
/// seed, lr, and step budget but not the model size, and the default width
/// does not fit the CPU budget (see the repository notes).
fn overfit_model_cfg() -> ModelConfig {
    ModelConfig {
        num_object_queries: 32,
        num_link_queries: 16,
        num_vitd_blocks: 6,
        num_heads: 4,
        embed_dim: 32,
        backbone_channels: [8, 16, 32, 64],
        mask_dim: 32,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn acceptance_5_overfit() {
    criterion(5, "overfit 10 cases", || {
        let pcfg = PhantomConfig::default();
        let data: Vec<_> = (0..10)
            .map(|i| {
                let mut rng = substream_indexed(0, "datagen.case", i);
                generate_case(&mut rng, &pcfg, &format!("case{i:04}")).unwrap()
            })
            .collect();
        // Augmentation off: this is a memorization check and the eval is on
        // the clean training images.
        let tcfg = TrainConfig {
            batch_size: 5,
            learning_rate: 1e-4,
            augment: dualview_core::config::AugmentFlags::none(),
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(&overfit_model_cfg(), &tcfg, AblationMode::Full).unwrap();
        let mut first = None;
        for step in 0..3000u64 {
            let batch: Vec<_> = {
                let mut rng = substream_indexed(1, "calib.batch", step);
                (0..tcfg.batch_size)
                    .map(|_| data[rng.random_range(0..data.len())].clone())
                    .collect()
            };
            let rec = tr.train_step(&batch).unwrap();
            let f = *first.get_or_insert(rec.loss);
            if rec.loss <= 0.1 * f && step >= 50 && step % 25 == 0 {
                let ev = evaluate(&tr.model, &data, &[1.0]).unwrap();
                if ev.report.recall_at[0].1 >= 0.9 {
                    println!(
                        "  overfit: loss {:.1} -> {:.1}, R@1.0 = {:.3} at step {step}",
                        f, rec.loss, ev.report.recall_at[0].1
                    );
                    return;
                }
            }
        }
        panic!("overfit criterion not reached within 3000 steps");
    });
}

// ---------------------------------------------------------------------------
// 6. Fusion-benefit directional check (minutes of CPU)
// ---------------------------------------------------------------------------

/// Phantom with heavy single-view distractors: distractor contrast overlaps
/// the lesion range so single-view appearance alone cannot separate them;
/// only cross-view correspondence (all true lesions are paired) can.
fn distractor_phantom() -> PhantomConfig {
    PhantomConfig {
        image_size: 32,
        radius_min: 3.0,
        radius_max: 5.0,
        lesions_min: 1,
        lesions_max: 2,
        paired_fraction: 1.0,
        distractors_min: 2,
        distractors_max: 4,
        distractor_contrast_min: 0.10,
        distractor_contrast_max: 0.35,
        clutter_min: 0,
        clutter_max: 1,
        ..PhantomConfig::default()
    }
}

const FUSION_BENEFIT_STEPS: u64 = 300;

fn train_and_recall(
    seed: u64,
    mode: AblationMode,
    train: &[(dualview_core::ImagePair, dualview_core::CaseAnnotation)],
    test: &[(dualview_core::ImagePair, dualview_core::CaseAnnotation)],
) -> (f64, f64) {
    let tcfg = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&tiny_cfg(), &tcfg, mode).unwrap();
    for step in 0..FUSION_BENEFIT_STEPS {
        let batch: Vec<_> = {
            let mut rng = substream_indexed(seed, "acceptance6.batch", step);
            (0..tcfg.batch_size)
                .map(|_| train[rng.random_range(0..train.len())].clone())
                .collect()
        };
        tr.train_step(&batch).unwrap();
    }
    let ev = evaluate(&tr.model, test, &[0.14, 0.5]).unwrap();
    (ev.report.recall_at[1].1, ev.report.recall_at[0].1)
}

#[test]
fn acceptance_6_fusion_benefit() {
    criterion(6, "fusion benefit vs vitd_only", || {
        let pcfg = distractor_phantom();
        let gen = |seed: u64,
                   n: usize,
                   tag: &str|
         -> Vec<(dualview_core::ImagePair, dualview_core::CaseAnnotation)> {
            (0..n)
                .map(|i| {
                    let mut rng = substream_indexed(seed, "datagen.case", i as u64);
                    generate_case(&mut rng, &pcfg, &format!("{tag}{i:04}")).unwrap()
                })
                .collect()
        };
        let mut full_r50 = Vec::new();
        let mut vitd_r50 = Vec::new();
        let mut full_r14 = Vec::new();
        let mut vitd_r14 = Vec::new();
        for seed in [0u64, 1, 2] {
            let train = gen(seed * 2 + 10, 200, "tr");
            let test = gen(seed * 2 + 11, 50, "te");
            let (r50, r14) = train_and_recall(seed, AblationMode::Full, &train, &test);
            full_r50.push(r50);
            full_r14.push(r14);
            let (r50, r14) = train_and_recall(seed, AblationMode::VitdOnly, &train, &test);
            vitd_r50.push(r50);
            vitd_r14.push(r14);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "  fusion benefit: R@0.5 full {:.3} vs vitd_only {:.3}; R@0.14 full {:.3} vs vitd_only {:.3} (reported)",
            mean(&full_r50),
            mean(&vitd_r50),
            mean(&full_r14),
            mean(&vitd_r14)
        );
        assert!(
            mean(&full_r50) >= mean(&vitd_r50),
            "mean R@0.5: full {:.3} < vitd_only {:.3}",
            mean(&full_r50),
            mean(&vitd_r50)
        );
    });
}

// ---------------------------------------------------------------------------
// 7. Round trips
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_round_trips() {
    criterion(7, "round trips", || {
        let mut rng = seeded_rng(707);

        // Dataset generate → save → load identity (exact: generation
        // quantizes pixels to the on-disk 8-bit levels).
        {
            let tmp = tempfile::tempdir().unwrap();
            let pcfg = tiny_phantom();
            generate_dataset(3, &pcfg, 4, tmp.path()).unwrap();
            let loaded = load_dataset(tmp.path()).unwrap();
            assert_eq!(loaded.len(), 4);
            for (idx, (pair, ann)) in loaded.iter().enumerate() {
                let mut g = substream_indexed(3, "datagen.case", idx as u64);
                let (want_pair, want_ann) =
                    generate_case(&mut g, &pcfg, &format!("case{idx:04}")).unwrap();
                assert_eq!(pair.cc(), want_pair.cc(), "case {idx} cc image differs");
                assert_eq!(pair.mlo(), want_pair.mlo(), "case {idx} mlo image differs");
                assert_eq!(ann.pair_map(), want_ann.pair_map());
                for v in [View::Cc, View::Mlo] {
                    let (a, b) = (ann.instances(v), want_ann.instances(v));
                    assert_eq!(a.len(), b.len());
                    for (x, y) in a.iter().zip(b) {
                        assert_eq!(x.mask, y.mask);
                        assert_eq!(x.malignant, y.malignant);
                    }
                }
            }
        }

        // Checkpoint save → load forward-pass identity (bit-exact).
        {
            let tmp = tempfile::tempdir().unwrap();
            let cfg = tiny_cfg();
            let tcfg = TrainConfig::default();
            let tr = Trainer::new(&cfg, &tcfg, AblationMode::Full).unwrap();
            let (pair, _) = generate_case(&mut seeded_rng(5), &tiny_phantom(), "ck").unwrap();
            let cc = image_plane::<f32>(pair.cc());
            let mlo = image_plane::<f32>(pair.mlo());
            let before = tr.model.forward(&cc, &mlo).unwrap();

            let path = tmp.path().join("model.ckpt");
            save_checkpoint(&tr.store, &cfg, AblationMode::Full, 7, &path).unwrap();
            let ckpt = load_checkpoint(&path).unwrap();
            assert_eq!(ckpt.step, 7);

            let mut store2 = ParamStore::<f32>::new();
            let model2 = Model::new(&mut store2, 999, &cfg, AblationMode::Full).unwrap();
            apply_checkpoint(&ckpt, &store2, &cfg, AblationMode::Full).unwrap();
            let after = model2.forward(&cc, &mlo).unwrap();
            for (a, b) in before.preds.iter().zip(&after.preds) {
                assert_eq!(a.cc.class_logits.value(), b.cc.class_logits.value());
                assert_eq!(a.cc.masks.value(), b.cc.masks.value());
                assert_eq!(a.mlo.malignancy.value(), b.mlo.malignancy.value());
            }
            let (la, lb) = (before.link.unwrap(), after.link.unwrap());
            assert_eq!(la.pair_logits.value(), lb.pair_logits.value());
            assert_eq!(la.cc_pointer.value(), lb.cc_pointer.value());
        }

        // RLE encode → decode identity.
        {
            for _ in 0..100 {
                let h = rng.random_range(1..=9usize);
                let w = rng.random_range(1..=9usize);
                let mask = Array2::from_shape_fn((h, w), |_| rng.random::<bool>());
                let rle = rle_encode(&mask);
                assert_eq!(rle_decode(&rle, h, w).unwrap(), mask);
            }
            let empty = Array2::from_elem((5, 3), false);
            assert_eq!(rle_decode(&rle_encode(&empty), 5, 3).unwrap(), empty);
            let fullm = Array2::from_elem((5, 3), true);
            assert_eq!(rle_decode(&rle_encode(&fullm), 5, 3).unwrap(), fullm);
        }
    });
}

// ---------------------------------------------------------------------------
// 8. Metric cross-checks
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_metric_cross_checks() {
    criterion(8, "metric cross-checks", || {
        let mut rng = seeded_rng(808);

        // froc_curve agrees with recall_at_fpi at the reporting budgets.
        for _ in 0..20 {
            let n_images = rng.random_range(2..=6usize);
            let gpi = rng.random_range(1..=3usize);
            let n_gts = n_images * gpi;
            let mut records = Vec::new();
            for img in 0..n_images {
                let mut avail: Vec<usize> = (0..gpi).collect();
                for _ in 0..rng.random_range(1..=5usize) {
                    let matched = if !avail.is_empty() && rng.random::<bool>() {
                        let k = rng.random_range(0..avail.len());
                        Some(avail.swap_remove(k))
                    } else {
                        None
                    };
                    records.push(DetectionRecord {
                        image_id: img,
                        score: rng.random_range(0..10u32) as f64 / 10.0,
                        mask: Array2::from_elem((1, 1), false),
                        malignancy: 0.0,
                        matched_gt: matched,
                    });
                }
            }
            let curve = froc_curve(&records, n_images, n_gts).unwrap();
            for &t in &[0.14, 0.25, 0.5, 1.0] {
                let from_curve = curve
                    .iter()
                    .filter(|(f, _)| *f <= t)
                    .map(|&(_, r)| r)
                    .fold(0.0, f64::max);
                let direct = recall_at_fpi(&records, n_images, n_gts, t).unwrap();
                assert_eq!(direct, from_curve, "froc/recall disagreement at t={t}");
                assert_eq!(direct, brute_recall(&records, n_images, n_gts, t));
            }
        }

        // Hand AUC example: scores {0.1, 0.4, 0.35, 0.8}, labels {0,0,1,1}.
        let m = malignancy_metrics(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(m.auc, 0.75, "hand AUC example");
    });
}
