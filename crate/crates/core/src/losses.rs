//! Composite training objective: Hungarian-matched detection loss per view
//! and layer, linker loss over ground-truth pairs, and malignancy loss on
//! matched queries.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, Ix2, IxDyn};

use crate::autodiff::tensor::sigmoid_scalar;
use crate::autodiff::{Elem, Tensor};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::linker::LinkPredictionSet;
use crate::types::{CaseAnnotation, InstanceGt, View};
use crate::vitd::{PredictionSet, ViewPred};

/// Minimum-cost injective assignment of every ground truth to a prediction.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `assignment[g]` = query index matched to ground-truth instance g.
    pub assignment: Vec<usize>,
    pub total: f64,
}

/// Hungarian algorithm over an N×G cost matrix (rows = prediction queries,
/// columns = ground truths, G ≤ N), via the potentials formulation, O(G·N²).
pub fn hungarian_match(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n, g) = cost.dim();
    if g > n {
        return Err(Error::Shape(format!(
            "more ground-truth instances ({g}) than prediction queries ({n})"
        )));
    }
    if g == 0 {
        return Ok(MatchResult { assignment: vec![], total: 0.0 });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Data("non-finite matching cost".into()));
    }
    // Internally: rows = ground truths (few), columns = queries (many).
    let a = |i: usize, j: usize| cost[(j, i)];
    let (rows, cols) = (g, n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1]; // p[j] = row occupying column j (1-based)
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; rows];
    for j in 1..=cols {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| a(i, j)).sum();
    Ok(MatchResult { assignment, total })
}

fn bce_scalar(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Matching cost between one prediction and one ground truth:
/// w_cls·(−p_lesion) + w_bce·BCE(mask) + w_dice·Dice(mask). Masks are flat
/// vectors at the common H/4×W/4 resolution; gt entries are 0/1.
pub fn match_cost<F: Elem>(
    class_logits: ArrayView1<F>,
    mask_logits: ArrayView1<F>,
    gt_mask: ArrayView1<F>,
    w: &LossWeights,
) -> f64 {
    assert_eq!(mask_logits.len(), gt_mask.len(), "mask resolution mismatch");
    let p_lesion = sigmoid_scalar(class_logits[0].f64() - class_logits[1].f64());
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (l, t) in mask_logits.iter().zip(gt_mask.iter()) {
        let (l, t) = (l.f64(), t.f64());
        let p = sigmoid_scalar(l);
        bce += bce_scalar(l, t);
        inter += p * t;
        psum += p;
        gsum += t;
    }
    bce /= mask_logits.len() as f64;
    // Guard: a gt mask that downsamples to empty plus fully-underflowed
    // sigmoids would otherwise give 0/0.
    let dice = 1.0 - 2.0 * inter / (psum + gsum).max(1e-12);
    w.class * (-p_lesion) + w.bce * bce + w.dice * dice
}

/// Downsamples a full-resolution boolean ground-truth mask to the mask-feature
/// grid, flattened row-major. A target cell is foreground when at least a
/// quarter of its source block is foreground (keeps small lesions alive).
pub fn downsample_gt_mask<F: Elem>(mask: &Array2<bool>, mh: usize, mw: usize) -> Array1<F> {
    let (h, w) = mask.dim();
    assert!(h % mh == 0 && w % mw == 0, "gt {h}×{w} not divisible by mask grid {mh}×{mw}");
    let (bh, bw) = (h / mh, w / mw);
    let mut out = Array1::<F>::zeros(mh * mw);
    for i in 0..mh {
        for j in 0..mw {
            let mut count = 0usize;
            for bi in 0..bh {
                for bj in 0..bw {
                    if mask[(i * bh + bi, j * bw + bj)] {
                        count += 1;
                    }
                }
            }
            if 4 * count >= bh * bw {
                out[i * mw + j] = F::one();
            }
        }
    }
    out
}

fn gt_flat_masks<F: Elem>(instances: &[InstanceGt], mh: usize, mw: usize) -> Vec<Array1<F>> {
    instances.iter().map(|g| downsample_gt_mask(&g.mask, mh, mw)).collect()
}

/// N×G matching-cost matrix of one view's predictions against its ground
/// truths (downsampled to the prediction's mask grid).
pub fn view_cost_matrix<F: Elem>(
    pred: &ViewPred<F>,
    instances: &[InstanceGt],
    w: &LossWeights,
) -> Array2<f64> {
    let gts = gt_flat_masks::<F>(instances, pred.mask_h, pred.mask_w);
    cost_matrix(pred, &gts, w)
}

fn cost_matrix<F: Elem>(pred: &ViewPred<F>, gts: &[Array1<F>], w: &LossWeights) -> Array2<f64> {
    let cls = pred.class_logits.value().view().into_dimensionality::<Ix2>().unwrap();
    let masks = pred.masks.value().view().into_dimensionality::<Ix2>().unwrap();
    let n = cls.nrows();
    Array2::from_shape_fn((n, gts.len()), |(q, g)| {
        match_cost(cls.row(q), masks.row(q), gts[g].view(), w)
    })
}

/// Per-layer, per-view matching for a full forward pass.
pub fn compute_matches<F: Elem>(
    preds: &[PredictionSet<F>],
    ann: &CaseAnnotation,
    w: &LossWeights,
) -> Result<Vec<[MatchResult; 2]>> {
    preds
        .iter()
        .map(|set| {
            let per_view = View::both().map(|v| {
                let p = set.view(v);
                let gts = gt_flat_masks::<F>(ann.instances(v), p.mask_h, p.mask_w);
                hungarian_match(&cost_matrix(p, &gts, w))
            });
            let [a, b] = per_view;
            Ok([a?, b?])
        })
        .collect()
}

fn zero_scalar<F: Elem>() -> Tensor<F> {
    Tensor::new(ArrayD::zeros(IxDyn(&[])))
}

fn gt_target_tensor<F: Elem>(gts: &[Array1<F>]) -> ArrayD<F> {
    let hw = gts[0].len();
    let mut t = Array2::<F>::zeros((gts.len(), hw));
    for (i, g) in gts.iter().enumerate() {
        t.row_mut(i).assign(g);
    }
    t.into_dyn()
}

fn view_detection_loss<F: Elem>(
    pred: &ViewPred<F>,
    gts: &[Array1<F>],
    m: &MatchResult,
    w: &LossWeights,
) -> Tensor<F> {
    let n = pred.class_logits.shape()[0];
    // Weighted category cross-entropy: matched queries target "lesion"
    // (column 0) with weight 1, the rest target "no-object" (column 1) with
    // the down-weight.
    let mut sel = Array2::<F>::zeros((n, 2));
    let mut wsum = 0.0;
    for q in 0..n {
        sel[(q, 1)] = F::c(w.no_object);
        wsum += w.no_object;
    }
    for &q in &m.assignment {
        sel[(q, 0)] = F::one();
        sel[(q, 1)] = F::zero();
        wsum += 1.0 - w.no_object;
    }
    let lp = pred.class_logits.log_softmax_rows();
    let ce = lp.mul(&Tensor::new(sel.into_dyn())).sum_all().neg().mul_scalar(1.0 / wsum);
    let mut loss = ce.mul_scalar(w.class);

    if !gts.is_empty() {
        let rows = pred.masks.select_rows(&m.assignment);
        let targets = gt_target_tensor(gts);
        let bce = rows.bce_with_logits(&targets).mean_all();
        let p = rows.sigmoid();
        let tgt = Tensor::new(targets);
        let inter = p.mul(&tgt).sum_axis(1);
        let den = p.sum_axis(1).add(&tgt.sum_axis(1)).add_scalar(1e-12);
        let dice = inter.mul_scalar(2.0).div(&den).neg().add_scalar(1.0).mean_all();
        loss = loss.add(&bce.mul_scalar(w.bce)).add(&dice.mul_scalar(w.dice));
    }
    loss
}

/// Sum over layers and views of the matched detection loss (dense mask loss).
pub fn detection_loss<F: Elem>(
    preds: &[PredictionSet<F>],
    ann: &CaseAnnotation,
    matches: &[[MatchResult; 2]],
    w: &LossWeights,
) -> Tensor<F> {
    assert_eq!(preds.len(), matches.len());
    let mut loss = zero_scalar::<F>();
    for (set, ms) in preds.iter().zip(matches) {
        for (vi, v) in View::both().into_iter().enumerate() {
            let p = set.view(v);
            let gts = gt_flat_masks::<F>(ann.instances(v), p.mask_h, p.mask_w);
            loss = loss.add(&view_detection_loss(p, &gts, &ms[vi], w));
        }
    }
    loss
}

/// Mean BCE between matched queries' malignancy logits and the gt flags,
/// summed over layers and views; zero when nothing is matched.
pub fn malignancy_loss<F: Elem>(
    preds: &[PredictionSet<F>],
    ann: &CaseAnnotation,
    matches: &[[MatchResult; 2]],
) -> Tensor<F> {
    let mut loss = zero_scalar::<F>();
    for (set, ms) in preds.iter().zip(matches) {
        for (vi, v) in View::both().into_iter().enumerate() {
            let insts = ann.instances(v);
            if insts.is_empty() {
                continue;
            }
            let m = &ms[vi];
            let rows = set.view(v).malignancy.select_rows(&m.assignment);
            let targets = ArrayD::from_shape_fn(IxDyn(&[insts.len(), 1]), |ix| {
                if insts[ix[0]].malignant {
                    F::one()
                } else {
                    F::zero()
                }
            });
            loss = loss.add(&rows.bce_with_logits(&targets).mean_all());
        }
    }
    loss
}

/// Linker loss: Hungarian assignment of gt pairs to link queries (cost =
/// −pair_prob + pointer cross-entropies against the final-layer detection
/// match indices), then pair-presence BCE over all links plus pointer CE on
/// the matched ones.
pub fn linker_loss<F: Elem>(
    link: &LinkPredictionSet<F>,
    ann: &CaseAnnotation,
    final_matches: &[MatchResult; 2],
) -> Result<Tensor<F>> {
    let l = link.pair_logits.shape()[0];
    let pairs = ann.pair_map();
    let np = pairs.len();
    if np > l {
        return Err(Error::Shape(format!("{np} gt pairs exceed {l} link queries")));
    }
    let ccp = link.cc_pointer.value().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mlop = link.mlo_pointer.value().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let logits = link.pair_logits.value().clone();

    let tgt: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(ci, mi)| (final_matches[0].assignment[ci], final_matches[1].assignment[mi]))
        .collect();
    let cost = Array2::from_shape_fn((l, np), |(q, p)| {
        let (tc, tm) = tgt[p];
        -sigmoid_scalar(logits.as_slice().unwrap()[q].f64())
            - ccp[(q, tc)].f64().max(1e-30).ln()
            - mlop[(q, tm)].f64().max(1e-30).ln()
    });
    let m = hungarian_match(&cost)?;

    // Pair-presence BCE over every link query.
    let mut present = ArrayD::<F>::zeros(IxDyn(&[l, 1]));
    for &q in &m.assignment {
        present[[q, 0]] = F::one();
    }
    let mut loss = link.pair_logits.bce_with_logits(&present).mean_all();

    // Pointer cross-entropy on matched links, via log-softmax of the raw
    // scores (ln of the f32 softmax underflows to -inf for sharp rows).
    if np > 0 {
        let pick = |scores: &Tensor<F>, targets: &dyn Fn(usize) -> usize| {
            let rows = scores.select_rows(&m.assignment).log_softmax_rows();
            let mut onehot = Array2::<F>::zeros((np, scores.shape()[1]));
            for p in 0..np {
                onehot[(p, targets(p))] = F::one();
            }
            rows.mul(&Tensor::new(onehot.into_dyn()))
                .sum_axis(1)
                .neg()
                .mean_all()
        };
        loss = loss
            .add(&pick(&link.cc_pointer_scores, &|p| tgt[p].0))
            .add(&pick(&link.mlo_pointer_scores, &|p| tgt[p].1));
    }
    Ok(loss)
}

pub struct LossBreakdown<F: Elem> {
    pub detection: Tensor<F>,
    pub malignancy: Tensor<F>,
    pub linker: Tensor<F>,
    pub total: Tensor<F>,
    pub matches: Vec<[MatchResult; 2]>,
}

/// λ_det·detection + λ_link·linker + λ_mal·malignancy, with matching computed
/// once per layer per view and the final layer's match anchoring the linker
/// targets.
pub fn total_loss<F: Elem>(
    preds: &[PredictionSet<F>],
    link: Option<&LinkPredictionSet<F>>,
    ann: &CaseAnnotation,
    w: &LossWeights,
) -> Result<LossBreakdown<F>> {
    let matches = compute_matches(preds, ann, w)?;
    total_loss_with(preds, link, ann, w, matches)
}

/// As `total_loss`, but with the per-layer matching supplied by the caller
/// (the single-branch ablation constrains both views to the same query).
pub fn total_loss_with<F: Elem>(
    preds: &[PredictionSet<F>],
    link: Option<&LinkPredictionSet<F>>,
    ann: &CaseAnnotation,
    w: &LossWeights,
    matches: Vec<[MatchResult; 2]>,
) -> Result<LossBreakdown<F>> {
    let detection = detection_loss(preds, ann, &matches, w);
    let malignancy = malignancy_loss(preds, ann, &matches);
    let linker = match link {
        Some(lk) => linker_loss(lk, ann, matches.last().unwrap())?,
        None => zero_scalar(),
    };
    let total = detection
        .mul_scalar(w.detection)
        .add(&linker.mul_scalar(w.linker))
        .add(&malignancy.mul_scalar(w.malignancy));
    Ok(LossBreakdown { detection, malignancy, linker, total, matches })
}
