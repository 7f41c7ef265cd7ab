//! Evaluation protocol: mask-IoU detection matching, recall at
//! false-positives-per-image (FROC), per-gland malignancy metrics, and link
//! accuracy, plus a standalone prediction interchange format and FROC plot.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Queries below this lesion probability are dropped before evaluation;
/// a floor is required for FPI to be meaningful with a fixed query budget.
pub const SCORE_FLOOR: f64 = 0.05;

/// Default IoU threshold for counting a detection as a true positive.
pub const IOU_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub score: f64,
    pub mask: Array2<bool>,
    pub malignancy: f64,
    /// Ground-truth instance index within the same image, set by matching.
    pub matched_gt: Option<usize>,
}

/// |a∩b| / |a∪b|; both masks empty → 0.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "mask IoU shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Greedy score-ordered matching for one image: each detection, in descending
/// score order, claims the highest-IoU still-unmatched ground truth with
/// IoU > threshold. Unclaimed detections are false positives.
pub fn match_detections(
    mut records: Vec<DetectionRecord>,
    gts: &[Array2<bool>],
    iou_threshold: f64,
) -> Result<Vec<DetectionRecord>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| records[j].score.partial_cmp(&records[i].score).unwrap());
    let mut taken = vec![false; gts.len()];
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = mask_iou(&records[i].mask, gt)?;
            if iou > iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            records[i].matched_gt = Some(g);
        } else {
            records[i].matched_gt = None;
        }
    }
    Ok(records)
}

/// Full FROC staircase: one (FPI, recall) point per distinct score cutoff,
/// compressed so each FPI keeps its maximum recall. Records must already be
/// matched.
pub fn froc_curve(
    records: &[DetectionRecord],
    n_images: usize,
    n_gts: usize,
) -> Result<Vec<(f64, f64)>> {
    if n_gts == 0 {
        return Err(Error::MetricUndefined("no ground-truth instances in the test set".into()));
    }
    if n_images == 0 {
        return Err(Error::MetricUndefined("no images in the test set".into()));
    }
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (i, r) in sorted.iter().enumerate() {
        if r.matched_gt.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        // Emit a point only at distinct-score boundaries.
        if i + 1 == sorted.len() || sorted[i + 1].score < r.score {
            points.push((fp as f64 / n_images as f64, tp as f64 / n_gts as f64));
        }
    }
    // Compress: recall is nondecreasing along the sweep, so the last point at
    // each FPI value carries its maximum recall.
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (fpi, r) in points {
        match out.last_mut() {
            Some(last) if last.0 == fpi => last.1 = r,
            _ => out.push((fpi, r)),
        }
    }
    Ok(out)
}

/// Maximum recall subject to FPI ≤ t.
pub fn recall_at_fpi(
    records: &[DetectionRecord],
    n_images: usize,
    n_gts: usize,
    t: f64,
) -> Result<f64> {
    let curve = froc_curve(records, n_images, n_gts)?;
    Ok(curve
        .iter()
        .filter(|(fpi, _)| *fpi <= t)
        .map(|&(_, r)| r)
        .fold(0.0, f64::max))
}

/// Score cutoff realizing the recall_at_fpi operating point: the lowest
/// retained score whose prefix keeps FPI ≤ t (1.0 when nothing fits).
pub fn score_threshold_at_fpi(
    records: &[DetectionRecord],
    n_images: usize,
    t: f64,
) -> f64 {
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut fp = 0usize;
    let mut best = 1.0;
    for (i, r) in sorted.iter().enumerate() {
        if r.matched_gt.is_none() {
            fp += 1;
        }
        let boundary = i + 1 == sorted.len() || sorted[i + 1].score < r.score;
        if boundary {
            if fp as f64 / n_images as f64 <= t {
                best = r.score;
            } else {
                break;
            }
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MalignancyMetrics {
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Youden-optimal score threshold the sensitivity/specificity refer to.
    pub threshold: f64,
}

/// ROC-AUC by the rank statistic (ties get half credit) plus sensitivity and
/// specificity at the Youden-optimal threshold (ties resolved toward the
/// higher threshold).
pub fn malignancy_metrics(scores: &[f64], labels: &[bool]) -> Result<MalignancyMetrics> {
    assert_eq!(scores.len(), labels.len());
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::MetricUndefined(format!(
            "ROC-AUC needs both classes; got {} malignant and {} benign glands",
            pos.len(),
            neg.len()
        )));
    }
    let mut num = 0.0;
    for &p in &pos {
        for &n in &neg {
            num += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    let auc = num / (pos.len() * neg.len()) as f64;

    // Youden sweep over distinct thresholds, descending; classify score ≥ thr
    // as malignant.
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut best = (f64::NEG_INFINITY, 1.0, 0.0, 0.0); // (J, thr, sens, spec)
    for &thr in &thresholds {
        let sens = pos.iter().filter(|&&s| s >= thr).count() as f64 / pos.len() as f64;
        let spec = neg.iter().filter(|&&s| s < thr).count() as f64 / neg.len() as f64;
        let j = sens + spec - 1.0;
        if j > best.0 {
            best = (j, thr, sens, spec);
        }
    }
    Ok(MalignancyMetrics { auc, sensitivity: best.2, specificity: best.3, threshold: best.1 })
}

/// Counts correctly decoded links for one case. `cc_q2gt` / `mlo_q2gt` give
/// the evaluation-time gt index each query's detection matched (None =
/// unmatched). Returns (correct, gt_pairs).
pub fn link_correct_count(
    decoded: &[(usize, usize, f64)],
    pair_map: &[(usize, usize)],
    cc_q2gt: &[Option<usize>],
    mlo_q2gt: &[Option<usize>],
) -> (usize, usize) {
    let correct = decoded
        .iter()
        .filter(|&&(cq, mq, _)| {
            match (cc_q2gt.get(cq).copied().flatten(), mlo_q2gt.get(mq).copied().flatten()) {
                (Some(cg), Some(mg)) => pair_map.contains(&(cg, mg)),
                _ => false,
            }
        })
        .count();
    (correct, pair_map.len())
}

/// correct links / max(#gt pairs, 1).
pub fn link_accuracy(
    decoded: &[(usize, usize, f64)],
    pair_map: &[(usize, usize)],
    cc_q2gt: &[Option<usize>],
    mlo_q2gt: &[Option<usize>],
) -> f64 {
    let (correct, total) = link_correct_count(decoded, pair_map, cc_q2gt, mlo_q2gt);
    correct as f64 / total.max(1) as f64
}

// ---------------------------------------------------------------------------
// Interchange format, report, and plot
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictedInstance {
    pub view: String,
    pub rle: Vec<usize>,
    pub score: f64,
    pub malignancy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionCase {
    pub name: String,
    pub detections: Vec<PredictedInstance>,
}

/// Standalone prediction interchange file (same RLE conventions as the
/// dataset manifest, plus scores) so evaluation can run on external output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionFile {
    pub image_size: usize,
    pub cases: Vec<PredictionCase>,
}

pub fn save_predictions(preds: &PredictionFile, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(preds)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<PredictionFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// (t, recall) at each requested FPI budget.
    pub recall_at: Vec<(f64, f64)>,
    pub malignancy: Option<MalignancyMetrics>,
    pub link_accuracy: Option<f64>,
    pub n_images: usize,
    pub n_gts: usize,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, r) in &self.recall_at {
            s.push_str(&format!("R@{t} = {r:.4}\n"));
        }
        if let Some(m) = &self.malignancy {
            s.push_str(&format!(
                "malignancy: AUC = {:.4}, sensitivity = {:.4}, specificity = {:.4} (threshold {:.4})\n",
                m.auc, m.sensitivity, m.specificity, m.threshold
            ));
        }
        if let Some(a) = self.link_accuracy {
            s.push_str(&format!("link accuracy = {a:.4}\n"));
        }
        s.push_str(&format!("images = {}, gt instances = {}\n", self.n_images, self.n_gts));
        s
    }
}

/// Renders the FROC staircase as a simple PNG plot (axes plus the curve).
pub fn plot_froc(curve: &[(f64, f64)], path: &Path) -> Result<()> {
    let (w, h) = (480u32, 360u32);
    let margin = 40i64;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let max_fpi = curve.iter().map(|&(f, _)| f).fold(1.0f64, f64::max);
    let to_px = |fpi: f64, rec: f64| -> (i64, i64) {
        let x = margin + ((fpi / max_fpi) * (w as i64 - 2 * margin) as f64) as i64;
        let y = (h as i64 - margin) - (rec * (h as i64 - 2 * margin) as f64) as i64;
        (x, y)
    };
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    };
    // Axes.
    for x in margin..(w as i64 - margin) {
        put(x, h as i64 - margin, [0, 0, 0]);
    }
    for y in margin..(h as i64 - margin) {
        put(margin, y, [0, 0, 0]);
    }
    // Staircase: horizontal then vertical segments between consecutive points.
    let draw_line = |img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64)| {
        let steps = (a.0 - b.0).abs().max((a.1 - b.1).abs()).max(1);
        for s in 0..=steps {
            let x = a.0 + (b.0 - a.0) * s / steps;
            let y = a.1 + (b.1 - a.1) * s / steps;
            if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, image::Rgb([200, 30, 30]));
            }
        }
    };
    for pair in curve.windows(2) {
        let a = to_px(pair[0].0, pair[0].1);
        let b = to_px(pair[1].0, pair[1].1);
        draw_line(&mut img, a, (b.0, a.1));
        draw_line(&mut img, (b.0, a.1), b);
    }
    img.save(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })
}
