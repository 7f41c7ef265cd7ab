//! Optimization loop wiring backbone → fusion pixel decoder → query decoder →
//! linker → losses, with the two ablation configurations, periodic
//! checkpointing, and the evaluation driver shared by training and the CLI.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::param::ParamStore;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{LossWeights, ModelConfig, TrainConfig};
use crate::datagen::{augment, rle_decode};
use crate::error::{Error, Result};
use crate::eval::{
    froc_curve, link_correct_count, malignancy_metrics, match_detections, recall_at_fpi,
    score_threshold_at_fpi, DetectionRecord, MetricsReport, IOU_THRESHOLD, SCORE_FLOOR,
};
use crate::losses::{
    hungarian_match, total_loss, total_loss_with, view_cost_matrix, LossBreakdown, MatchResult,
};
use crate::model::{decode_output, image_plane, AblationMode, Model};
use crate::types::{CaseAnnotation, ImagePair, View};
use crate::vitd::PredictionSet;

/// Adaptive-moment gradient descent with decoupled weight decay.
pub struct Adam {
    lr: f32,
    wd: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: HashMap<String, ArrayD<f32>>,
    v: HashMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f64, wd: f64) -> Adam {
        Adam {
            lr: lr as f32,
            wd: wd as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every parameter that received a gradient, in the
    /// store's registration order (deterministic).
    pub fn apply(&mut self, store: &ParamStore<f32>, grads: &HashMap<String, ArrayD<f32>>) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for p in store.iter() {
            let Some(g) = grads.get(p.name()) else { continue };
            let m = self
                .m
                .entry(p.name().to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            let v = self
                .v
                .entry(p.name().to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = &*m / b1c;
            let vhat = &*v / b2c;
            let (lr, wd, eps) = (self.lr, self.wd, self.eps);
            p.update(|w| {
                ndarray::Zip::from(&mut *w).and(&mhat).and(&vhat).for_each(|w, &m, &v| {
                    *w -= lr * (m / (v.sqrt() + eps) + wd * *w);
                });
            });
        }
    }
}

/// Joint per-layer matching for the single-branch ablation: both views of a
/// paired lesion are forced onto the same query index by a Hungarian match
/// over the summed per-view costs; unpaired instances keep their single-view
/// cost. Returns the usual per-view assignments.
pub fn compute_matches_joint(
    preds: &[PredictionSet<f32>],
    ann: &CaseAnnotation,
    w: &LossWeights,
) -> Result<Vec<[MatchResult; 2]>> {
    let pairs = ann.pair_map();
    let paired_cc: std::collections::BTreeSet<usize> = pairs.iter().map(|&(c, _)| c).collect();
    let paired_mlo: std::collections::BTreeSet<usize> = pairs.iter().map(|&(_, m)| m).collect();
    let mut entries: Vec<(Option<usize>, Option<usize>)> =
        pairs.iter().map(|&(c, m)| (Some(c), Some(m))).collect();
    for g in 0..ann.instances(View::Cc).len() {
        if !paired_cc.contains(&g) {
            entries.push((Some(g), None));
        }
    }
    for g in 0..ann.instances(View::Mlo).len() {
        if !paired_mlo.contains(&g) {
            entries.push((None, Some(g)));
        }
    }

    preds
        .iter()
        .map(|set| {
            let cost_cc = view_cost_matrix(&set.cc, ann.instances(View::Cc), w);
            let cost_mlo = view_cost_matrix(&set.mlo, ann.instances(View::Mlo), w);
            let n = set.cc.class_logits.shape()[0];
            let joint = Array2::from_shape_fn((n, entries.len()), |(q, e)| {
                entries[e].0.map_or(0.0, |g| cost_cc[(q, g)])
                    + entries[e].1.map_or(0.0, |g| cost_mlo[(q, g)])
            });
            let m = hungarian_match(&joint)?;
            let mut cc = MatchResult {
                assignment: vec![0; ann.instances(View::Cc).len()],
                total: 0.0,
            };
            let mut mlo = MatchResult {
                assignment: vec![0; ann.instances(View::Mlo).len()],
                total: 0.0,
            };
            for (e, &q) in m.assignment.iter().enumerate() {
                if let Some(g) = entries[e].0 {
                    cc.assignment[g] = q;
                    cc.total += cost_cc[(q, g)];
                }
                if let Some(g) = entries[e].1 {
                    mlo.assignment[g] = q;
                    mlo.total += cost_mlo[(q, g)];
                }
            }
            Ok([cc, mlo])
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub detection: f64,
    pub malignancy: f64,
    pub linker: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub struct Trainer {
    pub store: ParamStore<f32>,
    pub model: Model<f32>,
    pub train_cfg: TrainConfig,
    pub step: u64,
    opt: Adam,
    last_finite: f64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig, mode: AblationMode) -> Result<Trainer> {
        train_cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, train_cfg.seed, model_cfg, mode)?;
        Ok(Trainer {
            store,
            model,
            opt: Adam::new(train_cfg.learning_rate, train_cfg.weight_decay),
            step: 0,
            last_finite: 0.0,
            rng: crate::rng::substream(train_cfg.seed, "trainer.batch"),
            train_cfg: train_cfg.clone(),
        })
    }

    /// Restores parameters and the step counter from a checkpoint (optimizer
    /// moments restart; documented behavior).
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        crate::checkpoint::apply_checkpoint(ckpt, &self.store, &self.model.cfg, self.model.mode)?;
        self.step = ckpt.step;
        self.opt.t = ckpt.step;
        Ok(())
    }

    /// Forward + mode-aware loss for one case.
    pub fn case_loss(&self, pair: &ImagePair, ann: &CaseAnnotation) -> Result<LossBreakdown<f32>> {
        let out = self.model.forward(&image_plane(pair.cc()), &image_plane(pair.mlo()))?;
        let w = &self.train_cfg.loss_weights;
        match self.model.mode {
            AblationMode::FpdOnly => {
                let matches = compute_matches_joint(&out.preds, ann, w)?;
                total_loss_with(&out.preds, None, ann, w, matches)
            }
            _ => total_loss(&out.preds, out.link.as_ref(), ann, w),
        }
    }

    /// One optimizer step on a batch: per-sample gradients in parallel,
    /// merged in batch order, averaged, applied. Aborts on non-finite loss.
    pub fn train_step(&mut self, batch: &[(ImagePair, CaseAnnotation)]) -> Result<StepRecord> {
        assert!(!batch.is_empty());
        let samples: Vec<(ImagePair, CaseAnnotation)> = batch
            .iter()
            .map(|(p, a)| augment(p, a, &mut self.rng, &self.train_cfg.augment))
            .collect();
        let per_sample: Vec<Result<(StepRecord, HashMap<String, ArrayD<f32>>)>> = samples
            .par_iter()
            .map(|(p, a)| {
                // Non-finite forward outputs surface as matching-cost errors;
                // report them as the documented NaN abort.
                let lb = self.case_loss(p, a).map_err(|e| match e {
                    Error::Data(d) if d.contains("non-finite") => Error::NonFiniteLoss {
                        step: self.step,
                        last_finite: self.last_finite,
                    },
                    e => e,
                })?;
                let rec = StepRecord {
                    step: self.step,
                    loss: lb.total.scalar() as f64,
                    detection: lb.detection.scalar() as f64,
                    malignancy: lb.malignancy.scalar() as f64,
                    linker: lb.linker.scalar() as f64,
                };
                Ok((rec, lb.total.backward().into_named()))
            })
            .collect();

        let scale = 1.0 / batch.len() as f32;
        let mut merged: HashMap<String, ArrayD<f32>> = HashMap::new();
        let mut rec = StepRecord { step: self.step, loss: 0.0, detection: 0.0, malignancy: 0.0, linker: 0.0 };
        for r in per_sample {
            let (s, grads) = r?;
            rec.loss += s.loss * scale as f64;
            rec.detection += s.detection * scale as f64;
            rec.malignancy += s.malignancy * scale as f64;
            rec.linker += s.linker * scale as f64;
            for (name, g) in grads {
                match merged.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        merged.insert(name, g);
                    }
                }
            }
        }
        for g in merged.values_mut() {
            *g *= scale;
        }
        if !rec.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, last_finite: self.last_finite });
        }
        self.opt.apply(&self.store, &merged);
        self.last_finite = rec.loss;
        self.step += 1;
        Ok(rec)
    }

    fn draw_batch<'a>(
        &mut self,
        dataset: &'a [(ImagePair, CaseAnnotation)],
    ) -> Vec<(ImagePair, CaseAnnotation)> {
        use rand::Rng;
        (0..self.train_cfg.batch_size.min(dataset.len()))
            .map(|_| dataset[self.rng.random_range(0..dataset.len())].clone())
            .collect()
    }

    /// Full training run: draws random batches until `max_steps`, evaluating
    /// and checkpointing periodically when an output directory is given.
    pub fn train(
        &mut self,
        dataset: &[(ImagePair, CaseAnnotation)],
        eval_data: Option<&[(ImagePair, CaseAnnotation)]>,
        out_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        if dataset.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        let mut history = Vec::new();
        let mut evals = Vec::new();
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?,
                )
            }
            None => None,
        };
        while self.step < self.train_cfg.max_steps {
            let batch = self.draw_batch(dataset);
            let rec = self.train_step(&batch)?;
            let step_done = self.step;
            let at_end = step_done == self.train_cfg.max_steps;
            if let Some(eval_set) = eval_data {
                if step_done % self.train_cfg.eval_every == 0 || at_end {
                    let ev = evaluate(&self.model, eval_set, &[0.14, 0.25, 0.5, 1.0])?;
                    let record = EvalRecord { step: step_done, loss: rec.loss, report: ev.report };
                    if let Some(f) = log.as_mut() {
                        writeln!(f, "{}", serde_json::to_string(&record)?)
                            .map_err(|e| Error::io("metrics.jsonl", e))?;
                    }
                    evals.push(record);
                }
            }
            if let Some(dir) = out_dir {
                if step_done % self.train_cfg.checkpoint_every == 0 || at_end {
                    save_checkpoint(
                        &self.store,
                        &self.model.cfg,
                        self.model.mode,
                        step_done,
                        &dir.join("checkpoint.ckpt"),
                    )?;
                }
            }
            history.push(rec);
        }
        Ok(TrainReport {
            steps: self.step,
            first_loss: history.first().map_or(0.0, |r| r.loss),
            final_loss: history.last().map_or(0.0, |r| r.loss),
            history,
            evals,
        })
    }
}

/// A full evaluation pass: matched detection records, the FROC staircase,
/// and the metrics report.
pub struct Evaluation {
    pub report: MetricsReport,
    pub curve: Vec<(f64, f64)>,
    pub records: Vec<DetectionRecord>,
    pub n_images: usize,
    pub n_gts: usize,
}

struct CaseDetections {
    /// (score, malignancy) per retained detection, both views.
    dets: Vec<(f64, f64)>,
    malignant: bool,
    link_correct: usize,
    link_pairs: usize,
}

fn finish_evaluation(
    records: Vec<DetectionRecord>,
    cases: Vec<CaseDetections>,
    n_images: usize,
    n_gts: usize,
    fpi: &[f64],
    with_links: bool,
) -> Result<Evaluation> {
    let recall_at = fpi
        .iter()
        .map(|&t| Ok((t, recall_at_fpi(&records, n_images, n_gts, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let curve = froc_curve(&records, n_images, n_gts)?;

    // Per-gland malignancy at the R@0.25 operating point: gland score = max
    // malignancy over detections retained at that threshold.
    let thr = score_threshold_at_fpi(&records, n_images, 0.25);
    let scores: Vec<f64> = cases
        .iter()
        .map(|c| {
            c.dets
                .iter()
                .filter(|(s, _)| *s >= thr)
                .map(|&(_, m)| m)
                .fold(0.0, f64::max)
        })
        .collect();
    let labels: Vec<bool> = cases.iter().map(|c| c.malignant).collect();
    let malignancy = malignancy_metrics(&scores, &labels).ok();

    let link_accuracy = if with_links {
        let correct: usize = cases.iter().map(|c| c.link_correct).sum();
        let pairs: usize = cases.iter().map(|c| c.link_pairs).sum();
        Some(correct as f64 / pairs.max(1) as f64)
    } else {
        None
    };

    Ok(Evaluation {
        report: MetricsReport { recall_at, malignancy, link_accuracy, n_images, n_gts },
        curve,
        records,
        n_images,
        n_gts,
    })
}

/// Evaluates a model over a dataset at the given FPI budgets. Each view
/// counts as one image for FPI purposes.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &[(ImagePair, CaseAnnotation)],
    fpi: &[f64],
) -> Result<Evaluation> {
    let per_case: Vec<Result<(Vec<DetectionRecord>, CaseDetections, usize)>> = dataset
        .par_iter()
        .enumerate()
        .map(|(ci, (pair, ann))| {
            let (h, w) = pair.size();
            let out = model.forward(&image_plane(pair.cc()), &image_plane(pair.mlo()))?;
            let dec = decode_output(&out, h, w, SCORE_FLOOR, 0.5);
            let mut records = Vec::new();
            let mut gts_here = 0;
            let mut q2gt: [Vec<Option<usize>>; 2] = [Vec::new(), Vec::new()];
            for (vi, v) in View::both().into_iter().enumerate() {
                let gt_masks: Vec<Array2<bool>> =
                    ann.instances(v).iter().map(|g| g.mask.clone()).collect();
                gts_here += gt_masks.len();
                let dets = dec.view(v);
                let recs: Vec<DetectionRecord> = dets
                    .iter()
                    .map(|d| DetectionRecord {
                        image_id: 2 * ci + vi,
                        score: d.score,
                        mask: d.mask.clone(),
                        malignancy: d.malignancy,
                        matched_gt: None,
                    })
                    .collect();
                let matched = match_detections(recs, &gt_masks, IOU_THRESHOLD)?;
                let n_queries = model.cfg.num_object_queries;
                let mut map = vec![None; n_queries];
                for (d, r) in dets.iter().zip(&matched) {
                    map[d.query] = r.matched_gt;
                }
                q2gt[vi] = map;
                records.extend(matched);
            }
            let (link_correct, link_pairs) =
                link_correct_count(&dec.links, ann.pair_map(), &q2gt[0], &q2gt[1]);
            let case = CaseDetections {
                dets: records.iter().map(|r| (r.score, r.malignancy)).collect(),
                malignant: ann.any_malignant(),
                link_correct,
                link_pairs,
            };
            Ok((records, case, gts_here))
        })
        .collect();

    let mut records = Vec::new();
    let mut cases = Vec::new();
    let mut n_gts = 0;
    for r in per_case {
        let (recs, case, g) = r?;
        records.extend(recs);
        cases.push(case);
        n_gts += g;
    }
    let with_links = model.mode != AblationMode::FpdOnly;
    finish_evaluation(records, cases, 2 * dataset.len(), n_gts, fpi, with_links)
}

/// Standalone metric mode: evaluates an external prediction file against a
/// dataset. Cases are matched by name; link accuracy is unavailable.
pub fn evaluate_predictions(
    preds: &crate::eval::PredictionFile,
    dataset: &[(ImagePair, CaseAnnotation)],
    fpi: &[f64],
) -> Result<Evaluation> {
    let by_name: HashMap<&str, &crate::eval::PredictionCase> =
        preds.cases.iter().map(|c| (c.name.as_str(), c)).collect();
    let mut records = Vec::new();
    let mut cases = Vec::new();
    let mut n_gts = 0;
    for (ci, (pair, ann)) in dataset.iter().enumerate() {
        let (h, w) = pair.size();
        let case_preds = by_name.get(pair.case_id.as_str());
        let mut case_dets = Vec::new();
        for (vi, v) in View::both().into_iter().enumerate() {
            let gt_masks: Vec<Array2<bool>> =
                ann.instances(v).iter().map(|g| g.mask.clone()).collect();
            n_gts += gt_masks.len();
            let mut recs = Vec::new();
            if let Some(cp) = case_preds {
                for d in cp.detections.iter().filter(|d| d.view == v.as_str()) {
                    let mask = rle_decode(&d.rle, h, w).map_err(|e| {
                        Error::Data(format!("case {} {} prediction: {e}", cp.name, v.as_str()))
                    })?;
                    recs.push(DetectionRecord {
                        image_id: 2 * ci + vi,
                        score: d.score,
                        mask,
                        malignancy: d.malignancy,
                        matched_gt: None,
                    });
                }
            }
            let matched = match_detections(recs, &gt_masks, IOU_THRESHOLD)?;
            case_dets.extend(matched.iter().map(|r| (r.score, r.malignancy)));
            records.extend(matched);
        }
        cases.push(CaseDetections {
            dets: case_dets,
            malignant: ann.any_malignant(),
            link_correct: 0,
            link_pairs: ann.pair_map().len(),
        });
    }
    finish_evaluation(records, cases, 2 * dataset.len(), n_gts, fpi, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_case, PhantomConfig};

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            num_object_queries: 8,
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

    fn tiny_phantom_cfg() -> PhantomConfig {
        PhantomConfig {
            image_size: 32,
            radius_min: 3.0,
            radius_max: 5.0,
            ..PhantomConfig::default()
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<(ImagePair, CaseAnnotation)> {
        let cfg = tiny_phantom_cfg();
        (0..n)
            .map(|i| {
                let mut rng = crate::rng::substream_indexed(seed, "datagen.case", i as u64);
                generate_case(&mut rng, &cfg, &format!("case{i:04}")).unwrap()
            })
            .collect()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            max_steps: 2,
            eval_every: 1,
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_step_reduces_loss_on_a_fixed_batch() {
        let data = tiny_dataset(2, 0);
        let mut tr = Trainer::new(&tiny_model_cfg(), &tiny_train_cfg(), AblationMode::Full).unwrap();
        let before: f64 = data.iter().map(|(p, a)| tr.case_loss(p, a).unwrap().total.scalar() as f64).sum();
        for _ in 0..3 {
            tr.train_step(&data).unwrap();
        }
        let after: f64 = data.iter().map(|(p, a)| tr.case_loss(p, a).unwrap().total.scalar() as f64).sum();
        assert!(after < before, "loss did not drop: {before} -> {after}");
    }

    #[test]
    fn gradient_reaches_every_parameter_in_full_mode() {
        let data = tiny_dataset(4, 1);
        // Pick a case with at least one pair so the linker path is exercised.
        let (pair, ann) = data
            .iter()
            .find(|(_, a)| !a.pair_map().is_empty())
            .expect("tiny dataset should contain a paired case");
        let tr = Trainer::new(&tiny_model_cfg(), &tiny_train_cfg(), AblationMode::Full).unwrap();
        let lb = tr.case_loss(pair, ann).unwrap();
        let grads = lb.total.backward().into_named();
        for name in tr.store.names() {
            let g = grads
                .get(&name)
                .unwrap_or_else(|| panic!("no gradient reached parameter {name}"));
            assert!(g.iter().all(|v| v.is_finite()), "non-finite gradient in {name}");
        }
    }

    #[test]
    fn joint_matching_puts_paired_lesions_on_the_same_query() {
        let data = tiny_dataset(6, 2);
        let (pair, ann) = data
            .iter()
            .find(|(_, a)| !a.pair_map().is_empty())
            .expect("tiny dataset should contain a paired case");
        let tr = Trainer::new(&tiny_model_cfg(), &tiny_train_cfg(), AblationMode::FpdOnly).unwrap();
        let out = tr.model.forward(&image_plane(pair.cc()), &image_plane(pair.mlo())).unwrap();
        let matches = compute_matches_joint(&out.preds, ann, &LossWeights::default()).unwrap();
        for ms in &matches {
            for &(ci, mi) in ann.pair_map() {
                assert_eq!(ms[0].assignment[ci], ms[1].assignment[mi]);
            }
            // Distinct gts within a view stay on distinct queries.
            let mut seen: Vec<usize> = ms[0].assignment.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), ms[0].assignment.len());
        }
    }

    #[test]
    fn nan_loss_aborts_with_step_and_last_finite() {
        let data = tiny_dataset(2, 3);
        let mut tr = Trainer::new(&tiny_model_cfg(), &tiny_train_cfg(), AblationMode::Full).unwrap();
        let rec = tr.train_step(&data).unwrap();
        // Poison the classification head, which feeds the loss directly.
        let p = tr.store.get("vitd.head.class.b").unwrap();
        p.update(|w| w.fill(f32::NAN));
        match tr.train_step(&data) {
            Err(Error::NonFiniteLoss { step, last_finite }) => {
                assert_eq!(step, 1);
                assert_eq!(last_finite, rec.loss);
            }
            other => panic!("expected NaN abort, got {:?}", other.map(|r| r.loss)),
        }
    }

    #[test]
    fn training_is_deterministic_given_the_seed() {
        let data = tiny_dataset(3, 4);
        let run = || {
            let mut tr =
                Trainer::new(&tiny_model_cfg(), &tiny_train_cfg(), AblationMode::Full).unwrap();
            tr.train(&data, None, None).unwrap().history
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss, y.loss);
        }
    }

    #[test]
    fn evaluation_report_is_well_formed_on_an_untrained_model() {
        let data = tiny_dataset(3, 5);
        let tr = Trainer::new(&tiny_model_cfg(), &tiny_train_cfg(), AblationMode::Full).unwrap();
        let ev = evaluate(&tr.model, &data, &[0.25, 0.5, 1.0]).unwrap();
        assert_eq!(ev.n_images, 6);
        assert!(ev.n_gts > 0);
        assert_eq!(ev.report.recall_at.len(), 3);
        for &(_, r) in &ev.report.recall_at {
            assert!((0.0..=1.0).contains(&r));
        }
        assert!(ev.report.link_accuracy.is_some());
        // Monotone in t.
        assert!(ev.report.recall_at[2].1 >= ev.report.recall_at[0].1);
    }

    #[test]
    fn oracle_prediction_file_scores_perfect_recall() {
        let data = tiny_dataset(3, 6);
        let mut cases = Vec::new();
        for (pair, ann) in &data {
            let mut detections = Vec::new();
            for v in View::both() {
                for g in ann.instances(v) {
                    detections.push(crate::eval::PredictedInstance {
                        view: v.as_str().to_string(),
                        rle: crate::datagen::rle_encode(&g.mask),
                        score: 1.0,
                        malignancy: if g.malignant { 0.9 } else { 0.1 },
                    });
                }
            }
            cases.push(crate::eval::PredictionCase { name: pair.case_id.clone(), detections });
        }
        let file = crate::eval::PredictionFile { image_size: 32, cases };
        let ev = evaluate_predictions(&file, &data, &[0.25, 0.5, 1.0]).unwrap();
        for &(t, r) in &ev.report.recall_at {
            assert_eq!(r, 1.0, "R@{t} should be 1.0 for oracle predictions");
        }
        if let Some(m) = &ev.report.malignancy {
            assert_eq!(m.auc, 1.0);
        }
    }

    #[test]
    fn resume_continues_the_step_count() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(2, 7);
        let mcfg = tiny_model_cfg();
        let tcfg = tiny_train_cfg();
        let mut tr = Trainer::new(&mcfg, &tcfg, AblationMode::Full).unwrap();
        tr.train(&data, None, Some(dir.path())).unwrap();
        assert_eq!(tr.step, 2);

        let ckpt = crate::checkpoint::load_checkpoint(&dir.path().join("checkpoint.ckpt")).unwrap();
        let mut tcfg2 = tcfg.clone();
        tcfg2.max_steps = 4;
        let mut tr2 = Trainer::new(&mcfg, &tcfg2, AblationMode::Full).unwrap();
        tr2.resume(&ckpt).unwrap();
        assert_eq!(tr2.step, 2);
        let report = tr2.train(&data, None, None).unwrap();
        assert_eq!(tr2.step, 4);
        assert_eq!(report.history.len(), 2);
    }
}
