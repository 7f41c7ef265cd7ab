//! Synthetic dual-view phantom generator plus the on-disk dataset format
//! (PNG images + a JSON manifest with inline run-length-encoded masks) and
//! the training-time augmentations.
//!
//! Each case is a breast-shaped intensity field seen in two views. A paired
//! lesion appears in both views at the same chest-wall distance (column)
//! up to jitter; distractors and unannotated clutter appear in one view only,
//! which is what makes single-view detection ambiguous.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::normal_draw;
use crate::config::AugmentFlags;
use crate::error::{Error, Result};
use crate::types::{CaseAnnotation, ImagePair, InstanceGt, Laterality, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Square image side, divisible by 32.
    pub image_size: usize,
    /// Lesions per case, drawn uniformly from [lesions_min, lesions_max].
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Probability that a lesion appears in both views.
    pub paired_fraction: f64,
    /// Bright single-view distractors per case, uniform range.
    pub distractors_min: usize,
    pub distractors_max: usize,
    /// Faint unannotated clutter blobs per case, uniform range.
    pub clutter_min: usize,
    pub clutter_max: usize,
    /// Probability that a lesion is malignant (spiculated).
    pub malignant_fraction: f64,
    /// Lesion radius range in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Std-dev (pixels) of the shared-column jitter between paired views.
    pub jitter_sigma: f64,
    /// Additive contrast ranges.
    pub lesion_contrast_min: f64,
    pub lesion_contrast_max: f64,
    pub distractor_contrast_min: f64,
    pub distractor_contrast_max: f64,
    pub clutter_contrast_min: f64,
    pub clutter_contrast_max: f64,
    /// Low-frequency background texture amplitude and pixel noise std-dev.
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 128,
            lesions_min: 1,
            lesions_max: 2,
            paired_fraction: 0.8,
            distractors_min: 0,
            distractors_max: 2,
            clutter_min: 2,
            clutter_max: 5,
            malignant_fraction: 0.4,
            radius_min: 6.0,
            radius_max: 12.0,
            jitter_sigma: 1.5,
            lesion_contrast_min: 0.10,
            lesion_contrast_max: 0.35,
            distractor_contrast_min: 0.25,
            distractor_contrast_max: 0.35,
            clutter_contrast_min: 0.08,
            clutter_contrast_max: 0.18,
            texture_amplitude: 0.05,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        for (name, v) in [
            ("paired_fraction", self.paired_fraction),
            ("malignant_fraction", self.malignant_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.lesions_min > self.lesions_max
            || self.distractors_min > self.distractors_max
            || self.clutter_min > self.clutter_max
        {
            return Err(Error::Config("count range has min > max".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_max >= self.radius_min) {
            return Err(Error::Config(format!(
                "invalid radius range [{}, {}]",
                self.radius_min, self.radius_max
            )));
        }
        if self.radius_max * 2.0 >= self.image_size as f64 / 2.0 {
            return Err(Error::Config("radius_max too large for image_size".into()));
        }
        Ok(())
    }
}

/// Blob geometry shared between the two renderings of a paired lesion: a
/// smooth ellipse for benign, an irregular spiculated boundary for malignant.
#[derive(Clone)]
struct BlobShape {
    radius: f64,
    aspect: f64,
    orientation: f64,
    /// Radial boundary perturbation harmonics (amplitude, frequency, phase);
    /// empty for smooth blobs.
    harmonics: Vec<(f64, f64, f64)>,
}

impl BlobShape {
    fn draw(rng: &mut ChaCha8Rng, cfg: &PhantomConfig, spiculated: bool) -> BlobShape {
        let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let aspect = rng.random_range(0.7..1.0);
        let orientation = rng.random_range(0.0..std::f64::consts::PI);
        let harmonics = if spiculated {
            (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.12..0.3),
                        rng.random_range(3.0f64..7.0).round(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        BlobShape { radius, aspect, orientation, harmonics }
    }

    /// Boundary radius along direction θ (before the elliptic aspect).
    fn boundary(&self, theta: f64) -> f64 {
        let mut r = 1.0;
        for &(a, k, phase) in &self.harmonics {
            r += a * (k * theta + phase).sin();
        }
        self.radius * r.max(0.3)
    }

    /// Worst-case extent, for placement margins.
    fn max_extent(&self) -> f64 {
        let slack: f64 = self.harmonics.iter().map(|&(a, _, _)| a).sum();
        self.radius * (1.0 + slack)
    }

    /// Renders the blob at (cx, cy) with additive contrast; returns the exact
    /// rendered mask.
    fn render(&self, img: &mut Array2<f32>, cx: f64, cy: f64, contrast: f64) -> Array2<bool> {
        let (h, w) = img.dim();
        let mut mask = Array2::from_elem((h, w), false);
        let ext = self.max_extent().ceil() as isize + 1;
        let (ci, cj) = (cy.round() as isize, cx.round() as isize);
        let (sin_o, cos_o) = self.orientation.sin_cos();
        for i in (ci - ext).max(0)..(ci + ext + 1).min(h as isize) {
            for j in (cj - ext).max(0)..(cj + ext + 1).min(w as isize) {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                // Rotate into the blob frame and undo the elliptic aspect.
                let u = dx * cos_o + dy * sin_o;
                let v = (-dx * sin_o + dy * cos_o) / self.aspect;
                let d = (u * u + v * v).sqrt();
                if d < 1e-9 {
                    mask[(i as usize, j as usize)] = true;
                    img[(i as usize, j as usize)] += contrast as f32;
                    continue;
                }
                let theta = v.atan2(u);
                let b = self.boundary(theta);
                if d <= b {
                    let falloff = 1.0 - 0.4 * (d / b) * (d / b);
                    mask[(i as usize, j as usize)] = true;
                    img[(i as usize, j as usize)] += (contrast * falloff) as f32;
                }
            }
        }
        mask
    }
}

fn inside_breast(s: usize, x: f64, y: f64, margin: f64) -> bool {
    // Half-ellipse anchored at the chest wall (left edge).
    let rx = 0.8 * s as f64 - margin;
    let ry = 0.45 * s as f64 - margin;
    if rx <= 0.0 || ry <= 0.0 {
        return false;
    }
    let ny = (y - s as f64 / 2.0) / ry;
    let nx = x / rx;
    x >= margin && nx * nx + ny * ny <= 1.0
}

fn background(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> Array2<f32> {
    let s = cfg.image_size;
    // A few random low-frequency sinusoids give tissue-like texture.
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    Array2::from_shape_fn((s, s), |(i, j)| {
        let (x, y) = (j as f64, i as f64);
        if inside_breast(s, x, y, 0.0) {
            let mut v = 0.35;
            // Gentle falloff toward the breast boundary.
            let nx = x / (0.8 * s as f64);
            let ny = (y - s as f64 / 2.0) / (0.45 * s as f64);
            v -= 0.12 * (nx * nx + ny * ny);
            for &(fx, fy, p) in &waves {
                v += cfg.texture_amplitude
                    * (std::f64::consts::TAU * (fx * x + fy * y) / s as f64 + p).sin();
            }
            v as f32
        } else {
            0.02
        }
    })
}

/// Draws a placement inside the breast with the given margin; None after
/// bounded retries.
fn place(rng: &mut ChaCha8Rng, s: usize, margin: f64, x_fixed: Option<f64>) -> Option<(f64, f64)> {
    for _ in 0..50 {
        let x = match x_fixed {
            Some(x) => x,
            None => rng.random_range(margin..s as f64 - margin),
        };
        let y = rng.random_range(margin..s as f64 - margin);
        if inside_breast(s, x, y, margin) {
            return Some((x, y));
        }
    }
    None
}

struct PendingInstance {
    view: View,
    mask: Array2<bool>,
    malignant: bool,
    /// Index linking the cc and mlo renderings of the same lesion.
    pair: Option<usize>,
}

fn try_generate_case(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    case_id: &str,
) -> Result<Option<(ImagePair, CaseAnnotation)>> {
    let s = cfg.image_size;
    let mut cc = background(rng, cfg);
    let mut mlo = background(rng, cfg);
    let mut instances: Vec<PendingInstance> = Vec::new();
    let mut next_pair = 0usize;

    // Annotated lesions.
    let n_lesions = rng.random_range(cfg.lesions_min..=cfg.lesions_max);
    for _ in 0..n_lesions {
        let paired = rng.random::<f64>() < cfg.paired_fraction;
        let malignant = rng.random::<f64>() < cfg.malignant_fraction;
        let shape = BlobShape::draw(rng, cfg, malignant);
        let margin = shape.max_extent() + 2.0;
        let contrast = rng.random_range(cfg.lesion_contrast_min..=cfg.lesion_contrast_max);
        if paired {
            let Some((x_cc, y_cc)) = place(rng, s, margin, None) else { return Ok(None) };
            let x_mlo = x_cc + cfg.jitter_sigma * normal_draw(rng);
            let Some((x_mlo, y_mlo)) = place(rng, s, margin, Some(x_mlo)) else {
                return Ok(None);
            };
            let m_cc = shape.render(&mut cc, x_cc, y_cc, contrast);
            let m_mlo = shape.render(&mut mlo, x_mlo, y_mlo, contrast);
            let pair = Some(next_pair);
            next_pair += 1;
            instances.push(PendingInstance { view: View::Cc, mask: m_cc, malignant, pair });
            instances.push(PendingInstance { view: View::Mlo, mask: m_mlo, malignant, pair });
        } else {
            let view = if rng.random::<bool>() { View::Cc } else { View::Mlo };
            let Some((x, y)) = place(rng, s, margin, None) else { return Ok(None) };
            let img = if view == View::Cc { &mut cc } else { &mut mlo };
            let mask = shape.render(img, x, y, contrast);
            instances.push(PendingInstance { view, mask, malignant, pair: None });
        }
    }

    // Bright single-view distractors: annotated, never paired.
    let n_distract = rng.random_range(cfg.distractors_min..=cfg.distractors_max);
    for _ in 0..n_distract {
        let malignant = rng.random::<f64>() < cfg.malignant_fraction;
        let shape = BlobShape::draw(rng, cfg, malignant);
        let margin = shape.max_extent() + 2.0;
        let contrast = rng.random_range(cfg.distractor_contrast_min..=cfg.distractor_contrast_max);
        let view = if rng.random::<bool>() { View::Cc } else { View::Mlo };
        let Some((x, y)) = place(rng, s, margin, None) else { return Ok(None) };
        let img = if view == View::Cc { &mut cc } else { &mut mlo };
        let mask = shape.render(img, x, y, contrast);
        instances.push(PendingInstance { view, mask, malignant, pair: None });
    }

    // Faint unannotated clutter.
    let n_clutter = rng.random_range(cfg.clutter_min..=cfg.clutter_max);
    for _ in 0..n_clutter {
        let shape = BlobShape::draw(rng, cfg, false);
        let margin = shape.max_extent() + 2.0;
        let contrast = rng.random_range(cfg.clutter_contrast_min..=cfg.clutter_contrast_max);
        let view = if rng.random::<bool>() { View::Cc } else { View::Mlo };
        let Some((x, y)) = place(rng, s, margin, None) else { return Ok(None) };
        let img = if view == View::Cc { &mut cc } else { &mut mlo };
        shape.render(img, x, y, contrast);
    }

    // Pixel noise, clamp to [0, 1], then quantize to the 8-bit levels the
    // on-disk PNG stores so that generate → save → load is exact.
    for img in [&mut cc, &mut mlo] {
        img.mapv_inplace(|v| {
            let v = (v + (cfg.noise_sigma * normal_draw(rng)) as f32).clamp(0.0, 1.0);
            (v * 255.0).round() / 255.0
        });
    }

    // Collect per-view instance lists, tracking indices for the pair map.
    let mut cc_insts = Vec::new();
    let mut mlo_insts = Vec::new();
    let mut pair_slots: std::collections::HashMap<usize, (Option<usize>, Option<usize>)> =
        Default::default();
    for inst in instances {
        let (list, slot): (&mut Vec<InstanceGt>, usize) = match inst.view {
            View::Cc => (&mut cc_insts, 0),
            View::Mlo => (&mut mlo_insts, 1),
        };
        let idx = list.len();
        list.push(InstanceGt { mask: inst.mask, malignant: inst.malignant });
        if let Some(p) = inst.pair {
            let e = pair_slots.entry(p).or_default();
            if slot == 0 {
                e.0 = Some(idx);
            } else {
                e.1 = Some(idx);
            }
        }
    }
    let mut pair_map: Vec<(usize, usize)> = pair_slots
        .into_values()
        .map(|(c, m)| (c.unwrap(), m.unwrap()))
        .collect();
    pair_map.sort_unstable();

    let ann = CaseAnnotation::new(cc_insts, mlo_insts, pair_map)?;
    let pair = ImagePair::new(cc, mlo, case_id.to_string(), Laterality::Left)?;
    Ok(Some((pair, ann)))
}

/// Generates one case; placement failures restart the whole case with fresh
/// draws, bounded.
pub fn generate_case(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    case_id: &str,
) -> Result<(ImagePair, CaseAnnotation)> {
    cfg.validate()?;
    for _ in 0..20 {
        if let Some(case) = try_generate_case(rng, cfg, case_id)? {
            return Ok(case);
        }
    }
    Err(Error::Data(format!(
        "case {case_id}: lesion placement failed after bounded retries; \
         radius range likely too large for image_size {}",
        cfg.image_size
    )))
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

/// Row-major run-length encoding. The first run counts zeros (possibly 0),
/// runs alternate, and the run sum equals H·W.
pub fn rle_encode(mask: &Array2<bool>) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0usize;
    for &b in mask.iter() {
        if b == current {
            count += 1;
        } else {
            runs.push(count);
            current = b;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn rle_decode(rle: &[usize], h: usize, w: usize) -> Result<Array2<bool>> {
    let total: usize = rle.iter().sum();
    if total != h * w {
        return Err(Error::Data(format!(
            "RLE runs sum to {total}, expected {h}×{w} = {}",
            h * w
        )));
    }
    let mut flat = Vec::with_capacity(h * w);
    let mut value = false;
    for &run in rle {
        flat.extend(std::iter::repeat_n(value, run));
        value = !value;
    }
    Ok(Array2::from_shape_vec((h, w), flat).unwrap())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub view: String,
    pub rle: Vec<usize>,
    pub malignant: bool,
    pub pair_id: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub name: String,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub cases: Vec<CaseRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn save_png(img: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((i, j), &v) in img.indexed_iter() {
        buf.put_pixel(j as u32, i as u32, image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
    }
    buf.save(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })
}

/// Loads an arbitrary grayscale image (8- or 16-bit) normalized to [0,1].
pub fn load_image(path: &Path) -> Result<Array2<f32>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image file missing"),
        ));
    }
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?;
    if let image::DynamicImage::ImageLuma16(im) = &img {
        let (w, h) = im.dimensions();
        return Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
            im.get_pixel(j as u32, i as u32).0[0] as f32 / 65535.0
        }));
    }
    let im = img.into_luma8();
    let (w, h) = im.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        im.get_pixel(j as u32, i as u32).0[0] as f32 / 255.0
    }))
}

fn load_png(path: &Path) -> Result<Array2<f32>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image file missing"),
        ));
    }
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f32 / 255.0
    }))
}

/// Writes `n_cases` generated cases under `out`: `images/<case>_<view>.png`
/// plus `manifest.json` with inline RLE masks.
pub fn generate_dataset(
    seed: u64,
    cfg: &PhantomConfig,
    n_cases: usize,
    out: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut cases = Vec::with_capacity(n_cases);
    for idx in 0..n_cases {
        let name = format!("case{idx:04}");
        let mut rng = crate::rng::substream_indexed(seed, "datagen.case", idx as u64);
        let (pair, ann) = generate_case(&mut rng, cfg, &name)?;
        for v in View::both() {
            save_png(pair.view(v), &images_dir.join(format!("{name}_{}.png", v.as_str())))?;
        }
        let mut instances = Vec::new();
        for v in View::both() {
            for (i, inst) in ann.instances(v).iter().enumerate() {
                let pair_id = ann
                    .pair_map()
                    .iter()
                    .position(|&(ci, mi)| match v {
                        View::Cc => ci == i,
                        View::Mlo => mi == i,
                    })
                    .map(|p| p as u32);
                instances.push(InstanceRecord {
                    view: v.as_str().to_string(),
                    rle: rle_encode(&inst.mask),
                    malignant: inst.malignant,
                    pair_id,
                });
            }
        }
        cases.push(CaseRecord { name, instances });
    }
    let manifest = Manifest { image_size: cfg.image_size, cases };
    let path = out.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a dataset directory written by [`generate_dataset`] (or prepared
/// externally in the same layout).
pub fn load_dataset(path: &Path) -> Result<Vec<(ImagePair, CaseAnnotation)>> {
    let mpath = path.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let s = manifest.image_size;
    let mut out = Vec::with_capacity(manifest.cases.len());
    for case in &manifest.cases {
        let img = |v: View| load_png(&path.join("images").join(format!("{}_{}.png", case.name, v.as_str())));
        let cc_img = img(View::Cc)?;
        let mlo_img = img(View::Mlo)?;
        let mut cc = Vec::new();
        let mut mlo = Vec::new();
        let mut pairs: std::collections::BTreeMap<u32, (Option<usize>, Option<usize>)> =
            Default::default();
        for rec in &case.instances {
            let mask = rle_decode(&rec.rle, s, s).map_err(|e| {
                Error::Data(format!("case {} ({} view): {e}", case.name, rec.view))
            })?;
            let inst = InstanceGt { mask, malignant: rec.malignant };
            let (list, slot) = match rec.view.as_str() {
                "cc" => (&mut cc, 0),
                "mlo" => (&mut mlo, 1),
                other => {
                    return Err(Error::Data(format!(
                        "case {}: unknown view {other:?}",
                        case.name
                    )))
                }
            };
            let idx = list.len();
            list.push(inst);
            if let Some(pid) = rec.pair_id {
                let e = pairs.entry(pid).or_default();
                let cell = if slot == 0 { &mut e.0 } else { &mut e.1 };
                if cell.is_some() {
                    return Err(Error::Data(format!(
                        "case {}: pair_id {pid} appears twice in the {} view",
                        case.name, rec.view
                    )));
                }
                *cell = Some(idx);
            }
        }
        let mut pair_map = Vec::new();
        for (pid, (c, m)) in pairs {
            match (c, m) {
                (Some(c), Some(m)) => pair_map.push((c, m)),
                _ => {
                    return Err(Error::Data(format!(
                        "case {}: pair_id {pid} references only one view",
                        case.name
                    )))
                }
            }
        }
        let ann = CaseAnnotation::new(cc, mlo, pair_map)?;
        let pair = ImagePair::new(cc_img, mlo_img, case.name.clone(), Laterality::Left)?;
        out.push((pair, ann));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

fn flip_cols_f32(a: &Array2<f32>) -> Array2<f32> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[(i, w - 1 - j)])
}

fn flip_cols_bool(a: &Array2<bool>) -> Array2<bool> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[(i, w - 1 - j)])
}

/// Horizontal flip applied identically to both views (laterality-preserving:
/// the pairing and the shared chest-wall-distance axis survive mirroring).
pub fn flip_horizontal(pair: &ImagePair, ann: &CaseAnnotation) -> (ImagePair, CaseAnnotation) {
    let flip_insts = |v: View| {
        ann.instances(v)
            .iter()
            .map(|i| InstanceGt { mask: flip_cols_bool(&i.mask), malignant: i.malignant })
            .collect::<Vec<_>>()
    };
    let new_pair = ImagePair::new(
        flip_cols_f32(pair.cc()),
        flip_cols_f32(pair.mlo()),
        pair.case_id.clone(),
        pair.laterality,
    )
    .expect("flip preserves shape");
    let new_ann = CaseAnnotation::new(flip_insts(View::Cc), flip_insts(View::Mlo), ann.pair_map().to_vec())
        .expect("flip preserves structure");
    (new_pair, new_ann)
}

fn bilin_px(src: &Array2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = src.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = (x - x0) as f32;
    let wy = (y - y0) as f32;
    let cl = |t: f64, hi: usize| (t.max(0.0) as usize).min(hi - 1);
    let (x0c, x1c) = (cl(x0, w), cl(x0 + 1.0, w));
    let (y0c, y1c) = (cl(y0, h), cl(y0 + 1.0, h));
    (1.0 - wx) * (1.0 - wy) * src[(y0c, x0c)]
        + wx * (1.0 - wy) * src[(y0c, x1c)]
        + (1.0 - wx) * wy * src[(y1c, x0c)]
        + wx * wy * src[(y1c, x1c)]
}

/// Rotation (radians) + uniform scale about the image center: image sampled
/// bilinearly, masks by nearest neighbor so they stay exact binary regions.
fn warp_view(
    img: &Array2<f32>,
    masks: &[InstanceGt],
    angle: f64,
    scale: f64,
) -> (Array2<f32>, Vec<InstanceGt>) {
    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin_a, cos_a) = angle.sin_cos();
    // Inverse map: destination (i,j) pulls from source coordinates.
    let src_of = |i: usize, j: usize| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let sx = (dx * cos_a + dy * sin_a) / scale + cx;
        let sy = (-dx * sin_a + dy * cos_a) / scale + cy;
        (sx, sy)
    };
    let out_img = Array2::from_shape_fn((h, w), |(i, j)| {
        let (sx, sy) = src_of(i, j);
        if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
            0.02 // outside-breast background level
        } else {
            bilin_px(img, sx, sy)
        }
    });
    let out_masks = masks
        .iter()
        .map(|inst| {
            let mask = Array2::from_shape_fn((h, w), |(i, j)| {
                let (sx, sy) = src_of(i, j);
                let (si, sj) = (sy.round(), sx.round());
                si >= 0.0
                    && sj >= 0.0
                    && (si as usize) < h
                    && (sj as usize) < w
                    && inst.mask[(si as usize, sj as usize)]
            });
            InstanceGt { mask, malignant: inst.malignant }
        })
        .collect();
    (out_img, out_masks)
}

fn brightness_contrast(img: &Array2<f32>, gain: f64, bias: f64) -> Array2<f32> {
    img.mapv(|v| (((v as f64 - 0.5) * gain + 0.5 + bias) as f32).clamp(0.0, 1.0))
}

/// Training augmentation per the configured flags: shared horizontal flip,
/// per-view small rotation, shared random scale, shared brightness/contrast.
/// Labels, pairing, and mask/image alignment are preserved; with all flags
/// off this is the identity.
pub fn augment(
    pair: &ImagePair,
    ann: &CaseAnnotation,
    rng: &mut ChaCha8Rng,
    flags: &AugmentFlags,
) -> (ImagePair, CaseAnnotation) {
    let (mut pair, mut ann) = (pair.clone(), ann.clone());
    if flags.flip && rng.random::<bool>() {
        let flipped = flip_horizontal(&pair, &ann);
        pair = flipped.0;
        ann = flipped.1;
    }
    let scale = if flags.random_scale { rng.random_range(0.9..1.1) } else { 1.0 };
    let max_rot = 10f64.to_radians();
    let angles: [f64; 2] = if flags.rotation {
        [rng.random_range(-max_rot..max_rot), rng.random_range(-max_rot..max_rot)]
    } else {
        [0.0, 0.0]
    };
    if flags.rotation || flags.random_scale {
        let (cc_img, cc_insts) = warp_view(pair.cc(), ann.instances(View::Cc), angles[0], scale);
        let (mlo_img, mlo_insts) = warp_view(pair.mlo(), ann.instances(View::Mlo), angles[1], scale);
        pair = ImagePair::new(cc_img, mlo_img, pair.case_id.clone(), pair.laterality)
            .expect("warp preserves shape");
        // An instance rotated/scaled entirely out of frame has no remaining
        // ground truth; drop it (and any pair link through it) rather than
        // supervise against an empty mask.
        let keep = |insts: Vec<InstanceGt>| -> (Vec<InstanceGt>, Vec<Option<usize>>) {
            let mut kept = Vec::new();
            let mut remap = Vec::with_capacity(insts.len());
            for inst in insts {
                if inst.mask.iter().any(|&b| b) {
                    remap.push(Some(kept.len()));
                    kept.push(inst);
                } else {
                    remap.push(None);
                }
            }
            (kept, remap)
        };
        let (cc_insts, cc_remap) = keep(cc_insts);
        let (mlo_insts, mlo_remap) = keep(mlo_insts);
        let pair_map = ann
            .pair_map()
            .iter()
            .filter_map(|&(ci, mi)| Some((cc_remap[ci]?, mlo_remap[mi]?)))
            .collect();
        ann = CaseAnnotation::new(cc_insts, mlo_insts, pair_map)
            .expect("warp preserves structure");
    }
    if flags.brightness_contrast {
        let gain = rng.random_range(0.9..1.1);
        let bias = rng.random_range(-0.05..0.05);
        pair = ImagePair::new(
            brightness_contrast(pair.cc(), gain, bias),
            brightness_contrast(pair.mlo(), gain, bias),
            pair.case_id.clone(),
            pair.laterality,
        )
        .expect("photometric op preserves shape");
    }
    (pair, ann)
}
