//! Domain types shared across the pipeline. Value objects are immutable after
//! construction and safe to share across threads.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Cc,
    Mlo,
}

impl View {
    pub fn both() -> [View; 2] {
        [View::Cc, View::Mlo]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            View::Cc => "cc",
            View::Mlo => "mlo",
        }
    }
}

/// One case: co-registered-by-laterality CC and MLO grayscale images in [0,1].
#[derive(Debug, Clone)]
pub struct ImagePair {
    cc: Array2<f32>,
    mlo: Array2<f32>,
    pub case_id: String,
    pub laterality: Laterality,
}

impl ImagePair {
    pub fn new(
        cc: Array2<f32>,
        mlo: Array2<f32>,
        case_id: String,
        laterality: Laterality,
    ) -> Result<ImagePair> {
        if cc.dim() != mlo.dim() {
            return Err(Error::Shape(format!(
                "case {case_id}: cc is {:?} but mlo is {:?}",
                cc.dim(),
                mlo.dim()
            )));
        }
        let (h, w) = cc.dim();
        if h % 32 != 0 || w % 32 != 0 {
            let bad = if h % 32 != 0 { ("height", h) } else { ("width", w) };
            return Err(Error::Shape(format!(
                "case {case_id}: {} {} not divisible by 32",
                bad.0, bad.1
            )));
        }
        Ok(ImagePair { cc, mlo, case_id, laterality })
    }

    pub fn view(&self, v: View) -> &Array2<f32> {
        match v {
            View::Cc => &self.cc,
            View::Mlo => &self.mlo,
        }
    }

    pub fn cc(&self) -> &Array2<f32> {
        &self.cc
    }

    pub fn mlo(&self) -> &Array2<f32> {
        &self.mlo
    }

    pub fn size(&self) -> (usize, usize) {
        self.cc.dim()
    }
}

/// Ground-truth instance: an exact binary mask plus the malignancy flag.
#[derive(Debug, Clone)]
pub struct InstanceGt {
    pub mask: Array2<bool>,
    pub malignant: bool,
}

impl InstanceGt {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Per-view ground truth with cross-view pairing. `pair_map` holds
/// (cc_instance_index, mlo_instance_index) pairs.
#[derive(Debug, Clone)]
pub struct CaseAnnotation {
    cc: Vec<InstanceGt>,
    mlo: Vec<InstanceGt>,
    pair_map: Vec<(usize, usize)>,
}

impl CaseAnnotation {
    pub fn new(
        cc: Vec<InstanceGt>,
        mlo: Vec<InstanceGt>,
        pair_map: Vec<(usize, usize)>,
    ) -> Result<CaseAnnotation> {
        let mut seen_cc = std::collections::HashSet::new();
        let mut seen_mlo = std::collections::HashSet::new();
        for &(ci, mi) in &pair_map {
            if ci >= cc.len() || mi >= mlo.len() {
                return Err(Error::Data(format!(
                    "pair ({ci}, {mi}) out of range: {} cc and {} mlo instances",
                    cc.len(),
                    mlo.len()
                )));
            }
            if !seen_cc.insert(ci) {
                return Err(Error::Data(format!("cc instance {ci} appears in more than one pair")));
            }
            if !seen_mlo.insert(mi) {
                return Err(Error::Data(format!("mlo instance {mi} appears in more than one pair")));
            }
        }
        Ok(CaseAnnotation { cc, mlo, pair_map })
    }

    pub fn empty() -> CaseAnnotation {
        CaseAnnotation { cc: vec![], mlo: vec![], pair_map: vec![] }
    }

    pub fn instances(&self, v: View) -> &[InstanceGt] {
        match v {
            View::Cc => &self.cc,
            View::Mlo => &self.mlo,
        }
    }

    pub fn pair_map(&self) -> &[(usize, usize)] {
        &self.pair_map
    }

    /// True if any instance in either view is malignant.
    pub fn any_malignant(&self) -> bool {
        self.cc.iter().chain(self.mlo.iter()).any(|i| i.malignant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn gt(h: usize, w: usize) -> InstanceGt {
        InstanceGt { mask: Array2::from_elem((h, w), false), malignant: false }
    }

    #[test]
    fn image_pair_rejects_mismatched_views() {
        let e = ImagePair::new(
            Array2::zeros((64, 64)),
            Array2::zeros((64, 32)),
            "c".into(),
            Laterality::Left,
        );
        assert!(matches!(e, Err(Error::Shape(_))));
    }

    #[test]
    fn image_pair_rejects_indivisible_size_naming_dimension() {
        let e = ImagePair::new(
            Array2::zeros((60, 64)),
            Array2::zeros((60, 64)),
            "c".into(),
            Laterality::Left,
        )
        .unwrap_err();
        assert!(e.to_string().contains("height 60"));
    }

    #[test]
    fn annotation_rejects_duplicate_pairs_and_bad_indices() {
        let cc = vec![gt(8, 8), gt(8, 8)];
        let mlo = vec![gt(8, 8), gt(8, 8)];
        assert!(CaseAnnotation::new(cc.clone(), mlo.clone(), vec![(0, 0), (0, 1)]).is_err());
        assert!(CaseAnnotation::new(cc.clone(), mlo.clone(), vec![(2, 0)]).is_err());
        assert!(CaseAnnotation::new(cc, mlo, vec![(0, 0), (1, 1)]).is_ok());
    }
}
