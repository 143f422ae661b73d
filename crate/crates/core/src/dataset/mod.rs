//! Dataset tooling: COCO-style annotation I/O, the procedural toy dataset,
//! offline augmentation, SADF pairing and preprocessing.

pub mod augment;
pub mod coco;
pub mod preprocess;
pub mod sadf;
pub mod toy;

use crate::error::{CoreError, Result};
use ndarray::{Array2, Array3};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    /// In-memory pixels when available; file-backed datasets load on demand.
    pub pixels: Option<Array3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// Full-size bitmap, {0,1}, dims equal to the owning image.
    pub mask: Array2<u8>,
    /// [x, y, w, h], the tight bound of the mask.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

/// COCO-style container: images, per-instance masks, categories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotatedDataset {
    pub images: BTreeMap<u64, DatasetImage>,
    pub annotations: BTreeMap<u64, Annotation>,
    pub categories: Vec<Category>,
}

/// Tight [x, y, w, h] bound of a bitmap; None when empty.
pub fn tight_bbox(mask: &Array2<u8>) -> Option<[f64; 4]> {
    let (h, w) = mask.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] != 0 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    Some([x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64])
}

impl AnnotatedDataset {
    pub fn new(categories: Vec<Category>) -> Self {
        AnnotatedDataset { images: BTreeMap::new(), annotations: BTreeMap::new(), categories }
    }

    pub fn add_image(&mut self, image: DatasetImage) -> Result<()> {
        if self.images.contains_key(&image.id) {
            return Err(CoreError::Validation(vec![format!("duplicate image id {}", image.id)]));
        }
        self.images.insert(image.id, image);
        Ok(())
    }

    /// Adds an annotation, deriving the bbox from the mask.
    pub fn add_annotation(&mut self, id: u64, image_id: u64, category_id: u32, mask: Array2<u8>) -> Result<()> {
        if self.annotations.contains_key(&id) {
            return Err(CoreError::Validation(vec![format!("duplicate annotation id {id}")]));
        }
        let bbox = tight_bbox(&mask)
            .ok_or_else(|| CoreError::Validation(vec![format!("annotation {id}: empty mask")]))?;
        self.annotations.insert(id, Annotation { id, image_id, category_id, mask, bbox });
        Ok(())
    }

    pub fn annotations_of(&self, image_id: u64) -> Vec<&Annotation> {
        self.annotations.values().filter(|a| a.image_id == image_id).collect()
    }

    pub fn category_name(&self, id: u32) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    /// Aggregated structural validation; every problem is reported with ids.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen_cat = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !seen_cat.insert(c.id) {
                problems.push(format!("duplicate category id {}", c.id));
            }
        }
        for ann in self.annotations.values() {
            match self.images.get(&ann.image_id) {
                None => problems.push(format!("annotation {}: dangling image_id {}", ann.id, ann.image_id)),
                Some(img) => {
                    if ann.mask.dim() != (img.height, img.width) {
                        problems.push(format!(
                            "annotation {}: mask {:?} does not fit image {}x{}",
                            ann.id,
                            ann.mask.dim(),
                            img.height,
                            img.width
                        ));
                    }
                }
            }
            if !seen_cat.contains(&ann.category_id) {
                problems.push(format!("annotation {}: unknown category {}", ann.id, ann.category_id));
            }
            match tight_bbox(&ann.mask) {
                None => problems.push(format!("annotation {}: empty mask", ann.id)),
                Some(tight) => {
                    if tight != ann.bbox {
                        problems.push(format!(
                            "annotation {}: bbox {:?} is not the tight bound {:?}",
                            ann.id, ann.bbox, tight
                        ));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(problems))
        }
    }

    /// Image ids in order.
    pub fn image_ids(&self) -> Vec<u64> {
        self.images.keys().copied().collect()
    }
}
