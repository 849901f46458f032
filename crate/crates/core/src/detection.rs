//! Prediction and annotation records shared by matching, evaluation and training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, NormBox};

/// A scored, class-labeled predicted box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub bbox: BBox,
    /// Per-category probabilities, when the detector exported them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<BTreeMap<u64, f64>>,
    /// Fields of the source record this crate does not interpret.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Detection {
    pub fn new(image_id: u64, category_id: u64, score: f64, bbox: BBox) -> Self {
        Self {
            image_id,
            category_id,
            score,
            bbox,
            class_probs: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_class_probs(mut self, probs: BTreeMap<u64, f64>) -> Self {
        self.class_probs = Some(probs);
        self
    }

    /// Probability assigned to `category`. Without a distribution, the scalar
    /// score stands in for the labeled class and every other class gets zero.
    pub fn prob_of(&self, category: u64) -> Option<f64> {
        match &self.class_probs {
            Some(p) => p.get(&category).copied(),
            None if category == self.category_id => Some(self.score),
            None => Some(0.0),
        }
    }

    /// Foreground confidence: the largest class probability, or the score.
    pub fn max_prob(&self) -> f64 {
        match &self.class_probs {
            Some(p) if !p.is_empty() => p.values().copied().fold(f64::NEG_INFINITY, f64::max),
            _ => self.score,
        }
    }
}

/// A ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    /// Annotation id.
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub area: f64,
    pub iscrowd: bool,
}

impl GtInstance {
    pub fn new(id: u64, image_id: u64, category_id: u64, bbox: BBox) -> Self {
        Self {
            id,
            image_id,
            category_id,
            area: bbox.area(),
            bbox,
            iscrowd: false,
        }
    }
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn normalize(&self, b: &BBox) -> NormBox {
        NormBox::from_bbox(b, self.width, self.height)
    }

    pub fn denormalize(&self, b: &NormBox) -> BBox {
        b.to_bbox(self.width, self.height)
    }
}

/// Groups record indices by image id, in ascending id order.
pub(crate) fn indices_by_image<T>(
    records: &[T],
    image_of: impl Fn(&T) -> u64,
) -> BTreeMap<u64, Vec<usize>> {
    let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        out.entry(image_of(r)).or_default().push(i);
    }
    out
}
