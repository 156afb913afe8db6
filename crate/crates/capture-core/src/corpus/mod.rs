//! Procedural product corpus: fine-grained categories rendered as glyph
//! patches, single-product gallery samples, multi-product query samples
//! composed by copy-and-paste, and captions with controllable noise.

pub mod catalog;
pub mod compositor;
pub mod dataset;
pub mod store;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use catalog::{generate_catalog, Catalog, CategoryPrototype, Glyph, Vocab};
pub use compositor::{compose_sample, ComposedSample};
pub use dataset::{build_dataset, DatasetBundle};

/// The zero-shot holdout: a seeded choice of query-reachable categories that
/// the train split never sees. Empty unless `holdout_fraction` is set.
pub fn holdout_set(config: &CorpusConfig) -> Vec<u32> {
    let Some(frac) = config.holdout_fraction else {
        return Vec::new();
    };
    use rand::Rng;
    let reachable = config.num_categories - config.num_distractors();
    let count = (frac * reachable as f64).floor() as usize;
    let mut pool: Vec<u32> = (0..reachable as u32).collect();
    let mut rng = crate::rng::rng_for(config.seed, "holdout", 0);
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    let mut held = pool[..count].to_vec();
    held.sort_unstable();
    held
}

/// Axis-aligned box in normalized [0,1] image coordinates. Serializes as
/// the 4-array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(d)?;
        Ok(BBox::from_array(a))
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn whole_image() -> Self {
        BBox::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clip into [0,1]².
    pub fn clipped(&self) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// One ground-truth pasted product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub category: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Gallery,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Gallery => "gallery",
        };
        f.write_str(s)
    }
}

/// An image-caption pair. Category and instance annotations exist only on
/// evaluation splits; train samples never carry them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub caption: Vec<u32>,
    pub category: Option<u32>,
    pub instances: Option<Vec<Instance>>,
    /// Record index into the image store.
    pub image_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionNoise {
    /// Replace all product mentions with a single "K-piece set" count token.
    pub abbreviation_prob: f64,
    /// Inject name tokens of a category absent from the image.
    pub irrelevant_token_prob: f64,
    /// Drop one product's mention from the caption.
    pub drop_product_mention_prob: f64,
}

impl CaptionNoise {
    pub fn none() -> Self {
        CaptionNoise {
            abbreviation_prob: 0.0,
            irrelevant_token_prob: 0.0,
            drop_product_mention_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub gallery: usize,
}

fn default_confusable_fraction() -> f64 {
    0.5
}

fn default_background_texture() -> f64 {
    0.08
}

fn default_train_single_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_categories: usize,
    pub num_brands: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// (min, max) instances per multi-product sample.
    pub instances_per_multi: (usize, usize),
    pub caption_noise: CaptionNoise,
    pub split_sizes: SplitSizes,
    /// Fraction of categories that exist only in the gallery.
    pub distractor_category_fraction: f64,
    pub seed: u64,
    /// Fraction of categories paired into near-duplicates that share glyph
    /// shape and differ in one name token plus a small color shift.
    #[serde(default = "default_confusable_fraction")]
    pub confusable_fraction: f64,
    /// Background texture amplitude; 0 gives a plain background.
    #[serde(default = "default_background_texture")]
    pub background_texture: f64,
    /// Fraction of train samples that are single-product.
    #[serde(default = "default_train_single_fraction")]
    pub train_single_fraction: f64,
    /// Long-tail category sampling; `Some(s)` draws categories from a Zipf
    /// distribution with this exponent, `None` samples uniformly.
    #[serde(default)]
    pub zipf_exponent: Option<f64>,
    /// Zero-shot arm: this fraction of query-reachable categories is held
    /// out of the train split, and val/test queries use only held-out
    /// categories.
    #[serde(default)]
    pub holdout_fraction: Option<f64>,
}

impl CorpusConfig {
    /// Desk-scale defaults: 20 categories, ~2000 train samples, paper-like
    /// split proportions (train >> gallery >> test > val).
    pub fn toy(seed: u64) -> Self {
        CorpusConfig {
            num_categories: 20,
            num_brands: 5,
            image_size: 64,
            instances_per_multi: (2, 4),
            caption_noise: CaptionNoise {
                abbreviation_prob: 0.3,
                irrelevant_token_prob: 0.2,
                drop_product_mention_prob: 0.2,
            },
            split_sizes: SplitSizes {
                train: 2000,
                val: 24,
                test: 48,
                gallery: 160,
            },
            distractor_category_fraction: 0.15,
            seed,
            confusable_fraction: default_confusable_fraction(),
            background_texture: default_background_texture(),
            train_single_fraction: default_train_single_fraction(),
            zipf_exponent: None,
            holdout_fraction: None,
        }
    }

    pub fn num_distractors(&self) -> usize {
        (self.distractor_category_fraction * self.num_categories as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return Err(CoreError::Config("need at least 2 categories".into()));
        }
        if self.num_brands < 1 {
            return Err(CoreError::Config("need at least 1 brand".into()));
        }
        if self.image_size < 16 {
            return Err(CoreError::Config("image_size must be >= 16".into()));
        }
        let (lo, hi) = self.instances_per_multi;
        if lo < 1 || lo > hi {
            return Err(CoreError::Config(
                "instances_per_multi must satisfy 1 <= min <= max".into(),
            ));
        }
        for (name, p) in [
            ("abbreviation_prob", self.caption_noise.abbreviation_prob),
            (
                "irrelevant_token_prob",
                self.caption_noise.irrelevant_token_prob,
            ),
            (
                "drop_product_mention_prob",
                self.caption_noise.drop_product_mention_prob,
            ),
            ("confusable_fraction", self.confusable_fraction),
            ("train_single_fraction", self.train_single_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} must be in [0,1]")));
            }
        }
        if !(0.0..1.0).contains(&self.distractor_category_fraction) {
            return Err(CoreError::Config(
                "distractor_category_fraction must be in [0,1)".into(),
            ));
        }
        if self.background_texture < 0.0 {
            return Err(CoreError::Config("background_texture must be >= 0".into()));
        }
        if let Some(z) = self.zipf_exponent {
            if z <= 0.0 {
                return Err(CoreError::Config("zipf_exponent must be positive".into()));
            }
        }
        let s = &self.split_sizes;
        if s.train == 0 || s.val == 0 || s.test == 0 || s.gallery == 0 {
            return Err(CoreError::Config("all split sizes must be positive".into()));
        }
        if s.gallery < self.num_categories {
            return Err(CoreError::Config(format!(
                "gallery size {} cannot cover {} categories",
                s.gallery, self.num_categories
            )));
        }
        let reachable = self.num_categories - self.num_distractors();
        let query_pool = match self.holdout_fraction {
            Some(f) => {
                if !(0.0..1.0).contains(&f) {
                    return Err(CoreError::Config("holdout_fraction must be in [0,1)".into()));
                }
                let held = (f * reachable as f64).floor() as usize;
                if held == 0 {
                    return Err(CoreError::Config(
                        "holdout_fraction keeps no category".into(),
                    ));
                }
                held
            }
            None => reachable,
        };
        if query_pool < hi {
            return Err(CoreError::Config(format!(
                "query category pool {query_pool} smaller than max instances {hi}"
            )));
        }
        if self.holdout_fraction.is_some() {
            let reachable_after =
                self.num_categories - self.num_distractors() - query_pool;
            if reachable_after == 0 {
                return Err(CoreError::Config(
                    "holdout removes every trainable query category".into(),
                ));
            }
        }
        Ok(())
    }
}
