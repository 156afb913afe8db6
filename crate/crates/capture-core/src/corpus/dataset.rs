//! Split construction: unlabeled train mix, annotated multi-product val and
//! test queries, and the single-product labeled gallery with distractor
//! categories.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::catalog::{generate_catalog, Catalog, Vocab};
use super::compositor::compose_sample;
use super::store;
use super::{CorpusConfig, Sample, Split};
use crate::error::{CoreError, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub samples: Vec<Sample>,
    pub images: Vec<Array3<f32>>,
    pub vocab: Vocab,
    /// Categories only reachable through the gallery (never queried).
    pub distractor_categories: Vec<u32>,
    /// Categories excluded from train and reserved for zero-shot queries.
    pub holdout_categories: Vec<u32>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn image(&self, sample: &Sample) -> &Array3<f32> {
        &self.images[sample.image_offset as usize]
    }

    /// Write manifest, image store, vocabulary and split metadata under
    /// `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        store::write_manifest(&dir.join("manifest.jsonl"), &self.samples)?;
        store::write_images(&dir.join("images.bin"), &self.images)?;
        store::write_vocab(&dir.join("vocab.json"), &self.vocab)?;
        let meta = serde_json::json!({
            "distractor_categories": self.distractor_categories,
            "holdout_categories": self.holdout_categories,
        });
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Load a bundle previously written with [`DatasetBundle::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let samples = store::read_manifest(&dir.join("manifest.jsonl"))?;
        let images = store::read_images(&dir.join("images.bin"))?;
        let vocab = store::read_vocab(&dir.join("vocab.json"))?;
        for s in &samples {
            if s.image_offset as usize >= images.len() {
                return Err(CoreError::Format(format!(
                    "sample {} points past the image store",
                    s.id
                )));
            }
        }
        let (distractors, holdout) = match std::fs::read_to_string(dir.join("meta.json")) {
            Ok(text) => {
                let v: serde_json::Value = serde_json::from_str(&text)?;
                let parse = |key: &str| -> Vec<u32> {
                    v.get(key)
                        .and_then(|x| x.as_array())
                        .map(|a| a.iter().filter_map(|e| e.as_u64().map(|u| u as u32)).collect())
                        .unwrap_or_default()
                };
                (parse("distractor_categories"), parse("holdout_categories"))
            }
            Err(_) => (Vec::new(), Vec::new()),
        };
        Ok(DatasetBundle {
            samples,
            images,
            vocab,
            distractor_categories: distractors,
            holdout_categories: holdout,
        })
    }
}

/// Draw `k` distinct categories from `pool`, optionally Zipf-weighted.
fn draw_categories(
    pool: &[u32],
    k: usize,
    weights: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    debug_assert!(k <= pool.len());
    let mut chosen: Vec<u32> = Vec::with_capacity(k);
    while chosen.len() < k {
        let cat = match weights {
            None => pool[rng.random_range(0..pool.len())],
            Some(w) => {
                let total: f64 = w.iter().sum();
                let mut target = rng.random::<f64>() * total;
                let mut pick = pool[pool.len() - 1];
                for (i, &cat) in pool.iter().enumerate() {
                    target -= w[i];
                    if target <= 0.0 {
                        pick = cat;
                        break;
                    }
                }
                pick
            }
        };
        if !chosen.contains(&cat) {
            chosen.push(cat);
        }
    }
    chosen
}

fn zipf_weights(pool: &[u32], exponent: f64, seed: u64) -> Vec<f64> {
    // Rank assignment is a seeded permutation of the pool.
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = rng_for(seed, "zipf-ranks", 0);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut weights = vec![0.0; pool.len()];
    for (rank, &idx) in order.iter().enumerate() {
        weights[idx] = 1.0 / ((rank + 1) as f64).powf(exponent);
    }
    weights
}

/// Generate the four splits. Sample content depends only on
/// `(config, sample id)`, so regeneration is bit-identical.
pub fn build_dataset(config: &CorpusConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let catalog: Catalog = generate_catalog(config)?;
    let total_categories = config.num_categories as u32;

    let num_distractors = config.num_distractors();
    let distractors: Vec<u32> =
        (total_categories - num_distractors as u32..total_categories).collect();
    let reachable: Vec<u32> = (0..total_categories - num_distractors as u32).collect();

    // Zero-shot holdout: train never sees these categories and queries are
    // restricted to them.
    let holdout = super::holdout_set(config);

    let train_pool: Vec<u32> = (0..total_categories)
        .filter(|c| !holdout.contains(c))
        .collect();
    let query_pool: Vec<u32> = if holdout.is_empty() {
        reachable.clone()
    } else {
        holdout.clone()
    };

    let train_weights = config
        .zipf_exponent
        .map(|z| zipf_weights(&train_pool, z, config.seed));

    let sizes = config.split_sizes;
    let mut samples = Vec::with_capacity(sizes.train + sizes.val + sizes.test + sizes.gallery);
    let mut images = Vec::with_capacity(samples.capacity());
    let mut next_id: u64 = 0;

    let push = |samples: &mut Vec<Sample>,
                    images: &mut Vec<Array3<f32>>,
                    id: u64,
                    split: Split,
                    cats: &[u32],
                    labeled: bool|
     -> Result<()> {
        let composed = compose_with_retry(&catalog, cats, id, config)?;
        let (category, instances) = if labeled {
            let category = if cats.len() == 1 { Some(cats[0]) } else { None };
            (category, Some(composed.instances))
        } else {
            (None, None)
        };
        samples.push(Sample {
            id,
            split,
            caption: composed.caption,
            category,
            instances,
            image_offset: images.len() as u64,
        });
        images.push(composed.image);
        Ok(())
    };

    let (lo, hi) = config.instances_per_multi;

    // Train: unlabeled mix of single- and multi-product samples.
    for _ in 0..sizes.train {
        let id = next_id;
        next_id += 1;
        let mut rng = rng_for(config.seed, "train-draw", id);
        let cats = if rng.random::<f64>() < config.train_single_fraction {
            draw_categories(&train_pool, 1, train_weights.as_deref(), &mut rng)
        } else {
            let k = rng.random_range(lo..=hi).min(train_pool.len());
            draw_categories(&train_pool, k, train_weights.as_deref(), &mut rng)
        };
        push(&mut samples, &mut images, id, Split::Train, &cats, false)?;
    }

    // Val and test: annotated multi-product queries over the query pool.
    for (split, count) in [(Split::Val, sizes.val), (Split::Test, sizes.test)] {
        for _ in 0..count {
            let id = next_id;
            next_id += 1;
            let mut rng = rng_for(config.seed, "query-draw", id);
            let k = rng.random_range(lo.max(2)..=hi).min(query_pool.len());
            let cats = draw_categories(&query_pool, k, None, &mut rng);
            push(&mut samples, &mut images, id, split, &cats, true)?;
        }
    }

    // Gallery: labeled single-product coverage of every category, round
    // robin so each category gets sizes.gallery / C (±1) entries.
    for g in 0..sizes.gallery {
        let id = next_id;
        next_id += 1;
        let cat = (g as u32) % total_categories;
        push(&mut samples, &mut images, id, Split::Gallery, &[cat], true)?;
    }

    Ok(DatasetBundle {
        samples,
        images,
        vocab: catalog.vocab,
        distractor_categories: distractors,
        holdout_categories: holdout,
    })
}

/// Placement can fail under unlucky draws; re-derive the sample stream a
/// bounded number of times before giving up. The retry count is part of the
/// sample identity, so results stay deterministic.
fn compose_with_retry(
    catalog: &Catalog,
    cats: &[u32],
    id: u64,
    config: &CorpusConfig,
) -> Result<super::compositor::ComposedSample> {
    let mut last_err = None;
    for attempt in 0..5u64 {
        match compose_sample(catalog, cats, id ^ (attempt << 48), config) {
            Ok(s) => return Ok(s),
            Err(e @ CoreError::Placement(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        let mut c = CorpusConfig::toy(5);
        c.split_sizes = super::super::SplitSizes {
            train: 30,
            val: 6,
            test: 10,
            gallery: 40,
        };
        c
    }

    #[test]
    fn distractor_arithmetic_matches_config() {
        let c = small_cfg();
        // 20 categories at fraction 0.15 -> 3 gallery-only distractors,
        // 17 query-reachable categories.
        assert_eq!(c.num_distractors(), 3);
        let bundle = build_dataset(&c).unwrap();
        assert_eq!(bundle.distractor_categories, vec![17, 18, 19]);
        let mut queried: Vec<u32> = Vec::new();
        for s in bundle.samples.iter().filter(|s| matches!(s.split, Split::Val | Split::Test)) {
            for inst in s.instances.as_ref().unwrap() {
                queried.push(inst.category);
            }
        }
        for d in &bundle.distractor_categories {
            assert!(!queried.contains(d), "distractor {d} appeared in a query");
        }
    }

    #[test]
    fn gallery_samples_are_single_product_and_labeled() {
        let bundle = build_dataset(&small_cfg()).unwrap();
        let mut covered = std::collections::BTreeSet::new();
        for s in bundle.split(Split::Gallery) {
            assert!(s.category.is_some());
            let insts = s.instances.as_ref().unwrap();
            assert_eq!(insts.len(), 1);
            assert_eq!(Some(insts[0].category), s.category);
            covered.insert(insts[0].category);
        }
        assert_eq!(covered.len(), 20, "gallery covers every category");
    }

    #[test]
    fn train_samples_are_unlabeled() {
        let bundle = build_dataset(&small_cfg()).unwrap();
        let mut train = 0;
        for s in bundle.split(Split::Train) {
            assert!(s.category.is_none());
            assert!(s.instances.is_none());
            train += 1;
        }
        assert_eq!(train, 30);
    }

    #[test]
    fn splits_are_disjoint_by_id_and_sized() {
        let bundle = build_dataset(&small_cfg()).unwrap();
        let mut ids: Vec<u64> = bundle.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), bundle.samples.len());
        assert_eq!(bundle.split(Split::Val).count(), 6);
        assert_eq!(bundle.split(Split::Test).count(), 10);
        assert_eq!(bundle.split(Split::Gallery).count(), 40);
        assert_eq!(bundle.images.len(), bundle.samples.len());
    }

    #[test]
    fn multi_product_boxes_respect_overlap_cap() {
        let bundle = build_dataset(&small_cfg()).unwrap();
        for s in bundle.split(Split::Test) {
            let insts = s.instances.as_ref().unwrap();
            assert!(insts.len() >= 2);
            for i in 0..insts.len() {
                assert!(insts[i].bbox.is_valid());
                for j in (i + 1)..insts.len() {
                    assert!(insts[i].bbox.iou(&insts[j].bbox) <= 0.3 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn caption_names_every_instance_when_noise_off() {
        let mut c = small_cfg();
        c.caption_noise = super::super::CaptionNoise::none();
        let bundle = build_dataset(&c).unwrap();
        let catalog = generate_catalog(&c).unwrap();
        for s in bundle.samples.iter() {
            let Some(insts) = s.instances.as_ref() else {
                continue;
            };
            for inst in insts {
                for t in &catalog.prototype(inst.category).name_tokens {
                    assert!(
                        s.caption.contains(t),
                        "sample {}: missing token {t} for category {}",
                        s.id,
                        inst.category
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_bit_identical() {
        let c = small_cfg();
        let a = build_dataset(&c).unwrap();
        let b = build_dataset(&c).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(serde_json::to_string(x).unwrap(), serde_json::to_string(y).unwrap());
        }
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn holdout_categories_never_trained_and_always_queried() {
        let mut c = small_cfg();
        c.holdout_fraction = Some(0.25);
        // Disjoint name slices make token-level leak checking exact.
        c.confusable_fraction = 0.0;
        let bundle = build_dataset(&c).unwrap();
        assert!(!bundle.holdout_categories.is_empty());
        let catalog = generate_catalog(&c).unwrap();
        // Train captions cannot mention held-out categories, and every
        // query instance is held out.
        for s in bundle.split(Split::Train) {
            for &h in &bundle.holdout_categories {
                for t in &catalog.prototype(h).name_tokens {
                    assert!(!s.caption.contains(t));
                }
            }
        }
        for s in bundle.samples.iter().filter(|s| matches!(s.split, Split::Val | Split::Test)) {
            for inst in s.instances.as_ref().unwrap() {
                assert!(bundle.holdout_categories.contains(&inst.category));
            }
        }
    }

    #[test]
    fn zipf_option_biases_category_frequencies() {
        let mut c = small_cfg();
        c.split_sizes.train = 400;
        c.caption_noise = super::super::CaptionNoise::none();
        c.train_single_fraction = 1.0;
        c.zipf_exponent = Some(1.0);
        let bundle = build_dataset(&c).unwrap();
        let catalog = generate_catalog(&c).unwrap();
        let mut counts = vec![0usize; 20];
        for s in bundle.split(Split::Train) {
            // Single-product, noise off: the category is identifiable from
            // its name tokens.
            for proto in &catalog.prototypes {
                if proto.name_tokens.iter().all(|t| s.caption.contains(t)) {
                    counts[proto.category_id as usize] += 1;
                    break;
                }
            }
        }
        let mut sorted = counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        assert!(
            sorted[0] >= 3 * sorted[15].max(1),
            "zipf head should dominate the tail: {sorted:?}"
        );
    }

    #[test]
    fn oversided_splits_are_config_errors() {
        let mut c = small_cfg();
        c.split_sizes.gallery = 10; // cannot cover 20 categories
        assert!(matches!(
            build_dataset(&c),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn bundle_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_cfg();
        let bundle = build_dataset(&c).unwrap();
        bundle.write(dir.path()).unwrap();
        let loaded = DatasetBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), bundle.samples.len());
        assert_eq!(loaded.vocab.size(), bundle.vocab.size());
        assert_eq!(loaded.distractor_categories, bundle.distractor_categories);
        for (a, b) in bundle.samples.iter().zip(loaded.samples.iter()) {
            assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
        }
        for (a, b) in bundle.images.iter().zip(loaded.images.iter()) {
            assert_eq!(a, b);
        }
    }
}
