//! Copy-and-paste image composition and caption synthesis.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::catalog::{Catalog, GLYPH_SIZE, NUM_FILLERS};
use super::{BBox, CaptionNoise, CorpusConfig, Instance};
use crate::error::{CoreError, Result};
use crate::rng::rng_for;

/// Pairwise overlap cap between pasted instances.
pub const OVERLAP_CAP: f64 = 0.3;
/// Placement attempts per instance before giving up.
pub const PLACEMENT_RETRIES: usize = 50;
/// Pasted glyph side as a fraction of the image side.
const SCALE_RANGE: (f64, f64) = (0.16, 0.34);
/// Hard cap on caption length before the model-side [CLS].
const CAPTION_MAX: usize = 35;

#[derive(Debug, Clone)]
pub struct ComposedSample {
    pub image: Array3<f32>,
    pub instances: Vec<Instance>,
    pub caption: Vec<u32>,
}

/// Paste one glyph per category id onto a textured background, then build
/// the caption and perturb it with the configured noise.
pub fn compose_sample(
    catalog: &Catalog,
    category_ids: &[u32],
    background_seed: u64,
    config: &CorpusConfig,
) -> Result<ComposedSample> {
    if category_ids.is_empty() {
        return Err(CoreError::Config("compose_sample needs >= 1 category".into()));
    }
    if category_ids.len() > config.instances_per_multi.1.max(1) {
        return Err(CoreError::Config(format!(
            "{} instances exceed the configured maximum {}",
            category_ids.len(),
            config.instances_per_multi.1
        )));
    }
    for &c in category_ids {
        if c as usize >= catalog.len() {
            return Err(CoreError::Config(format!("category {c} not in catalog")));
        }
    }

    let mut rng = rng_for(config.seed, "sample", background_seed);
    let mut image = render_background(&mut rng, config);
    let mut placed: Vec<BBox> = Vec::with_capacity(category_ids.len());
    let mut instances = Vec::with_capacity(category_ids.len());

    for &cat in category_ids {
        let bbox = place_box(&mut rng, &placed)?;
        paste_glyph(&mut image, catalog, cat, &bbox, &mut rng);
        placed.push(bbox);
        instances.push(Instance {
            category: cat,
            bbox,
        });
    }

    let holdout = super::holdout_set(config);
    let caption = build_caption(catalog, category_ids, &config.caption_noise, &holdout, &mut rng);
    Ok(ComposedSample {
        image,
        instances,
        caption,
    })
}

fn render_background(rng: &mut ChaCha8Rng, config: &CorpusConfig) -> Array3<f32> {
    let n = config.image_size;
    let amp = config.background_texture;
    // Light base color so glyphs stay high-contrast.
    let base = [
        0.72 + rng.random::<f64>() * 0.2,
        0.72 + rng.random::<f64>() * 0.2,
        0.72 + rng.random::<f64>() * 0.2,
    ];
    let fx = 1.0 + rng.random::<f64>() * 3.0;
    let fy = 1.0 + rng.random::<f64>() * 3.0;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let mut image = Array3::zeros((n, n, 3));
    for r in 0..n {
        for c in 0..n {
            let y = r as f64 / n as f64;
            let x = c as f64 / n as f64;
            let wave = (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin();
            let noise = rng.random::<f64>() - 0.5;
            for ch in 0..3 {
                let v = base[ch] + amp * (0.6 * wave + 0.8 * noise);
                image[[r, c, ch]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    image
}

fn place_box(rng: &mut ChaCha8Rng, placed: &[BBox]) -> Result<BBox> {
    // Prefer placements with a clear margin between products; relax to the
    // overlap cap only once the early attempts fail in a crowded frame.
    const MARGIN: f64 = 0.04;
    for attempt in 0..PLACEMENT_RETRIES {
        let separated_phase = attempt < PLACEMENT_RETRIES * 3 / 5;
        let side = SCALE_RANGE.0 + rng.random::<f64>() * (SCALE_RANGE.1 - SCALE_RANGE.0);
        let x = rng.random::<f64>() * (1.0 - side);
        let y = rng.random::<f64>() * (1.0 - side);
        let candidate = BBox::new(x, y, x + side, y + side);
        let ok = if separated_phase {
            let grown = BBox::new(x - MARGIN, y - MARGIN, x + side + MARGIN, y + side + MARGIN);
            placed.iter().all(|b| b.iou(&grown) == 0.0)
        } else {
            placed.iter().all(|b| b.iou(&candidate) <= OVERLAP_CAP)
        };
        if ok {
            return Ok(candidate);
        }
    }
    Err(CoreError::Placement(format!(
        "no placement under IoU cap {OVERLAP_CAP} after {PLACEMENT_RETRIES} retries \
         ({} already placed)",
        placed.len()
    )))
}

fn paste_glyph(
    image: &mut Array3<f32>,
    catalog: &Catalog,
    category: u32,
    bbox: &BBox,
    rng: &mut ChaCha8Rng,
) {
    let glyph = &catalog.prototype(category).glyph;
    let n = image.dim().0;
    let brightness = 0.92 + rng.random::<f64>() * 0.16;
    let r0 = (bbox.y1 * n as f64).floor().max(0.0) as usize;
    let r1 = ((bbox.y2 * n as f64).ceil() as usize).min(n);
    let c0 = (bbox.x1 * n as f64).floor().max(0.0) as usize;
    let c1 = ((bbox.x2 * n as f64).ceil() as usize).min(n);
    let g = GLYPH_SIZE as f64;
    for r in r0..r1 {
        for c in c0..c1 {
            // Pixel center mapped into glyph coordinates.
            let py = (r as f64 + 0.5) / n as f64;
            let px = (c as f64 + 0.5) / n as f64;
            let gy = (py - bbox.y1) / (bbox.y2 - bbox.y1) * g - 0.5;
            let gx = (px - bbox.x1) / (bbox.x2 - bbox.x1) * g - 0.5;
            if gy < -0.5 || gx < -0.5 || gy > g - 0.5 || gx > g - 0.5 {
                continue;
            }
            let (alpha, color) = sample_glyph(glyph, gy, gx);
            if alpha <= 0.0 {
                continue;
            }
            for ch in 0..3 {
                let src = (color[ch] * brightness).clamp(0.0, 1.0);
                let dst = f64::from(image[[r, c, ch]]);
                image[[r, c, ch]] = (alpha * src + (1.0 - alpha) * dst) as f32;
            }
        }
    }
}

fn sample_glyph(glyph: &Glyph, gy: f64, gx: f64) -> (f64, [f64; 3]) {
    let g = GLYPH_SIZE as isize;
    let y0 = gy.floor() as isize;
    let x0 = gx.floor() as isize;
    let wy = gy - y0 as f64;
    let wx = gx - x0 as f64;
    let mut alpha = 0.0;
    let mut color = [0.0; 3];
    for (dy, wy_) in [(0isize, 1.0 - wy), (1, wy)] {
        for (dx, wx_) in [(0isize, 1.0 - wx), (1, wx)] {
            let y = (y0 + dy).clamp(0, g - 1) as usize;
            let x = (x0 + dx).clamp(0, g - 1) as usize;
            let w = wy_ * wx_;
            alpha += w * glyph.mask[[y, x]];
            for ch in 0..3 {
                color[ch] += w * glyph.mask[[y, x]] * glyph.pixels[[y, x, ch]];
            }
        }
    }
    if alpha > 1e-9 {
        for ch in color.iter_mut() {
            *ch /= alpha;
        }
    }
    (alpha, color)
}

use super::catalog::Glyph;

/// Caption grammar: brand tokens, then per-product name-token groups in a
/// shuffled order, then a few fillers. The abbreviation noise collapses all
/// product mentions into a single "K-piece set" token; irrelevant noise
/// injects an absent category's mention; drop noise removes mentions.
fn build_caption(
    catalog: &Catalog,
    category_ids: &[u32],
    noise: &CaptionNoise,
    holdout: &[u32],
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let vocab = &catalog.vocab;
    let mut brands: Vec<u32> = Vec::new();
    for &c in category_ids {
        let b = vocab.brand_token(catalog.prototype(c).brand_id);
        if !brands.contains(&b) {
            brands.push(b);
        }
    }

    let mut groups: Vec<Vec<u32>> = category_ids
        .iter()
        .map(|&c| catalog.prototype(c).name_tokens.clone())
        .collect();
    // Portfolio order is arbitrary on real listings; shuffle the mentions.
    for i in (1..groups.len()).rev() {
        let j = rng.random_range(0..=i);
        groups.swap(i, j);
    }

    let abbreviate = rng.random::<f64>() < noise.abbreviation_prob;
    let mut body: Vec<u32> = Vec::new();
    if abbreviate {
        body.push(vocab.count_token(category_ids.len()));
    } else {
        for group in &groups {
            if rng.random::<f64>() < noise.drop_product_mention_prob {
                continue;
            }
            body.extend_from_slice(group);
        }
    }

    if rng.random::<f64>() < noise.irrelevant_token_prob {
        // Mention a product that is not in the image. Held-out categories
        // are excluded so zero-shot train captions never leak them.
        let absent: Vec<u32> = (0..catalog.len() as u32)
            .filter(|c| !category_ids.contains(c) && !holdout.contains(c))
            .collect();
        if !absent.is_empty() {
            let pick = absent[rng.random_range(0..absent.len())];
            body.extend_from_slice(&catalog.prototype(pick).name_tokens);
        }
    }

    let mut caption = brands;
    caption.extend(body);
    let fillers = rng.random_range(0..=2usize);
    for _ in 0..fillers {
        caption.push(vocab.filler_token(rng.random_range(0..NUM_FILLERS)));
    }
    caption.truncate(CAPTION_MAX);
    caption
}

#[cfg(test)]
mod tests {
    use super::super::catalog::generate_catalog;
    use super::*;

    fn cfg() -> CorpusConfig {
        let mut c = CorpusConfig::toy(11);
        c.caption_noise = CaptionNoise::none();
        c
    }

    #[test]
    fn single_category_sample() {
        let config = cfg();
        let catalog = generate_catalog(&config).unwrap();
        let s = compose_sample(&catalog, &[3], 42, &config).unwrap();
        assert_eq!(s.instances.len(), 1);
        assert_eq!(s.instances[0].category, 3);
        assert!(s.instances[0].bbox.is_valid());
        // Noise off: the caption carries the category's name tokens.
        for t in &catalog.prototype(3).name_tokens {
            assert!(s.caption.contains(t));
        }
    }

    #[test]
    fn four_instances_all_in_bounds() {
        let config = cfg();
        let catalog = generate_catalog(&config).unwrap();
        let s = compose_sample(&catalog, &[0, 5, 9, 12], 7, &config).unwrap();
        assert_eq!(s.instances.len(), 4);
        for inst in &s.instances {
            assert!(inst.bbox.is_valid());
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!(s.instances[i].bbox.iou(&s.instances[j].bbox) <= OVERLAP_CAP + 1e-12);
            }
        }
    }

    #[test]
    fn abbreviation_replaces_mentions_with_count_token() {
        let mut config = cfg();
        config.instances_per_multi = (2, 8);
        config.caption_noise.abbreviation_prob = 1.0;
        let catalog = generate_catalog(&config).unwrap();
        let cats: Vec<u32> = (0..8).collect();
        let s = compose_sample(&catalog, &cats, 3, &config).unwrap();
        assert!(s.caption.contains(&catalog.vocab.count_token(8)));
        for &c in &cats {
            for t in &catalog.prototype(c).name_tokens {
                assert!(
                    !s.caption.contains(t),
                    "abbreviated caption must not name products"
                );
            }
        }
    }

    #[test]
    fn determinism_per_background_seed() {
        let config = cfg();
        let catalog = generate_catalog(&config).unwrap();
        let a = compose_sample(&catalog, &[1, 2], 9, &config).unwrap();
        let b = compose_sample(&catalog, &[1, 2], 9, &config).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.caption, b.caption);
        let c = compose_sample(&catalog, &[1, 2], 10, &config).unwrap();
        assert!(a.image != c.image);
    }

    #[test]
    fn too_many_instances_rejected() {
        let config = cfg();
        let catalog = generate_catalog(&config).unwrap();
        let cats: Vec<u32> = (0..5).collect(); // max is 4
        assert!(compose_sample(&catalog, &cats, 0, &config).is_err());
    }
}
