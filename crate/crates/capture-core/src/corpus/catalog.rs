//! Category catalog: per-category glyph patches, brand grouping, name-token
//! slices, confusable pairs, and the corpus vocabulary.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::Rng;

use super::CorpusConfig;
use crate::error::Result;
use crate::rng::rng_for;
use crate::tokens;

/// Rendered glyph resolution; pasted at arbitrary scales via bilinear
/// resampling.
pub const GLYPH_SIZE: usize = 16;

/// Width of each category's private name-token slice.
pub const NAME_SLICE: u32 = 4;

/// Shared filler-token pool size.
pub const NUM_FILLERS: u32 = 16;

/// Largest count the "K-piece set" abbreviation tokens cover.
pub const MAX_COUNT_TOKEN: u32 = 16;

#[derive(Debug, Clone)]
pub struct Glyph {
    /// GLYPH_SIZE × GLYPH_SIZE × 3 color pattern.
    pub pixels: Array3<f64>,
    /// Coverage in [0,1]; 0 means the background shows through.
    pub mask: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct CategoryPrototype {
    pub category_id: u32,
    pub brand_id: u32,
    pub glyph: Glyph,
    /// 2-4 ids drawn from this category's vocabulary slice.
    pub name_tokens: Vec<u32>,
    pub confusable_group: Option<u32>,
}

/// Token id layout: reserved ids, then brands, then per-category name
/// slices, then fillers, then "K-piece set" count tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    entries: BTreeMap<u32, String>,
    num_brands: u32,
    num_categories: u32,
}

impl Vocab {
    fn build(num_brands: u32, num_categories: u32) -> Self {
        let mut entries = BTreeMap::new();
        for id in 0..tokens::RESERVED {
            entries.insert(id, tokens::reserved_name(id).unwrap().to_string());
        }
        let mut next = tokens::RESERVED;
        for b in 0..num_brands {
            entries.insert(next, format!("brand{b}"));
            next += 1;
        }
        for c in 0..num_categories {
            for k in 0..NAME_SLICE {
                entries.insert(next, format!("c{c}t{k}"));
                next += 1;
            }
        }
        for f in 0..NUM_FILLERS {
            entries.insert(next, format!("filler{f}"));
            next += 1;
        }
        for k in 1..=MAX_COUNT_TOKEN {
            entries.insert(next, format!("{k}-piece-set"));
            next += 1;
        }
        Vocab {
            entries,
            num_brands,
            num_categories,
        }
    }

    pub fn from_entries(entries: BTreeMap<u32, String>) -> Self {
        Vocab {
            entries,
            num_brands: 0,
            num_categories: 0,
        }
    }

    pub fn entries(&self) -> &BTreeMap<u32, String> {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries
            .keys()
            .next_back()
            .map_or(0, |&max| max as usize + 1)
    }

    pub fn brand_token(&self, brand: u32) -> u32 {
        debug_assert!(brand < self.num_brands);
        tokens::RESERVED + brand
    }

    pub fn name_slice(&self, category: u32) -> std::ops::Range<u32> {
        debug_assert!(category < self.num_categories);
        let base = tokens::RESERVED + self.num_brands + category * NAME_SLICE;
        base..base + NAME_SLICE
    }

    pub fn filler_token(&self, k: u32) -> u32 {
        tokens::RESERVED + self.num_brands + self.num_categories * NAME_SLICE + (k % NUM_FILLERS)
    }

    /// Token for "k-piece set"; counts above the table max saturate.
    pub fn count_token(&self, k: usize) -> u32 {
        let k = (k as u32).clamp(1, MAX_COUNT_TOKEN);
        tokens::RESERVED
            + self.num_brands
            + self.num_categories * NAME_SLICE
            + NUM_FILLERS
            + (k - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub prototypes: Vec<CategoryPrototype>,
    pub vocab: Vocab,
}

impl Catalog {
    pub fn prototype(&self, category: u32) -> &CategoryPrototype {
        &self.prototypes[category as usize]
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }
}

const SHAPES: usize = 8;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether the shape covers the centered unit-square point (u, v). Shapes
/// nearly fill the glyph square so pasted ground-truth boxes track the
/// visible silhouette, and patterned fills keep gaps narrow enough for a
/// connected-component detector to see one blob.
fn shape_covers(shape: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match shape % SHAPES {
        0 => r2 <= 0.46 * 0.46,
        1 => (0.26..=0.46).contains(&r2.sqrt()),
        2 => u.abs().max(v.abs()) <= 0.45,
        3 => u.abs() + v.abs() <= 0.50,
        4 => (-0.45..=0.45).contains(&v) && u.abs() <= (0.45 - v) * 0.55,
        5 => (u.abs() <= 0.16 || v.abs() <= 0.16) && u.abs().max(v.abs()) <= 0.46,
        6 => u.abs() <= 0.45 && v.abs() <= 0.45 && ((v + 0.5) * 16.0).floor() as i64 % 4 != 3,
        _ => {
            u.abs() <= 0.46
                && v.abs() <= 0.46
                && (((u + 0.5) * 3.0).floor() + ((v + 0.5) * 3.0).floor()) as i64 % 2 == 0
        }
    }
}

fn render_glyph(shape: usize, hue: f64) -> Glyph {
    let primary = hsv_to_rgb(hue, 0.85, 0.9);
    let secondary = hsv_to_rgb(hue + 0.45, 0.7, 0.55);
    let n = GLYPH_SIZE;
    let mut pixels = Array3::zeros((n, n, 3));
    let mut mask = Array2::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            let u = (c as f64 + 0.5) / n as f64 - 0.5;
            let v = (r as f64 + 0.5) / n as f64 - 0.5;
            if shape_covers(shape, u, v) {
                mask[[r, c]] = 1.0;
                let color = if u * u + v * v <= 0.15 * 0.15 {
                    secondary
                } else {
                    primary
                };
                for ch in 0..3 {
                    pixels[[r, c, ch]] = color[ch];
                }
            }
        }
    }
    Glyph { pixels, mask }
}

fn category_hue(id: usize) -> f64 {
    (id as f64 * 0.618_033_988_749_895 + 0.07).fract()
}

/// Hue offset separating a confusable partner from its base category.
const CONFUSABLE_HUE_SHIFT: f64 = 0.045;

/// Deterministically generate the category catalog for a corpus config.
pub fn generate_catalog(config: &CorpusConfig) -> Result<Catalog> {
    config.validate()?;
    let vocab = Vocab::build(config.num_brands as u32, config.num_categories as u32);
    let mut rng = rng_for(config.seed, "catalog", 0);
    let num_pairs =
        ((config.confusable_fraction * config.num_categories as f64) / 2.0).floor() as usize;

    let mut prototypes: Vec<CategoryPrototype> = Vec::with_capacity(config.num_categories);
    for id in 0..config.num_categories {
        let cat = id as u32;
        let is_partner = id % 2 == 1 && id / 2 < num_pairs;
        let proto = if is_partner {
            let base = &prototypes[id - 1];
            let base_shape = (id - 1) % SHAPES;
            let glyph = render_glyph(base_shape, category_hue(id - 1) + CONFUSABLE_HUE_SHIFT);
            // Same name as the base, one position swapped for a token from
            // this category's own slice.
            let mut name_tokens = base.name_tokens.clone();
            let pos = rng.random_range(0..name_tokens.len());
            let own = vocab.name_slice(cat);
            name_tokens[pos] = own.start + rng.random_range(0..NAME_SLICE);
            CategoryPrototype {
                category_id: cat,
                brand_id: base.brand_id,
                glyph,
                name_tokens,
                confusable_group: Some((id / 2) as u32),
            }
        } else {
            let slice = vocab.name_slice(cat);
            let len = rng.random_range(2..=4usize);
            let mut pool: Vec<u32> = slice.collect();
            // Fisher-Yates prefix shuffle for the subset.
            for i in 0..len {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            let name_tokens = pool[..len].to_vec();
            let confusable_group = if id % 2 == 0 && id / 2 < num_pairs {
                Some((id / 2) as u32)
            } else {
                None
            };
            CategoryPrototype {
                category_id: cat,
                brand_id: rng.random_range(0..config.num_brands) as u32,
                glyph: render_glyph(id % SHAPES, category_hue(id)),
                name_tokens,
                confusable_group,
            }
        };
        prototypes.push(proto);
    }
    Ok(Catalog { prototypes, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CorpusConfig {
        CorpusConfig::toy(7)
    }

    #[test]
    fn catalog_is_deterministic() {
        let a = generate_catalog(&cfg()).unwrap();
        let b = generate_catalog(&cfg()).unwrap();
        assert_eq!(a.len(), 20);
        for (pa, pb) in a.prototypes.iter().zip(b.prototypes.iter()) {
            assert_eq!(pa.brand_id, pb.brand_id);
            assert_eq!(pa.name_tokens, pb.name_tokens);
            assert_eq!(pa.glyph.pixels, pb.glyph.pixels);
        }
    }

    #[test]
    fn two_categories_one_brand_share_the_brand_token() {
        let mut c = cfg();
        c.num_categories = 2;
        c.num_brands = 1;
        c.split_sizes.gallery = 4;
        c.instances_per_multi = (1, 2);
        c.confusable_fraction = 0.0;
        let cat = generate_catalog(&c).unwrap();
        assert_eq!(cat.prototypes[0].brand_id, cat.prototypes[1].brand_id);
        assert_eq!(cat.vocab.brand_token(0), tokens::RESERVED);
    }

    #[test]
    fn confusable_pairs_differ_in_color_and_one_token() {
        let cat = generate_catalog(&cfg()).unwrap();
        let pairs: Vec<_> = cat
            .prototypes
            .chunks(2)
            .filter(|p| p.len() == 2 && p[0].confusable_group.is_some())
            .collect();
        assert!(!pairs.is_empty());
        for pair in pairs {
            let (a, b) = (&pair[0], &pair[1]);
            assert_eq!(a.confusable_group, b.confusable_group);
            assert_eq!(a.brand_id, b.brand_id, "partners share the brand");
            // Same shape: identical coverage masks.
            assert_eq!(a.glyph.mask, b.glyph.mask);
            // Color shift: some covered pixel differs.
            assert!(a.glyph.pixels != b.glyph.pixels);
            // Name tokens differ in exactly one position.
            assert_eq!(a.name_tokens.len(), b.name_tokens.len());
            let diff = a
                .name_tokens
                .iter()
                .zip(b.name_tokens.iter())
                .filter(|(x, y)| x != y)
                .count();
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn non_confusable_glyphs_are_pairwise_distinguishable() {
        let cat = generate_catalog(&cfg()).unwrap();
        for i in 0..cat.len() {
            for j in (i + 1)..cat.len() {
                let (a, b) = (&cat.prototypes[i], &cat.prototypes[j]);
                if a.confusable_group.is_some() && a.confusable_group == b.confusable_group {
                    continue;
                }
                assert!(
                    a.glyph.mask != b.glyph.mask || a.glyph.pixels != b.glyph.pixels,
                    "categories {i} and {j} render identically"
                );
            }
        }
    }

    #[test]
    fn name_slices_disjoint_outside_confusable_pairs() {
        let cat = generate_catalog(&cfg()).unwrap();
        for i in 0..cat.len() {
            for j in (i + 1)..cat.len() {
                let (a, b) = (&cat.prototypes[i], &cat.prototypes[j]);
                if a.confusable_group.is_some() && a.confusable_group == b.confusable_group {
                    continue;
                }
                for t in &a.name_tokens {
                    assert!(!b.name_tokens.contains(t));
                }
            }
        }
    }

    #[test]
    fn vocab_layout_is_consistent() {
        let cat = generate_catalog(&cfg()).unwrap();
        let v = &cat.vocab;
        assert_eq!(v.entries()[&0], "[PAD]");
        assert_eq!(v.entries()[&4], "[IMG]");
        assert_eq!(v.entries()[&v.count_token(8)], "8-piece-set");
        assert_eq!(v.size(), v.entries().len());
        for proto in &cat.prototypes {
            assert!(!proto.name_tokens.is_empty());
            // A confusable partner keeps all but one token from its base
            // category's slice; everyone else stays inside their own slice.
            let own = v.name_slice(proto.category_id);
            let base = proto
                .confusable_group
                .map(|g| v.name_slice(2 * g))
                .unwrap_or(own.clone());
            for &t in &proto.name_tokens {
                assert!(own.contains(&t) || base.contains(&t));
            }
        }
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let mut c = cfg();
        c.num_categories = 1;
        assert!(matches!(
            generate_catalog(&c),
            Err(crate::error::CoreError::Config(_))
        ));
        let mut c = cfg();
        c.num_brands = 0;
        assert!(generate_catalog(&c).is_err());
    }
}
