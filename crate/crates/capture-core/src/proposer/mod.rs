//! Region proposer: a stand-in for a trained detector, with quality dialed
//! by mode. Oracle returns ground truth, jitter perturbs/drops/adds boxes,
//! heuristic finds connected high-contrast components, whole-image returns a
//! single full-frame box.

pub mod cache;
mod features;

use ndarray::ArrayView3;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::BBox;
use crate::error::{CoreError, Result};
use crate::model::autograd::Mat;
use crate::model::RegionInput;
use crate::rng::rng_for;

pub use features::RegionFeature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerMode {
    Oracle,
    Jitter,
    Heuristic,
    WholeImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub mode: ProposerMode,
    /// Gaussian box-coordinate noise as a fraction of the image size
    /// (jitter mode).
    #[serde(default)]
    pub jitter_sigma: f64,
    /// Probability of dropping a true region (jitter mode).
    #[serde(default)]
    pub miss_prob: f64,
    /// Expected count of spurious extra boxes (jitter mode).
    #[serde(default)]
    pub spurious_rate: f64,
    /// Maximum proposals kept per image.
    pub r_max: usize,
    /// Pooling grid side for feature extraction.
    pub grid: usize,
    /// Region feature width.
    pub d_v: usize,
    pub seed: u64,
}

impl ProposerConfig {
    pub fn new(mode: ProposerMode, seed: u64) -> Self {
        ProposerConfig {
            mode,
            jitter_sigma: 0.0,
            miss_prob: 0.0,
            spurious_rate: 0.0,
            r_max: 12,
            grid: 7,
            d_v: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_max < 1 {
            return Err(CoreError::Config("r_max must be >= 1".into()));
        }
        if self.grid < 1 {
            return Err(CoreError::Config("grid must be >= 1".into()));
        }
        if self.jitter_sigma < 0.0 || self.spurious_rate < 0.0 {
            return Err(CoreError::Config(
                "jitter_sigma and spurious_rate must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(CoreError::Config("miss_prob must be in [0,1]".into()));
        }
        if 3 * self.grid * self.grid < self.d_v {
            return Err(CoreError::Config(format!(
                "orthogonal projection needs 3*grid^2 ({}) >= d_v ({})",
                3 * self.grid * self.grid,
                self.d_v
            )));
        }
        Ok(())
    }
}

/// Luminance-deviation threshold for the heuristic mode.
const HEURISTIC_THRESHOLD: f64 = 0.10;
/// Components below this area fraction are discarded.
const HEURISTIC_MIN_AREA: f64 = 0.002;

pub struct Proposer {
    pub config: ProposerConfig,
    /// d_v × 3·grid² matrix with orthonormal rows, fixed per corpus.
    projection: Mat,
}

impl Proposer {
    pub fn new(config: ProposerConfig) -> Result<Self> {
        config.validate()?;
        let projection = features::orthogonal_projection(
            config.d_v,
            3 * config.grid * config.grid,
            config.seed,
        );
        Ok(Proposer { config, projection })
    }

    /// Propose boxes for one image. `salt` (typically the sample id) makes
    /// jitter noise deterministic per sample. The result is clipped to
    /// [0,1], truncated to `r_max` and never empty.
    pub fn propose(
        &self,
        image: ArrayView3<'_, f32>,
        ground_truth: Option<&[BBox]>,
        salt: u64,
    ) -> Result<Vec<BBox>> {
        let cfg = &self.config;
        let mut boxes = match cfg.mode {
            ProposerMode::Oracle => {
                let gt = ground_truth.ok_or_else(|| {
                    CoreError::Usage("oracle proposer requires ground-truth boxes".into())
                })?;
                gt.to_vec()
            }
            ProposerMode::Jitter => {
                let gt = ground_truth.ok_or_else(|| {
                    CoreError::Usage("jitter proposer requires ground-truth boxes".into())
                })?;
                self.jitter(gt, salt)
            }
            ProposerMode::Heuristic => heuristic_boxes(image, cfg.r_max),
            ProposerMode::WholeImage => vec![BBox::whole_image()],
        };

        boxes = boxes
            .into_iter()
            .map(|b| b.clipped())
            .filter(|b| b.is_valid())
            .collect();
        boxes.truncate(cfg.r_max);
        if boxes.is_empty() {
            boxes.push(BBox::whole_image());
        }
        Ok(boxes)
    }

    fn jitter(&self, gt: &[BBox], salt: u64) -> Vec<BBox> {
        let cfg = &self.config;
        let mut rng = rng_for(cfg.seed, "jitter", salt);
        let mut out = Vec::with_capacity(gt.len());
        for b in gt {
            let mut coords = b.to_array();
            if cfg.jitter_sigma > 0.0 {
                let normal = Normal::new(0.0, cfg.jitter_sigma).expect("validated sigma");
                for c in coords.iter_mut() {
                    *c += normal.sample(&mut rng);
                }
            }
            if cfg.miss_prob > 0.0 && rng.random::<f64>() < cfg.miss_prob {
                continue;
            }
            let (x1, x2) = order(coords[0], coords[2]);
            let (y1, y2) = order(coords[1], coords[3]);
            out.push(BBox::new(x1, y1, x2, y2));
        }
        if cfg.spurious_rate > 0.0 {
            let extra = Poisson::new(cfg.spurious_rate).expect("validated rate").sample(&mut rng);
            for _ in 0..extra as usize {
                let x1 = rng.random::<f64>() * 0.8;
                let y1 = rng.random::<f64>() * 0.8;
                let w = 0.1 + rng.random::<f64>() * (0.95 - x1 - 0.1).max(0.05);
                let h = 0.1 + rng.random::<f64>() * (0.95 - y1 - 0.1).max(0.05);
                out.push(BBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0)));
            }
        }
        out
    }

    /// Bilinear crop onto a grid² patch, flattened and mapped through the
    /// fixed orthogonal projection; spatial code is corners plus area.
    pub fn extract_feature(&self, image: ArrayView3<'_, f32>, bbox: &BBox) -> RegionFeature {
        features::extract(image, bbox, self.config.grid, &self.projection)
    }

    /// Propose and featurize in one step, producing the model's visual
    /// input.
    pub fn region_set(
        &self,
        image: ArrayView3<'_, f32>,
        ground_truth: Option<&[BBox]>,
        salt: u64,
    ) -> Result<RegionSet> {
        let boxes = self.propose(image, ground_truth, salt)?;
        self.featurize(image, boxes)
    }

    pub fn featurize(&self, image: ArrayView3<'_, f32>, boxes: Vec<BBox>) -> Result<RegionSet> {
        if boxes.is_empty() {
            return Err(CoreError::Input("no boxes to featurize".into()));
        }
        let d_v = self.config.d_v;
        let mut features = Mat::zeros((boxes.len(), d_v));
        let mut spatial = Mat::zeros((boxes.len(), 5));
        let mut degenerate = vec![false; boxes.len()];
        let mut final_boxes = boxes.clone();
        for (i, b) in boxes.iter().enumerate() {
            let rf = self.extract_feature(image, b);
            for (j, &v) in rf.feature.iter().enumerate() {
                features[[i, j]] = v;
            }
            for (j, &v) in rf.spatial.iter().enumerate() {
                spatial[[i, j]] = v;
            }
            degenerate[i] = rf.degenerate;
            final_boxes[i] = rf.bbox;
        }
        Ok(RegionSet {
            boxes: final_boxes,
            features,
            spatial,
            degenerate,
        })
    }
}

fn order(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Proposed boxes plus fixed-length features for one image.
#[derive(Debug, Clone)]
pub struct RegionSet {
    pub boxes: Vec<BBox>,
    /// R × d_v.
    pub features: Mat,
    /// R × 5: x1, y1, x2, y2, area fraction.
    pub spatial: Mat,
    /// True where a degenerate box was replaced by the whole-image box.
    pub degenerate: Vec<bool>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn to_model_input(&self) -> RegionInput {
        RegionInput {
            features: self.features.clone(),
            spatial: self.spatial.clone(),
        }
    }

    /// Single-proposal view used to encode one instance at a time.
    pub fn single(&self, index: usize) -> RegionInput {
        RegionInput {
            features: self
                .features
                .row(index)
                .to_owned()
                .insert_axis(ndarray::Axis(0)),
            spatial: self
                .spatial
                .row(index)
                .to_owned()
                .insert_axis(ndarray::Axis(0)),
        }
    }
}

/// Threshold the color deviation from an estimated background, take
/// 4-connected components' bounding boxes, drop tiny ones, largest first.
fn heuristic_boxes(image: ArrayView3<'_, f32>, r_max: usize) -> Vec<BBox> {
    let (h, w, _) = image.dim();
    // Background estimate: per-channel median over the 1-pixel border.
    let mut border: Vec<[f64; 3]> = Vec::with_capacity(2 * (h + w));
    for r in 0..h {
        for c in [0, w - 1] {
            border.push([
                f64::from(image[[r, c, 0]]),
                f64::from(image[[r, c, 1]]),
                f64::from(image[[r, c, 2]]),
            ]);
        }
    }
    for c in 0..w {
        for r in [0, h - 1] {
            border.push([
                f64::from(image[[r, c, 0]]),
                f64::from(image[[r, c, 1]]),
                f64::from(image[[r, c, 2]]),
            ]);
        }
    }
    let mut bg = [0.0f64; 3];
    for ch in 0..3 {
        let mut vals: Vec<f64> = border.iter().map(|p| p[ch]).collect();
        vals.sort_by(f64::total_cmp);
        bg[ch] = vals[vals.len() / 2];
    }

    let mut fg = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let dev = (0..3)
                .map(|ch| (f64::from(image[[r, c, ch]]) - bg[ch]).abs())
                .fold(0.0f64, f64::max);
            fg[r * w + c] = dev > HEURISTIC_THRESHOLD;
        }
    }

    // Dilate (Chebyshev radius 2) so patterned glyphs with small internal
    // gaps stay one component; boxes and areas are taken from the original
    // mask afterwards.
    const DILATE: isize = 1;
    let mut dilated = vec![false; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            'scan: for dr in -DILATE..=DILATE {
                for dc in -DILATE..=DILATE {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0
                        && cc >= 0
                        && rr < h as isize
                        && cc < w as isize
                        && fg[rr as usize * w + cc as usize]
                    {
                        dilated[r as usize * w + c as usize] = true;
                        break 'scan;
                    }
                }
            }
        }
    }

    // 4-connected components over the dilated mask by flood fill.
    let mut seen = vec![false; h * w];
    let mut comps: Vec<(usize, BBox)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !dilated[start] || seen[start] {
            continue;
        }
        let mut count = 0usize;
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (h, 0usize, w, 0usize);
        stack.push(start);
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            if fg[p] {
                count += 1;
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
            let mut push = |q: usize| {
                if dilated[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
        if count > 0 && (count as f64) / (h * w) as f64 >= HEURISTIC_MIN_AREA {
            comps.push((
                count,
                BBox::new(
                    cmin as f64 / w as f64,
                    rmin as f64 / h as f64,
                    (cmax + 1) as f64 / w as f64,
                    (rmax + 1) as f64 / h as f64,
                ),
            ));
        }
    }
    comps.sort_by(|a, b| b.0.cmp(&a.0));
    comps.into_iter().take(r_max).map(|(_, b)| b).collect()
}
