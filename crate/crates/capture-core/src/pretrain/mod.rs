//! Self-supervised pretraining: masked language modeling, masked region
//! prediction, cross-modal contrastive alignment, and image-text matching
//! (kept as an ablation arm).

pub mod adam;
pub mod losses;
pub mod trainer;

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::autograd::Mat;
use crate::model::{ModelArch, RegionInput, TokenSequence};
use crate::proposer::RegionSet;
use crate::tokens;

pub use trainer::{train, LossRow, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub mlm: bool,
    pub mrp: bool,
    pub ctr: bool,
    pub itm: bool,
}

impl LossSwitches {
    /// The default arm: both masked tasks plus the contrastive loss.
    pub fn standard() -> Self {
        LossSwitches {
            mlm: true,
            mrp: true,
            ctr: true,
            itm: false,
        }
    }

    pub fn any(&self) -> bool {
        self.mlm || self.mrp || self.ctr || self.itm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Independent masking probability per eligible token / region.
    pub mask_prob: f64,
    /// ([MASK], random token, keep) corruption split for selected tokens.
    pub mlm_corruption: (f64, f64, f64),
    /// Contrastive temperature.
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Initial learning rate; decays linearly to zero over training.
    pub learning_rate: f64,
    pub loss_switches: LossSwitches,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn toy(seed: u64) -> Self {
        PretrainConfig {
            mask_prob: 0.15,
            mlm_corruption: (0.8, 0.1, 0.1),
            temperature: 0.07,
            batch_size: 32,
            epochs: 5,
            learning_rate: 1e-3,
            loss_switches: LossSwitches::standard(),
            seed,
        }
    }

    pub fn validate(&self, arch: ModelArch) -> Result<()> {
        if !self.loss_switches.any() {
            return Err(CoreError::Config("at least one loss must be enabled".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(CoreError::Config("mask_prob must be in [0,1)".into()));
        }
        if (self.loss_switches.mlm || self.loss_switches.mrp) && self.mask_prob == 0.0 {
            return Err(CoreError::Config(
                "masked losses need mask_prob > 0".into(),
            ));
        }
        let (a, b, c) = self.mlm_corruption;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(
                "mlm_corruption probabilities must be nonnegative and sum to 1".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::Config("temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CoreError::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        match arch {
            ModelArch::Hybrid => {}
            ModelArch::TextOnly => {
                if self.loss_switches.mrp || self.loss_switches.ctr || self.loss_switches.itm {
                    return Err(CoreError::Config(
                        "text-only baselines train with MLM only".into(),
                    ));
                }
            }
            ModelArch::VisualOnly => {
                if self.loss_switches.mlm || self.loss_switches.ctr || self.loss_switches.itm {
                    return Err(CoreError::Config(
                        "visual-only baselines train with MRP only".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One uncorrupted training example.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub sample_id: u64,
    pub tokens: TokenSequence,
    pub regions: RegionSet,
    /// Image-text matching label; false once the trainer substituted one
    /// modality to make a negative pair.
    pub matched: bool,
}

/// One corrupted example plus reconstruction targets. Targets exist exactly
/// at masked positions; unmasked positions are unchanged.
#[derive(Debug, Clone)]
pub struct MaskedItem {
    pub sample_id: u64,
    pub tokens: TokenSequence,
    pub regions: RegionInput,
    pub matched: bool,
    /// Row indices into `tokens` that were corrupted.
    pub text_positions: Vec<usize>,
    /// Original token ids at those positions.
    pub text_targets: Vec<u32>,
    /// Per-position text mask indicator.
    pub text_masked: Vec<bool>,
    /// Region indices (not counting the [IMG] prefix) whose features were
    /// zeroed.
    pub region_positions: Vec<usize>,
    /// Original feature rows for the masked regions.
    pub region_targets: Mat,
    pub region_masked: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub items: Vec<MaskedItem>,
}

impl MaskedBatch {
    pub fn total_text_masked(&self) -> usize {
        self.items.iter().map(|i| i.text_positions.len()).sum()
    }

    pub fn total_regions_masked(&self) -> usize {
        self.items.iter().map(|i| i.region_positions.len()).sum()
    }
}

/// Apply BERT-style masking to a batch. Each eligible token (not [CLS], not
/// [PAD]) is selected with `mask_prob` and replaced by [MASK] / a random
/// token / kept per the corruption split; each region is selected with
/// `mask_prob` and its feature vector zeroed. At least one masked position
/// per modality per item is enforced by re-drawing (masked losses need a
/// target), except with `mask_prob == 0`, which disables corruption
/// entirely.
pub fn mask_batch(
    items: &[BatchItem],
    config: &PretrainConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedBatch> {
    if items.is_empty() {
        return Err(CoreError::Input("empty batch".into()));
    }
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let mut tokens = item.tokens.clone();
        let eligible: Vec<usize> = tokens
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != tokens::CLS && id != tokens::PAD)
            .map(|(i, _)| i)
            .collect();

        let mut text_positions: Vec<usize> = Vec::new();
        if config.mask_prob > 0.0 && !eligible.is_empty() {
            for attempt in 0..1000 {
                text_positions = eligible
                    .iter()
                    .copied()
                    .filter(|_| rng.random::<f64>() < config.mask_prob)
                    .collect();
                if !text_positions.is_empty() {
                    break;
                }
                if attempt == 999 {
                    text_positions = vec![eligible[0]];
                }
            }
        }
        let text_targets: Vec<u32> = text_positions.iter().map(|&p| tokens.ids[p]).collect();
        let (p_mask, p_rand, _keep) = config.mlm_corruption;
        for &p in &text_positions {
            let u = rng.random::<f64>();
            if u < p_mask {
                tokens.ids[p] = tokens::MASK;
            } else if u < p_mask + p_rand {
                let span = vocab_size as u32 - tokens::RESERVED;
                tokens.ids[p] = tokens::RESERVED + rng.random_range(0..span);
            } // else keep the original token
        }
        let mut text_masked = vec![false; tokens.ids.len()];
        for &p in &text_positions {
            text_masked[p] = true;
        }

        let r = item.regions.len();
        let mut region_positions: Vec<usize> = Vec::new();
        if config.mask_prob > 0.0 && r > 0 {
            for attempt in 0..1000 {
                region_positions = (0..r)
                    .filter(|_| rng.random::<f64>() < config.mask_prob)
                    .collect();
                if !region_positions.is_empty() {
                    break;
                }
                if attempt == 999 {
                    region_positions = vec![0];
                }
            }
        }
        let mut features = item.regions.features.clone();
        let mut region_targets = Mat::zeros((region_positions.len(), features.ncols()));
        for (row, &p) in region_positions.iter().enumerate() {
            region_targets
                .row_mut(row)
                .assign(&item.regions.features.index_axis(Axis(0), p));
            features.row_mut(p).fill(0.0);
        }
        let mut region_masked = vec![false; r];
        for &p in &region_positions {
            region_masked[p] = true;
        }

        out.push(MaskedItem {
            sample_id: item.sample_id,
            tokens,
            regions: RegionInput {
                features,
                spatial: item.regions.spatial.clone(),
            },
            matched: item.matched,
            text_positions,
            text_targets,
            text_masked,
            region_positions,
            region_targets,
            region_masked,
        });
    }
    Ok(MaskedBatch { items: out })
}

#[cfg(test)]
mod tests;
