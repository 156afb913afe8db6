//! Minibatch training loop: shuffle, (optional) ITM negative substitution,
//! masking, one tape per batch, Adam with linear learning-rate decay, a
//! checkpoint per epoch and a per-step loss-curve record.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::{losses, mask_batch, BatchItem, MaskedItem};

use crate::corpus::{DatasetBundle, Split};
use crate::error::{CoreError, Result};
use crate::model::autograd::NodeId;
use crate::model::blocks::Dropouts;
use crate::model::params::Graph;
use crate::model::{CaptureModel, ModelArch, TokenSequence};
use crate::pretrain::PretrainConfig;
use crate::proposer::Proposer;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub mlm: f64,
    pub mrp: f64,
    pub ctr: f64,
    pub itm: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_curve: Vec<LossRow>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,mlm,mrp,ctr,itm,total,lr")?;
        for r in &self.loss_curve {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step, r.mlm, r.mrp, r.ctr, r.itm, r.total, r.lr
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pretrain `model` on the bundle's train split. The proposer supplies
/// region features (train samples carry no ground-truth boxes, so oracle
/// and jitter modes cannot be used here). Checkpoints and the loss curve
/// are written under `out_dir` when given. Deterministic for a fixed config
/// under single-threaded execution.
pub fn train(
    model: &mut CaptureModel,
    bundle: &DatasetBundle,
    config: &PretrainConfig,
    proposer: &Proposer,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate(model.config.arch)?;
    if model.config.d_v != proposer.config.d_v && model.config.arch != ModelArch::TextOnly {
        return Err(CoreError::Config(format!(
            "model d_v {} != proposer d_v {}",
            model.config.d_v, proposer.config.d_v
        )));
    }

    let train: Vec<_> = bundle.split(Split::Train).collect();
    if train.is_empty() {
        return Err(CoreError::Config("train split is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    // Region sets and token sequences are deterministic per sample; build
    // them once.
    let mut cached: Vec<BatchItem> = Vec::with_capacity(train.len());
    for s in &train {
        let gt = s
            .instances
            .as_ref()
            .map(|insts| insts.iter().map(|i| i.bbox).collect::<Vec<_>>());
        let regions = proposer.region_set(bundle.image(s).view(), gt.as_deref(), s.id)?;
        cached.push(BatchItem {
            sample_id: s.id,
            tokens: TokenSequence::from_caption(&s.caption, model.config.max_text_len),
            regions,
            matched: true,
        });
    }

    let vocab_size = model.config.vocab_size;
    let num_batches = cached.len().div_ceil(config.batch_size);
    let steps_total = config.epochs * num_batches;
    let mut adam = Adam::new(&model.params);
    let mut loss_curve = Vec::with_capacity(steps_total);
    let mut checkpoints = Vec::new();
    let mut warned_empty_mlm = false;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..cached.len()).collect();
        let mut shuffle_rng = rng_for(config.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        for chunk in order.chunks(config.batch_size) {
            let mut items: Vec<BatchItem> = chunk.iter().map(|&i| cached[i].clone()).collect();

            // ITM negatives: substitute the image or the caption from a
            // random other sample with probability 1/2 each way.
            if config.loss_switches.itm && cached.len() > 1 {
                let mut itm_rng = rng_for(config.seed, "itm", step as u64);
                for (slot, &idx) in chunk.iter().enumerate() {
                    if itm_rng.random::<f64>() < 0.5 {
                        let mut other = idx;
                        while other == idx {
                            other = itm_rng.random_range(0..cached.len());
                        }
                        if itm_rng.random::<f64>() < 0.5 {
                            items[slot].regions = cached[other].regions.clone();
                        } else {
                            items[slot].tokens = cached[other].tokens.clone();
                        }
                        items[slot].matched = false;
                    }
                }
            }

            let mut mask_rng = rng_for(config.seed, "mask", step as u64);
            let masked = mask_batch(&items, config, vocab_size, &mut mask_rng)?;

            let mut dropout_rng = rng_for(config.seed, "dropout", step as u64);
            let mut g = model.graph();
            let row = build_batch_losses(
                model,
                &mut g,
                &masked.items,
                config,
                &mut Dropouts::train(model.config.dropout_prob, &mut dropout_rng),
                step,
                steps_total,
                &mut warned_empty_mlm,
            )?;

            if !row.total.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "training diverged at step {step}: total loss {}",
                    row.total
                )));
            }

            let grads = g.grads(row.root)?;
            adam.step(&mut model.params, &grads, row.lr);
            loss_curve.push(row.record);
            step += 1;
        }

        if let Some(dir) = out_dir {
            let path = dir.join(format!("checkpoint_epoch{epoch:02}.bin"));
            crate::model::checkpoint::save(model, &path)?;
            checkpoints.push(path);
        }
    }

    if let Some(dir) = out_dir {
        let final_path = dir.join("checkpoint.bin");
        crate::model::checkpoint::save(model, &final_path)?;
        checkpoints.push(final_path);
        let report = TrainReport {
            loss_curve: loss_curve.clone(),
            steps: step,
            checkpoints: checkpoints.clone(),
        };
        report.write_loss_csv(&dir.join("losses.csv"))?;
        return Ok(report);
    }

    Ok(TrainReport {
        loss_curve,
        steps: step,
        checkpoints,
    })
}

struct BatchLoss {
    root: NodeId,
    total: f64,
    lr: f64,
    record: LossRow,
}

#[allow(clippy::too_many_arguments)]
fn build_batch_losses(
    model: &CaptureModel,
    g: &mut Graph,
    items: &[MaskedItem],
    config: &PretrainConfig,
    drop: &mut Dropouts<'_>,
    step: usize,
    steps_total: usize,
    warned_empty_mlm: &mut bool,
) -> Result<BatchLoss> {
    let switches = &config.loss_switches;
    let mut text_state_positions: Vec<(NodeId, &[usize])> = Vec::new();
    let mut mlm_targets: Vec<u32> = Vec::new();
    let mut visual_state_positions: Vec<(NodeId, &[usize])> = Vec::new();
    let mut mrp_target_rows = Vec::new();
    let mut ctr_img_nodes = Vec::new();
    let mut ctr_txt_nodes = Vec::new();
    let mut joint_nodes = Vec::new();
    let mut matched = Vec::new();

    for item in items {
        let out = model.forward(g, &item.tokens, &item.regions, drop)?;
        if switches.mlm {
            if let Some(states) = out.text_states {
                text_state_positions.push((states, &item.text_positions));
                mlm_targets.extend_from_slice(&item.text_targets);
            }
        }
        if switches.mrp {
            if let Some(states) = out.visual_states {
                visual_state_positions.push((states, &item.region_positions));
                mrp_target_rows.push(item.region_targets.clone());
            }
        }
        if switches.ctr {
            ctr_img_nodes.push(out.ctr_img.expect("ctr requires the hybrid arch"));
            ctr_txt_nodes.push(out.ctr_txt.expect("ctr requires the hybrid arch"));
        }
        if switches.itm {
            joint_nodes.push(out.joint.expect("itm requires the hybrid arch"));
            matched.push(item.matched);
        }
    }

    let mut parts: Vec<(NodeId, f64)> = Vec::new();
    let mut mlm_value = 0.0;
    if switches.mlm {
        match losses::mlm_loss(g, &text_state_positions, &mlm_targets) {
            Some(node) => {
                mlm_value = g.tape.scalar(node);
                parts.push((node, 1.0));
            }
            None => {
                if !*warned_empty_mlm {
                    eprintln!("warning: batch has no masked text positions; MLM contributes 0");
                    *warned_empty_mlm = true;
                }
            }
        }
    }
    let mut mrp_value = 0.0;
    if switches.mrp {
        let total_rows: usize = mrp_target_rows.iter().map(|m| m.nrows()).sum();
        if total_rows > 0 {
            let width = mrp_target_rows[0].ncols();
            let mut targets = crate::model::autograd::Mat::zeros((total_rows, width));
            let mut at = 0;
            for m in &mrp_target_rows {
                for r in 0..m.nrows() {
                    targets.row_mut(at).assign(&m.row(r));
                    at += 1;
                }
            }
            if let Some(node) = losses::mrp_loss(g, &visual_state_positions, targets) {
                mrp_value = g.tape.scalar(node);
                parts.push((node, 1.0));
            }
        }
    }
    let mut ctr_value = 0.0;
    if switches.ctr {
        let node = losses::ctr_loss(g, &ctr_img_nodes, &ctr_txt_nodes, config.temperature)?;
        ctr_value = g.tape.scalar(node);
        parts.push((node, 1.0));
    }
    let mut itm_value = 0.0;
    if switches.itm {
        let node = losses::itm_loss(g, &joint_nodes, &matched);
        itm_value = g.tape.scalar(node);
        parts.push((node, 1.0));
    }

    if parts.is_empty() {
        return Err(CoreError::Config(
            "no loss produced a value for this batch".into(),
        ));
    }
    let root = g.tape.weighted_sum(&parts);
    let total = g.tape.scalar(root);
    let lr = config.learning_rate * (1.0 - step as f64 / steps_total as f64);
    Ok(BatchLoss {
        root,
        total,
        lr,
        record: LossRow {
            step,
            mlm: mlm_value,
            mrp: mrp_value,
            ctr: ctr_value,
            itm: itm_value,
            total,
            lr,
        },
    })
}
