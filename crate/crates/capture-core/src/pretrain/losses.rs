//! Loss builders over the model's tape outputs, plus plain-value wrappers
//! for evaluation and testing.

use crate::error::Result;
use crate::model::autograd::{Mat, NodeId};
use crate::model::blocks::head;
use crate::model::params::Graph;

/// Masked language modeling: mean cross-entropy of the vocabulary decoder
/// over masked text positions only. `states_and_positions` pairs each
/// sample's final text states with its masked row indices; samples without
/// masked positions contribute nothing. Returns `None` when the whole batch
/// has no masked text (the caller logs and contributes 0).
pub fn mlm_loss(
    g: &mut Graph,
    states_and_positions: &[(NodeId, &[usize])],
    targets: &[u32],
) -> Option<NodeId> {
    let mut gathered = Vec::new();
    for &(states, positions) in states_and_positions {
        if positions.is_empty() {
            continue;
        }
        gathered.push(g.tape.gather_rows(states, positions));
    }
    if gathered.is_empty() {
        return None;
    }
    let rows = g.tape.concat_rows(&gathered);
    let logits = head(g, "dec.mlm", rows);
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    debug_assert_eq!(targets.len(), g.tape.value(logits).nrows());
    Some(g.tape.softmax_xent(logits, targets))
}

/// Masked region prediction: mean squared error of the d_v regression head
/// on masked visual states against the original pre-masking features.
/// `positions` are region indices; the +1 [IMG] offset is applied here.
pub fn mrp_loss(
    g: &mut Graph,
    states_and_positions: &[(NodeId, &[usize])],
    targets: Mat,
) -> Option<NodeId> {
    let mut gathered = Vec::new();
    for &(states, positions) in states_and_positions {
        if positions.is_empty() {
            continue;
        }
        let shifted: Vec<usize> = positions.iter().map(|&p| p + 1).collect();
        gathered.push(g.tape.gather_rows(states, &shifted));
    }
    if gathered.is_empty() {
        return None;
    }
    let rows = g.tape.concat_rows(&gathered);
    let pred = head(g, "dec.mrp", rows);
    debug_assert_eq!(g.tape.value(pred).raw_dim(), targets.raw_dim());
    Some(g.tape.mse_vs(pred, targets))
}

/// Cross-modal contrastive loss over the batch's pooled contrastive
/// features (one image row and one text row per sample).
pub fn ctr_loss(
    g: &mut Graph,
    ctr_img: &[NodeId],
    ctr_txt: &[NodeId],
    tau: f64,
) -> Result<NodeId> {
    debug_assert_eq!(ctr_img.len(), ctr_txt.len());
    let img = g.tape.concat_rows(ctr_img);
    let txt = g.tape.concat_rows(ctr_txt);
    g.tape.nt_xent(img, txt, tau)
}

/// Image-text matching: 2-way cross-entropy of the ITM head on the joint
/// vectors. Label 1 = matched pair, 0 = substituted negative.
pub fn itm_loss(g: &mut Graph, joints: &[NodeId], matched: &[bool]) -> NodeId {
    debug_assert_eq!(joints.len(), matched.len());
    let rows = g.tape.concat_rows(joints);
    let logits = head(g, "dec.itm", rows);
    let targets: Vec<usize> = matched.iter().map(|&m| usize::from(m)).collect();
    g.tape.softmax_xent(logits, targets)
}

/// Plain-value cross-modal contrastive loss over already-pooled feature
/// batches; rows pair up by index.
pub fn contrastive_loss(img: &Mat, txt: &Mat, tau: f64) -> Result<f64> {
    let mut tape = crate::model::autograd::Tape::new();
    let a = tape.leaf(img.clone());
    let b = tape.leaf(txt.clone());
    let loss = tape.nt_xent(a, b, tau)?;
    Ok(tape.scalar(loss))
}
