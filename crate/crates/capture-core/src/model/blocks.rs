//! Transformer building blocks, written as tape-building functions over a
//! named parameter set. All blocks are pre-norm: the residual stream stays
//! un-normalized and each sublayer reads a layer-normed view of it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autograd::{Mat, NodeId};
use super::params::Graph;

/// Dropout state threaded through a forward pass. `rng: None` (evaluation)
/// makes every dropout a no-op regardless of the probability.
pub struct Dropouts<'r> {
    pub prob: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropouts<'r> {
    pub fn eval() -> Self {
        Dropouts { prob: 0.0, rng: None }
    }

    pub fn train(prob: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropouts { prob, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let rng = match (&mut self.rng, self.prob > 0.0) {
            (Some(rng), true) => rng,
            _ => return x,
        };
        let shape = g.tape.value(x).raw_dim();
        let keep = 1.0 - self.prob;
        let mask = Mat::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.tape.dropout(x, mask)
    }
}

pub struct AttnOut {
    pub out: NodeId,
    /// Per-head softmax nodes, exposed so tests can inspect attention rows.
    pub weights: Vec<NodeId>,
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`, keys
/// and values from `kv_in`; `key_mask` rows out padded keys.
pub fn attention(
    g: &mut Graph,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    key_mask: Option<&[bool]>,
    n_heads: usize,
) -> AttnOut {
    let d = g.tape.value(q_in).ncols();
    debug_assert_eq!(d % n_heads, 0);
    let dh = d / n_heads;

    let wq = g.p(&format!("{prefix}.wq"));
    let bq = g.p(&format!("{prefix}.bq"));
    let wk = g.p(&format!("{prefix}.wk"));
    let bk = g.p(&format!("{prefix}.bk"));
    let wv = g.p(&format!("{prefix}.wv"));
    let bv = g.p(&format!("{prefix}.bv"));
    let wo = g.p(&format!("{prefix}.wo"));
    let bo = g.p(&format!("{prefix}.bo"));

    let qm = g.tape.matmul(q_in, wq);
    let q = g.tape.add_row(qm, bq);
    let km = g.tape.matmul(kv_in, wk);
    let k = g.tape.add_row(km, bk);
    let vm = g.tape.matmul(kv_in, wv);
    let v = g.tape.add_row(vm, bv);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.tape.slice_cols(q, h * dh, dh);
        let kh = g.tape.slice_cols(k, h * dh, dh);
        let vh = g.tape.slice_cols(v, h * dh, dh);
        let scores = g.tape.matmul_nt(qh, kh);
        let scaled = g.tape.scale(scores, scale);
        let attn = g.tape.softmax_rows(scaled, key_mask.map(|m| m.to_vec()));
        weights.push(attn);
        heads.push(g.tape.matmul(attn, vh));
    }
    let merged = g.tape.concat_cols(&heads);
    let om = g.tape.matmul(merged, wo);
    let out = g.tape.add_row(om, bo);
    AttnOut { out, weights }
}

fn layer_norm(g: &mut Graph, prefix: &str, x: NodeId) -> NodeId {
    let gamma = g.p(&format!("{prefix}.g"));
    let beta = g.p(&format!("{prefix}.b"));
    g.tape.layer_norm(x, gamma, beta)
}

fn feed_forward(g: &mut Graph, prefix: &str, x: NodeId) -> NodeId {
    let w1 = g.p(&format!("{prefix}.w1"));
    let b1 = g.p(&format!("{prefix}.b1"));
    let w2 = g.p(&format!("{prefix}.w2"));
    let b2 = g.p(&format!("{prefix}.b2"));
    let h = g.tape.matmul(x, w1);
    let h = g.tape.add_row(h, b1);
    let h = g.tape.gelu(h);
    let h = g.tape.matmul(h, w2);
    g.tape.add_row(h, b2)
}

pub struct BlockOut {
    pub out: NodeId,
    pub attn_weights: Vec<NodeId>,
}

/// Intra-modal block: self-attention over one stream, then feed-forward,
/// each with a residual connection.
pub fn intra_block(
    g: &mut Graph,
    prefix: &str,
    x: NodeId,
    mask: Option<&[bool]>,
    n_heads: usize,
    drop: &mut Dropouts<'_>,
) -> BlockOut {
    let normed = layer_norm(g, &format!("{prefix}.ln1"), x);
    let attn = attention(g, &format!("{prefix}.attn"), normed, normed, mask, n_heads);
    let attn_dropped = drop.apply(g, attn.out);
    let x1 = g.tape.add(x, attn_dropped);
    let normed2 = layer_norm(g, &format!("{prefix}.ln2"), x1);
    let ff = feed_forward(g, &format!("{prefix}.ff"), normed2);
    let ff_dropped = drop.apply(g, ff);
    let out = g.tape.add(x1, ff_dropped);
    BlockOut {
        out,
        attn_weights: attn.weights,
    }
}

/// Cross-modal block: both streams are updated from the same pair of input
/// states, each using its own queries against the other stream's keys and
/// values.
#[allow(clippy::too_many_arguments)]
pub fn cross_block(
    g: &mut Graph,
    prefix: &str,
    text: NodeId,
    visual: NodeId,
    text_mask: Option<&[bool]>,
    visual_mask: Option<&[bool]>,
    n_heads: usize,
    drop: &mut Dropouts<'_>,
) -> (NodeId, NodeId) {
    let new_text = cross_half(
        g,
        &format!("{prefix}.txt"),
        text,
        visual,
        visual_mask,
        n_heads,
        drop,
    );
    let new_visual = cross_half(
        g,
        &format!("{prefix}.vis"),
        visual,
        text,
        text_mask,
        n_heads,
        drop,
    );
    (new_text, new_visual)
}

fn cross_half(
    g: &mut Graph,
    prefix: &str,
    q_stream: NodeId,
    kv_stream: NodeId,
    kv_mask: Option<&[bool]>,
    n_heads: usize,
    drop: &mut Dropouts<'_>,
) -> NodeId {
    let q_normed = layer_norm(g, &format!("{prefix}.ln_q"), q_stream);
    let kv_normed = layer_norm(g, &format!("{prefix}.ln_kv"), kv_stream);
    let attn = attention(
        g,
        &format!("{prefix}.attn"),
        q_normed,
        kv_normed,
        kv_mask,
        n_heads,
    );
    let attn_dropped = drop.apply(g, attn.out);
    let x1 = g.tape.add(q_stream, attn_dropped);
    let normed2 = layer_norm(g, &format!("{prefix}.ln2"), x1);
    let ff = feed_forward(g, &format!("{prefix}.ff"), normed2);
    let ff_dropped = drop.apply(g, ff);
    g.tape.add(x1, ff_dropped)
}

/// Joint block: self-attention over the concatenation of both streams, then
/// split back. Identical to an intra block applied to the joined sequence.
#[allow(clippy::too_many_arguments)]
pub fn co_block(
    g: &mut Graph,
    prefix: &str,
    text: NodeId,
    visual: NodeId,
    text_mask: Option<&[bool]>,
    visual_mask: Option<&[bool]>,
    n_heads: usize,
    drop: &mut Dropouts<'_>,
) -> (NodeId, NodeId, Vec<NodeId>) {
    let t_len = g.tape.value(text).nrows();
    let v_len = g.tape.value(visual).nrows();
    let joined = g.tape.concat_rows(&[text, visual]);
    let mask: Option<Vec<bool>> = match (text_mask, visual_mask) {
        (None, None) => None,
        _ => {
            let mut m = Vec::with_capacity(t_len + v_len);
            m.extend(text_mask.map_or(vec![true; t_len], |m| m.to_vec()));
            m.extend(visual_mask.map_or(vec![true; v_len], |m| m.to_vec()));
            Some(m)
        }
    };
    let block = intra_block(g, prefix, joined, mask.as_deref(), n_heads, drop);
    let new_text = g.tape.slice_rows(block.out, 0, t_len);
    let new_visual = g.tape.slice_rows(block.out, t_len, v_len);
    (new_text, new_visual, block.attn_weights)
}

/// Linear projection head: y = x·W + b.
pub fn head(g: &mut Graph, prefix: &str, x: NodeId) -> NodeId {
    let w = g.p(&format!("{prefix}.w"));
    let b = g.p(&format!("{prefix}.b"));
    let h = g.tape.matmul(x, w);
    g.tape.add_row(h, b)
}
