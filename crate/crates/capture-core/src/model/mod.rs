//! Hybrid-stream multi-modal transformer.
//!
//! The encoder stacks three layer types: `L` intra-modal self-attention
//! layers per stream, `K` cross-attention layers that exchange key/value
//! pairs between the streams, and `H` joint layers that run self-attention
//! over the concatenated sequence. Contrastive features are pooled from the
//! special tokens right after the intra layers; the joint retrieval feature
//! comes from the product of the pooled stream states at the very end.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod params;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::rng_for;
use crate::tokens;

use autograd::{Mat, NodeId};
use blocks::{co_block, cross_block, head, intra_block, Dropouts};
use params::{gaussian, Graph, ParamSet, INIT_STD};

/// Which modalities the encoder consumes. The unimodal variants exist as
/// intra-modal retrieval baselines and only stack intra layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelArch {
    #[default]
    Hybrid,
    TextOnly,
    VisualOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub arch: ModelArch,
    /// Intra-modal layers per stream.
    pub l_intra: usize,
    /// Cross-attention layers.
    pub k_cross: usize,
    /// Joint (concatenated) layers.
    pub h_co: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Width of the contrastive and joint projection heads.
    pub d_head_out: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Region feature width coming from the proposer.
    pub d_v: usize,
    pub dropout_prob: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Reference configuration: (4,4,4) stacks, 768 hidden, 512-d heads,
    /// 36-token captions.
    pub fn reference(vocab_size: usize) -> Self {
        ModelConfig {
            arch: ModelArch::Hybrid,
            l_intra: 4,
            k_cross: 4,
            h_co: 4,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            d_head_out: 512,
            vocab_size,
            max_text_len: 36,
            d_v: 2048,
            dropout_prob: 0.1,
            seed: 0,
        }
    }

    /// Desk-scale configuration used by the toy experiments.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            arch: ModelArch::Hybrid,
            l_intra: 2,
            k_cross: 2,
            h_co: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            d_head_out: 64,
            vocab_size,
            max_text_len: 36,
            d_v: 64,
            dropout_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CoreError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.l_intra + self.k_cross + self.h_co == 0 {
            return Err(CoreError::Config(
                "at least one of L, K, H must be >= 1".into(),
            ));
        }
        if self.arch != ModelArch::Hybrid && (self.k_cross > 0 || self.h_co > 0) {
            return Err(CoreError::Config(
                "unimodal baselines stack intra layers only (K = H = 0)".into(),
            ));
        }
        if self.vocab_size < tokens::RESERVED as usize {
            return Err(CoreError::Config("vocab_size below reserved ids".into()));
        }
        if self.max_text_len == 0 || self.d_head_out == 0 || self.d_ff == 0 {
            return Err(CoreError::Config("zero-sized model dimension".into()));
        }
        if self.arch != ModelArch::TextOnly && self.d_v == 0 {
            return Err(CoreError::Config("d_v must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(CoreError::Config("dropout_prob must be in [0,1)".into()));
        }
        Ok(())
    }

    fn uses_text(&self) -> bool {
        self.arch != ModelArch::VisualOnly
    }

    fn uses_visual(&self) -> bool {
        self.arch != ModelArch::TextOnly
    }

    /// Closed-form parameter element count for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ff = 2 * d * f + f + d;
        let intra = 2 * ln + attn + ff;
        let cross_half = 3 * ln + attn + ff;
        let head = |inp: usize, out: usize| inp * out + out;

        let mut total = 0;
        if self.uses_text() {
            total += self.vocab_size * d + self.max_text_len * d + ln; // tok, pos, embed LN
            total += self.l_intra * intra;
            total += ln; // final text LN
            total += head(d, self.d_head_out); // contrastive text head
            total += head(d, self.vocab_size); // MLM decoder
        }
        if self.uses_visual() {
            total += d + self.d_v * d + 5 * d + d + ln; // [IMG], feat, spatial, bias, embed LN
            total += self.l_intra * intra;
            total += ln; // final visual LN
            total += head(d, self.d_head_out); // contrastive visual head
            total += head(d, self.d_v); // MRP decoder
        }
        if self.arch == ModelArch::Hybrid {
            total += self.k_cross * 2 * cross_half;
            total += self.h_co * intra;
            total += head(d, self.d_head_out); // joint head
            total += head(self.d_head_out, 2); // ITM head
        }
        total
    }
}

/// Token ids for one caption, always starting with [CLS]. `mask` marks the
/// positions attention may look at; a padded tail is masked out.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    /// Prefix [CLS] and truncate to `max_text_len`.
    pub fn from_caption(caption: &[u32], max_text_len: usize) -> Self {
        let keep = caption.len().min(max_text_len.saturating_sub(1));
        let mut ids = Vec::with_capacity(keep + 1);
        ids.push(tokens::CLS);
        ids.extend_from_slice(&caption[..keep]);
        let mask = vec![true; ids.len()];
        TokenSequence { ids, mask }
    }

    /// Same, padded with [PAD] (masked out) up to `len`.
    pub fn from_caption_padded(caption: &[u32], max_text_len: usize, len: usize) -> Self {
        let mut seq = Self::from_caption(caption, max_text_len);
        while seq.ids.len() < len.min(max_text_len) {
            seq.ids.push(tokens::PAD);
            seq.mask.push(false);
        }
        seq
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Region features feeding the visual stream: one row per proposal plus the
/// matching 5-d spatial encoding (corners + area fraction).
#[derive(Debug, Clone)]
pub struct RegionInput {
    pub features: Mat,
    pub spatial: Mat,
}

impl RegionInput {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Node handles produced by one forward pass. Fields are `None` when the
/// architecture does not produce that stream.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub text_states: Option<NodeId>,
    pub visual_states: Option<NodeId>,
    pub h_txt: Option<NodeId>,
    pub h_img: Option<NodeId>,
    pub ctr_txt: Option<NodeId>,
    pub ctr_img: Option<NodeId>,
    pub joint: Option<NodeId>,
    /// Softmax nodes of every attention head, for invariant checks.
    pub attn_weights: Vec<NodeId>,
}

/// Plain-value outputs for inference.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub text_states: Option<Mat>,
    pub visual_states: Option<Mat>,
    pub h_txt: Option<Vec<f64>>,
    pub h_img: Option<Vec<f64>>,
    pub ctr_txt: Option<Vec<f64>>,
    pub ctr_img: Option<Vec<f64>>,
    pub joint: Option<Vec<f64>>,
}

/// L2-normalized retrieval vector for one (sample, proposal) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEmbedding {
    pub vector: Vec<f64>,
    /// (sample id, proposal index) the vector was encoded from.
    pub source: (u64, usize),
}

pub struct CaptureModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl CaptureModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "model-init", 0);
        let mut p = ParamSet::new();
        let d = config.d_model;

        let linear = |p: &mut ParamSet, rng: &mut _, name: &str, inp: usize, out: usize| {
            p.insert(&format!("{name}.w"), gaussian(rng, inp, out, INIT_STD));
            p.insert(&format!("{name}.b"), Mat::zeros((1, out)));
        };
        let ln = |p: &mut ParamSet, name: &str, width: usize| {
            p.insert(&format!("{name}.g"), Mat::from_elem((1, width), 1.0));
            p.insert(&format!("{name}.b"), Mat::zeros((1, width)));
        };
        let attn = |p: &mut ParamSet, rng: &mut _, name: &str| {
            for part in ["wq", "wk", "wv", "wo"] {
                p.insert(&format!("{name}.{part}"), gaussian(rng, d, d, INIT_STD));
            }
            for part in ["bq", "bk", "bv", "bo"] {
                p.insert(&format!("{name}.{part}"), Mat::zeros((1, d)));
            }
        };
        let ff = |p: &mut ParamSet, rng: &mut _, name: &str| {
            p.insert(&format!("{name}.w1"), gaussian(rng, d, config.d_ff, INIT_STD));
            p.insert(&format!("{name}.b1"), Mat::zeros((1, config.d_ff)));
            p.insert(&format!("{name}.w2"), gaussian(rng, config.d_ff, d, INIT_STD));
            p.insert(&format!("{name}.b2"), Mat::zeros((1, d)));
        };
        let intra = |p: &mut ParamSet, rng: &mut _, name: &str| {
            ln(p, &format!("{name}.ln1"), d);
            attn(p, rng, &format!("{name}.attn"));
            ln(p, &format!("{name}.ln2"), d);
            ff(p, rng, &format!("{name}.ff"));
        };

        if config.uses_text() {
            p.insert("embed.tok", gaussian(&mut rng, config.vocab_size, d, INIT_STD));
            p.insert("embed.pos", gaussian(&mut rng, config.max_text_len, d, INIT_STD));
            ln(&mut p, "embed.txt_ln", d);
        }
        if config.uses_visual() {
            p.insert("embed.img_tok", gaussian(&mut rng, 1, d, INIT_STD));
            p.insert("embed.vis_feat.w", gaussian(&mut rng, config.d_v, d, INIT_STD));
            p.insert("embed.vis_spat.w", gaussian(&mut rng, 5, d, INIT_STD));
            p.insert("embed.vis.b", Mat::zeros((1, d)));
            ln(&mut p, "embed.vis_ln", d);
        }
        if config.uses_text() {
            for l in 0..config.l_intra {
                intra(&mut p, &mut rng, &format!("txt.l{l}"));
            }
        }
        if config.uses_visual() {
            for l in 0..config.l_intra {
                intra(&mut p, &mut rng, &format!("vis.l{l}"));
            }
        }
        if config.arch == ModelArch::Hybrid {
            for k in 0..config.k_cross {
                for half in ["txt", "vis"] {
                    let name = format!("cross{k}.{half}");
                    ln(&mut p, &format!("{name}.ln_q"), d);
                    ln(&mut p, &format!("{name}.ln_kv"), d);
                    attn(&mut p, &mut rng, &format!("{name}.attn"));
                    ln(&mut p, &format!("{name}.ln2"), d);
                    ff(&mut p, &mut rng, &format!("{name}.ff"));
                }
            }
            for h in 0..config.h_co {
                intra(&mut p, &mut rng, &format!("co{h}"));
            }
        }
        if config.uses_text() {
            ln(&mut p, "final_txt_ln", d);
            linear(&mut p, &mut rng, "head.ctr_txt", d, config.d_head_out);
            linear(&mut p, &mut rng, "dec.mlm", d, config.vocab_size);
        }
        if config.uses_visual() {
            ln(&mut p, "final_vis_ln", d);
            linear(&mut p, &mut rng, "head.ctr_img", d, config.d_head_out);
            linear(&mut p, &mut rng, "dec.mrp", d, config.d_v);
        }
        if config.arch == ModelArch::Hybrid {
            linear(&mut p, &mut rng, "head.joint", d, config.d_head_out);
            linear(&mut p, &mut rng, "dec.itm", config.d_head_out, 2);
        }

        debug_assert_eq!(p.element_count(), config.param_count());
        Ok(CaptureModel { config, params: p })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    /// Text embedding: token rows plus learned positions, layer-normed.
    fn embed_text(&self, g: &mut Graph, seq: &TokenSequence) -> Result<NodeId> {
        for &id in &seq.ids {
            if id as usize >= self.config.vocab_size {
                return Err(CoreError::Input(format!(
                    "token id {id} out of range (vocab {})",
                    self.config.vocab_size
                )));
            }
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let tok_table = g.p("embed.tok");
        let tok = g.tape.gather_rows(tok_table, &ids);
        let pos_table = g.p("embed.pos");
        let pos = g.tape.slice_rows(pos_table, 0, ids.len());
        let sum = g.tape.add(tok, pos);
        let gamma = g.p("embed.txt_ln.g");
        let beta = g.p("embed.txt_ln.b");
        Ok(g.tape.layer_norm(sum, gamma, beta))
    }

    /// Visual embedding: projected region feature + projected spatial code,
    /// prefixed with the learned [IMG] row, layer-normed.
    fn embed_visual(&self, g: &mut Graph, regions: &RegionInput) -> Result<NodeId> {
        if regions.is_empty() {
            return Err(CoreError::Input("empty region set".into()));
        }
        if regions.features.ncols() != self.config.d_v
            || regions.spatial.ncols() != 5
            || regions.spatial.nrows() != regions.features.nrows()
        {
            return Err(CoreError::Input(format!(
                "region input shape mismatch: features {:?}, spatial {:?}, d_v {}",
                regions.features.dim(),
                regions.spatial.dim(),
                self.config.d_v
            )));
        }
        if regions.features.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Input("non-finite region feature".into()));
        }
        let feats = g.tape.leaf(regions.features.clone());
        let spat = g.tape.leaf(regions.spatial.clone());
        let wf = g.p("embed.vis_feat.w");
        let ws = g.p("embed.vis_spat.w");
        let b = g.p("embed.vis.b");
        let pf = g.tape.matmul(feats, wf);
        let ps = g.tape.matmul(spat, ws);
        let sum = g.tape.add(pf, ps);
        let sum = g.tape.add_row(sum, b);
        let img_tok = g.p("embed.img_tok");
        let with_img = g.tape.concat_rows(&[img_tok, sum]);
        let gamma = g.p("embed.vis_ln.g");
        let beta = g.p("embed.vis_ln.b");
        Ok(g.tape.layer_norm(with_img, gamma, beta))
    }

    /// Full forward pass on a tape. `regions` may be anything for a
    /// text-only model (it is ignored), and `tokens` likewise for a
    /// visual-only model.
    pub fn forward(
        &self,
        g: &mut Graph,
        seq: &TokenSequence,
        regions: &RegionInput,
        drop: &mut Dropouts<'_>,
    ) -> Result<ModelOutputs> {
        let cfg = &self.config;
        let mut attn_weights = Vec::new();

        // Truncate over-length text, keeping [CLS].
        let seq_owned;
        let seq = if cfg.uses_text() && seq.len() > cfg.max_text_len {
            seq_owned = TokenSequence {
                ids: seq.ids[..cfg.max_text_len].to_vec(),
                mask: seq.mask[..cfg.max_text_len].to_vec(),
            };
            &seq_owned
        } else {
            seq
        };

        let txt_mask: Option<Vec<bool>> = if cfg.uses_text() && seq.mask.iter().any(|&m| !m) {
            Some(seq.mask.clone())
        } else {
            None
        };

        let mut text = if cfg.uses_text() {
            Some(self.embed_text(g, seq)?)
        } else {
            None
        };
        let mut visual = if cfg.uses_visual() {
            Some(self.embed_visual(g, regions)?)
        } else {
            None
        };

        for l in 0..cfg.l_intra {
            if let Some(t) = text {
                let b = intra_block(
                    g,
                    &format!("txt.l{l}"),
                    t,
                    txt_mask.as_deref(),
                    cfg.n_heads,
                    drop,
                );
                attn_weights.extend(&b.attn_weights);
                text = Some(b.out);
            }
            if let Some(v) = visual {
                let b = intra_block(g, &format!("vis.l{l}"), v, None, cfg.n_heads, drop);
                attn_weights.extend(&b.attn_weights);
                visual = Some(b.out);
            }
        }

        // Contrastive features: pooled special tokens at depth L, before any
        // cross-modal mixing.
        let ctr_txt = text.map(|t| {
            let pooled = g.tape.slice_rows(t, 0, 1);
            head(g, "head.ctr_txt", pooled)
        });
        let ctr_img = visual.map(|v| {
            let pooled = g.tape.slice_rows(v, 0, 1);
            head(g, "head.ctr_img", pooled)
        });

        if cfg.arch == ModelArch::Hybrid {
            let (mut t, mut v) = (text.unwrap(), visual.unwrap());
            for k in 0..cfg.k_cross {
                let (nt, nv) = cross_block(
                    g,
                    &format!("cross{k}"),
                    t,
                    v,
                    txt_mask.as_deref(),
                    None,
                    cfg.n_heads,
                    drop,
                );
                t = nt;
                v = nv;
            }
            for h in 0..cfg.h_co {
                let (nt, nv, weights) = co_block(
                    g,
                    &format!("co{h}"),
                    t,
                    v,
                    txt_mask.as_deref(),
                    None,
                    cfg.n_heads,
                    drop,
                );
                attn_weights.extend(&weights);
                t = nt;
                v = nv;
            }
            text = Some(t);
            visual = Some(v);
        }

        let text = match text {
            Some(t) => {
                let gm = g.p("final_txt_ln.g");
                let bt = g.p("final_txt_ln.b");
                Some(g.tape.layer_norm(t, gm, bt))
            }
            None => None,
        };
        let visual = match visual {
            Some(v) => {
                let gm = g.p("final_vis_ln.g");
                let bt = g.p("final_vis_ln.b");
                Some(g.tape.layer_norm(v, gm, bt))
            }
            None => None,
        };

        let h_txt = text.map(|t| g.tape.slice_rows(t, 0, 1));
        let h_img = visual.map(|v| g.tape.slice_rows(v, 0, 1));
        let joint = match (cfg.arch, h_txt, h_img) {
            (ModelArch::Hybrid, Some(ht), Some(hi)) => {
                let prod = g.tape.mul(hi, ht);
                Some(head(g, "head.joint", prod))
            }
            _ => None,
        };

        Ok(ModelOutputs {
            text_states: text,
            visual_states: visual,
            h_txt,
            h_img,
            ctr_txt,
            ctr_img,
            joint,
            attn_weights,
        })
    }

    /// Inference-mode forward: runs the tape and extracts plain values.
    pub fn forward_eval(&self, seq: &TokenSequence, regions: &RegionInput) -> Result<EvalOutputs> {
        let mut g = self.graph();
        let out = self.forward(&mut g, seq, regions, &mut Dropouts::eval())?;
        let row = |id: Option<NodeId>| id.map(|i| g.tape.value(i).row(0).to_vec());
        Ok(EvalOutputs {
            text_states: out.text_states.map(|i| g.tape.value(i).clone()),
            visual_states: out.visual_states.map(|i| g.tape.value(i).clone()),
            h_txt: row(out.h_txt),
            h_img: row(out.h_img),
            ctr_txt: row(out.ctr_txt),
            ctr_img: row(out.ctr_img),
            joint: row(out.joint),
        })
    }

    /// Compose and L2-normalize the retrieval vector. With `concat` the
    /// vector is [joint ; ctr_img ⊙ ctr_txt] (2·d_head_out); without it only
    /// the joint half is used. Unimodal baselines use their contrastive head.
    pub fn instance_embedding(
        &self,
        out: &EvalOutputs,
        concat: bool,
        source: (u64, usize),
    ) -> Result<InstanceEmbedding> {
        let mut vector = match self.config.arch {
            ModelArch::Hybrid => {
                let joint = out
                    .joint
                    .as_ref()
                    .ok_or_else(|| CoreError::Input("missing joint output".into()))?;
                if concat {
                    let ci = out.ctr_img.as_ref().unwrap();
                    let ct = out.ctr_txt.as_ref().unwrap();
                    let mut v = joint.clone();
                    v.extend(ci.iter().zip(ct.iter()).map(|(a, b)| a * b));
                    v
                } else {
                    joint.clone()
                }
            }
            ModelArch::TextOnly => out
                .ctr_txt
                .clone()
                .ok_or_else(|| CoreError::Input("missing text output".into()))?,
            ModelArch::VisualOnly => out
                .ctr_img
                .clone()
                .ok_or_else(|| CoreError::Input("missing visual output".into()))?,
        };
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(CoreError::Numeric(
                "zero-norm vector before embedding normalization".into(),
            ));
        }
        for v in &mut vector {
            *v /= norm;
        }
        Ok(InstanceEmbedding { vector, source })
    }
}

/// Whole-image fallback region input of the right width, used by tests and
/// by text-only paths that still need a placeholder.
pub fn whole_image_region(d_v: usize) -> RegionInput {
    RegionInput {
        features: Mat::zeros((1, d_v)),
        spatial: Array2::from_shape_vec((1, 5), vec![0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
    }
}
