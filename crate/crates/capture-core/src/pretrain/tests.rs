use ndarray::Array2;

use super::losses::{contrastive_loss, mlm_loss, mrp_loss};
use super::*;
use crate::corpus::{build_dataset, CaptionNoise, CorpusConfig, SplitSizes};
use crate::model::autograd::Mat;
use crate::model::{CaptureModel, ModelArch, ModelConfig};
use crate::proposer::{Proposer, ProposerConfig, ProposerMode};
use crate::rng::rng_for;

fn tiny_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        arch: ModelArch::Hybrid,
        l_intra: 1,
        k_cross: 1,
        h_co: 1,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        d_head_out: 16,
        vocab_size: vocab,
        max_text_len: 24,
        d_v: 16,
        dropout_prob: 0.0,
        seed: 1,
    }
}

fn batch_item(seed: u64, caption: &[u32], r: usize) -> BatchItem {
    use rand::Rng;
    let mut rng = rng_for(seed, "pretrain-test", 0);
    let features = Mat::from_shape_fn((r, 16), |_| rng.random::<f64>());
    let spatial = Mat::from_shape_fn((r, 5), |(_, j)| if j < 4 { rng.random::<f64>() } else { 0.1 });
    BatchItem {
        sample_id: seed,
        tokens: crate::model::TokenSequence::from_caption(caption, 24),
        regions: crate::proposer::RegionSet {
            boxes: vec![crate::corpus::BBox::whole_image(); r],
            features,
            spatial,
            degenerate: vec![false; r],
        },
        matched: true,
    }
}

fn toy_pretrain(seed: u64) -> PretrainConfig {
    PretrainConfig::toy(seed)
}

#[test]
fn default_temperature_matches_reference_setting() {
    assert_eq!(toy_pretrain(0).temperature, 0.07);
    assert_eq!(toy_pretrain(0).mask_prob, 0.15);
    assert_eq!(toy_pretrain(0).mlm_corruption, (0.8, 0.1, 0.1));
}

#[test]
fn mask_prob_zero_is_a_no_op() {
    let mut cfg = toy_pretrain(3);
    cfg.mask_prob = 0.0;
    cfg.loss_switches = LossSwitches {
        mlm: false,
        mrp: false,
        ctr: true,
        itm: false,
    };
    let items = vec![batch_item(1, &[6, 7, 8], 3)];
    let mut rng = rng_for(3, "m", 0);
    let masked = mask_batch(&items, &cfg, 120, &mut rng).unwrap();
    let m = &masked.items[0];
    assert_eq!(m.tokens.ids, items[0].tokens.ids);
    assert!(m.text_positions.is_empty());
    assert!(m.region_positions.is_empty());
    assert_eq!(m.regions.features, items[0].regions.features);
}

#[test]
fn mask_prob_one_masks_every_eligible_token() {
    let mut cfg = toy_pretrain(4);
    cfg.mask_prob = 0.999_999_999;
    cfg.mlm_corruption = (1.0, 0.0, 0.0);
    let items = vec![batch_item(2, &[6, 7, 8, 9], 2)];
    let mut rng = rng_for(4, "m", 0);
    let masked = mask_batch(&items, &cfg, 120, &mut rng).unwrap();
    let m = &masked.items[0];
    assert_eq!(m.tokens.ids[0], crate::tokens::CLS, "[CLS] untouched");
    for &id in &m.tokens.ids[1..] {
        assert_eq!(id, crate::tokens::MASK);
    }
    assert_eq!(m.text_targets, vec![6, 7, 8, 9]);
    // Every region feature row is zeroed, originals kept as targets.
    assert!(m.regions.features.iter().all(|&v| v == 0.0));
    assert_eq!(m.region_targets.nrows(), 2);
    assert_eq!(m.region_targets, items[0].regions.features);
}

#[test]
fn masked_fraction_concentrates_around_mask_prob() {
    let cfg = toy_pretrain(5);
    let caption: Vec<u32> = (0..20).map(|i| 6 + (i % 40)).collect();
    let items: Vec<BatchItem> = (0..500).map(|i| batch_item(i, &caption, 2)).collect();
    let mut rng = rng_for(5, "m", 0);
    let masked = mask_batch(&items, &cfg, 120, &mut rng).unwrap();
    let eligible = 500 * 20;
    let fraction = masked.total_text_masked() as f64 / eligible as f64;
    assert!(
        (fraction - 0.15).abs() <= 0.02,
        "masked fraction {fraction} outside 0.15 +/- 0.02"
    );
}

#[test]
fn masking_round_trip_restores_originals() {
    let cfg = toy_pretrain(6);
    let items = vec![batch_item(7, &[10, 11, 12, 13, 14, 15], 4)];
    let mut rng = rng_for(6, "m", 0);
    let masked = mask_batch(&items, &cfg, 120, &mut rng).unwrap();
    let m = &masked.items[0];
    assert!(!m.text_positions.is_empty(), "re-draw guarantees >= 1");
    assert!(!m.region_positions.is_empty());
    // Restore: targets at masked positions reproduce the originals.
    let mut ids = m.tokens.ids.clone();
    for (&p, &t) in m.text_positions.iter().zip(m.text_targets.iter()) {
        ids[p] = t;
    }
    assert_eq!(ids, items[0].tokens.ids);
    let mut feats = m.regions.features.clone();
    for (row, &p) in m.region_positions.iter().enumerate() {
        feats.row_mut(p).assign(&m.region_targets.row(row));
    }
    assert_eq!(feats, items[0].regions.features);
    // Indicators line up with positions.
    for (i, &flag) in m.text_masked.iter().enumerate() {
        assert_eq!(flag, m.text_positions.contains(&i));
    }
    // Unmasked positions unchanged.
    for i in 0..ids.len() {
        if !m.text_masked[i] {
            assert_eq!(m.tokens.ids[i], items[0].tokens.ids[i]);
        }
    }
}

#[test]
fn mlm_uniform_decoder_gives_log_vocab() {
    let mut cfg = tiny_model_config(100);
    cfg.d_v = 16;
    let mut model = CaptureModel::new(cfg).unwrap();
    model.params.get_mut("dec.mlm.w").fill(0.0);
    model.params.get_mut("dec.mlm.b").fill(0.0);
    let mut g = model.graph();
    use rand::Rng;
    let mut rng = rng_for(8, "s", 0);
    let states = g.tape.leaf(Mat::from_shape_fn((5, 32), |_| rng.random::<f64>()));
    let positions = vec![1usize, 3];
    let loss = mlm_loss(&mut g, &[(states, &positions)], &[7, 50]).unwrap();
    let expected = 100.0f64.ln();
    assert!((g.tape.scalar(loss) - expected).abs() < 1e-12);
}

#[test]
fn mlm_certain_prediction_drives_loss_to_zero() {
    let mut tape = crate::model::autograd::Tape::new();
    let logits = tape.leaf(Array2::from_shape_fn((1, 50), |(_, j)| {
        if j == 13 {
            1000.0
        } else {
            0.0
        }
    }));
    let loss = tape.softmax_xent(logits, vec![13]);
    assert!(tape.scalar(loss).abs() < 1e-12);
}

#[test]
fn mlm_ignores_unmasked_positions() {
    let cfg = tiny_model_config(60);
    let model = CaptureModel::new(cfg).unwrap();
    let positions = vec![2usize];
    let targets = [9u32];
    let eval = |unmasked_fill: f64| {
        let mut g = model.graph();
        let states = g.tape.leaf(Mat::from_shape_fn((4, 32), |(r, c)| {
            if r == 2 {
                (c as f64) * 0.01
            } else {
                unmasked_fill
            }
        }));
        let loss = mlm_loss(&mut g, &[(states, &positions)], &targets).unwrap();
        g.tape.scalar(loss)
    };
    assert_eq!(eval(0.0), eval(123.456));
}

#[test]
fn mlm_empty_positions_returns_none() {
    let cfg = tiny_model_config(60);
    let model = CaptureModel::new(cfg).unwrap();
    let mut g = model.graph();
    let states = g.tape.leaf(Mat::zeros((3, 32)));
    let positions: Vec<usize> = vec![];
    assert!(mlm_loss(&mut g, &[(states, &positions)], &[]).is_none());
}

#[test]
fn mrp_exact_prediction_is_zero_and_unit_offset_is_one() {
    let cfg = tiny_model_config(60);
    let model = CaptureModel::new(cfg).unwrap();

    // Craft a head that reproduces a constant target row exactly.
    let mut model = model;
    model.params.get_mut("dec.mrp.w").fill(0.0);
    {
        let b = model.params.get_mut("dec.mrp.b");
        b.fill(0.25);
    }
    let mut g = model.graph();
    let states = g.tape.leaf(Mat::zeros((3, 32)));
    let positions = vec![0usize, 1];
    let target = Mat::from_elem((2, 16), 0.25);
    let loss = mrp_loss(&mut g, &[(states, &positions)], target).unwrap();
    assert!(g.tape.scalar(loss).abs() < 1e-12);

    // Prediction minus target equal to all-ones gives MSE exactly 1.
    let mut g = model.graph();
    let states = g.tape.leaf(Mat::zeros((3, 32)));
    let target = Mat::from_elem((2, 16), 0.25 - 1.0);
    let loss = mrp_loss(&mut g, &[(states, &positions)], target).unwrap();
    assert!((g.tape.scalar(loss) - 1.0).abs() < 1e-12);
}

#[test]
fn contrastive_single_pair_is_zero() {
    let img = Mat::from_shape_vec((1, 4), vec![0.3, -0.7, 0.2, 0.9]).unwrap();
    let txt = Mat::from_shape_vec((1, 4), vec![-0.5, 0.1, 0.8, 0.2]).unwrap();
    let loss = contrastive_loss(&img, &txt, 0.07).unwrap();
    assert!(loss.abs() < 1e-9, "N=1 loss must be exactly 0, got {loss}");
}

#[test]
fn contrastive_orthogonal_pairs_match_hand_value() {
    // img1 = txt1 = e1, img2 = txt2 = e2, tau = 1: every anchor sees
    // similarities (1, 0, 0) against 3 others, so the per-anchor loss is
    // -log(e / (e + 2)) = ln(1 + 2/e).
    let img = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let txt = img.clone();
    let loss = contrastive_loss(&img, &txt, 1.0).unwrap();
    let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
    assert!(
        (loss - expected).abs() < 1e-9,
        "loss {loss} vs hand value {expected}"
    );
}

#[test]
fn contrastive_is_scale_invariant_per_embedding() {
    use rand::Rng;
    let mut rng = rng_for(9, "ctr", 0);
    let img = Mat::from_shape_fn((4, 8), |_| rng.random::<f64>() - 0.5);
    let txt = Mat::from_shape_fn((4, 8), |_| rng.random::<f64>() - 0.5);
    let base = contrastive_loss(&img, &txt, 0.2).unwrap();
    let mut scaled = img.clone();
    for c in 0..8 {
        scaled[[2, c]] *= 37.5;
    }
    let after = contrastive_loss(&scaled, &txt, 0.2).unwrap();
    assert!((base - after).abs() < 1e-9);
}

#[test]
fn contrastive_is_rotation_invariant_and_symmetric() {
    use rand::Rng;
    let mut rng = rng_for(10, "ctr", 0);
    let img = Mat::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
    let txt = Mat::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
    let base = contrastive_loss(&img, &txt, 0.31).unwrap();

    // Common rotation: product of Givens rotations.
    let mut rot = Mat::eye(4);
    for &(i, j, theta) in &[(0usize, 2usize, 0.7f64), (1, 3, -1.2), (0, 1, 2.4)] {
        let mut g = Mat::eye(4);
        g[[i, i]] = theta.cos();
        g[[j, j]] = theta.cos();
        g[[i, j]] = -theta.sin();
        g[[j, i]] = theta.sin();
        rot = rot.dot(&g);
    }
    let rimg = img.dot(&rot);
    let rtxt = txt.dot(&rot);
    assert!((contrastive_loss(&rimg, &rtxt, 0.31).unwrap() - base).abs() < 1e-9);

    // Swapping the modalities leaves the mean loss unchanged.
    assert!((contrastive_loss(&txt, &img, 0.31).unwrap() - base).abs() < 1e-9);
}

#[test]
fn itm_uniform_head_gives_log_two() {
    let cfg = tiny_model_config(60);
    let mut model = CaptureModel::new(cfg).unwrap();
    model.params.get_mut("dec.itm.w").fill(0.0);
    model.params.get_mut("dec.itm.b").fill(0.0);
    let mut g = model.graph();
    let j1 = g.tape.leaf(Mat::from_elem((1, 16), 0.3));
    let j2 = g.tape.leaf(Mat::from_elem((1, 16), -0.8));
    let loss = super::losses::itm_loss(&mut g, &[j1, j2], &[true, false]);
    assert!((g.tape.scalar(loss) - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn all_losses_off_is_a_config_error() {
    let mut cfg = toy_pretrain(11);
    cfg.loss_switches = LossSwitches {
        mlm: false,
        mrp: false,
        ctr: false,
        itm: false,
    };
    assert!(matches!(
        cfg.validate(ModelArch::Hybrid),
        Err(crate::error::CoreError::Config(_))
    ));
}

#[test]
fn unimodal_arch_restricts_losses() {
    let mut cfg = toy_pretrain(12);
    cfg.loss_switches = LossSwitches {
        mlm: true,
        mrp: false,
        ctr: false,
        itm: false,
    };
    assert!(cfg.validate(ModelArch::TextOnly).is_ok());
    cfg.loss_switches.ctr = true;
    assert!(cfg.validate(ModelArch::TextOnly).is_err());
}

/// Smoke criterion: 50 toy steps reduce the total loss, median over 5
/// seeds.
#[test]
fn short_training_reduces_loss() {
    let mut corpus = CorpusConfig::toy(0);
    corpus.split_sizes = SplitSizes {
        train: 80,
        val: 4,
        test: 6,
        gallery: 20,
    };
    corpus.caption_noise = CaptionNoise {
        abbreviation_prob: 0.2,
        irrelevant_token_prob: 0.1,
        drop_product_mention_prob: 0.1,
    };

    let mut improvements = Vec::new();
    for seed in 0..5u64 {
        let mut c = corpus.clone();
        c.seed = seed;
        let bundle = build_dataset(&c).unwrap();
        let mut mcfg = tiny_model_config(bundle.vocab.size());
        mcfg.seed = seed;
        let mut model = CaptureModel::new(mcfg).unwrap();
        let mut pcfg = toy_pretrain(seed);
        pcfg.batch_size = 8;
        pcfg.epochs = 5; // 10 batches/epoch x 5 epochs = 50 steps
        pcfg.learning_rate = 1e-3;
        let mut prop_cfg = ProposerConfig::new(ProposerMode::Heuristic, seed);
        prop_cfg.d_v = 16;
        prop_cfg.grid = 3;
        let proposer = Proposer::new(prop_cfg).unwrap();
        let report = train(&mut model, &bundle, &pcfg, &proposer, None).unwrap();
        assert_eq!(report.steps, 50);
        let first = report.loss_curve.first().unwrap().total;
        let last = report.loss_curve.last().unwrap().total;
        improvements.push(last < first);
    }
    let wins = improvements.iter().filter(|&&w| w).count();
    assert!(wins >= 3, "loss decreased in only {wins}/5 seeds");
}

#[test]
fn training_is_deterministic() {
    let mut corpus = CorpusConfig::toy(1);
    corpus.split_sizes = SplitSizes {
        train: 24,
        val: 4,
        test: 6,
        gallery: 20,
    };
    let bundle = build_dataset(&corpus).unwrap();
    let run = || {
        let mut mcfg = tiny_model_config(bundle.vocab.size());
        mcfg.seed = 5;
        let mut model = CaptureModel::new(mcfg).unwrap();
        let mut pcfg = toy_pretrain(5);
        pcfg.batch_size = 8;
        pcfg.epochs = 1;
        let mut prop_cfg = ProposerConfig::new(ProposerMode::Heuristic, 5);
        prop_cfg.d_v = 16;
        prop_cfg.grid = 3;
        let proposer = Proposer::new(prop_cfg).unwrap();
        let report = train(&mut model, &bundle, &pcfg, &proposer, None).unwrap();
        (
            report.loss_curve.iter().map(|r| r.total).collect::<Vec<_>>(),
            model.params.get("head.joint.w").clone(),
        )
    };
    let (curve_a, w_a) = run();
    let (curve_b, w_b) = run();
    assert_eq!(curve_a, curve_b);
    assert_eq!(w_a, w_b);
}
