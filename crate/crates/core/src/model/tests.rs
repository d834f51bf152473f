use super::*;
use crate::data::tokenizer::{EOT, PAD};
use crate::data::{SyntheticSpec, Tokenizer};
use crate::masking::{sample_mask, MaskPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> ModelConfig {
    ModelConfig::default()
}

fn random_patches(rng: &mut ChaCha8Rng, cfg: &ModelConfig, b: usize) -> Tensor<f64> {
    let n = b * cfg.n_patches() * cfg.patch_dim();
    let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![b * cfg.n_patches(), cfg.patch_dim()], data).unwrap()
}

fn model(seed: u64) -> (RilsModel<f64>, crate::data::WordTokenizer) {
    let spec = SyntheticSpec::default();
    let tok = spec.tokenizer(desk().max_len);
    (RilsModel::init(&desk(), tok.vocab_size(), ReconSpace::Language, seed), tok)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn parameter_inventory() {
    let (m, _) = model(0);
    let names = m.params.names();
    assert!(names.contains(&"decoder.mask_token"));
    assert!(!names.contains(&"prototypes"));
    assert!(!m.params.get("vision.blocks.0.ln1.g").unwrap().decay);
    assert!(m.params.get("head.theta.w").unwrap().decay);
    assert!(!m.params.get("logit_scale").unwrap().decay);
    assert!((m.sigma() - 0.07).abs() < 1e-12);
    let p = RilsModel::init(&desk(), 10, ReconSpace::Prototype, 0);
    assert_eq!(p.params.get("prototypes").unwrap().value.shape(), &[64, 32]);
}

#[test]
fn init_statistics() {
    let (m, _) = model(1);
    let w = &m.params.get("vision.blocks.0.fc1.w").unwrap().value;
    assert!(w.data().iter().all(|v| v.abs() <= 0.04));
    let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.numel() as f64;
    // Truncation at two standard deviations shrinks the std by about 12%.
    assert!((var.sqrt() - 0.0176).abs() < 0.001, "{}", var.sqrt());
    assert!(m.params.get("text.ln.g").unwrap().value.data().iter().all(|&v| v == 1.0));
    assert!(m.params.get("vision.patch.b").unwrap().value.data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_encoder_shapes_and_unit_norms() {
    let (m, _) = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let patches = random_patches(&mut rng, &m.config, 3);
    let mut fwd = m.forward(false);
    let e = fwd.vision_encode_full(&patches).unwrap();
    assert_eq!(fwd.tape.value(e.feats).shape(), &[48, 64]);
    assert_eq!(fwd.tape.value(e.global).shape(), &[3, 32]);
    assert_eq!(fwd.tape.value(e.patch_proj).shape(), &[48, 32]);
    for v in [e.global, e.patch_proj] {
        let t = fwd.tape.value(v);
        for r in 0..t.rows() {
            let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn global_embedding_unit_norm_over_random_draws() {
    let cfg = ModelConfig {
        vision_depth: 1,
        ..desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for draw in 0..100 {
        let m = RilsModel::init(&cfg, 8, ReconSpace::Language, draw);
        let patches = random_patches(&mut rng, &cfg, 1);
        let mut fwd = m.forward(false);
        let e = fwd.vision_encode_full(&patches).unwrap();
        let z = fwd.tape.value(e.global);
        let n = z.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn encoding_is_deterministic() {
    let (m, _) = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patches = random_patches(&mut rng, &m.config, 2);
    let run = || {
        let mut fwd = m.forward(false);
        let e = fwd.vision_encode_full(&patches).unwrap();
        fwd.tape.value(e.global).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn wrong_patch_layout_is_config_error() {
    let (m, _) = model(0);
    let mut fwd = m.forward(false);
    let bad = Tensor::zeros(&[16, 100]);
    assert!(matches!(fwd.vision_encode_full(&bad), Err(Error::Config { .. })));
}

#[test]
fn masked_encoder_cardinality_and_degenerate_mask() {
    let (m, _) = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patches = random_patches(&mut rng, &m.config, 2);
    let plans: Vec<MaskPlan> = (0..2).map(|_| sample_mask(16, 0.75, &mut rng).unwrap()).collect();
    let mut fwd = m.forward(false);
    let v = fwd.vision_encode_masked(&patches, &plans).unwrap();
    assert_eq!(fwd.tape.value(v).shape(), &[8, 64]);

    let plans: Vec<MaskPlan> = (0..2).map(|_| sample_mask(16, 0.0, &mut rng).unwrap()).collect();
    let v = fwd.vision_encode_masked(&patches, &plans).unwrap();
    let full = fwd.vision_encode_full(&patches).unwrap();
    let (vt, ft) = (fwd.tape.value(v).clone(), fwd.tape.value(full.feats).clone());
    for (b, p) in plans.iter().enumerate() {
        for (j, &k) in p.encoder_order().iter().enumerate() {
            assert!(max_diff(vt.row(b * 16 + j), ft.row(b * 16 + k)) < 1e-12);
        }
    }
}

#[test]
fn masked_pixels_do_not_reach_masked_encoder() {
    let (m, _) = model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let patches = random_patches(&mut rng, &m.config, 1);
    let plan = sample_mask(16, 0.75, &mut rng).unwrap();
    let mut changed = patches.clone();
    let pd = m.config.patch_dim();
    for &k in plan.masked() {
        for v in &mut changed.data_mut()[k * pd..(k + 1) * pd] {
            *v = 1.0 - *v;
        }
    }
    let run = |p: &Tensor<f64>| {
        let mut fwd = m.forward(false);
        let v = fwd.vision_encode_masked(p, std::slice::from_ref(&plan)).unwrap();
        fwd.tape.value(v).clone()
    };
    assert_eq!(run(&patches), run(&changed));
}

#[test]
fn plan_mismatch_is_contract_error() {
    let (m, _) = model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let patches = random_patches(&mut rng, &m.config, 1);
    let plan = sample_mask(9, 0.5, &mut rng).unwrap();
    let mut fwd = m.forward(false);
    assert!(matches!(fwd.vision_encode_masked(&patches, &[plan]), Err(Error::Contract(_))));
}

#[test]
fn decoder_covers_all_positions_and_ignores_shuffle_order() {
    let (m, _) = model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let patches = random_patches(&mut rng, &m.config, 1);
    let plan = sample_mask(16, 0.75, &mut rng).unwrap();
    let mut other = plan.shuffle().to_vec();
    other[..4].reverse();
    other[4..].rotate_left(3);
    let plan2 = MaskPlan::from_shuffle(other, 4).unwrap();
    assert_eq!((plan.visible(), plan.masked()), (plan2.visible(), plan2.masked()));
    assert_ne!(plan.shuffle(), plan2.shuffle());
    let run = |p: &MaskPlan| {
        let mut fwd = m.forward(false);
        let v = fwd.vision_encode_masked(&patches, std::slice::from_ref(p)).unwrap();
        let d = fwd.vision_decode(v, std::slice::from_ref(p)).unwrap();
        assert_eq!(fwd.tape.value(d.feats).rows(), 16);
        fwd.tape.value(d.patch_proj).clone()
    };
    assert!(max_diff(run(&plan).data(), run(&plan2).data()) < 1e-12);
}

#[test]
fn decoder_visible_rows_must_match() {
    let (m, _) = model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plan = sample_mask(16, 0.75, &mut rng).unwrap();
    let mut fwd = m.forward(false);
    let v = fwd.tape.constant(Tensor::zeros(&[5, 64]));
    assert!(matches!(fwd.vision_decode(v, &[plan]), Err(Error::Contract(_))));
}

#[test]
fn mask_token_receives_gradient() {
    let (m, _) = model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let patches = random_patches(&mut rng, &m.config, 2);
    let plans: Vec<MaskPlan> = (0..2).map(|_| sample_mask(16, 0.75, &mut rng).unwrap()).collect();
    let mut fwd = m.forward(true);
    let v = fwd.vision_encode_masked(&patches, &plans).unwrap();
    let d = fwd.vision_decode(v, &plans).unwrap();
    let s = fwd.tape.sum(d.patch_proj);
    let sq = fwd.tape.mul(d.feats, d.feats).unwrap();
    let s2 = fwd.tape.sum(sq);
    let loss = fwd.tape.add(s, s2).unwrap();
    let g = fwd.tape.backward(loss).unwrap();
    let tok = fwd.param("decoder.mask_token").unwrap();
    assert!(g.get(tok).unwrap().iter().any(|&v| v != 0.0));
}

fn encode_text(m: &RilsModel<f64>, seqs: &[TokenSequence]) -> Tensor<f64> {
    let mut fwd = m.forward(false);
    let z = fwd.language_encode(seqs).unwrap();
    fwd.tape.value(z).clone()
}

#[test]
fn text_embedding_is_causal_and_unit_norm() {
    let (m, tok) = model(8);
    let s = tok.encode("a photo of a red square");
    let z = encode_text(&m, std::slice::from_ref(&s));
    let n = z.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let mut t = s.clone();
        for id in &mut t.ids[s.eot_pos + 1..] {
            *id = rng.random_range(3..tok.vocab_size() as u32);
        }
        assert_eq!(encode_text(&m, &[t]), z);
    }
}

#[test]
fn trailing_padding_does_not_matter() {
    let (m, tok) = model(9);
    let a = tok.encode("a blue circle");
    let b = tok.encode("a blue circle   ");
    assert_eq!(encode_text(&m, &[a.clone()]), encode_text(&m, &[b]));
    let mut c = a.clone();
    for id in &mut c.ids[a.eot_pos + 1..] {
        *id = PAD;
    }
    assert_eq!(encode_text(&m, &[a]), encode_text(&m, &[c]));
}

#[test]
fn missing_eot_is_tokenization_error() {
    let (m, tok) = model(0);
    let mut s = tok.encode("a red square");
    s.ids[s.eot_pos] = PAD;
    let mut fwd = m.forward(false);
    assert!(matches!(fwd.language_encode(&[s]), Err(Error::Tokenize(_))));
    let mut s = tok.encode("a red square");
    s.ids[2] = EOT;
    assert!(matches!(fwd.language_encode(&[s]), Err(Error::Tokenize(_))));
}

#[test]
fn f32_and_f64_agree() {
    let (m, tok) = model(10);
    let m32: RilsModel<f32> = m.cast();
    let s = tok.encode("a green cross");
    let z64 = encode_text(&m, std::slice::from_ref(&s));
    let mut fwd = m32.forward(false);
    let z = fwd.language_encode(&[s]).unwrap();
    let z32 = fwd.tape.value(z).to_f64_vec();
    assert!(max_diff(z64.data(), &z32) < 1e-5);
}

#[test]
fn logit_scale_clamp() {
    let (mut m, _) = model(0);
    let i = m.params.index_of("logit_scale").unwrap();
    m.params.by_index_mut(i).value.data_mut()[0] = 7.0;
    m.clamp_logit_scale();
    assert!((1.0 / m.sigma() - 100.0).abs() < 1e-9);
    m.params.by_index_mut(i).value.data_mut()[0] = 1.0;
    m.clamp_logit_scale();
    assert_eq!(m.params.by_index(i).value.item(), 1.0);
}
