use super::*;
use crate::config::ModelConfig;
use crate::data::{BatchMode, Corpus, SyntheticSpec, Tokenizer};
use crate::masking::{sample_mask, MaskPlan};
use crate::model::RilsModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    mat(&rows)
}

fn contra(zi: &Tensor<f64>, zt: &Tensor<f64>, sigma: f64) -> (f64, f64, f64) {
    let mut t = Tape::new();
    let a = t.constant(zi.clone());
    let b = t.constant(zt.clone());
    let s = t.constant(Tensor::scalar(1.0 / sigma));
    let c = contrastive_loss(&mut t, a, b, s).unwrap();
    let v = |x| t.value(x).item();
    (v(c.loss), v(c.i2t), v(c.t2i))
}

#[test]
fn contrastive_orthonormal_pair() {
    let e = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (l, a, b) = contra(&e, &e, 1.0);
    let expect = (1.0 + (-1.0f64).exp()).ln();
    assert!((l - expect).abs() < 1e-12 && (a - b).abs() < 1e-15);
    assert!((l - 0.31326).abs() < 1e-5);
}

#[test]
fn contrastive_identical_embeddings_give_ln_b() {
    for b in [1, 2, 5, 16] {
        let e = mat(&vec![vec![0.6, 0.8]; b]);
        let (l, _, _) = contra(&e, &e, 0.07);
        assert!((l - (b as f64).ln()).abs() < 1e-12, "B={b}: {l}");
    }
}

#[test]
fn contrastive_rejects_empty_batch() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[0, 4]));
    let s = t.constant(Tensor::scalar(1.0));
    assert!(matches!(contrastive_loss(&mut t, a, a, s), Err(Error::Contract(_))));
}

#[test]
fn contrastive_non_finite_logits() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(mat(&[vec![1.0, 0.0]]));
    let s = t.constant(Tensor::scalar(f64::INFINITY));
    assert!(matches!(contrastive_loss(&mut t, a, a, s), Err(Error::Numerical(_))));
}

#[test]
fn distribution_single_text_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let rows = t.constant(unit_rows(&mut rng, 5, 3));
    let zt = t.constant(unit_rows(&mut rng, 1, 3));
    let p = patch_text_distribution(&mut t, rows, zt, 0.04).unwrap();
    assert!(t.value(p).data().iter().all(|&v| v == 1.0));
}

#[test]
fn distribution_sharp_alignment() {
    let mut t = Tape::new();
    let rows = t.constant(mat(&[vec![1.0, 0.0]]));
    let zt = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let p = patch_text_distribution(&mut t, rows, zt, 0.04).unwrap();
    assert!(t.value(p).at(0, 0) >= 1.0 - 2e-11);
    let expect = 1.0 / (1.0 + (-25.0f64).exp());
    assert!((t.value(p).at(0, 0) - expect).abs() < 1e-15);
}

#[test]
fn distribution_rejects_bad_tau() {
    let mut t = Tape::<f64>::new();
    let r = t.constant(mat(&[vec![1.0]]));
    for tau in [0.0, -1.0, f64::NAN] {
        assert!(matches!(patch_text_distribution(&mut t, r, r, tau), Err(Error::Config { .. })));
    }
}

#[test]
fn matched_set_examples() {
    let eye = mat(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert_eq!(matched_set(&eye), vec![0, 1, 2]);
    assert_eq!(matched_set(&mat(&[vec![0.1, 0.9], vec![0.2, 0.8]])), vec![1]);
    assert_eq!(matched_set(&mat(&[vec![0.5, 0.5], vec![0.5, 0.5]])), vec![0, 1]);
}

#[test]
fn matched_set_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let s = unit_rows(&mut rng, 6, 6);
        let scaled = Tensor::new(vec![6, 6], s.data().iter().map(|v| v * 37.5).collect()).unwrap();
        assert_eq!(matched_set(&s), matched_set(&scaled));
    }
}

fn plans_for(b: usize, n: usize, ratio: f64, seed: u64) -> Vec<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b).map(|_| sample_mask(n, ratio, &mut rng).unwrap()).collect()
}

#[test]
fn recon_at_fixed_point_is_mean_entropy_with_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, n) = (3, 4);
    let plans = plans_for(b, n, 0.75, 1);
    let f = unit_rows(&mut rng, b * n, 5);
    let z = unit_rows(&mut rng, b, 5);
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let gv = t.leaf(f.clone(), true);
    let zv = t.constant(z.clone());
    let c = [0, 2];
    let r = soft_reconstruction(&mut t, fv, gv, zv, &plans, &c, 0.1, 0.1, None).unwrap().unwrap();
    let p = t.value(r.target).clone();
    let entropy: f64 = (0..p.rows())
        .map(|i| -p.row(i).iter().map(|&v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / p.rows() as f64;
    assert!((t.value(r.loss).item() - entropy).abs() < 1e-12);
    let g = t.backward(r.loss).unwrap();
    let gl = g.tensor(r.pred_logits);
    assert!(gl.data().iter().all(|v| v.abs() < 1e-15), "{gl:?}");
}

#[test]
fn recon_uniform_targets_give_ln_four() {
    // Every patch row orthogonal to all four texts yields uniform p and q.
    let plans = plans_for(4, 4, 0.5, 2);
    let f = mat(&vec![vec![0.0, 0.0, 0.0, 0.0, 1.0]; 16]);
    let z = mat(&[
        vec![1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 0.0],
    ]);
    let mut t = Tape::new();
    let fv = t.constant(f);
    let zv = t.constant(z);
    let l = reconstruction_loss_language(&mut t, fv, fv, zv, &plans, &[0, 1, 2, 3], 0.04, 0.04).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn recon_empty_matched_set_is_zero_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plans = plans_for(2, 4, 0.75, 3);
    let mut t = Tape::new();
    let f = t.leaf(unit_rows(&mut rng, 8, 3), true);
    let z = t.leaf(unit_rows(&mut rng, 2, 3), true);
    let l = reconstruction_loss_language(&mut t, f, f, z, &plans, &[], 0.04, 0.1).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    let g = t.backward(l).unwrap();
    assert!(g.get(f).is_none() && g.get(z).is_none());
}

#[test]
fn pixel_loss_identity_and_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let plans = plans_for(2, 4, 0.5, 4);
    let target = unit_rows(&mut rng, 8, 6);
    let mut t = Tape::new();
    let same = t.leaf(target.clone(), true);
    let l0 = reconstruction_loss_pixel(&mut t, same, &target, &plans).unwrap();
    assert_eq!(t.value(l0).item(), 0.0);
    let shifted = Tensor::new(vec![8, 6], target.data().iter().map(|v| v + 1.0).collect()).unwrap();
    let s = t.leaf(shifted, true);
    let l1 = reconstruction_loss_pixel(&mut t, s, &target, &plans).unwrap();
    assert!((t.value(l1).item() - 1.0).abs() < 1e-15);
}

#[test]
fn prototype_single_entry_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let plans = plans_for(2, 4, 0.75, 5);
    let mut t = Tape::new();
    let f = t.constant(unit_rows(&mut rng, 8, 3));
    let g = t.constant(unit_rows(&mut rng, 8, 3));
    let proto = t.constant(unit_rows(&mut rng, 1, 3));
    let l = reconstruction_loss_prototype(&mut t, f, g, proto, &plans, 0.04, 0.1).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

fn toy() -> (RilsModel<f64>, BatchInputs<f64>, Vec<MaskPlan>) {
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        vision_width: 16,
        vision_depth: 1,
        vision_heads: 2,
        decoder_depth: 1,
        decoder_heads: 2,
        text_width: 16,
        text_depth: 1,
        text_heads: 2,
        embed_dim: 8,
        max_len: 8,
        ..ModelConfig::default()
    };
    let spec = SyntheticSpec::default().with_canvas(16).with_seed(11);
    let tok = spec.tokenizer(cfg.max_len);
    let corpus = Corpus::from_pairs(crate::data::generate_corpus(&spec, 4).unwrap());
    let batch = crate::data::make_batch(&corpus, &[0, 1, 2, 3], &tok, BatchMode::Eval).unwrap();
    let model = RilsModel::init(&cfg, tok.vocab_size(), ReconSpace::Language, 3);
    let inputs = BatchInputs::from_batch(&batch, cfg.patch_size).unwrap();
    let plans = plans_for(4, cfg.n_patches(), 0.75, 9);
    (model, inputs, plans)
}

#[test]
fn total_is_weighted_sum() {
    let (model, inputs, plans) = toy();
    for (l1, l2) in [(1.0, 0.5), (0.3, 2.0)] {
        let cfg = LossConfig {
            lambda1: l1,
            lambda2: l2,
            matched_filter: false,
            ..LossConfig::default()
        };
        let mut fwd = model.forward(true);
        let out = total_loss(&mut fwd, &inputs, &plans, &cfg, &LossOptions::default()).unwrap();
        let b = out.breakdown;
        assert!((b.l_total - (l1 * b.l_contra + l2 * b.l_recon)).abs() < 1e-12);
        assert!(b.l_contra >= 0.0 && b.l_recon > 0.0);
        assert!((b.l_contra - 0.5 * (b.l_i2t + b.l_t2i)).abs() < 1e-12);
    }
}

#[test]
fn lambda2_zero_is_pure_contrastive() {
    let (model, inputs, plans) = toy();
    let cfg = LossConfig {
        lambda2: 0.0,
        ..LossConfig::default()
    };
    let mut fwd = model.forward(true);
    let out = total_loss(&mut fwd, &inputs, &plans, &cfg, &LossOptions::default()).unwrap();
    assert_eq!(out.breakdown.l_total, out.breakdown.l_contra);
    assert_eq!(out.breakdown.l_recon, 0.0);
    assert!(out.trace.decoded.is_none());
    assert!(!fwd.is_loaded("decoder.mask_token"));
}

#[test]
fn default_lambdas_are_one_and_half() {
    let cfg = LossConfig::default();
    assert_eq!((cfg.lambda1, cfg.lambda2), (1.0, 0.5));
    assert_eq!((cfg.tau_target, cfg.tau_pred), (0.04, 0.1));
}

#[test]
fn joint_permutation_leaves_losses_unchanged() {
    let (model, inputs, plans) = toy();
    let cfg = LossConfig {
        matched_filter: false,
        ..LossConfig::default()
    };
    let perm = [2, 0, 3, 1];
    let n = model.config.n_patches();
    let rows: Vec<usize> = perm.iter().flat_map(|&i| (i * n)..(i * n + n)).collect();
    let permuted = BatchInputs {
        patches: inputs.patches.gather_rows(&rows).unwrap(),
        tokens: perm.iter().map(|&i| inputs.tokens[i].clone()).collect(),
    };
    let pplans: Vec<MaskPlan> = perm.iter().map(|&i| plans[i].clone()).collect();
    let run = |inp: &BatchInputs<f64>, pl: &[MaskPlan]| {
        let mut fwd = model.forward(false);
        total_loss(&mut fwd, inp, pl, &cfg, &LossOptions::default()).unwrap().breakdown
    };
    let (a, b) = (run(&inputs, &plans), run(&permuted, &pplans));
    for (x, y) in [
        (a.l_contra, b.l_contra),
        (a.l_recon, b.l_recon),
        (a.l_total, b.l_total),
        (a.l_i2t, b.l_i2t),
        (a.l_t2i, b.l_t2i),
        (a.matched_fraction, b.matched_fraction),
    ] {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn pixel_space_with_lambda1_zero_only_trains_reconstruction() {
    let (model, inputs, plans) = toy();
    let model = RilsModel::init(&model.config, model.vocab_size, ReconSpace::Pixel, 3);
    let cfg = LossConfig {
        space: ReconSpace::Pixel,
        lambda1: 0.0,
        lambda2: 1.0,
        ..LossConfig::default()
    };
    let mut fwd = model.forward(true);
    let out = total_loss(&mut fwd, &inputs, &plans, &cfg, &LossOptions::default()).unwrap();
    assert_eq!(out.breakdown.l_total, out.breakdown.l_recon);
    let g = fwd.tape.backward(out.total).unwrap();
    let phi = fwd.param("head.phi.w").unwrap();
    assert!(g.get(phi).is_none());
}
