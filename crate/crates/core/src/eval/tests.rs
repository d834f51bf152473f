use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize_row(&mut v);
            v
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn exact_prototype_match_is_predicted() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let protos = random_unit(&mut rng, 6, 5);
    let images = protos.gather_rows(&[3, 0, 5]).unwrap();
    assert_eq!(predict(&images, &protos), vec![3, 0, 5]);
}

#[test]
fn ties_go_to_lowest_class() {
    let protos = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let img = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    assert_eq!(predict(&img, &protos), vec![0]);
    assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
}

#[test]
fn prompt_scale_does_not_change_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prompts: Vec<Tensor<f64>> = (0..8).map(|_| random_unit(&mut rng, 3, 6)).collect();
    let scaled: Vec<Tensor<f64>> = prompts
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 3.0 * v).collect()).unwrap())
        .collect();
    let images = random_unit(&mut rng, 200, 6);
    let a = predict(&images, &class_prototypes(&prompts).unwrap());
    let b = predict(&images, &class_prototypes(&scaled).unwrap());
    assert_eq!(a, b);
}

#[test]
fn no_classes_is_contract_error() {
    assert!(matches!(class_prototypes(&[]), Err(Error::Contract(_))));
}

fn labelled(per_class: usize, classes: usize) -> Vec<(usize, usize)> {
    (0..per_class * classes).map(|i| (i, i % classes)).collect()
}

#[test]
fn low_shot_one_per_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = low_shot_sample(&labelled(20, 16), 16, 1, &mut rng).unwrap();
    assert_eq!(s.len(), 16);
    let classes: Vec<usize> = s.iter().map(|i| i % 16).collect();
    assert_eq!(classes, (0..16).collect::<Vec<_>>());
}

#[test]
fn low_shot_seeds_differ_and_exhaust() {
    let data = labelled(20, 16);
    let draws: Vec<Vec<usize>> = (0..10)
        .map(|s| low_shot_sample(&data, 16, 5, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
        .collect();
    for i in 0..10 {
        for j in i + 1..10 {
            assert_ne!(draws[i], draws[j]);
        }
    }
    for seed in 0..3 {
        let mut s = low_shot_sample(&data, 16, 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s.sort();
        assert_eq!(s, (0..320).collect::<Vec<_>>());
    }
}

#[test]
fn low_shot_insufficient_class_is_named() {
    let mut data = labelled(3, 4);
    data.retain(|&(i, c)| !(c == 2 && i > 2));
    let err = low_shot_sample(&data, 4, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("class 2")), "{err}");
}

#[test]
fn probe_separates_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut make = |n: usize| {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![centre + rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0)]);
            ys.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), ys)
    };
    let (xtr, ytr) = make(20);
    let (xte, yte) = make(40);
    let r = linear_probe(&xtr, &ytr, &xte, &yte, &ProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.sweep.len(), 3);
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 4;
    let xtr = random_unit(&mut rng, 80, 8);
    let xte = random_unit(&mut rng, 400, 8);
    let ytr: Vec<usize> = (0..80).map(|_| rng.random_range(0..k)).collect();
    let yte: Vec<usize> = (0..400).map(|_| rng.random_range(0..k)).collect();
    let cfg = ProbeConfig {
        lrs: vec![1e-2],
        ..ProbeConfig::default()
    };
    let r = linear_probe(&xtr, &ytr, &xte, &yte, &cfg).unwrap();
    // Chance is 0.25; three binomial standard deviations at n = 400 is 0.065.
    assert!((r.accuracy - 0.25).abs() < 0.065, "{}", r.accuracy);
}

#[test]
fn probe_rejects_single_class() {
    let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    let err = linear_probe(&x, &[1, 1], &x, &[1, 1], &ProbeConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn recall_exhaustive_and_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zi = random_unit(&mut rng, 7, 4);
    let zt = random_unit(&mut rng, 7, 4);
    let r = retrieval_recall(&zi, &zt, &[1, 3, 7]).unwrap();
    assert_eq!(r.image_to_text[2], 1.0);
    assert_eq!(r.text_to_image[2], 1.0);
    assert!(r.image_to_text.windows(2).all(|w| w[0] <= w[1]));
    assert!(r.text_to_image.windows(2).all(|w| w[0] <= w[1]));

    let eye = Tensor::from_rows(&(0..5).map(|i| (0..5).map(|j| (i == j) as u8 as f64).collect()).collect::<Vec<_>>()).unwrap();
    let r = retrieval_recall(&eye, &eye, &[1]).unwrap();
    assert_eq!((r.image_to_text[0], r.text_to_image[0]), (1.0, 1.0));
}

#[test]
fn recall_ties_break_by_gallery_index() {
    let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let r = retrieval_recall(&z, &z, &[1]).unwrap();
    assert_eq!(r.image_to_text[0], 0.5);
}

#[test]
fn recall_k_beyond_gallery() {
    let z = Tensor::from_rows(&[vec![1.0]]).unwrap();
    assert!(matches!(retrieval_recall(&z, &z, &[2]), Err(Error::Contract(_))));
    assert!(matches!(retrieval_recall(&z, &z, &[0]), Err(Error::Contract(_))));
}

#[test]
fn random_embeddings_recall_at_one_is_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let trials = 50;
    let mut sum = 0.0;
    for _ in 0..trials {
        let zi = random_unit(&mut rng, 100, 16);
        let zt = random_unit(&mut rng, 100, 16);
        let r = retrieval_recall(&zi, &zt, &[1]).unwrap();
        sum += r.image_to_text[0] + r.text_to_image[0];
    }
    let mean = sum / (2 * trials) as f64;
    // Standard error over 10,000 queries is about 0.001.
    assert!((mean - 0.01).abs() < 0.004, "{mean}");
}

#[test]
fn report_round_trip_and_table() {
    let r = EvalReport::new("zeroshot", "abcd")
        .metric("accuracy", 0.875)
        .count("images", 40);
    assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    let t = r.table();
    assert!(t.contains("accuracy  0.8750"));
    assert!(t.lines().all(|l| l.len() >= 10));
}
