use paqdet::analysis::*;
use paqdet::autodiff::Tensor;
use paqdet::data::{generate_dataset, DatasetConfig};
use paqdet::image::Image;
use paqdet::matching::{GroundTruthSet, MatchAssignment};
use paqdet::model::{Detector, ModelConfig, QueryMode};
use paqdet::rng::Rng;
use paqdet::train::{TrainConfig, Trainer};
use paqdet::Graph;

#[test]
fn gini_examples() {
    assert_eq!(gini(&[3.0; 10]), 0.0);
    assert_eq!(gini(&[]), 0.0);
    assert_eq!(gini(&[0.0, 0.0]), 0.0);
    for n in [2usize, 5, 30, 1000] {
        let mut v = vec![0.0; n];
        v[n / 2] = 4.0;
        assert!((gini(&v) - (n - 1) as f64 / n as f64).abs() < 1e-12);
    }
    // Mean absolute difference over twice the mean, by hand: [1, 2, 3] → 2/9.
    assert!((gini(&[3.0, 1.0, 2.0]) - 2.0 / 9.0).abs() < 1e-12);
    let mut rng = Rng::new(4);
    for _ in 0..200 {
        let v: Vec<f64> = (0..1 + rng.below(20)).map(|_| rng.uniform() * 5.0).collect();
        let g = gini(&v);
        assert!((0.0..=1.0).contains(&g));
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
        assert!((gini(&scaled) - g).abs() < 1e-12);
    }
}

#[test]
fn activation_examples() {
    let k = 6;
    let each_once = MatchAssignment {
        pairs: (0..k).map(|q| (q, q)).collect(),
    };
    let stats = record_activation(k, &[vec![each_once]], &[]);
    assert_eq!(stats.gini_query_matches, 0.0);
    assert_eq!(stats.matched_fraction, 1.0);

    let single = MatchAssignment { pairs: vec![(2, 0)] };
    let stats = record_activation(k, &[vec![single.clone()], vec![single]], &[]);
    assert_eq!(stats.match_counts, vec![0, 0, 2, 0, 0, 0]);
    assert_eq!(stats.matched_fraction, 1.0 / k as f64);
    assert!((stats.gini_query_matches - 5.0 / 6.0).abs() < 1e-12);

    let grads = [
        Tensor::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 1.0]).unwrap(),
        Tensor::from_f64(&[2, 2], &[0.0, 0.0, 0.0, 1.0]).unwrap(),
    ];
    let stats = record_activation(k, &[], &grads);
    assert_eq!(stats.pattern_grad_norms, vec![5.0, 2.0]);
}

#[test]
fn training_step_reaches_every_pattern() {
    let ds = generate_dataset(&DatasetConfig {
        train_images: 4,
        val_images: 0,
        test_images: 0,
        seed: 2,
        ..DatasetConfig::default()
    })
    .unwrap();
    let gts: Vec<GroundTruthSet> = (0..4).map(|i| ds.train.ground_truth(i)).collect();
    let batch: Vec<(&Image, &GroundTruthSet)> = ds.train.images.iter().zip(&gts).collect();
    let mut t = Trainer::<f64>::new(&ModelConfig::default(), &TrainConfig::default(), 10).unwrap();
    for _ in 0..3 {
        t.step(&batch, 0).unwrap();
        let stats = t.take_stats();
        assert!(stats.match_counts.iter().sum::<u64>() > 0);
        assert_eq!(stats.pattern_grad_norms.len(), 8);
        assert!(stats.pattern_grad_norms.iter().all(|&n| n > 0.0), "{:?}", stats.pattern_grad_norms);
        assert_eq!(stats.pattern_class_mass.len(), 6);
    }

    let cfg = TrainConfig {
        mode: QueryMode::Baseline,
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f64>::new(&ModelConfig::default(), &cfg, 10).unwrap();
    t.step(&batch, 0).unwrap();
    let stats = t.take_stats();
    assert!(stats.pattern_grad_norms.is_empty());
    assert_eq!(stats.gini_pattern_grads, 0.0);
    assert!(stats.query_grad_norms.iter().any(|&n| n > 0.0));
}

#[test]
fn parameter_counts() {
    let cfg = ModelConfig::default();
    let r = count_params(&cfg).unwrap();
    assert_eq!(paq_params_closed_form(&cfg), 512 + 4096 + 64 + 512 + 8);
    assert_eq!(r.paq_params, 5192);
    assert_eq!(r.pattern_bank_params, 512);
    assert_eq!(r.wgen_params, 4096 + 64 + 512 + 8);
    let det = Detector::<f64>::new(cfg.clone()).unwrap();
    let enumerated: usize = det.params().tensors().iter().map(|t| t.numel()).sum();
    assert_eq!(r.total_params, enumerated);

    let base = count_params(&cfg.clone().with_mode(QueryMode::Baseline)).unwrap();
    assert_eq!((base.paq_params, base.paq_flops), (0, 0));
    assert_eq!(paq_params_closed_form(&cfg.clone().with_mode(QueryMode::Baseline)), 0);

    let double = count_params(&ModelConfig { num_patterns: 16, ..cfg.clone() }).unwrap();
    assert_eq!(double.pattern_bank_params, 2 * r.pattern_bank_params);

    for (m, d, h, k) in [(3, 8, 8, 4), (5, 16, 12, 10), (8, 64, 64, 30), (12, 32, 7, 20)] {
        let c = ModelConfig {
            num_patterns: m,
            d_model: d,
            wgen_hidden: h,
            num_queries: k,
            ..cfg.clone()
        };
        assert_eq!(count_params(&c).unwrap().paq_params, m * d + d * h + h + h * m + m);
    }
}

#[test]
fn flop_counts_match_recorded_matmuls() {
    let cfg = ModelConfig::default();
    let f = count_flops(&cfg).unwrap();
    assert_eq!(f.paq_flops, 122_880 + 15_360 + 15_360);
    assert!(f.paq_flop_fraction() < 0.05);
    let mut rng = Rng::new(1);
    for c in [
        cfg.clone(),
        cfg.clone().with_mode(QueryMode::Baseline),
        ModelConfig::tiny(),
        ModelConfig::tiny().with_mode(QueryMode::Baseline),
        ModelConfig {
            num_layers: 1,
            num_queries: 12,
            ..cfg.clone()
        },
    ] {
        let det = Detector::<f64>::new(c.clone()).unwrap();
        let img = Image::new(c.image_size, (0..3 * c.image_size * c.image_size).map(|_| rng.uniform()).collect()).unwrap();
        let mut g = Graph::new();
        let p = det.params().bind(&mut g, false);
        det.forward_on(&mut g, &p, &img).unwrap();
        assert_eq!(count_flops(&c).unwrap().total_flops, g.forward_macs(), "{c:?}");
    }
    assert_eq!(count_flops(&cfg.with_mode(QueryMode::Baseline)).unwrap().paq_flops, 0);
}
