use paqdet::autodiff::{Graph, Tensor};
use paqdet::model::*;
use paqdet::rng::Rng;
use paqdet::train::check_model_gradients;
use paqdet::Image;

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    Image::new(size, (0..3 * size * size).map(|_| rng.uniform()).collect()).unwrap()
}

fn tiny(mode: QueryMode) -> ModelConfig {
    ModelConfig::tiny().with_mode(mode)
}

#[test]
fn default_grid_has_64_tokens() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.num_tokens(), 64);
    let det = Detector::<f64>::new(cfg.clone()).unwrap();
    let mut g = Graph::new();
    let p = det.params().bind(&mut g, false);
    let enc = det.encode(&mut g, &p, &random_image(64, 1)).unwrap();
    assert_eq!(g.shape(enc.tokens), [64, cfg.d_model]);
    assert_eq!(g.shape(enc.token_scores), [64, cfg.num_classes]);
    assert_eq!(enc.token_anchors.shape(), [64, 4]);
}

#[test]
fn zero_weights_leave_only_the_final_norm_bias() {
    let cfg = tiny(QueryMode::Paq);
    let det = Detector::<f64>::new(cfg.clone()).unwrap();
    let bias: Vec<f64> = (0..cfg.d_model).map(|i| 0.1 * i as f64 - 0.3).collect();
    let mut params = det.params().map(|_| 0.0);
    params.get_mut("enc.ln2.b").unwrap().data_mut().copy_from_slice(&bias);
    let det = Detector::from_params(cfg.clone(), params).unwrap();
    let mut g = Graph::new();
    let p = det.params().bind(&mut g, false);
    let enc = det.encode(&mut g, &p, &Image::filled(cfg.image_size, [0.0; 3])).unwrap();
    let tokens = g.value(enc.tokens);
    for r in 0..cfg.num_tokens() {
        assert_eq!(tokens.row(r), &bias[..]);
    }
}

#[test]
fn forward_is_deterministic() {
    for mode in [QueryMode::Baseline, QueryMode::Paq] {
        let img = random_image(64, 3);
        let a = Detector::<f64>::new(ModelConfig::default().with_mode(mode)).unwrap().forward(&img).unwrap();
        let b = Detector::<f64>::new(ModelConfig::default().with_mode(mode)).unwrap().forward(&img).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn topk_examples() {
    let scores = Tensor::<f64>::from_f64(&[3, 2], &[0.1, 0.0, 0.2, 0.9, 0.5, 0.4]).unwrap();
    assert_eq!(select_topk(&scores, 2).unwrap(), vec![1, 2]);
    assert_eq!(select_topk(&Tensor::<f64>::full(&[5, 3], 0.3), 3).unwrap(), vec![0, 1, 2]);
    let mut rng = Rng::new(4);
    let v: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
    let mut all = select_topk(&Tensor::<f64>::from_f64(&[20, 2], &v).unwrap(), 20).unwrap();
    all.sort_unstable();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
    assert!(matches!(select_topk(&Tensor::<f64>::zeros(&[3, 1]), 4), Err(ModelError::TopK { .. })));
}

fn wgen_weights(det: &Detector<f64>, tokens: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = det.params().bind(&mut g, false);
    let z = g.constant(tokens.clone());
    let w = generate_weights(&mut g, &p, z).unwrap();
    g.value(w).clone()
}

#[test]
fn weight_generator_examples() {
    let cfg = tiny(QueryMode::Paq);
    let (k, d, m) = (cfg.num_queries, cfg.d_model, cfg.num_patterns);
    let mut rng = Rng::new(5);
    let tokens = Tensor::<f64>::from_f64(&[k, d], &(0..k * d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();

    let mut params = Detector::<f64>::new(cfg.clone()).unwrap().params().clone();
    for name in ["paq.wgen.fc1.w", "paq.wgen.fc1.b", "paq.wgen.fc2.w", "paq.wgen.fc2.b"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let zero = Detector::from_params(cfg.clone(), params.clone()).unwrap();
    let w = wgen_weights(&zero, &tokens);
    assert!(w.data().iter().all(|&x| x == 1.0 / m as f64));

    params.get_mut("paq.wgen.fc2.b").unwrap().data_mut()[1] = 1000.0;
    let hot = Detector::from_params(cfg.clone(), params).unwrap();
    let w = wgen_weights(&hot, &tokens);
    for r in 0..k {
        for (j, &x) in w.row(r).iter().enumerate() {
            assert!((x - if j == 1 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    let w = wgen_weights(&Detector::<f64>::new(cfg).unwrap(), &tokens);
    for r in 0..k {
        assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn compose(weights: &[f64], k: usize, patterns: &[f64], m: usize) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let w = g.constant(Tensor::from_f64(&[k, m], weights).unwrap());
    let p = g.constant(Tensor::from_f64(&[m, patterns.len() / m], patterns).unwrap());
    let q = compose_queries(&mut g, w, p).unwrap();
    g.value(q).clone()
}

#[test]
fn composition_examples() {
    assert_eq!(compose(&[0.25, 0.75], 1, &[1.0, 0.0, 0.0, 1.0], 2).data(), &[0.25, 0.75]);
    assert_eq!(compose(&[1.0, 0.0], 1, &[0.3, -2.0, 5.0, 7.0], 2).data(), &[0.3, -2.0]);
    let q = compose(&[0.2, 0.3, 0.5, 0.9, 0.05, 0.05], 2, &[1.5, -0.5, 1.5, -0.5, 1.5, -0.5], 3);
    for r in 0..2 {
        for (x, p) in q.row(r).iter().zip([1.5, -0.5]) {
            assert!((x - p).abs() < 1e-15);
        }
    }
    let mut g = Graph::<f64>::new();
    let w = g.constant(Tensor::zeros(&[2, 3]));
    let p = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(compose_queries(&mut g, w, p), Err(ModelError::WeightColumns { .. })));
}

#[test]
fn decode_with_zeroed_blocks_reproduces_references() {
    let cfg = ModelConfig {
        num_layers: 1,
        ..tiny(QueryMode::Paq)
    };
    let det = Detector::<f64>::new(cfg.clone()).unwrap();
    let mut params = det.params().clone();
    let names: Vec<String> = params.names().to_vec();
    for n in names.iter().filter(|n| n.starts_with("dec.0.") && !n.contains(".cls.")) {
        params.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let det = Detector::from_params(cfg.clone(), params).unwrap();
    let out = det.forward(&random_image(cfg.image_size, 7)).unwrap();
    assert_eq!(out.per_layer_boxes.len(), 1);
    for (a, b) in out.final_boxes().data().iter().zip(out.references.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let deep = Detector::<f64>::new(ModelConfig::default()).unwrap();
    let out = deep.forward(&random_image(64, 8)).unwrap();
    assert_eq!(out.per_layer_logits.len(), 3);
    assert_eq!(out.per_layer_boxes.len(), 3);
}

#[test]
fn query_modes() {
    let img = random_image(64, 9);
    let base = Detector::<f64>::new(ModelConfig::default().with_mode(QueryMode::Baseline)).unwrap();
    let mut g = Graph::new();
    let p = base.params().bind(&mut g, false);
    let t = base.forward_on(&mut g, &p, &img).unwrap();
    let tokens = g.value(t.encoder.tokens);
    let content = g.value(t.queries.content);
    for (q, &i) in t.queries.selected_indices.iter().enumerate() {
        assert_eq!(content.row(q), tokens.row(i));
    }
    assert!(t.queries.weights.is_none());

    let cfg = ModelConfig::default();
    let paq = Detector::<f64>::new(cfg.clone()).unwrap();
    let out_paq = paq.forward(&img).unwrap();
    let out_base = base.forward(&img).unwrap();
    assert_eq!(out_paq.references, out_base.references);
    assert_eq!(out_paq.selected_indices, out_base.selected_indices);

    let mut params = paq.params().clone();
    let pat: Vec<f64> = (0..cfg.d_model).map(|i| (i as f64).sin()).collect();
    let bank = params.get_mut("paq.patterns").unwrap();
    for r in 0..cfg.num_patterns {
        bank.data_mut()[r * cfg.d_model..(r + 1) * cfg.d_model].copy_from_slice(&pat);
    }
    let same = Detector::from_params(cfg.clone(), params).unwrap();
    let mut g = Graph::new();
    let p = same.params().bind(&mut g, false);
    let t = same.forward_on(&mut g, &p, &img).unwrap();
    let content = g.value(t.queries.content);
    for q in 0..cfg.num_queries {
        for (x, y) in content.row(q).iter().zip(&pat) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn from_params_rejects_layout_mismatches() {
    let paq = Detector::<f64>::new(ModelConfig::tiny()).unwrap();
    let base_cfg = tiny(QueryMode::Baseline);
    let base = Detector::<f64>::new(base_cfg.clone()).unwrap();
    let err = Detector::from_params(ModelConfig::tiny(), base.params().clone()).unwrap_err();
    assert!(matches!(err, ModelError::ParamLayout { ref name, .. } if name.starts_with("paq.")), "{err}");
    assert!(Detector::from_params(base_cfg, paq.params().clone()).is_err());
    let mut p = paq.params().clone();
    *p.get_mut("enc.pos").unwrap() = Tensor::zeros(&[3, 3]);
    assert!(Detector::from_params(ModelConfig::tiny(), p).is_err());
}

#[test]
fn convexity_over_random_passes() {
    let cfg = tiny(QueryMode::Paq);
    for seed in 0..100 {
        let det = Detector::<f64>::new(ModelConfig { seed, ..cfg.clone() }).unwrap();
        let mut g = Graph::new();
        let p = det.params().bind(&mut g, false);
        let t = det.forward_on(&mut g, &p, &random_image(cfg.image_size, seed + 100)).unwrap();
        if let Some(msg) = paqdet::analysis::convexity_violation(&g, &t.queries, 1e-12) {
            panic!("seed {seed}: {msg}");
        }
    }
}

#[test]
fn gradient_sharing_reaches_every_pattern() {
    let cfg = tiny(QueryMode::Paq);
    let det = Detector::<f64>::new(cfg.clone()).unwrap();
    let mut params = det.params().clone();
    for name in ["paq.wgen.fc2.w", "paq.wgen.fc2.b"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let det = Detector::from_params(cfg.clone(), params).unwrap();
    let mut g = Graph::new();
    let p = det.params().bind(&mut g, true);
    let t = det.forward_on(&mut g, &p, &random_image(cfg.image_size, 11)).unwrap();
    let w = t.queries.weights.unwrap();
    assert!(g.value(w).row(0).iter().all(|&x| x == 1.0 / cfg.num_patterns as f64));
    let q0 = g.gather_rows(t.queries.content, &[0]).unwrap();
    let loss = g.sum(q0);
    g.backward(loss).unwrap();
    let grad = g.grad_tensor(p.get("paq.patterns"));
    for r in 0..cfg.num_patterns {
        let norm: f64 = grad.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "pattern {r} got no gradient");
    }

    let base = Detector::<f64>::new(tiny(QueryMode::Baseline)).unwrap();
    assert!(base.params().get("paq.patterns").is_none());
    let mut g = Graph::new();
    let p = base.params().bind(&mut g, true);
    let t = base.forward_on(&mut g, &p, &random_image(cfg.image_size, 11)).unwrap();
    let q0 = g.gather_rows(t.queries.content, &[0]).unwrap();
    let loss = g.sum(q0);
    g.backward(loss).unwrap();
    let grad = g.grad_tensor(t.encoder.tokens);
    let chosen = t.queries.selected_indices[0];
    for r in 0..cfg.num_tokens() {
        let norm: f64 = grad.row(r).iter().map(|v| v.abs()).sum();
        assert_eq!(norm > 0.0, r == chosen, "token row {r}");
    }
}

#[test]
fn whole_model_gradient_check_tiny() {
    for mode in [QueryMode::Paq, QueryMode::Baseline] {
        let report = check_model_gradients(&tiny(mode), 24, 1e-6, 0, false).unwrap();
        assert!(report.stable);
        assert!(report.samples.iter().any(|s| s.analytic.abs() > 1e-3));
        assert!(report.max_rel_error <= 1e-4, "{mode}: {:#?}", report.samples);
    }
    let bad = check_model_gradients(&tiny(QueryMode::Paq), 20, 1e-6, 0, true).unwrap();
    assert!(bad.max_rel_error > 1e-4);
}
