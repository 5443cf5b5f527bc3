use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;

use super::*;

fn rand_batch(b: usize, side: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((b, side, side, 3), || rng.random_range(-1.0..1.0))
}

fn small_config() -> ModelConfig {
    ModelConfig {
        input_side: 64,
        stage_channels: vec![2, 4, 8, 16],
        stage_depths: vec![1, 1, 1, 1],
        ..ModelConfig::default()
    }
}

#[test]
fn default_config_dims_and_head_dims() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    let dims: Vec<usize> = (0..4).map(|s| cfg.stage_dim(s)).collect();
    assert_eq!(dims, vec![16, 32, 64, 128]);
    for s in 0..4 {
        assert_eq!(cfg.stage_dim(s) / cfg.stage_heads[s], 8, "stage {s}");
    }
    assert_eq!(cfg.head_channels(), 64);
}

#[test]
fn invalid_configs_name_the_failing_field() {
    let mut cfg = ModelConfig::default();
    cfg.input_side = 100;
    let err = build_model(&cfg, 0).unwrap_err();
    assert!(err.to_string().contains("input_side"), "{err}");

    let mut cfg = ModelConfig::default();
    cfg.stage_channels = vec![4, 8, 16, 31];
    let err = build_model(&cfg, 0).unwrap_err();
    assert!(err.to_string().contains("stage_channels"), "{err}");

    let mut cfg = ModelConfig::default();
    cfg.stage_heads = vec![2, 4, 8, 7];
    let err = build_model(&cfg, 0).unwrap_err();
    assert!(err.to_string().contains("stage_heads"), "{err}");

    let mut cfg = ModelConfig::tiny();
    cfg.final_pool = true;
    let err = build_model(&cfg, 0).unwrap_err();
    assert!(err.to_string().contains("final_pool"), "{err}");
}

#[test]
fn model_p_has_no_strip_parameters() {
    let cfg = ModelConfig { variant: Variant::ModelP, ..small_config() };
    let net = build_model(&cfg, 7).unwrap();
    for (_, p) in net.store.iter() {
        assert!(
            !p.name.contains("hstrip") && !p.name.contains("vstrip"),
            "strip embedding {} present in model_p",
            p.name
        );
        assert!(
            !p.name.contains(".h.") && !p.name.contains(".v."),
            "strip branch {} present in model_p",
            p.name
        );
    }
    let full = build_model(&small_config(), 7).unwrap();
    assert!(net.num_params() < full.num_params());
}

#[test]
fn builds_are_deterministic_and_counts_config_pure() {
    let cfg = small_config();
    let a = build_model(&cfg, 11).unwrap();
    let b = build_model(&cfg, 11).unwrap();
    assert_eq!(a.store.flatten(), b.store.flatten());
    let c = build_model(&cfg, 12).unwrap();
    assert_eq!(a.num_params(), c.num_params());
    assert_ne!(a.store.flatten(), c.store.flatten());
}

#[test]
fn forward_shapes_and_zero_head() {
    let cfg = small_config();
    let mut net = build_model(&cfg, 3).unwrap();
    let batch = rand_batch(2, 64, 5);
    let logits = net.forward(&batch).unwrap();
    assert_eq!(logits.dim(), (2, 2));

    // zero head weights and biases -> zero logits regardless of input
    let head_w = net.store.iter().find(|(_, p)| p.name == "head.w").unwrap().0;
    let head_b = net.store.iter().find(|(_, p)| p.name == "head.b").unwrap().0;
    for id in [head_w, head_b] {
        let shape = net.store.get(id).value.shape().to_vec();
        net.store.get_mut(id).value = ArrayD::zeros(IxDyn(&shape));
    }
    let logits = net.forward(&batch).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));

    // wrong input side is a shape error
    assert!(matches!(
        net.forward(&rand_batch(1, 32, 5)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn loss_closed_forms() {
    let mut g = Graph::new();
    let logits = g.constant(ArrayD::zeros(IxDyn(&[1, 2])));
    let l = loss(&mut g, logits, &[1]).unwrap();
    assert!((g.value(l)[[0]] - std::f64::consts::LN_2).abs() < 1e-12);

    let mut g = Graph::new();
    let logits =
        g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![20.0, -20.0]).unwrap());
    let l = loss(&mut g, logits, &[0]).unwrap();
    assert!(g.value(l)[[0]] < 1e-8);

    // batch loss is the mean of the per-sample losses
    let rows = [vec![0.3, -0.7], vec![1.4, 0.2]];
    let single = |row: &[f64], label: usize| {
        let mut g = Graph::new();
        let logits = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), row.to_vec()).unwrap());
        let l = loss(&mut g, logits, &[label]).unwrap();
        g.value(l)[[0]]
    };
    let a = single(&rows[0], 0);
    let b = single(&rows[1], 1);
    let mut g = Graph::new();
    let logits = g.constant(
        ArrayD::from_shape_vec(IxDyn(&[2, 2]), rows.concat()).unwrap(),
    );
    let l = loss(&mut g, logits, &[0, 1]).unwrap();
    assert!((g.value(l)[[0]] - (a + b) / 2.0).abs() < 1e-12);

    // out-of-range label
    let mut g = Graph::new();
    let logits = g.constant(ArrayD::zeros(IxDyn(&[1, 2])));
    assert!(matches!(loss(&mut g, logits, &[2]), Err(Error::Validation(_))));
}

#[test]
fn loss_is_nonnegative_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let logits = ArrayD::from_shape_simple_fn(IxDyn(&[3, 2]), || rng.random_range(-4.0..4.0));
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let mut g = Graph::new();
        let node = g.constant(logits);
        let l = loss(&mut g, node, &labels).unwrap();
        assert!(g.value(l)[[0]] >= 0.0);
    }
}

#[test]
fn variant_nesting_full_with_silent_strips_equals_model_p() {
    let cfg = small_config();
    let mut full = build_model(&cfg, 19).unwrap();
    let model_p =
        build_model(&ModelConfig { variant: Variant::ModelP, ..cfg.clone() }, 19).unwrap();

    // surviving parameters share values thanks to name-keyed init
    for (_, p) in model_p.store.iter() {
        let twin = full.store.iter().find(|(_, q)| q.name == p.name).unwrap().1;
        assert_eq!(p.value, twin.value, "{} differs", p.name);
    }

    // zero the strip embeddings in the full model; strip transformers then
    // map zero to zero (fresh-init biases are zero), broadcasts add zero
    let strip_ids: Vec<_> = full
        .store
        .iter()
        .filter(|(_, p)| p.name.contains("hstrip") || p.name.contains("vstrip"))
        .map(|(id, _)| id)
        .collect();
    for id in strip_ids {
        let shape = full.store.get(id).value.shape().to_vec();
        full.store.get_mut(id).value = ArrayD::zeros(IxDyn(&shape));
    }
    let batch = rand_batch(1, 64, 23);
    let a = full.forward(&batch).unwrap();
    let b = model_p.forward(&batch).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn deterministic_under_flips_and_vertically_sensitive() {
    let net = build_model(&ModelConfig::tiny(), 29).unwrap();
    let batch = rand_batch(1, 32, 31);
    let flipped = flip_batch_vertical(&batch);
    // determinism: repeated forwards agree bit for bit
    assert_eq!(net.forward(&batch).unwrap(), net.forward(&batch).unwrap());
    assert_eq!(net.forward(&flipped).unwrap(), net.forward(&flipped).unwrap());
    // vertical structure matters: some fixture separates x from flip(x)
    let a = net.forward(&batch).unwrap();
    let b = net.forward(&flipped).unwrap();
    assert!(
        a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9),
        "model is blind to vertical orientation"
    );
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = ModelConfig::tiny();
    let net = build_model(&cfg, 37).unwrap();
    let state = TrainState {
        seed: 37,
        epoch: 12,
        step: 480,
        train_loss: Some(0.25),
        val_loss: Some(0.31),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hvtc");
    save_checkpoint(&net, &state, &path).unwrap();
    let (back, state2) = load_checkpoint(&path).unwrap();
    assert_eq!(state, state2);
    assert_eq!(back.config, cfg);
    let a = net.store.flatten();
    let b = back.store.flatten();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.hvtc");
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Runtime(_))));
}
