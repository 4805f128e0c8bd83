use cellpoint::backbone::{build_anchor_grid, decode_proposals, BackboneConfig, HeadOutputs, PointModel};
use cellpoint::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn small(pfa: bool, ic: bool) -> BackboneConfig {
    BackboneConfig {
        stage_channels: vec![4, 6, 8, 10],
        pfa_channels: 8,
        num_classes: 4,
        pfa_enabled: pfa,
        independent_classifier_enabled: ic,
        ..Default::default()
    }
}

#[test]
fn default_encoder_stage_shapes() {
    let model = PointModel::new(BackboneConfig::default(), 0).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let x = g.constant(random(&[1, 3, 64, 64], 1)).unwrap();
    let stages = model.encode(&mut g, &b, x).unwrap();
    let shapes: Vec<Vec<usize>> = stages.iter().map(|&s| g.value(s).shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 128, 4, 4], vec![1, 256, 2, 2]]
    );
}

#[test]
fn doubling_height_doubles_stage_heights() {
    let model = PointModel::new(small(true, true), 0).unwrap();
    let shapes = |h: usize| {
        let mut g = Graph::new();
        let b = model.bind(&mut g).unwrap();
        let x = g.constant(random(&[1, 3, h, 64], 2)).unwrap();
        let stages = model.encode(&mut g, &b, x).unwrap();
        stages.iter().map(|&s| g.value(s).shape().to_vec()).collect::<Vec<_>>()
    };
    for (a, b) in shapes(64).iter().zip(shapes(128)) {
        assert_eq!((a[1], 2 * a[2], a[3]), (b[1], b[2], b[3]));
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let model = PointModel::new(small(true, true), 0).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let x = g.constant(random(&[1, 3, 48, 64], 3)).unwrap();
    assert!(model.encode(&mut g, &b, x).is_err());
}

#[test]
fn aggregation_equals_project_resize_sum() {
    let model = PointModel::new(small(true, true), 4).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let x = g.constant(random(&[1, 3, 64, 96], 5)).unwrap();
    let stages = model.encode(&mut g, &b, x).unwrap();
    let agg = model.aggregate_pfa(&mut g, &b, &stages).unwrap();

    // independent recomputation on a fresh graph from the stage values alone
    let mut h = Graph::new();
    let mut sum: Option<Tensor> = None;
    for (s, &v) in stages.iter().enumerate() {
        let input = h.constant(g.value(v).clone()).unwrap();
        let w = h.constant(model.params.get(&format!("pfa.proj{}.w", s + 1)).unwrap().clone()).unwrap();
        let bias = h.constant(model.params.get(&format!("pfa.proj{}.b", s + 1)).unwrap().clone()).unwrap();
        let y = h.conv2d(input, w, Some(bias), 1, 0).unwrap();
        let y = h.resize_bilinear(y, 2, 3).unwrap();
        let t = h.value(y).clone();
        sum = Some(match sum {
            None => t,
            Some(acc) => {
                let d = acc.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
                Tensor::new(acc.shape().to_vec(), d).unwrap()
            }
        });
    }
    let expect = sum.unwrap();
    assert_eq!(g.value(agg).shape(), &[1, 8, 2, 3]);
    for (a, e) in g.value(agg).data().iter().zip(expect.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn aggregation_disabled_is_deepest_projection() {
    let model = PointModel::new(small(false, true), 6).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let x = g.constant(random(&[1, 3, 64, 64], 7)).unwrap();
    let stages = model.encode(&mut g, &b, x).unwrap();
    let agg = model.aggregate_pfa(&mut g, &b, &stages).unwrap();
    let w = g.constant(model.params.get("pfa.proj4.w").unwrap().clone()).unwrap();
    let bias = g.constant(model.params.get("pfa.proj4.b").unwrap().clone()).unwrap();
    let direct = g.conv2d(stages[3], w, Some(bias), 1, 0).unwrap();
    assert_eq!(g.value(agg).data(), g.value(direct).data());
}

#[test]
fn constant_projections_sum_to_constant() {
    let mut model = PointModel::new(small(true, true), 8).unwrap();
    for s in 1..=4 {
        model.params.get_mut(&format!("pfa.proj{s}.w")).unwrap().data_mut().fill(0.0);
        model.params.get_mut(&format!("pfa.proj{s}.b")).unwrap().data_mut().fill(s as f64 * 0.25);
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let x = g.constant(random(&[1, 3, 64, 64], 9)).unwrap();
    let stages = model.encode(&mut g, &b, x).unwrap();
    let agg = model.aggregate_pfa(&mut g, &b, &stages).unwrap();
    assert!(g.value(agg).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn head_shapes_follow_anchor_count() {
    let model = PointModel::new(small(true, true), 10).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let f = g.constant(random(&[1, 8, 2, 2], 11)).unwrap();
    let heads = model.run_heads(&mut g, &b, f).unwrap().values(&g);
    assert_eq!(heads.offsets.shape(), &[20, 2]);
    assert_eq!(heads.objectness_logits.shape(), &[20, 2]);
    assert_eq!(heads.class_logits.shape(), &[20, 4]);
}

#[test]
fn zero_features_and_weights_give_the_bias_everywhere() {
    let mut model = PointModel::new(small(true, true), 12).unwrap();
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("head.") {
            let v = if name.ends_with(".out.b") { 0.3 } else { 0.0 };
            t.data_mut().fill(v);
        }
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let f = g.constant(Tensor::zeros(&[1, 8, 2, 2])).unwrap();
    let heads = model.run_heads(&mut g, &b, f).unwrap().values(&g);
    for t in [&heads.offsets, &heads.objectness_logits, &heads.class_logits] {
        assert!(t.data().iter().all(|&v| v == 0.3));
    }
}

#[test]
fn classifier_toggle_only_changes_class_logits() {
    let image = random(&[1, 3, 64, 64], 13);
    let run = |ic: bool| {
        let model = PointModel::new(small(true, ic), 14).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g).unwrap();
        let x = g.constant(image.clone()).unwrap();
        model.forward(&mut g, &b, x).unwrap().values(&g)
    };
    let (on, off) = (run(true), run(false));
    assert_eq!(on.offsets, off.offsets);
    assert_eq!(on.objectness_logits, off.objectness_logits);
    assert_ne!(on.class_logits, off.class_logits);
}

#[test]
fn decoded_probabilities_are_normalized() {
    let model = PointModel::new(small(true, true), 15).unwrap();
    let p = model.predict(&random(&[1, 3, 64, 96], 16)).unwrap();
    assert_eq!(p.len(), 30);
    for (obj, cls) in p.objectness.iter().zip(&p.class_probs) {
        assert!((obj.0 + obj.1 - 1.0).abs() < 1e-9);
        assert!((cls.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn permuting_cells_and_rows_together_commutes_with_decoding() {
    let config = small(true, true);
    let grid = build_anchor_grid(64, 64, &config).unwrap();
    let k = config.anchors_per_cell;
    let heads = HeadOutputs {
        offsets: random(&[20, 2], 17),
        objectness_logits: random(&[20, 2], 18),
        class_logits: random(&[20, 4], 19),
    };
    let base = decode_proposals(&grid, &heads).unwrap();
    let cell_perm = [2usize, 0, 3, 1];
    let rows: Vec<usize> = cell_perm.iter().flat_map(|&c| (0..k).map(move |i| c * k + i)).collect();
    let permute = |t: &Tensor| {
        let w = t.shape()[1];
        let d = rows.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].to_vec()).collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let mut pgrid = grid.clone();
    pgrid.points = rows.iter().map(|&r| grid.points[r]).collect();
    let pheads = HeadOutputs {
        offsets: permute(&heads.offsets),
        objectness_logits: permute(&heads.objectness_logits),
        class_logits: permute(&heads.class_logits),
    };
    let permuted = decode_proposals(&pgrid, &pheads).unwrap();
    for (i, &r) in rows.iter().enumerate() {
        assert_eq!(permuted.coords[i], base.coords[r]);
        assert_eq!(permuted.objectness[i], base.objectness[r]);
        assert_eq!(permuted.class_probs[i], base.class_probs[r]);
    }
}
