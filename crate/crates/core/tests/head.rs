use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skypart::backbone::{normalized_coords, EncoderConfig};
use skypart::head::{
    aggregate, assign, film_modulate, gate_from_logits, order_by_value, Branches, FilmBin, GateOutput, HeadConfig, Mode,
    PartHead, PartSet,
};
use skypart::model::{ForwardOptions, ModelConfig, SkyPart, ViewInput};
use skypart::scene::{gen_location, render_view, RenderConfig, View};
use skypart_tensor::check::{finite_difference_grad, relative_error, FD_STEP};
use skypart_tensor::{Graph, ParamStore, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn head() -> (PartHead, ParamStore) {
    let mut store = ParamStore::new();
    let h = PartHead::new(HeadConfig::default(), &mut store, &mut rng(3)).unwrap();
    (h, store)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn film_identity_and_two_bin_mean() {
    let mut g = Graph::new();
    let z0 = Tensor::randn(&[5, 3], 1.0, &mut rng(1));
    let z = g.constant(z0.clone());
    let gamma = g.constant(Tensor::ones(&[4, 3]));
    let beta = g.constant(Tensor::zeros(&[4, 3]));
    let out = film_modulate(&mut g, z, gamma, beta, FilmBin::Altitude(2)).unwrap();
    assert_eq!(g.value(out), &z0);

    let gamma = g.constant(Tensor::from_rows(&[vec![1.0; 3], vec![3.0; 3]]).unwrap());
    let beta = g.constant(Tensor::from_rows(&[vec![0.0; 3], vec![2.0; 3]]).unwrap());
    let mean = film_modulate(&mut g, z, gamma, beta, FilmBin::Mean).unwrap();
    let expect: Vec<f64> = z0.data().iter().map(|v| 2.0 * v + 1.0).collect();
    assert_eq!(g.value(mean).data(), &expect[..]);
    assert!(film_modulate(&mut g, z, gamma, beta, FilmBin::Altitude(2)).is_err());
    assert!(FilmBin::from_altitude(175.0).is_err());
}

#[test]
fn film_gamma_gradient_is_z_times_upstream() {
    let z0 = Tensor::randn(&[6, 4], 1.0, &mut rng(2));
    let w0 = Tensor::randn(&[6, 4], 1.0, &mut rng(3));
    let gamma0 = Tensor::randn(&[4, 4], 1.0, &mut rng(4));
    let beta0 = Tensor::randn(&[4, 4], 1.0, &mut rng(5));
    let objective = |gamma: &Tensor, grad: bool| {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let gv = g.leaf(gamma.clone().with_requires_grad(grad));
        let z = g.constant(z0.clone());
        let b = g.constant(beta0.clone());
        let w = g.constant(w0.clone());
        let y = film_modulate(&mut g, z, gv, b, FilmBin::Altitude(1)).unwrap();
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p).unwrap();
        (g, gv, s)
    };
    let (g, gv, s) = objective(&gamma0, true);
    let grads = g.backward(s).unwrap();
    let analytic = grads.get(gv).unwrap().clone();
    let numeric = finite_difference_grad(|t| Ok(objective(t, false).0.value(objective(t, false).2).item()), &gamma0, FD_STEP).unwrap();
    assert!(relative_error(analytic.data(), numeric.data()) < 1e-6);
    for j in 0..4 {
        let expect: f64 = (0..6).map(|i| z0.data()[i * 4 + j] * w0.data()[i * 4 + j]).sum();
        assert!((analytic.data()[4 + j] - expect).abs() < 1e-12);
        assert_eq!(analytic.data()[j], 0.0);
    }
}

#[test]
fn assignment_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::randn(&[7, 4], 1.0, &mut rng(6)));
    let same = g.constant(Tensor::ones(&[12, 4]));
    let a = assign(&mut g, z, same, 0.07).unwrap();
    for v in g.value(a).data() {
        assert!((v - 1.0 / 12.0).abs() < 1e-12);
    }

    let mut protos = vec![0.0; 12 * 12];
    for k in 0..12 {
        protos[k * 12 + k] = 1.0;
    }
    let p = g.constant(Tensor::new(vec![12, 12], protos).unwrap());
    let mut tok = vec![0.0; 12];
    tok[3] = 2.5;
    let t = g.constant(Tensor::matrix(1, 12, tok).unwrap());
    let a = assign(&mut g, t, p, 0.07).unwrap();
    let oracle = (1.0f64 / 0.07).exp() / ((1.0f64 / 0.07).exp() + 11.0);
    assert!((g.value(a).data()[3] - oracle).abs() < 1e-12);
    assert!(oracle > 0.999);

    let zero = g.constant(Tensor::zeros(&[1, 12]));
    assert!(assign(&mut g, zero, p, 0.07).is_err());
}

#[test]
fn gate_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::vector(vec![2.0; 12]));
    let out = gate_from_logits(&mut g, logits, None, 0.5, 4).unwrap();
    let expect = sigmoid(4.0);
    assert!((out.values[0] - expect).abs() < 1e-15);
    assert!((expect - 0.9820).abs() < 1e-4);
    assert_eq!(out.active.len(), 12);

    let logits = g.constant(Tensor::vector(vec![0.0; 12]));
    let out = gate_from_logits(&mut g, logits, None, 0.5, 4).unwrap();
    assert_eq!(out.forced, vec![0, 1, 2, 3]);
    assert_eq!(out.active, vec![0, 1, 2, 3]);

    let raw: Vec<f64> = (0..12).map(|i| -1.0 - 0.1 * i as f64).collect();
    let lv = g.leaf(Tensor::vector(raw.clone()).with_requires_grad(true));
    let out = gate_from_logits(&mut g, lv, None, 0.5, 4).unwrap();
    assert_eq!(out.active, vec![0, 1, 2, 3]);
    assert_eq!(&g.value(out.gates).data()[..4], &[1.0; 4]);
    let s = g.sum(out.gates).unwrap();
    let grads = g.backward(s).unwrap();
    let grad = grads.get(lv).unwrap();
    for (i, &r) in raw.iter().enumerate() {
        let sg = sigmoid(r / 0.5);
        assert!((grad.data()[i] - sg * (1.0 - sg) / 0.5).abs() < 1e-12);
    }
}

#[test]
fn ties_order_by_ascending_index() {
    assert_eq!(order_by_value(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
}

#[test]
fn aggregation_examples() {
    let cfg = EncoderConfig::default();
    let coords = normalized_coords(&cfg);
    let l = cfg.n_tokens();
    let z0 = Tensor::randn(&[l, 8], 1.0, &mut rng(9));
    let mut g = Graph::new();
    let z = g.constant(z0.clone());

    let mut onehot = vec![0.0; l * 12];
    for i in 0..l {
        onehot[i * 12] = 1.0;
    }
    let a = g.constant(Tensor::new(vec![l, 12], onehot).unwrap());
    let agg = aggregate(&mut g, z, a, &coords).unwrap();
    let mean: Vec<f64> = (0..8).map(|j| (0..l).map(|i| z0.data()[i * 8 + j]).sum::<f64>() / l as f64).collect();
    let raw = g.value(agg.raw);
    for j in 0..8 {
        assert!((raw.data()[j] - mean[j]).abs() < 1e-12);
    }
    assert!(raw.data()[8..].iter().all(|&v| v == 0.0));
    assert_eq!(agg.occupied.iter().filter(|&&o| o).count(), 1);
    assert_eq!(&g.value(agg.centroids).data()[2..4], &[0.5, 0.5]);

    let a = g.constant(Tensor::full(&[l, 12], 1.0 / 12.0));
    let agg = aggregate(&mut g, z, a, &coords).unwrap();
    let raw = g.value(agg.raw);
    for k in 0..12 {
        for j in 0..8 {
            assert!((raw.data()[k * 8 + j] - mean[j]).abs() < 1e-12);
        }
    }

    let mut corner = vec![0.0; l * 12];
    corner[0] = 1.0;
    for i in 1..l {
        corner[i * 12 + 1] = 1.0;
    }
    let a = g.constant(Tensor::new(vec![l, 12], corner).unwrap());
    let agg = aggregate(&mut g, z, a, &coords).unwrap();
    assert_eq!(&g.value(agg.centroids).data()[..2], &[0.0, 0.0]);
}

fn manual_parts(g: &mut Graph, descriptors: Tensor, gates: Vec<f64>) -> PartSet {
    let k = gates.len();
    let d = g.constant(descriptors);
    let gv = g.constant(Tensor::matrix(k, 1, gates.clone()).unwrap());
    let active: Vec<usize> = (0..k).filter(|&i| gates[i] > 0.5).collect();
    PartSet {
        descriptors: d,
        centroids: g.constant(Tensor::full(&[k, 2], 0.5)),
        gate: GateOutput { gates: gv, values: gates, active, forced: vec![] },
        occupied: vec![true; k],
    }
}

#[test]
fn part_pool_is_unit_norm_and_gate_ordered() {
    let (h, store) = head();
    let desc = Tensor::randn(&[12, 32], 1.0, &mut rng(11));
    let gates: Vec<f64> = (0..12).map(|i| 0.3 + 0.05 * i as f64).collect();
    let mut g = Graph::new();
    let parts = manual_parts(&mut g, desc.clone(), gates.clone());
    let f = h.part_pool(&mut g, &store, &parts).unwrap();
    assert!((g.value(f).norm() - 1.0).abs() < 1e-10);

    let perm: Vec<usize> = (0..12).rev().collect();
    let pdesc = Tensor::from_rows(&perm.iter().map(|&i| desc.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let pg: Vec<f64> = perm.iter().map(|&i| gates[i]).collect();
    let parts = manual_parts(&mut g, pdesc, pg);
    let f2 = h.part_pool(&mut g, &store, &parts).unwrap();
    assert_eq!(g.value(f).data(), g.value(f2).data());

    let a = manual_parts(&mut g, desc.clone(), vec![0.0; 12]);
    let b = manual_parts(&mut g, Tensor::randn(&[12, 32], 1.0, &mut rng(12)), vec![0.0; 12]);
    match (h.part_pool(&mut g, &store, &a), h.part_pool(&mut g, &store, &b)) {
        (Ok(fa), Ok(fb)) => assert_eq!(g.value(fa).data(), g.value(fb).data()),
        (Err(_), Err(_)) => {}
        _ => panic!("descriptors leaked through zero gates"),
    }
}

#[test]
fn graph_readout_examples() {
    let (h, store) = head();
    let desc = Tensor::randn(&[12, 32], 1.0, &mut rng(13));
    let mut g = Graph::new();
    let mut gates = vec![0.1; 12];
    gates[5] = 0.9;
    let one = manual_parts(&mut g, desc.clone(), gates);
    let (f, att) = h.gat_readout(&mut g, &store, &one).unwrap();
    assert!(att.iter().all(|a| a.data() == [1.0]));
    assert!((g.value(f).norm() - 1.0).abs() < 1e-10);

    let gates: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 0.9 } else { 0.2 }).collect();
    let many = manual_parts(&mut g, desc.clone(), gates.clone());
    let (f1, att) = h.gat_readout(&mut g, &store, &many).unwrap();
    for a in &att {
        let (r, c) = a.dims2();
        assert_eq!((r, c), (6, 6));
        for i in 0..r {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let perm = [6, 7, 8, 9, 10, 11, 0, 1, 2, 3, 4, 5];
    let pdesc = Tensor::from_rows(&perm.iter().map(|&i| desc.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let pg: Vec<f64> = perm.iter().map(|&i| gates[i]).collect();
    let permuted = manual_parts(&mut g, pdesc, pg);
    let (f2, _) = h.gat_readout(&mut g, &store, &permuted).unwrap();
    assert!(relative_error(g.value(f1).data(), g.value(f2).data()) < 1e-12);
}

fn unit_row(g: &mut Graph, seed: u64) -> skypart_tensor::Var {
    let t = Tensor::randn(&[1, 96], 1.0, &mut rng(seed));
    let n = t.norm();
    g.constant(t.map(|v| v / n))
}

#[test]
fn fusion_examples() {
    let (h, mut store) = head();
    let mut g = Graph::new();
    let inputs = [Some(unit_row(&mut g, 1)), Some(unit_row(&mut g, 2)), Some(unit_row(&mut g, 3))];
    let out = h.fuse(&mut g, &store, inputs).unwrap();
    let e = std::f64::consts::E;
    let oracle = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
    for i in 0..3 {
        assert!((out.weight_values[i] - oracle[i]).abs() < 1e-12);
    }
    assert!((out.weight_values[0] - 0.576).abs() < 1e-3);
    assert!((g.value(out.f).norm() - 1.0).abs() < 1e-10);

    let bias = store.id("head.fuse2.b").unwrap();
    store.set_value(bias, Tensor::zeros(&[1, 3])).unwrap();
    let mut g = Graph::new();
    let inputs = [Some(unit_row(&mut g, 1)), Some(unit_row(&mut g, 2)), Some(unit_row(&mut g, 3))];
    let out = h.fuse(&mut g, &store, inputs).unwrap();
    for w in out.weight_values {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }

    let loose = g.constant(Tensor::full(&[1, 96], 1.0));
    assert!(h.fuse(&mut g, &store, [Some(loose), None, None]).is_err());
    let only = unit_row(&mut g, 4);
    let out = h.fuse(&mut g, &store, [None, Some(only), None]).unwrap();
    assert_eq!(out.weight_values, [0.0, 1.0, 0.0]);
}

fn desk_model() -> (SkyPart, ParamStore) {
    let cfg = ModelConfig { encoder: EncoderConfig::default(), head: HeadConfig::default(), n_classes: 8 };
    SkyPart::new(cfg, &mut rng(21)).unwrap()
}

#[test]
fn inference_embedding_ignores_altitude_and_is_stateless() {
    let (model, store) = desk_model();
    let rc = RenderConfig::default();
    let r = render_view(&gen_location(4), View::Drone, 150.0, 1, &rc).unwrap();
    let batch: Vec<_> = (0..4).map(|i| render_view(&gen_location(i), View::Sat, 0.0, 0, &rc).unwrap()).collect();
    let a = model.embed(&store, &r, Some(150.0), ForwardOptions::INFER, 0).unwrap();
    let b = model.embed(&store, &r, None, ForwardOptions::INFER, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.f.len(), 96);
    assert!((a.f.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-10);
    let w: f64 = a.weights.iter().sum();
    assert!((w - 1.0).abs() < 1e-12 && a.weights.iter().all(|&x| x >= 0.0));

    let mut g = Graph::new();
    let inputs: Vec<ViewInput> =
        (0..4).map(|i| ViewInput { raster: &batch[i], bin: FilmBin::Altitude(i), gate_seed: i as u64 }).collect();
    model.forward(&mut g, &store, &inputs, ForwardOptions::train()).unwrap();
    let c = model.embed(&store, &r, None, ForwardOptions::INFER, 0).unwrap();
    assert_eq!(a, c);
}

#[test]
fn training_forward_respects_the_gate_floor_and_branch_mask() {
    let (model, store) = desk_model();
    let rc = RenderConfig::default();
    let batch: Vec<_> = (0..4).map(|i| render_view(&gen_location(i + 6), View::Sat, 0.0, 0, &rc).unwrap()).collect();
    let r = &batch[0];
    let mut g = Graph::new();
    let inputs: Vec<ViewInput> =
        batch.iter().enumerate().map(|(i, b)| ViewInput { raster: b, bin: FilmBin::Mean, gate_seed: i as u64 }).collect();
    let out = model.forward(&mut g, &store, &inputs, ForwardOptions::train()).unwrap();
    for v in &out.views {
        assert!(v.parts.gate.active.len() >= 4);
        let a = g.value(v.assign);
        for i in 0..a.dims2().0 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert!(out.bn_stats.is_some());
    let opts = ForwardOptions { mode: Mode::Infer, branches: Branches { part: false, cls: true, graph: false }, all_protos_active: false };
    let e = model.embed(&store, r, None, opts, 0).unwrap();
    assert_eq!(e.weights, [0.0, 1.0, 0.0]);
}
