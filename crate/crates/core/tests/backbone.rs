use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skypart::backbone::{extract_patches, grid_positions, Encoder, EncoderConfig, Teacher};
use skypart::raster::Raster;
use skypart::scene::{gen_location, render_view, RenderConfig, View};
use skypart_tensor::{Graph, ParamStore, Tensor};

fn encoder() -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let e = Encoder::new(EncoderConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    (e, store)
}

fn sample(seed: u64) -> Raster {
    render_view(&gen_location(seed), View::Drone, 250.0, seed, &RenderConfig::default()).unwrap()
}

#[test]
fn token_count_grid_and_determinism() {
    let (enc, store) = encoder();
    let r = sample(1);
    let a = enc.encode(&store, &r).unwrap();
    assert_eq!(a.tokens.shape(), &[64, 64]);
    assert_eq!(a.cls.len(), 64);
    assert_eq!(a.grid, grid_positions(&EncoderConfig::default()));
    assert_eq!(a.grid[9], (1, 1));
    assert_eq!(a, enc.encode(&store, &r.clone()).unwrap());
    assert_ne!(a, enc.encode(&store, &sample(2)).unwrap());
}

#[test]
fn bad_raster_shape_is_rejected() {
    let (enc, store) = encoder();
    assert!(enc.encode(&store, &Raster::filled(60, 60, 0.5)).is_err());
    assert!(enc.encode(&store, &Raster::filled(64, 64, 0.5).rotate90(1)).is_ok());
    let cfg = EncoderConfig { patch_size: 7, ..EncoderConfig::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn batched_encoding_matches_single_images() {
    let (enc, store) = encoder();
    let (a, b) = (sample(3), sample(4));
    let mut g = Graph::no_grad();
    let out = enc.forward(&mut g, &store, &[&a, &b]).unwrap();
    let single = enc.encode(&store, &b).unwrap();
    let batched = g.value(out[1].tokens);
    let err = batched.data().iter().zip(single.tokens.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12);
}

#[test]
fn patch_permutation_commutes_with_the_embedding() {
    let (enc, store) = encoder();
    let patches = extract_patches(&sample(5), &EncoderConfig::default()).unwrap();
    let (l, _) = patches.dims2();
    let perm: Vec<usize> = (0..l).map(|i| (i * 37 + 11) % l).collect();
    let permuted = Tensor::from_rows(&perm.iter().map(|&i| patches.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::no_grad();
    let p = g.constant(patches);
    let q = g.constant(permuted);
    let ep = enc.patch_embed(&mut g, &store, p).unwrap();
    let eq = enc.patch_embed(&mut g, &store, q).unwrap();
    let (ep, eq) = (g.value(ep).clone(), g.value(eq).clone());
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(eq.row(dst), ep.row(src));
    }
}

#[test]
fn teacher_is_frozen_deterministic_and_distinct() {
    let cfg = EncoderConfig::default();
    let mut teacher = Teacher::new(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let r = sample(6);
    let a = teacher.encode(&r).unwrap();
    assert_eq!(a.len(), cfg.teacher_dim);
    assert_eq!(a, teacher.encode(&r).unwrap());
    let b = teacher.encode(&sample(7)).unwrap();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let cos = dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
    assert!(cos < 0.99, "{cos}");

    let mut g = Graph::new();
    let v = teacher.forward(&mut g, &r).unwrap();
    let s = g.sum(v).unwrap();
    let grads = g.backward(s).unwrap();
    teacher.store.accumulate(&g, &grads);
    let ids: Vec<_> = teacher.store.ids().collect();
    assert!(!ids.is_empty());
    for id in ids {
        assert!(teacher.store.grad(id).data().iter().all(|&x| x == 0.0));
    }
}
