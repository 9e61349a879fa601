use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skypart::backbone::{EncoderConfig, Teacher};
use skypart::head::{assign, film_modulate, FilmBin};
use skypart::loss::{diversity, uapa, UAPA_T0};
use skypart::scene::{gen_location, render_view, RenderConfig, View, ALTITUDES};
use skypart::train::schedule_factor;
use skypart_tensor::{Graph, Tensor};

const BINS: usize = ALTITUDES.len();

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_rows_sum_to_one(z in matrix(6, 5), p in matrix(12, 5), tau in 0.02f64..1.0) {
        prop_assume!(z.data().chunks(5).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        prop_assume!(p.data().chunks(5).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let mut g = Graph::no_grad();
        let (zv, pv) = (g.constant(z), g.constant(p));
        let a = assign(&mut g, zv, pv, tau).unwrap();
        let a = g.value(a);
        for i in 0..6 {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn raising_one_similarity_wins_mass_from_the_rest(c in prop::collection::vec(-0.4f64..0.4, 4), k in 0usize..4, step in 0.01f64..0.1) {
        let token = |c: &[f64]| {
            let rest = 1.0 - c.iter().map(|x| x * x).sum::<f64>();
            let mut v = c.to_vec();
            v.push(rest.sqrt());
            Tensor::matrix(1, 5, v).unwrap()
        };
        let mut raised = c.clone();
        raised[k] += step;
        let protos: Vec<f64> = (0..4 * 5).map(|i| if i / 5 == i % 5 { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::no_grad();
        let pv = g.constant(Tensor::new(vec![4, 5], protos).unwrap());
        let (z0, z1) = (g.constant(token(&c)), g.constant(token(&raised)));
        let a0 = assign(&mut g, z0, pv, 0.07).unwrap();
        let a1 = assign(&mut g, z1, pv, 0.07).unwrap();
        let (a0, a1) = (g.value(a0).data().to_vec(), g.value(a1).data().to_vec());
        for j in 0..4 {
            if j == k {
                prop_assert!(a1[j] > a0[j]);
            } else {
                prop_assert!(a1[j] < a0[j]);
            }
        }
    }

    #[test]
    fn mean_film_is_the_bin_average(z in matrix(5, 4), gamma in matrix(BINS, 4), beta in matrix(BINS, 4)) {
        let mut g = Graph::no_grad();
        let (zv, gv, bv) = (g.constant(z), g.constant(gamma), g.constant(beta));
        let mean = film_modulate(&mut g, zv, gv, bv, FilmBin::Mean).unwrap();
        let mean = g.value(mean).clone();
        let mut avg = vec![0.0; 20];
        for bin in 0..BINS {
            let y = film_modulate(&mut g, zv, gv, bv, FilmBin::Altitude(bin)).unwrap();
            for (a, v) in avg.iter_mut().zip(g.value(y).data()) {
                *a += v / BINS as f64;
            }
        }
        for (a, b) in avg.iter().zip(mean.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn uapa_temperature_and_loss_bounds(zd in prop::collection::vec(-30.0f64..30.0, 8), zs in prop::collection::vec(-30.0f64..30.0, 8)) {
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::matrix(1, 8, zd).unwrap());
        let b = g.constant(Tensor::matrix(1, 8, zs).unwrap());
        let out = uapa(&mut g, a, b, UAPA_T0).unwrap();
        prop_assert!((4.0..=8.0).contains(&out.temperature));
        prop_assert!(out.entropy_gap >= 0.0);
        prop_assert!(g.value(out.loss).item() >= -1e-12);
    }

    #[test]
    fn diversity_stays_in_unit_interval(p in matrix(6, 4)) {
        prop_assume!(p.data().chunks(4).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let mut g = Graph::no_grad();
        let pv = g.constant(p);
        let d = diversity(&mut g, pv).unwrap();
        let d = g.value(d).item();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn schedule_is_continuous_at_the_warmup_junction(warmup in 5usize..200, extra in 10usize..2000) {
        let total = warmup + extra;
        let before = schedule_factor(warmup - 1, total, warmup, 0.01);
        let at = schedule_factor(warmup, total, warmup, 0.01);
        let after = schedule_factor(warmup + 1, total, warmup, 0.01);
        prop_assert_eq!(at, 1.0);
        prop_assert!((at - before - 1.0 / warmup as f64).abs() < 1e-12);
        prop_assert!(at - after >= 0.0 && at - after <= std::f64::consts::PI / (2.0 * extra as f64));
    }
}

#[test]
fn teacher_features_vary_across_rasters() {
    let cfg = EncoderConfig::default();
    let teacher = Teacher::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let rc = RenderConfig::default();
    let feats: Vec<Vec<f64>> = (0..100)
        .map(|i| {
            let view = if i % 2 == 0 { View::Sat } else { View::Drone };
            teacher.encode(&render_view(&gen_location(i), view, 200.0, i, &rc).unwrap()).unwrap()
        })
        .collect();
    for d in 0..cfg.teacher_dim {
        let mean = feats.iter().map(|f| f[d]).sum::<f64>() / 100.0;
        let var = feats.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / 100.0;
        assert!(var > 0.0, "dimension {d}");
    }
}
