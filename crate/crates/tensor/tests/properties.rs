use proptest::prelude::*;
use skypart_tensor::{Graph, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(x in matrix(4, 6), shift in -50.0f64..50.0, tau in 0.05f64..3.0) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.softmax(v, 1, tau).unwrap();
        let shifted = g.constant(x.map(|a| a + shift));
        let s2 = g.softmax(shifted, 1, tau).unwrap();
        let (a, b) = (g.value(s).clone(), g.value(s2).clone());
        for i in 0..4 {
            let row_sum: f64 = a.row(i).iter().sum();
            prop_assert!((row_sum - 1.0).abs() <= 1e-9);
        }
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in matrix(3, 7)) {
        prop_assume!((0..3).all(|i| x.row(i).iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let mut g = Graph::new();
        let v = g.constant(x);
        let n = g.l2_normalize(v).unwrap();
        for i in 0..3 {
            let nr = g.value(n).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((nr - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(a in matrix(5, 7), b in matrix(7, 3)) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let p = g.matmul(va, vb).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.at(i, k) * b.at(k, j);
                }
                prop_assert!((g.value(p).at(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance(x in matrix(3, 8)) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let n = g.layer_norm(v).unwrap();
        for i in 0..3 {
            let row = g.value(n).row(i);
            let mu: f64 = row.iter().sum::<f64>() / 8.0;
            prop_assert!(mu.abs() < 1e-9);
            let raw_var: f64 = {
                let r = x.row(i);
                let m = r.iter().sum::<f64>() / 8.0;
                r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0
            };
            let var: f64 = row.iter().map(|a| a * a).sum::<f64>() / 8.0;
            let expect = raw_var / (raw_var + skypart_tensor::VAR_EPS);
            prop_assert!((var - expect).abs() < 1e-9);
        }
    }
}
