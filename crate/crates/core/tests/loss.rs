use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skypart::backbone::{normalized_coords, EncoderConfig};
use skypart::head::{HeadConfig, PartHead};
use skypart::loss::*;
use skypart_tensor::{Graph, ParamStore, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn var(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
    g.constant(Tensor::from_rows(rows).unwrap())
}

macro_rules! val {
    ($g:ident, $e:expr) => {{
        let v = $e;
        $g.value(v).item()
    }};
}

fn infonce_oracle(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
    let b = a.len();
    (0..b).map(|i| lse(&(0..b).map(|j| dot(&a[i], &p[j]) / tau).collect::<Vec<_>>()) - dot(&a[i], &p[i]) / tau).sum::<f64>()
        / b as f64
}

fn proxy_anchor_oracle(e: &[Vec<f64>], labels: &[usize], proxies: &[Vec<f64>], delta: f64, alpha: f64) -> f64 {
    let c = proxies.len();
    let mut pos = 0.0;
    let mut with_pos = 0;
    let mut neg = 0.0;
    for (j, pj) in proxies.iter().enumerate() {
        let ps: Vec<f64> = (0..e.len()).filter(|&i| labels[i] == j).map(|i| -alpha * (dot(&e[i], pj) - delta)).collect();
        if !ps.is_empty() {
            with_pos += 1;
            pos += softplus(lse(&ps));
        }
        let ns: Vec<f64> = (0..e.len()).filter(|&i| labels[i] != j).map(|i| alpha * (dot(&e[i], pj) + delta)).collect();
        if !ns.is_empty() {
            neg += softplus(lse(&ns));
        }
    }
    pos / with_pos as f64 + neg / c as f64
}

fn circle_oracle(e: &[Vec<f64>], labels: &[usize], m: f64, gamma: f64) -> f64 {
    let b = e.len();
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..b {
        let sp: Vec<f64> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).map(|j| dot(&e[i], &e[j])).collect();
        let sn: Vec<f64> = (0..b).filter(|&j| labels[j] != labels[i]).map(|j| dot(&e[i], &e[j])).collect();
        if sp.is_empty() || sn.is_empty() {
            continue;
        }
        let lp: Vec<f64> = sp.iter().map(|&s| -gamma * (1.0 + m - s).max(0.0) * (s - (1.0 - m))).collect();
        let ln: Vec<f64> = sn.iter().map(|&s| gamma * (s + m).max(0.0) * (s - m)).collect();
        total += softplus(lse(&lp) + lse(&ln));
        n += 1;
    }
    total / n as f64
}

#[test]
fn infonce_examples_and_oracle() {
    let mut g = Graph::new();
    let same = var(&mut g, &vec![vec![1.0, 0.0]; 5]);
    let l = infonce(&mut g, same, same, 0.07).unwrap();
    assert!((val!(g, l) - 5f64.ln()).abs() < 1e-12);

    let a = var(&mut g, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
    let l = infonce(&mut g, a, a, 0.07).unwrap();
    assert!(val!(g, l) < 1e-6);

    let (x, y) = (unit_rows(6, 5, 1), unit_rows(6, 5, 2));
    let (xv, yv) = (var(&mut g, &x), var(&mut g, &y));
    let l = infonce(&mut g, xv, yv, 0.07).unwrap();
    assert!((val!(g, l) - infonce_oracle(&x, &y, 0.07)).abs() < 1e-10);
    let s = infonce_symmetric(&mut g, xv, yv, 0.07).unwrap();
    let expect = 0.5 * (infonce_oracle(&x, &y, 0.07) + infonce_oracle(&y, &x, 0.07));
    assert!((val!(g, s) - expect).abs() < 1e-10);

    let one = var(&mut g, &x[..1]);
    assert!(infonce(&mut g, one, one, 0.07).is_err());
}

#[test]
fn proxy_anchor_examples_and_oracle() {
    let mut g = Graph::new();
    let e = vec![vec![1.0, 0.0]];
    let p = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]];
    let (ev, pv) = (var(&mut g, &e), var(&mut g, &p));
    let l = val!(g, proxy_anchor(&mut g, ev, &[0], pv, PROXY_MARGIN, PROXY_SCALE).unwrap());
    assert!(l < 1e-3);
    assert!((l - proxy_anchor_oracle(&e, &[0], &p, 0.1, 32.0)).abs() < 1e-15);

    let e = vec![vec![0.0, 0.0, 1.0]];
    let p = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0]];
    let (ev, pv) = (var(&mut g, &e), var(&mut g, &p));
    let l = val!(g, proxy_anchor(&mut g, ev, &[0], pv, PROXY_MARGIN, PROXY_SCALE).unwrap());
    let expect = softplus(3.2) + 2.0 * softplus(3.2) / 3.0;
    assert!((l - expect).abs() < 1e-12);

    let e = unit_rows(8, 6, 3);
    let p = unit_rows(4, 6, 4);
    let labels = [0, 0, 1, 1, 2, 2, 0, 1];
    let (ev, pv) = (var(&mut g, &e), var(&mut g, &p));
    let l = val!(g, proxy_anchor(&mut g, ev, &labels, pv, 0.1, 32.0).unwrap());
    assert!((l - proxy_anchor_oracle(&e, &labels, &p, 0.1, 32.0)).abs() < 1e-10);
    assert!(l >= 0.0);
    assert!(proxy_anchor(&mut g, ev, &[0, 0, 1, 1, 2, 2, 0, 9], pv, 0.1, 32.0).is_err());
}

#[test]
fn circle_loss_oracle_and_symmetry() {
    let mut g = Graph::new();
    let e = unit_rows(8, 6, 5);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let ev = var(&mut g, &e);
    let l = val!(g, circle_loss(&mut g, ev, &labels, CIRCLE_MARGIN, CIRCLE_SCALE).unwrap());
    assert!((l - circle_oracle(&e, &labels, 0.25, 32.0)).abs() < 1e-10);

    let mut swapped = e.clone();
    swapped.swap(0, 1);
    swapped.swap(4, 5);
    let sv = var(&mut g, &swapped);
    let l2 = val!(g, circle_loss(&mut g, sv, &labels, CIRCLE_MARGIN, CIRCLE_SCALE).unwrap());
    assert!((l - l2).abs() < 1e-12);

    let sep = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]];
    let sv = var(&mut g, &sep);
    let l = val!(g, circle_loss(&mut g, sv, &[0, 0, 1, 1], CIRCLE_MARGIN, CIRCLE_SCALE).unwrap());
    assert!((l - circle_oracle(&sep, &[0, 0, 1, 1], 0.25, 32.0)).abs() < 1e-12);
    assert!((l - softplus(2f64.ln() - 2.0)).abs() < 1e-12);

    let uv = var(&mut g, &e[..2]);
    assert!(circle_loss(&mut g, uv, &[0, 0], 0.25, 32.0).is_err());
}

#[test]
fn patch_nce_examples() {
    let mut g = Graph::new();
    let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let z = var(&mut g, &eye);
    let a = Tensor::from_rows(&eye).unwrap();
    let out = patch_nce(&mut g, (z, &a), &[(z, &a)], 0, 0.07).unwrap();
    let expect = (1.0 + 3.0 * (-1.0f64 / 0.07).exp()).ln();
    assert!(!out.empty && out.contributing == 4);
    assert!((val!(g, out.loss) - expect).abs() < 1e-12);
    assert!(expect < 1e-5);

    let shifted: Vec<Vec<f64>> = (0..4).map(|i| (0..8).map(|j| if j == i + 4 { 1.0 } else { 0.0 }).collect()).collect();
    let a8 = Tensor::from_rows(&shifted).unwrap();
    let a8d = Tensor::from_rows(&eye.iter().map(|r| [r.clone(), vec![0.0; 4]].concat()).collect::<Vec<_>>()).unwrap();
    let out = patch_nce(&mut g, (z, &a8d), &[(z, &a8)], 0, 0.07).unwrap();
    assert!(out.empty);
    assert_eq!(val!(g, out.loss), 0.0);
    assert!(patch_nce(&mut g, (z, &a), &[(z, &a)], 1, 0.07).is_err());
}

#[test]
fn uapa_temperature_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::matrix(1, 8, vec![0.0; 8]).unwrap());
    let mut peaked = vec![0.0; 8];
    peaked[2] = 60.0;
    let onehot = g.constant(Tensor::matrix(1, 8, peaked).unwrap());
    let out = uapa(&mut g, uniform, onehot, UAPA_T0).unwrap();
    assert!((out.temperature - 8.0).abs() < 1e-12);
    assert!((out.entropy_gap - 8f64.ln()).abs() < 1e-12);

    let out = uapa(&mut g, onehot, uniform, UAPA_T0).unwrap();
    assert_eq!(out.temperature, 4.0);
    assert_eq!(out.entropy_gap, 0.0);

    let z = g.constant(Tensor::randn(&[1, 8], 1.0, &mut rng(9)));
    let out = uapa(&mut g, z, z, UAPA_T0).unwrap();
    assert!(val!(g, out.loss).abs() < 1e-15);
}

#[test]
fn mar_examples_and_detach_contract() {
    let mut g = Graph::new();
    let x = var(&mut g, &unit_rows(5, 4, 10));
    assert!(val!(g, mean_cosine_gap(&mut g, x, x).unwrap()).abs() < 1e-12);
    let p = var(&mut g, &[vec![1.0, 0.0], vec![0.0, 2.0]]);
    let q = var(&mut g, &[vec![0.0, 3.0], vec![-1.0, 0.0]]);
    assert!((val!(g, mean_cosine_gap(&mut g, p, q).unwrap()) - 1.0).abs() < 1e-12);

    let mut store = ParamStore::new();
    let cfg = HeadConfig::default();
    let head = PartHead::new(cfg, &mut store, &mut rng(11)).unwrap();
    let coords = normalized_coords(&EncoderConfig::default());
    let l = coords.dims2().0;
    let mask = mar_mask(l, MAR_MASK_RATIO, 3);
    assert_eq!(mask.len(), 19);
    assert_eq!(mask, mar_mask(l, MAR_MASK_RATIO, 3));

    let mut g = Graph::new();
    let z = g.leaf(Tensor::randn(&[l, cfg.part_dim], 1.0, &mut rng(12)).with_requires_grad(true));
    let logits = g.leaf(Tensor::randn(&[l, cfg.k_max], 1.0, &mut rng(13)).with_requires_grad(true));
    let a = g.softmax(logits, 1, 1.0).unwrap();
    let loss = mar(&mut g, &store, &head, Reconstructor::Identity, z, a, &coords, &mask).unwrap();
    let grads = g.backward(loss).unwrap();
    let ga = grads.get(logits).unwrap();
    let gz = grads.get(z).unwrap();
    for &i in &mask {
        assert!(ga.row(i).iter().all(|&v| v == 0.0));
        assert!(gz.row(i).iter().all(|&v| v == 0.0));
    }
    assert!(ga.max_abs() > 0.0);
    assert!(mar(&mut g, &store, &head, Reconstructor::Identity, z, a, &coords, &[]).is_err());
}

#[test]
fn diversity_examples() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::eye(4));
    assert_eq!(val!(g, diversity(&mut g, eye).unwrap()), 0.0);
    let same = g.constant(Tensor::full(&[5, 3], 0.7));
    assert!((val!(g, diversity(&mut g, same).unwrap()) - 1.0).abs() < 1e-12);
    let t = 60f64.to_radians();
    let pair = var(&mut g, &[vec![1.0, 0.0], vec![t.cos(), t.sin()]]);
    assert!((val!(g, diversity(&mut g, pair).unwrap()) - 0.25).abs() < 1e-12);
    let zero = var(&mut g, &[vec![1.0, 0.0], vec![0.0, 0.0]]);
    assert!(diversity(&mut g, zero).is_err());
}

#[test]
fn distill_examples() {
    let mut g = Graph::new();
    let x = var(&mut g, &unit_rows(1, 6, 14));
    assert!(val!(g, cross_distill(&mut g, x, x).unwrap()).abs() < 1e-12);

    let mut store = ParamStore::new();
    let proj = Projector::new(&mut store, 96, 96, &mut rng(15)).unwrap();
    let f = unit_rows(1, 96, 16).remove(0);
    let fv = var(&mut g, &[f.clone()]);
    let teacher = vec![0.5; 96];
    let (_, l_ema) = distill(&mut g, &store, &proj, fv, &teacher, &f).unwrap();
    assert!(val!(g, l_ema).abs() < 1e-12);
}

#[test]
fn altitude_examples() {
    assert_eq!(normalized_altitude(150.0), 0.0);
    assert_eq!(normalized_altitude(300.0), 1.0);
    let mut g = Graph::new();
    let pred = g.constant(Tensor::matrix(1, 1, vec![normalized_altitude(250.0)]).unwrap());
    let l = altitude_loss(&mut g, pred, Some(250.0)).unwrap().unwrap();
    assert_eq!(val!(g, l), 0.0);
    let far = g.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let l = altitude_loss(&mut g, far, Some(150.0)).unwrap().unwrap();
    assert_eq!(val!(g, l), 2.5);
    assert!(altitude_loss(&mut g, pred, None).unwrap().is_none());
}

#[test]
fn kendall_total_examples() {
    let mut g = Graph::new();
    let losses = [0.5, 1.0, 2.0, 4.0];
    let groups: Vec<Option<Var>> = losses.iter().map(|&l| Some(g.constant(Tensor::scalar(l)))).collect();
    let groups: [Option<Var>; 4] = groups.try_into().unwrap();
    let zero = g.constant(Tensor::zeros(&[1, 4]));
    assert_eq!(val!(g, geopart_total(&mut g, &groups, zero).unwrap()), 7.5);

    let s = [0.3, -0.2, 1.1, 0.0];
    let sv = g.constant(Tensor::matrix(1, 4, s.to_vec()).unwrap());
    let expect: f64 = (0..4).map(|i| (-s[i]).exp() * losses[i] + s[i]).sum();
    assert!((val!(g, geopart_total(&mut g, &groups, sv).unwrap()) - expect).abs() < 1e-12);

    let partial = [groups[0], None, groups[2], None];
    let expect = (-s[0]).exp() * 0.5 + s[0] + (-s[2]).exp() * 2.0 + s[2];
    assert!((val!(g, geopart_total(&mut g, &partial, sv).unwrap()) - expect).abs() < 1e-12);
    assert!(geopart_total(&mut g, &[None; 4], sv).is_err());
    let nan = g.constant(Tensor::scalar(f64::NAN));
    assert!(geopart_total(&mut g, &[Some(nan), None, None, None], sv).is_err());
}

#[test]
fn kendall_stationary_point_shifts_by_log_two() {
    let descend = |l: f64| {
        let mut s = 0.0f64;
        for _ in 0..5000 {
            let mut g = Graph::new();
            let sv = g.leaf(Tensor::matrix(1, 4, vec![s, 0.0, 0.0, 0.0]).unwrap().with_requires_grad(true));
            let lv = g.constant(Tensor::scalar(l));
            let total = geopart_total(&mut g, &[Some(lv), None, None, None], sv).unwrap();
            let grad = g.backward(total).unwrap().get(sv).unwrap().data()[0];
            s -= 0.1 * grad;
        }
        s
    };
    let a = descend(1.5);
    let b = descend(3.0);
    assert!((a - 1.5f64.ln()).abs() < 1e-6);
    assert!((b - a - 2f64.ln()).abs() < 1e-6);
}
