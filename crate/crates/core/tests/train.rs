use std::collections::BTreeSet;
use std::sync::Arc;

use skypart::backbone::EncoderConfig;
use skypart::dataset::{build_dataset, ScenePair, Split};
use skypart::head::HeadConfig;
use skypart::model::ModelConfig;
use skypart::scene::{RenderConfig, ALTITUDES};
use skypart::train::*;
use skypart_tensor::{Graph, ParamGroup, ParamKind, ParamStore, Tensor};

fn pairs(n: usize) -> Vec<ScenePair> {
    build_dataset(n, &ALTITUDES, Split::Train, 3, &RenderConfig::default()).unwrap()
}

fn model_cfg(n_classes: usize) -> ModelConfig {
    ModelConfig { encoder: EncoderConfig::default(), head: HeadConfig::default(), n_classes }
}

fn small_cfg() -> TrainConfig {
    TrainConfig { epochs: 1, ..TrainConfig::default() }
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::default();
    let (total, warmup) = (600, 40);
    assert_eq!(lr_at(0, total, warmup, &cfg), (0.0, 0.0));
    assert_eq!(lr_at(warmup, total, warmup, &cfg), (cfg.head_lr, cfg.backbone_lr));
    let (h, b) = lr_at(total, total, warmup, &cfg);
    assert!((h - 0.01 * cfg.head_lr).abs() < 1e-18 && (b - 0.01 * cfg.backbone_lr).abs() < 1e-18);
    let mut prev = f64::INFINITY;
    for s in warmup..=total {
        let f = schedule_factor(s, total, warmup, 0.01);
        assert!(f <= prev && (0.01..=1.0).contains(&f));
        prev = f;
    }
}

fn one_param(value: Vec<f64>, decay: bool) -> ParamStore {
    let mut store = ParamStore::new();
    let kind = if decay { ParamKind::weight(ParamGroup::Head) } else { ParamKind::no_decay(ParamGroup::Head) };
    store.add("w", Tensor::vector(value), kind).unwrap();
    store
}

fn set_grad(store: &mut ParamStore, grad: &[f64]) {
    let id = store.id("w").unwrap();
    let mut g = Graph::new();
    let w = g.param(store, id);
    let c = g.constant(Tensor::vector(grad.to_vec()));
    let p = g.mul(w, c).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    store.zero_grad();
    store.accumulate(&g, &grads);
}

#[test]
fn adamw_examples() {
    let mut store = one_param(vec![0.5, -1.0, 2.0], true);
    let before = store.value(store.id("w").unwrap()).clone();
    let mut opt = AdamW::new(&store);
    set_grad(&mut store, &[0.0; 3]);
    for _ in 0..10 {
        assert_eq!(opt.step(&mut store, |_| 1e-2, 0.0), StepOutcome::Applied);
    }
    assert_eq!(store.value(store.id("w").unwrap()), &before);
    let (m, v) = opt.moments();
    assert_eq!(m[0].shape(), before.shape());
    assert_eq!(v[0].shape(), before.shape());

    let mut store = one_param(vec![0.0; 3], false);
    let mut opt = AdamW::new(&store);
    set_grad(&mut store, &[0.3, -2.0, 5.0]);
    let lr = 1e-3;
    let mut last = vec![0.0; 3];
    for _ in 0..3000 {
        let prev = store.value(store.id("w").unwrap()).data().to_vec();
        opt.step(&mut store, |_| lr, 0.0);
        let now = store.value(store.id("w").unwrap()).data();
        last = prev.iter().zip(now).map(|(p, n)| (p - n).abs()).collect();
    }
    for d in last {
        assert!((d - lr).abs() < 1e-6 * lr, "{d}");
    }

    let mut store = one_param(vec![1.0, -2.0, 3.0], true);
    let mut opt = AdamW::new(&store);
    set_grad(&mut store, &[0.0; 3]);
    let mut prev = store.value(store.id("w").unwrap()).norm();
    for _ in 0..20 {
        opt.step(&mut store, |_| 0.1, 0.05);
        let n = store.value(store.id("w").unwrap()).norm();
        assert!(n < prev);
        prev = n;
    }

    let mut store = one_param(vec![1.0], true);
    let mut opt = AdamW::new(&store);
    set_grad(&mut store, &[f64::NAN]);
    assert!(matches!(opt.step(&mut store, |_| 0.1, 0.0), StepOutcome::Skipped(_)));
    assert_eq!(store.value(store.id("w").unwrap()).data(), &[1.0]);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn ema_examples() {
    let student = one_param(vec![1.0, 2.0], true);
    let mut ema = student.clone();
    ema_update(&student, &mut ema, 0.996).unwrap();
    assert_eq!(ema.entries()[0].value, student.entries()[0].value);

    let mut ema = one_param(vec![-5.0, 7.0], true);
    ema_update(&student, &mut ema, 1.0).unwrap();
    assert_eq!(ema.entries()[0].value.data(), &[-5.0, 7.0]);
    ema_update(&student, &mut ema, 0.0).unwrap();
    assert_eq!(ema.entries()[0].value.data(), &[1.0, 2.0]);

    let mut other = ParamStore::new();
    other.add("v", Tensor::vector(vec![0.0, 0.0]), ParamKind::weight(ParamGroup::Head)).unwrap();
    assert!(ema_update(&student, &mut other, 0.5).is_err());
}

#[test]
fn pk_sampler_examples() {
    let data = pairs(6);
    let s = PkSampler::new(&data);
    let b = s.sample(4, 2, 9).unwrap();
    assert_eq!(b.locations.len(), 4);
    assert_eq!(b.views.iter().map(Vec::len).sum::<usize>(), 8);
    assert_eq!(b.locations.iter().collect::<BTreeSet<_>>().len(), 4);
    for (loc, views) in b.locations.iter().zip(&b.views) {
        assert!(views.iter().all(|&i| data[i].location_id == *loc));
        assert_eq!(views.iter().collect::<BTreeSet<_>>().len(), 2);
    }
    assert_eq!(b, s.sample(4, 2, 9).unwrap());
    assert!(s.sample(7, 2, 9).is_err());
    assert!(s.sample(2, 5, 9).is_err());

    let epoch = s.epoch(3, 2, 1).unwrap();
    assert_eq!(epoch.len(), s.steps_per_epoch(3, 2));
    let seen: Vec<u32> = epoch.iter().flat_map(|b| b.locations.clone()).collect();
    assert_eq!(seen.len(), 6);
    assert_eq!(seen.iter().collect::<BTreeSet<_>>().len(), 6);
}

#[test]
fn ablation_flags_round_trip() {
    for f in Ablation::FLAGS {
        let a = Ablation::only(f).unwrap();
        assert_eq!(a.get(f), Some(true));
        assert!(a.validate().is_ok());
    }
    assert!(Ablation::only("drop_everything").is_err());
    let mut a = Ablation::default();
    a.set("cls_only", true).unwrap();
    a.set("part_only", true).unwrap();
    assert!(a.validate().is_err());
    assert!(!Ablation::only("cls_only").unwrap().branches().part);
}

#[test]
fn weather_touches_only_drones() {
    let data = pairs(4);
    let t = Trainer::new(model_cfg(4), small_cfg(), data.clone()).unwrap();
    let batch = PkSampler::new(&data).sample(4, 2, 0).unwrap();
    let mut corrupted = 0;
    for seed in 0..6 {
        let prep = t.prepare(&batch, seed);
        assert_eq!(prep.drones.len(), 8);
        assert_eq!(prep.sats.len(), 4);
        for (j, views) in batch.views.iter().enumerate() {
            assert!(Arc::ptr_eq(&prep.sats[j], &data[views[0]].sat));
        }
        if prep.condition.tag() != "normal" {
            corrupted += 1;
            assert_ne!(prep.drones[0], data[batch.views[0][0]].drone);
        }
    }
    assert!(corrupted > 0);
}

#[test]
fn first_epoch_report_contract() {
    let data = pairs(4);
    let mut t = Trainer::new(model_cfg(4), small_cfg(), data.clone()).unwrap();
    let batch = PkSampler::new(&data).sample(4, 2, 0).unwrap();
    let r = t.train_step(&batch, 0).unwrap();
    assert_eq!(r.term_weights.get("mar"), Some(&0.0));
    assert!(r.terms.contains_key("mar"));
    for k in ["circle", "proxy_anchor", "infonce", "diversity", "distill_cross", "distill_ema", "altitude"] {
        assert!(r.terms.contains_key(k), "{k}");
    }
    assert_eq!(r.groups.len(), 4);
    assert!((r.recombined_total() - r.total).abs() < 1e-12 * r.total.abs().max(1.0));
    assert_eq!(t.step(), 1);
    assert!(t.ema.entries().iter().all(|e| e.grad.data().iter().all(|&v| v == 0.0)));
    assert!(t.store.entries().iter().any(|e| e.grad.max_abs() > 0.0));

    let cfg = TrainConfig { ablation: Ablation::only("drop_align").unwrap(), ..small_cfg() };
    let mut t = Trainer::new(model_cfg(4), cfg, data).unwrap();
    let r = t.train_step(&batch, 12).unwrap();
    for k in ["circle", "proxy_anchor", "infonce", "patch_nce", "proxy_ce", "uapa"] {
        assert!(!r.terms.contains_key(k), "{k}");
    }
    assert!(!r.groups.contains_key("align"));
    assert_eq!(r.term_weights.get("mar"), Some(&1.0));
}

#[test]
fn fixed_seed_gives_identical_reports() {
    let data = pairs(4);
    let run = || {
        let cfg = TrainConfig { p: 2, ..small_cfg() };
        let mut t = Trainer::new(model_cfg(4), cfg, data.clone()).unwrap();
        let reports = t.train_epoch(0).unwrap();
        (reports, t.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    for (x, y) in sa.entries().iter().zip(sb.entries()) {
        assert_eq!(x.value, y.value, "{}", x.name);
    }
}
