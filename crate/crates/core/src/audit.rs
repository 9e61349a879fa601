//! Backward passes of every loss group against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use skypart_tensor::check::{finite_difference_at, relative_error, FD_STEP};
use skypart_tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

use crate::error::{Result, SkyError};
use crate::loss::{
    altitude_loss, circle_loss, diversity, distill, geopart_total, infonce_symmetric, mar, mar_mask, patch_nce,
    proxy_anchor, uapa, Reconstructor, CIRCLE_MARGIN, CIRCLE_SCALE, CONTRAST_TAU, MAR_MASK_RATIO, PROXY_MARGIN,
    PROXY_SCALE, UAPA_T0,
};
use crate::model::{ModelConfig, SkyPart};
use crate::scene::mix_seed;

pub const AUDIT_TOLERANCE: f64 = 1e-4;
/// Parameter tensors are probed on at most this many coordinates.
const PARAM_PROBES: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupAudit {
    pub group: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl GroupAudit {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= AUDIT_TOLERANCE
    }
}

fn to_tensor_err(e: SkyError) -> TensorError {
    match e {
        SkyError::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "audit", msg: other.to_string() },
    }
}

fn spread(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Relative error of the gradient w.r.t. a leaf input on `coords`.
fn leaf_error<F>(x: &Tensor, coords: &[usize], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut g, v)?;
    let grads = g.backward(loss)?;
    let full = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let analytic: Vec<f64> = coords.iter().map(|&i| full.data()[i]).collect();
    let numeric = finite_difference_at(
        |t| {
            let mut g = Graph::no_grad();
            let v = g.leaf(t.clone());
            let l = f(&mut g, v).map_err(to_tensor_err)?;
            Ok(g.value(l).item())
        },
        x,
        FD_STEP,
        coords,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

/// Relative error of the gradient w.r.t. one stored parameter.
fn param_error<F>(store: &ParamStore, id: ParamId, f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.param(store, id);
    let grads = g.backward(loss)?;
    let x = store.value(id).clone();
    let full = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let coords = spread(x.numel(), PARAM_PROBES);
    let analytic: Vec<f64> = coords.iter().map(|&i| full.data()[i]).collect();
    let mut probe = store.clone();
    let numeric = finite_difference_at(
        |t| {
            probe.set_value(id, t.clone())?;
            let mut g = Graph::no_grad();
            let l = f(&mut g, &probe).map_err(to_tensor_err)?;
            Ok(g.value(l).item())
        },
        &x,
        FD_STEP,
        &coords,
    )?;
    Ok((relative_error(&analytic, &numeric), coords.len()))
}

fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[rows, cols], std, rng)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / s));
    }
    Tensor::new(vec![r, c], out).expect("shape preserved")
}

struct Recorder(Vec<GroupAudit>);

impl Recorder {
    fn push(&mut self, group: &str, parts: &[(f64, usize)]) {
        let max_rel_error = parts.iter().map(|p| p.0).fold(0.0, f64::max);
        let coords = parts.iter().map(|p| p.1).sum();
        self.0.push(GroupAudit { group: group.into(), max_rel_error, coords });
    }
}

/// Audits every loss group on desk-profile shapes.
pub fn grad_audit(cfg: ModelConfig, seed: u64) -> Result<Vec<GroupAudit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA0D1));
    let (model, store) = SkyPart::new(cfg, &mut rng)?;
    let d = cfg.head.embed_dim;
    let dp = cfg.head.part_dim;
    let k = cfg.head.k_max;
    let l = cfg.encoder.n_tokens();
    let c = cfg.n_classes;
    let p = 4usize;
    let b = 3 * p;
    let labels: Vec<usize> = (0..b).map(|i| if i < 2 * p { i / 2 } else { i - 2 * p }).collect();
    let mut rec = Recorder(Vec::new());
    let all = |n: usize| (0..n).collect::<Vec<_>>();

    let emb = randn(b, d, 1.0, &mut rng);
    let e = leaf_error(&emb, &all(emb.numel()), |g, x| circle_loss(g, x, &labels, CIRCLE_MARGIN, CIRCLE_SCALE))?;
    rec.push("circle", &[(e, emb.numel())]);

    let proxies = randn(c, d, 1.0, &mut rng);
    let pc = proxies.clone();
    let e1 = leaf_error(&emb, &all(emb.numel()), |g, x| {
        let pr = g.constant(pc.clone());
        proxy_anchor(g, x, &labels, pr, PROXY_MARGIN, PROXY_SCALE)
    })?;
    let ec = emb.clone();
    let e2 = leaf_error(&proxies, &all(proxies.numel()), |g, pr| {
        let x = g.constant(ec.clone());
        proxy_anchor(g, x, &labels, pr, PROXY_MARGIN, PROXY_SCALE)
    })?;
    rec.push("proxy_anchor", &[(e1, emb.numel()), (e2, proxies.numel())]);

    let a = randn(p, d, 1.0, &mut rng);
    let pos = randn(p, d, 1.0, &mut rng);
    let posc = pos.clone();
    let e1 = leaf_error(&a, &all(a.numel()), |g, x| {
        let y = g.constant(posc.clone());
        infonce_symmetric(g, x, y, CONTRAST_TAU)
    })?;
    let ac = a.clone();
    let e2 = leaf_error(&pos, &all(pos.numel()), |g, y| {
        let x = g.constant(ac.clone());
        infonce_symmetric(g, x, y, CONTRAST_TAU)
    })?;
    rec.push("infonce", &[(e1, a.numel()), (e2, pos.numel())]);

    let zd = randn(l, dp, 1.0, &mut rng);
    let ad = softmax_rows(&randn(l, k, 2.0, &mut rng));
    let sat_z: Vec<Tensor> = (0..p).map(|_| randn(l, dp, 1.0, &mut rng)).collect();
    let sat_a: Vec<Tensor> = (0..p).map(|_| softmax_rows(&randn(l, k, 2.0, &mut rng))).collect();
    let sz = sat_z.clone();
    let nce = |g: &mut Graph, zd_v: Var, s0: Option<Var>| -> Result<Var> {
        let mut sats = Vec::with_capacity(p);
        for (j, (z, a)) in sz.iter().zip(&sat_a).enumerate() {
            let v = match (j, s0) {
                (0, Some(v)) => v,
                _ => g.constant(z.clone()),
            };
            sats.push((v, a));
        }
        let out = patch_nce(g, (zd_v, &ad), &sats, 0, CONTRAST_TAU)?;
        if out.empty {
            return Err(SkyError::arg("patch-NCE audit instance has no positives"));
        }
        Ok(out.loss)
    };
    let probes = spread(zd.numel(), 256);
    let e1 = leaf_error(&zd, &probes, |g, x| nce(g, x, None))?;
    let zdc = zd.clone();
    let e2 = leaf_error(&sat_z[0], &probes, |g, s| {
        let x = g.constant(zdc.clone());
        nce(g, x, Some(s))
    })?;
    rec.push("patch_nce", &[(e1, probes.len()), (e2, probes.len())]);

    let z_d = randn(1, c, 0.5, &mut rng);
    let z_s = randn(1, c, 3.0, &mut rng);
    {
        let mut g = Graph::no_grad();
        let x = g.constant(z_d.clone());
        let y = g.constant(z_s.clone());
        let gap = uapa(&mut g, x, y, UAPA_T0)?.entropy_gap;
        if gap < 1e-3 {
            return Err(SkyError::arg("UAPA audit instance sits on the entropy-gap kink"));
        }
    }
    let zsc = z_s.clone();
    let e = leaf_error(&z_d, &all(c), |g, x| {
        let y = g.constant(zsc.clone());
        Ok(uapa(g, x, y, UAPA_T0)?.loss)
    })?;
    rec.push("uapa", &[(e, c)]);

    let z = randn(l, dp, 1.0, &mut rng);
    let am = softmax_rows(&randn(l, k, 2.0, &mut rng));
    let mask = mar_mask(l, MAR_MASK_RATIO, mix_seed(seed, 0x3A));
    let visible: Vec<usize> = (0..l).filter(|i| !mask.contains(i)).collect();
    let z_coords: Vec<usize> = visible.iter().flat_map(|&i| (0..dp).map(move |j| i * dp + j)).collect();
    let a_coords: Vec<usize> = visible.iter().flat_map(|&i| (0..k).map(move |j| i * k + j)).collect();
    let recon = Reconstructor::Decoder(&model.decoder);
    let amc = am.clone();
    let e1 = leaf_error(&z, &spread_of(&z_coords, 256), |g, x| {
        let av = g.constant(amc.clone());
        mar(g, &store, &model.head, recon, x, av, &model.coords, &mask)
    })?;
    let zc = z.clone();
    let e2 = leaf_error(&am, &spread_of(&a_coords, 256), |g, av| {
        let x = g.constant(zc.clone());
        mar(g, &store, &model.head, recon, x, av, &model.coords, &mask)
    })?;
    let dec_w = store.id("loss.mar.l1.w").ok_or_else(|| SkyError::arg("decoder weight missing"))?;
    let (e3, n3) = param_error(&store, dec_w, |g, s| {
        let x = g.constant(zc.clone());
        let av = g.constant(amc.clone());
        mar(g, s, &model.head, recon, x, av, &model.coords, &mask)
    })?;
    rec.push("mar", &[(e1, 256.min(z_coords.len())), (e2, 256.min(a_coords.len())), (e3, n3)]);

    let protos = randn(k, dp, 1.0, &mut rng);
    let e = leaf_error(&protos, &all(protos.numel()), |g, x| diversity(g, x))?;
    rec.push("diversity", &[(e, protos.numel())]);

    let f = randn(1, d, 1.0, &mut rng);
    let teacher: Vec<f64> = (0..cfg.encoder.teacher_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ema: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dist = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
        let (cr, em) = distill(g, s, &model.projector, x, &teacher, &ema)?;
        Ok(g.add(cr, em)?)
    };
    let e1 = leaf_error(&f, &all(d), |g, x| dist(g, &store, x))?;
    let proj_w = store.id("loss.distill.proj.w").ok_or_else(|| SkyError::arg("projector weight missing"))?;
    let fc = f.clone();
    let (e2, n2) = param_error(&store, proj_w, |g, s| {
        let x = g.constant(fc.clone());
        dist(g, s, x)
    })?;
    rec.push("distill", &[(e1, d), (e2, n2)]);

    let alt = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
        let pred = model.alt_head.forward(g, s, x)?;
        altitude_loss(g, pred, Some(250.0))?.ok_or_else(|| SkyError::arg("altitude loss absent"))
    };
    let e1 = leaf_error(&f, &all(d), |g, x| alt(g, &store, x))?;
    let alt_w = store.id("loss.alt.l1.w").ok_or_else(|| SkyError::arg("altitude head weight missing"))?;
    let (e2, n2) = param_error(&store, alt_w, |g, s| {
        let x = g.constant(fc.clone());
        alt(g, s, x)
    })?;
    rec.push("altitude", &[(e1, d), (e2, n2)]);

    let group_vals = Tensor::vector((0..4).map(|_| rng.random_range(0.2..3.0)).collect());
    let log_vars = Tensor::new(vec![1, 4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let total = |g: &mut Graph, lv: Var, gv: Var| -> Result<Var> {
        let mut groups = [None; 4];
        for (i, slot) in groups.iter_mut().enumerate() {
            let s = g.gather_rows(gv, &[i])?;
            *slot = Some(g.reshape(s, &[])?);
        }
        geopart_total(g, &groups, lv)
    };
    let gvc = group_vals.clone();
    let e1 = leaf_error(&log_vars, &all(4), |g, lv| {
        let gv = g.constant(gvc.clone());
        total(g, lv, gv)
    })?;
    let lvc = log_vars.clone();
    let e2 = leaf_error(&group_vals, &all(4), |g, gv| {
        let lv = g.constant(lvc.clone());
        total(g, lv, gv)
    })?;
    rec.push("kendall_total", &[(e1, 4), (e2, 4)]);
    Ok(rec.0)
}

fn spread_of(coords: &[usize], max: usize) -> Vec<usize> {
    spread(coords.len(), max).into_iter().map(|i| coords[i]).collect()
}
