//! Loss groups (alignment, part quality, distillation, altitude) and their
//! uncertainty-weighted combination.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skypart_tensor::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::error::{Result, SkyError};
use crate::head::{aggregate, PartHead};
use crate::nn::{LayerNorm, Linear};
use crate::scene::mix_seed;

pub const CIRCLE_MARGIN: f64 = 0.25;
pub const CIRCLE_SCALE: f64 = 32.0;
pub const PROXY_MARGIN: f64 = 0.1;
pub const PROXY_SCALE: f64 = 32.0;
pub const CONTRAST_TAU: f64 = 0.07;
pub const UAPA_T0: f64 = 4.0;
pub const LABEL_SMOOTHING: f64 = 0.1;
pub const MAR_MASK_RATIO: f64 = 0.30;
pub const ALT_OFFSET_M: f64 = 150.0;
pub const ALT_SCALE_M: f64 = 150.0;

fn const_matrix(g: &mut Graph, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
    Ok(g.constant(Tensor::matrix(rows, cols, data)?))
}

/// Mean over rows of `−log softmax(a_i · Pᵀ / τ)[i]`.
pub fn infonce(g: &mut Graph, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let (b, _) = g.value(anchors).dims2();
    if b < 2 {
        return Err(SkyError::arg("InfoNCE needs at least two pairs"));
    }
    if g.value(positives).dims2().0 != b {
        return Err(SkyError::arg("InfoNCE anchors and positives differ in count"));
    }
    if !(tau > 0.0) {
        return Err(SkyError::arg(format!("InfoNCE temperature {tau}")));
    }
    let pt = g.transpose(positives)?;
    let sims = g.matmul(anchors, pt)?;
    let logits = g.mul_scalar(sims, 1.0 / tau)?;
    let lsm = g.log_softmax(logits)?;
    let eye = g.constant(Tensor::eye(b));
    let diag = g.mul(lsm, eye)?;
    let s = g.sum(diag)?;
    Ok(g.mul_scalar(s, -1.0 / b as f64)?)
}

/// Average of both retrieval directions.
pub fn infonce_symmetric(g: &mut Graph, a: Var, p: Var, tau: f64) -> Result<Var> {
    let l1 = infonce(g, a, p, tau)?;
    let l2 = infonce(g, p, a, tau)?;
    let s = g.add(l1, l2)?;
    Ok(g.mul_scalar(s, 0.5)?)
}

fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize(a)?;
    let bn = g.l2_normalize(b)?;
    let bt = g.transpose(bn)?;
    Ok(g.matmul(an, bt)?)
}

/// Proxy-anchor loss; embeddings and proxies are cosine-compared.
pub fn proxy_anchor(g: &mut Graph, emb: Var, labels: &[usize], proxies: Var, delta: f64, alpha: f64) -> Result<Var> {
    let (b, _) = g.value(emb).dims2();
    let (c, _) = g.value(proxies).dims2();
    if labels.len() != b {
        return Err(SkyError::arg(format!("{} labels for {b} embeddings", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(SkyError::arg(format!("label {bad} has no proxy ({c} proxies)")));
    }
    let s = cosine_matrix(g, emb, proxies)?;
    let mut pos_mask = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        pos_mask[i * c + l] = 1.0;
    }
    let neg_mask: Vec<f64> = pos_mask.iter().map(|m| 1.0 - m).collect();
    let with_pos: Vec<usize> = (0..c).filter(|&j| labels.contains(&j)).collect();
    let pm = const_matrix(g, b, c, pos_mask)?;
    let nm = const_matrix(g, b, c, neg_mask)?;

    let sp = g.add_scalar(s, -delta)?;
    let sp = g.mul_scalar(sp, -alpha)?;
    let ep = g.exp(sp)?;
    let ep = g.mul(ep, pm)?;
    let pos_sum = g.sum_rows(ep)?;
    let pos_sum = g.transpose(pos_sum)?;
    let pos_sum = g.gather_rows(pos_sum, &with_pos)?;
    let pos_term = g.add_scalar(pos_sum, 1.0)?;
    let pos_term = g.log(pos_term)?;
    let pos_term = g.sum(pos_term)?;
    let pos_term = g.mul_scalar(pos_term, 1.0 / with_pos.len() as f64)?;

    let sn = g.add_scalar(s, delta)?;
    let sn = g.mul_scalar(sn, alpha)?;
    let en = g.exp(sn)?;
    let en = g.mul(en, nm)?;
    let neg_sum = g.sum_rows(en)?;
    let neg_term = g.add_scalar(neg_sum, 1.0)?;
    let neg_term = g.log(neg_term)?;
    let neg_term = g.sum(neg_term)?;
    let neg_term = g.mul_scalar(neg_term, 1.0 / c as f64)?;
    Ok(g.add(pos_term, neg_term)?)
}

/// Circle loss over in-batch pairs, averaged over anchors that have both a
/// positive and a negative.
pub fn circle_loss(g: &mut Graph, emb: Var, labels: &[usize], margin: f64, gamma: f64) -> Result<Var> {
    let (b, _) = g.value(emb).dims2();
    if labels.len() != b {
        return Err(SkyError::arg(format!("{} labels for {b} embeddings", labels.len())));
    }
    let s = cosine_matrix(g, emb, emb)?;
    let flat = g.reshape(s, &[b * b])?;
    let mut per_anchor = Vec::new();
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).map(|j| i * b + j).collect();
        let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).map(|j| i * b + j).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let sp = g.gather_rows(flat, &pos)?;
        let sp = g.reshape(sp, &[1, pos.len()])?;
        let ap = g.mul_scalar(sp, -1.0)?;
        let ap = g.add_scalar(ap, 1.0 + margin)?;
        let ap = g.relu(ap)?;
        let dp = g.add_scalar(sp, -(1.0 - margin))?;
        let lp = g.mul(ap, dp)?;
        let lp = g.mul_scalar(lp, -gamma)?;
        let lp = g.logsumexp_rows(lp)?;

        let sn = g.gather_rows(flat, &neg)?;
        let sn = g.reshape(sn, &[1, neg.len()])?;
        let an = g.add_scalar(sn, margin)?;
        let an = g.relu(an)?;
        let dn = g.add_scalar(sn, -margin)?;
        let ln = g.mul(an, dn)?;
        let ln = g.mul_scalar(ln, gamma)?;
        let ln = g.logsumexp_rows(ln)?;
        let z = g.add(lp, ln)?;
        per_anchor.push(g.softplus(z)?);
    }
    if per_anchor.is_empty() {
        return Err(SkyError::arg("circle loss needs an anchor with both a positive and a negative"));
    }
    let n = per_anchor.len();
    let all = g.concat(&per_anchor, 0)?;
    let s = g.sum(all)?;
    Ok(g.mul_scalar(s, 1.0 / n as f64)?)
}

/// Index of the largest entry in each row, ties to the lower index.
pub fn row_argmax(t: &Tensor) -> Vec<usize> {
    let (m, n) = t.dims2();
    (0..m)
        .map(|i| {
            let r = &t.data()[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PatchNceOutput {
    pub loss: Var,
    pub contributing: usize,
    /// Set when no drone token had a positive; `loss` is then a zero constant.
    pub empty: bool,
}

/// Token-level InfoNCE. `sats[positive]` is the paired satellite view; every
/// satellite token in `sats` is a candidate. Inputs are `(tokens, assignment)`.
pub fn patch_nce(
    g: &mut Graph,
    drone: (Var, &Tensor),
    sats: &[(Var, &Tensor)],
    positive: usize,
    tau: f64,
) -> Result<PatchNceOutput> {
    if positive >= sats.len() {
        return Err(SkyError::arg(format!("positive index {positive} out of {} satellites", sats.len())));
    }
    let d_lab = row_argmax(drone.1);
    let mut cand_lab = Vec::new();
    let mut cand_is_pos_view = Vec::new();
    for (v, (_, a)) in sats.iter().enumerate() {
        for l in row_argmax(a) {
            cand_lab.push(l);
            cand_is_pos_view.push(v == positive);
        }
    }
    let rows: Vec<usize> = (0..d_lab.len())
        .filter(|&i| cand_lab.iter().zip(&cand_is_pos_view).any(|(&l, &p)| p && l == d_lab[i]))
        .collect();
    if rows.is_empty() {
        return Ok(PatchNceOutput { loss: g.constant(Tensor::scalar(0.0)), contributing: 0, empty: true });
    }
    let n = cand_lab.len();
    let mut mask = Vec::with_capacity(rows.len() * n);
    for &i in &rows {
        for (&l, &p) in cand_lab.iter().zip(&cand_is_pos_view) {
            mask.push(if p && l == d_lab[i] { 0.0 } else { -1e4 });
        }
    }
    let zd = g.gather_rows(drone.0, &rows)?;
    let zd = g.l2_normalize(zd)?;
    let parts: Vec<Var> = sats.iter().map(|(z, _)| *z).collect();
    let zs = g.concat(&parts, 0)?;
    let zs = g.l2_normalize(zs)?;
    let zst = g.transpose(zs)?;
    let sims = g.matmul(zd, zst)?;
    let logits = g.mul_scalar(sims, 1.0 / tau)?;
    let all = g.logsumexp_rows(logits)?;
    let m = const_matrix(g, rows.len(), n, mask)?;
    let masked = g.add(logits, m)?;
    let pos = g.logsumexp_rows(masked)?;
    let diff = g.sub(all, pos)?;
    let s = g.sum(diff)?;
    let loss = g.mul_scalar(s, 1.0 / rows.len() as f64)?;
    Ok(PatchNceOutput { loss, contributing: rows.len(), empty: false })
}

/// `scale · cos(f_i, proxy_c)` as a `B × C` logit matrix.
pub fn proxy_logits(g: &mut Graph, emb: Var, proxies: Var, scale: f64) -> Result<Var> {
    let s = cosine_matrix(g, emb, proxies)?;
    Ok(g.mul_scalar(s, scale)?)
}

/// Cross-entropy against `(1 − ε)·onehot + ε/C`.
pub fn smoothed_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (b, c) = g.value(logits).dims2();
    if labels.len() != b || labels.iter().any(|&l| l >= c) {
        return Err(SkyError::arg("cross-entropy labels do not match logits"));
    }
    let mut q = vec![eps / c as f64; b * c];
    for (i, &l) in labels.iter().enumerate() {
        q[i * c + l] += 1.0 - eps;
    }
    let q = const_matrix(g, b, c, q)?;
    let lsm = g.log_softmax(logits)?;
    let prod = g.mul(lsm, q)?;
    let s = g.sum(prod)?;
    Ok(g.mul_scalar(s, -1.0 / b as f64)?)
}

#[derive(Clone, Debug)]
pub struct UapaOutput {
    pub loss: Var,
    pub temperature: f64,
    pub entropy_gap: f64,
}

fn entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let p = g.exp(lp)?;
    let pl = g.mul(p, lp)?;
    let s = g.sum(pl)?;
    Ok(g.neg(s)?)
}

/// `T² · KL(softmax(z_d/T) ‖ softmax(z_s/T))` with `T = T₀(1 + ΔH₊ / log C)`;
/// the satellite side is detached.
pub fn uapa(g: &mut Graph, z_d: Var, z_s: Var, t0: f64) -> Result<UapaOutput> {
    let c = g.value(z_d).numel();
    if c < 2 {
        return Err(SkyError::arg(format!("UAPA needs at least two classes, got {c}")));
    }
    if g.value(z_s).numel() != c {
        return Err(SkyError::arg("UAPA logits differ in class count"));
    }
    let zd = g.reshape(z_d, &[1, c])?;
    let zs_val = g.value(z_s).reshape(&[1, c])?;
    let zs = g.constant(zs_val);
    let hd = entropy(g, zd)?;
    let hs = entropy(g, zs)?;
    let gap = g.sub(hd, hs)?;
    let gap = g.relu(gap)?;
    let t = g.mul_scalar(gap, t0 / (c as f64).ln())?;
    let t = g.add_scalar(t, t0)?;
    let inv_t = g.recip(t)?;
    let zd_t = g.scale(zd, inv_t)?;
    let zs_t = g.scale(zs, inv_t)?;
    let lq_d = g.log_softmax(zd_t)?;
    let lq_s = g.log_softmax(zs_t)?;
    let q_d = g.exp(lq_d)?;
    let diff = g.sub(lq_d, lq_s)?;
    let kl = g.mul(q_d, diff)?;
    let kl = g.sum(kl)?;
    let t2 = g.square(t)?;
    let loss = g.mul(t2, kl)?;
    let temperature = g.value(t).item();
    let entropy_gap = g.value(gap).item();
    Ok(UapaOutput { loss, temperature, entropy_gap })
}

/// `round(ratio · L)` distinct token indices (at least one), sorted.
pub fn mar_mask(n_tokens: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let count = ((ratio * n_tokens as f64).round() as usize).clamp(1, n_tokens.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x3A5C));
    let mut idx = sample(&mut rng, n_tokens, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Mask-token decoder: Linear → GELU → LayerNorm → Linear.
#[derive(Clone, Debug)]
pub struct MarDecoder {
    l1: Linear,
    ln: LayerNorm,
    l2: Linear,
}

impl MarDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        let grp = ParamGroup::Head;
        Ok(MarDecoder {
            l1: Linear::new(store, "loss.mar.l1", dim, 2 * dim, true, grp, rng)?,
            ln: LayerNorm::new(store, "loss.mar.ln", 2 * dim, grp)?,
            l2: Linear::new(store, "loss.mar.l2", 2 * dim, dim, true, grp, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let h = self.ln.forward(g, store, h)?;
        self.l2.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Reconstructor<'a> {
    Identity,
    Decoder(&'a MarDecoder),
}

/// `1 − mean cos(ẑ_i, z_i)` over rows.
pub fn mean_cosine_gap(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let m = g.value(pred).dims2().0;
    let pn = g.l2_normalize(pred)?;
    let tn = g.l2_normalize(target)?;
    let p = g.mul(pn, tn)?;
    let s = g.sum(p)?;
    let s = g.mul_scalar(s, -1.0 / m as f64)?;
    Ok(g.add_scalar(s, 1.0)?)
}

/// Reconstructs masked tokens from parts aggregated over visible tokens only.
/// Masked-row assignments and the target tokens carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn mar(
    g: &mut Graph,
    store: &ParamStore,
    head: &PartHead,
    recon: Reconstructor<'_>,
    z: Var,
    a: Var,
    coords: &Tensor,
    mask: &[usize],
) -> Result<Var> {
    let l = g.value(z).dims2().0;
    if mask.is_empty() {
        return Err(SkyError::arg("MAR mask is empty"));
    }
    if mask.iter().any(|&i| i >= l) {
        return Err(SkyError::arg("MAR mask index out of range"));
    }
    let visible: Vec<usize> = (0..l).filter(|i| !mask.contains(i)).collect();
    if visible.is_empty() {
        return Err(SkyError::arg("MAR mask covers every token"));
    }
    let z_vis = g.gather_rows(z, &visible)?;
    let a_vis = g.gather_rows(a, &visible)?;
    let c_vis = Tensor::from_rows(&visible.iter().map(|&i| coords.row(i).to_vec()).collect::<Vec<_>>())?;
    let agg = aggregate(g, z_vis, a_vis, &c_vis)?;
    let parts = head.refine(g, store, &agg)?;
    let a_mask = g.gather_rows(a, mask)?;
    let a_mask = g.detach(a_mask);
    let mixed = g.matmul(a_mask, parts)?;
    let pred = match recon {
        Reconstructor::Identity => mixed,
        Reconstructor::Decoder(d) => d.forward(g, store, mixed)?,
    };
    let target = g.gather_rows(z, mask)?;
    let target = g.detach(target);
    mean_cosine_gap(g, pred, target)
}

/// Mean squared off-diagonal cosine between prototypes.
pub fn diversity(g: &mut Graph, prototypes: Var) -> Result<Var> {
    let k = g.value(prototypes).dims2().0;
    if k < 2 {
        return Err(SkyError::arg("diversity needs at least two prototypes"));
    }
    let gram = cosine_matrix(g, prototypes, prototypes)?;
    let sq = g.square(gram)?;
    let off: Vec<f64> = (0..k * k).map(|i| if i / k == i % k { 0.0 } else { 1.0 }).collect();
    let off = const_matrix(g, k, k, off)?;
    let sq = g.mul(sq, off)?;
    let s = g.sum(sq)?;
    Ok(g.mul_scalar(s, 1.0 / (k * (k - 1)) as f64)?)
}

/// `φ(f) = LayerNorm(W f)` into the teacher space.
#[derive(Clone, Debug)]
pub struct Projector {
    lin: Linear,
    ln: LayerNorm,
}

impl Projector {
    pub fn new<R: Rng>(store: &mut ParamStore, embed_dim: usize, teacher_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Projector {
            lin: Linear::new(store, "loss.distill.proj", embed_dim, teacher_dim, false, ParamGroup::Head, rng)?,
            ln: LayerNorm::new(store, "loss.distill.ln", teacher_dim, ParamGroup::Head)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let h = self.lin.forward(g, store, f)?;
        self.ln.forward(g, store, h)
    }
}

/// `MSE(a, b) + 1 − cos(a, b)`.
pub fn cross_distill(g: &mut Graph, projected: Var, teacher: Var) -> Result<Var> {
    let n = g.value(projected).numel();
    let d = g.sub(projected, teacher)?;
    let sq = g.square(d)?;
    let mse = g.sum(sq)?;
    let mse = g.mul_scalar(mse, 1.0 / n as f64)?;
    let cos = g.cosine_similarity(projected, teacher)?;
    let gap = g.mul_scalar(cos, -1.0)?;
    let gap = g.add_scalar(gap, 1.0)?;
    Ok(g.add(mse, gap)?)
}

/// `(L_cross, L_ema)` for one embedding against detached targets.
pub fn distill(
    g: &mut Graph,
    store: &ParamStore,
    proj: &Projector,
    f: Var,
    teacher: &[f64],
    ema: &[f64],
) -> Result<(Var, Var)> {
    let t = const_matrix(g, 1, teacher.len(), teacher.to_vec())?;
    let e = const_matrix(g, 1, ema.len(), ema.to_vec())?;
    let pf = proj.forward(g, store, f)?;
    let cross = cross_distill(g, pf, t)?;
    let cos = g.cosine_similarity(f, e)?;
    let l_ema = g.mul_scalar(cos, -1.0)?;
    let l_ema = g.add_scalar(l_ema, 1.0)?;
    Ok((cross, l_ema))
}

pub fn normalized_altitude(altitude_m: f64) -> f64 {
    (altitude_m - ALT_OFFSET_M) / ALT_SCALE_M
}

/// Two-layer regressor `D → D/6 → 1`.
#[derive(Clone, Debug)]
pub struct AltitudeHead {
    l1: Linear,
    l2: Linear,
}

impl AltitudeHead {
    pub fn new<R: Rng>(store: &mut ParamStore, embed_dim: usize, rng: &mut R) -> Result<Self> {
        let hidden = (embed_dim / 6).max(1);
        Ok(AltitudeHead {
            l1: Linear::new(store, "loss.alt.l1", embed_dim, hidden, true, ParamGroup::Head, rng)?,
            l2: Linear::new(store, "loss.alt.l2", hidden, 1, true, ParamGroup::Head, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, f)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, store, h)
    }
}

/// SmoothL1 between predicted and normalised altitude; `None` without metadata.
pub fn altitude_loss(g: &mut Graph, predicted: Var, altitude_m: Option<f64>) -> Result<Option<Var>> {
    let Some(a) = altitude_m else { return Ok(None) };
    let target = g.constant(Tensor::full(g.shape(predicted), normalized_altitude(a)));
    let d = g.sub(predicted, target)?;
    let l = g.smooth_l1(d)?;
    Ok(Some(g.mean(l)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossGroup {
    Align,
    Part,
    Distill,
    Alt,
}

impl LossGroup {
    pub const ALL: [LossGroup; 4] = [LossGroup::Align, LossGroup::Part, LossGroup::Distill, LossGroup::Alt];

    pub fn name(self) -> &'static str {
        match self {
            LossGroup::Align => "align",
            LossGroup::Part => "part",
            LossGroup::Distill => "distill",
            LossGroup::Alt => "alt",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Learnable per-group log-variances, stored as one `1 × 4` leaf.
#[derive(Clone, Copy, Debug)]
pub struct KendallWeights {
    pub log_vars: ParamId,
}

impl KendallWeights {
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        let log_vars = store.add("loss.kendall.log_var", Tensor::zeros(&[1, 4]), ParamKind::no_decay(ParamGroup::Head))?;
        Ok(KendallWeights { log_vars })
    }
}

/// `Σ_g exp(−s_g)·L_g + s_g` over the groups that are present.
pub fn geopart_total(g: &mut Graph, groups: &[Option<Var>; 4], log_vars: Var) -> Result<Var> {
    let s_all = g.reshape(log_vars, &[4])?;
    let mut terms = Vec::new();
    for grp in LossGroup::ALL {
        let Some(l) = groups[grp.index()] else { continue };
        let v = g.value(l);
        if !v.is_scalar() {
            return Err(SkyError::arg(format!("group {} loss is not scalar", grp.name())));
        }
        if !v.item().is_finite() {
            return Err(SkyError::NonFiniteLoss { group: grp.name().into() });
        }
        let s = g.gather_rows(s_all, &[grp.index()])?;
        let w = g.neg(s)?;
        let w = g.exp(w)?;
        let l = g.reshape(l, &[1])?;
        let wl = g.mul(w, l)?;
        terms.push(g.add(wl, s)?);
    }
    if terms.is_empty() {
        return Err(SkyError::arg("no active loss group"));
    }
    let cat = g.concat(&terms, 0)?;
    Ok(g.sum(cat)?)
}

/// One training step's scalar breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub condition: String,
    pub terms: BTreeMap<String, f64>,
    pub term_weights: BTreeMap<String, f64>,
    pub groups: BTreeMap<String, f64>,
    pub log_vars: BTreeMap<String, f64>,
    pub total: f64,
    pub skipped: bool,
}

impl LossReport {
    /// Recomputes the weighted total from the stored groups and log-variances.
    pub fn recombined_total(&self) -> f64 {
        self.groups.iter().map(|(k, &l)| {
            let s = self.log_vars[k];
            (-s).exp() * l + s
        }).sum()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
