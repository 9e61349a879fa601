//! Prototype part head: FiLM, cosine assignment, salience gate, part
//! refinement, pooling, graph-attention readout, CLS projection and fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skypart_tensor::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, Var, VAR_EPS};

use crate::error::{Result, SkyError};
use crate::nn::{LayerNorm, Linear};
use crate::scene::{mix_seed, ALTITUDES};

/// Prototypes whose column mass falls below this get a zero descriptor.
pub const MIN_MASS: f64 = 1e-8;
pub const BN_MOMENTUM: f64 = 0.1;
const FUSION_BIAS: [f64; 3] = [1.0, 0.0, 0.0];
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub token_dim: usize,
    pub part_dim: usize,
    pub k_max: usize,
    pub k_min: usize,
    pub assign_tau: f64,
    pub gate_tau: f64,
    pub gate_bias: f64,
    pub embed_dim: usize,
    pub gat_heads: usize,
    /// Training batches smaller than this normalise the CLS projection per sample.
    pub bn_min_batch: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            token_dim: 64,
            part_dim: 32,
            k_max: 12,
            k_min: 4,
            assign_tau: 0.07,
            gate_tau: 0.5,
            gate_bias: 2.0,
            embed_dim: 96,
            gat_heads: 4,
            bn_min_batch: 4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SkyError::Config(m));
        if self.k_max < 3 {
            return bad(format!("k_max {} < 3", self.k_max));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad(format!("k_min {} outside 1..={}", self.k_min, self.k_max));
        }
        if self.part_dim < 4 || self.part_dim % 4 != 0 || self.part_dim % self.gat_heads.max(1) != 0 {
            return bad(format!("part_dim {} must be a multiple of 4 and of the GAT head count", self.part_dim));
        }
        if self.embed_dim < 6 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim {} must be even and at least 6", self.embed_dim));
        }
        if !(self.assign_tau > 0.0 && self.gate_tau > 0.0) {
            return bad("temperatures must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// FiLM conditioning: one altitude bin, or the uniform average over all bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilmBin {
    Altitude(usize),
    Mean,
}

impl FilmBin {
    pub fn from_altitude(altitude_m: f64) -> Result<Self> {
        ALTITUDES
            .iter()
            .position(|&a| a == altitude_m)
            .map(FilmBin::Altitude)
            .ok_or_else(|| SkyError::arg(format!("no FiLM bin for altitude {altitude_m} m")))
    }
}

/// `γ ⊙ z + β` with `(γ, β)` taken from one bin or averaged over bins.
pub fn film_modulate(g: &mut Graph, z: Var, gamma: Var, beta: Var, bin: FilmBin) -> Result<Var> {
    let bins = g.shape(gamma)[0];
    let (gm, bt) = match bin {
        FilmBin::Altitude(i) if i < bins => (g.slice_rows(gamma, i..i + 1)?, g.slice_rows(beta, i..i + 1)?),
        FilmBin::Altitude(i) => return Err(SkyError::arg(format!("FiLM bin {i} out of {bins}"))),
        FilmBin::Mean => (g.mean_rows(gamma)?, g.mean_rows(beta)?),
    };
    let s = g.mul_row(z, gm)?;
    Ok(g.add_row(s, bt)?)
}

/// Row-stochastic `L × K` cosine assignment at temperature `tau`.
pub fn assign(g: &mut Graph, z_mod: Var, prototypes: Var, tau: f64) -> Result<Var> {
    let zn = g.l2_normalize(z_mod)?;
    let pn = g.l2_normalize(prototypes)?;
    let pt = g.transpose(pn)?;
    let sims = g.matmul(zn, pt)?;
    Ok(g.softmax(sims, 1, tau)?)
}

#[derive(Clone, Debug)]
pub struct GateOutput {
    /// `K × 1` gate values used downstream (forced entries read 1).
    pub gates: Var,
    pub values: Vec<f64>,
    /// Sorted ascending.
    pub active: Vec<usize>,
    pub forced: Vec<usize>,
}

/// Standard Gumbel draws, one per prototype.
pub fn gumbel_noise(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6A7E));
    (0..k)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Indices sorted by descending value, ties by ascending index.
pub fn order_by_value(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// `σ((s + ε) / τ_g)` with the `k_min` floor applied straight-through.
pub fn gate_from_logits(g: &mut Graph, logits: Var, noise: Option<&[f64]>, tau_g: f64, k_min: usize) -> Result<GateOutput> {
    let k = g.value(logits).numel();
    let logits = g.reshape(logits, &[k, 1])?;
    let shifted = match noise {
        Some(eps) => {
            if eps.len() != k {
                return Err(SkyError::arg(format!("{} noise values for {k} gates", eps.len())));
            }
            let e = g.constant(Tensor::matrix(k, 1, eps.to_vec())?);
            g.add(logits, e)?
        }
        None => logits,
    };
    let scaled = g.mul_scalar(shifted, 1.0 / tau_g)?;
    let soft = g.sigmoid(scaled)?;
    let mut values = g.value(soft).data().to_vec();
    let mut active: Vec<usize> = (0..k).filter(|&i| values[i] > 0.5).collect();
    let mut forced = Vec::new();
    let floor = k_min.min(k);
    let gates = if active.len() < floor {
        for &i in order_by_value(&values).iter().take(floor) {
            if !active.contains(&i) {
                forced.push(i);
            }
        }
        for &i in &forced {
            values[i] = 1.0;
        }
        active.extend(&forced);
        active.sort_unstable();
        forced.sort_unstable();
        g.straight_through(soft, Tensor::matrix(k, 1, values.clone())?)?
    } else {
        soft
    };
    Ok(GateOutput { gates, values, active, forced })
}

/// Every prototype active with gate 1.
pub fn all_gates_open(g: &mut Graph, k: usize) -> GateOutput {
    let gates = g.constant(Tensor::ones(&[k, 1]));
    GateOutput { gates, values: vec![1.0; k], active: (0..k).collect(), forced: Vec::new() }
}

/// Mass-normalised assignment aggregation.
#[derive(Clone, Debug)]
pub struct Aggregate {
    /// `K × d_p` weighted token means (zero rows for empty prototypes).
    pub raw: Var,
    /// `K × 2`.
    pub centroids: Var,
    pub occupied: Vec<bool>,
}

pub fn aggregate(g: &mut Graph, z: Var, a: Var, coords: &Tensor) -> Result<Aggregate> {
    let (l, k) = g.value(a).dims2();
    if coords.dims2() != (l, 2) {
        return Err(SkyError::arg(format!("coords {:?} for {l} tokens", coords.shape())));
    }
    let mass = g.sum_rows(a)?;
    let occupied: Vec<bool> = g.value(mass).data().iter().map(|&m| m >= MIN_MASS).collect();
    let all = occupied.iter().all(|&o| o);
    let inv = if all {
        g.recip(mass)?
    } else {
        let pad = g.constant(Tensor::matrix(1, k, occupied.iter().map(|&o| if o { 0.0 } else { 1.0 }).collect())?);
        let safe = g.add(mass, pad)?;
        let r = g.recip(safe)?;
        let keep = g.constant(Tensor::matrix(1, k, occupied.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?);
        g.mul(r, keep)?
    };
    let w = g.mul_row(a, inv)?;
    let wt = g.transpose(w)?;
    let raw = g.matmul(wt, z)?;
    let c = g.constant(coords.clone());
    let mut centroids = g.matmul(wt, c)?;
    if !all {
        let fill = Tensor::matrix(k, 2, occupied.iter().flat_map(|&o| if o { [0.0, 0.0] } else { [0.5, 0.5] }).collect())?;
        let fill = g.constant(fill);
        centroids = g.add(centroids, fill)?;
    }
    Ok(Aggregate { raw, centroids, occupied })
}

#[derive(Clone, Debug)]
pub struct PartSet {
    /// `K × d_p` refined descriptors.
    pub descriptors: Var,
    pub centroids: Var,
    pub gate: GateOutput,
    pub occupied: Vec<bool>,
}

#[derive(Clone, Debug)]
struct GatLayer {
    w: Linear,
    a_src: ParamId,
    a_dst: ParamId,
}

/// Branch switches for fusion; at least one must survive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub part: bool,
    pub cls: bool,
    pub graph: bool,
}

impl Branches {
    pub const ALL: Branches = Branches { part: true, cls: true, graph: true };

    pub fn flags(&self) -> [bool; 3] {
        [self.part, self.cls, self.graph]
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub f: Var,
    /// `1 × n_surviving` softmax weights.
    pub weights: Var,
    /// `(w_part, w_cls, w_graph)`, zero for removed branches.
    pub weight_values: [f64; 3],
}

/// Batch statistics from a training-mode CLS projection.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct PartHead {
    pub cfg: HeadConfig,
    pub proj: Linear,
    pub film_gamma: ParamId,
    pub film_beta: ParamId,
    pub prototypes: ParamId,
    refine1: Linear,
    refine2: Linear,
    gate1: Linear,
    gate2: Linear,
    pool1: Linear,
    pool_ln: LayerNorm,
    pool2: Linear,
    gat_in: Linear,
    gat: Vec<GatLayer>,
    gat_out: Linear,
    gat_ln: LayerNorm,
    cls_proj: Linear,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    fuse1: Linear,
    fuse2: Linear,
}

impl PartHead {
    pub fn new<R: Rng>(cfg: HeadConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let grp = ParamGroup::Head;
        let (d, dp, k, dd) = (cfg.token_dim, cfg.part_dim, cfg.k_max, cfg.embed_dim);
        let bins = ALTITUDES.len();
        let proj = Linear::new(store, "head.proj", d, dp, true, grp, rng)?;
        let film_gamma = store.add("head.film.gamma", Tensor::ones(&[bins, dp]), ParamKind::no_decay(grp))?;
        let film_beta = store.add("head.film.beta", Tensor::zeros(&[bins, dp]), ParamKind::no_decay(grp))?;
        let prototypes = store.add("head.prototypes", Tensor::randn(&[k, dp], 1.0, rng), ParamKind::weight(grp))?;
        let refine1 = Linear::new(store, "head.refine1", dp, dp, true, grp, rng)?;
        let refine2 = Linear::new(store, "head.refine2", dp, dp, true, grp, rng)?;
        let gate1 = Linear::new(store, "head.gate1", dp, dp / 4, true, grp, rng)?;
        let gate2 = Linear::new(store, "head.gate2", dp / 4, 1, true, grp, rng)?;
        store.set_value(gate2.b.expect("gate bias"), Tensor::full(&[1, 1], cfg.gate_bias))?;
        let pool1 = Linear::new(store, "head.pool1", 3 * dp, dd, true, grp, rng)?;
        let pool_ln = LayerNorm::new(store, "head.pool_ln", dd, grp)?;
        let pool2 = Linear::new(store, "head.pool2", dd, dd, true, grp, rng)?;
        let gat_in = Linear::new(store, "head.gat_in", dp + 2, dp, true, grp, rng)?;
        let dh = dp / cfg.gat_heads;
        let mut gat = Vec::with_capacity(2);
        for layer in 0..2 {
            let w = Linear::new(store, &format!("head.gat{layer}"), dp, dp, false, grp, rng)?;
            let std = 1.0 / (dh as f64).sqrt();
            let a_src = store.add(format!("head.gat{layer}.a_src"), Tensor::randn(&[dh, cfg.gat_heads], std, rng), ParamKind::weight(grp))?;
            let a_dst = store.add(format!("head.gat{layer}.a_dst"), Tensor::randn(&[dh, cfg.gat_heads], std, rng), ParamKind::weight(grp))?;
            gat.push(GatLayer { w, a_src, a_dst });
        }
        let gat_out = Linear::new(store, "head.gat_out", dp, dd, true, grp, rng)?;
        let gat_ln = LayerNorm::new(store, "head.gat_ln", dd, grp)?;
        let cls_proj = Linear::new(store, "head.cls_proj", d, dd, true, grp, rng)?;
        let bn_gamma = store.add("head.cls_bn.gamma", Tensor::ones(&[1, dd]), ParamKind::no_decay(grp))?;
        let bn_beta = store.add("head.cls_bn.beta", Tensor::zeros(&[1, dd]), ParamKind::no_decay(grp))?;
        let bn_mean = store.add("head.cls_bn.running_mean", Tensor::zeros(&[1, dd]), ParamKind::buffer(grp))?;
        let bn_var = store.add("head.cls_bn.running_var", Tensor::ones(&[1, dd]), ParamKind::buffer(grp))?;
        let fuse1 = Linear::new(store, "head.fuse1", 3 * dd, dd / 2, true, grp, rng)?;
        let fuse2 = Linear::new(store, "head.fuse2", dd / 2, 3, true, grp, rng)?;
        store.set_value(fuse2.w, Tensor::zeros(&[dd / 2, 3]))?;
        store.set_value(fuse2.b.expect("fusion bias"), Tensor::matrix(1, 3, FUSION_BIAS.to_vec())?)?;
        Ok(PartHead {
            cfg,
            proj,
            film_gamma,
            film_beta,
            prototypes,
            refine1,
            refine2,
            gate1,
            gate2,
            pool1,
            pool_ln,
            pool2,
            gat_in,
            gat,
            gat_out,
            gat_ln,
            cls_proj,
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            fuse1,
            fuse2,
        })
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        self.proj.forward(g, store, tokens)
    }

    pub fn film(&self, g: &mut Graph, store: &ParamStore, z: Var, bin: FilmBin) -> Result<Var> {
        let gamma = g.param(store, self.film_gamma);
        let beta = g.param(store, self.film_beta);
        film_modulate(g, z, gamma, beta, bin)
    }

    pub fn assign(&self, g: &mut Graph, store: &ParamStore, z_mod: Var) -> Result<Var> {
        let p = g.param(store, self.prototypes);
        assign(g, z_mod, p, self.cfg.assign_tau)
    }

    /// Residual refinement; empty prototypes keep a zero descriptor.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, agg: &Aggregate) -> Result<Var> {
        let h = self.refine1.forward(g, store, agg.raw)?;
        let h = g.gelu(h)?;
        let h = self.refine2.forward(g, store, h)?;
        let p = g.add(agg.raw, h)?;
        if agg.occupied.iter().all(|&o| o) {
            return Ok(p);
        }
        let k = agg.occupied.len();
        let keep = g.constant(Tensor::matrix(k, 1, agg.occupied.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?);
        Ok(g.mul_col(p, keep)?)
    }

    pub fn gate_logits(&self, g: &mut Graph, store: &ParamStore, descriptors: Var) -> Result<Var> {
        let h = self.gate1.forward(g, store, descriptors)?;
        let h = g.gelu(h)?;
        self.gate2.forward(g, store, h)
    }

    /// Gumbel noise from `seed` in training mode, none at inference.
    pub fn salience_gate(&self, g: &mut Graph, store: &ParamStore, descriptors: Var, mode: Mode, seed: u64) -> Result<GateOutput> {
        let logits = self.gate_logits(g, store, descriptors)?;
        let noise = match mode {
            Mode::Train => Some(gumbel_noise(self.cfg.k_max, seed)),
            Mode::Infer => None,
        };
        gate_from_logits(g, logits, noise.as_deref(), self.cfg.gate_tau, self.cfg.k_min)
    }

    pub fn aggregate_and_refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_mod: Var,
        a: Var,
        coords: &Tensor,
        gate: Option<(Mode, u64)>,
    ) -> Result<PartSet> {
        let agg = aggregate(g, z_mod, a, coords)?;
        let descriptors = self.refine(g, store, &agg)?;
        let gate = match gate {
            Some((mode, seed)) => self.salience_gate(g, store, descriptors, mode, seed)?,
            None => all_gates_open(g, self.cfg.k_max),
        };
        Ok(PartSet { descriptors, centroids: agg.centroids, gate, occupied: agg.occupied })
    }

    /// Top-3 gated descriptors, concatenated in gate order, through the pooling MLP.
    pub fn part_pool(&self, g: &mut Graph, store: &ParamStore, parts: &PartSet) -> Result<Var> {
        let top: Vec<usize> = order_by_value(&parts.gate.values).into_iter().take(3).collect();
        let sel = g.gather_rows(parts.descriptors, &top)?;
        let gs = g.gather_rows(parts.gate.gates, &top)?;
        let weighted = g.mul_col(sel, gs)?;
        let flat = g.reshape(weighted, &[1, 3 * self.cfg.part_dim])?;
        let h = self.pool1.forward(g, store, flat)?;
        let h = self.pool_ln.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.pool2.forward(g, store, h)?;
        Ok(g.l2_normalize(h)?)
    }

    /// Returns the readout and each layer's per-head attention matrices.
    pub fn gat_readout(&self, g: &mut Graph, store: &ParamStore, parts: &PartSet) -> Result<(Var, Vec<Tensor>)> {
        let active = &parts.gate.active;
        assert!(!active.is_empty(), "graph readout needs at least one active prototype");
        let nodes = g.gather_rows(parts.descriptors, active)?;
        let cents = g.gather_rows(parts.centroids, active)?;
        let x = g.concat(&[nodes, cents], 1)?;
        let mut h = self.gat_in.forward(g, store, x)?;
        let n = active.len();
        let heads = self.cfg.gat_heads;
        let dh = self.cfg.part_dim / heads;
        let ones_row = g.constant(Tensor::ones(&[1, n]));
        let ones_col = g.constant(Tensor::ones(&[n, 1]));
        let mut attention = Vec::new();
        for layer in &self.gat {
            let wh = layer.w.forward(g, store, h)?;
            let a_src = g.param(store, layer.a_src);
            let a_dst = g.param(store, layer.a_dst);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let whh = g.slice_cols(wh, hd * dh..(hd + 1) * dh)?;
                let vs = g.slice_cols(a_src, hd..hd + 1)?;
                let vd = g.slice_cols(a_dst, hd..hd + 1)?;
                let src = g.matmul(whh, vs)?;
                let dst = g.matmul(whh, vd)?;
                let dst_t = g.transpose(dst)?;
                let e_src = g.matmul(src, ones_row)?;
                let e_dst = g.matmul(ones_col, dst_t)?;
                let e = g.add(e_src, e_dst)?;
                let e = g.leaky_relu(e, 0.2)?;
                let att = g.softmax(e, 1, 1.0)?;
                attention.push(g.value(att).clone());
                outs.push(g.matmul(att, whh)?);
            }
            let cat = g.concat(&outs, 1)?;
            h = g.elu(cat)?;
        }
        let pooled = g.mean_rows(h)?;
        let f = self.gat_out.forward(g, store, pooled)?;
        let f = self.gat_ln.forward(g, store, f)?;
        Ok((g.l2_normalize(f)?, attention))
    }

    /// `ReLU(BN(W_c · cls))`, L2-normalised per row. Small training batches
    /// fall back to per-sample layer norm; inference uses running statistics.
    pub fn cls_project(&self, g: &mut Graph, store: &ParamStore, cls: Var, mode: Mode) -> Result<(Var, Option<BnStats>)> {
        let h = self.cls_proj.forward(g, store, cls)?;
        let b = g.value(h).dims2().0;
        let (normed, stats) = match mode {
            Mode::Train if b >= self.cfg.bn_min_batch => {
                let (v, mean, var) = g.batch_norm(h)?;
                (v, Some(BnStats { mean, var, batch: b }))
            }
            Mode::Train => (g.layer_norm(h)?, None),
            Mode::Infer => {
                let neg_mean = store.value(self.bn_mean).map(|m| -m);
                let inv_std = store.value(self.bn_var).map(|v| 1.0 / (v + VAR_EPS).sqrt());
                let nm = g.constant(neg_mean);
                let is = g.constant(inv_std);
                let c = g.add_row(h, nm)?;
                (g.mul_row(c, is)?, None)
            }
        };
        let gamma = g.param(store, self.bn_gamma);
        let beta = g.param(store, self.bn_beta);
        let s = g.mul_row(normed, gamma)?;
        let s = g.add_row(s, beta)?;
        let r = g.relu(s)?;
        Ok((g.l2_normalize(r)?, stats))
    }

    /// Folds batch statistics into the running buffers (unbiased variance).
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BnStats) {
        let m = BN_MOMENTUM;
        let unbias = if stats.batch > 1 { stats.batch as f64 / (stats.batch - 1) as f64 } else { 1.0 };
        for (rm, &bm) in store.value_mut(self.bn_mean).data_mut().iter_mut().zip(&stats.mean) {
            *rm = (1.0 - m) * *rm + m * bm;
        }
        for (rv, &bv) in store.value_mut(self.bn_var).data_mut().iter_mut().zip(&stats.var) {
            *rv = (1.0 - m) * *rv + m * bv * unbias;
        }
    }

    /// Convex gate over the surviving branches; inputs are `1 × D` unit rows.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, inputs: [Option<Var>; 3]) -> Result<FusionOutput> {
        let dd = self.cfg.embed_dim;
        let mut cat = Vec::with_capacity(3);
        let mut surviving = Vec::new();
        for (i, inp) in inputs.iter().enumerate() {
            match *inp {
                Some(v) => {
                    let t = g.value(v);
                    if t.dims2() != (1, dd) {
                        return Err(SkyError::arg(format!("fusion input {i} has shape {:?}, expected [1, {dd}]", t.shape())));
                    }
                    if (t.norm() - 1.0).abs() > UNIT_TOL {
                        return Err(SkyError::arg(format!("fusion input {i} has norm {}, expected 1", t.norm())));
                    }
                    cat.push(v);
                    surviving.push(i);
                }
                None => cat.push(g.constant(Tensor::zeros(&[1, dd]))),
            }
        }
        if surviving.is_empty() {
            return Err(SkyError::arg("fusion needs at least one branch"));
        }
        let x = g.concat(&cat, 1)?;
        let h = self.fuse1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let logits = self.fuse2.forward(g, store, h)?;
        let sub = if surviving.len() == 3 {
            logits
        } else {
            let t = g.transpose(logits)?;
            let s = g.gather_rows(t, &surviving)?;
            g.transpose(s)?
        };
        let weights = g.softmax(sub, 1, 1.0)?;
        let rows: Vec<Var> = surviving.iter().map(|&i| inputs[i].expect("surviving branch")).collect();
        let stack = g.concat(&rows, 0)?;
        let mixed = g.matmul(weights, stack)?;
        let f = g.l2_normalize(mixed)?;
        let mut weight_values = [0.0; 3];
        for (j, &i) in surviving.iter().enumerate() {
            weight_values[i] = g.value(weights).data()[j];
        }
        Ok(FusionOutput { f, weights, weight_values })
    }
}
