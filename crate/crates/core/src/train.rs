//! Identity-balanced sampling, AdamW, warmup-cosine schedule, EMA and the training step.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skypart_tensor::{Graph, ParamGroup, ParamStore, Tensor, Var};

use crate::backbone::Teacher;
use crate::dataset::ScenePair;
use crate::error::{Result, SkyError};
use crate::head::{Branches, FilmBin, Mode};
use crate::loss::{
    altitude_loss, circle_loss, diversity, distill, geopart_total, infonce_symmetric, mar, mar_mask, patch_nce,
    proxy_anchor, proxy_logits, smoothed_cross_entropy, uapa, LossGroup, LossReport, Reconstructor, CIRCLE_MARGIN,
    CIRCLE_SCALE, CONTRAST_TAU, LABEL_SMOOTHING, MAR_MASK_RATIO, PROXY_MARGIN, PROXY_SCALE, UAPA_T0,
};
use crate::model::{ForwardOptions, ModelConfig, SkyPart, ViewInput};
use crate::raster::Raster;
use crate::scene::mix_seed;
use crate::weather::{corrupt, sample_condition, WeatherCondition};

/// Loss-group, branch and gate ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub drop_align: bool,
    pub drop_part: bool,
    pub drop_alt: bool,
    pub drop_distill: bool,
    pub cls_only: bool,
    pub part_only: bool,
    pub no_graph: bool,
    pub all_protos_active: bool,
    pub no_uapa: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 9] = [
        "drop_align",
        "drop_part",
        "drop_alt",
        "drop_distill",
        "cls_only",
        "part_only",
        "no_graph",
        "all_protos_active",
        "no_uapa",
    ];

    pub fn get(&self, flag: &str) -> Option<bool> {
        Some(match flag {
            "drop_align" => self.drop_align,
            "drop_part" => self.drop_part,
            "drop_alt" => self.drop_alt,
            "drop_distill" => self.drop_distill,
            "cls_only" => self.cls_only,
            "part_only" => self.part_only,
            "no_graph" => self.no_graph,
            "all_protos_active" => self.all_protos_active,
            "no_uapa" => self.no_uapa,
            _ => return None,
        })
    }

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        let slot = match flag {
            "drop_align" => &mut self.drop_align,
            "drop_part" => &mut self.drop_part,
            "drop_alt" => &mut self.drop_alt,
            "drop_distill" => &mut self.drop_distill,
            "cls_only" => &mut self.cls_only,
            "part_only" => &mut self.part_only,
            "no_graph" => &mut self.no_graph,
            "all_protos_active" => &mut self.all_protos_active,
            "no_uapa" => &mut self.no_uapa,
            _ => return Err(SkyError::Config(format!("unknown ablation flag `{flag}`"))),
        };
        *slot = on;
        Ok(())
    }

    pub fn only(flag: &str) -> Result<Self> {
        let mut a = Ablation::default();
        a.set(flag, true)?;
        Ok(a)
    }

    pub fn branches(&self) -> Branches {
        if self.cls_only {
            Branches { part: false, cls: true, graph: false }
        } else if self.part_only {
            Branches { part: true, cls: false, graph: false }
        } else if self.no_graph {
            Branches { part: true, cls: true, graph: false }
        } else {
            Branches::ALL
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.cls_only, self.part_only].iter().filter(|&&b| b).count() > 1 {
            return Err(SkyError::Config("cls_only and part_only are mutually exclusive".into()));
        }
        if self.drop_align && self.drop_part && self.drop_alt && self.drop_distill {
            return Err(SkyError::Config("every loss group is dropped".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub p: usize,
    pub m: usize,
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub lr_floor: f64,
    pub mar_warmup_epochs: usize,
    pub ema_decay: f64,
    pub weather_online: bool,
    pub rotation_aug: bool,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 75,
            p: 4,
            m: 2,
            head_lr: 1.5e-3,
            backbone_lr: 1e-3,
            lr_scale: 1.0,
            weight_decay: 0.05,
            warmup_epochs: 5,
            lr_floor: 0.01,
            mar_warmup_epochs: 10,
            ema_decay: 0.996,
            weather_online: true,
            rotation_aug: false,
            seed: 7,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SkyError::Config(m.into()));
        if self.p < 2 || self.m < 1 {
            return bad("sampler needs P >= 2 and M >= 1");
        }
        if !(self.head_lr > 0.0 && self.backbone_lr > 0.0 && self.lr_scale > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("ema_decay and lr_floor must lie in [0, 1]");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        self.ablation.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.m
    }
}

/// Learning rates for both groups at `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, cfg: &TrainConfig) -> (f64, f64) {
    let factor = schedule_factor(step, total_steps, warmup_steps, cfg.lr_floor);
    let s = factor * cfg.lr_scale;
    (cfg.head_lr * s, cfg.backbone_lr * s)
}

/// Linear warmup from 0, then cosine from 1 down to `floor`.
pub fn schedule_factor(step: usize, total: usize, warmup: usize, floor: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    if total <= warmup {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Non-finite gradient in the named parameter; nothing changed.
    Skipped(String),
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, first: zeros.clone(), second: zeros, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> f64, weight_decay: f64) -> StepOutcome {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let e = store.entry(id);
            if e.kind.trainable && !e.grad.all_finite() {
                return StepOutcome::Skipped(e.name.clone());
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in ids {
            let kind = store.kind(id);
            if !kind.trainable {
                continue;
            }
            let lr = lr(kind.group);
            let grad = store.grad(id).data().to_vec();
            let i = id.index();
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            let decay = if kind.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
        StepOutcome::Applied
    }
}

/// `ema ← α·ema + (1 − α)·student` for every tensor.
pub fn ema_update(student: &ParamStore, ema: &mut ParamStore, alpha: f64) -> Result<()> {
    if student.len() != ema.len() {
        return Err(SkyError::arg("EMA and student stores differ in size"));
    }
    for (id, s) in student.ids().zip(student.entries()) {
        if ema.entry(id).value.shape() != s.value.shape() || ema.entry(id).name != s.name {
            return Err(SkyError::arg(format!("EMA tensor `{}` does not match the student", s.name)));
        }
    }
    let ids: Vec<_> = student.ids().collect();
    for id in ids {
        let src = student.value(id).data();
        for (e, &s) in ema.value_mut(id).data_mut().iter_mut().zip(src) {
            *e = alpha * *e + (1.0 - alpha) * s;
        }
    }
    Ok(())
}

/// One identity-balanced batch: indices into the pair list, grouped by location.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub locations: Vec<u32>,
    /// `views[i]` holds `M` pair indices for `locations[i]`.
    pub views: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct PkSampler {
    by_location: BTreeMap<u32, Vec<usize>>,
}

impl PkSampler {
    pub fn new(pairs: &[ScenePair]) -> Self {
        let mut by_location: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            by_location.entry(p.location_id).or_default().push(i);
        }
        PkSampler { by_location }
    }

    fn eligible(&self, m: usize) -> Vec<u32> {
        self.by_location.iter().filter(|(_, v)| v.len() >= m).map(|(&k, _)| k).collect()
    }

    fn views_for<R: Rng>(&self, loc: u32, m: usize, rng: &mut R) -> Vec<usize> {
        let pool = &self.by_location[&loc];
        let mut pick: Vec<usize> = rand::seq::index::sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect();
        pick.sort_unstable();
        pick
    }

    /// `P` distinct locations with `M` distinct drone views each.
    pub fn sample(&self, p: usize, m: usize, seed: u64) -> Result<PkBatch> {
        let eligible = self.eligible(m);
        if eligible.len() < p {
            return Err(SkyError::arg(format!("{} locations have {m} views; need {p}", eligible.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9C));
        let idx = rand::seq::index::sample(&mut rng, eligible.len(), p).into_vec();
        let locations: Vec<u32> = idx.iter().map(|&i| eligible[i]).collect();
        let views = locations.iter().map(|&l| self.views_for(l, m, &mut rng)).collect();
        Ok(PkBatch { locations, views })
    }

    /// Shuffled pass over all eligible locations in chunks of `P`; a trailing partial chunk is dropped.
    pub fn epoch(&self, p: usize, m: usize, seed: u64) -> Result<Vec<PkBatch>> {
        let mut eligible = self.eligible(m);
        if eligible.len() < p {
            return Err(SkyError::arg(format!("{} locations have {m} views; need {p}", eligible.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE9));
        eligible.shuffle(&mut rng);
        Ok(eligible
            .chunks_exact(p)
            .map(|chunk| PkBatch {
                locations: chunk.to_vec(),
                views: chunk.iter().map(|&l| self.views_for(l, m, &mut rng)).collect(),
            })
            .collect())
    }

    pub fn steps_per_epoch(&self, p: usize, m: usize) -> usize {
        self.eligible(m).len() / p
    }
}

/// Rasters and metadata entering the encoder for one step; drones first.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub condition: WeatherCondition,
    pub drones: Vec<Raster>,
    pub drone_altitudes: Vec<f64>,
    /// Location slot (`0..P`) of each drone.
    pub drone_slot: Vec<usize>,
    pub sats: Vec<Arc<Raster>>,
    pub classes: Vec<usize>,
}

pub struct Trainer {
    pub model: SkyPart,
    pub store: ParamStore,
    pub ema: ParamStore,
    pub teacher: Teacher,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    classes: BTreeMap<u32, usize>,
    sampler: PkSampler,
    pairs: Vec<ScenePair>,
    sat_teacher: BTreeMap<u32, Vec<f64>>,
    step: usize,
}

impl Trainer {
    /// `model_cfg.n_classes` is overwritten with the number of training locations.
    pub fn new(mut model_cfg: ModelConfig, cfg: TrainConfig, pairs: Vec<ScenePair>) -> Result<Self> {
        cfg.validate()?;
        let sampler = PkSampler::new(&pairs);
        let classes: BTreeMap<u32, usize> = sampler.by_location.keys().enumerate().map(|(i, &l)| (l, i)).collect();
        model_cfg.n_classes = classes.len();
        let mut init = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
        let (model, store) = SkyPart::new(model_cfg, &mut init)?;
        let mut trng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
        let teacher = Teacher::new(model_cfg.encoder, &mut trng)?;
        let ema = store.clone();
        let opt = AdamW::new(&store);
        if sampler.steps_per_epoch(cfg.p, cfg.m) == 0 {
            return Err(SkyError::arg(format!("fewer than P={} training locations with M={} views", cfg.p, cfg.m)));
        }
        Ok(Trainer { model, store, ema, teacher, opt, cfg, classes, sampler, pairs, sat_teacher: BTreeMap::new(), step: 0 })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.steps_per_epoch(self.cfg.p, self.cfg.m)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn pairs(&self) -> &[ScenePair] {
        &self.pairs
    }

    /// Weather (drones only) and optional quarter-turn rotation for one batch.
    pub fn prepare(&self, batch: &PkBatch, step_seed: u64) -> PreparedBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(step_seed, 0xBA7C));
        let condition = if self.cfg.weather_online { sample_condition(&mut rng) } else { WeatherCondition::Normal };
        let mut drones = Vec::new();
        let mut drone_altitudes = Vec::new();
        let mut drone_slot = Vec::new();
        for (slot, views) in batch.views.iter().enumerate() {
            for &i in views {
                let p = &self.pairs[i];
                let mut r = corrupt(&p.drone, condition, rng.random());
                if self.cfg.rotation_aug {
                    r = r.rotate90(rng.random_range(0..4));
                }
                drones.push(r);
                drone_altitudes.push(p.altitude_m);
                drone_slot.push(slot);
            }
        }
        let sats = batch.views.iter().map(|v| Arc::clone(&self.pairs[v[0]].sat)).collect();
        let classes = batch.locations.iter().map(|l| self.classes[l]).collect();
        PreparedBatch { condition, drones, drone_altitudes, drone_slot, sats, classes }
    }

    fn mar_weight(&self, epoch: usize) -> f64 {
        if epoch < self.cfg.mar_warmup_epochs {
            0.0
        } else {
            1.0
        }
    }

    /// Runs every epoch, handing each report to `sink`.
    pub fn fit(&mut self, mut sink: impl FnMut(&LossReport) -> Result<()>) -> Result<()> {
        for epoch in 0..self.cfg.epochs {
            for r in self.train_epoch(epoch)? {
                sink(&r)?;
            }
        }
        Ok(())
    }

    pub fn train_epoch(&mut self, epoch: usize) -> Result<Vec<LossReport>> {
        let batches = self.sampler.epoch(self.cfg.p, self.cfg.m, mix_seed(self.cfg.seed, 100 + epoch as u64))?;
        let mut reports = Vec::with_capacity(batches.len());
        for b in batches {
            reports.push(self.train_step(&b, epoch)?);
        }
        Ok(reports)
    }

    fn teacher_for_sat(&mut self, loc: u32, r: &Raster) -> Result<Vec<f64>> {
        if let Some(v) = self.sat_teacher.get(&loc) {
            return Ok(v.clone());
        }
        let v = self.teacher.encode(r)?;
        self.sat_teacher.insert(loc, v.clone());
        Ok(v)
    }

    pub fn train_step(&mut self, batch: &PkBatch, epoch: usize) -> Result<LossReport> {
        let step_seed = mix_seed(self.cfg.seed, 10_000 + self.step as u64);
        let prep = self.prepare(batch, step_seed);
        let ab = self.cfg.ablation;
        let opts = ForwardOptions { mode: Mode::Train, branches: ab.branches(), all_protos_active: ab.all_protos_active };
        let n_drone = prep.drones.len();
        let mut inputs = Vec::with_capacity(n_drone + prep.sats.len());
        for (i, r) in prep.drones.iter().enumerate() {
            inputs.push(ViewInput { raster: r, bin: FilmBin::from_altitude(prep.drone_altitudes[i])?, gate_seed: mix_seed(step_seed, i as u64) });
        }
        for (j, r) in prep.sats.iter().enumerate() {
            inputs.push(ViewInput { raster: r, bin: FilmBin::Mean, gate_seed: mix_seed(step_seed, (n_drone + j) as u64) });
        }
        let labels: Vec<usize> =
            prep.drone_slot.iter().map(|&s| prep.classes[s]).chain(prep.classes.iter().copied()).collect();

        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.store, &inputs, opts)?;
        let emb = out.embeddings;
        let mut terms: BTreeMap<String, Var> = BTreeMap::new();

        let mut groups: [Option<Var>; 4] = [None; 4];
        if !ab.drop_align {
            let proxies = g.param(&self.store, self.model.proxies);
            terms.insert("circle".into(), circle_loss(&mut g, emb, &labels, CIRCLE_MARGIN, CIRCLE_SCALE)?);
            terms.insert("proxy_anchor".into(), proxy_anchor(&mut g, emb, &labels, proxies, PROXY_MARGIN, PROXY_SCALE)?);
            let sat_rows: Vec<usize> = (n_drone..inputs.len()).collect();
            let sats = g.gather_rows(emb, &sat_rows)?;
            let mut nce = Vec::with_capacity(self.cfg.m);
            for mi in 0..self.cfg.m {
                let rows: Vec<usize> = (0..batch.locations.len()).map(|s| s * self.cfg.m + mi).collect();
                let d = g.gather_rows(emb, &rows)?;
                nce.push(infonce_symmetric(&mut g, d, sats, CONTRAST_TAU)?);
            }
            terms.insert("infonce".into(), mean_of(&mut g, &nce)?);
            let sat_tok: Vec<(Var, Tensor)> = out.views[n_drone..].iter().map(|v| (v.z_mod, g.value(v.assign).clone())).collect();
            let sat_ref: Vec<(Var, &Tensor)> = sat_tok.iter().map(|(z, a)| (*z, a)).collect();
            let mut pn = Vec::new();
            for i in 0..n_drone {
                let a = g.value(out.views[i].assign).clone();
                let r = patch_nce(&mut g, (out.views[i].z_mod, &a), &sat_ref, prep.drone_slot[i], CONTRAST_TAU)?;
                if !r.empty {
                    pn.push(r.loss);
                }
            }
            if !pn.is_empty() {
                terms.insert("patch_nce".into(), mean_of(&mut g, &pn)?);
            }
            let logits = proxy_logits(&mut g, emb, proxies, PROXY_SCALE)?;
            terms.insert("proxy_ce".into(), smoothed_cross_entropy(&mut g, logits, &labels, LABEL_SMOOTHING)?);
            if !ab.no_uapa {
                let mut ua = Vec::with_capacity(n_drone);
                for i in 0..n_drone {
                    let zd = g.slice_rows(logits, i..i + 1)?;
                    let zs = g.slice_rows(logits, n_drone + prep.drone_slot[i]..n_drone + prep.drone_slot[i] + 1)?;
                    ua.push(uapa(&mut g, zd, zs, UAPA_T0)?.loss);
                }
                terms.insert("uapa".into(), mean_of(&mut g, &ua)?);
            }
            let names = ["circle", "proxy_anchor", "infonce", "patch_nce", "proxy_ce", "uapa"];
            groups[LossGroup::Align.index()] = Some(sum_terms(&mut g, &terms, &names)?);
        }
        let mut term_weights = BTreeMap::new();
        if !ab.drop_part {
            let w = self.mar_weight(epoch);
            term_weights.insert("mar".to_string(), w);
            let mut ms = Vec::with_capacity(inputs.len());
            for (i, v) in out.views.iter().enumerate() {
                let l = self.model.cfg.encoder.n_tokens();
                let mask = mar_mask(l, MAR_MASK_RATIO, mix_seed(step_seed, 0x3A00 + i as u64));
                ms.push(mar(
                    &mut g,
                    &self.store,
                    &self.model.head,
                    Reconstructor::Decoder(&self.model.decoder),
                    v.z_mod,
                    v.assign,
                    &self.model.coords,
                    &mask,
                )?);
            }
            let m = mean_of(&mut g, &ms)?;
            terms.insert("mar".into(), m);
            let protos = g.param(&self.store, self.model.head.prototypes);
            let div = diversity(&mut g, protos)?;
            terms.insert("diversity".into(), div);
            let wm = g.mul_scalar(m, w)?;
            groups[LossGroup::Part.index()] = Some(g.add(wm, div)?);
        }
        if !ab.drop_distill {
            let mut ema_g = Graph::no_grad();
            let ema_opts = ForwardOptions { mode: Mode::Infer, ..opts };
            let ema_out = self.model.forward(&mut ema_g, &self.ema, &inputs, ema_opts)?;
            let mut cross = Vec::with_capacity(inputs.len());
            let mut emas = Vec::with_capacity(inputs.len());
            for (i, v) in out.views.iter().enumerate() {
                let t = if i < n_drone {
                    self.teacher.encode(&prep.drones[i])?
                } else {
                    let j = i - n_drone;
                    self.teacher_for_sat(batch.locations[j], &prep.sats[j])?
                };
                let e = ema_g.value(ema_out.views[i].fusion.f).data().to_vec();
                let (c, l) = distill(&mut g, &self.store, &self.model.projector, v.fusion.f, &t, &e)?;
                cross.push(c);
                emas.push(l);
            }
            let c = mean_of(&mut g, &cross)?;
            let l = mean_of(&mut g, &emas)?;
            terms.insert("distill_cross".into(), c);
            terms.insert("distill_ema".into(), l);
            groups[LossGroup::Distill.index()] = Some(g.add(c, l)?);
        }
        if !ab.drop_alt {
            let mut al = Vec::with_capacity(n_drone);
            for i in 0..n_drone {
                let pred = self.model.alt_head.forward(&mut g, &self.store, out.views[i].fusion.f)?;
                if let Some(l) = altitude_loss(&mut g, pred, Some(prep.drone_altitudes[i]))? {
                    al.push(l);
                }
            }
            if !al.is_empty() {
                let a = mean_of(&mut g, &al)?;
                terms.insert("altitude".into(), a);
                groups[LossGroup::Alt.index()] = Some(a);
            }
        }
        let s = g.param(&self.store, self.model.kendall.log_vars);
        let total = geopart_total(&mut g, &groups, s)?;

        let mut report = LossReport {
            step: self.step,
            epoch,
            condition: prep.condition.tag().into(),
            terms: terms.iter().map(|(k, &v)| (k.clone(), g.value(v).item())).collect(),
            term_weights,
            groups: BTreeMap::new(),
            log_vars: BTreeMap::new(),
            total: g.value(total).item(),
            skipped: false,
        };
        let sv = self.store.value(self.model.kendall.log_vars).data().to_vec();
        for grp in LossGroup::ALL {
            if let Some(v) = groups[grp.index()] {
                report.groups.insert(grp.name().into(), g.value(v).item());
                report.log_vars.insert(grp.name().into(), sv[grp.index()]);
            }
        }
        if !report.total.is_finite() {
            return Err(SkyError::NonFiniteLoss { group: format!("total (step {}): {}", self.step, report.to_json_line()) });
        }

        let grads = g.backward(total)?;
        self.store.zero_grad();
        self.store.accumulate(&g, &grads);
        let total_steps = self.total_steps();
        let warmup = self.cfg.warmup_epochs * self.steps_per_epoch();
        let (head_lr, bb_lr) = lr_at(self.step + 1, total_steps, warmup, &self.cfg);
        let outcome = self.opt.step(
            &mut self.store,
            |grp| match grp {
                ParamGroup::Head => head_lr,
                ParamGroup::Backbone => bb_lr,
            },
            self.cfg.weight_decay,
        );
        match outcome {
            StepOutcome::Applied => {
                if let Some(stats) = &out.bn_stats {
                    self.model.head.update_running_stats(&mut self.store, stats);
                }
                ema_update(&self.store, &mut self.ema, self.cfg.ema_decay)?;
            }
            StepOutcome::Skipped(_) => report.skipped = true,
        }
        self.step += 1;
        Ok(report)
    }
}

fn mean_of(g: &mut Graph, vs: &[Var]) -> Result<Var> {
    if vs.is_empty() {
        return Err(SkyError::arg("mean of no terms"));
    }
    let rs: Vec<Var> = vs.iter().map(|&v| g.reshape(v, &[1, 1])).collect::<std::result::Result<_, _>>()?;
    let c = g.concat(&rs, 0)?;
    let s = g.sum(c)?;
    Ok(g.mul_scalar(s, 1.0 / vs.len() as f64)?)
}

fn sum_terms(g: &mut Graph, terms: &BTreeMap<String, Var>, names: &[&str]) -> Result<Var> {
    let present: Vec<Var> = names.iter().filter_map(|n| terms.get(*n).copied()).collect();
    let rs: Vec<Var> = present.iter().map(|&v| g.reshape(v, &[1, 1])).collect::<std::result::Result<_, _>>()?;
    let c = g.concat(&rs, 0)?;
    Ok(g.sum(c)?)
}
