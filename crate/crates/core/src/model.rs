//! Full model: shared encoder, part head, and the auxiliary heads used only by the losses.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use skypart_tensor::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::backbone::{normalized_coords, EncodedVars, Encoder, EncoderConfig};
use crate::error::{Result, SkyError};
use crate::head::{BnStats, Branches, FilmBin, FusionOutput, Mode, PartHead, PartSet, HeadConfig};
use crate::loss::{AltitudeHead, KendallWeights, MarDecoder, Projector};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Number of training locations (one proxy each).
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.head.token_dim != self.encoder.token_dim {
            return Err(SkyError::Config("head token_dim differs from encoder token_dim".into()));
        }
        if self.n_classes < 2 {
            return Err(SkyError::Config("need at least two training classes".into()));
        }
        Ok(())
    }
}

/// The retrieval vector and its branch weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub f: Vec<f64>,
    pub weights: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct ViewInput<'a> {
    pub raster: &'a Raster,
    pub bin: FilmBin,
    pub gate_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub branches: Branches,
    pub all_protos_active: bool,
}

impl ForwardOptions {
    pub const INFER: ForwardOptions = ForwardOptions { mode: Mode::Infer, branches: Branches::ALL, all_protos_active: false };

    pub fn train() -> Self {
        ForwardOptions { mode: Mode::Train, ..Self::INFER }
    }
}

#[derive(Clone, Debug)]
pub struct ViewOutput {
    pub encoded: EncodedVars,
    /// Projected and FiLM-modulated tokens, `L × d_p`.
    pub z_mod: Var,
    pub assign: Var,
    pub parts: PartSet,
    pub f_part: Option<Var>,
    pub f_cls: Option<Var>,
    pub f_graph: Option<Var>,
    pub fusion: FusionOutput,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub views: Vec<ViewOutput>,
    /// `B × D` fused embeddings.
    pub embeddings: Var,
    pub bn_stats: Option<BnStats>,
}

#[derive(Debug)]
pub struct SkyPart {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub head: PartHead,
    pub decoder: MarDecoder,
    pub projector: Projector,
    pub alt_head: AltitudeHead,
    pub proxies: ParamId,
    pub kendall: KendallWeights,
    pub coords: Tensor,
    images_encoded: AtomicUsize,
}

impl SkyPart {
    /// Builds the architecture and its freshly initialised parameter store.
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder, &mut store, rng)?;
        let head = PartHead::new(cfg.head, &mut store, rng)?;
        let decoder = MarDecoder::new(&mut store, cfg.head.part_dim, rng)?;
        let projector = Projector::new(&mut store, cfg.head.embed_dim, cfg.encoder.teacher_dim, rng)?;
        let alt_head = AltitudeHead::new(&mut store, cfg.head.embed_dim, rng)?;
        let proxies = store.add(
            "loss.proxies",
            Tensor::randn(&[cfg.n_classes, cfg.head.embed_dim], 1.0, rng),
            ParamKind::weight(ParamGroup::Head),
        )?;
        let kendall = KendallWeights::new(&mut store)?;
        let coords = normalized_coords(&cfg.encoder);
        let model = SkyPart {
            cfg,
            encoder,
            head,
            decoder,
            projector,
            alt_head,
            proxies,
            kendall,
            coords,
            images_encoded: AtomicUsize::new(0),
        };
        Ok((model, store))
    }

    /// Number of images pushed through the encoder so far.
    pub fn images_encoded(&self) -> usize {
        self.images_encoded.load(Ordering::Relaxed)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &[ViewInput<'_>], opts: ForwardOptions) -> Result<BatchOutput> {
        let rasters: Vec<&Raster> = inputs.iter().map(|v| v.raster).collect();
        let encoded = self.encoder.forward(g, store, &rasters)?;
        self.images_encoded.fetch_add(inputs.len(), Ordering::Relaxed);
        let head = &self.head;
        let (cls_all, bn_stats) = if opts.branches.cls {
            let cls_rows: Vec<Var> = encoded.iter().map(|e| e.cls).collect();
            let stack = g.concat(&cls_rows, 0)?;
            let (p, s) = head.cls_project(g, store, stack, opts.mode)?;
            (Some(p), s)
        } else {
            (None, None)
        };
        let mut views = Vec::with_capacity(inputs.len());
        for (i, (inp, enc)) in inputs.iter().zip(&encoded).enumerate() {
            let bin = match opts.mode {
                Mode::Infer => FilmBin::Mean,
                Mode::Train => inp.bin,
            };
            let z = head.project(g, store, enc.tokens)?;
            let z_mod = head.film(g, store, z, bin)?;
            let a = head.assign(g, store, z_mod)?;
            let gate = if opts.all_protos_active { None } else { Some((opts.mode, inp.gate_seed)) };
            let parts = head.aggregate_and_refine(g, store, z_mod, a, &self.coords, gate)?;
            let f_part = if opts.branches.part { Some(head.part_pool(g, store, &parts)?) } else { None };
            let (f_graph, attention) = if opts.branches.graph {
                let (f, att) = head.gat_readout(g, store, &parts)?;
                (Some(f), att)
            } else {
                (None, Vec::new())
            };
            let f_cls = match cls_all {
                Some(c) => Some(g.slice_rows(c, i..i + 1)?),
                None => None,
            };
            let fusion = head.fuse(g, store, [f_part, f_cls, f_graph])?;
            views.push(ViewOutput { encoded: *enc, z_mod, assign: a, parts, f_part, f_cls, f_graph, fusion, attention });
        }
        let rows: Vec<Var> = views.iter().map(|v| v.fusion.f).collect();
        let embeddings = g.concat(&rows, 0)?;
        Ok(BatchOutput { views, embeddings, bn_stats })
    }

    /// One image through the full model without gradient tracking. In
    /// inference mode the altitude argument is ignored.
    pub fn embed(&self, store: &ParamStore, raster: &Raster, altitude_m: Option<f64>, opts: ForwardOptions, seed: u64) -> Result<FusedEmbedding> {
        let bin = match (opts.mode, altitude_m) {
            (Mode::Train, Some(a)) => FilmBin::from_altitude(a)?,
            _ => FilmBin::Mean,
        };
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, store, &[ViewInput { raster, bin, gate_seed: seed }], opts)?;
        let v = &out.views[0];
        Ok(FusedEmbedding { f: g.value(v.fusion.f).data().to_vec(), weights: v.fusion.weight_values })
    }

    /// Inference embeddings for many images, one encoder pass each.
    pub fn embed_all(&self, store: &ParamStore, rasters: &[&Raster], branches: Branches, chunk: usize) -> Result<Vec<FusedEmbedding>> {
        let opts = ForwardOptions { mode: Mode::Infer, branches, all_protos_active: false };
        let mut out = Vec::with_capacity(rasters.len());
        for block in rasters.chunks(chunk.max(1)) {
            let inputs: Vec<ViewInput<'_>> = block.iter().map(|r| ViewInput { raster: r, bin: FilmBin::Mean, gate_seed: 0 }).collect();
            let mut g = Graph::no_grad();
            let b = self.forward(&mut g, store, &inputs, opts)?;
            for v in &b.views {
                out.push(FusedEmbedding { f: g.value(v.fusion.f).data().to_vec(), weights: v.fusion.weight_values });
            }
        }
        Ok(out)
    }
}

const EMB_MAGIC: &[u8; 4] = b"SKEM";

pub fn encode_embeddings(embeddings: &[Vec<f64>], ids: &[u32]) -> Result<Vec<u8>> {
    if embeddings.len() != ids.len() {
        return Err(SkyError::arg("embedding and id counts differ"));
    }
    let dim = embeddings.first().map_or(0, |e| e.len());
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(SkyError::arg("embeddings differ in dimension"));
    }
    let mut out = Vec::with_capacity(12 + embeddings.len() * (dim + 1) * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for e in embeddings {
        for &v in e {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(SkyError::format("embedding dump", "missing SKEM header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (count, dim) = (word(4), word(8));
    if bytes.len() != 12 + 4 * count * dim + 4 * count {
        return Err(SkyError::format("embedding dump", "length does not match header"));
    }
    let mut embs = Vec::with_capacity(count);
    for i in 0..count {
        let base = 12 + 4 * i * dim;
        embs.push((0..dim).map(|j| f32::from_le_bytes(bytes[base + 4 * j..base + 4 * j + 4].try_into().unwrap())).collect());
    }
    let ids_base = 12 + 4 * count * dim;
    let ids = (0..count).map(|i| word(ids_base + 4 * i) as u32).collect();
    Ok((embs, ids))
}

pub fn write_embeddings(path: &Path, embeddings: &[Vec<f64>], ids: &[u32]) -> Result<()> {
    std::fs::write(path, encode_embeddings(embeddings, ids)?)?;
    Ok(())
}
