//! Trainable patch encoder and the frozen random teacher.

use rand::Rng;
use skypart_tensor::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::error::{Result, SkyError};
use crate::nn::{LayerNorm, Linear};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub teacher_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            token_dim: 64,
            n_blocks: 2,
            n_heads: 4,
            mlp_hidden: 128,
            teacher_dim: 96,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(SkyError::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.token_dim % self.n_heads != 0 || self.token_dim % 4 != 0 {
            return Err(SkyError::Config(format!(
                "token dim {} must be divisible by 4 and by {} heads",
                self.token_dim, self.n_heads
            )));
        }
        if self.teacher_dim == 0 || self.mlp_hidden == 0 {
            return Err(SkyError::Config("teacher dim and mlp hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokenSet {
    /// `L × d`, row-major over the patch grid.
    pub tokens: Tensor,
    pub cls: Vec<f64>,
    pub grid: Vec<(usize, usize)>,
}

/// Graph handles for one encoded image.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub tokens: Var,
    pub cls: Var,
}

/// Flattens non-overlapping patches into rows of `(py, px, channel)` values, centred on zero.
pub fn extract_patches(r: &Raster, cfg: &EncoderConfig) -> Result<Tensor> {
    if r.width() != cfg.image_size || r.height() != cfg.image_size || r.channels() != 3 {
        return Err(SkyError::arg(format!(
            "raster {}x{}x{} does not match encoder input {}x{}x3",
            r.width(),
            r.height(),
            r.channels(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    cfg.validate()?;
    let (g, p) = (cfg.grid(), cfg.patch_size);
    let mut data = Vec::with_capacity(cfg.n_tokens() * cfg.patch_len());
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        data.push(r.get(gx * p + px, gy * p + py, c) as f64 - 0.5);
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(cfg.n_tokens(), cfg.patch_len(), data)?)
}

/// Token grid positions in row-major order.
pub fn grid_positions(cfg: &EncoderConfig) -> Vec<(usize, usize)> {
    let g = cfg.grid();
    (0..g * g).map(|i| (i / g, i % g)).collect()
}

/// Grid positions scaled to `[0, 1]²` as an `L × 2` matrix of (column, row).
pub fn normalized_coords(cfg: &EncoderConfig) -> Tensor {
    let g = cfg.grid();
    let denom = (g.max(2) - 1) as f64;
    let data = grid_positions(cfg).into_iter().flat_map(|(r, c)| [c as f64 / denom, r as f64 / denom]).collect();
    Tensor::matrix(g * g, 2, data).expect("coordinate matrix")
}

/// Fixed 2-D sinusoidal table: first half of the features encodes the row, second half the column.
pub fn sinusoidal_positions(grid: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for (axis, pos) in [(0, r), (1, c)] {
                let width = if axis == 0 { half } else { dim - half };
                for i in 0..width {
                    let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
                    let a = pos as f64 * freq;
                    data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    Tensor::matrix(grid * grid, dim, data).expect("positional table")
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer encoder shared by both views.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch: Linear,
    cls: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    pos: Tensor,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let group = ParamGroup::Backbone;
        let d = cfg.token_dim;
        let patch = Linear::new(store, "enc.patch", cfg.patch_len(), d, true, group, rng)?;
        let cls = store.add("enc.cls", Tensor::randn(&[1, d], 0.02, rng), ParamKind::weight(group))?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let name = |s: &str| format!("enc.block{b}.{s}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &name("ln1"), d, group)?,
                qkv: Linear::new(store, &name("qkv"), d, 3 * d, true, group, rng)?,
                out: Linear::new(store, &name("out"), d, d, true, group, rng)?,
                ln2: LayerNorm::new(store, &name("ln2"), d, group)?,
                fc1: Linear::new(store, &name("fc1"), d, cfg.mlp_hidden, true, group, rng)?,
                fc2: Linear::new(store, &name("fc2"), cfg.mlp_hidden, d, true, group, rng)?,
            });
        }
        let final_ln = LayerNorm::new(store, "enc.ln", d, group)?;
        let pos = sinusoidal_positions(cfg.grid(), d);
        Ok(Encoder { cfg, patch, cls, blocks, final_ln, pos })
    }

    /// Linear patch embedding only (before positions and attention).
    pub fn patch_embed(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        self.patch.forward(g, store, patches)
    }

    /// Encodes a batch in one stacked pass; image `b` occupies rows `b·(L+1) ..`, CLS first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &[&Raster]) -> Result<Vec<EncodedVars>> {
        if images.is_empty() {
            return Err(SkyError::arg("empty image batch"));
        }
        let (l, pl, d) = (self.cfg.n_tokens(), self.cfg.patch_len(), self.cfg.token_dim);
        let rows = l + 1;
        let n = images.len() * rows;
        let mut patches = vec![0.0; n * pl];
        let mut pos = vec![0.0; n * d];
        let mut cls_sel = vec![0.0; n];
        for (b, r) in images.iter().enumerate() {
            let p = extract_patches(r, &self.cfg)?;
            let base = b * rows;
            patches[(base + 1) * pl..(base + rows) * pl].copy_from_slice(p.data());
            pos[(base + 1) * d..(base + rows) * d].copy_from_slice(self.pos.data());
            cls_sel[base] = 1.0;
        }
        let patches = g.constant(Tensor::matrix(n, pl, patches)?);
        let pos = g.constant(Tensor::matrix(n, d, pos)?);
        let sel = g.constant(Tensor::matrix(n, 1, cls_sel)?);
        let emb = self.patch_embed(g, store, patches)?;
        let cls = g.param(store, self.cls);
        let cls_rows = g.matmul(sel, cls)?;
        let x = g.add(emb, pos)?;
        let mut x = g.add(x, cls_rows)?;
        for block in &self.blocks {
            x = self.block_forward(g, store, block, x, images.len())?;
        }
        let x = self.final_ln.forward(g, store, x)?;
        let mut out = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let base = b * rows;
            let cls = g.slice_rows(x, base..base + 1)?;
            let tokens = g.slice_rows(x, base + 1..base + rows)?;
            out.push(EncodedVars { tokens, cls });
        }
        Ok(out)
    }

    fn block_forward(&self, g: &mut Graph, store: &ParamStore, blk: &Block, x: Var, batch: usize) -> Result<Var> {
        let d = self.cfg.token_dim;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let rows = self.cfg.n_tokens() + 1;
        let h = blk.ln1.forward(g, store, x)?;
        let qkv = blk.qkv.forward(g, store, h)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_image = Vec::with_capacity(batch);
        for b in 0..batch {
            let part = g.slice_rows(qkv, b * rows..(b + 1) * rows)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = g.slice_cols(part, hd * dh..(hd + 1) * dh)?;
                let k = g.slice_cols(part, d + hd * dh..d + (hd + 1) * dh)?;
                let v = g.slice_cols(part, 2 * d + hd * dh..2 * d + (hd + 1) * dh)?;
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let att = g.softmax(s, 1, 1.0 / scale)?;
                head_out.push(g.matmul(att, v)?);
            }
            per_image.push(g.concat(&head_out, 1)?);
        }
        let att = g.concat(&per_image, 0)?;
        let att = blk.out.forward(g, store, att)?;
        let x = g.add(x, att)?;
        let h = blk.ln2.forward(g, store, x)?;
        let h = blk.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = blk.fc2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }

    /// Gradient-free single-image encoding.
    pub fn encode(&self, store: &ParamStore, r: &Raster) -> Result<PatchTokenSet> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, store, &[r])?[0];
        Ok(PatchTokenSet {
            tokens: g.value(out.tokens).clone(),
            cls: g.value(out.cls).data().to_vec(),
            grid: grid_positions(&self.cfg),
        })
    }
}

/// Frozen random encoder of width `teacher_dim`, quadrant-pooled and standardised.
#[derive(Debug)]
pub struct Teacher {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    patch: Linear,
    mix: Linear,
    pos: Tensor,
}

impl Teacher {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let t = cfg.teacher_dim;
        let patch = Linear::new(&mut store, "teacher.patch", cfg.patch_len(), t, true, ParamGroup::Backbone, rng)?;
        let mix = Linear::new(&mut store, "teacher.mix", 4 * t, t, false, ParamGroup::Backbone, rng)?;
        store.set_frozen(true);
        let pos = sinusoidal_positions(cfg.grid(), t).map(|v| 0.3 * v);
        Ok(Teacher { cfg, store, patch, mix, pos })
    }

    /// `1 × teacher_dim` features; the teacher's leaves are constants in any graph.
    pub fn forward(&self, g: &mut Graph, r: &Raster) -> Result<Var> {
        let patches = g.constant(extract_patches(r, &self.cfg)?);
        let pos = g.constant(self.pos.clone());
        let h = self.patch.forward(g, &self.store, patches)?;
        let h = g.add(h, pos)?;
        let h = g.gelu(h)?;
        let grid = self.cfg.grid();
        let half = grid / 2;
        let mut pooled = Vec::with_capacity(4);
        for (qr, qc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let idx: Vec<usize> = (0..grid * grid)
                .filter(|i| ((i / grid) >= half) as usize == qr && ((i % grid) >= half) as usize == qc)
                .collect();
            let q = g.gather_rows(h, &idx)?;
            pooled.push(g.mean_rows(q)?);
        }
        let cat = g.concat(&pooled, 1)?;
        let m = self.mix.forward(g, &self.store, cat)?;
        Ok(g.layer_norm(m)?)
    }

    pub fn encode(&self, r: &Raster) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let v = self.forward(&mut g, r)?;
        Ok(g.value(v).data().to_vec())
    }
}
