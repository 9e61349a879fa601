//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::EncoderConfig;
use crate::error::{Result, SkyError};
use crate::eval::Direction;
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::scene::RenderConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub texture_noise: f64,
    pub shear_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 32, n_test: 32, seed: 7, texture_noise: 0.06, shear_deg: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub direction: Direction,
    /// Seed for query-side weather corruption.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { direction: Direction::D2s, seed: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl Value for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Direction {
    fn parse_value(s: &str) -> Option<Self> {
        Direction::parse(s).ok()
    }
    fn render(&self) -> String {
        self.tag().to_string()
    }
}

fn parse_as<T: Value>(key: &str, raw: &str) -> Result<T> {
    T::parse_value(raw).ok_or_else(|| SkyError::Config(format!("bad value `{raw}` for `{key}`")))
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => self $(.$field)+ = parse_as::<$ty>(key, raw)?,)*
                    _ => return Err(SkyError::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(Value::render(&self $(.$field)+)),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "seed" => train.seed: u64,
    "data.n_train" => data.n_train: usize,
    "data.n_test" => data.n_test: usize,
    "data.seed" => data.seed: u64,
    "data.texture_noise" => data.texture_noise: f64,
    "data.shear_deg" => data.shear_deg: f64,
    "encoder.image_size" => encoder.image_size: usize,
    "encoder.patch_size" => encoder.patch_size: usize,
    "encoder.token_dim" => encoder.token_dim: usize,
    "encoder.n_blocks" => encoder.n_blocks: usize,
    "encoder.n_heads" => encoder.n_heads: usize,
    "encoder.mlp_hidden" => encoder.mlp_hidden: usize,
    "encoder.teacher_dim" => encoder.teacher_dim: usize,
    "head.part_dim" => head.part_dim: usize,
    "head.k_max" => head.k_max: usize,
    "head.k_min" => head.k_min: usize,
    "head.assign_tau" => head.assign_tau: f64,
    "head.gate_tau" => head.gate_tau: f64,
    "head.gate_bias" => head.gate_bias: f64,
    "head.embed_dim" => head.embed_dim: usize,
    "head.gat_heads" => head.gat_heads: usize,
    "head.bn_min_batch" => head.bn_min_batch: usize,
    "train.epochs" => train.epochs: usize,
    "train.p" => train.p: usize,
    "train.m" => train.m: usize,
    "train.head_lr" => train.head_lr: f64,
    "train.backbone_lr" => train.backbone_lr: f64,
    "train.lr_scale" => train.lr_scale: f64,
    "train.weight_decay" => train.weight_decay: f64,
    "train.warmup_epochs" => train.warmup_epochs: usize,
    "train.lr_floor" => train.lr_floor: f64,
    "train.mar_warmup_epochs" => train.mar_warmup_epochs: usize,
    "train.ema_decay" => train.ema_decay: f64,
    "train.weather_online" => train.weather_online: bool,
    "train.rotation_aug" => train.rotation_aug: bool,
    "ablation.drop_align" => train.ablation.drop_align: bool,
    "ablation.drop_part" => train.ablation.drop_part: bool,
    "ablation.drop_alt" => train.ablation.drop_alt: bool,
    "ablation.drop_distill" => train.ablation.drop_distill: bool,
    "ablation.cls_only" => train.ablation.cls_only: bool,
    "ablation.part_only" => train.ablation.part_only: bool,
    "ablation.no_graph" => train.ablation.no_graph: bool,
    "ablation.all_protos_active" => train.ablation.all_protos_active: bool,
    "ablation.no_uapa" => train.ablation.no_uapa: bool,
    "eval.direction" => eval.direction: Direction,
    "eval.seed" => eval.seed: u64,
}

impl RunConfig {
    /// Starts from defaults; every listed key overrides one field.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SkyError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(SkyError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v).map_err(|e| SkyError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if self.data.n_train < self.train.p {
            return Err(SkyError::Config("data.n_train must be at least train.p".into()));
        }
        if self.data.n_test < 2 {
            return Err(SkyError::Config("data.n_test must be at least 2".into()));
        }
        if self.data.texture_noise < 0.0 {
            return Err(SkyError::Config("data.texture_noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let head = HeadConfig { token_dim: self.encoder.token_dim, ..self.head };
        ModelConfig { encoder: self.encoder, head, n_classes: self.data.n_train }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            image_size: self.encoder.image_size,
            texture_noise: self.data.texture_noise,
            shear_deg: self.data.shear_deg,
        }
    }
}
