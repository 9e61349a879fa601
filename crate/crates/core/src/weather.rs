//! Ten-condition weather corruption applied to drone rasters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SkyError;
use crate::raster::Raster;
use crate::scene::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeatherCondition {
    Normal,
    Fog,
    Rain,
    Snow,
    Dark,
    Light,
    FogRain,
    FogSnow,
    RainSnow,
    Wind,
}

/// Individual corruption stages that combined conditions chain together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fog,
    Rain,
    Snow,
    Dark,
    Light,
    Wind,
}

pub const FOG_ALPHA: (f64, f64) = (0.4, 0.7);
pub const FOG_GRAY: f32 = 0.7;
pub const RAIN_SPEED: (f64, f64) = (0.1, 0.3);
pub const SNOW_FLAKE_SIZE: (f64, f64) = (0.1, 0.4);
pub const SNOW_SPEED: (f64, f64) = (0.01, 0.05);
pub const DARK_FACTOR: (f64, f64) = (0.3, 0.5);
pub const LIGHT_FACTOR: (f64, f64) = (1.5, 2.0);
pub const WIND_KERNEL: usize = 15;
pub const WIND_ANGLE_DEG: (f64, f64) = (-45.0, 45.0);

impl WeatherCondition {
    pub const ALL: [WeatherCondition; 10] = [
        WeatherCondition::Normal,
        WeatherCondition::Fog,
        WeatherCondition::Rain,
        WeatherCondition::Snow,
        WeatherCondition::Dark,
        WeatherCondition::Light,
        WeatherCondition::FogRain,
        WeatherCondition::FogSnow,
        WeatherCondition::RainSnow,
        WeatherCondition::Wind,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            WeatherCondition::Normal => "normal",
            WeatherCondition::Fog => "fog",
            WeatherCondition::Rain => "rain",
            WeatherCondition::Snow => "snow",
            WeatherCondition::Dark => "dark",
            WeatherCondition::Light => "light",
            WeatherCondition::FogRain => "fog_rain",
            WeatherCondition::FogSnow => "fog_snow",
            WeatherCondition::RainSnow => "rain_snow",
            WeatherCondition::Wind => "wind",
        }
    }

    pub fn stages(self) -> &'static [Stage] {
        match self {
            WeatherCondition::Normal => &[],
            WeatherCondition::Fog => &[Stage::Fog],
            WeatherCondition::Rain => &[Stage::Rain],
            WeatherCondition::Snow => &[Stage::Snow],
            WeatherCondition::Dark => &[Stage::Dark],
            WeatherCondition::Light => &[Stage::Light],
            WeatherCondition::FogRain => &[Stage::Fog, Stage::Rain],
            WeatherCondition::FogSnow => &[Stage::Fog, Stage::Snow],
            WeatherCondition::RainSnow => &[Stage::Rain, Stage::Snow],
            WeatherCondition::Wind => &[Stage::Wind],
        }
    }

    fn salt(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for WeatherCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for WeatherCondition {
    type Err = SkyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeatherCondition::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| SkyError::arg(format!("unknown weather condition `{s}`")))
    }
}

/// Deterministic corruption; output has the input's shape and lies in `[0, 1]`.
pub fn corrupt(r: &Raster, c: WeatherCondition, seed: u64) -> Raster {
    let mut out = r.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, c.salt()));
    for &stage in c.stages() {
        apply_stage(&mut out, stage, &mut rng);
    }
    out.clamp();
    out
}

pub fn apply_stage(r: &mut Raster, stage: Stage, rng: &mut ChaCha8Rng) {
    match stage {
        Stage::Fog => {
            let alpha = rng.random_range(FOG_ALPHA.0..=FOG_ALPHA.1) as f32;
            fog(r, alpha);
        }
        Stage::Rain => {
            let speed = rng.random_range(RAIN_SPEED.0..=RAIN_SPEED.1);
            rain(r, speed, rng);
        }
        Stage::Snow => {
            let size = rng.random_range(SNOW_FLAKE_SIZE.0..=SNOW_FLAKE_SIZE.1);
            let speed = rng.random_range(SNOW_SPEED.0..=SNOW_SPEED.1);
            snow(r, size, speed, rng);
        }
        Stage::Dark => {
            let f = rng.random_range(DARK_FACTOR.0..=DARK_FACTOR.1) as f32;
            scale_brightness(r, f);
        }
        Stage::Light => {
            let f = rng.random_range(LIGHT_FACTOR.0..=LIGHT_FACTOR.1) as f32;
            scale_brightness(r, f);
        }
        Stage::Wind => {
            let angle = rng.random_range(WIND_ANGLE_DEG.0..=WIND_ANGLE_DEG.1);
            motion_blur(r, WIND_KERNEL, angle);
        }
    }
    r.clamp();
}

pub fn fog(r: &mut Raster, alpha: f32) {
    for p in r.pixels_mut() {
        *p = (1.0 - alpha) * *p + alpha * FOG_GRAY;
    }
}

pub fn scale_brightness(r: &mut Raster, factor: f32) {
    for p in r.pixels_mut() {
        *p = (*p * factor).clamp(0.0, 1.0);
    }
}

fn blend_pixel(r: &mut Raster, x: i64, y: i64, color: [f32; 3], alpha: f32) {
    if x < 0 || y < 0 || x >= r.width() as i64 || y >= r.height() as i64 {
        return;
    }
    let (x, y) = (x as usize, y as usize);
    for (c, &target) in color.iter().enumerate().take(r.channels()) {
        let v = r.get(x, y, c);
        r.set(x, y, c, (1.0 - alpha) * v + alpha * target);
    }
}

/// Slanted bright streaks; faster rain gives longer streaks.
pub fn rain(r: &mut Raster, speed: f64, rng: &mut ChaCha8Rng) {
    let (w, h) = (r.width() as f64, r.height() as f64);
    let drops = ((w * h) * 0.02).round() as usize;
    let length = 0.06 * h + speed * 0.5 * h;
    let tilt = rng.random_range(-20.0f64..20.0).to_radians();
    let (dx, dy) = (tilt.sin(), tilt.cos());
    for _ in 0..drops {
        let x0 = rng.random_range(0.0..w);
        let y0 = rng.random_range(-length..h);
        let steps = length.ceil() as usize;
        for s in 0..steps {
            let t = s as f64;
            blend_pixel(r, (x0 + dx * t) as i64, (y0 + dy * t) as i64, [0.86, 0.87, 0.92], 0.55);
        }
    }
}

/// Soft white discs smeared downward by the fall speed.
pub fn snow(r: &mut Raster, flake_size: f64, speed: f64, rng: &mut ChaCha8Rng) {
    let (w, h) = (r.width() as f64, r.height() as f64);
    let flakes = ((w * h) * 0.012).round() as usize;
    let radius = 0.5 + flake_size * 0.04 * w;
    let smear = (speed * h).max(0.0);
    for _ in 0..flakes {
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let reach = (radius + smear).ceil() as i64;
        for oy in -reach..=reach {
            for ox in -reach..=reach {
                let px = cx.floor() as i64 + ox;
                let py = cy.floor() as i64 + oy;
                let fx = px as f64 + 0.5 - cx;
                let fy = py as f64 + 0.5 - cy;
                let along = fy.clamp(0.0, smear);
                let d = (fx * fx + (fy - along) * (fy - along)).sqrt();
                if d <= radius {
                    let a = 0.85 * (1.0 - 0.5 * d / radius);
                    blend_pixel(r, px, py, [0.97, 0.97, 1.0], a as f32);
                }
            }
        }
    }
}

/// Average of `kernel` samples along a line through each pixel, border-clamped.
pub fn motion_blur(r: &mut Raster, kernel: usize, angle_deg: f64) {
    let src = r.clone();
    let (w, h, ch) = (r.width() as i64, r.height() as i64, r.channels());
    let (dy, dx) = angle_deg.to_radians().sin_cos();
    let half = (kernel as f64 - 1.0) / 2.0;
    let offsets: Vec<(i64, i64)> = (0..kernel)
        .map(|i| {
            let t = i as f64 - half;
            ((dx * t).round() as i64, (dy * t).round() as i64)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for &(ox, oy) in &offsets {
                    let sx = (x + ox).clamp(0, w - 1) as usize;
                    let sy = (y + oy).clamp(0, h - 1) as usize;
                    acc += src.get(sx, sy, c);
                }
                r.set(x as usize, y as usize, c, acc / kernel as f32);
            }
        }
    }
}

/// One uniformly drawn condition, as used for per-batch online augmentation.
pub fn sample_condition<R: Rng>(rng: &mut R) -> WeatherCondition {
    WeatherCondition::ALL[rng.random_range(0..WeatherCondition::ALL.len())]
}
