//! Procedural locations and their satellite / drone renders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SkyError};
use crate::raster::Raster;

/// Altitude bins in metres, lowest first.
pub const ALTITUDES: [f64; 4] = [150.0, 200.0, 250.0, 300.0];

pub const MIN_COMPONENTS: usize = 3;
pub const MAX_COMPONENTS: usize = 12;

/// splitmix64 finaliser used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComponentKind {
    Building,
    Road,
    Vegetation,
    Water,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 4] =
        [ComponentKind::Building, ComponentKind::Road, ComponentKind::Vegetation, ComponentKind::Water];

    pub fn base_color(self) -> [f32; 3] {
        match self {
            ComponentKind::Building => [0.80, 0.42, 0.34],
            ComponentKind::Road => [0.30, 0.30, 0.34],
            ComponentKind::Vegetation => [0.20, 0.55, 0.22],
            ComponentKind::Water => [0.14, 0.32, 0.66],
        }
    }

    /// Painter's order: larger value is drawn on top.
    fn layer(self) -> u8 {
        match self {
            ComponentKind::Water => 0,
            ComponentKind::Vegetation => 1,
            ComponentKind::Road => 2,
            ComponentKind::Building => 3,
        }
    }

    fn is_elliptic(self) -> bool {
        matches!(self, ComponentKind::Vegetation | ComponentKind::Water)
    }
}

pub const BACKGROUND: [f32; 3] = [0.62, 0.57, 0.45];

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub kind: ComponentKind,
    pub center: (f64, f64),
    pub extent: (f64, f64),
    pub orientation: f64,
}

impl Component {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (s, c) = self.orientation.sin_cos();
        let lx = du * c + dv * s;
        let ly = -du * s + dv * c;
        let (hw, hh) = (self.extent.0 / 2.0, self.extent.1 / 2.0);
        if self.kind.is_elliptic() {
            (lx / hw).powi(2) + (ly / hh).powi(2) <= 1.0
        } else {
            lx.abs() <= hw && ly.abs() <= hh
        }
    }

    /// Corners of the oriented bounding box in world coordinates.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.orientation.sin_cos();
        let (hw, hh) = (self.extent.0 / 2.0, self.extent.1 / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(lx, ly)| (self.center.0 + lx * c - ly * s, self.center.1 + lx * s + ly * c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub location_id: u32,
    pub layout_seed: u64,
    pub components: Vec<Component>,
    pub world_coord: (f64, f64),
}

/// Deterministic layout from a seed. Identity and coordinates are assigned by the dataset builder.
pub fn gen_location(layout_seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(layout_seed, 0x5CE7));
    let n = rng.random_range(MIN_COMPONENTS..=MAX_COMPONENTS);
    let mut components = Vec::with_capacity(n);
    for k in 0..n {
        let r: f64 = rng.random();
        let kind = if r < 0.4 {
            ComponentKind::Building
        } else if r < 0.6 {
            ComponentKind::Road
        } else if r < 0.85 {
            ComponentKind::Vegetation
        } else {
            ComponentKind::Water
        };
        // The first two sit near the centre so tight low-altitude crops still see structure.
        let span = if k < 2 { 0.3..0.7 } else { 0.05..0.95 };
        let center = (rng.random_range(span.clone()), rng.random_range(span));
        let extent = match kind {
            ComponentKind::Building => (rng.random_range(0.08..0.2), rng.random_range(0.08..0.2)),
            ComponentKind::Road => (rng.random_range(0.5..1.0), rng.random_range(0.04..0.07)),
            ComponentKind::Vegetation | ComponentKind::Water => {
                (rng.random_range(0.1..0.25), rng.random_range(0.1..0.25))
            }
        };
        let orientation = rng.random_range(0.0..std::f64::consts::PI);
        components.push(Component { kind, center, extent, orientation });
    }
    SceneSpec { location_id: 0, layout_seed, components, world_coord: (0.0, 0.0) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Sat,
    Drone,
}

impl View {
    pub fn tag(self) -> &'static str {
        match self {
            View::Sat => "sat",
            View::Drone => "drone",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub image_size: usize,
    /// Std-dev of per-pixel Gaussian texture noise on drone renders.
    pub texture_noise: f64,
    pub shear_deg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { image_size: 64, texture_noise: 0.06, shear_deg: 10.0 }
    }
}

pub fn check_altitude(altitude_m: f64) -> Result<usize> {
    ALTITUDES
        .iter()
        .position(|&a| a == altitude_m)
        .ok_or_else(|| SkyError::arg(format!("altitude {altitude_m} m is not one of 150/200/250/300")))
}

/// Maps drone pixel coordinates to world layout coordinates.
///
/// The frame is a sheared square whose side scales with altitude; at 300 m it
/// just contains the unit layout square, at 150 m the central quarter.
#[derive(Clone, Copy, Debug)]
pub struct DroneWarp {
    shear: f64,
    side: f64,
}

impl DroneWarp {
    pub fn new(altitude_m: f64, shear_deg: f64) -> Result<Self> {
        check_altitude(altitude_m)?;
        let shear = shear_deg.to_radians().tan();
        let side = (altitude_m / 300.0) / (1.0 - shear);
        Ok(DroneWarp { shear, side })
    }

    /// `(s, t)` are normalised image coordinates in `[0, 1]²`.
    pub fn image_to_world(&self, s: f64, t: f64) -> (f64, f64) {
        let (x, y) = (s - 0.5, t - 0.5);
        (0.5 + self.side * (x + self.shear * y), 0.5 + self.side * y)
    }

    pub fn world_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let y = (v - 0.5) / self.side;
        let x = (u - 0.5) / self.side - self.shear * y;
        (x + 0.5, y + 0.5)
    }
}

fn topmost(spec: &SceneSpec, u: f64, v: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, c) in spec.components.iter().enumerate() {
        if c.contains(u, v) {
            best = match best {
                Some(b) if spec.components[b].kind.layer() > c.kind.layer() => Some(b),
                _ => Some(k),
            };
        }
    }
    best
}

fn world_sampler(view: View, altitude_m: f64, cfg: &RenderConfig) -> Result<Option<DroneWarp>> {
    match view {
        View::Sat => Ok(None),
        View::Drone => DroneWarp::new(altitude_m, cfg.shear_deg).map(Some),
    }
}

/// Per-pixel index of the visible component, `-1` for background.
pub fn silhouette(spec: &SceneSpec, view: View, altitude_m: f64, cfg: &RenderConfig) -> Result<Vec<i32>> {
    let warp = world_sampler(view, altitude_m, cfg)?;
    let n = cfg.image_size;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (s, t) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let (u, v) = match warp {
                Some(w) => w.image_to_world(s, t),
                None => (s, t),
            };
            out.push(topmost(spec, u, v).map_or(-1, |k| k as i32));
        }
    }
    Ok(out)
}

fn component_shade(spec: &SceneSpec, k: usize) -> f32 {
    let h = mix_seed(spec.layout_seed, 0xC0105 + k as u64);
    0.85 + 0.3 * ((h >> 11) as f64 / (1u64 << 53) as f64) as f32
}

/// Renders one view; `texture_seed` only drives the drone's per-pixel noise.
pub fn render_view(
    spec: &SceneSpec,
    view: View,
    altitude_m: f64,
    texture_seed: u64,
    cfg: &RenderConfig,
) -> Result<Raster> {
    let mask = silhouette(spec, view, altitude_m, cfg)?;
    let n = cfg.image_size;
    let shades: Vec<f32> = (0..spec.components.len()).map(|k| component_shade(spec, k)).collect();
    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(texture_seed, 0x7E47));
    for &m in &mask {
        let rgb = if m < 0 {
            BACKGROUND
        } else {
            let k = m as usize;
            spec.components[k].kind.base_color().map(|c| c * shades[k])
        };
        for c in rgb {
            let noise = match view {
                View::Drone if cfg.texture_noise > 0.0 => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * cfg.texture_noise) as f32
                }
                _ => 0.0,
            };
            pixels.push((c + noise).clamp(0.0, 1.0));
        }
    }
    Raster::new(n, n, 3, pixels)
}
