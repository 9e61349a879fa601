//! Train / gallery / query splits and their on-disk manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SkyError};
use crate::raster::Raster;
use crate::scene::{check_altitude, gen_location, mix_seed, render_view, RenderConfig, SceneSpec, View};
use crate::weather::WeatherCondition;

/// Held-out locations are numbered from here so ids never collide with training ones.
pub const TEST_ID_BASE: u32 = 1_000_000;
pub const GRID_SPACING_M: f64 = 10.0;
const TRAIN_OFFSET_M: f64 = 100_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub sat: Arc<Raster>,
    pub drone: Raster,
    pub altitude_m: f64,
    pub condition: WeatherCondition,
    pub location_id: u32,
    pub world_coord: (f64, f64),
}

fn location_spec(index: usize, n_locations: usize, held_out: bool, seed: u64) -> SceneSpec {
    let stream = if held_out { 0x2000_0000 } else { 0x1000_0000 };
    let layout_seed = mix_seed(seed, stream + index as u64);
    let mut spec = gen_location(layout_seed);
    let cols = (n_locations as f64).sqrt().ceil() as usize;
    let (gx, gy) = ((index % cols) as f64 * GRID_SPACING_M, (index / cols) as f64 * GRID_SPACING_M);
    if held_out {
        spec.location_id = TEST_ID_BASE + index as u32;
        spec.world_coord = (gx, gy);
    } else {
        spec.location_id = index as u32;
        spec.world_coord = (gx + TRAIN_OFFSET_M, gy);
    }
    spec
}

/// Train and query yield one pair per (location, altitude); gallery yields one
/// pair per location (its drone view taken at the highest requested altitude).
pub fn build_dataset(
    n_locations: usize,
    altitudes: &[f64],
    split: Split,
    seed: u64,
    render: &RenderConfig,
) -> Result<Vec<ScenePair>> {
    if n_locations < 2 {
        return Err(SkyError::arg(format!("need at least 2 locations, got {n_locations}")));
    }
    if altitudes.is_empty() {
        return Err(SkyError::arg("no altitudes requested"));
    }
    for &a in altitudes {
        check_altitude(a)?;
    }
    let held_out = split != Split::Train;
    let mut out = Vec::new();
    for i in 0..n_locations {
        let spec = location_spec(i, n_locations, held_out, seed);
        let sat = Arc::new(render_view(&spec, View::Sat, altitudes[0], 0, render)?);
        let views: Vec<f64> = match split {
            Split::Gallery => vec![altitudes.iter().cloned().fold(f64::MIN, f64::max)],
            _ => altitudes.to_vec(),
        };
        for a in views {
            let texture_seed = mix_seed(spec.layout_seed, 0xD0 + a as u64);
            let drone = render_view(&spec, View::Drone, a, texture_seed, render)?;
            out.push(ScenePair {
                sat: Arc::clone(&sat),
                drone,
                altitude_m: a,
                condition: WeatherCondition::Normal,
                location_id: spec.location_id,
                world_coord: spec.world_coord,
            });
        }
    }
    Ok(out)
}

/// One satellite tile per location, in first-seen order.
pub fn satellite_tiles(pairs: &[ScenePair]) -> Vec<(u32, Arc<Raster>, (f64, f64))> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for p in pairs {
        if seen.insert(p.location_id) {
            out.push((p.location_id, Arc::clone(&p.sat), p.world_coord));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub location_id: u32,
    pub split: Split,
    pub view: String,
    pub altitude_m: Option<f64>,
    pub condition: String,
    pub world_coord: [f64; 2],
    pub path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub train: Vec<ScenePair>,
    pub gallery: Vec<ScenePair>,
    pub query: Vec<ScenePair>,
}

impl DataBundle {
    pub fn split(&self, split: Split) -> &[ScenePair] {
        match split {
            Split::Train => &self.train,
            Split::Gallery => &self.gallery,
            Split::Query => &self.query,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn raster_name(split: Split, view: View, id: u32, altitude: Option<f64>) -> String {
    match altitude {
        Some(a) => format!("rasters/{}_{}_{id}_{}.skra", split.tag(), view.tag(), a as u32),
        None => format!("rasters/{}_{}_{id}.skra", split.tag(), view.tag()),
    }
}

/// Writes each split's rasters plus one manifest line per raster.
pub fn write_bundle(dir: &Path, bundle: &DataBundle) -> Result<()> {
    fs::create_dir_all(dir.join("rasters"))?;
    let mut manifest = fs::File::create(dir.join(MANIFEST_FILE))?;
    for split in [Split::Train, Split::Gallery, Split::Query] {
        let pairs = bundle.split(split);
        if split != Split::Query {
            for (id, sat, coord) in satellite_tiles(pairs) {
                let path = raster_name(split, View::Sat, id, None);
                sat.write_to(&dir.join(&path))?;
                let rec = ManifestRecord {
                    location_id: id,
                    split,
                    view: View::Sat.tag().into(),
                    altitude_m: None,
                    condition: WeatherCondition::Normal.tag().into(),
                    world_coord: [coord.0, coord.1],
                    path,
                };
                writeln!(manifest, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            }
        }
        for p in pairs {
            let path = raster_name(split, View::Drone, p.location_id, Some(p.altitude_m));
            p.drone.write_to(&dir.join(&path))?;
            let rec = ManifestRecord {
                location_id: p.location_id,
                split,
                view: View::Drone.tag().into(),
                altitude_m: Some(p.altitude_m),
                condition: p.condition.tag().into(),
                world_coord: [p.world_coord.0, p.world_coord.1],
                path,
            };
            writeln!(manifest, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| SkyError::format("manifest", format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reloads a bundle; query drones pair with the gallery split's satellite tiles.
pub fn read_bundle(dir: &Path) -> Result<DataBundle> {
    let records = read_manifest(dir)?;
    let mut sats: BTreeMap<(Split, u32), Arc<Raster>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.view == View::Sat.tag()) {
        sats.insert((r.split, r.location_id), Arc::new(Raster::read_from(&dir.join(&r.path))?));
    }
    let mut bundle = DataBundle { train: Vec::new(), gallery: Vec::new(), query: Vec::new() };
    for r in records.iter().filter(|r| r.view == View::Drone.tag()) {
        let sat_split = if r.split == Split::Query { Split::Gallery } else { r.split };
        let sat = sats
            .get(&(sat_split, r.location_id))
            .ok_or_else(|| SkyError::format("manifest", format!("no satellite tile for location {}", r.location_id)))?;
        let altitude_m = r.altitude_m.ok_or_else(|| SkyError::format("manifest", "drone record without altitude"))?;
        let pair = ScenePair {
            sat: Arc::clone(sat),
            drone: Raster::read_from(&dir.join(&r.path))?,
            altitude_m,
            condition: r.condition.parse()?,
            location_id: r.location_id,
            world_coord: (r.world_coord[0], r.world_coord[1]),
        };
        match r.split {
            Split::Train => bundle.train.push(pair),
            Split::Gallery => bundle.gallery.push(pair),
            Split::Query => bundle.query.push(pair),
        }
    }
    Ok(bundle)
}
