//! Single-pass cosine retrieval and its metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use skypart_tensor::ParamStore;

use crate::dataset::{satellite_tiles, ScenePair};
use crate::error::{Result, SkyError};
use crate::head::Branches;
use crate::model::SkyPart;
use crate::raster::Raster;
use crate::scene::mix_seed;
use crate::weather::{corrupt, WeatherCondition};

pub const SDM_LAMBDA: f64 = 0.05;
const UNIT_TOL: f64 = 1e-6;
const EMBED_CHUNK: usize = 16;

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(SkyError::arg(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Unit-norm gallery rows with identities and optional coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    rows: Vec<Vec<f64>>,
    ids: Vec<u32>,
    coords: Option<Vec<(f64, f64)>>,
}

impl EmbeddingIndex {
    pub fn new(rows: Vec<Vec<f64>>, ids: Vec<u32>, coords: Option<Vec<(f64, f64)>>) -> Result<Self> {
        if rows.len() != ids.len() || coords.as_ref().is_some_and(|c| c.len() != rows.len()) {
            return Err(SkyError::arg("index rows, ids and coordinates differ in length"));
        }
        let dim = rows.first().map_or(0, |r| r.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(SkyError::arg(format!("gallery row {i} has dimension {}, expected {dim}", r.len())));
            }
            check_unit(r, "gallery row")?;
        }
        Ok(EmbeddingIndex { rows, ids, coords })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Gallery indices by descending cosine, ties by ascending index.
pub fn rank(query: &[f64], index: &EmbeddingIndex) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(SkyError::arg("empty gallery"));
    }
    check_unit(query, "query")?;
    if query.len() != index.rows[0].len() {
        return Err(SkyError::arg("query dimension differs from gallery"));
    }
    // Adding 0.0 folds -0.0 into 0.0 so signed zeros tie.
    let sims: Vec<f64> = index.rows.iter().map(|r| r.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() + 0.0).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub ranking: Vec<usize>,
    /// Relevance of each ranked position.
    pub relevant: Vec<bool>,
    /// Metres from the query's ground truth to each ranked item.
    pub distances: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RetrievalResult {
    pub queries: Vec<QueryResult>,
}

pub fn retrieve(
    queries: &[Vec<f64>],
    query_ids: &[u32],
    query_coords: Option<&[(f64, f64)]>,
    index: &EmbeddingIndex,
) -> Result<RetrievalResult> {
    if queries.len() != query_ids.len() || query_coords.is_some_and(|c| c.len() != queries.len()) {
        return Err(SkyError::arg("queries, ids and coordinates differ in length"));
    }
    let mut out = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let ranking = rank(q, index)?;
        let relevant = ranking.iter().map(|&j| index.ids[j] == query_ids[qi]).collect();
        let distances = match (query_coords, &index.coords) {
            (Some(qc), Some(gc)) => {
                let (x, y) = qc[qi];
                Some(ranking.iter().map(|&j| ((gc[j].0 - x).powi(2) + (gc[j].1 - y).powi(2)).sqrt()).collect())
            }
            _ => None,
        };
        out.push(QueryResult { ranking, relevant, distances });
    }
    Ok(RetrievalResult { queries: out })
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn recall_at_k(results: &RetrievalResult, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(SkyError::arg("recall needs k >= 1"));
    }
    if results.queries.is_empty() {
        return Ok(0.0);
    }
    let hits = results.queries.iter().filter(|q| q.relevant.iter().take(k).any(|&r| r)).count();
    Ok(hits as f64 / results.queries.len() as f64)
}

/// Mean over queries of `(1/R) Σ precision at each relevant rank`.
pub fn average_precision(results: &RetrievalResult) -> Result<f64> {
    if results.queries.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (qi, q) in results.queries.iter().enumerate() {
        let r = q.relevant.iter().filter(|&&x| x).count();
        if r == 0 {
            return Err(SkyError::arg(format!("query {qi} has no relevant gallery item")));
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (pos, &rel) in q.relevant.iter().enumerate() {
            if rel {
                hits += 1;
                sum += hits as f64 / (pos + 1) as f64;
            }
        }
        total += sum / r as f64;
    }
    Ok(total / results.queries.len() as f64)
}

/// Rank-weighted distance score `Σ 2^{K−i} e^{−λ d_i} / Σ 2^{K−i}`, averaged over queries.
pub fn sdm_at_k(results: &RetrievalResult, k: usize, lambda: f64) -> Result<f64> {
    if k == 0 {
        return Err(SkyError::arg("SDM needs k >= 1"));
    }
    if results.queries.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in &results.queries {
        let d = q.distances.as_ref().ok_or_else(|| SkyError::arg("SDM needs world coordinates"))?;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &di) in d.iter().take(k).enumerate() {
            let w = 2f64.powi((k - 1 - i) as i32);
            num += w * (-lambda * di).exp();
            den += w;
        }
        total += num / den;
    }
    Ok(total / results.queries.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    D2s,
    S2d,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::D2s => "d2s",
            Direction::S2d => "s2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d2s" => Ok(Direction::D2s),
            "s2d" => Ok(Direction::S2d),
            _ => Err(SkyError::arg(format!("unknown direction `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub ap: f64,
    pub sdm1: f64,
    pub sdm3: f64,
}

pub fn metrics(results: &RetrievalResult) -> Result<Metrics> {
    Ok(Metrics {
        r1: recall_at_k(results, 1)?,
        r5: recall_at_k(results, 5)?,
        r10: recall_at_k(results, 10)?,
        ap: average_precision(results)?,
        sdm1: sdm_at_k(results, 1, SDM_LAMBDA)?,
        sdm3: sdm_at_k(results, 3, SDM_LAMBDA)?,
    })
}

/// Embedded evaluation views: gallery satellites plus query drones per condition.
struct Side {
    embs: Vec<Vec<f64>>,
    ids: Vec<u32>,
    coords: Vec<(f64, f64)>,
}

fn embed_side(model: &SkyPart, store: &ParamStore, rasters: &[&Raster], branches: Branches) -> Result<Vec<Vec<f64>>> {
    Ok(model.embed_all(store, rasters, branches, EMBED_CHUNK)?.into_iter().map(|e| e.f).collect())
}

fn satellites(model: &SkyPart, store: &ParamStore, gallery: &[ScenePair], branches: Branches) -> Result<Side> {
    let tiles = satellite_tiles(gallery);
    let rasters: Vec<&Raster> = tiles.iter().map(|(_, r, _)| r.as_ref()).collect();
    Ok(Side {
        embs: embed_side(model, store, &rasters, branches)?,
        ids: tiles.iter().map(|t| t.0).collect(),
        coords: tiles.iter().map(|t| t.2).collect(),
    })
}

/// Corruption seed for query drone `i` under `c`.
pub fn query_corruption_seed(seed: u64, c: WeatherCondition, i: usize) -> u64 {
    mix_seed(mix_seed(seed, 0xE7A1 + c as u64), i as u64)
}

/// The drone rasters evaluated under `c` (clean satellites are never passed through here).
pub fn corrupted_queries(query: &[ScenePair], c: WeatherCondition, seed: u64) -> Vec<Raster> {
    query.iter().enumerate().map(|(i, p)| corrupt(&p.drone, c, query_corruption_seed(seed, c, i))).collect()
}

fn drones(model: &SkyPart, store: &ParamStore, query: &[ScenePair], c: WeatherCondition, seed: u64, branches: Branches) -> Result<Side> {
    let rasters = corrupted_queries(query, c, seed);
    let refs: Vec<&Raster> = rasters.iter().collect();
    Ok(Side {
        embs: embed_side(model, store, &refs, branches)?,
        ids: query.iter().map(|p| p.location_id).collect(),
        coords: query.iter().map(|p| p.world_coord).collect(),
    })
}

fn score(queries: &Side, gallery: &Side) -> Result<Metrics> {
    let index = EmbeddingIndex::new(gallery.embs.clone(), gallery.ids.clone(), Some(gallery.coords.clone()))?;
    let res = retrieve(&queries.embs, &queries.ids, Some(&queries.coords), &index)?;
    metrics(&res)
}

/// Metrics for one direction under one drone condition.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &SkyPart,
    store: &ParamStore,
    gallery: &[ScenePair],
    query: &[ScenePair],
    direction: Direction,
    condition: WeatherCondition,
    seed: u64,
    branches: Branches,
) -> Result<Metrics> {
    let sats = satellites(model, store, gallery, branches)?;
    let dr = drones(model, store, query, condition, seed, branches)?;
    match direction {
        Direction::D2s => score(&dr, &sats),
        Direction::S2d => score(&sats, &dr),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub direction: Direction,
    pub condition: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherTable {
    pub rows: Vec<ConditionRow>,
    /// Mean R@1 / AP over the nine corrupted conditions, per direction.
    pub mean: Vec<(Direction, f64, f64)>,
}

impl WeatherTable {
    pub fn get(&self, direction: Direction, c: WeatherCondition) -> Option<&Metrics> {
        self.rows.iter().find(|r| r.direction == direction && r.condition == c.tag()).map(|r| &r.metrics)
    }

    pub fn mean_r1(&self, direction: Direction) -> Option<f64> {
        self.mean.iter().find(|m| m.0 == direction).map(|m| m.1)
    }

    /// One line per direction: condition columns in protocol order, then Mean.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,metric");
        for c in WeatherCondition::ALL {
            let _ = write!(s, ",{}", c.tag());
        }
        s.push_str(",mean\n");
        for &(dir, mr1, map) in &self.mean {
            for (name, mean) in [("R@1", mr1), ("AP", map)] {
                let _ = write!(s, "{},{name}", dir.tag());
                for c in WeatherCondition::ALL {
                    let m = self.get(dir, c).expect("every condition evaluated");
                    let v = if name == "R@1" { m.r1 } else { m.ap };
                    let _ = write!(s, ",{v:.4}");
                }
                let _ = writeln!(s, ",{mean:.4}");
            }
        }
        s
    }
}

/// Every condition in both directions; satellites are embedded once and stay clean.
pub fn weather_table(
    model: &SkyPart,
    store: &ParamStore,
    gallery: &[ScenePair],
    query: &[ScenePair],
    conditions: &[WeatherCondition],
    seed: u64,
) -> Result<WeatherTable> {
    let sats = satellites(model, store, gallery, Branches::ALL)?;
    weather_table_with(model, store, &sats, query, conditions, seed, Branches::ALL)
}

/// As [`weather_table`] but with a fusion-branch restriction.
pub fn weather_table_branches(
    model: &SkyPart,
    store: &ParamStore,
    gallery: &[ScenePair],
    query: &[ScenePair],
    conditions: &[WeatherCondition],
    seed: u64,
    branches: Branches,
) -> Result<WeatherTable> {
    let sats = satellites(model, store, gallery, branches)?;
    weather_table_with(model, store, &sats, query, conditions, seed, branches)
}

fn weather_table_with(
    model: &SkyPart,
    store: &ParamStore,
    sats: &Side,
    query: &[ScenePair],
    conditions: &[WeatherCondition],
    seed: u64,
    branches: Branches,
) -> Result<WeatherTable> {
    let mut rows = Vec::new();
    for &c in conditions {
        let dr = drones(model, store, query, c, seed, branches)?;
        rows.push(ConditionRow { direction: Direction::D2s, condition: c.tag().into(), metrics: score(&dr, sats)? });
        rows.push(ConditionRow { direction: Direction::S2d, condition: c.tag().into(), metrics: score(sats, &dr)? });
    }
    let mut mean = Vec::new();
    for dir in [Direction::D2s, Direction::S2d] {
        let corrupted: Vec<&ConditionRow> =
            rows.iter().filter(|r| r.direction == dir && r.condition != WeatherCondition::Normal.tag()).collect();
        if !corrupted.is_empty() {
            let n = corrupted.len() as f64;
            let r1 = corrupted.iter().map(|r| r.metrics.r1).sum::<f64>() / n;
            let ap = corrupted.iter().map(|r| r.metrics.ap).sum::<f64>() / n;
            mean.push((dir, r1, ap));
        }
    }
    Ok(WeatherTable { rows, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub direction: String,
    pub condition: String,
    pub metric: String,
    pub value: f64,
}

pub fn metric_records(dataset: &str, direction: Direction, condition: &str, m: &Metrics) -> Vec<MetricRecord> {
    [("R@1", m.r1), ("R@5", m.r5), ("R@10", m.r10), ("AP", m.ap), ("SDM@1", m.sdm1), ("SDM@3", m.sdm3)]
        .into_iter()
        .map(|(metric, value)| MetricRecord {
            dataset: dataset.into(),
            direction: direction.tag().into(),
            condition: condition.into(),
            metric: metric.into(),
            value,
        })
        .collect()
}

/// `key=value` text, one record per line.
pub fn records_to_text(records: &[MetricRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "dataset={} direction={} condition={} metric={} value={:.6}",
            r.dataset, r.direction, r.condition, r.metric, r.value
        );
    }
    s
}

pub fn records_to_json(records: &[MetricRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}
