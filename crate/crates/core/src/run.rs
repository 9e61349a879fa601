//! End-to-end pipeline steps shared by the command line and the tests.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use skypart_tensor::ParamStore;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{build_dataset, DataBundle, Split};
use crate::error::{Result, SkyError};
use crate::eval::{evaluate, Direction, Metrics};
use crate::loss::LossReport;
use crate::model::SkyPart;
use crate::scene::ALTITUDES;
use crate::train::{Ablation, Trainer};
use crate::weather::WeatherCondition;

pub fn generate(cfg: &RunConfig) -> Result<DataBundle> {
    let rc = cfg.render_config();
    Ok(DataBundle {
        train: build_dataset(cfg.data.n_train, &ALTITUDES, Split::Train, cfg.data.seed, &rc)?,
        gallery: build_dataset(cfg.data.n_test, &ALTITUDES, Split::Gallery, cfg.data.seed, &rc)?,
        query: build_dataset(cfg.data.n_test, &ALTITUDES, Split::Query, cfg.data.seed, &rc)?,
    })
}

/// Trains on `bundle.train`, handing every step report to `sink`.
pub fn train(cfg: &RunConfig, bundle: &DataBundle, sink: impl FnMut(&LossReport) -> Result<()>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg.model_config(), cfg.train, bundle.train.clone())?;
    t.fit(sink)?;
    Ok(t)
}

/// A model shell whose parameters are then replaced from `ckpt`.
pub fn load_model(cfg: &RunConfig, n_classes: usize, ckpt: &Path) -> Result<(SkyPart, ParamStore)> {
    let mut mc = cfg.model_config();
    mc.n_classes = n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, mut store) = SkyPart::new(mc, &mut rng)?;
    checkpoint::load_into(ckpt, &mut store)?;
    Ok((model, store))
}

pub fn n_train_classes(bundle: &DataBundle) -> usize {
    bundle.train.iter().map(|p| p.location_id).collect::<std::collections::BTreeSet<_>>().len()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub clean: Metrics,
    pub fog_snow: Metrics,
}

/// The full run followed by one run per flag, all with the same seed.
pub fn ablate(cfg: &RunConfig, bundle: &DataBundle, flags: &[String]) -> Result<Vec<AblationRow>> {
    let mut variants = vec![("full".to_string(), Ablation::default())];
    for f in flags {
        variants.push((f.clone(), Ablation::only(f)?));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, ab) in variants {
        let mut c = *cfg;
        c.train.ablation = ab;
        let t = train(&c, bundle, |_| Ok(()))?;
        let branches = ab.branches();
        let score = |cond| {
            evaluate(&t.model, &t.store, &bundle.gallery, &bundle.query, Direction::D2s, cond, cfg.eval.seed, branches)
        };
        rows.push(AblationRow {
            variant: name,
            clean: score(WeatherCondition::Normal)?,
            fog_snow: score(WeatherCondition::FogSnow)?,
        });
    }
    Ok(rows)
}

/// CSV with deltas against the first (full) row.
pub fn ablation_table(rows: &[AblationRow]) -> Result<String> {
    let base = rows.first().ok_or_else(|| SkyError::arg("no ablation rows"))?;
    let mut s = String::from("variant,r1,ap,fog_snow_r1,delta_r1,delta_ap,delta_fog_snow_r1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:+.4},{:+.4},{:+.4}",
            r.variant,
            r.clean.r1,
            r.clean.ap,
            r.fog_snow.r1,
            r.clean.r1 - base.clean.r1,
            r.clean.ap - base.clean.ap,
            r.fog_snow.r1 - base.fog_snow.r1
        );
    }
    Ok(s)
}
