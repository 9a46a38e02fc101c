//! Attention-stage ablation: the same run with each stage switched off.

use std::fmt::Write as _;

use crate::embed::SampleMode;
use crate::error::Result;
use crate::harness::config::Config;
use crate::harness::data::Dataset;
use crate::harness::eval::evaluate;
use crate::harness::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// No attention: per-frame MLP blocks and frame-mean readout.
    Baseline,
    SpatialOnly,
    TemporalOnly,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::SpatialOnly, Variant::TemporalOnly, Variant::Both];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SpatialOnly => "spatial-only",
            Variant::TemporalOnly => "temporal-only",
            Variant::Both => "both",
        }
    }

    /// `(spatial, temporal)`.
    pub fn stages(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::SpatialOnly => (true, false),
            Variant::TemporalOnly => (false, true),
            Variant::Both => (true, true),
        }
    }

    pub fn apply(self, cfg: &Config) -> Config {
        let mut cfg = cfg.clone();
        (cfg.model.spatial, cfg.model.temporal) = self.stages();
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub uar: f64,
    pub war: f64,
    pub final_train_loss: f64,
}

/// Train and evaluate `variants` under the same seed, data and budget.
pub fn ablate(
    cfg: &Config,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
    variants: &[Variant],
    progress: &mut dyn FnMut(Variant, &crate::harness::EpochRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let vcfg = variant.apply(cfg);
        let outcome = train(&vcfg, seed, train_set, None, None, &mut |r, _| {
            progress(variant, r);
            Ok(())
        })?;
        let plan = vcfg.sampling_plan(SampleMode::Test)?;
        let report = evaluate(&outcome.checkpoint.params, &outcome.checkpoint.config, &plan, test_set)?;
        rows.push(AblationRow {
            variant,
            uar: report.uar,
            war: report.war,
            final_train_loss: outcome.log.last().map_or(f64::NAN, |r| r.train_loss),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,uar,war,final_train_loss\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.variant.name(), r.uar, r.war, r.final_train_loss).unwrap();
    }
    s
}
