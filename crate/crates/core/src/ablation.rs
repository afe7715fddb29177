//! The variant-by-seed sweep behind the ablation table.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_world, World};
use crate::error::{validation, Result};
use crate::eval::{report, AblationReport, RunSummary};
use crate::trainer::{
    pretrain_source, train, MetricRecord, TrainConfig, TrainOptions, TrainState, Variant,
};

/// One finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    /// Final night-model mIoU on the held-out split, in `[0, 1]`.
    pub miou: f64,
    pub wall_s: f64,
    pub history: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub runs: Vec<RunRecord>,
    pub report: AblationReport,
    /// Seconds spent on pretraining, shared by all variants of a seed.
    pub pretrain_s: f64,
    pub total_s: f64,
}

impl AblationOutcome {
    /// Mean final mIoU of `v` over its seeds.
    pub fn mean(&self, v: Variant) -> Option<f64> {
        self.report.row(v.label()).map(|r| r.mean)
    }
}

/// Progress events, in the order they happen.
pub enum Progress<'a> {
    Pretrained { seed: u64, wall_s: f64 },
    RunDone(&'a RunRecord),
}

/// Trains every variant for every seed. Each seed pretrains once and all
/// of its variants start from that network.
pub fn run_ablation(
    cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(Progress<'_>),
) -> Result<AblationOutcome> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(validation("ablation needs at least one variant and one seed"));
    }
    cfg.validate()?;
    let start = Instant::now();
    let World { pool, eval, .. } = build_world(&cfg.world)?;
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    let mut pretrain_s = 0.0;
    for &seed in seeds {
        let t = Instant::now();
        let net = (cfg.pretrain_iters > 0)
            .then(|| pretrain_source(cfg, &pool, seed))
            .transpose()?;
        let wall_s = t.elapsed().as_secs_f64();
        pretrain_s += wall_s;
        progress(Progress::Pretrained { seed, wall_s });
        for &v in variants {
            let c = cfg.with_variant(v);
            let mut state = match &net {
                Some(n) => TrainState::from_pretrained(&c, seed, n),
                None => TrainState::new(&c, seed),
            };
            let t = Instant::now();
            train(&c, &pool, &mut state, TrainOptions { eval: Some(&eval), ..Default::default() })?;
            let miou = state
                .history
                .last()
                .and_then(|r| r.val_miou)
                .ok_or_else(|| validation("run finished without a final validation score"))?;
            let record = RunRecord {
                variant: v,
                seed,
                miou,
                wall_s: t.elapsed().as_secs_f64(),
                history: state.history,
            };
            progress(Progress::RunDone(&record));
            runs.push(record);
        }
    }
    let summaries: Vec<RunSummary> = variants
        .iter()
        .flat_map(|v| {
            runs.iter().filter(move |r| r.variant == *v).map(|r| RunSummary {
                variant: r.variant.label().to_string(),
                seed: r.seed,
                miou: r.miou,
            })
        })
        .collect();
    Ok(AblationOutcome {
        report: report(&summaries)?,
        runs,
        pretrain_s,
        total_s: start.elapsed().as_secs_f64(),
    })
}
