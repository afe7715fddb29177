//! Pre-generated training pool and the held-out night evaluation split.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::image::{lab_moment_match, ChannelStats, Image, LabelMap};
use crate::objective::ClassWeights;
use crate::synth::{
    generate_scene, lab_stats, render_domain, render_target_pair, sample_parallax, stream, sub_seed,
    Domain, DomainSample, NightSpec, QuadBatch, SceneSpec, StyleSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub data_seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub shape_count: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub parallax_max: usize,
    pub source_style: StyleSpec,
    pub target_style: StyleSpec,
    pub night: NightSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            data_seed: 2024,
            height: 64,
            width: 64,
            num_classes: 8,
            shape_count: 6,
            train_size: 200,
            eval_size: 50,
            parallax_max: 2,
            source_style: StyleSpec::desk_source(),
            target_style: StyleSpec::desk_target(),
            night: NightSpec::desk(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(validation("train_size and eval_size must be positive"));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(validation("image size must be a positive multiple of 4"));
        }
        if self.source_style.num_classes() != self.num_classes as usize
            || self.target_style.num_classes() != self.num_classes as usize
        {
            return Err(validation("palette sizes must equal num_classes"));
        }
        Ok(())
    }

    fn scene(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            shape_count: self.shape_count,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceItem {
    pub day: Image,
    /// LAB moment-matched to the pooled target-night statistics.
    pub night: Image,
    pub label: LabelMap,
}

#[derive(Debug, Clone)]
pub struct TargetItem {
    pub day: Image,
    pub night: Image,
}

/// Everything training may look at. Target labels are not part of it.
#[derive(Debug, Clone)]
pub struct TrainPool {
    pub source: Vec<SourceItem>,
    pub target: Vec<TargetItem>,
    pub night_stats: ChannelStats,
    pub clamp_fraction: f64,
    pub num_classes: usize,
}

/// Night images of unseen target scenes with their hidden labels.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

/// Hidden labels of the target training split, kept apart from the pool.
#[derive(Debug, Clone)]
pub struct TargetTruth {
    pub day: Vec<LabelMap>,
    pub night: Vec<LabelMap>,
}

pub struct World {
    pub pool: TrainPool,
    pub eval: EvalSet,
    pub target_truth: TargetTruth,
}

pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let seed = cfg.data_seed;
    let mut source = Vec::with_capacity(cfg.train_size);
    let mut target = Vec::with_capacity(cfg.train_size);
    let mut truth = TargetTruth {
        day: Vec::with_capacity(cfg.train_size),
        night: Vec::with_capacity(cfg.train_size),
    };
    for i in 0..cfg.train_size as u64 {
        let label = generate_scene(&cfg.scene(sub_seed(seed, stream::SOURCE_SCENE, i)))?;
        let day = render_domain(&label, &cfg.source_style, None, sub_seed(seed, stream::SOURCE_RENDER, i))?;
        source.push((day, label));

        let t_label = generate_scene(&cfg.scene(sub_seed(seed, stream::TARGET_SCENE, i)))?;
        let shift = sample_parallax(sub_seed(seed, stream::PARALLAX, i), cfg.parallax_max);
        let (day, night, night_label) = render_target_pair(
            &t_label,
            &cfg.target_style,
            &cfg.night,
            sub_seed(seed, stream::TARGET_RENDER, i),
            shift,
        )?;
        target.push(TargetItem { day, night });
        truth.day.push(t_label);
        truth.night.push(night_label);
    }
    let nights: Vec<Image> = target.iter().map(|t| t.night.clone()).collect();
    let night_stats = lab_stats(&nights)?;
    let mut clamped = 0usize;
    let mut total = 0usize;
    let source = source
        .into_iter()
        .map(|(day, label)| {
            let m = lab_moment_match(&day, &night_stats)?;
            clamped += m.clamped;
            total += day.num_pixels();
            Ok(SourceItem {
                day,
                night: m.image,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut eval = EvalSet {
        images: Vec::with_capacity(cfg.eval_size),
        labels: Vec::with_capacity(cfg.eval_size),
    };
    for i in 0..cfg.eval_size as u64 {
        let label = generate_scene(&cfg.scene(sub_seed(seed, stream::EVAL_SCENE, i)))?;
        let shift = sample_parallax(sub_seed(seed, stream::EVAL_PARALLAX, i), cfg.parallax_max);
        let (_, night, night_label) = render_target_pair(
            &label,
            &cfg.target_style,
            &cfg.night,
            sub_seed(seed, stream::EVAL_RENDER, i),
            shift,
        )?;
        eval.images.push(night);
        eval.labels.push(night_label);
    }
    Ok(World {
        pool: TrainPool {
            source,
            target,
            night_stats,
            clamp_fraction: clamped as f64 / total.max(1) as f64,
            num_classes: cfg.num_classes as usize,
        },
        eval,
        target_truth: truth,
    })
}

impl TrainPool {
    /// Inverse-log-frequency weights over the source-day labels.
    pub fn class_weights(&self) -> ClassWeights {
        ClassWeights::inverse_log_frequency(self.source.iter().map(|s| &s.label), self.num_classes)
    }

    /// Source and target indices used at `iter`; a pure function of its
    /// arguments, so a resumed run sees the same batches.
    pub fn batch_indices(&self, seed: u64, iter: usize, batch: usize) -> Vec<(usize, usize)> {
        (0..batch)
            .map(|b| {
                let k = (iter * batch + b) as u64;
                let s = sub_seed(seed, stream::BATCH_SOURCE, k) % self.source.len() as u64;
                let t = sub_seed(seed, stream::BATCH_TARGET, k) % self.target.len() as u64;
                (s as usize, t as usize)
            })
            .collect()
    }

    /// Assembles a batch; with `lab_init` off the source-night slot holds
    /// the untranslated day image.
    pub fn batch(&self, indices: &[(usize, usize)], lab_init: bool) -> Result<QuadBatch> {
        let mut q = QuadBatch {
            s_d: Vec::with_capacity(indices.len()),
            s_n: Vec::with_capacity(indices.len()),
            t_d: Vec::with_capacity(indices.len()),
            t_n: Vec::with_capacity(indices.len()),
            parallax: Vec::new(),
        };
        for &(s, t) in indices {
            let src = &self.source[s];
            let tgt = &self.target[t];
            let night = if lab_init { &src.night } else { &src.day };
            q.s_d.push(DomainSample::new(src.day.clone(), Some(src.label.clone()), Domain::SourceDay)?);
            q.s_n.push(DomainSample::new(night.clone(), Some(src.label.clone()), Domain::SourceNight)?);
            q.t_d.push(DomainSample::new(tgt.day.clone(), None, Domain::TargetDay)?);
            q.t_n.push(DomainSample::new(tgt.night.clone(), None, Domain::TargetNight)?);
        }
        Ok(q)
    }
}
