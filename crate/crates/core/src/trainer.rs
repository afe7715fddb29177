//! Dual-model training: `M_d` sees source and target day, `M_n` sees source
//! and target night, and the two are tied together by the distillation
//! losses.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{EvalSet, TrainPool, WorldConfig};
use crate::distill::{l_cdc_with_grad, l_cds_with_grad, CdcOptions, Quad};
use crate::error::{validation, Error, Result};
use crate::eval::{predict, score, EvalScore};
use crate::image::{LabelMap, DEFAULT_IGNORE};
use crate::nn::{Conv, Maps};
use crate::objective::{
    static_pseudo_labels, total_loss, weighted_ce_with_grad, ClassWeights, LossComponents,
    StaticClassSet,
};
use crate::segnet::{
    normalize_columns, normalize_columns_backward, ContentEmbedding, FeatureMap, ForwardPass,
    HeadCache, HeadParams, Logits, NetConfig, NetParams, Params,
};
use crate::synth::{sub_seed, Domain, QuadBatch};

/// Each flag removes one term or path of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_cdc: bool,
    pub no_cds: bool,
    pub no_project_head: bool,
    pub no_ljs: bool,
    pub no_cor_illu: bool,
    pub no_cor_in: bool,
    pub no_lab_init: bool,
    pub stop_grad_source: bool,
    /// Train `M_n` on labelled source-day images only.
    pub source_only: bool,
}

/// The rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ours,
    NoCdc,
    NoProjectHead,
    NoLjs,
    NoIlluCorr,
    NoInherentCorr,
    NoCds,
    NoLabTrans,
    NoCdcCds,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Ours,
        Variant::NoCdc,
        Variant::NoProjectHead,
        Variant::NoLjs,
        Variant::NoIlluCorr,
        Variant::NoInherentCorr,
        Variant::NoCds,
        Variant::NoLabTrans,
        Variant::NoCdcCds,
        Variant::Baseline,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::NoCdc => "w/o CDC",
            Variant::NoProjectHead => "w/o project head",
            Variant::NoLjs => "w/o L_JS",
            Variant::NoIlluCorr => "w/o illu-corr",
            Variant::NoInherentCorr => "w/o inherent-corr",
            Variant::NoCds => "w/o CDS",
            Variant::NoLabTrans => "w/o LAB trans",
            Variant::NoCdcCds => "w/o CDC and CDS",
            Variant::Baseline => "baseline",
        }
    }

    /// Short identifier usable on the command line and in file names.
    pub fn id(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::NoCdc => "no_cdc",
            Variant::NoProjectHead => "no_project_head",
            Variant::NoLjs => "no_ljs",
            Variant::NoIlluCorr => "no_illu_corr",
            Variant::NoInherentCorr => "no_inherent_corr",
            Variant::NoCds => "no_cds",
            Variant::NoLabTrans => "no_lab_trans",
            Variant::NoCdcCds => "no_cdc_cds",
            Variant::Baseline => "baseline",
        }
    }

    /// Accepts either the id or the table label.
    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == name || v.label() == name)
            .ok_or_else(|| validation(format!("unknown variant {name:?}")))
    }

    pub fn flags(self) -> AblationFlags {
        let f = AblationFlags::default();
        match self {
            Variant::Ours => f,
            Variant::NoCdc => AblationFlags { no_cdc: true, ..f },
            Variant::NoProjectHead => AblationFlags { no_project_head: true, ..f },
            Variant::NoLjs => AblationFlags { no_ljs: true, ..f },
            Variant::NoIlluCorr => AblationFlags { no_cor_illu: true, ..f },
            Variant::NoInherentCorr => AblationFlags { no_cor_in: true, ..f },
            Variant::NoCds => AblationFlags { no_cds: true, ..f },
            Variant::NoLabTrans => AblationFlags { no_lab_init: true, ..f },
            Variant::NoCdcCds => AblationFlags {
                no_cdc: true,
                no_cds: true,
                ..f
            },
            Variant::Baseline => AblationFlags {
                no_cdc: true,
                no_cds: true,
                source_only: true,
                ..f
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub lambda_js: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub enc_channels: [usize; 3],
    pub dec_channels: [usize; 2],
    pub embed_dim: usize,
    pub head_hidden: usize,
    /// Confidence threshold for day-to-night pseudo labels.
    pub tau: f64,
    pub static_classes: Vec<u8>,
    pub seeds: Vec<u64>,
    /// Validation cadence in iterations; 0 scores only the final model.
    pub eval_every: usize,
    /// Source-only steps that produce the shared initial weights of both
    /// networks; 0 starts from random weights.
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    pub flags: AblationFlags,
    pub world: WorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::desk(8);
        Self {
            base_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            batch_size: 2,
            max_iters: 5000,
            lambda_js: 4.0,
            lambda1: 2.0,
            lambda2: 1.0,
            enc_channels: net.enc_channels,
            dec_channels: net.dec_channels,
            embed_dim: net.embed_dim,
            head_hidden: net.head_hidden,
            tau: 0.9,
            static_classes: vec![0, 1, 2, 3, 4],
            seeds: vec![0, 1, 2],
            eval_every: 500,
            pretrain_iters: 2000,
            pretrain_lr: 5e-3,
            flags: AblationFlags::default(),
            world: WorldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("base_lr", self.base_lr),
            ("poly_power", self.poly_power),
            ("pretrain_lr", self.pretrain_lr),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(validation(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(validation("momentum must be in [0, 1) and weight_decay >= 0"));
        }
        if self.max_iters == 0 || self.batch_size == 0 {
            return Err(validation("max_iters and batch_size must be at least 1"));
        }
        for (name, v) in [("lambda_js", self.lambda_js), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(validation(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(validation("tau must be in [0, 1]"));
        }
        if self.enc_channels.contains(&0) || self.dec_channels.contains(&0) || self.embed_dim == 0 || self.head_hidden == 0 {
            return Err(validation("layer widths must be positive"));
        }
        StaticClassSet::new(self.static_classes.clone(), self.world.num_classes as usize)?;
        self.world.validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            num_classes: self.world.num_classes as usize,
            enc_channels: self.enc_channels,
            dec_channels: self.dec_channels,
            embed_dim: self.embed_dim,
            head_hidden: self.head_hidden,
        }
    }

    pub fn with_variant(&self, v: Variant) -> TrainConfig {
        TrainConfig {
            flags: v.flags(),
            ..self.clone()
        }
    }

    pub fn cdc_options(&self) -> CdcOptions {
        CdcOptions {
            lambda_js: self.lambda_js,
            use_illu: !self.flags.no_cor_illu,
            use_inherent: !self.flags.no_cor_in,
            use_js: !self.flags.no_ljs,
            stop_grad_source: self.flags.stop_grad_source,
        }
    }
}

/// `base_lr · (1 − iter/max_iters)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iters {
        return Err(validation(format!(
            "iteration {iter} beyond max_iters {}",
            cfg.max_iters
        )));
    }
    if iter == 0 {
        return Ok(cfg.base_lr);
    }
    let frac = 1.0 - iter as f64 / cfg.max_iters as f64;
    Ok(cfg.base_lr * frac.powf(cfg.poly_power))
}

/// Both segmentation networks and their projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub m_d: NetParams,
    pub m_n: NetParams,
    pub head_d: HeadParams,
    pub head_n: HeadParams,
}

impl Params for ModelSet {
    fn convs(&self) -> Vec<(&'static str, &Conv)> {
        vec![
            ("m_d.enc1", &self.m_d.enc1),
            ("m_d.enc2", &self.m_d.enc2),
            ("m_d.enc3", &self.m_d.enc3),
            ("m_d.dec1", &self.m_d.dec1),
            ("m_d.dec2", &self.m_d.dec2),
            ("m_d.cls", &self.m_d.cls),
            ("m_n.enc1", &self.m_n.enc1),
            ("m_n.enc2", &self.m_n.enc2),
            ("m_n.enc3", &self.m_n.enc3),
            ("m_n.dec1", &self.m_n.dec1),
            ("m_n.dec2", &self.m_n.dec2),
            ("m_n.cls", &self.m_n.cls),
            ("head_d.head1", &self.head_d.conv1),
            ("head_d.head2", &self.head_d.conv2),
            ("head_n.head1", &self.head_n.conv1),
            ("head_n.head2", &self.head_n.conv2),
        ]
    }

    fn convs_mut(&mut self) -> Vec<(&'static str, &mut Conv)> {
        vec![
            ("m_d.enc1", &mut self.m_d.enc1),
            ("m_d.enc2", &mut self.m_d.enc2),
            ("m_d.enc3", &mut self.m_d.enc3),
            ("m_d.dec1", &mut self.m_d.dec1),
            ("m_d.dec2", &mut self.m_d.dec2),
            ("m_d.cls", &mut self.m_d.cls),
            ("m_n.enc1", &mut self.m_n.enc1),
            ("m_n.enc2", &mut self.m_n.enc2),
            ("m_n.enc3", &mut self.m_n.enc3),
            ("m_n.dec1", &mut self.m_n.dec1),
            ("m_n.dec2", &mut self.m_n.dec2),
            ("m_n.cls", &mut self.m_n.cls),
            ("head_d.head1", &mut self.head_d.conv1),
            ("head_d.head2", &mut self.head_d.conv2),
            ("head_n.head1", &mut self.head_n.conv1),
            ("head_n.head2", &mut self.head_n.conv2),
        ]
    }
}

mod init_stream {
    pub const NET: u64 = 20;
    pub const HEAD_D: u64 = 21;
    pub const HEAD_N: u64 = 22;
    pub const PRETRAIN: u64 = 23;
}

impl ModelSet {
    /// Both networks start from the same weights; the heads are independent.
    pub fn init(config: NetConfig, seed: u64) -> Self {
        let net = NetParams::init(config, sub_seed(seed, init_stream::NET, 0));
        Self {
            m_d: net.clone(),
            m_n: net,
            head_d: HeadParams::init(&config, sub_seed(seed, init_stream::HEAD_D, 0)),
            head_n: HeadParams::init(&config, sub_seed(seed, init_stream::HEAD_N, 0)),
        }
    }

    pub fn zeros(config: NetConfig) -> Self {
        let head = HeadParams::init(&config, 0).zeros_like();
        Self {
            m_d: NetParams::zeros(config),
            m_n: NetParams::zeros(config),
            head_d: head.clone(),
            head_n: head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            m_d: self.m_d.zeros_like(),
            m_n: self.m_n.zeros_like(),
            head_d: self.head_d.zeros_like(),
            head_n: self.head_n.zeros_like(),
        }
    }
}

/// `v ← μ·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step<P: Params>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_finite(grads)?;
    let grads = grads.tensors();
    for (((_, p), (_, v)), (_, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grads)
    {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Multipliers applied to each component in the scalar being
/// differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub seg_d: f64,
    pub seg_n: f64,
    pub pseudo: f64,
    pub cdc: f64,
    pub cds: f64,
}

impl TermWeights {
    /// The training objective: supervised and pseudo terms at 1, CDC at
    /// `λ1`, CDS at `λ2`.
    pub fn objective(cfg: &TrainConfig) -> Self {
        Self {
            seg_d: 1.0,
            seg_n: 1.0,
            pseudo: 1.0,
            cdc: cfg.lambda1,
            cds: cfg.lambda2,
        }
    }

    pub fn single(component: &str) -> Result<Self> {
        let z = Self {
            seg_d: 0.0,
            seg_n: 0.0,
            pseudo: 0.0,
            cdc: 0.0,
            cds: 0.0,
        };
        Ok(match component {
            "seg_d" => Self { seg_d: 1.0, ..z },
            "seg_n" => Self { seg_n: 1.0, ..z },
            "pseudo" => Self { pseudo: 1.0, ..z },
            "cdc" => Self { cdc: 1.0, ..z },
            "cds" => Self { cds: 1.0, ..z },
            other => return Err(validation(format!("unknown loss component {other:?}"))),
        })
    }

    pub fn combine(&self, c: &LossComponents) -> f64 {
        self.seg_d * c.seg_d + self.seg_n * c.seg_n + self.pseudo * c.pseudo + self.cdc * c.cdc + self.cds * c.cds
    }
}

/// Result of evaluating the objective on one batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub components: LossComponents,
    /// `TermWeights::combine` of the components.
    pub objective: f64,
    pub cdc_illu: f64,
    pub cdc_inherent: f64,
    pub cdc_js: f64,
    pub cds_cor_source: f64,
    pub cds_cor_target: f64,
    /// Fraction of target-night pixels carrying a pseudo label.
    pub pseudo_coverage: f64,
    pub degenerate: usize,
    pub pseudo_labels: Vec<LabelMap>,
    pub grads: Option<ModelSet>,
    /// ReLU on/off pattern of every activation, for kink detection.
    pub activation_pattern: Vec<bool>,
}

enum EmbedCache {
    Head(HeadCache),
    Norm(Maps, Vec<f64>),
}

fn embed(head: &HeadParams, f: &FeatureMap, use_head: bool) -> Result<(ContentEmbedding, EmbedCache)> {
    if use_head {
        let (e, c) = head.project_train(f)?;
        Ok((e, EmbedCache::Head(c)))
    } else {
        let (e, norms) = normalize_columns(&f.0);
        Ok((ContentEmbedding(e.clone()), EmbedCache::Norm(e, norms)))
    }
}

fn embed_backward(head: &HeadParams, cache: &EmbedCache, d_e: Maps, grads: &mut HeadParams) -> Result<Maps> {
    match cache {
        EmbedCache::Head(c) => Ok(head.backward(c, &ContentEmbedding(d_e), grads)?.0),
        EmbedCache::Norm(e, norms) => Ok(normalize_columns_backward(e, norms, &d_e)),
    }
}

fn add_opt(slot: &mut Option<Maps>, m: &Maps) {
    match slot {
        Some(s) => s.add_assign(m),
        None => *slot = Some(m.clone()),
    }
}

/// Evaluates the objective (and optionally its gradient) on a batch.
/// `fixed_pseudo` replaces the online pseudo labels, one map per sample.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    models: &ModelSet,
    batch: &QuadBatch,
    cfg: &TrainConfig,
    class_weights: &ClassWeights,
    weights: &TermWeights,
    fixed_pseudo: Option<&[LabelMap]>,
    with_grad: bool,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(validation("empty batch"));
    }
    if let Some(p) = fixed_pseudo {
        if p.len() != batch.len() {
            return Err(validation("one pseudo-label map per sample is required"));
        }
    }
    let flags = cfg.flags;
    let statics = StaticClassSet::new(cfg.static_classes.clone(), cfg.world.num_classes as usize)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut out = StepOutput {
        components: LossComponents::default(),
        objective: 0.0,
        cdc_illu: 0.0,
        cdc_inherent: 0.0,
        cdc_js: 0.0,
        cds_cor_source: 0.0,
        cds_cor_target: 0.0,
        pseudo_coverage: 0.0,
        degenerate: 0,
        pseudo_labels: Vec::new(),
        grads: with_grad.then(|| models.zeros_like()),
        activation_pattern: Vec::new(),
    };
    for b in 0..batch.len() {
        let label = batch.s_d[b]
            .label()
            .ok_or_else(|| validation("source sample without label"))?;
        if flags.source_only {
            let pass = models.m_n.forward_train(batch.s_d[b].image())?;
            out.activation_pattern.extend(pass.cache.activation_pattern());
            let (ce, g) = weighted_ce_with_grad(&pass.logits, label, class_weights)?;
            out.components.seg_n += ce.value * inv_b;
            if let Some(grads) = out.grads.as_mut() {
                let d = Logits(g.0.scaled(weights.seg_n * inv_b));
                models.m_n.backward(&pass.cache, Some(&d), None, &mut grads.m_n)?;
            }
            continue;
        }
        let passes: Quad<ForwardPass> = Quad {
            s_d: models.m_d.forward_train(batch.s_d[b].image())?,
            s_n: models.m_n.forward_train(batch.s_n[b].image())?,
            t_d: models.m_d.forward_train(batch.t_d[b].image())?,
            t_n: models.m_n.forward_train(batch.t_n[b].image())?,
        };
        for d in Domain::ALL {
            out.activation_pattern.extend(passes.get(d).cache.activation_pattern());
        }
        let sn_label = batch.s_n[b].label().unwrap_or(label);
        let (ce_d, g_sd) = weighted_ce_with_grad(&passes.s_d.logits, label, class_weights)?;
        let (ce_n, g_sn) = weighted_ce_with_grad(&passes.s_n.logits, sn_label, class_weights)?;
        let pseudo = match fixed_pseudo {
            Some(p) => p[b].clone(),
            None => static_pseudo_labels(&passes.t_d.logits, &statics, cfg.tau, DEFAULT_IGNORE)?,
        };
        let (ce_p, g_tn) = weighted_ce_with_grad(&passes.t_n.logits, &pseudo, class_weights)?;
        out.components.seg_d += ce_d.value * inv_b;
        out.components.seg_n += ce_n.value * inv_b;
        out.components.pseudo += ce_p.value * inv_b;
        out.pseudo_coverage += ce_p.counted as f64 / pseudo.classes().len() as f64 * inv_b;
        out.pseudo_labels.push(pseudo);

        let mut d_feat: Quad<Option<Maps>> = Quad::from_fn(|_| None);
        if !flags.no_cdc {
            let use_head = !flags.no_project_head;
            let heads = Quad {
                s_d: &models.head_d,
                s_n: &models.head_n,
                t_d: &models.head_d,
                t_n: &models.head_n,
            };
            let mut embs = Vec::with_capacity(4);
            for d in Domain::ALL {
                let (e, c) = embed(heads.get(d), &passes.get(d).feature, use_head)?;
                if let EmbedCache::Head(hc) = &c {
                    out.activation_pattern.extend(hc.activation_pattern());
                }
                embs.push((e, c));
            }
            let e = Quad::from_fn(|d| &embs[d.index()].0);
            let (terms, ge) = l_cdc_with_grad(&e, &cfg.cdc_options())?;
            out.components.cdc += terms.total() * inv_b;
            out.cdc_illu += terms.illu * inv_b;
            out.cdc_inherent += terms.inherent * inv_b;
            out.cdc_js += terms.js * inv_b;
            out.degenerate += terms.degenerate;
            if let Some(grads) = out.grads.as_mut() {
                if weights.cdc != 0.0 {
                    for d in Domain::ALL {
                        let head_grads = if d.is_night() { &mut grads.head_n } else { &mut grads.head_d };
                        let df = embed_backward(
                            heads.get(d),
                            &embs[d.index()].1,
                            ge.get(d).scaled(weights.cdc * inv_b),
                            head_grads,
                        )?;
                        add_opt(d_feat.get_mut(d), &df);
                    }
                }
            }
        }
        if !flags.no_cds {
            let f = Quad::from_fn(|d| &passes.get(d).feature);
            let (terms, gf) = l_cds_with_grad(&f)?;
            out.components.cds += terms.value * inv_b;
            out.cds_cor_source += terms.cor_source * inv_b;
            out.cds_cor_target += terms.cor_target * inv_b;
            out.degenerate += terms.degenerate;
            if out.grads.is_some() && weights.cds != 0.0 {
                for d in Domain::ALL {
                    add_opt(d_feat.get_mut(d), &gf.get(d).scaled(weights.cds * inv_b));
                }
            }
        }
        if let Some(grads) = out.grads.as_mut() {
            let dl_sd = (weights.seg_d != 0.0).then(|| Logits(g_sd.0.scaled(weights.seg_d * inv_b)));
            let dl_sn = (weights.seg_n != 0.0).then(|| Logits(g_sn.0.scaled(weights.seg_n * inv_b)));
            let dl_tn = (weights.pseudo != 0.0).then(|| Logits(g_tn.0.scaled(weights.pseudo * inv_b)));
            let dl = Quad {
                s_d: dl_sd,
                s_n: dl_sn,
                t_d: None,
                t_n: dl_tn,
            };
            for d in Domain::ALL {
                let logits_grad = dl.get(d).as_ref();
                let feat_grad = d_feat.get(d).as_ref().map(|m| FeatureMap(m.clone()));
                if logits_grad.is_none() && feat_grad.is_none() {
                    continue;
                }
                let (net, net_grads) = if d.is_night() {
                    (&models.m_n, &mut grads.m_n)
                } else {
                    (&models.m_d, &mut grads.m_d)
                };
                net.backward(&passes.get(d).cache, logits_grad, feat_grad.as_ref(), net_grads)?;
            }
        }
    }
    out.objective = weights.combine(&out.components);
    Ok(out)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub lr: f64,
    pub seg_n: f64,
    pub seg_d: f64,
    pub pseudo: f64,
    pub cdc: f64,
    pub cds: f64,
    pub total: f64,
    pub cdc_illu: f64,
    pub cdc_inherent: f64,
    pub cdc_js: f64,
    pub pseudo_coverage: f64,
    #[serde(default)]
    pub val_miou: Option<f64>,
    pub wall_s: f64,
}

impl MetricRecord {
    /// Bitwise equality of everything except wall time.
    pub fn same_values(&self, other: &MetricRecord) -> bool {
        let a = self.value_bits();
        let b = other.value_bits();
        self.iter == other.iter && a == b
    }

    fn value_bits(&self) -> Vec<u64> {
        let mut v: Vec<u64> = [
            self.lr,
            self.seg_n,
            self.seg_d,
            self.pseudo,
            self.cdc,
            self.cds,
            self.total,
            self.cdc_illu,
            self.cdc_inherent,
            self.cdc_js,
            self.pseudo_coverage,
        ]
        .iter()
        .map(|x| x.to_bits())
        .collect();
        v.push(self.val_miou.map_or(u64::MAX, f64::to_bits));
        v
    }
}

/// Everything needed to continue a run. Batch selection is a pure function
/// of `(seed, iter)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed optimizer steps.
    pub iter: usize,
    pub seed: u64,
    pub models: ModelSet,
    pub velocity: ModelSet,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    /// Fresh state from random weights.
    pub fn new(cfg: &TrainConfig, seed: u64) -> Self {
        Self::with_models(ModelSet::init(cfg.net_config(), seed), seed)
    }

    /// Both networks start from `net`; heads are freshly initialised.
    pub fn from_pretrained(cfg: &TrainConfig, seed: u64, net: &NetParams) -> Self {
        let mut models = ModelSet::init(cfg.net_config(), seed);
        models.m_d = net.clone();
        models.m_n = net.clone();
        Self::with_models(models, seed)
    }

    fn with_models(models: ModelSet, seed: u64) -> Self {
        let velocity = models.zeros_like();
        Self {
            iter: 0,
            seed,
            models,
            velocity,
            history: Vec::new(),
        }
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Held-out night split for periodic validation of `M_n`.
    pub eval: Option<&'a EvalSet>,
    pub metrics: Option<&'a mut dyn Write>,
    /// Periodic and pre-divergence checkpoints are written here.
    pub checkpoint_dir: Option<PathBuf>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Stop after this many completed steps instead of `max_iters`.
    pub until: Option<usize>,
}

/// Source-only training of a single network on labelled day images, with
/// its own learning rate and step count.
pub fn pretrain_source(cfg: &TrainConfig, pool: &TrainPool, seed: u64) -> Result<NetParams> {
    let pre = TrainConfig {
        base_lr: cfg.pretrain_lr,
        max_iters: cfg.pretrain_iters.max(1),
        eval_every: 0,
        flags: AblationFlags {
            source_only: true,
            no_cdc: true,
            no_cds: true,
            ..AblationFlags::default()
        },
        ..cfg.clone()
    };
    let mut state = TrainState::new(&pre, sub_seed(seed, init_stream::PRETRAIN, 0));
    if cfg.pretrain_iters > 0 {
        train(&pre, pool, &mut state, TrainOptions::default())?;
    }
    Ok(state.models.m_n)
}

/// Initial state of a run: pretrained when `pretrain_iters > 0`.
pub fn initial_state(cfg: &TrainConfig, pool: &TrainPool, seed: u64) -> Result<TrainState> {
    if cfg.pretrain_iters == 0 {
        return Ok(TrainState::new(cfg, seed));
    }
    let net = pretrain_source(cfg, pool, seed)?;
    Ok(TrainState::from_pretrained(cfg, seed, &net))
}

/// Night-model mIoU on the held-out split.
pub fn evaluate_night_model(net: &NetParams, eval: &EvalSet) -> Result<EvalScore> {
    let preds = eval
        .images
        .iter()
        .map(|img| predict(&net.forward(img)?.0, DEFAULT_IGNORE))
        .collect::<Result<Vec<_>>>()?;
    score(preds.iter().zip(&eval.labels), net.config.num_classes)
}

/// Runs optimizer steps from `state.iter` up to `max_iters` (or `until`).
pub fn train(
    cfg: &TrainConfig,
    pool: &TrainPool,
    state: &mut TrainState,
    mut opts: TrainOptions<'_>,
) -> Result<()> {
    cfg.validate()?;
    if pool.num_classes != cfg.world.num_classes as usize {
        return Err(validation("pool and config disagree on num_classes"));
    }
    let class_weights = pool.class_weights();
    let weights = TermWeights::objective(cfg);
    let stop = opts.until.unwrap_or(cfg.max_iters).min(cfg.max_iters);
    let start = Instant::now();
    while state.iter < stop {
        let iter = state.iter;
        let lr = poly_lr(iter, cfg)?;
        let idx = pool.batch_indices(state.seed, iter, cfg.batch_size);
        let batch = pool.batch(&idx, !cfg.flags.no_lab_init)?;
        let out = evaluate_objective(&state.models, &batch, cfg, &class_weights, &weights, None, true)?;
        let grads = out.grads.as_ref().expect("gradients requested");
        let checked = total_loss(&out.components, cfg.lambda1, cfg.lambda2).and_then(|total| {
            check_finite(grads)?;
            Ok(total)
        });
        let total = match checked {
            Ok(t) => t,
            Err(Error::NonFinite { component, .. }) => {
                if let Some(dir) = &opts.checkpoint_dir {
                    checkpoint::save(&dir.join("pre_nan"), state)?;
                }
                return Err(Error::NonFinite { component, iter });
            }
            Err(e) => return Err(e),
        };
        sgd_step(
            &mut state.models,
            grads,
            &mut state.velocity,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        state.iter += 1;
        let validate_now = cfg.eval_every > 0 && state.iter % cfg.eval_every == 0 || state.iter == cfg.max_iters;
        let val_miou = match (opts.eval, validate_now) {
            (Some(e), true) => Some(evaluate_night_model(&state.models.m_n, e)?.miou),
            _ => None,
        };
        let c = out.components;
        let record = MetricRecord {
            iter,
            lr,
            seg_n: c.seg_n,
            seg_d: c.seg_d,
            pseudo: c.pseudo,
            cdc: c.cdc,
            cds: c.cds,
            total,
            cdc_illu: out.cdc_illu,
            cdc_inherent: out.cdc_inherent,
            cdc_js: out.cdc_js,
            pseudo_coverage: out.pseudo_coverage,
            val_miou,
            wall_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = opts.metrics.as_mut() {
            serde_json::to_writer(&mut **w, &record)?;
            w.write_all(b"\n")?;
        }
        state.history.push(record);
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && state.iter % opts.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("iter_{:06}", state.iter)), state)?;
            }
        }
    }
    Ok(())
}

fn check_finite<P: Params>(grads: &P) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: format!("gradient of {name}"),
                iter: 0,
            });
        }
    }
    Ok(())
}
