//! Finite-difference verification of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_world, World};
use crate::error::{validation, Result};
use crate::image::LabelMap;
use crate::objective::ClassWeights;
use crate::segnet::Params;
use crate::synth::QuadBatch;
use crate::trainer::{evaluate_objective, ModelSet, TermWeights, TrainConfig};

pub const STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_COORDS: usize = 32;
/// Side length of the images used for the check.
pub const CHECK_SIZE: usize = 8;
/// Smallest denominator of the relative error.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Rounding error of one loss evaluation, in units of `ε·|f|`.
const NOISE_ULPS: f64 = 4.0;

/// Components checked, in report order; `total` is the full objective.
pub const COMPONENTS: [&str; 6] = ["seg_d", "seg_n", "pseudo", "cdc", "cds", "total"];

/// How many fresh coordinates to try when a perturbation crosses a ReLU kink.
const MAX_RESAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate.
    pub worst_tensor: String,
    pub coords_checked: usize,
    /// Coordinates skipped because `±h` flipped an activation.
    pub kinks_skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub n_coords: usize,
    pub step: f64,
    pub components: Vec<ComponentCheck>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, SCALE_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Absolute resolution of a central difference of a loss near `f`: both
/// evaluations are off by a few ulps, divided by `2h`.
pub fn difference_noise(f: f64, h: f64) -> f64 {
    NOISE_ULPS * f64::EPSILON * f.abs() / h
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Random models, a two-sample batch at `CHECK_SIZE` and a fixed pseudo map
/// per sample, so every component is a smooth function of the weights.
struct Fixture {
    cfg: TrainConfig,
    models: ModelSet,
    batch: QuadBatch,
    pseudo: Vec<LabelMap>,
}

fn fixture(cfg: &TrainConfig, seed: u64) -> Result<Fixture> {
    let mut cfg = cfg.clone();
    cfg.world.height = CHECK_SIZE;
    cfg.world.width = CHECK_SIZE;
    cfg.world.train_size = 2;
    cfg.world.eval_size = 1;
    cfg.world.parallax_max = 1;
    cfg.validate()?;
    let World { pool, target_truth, .. } = build_world(&cfg.world)?;
    let idx = [(0, 0), (1, 1)];
    let batch = pool.batch(&idx, !cfg.flags.no_lab_init)?;
    let pseudo = idx.iter().map(|&(_, t)| target_truth.night[t].clone()).collect();
    Ok(Fixture {
        models: ModelSet::init(cfg.net_config(), seed),
        cfg,
        batch,
        pseudo,
    })
}

/// Checks the gradient of every component against central differences.
pub fn grad_check(cfg: &TrainConfig, n_coords: usize, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(cfg, n_coords, tolerance, |_| {})
}

fn grad_check_with(
    cfg: &TrainConfig,
    n_coords: usize,
    tolerance: f64,
    tamper: impl Fn(&mut ModelSet),
) -> Result<GradCheckReport> {
    if n_coords == 0 || !(tolerance > 0.0) {
        return Err(validation("n_coords must be positive and tolerance > 0"));
    }
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let fx = fixture(cfg, seed)?;
    let weights = fx.batch.s_d.iter().map(|s| s.label().expect("source label"));
    let class_weights = ClassWeights::inverse_log_frequency(weights, fx.cfg.world.num_classes as usize);
    let mut components = Vec::new();
    for (ci, name) in COMPONENTS.iter().enumerate() {
        let tw = if *name == "total" {
            TermWeights::objective(&fx.cfg)
        } else {
            TermWeights::single(name)?
        };
        let eval = |m: &ModelSet, with_grad: bool| {
            evaluate_objective(m, &fx.batch, &fx.cfg, &class_weights, &tw, Some(&fx.pseudo), with_grad)
        };
        let base = eval(&fx.models, true)?;
        // Below this scale the difference quotient is rounding noise, so a
        // gradient there is judged by its absolute error against that noise.
        let floor = SCALE_FLOOR.max(difference_noise(base.objective, STEP) / tolerance);
        let mut grads = base.grads.expect("gradient requested");
        tamper(&mut grads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        let mut check = ComponentCheck {
            component: name.to_string(),
            max_rel_error: 0.0,
            worst_tensor: String::new(),
            coords_checked: 0,
            kinks_skipped: 0,
            passed: true,
        };
        let names: Vec<(String, usize)> =
            fx.models.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        let analytic = grads.tensors();
        for (ti, (tname, len)) in names.iter().enumerate() {
            let want = n_coords.min(*len);
            // Candidates in random order; kinks consume extra ones.
            let order = sample(&mut rng, *len, (want + MAX_RESAMPLES).min(*len));
            let mut done = 0;
            for j in order.iter() {
                if done == want {
                    break;
                }
                let mut plus = fx.models.clone();
                plus.tensors_mut()[ti].1[j] += STEP;
                let mut minus = fx.models.clone();
                minus.tensors_mut()[ti].1[j] -= STEP;
                let p = eval(&plus, false)?;
                let m = eval(&minus, false)?;
                if p.activation_pattern != base.activation_pattern
                    || m.activation_pattern != base.activation_pattern
                {
                    check.kinks_skipped += 1;
                    continue;
                }
                let numeric = (p.objective - m.objective) / (2.0 * STEP);
                let err = relative_error_floored(analytic[ti].1[j], numeric, floor);
                if err > check.max_rel_error || !err.is_finite() {
                    check.max_rel_error = err;
                    check.worst_tensor = tname.clone();
                }
                done += 1;
            }
            check.coords_checked += done;
        }
        check.passed = check.max_rel_error <= tolerance;
        components.push(check);
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        tolerance,
        n_coords,
        step: STEP,
        components,
        passed,
    })
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!(
                "{:<7} max rel err {:.3e}  coords {:>5}  kinks {:>3}  {}{}\n",
                c.component,
                c.max_rel_error,
                c.coords_checked,
                c.kinks_skipped,
                if c.passed { "ok" } else { "FAIL" },
                if c.passed { String::new() } else { format!(" (worst in {})", c.worst_tensor) },
            ));
        }
        out
    }
}
