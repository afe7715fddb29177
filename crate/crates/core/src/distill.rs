//! Cross-domain content and style correlation losses.
//!
//! Every similarity compares two domains that differ in exactly one shift
//! (illumination or dataset). The pairings are declared once in the tables
//! below and the loss assembly iterates over them, so the tables are the
//! complete list of what feeds a similarity.
//!
//! Each loss has a value-only form and a `*_with_grad` form returning the
//! gradient with respect to the four inputs.

use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Result};
use crate::nn::Maps;
use crate::segnet::{ContentEmbedding, FeatureMap};
use crate::synth::Domain;

/// Guard inside the logarithms of the JS divergence.
pub const JS_EPS: f64 = 1e-12;
/// Norms below this make a cosine degenerate (value 0, no gradient).
pub const COS_EPS: f64 = 1e-12;

use Domain::{SourceDay as SD, SourceNight as SN, TargetDay as TD, TargetNight as TN};

/// Same content, different illumination: pulled together by the JS term.
pub const JS_PULL_PAIRS: [(Domain, Domain); 2] = [(SD, SN), (TD, TN)];
/// Same illumination, different dataset: pushed apart by the reverse JS term.
pub const JS_PUSH_PAIRS: [(Domain, Domain); 2] = [(SD, TD), (SN, TN)];
/// Illumination correlation; the first (source) pair guides the second.
pub const ILLU_PAIRS: [(Domain, Domain); 2] = [(SD, SN), (TD, TN)];
/// Inherent (dataset) correlation; the day pair guides the night pair.
pub const INHERENT_PAIRS: [(Domain, Domain); 2] = [(SD, TD), (SN, TN)];
/// Gram-matrix style correlation within each dataset.
pub const STYLE_PAIRS: [(Domain, Domain); 2] = [(SD, SN), (TD, TN)];

/// Every domain pair that enters any similarity or divergence.
pub fn similarity_pairs() -> Vec<(Domain, Domain)> {
    JS_PULL_PAIRS
        .iter()
        .chain(&JS_PUSH_PAIRS)
        .chain(&ILLU_PAIRS)
        .chain(&INHERENT_PAIRS)
        .chain(&STYLE_PAIRS)
        .copied()
        .collect()
}

/// One value per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Quad<T> {
    pub s_d: T,
    pub s_n: T,
    pub t_d: T,
    pub t_n: T,
}

impl<T> Quad<T> {
    pub fn from_fn(mut f: impl FnMut(Domain) -> T) -> Self {
        Quad {
            s_d: f(SD),
            s_n: f(SN),
            t_d: f(TD),
            t_n: f(TN),
        }
    }

    pub fn get(&self, d: Domain) -> &T {
        match d {
            SD => &self.s_d,
            SN => &self.s_n,
            TD => &self.t_d,
            TN => &self.t_n,
        }
    }

    pub fn get_mut(&mut self, d: Domain) -> &mut T {
        match d {
            SD => &mut self.s_d,
            SN => &mut self.s_n,
            TD => &mut self.t_d,
            TN => &mut self.t_n,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Quad<U> {
        Quad::from_fn(|d| f(self.get(d)))
    }

    pub fn as_ref(&self) -> Quad<&T> {
        Quad {
            s_d: &self.s_d,
            s_n: &self.s_n,
            t_d: &self.t_d,
            t_n: &self.t_n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub lambda_js: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            lambda_js: 4.0,
            lambda1: 2.0,
            lambda2: 1.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.lambda_js, self.lambda1, self.lambda2] {
            if !v.is_finite() || v < 0.0 {
                return Err(validation("distillation weights must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Softmax over the channel dimension at every spatial position.
pub fn channel_softmax(e: &ContentEmbedding) -> Maps {
    let m = &e.0;
    let n = m.plane_len();
    let mut out = Maps::zeros(m.channels, m.height, m.width);
    for p in 0..n {
        let max = (0..m.channels)
            .map(|c| m.data[c * n + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..m.channels {
            let v = (m.data[c * n + p] - max).exp();
            out.data[c * n + p] = v;
            sum += v;
        }
        for c in 0..m.channels {
            out.data[c * n + p] /= sum;
        }
    }
    out
}

fn softmax_backward(p: &Maps, d_p: &Maps) -> Maps {
    let n = p.plane_len();
    let mut dot = vec![0.0; n];
    for (pp, gp) in p.data.chunks(n).zip(d_p.data.chunks(n)) {
        for ((d, pv), gv) in dot.iter_mut().zip(pp).zip(gp) {
            *d += pv * gv;
        }
    }
    let mut out = Maps::zeros(p.channels, p.height, p.width);
    for ((o, pp), gp) in out.data.chunks_mut(n).zip(p.data.chunks(n)).zip(d_p.data.chunks(n)) {
        for (((o, pv), gv), d) in o.iter_mut().zip(pp).zip(gp).zip(&dot) {
            *o = pv * (gv - d);
        }
    }
    out
}

fn check_same(a: &Maps, b: &Maps, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )))
    }
}

/// Mean over positions of the Jensen–Shannon divergence between per-position
/// distributions (natural log).
pub fn js_divergence(p: &Maps, q: &Maps) -> Result<f64> {
    Ok(js_with_grad(p, q)?.0)
}

/// JS value and its gradients with respect to the two probability maps.
pub fn js_with_grad(p: &Maps, q: &Maps) -> Result<(f64, Maps, Maps)> {
    check_same(p, q, "js_divergence")?;
    js_from_logs(p, q, &log_eps(p), &log_eps(q))
}

/// `ln(x + ε)` elementwise.
fn log_eps(p: &Maps) -> Vec<f64> {
    p.data.iter().map(|a| (a + JS_EPS).ln()).collect()
}

fn js_from_logs(p: &Maps, q: &Maps, lp: &[f64], lq: &[f64]) -> Result<(f64, Maps, Maps)> {
    let positions = p.plane_len() as f64;
    let half_inv = 0.5 / positions;
    let mut total = 0.0;
    let mut d_p = Maps::zeros(p.channels, p.height, p.width);
    let mut d_q = d_p.clone();
    for i in 0..p.data.len() {
        let (a, b) = (p.data[i], q.data[i]);
        let (la, lb) = (lp[i], lq[i]);
        let m = 0.5 * (a + b);
        let lm = (m + JS_EPS).ln();
        total += a * (la - lm) + b * (lb - lm);
        // d/dx [x ln(x+ε)] = ln(x+ε) + 1 − ε/(x+ε)
        let common = lm - JS_EPS / (m + JS_EPS);
        d_p.data[i] = half_inv * (la - JS_EPS / (a + JS_EPS) - common);
        d_q.data[i] = half_inv * (lb - JS_EPS / (b + JS_EPS) - common);
    }
    Ok(((0.5 * total / positions).max(0.0), d_p, d_q))
}

fn check_quad(e: &Quad<&Maps>, what: &str) -> Result<()> {
    for d in Domain::ALL {
        check_same(e.s_d, e.get(d), what)?;
    }
    Ok(())
}

/// `λ·(JS(S_d,S_n) + JS(T_d,T_n)) − (JS(S_d,T_d) + JS(S_n,T_n))` on channel softmaxes.
pub fn l_js(e: &Quad<&ContentEmbedding>, lambda_js: f64) -> Result<f64> {
    Ok(l_js_with_grad(e, lambda_js)?.0)
}

pub fn l_js_with_grad(e: &Quad<&ContentEmbedding>, lambda_js: f64) -> Result<(f64, Quad<Maps>)> {
    check_quad(&e.map(|x| &x.0), "l_js")?;
    let probs = e.map(|x| channel_softmax(x));
    let logs = probs.map(log_eps);
    let mut d_probs = probs.map(|p| Maps::zeros(p.channels, p.height, p.width));
    let mut value = 0.0;
    let terms = JS_PULL_PAIRS
        .iter()
        .map(|&p| (p, lambda_js))
        .chain(JS_PUSH_PAIRS.iter().map(|&p| (p, -1.0)));
    for ((a, b), weight) in terms {
        let (v, da, db) = js_from_logs(probs.get(a), probs.get(b), logs.get(a), logs.get(b))?;
        value += weight * v;
        d_probs.get_mut(a).add_assign(&da.scaled(weight));
        d_probs.get_mut(b).add_assign(&db.scaled(weight));
    }
    let grads = Quad::from_fn(|d| softmax_backward(probs.get(d), d_probs.get(d)));
    Ok((value, grads))
}

/// Per-position cosine similarities between two embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Positions where either column was (numerically) zero.
    pub degenerate: usize,
}

fn cosine_columns(a: &Maps, b: &Maps, with_grad: bool) -> (CorrelationMap, Option<(Maps, Maps)>) {
    let n = a.plane_len();
    let mut dot = vec![0.0; n];
    let mut na = vec![0.0; n];
    let mut nb = vec![0.0; n];
    for c in 0..a.channels {
        for p in 0..n {
            let (x, y) = (a.data[c * n + p], b.data[c * n + p]);
            dot[p] += x * y;
            na[p] += x * x;
            nb[p] += y * y;
        }
    }
    let mut values = vec![0.0; n];
    let mut degenerate = 0;
    let mut inv = vec![None; n];
    for p in 0..n {
        let (ra, rb) = (na[p].sqrt(), nb[p].sqrt());
        if ra < COS_EPS || rb < COS_EPS {
            degenerate += 1;
            continue;
        }
        values[p] = dot[p] / (ra * rb);
        inv[p] = Some((ra, rb));
    }
    let grads = with_grad.then(|| {
        // per position: 1/(|a||b|), cos/|a|², cos/|b|²
        let coef: Vec<(f64, f64, f64)> = (0..n)
            .map(|p| match inv[p] {
                Some((ra, rb)) => (1.0 / (ra * rb), values[p] / (ra * ra), values[p] / (rb * rb)),
                None => (0.0, 0.0, 0.0),
            })
            .collect();
        let mut ga = Maps::zeros(a.channels, a.height, a.width);
        let mut gb = ga.clone();
        for c in 0..a.channels {
            let range = c * n..(c + 1) * n;
            let (pa, pb) = (&a.data[range.clone()], &b.data[range.clone()]);
            let (oa, ob) = (&mut ga.data[range.clone()], &mut gb.data[range]);
            for p in 0..n {
                let (k, ka, kb) = coef[p];
                oa[p] = pb[p] * k - ka * pa[p];
                ob[p] = pa[p] * k - kb * pb[p];
            }
        }
        (ga, gb)
    });
    (
        CorrelationMap {
            height: a.height,
            width: a.width,
            values,
            degenerate,
        },
        grads,
    )
}

pub fn cosine_map(a: &ContentEmbedding, b: &ContentEmbedding) -> Result<CorrelationMap> {
    check_same(&a.0, &b.0, "cosine_map")?;
    Ok(cosine_columns(&a.0, &b.0, false).0)
}

/// Content correlation within a dataset across illumination (`k ∈ {S, T}`).
pub fn cor_illu(e_kd: &ContentEmbedding, e_kn: &ContentEmbedding) -> Result<CorrelationMap> {
    cosine_map(e_kd, e_kn)
}

/// Content correlation across datasets under one illumination (`r ∈ {d, n}`).
pub fn cor_in(e_sr: &ContentEmbedding, e_tr: &ContentEmbedding) -> Result<CorrelationMap> {
    cosine_map(e_sr, e_tr)
}

/// Which parts of the content distillation loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdcOptions {
    pub lambda_js: f64,
    pub use_illu: bool,
    pub use_inherent: bool,
    pub use_js: bool,
    /// Detach the guiding correlations (`Cor_illu_S`, `Cor_in_d`).
    pub stop_grad_source: bool,
}

impl CdcOptions {
    pub fn full(lambda_js: f64) -> Self {
        Self {
            lambda_js,
            use_illu: true,
            use_inherent: true,
            use_js: true,
            stop_grad_source: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CdcTerms {
    pub illu: f64,
    pub inherent: f64,
    pub js: f64,
    pub degenerate: usize,
}

impl CdcTerms {
    pub fn total(&self) -> f64 {
        self.illu + self.inherent + self.js
    }
}

/// Content distillation loss with all terms active.
pub fn l_cdc(e: &Quad<&ContentEmbedding>, lambda_js: f64) -> Result<f64> {
    Ok(l_cdc_with_grad(e, &CdcOptions::full(lambda_js))?.0.total())
}

/// Mean squared difference between a guiding correlation map and a guided
/// one, with gradients into the four embeddings involved.
fn correlation_gap(
    e: &Quad<&Maps>,
    pairs: &[(Domain, Domain); 2],
    detach_guide: bool,
    grads: &mut Quad<Maps>,
) -> (f64, usize) {
    let (ga, gb) = pairs[0];
    let (fa, fb) = pairs[1];
    let (guide, guide_grad) = cosine_columns(e.get(ga), e.get(gb), true);
    let (follow, follow_grad) = cosine_columns(e.get(fa), e.get(fb), true);
    let n = guide.values.len() as f64;
    let mut value = 0.0;
    let mut diff = vec![0.0; guide.values.len()];
    for (p, (g, f)) in guide.values.iter().zip(&follow.values).enumerate() {
        value += (g - f).powi(2) / n;
        diff[p] = 2.0 * (g - f) / n;
    }
    let scale = |m: &Maps, sign: f64| -> Maps {
        let mut out = m.clone();
        for plane in out.data.chunks_mut(m.plane_len()) {
            for (v, d) in plane.iter_mut().zip(&diff) {
                *v *= sign * d;
            }
        }
        out
    };
    let (dga, dgb) = guide_grad.expect("requested");
    let (dfa, dfb) = follow_grad.expect("requested");
    if !detach_guide {
        grads.get_mut(ga).add_assign(&scale(&dga, 1.0));
        grads.get_mut(gb).add_assign(&scale(&dgb, 1.0));
    }
    grads.get_mut(fa).add_assign(&scale(&dfa, -1.0));
    grads.get_mut(fb).add_assign(&scale(&dfb, -1.0));
    (value, guide.degenerate + follow.degenerate)
}

pub fn l_cdc_with_grad(e: &Quad<&ContentEmbedding>, opts: &CdcOptions) -> Result<(CdcTerms, Quad<Maps>)> {
    let maps = e.map(|x| &x.0);
    check_quad(&maps, "l_cdc")?;
    let mut grads = maps.map(|m| Maps::zeros(m.channels, m.height, m.width));
    let mut terms = CdcTerms::default();
    if opts.use_illu {
        let (v, deg) = correlation_gap(&maps, &ILLU_PAIRS, opts.stop_grad_source, &mut grads);
        terms.illu = v;
        terms.degenerate += deg;
    }
    if opts.use_inherent {
        let (v, deg) = correlation_gap(&maps, &INHERENT_PAIRS, opts.stop_grad_source, &mut grads);
        terms.inherent = v;
        terms.degenerate += deg;
    }
    if opts.use_js {
        let (v, g) = l_js_with_grad(e, opts.lambda_js)?;
        terms.js = v;
        for d in Domain::ALL {
            grads.get_mut(d).add_assign(g.get(d));
        }
    }
    Ok((terms, grads))
}

/// Channel Gram matrix, normalised by `C·H'·W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub channels: usize,
    pub values: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.channels + j]
    }
}

/// `Σ_p F[i][p]·F[j][p]` without normalisation.
pub fn gram_unnormalized(f: &FeatureMap) -> GramMatrix {
    let m = &f.0;
    let c = m.channels;
    let mut values = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let v: f64 = m.plane(i).iter().zip(m.plane(j)).map(|(a, b)| a * b).sum();
            values[i * c + j] = v;
            values[j * c + i] = v;
        }
    }
    GramMatrix { channels: c, values }
}

pub fn gram(f: &FeatureMap) -> GramMatrix {
    let mut g = gram_unnormalized(f);
    let scale = 1.0 / (f.0.channels * f.0.plane_len()) as f64;
    for v in &mut g.values {
        *v *= scale;
    }
    g
}

/// Gradient of a scalar through [`gram`]: `dF = (dG + dGᵀ)·F / (C·P)`.
fn gram_backward(f: &Maps, d_g: &[f64]) -> Maps {
    let c = f.channels;
    let n = f.plane_len();
    let scale = 1.0 / (c * n) as f64;
    let mut out = Maps::zeros(c, f.height, f.width);
    for i in 0..c {
        for j in 0..c {
            let k = (d_g[i * c + j] + d_g[j * c + i]) * scale;
            if k == 0.0 {
                continue;
            }
            let src = f.plane(j);
            for (o, v) in out.data[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += k * v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine similarity of two flattened Gram matrices.
pub fn cor_gram(a: &GramMatrix, b: &GramMatrix) -> Result<Cosine> {
    Ok(cor_gram_with_grad(a, b)?.0)
}

fn cor_gram_with_grad(a: &GramMatrix, b: &GramMatrix) -> Result<(Cosine, Vec<f64>, Vec<f64>)> {
    if a.channels != b.channels {
        return Err(shape(format!(
            "gram matrices of size {} and {}",
            a.channels, b.channels
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COS_EPS || nb < COS_EPS {
        let z = vec![0.0; a.values.len()];
        return Ok((
            Cosine {
                value: 0.0,
                degenerate: true,
            },
            z.clone(),
            z,
        ));
    }
    let c = dot / (na * nb);
    let ga = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let gb = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    Ok((
        Cosine {
            value: c,
            degenerate: false,
        },
        ga,
        gb,
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CdsTerms {
    pub value: f64,
    pub cor_source: f64,
    pub cor_target: f64,
    pub degenerate: usize,
}

/// `(Cor_G_S − Cor_G_T)²` over within-dataset day/night Gram pairs.
pub fn l_cds(f: &Quad<&FeatureMap>) -> Result<f64> {
    Ok(l_cds_with_grad(f)?.0.value)
}

pub fn l_cds_with_grad(f: &Quad<&FeatureMap>) -> Result<(CdsTerms, Quad<Maps>)> {
    let maps = f.map(|x| &x.0);
    for d in Domain::ALL {
        if maps.get(d).channels != maps.s_d.channels {
            return Err(shape("l_cds: feature channel counts differ"));
        }
    }
    let grams = f.map(|x| gram(x));
    let [(sa, sb), (ta, tb)] = STYLE_PAIRS;
    let (cs, dsa, dsb) = cor_gram_with_grad(grams.get(sa), grams.get(sb))?;
    let (ct, dta, dtb) = cor_gram_with_grad(grams.get(ta), grams.get(tb))?;
    let diff = cs.value - ct.value;
    let k = 2.0 * diff;
    let mut grads = maps.map(|m| Maps::zeros(m.channels, m.height, m.width));
    for (d, dg, sign) in [(sa, &dsa, k), (sb, &dsb, k), (ta, &dta, -k), (tb, &dtb, -k)] {
        let scaled: Vec<f64> = dg.iter().map(|v| v * sign).collect();
        grads.get_mut(d).add_assign(&gram_backward(maps.get(d), &scaled));
    }
    Ok((
        CdsTerms {
            value: diff * diff,
            cor_source: cs.value,
            cor_target: ct.value,
            degenerate: usize::from(cs.degenerate) + usize::from(ct.degenerate),
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn emb(c: usize, h: usize, w: usize, data: Vec<f64>) -> ContentEmbedding {
        ContentEmbedding(Maps::from_vec(c, h, w, data))
    }

    fn random_maps(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Maps {
        Maps::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn quad_of<T: Clone>(items: [T; 4]) -> Quad<T> {
        let [s_d, s_n, t_d, t_n] = items;
        Quad { s_d, s_n, t_d, t_n }
    }

    /// Direct KL-based JS for one pair of discrete distributions.
    fn js_reference(p: &[f64], q: &[f64]) -> f64 {
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .filter(|(x, _)| **x > 0.0)
                .map(|(x, y)| x * (x / y).ln())
                .sum()
        };
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
        0.5 * kl(p, &m) + 0.5 * kl(q, &m)
    }

    #[test]
    fn softmax_cases() {
        let s = channel_softmax(&emb(3, 1, 1, vec![0.7, 0.7, 0.7]));
        assert!(s.data.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = channel_softmax(&emb(2, 1, 1, vec![LN2, 0.0]));
        assert!((s.data[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = channel_softmax(&emb(2, 1, 2, vec![0.3, -1.0, 2.0, 0.5]));
        let b = channel_softmax(&emb(2, 1, 2, vec![5.3, 4.0, 7.0, 5.5]));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn js_closed_forms() {
        let p = Maps::from_vec(2, 1, 1, vec![1.0, 0.0]);
        let q = Maps::from_vec(2, 1, 1, vec![0.0, 1.0]);
        assert!((js_divergence(&p, &q).unwrap() - LN2).abs() < 1e-9);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!(js_divergence(&p, &Maps::zeros(2, 1, 2)).is_err());
    }

    #[test]
    fn js_matches_reference_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = channel_softmax(&ContentEmbedding(random_maps(5, 2, 3, &mut rng)));
            let q = channel_softmax(&ContentEmbedding(random_maps(5, 2, 3, &mut rng)));
            let expected: f64 = (0..6)
                .map(|i| js_reference(&p.column(i), &q.column(i)))
                .sum::<f64>()
                / 6.0;
            let a = js_divergence(&p, &q).unwrap();
            assert!((a - expected).abs() < 1e-10);
            assert_eq!(a, js_divergence(&q, &p).unwrap());
        }
    }

    #[test]
    fn l_js_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e: Vec<ContentEmbedding> =
            (0..4).map(|_| ContentEmbedding(random_maps(4, 2, 2, &mut rng))).collect();
        let q = quad_of([&e[0], &e[1], &e[2], &e[3]]);
        let p: Vec<Maps> = e.iter().map(channel_softmax).collect();
        let js = |a: usize, b: usize| js_divergence(&p[a], &p[b]).unwrap();
        let expected = 4.0 * (js(0, 1) + js(2, 3)) - (js(0, 2) + js(1, 3));
        assert!((l_js(&q, 4.0).unwrap() - expected).abs() < 1e-14);
        let same = quad_of([&e[0], &e[0], &e[0], &e[0]]);
        assert_eq!(l_js(&same, 4.0).unwrap(), 0.0);
    }

    #[test]
    fn cosine_cases() {
        let a = emb(2, 1, 1, vec![1.0, 0.0]);
        let b = emb(2, 1, 1, vec![0.0, 1.0]);
        assert_eq!(cosine_map(&a, &a).unwrap().values, vec![1.0]);
        assert_eq!(cosine_map(&a, &b).unwrap().values, vec![0.0]);
        let z = emb(2, 1, 1, vec![0.0, 0.0]);
        let c = cosine_map(&a, &z).unwrap();
        assert_eq!((c.values[0], c.degenerate), (0.0, 1));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, _) = crate::segnet::normalize_columns(&random_maps(3, 2, 2, &mut rng));
        let (y, _) = crate::segnet::normalize_columns(&random_maps(3, 2, 2, &mut rng));
        let c = cor_in(&ContentEmbedding(x.clone()), &ContentEmbedding(y.clone())).unwrap();
        for p in 0..4 {
            let dot: f64 = x.column(p).iter().zip(y.column(p)).map(|(a, b)| a * b).sum();
            assert!((c.values[p] - dot).abs() < 1e-14);
        }
        let illu = cor_illu(&ContentEmbedding(x.clone()), &ContentEmbedding(y.clone())).unwrap();
        assert_eq!(illu, c);
    }

    #[test]
    fn cdc_hand_cases() {
        let e = emb(2, 1, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let all = quad_of([&e, &e, &e, &e]);
        assert_eq!(l_cdc(&all, 4.0).unwrap(), 0.0);

        // S pair identical (cos 1), T pair orthogonal at each position (cos 0).
        let t_n = emb(2, 1, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let q = quad_of([&e, &e, &e, &t_n]);
        let opts = CdcOptions {
            use_inherent: false,
            use_js: false,
            ..CdcOptions::full(4.0)
        };
        let (terms, _) = l_cdc_with_grad(&q, &opts).unwrap();
        assert!((terms.illu - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gram_hand_case() {
        let f = FeatureMap(Maps::from_vec(2, 1, 2, vec![1.0, 1.0, 2.0, 2.0]));
        assert_eq!(gram_unnormalized(&f).values, vec![2.0, 4.0, 4.0, 8.0]);
        assert_eq!(gram(&f).values, vec![0.5, 1.0, 1.0, 2.0]);
        let z = FeatureMap(Maps::zeros(3, 2, 2));
        assert!(gram(&z).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cor_gram_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = FeatureMap(random_maps(3, 2, 2, &mut rng));
        let g = gram(&f);
        let g2 = GramMatrix {
            channels: 3,
            values: g.values.iter().map(|v| 2.0 * v).collect(),
        };
        assert!((cor_gram(&g, &g).unwrap().value - 1.0).abs() < 1e-14);
        assert!((cor_gram(&g, &g2).unwrap().value - 1.0).abs() < 1e-14);
        let h = gram(&FeatureMap(random_maps(3, 2, 2, &mut rng)));
        let frob: f64 = g.values.iter().zip(&h.values).map(|(a, b)| a * b).sum();
        let na: f64 = g.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = h.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((cor_gram(&g, &h).unwrap().value - frob / (na * nb)).abs() < 1e-14);
        let zero = gram(&FeatureMap(Maps::zeros(3, 2, 2)));
        assert!(cor_gram(&g, &zero).unwrap().degenerate);
        assert!(cor_gram(&g, &gram(&FeatureMap(Maps::zeros(2, 1, 1)))).is_err());
    }

    #[test]
    fn cds_constructed_case() {
        // Channel supports: day uses channel 0, the S night also channel 0
        // (Cor = 1), the T night only channel 1 (Cor = 0).
        let a = FeatureMap(Maps::from_vec(2, 1, 2, vec![1.0, 2.0, 0.0, 0.0]));
        let b = FeatureMap(Maps::from_vec(2, 1, 2, vec![0.0, 0.0, 3.0, 1.0]));
        let q = quad_of([&a, &a, &a, &b]);
        assert!((l_cds(&q).unwrap() - 1.0).abs() < 1e-15);
        let same = quad_of([&a, &a, &a, &a]);
        assert_eq!(l_cds(&same).unwrap(), 0.0);
    }

    #[test]
    fn normalization_does_not_change_cds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fs: Vec<FeatureMap> = (0..4).map(|_| FeatureMap(random_maps(3, 2, 2, &mut rng))).collect();
        let q = quad_of([&fs[0], &fs[1], &fs[2], &fs[3]]);
        let un = fs.iter().map(gram_unnormalized).collect::<Vec<_>>();
        let cs = cor_gram(&un[0], &un[1]).unwrap().value;
        let ct = cor_gram(&un[2], &un[3]).unwrap().value;
        assert!((l_cds(&q).unwrap() - (cs - ct).powi(2)).abs() < 1e-14);
    }

    #[test]
    fn pairings_differ_in_exactly_one_shift() {
        for (a, b) in similarity_pairs() {
            assert_eq!(a.shifts_between(b), 1, "{a:?} vs {b:?}");
            let forbidden = [(SD, TN), (TN, SD), (SN, TD), (TD, SN)];
            assert!(!forbidden.contains(&(a, b)));
        }
    }

    fn finite_diff<F: Fn(&Quad<Maps>) -> f64>(f: F, x: &Quad<Maps>, d: Domain, i: usize) -> f64 {
        let h = 1e-6;
        let mut p = x.clone();
        p.get_mut(d).data[i] += h;
        let mut m = x.clone();
        m.get_mut(d).data[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn cdc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Quad::from_fn(|_| crate::segnet::normalize_columns(&random_maps(4, 2, 3, &mut rng)).0);
        let opts = CdcOptions::full(4.0);
        let f = |q: &Quad<Maps>| {
            let e = q.map(|m| ContentEmbedding(m.clone()));
            l_cdc_with_grad(&e.as_ref(), &opts).unwrap().0.total()
        };
        let e = x.map(|m| ContentEmbedding(m.clone()));
        let (_, g) = l_cdc_with_grad(&e.as_ref(), &opts).unwrap();
        for d in Domain::ALL {
            for i in 0..x.s_d.data.len() {
                let fd = finite_diff(f, &x, d, i);
                assert!(rel_err(g.get(d).data[i], fd) < 1e-4, "{d:?} {i}");
            }
        }
    }

    #[test]
    fn stop_grad_detaches_only_guides() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Quad::from_fn(|_| crate::segnet::normalize_columns(&random_maps(4, 2, 3, &mut rng)).0);
        let e = x.map(|m| ContentEmbedding(m.clone()));
        let detached = CdcOptions {
            stop_grad_source: true,
            ..CdcOptions::full(4.0)
        };
        let (t1, g) = l_cdc_with_grad(&e.as_ref(), &detached).unwrap();
        let (t0, _) = l_cdc_with_grad(&e.as_ref(), &CdcOptions::full(4.0)).unwrap();
        assert_eq!(t0, t1);
        // S_d only feeds guides and the JS term, so its gradient is the JS gradient.
        let (_, gjs) = l_js_with_grad(&e.as_ref(), 4.0).unwrap();
        for (a, b) in g.s_d.data.iter().zip(&gjs.s_d.data) {
            assert!((a - b).abs() < 1e-14);
        }
        // T_n only feeds guided maps, so its gradient is unchanged.
        let f = |q: &Quad<Maps>| {
            let e = q.map(|m| ContentEmbedding(m.clone()));
            l_cdc(&e.as_ref(), 4.0).unwrap()
        };
        for i in 0..x.t_n.data.len() {
            assert!(rel_err(g.t_n.data[i], finite_diff(f, &x, TN, i)) < 1e-4);
        }
    }

    #[test]
    fn cds_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Quad::from_fn(|_| random_maps(3, 2, 2, &mut rng));
        let f = |q: &Quad<Maps>| {
            let fm = q.map(|m| FeatureMap(m.clone()));
            l_cds(&fm.as_ref()).unwrap()
        };
        let fm = x.map(|m| FeatureMap(m.clone()));
        let (_, g) = l_cds_with_grad(&fm.as_ref()).unwrap();
        for d in Domain::ALL {
            for i in 0..x.s_d.data.len() {
                let fd = finite_diff(f, &x, d, i);
                assert!(rel_err(g.get(d).data[i], fd) < 1e-4, "{d:?} {i}: {} vs {fd}", g.get(d).data[i]);
            }
        }
    }

    #[test]
    fn cds_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let fs: Vec<FeatureMap> = (0..4).map(|_| FeatureMap(random_maps(3, 2, 2, &mut rng))).collect();
        let base = l_cds(&quad_of([&fs[0], &fs[1], &fs[2], &fs[3]])).unwrap();
        let scaled = FeatureMap(fs[2].0.scaled(7.5));
        let other = l_cds(&quad_of([&fs[0], &fs[1], &scaled, &fs[3]])).unwrap();
        assert!((base - other).abs() < 1e-9);
    }
}
