//! Encoder–decoder segmentation network and projection head.
//!
//! ```text
//! image ─ enc1 (3×3/2) ─ enc2 (3×3/2) ─ enc3 (3×3) ─┬─ feature tap (H/4)
//!                                                    └─ up×2 ─ dec1 ─ dec2 ─ cls ─ up×2 ─ logits (H)
//! ```
//!
//! Every layer is followed by ReLU except the classifier. The projection head
//! (1×1 conv, ReLU, 1×1 conv, per-position L2 normalisation) is a separate
//! parameter set used only by the training losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Result};
use crate::image::{ColorSpace, Image};
use crate::nn::{
    relu_backward_inplace, relu_inplace, upsample_bilinear, upsample_bilinear_backward, Conv,
    ConvShape, Maps,
};

/// Normalisation guard for content embeddings.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub num_classes: usize,
    pub enc_channels: [usize; 3],
    pub dec_channels: [usize; 2],
    pub embed_dim: usize,
    pub head_hidden: usize,
}

impl NetConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            enc_channels: [8, 12, 12],
            dec_channels: [12, 12],
            embed_dim: 32,
            head_hidden: 32,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.enc_channels[2]
    }
}

fn conv_shape(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> ConvShape {
    ConvShape {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding: kernel / 2,
    }
}

/// Shared view over parameter containers (network, head, their gradients).
pub trait Params {
    fn convs(&self) -> Vec<(&'static str, &Conv)>;
    fn convs_mut(&mut self) -> Vec<(&'static str, &mut Conv)>;

    /// `(name, values)` for every weight and bias tensor, in a fixed order.
    fn tensors(&self) -> Vec<(String, &[f64])> {
        self.convs()
            .into_iter()
            .flat_map(|(n, c)| {
                [
                    (format!("{n}.weight"), c.weight.as_slice()),
                    (format!("{n}.bias"), c.bias.as_slice()),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.convs_mut()
            .into_iter()
            .flat_map(|(n, c)| {
                [
                    (format!("{n}.weight"), c.weight.as_mut_slice()),
                    (format!("{n}.bias"), c.bias.as_mut_slice()),
                ]
            })
            .collect()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    pub enc1: Conv,
    pub enc2: Conv,
    pub enc3: Conv,
    pub dec1: Conv,
    pub dec2: Conv,
    pub cls: Conv,
}

impl Params for NetParams {
    fn convs(&self) -> Vec<(&'static str, &Conv)> {
        vec![
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("enc3", &self.enc3),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
            ("cls", &self.cls),
        ]
    }

    fn convs_mut(&mut self) -> Vec<(&'static str, &mut Conv)> {
        vec![
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("enc3", &mut self.enc3),
            ("dec1", &mut self.dec1),
            ("dec2", &mut self.dec2),
            ("cls", &mut self.cls),
        ]
    }
}

impl NetParams {
    fn shapes(c: &NetConfig) -> [ConvShape; 6] {
        let [e1, e2, e3] = c.enc_channels;
        let [d1, d2] = c.dec_channels;
        [
            conv_shape(3, e1, 3, 2),
            conv_shape(e1, e2, 3, 2),
            conv_shape(e2, e3, 3, 1),
            conv_shape(e3, d1, 1, 1),
            conv_shape(d1, d2, 3, 1),
            conv_shape(d2, c.num_classes, 1, 1),
        ]
    }

    pub fn init(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [s1, s2, s3, s4, s5, s6] = Self::shapes(&config);
        let mut cls = Conv::he_init(s6, &mut rng);
        for w in &mut cls.weight {
            *w *= 0.5;
        }
        Self {
            config,
            enc1: Conv::he_init(s1, &mut rng),
            enc2: Conv::he_init(s2, &mut rng),
            enc3: Conv::he_init(s3, &mut rng),
            dec1: Conv::he_init(s4, &mut rng),
            dec2: Conv::he_init(s5, &mut rng),
            cls,
        }
    }

    pub fn zeros(config: NetConfig) -> Self {
        let [s1, s2, s3, s4, s5, s6] = Self::shapes(&config);
        Self {
            config,
            enc1: Conv::zeros(s1),
            enc2: Conv::zeros(s2),
            enc3: Conv::zeros(s3),
            dec1: Conv::zeros(s4),
            dec2: Conv::zeros(s5),
            cls: Conv::zeros(s6),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Params for HeadParams {
    fn convs(&self) -> Vec<(&'static str, &Conv)> {
        vec![("head1", &self.conv1), ("head2", &self.conv2)]
    }

    fn convs_mut(&mut self) -> Vec<(&'static str, &mut Conv)> {
        vec![("head1", &mut self.conv1), ("head2", &mut self.conv2)]
    }
}

impl HeadParams {
    pub fn init(config: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            conv1: Conv::he_init(
                conv_shape(config.feature_channels(), config.head_hidden, 1, 1),
                &mut rng,
            ),
            conv2: Conv::he_init(conv_shape(config.head_hidden, config.embed_dim, 1, 1), &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: Conv::zeros(self.conv1.shape),
            conv2: Conv::zeros(self.conv2.shape),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.conv1.shape.in_channels
    }
}

/// Per-pixel class scores, `num_classes × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Maps);

/// Tapped encoder activation, `C × H/4 × W/4`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Maps);

/// Per-position L2-normalised embedding, `E × H' × W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentEmbedding(pub Maps);

impl Logits {
    pub fn num_classes(&self) -> usize {
        self.0.channels
    }

    /// Class scores at pixel index `p`.
    pub fn scores(&self, p: usize) -> Vec<f64> {
        self.0.column(p)
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Maps,
    a1: Maps,
    a2: Maps,
    a3: Maps,
    up: Maps,
    a4: Maps,
    a5: Maps,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Logits,
    pub feature: FeatureMap,
    pub cache: ForwardCache,
}

impl ForwardCache {
    /// Sign pattern of every ReLU input, for detecting kink crossings.
    pub fn activation_pattern(&self) -> Vec<bool> {
        [&self.a1, &self.a2, &self.a3, &self.a4, &self.a5]
            .iter()
            .flat_map(|m| m.data.iter().map(|v| *v > 0.0))
            .collect()
    }
}

pub fn image_to_input(img: &Image) -> Result<Maps> {
    if img.space() != ColorSpace::Srgb {
        return Err(validation("network input must be sRGB"));
    }
    if img.height() % 4 != 0 || img.width() % 4 != 0 {
        return Err(validation(format!(
            "image {}x{} is not divisible by 4",
            img.height(),
            img.width()
        )));
    }
    let data = img.to_chw().into_iter().map(|v| v - 0.5).collect();
    Ok(Maps::from_vec(3, img.height(), img.width(), data))
}

impl NetParams {
    /// Inference: logits and the tapped feature.
    pub fn forward(&self, img: &Image) -> Result<(Logits, FeatureMap)> {
        let pass = self.forward_train(img)?;
        Ok((pass.logits, pass.feature))
    }

    pub fn forward_train(&self, img: &Image) -> Result<ForwardPass> {
        let input = image_to_input(img)?;
        Ok(self.forward_maps(input))
    }

    pub(crate) fn forward_maps(&self, input: Maps) -> ForwardPass {
        let mut a1 = self.enc1.forward(&input);
        relu_inplace(&mut a1);
        let mut a2 = self.enc2.forward(&a1);
        relu_inplace(&mut a2);
        let mut a3 = self.enc3.forward(&a2);
        relu_inplace(&mut a3);
        let up = upsample_bilinear(&a3, 2);
        let mut a4 = self.dec1.forward(&up);
        relu_inplace(&mut a4);
        let mut a5 = self.dec2.forward(&a4);
        relu_inplace(&mut a5);
        let low = self.cls.forward(&a5);
        let logits = upsample_bilinear(&low, 2);
        ForwardPass {
            logits: Logits(logits),
            feature: FeatureMap(a3.clone()),
            cache: ForwardCache {
                input,
                a1,
                a2,
                a3,
                up,
                a4,
                a5,
            },
        }
    }

    /// Reverse-mode pass. `d_logits` and `d_feature` are the gradients of a
    /// scalar loss with respect to the outputs of the forward pass; their
    /// shapes must match those outputs exactly. Gradients are accumulated
    /// into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: Option<&Logits>,
        d_feature: Option<&FeatureMap>,
        grads: &mut NetParams,
    ) -> Result<()> {
        let (h, w) = (cache.input.height, cache.input.width);
        if let Some(d) = d_logits {
            if d.0.channels != self.config.num_classes || d.0.height != h || d.0.width != w {
                return Err(shape("logit gradient does not match logits shape"));
            }
        }
        if let Some(d) = d_feature {
            if !d.0.same_shape(&cache.a3) {
                return Err(shape("feature gradient does not match feature shape"));
            }
        }
        let mut d_a3 = match d_logits {
            Some(d) => {
                let d_low = upsample_bilinear_backward(&d.0, 2);
                let mut d_a5 = self
                    .cls
                    .backward(&cache.a5, &d_low, &mut grads.cls, true)
                    .expect("input grad requested");
                relu_backward_inplace(&cache.a5, &mut d_a5);
                let mut d_a4 = self
                    .dec2
                    .backward(&cache.a4, &d_a5, &mut grads.dec2, true)
                    .expect("input grad requested");
                relu_backward_inplace(&cache.a4, &mut d_a4);
                let d_up = self
                    .dec1
                    .backward(&cache.up, &d_a4, &mut grads.dec1, true)
                    .expect("input grad requested");
                upsample_bilinear_backward(&d_up, 2)
            }
            None => Maps::zeros(cache.a3.channels, cache.a3.height, cache.a3.width),
        };
        if let Some(d) = d_feature {
            d_a3.add_assign(&d.0);
        }
        relu_backward_inplace(&cache.a3, &mut d_a3);
        let mut d_a2 = self
            .enc3
            .backward(&cache.a2, &d_a3, &mut grads.enc3, true)
            .expect("input grad requested");
        relu_backward_inplace(&cache.a2, &mut d_a2);
        let mut d_a1 = self
            .enc2
            .backward(&cache.a1, &d_a2, &mut grads.enc2, true)
            .expect("input grad requested");
        relu_backward_inplace(&cache.a1, &mut d_a1);
        self.enc1.backward(&cache.input, &d_a1, &mut grads.enc1, false);
        Ok(())
    }
}

/// Per-position L2 normalisation; returns the normalised maps and the
/// column norms.
pub fn normalize_columns(m: &Maps) -> (Maps, Vec<f64>) {
    let n = m.plane_len();
    let mut norms = vec![0.0; n];
    for c in 0..m.channels {
        for (p, v) in m.plane(c).iter().enumerate() {
            norms[p] += v * v;
        }
    }
    for v in &mut norms {
        *v = v.sqrt();
    }
    let mut out = m.clone();
    for c in 0..m.channels {
        for p in 0..n {
            out.data[c * n + p] /= norms[p].max(NORM_EPS);
        }
    }
    (out, norms)
}

pub fn normalize_columns_backward(normalized: &Maps, norms: &[f64], d_out: &Maps) -> Maps {
    let n = normalized.plane_len();
    let mut dot = vec![0.0; n];
    for c in 0..normalized.channels {
        for p in 0..n {
            dot[p] += normalized.data[c * n + p] * d_out.data[c * n + p];
        }
    }
    let mut d_in = Maps::zeros(normalized.channels, normalized.height, normalized.width);
    for c in 0..normalized.channels {
        for p in 0..n {
            let i = c * n + p;
            d_in.data[i] = if norms[p] > NORM_EPS {
                (d_out.data[i] - normalized.data[i] * dot[p]) / norms[p]
            } else {
                d_out.data[i] / NORM_EPS
            };
        }
    }
    d_in
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Maps,
    hidden: Maps,
    embedding: Maps,
    norms: Vec<f64>,
}

impl HeadCache {
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.hidden.data.iter().map(|v| *v > 0.0).collect()
    }
}

impl HeadParams {
    pub fn project(&self, f: &FeatureMap) -> Result<ContentEmbedding> {
        Ok(self.project_train(f)?.0)
    }

    pub fn project_train(&self, f: &FeatureMap) -> Result<(ContentEmbedding, HeadCache)> {
        if f.0.channels != self.input_channels() {
            return Err(shape(format!(
                "projection head expects {} channels, got {}",
                self.input_channels(),
                f.0.channels
            )));
        }
        let mut hidden = self.conv1.forward(&f.0);
        relu_inplace(&mut hidden);
        let z = self.conv2.forward(&hidden);
        let (embedding, norms) = normalize_columns(&z);
        Ok((
            ContentEmbedding(embedding.clone()),
            HeadCache {
                input: f.0.clone(),
                hidden,
                embedding,
                norms,
            },
        ))
    }

    /// Returns the gradient with respect to the input feature and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(&self, cache: &HeadCache, d_e: &ContentEmbedding, grads: &mut HeadParams) -> Result<FeatureMap> {
        if !d_e.0.same_shape(&cache.embedding) {
            return Err(shape("embedding gradient does not match embedding shape"));
        }
        let d_z = normalize_columns_backward(&cache.embedding, &cache.norms, &d_e.0);
        let mut d_hidden = self
            .conv2
            .backward(&cache.hidden, &d_z, &mut grads.conv2, true)
            .expect("input grad requested");
        relu_backward_inplace(&cache.hidden, &mut d_hidden);
        let d_f = self
            .conv1
            .backward(&cache.input, &d_hidden, &mut grads.conv1, true)
            .expect("input grad requested");
        Ok(FeatureMap(d_f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::srgb(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shapes() {
        let net = NetParams::init(NetConfig::desk(5), 0);
        let (logits, feat) = net.forward(&random_image(16, 12, 1)).unwrap();
        assert_eq!((logits.0.channels, logits.0.height, logits.0.width), (5, 16, 12));
        assert_eq!((feat.0.channels, feat.0.height, feat.0.width), (12, 4, 3));
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = NetParams::init(NetConfig::desk(5), 0);
        assert!(net.forward(&random_image(10, 8, 1)).is_err());
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut net = NetParams::init(NetConfig::desk(4), 0);
        net.cls.weight.fill(0.0);
        net.cls.bias.fill(0.0);
        let (logits, _) = net.forward(&random_image(8, 8, 2)).unwrap();
        assert!(logits.0.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = NetParams::init(NetConfig::desk(4), 3);
        let img = random_image(8, 8, 3);
        assert_eq!(net.forward(&img).unwrap(), net.forward(&img).unwrap());
    }

    #[test]
    fn doubling_kernel_doubles_preactivation_contribution() {
        // 1x1 toy: enc1 with a single weight on channel 0 of a 1-pixel input column.
        let shape = ConvShape {
            in_channels: 3,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let mut conv = Conv::zeros(shape);
        conv.weight = vec![0.7, 0.0, 0.0];
        conv.bias = vec![0.2];
        let x = Maps::from_vec(3, 1, 1, vec![0.5, 0.3, 0.1]);
        let y1 = conv.forward(&x).data[0] - 0.2;
        conv.weight[0] *= 2.0;
        let y2 = conv.forward(&x).data[0] - 0.2;
        assert!((y1 - 0.35).abs() < 1e-15);
        assert!((y2 - 2.0 * y1).abs() < 1e-15);
    }

    #[test]
    fn embeddings_are_unit_columns_and_scale_invariant() {
        let cfg = NetConfig::desk(4);
        let net = NetParams::init(cfg, 0);
        let head = HeadParams::init(&cfg, 1);
        let (_, feat) = net.forward(&random_image(16, 16, 4)).unwrap();
        let e = head.project(&feat).unwrap();
        for p in 0..e.0.plane_len() {
            let n: f64 = e.0.column(p).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6 || n == 0.0);
        }
        // Scale invariance only holds without the hidden bias offset: zero biases.
        let mut head0 = head.clone();
        head0.conv1.bias.fill(0.0);
        head0.conv2.bias.fill(0.0);
        let a = head0.project(&feat).unwrap();
        let b = head0.project(&FeatureMap(feat.0.scaled(10.0))).unwrap();
        for (x, y) in a.0.data.iter().zip(&b.0.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_head_normalizes_feature_columns() {
        let id = |n: usize| {
            let mut c = Conv::zeros(conv_shape(n, n, 1, 1));
            for i in 0..n {
                c.weight[i * n + i] = 1.0;
            }
            c
        };
        let head = HeadParams {
            conv1: id(2),
            conv2: id(2),
        };
        // channels (3, 0) and (4, 2) over two pixels
        let f = FeatureMap(Maps::from_vec(2, 1, 2, vec![3.0, 0.0, 4.0, 2.0]));
        let e = head.project(&f).unwrap();
        let expected = [0.6, 0.0, 0.8, 1.0];
        for (a, b) in e.0.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_column_normalizes_to_zero() {
        let m = Maps::from_vec(2, 1, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let (n, _) = normalize_columns(&m);
        assert_eq!(n.column(0), vec![0.0, 0.0]);
        assert!(n.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_upstream_gradient_rejected() {
        let net = NetParams::init(NetConfig::desk(4), 0);
        let pass = net.forward_train(&random_image(8, 8, 5)).unwrap();
        let mut g = net.zeros_like();
        let bad = Logits(Maps::zeros(4, 4, 4));
        assert!(net.backward(&pass.cache, Some(&bad), None, &mut g).is_err());
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let net = NetParams::init(NetConfig::desk(4), 0);
        let pass = net.forward_train(&random_image(8, 8, 5)).unwrap();
        let mut g = net.zeros_like();
        net.backward(&pass.cache, None, None, &mut g).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn quadratic_toy_gradient_is_outer_product() {
        // L = ||W x||^2 on a bias-free 1x1 conv: dL/dW = 2 (W x) x^T
        let mut conv = Conv::zeros(conv_shape(3, 2, 1, 1));
        conv.weight = vec![0.5, -1.0, 2.0, 0.3, 0.1, -0.4];
        let x = Maps::from_vec(3, 1, 1, vec![1.0, 2.0, -1.0]);
        let y = conv.forward(&x);
        let d_y = y.scaled(2.0);
        let mut g = Conv::zeros(conv.shape);
        conv.backward(&x, &d_y, &mut g, false);
        for o in 0..2 {
            for i in 0..3 {
                let expected = 2.0 * y.data[o] * x.data[i];
                assert!((g.weight[o * 3 + i] - expected).abs() < 1e-12);
            }
        }
    }
}
