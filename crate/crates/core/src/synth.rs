//! Procedural four-domain world.
//!
//! Scenes are layered geometric label maps. A [`StyleSpec`] paints them in one
//! "urban style" (the inherent dataset shift) and a [`NightSpec`] darkens them
//! and adds local light sources and sensor noise (the illumination shift).
//! Source domains carry labels; target-night labels are kept in
//! [`HiddenLabels`] and only reach the evaluation code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::image::{aggregate_stats, lab_moment_match, rgb_to_lab, ChannelStats, Image, LabelMap, DEFAULT_IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "S_d")]
    SourceDay,
    #[serde(rename = "S_n")]
    SourceNight,
    #[serde(rename = "T_d")]
    TargetDay,
    #[serde(rename = "T_n")]
    TargetNight,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::SourceDay,
        Domain::SourceNight,
        Domain::TargetDay,
        Domain::TargetNight,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Domain::SourceDay => "S_d",
            Domain::SourceNight => "S_n",
            Domain::TargetDay => "T_d",
            Domain::TargetNight => "T_n",
        }
    }

    pub fn is_source(self) -> bool {
        matches!(self, Domain::SourceDay | Domain::SourceNight)
    }

    pub fn is_night(self) -> bool {
        matches!(self, Domain::SourceNight | Domain::TargetNight)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Number of shifts (dataset, illumination) separating two domains.
    pub fn shifts_between(self, other: Domain) -> usize {
        usize::from(self.is_source() != other.is_source())
            + usize::from(self.is_night() != other.is_night())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub shape_count: usize,
}

impl SceneSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            height: 64,
            width: 64,
            num_classes: 8,
            shape_count: 6,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub palette: Vec<[f64; 3]>,
    pub tone_shift: [f64; 3],
    pub texture_gain: f64,
}

impl StyleSpec {
    /// Default source-dataset style for eight classes.
    pub fn desk_source() -> Self {
        Self {
            palette: vec![
                [0.42, 0.42, 0.45], // road
                [0.55, 0.72, 0.92], // sky
                [0.62, 0.46, 0.36], // building
                [0.30, 0.56, 0.26], // vegetation
                [0.78, 0.76, 0.32], // pole / sign
                [0.22, 0.30, 0.72], // car
                [0.86, 0.30, 0.36], // person
                [0.52, 0.24, 0.62], // rider
            ],
            tone_shift: [0.0; 3],
            texture_gain: 0.05,
        }
    }

    /// Default target-dataset style: a shifted camera tone and palette,
    /// far enough from the source that day labels transfer imperfectly.
    pub fn desk_target() -> Self {
        Self {
            palette: vec![
                [0.46, 0.445, 0.425],
                [0.615, 0.72, 0.85],
                [0.68, 0.54, 0.42],
                [0.34, 0.53, 0.28],
                [0.72, 0.67, 0.34],
                [0.28, 0.28, 0.67],
                [0.81, 0.33, 0.29],
                [0.55, 0.28, 0.55],
            ],
            tone_shift: [0.02, 0.0, -0.02],
            texture_gain: 0.07,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightSource {
    pub y: f64,
    pub x: f64,
    pub radius: f64,
    pub intensity: f64,
    pub color: [f64; 3],
}

impl LightSource {
    /// Additive contribution at pixel centre `(y, x)`.
    pub fn contribution(&self, y: f64, x: f64) -> [f64; 3] {
        let d2 = (y - self.y).powi(2) + (x - self.x).powi(2);
        let k = self.intensity * (-d2 / (2.0 * self.radius * self.radius)).exp();
        self.color.map(|c| c * k)
    }
}

/// Missing fields in a config take their `desk` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NightSpec {
    pub gain: f64,
    pub gamma: f64,
    pub light_sources: Vec<LightSource>,
    pub noise_std: f64,
    /// Extra lights placed at seeded positions for every rendered image.
    pub random_lights: usize,
    pub random_light_radius: f64,
    pub random_light_intensity: f64,
}

impl Default for NightSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl NightSpec {
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            gamma: 1.0,
            light_sources: Vec::new(),
            noise_std: 0.0,
            random_lights: 0,
            random_light_radius: 0.0,
            random_light_intensity: 0.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            gain: 0.45,
            gamma: 1.8,
            light_sources: Vec::new(),
            noise_std: 0.03,
            random_lights: 3,
            random_light_radius: 5.0,
            random_light_intensity: 0.9,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(validation("night gain must be in (0, 1]"));
        }
        if !(self.gamma >= 1.0) || !(self.noise_std >= 0.0) {
            return Err(validation("night gamma must be >= 1 and noise_std >= 0"));
        }
        Ok(())
    }
}

/// An image tagged with its domain; only source domains carry labels.
#[derive(Debug, Clone)]
pub struct DomainSample {
    image: Image,
    label: Option<LabelMap>,
    domain: Domain,
}

impl DomainSample {
    pub fn new(image: Image, label: Option<LabelMap>, domain: Domain) -> Result<Self> {
        if domain.is_source() != label.is_some() {
            return Err(validation(format!(
                "domain {} {} carry a label",
                domain.tag(),
                if domain.is_source() { "must" } else { "must not" }
            )));
        }
        Ok(Self {
            image,
            label,
            domain,
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn label(&self) -> Option<&LabelMap> {
        self.label.as_ref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }
}

/// Aligned samples from all four domains for one training step.
#[derive(Debug, Clone)]
pub struct QuadBatch {
    pub s_d: Vec<DomainSample>,
    pub s_n: Vec<DomainSample>,
    pub t_d: Vec<DomainSample>,
    pub t_n: Vec<DomainSample>,
    /// Day-to-night offsets; empty when the batch comes from a pool.
    pub parallax: Vec<(i64, i64)>,
}

impl QuadBatch {
    pub fn len(&self) -> usize {
        self.s_d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_d.is_empty()
    }

    pub fn domain(&self, d: Domain) -> &[DomainSample] {
        match d {
            Domain::SourceDay => &self.s_d,
            Domain::SourceNight => &self.s_n,
            Domain::TargetDay => &self.t_d,
            Domain::TargetNight => &self.t_n,
        }
    }
}

/// Target labels produced alongside a batch, for scoring only.
#[derive(Debug, Clone)]
pub struct HiddenLabels {
    t_d: Vec<LabelMap>,
    t_n: Vec<LabelMap>,
}

impl HiddenLabels {
    pub fn target_day(&self) -> &[LabelMap] {
        &self.t_d
    }

    pub fn target_night(&self) -> &[LabelMap] {
        &self.t_n
    }
}

/// Deterministic sub-seed for a `(seed, stream, index)` triple (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod stream {
    pub const SOURCE_SCENE: u64 = 1;
    pub const TARGET_SCENE: u64 = 2;
    pub const SOURCE_RENDER: u64 = 3;
    pub const TARGET_RENDER: u64 = 4;
    pub const PARALLAX: u64 = 5;
    pub const NIGHT: u64 = 6;
    pub const EVAL_SCENE: u64 = 7;
    pub const EVAL_RENDER: u64 = 8;
    pub const EVAL_PARALLAX: u64 = 9;
    pub const BATCH_SOURCE: u64 = 10;
    pub const BATCH_TARGET: u64 = 11;
}

/// Layered label map: sky band, middle background, ground band, then shapes.
pub fn generate_scene(spec: &SceneSpec) -> Result<LabelMap> {
    if spec.num_classes < 2 {
        return Err(validation("num_classes must be at least 2"));
    }
    if spec.height == 0 || spec.width == 0 || spec.shape_count == 0 {
        return Err(validation("scene dimensions and shape_count must be positive"));
    }
    let (h, w) = (spec.height, spec.width);
    let k = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sky_class = 1u8;
    let middle_class = 2.min(k - 1);
    let horizon = (h as f64 * rng.gen_range(0.2..0.4)) as usize;
    let ground = (h as f64 * rng.gen_range(0.6..0.8)) as usize;
    let mut classes = vec![middle_class; h * w];
    for y in 0..h {
        let c = if y < horizon {
            sky_class
        } else if y >= ground {
            0
        } else {
            continue;
        };
        classes[y * w..(y + 1) * w].fill(c);
    }
    let first_shape_class = if k > 3 { 3 } else { 0 };
    for _ in 0..spec.shape_count {
        let c = rng.gen_range(first_shape_class..k);
        let cy = rng.gen_range(0.25..0.95) * h as f64;
        let cx = rng.gen_range(0.0..1.0) * w as f64;
        let sh = rng.gen_range(0.06..0.25) * h as f64;
        let sw = rng.gen_range(0.04..0.25) * w as f64;
        let disc = rng.gen_bool(0.4);
        for y in 0..h {
            let dy = (y as f64 + 0.5 - cy) / sh;
            if dy.abs() > 1.0 {
                continue;
            }
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / sw;
                let inside = if disc {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0
                };
                if inside {
                    classes[y * w + x] = c;
                }
            }
        }
    }
    LabelMap::new(h, w, k, DEFAULT_IGNORE, classes)
}

/// Paints a label map with a style; optionally applies the night transform.
pub fn render_domain(
    label: &LabelMap,
    style: &StyleSpec,
    night: Option<&NightSpec>,
    seed: u64,
) -> Result<Image> {
    if style.num_classes() != label.num_classes() {
        return Err(validation(format!(
            "style has {} palette entries for {} classes",
            style.num_classes(),
            label.num_classes()
        )));
    }
    let (h, w) = (label.height(), label.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Per-class stripe phase so classes differ in texture as well as colour.
    let phases: Vec<f64> = (0..style.num_classes())
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let c = label.get(y, x) as usize;
            let base = style.palette.get(c).copied().unwrap_or([0.0; 3]);
            let freq = 0.35 + 0.15 * c as f64;
            let stripe = (freq * (x as f64 + (c % 3) as f64 * y as f64) + phases[c]).sin();
            let grain: f64 = normal.sample(&mut rng);
            let t = style.texture_gain * (0.6 * stripe + 0.4 * grain);
            for ch in 0..3 {
                pixels.push((base[ch] + style.tone_shift[ch] + t).clamp(0.0, 1.0));
            }
        }
    }
    let mut img = Image::srgb(h, w, pixels)?;
    if let Some(night) = night {
        apply_night(&mut img, night, sub_seed(seed, stream::NIGHT, 0))?;
    }
    Ok(img)
}

fn apply_night(img: &mut Image, night: &NightSpec, seed: u64) -> Result<()> {
    night.validate()?;
    let (h, w) = (img.height(), img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lights = night.light_sources.clone();
    for _ in 0..night.random_lights {
        let warm = rng.gen_range(0.0..1.0);
        lights.push(LightSource {
            y: rng.gen_range(0.2..0.8) * h as f64,
            x: rng.gen_range(0.0..1.0) * w as f64,
            radius: night.random_light_radius * rng.gen_range(0.6..1.4),
            intensity: night.random_light_intensity,
            color: [1.0, 0.95 - 0.2 * warm, 0.8 - 0.4 * warm],
        });
    }
    let noise = (night.noise_std > 0.0)
        .then(|| Normal::new(0.0, night.noise_std).expect("finite noise std"));
    let pixels = img.pixels_mut();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            let mut add = [0.0; 3];
            for l in &lights {
                let c = l.contribution(y as f64 + 0.5, x as f64 + 0.5);
                for ch in 0..3 {
                    add[ch] += c[ch];
                }
            }
            for ch in 0..3 {
                let mut v = night.gain * pixels[i + ch].powf(night.gamma) + add[ch];
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                pixels[i + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

/// Seeded parallax offset in `[-max, max]^2`.
pub fn sample_parallax(seed: u64, parallax_max: usize) -> (i64, i64) {
    if parallax_max == 0 {
        return (0, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = parallax_max as i64;
    (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
}

/// Renders a target day/night pair from one scene.
pub fn render_target_pair(
    label: &LabelMap,
    style: &StyleSpec,
    night: &NightSpec,
    seed: u64,
    parallax: (i64, i64),
) -> Result<(Image, Image, LabelMap)> {
    let day = render_domain(label, style, None, seed)?;
    let night_img = render_domain(label, style, Some(night), seed)?.shifted(parallax.0, parallax.1);
    Ok((day, night_img, label.shifted(parallax.0, parallax.1)))
}

/// Statistics of a set of sRGB images in LAB.
pub fn lab_stats(images: &[Image]) -> Result<ChannelStats> {
    let labs = images.iter().map(rgb_to_lab).collect::<Result<Vec<_>>>()?;
    Ok(aggregate_stats(&labs))
}

pub struct GeneratedQuad {
    pub batch: QuadBatch,
    pub hidden: HiddenLabels,
}

#[allow(clippy::too_many_arguments)]
pub fn make_quad_batch(
    spec: &SceneSpec,
    style_s: &StyleSpec,
    style_t: &StyleSpec,
    night_t: &NightSpec,
    batch: usize,
    parallax_max: usize,
    use_lab_init: bool,
) -> Result<GeneratedQuad> {
    if batch == 0 {
        return Err(validation("batch must be at least 1"));
    }
    let mut s_d = Vec::with_capacity(batch);
    let mut t_d = Vec::with_capacity(batch);
    let mut t_n = Vec::with_capacity(batch);
    let mut parallax = Vec::with_capacity(batch);
    let mut hidden_d = Vec::with_capacity(batch);
    let mut hidden_n = Vec::with_capacity(batch);
    for i in 0..batch as u64 {
        let s_label = generate_scene(&spec.with_seed(sub_seed(spec.seed, stream::SOURCE_SCENE, i)))?;
        let s_img = render_domain(&s_label, style_s, None, sub_seed(spec.seed, stream::SOURCE_RENDER, i))?;
        s_d.push(DomainSample::new(s_img, Some(s_label), Domain::SourceDay)?);

        let t_label = generate_scene(&spec.with_seed(sub_seed(spec.seed, stream::TARGET_SCENE, i)))?;
        let shift = sample_parallax(sub_seed(spec.seed, stream::PARALLAX, i), parallax_max);
        let (day, night, night_label) = render_target_pair(
            &t_label,
            style_t,
            night_t,
            sub_seed(spec.seed, stream::TARGET_RENDER, i),
            shift,
        )?;
        t_d.push(DomainSample::new(day, None, Domain::TargetDay)?);
        t_n.push(DomainSample::new(night, None, Domain::TargetNight)?);
        parallax.push(shift);
        hidden_d.push(t_label);
        hidden_n.push(night_label);
    }
    let s_n = translate_source(&s_d, &t_n, use_lab_init)?;
    Ok(GeneratedQuad {
        batch: QuadBatch {
            s_d,
            s_n,
            t_d,
            t_n,
            parallax,
        },
        hidden: HiddenLabels {
            t_d: hidden_d,
            t_n: hidden_n,
        },
    })
}

/// Builds `S_n` from `S_d`: LAB moment matching to the pooled target-night
/// statistics, or a plain copy when the translation is disabled.
fn translate_source(
    s_d: &[DomainSample],
    t_n: &[DomainSample],
    use_lab_init: bool,
) -> Result<Vec<DomainSample>> {
    let target = if use_lab_init {
        let imgs: Vec<Image> = t_n.iter().map(|s| s.image.clone()).collect();
        Some(lab_stats(&imgs)?)
    } else {
        None
    };
    s_d.iter()
        .map(|s| {
            let image = match &target {
                Some(stats) => lab_moment_match(&s.image, stats)?.image,
                None => s.image.clone(),
            };
            DomainSample::new(image, s.label.clone(), Domain::SourceNight)
        })
        .collect()
}
