//! Image containers, label maps and CIELAB statistics.
//!
//! Pixels are stored row-major with interleaved channels (`H×W×3`). sRGB
//! values are gamma encoded in `[0, 1]`; the LAB conversion goes through
//! linear RGB and CIE XYZ with the D65 reference white implied by the sRGB
//! primaries matrix, so `(1, 1, 1)` maps to `a = b = 0` exactly.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Result};

/// Guard on the source standard deviation used by moment matching.
pub const MOMENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Srgb,
    Lab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    space: ColorSpace,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an sRGB image, rejecting values outside `[0, 1]`.
    pub fn srgb(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let img = Self::from_raw(height, width, ColorSpace::Srgb, pixels)?;
        if let Some(v) = img.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(validation(format!("sRGB value {v} outside [0, 1]")));
        }
        Ok(img)
    }

    /// Builds an image without range validation (LAB images may legitimately
    /// leave the nominal range after statistical matching).
    pub fn from_raw(
        height: usize,
        width: usize,
        space: ColorSpace,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(validation("image dimensions must be at least 1x1"));
        }
        if pixels.len() != height * width * 3 {
            return Err(shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            space,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::srgb(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn mean_value(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Channel-major copy (`3×H×W`) for network input.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.num_pixels();
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[n + p] = px[1];
            out[2 * n + p] = px[2];
        }
        out
    }

    /// Cyclic translation: output pixel `(y, x)` takes input `(y - dy, x - dx)`.
    pub fn shifted(&self, dy: i64, dx: i64) -> Image {
        let mut pixels = vec![0.0; self.pixels.len()];
        for y in 0..self.height {
            let sy = wrap(y as i64 - dy, self.height);
            for x in 0..self.width {
                let sx = wrap(x as i64 - dx, self.width);
                let dst = (y * self.width + x) * 3;
                let src = (sy * self.width + sx) * 3;
                pixels[dst..dst + 3].copy_from_slice(&self.pixels[src..src + 3]);
            }
        }
        Image {
            pixels,
            ..self.clone()
        }
    }
}

pub(crate) fn wrap(v: i64, n: usize) -> usize {
    v.rem_euclid(n as i64) as usize
}

/// Per-pixel class indices. Entries are either a class in `[0, num_classes)`
/// or the ignore index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: u8,
    ignore_index: u8,
    classes: Vec<u8>,
}

pub const DEFAULT_IGNORE: u8 = 255;

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: u8,
        ignore_index: u8,
        classes: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(validation("label map dimensions must be at least 1x1"));
        }
        if num_classes == 0 {
            return Err(validation("num_classes must be positive"));
        }
        if ignore_index < num_classes {
            return Err(validation(format!(
                "ignore index {ignore_index} collides with class range [0, {num_classes})"
            )));
        }
        if classes.len() != height * width {
            return Err(shape(format!(
                "expected {} labels, got {}",
                height * width,
                classes.len()
            )));
        }
        if let Some(c) = classes
            .iter()
            .find(|&&c| c >= num_classes && c != ignore_index)
        {
            return Err(validation(format!("label {c} out of range")));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            ignore_index,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: u8, class: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            num_classes,
            DEFAULT_IGNORE,
            vec![class; height * width],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes as usize
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.classes[i] == self.ignore_index
    }

    pub fn shifted(&self, dy: i64, dx: i64) -> LabelMap {
        let mut classes = vec![0; self.classes.len()];
        for y in 0..self.height {
            let sy = wrap(y as i64 - dy, self.height);
            for x in 0..self.width {
                classes[y * self.width + x] = self.classes[sy * self.width + wrap(x as i64 - dx, self.width)];
            }
        }
        LabelMap {
            classes,
            ..self.clone()
        }
    }

    /// Pixel count per class; ignored pixels are not counted.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &c in &self.classes {
            if c != self.ignore_index {
                h[c as usize] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn max_abs_diff(&self, other: &ChannelStats) -> f64 {
        (0..3)
            .map(|c| {
                (self.mean[c] - other.mean[c])
                    .abs()
                    .max((self.std[c] - other.std[c]).abs())
            })
            .fold(0.0, f64::max)
    }
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

static XYZ_TO_SRGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&SRGB_TO_XYZ));

// Reference white as the image of linear (1, 1, 1).
static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    let m = &SRGB_TO_XYZ;
    [
        m[0].iter().sum(),
        m[1].iter().sum(),
        m[2].iter().sum(),
    ]
});

const LAB_DELTA: f64 = 6.0 / 29.0;
const GAMMA_KNEE: f64 = 0.04045;

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let inv = 1.0 / det;
    [
        [
            c00 * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            c01 * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            c02 * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn gamma_expand(v: f64) -> f64 {
    if v <= GAMMA_KNEE {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn gamma_compress(l: f64) -> f64 {
    if l <= GAMMA_KNEE / 12.92 {
        l * 12.92
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA * LAB_DELTA * LAB_DELTA {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    if f > LAB_DELTA {
        f * f * f
    } else {
        3.0 * LAB_DELTA * LAB_DELTA * (f - 4.0 / 29.0)
    }
}

pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(gamma_expand);
    let xyz = mat_vec(&SRGB_TO_XYZ, lin);
    let w = &*WHITE;
    let fx = lab_f(xyz[0] / w[0]);
    let fy = lab_f(xyz[1] / w[1]);
    let fz = lab_f(xyz[2] / w[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse conversion without clamping; the result may leave `[0, 1]`.
pub fn lab_pixel_to_srgb_unclamped(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = &*WHITE;
    let xyz = [lab_f_inv(fx) * w[0], lab_f_inv(fy) * w[1], lab_f_inv(fz) * w[2]];
    mat_vec(&XYZ_TO_SRGB, xyz).map(gamma_compress)
}

pub fn rgb_to_lab(img: &Image) -> Result<Image> {
    if img.space != ColorSpace::Srgb {
        return Err(validation("rgb_to_lab expects an sRGB image"));
    }
    if let Some(v) = img.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(validation(format!("sRGB value {v} outside [0, 1]")));
    }
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for px in img.pixels.chunks_exact(3) {
        pixels.extend(srgb_pixel_to_lab([px[0], px[1], px[2]]));
    }
    Ok(Image {
        pixels,
        space: ColorSpace::Lab,
        ..*img
    })
}

/// Converts LAB back to sRGB, clamping to `[0, 1]`. Returns the image and
/// the number of channel values that had to be clamped.
pub fn lab_to_rgb(img: &Image) -> Result<(Image, usize)> {
    if img.space != ColorSpace::Lab {
        return Err(validation("lab_to_rgb expects a LAB image"));
    }
    let mut clamped = 0;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for px in img.pixels.chunks_exact(3) {
        for v in lab_pixel_to_srgb_unclamped([px[0], px[1], px[2]]) {
            // NaN maps to 0 and counts as clamped.
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if c != v {
                clamped += 1;
            }
            pixels.push(c);
        }
    }
    Ok((
        Image {
            pixels,
            space: ColorSpace::Srgb,
            ..*img
        },
        clamped,
    ))
}

/// Per-channel arithmetic mean and population standard deviation.
pub fn channel_stats(img: &Image) -> ChannelStats {
    aggregate_stats(std::slice::from_ref(img))
}

/// Statistics pooled over every pixel of every image.
pub fn aggregate_stats(images: &[Image]) -> ChannelStats {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.pixels.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c];
            }
        }
        n += img.num_pixels();
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let mut sq = [0.0; 3];
    for img in images {
        for px in img.pixels.chunks_exact(3) {
            for c in 0..3 {
                let d = px[c] - mean[c];
                sq[c] += d * d;
            }
        }
    }
    ChannelStats {
        mean,
        std: sq.map(|s| (s / n).sqrt()),
    }
}

#[derive(Debug, Clone)]
pub struct MomentMatch {
    /// Final sRGB image after gamut clamping.
    pub image: Image,
    /// Matched LAB image before conversion back and clamping.
    pub lab: Image,
    pub clamped: usize,
}

impl MomentMatch {
    pub fn clamp_fraction(&self) -> f64 {
        self.clamped as f64 / self.image.pixels.len() as f64
    }
}

/// Aligns the LAB mean and standard deviation of `src` with `target`.
pub fn lab_moment_match(src: &Image, target: &ChannelStats) -> Result<MomentMatch> {
    if target
        .mean
        .iter()
        .chain(target.std.iter())
        .any(|v| !v.is_finite())
    {
        return Err(validation("target statistics must be finite"));
    }
    let mut lab = rgb_to_lab(src)?;
    let stats = channel_stats(&lab);
    let gain = [0, 1, 2].map(|c| target.std[c] / stats.std[c].max(MOMENT_EPS));
    for px in lab.pixels.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - stats.mean[c]) * gain[c] + target.mean[c];
        }
    }
    let (image, clamped) = lab_to_rgb(&lab)?;
    Ok(MomentMatch {
        image,
        lab,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lab_of(rgb: [f64; 3]) -> [f64; 3] {
        let img = Image::filled(1, 1, rgb).unwrap();
        rgb_to_lab(&img).unwrap().pixel(0, 0)
    }

    #[test]
    fn black_is_lab_origin() {
        let lab = lab_of([0.0, 0.0, 0.0]);
        assert!(lab.iter().all(|v| v.abs() < 1e-12), "{lab:?}");
    }

    #[test]
    fn white_is_reference() {
        let lab = lab_of([1.0, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-9);
        assert!(lab[1].abs() < 1e-3 && lab[2].abs() < 1e-3);
    }

    #[test]
    fn mid_gray_matches_reference_library() {
        // skimage.color.rgb2lab([[[0.5, 0.5, 0.5]]])[..., 0]
        let lab = lab_of([0.5, 0.5, 0.5]);
        assert!((lab[0] - 53.388_964_741_114_32).abs() < 1e-9, "{}", lab[0]);
    }

    #[test]
    fn lab_extremes_invert() {
        let black = Image::from_raw(1, 1, ColorSpace::Lab, vec![0.0, 0.0, 0.0]).unwrap();
        let (rgb, n) = lab_to_rgb(&black).unwrap();
        assert_eq!(n, 0);
        assert!(rgb.pixels().iter().all(|v| v.abs() < 1e-12));
        let white = Image::from_raw(1, 1, ColorSpace::Lab, vec![100.0, 0.0, 0.0]).unwrap();
        let (rgb, _) = lab_to_rgb(&white).unwrap();
        assert!(rgb.pixels().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn out_of_range_input_rejected() {
        let bad = Image::from_raw(1, 1, ColorSpace::Srgb, vec![1.5, 0.0, 0.0]).unwrap();
        assert!(rgb_to_lab(&bad).is_err());
        assert!(Image::srgb(1, 1, vec![-0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn out_of_gamut_lab_reports_clamps() {
        let img = Image::from_raw(1, 2, ColorSpace::Lab, vec![50.0, 0.0, 0.0, 120.0, 90.0, -100.0])
            .unwrap();
        let (rgb, n) = lab_to_rgb(&img).unwrap();
        assert!(n > 0);
        assert!(rgb.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stats_of_constant_and_two_pixel_images() {
        let c = Image::from_raw(2, 2, ColorSpace::Lab, [50.0, 1.0, -2.0].repeat(4)).unwrap();
        let s = channel_stats(&c);
        assert_eq!(s.mean[0], 50.0);
        assert_eq!(s.std, [0.0; 3]);

        let two = Image::from_raw(1, 2, ColorSpace::Lab, vec![40.0, 0.0, 0.0, 60.0, 0.0, 0.0])
            .unwrap();
        let s = channel_stats(&two);
        assert!((s.mean[0] - 50.0).abs() < 1e-12);
        assert!((s.std[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn moment_match_identity_when_stats_agree() {
        let img = Image::srgb(
            1,
            3,
            vec![0.2, 0.4, 0.6, 0.3, 0.3, 0.3, 0.5, 0.45, 0.4],
        )
        .unwrap();
        let stats = channel_stats(&rgb_to_lab(&img).unwrap());
        let out = lab_moment_match(&img, &stats).unwrap();
        for (a, b) in out.image.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn moment_match_of_constant_source_is_pure_shift() {
        let img = Image::filled(2, 2, [0.5, 0.5, 0.5]).unwrap();
        let target = ChannelStats {
            mean: [30.0, 5.0, -5.0],
            std: [4.0, 2.0, 1.0],
        };
        let out = lab_moment_match(&img, &target).unwrap();
        for px in out.lab.pixels().chunks_exact(3) {
            for c in 0..3 {
                assert!((px[c] - target.mean[c]).abs() < 1e-9);
            }
        }
        let expected = lab_pixel_to_srgb_unclamped(target.mean);
        for px in out.image.pixels().chunks_exact(3) {
            for c in 0..3 {
                assert!((px[c] - expected[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_wraps_around() {
        let img = Image::srgb(1, 3, vec![0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3]).unwrap();
        let s = img.shifted(0, 1);
        assert_eq!(s.pixel(0, 0), [0.3; 3]);
        assert_eq!(s.pixel(0, 1), [0.1; 3]);
    }

    #[test]
    fn label_map_validation() {
        assert!(LabelMap::new(1, 2, 3, 255, vec![0, 3]).is_err());
        assert!(LabelMap::new(1, 2, 3, 2, vec![0, 1]).is_err());
        let m = LabelMap::new(1, 3, 3, 255, vec![0, 255, 2]).unwrap();
        assert_eq!(m.histogram(), vec![1, 0, 1]);
    }

    fn image_strategy(max_side: usize) -> impl Strategy<Value = Image> {
        ranged_image_strategy(max_side, 0.0, 1.0)
    }

    fn ranged_image_strategy(max_side: usize, lo: f64, hi: f64) -> impl Strategy<Value = Image> {
        (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
            prop::collection::vec(lo..=hi, h * w * 3)
                .prop_map(move |px| Image::srgb(h, w, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn srgb_lab_round_trip(img in image_strategy(6)) {
            let lab = rgb_to_lab(&img).unwrap();
            let (back, clamped) = lab_to_rgb(&lab).unwrap();
            for (a, b) in back.pixels().iter().zip(img.pixels()) {
                prop_assert!((a - b).abs() < 1e-6, "{a} vs {b} (clamped {clamped})");
            }
        }

        #[test]
        fn stats_permutation_invariant(img in image_strategy(5), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut px: Vec<[f64; 3]> = img.pixels().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
            px.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let perm = Image::srgb(img.height(), img.width(), px.concat()).unwrap();
            let a = channel_stats(&img);
            let b = channel_stats(&perm);
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn matched_stats_hit_target(img in image_strategy(6), m in prop::array::uniform3(-20.0f64..60.0), s in prop::array::uniform3(0.0f64..30.0)) {
            let target = ChannelStats { mean: m, std: s };
            let out = lab_moment_match(&img, &target).unwrap();
            let got = channel_stats(&out.lab);
            for c in 0..3 {
                prop_assert!((got.mean[c] - m[c]).abs() < 1e-6);
                let src_std = channel_stats(&rgb_to_lab(&img).unwrap()).std[c];
                if src_std > MOMENT_EPS {
                    prop_assert!((got.std[c] - s[c]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn moment_match_idempotent(img in image_strategy(5), other in ranged_image_strategy(5, 0.4, 0.6)) {
            let target = channel_stats(&rgb_to_lab(&other).unwrap());
            let once = lab_moment_match(&img, &target).unwrap();
            prop_assume!(once.clamped == 0);
            let twice = lab_moment_match(&once.image, &target).unwrap();
            for (a, b) in once.image.pixels().iter().zip(twice.image.pixels()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
