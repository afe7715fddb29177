//! Channel-major (`C×H×W`) layer primitives with explicit backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A stack of `channels` planes of `height × width` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Maps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Maps {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "maps buffer length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Maps) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn scaled(&self, k: f64) -> Maps {
        Maps {
            data: self.data.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    pub fn add_assign(&mut self, other: &Maps) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Column (all channels) at spatial position `p`.
    pub fn column(&self, p: usize) -> Vec<f64> {
        let n = self.plane_len();
        (0..self.channels).map(|c| self.data[c * n + p]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub shape: ConvShape,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn zeros(shape: ConvShape) -> Self {
        Self {
            shape,
            weight: vec![0.0; shape.weight_len()],
            bias: vec![0.0; shape.out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init(shape: ConvShape, rng: &mut impl Rng) -> Self {
        let fan_in = (shape.in_channels * shape.kernel * shape.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        Self {
            shape,
            weight: (0..shape.weight_len()).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; shape.out_channels],
        }
    }

    /// True when the layer reads its input unchanged as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.shape.kernel == 1 && self.shape.stride == 1 && self.shape.padding == 0
    }

    /// Unrolls the receptive fields into a `(in·k·k) × (oh·ow)` matrix.
    fn im2col(&self, input: &Maps, oh: usize, ow: usize) -> Vec<f64> {
        let s = self.shape;
        let (h, w, k) = (input.height, input.width, s.kernel);
        let p = oh * ow;
        let mut col = vec![0.0; s.in_channels * k * k * p];
        for i in 0..s.in_channels {
            let plane = input.plane(i);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((i * k + ky) * k + kx) * p..][..p];
                    let (x0, x1) = valid_range(ow, w, kx, s.stride, s.padding);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 * s.stride + kx - s.padding;
                    for y in 0..oh {
                        let iy = (y * s.stride + ky) as isize - s.padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[y * ow + x0..y * ow + x1];
                        if s.stride == 1 {
                            dst.copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d = src[ix0 + j * s.stride];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Conv::im2col`].
    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Maps {
        let s = self.shape;
        let k = s.kernel;
        let p = oh * ow;
        let mut out = Maps::zeros(s.in_channels, h, w);
        for i in 0..s.in_channels {
            let plane = &mut out.data[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((i * k + ky) * k + kx) * p..][..p];
                    let (x0, x1) = valid_range(ow, w, kx, s.stride, s.padding);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 * s.stride + kx - s.padding;
                    for y in 0..oh {
                        let iy = (y * s.stride + ky) as isize - s.padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[y * ow + x0..y * ow + x1];
                        if s.stride == 1 {
                            for (d, v) in dst[ix0..].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in src.iter().enumerate() {
                                dst[ix0 + j * s.stride] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &Maps) -> Maps {
        let s = self.shape;
        debug_assert_eq!(input.channels, s.in_channels);
        let (oh, ow) = s.output_size(input.height, input.width);
        let p = oh * ow;
        let r = s.in_channels * s.kernel * s.kernel;
        let mut out = Maps::zeros(s.out_channels, oh, ow);
        for o in 0..s.out_channels {
            out.data[o * p..(o + 1) * p].fill(self.bias[o]);
        }
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            &input.data
        } else {
            owned = self.im2col(input, oh, ow);
            &owned
        };
        // out[O×P] += W[O×R] · col[R×P]
        gemm(s.out_channels, r, p, &self.weight, false, col, false, &mut out.data);
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        input: &Maps,
        d_out: &Maps,
        grad: &mut Conv,
        need_input_grad: bool,
    ) -> Option<Maps> {
        let s = self.shape;
        let (oh, ow) = (d_out.height, d_out.width);
        let p = oh * ow;
        let r = s.in_channels * s.kernel * s.kernel;
        for o in 0..s.out_channels {
            grad.bias[o] += d_out.plane(o).iter().sum::<f64>();
        }
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            &input.data
        } else {
            owned = self.im2col(input, oh, ow);
            &owned
        };
        // dW[O×R] += dY[O×P] · colᵀ
        gemm(s.out_channels, p, r, &d_out.data, false, col, true, &mut grad.weight);
        if !need_input_grad {
            return None;
        }
        // dcol[R×P] = Wᵀ · dY
        let mut d_col = vec![0.0; r * p];
        gemm(r, s.out_channels, p, &self.weight, true, &d_out.data, false, &mut d_col);
        if self.is_pointwise() {
            return Some(Maps::from_vec(s.in_channels, input.height, input.width, d_col));
        }
        Some(self.col2im(&d_col, input.height, input.width, oh, ow))
    }
}

/// `c[m×n] += op(a)[m×k] · op(b)[k×n]`, all row-major; `op` transposes when
/// the flag is set (`a` is then stored `k×m`, `b` stored `n×k`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the extents described by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `[x0, x1)` whose input column for kernel offset `kx` is in bounds.
fn valid_range(ow: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= x*stride + kx - pad < w
    let x0 = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let limit = w + pad - kx; // x*stride < limit
    let x1 = if limit == 0 { 0 } else { ((limit - 1) / stride + 1).min(ow) };
    (x0.min(x1), x1)
}

pub fn relu_inplace(m: &mut Maps) {
    for v in &mut m.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the post-activation output is not positive.
pub fn relu_backward_inplace(activated: &Maps, grad: &mut Maps) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Interpolation table for one axis of a bilinear resize with half-pixel
/// centres and edge clamping.
#[derive(Debug, Clone)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut t = AxisTable {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(pos - lo as f64);
        }
        t
    }
}

pub fn upsample_bilinear(input: &Maps, factor: usize) -> Maps {
    let (oh, ow) = (input.height * factor, input.width * factor);
    let ty = AxisTable::new(input.height, oh);
    let tx = AxisTable::new(input.width, ow);
    let mut out = Maps::zeros(input.channels, oh, ow);
    let w = input.width;
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for x in 0..ow {
                let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(d_out: &Maps, factor: usize) -> Maps {
    let (h, w) = (d_out.height / factor, d_out.width / factor);
    let ty = AxisTable::new(h, d_out.height);
    let tx = AxisTable::new(w, d_out.width);
    let mut d_in = Maps::zeros(d_out.channels, h, w);
    let (oh, ow) = (d_out.height, d_out.width);
    for c in 0..d_out.channels {
        let g = d_out.plane(c);
        let dst = &mut d_in.data[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for x in 0..ow {
                let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
                let v = g[y * ow + x];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    d_in
}
