//! Numeric kernels on `[channels, height, width]` tensors.
//!
//! Every forward kernel here has a matching backward kernel; the plain
//! inference path, the autodiff tape and the synthesis queue all call into
//! the same code so they agree bit-for-bit where they overlap.

use crate::tensor::{matmul, Scalar, Tensor};

/// Geometry of a stride-1 dilated 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub dil_h: usize,
    pub dil_w: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeometry {
    pub fn pointwise() -> Self {
        Self {
            kh: 1,
            kw: 1,
            dil_h: 1,
            dil_w: 1,
            pad_top: 0,
            pad_bottom: 0,
            pad_left: 0,
            pad_right: 0,
        }
    }

    /// Causal along height (all padding on top), centered along width.
    /// Output has the same spatial size as the input. `kw` must be odd.
    pub fn height_causal(kh: usize, kw: usize, dil_h: usize, dil_w: usize) -> Self {
        assert!(kw % 2 == 1, "width kernel must be odd, got {kw}");
        let side = (kw - 1) / 2 * dil_w;
        Self {
            kh,
            kw,
            dil_h,
            dil_w,
            pad_top: (kh - 1) * dil_h,
            pad_bottom: 0,
            pad_left: side,
            pad_right: side,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = h + self.pad_top + self.pad_bottom - (self.kh - 1) * self.dil_h;
        let wo = w + self.pad_left + self.pad_right - (self.kw - 1) * self.dil_w;
        (ho, wo)
    }

    /// Number of past input rows a height-causal layer needs to produce a row.
    pub fn history_rows(&self) -> usize {
        (self.kh - 1) * self.dil_h
    }
}

fn im2col<T: Scalar>(input: &[T], cin: usize, h: usize, w: usize, g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_dims(h, w);
    let n = ho * wo;
    let mut cols = vec![T::zero(); cin * g.kh * g.kw * n];
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let r = (c * g.kh + a) * g.kw + b;
                let row = &mut cols[r * n..(r + 1) * n];
                fill_col_row(plane, h, w, g, a, b, ho, wo, row);
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn fill_col_row<T: Scalar>(
    plane: &[T],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    a: usize,
    b: usize,
    ho: usize,
    wo: usize,
    row: &mut [T],
) {
    let dy = (a * g.dil_h) as isize - g.pad_top as isize;
    let dx = (b * g.dil_w) as isize - g.pad_left as isize;
    for oy in 0..ho {
        let iy = oy as isize + dy;
        let out = &mut row[oy * wo..(oy + 1) * wo];
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
        copy_shifted(src, dx, out);
    }
}

/// `out[x] = src[x + dx]` where in range, untouched (zero) elsewhere.
#[inline]
fn copy_shifted<T: Copy>(src: &[T], dx: isize, out: &mut [T]) {
    let w = src.len() as isize;
    let lo = (-dx).max(0).min(out.len() as isize) as usize;
    let hi = (w - dx).clamp(0, out.len() as isize) as usize;
    if lo < hi {
        let s = (lo as isize + dx) as usize;
        out[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let (ho, wo) = g.out_dims(h, w);
    let n = ho * wo;
    let mut out = vec![T::zero(); cin * h * w];
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let r = (c * g.kh + a) * g.kw + b;
                let row = &cols[r * n..(r + 1) * n];
                let dy = (a * g.dil_h) as isize - g.pad_top as isize;
                let dx = (b * g.dil_w) as isize - g.pad_left as isize;
                for oy in 0..ho {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = ox as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], per_channel: usize) {
    for (o, &b) in bias.iter().enumerate() {
        out[o * per_channel..(o + 1) * per_channel]
            .iter_mut()
            .for_each(|v| *v += b);
    }
}

/// Dilated 2-D convolution. `input` is `[cin, h, w]`, `weight` is
/// `[cout, cin, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let (cin, h, w) = input.dims3();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight rank");
    assert_eq!(ws[1], cin, "conv input channels");
    assert_eq!((ws[2], ws[3]), (g.kh, g.kw), "conv kernel size");
    let cout = ws[0];
    let (ho, wo) = g.out_dims(h, w);
    let n = ho * wo;
    let k = cin * g.kh * g.kw;
    let mut out = vec![T::zero(); cout * n];
    if g.is_pointwise() {
        matmul(weight.data(), false, input.data(), false, &mut out, cout, k, n, false);
    } else {
        let cols = im2col(input.data(), cin, h, w, g);
        matmul(weight.data(), false, &cols, false, &mut out, cout, k, n, false);
    }
    if let Some(b) = bias {
        assert_eq!(b.len(), cout, "conv bias length");
        add_bias(&mut out, b, n);
    }
    Tensor::from_vec(&[cout, ho, wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let (cin, h, w) = input.dims3();
    let cout = weight.shape()[0];
    let (ho, wo) = g.out_dims(h, w);
    let n = ho * wo;
    let k = cin * g.kh * g.kw;
    assert_eq!(grad_out.numel(), cout * n, "conv grad_out size");

    let owned_cols;
    let cols: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        owned_cols = im2col(input.data(), cin, h, w, g);
        &owned_cols
    };
    let mut gw = vec![T::zero(); cout * k];
    matmul(grad_out.data(), false, cols, true, &mut gw, cout, n, k, false);

    let gb = (0..cout)
        .map(|o| grad_out.data()[o * n..(o + 1) * n].iter().copied().sum())
        .collect();

    let gi = need_input.then(|| {
        let mut gcols = vec![T::zero(); k * n];
        matmul(weight.data(), true, grad_out.data(), false, &mut gcols, k, cout, n, false);
        let data = if g.is_pointwise() {
            gcols
        } else {
            col2im(&gcols, cin, h, w, g)
        };
        Tensor::from_vec(&[cin, h, w], data)
    });

    ConvGrads {
        input: gi,
        weight: Tensor::from_vec(weight.shape(), gw),
        bias: gb,
    }
}

/// One output row of a height-causal convolution.
///
/// `taps[a]` is input row `i - (kh - 1 - a) * dil_h` laid out `[cin, w]`, or
/// `None` when that row lies in the top padding. Returns `[cout, w]`.
pub fn conv2d_row<T: Scalar>(
    taps: &[Option<&[T]>],
    cin: usize,
    w: usize,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    assert_eq!(taps.len(), g.kh, "conv2d_row taps");
    let cout = weight.shape()[0];
    let k = cin * g.kh * g.kw;
    let wo = w + g.pad_left + g.pad_right - (g.kw - 1) * g.dil_w;
    assert_eq!(wo, w, "conv2d_row requires width-preserving geometry");
    let mut cols = vec![T::zero(); k * w];
    for c in 0..cin {
        for (a, tap) in taps.iter().enumerate() {
            let Some(row) = tap else { continue };
            let src = &row[c * w..(c + 1) * w];
            for b in 0..g.kw {
                let r = (c * g.kh + a) * g.kw + b;
                let dx = (b * g.dil_w) as isize - g.pad_left as isize;
                copy_shifted(src, dx, &mut cols[r * w..(r + 1) * w]);
            }
        }
    }
    let mut out = vec![T::zero(); cout * w];
    matmul(weight.data(), false, &cols, false, &mut out, cout, k, w, false);
    if let Some(b) = bias {
        add_bias(&mut out, b, w);
    }
    out
}

/// `[cout, cin]` pointwise projection of a `[cin, n]` slice.
pub fn pointwise<T: Scalar>(x: &[T], cin: usize, weight: &Tensor<T>, bias: Option<&[T]>) -> Vec<T> {
    let cout = weight.shape()[0];
    assert_eq!(weight.numel(), cout * cin, "pointwise weight size");
    let n = x.len() / cin;
    let mut out = vec![T::zero(); cout * n];
    matmul(weight.data(), false, x, false, &mut out, cout, cin, n, false);
    if let Some(b) = bias {
        add_bias(&mut out, b, n);
    }
    out
}

/// Parameters of a strided transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposeGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl TransposeGeometry {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride_h + self.kh - 2 * self.pad_h,
            (w - 1) * self.stride_w + self.kw - 2 * self.pad_w,
        )
    }
}

/// Transposed 2-D convolution; `weight` is `[cin, cout, kh, kw]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &TransposeGeometry,
) -> Tensor<T> {
    let (cin, h, w) = input.dims3();
    let ws = weight.shape();
    assert_eq!(ws[0], cin, "transposed conv input channels");
    let cout = ws[1];
    let (ho, wo) = g.out_dims(h, w);
    let mut out = vec![T::zero(); cout * ho * wo];
    let x = input.data();
    let wt = weight.data();
    for ci in 0..cin {
        for co in 0..cout {
            let kbase = (ci * cout + co) * g.kh * g.kw;
            let dst = &mut out[co * ho * wo..(co + 1) * ho * wo];
            for y in 0..h {
                for a in 0..g.kh {
                    let oy = (y * g.stride_h + a) as isize - g.pad_h as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let drow = &mut dst[oy as usize * wo..(oy as usize + 1) * wo];
                    for xi in 0..w {
                        let v = x[(ci * h + y) * w + xi];
                        for b in 0..g.kw {
                            let ox = (xi * g.stride_w + b) as isize - g.pad_w as isize;
                            if ox >= 0 && ox < wo as isize {
                                drow[ox as usize] += v * wt[kbase + a * g.kw + b];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, ho * wo);
    }
    Tensor::from_vec(&[cout, ho, wo], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &TransposeGeometry,
) -> ConvGrads<T> {
    let (cin, h, w) = input.dims3();
    let cout = weight.shape()[1];
    let (ho, wo) = g.out_dims(h, w);
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gi = vec![T::zero(); cin * h * w];
    let mut gw = vec![T::zero(); weight.numel()];
    for ci in 0..cin {
        for co in 0..cout {
            let kbase = (ci * cout + co) * g.kh * g.kw;
            let src = &go[co * ho * wo..(co + 1) * ho * wo];
            for y in 0..h {
                for a in 0..g.kh {
                    let oy = (y * g.stride_h + a) as isize - g.pad_h as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let srow = &src[oy as usize * wo..(oy as usize + 1) * wo];
                    for xi in 0..w {
                        let idx = (ci * h + y) * w + xi;
                        let v = x[idx];
                        let mut acc = T::zero();
                        for b in 0..g.kw {
                            let ox = (xi * g.stride_w + b) as isize - g.pad_w as isize;
                            if ox >= 0 && ox < wo as isize {
                                let gv = srow[ox as usize];
                                acc += gv * wt[kbase + a * g.kw + b];
                                gw[kbase + a * g.kw + b] += v * gv;
                            }
                        }
                        gi[idx] += acc;
                    }
                }
            }
        }
    }
    let gb = (0..cout)
        .map(|o| go[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum())
        .collect();
    ConvGrads {
        input: Some(Tensor::from_vec(&[cin, h, w], gi)),
        weight: Tensor::from_vec(weight.shape(), gw),
        bias: gb,
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Gated activation: first half of the channels through tanh, second half
/// through a sigmoid, multiplied. `pre` holds `2c` channels of `n` values.
pub fn gate<T: Scalar>(pre: &[T], c: usize) -> Vec<T> {
    let n = pre.len() / (2 * c);
    let (a, b) = pre.split_at(c * n);
    a.iter().zip(b).map(|(&x, &y)| x.tanh() * sigmoid(y)).collect()
}

pub fn gate_backward<T: Scalar>(pre: &[T], grad_out: &[T], c: usize) -> Vec<T> {
    let n = pre.len() / (2 * c);
    let (a, b) = pre.split_at(c * n);
    let mut out = vec![T::zero(); pre.len()];
    let (ga, gb) = out.split_at_mut(c * n);
    for i in 0..c * n {
        let t = a[i].tanh();
        let s = sigmoid(b[i]);
        ga[i] = grad_out[i] * s * (T::one() - t * t);
        gb[i] = grad_out[i] * t * s * (T::one() - s);
    }
    out
}

/// `w = g · v / ‖v‖` with one norm and one magnitude per slice along dim 0.
/// A zero direction yields a zero weight.
pub fn weight_norm<T: Scalar>(v: &Tensor<T>, g: &[T]) -> Tensor<T> {
    let rows = v.shape()[0];
    assert_eq!(g.len(), rows, "weight-norm magnitude length");
    let per = v.numel() / rows;
    let mut out = v.data().to_vec();
    for (o, chunk) in out.chunks_mut(per).enumerate() {
        let norm = chunk.iter().map(|&x| x * x).sum::<T>().sqrt();
        let k = if norm > T::zero() { g[o] / norm } else { T::zero() };
        chunk.iter_mut().for_each(|x| *x *= k);
    }
    Tensor::from_vec(v.shape(), out)
}

/// Returns `(grad_v, grad_g)`.
pub fn weight_norm_backward<T: Scalar>(v: &Tensor<T>, g: &[T], grad_w: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let rows = v.shape()[0];
    let per = v.numel() / rows;
    let mut gv = vec![T::zero(); v.numel()];
    let mut gg = vec![T::zero(); rows];
    for o in 0..rows {
        let vs = &v.data()[o * per..(o + 1) * per];
        let gs = &grad_w.data()[o * per..(o + 1) * per];
        let norm = vs.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            continue;
        }
        let dot: T = vs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        gg[o] = dot / norm;
        let k1 = g[o] / norm;
        let k2 = g[o] * dot / (norm * norm * norm);
        for ((dst, &vv), &gw) in gv[o * per..(o + 1) * per].iter_mut().zip(vs).zip(gs) {
            *dst = k1 * gw - k2 * vv;
        }
    }
    (Tensor::from_vec(v.shape(), gv), gg)
}

#[inline]
pub fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}
