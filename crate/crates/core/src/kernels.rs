//! Forward and backward kernels over raw NCHW buffers.
//!
//! Every kernel visits its inputs in a fixed order, so results are
//! bit-reproducible for identical inputs.

use crate::scalar::{gemm, MatRef, Scalar};

/// Stride, dilation and zero padding of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self { stride: 1, dilation: 1, padding: 0 }
    }
}

impl ConvOpts {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self { stride, dilation, padding }
    }

    /// Output extent along one axis, or `None` when the dilated kernel does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || kernel == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Geometry of one convolution, resolved against concrete input extents.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub opts: ConvOpts,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, stride-1, unpadded convolution reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    /// Output positions `o` along one axis whose input tap `o*stride + k*dil - pad` is in range.
    fn valid_range(&self, k: usize, out: usize, input: usize) -> (usize, usize) {
        let ConvOpts { stride, dilation, padding } = self.opts;
        let offset = (k * dilation) as isize - padding as isize;
        // smallest o with o*stride + offset >= 0
        let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
        // largest o with o*stride + offset <= input - 1, exclusive
        let hi_num = input as isize - 1 - offset;
        let hi = if hi_num < 0 { 0 } else { (hi_num as usize / stride + 1).min(out) };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    let s = g.opts.stride;
    let d = g.opts.dilation;
    let pad = g.opts.padding;
    col.fill(T::zero());
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky * d - pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        out_row[ox] = src[ox * s + kx * d - pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    let s = g.opts.stride;
    let d = g.opts.dilation;
    let pad = g.opts.padding;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky * d - pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let in_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        dst[ox * s + kx * d - pad] += in_row[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_per = g.ci * g.h * g.w;
    let out_per = g.co * p;
    let mut out = vec![T::zero(); g.n * out_per];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    let wmat = MatRef::new(w, g.co, rows);
    for n in 0..g.n {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let on = &mut out[n * out_per..(n + 1) * out_per];
        for (co, chunk) in on.chunks_mut(p).enumerate() {
            chunk.fill(b[co]);
        }
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        gemm(wmat, MatRef::new(cols, rows, p), T::one(), on);
    }
    out
}

/// Gradients of a convolution. Each requested buffer is returned freshly allocated.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_w, want_b) = want;
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_per = g.ci * g.h * g.w;
    let out_per = g.co * p;
    let mut dx = want_x.then(|| vec![T::zero(); g.n * in_per]);
    let mut dw = want_w.then(|| vec![T::zero(); g.co * rows]);
    let mut db = want_b.then(|| vec![T::zero(); g.co]);
    let mut col = if g.is_pointwise() || !want_w { Vec::new() } else { vec![T::zero(); rows * p] };
    let mut dcol = if g.is_pointwise() || !want_x { Vec::new() } else { vec![T::zero(); rows * p] };
    let wmat = MatRef::new(w, g.co, rows);
    for n in 0..g.n {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let gn = &dout[n * out_per..(n + 1) * out_per];
        let gmat = MatRef::new(gn, g.co, p);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gn.chunks(p).enumerate() {
                let mut s = T::zero();
                for &v in chunk {
                    s += v;
                }
                db[co] += s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            gemm(gmat, MatRef::new(cols, rows, p).t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                gemm(wmat.t(), gmat, T::one(), dxn);
            } else {
                gemm(wmat.t(), gmat, T::zero(), &mut dcol);
                col2im_add(g, &dcol, dxn);
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    // Split by sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax cross-entropy over the channel axis of `[N, K, H, W]` logits.
///
/// Returns the mean loss over non-ignored pixels, the softmax probabilities,
/// and the number of counted pixels.
pub(crate) fn softmax_xent_forward<T: Scalar>(
    logits: &[T],
    dims: (usize, usize, usize, usize),
    labels: &[u8],
    ignore: u8,
) -> (T, Vec<T>, usize) {
    let (n, k, h, w) = dims;
    let hw = h * w;
    let mut probs = vec![T::zero(); logits.len()];
    // f64 accumulator: an f32 running sum over many pixels drifts visibly
    let mut total = 0f64;
    let mut count = 0usize;
    for s in 0..n {
        let base = s * k * hw;
        for px in 0..hw {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(logits[base + c * hw + px]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (logits[base + c * hw + px] - m).exp();
                probs[base + c * hw + px] = e;
                z += e;
            }
            for c in 0..k {
                probs[base + c * hw + px] = probs[base + c * hw + px] / z;
            }
            let label = labels[s * hw + px];
            if label != ignore {
                let lse = m + z.ln();
                total += (lse - logits[base + label as usize * hw + px]).to_f64().unwrap();
                count += 1;
            }
        }
    }
    let loss = if count == 0 { T::zero() } else { T::from_f64(total / count as f64).unwrap() };
    (loss, probs, count)
}

pub(crate) fn softmax_xent_backward<T: Scalar>(
    probs: &[T],
    dims: (usize, usize, usize, usize),
    labels: &[u8],
    ignore: u8,
    count: usize,
    upstream: T,
) -> Vec<T> {
    let (n, k, h, w) = dims;
    let hw = h * w;
    let mut g = vec![T::zero(); probs.len()];
    if count == 0 {
        return g;
    }
    let scale = upstream / T::from_usize(count).unwrap();
    for s in 0..n {
        let base = s * k * hw;
        for px in 0..hw {
            let label = labels[s * hw + px];
            if label == ignore {
                continue;
            }
            for c in 0..k {
                let i = base + c * hw + px;
                let target = if c == label as usize { T::one() } else { T::zero() };
                g[i] = (probs[i] - target) * scale;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        let o = ConvOpts::new(2, 1, 1);
        assert_eq!(o.out_extent(64, 3), Some(32));
        assert_eq!(ConvOpts::new(1, 4, 4).out_extent(16, 3), Some(16));
        assert_eq!(ConvOpts::new(1, 3, 0).out_extent(6, 3), None);
        assert_eq!(ConvOpts::new(1, 3, 0).out_extent(7, 3), Some(1));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert!(sigmoid(-200.0f32).is_finite());
        assert_eq!(sigmoid(200.0f64), 1.0);
    }
}
