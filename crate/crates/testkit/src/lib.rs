//! Independent reference implementations for the test suites.
//!
//! Nothing here shares code with the kernels under test: convolution is six
//! plain loops, the Conv-LSTM is the five recurrence formulas written out,
//! and gradients come from central differences.

pub mod gradsuite;
pub mod suites;

use tseg::Rng64;

/// Uniform values in `[lo, hi)`, rounded to the nearest `f32` so the same
/// numbers can feed both precisions exactly.
pub fn random_vec(rng: &mut Rng64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| (lo + (hi - lo) * rng.next_f64()) as f32 as f64).collect()
}

/// Central differences of `f` at `x` with step `h`.
///
/// A coordinate whose estimate at `h` disagrees with the estimate at `h/2`
/// by more than `kink_tol` sits near a non-differentiable point such as a
/// relu hinge; it is reported as `None` and must be skipped. The
/// disagreement is measured on the same scale as [`compare`]. A hinge inside
/// the stencil shifts the `h` estimate by at most twice this disagreement,
/// so `kink_tol` should be well under the tolerance being checked.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    kink_tol: f64,
) -> Vec<Option<f64>> {
    let mut xp = x.to_vec();
    let mut d = |i: usize, step: f64, xp: &mut Vec<f64>| {
        xp[i] = x[i] + step;
        let up = f(xp);
        xp[i] = x[i] - step;
        let down = f(xp);
        xp[i] = x[i];
        (up - down) / (2.0 * step)
    };
    let pairs: Vec<(f64, f64)> = (0..x.len()).map(|i| (d(i, h, &mut xp), d(i, h / 2.0, &mut xp))).collect();
    let floor = error_floor(pairs.iter().map(|p| p.0));
    pairs
        .into_iter()
        .map(|(full, half)| {
            let scale = full.abs().max(half.abs()).max(floor);
            ((full - half).abs() <= kink_tol * scale).then_some(full)
        })
        .collect()
}

fn error_floor(numeric: impl Iterator<Item = f64>) -> f64 {
    let peak = numeric.fold(0.0f64, |m, v| m.max(v.abs()));
    (1e-2 * peak).max(1e-12)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Index of the worst coordinate.
    pub worst: usize,
    pub checked: usize,
    pub skipped: usize,
}

/// Per-coordinate `|a - n| / max(|a|, |n|, floor)` where `floor` is 1% of
/// the largest numeric magnitude, so near-zero entries are judged on the
/// scale of the whole gradient rather than on their own.
pub fn compare(analytic: &[f64], numeric: &[Option<f64>]) -> GradReport {
    assert_eq!(analytic.len(), numeric.len());
    let floor = error_floor(numeric.iter().flatten().copied());
    let mut r = GradReport { max_rel_err: 0.0, worst: 0, checked: 0, skipped: 0 };
    for (i, (&a, n)) in analytic.iter().zip(numeric).enumerate() {
        let Some(n) = *n else {
            r.skipped += 1;
            continue;
        };
        r.checked += 1;
        let e = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if e > r.max_rel_err {
            r.max_rel_err = e;
            r.worst = i;
        }
    }
    r
}

/// Direct convolution with zero padding: `x` is `[n, ci, h, w]`, `weight` is
/// `[co, ci, kh, kw]`. Returns the output and its shape.
#[allow(clippy::too_many_arguments)]
pub fn direct_conv2d(
    x: &[f64],
    xs: [usize; 4],
    weight: &[f64],
    ws: [usize; 4],
    bias: &[f64],
    stride: usize,
    dilation: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = xs;
    let [co, wci, kh, kw] = ws;
    assert_eq!(ci, wci);
    let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky * dilation) as isize - padding as isize;
                                let ix = (xo * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((o * ci + c) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Weight and bias of one 3x3, padding-1 gate convolution over `concat(F, H)`.
pub struct GateWeights<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

/// One Conv-LSTM step written out formula by formula.
///
/// `f` is `[n, cf, h, w]`, `hidden` and `cell` are `[n, nh, h, w]`; gates
/// are in the order input, forget, output, candidate. Returns `(H', C')`.
pub fn lstm_step(
    f: &[f64],
    hidden: &[f64],
    cell: &[f64],
    dims: (usize, usize, usize, usize, usize),
    gates: [GateWeights<'_>; 4],
) -> (Vec<f64>, Vec<f64>) {
    let (n, cf, nh, h, w) = dims;
    let hw = h * w;
    let cin = cf + nh;
    let mut x = vec![0.0; n * cin * hw];
    for b in 0..n {
        x[b * cin * hw..b * cin * hw + cf * hw].copy_from_slice(&f[b * cf * hw..(b + 1) * cf * hw]);
        x[b * cin * hw + cf * hw..(b + 1) * cin * hw].copy_from_slice(&hidden[b * nh * hw..(b + 1) * nh * hw]);
    }
    let pre: Vec<Vec<f64>> = gates
        .iter()
        .map(|g| direct_conv2d(&x, [n, cin, h, w], g.weight, [nh, cin, 3, 3], g.bias, 1, 1, 1).0)
        .collect();
    let mut h_next = vec![0.0; cell.len()];
    let mut c_next = vec![0.0; cell.len()];
    for j in 0..cell.len() {
        let i_gate = sigmoid(pre[0][j]);
        let f_gate = sigmoid(pre[1][j]);
        let o_gate = sigmoid(pre[2][j]);
        let g = pre[3][j].tanh();
        c_next[j] = f_gate * cell[j] + i_gate * g;
        h_next[j] = o_gate * c_next[j].tanh();
    }
    (h_next, c_next)
}

/// `P(X <= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_cdf(n: u64, p: f64, k: u64) -> f64 {
    let mut total = 0.0;
    let mut coeff = 1.0;
    for i in 0..=k.min(n) {
        if i > 0 {
            coeff *= (n - i + 1) as f64 / i as f64;
        }
        total += coeff * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
    }
    total
}
