//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation is appended to a [`Tape`] together with its
//! output value. [`Tape::backward`] replays the record in exact reverse
//! order, accumulating vector-Jacobian products into the operands that need
//! them, and then clears the tape.
//!
//! Parameters enter through [`Tape::param`], which binds the leaf to its
//! entry in a [`ParamSet`]. Frozen parameters become constant leaves, so no
//! gradient is ever computed for them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ConvOpts};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    ScaleBroadcast { gate: Var, x: Var },
    Concat { a: Var, b: Var },
    Upsample { x: Var, factor: usize },
    SoftmaxXent { logits: Var, probs: Vec<T>, labels: Vec<u8>, ignore: u8, count: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    generation: u64,
}

/// Gradients of the leaves that required them, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    generation: u64,
    leaves: HashMap<usize, (Option<usize>, Vec<T>)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.generation, self.generation, "variable from a different tape generation");
        self.leaves.get(&v.idx).map(|(_, g)| g.as_slice())
    }

    /// Adds every parameter gradient into the matching [`ParamSet`] entry.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        let mut bound: Vec<_> = self
            .leaves
            .values()
            .filter_map(|(p, g)| p.map(|p| (p, g)))
            .collect();
        bound.sort_by_key(|(p, _)| *p);
        for (p, g) in bound {
            if p >= params.len() {
                return Err(Error::Precondition("gradient bound to a foreign parameter set".into()));
            }
            params.entry_mut(p).tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.generation, self.generation, "variable from a cleared tape");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { idx: self.nodes.len() - 1, generation: self.generation }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: &[usize],
        data: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_trainable(false), Op::Leaf { param: None }, false)
    }

    /// Records a leaf; it receives a gradient when `t.trainable` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.trainable;
        self.push(t, Op::Leaf { param: None }, needs)
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same variable, so gradients from every use accumulate.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let idx = params.position(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let entry = params.entry(idx);
        let mut value = entry.tensor.clone();
        value.zero_grad();
        let v = self.push(value, Op::Leaf { param: Some(idx) }, !entry.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, opts: ConvOpts) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let (&[n, ci, h, wd], &[co, wci, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        };
        if ci != wci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels, weight expects {wci}"),
            ));
        }
        if bs != [co] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} for {co} output channels")));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::Precondition("stride and dilation must be positive".into()));
        }
        let (Some(oh), Some(ow)) = (opts.out_extent(h, kh), opts.out_extent(wd, kw)) else {
            return Err(Error::Precondition(format!(
                "kernel {kh}x{kw} at dilation {} does not fit {h}x{wd} with padding {}",
                opts.dilation, opts.padding
            )));
        };
        let geom = ConvGeom { n, ci, h, w: wd, co, kh, kw, oh, ow, opts };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let needs = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push_checked("conv2d", &[n, co, oh, ow], out, Op::Conv2d { x, w, b, geom }, needs)
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let out: Vec<T> = src.data().iter().map(|&v| f(v)).collect();
        let needs = self.requires_grad(x);
        self.push_checked(name, &shape, out, op, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(T::zero()), Op::Relu(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let needs = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("add", &shape, out, Op::Add(a, b), needs)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("hadamard", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let needs = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("hadamard", &shape, out, Op::Hadamard(a, b), needs)
    }

    /// Multiplies every channel of `x: [N,K,H,W]` by the single-channel `gate: [N,1,H,W]`.
    pub fn scale_broadcast(&mut self, gate: Var, x: Var) -> Result<Var> {
        let gs = self.value(gate).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        let ok = gs.len() == 4 && xs.len() == 4 && gs[1] == 1 && gs[0] == xs[0] && gs[2..] == xs[2..];
        if !ok {
            return Err(Error::shape("scale_broadcast", format!("gate {gs:?}, x {xs:?}")));
        }
        let (n, k, h, w) = self.value(x).dims4();
        let hw = h * w;
        let gd = self.value(gate).data();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            let gp = &gd[s * hw..(s + 1) * hw];
            for c in 0..k {
                let off = (s * k + c) * hw;
                for (i, o) in out[off..off + hw].iter_mut().enumerate() {
                    *o = gp[i] * xd[off + i];
                }
            }
        }
        let needs = self.requires_grad(gate) || self.requires_grad(x);
        self.push_checked("scale_broadcast", &xs, out, Op::ScaleBroadcast { gate, x }, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let (n, ca, h, w) = self.value(a).dims4();
        let cb = sb[1];
        let hw = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bd[s * cb * hw..(s + 1) * cb * hw]);
        }
        let needs = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("concat_channels", &[n, ca + cb, h, w], out, Op::Concat { a, b }, needs)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Precondition("upsample factor must be at least 1".into()));
        }
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample_nearest", format!("{xs:?}")));
        }
        let (n, c, h, w) = self.value(x).dims4();
        let (fh, fw) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * fh * fw];
        for plane in 0..n * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut out[plane * fh * fw..(plane + 1) * fh * fw];
            for y in 0..fh {
                let srow = &sp[(y / factor) * w..(y / factor + 1) * w];
                for (xo, d) in dp[y * fw..(y + 1) * fw].iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        let needs = self.requires_grad(x);
        self.push_checked("upsample_nearest", &[n, c, fh, fw], out, Op::Upsample { x, factor }, needs)
    }

    /// Mean softmax cross-entropy over pixels whose label is not `ignore`.
    /// Returns zero (with zero gradient) when every pixel is ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 4 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {ls:?}")));
        }
        let dims = self.value(logits).dims4();
        let (n, k, h, w) = dims;
        if labels.len() != n * h * w {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for logits {ls:?}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(Error::Precondition(format!(
                "label {bad} outside [0, {k}) and not the ignore index {ignore}"
            )));
        }
        let (loss, probs, count) =
            kernels::softmax_xent_forward(self.value(logits).data(), dims, labels, ignore);
        check_finite("softmax_cross_entropy", &[loss])?;
        let needs = self.requires_grad(logits);
        let op = Op::SoftmaxXent { logits, probs, labels: labels.to_vec(), ignore, count };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let needs = self.requires_grad(x);
        self.push_checked("sum", &[1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let needs = self.requires_grad(x);
        self.push_checked("mean", &[1], vec![s], Op::Mean(x), needs)
    }

    /// Discards every recorded node and invalidates outstanding variables.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
        self.generation += 1;
    }

    /// Back-propagates from a scalar `loss`, returns leaf gradients, and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let generation = self.generation;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let out = node.value.data();
            let wants = |v: &Var| self.nodes[v.idx].needs_grad;
            match &node.op {
                Op::Leaf { param } => {
                    leaves.insert(i, (*param, g));
                }
                Op::Conv2d { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(
                        geom,
                        self.nodes[x.idx].value.data(),
                        self.nodes[w.idx].value.data(),
                        &g,
                        (wants(x), wants(w), wants(b)),
                    );
                    if let Some(d) = cg.input {
                        accumulate(&mut grads[x.idx], d);
                    }
                    if let Some(d) = cg.weight {
                        accumulate(&mut grads[w.idx], d);
                    }
                    if let Some(d) = cg.bias {
                        accumulate(&mut grads[b.idx], d);
                    }
                }
                Op::Sigmoid(x) => {
                    let d = g.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                    accumulate(&mut grads[x.idx], d);
                }
                Op::Tanh(x) => {
                    let d = g.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                    accumulate(&mut grads[x.idx], d);
                }
                Op::Relu(x) => {
                    let d = g
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.idx], d);
                }
                Op::Add(a, b) => {
                    if wants(b) {
                        accumulate(&mut grads[b.idx], g.clone());
                    }
                    if wants(a) {
                        accumulate(&mut grads[a.idx], g);
                    }
                }
                Op::Hadamard(a, b) => {
                    let (av, bv) = (self.nodes[a.idx].value.data(), self.nodes[b.idx].value.data());
                    if wants(a) {
                        let d = g.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                        accumulate(&mut grads[a.idx], d);
                    }
                    if wants(b) {
                        let d = g.iter().zip(av).map(|(&g, &x)| g * x).collect();
                        accumulate(&mut grads[b.idx], d);
                    }
                }
                Op::ScaleBroadcast { gate, x } => {
                    let (n, k, h, w) = self.nodes[x.idx].value.dims4();
                    let hw = h * w;
                    let gv = self.nodes[gate.idx].value.data();
                    let xv = self.nodes[x.idx].value.data();
                    if wants(x) {
                        let mut d = vec![T::zero(); xv.len()];
                        for s in 0..n {
                            for c in 0..k {
                                let off = (s * k + c) * hw;
                                for p in 0..hw {
                                    d[off + p] = g[off + p] * gv[s * hw + p];
                                }
                            }
                        }
                        accumulate(&mut grads[x.idx], d);
                    }
                    if wants(gate) {
                        let mut d = vec![T::zero(); gv.len()];
                        for s in 0..n {
                            for c in 0..k {
                                let off = (s * k + c) * hw;
                                for p in 0..hw {
                                    d[s * hw + p] += g[off + p] * xv[off + p];
                                }
                            }
                        }
                        accumulate(&mut grads[gate.idx], d);
                    }
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.nodes[a.idx].value.dims4();
                    let cb = self.nodes[b.idx].value.shape()[1];
                    let hw = h * w;
                    let per = (ca + cb) * hw;
                    if wants(a) {
                        let mut d = Vec::with_capacity(n * ca * hw);
                        for s in 0..n {
                            d.extend_from_slice(&g[s * per..s * per + ca * hw]);
                        }
                        accumulate(&mut grads[a.idx], d);
                    }
                    if wants(b) {
                        let mut d = Vec::with_capacity(n * cb * hw);
                        for s in 0..n {
                            d.extend_from_slice(&g[s * per + ca * hw..(s + 1) * per]);
                        }
                        accumulate(&mut grads[b.idx], d);
                    }
                }
                Op::Upsample { x, factor } => {
                    let (n, c, h, w) = self.nodes[x.idx].value.dims4();
                    let (fh, fw) = (h * factor, w * factor);
                    let mut d = vec![T::zero(); n * c * h * w];
                    for plane in 0..n * c {
                        let gp = &g[plane * fh * fw..(plane + 1) * fh * fw];
                        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                        for y in 0..fh {
                            let drow = &mut dp[(y / factor) * w..(y / factor + 1) * w];
                            for (xo, &v) in gp[y * fw..(y + 1) * fw].iter().enumerate() {
                                drow[xo / factor] += v;
                            }
                        }
                    }
                    accumulate(&mut grads[x.idx], d);
                }
                Op::SoftmaxXent { logits, probs, labels, ignore, count } => {
                    let dims = self.nodes[logits.idx].value.dims4();
                    let d = kernels::softmax_xent_backward(probs, dims, labels, *ignore, *count, g[0]);
                    accumulate(&mut grads[logits.idx], d);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.idx].value.numel();
                    accumulate(&mut grads[x.idx], vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.idx].value.numel();
                    let v = g[0] / T::from_usize(n).unwrap();
                    accumulate(&mut grads[x.idx], vec![v; n]);
                }
            }
        }

        for (_, g) in leaves.values() {
            check_finite("backward", g)?;
        }
        self.clear();
        Ok(Grads { generation, leaves })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64).with_trainable(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
        assert!(tape.is_empty());
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::<f32>::new();
        let data = vec![1.5f32, -2.0, 0.25, 3.0];
        let x = tape.leaf(Tensor::from_vec(&[4], data.clone()).unwrap().with_trainable(true));
        let xx = tape.hadamard(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        let g = tape.backward(s).unwrap();
        let expect: Vec<f32> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_trainable(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let x = tape.leaf(Tensor::full(&[3], 1.0).with_trainable(true));
        let y = tape.hadamard(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a", Tensor::full(&[2], 1.0)).unwrap();
        ps.insert("b", Tensor::full(&[2], 3.0)).unwrap();
        ps.set_frozen("a", true).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&ps, "a").unwrap();
        let b = tape.param(&ps, "b").unwrap();
        assert_eq!(tape.param(&ps, "b").unwrap(), b);
        let y = tape.hadamard(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        g.accumulate_into(&mut ps).unwrap();
        assert!(ps.get("a").unwrap().grad().is_none());
        assert_eq!(ps.get("b").unwrap().grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[1], f32::MAX));
        assert!(matches!(tape.add(a, a), Err(Error::NonFinite("add"))));
    }

    #[test]
    fn concat_rejects_mismatched_spatial_extent() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 2]));
        assert!(matches!(tape.concat_channels(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn upsample_block_replicates() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.upsample_nearest(x, 2).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expect);
        let one = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.value(one).data(), tape.value(x).data());
    }
}
