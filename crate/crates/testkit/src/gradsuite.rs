//! Finite-difference checks for every differentiable tape operation and for
//! a full multi-frame model pass.
//!
//! Each case is evaluated three ways from the same inputs: analytic
//! gradients in `f64`, analytic gradients in `f32`, and central differences
//! of the `f64` forward pass (step `1e-4`). The first two are compared with
//! the third.

use tseg::nets::{parameter_manifest, ModelConfig, SegModel};
use tseg::{ConvOpts, ParamSet, Result, Rng64, Scalar, Tape, Tensor, Var};

use crate::{central_difference, compare, random_vec, GradReport};

pub const FD_STEP: f64 = 1e-4;
const KINK_TOL: f64 = 1e-7;

#[derive(Clone, Debug)]
pub enum OpKind {
    Conv2d { kernel: usize, opts: ConvOpts },
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Hadamard,
    ScaleBroadcast,
    Concat,
    Upsample(usize),
    SoftmaxXent { labels: Vec<u8>, ignore: u8 },
    Sum,
    Mean,
    /// conv2d, then sigmoid, then cross-entropy.
    ConvSigmoidXent { labels: Vec<u8> },
}

#[derive(Clone, Debug)]
pub struct OpCase {
    pub name: &'static str,
    pub kind: OpKind,
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
}

fn dims(rng: &mut Rng64, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

/// The op cases for one seed, with randomized small shapes.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = Rng64::stream(seed, &[0x6772_6164]);
    let n = dims(&mut r, 1, 2);
    let c = dims(&mut r, 1, 3);
    let h = dims(&mut r, 2, 5);
    let w = dims(&mut r, 2, 5);
    let x = vec![n, c, h, w];
    let kernel = dims(&mut r, 1, 3);
    let opts = ConvOpts::new(dims(&mut r, 1, 2), dims(&mut r, 1, 2), dims(&mut r, 0, 2));
    let co = dims(&mut r, 1, 3);
    let ci = dims(&mut r, 1, 3);
    let (ch, cw) = (dims(&mut r, 5, 7), dims(&mut r, 5, 7));
    let k = dims(&mut r, 2, 6);
    let label = |r: &mut Rng64, n: usize, k: usize, ignore_every: usize| -> Vec<u8> {
        (0..n).map(|i| if i % ignore_every == 1 { 255 } else { r.below(k as u64) as u8 }).collect()
    };
    let xent_labels = label(&mut r, n * h * w, k, 4);
    let cs_labels = label(&mut r, n * ch * cw, 2, 5);
    let case = |name, kind, shapes| OpCase { name, kind, shapes, seed };
    vec![
        case(
            "conv2d",
            OpKind::Conv2d { kernel, opts },
            vec![vec![n, ci, ch, cw], vec![co, ci, kernel, kernel], vec![co]],
        ),
        case("sigmoid", OpKind::Sigmoid, vec![x.clone()]),
        case("tanh", OpKind::Tanh, vec![x.clone()]),
        case("relu", OpKind::Relu, vec![x.clone()]),
        case("add", OpKind::Add, vec![x.clone(), x.clone()]),
        case("hadamard", OpKind::Hadamard, vec![x.clone(), x.clone()]),
        case("scale_broadcast", OpKind::ScaleBroadcast, vec![vec![n, 1, h, w], x.clone()]),
        case("concat_channels", OpKind::Concat, vec![x.clone(), vec![n, dims(&mut r, 1, 2), h, w]]),
        case("upsample_nearest", OpKind::Upsample(dims(&mut r, 1, 3)), vec![x.clone()]),
        case(
            "softmax_cross_entropy",
            OpKind::SoftmaxXent { labels: xent_labels, ignore: 255 },
            vec![vec![n, k, h, w]],
        ),
        case("sum", OpKind::Sum, vec![x.clone()]),
        case("mean", OpKind::Mean, vec![x.clone()]),
        case(
            "conv_sigmoid_xent",
            OpKind::ConvSigmoidXent { labels: cs_labels },
            vec![vec![n, 3, ch, cw], vec![2, 3, 3, 3], vec![2]],
        ),
    ]
}

fn lit<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Reduces a tensor-valued output to a scalar with fixed random weights.
fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).numel();
    let mut r = Rng64::stream(seed, &[0x7765_6967]);
    let weights = Tensor::from_vec(&shape, lit(&random_vec(&mut r, n, -1.0, 1.0)))?;
    let wv = tape.constant(weights);
    let p = tape.hadamard(y, wv)?;
    tape.sum(p)
}

fn build<T: Scalar>(case: &OpCase, tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let y = match &case.kind {
        OpKind::Conv2d { opts, .. } => tape.conv2d(xs[0], xs[1], xs[2], *opts)?,
        OpKind::Sigmoid => tape.sigmoid(xs[0])?,
        OpKind::Tanh => tape.tanh(xs[0])?,
        OpKind::Relu => tape.relu(xs[0])?,
        OpKind::Add => tape.add(xs[0], xs[1])?,
        OpKind::Hadamard => tape.hadamard(xs[0], xs[1])?,
        OpKind::ScaleBroadcast => tape.scale_broadcast(xs[0], xs[1])?,
        OpKind::Concat => tape.concat_channels(xs[0], xs[1])?,
        OpKind::Upsample(f) => tape.upsample_nearest(xs[0], *f)?,
        OpKind::SoftmaxXent { labels, ignore } => return tape.softmax_cross_entropy(xs[0], labels, *ignore),
        OpKind::Sum => return tape.sum(xs[0]),
        OpKind::Mean => return tape.mean(xs[0]),
        OpKind::ConvSigmoidXent { labels } => {
            let z = tape.conv2d(xs[0], xs[1], xs[2], ConvOpts::new(1, 1, 1))?;
            let s = tape.sigmoid(z)?;
            return tape.softmax_cross_entropy(s, labels, 255);
        }
    };
    weighted_sum(tape, y, case.seed)
}

fn case_inputs(case: &OpCase) -> Vec<Vec<f64>> {
    let mut r = Rng64::stream(case.seed, &[0x696e_7075, case.name.len() as u64]);
    case.shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            match case.kind {
                // keep gates inside (0, 1) like real sigmoid outputs
                OpKind::ScaleBroadcast if s[1] == 1 => random_vec(&mut r, n, 0.05, 0.95),
                OpKind::SoftmaxXent { .. } => random_vec(&mut r, n, -3.0, 3.0),
                _ => random_vec(&mut r, n, -1.0, 1.0),
            }
        })
        .collect()
}

fn value<T: Scalar>(case: &OpCase, inputs: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::<T>::new();
    let xs: Vec<Var> = case
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, v)| tape.constant(Tensor::from_vec(s, lit(v)).unwrap()))
        .collect();
    let loss = build(case, &mut tape, &xs).unwrap();
    tape.value(loss).item().to_f64().unwrap()
}

fn analytic<T: Scalar>(case: &OpCase, inputs: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = Tape::<T>::new();
    let xs: Vec<Var> = case
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, v)| tape.leaf(Tensor::from_vec(s, lit(v)).unwrap().with_trainable(true)))
        .collect();
    let loss = build(case, &mut tape, &xs).unwrap();
    let grads = tape.backward(loss).unwrap();
    xs.iter()
        .zip(inputs)
        .flat_map(|(&v, x)| match grads.get(v) {
            Some(g) => g.iter().map(|g| g.to_f64().unwrap()).collect::<Vec<_>>(),
            None => vec![0.0; x.len()],
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub f64_mode: GradReport,
    pub f32_mode: GradReport,
}

/// Checks one op case in both precisions against the same numeric gradient.
pub fn check_op(case: &OpCase) -> CaseResult {
    let inputs = case_inputs(case);
    let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let flat: Vec<f64> = inputs.concat();
    let split = |flat: &[f64]| {
        let mut out = Vec::new();
        let mut at = 0;
        for &l in &lens {
            out.push(flat[at..at + l].to_vec());
            at += l;
        }
        out
    };
    let mut f = |x: &[f64]| value::<f64>(case, &split(x));
    let numeric = central_difference(&mut f, &flat, FD_STEP, KINK_TOL);
    CaseResult {
        name: case.name,
        seed: case.seed,
        f64_mode: compare(&analytic::<f64>(case, &inputs), &numeric),
        f32_mode: compare(&analytic::<f32>(case, &inputs), &numeric),
    }
}

/// Tiny model used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { feature_channels: 4, hidden_channels: 2, num_classes: 3 }
}

pub const MODEL_FRAMES: usize = 3;
pub const MODEL_SIZE: usize = 8;

fn model_from_flat<T: Scalar>(cfg: &ModelConfig, flat: &[f64]) -> SegModel<T> {
    let mut params = ParamSet::new();
    let mut at = 0;
    for (name, shape) in parameter_manifest(cfg) {
        let n: usize = shape.iter().product();
        params.insert(name, Tensor::from_vec(&shape, lit(&flat[at..at + n])).unwrap()).unwrap();
        at += n;
    }
    SegModel::from_params(*cfg, params)
}

/// Loss on the fused full-resolution prediction after the last frame.
fn model_loss<T: Scalar>(cfg: &ModelConfig, flat: &[f64], labels: &[u8], frame_leaves: bool) -> (f64, Vec<f64>) {
    let n_params: usize = parameter_manifest(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let mut model = model_from_flat::<T>(cfg, &flat[..n_params]);
    let frame_len = 3 * MODEL_SIZE * MODEL_SIZE;
    let mut tape = Tape::<T>::new();
    let mut state = model.reset_state(1, MODEL_SIZE, MODEL_SIZE).unwrap().to_vars(&mut tape);
    let mut frames = Vec::new();
    let mut full = None;
    for t in 0..MODEL_FRAMES {
        let data = lit(&flat[n_params + t * frame_len..n_params + (t + 1) * frame_len]);
        let x = Tensor::from_vec(&[1, 3, MODEL_SIZE, MODEL_SIZE], data).unwrap().with_trainable(frame_leaves);
        let xv = tape.leaf(x);
        frames.push(xv);
        let (pred, next) = model.step(&mut tape, xv, &state).unwrap();
        state = next;
        full = Some(pred.logits_full);
    }
    let loss = tape.softmax_cross_entropy(full.unwrap(), labels, 255).unwrap();
    let value = tape.value(loss).item().to_f64().unwrap();
    if !frame_leaves {
        return (value, vec![]);
    }
    let grads = tape.backward(loss).unwrap();
    grads.accumulate_into(&mut model.params).unwrap();
    let mut g: Vec<f64> = model
        .params
        .iter()
        .flat_map(|p| p.tensor.grad().unwrap().iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>())
        .collect();
    for f in frames {
        g.extend(grads.get(f).unwrap().iter().map(|v| v.to_f64().unwrap()));
    }
    (value, g)
}

/// End-to-end check over every parameter and every input pixel of a short
/// sequence through appearance, memory, gates, fusion and upsampling.
pub fn check_model(seed: u64) -> CaseResult {
    let cfg = tiny_model_config();
    let mut r = Rng64::stream(seed, &[0x6d6f_6465]);
    let n_params: usize = parameter_manifest(&cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let mut flat = random_vec(&mut r, n_params, -0.6, 0.6);
    flat.extend(random_vec(&mut r, MODEL_FRAMES * 3 * MODEL_SIZE * MODEL_SIZE, 0.0, 1.0));
    let labels: Vec<u8> = (0..MODEL_SIZE * MODEL_SIZE)
        .map(|i| if i % 7 == 3 { 255 } else { r.below(cfg.num_classes as u64) as u8 })
        .collect();
    let mut f = |x: &[f64]| model_loss::<f64>(&cfg, x, &labels, false).0;
    let numeric = central_difference(&mut f, &flat, FD_STEP, KINK_TOL);
    CaseResult {
        name: "model_step",
        seed,
        f64_mode: compare(&model_loss::<f64>(&cfg, &flat, &labels, true).1, &numeric),
        f32_mode: compare(&model_loss::<f32>(&cfg, &flat, &labels, true).1, &numeric),
    }
}

pub const F64_TOLERANCE: f64 = 1e-6;
pub const F32_TOLERANCE: f64 = 1e-3;

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.f64_mode.max_rel_err < F64_TOLERANCE && self.f32_mode.max_rel_err < F32_TOLERANCE && self.f64_mode.checked > 0
    }
}

/// Every op case and the model case for seeds `0..seeds`.
pub fn run(seeds: u64) -> Vec<CaseResult> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        out.extend(op_cases(seed).iter().map(check_op));
        out.push(check_model(seed));
    }
    out
}
