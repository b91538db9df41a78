//! Checks shared by the per-crate tests and the acceptance run.

use tseg::metrics::ConfusionMatrix;
use tseg::nets::{fuse_tensors, names, ModelConfig, SegModel};
use tseg::synth::{generate_sequence, SceneSpec};
use tseg::{ConvOpts, MemoryState, ParamSet, Rng64, Scalar, Tensor};

use crate::{direct_conv2d, lstm_step, random_vec, GateWeights};

/// Overwrites every parameter whose name starts with `prefix` with uniform
/// values scaled by `1/sqrt(fan_in)`; biases get the same scale.
pub fn randomize<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, rng: &mut Rng64, gain: f64) {
    let names: Vec<String> = params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.name.clone()).collect();
    for name in names {
        let weight = name.replace(".bias", ".weight");
        let fan_in: usize = params.get(&weight).unwrap().shape()[1..].iter().product();
        let bound = gain / (fan_in as f64).sqrt();
        let t = params.get_mut(&name).unwrap();
        let v = random_vec(rng, t.numel(), -bound, bound);
        for (d, v) in t.data_mut().iter_mut().zip(v) {
            *d = T::lit(v);
        }
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

fn param<'a>(p: &'a ParamSet<f64>, layer: &str) -> (&'a [f64], &'a [usize], &'a [f64]) {
    let w = p.get(&format!("{layer}.weight")).unwrap();
    (w.data(), w.shape(), p.get(&format!("{layer}.bias")).unwrap().data())
}

/// Largest deviation between `convlstm_step` (32-bit) and the written-out
/// recurrence over `instances` random cases with N_h = 4 on an 8x8 map.
pub fn lstm_oracle_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = Rng64::stream(i, &[0x6c73_746d]);
        let cf = 1 + r.below(4) as usize;
        let n = 1 + r.below(2) as usize;
        let cfg = ModelConfig { feature_channels: cf, hidden_channels: 4, num_classes: 3 };
        let mut model = SegModel::<f64>::new_full(cfg, i).unwrap();
        randomize(&mut model.params, names::MEMORY_PREFIX, &mut r, 2.0);
        let (h, w) = (8, 8);
        let f = random_vec(&mut r, n * cf * h * w, -1.0, 1.0);
        let hid = random_vec(&mut r, n * 4 * h * w, -0.9, 0.9);
        let cell = random_vec(&mut r, n * 4 * h * w, -2.0, 2.0);

        let gates = [names::INPUT_GATE, names::FORGET_GATE, names::OUTPUT_GATE, names::CANDIDATE]
            .map(|g| {
                let (w, _, b) = param(&model.params, g);
                GateWeights { weight: w, bias: b }
            });
        let (want_h, want_c) = lstm_step(&f, &hid, &cell, (n, cf, 4, h, w), gates);

        let m32 = model.cast::<f32>();
        let t = |shape: &[usize], v: &[f64]| Tensor::<f32>::from_vec(shape, v.iter().map(|&x| x as f32).collect()).unwrap();
        let state = MemoryState { h: t(&[n, 4, h, w], &hid), c: t(&[n, 4, h, w], &cell) };
        let next = m32.convlstm_step(&t(&[n, cf, h, w], &f), &state).unwrap();
        for (a, b) in to_f64(&next.h).iter().zip(&want_h).chain(to_f64(&next.c).iter().zip(&want_c)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// The two exact Conv-LSTM cases: zero weights with zero state give a zero
/// state, and a saturated forget gate with a shut input gate carries C.
pub fn lstm_special_cases() -> Result<(), String> {
    let cfg = ModelConfig { feature_channels: 3, hidden_channels: 4, num_classes: 2 };
    let mut model = SegModel::<f32>::new_full(cfg, 9).unwrap();
    for p in model.params.iter_mut().filter(|p| p.name.starts_with(names::MEMORY_PREFIX)) {
        p.tensor.data_mut().fill(0.0);
    }
    let mut r = Rng64::seed_from(3);
    let f = Tensor::from_vec(&[1, 3, 8, 8], random_vec(&mut r, 192, -1.0, 1.0).iter().map(|&v| v as f32).collect())
        .unwrap();
    let zero = model.reset_state(1, 32, 32).unwrap();
    let next = model.convlstm_step(&f, &zero).unwrap();
    if next.h.data().iter().chain(next.c.data()).any(|&v| v != 0.0) {
        return Err("zero weights and zero state did not give a zero state".into());
    }

    model.params.get_mut(&format!("{}.bias", names::FORGET_GATE)).unwrap().data_mut().fill(50.0);
    model.params.get_mut(&format!("{}.bias", names::INPUT_GATE)).unwrap().data_mut().fill(-50.0);
    let c_prev: Vec<f32> = random_vec(&mut r, 256, -3.0, 3.0).iter().map(|&v| v as f32).collect();
    let state = MemoryState { h: Tensor::full(&[1, 4, 8, 8], 0.3), c: Tensor::from_vec(&[1, 4, 8, 8], c_prev.clone()).unwrap() };
    let next = model.convlstm_step(&f, &state).unwrap();
    let err = next.c.data().iter().zip(&c_prev).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    if err > 1e-6 {
        return Err(format!("saturated forget gate moved the cell by {err}"));
    }
    if state.c.data() != &c_prev[..] {
        return Err("convlstm_step modified its input state".into());
    }
    Ok(())
}

/// `fuse(a, m, 1, 0) == a`, `fuse(a, m, 0, 1) == m`, `fuse(a, m, 0, 0) == 0`
/// bit-exact, and the hand-evaluated 0.5/0.5 mixture.
pub fn fusion_identities(trials: u64) -> Result<(), String> {
    for s in 0..trials {
        let mut r = Rng64::stream(s, &[0x6675_7365]);
        let n = 1 + r.below(2) as usize;
        let k = 1 + r.below(6) as usize;
        let (h, w) = (1 + r.below(5) as usize, 1 + r.below(5) as usize);
        let mut t = |c: usize, scale: f64| {
            let v = random_vec(&mut r, n * c * h * w, -scale, scale);
            Tensor::<f32>::from_vec(&[n, c, h, w], v.iter().map(|&x| x as f32).collect()).unwrap()
        };
        let a = t(k, 1e3);
        let m = t(k, 1e3);
        let ones = Tensor::full(&[n, 1, h, w], 1.0);
        let zeros = Tensor::zeros(&[n, 1, h, w]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&fuse_tensors(&a, &m, &ones, &zeros).unwrap()) != bits(&a) {
            return Err(format!("trial {s}: fuse(a, m, 1, 0) != a"));
        }
        if bits(&fuse_tensors(&a, &m, &zeros, &ones).unwrap()) != bits(&m) {
            return Err(format!("trial {s}: fuse(a, m, 0, 1) != m"));
        }
        if fuse_tensors(&a, &m, &zeros, &zeros).unwrap().data().iter().any(|&v| v != 0.0) {
            return Err(format!("trial {s}: fuse(a, m, 0, 0) != 0"));
        }
    }
    let half = Tensor::<f32>::full(&[1, 1, 1, 1], 0.5);
    let fused = fuse_tensors(&Tensor::full(&[1, 1, 1, 1], 2.0), &Tensor::full(&[1, 1, 1, 1], 4.0), &half, &half).unwrap();
    if fused.data() != [3.0] {
        return Err(format!("0.5*2 + 0.5*4 gave {:?}", fused.data()));
    }
    Ok(())
}

/// A full model with every layer, gates included, randomized so that no
/// output is trivially constant.
pub fn random_full_model(seed: u64) -> SegModel<f32> {
    let mut model = SegModel::<f32>::new_full(ModelConfig::default(), seed).unwrap();
    let mut r = Rng64::stream(seed, &[0x6675_6c6c]);
    randomize(&mut model.params, names::APPEARANCE_HEAD, &mut r, 1.0);
    randomize(&mut model.params, names::GATES_PREFIX, &mut r, 2.0);
    model
}

/// Bit patterns of every output of every frame.
fn run_bits(model: &SegModel<f32>, frames: &[Tensor<f32>]) -> Vec<Vec<u32>> {
    let (_, _, h, w) = frames[0].dims4();
    let mut state = model.reset_state(1, h, w).unwrap();
    let mut out = Vec::new();
    for f in frames {
        let (pred, next) = model.model_step(f, &state).unwrap();
        state = next;
        let mut bits = Vec::new();
        for t in [&pred.logits_appr, &pred.logits_mem, &pred.sigma_appr, &pred.sigma_mem, &pred.logits_fused, &pred.logits_full, &state.h, &state.c] {
            bits.extend(t.data().iter().map(|v| v.to_bits()));
        }
        out.push(bits);
    }
    out
}

/// For each of `sequences` generated sequences and each cut point `t`,
/// replaces every frame after `t` with noise and checks that all outputs at
/// times `<= t` are unchanged bit for bit.
pub fn causality(sequences: u64) -> Result<(), String> {
    let spec = SceneSpec { seed: 77, ..Default::default() };
    for s in 0..sequences {
        let model = random_full_model(s);
        let seq = generate_sequence(&spec, s).unwrap();
        let frames: Vec<Tensor<f32>> = seq.frames.iter().map(|f| f.to_tensor::<f32>().reshape(&[1, 3, seq.height, seq.width]).unwrap()).collect();
        let base = run_bits(&model, &frames);
        let mut r = Rng64::stream(s, &[0x6675_7475]);
        for t in 0..frames.len() - 1 {
            let mut altered = frames.clone();
            for f in &mut altered[t + 1..] {
                for v in f.data_mut() {
                    *v = r.next_f64() as f32;
                }
            }
            let got = run_bits(&model, &altered);
            if got[..=t] != base[..=t] {
                return Err(format!("sequence {s}: output at or before frame {t} changed when later frames changed"));
            }
            if got[t + 1] == base[t + 1] {
                return Err(format!("sequence {s}: frame {} did not react to its own input", t + 1));
            }
        }
    }
    Ok(())
}

/// The documented hand-counted metric examples, compared exactly.
pub fn metric_hand_examples() -> Result<(), String> {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], 255).map_err(|e| e.to_string())?;
    if cm.counts() != [1, 1, 0, 2] {
        return Err(format!("hand count gave {:?}", cm.counts()));
    }
    let iou = cm.per_class_iou();
    if iou != [Some(0.5), Some(2.0 / 3.0)] {
        return Err(format!("per-class IoU {iou:?}"));
    }
    if cm.mean_iou().unwrap() != (0.5 + 2.0 / 3.0) / 2.0 {
        return Err("two-class mean IoU".into());
    }

    let mut cm = ConfusionMatrix::new(6);
    cm.accumulate(&[2; 100], &[2; 100], 255).unwrap();
    if cm.get(2, 2) != 100 || cm.total() != 100 {
        return Err("100 correct pixels of class 2".into());
    }
    let before = cm.clone();
    cm.accumulate(&[1; 50], &[255; 50], 255).unwrap();
    if cm != before {
        return Err("all-ignore ground truth changed the matrix".into());
    }
    let iou = cm.per_class_iou();
    if iou[2] != Some(1.0) || iou.iter().enumerate().any(|(k, v)| k != 2 && v.is_some()) {
        return Err(format!("perfect single-class prediction gave {iou:?}"));
    }
    if cm.mean_iou().unwrap() != 1.0 {
        return Err("perfect prediction mean IoU".into());
    }

    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0, 0, 0, 0], &[0, 1, 0, 1], 255).unwrap();
    if cm.mean_iou().unwrap() != 0.25 {
        return Err(format!("constant prediction mean IoU {}", cm.mean_iou().unwrap()));
    }
    if ConfusionMatrix::new(3).mean_iou().is_ok() {
        return Err("empty matrix has a mean IoU".into());
    }
    Ok(())
}

/// Accumulates one random labeled stream in a single pass and again as
/// `splits` random shardings merged in random order; all must agree exactly.
pub fn merge_associativity(splits: u64) -> Result<(), String> {
    let k = 6;
    let mut r = Rng64::seed_from(2024);
    let n = 4000;
    let gt: Vec<u8> = (0..n).map(|_| if r.below(10) == 0 { 255 } else { r.below(k) as u8 }).collect();
    let pred: Vec<u8> = (0..n).map(|_| r.below(k) as u8).collect();
    let mut whole = ConfusionMatrix::new(k as usize);
    whole.accumulate(&pred, &gt, 255).unwrap();
    for s in 0..splits {
        let mut r = Rng64::stream(s, &[0x6d65_7267]);
        let mut cuts: Vec<usize> = (0..1 + r.below(20)).map(|_| r.below(n as u64) as usize).collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        let mut shards: Vec<ConfusionMatrix> = cuts
            .windows(2)
            .map(|w| {
                let mut cm = ConfusionMatrix::new(k as usize);
                cm.accumulate(&pred[w[0]..w[1]], &gt[w[0]..w[1]], 255).unwrap();
                cm
            })
            .collect();
        for i in (1..shards.len()).rev() {
            shards.swap(i, r.below(i as u64 + 1) as usize);
        }
        // left fold and a balanced tree of merges
        let mut left = ConfusionMatrix::new(k as usize);
        for sh in &shards {
            left.merge(sh).unwrap();
        }
        while shards.len() > 1 {
            let mut next = Vec::new();
            for pair in shards.chunks(2) {
                let mut m = pair[0].clone();
                if let Some(b) = pair.get(1) {
                    m.merge(b).unwrap();
                }
                next.push(m);
            }
            shards = next;
        }
        if left != whole || shards[0] != whole {
            return Err(format!("split {s}: merged counts differ from one pass"));
        }
    }
    Ok(())
}

/// Runs the appearance net, memory step, heads, gates and fusion of
/// `model` with the independent kernels above and returns
/// `(argmax of logits_full, H', C')`.
pub fn oracle_step(
    model: &SegModel<f64>,
    frame: &[f64],
    (height, width): (usize, usize),
    hidden: &[f64],
    cell: &[f64],
) -> (Vec<u8>, Vec<f64>, Vec<f64>) {
    let cfg = model.config;
    let p = &model.params;
    let conv = |x: &[f64], xs: [usize; 4], layer: &str, opts: ConvOpts, relu: bool| {
        let (w, ws, b) = param(p, layer);
        let (mut y, s) = direct_conv2d(x, xs, w, [ws[0], ws[1], ws[2], ws[3]], b, opts.stride, opts.dilation, opts.padding);
        if relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        (y, s)
    };
    let (x, s) = conv(frame, [1, 3, height, width], names::STEM1, ConvOpts::new(2, 1, 1), true);
    let (mut x, mut s) = conv(&x, s, names::STEM2, ConvOpts::new(2, 1, 1), true);
    for (layer, d) in names::BODY.iter().zip([1, 2, 4]) {
        (x, s) = conv(&x, s, layer, ConvOpts::new(1, d, d), true);
    }
    let features = x;
    let (la, _) = conv(&features, s, names::APPEARANCE_HEAD, ConvOpts::default(), false);
    let (fh, fw) = (s[2], s[3]);
    let nh = cfg.hidden_channels;
    let gates = [names::INPUT_GATE, names::FORGET_GATE, names::OUTPUT_GATE, names::CANDIDATE].map(|g| {
        let (w, _, b) = param(p, g);
        GateWeights { weight: w, bias: b }
    });
    let (h_next, c_next) = lstm_step(&features, hidden, cell, (1, cfg.feature_channels, nh, fh, fw), gates);
    let (lm, _) = conv(&h_next, [1, nh, fh, fw], names::MEMORY_HEAD, ConvOpts::default(), false);
    let mut joint = features.clone();
    joint.extend(&h_next);
    let js = [1, cfg.feature_channels + nh, fh, fw];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (ga, _) = conv(&joint, js, names::GATE_APPEARANCE, ConvOpts::default(), false);
    let (gm, _) = conv(&joint, js, names::GATE_MEMORY, ConvOpts::default(), false);
    let k = cfg.num_classes;
    let mut labels = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let cell_idx = (y / 4) * fw + x / 4;
            let (sa, sm) = (sig(ga[cell_idx]), sig(gm[cell_idx]));
            let mut best = (f64::NEG_INFINITY, 0u8);
            for c in 0..k {
                let v = sa * la[c * fh * fw + cell_idx] + sm * lm[c * fh * fw + cell_idx];
                if v > best.0 {
                    best = (v, c as u8);
                }
            }
            labels[y * width + x] = best.1;
        }
    }
    (labels, h_next, c_next)
}
