//! Appearance network, Conv-LSTM memory, confidence gates and their fusion.
//!
//! Networks are thin views over a shared [`ParamSet`]; every forward pass is
//! recorded on a caller-supplied [`Tape`] so training can back-propagate
//! through whole sequences. The tensor-level helpers at the bottom run a
//! private tape and hand back plain values for inference.

use crate::error::{Error, Result};
use crate::kernels::ConvOpts;
use crate::params::ParamSet;
use crate::rng::{derive_seed, Rng64};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial downsampling between an input frame and its feature map.
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// `C_f`: channels of the appearance feature map.
    pub feature_channels: usize,
    /// `N_h`: Conv-LSTM hidden channels.
    pub hidden_channels: usize,
    /// `K`: number of semantic classes.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { feature_channels: 16, hidden_channels: 16, num_classes: 6 }
    }
}

const STEM_WIDTH: usize = 16;
const INIT_STREAM: u64 = 0x1417;

struct ConvSpec {
    name: &'static str,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    opts: ConvOpts,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`, for layers followed by relu.
    He,
    /// Uniform with bound `sqrt(3 / fan_in)`.
    Lecun,
    Zero,
}

fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn init_conv<T: Scalar>(params: &mut ParamSet<T>, spec: &ConvSpec, seed: u64, bias: f64) -> Result<()> {
    let shape = [spec.out_ch, spec.in_ch, spec.kernel, spec.kernel];
    let fan_in = (spec.in_ch * spec.kernel * spec.kernel) as f64;
    let bound = match spec.init {
        Init::He => (6.0 / fan_in).sqrt(),
        Init::Lecun => (3.0 / fan_in).sqrt(),
        Init::Zero => 0.0,
    };
    let mut rng = Rng64::stream(seed, &[INIT_STREAM, name_seed(spec.name)]);
    let w = Tensor::from_fn(&shape, |_| T::lit((2.0 * rng.next_f64() - 1.0) * bound));
    params.insert(weight_name(spec.name), w)?;
    params.insert(bias_name(spec.name), Tensor::full(&[spec.out_ch], T::lit(bias)))?;
    Ok(())
}

fn conv<T: Scalar>(
    params: &ParamSet<T>,
    tape: &mut Tape<T>,
    layer: &str,
    x: Var,
    opts: ConvOpts,
) -> Result<Var> {
    let w = tape.param(params, &weight_name(layer))?;
    let b = tape.param(params, &bias_name(layer))?;
    tape.conv2d(x, w, b, opts)
}

pub mod names {
    pub const STEM1: &str = "appearance.stem1";
    pub const STEM2: &str = "appearance.stem2";
    pub const BODY: [&str; 3] = ["appearance.body1", "appearance.body2", "appearance.body3"];
    pub const APPEARANCE_HEAD: &str = "appearance.head";
    pub const INPUT_GATE: &str = "memory.input_gate";
    pub const FORGET_GATE: &str = "memory.forget_gate";
    pub const OUTPUT_GATE: &str = "memory.output_gate";
    pub const CANDIDATE: &str = "memory.candidate";
    pub const MEMORY_HEAD: &str = "memory.head";
    pub const GATE_APPEARANCE: &str = "gates.appearance";
    pub const GATE_MEMORY: &str = "gates.memory";

    pub const APPEARANCE_PREFIX: &str = "appearance.";
    pub const MEMORY_PREFIX: &str = "memory.";
    pub const GATES_PREFIX: &str = "gates.";
}

const BODY_DILATIONS: [usize; 3] = [1, 2, 4];

fn appearance_specs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let cf = cfg.feature_channels;
    let mut v = vec![
        ConvSpec {
            name: names::STEM1,
            out_ch: STEM_WIDTH,
            in_ch: 3,
            kernel: 3,
            opts: ConvOpts::new(2, 1, 1),
            init: Init::He,
        },
        ConvSpec {
            name: names::STEM2,
            out_ch: cf,
            in_ch: STEM_WIDTH,
            kernel: 3,
            opts: ConvOpts::new(2, 1, 1),
            init: Init::He,
        },
    ];
    for (name, d) in names::BODY.iter().zip(BODY_DILATIONS) {
        v.push(ConvSpec {
            name,
            out_ch: cf,
            in_ch: cf,
            kernel: 3,
            opts: ConvOpts::new(1, d, d),
            init: Init::He,
        });
    }
    v.push(ConvSpec {
        name: names::APPEARANCE_HEAD,
        out_ch: cfg.num_classes,
        in_ch: cf,
        kernel: 1,
        opts: ConvOpts::default(),
        init: Init::Zero,
    });
    v
}

fn memory_specs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let (cf, nh) = (cfg.feature_channels, cfg.hidden_channels);
    let gate = |name| ConvSpec {
        name,
        out_ch: nh,
        in_ch: cf + nh,
        kernel: 3,
        opts: ConvOpts::new(1, 1, 1),
        init: Init::Lecun,
    };
    vec![
        gate(names::INPUT_GATE),
        gate(names::FORGET_GATE),
        gate(names::OUTPUT_GATE),
        gate(names::CANDIDATE),
        ConvSpec {
            name: names::MEMORY_HEAD,
            out_ch: cfg.num_classes,
            in_ch: nh,
            kernel: 1,
            opts: ConvOpts::default(),
            init: Init::Lecun,
        },
    ]
}

fn gate_specs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let gate = |name| ConvSpec {
        name,
        out_ch: 1,
        in_ch: cfg.feature_channels + cfg.hidden_channels,
        kernel: 1,
        opts: ConvOpts::default(),
        init: Init::Zero,
    };
    vec![gate(names::GATE_APPEARANCE), gate(names::GATE_MEMORY)]
}

/// Expected `(name, shape)` of every parameter the full model can hold, in
/// insertion order.
pub fn parameter_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    appearance_specs(cfg)
        .into_iter()
        .chain(memory_specs(cfg))
        .chain(gate_specs(cfg))
        .flat_map(|s| {
            [
                (weight_name(s.name), vec![s.out_ch, s.in_ch, s.kernel, s.kernel]),
                (bias_name(s.name), vec![s.out_ch]),
            ]
        })
        .collect()
}

/// Conv-LSTM hidden and cell maps at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> MemoryState<T> {
    pub fn to_vars(&self, tape: &mut Tape<T>) -> StateVars {
        StateVars { h: tape.constant(self.h.clone()), c: tape.constant(self.c.clone()) }
    }
}

/// A [`MemoryState`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

impl StateVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> MemoryState<T> {
        MemoryState { h: tape.value(self.h).clone(), c: tape.value(self.c).clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedPrediction<T> {
    pub logits_appr: Tensor<T>,
    pub logits_mem: Tensor<T>,
    pub sigma_appr: Tensor<T>,
    pub sigma_mem: Tensor<T>,
    pub logits_fused: Tensor<T>,
    /// Fused logits nearest-upsampled to frame resolution.
    pub logits_full: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub features: Var,
    pub logits_appr: Var,
    pub logits_mem: Var,
    pub sigma_appr: Var,
    pub sigma_mem: Var,
    pub logits_fused: Var,
    pub logits_full: Var,
}

impl PredictionVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> GatedPrediction<T> {
        GatedPrediction {
            logits_appr: tape.value(self.logits_appr).clone(),
            logits_mem: tape.value(self.logits_mem).clone(),
            sigma_appr: tape.value(self.sigma_appr).clone(),
            sigma_mem: tape.value(self.sigma_mem).clone(),
            logits_fused: tape.value(self.logits_fused).clone(),
            logits_full: tape.value(self.logits_full).clone(),
        }
    }
}

/// Dilated ConvNet: two stride-2 stem layers, a dilated body, and a 1x1 classifier head.
#[derive(Clone, Copy)]
pub struct AppearanceNet<'a, T> {
    params: &'a ParamSet<T>,
    cfg: ModelConfig,
}

impl<T: Scalar> AppearanceNet<'_, T> {
    /// Deep semantic feature map `F` of shape `[N, C_f, H/4, W/4]`.
    pub fn features(&self, tape: &mut Tape<T>, frame: Var) -> Result<Var> {
        let shape = tape.value(frame).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("appearance_forward", format!("frame {shape:?}")));
        }
        if !shape[2].is_multiple_of(OUTPUT_STRIDE) || !shape[3].is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::Precondition(format!(
                "frame extents {}x{} must be divisible by {OUTPUT_STRIDE}",
                shape[2], shape[3]
            )));
        }
        let mut x = frame;
        for spec in appearance_specs(&self.cfg).iter().filter(|s| s.name != names::APPEARANCE_HEAD) {
            let y = conv(self.params, tape, spec.name, x, spec.opts)?;
            x = tape.relu(y)?;
        }
        Ok(x)
    }

    pub fn head(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        conv(self.params, tape, names::APPEARANCE_HEAD, features, ConvOpts::default())
    }

    /// `(F, logits_appr)`.
    pub fn forward(&self, tape: &mut Tape<T>, frame: Var) -> Result<(Var, Var)> {
        let f = self.features(tape, frame)?;
        let logits = self.head(tape, f)?;
        Ok((f, logits))
    }
}

/// Conv-LSTM over appearance features plus a 1x1 classifier on the hidden map.
#[derive(Clone, Copy)]
pub struct MemoryNet<'a, T> {
    params: &'a ParamSet<T>,
    cfg: ModelConfig,
}

impl<T: Scalar> MemoryNet<'_, T> {
    /// One recurrence step; reads only `(F_t, H_{t-1}, C_{t-1})`.
    pub fn step(&self, tape: &mut Tape<T>, features: Var, state: &StateVars) -> Result<StateVars> {
        let fs = tape.value(features).shape().to_vec();
        let hs = tape.value(state.h).shape().to_vec();
        let cs = tape.value(state.c).shape().to_vec();
        let nh = self.cfg.hidden_channels;
        if fs.len() != 4 || hs.len() != 4 || fs[0] != hs[0] || fs[2..] != hs[2..] || hs[1] != nh || cs != hs {
            return Err(Error::shape(
                "convlstm_step",
                format!("features {fs:?}, hidden {hs:?}, cell {cs:?}"),
            ));
        }
        let x = tape.concat_channels(features, state.h)?;
        let same = ConvOpts::new(1, 1, 1);
        let i = conv(self.params, tape, names::INPUT_GATE, x, same)?;
        let i = tape.sigmoid(i)?;
        let f = conv(self.params, tape, names::FORGET_GATE, x, same)?;
        let f = tape.sigmoid(f)?;
        let g = conv(self.params, tape, names::CANDIDATE, x, same)?;
        let g = tape.tanh(g)?;
        let o = conv(self.params, tape, names::OUTPUT_GATE, x, same)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.hadamard(f, state.c)?;
        let write = tape.hadamard(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.hadamard(o, tc)?;
        Ok(StateVars { h, c })
    }

    pub fn head(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        conv(self.params, tape, names::MEMORY_HEAD, hidden, ConvOpts::default())
    }
}

/// Two independent 1x1 sigmoid gates over `concat(F, H_t)`.
#[derive(Clone, Copy)]
pub struct GateHead<'a, T> {
    params: &'a ParamSet<T>,
}

impl<T: Scalar> GateHead<'_, T> {
    /// `(sigma_appr, sigma_mem)`, each `[N, 1, H/4, W/4]`.
    pub fn forward(&self, tape: &mut Tape<T>, features: Var, hidden: Var) -> Result<(Var, Var)> {
        let x = tape.concat_channels(features, hidden)?;
        let a = conv(self.params, tape, names::GATE_APPEARANCE, x, ConvOpts::default())?;
        let m = conv(self.params, tape, names::GATE_MEMORY, x, ConvOpts::default())?;
        Ok((tape.sigmoid(a)?, tape.sigmoid(m)?))
    }
}

/// `sigma_appr * logits_appr + sigma_mem * logits_mem`, gates broadcast over classes.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    logits_appr: Var,
    logits_mem: Var,
    sigma_appr: Var,
    sigma_mem: Var,
) -> Result<Var> {
    let a = tape.scale_broadcast(sigma_appr, logits_appr)?;
    let m = tape.scale_broadcast(sigma_mem, logits_mem)?;
    tape.add(a, m)
}

/// The complete segmentation model: parameters for whichever networks exist so far.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> SegModel<T> {
    /// A model holding only the appearance network (the starting point of training).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        for spec in appearance_specs(&config) {
            init_conv(&mut params, &spec, seed, 0.0)?;
        }
        Ok(Self { config, params })
    }

    /// A model with all three networks initialized.
    pub fn new_full(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.add_memory(seed)?;
        m.add_gates()?;
        Ok(m)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Self {
        Self { config, params }
    }

    pub fn add_memory(&mut self, seed: u64) -> Result<()> {
        for spec in memory_specs(&self.config) {
            let bias = if spec.name == names::FORGET_GATE { 1.0 } else { 0.0 };
            init_conv(&mut self.params, &spec, seed, bias)?;
        }
        Ok(())
    }

    /// Adds zero-initialized gates, so both start at `sigmoid(0) = 0.5`.
    pub fn add_gates(&mut self) -> Result<()> {
        for spec in gate_specs(&self.config) {
            init_conv(&mut self.params, &spec, 0, 0.0)?;
        }
        Ok(())
    }

    pub fn has_memory(&self) -> bool {
        self.params.contains(&weight_name(names::INPUT_GATE))
    }

    pub fn has_gates(&self) -> bool {
        self.params.contains(&weight_name(names::GATE_APPEARANCE))
    }

    pub fn appearance(&self) -> AppearanceNet<'_, T> {
        AppearanceNet { params: &self.params, cfg: self.config }
    }

    pub fn memory(&self) -> Result<MemoryNet<'_, T>> {
        if !self.has_memory() {
            return Err(Error::Stage("model has no memory network".into()));
        }
        Ok(MemoryNet { params: &self.params, cfg: self.config })
    }

    pub fn gates(&self) -> Result<GateHead<'_, T>> {
        if !self.has_gates() {
            return Err(Error::Stage("model has no confidence gates".into()));
        }
        Ok(GateHead { params: &self.params })
    }

    /// Zero hidden and cell maps for `batch` frames of `height x width` pixels.
    pub fn reset_state(&self, batch: usize, height: usize, width: usize) -> Result<MemoryState<T>> {
        if batch == 0 || !height.is_multiple_of(OUTPUT_STRIDE) || !width.is_multiple_of(OUTPUT_STRIDE) || height == 0 || width == 0 {
            return Err(Error::Precondition(format!(
                "state for batch {batch}, {height}x{width}: extents must be positive multiples of {OUTPUT_STRIDE}"
            )));
        }
        let shape = [batch, self.config.hidden_channels, height / OUTPUT_STRIDE, width / OUTPUT_STRIDE];
        Ok(MemoryState { h: Tensor::zeros(&shape), c: Tensor::zeros(&shape) })
    }

    /// Full causal step on a tape: appearance, memory update, gates, fusion, upsampling.
    pub fn step(&self, tape: &mut Tape<T>, frame: Var, state: &StateVars) -> Result<(PredictionVars, StateVars)> {
        let (features, logits_appr) = self.appearance().forward(tape, frame)?;
        self.step_from_features(tape, features, logits_appr, state)
    }

    /// The part of [`SegModel::step`] downstream of the appearance features.
    pub fn step_from_features(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        logits_appr: Var,
        state: &StateVars,
    ) -> Result<(PredictionVars, StateVars)> {
        let memory = self.memory()?;
        let next = memory.step(tape, features, state)?;
        let logits_mem = memory.head(tape, next.h)?;
        let (sigma_appr, sigma_mem) = self.gates()?.forward(tape, features, next.h)?;
        let logits_fused = fuse(tape, logits_appr, logits_mem, sigma_appr, sigma_mem)?;
        let logits_full = tape.upsample_nearest(logits_fused, OUTPUT_STRIDE)?;
        let pred = PredictionVars {
            features,
            logits_appr,
            logits_mem,
            sigma_appr,
            sigma_mem,
            logits_fused,
            logits_full,
        };
        Ok((pred, next))
    }

    /// `(F, logits_appr)` for a `[N, 3, H, W]` frame batch.
    pub fn appearance_forward(&self, frame: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let x = tape.constant(frame.clone());
        let (f, l) = self.appearance().forward(&mut tape, x)?;
        Ok((tape.value(f).clone(), tape.value(l).clone()))
    }

    /// One Conv-LSTM update from explicit features; `state` is left untouched.
    pub fn convlstm_step(&self, features: &Tensor<T>, state: &MemoryState<T>) -> Result<MemoryState<T>> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let s = state.to_vars(&mut tape);
        let next = self.memory()?.step(&mut tape, f, &s)?;
        Ok(next.values(&tape))
    }

    /// Causal inference step: consumes the current frame and the prior state only.
    pub fn model_step(&self, frame: &Tensor<T>, state: &MemoryState<T>) -> Result<(GatedPrediction<T>, MemoryState<T>)> {
        let mut tape = Tape::new();
        let x = tape.constant(frame.clone());
        let s = state.to_vars(&mut tape);
        let (pred, next) = self.step(&mut tape, x, &s)?;
        Ok((pred.values(&tape), next.values(&tape)))
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel { config: self.config, params: self.params.cast() }
    }
}

/// Fuses plain tensors; see [`fuse`].
pub fn fuse_tensors<T: Scalar>(
    logits_appr: &Tensor<T>,
    logits_mem: &Tensor<T>,
    sigma_appr: &Tensor<T>,
    sigma_mem: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let la = tape.constant(logits_appr.clone());
    let lm = tape.constant(logits_mem.clone());
    let sa = tape.constant(sigma_appr.clone());
    let sm = tape.constant(sigma_mem.clone());
    let out = fuse(&mut tape, la, lm, sa, sm)?;
    Ok(tape.value(out).clone())
}

/// Per-layer initialization seed, exposed for reproducibility checks.
pub fn layer_seed(seed: u64, layer: &str) -> u64 {
    derive_seed(seed, &[INIT_STREAM, name_seed(layer)])
}
