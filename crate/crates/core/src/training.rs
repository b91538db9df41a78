//! Three-stage training and causal evaluation.
//!
//! 1. The appearance network learns from single frames.
//! 2. With the whole appearance network frozen, the Conv-LSTM and its head
//!    learn from fixed-length windows, scored on the last frame only.
//! 3. With only the appearance feature extractor frozen, everything else
//!    (appearance head, memory, memory head, gates) is fine-tuned through
//!    the fused prediction, again on the last frame.
//!
//! Because the feature extractor is frozen in stages 2 and 3, its output is
//! computed once per frame up front and reused every epoch.

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, GateStats};
use crate::nets::{fuse, names, SegModel, StateVars, OUTPUT_STRIDE};
use crate::optim::{sgd_step, AdamConfig, AdamState};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::synth::{Frame, LabeledSequence, IGNORE_INDEX};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Appearance = 1,
    Memory = 2,
    Gated = 3,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Appearance),
            2 => Ok(Stage::Memory),
            3 => Ok(Stage::Gated),
            _ => Err(Error::Stage(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Precondition(format!("unknown optimizer `{s}` (sgd|adam)"))),
        }
    }
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Frames per step in stage 1, windows per step in stages 2 and 3.
    pub batch_size: usize,
    pub sequence_length: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Maximum global L2 norm of the gradient, if clipping is on.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Appearance)
    }
}

impl TrainConfig {
    /// Defaults sized for the 64x64 benchmark: 500 sequences of 8 frames.
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, batch_size) = match stage {
            Stage::Appearance => (15, 16),
            Stage::Memory => (15, 8),
            Stage::Gated => (10, 8),
        };
        Self {
            stage,
            learning_rate: 1e-3,
            epochs,
            batch_size,
            sequence_length: 8,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Precondition("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Precondition(format!("learning rate {}", self.learning_rate)));
        }
        if self.stage != Stage::Appearance && self.sequence_length < 2 {
            return Err(Error::Precondition(format!(
                "sequence_length must be at least 2 for stage {}, got {}",
                self.stage.number(),
                self.sequence_length
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Precondition(format!("grad_clip {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Mean loss of each epoch, weighted by samples.
    pub epoch_losses: Vec<f64>,
    /// Loss of the very first step, before any update.
    pub first_step_loss: f64,
    pub steps: u64,
    /// Shuffling generator state after the last epoch.
    pub rng_state: [u64; 4],
    /// Parameters that hold optimizer state at the end, sorted. Always
    /// empty for SGD.
    pub optimizer_state: Vec<String>,
}

/// Marks exactly the parameters a stage may update; everything else is frozen.
pub fn apply_stage_freezing<T: Scalar>(model: &mut SegModel<T>, stage: Stage) {
    let ps = &mut model.params;
    match stage {
        Stage::Appearance => {
            ps.set_frozen_prefix("", true);
            ps.set_frozen_prefix(names::APPEARANCE_PREFIX, false);
        }
        Stage::Memory => {
            ps.set_frozen_prefix("", true);
            ps.set_frozen_prefix(names::MEMORY_PREFIX, false);
        }
        Stage::Gated => {
            ps.set_frozen_prefix("", false);
            ps.set_frozen_prefix(names::APPEARANCE_PREFIX, true);
            ps.set_frozen_prefix(names::APPEARANCE_HEAD, false);
        }
    }
}

/// `[B, 3, H, W]` batch in `[0, 1]`.
pub fn frames_tensor<T: Scalar>(frames: &[&Frame]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = (first.width, first.height);
    let hw = w * h;
    let mut data = Vec::with_capacity(frames.len() * 3 * hw);
    for f in frames {
        if (f.width, f.height) != (w, h) {
            return Err(Error::Precondition("frames in a batch differ in size".into()));
        }
        for c in 0..3 {
            data.extend(f.rgb.iter().skip(c).step_by(3).map(|&v| T::lit(v as f64 / 255.0)));
        }
    }
    Tensor::from_vec(&[frames.len(), 3, h, w], data)
}

struct Optimizer<T> {
    kind: OptimizerKind,
    adam: AdamState<T>,
    cfg: AdamConfig,
    clip: Option<f64>,
}

impl<T: Scalar> Optimizer<T> {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            adam: AdamState::new(),
            cfg: AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() },
            clip: cfg.grad_clip,
        }
    }

    fn step(&mut self, model: &mut SegModel<T>) -> Result<()> {
        if let Some(c) = self.clip {
            model.params.clip_grad_norm(c);
        }
        match self.kind {
            OptimizerKind::Sgd => sgd_step(&mut model.params, self.cfg.lr),
            OptimizerKind::Adam => self.adam.step(&mut model.params, &self.cfg),
        }
    }
}

fn shuffle(rng: &mut Rng64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Runs one backward pass and optimizer update; returns the loss value.
fn update<T: Scalar>(tape: &mut Tape<T>, loss: Var, model: &mut SegModel<T>, opt: &mut Optimizer<T>) -> Result<f64> {
    let value = tape.value(loss).item().to_f64().unwrap();
    let grads = tape.backward(loss)?;
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params)?;
    opt.step(model)?;
    Ok(value)
}

struct EpochLog {
    losses: Vec<f64>,
    first: Option<f64>,
    steps: u64,
}

impl EpochLog {
    fn new() -> Self {
        Self { losses: vec![], first: None, steps: 0 }
    }

    fn finish<T: Scalar>(self, rng: &Rng64, opt: &Optimizer<T>) -> LossReport {
        LossReport {
            epoch_losses: self.losses,
            first_step_loss: self.first.unwrap_or(f64::NAN),
            steps: self.steps,
            rng_state: rng.state(),
            optimizer_state: opt.adam.names(),
        }
    }
}

/// A single labeled frame.
pub type Still<'a> = (&'a Frame, &'a [u8]);

/// Every frame of every sequence, as independent stills.
pub fn stills(seqs: &[LabeledSequence]) -> Vec<Still<'_>> {
    seqs.iter()
        .flat_map(|s| s.frames.iter().zip(&s.masks).map(|(f, m)| (f, m.as_slice())))
        .collect()
}

fn check_stage(cfg: &TrainConfig, want: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != want {
        return Err(Error::Stage(format!(
            "config is for stage {}, not stage {}",
            cfg.stage.number(),
            want.number()
        )));
    }
    Ok(())
}

fn training_rng(cfg: &TrainConfig) -> Rng64 {
    Rng64::stream(cfg.seed, &[0x7261_696e, cfg.stage.number() as u64])
}

pub fn train_stage1_appearance<T: Scalar>(
    model: &mut SegModel<T>,
    stills: &[Still<'_>],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    check_stage(cfg, Stage::Appearance)?;
    if stills.is_empty() {
        return Err(Error::EmptyDataset);
    }
    apply_stage_freezing(model, Stage::Appearance);
    let mut rng = training_rng(cfg);
    let mut opt = Optimizer::new(cfg);
    let mut log = EpochLog::new();
    for _ in 0..cfg.epochs {
        let order = shuffle(&mut rng, stills.len());
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let frames: Vec<&Frame> = batch.iter().map(|&i| stills[i].0).collect();
            let labels: Vec<u8> = batch.iter().flat_map(|&i| stills[i].1.iter().copied()).collect();
            let mut tape = Tape::new();
            let x = tape.constant(frames_tensor(&frames)?);
            let (_, logits) = model.appearance().forward(&mut tape, x)?;
            let full = tape.upsample_nearest(logits, OUTPUT_STRIDE)?;
            let loss = tape.softmax_cross_entropy(full, &labels, IGNORE_INDEX)?;
            let v = update(&mut tape, loss, model, &mut opt)?;
            log.first.get_or_insert(v);
            log.steps += 1;
            total += v * batch.len() as f64;
            count += batch.len();
        }
        log.losses.push(total / count as f64);
    }
    Ok(log.finish(&rng, &opt))
}

/// Frozen-extractor features `[1, C_f, h, w]` for every frame.
fn cache_features<T: Scalar>(model: &SegModel<T>, seqs: &[LabeledSequence]) -> Result<Vec<Vec<Tensor<T>>>> {
    seqs.iter()
        .map(|s| {
            s.frames
                .iter()
                .map(|f| {
                    let mut tape = Tape::new();
                    let x = tape.constant(frames_tensor(&[f])?);
                    let feat = model.appearance().features(&mut tape, x)?;
                    Ok(tape.value(feat).clone())
                })
                .collect()
        })
        .collect()
}

/// `(sequence, start)` of every full window; windows do not overlap.
fn windows(seqs: &[LabeledSequence], len: usize) -> Result<Vec<(usize, usize)>> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < len {
            return Err(Error::SequenceTooShort { len: s.len(), required: len });
        }
        out.extend((0..=s.len() - len).step_by(len).map(|start| (i, start)));
    }
    Ok(out)
}

fn train_sequences<T: Scalar>(
    model: &mut SegModel<T>,
    seqs: &[LabeledSequence],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let wins = windows(seqs, cfg.sequence_length)?;
    apply_stage_freezing(model, cfg.stage);
    let features = cache_features(model, seqs)?;
    let mut rng = training_rng(cfg);
    let mut opt = Optimizer::new(cfg);
    let mut log = EpochLog::new();
    let last = cfg.sequence_length - 1;
    for _ in 0..cfg.epochs {
        let order = shuffle(&mut rng, wins.len());
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let picked: Vec<(usize, usize)> = batch.iter().map(|&i| wins[i]).collect();
            let mut tape = Tape::new();
            let (_, _, h, w) = features[picked[0].0][0].dims4();
            let zero = Tensor::zeros(&[picked.len(), model.config.hidden_channels, h, w]);
            let mut state = StateVars { h: tape.constant(zero.clone()), c: tape.constant(zero) };
            let memory = model.memory()?;
            let mut feat = None;
            for t in 0..cfg.sequence_length {
                let parts: Vec<&Tensor<T>> = picked.iter().map(|&(s, start)| &features[s][start + t]).collect();
                let f = tape.constant(Tensor::stack(&parts)?);
                state = memory.step(&mut tape, f, &state)?;
                feat = Some(f);
            }
            let feat = feat.expect("windows have at least two frames");
            let logits_mem = memory.head(&mut tape, state.h)?;
            let logits = match cfg.stage {
                Stage::Memory => logits_mem,
                _ => {
                    let logits_appr = model.appearance().head(&mut tape, feat)?;
                    let (sa, sm) = model.gates()?.forward(&mut tape, feat, state.h)?;
                    fuse(&mut tape, logits_appr, logits_mem, sa, sm)?
                }
            };
            let full = tape.upsample_nearest(logits, OUTPUT_STRIDE)?;
            let labels: Vec<u8> =
                picked.iter().flat_map(|&(s, start)| seqs[s].masks[start + last].iter().copied()).collect();
            let loss = tape.softmax_cross_entropy(full, &labels, IGNORE_INDEX)?;
            let v = update(&mut tape, loss, model, &mut opt)?;
            log.first.get_or_insert(v);
            log.steps += 1;
            total += v * picked.len() as f64;
            count += picked.len();
        }
        log.losses.push(total / count as f64);
    }
    Ok(log.finish(&rng, &opt))
}

/// Adds the memory network if absent, freezes the appearance network, and
/// trains on last-frame memory predictions.
pub fn train_stage2_memory<T: Scalar>(
    model: &mut SegModel<T>,
    sequences: &[LabeledSequence],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    check_stage(cfg, Stage::Memory)?;
    if !model.has_memory() {
        model.add_memory(cfg.seed)?;
    }
    train_sequences(model, sequences, cfg)
}

/// Adds the gates if absent and fine-tunes everything but the feature extractor.
pub fn train_stage3_gated<T: Scalar>(
    model: &mut SegModel<T>,
    sequences: &[LabeledSequence],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    check_stage(cfg, Stage::Gated)?;
    if !model.has_memory() {
        return Err(Error::Stage("stage 3 needs a model with a trained memory network".into()));
    }
    if !model.has_gates() {
        model.add_gates()?;
    }
    train_sequences(model, sequences, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    AppearanceOnly,
    MemoryOnly,
    Fused,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::AppearanceOnly => "appearance_only",
            EvalMode::MemoryOnly => "memory_only",
            EvalMode::Fused => "fused",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance_only" => Ok(EvalMode::AppearanceOnly),
            "memory_only" => Ok(EvalMode::MemoryOnly),
            "fused" => Ok(EvalMode::Fused),
            _ => Err(Error::Precondition(format!(
                "unknown mode `{s}` (appearance_only|memory_only|fused)"
            ))),
        }
    }
}

/// Per-pixel argmax of `[1, K, h, w]` logits, nearest-upsampled by `factor`.
/// Ties go to the lowest class.
pub fn argmax_upsampled<T: Scalar>(logits: &Tensor<T>, factor: usize) -> Vec<u8> {
    let (_, k, h, w) = logits.dims4();
    let d = logits.data();
    let cells: Vec<u8> = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * h * w + p] > d[best * h * w + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let (fh, fw) = (h * factor, w * factor);
    (0..fh * fw).map(|i| cells[(i / fw / factor) * w + (i % fw) / factor]).collect()
}

/// Everything computed for one frame of a causal pass.
#[derive(Clone, Debug)]
pub struct FrameOutput<T> {
    pub mask: Vec<u8>,
    /// `(sigma_appr, sigma_mem)` when the pass ran the gates.
    pub gates: Option<(Tensor<T>, Tensor<T>)>,
}

pub fn check_mode<T: Scalar>(model: &SegModel<T>, mode: EvalMode) -> Result<()> {
    match mode {
        EvalMode::AppearanceOnly => Ok(()),
        EvalMode::MemoryOnly => model.memory().map(|_| ()),
        EvalMode::Fused => model.gates().map(|_| ()),
    }
}

/// Causal pass over one sequence from a zero state.
pub fn predict_sequence<T: Scalar>(model: &SegModel<T>, seq: &LabeledSequence, mode: EvalMode) -> Result<Vec<FrameOutput<T>>> {
    check_mode(model, mode)?;
    let mut state = match mode {
        EvalMode::AppearanceOnly => None,
        _ => Some(model.reset_state(1, seq.height, seq.width)?),
    };
    let mut out = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        let x = frames_tensor(&[frame])?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (features, logits_appr) = model.appearance().forward(&mut tape, xv)?;
        let (logits, gates) = match (mode, state.as_ref()) {
            (EvalMode::AppearanceOnly, _) => (logits_appr, None),
            (EvalMode::MemoryOnly, Some(s)) => {
                let sv = s.to_vars(&mut tape);
                let memory = model.memory()?;
                let next = memory.step(&mut tape, features, &sv)?;
                state = Some(next.values(&tape));
                (memory.head(&mut tape, next.h)?, None)
            }
            (EvalMode::Fused, Some(s)) => {
                let sv = s.to_vars(&mut tape);
                let (pred, next) = model.step_from_features(&mut tape, features, logits_appr, &sv)?;
                state = Some(next.values(&tape));
                let g = (tape.value(pred.sigma_appr).clone(), tape.value(pred.sigma_mem).clone());
                (pred.logits_fused, Some(g))
            }
            _ => unreachable!("state exists for recurrent modes"),
        };
        out.push(FrameOutput { mask: argmax_upsampled(tape.value(logits), OUTPUT_STRIDE), gates });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    /// Present in fused mode.
    pub gate_stats: Option<GateStats>,
}

/// Scores every frame of every sequence, resetting the state per sequence.
pub fn evaluate<T: Scalar>(model: &SegModel<T>, seqs: &[LabeledSequence], mode: EvalMode) -> Result<Evaluation> {
    check_mode(model, mode)?;
    let k = model.config.num_classes;
    let mut confusion = ConfusionMatrix::new(k);
    let mut gate_stats = (mode == EvalMode::Fused).then(|| GateStats::new(k, OUTPUT_STRIDE, IGNORE_INDEX));
    for seq in seqs {
        for (out, gt) in predict_sequence(model, seq, mode)?.iter().zip(&seq.masks) {
            confusion.accumulate(&out.mask, gt, IGNORE_INDEX)?;
            if let (Some(stats), Some((a, m))) = (gate_stats.as_mut(), out.gates.as_ref()) {
                stats.accumulate(a, m, gt)?;
            }
        }
    }
    Ok(Evaluation { confusion, gate_stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_upsampling_and_ties() {
        let l = Tensor::<f32>::from_vec(&[1, 2, 1, 2], vec![1.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(argmax_upsampled(&l, 2), vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn windows_tile_without_overlap() {
        let seq = LabeledSequence { width: 4, height: 4, frames: vec![], masks: vec![], flickered: vec![] };
        let mut s = seq.clone();
        s.frames = vec![Frame { width: 4, height: 4, rgb: vec![0; 48] }; 7];
        assert_eq!(windows(&[s.clone()], 3).unwrap(), vec![(0, 0), (0, 3)]);
        assert!(matches!(windows(&[s], 8), Err(Error::SequenceTooShort { len: 7, required: 8 })));
        assert!(matches!(windows(&[], 2), Err(Error::EmptyDataset)));
    }

    #[test]
    fn freezing_sets_per_stage() {
        let mut m = SegModel::<f32>::new_full(Default::default(), 0).unwrap();
        apply_stage_freezing(&mut m, Stage::Gated);
        for p in m.params.iter() {
            let frozen = p.name.starts_with("appearance.") && !p.name.starts_with("appearance.head");
            assert_eq!(p.frozen, frozen, "{}", p.name);
        }
        apply_stage_freezing(&mut m, Stage::Memory);
        assert!(m.params.iter().all(|p| p.frozen != p.name.starts_with("memory.")));
    }
}
