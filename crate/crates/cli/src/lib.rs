//! The `tseg` command line: dataset generation, staged training, evaluation,
//! inference and gate maps.
//!
//! Settings come from an optional `--config` file of `key=value` lines, then
//! from `--key value` flags, which win. Exit status is 0 on success, 2 on
//! usage errors and the library's error code otherwise.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use tseg::checkpoint::{load_checkpoint, save_checkpoint};
use tseg::dataset::{generate_dataset, load_split, read_sequence, Split};
use tseg::metrics::ConfusionMatrix;
use tseg::nets::OUTPUT_STRIDE;
use tseg::pnm::Image;
use tseg::synth::{LabeledSequence, CLASS_NAMES, STUFF_CLASSES, THING_CLASSES};
use tseg::training::{
    evaluate, predict_sequence, stills, train_stage1_appearance, train_stage2_memory, train_stage3_gated, EvalMode,
    Stage,
};
use tseg::{Model32, Scalar, Tensor};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Checkpoint, data and configuration disagree.
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] tseg::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Core(e) => e.code(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

fn with_keys(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").value_name("PATH").help("key=value file, overridden by flags"));
    config::KEYS.iter().fold(cmd, |cmd, &(key, help)| {
        let arg = Arg::new(key).long(key).help(help);
        cmd.arg(if config::FLAG_KEYS.contains(&key) {
            arg.num_args(0..=1).default_missing_value("true").value_name("BOOL")
        } else {
            arg.value_name("VALUE").action(ArgAction::Set)
        })
    })
}

pub fn command() -> Command {
    Command::new("tseg")
        .about("Video segmentation with appearance and memory networks fused by confidence gates")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(Command::new("gen").about("Generate a synthetic driving-scene dataset under --out")))
        .subcommand(with_keys(
            Command::new("train").about("Run one training stage on --data, writing stage<N>.ckpt and stage<N>_loss.txt"),
        ))
        .subcommand(with_keys(Command::new("eval").about("Score a checkpoint on a split and print the IoU table")))
        .subcommand(with_keys(Command::new("infer").about("Write predicted label masks for one sequence")))
        .subcommand(with_keys(Command::new("gates").about("Write the two gate maps of every frame as images")))
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut pairs = match m.get_one::<String>("config") {
        Some(p) => config::read_config_file(Path::new(p))?,
        None => Vec::new(),
    };
    for &(key, _) in config::KEYS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(key) {
                pairs.push((key.to_string(), v.clone()));
            }
        }
    }
    RunConfig::from_pairs(&pairs)
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let cfg = resolve(sub)?;
    match name {
        "gen" => cmd_gen(&cfg),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "infer" => cmd_infer(&cfg),
        "gates" => cmd_gates(&cfg),
        _ => unreachable!("clap only accepts declared subcommands"),
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.require("out", &cfg.out)?;
    let m = generate_dataset(&cfg.scene, cfg.num_train, cfg.num_val, out, cfg.overwrite)?;
    println!("wrote {} train and {} val sequences to {}", m.num_train, m.num_val, out.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model32, u8), CliError> {
    let ck = load_checkpoint(path)?;
    let model: Model32 = ck.to_model()?;
    cfg.check_model(&model.config)?;
    Ok((model, ck.stage))
}

fn check_data(model: &Model32, num_classes: usize) -> Result<(), CliError> {
    if model.config.num_classes != num_classes {
        return Err(CliError::Mismatch(format!(
            "the model predicts {} classes but the data has {num_classes}",
            model.config.num_classes
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    if !cfg.is_explicit("stage") {
        return Err(CliError::Usage("missing required --stage".into()));
    }
    let stage = cfg.train.stage;
    let data = cfg.require("data", &cfg.data)?;
    let out = cfg.require("out", &cfg.out)?;
    let mut model = match &cfg.init {
        Some(p) => {
            let (model, found) = load_model(cfg, p)?;
            if found + 1 < stage.number() {
                return Err(tseg::Error::Stage(format!(
                    "stage {} needs a stage-{} checkpoint, {} is from stage {found}",
                    stage.number(),
                    stage.number() - 1,
                    p.display()
                ))
                .into());
            }
            model
        }
        None if stage == Stage::Appearance => Model32::new(cfg.model, cfg.train.seed)?,
        None => {
            return Err(CliError::Usage(format!(
                "stage {} needs --init with the stage-{} checkpoint",
                stage.number(),
                stage.number() - 1
            )))
        }
    };
    let (manifest, seqs) = load_split(data, Split::Train)?;
    check_data(&model, manifest.spec.num_classes)?;
    let report = match stage {
        Stage::Appearance => train_stage1_appearance(&mut model, &stills(&seqs), &cfg.train)?,
        Stage::Memory => train_stage2_memory(&mut model, &seqs, &cfg.train)?,
        Stage::Gated => train_stage3_gated(&mut model, &seqs, &cfg.train)?,
    };
    fs::create_dir_all(out)?;
    let n = stage.number();
    save_checkpoint(&model, n, report.rng_state, &out.join(format!("stage{n}.ckpt")))?;
    let mut log = String::new();
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(log, "epoch_{}={loss}", i + 1).unwrap();
    }
    fs::write(out.join(format!("stage{n}_loss.txt")), &log)?;
    println!(
        "stage {n}: {} steps, first step loss {:.6}, final epoch loss {:.6}",
        report.steps,
        report.first_step_loss,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn class_names(k: usize) -> Vec<String> {
    if k == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|c| format!("class{c}")).collect()
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.require("data", &cfg.data)?;
    let (manifest, seqs) = load_split(data, cfg.split)?;
    let k = manifest.spec.num_classes;
    let ignore = manifest.spec.ignore_index;
    let (confusion, gates, label) = if cfg.ground_truth {
        let mut cm = ConfusionMatrix::new(k);
        for seq in &seqs {
            for m in &seq.masks {
                cm.accumulate(m, m, ignore)?;
            }
        }
        (cm, None, "ground_truth")
    } else {
        let (model, _) = load_model(cfg, cfg.require("ckpt", &cfg.ckpt)?)?;
        check_data(&model, k)?;
        let ev = evaluate(&model, &seqs, cfg.mode)?;
        (ev.confusion, ev.gate_stats, cfg.mode.name())
    };
    let names = class_names(k);
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let report = confusion.report(&name_refs, &STUFF_CLASSES)?;
    println!("{} split, {label}, {} pixels", cfg.split.name(), report.pixels);
    print!("{}", report.to_table());
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(format!("metrics_{}_{label}.txt", cfg.split.name())), report.to_kv())?;
    }
    if let Some(g) = gates {
        let mut text = g.to_kv(&name_refs);
        for (group, classes) in [("stuff", &STUFF_CLASSES[..]), ("thing", &THING_CLASSES[..])] {
            if let Some((a, m)) = g.pooled(classes) {
                writeln!(text, "sigma_appr_{group}={a:.6}\nsigma_mem_{group}={m:.6}").unwrap();
            }
        }
        println!("mean gates by ground-truth class:");
        print!("{text}");
        if let Some(out) = &cfg.out {
            fs::write(out.join(format!("gates_{}.txt", cfg.split.name())), text)?;
        }
    }
    Ok(())
}

fn sequence_inputs(cfg: &RunConfig) -> Result<(Model32, LabeledSequence, &Path), CliError> {
    let (model, _) = load_model(cfg, cfg.require("ckpt", &cfg.ckpt)?)?;
    let seq = read_sequence(cfg.require("sequence", &cfg.sequence)?)?;
    let out = cfg.require("out", &cfg.out)?;
    Ok((model, seq, out))
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<(), CliError> {
    let (model, seq, out) = sequence_inputs(cfg)?;
    let outputs = predict_sequence(&model, &seq, cfg.mode)?;
    fs::create_dir_all(out)?;
    for (t, o) in outputs.iter().enumerate() {
        Image::gray(seq.width, seq.height, o.mask.clone())?.write(&out.join(format!("pred_{t:05}.pgm")))?;
    }
    println!("wrote {} {} masks to {}", outputs.len(), cfg.mode.name(), out.display());
    Ok(())
}

/// Gate value to gray level: 0 is black, 1 is white, `floor(v * 255)` between.
pub fn gate_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).floor() as u8
}

/// `[1, 1, h, w]` gate map as a gray image nearest-upsampled by `factor`.
pub fn gate_image<T: Scalar>(map: &Tensor<T>, factor: usize) -> Result<Image, CliError> {
    let (_, _, h, w) = map.dims4();
    let (fh, fw) = (h * factor, w * factor);
    let d = map.data();
    let px = (0..fh * fw).map(|i| gate_byte(d[(i / fw / factor) * w + (i % fw) / factor].to_f64().unwrap())).collect();
    Ok(Image::gray(fw, fh, px)?)
}

pub fn cmd_gates(cfg: &RunConfig) -> Result<(), CliError> {
    let (model, seq, out) = sequence_inputs(cfg)?;
    let outputs = predict_sequence(&model, &seq, EvalMode::Fused)?;
    fs::create_dir_all(out)?;
    for (t, o) in outputs.iter().enumerate() {
        let (a, m) = o.gates.as_ref().expect("fused passes return gates");
        gate_image(a, OUTPUT_STRIDE)?.write(&out.join(format!("sigma_appr_{t:05}.pgm")))?;
        gate_image(m, OUTPUT_STRIDE)?.write(&out.join(format!("sigma_mem_{t:05}.pgm")))?;
    }
    println!("wrote {} pairs of gate maps to {}", outputs.len(), out.display());
    Ok(())
}
