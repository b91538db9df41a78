//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Criteria 6 to 8 train the full 64x64 flicker benchmark for three seeds and
//! repeat seed 1, so this target takes roughly half an hour on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tseg::checkpoint::{load_checkpoint, Checkpoint};
use tseg::dataset::{load_split, Split};
use tseg::nets::names;
use tseg::synth::{SceneSpec, STUFF_CLASSES, THING_CLASSES};
use tseg::training::{evaluate, predict_sequence, stills, train_stage1_appearance, EvalMode, Evaluation, Stage, TrainConfig};
use tseg::{dataset::generate_split, Model32, ModelConfig};
use tseg_testkit::gradsuite;
use tseg_testkit::suites;

const SEEDS: [u64; 3] = [1, 2, 3];
const STUFF_GAIN_POINTS: f64 = 5.0;

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn within(elapsed: Duration, limit_s: u64) -> (bool, String) {
    (elapsed <= Duration::from_secs(limit_s), format!("{:.1}s (limit {limit_s}s)", elapsed.as_secs_f64()))
}

fn cli(args: &[&str]) {
    let mut argv = vec!["tseg"];
    argv.extend_from_slice(args);
    if let Err(e) = tseg_cli::run(argv) {
        panic!("tseg {}: {e}", args.join(" "));
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn bits(ck: &Checkpoint, prefix: &str) -> Vec<(String, Vec<u32>)> {
    ck.tensors
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn read_losses(path: &Path) -> Vec<f64> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split_once('=').unwrap().1.parse().unwrap()).collect()
}

/// Everything one seed's pipeline produces that the criteria look at.
struct Pipeline {
    seed: u64,
    root: PathBuf,
    appearance: Evaluation,
    fused: Evaluation,
    stage_losses: Vec<(f64, f64)>,
    stage2_frozen_ok: bool,
    stage3_frozen_ok: bool,
    stage3_head_changed: bool,
    /// Last-frame accuracy on flickered stuff pixels after stage 2: (memory, appearance, pixels).
    flicker_accuracy: (f64, f64, u64),
}

fn stuff_iou(ev: &Evaluation) -> f64 {
    ev.confusion.stuff_thing_report(&STUFF_CLASSES).0.expect("stuff classes present")
}

fn run_pipeline(seed: u64, root: &Path) -> Pipeline {
    let data = root.join("data");
    let run = root.join("run");
    let s = seed.to_string();
    cli(&["gen", "--out", p(&data), "--seed", &s, "--num_train", "500", "--num_val", "100"]);
    let ck = |n: u8| run.join(format!("stage{n}.ckpt"));
    cli(&["train", "--stage", "1", "--data", p(&data), "--out", p(&run), "--seed", &s]);
    cli(&["train", "--stage", "2", "--data", p(&data), "--out", p(&run), "--seed", &s, "--init", p(&ck(1))]);
    cli(&["train", "--stage", "3", "--data", p(&data), "--out", p(&run), "--seed", &s, "--init", p(&ck(2))]);
    cli(&["eval", "--data", p(&data), "--ckpt", p(&ck(1)), "--mode", "appearance_only", "--out", p(&run.join("eval1"))]);
    cli(&["eval", "--data", p(&data), "--ckpt", p(&ck(3)), "--mode", "fused", "--out", p(&run.join("eval3"))]);

    let (c1, c2, c3) = (load_checkpoint(&ck(1)).unwrap(), load_checkpoint(&ck(2)).unwrap(), load_checkpoint(&ck(3)).unwrap());
    let stem_body = |c: &Checkpoint| {
        let mut v = bits(c, names::STEM1);
        v.extend(bits(c, names::STEM2));
        for b in names::BODY {
            v.extend(bits(c, b));
        }
        v
    };
    let (_, val) = load_split(&data, Split::Val).unwrap();
    let m1: Model32 = c1.to_model().unwrap();
    let m2: Model32 = c2.to_model().unwrap();
    let m3: Model32 = c3.to_model().unwrap();

    let (mut mem_ok, mut appr_ok, mut pixels) = (0u64, 0u64, 0u64);
    for seq in &val {
        let t = seq.len() - 1;
        let mem = predict_sequence(&m2, seq, EvalMode::MemoryOnly).unwrap();
        let appr = predict_sequence(&m2, seq, EvalMode::AppearanceOnly).unwrap();
        for (i, &gt) in seq.masks[t].iter().enumerate() {
            if STUFF_CLASSES.contains(&gt) && seq.flickered[t][gt as usize] {
                pixels += 1;
                mem_ok += (mem[t].mask[i] == gt) as u64;
                appr_ok += (appr[t].mask[i] == gt) as u64;
            }
        }
    }
    let acc = |n: u64| n as f64 / pixels.max(1) as f64;

    Pipeline {
        seed,
        root: root.to_path_buf(),
        appearance: evaluate(&m1, &val, EvalMode::AppearanceOnly).unwrap(),
        fused: evaluate(&m3, &val, EvalMode::Fused).unwrap(),
        stage_losses: (1..=3)
            .map(|n| {
                let l = read_losses(&run.join(format!("stage{n}_loss.txt")));
                (l[0], *l.last().unwrap())
            })
            .collect(),
        stage2_frozen_ok: bits(&c1, names::APPEARANCE_PREFIX) == bits(&c2, names::APPEARANCE_PREFIX),
        stage3_frozen_ok: stem_body(&c2) == stem_body(&c3),
        stage3_head_changed: bits(&c2, names::APPEARANCE_HEAD) != bits(&c3, names::APPEARANCE_HEAD)
            && bits(&c2, names::MEMORY_PREFIX) != bits(&c3, names::MEMORY_PREFIX),
        flicker_accuracy: (acc(mem_ok), acc(appr_ok), pixels),
    }
}

/// Every file under `root/run`, for bit-exact comparison between reruns.
fn run_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.join("run")];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn metric_bits(p: &Pipeline) -> Vec<u64> {
    let mut v: Vec<u64> = p.appearance.confusion.counts().to_vec();
    v.extend(p.fused.confusion.counts());
    for c in &p.fused.gate_stats.as_ref().unwrap().classes {
        v.extend([c.cells, c.sum_appr.to_bits(), c.sum_mem.to_bits()]);
    }
    v.extend(p.stage_losses.iter().flat_map(|(a, b)| [a.to_bits(), b.to_bits()]));
    v
}

fn main() {
    let mut lines = Vec::new();

    let (results, t) = timed(|| gradsuite::run(20));
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{} seed {}", r.name, r.seed)).collect();
    let worst = |f: fn(&gradsuite::CaseResult) -> f64| results.iter().map(f).fold(0.0, f64::max);
    let (fast, time) = within(t, 120);
    lines.push(Line {
        id: "1 gradient suite",
        passed: failed.is_empty() && fast,
        detail: format!(
            "{} cases over 20 seeds, worst rel err f64 {:.2e} (< 1e-6), f32 {:.2e} (< 1e-3), {time}{}",
            results.len(),
            worst(|r| r.f64_mode.max_rel_err),
            worst(|r| r.f32_mode.max_rel_err),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    });

    let ((err, special), t) = timed(|| (suites::lstm_oracle_error(50), suites::lstm_special_cases()));
    let (fast, time) = within(t, 10);
    lines.push(Line {
        id: "2 conv-lstm oracle",
        passed: err < 1e-5 && special.is_ok() && fast,
        detail: format!("max deviation {err:.2e} over 50 instances (< 1e-5), special cases {:?}, {time}", special.err()),
    });

    let ((fusion, causal), t) = timed(|| (suites::fusion_identities(50), suites::causality(10)));
    let (fast, time) = within(t, 30);
    lines.push(Line {
        id: "3 fusion and causality",
        passed: fusion.is_ok() && causal.is_ok() && fast,
        detail: format!("fusion {:?}, causality over 10 sequences {:?}, {time}", fusion.err(), causal.err()),
    });

    let ((hand, merge), t) = timed(|| (suites::metric_hand_examples(), suites::merge_associativity(100)));
    let (fast, time) = within(t, 10);
    let metrics_line = Line {
        id: "5 metrics oracle",
        passed: hand.is_ok() && merge.is_ok() && fast,
        detail: format!("hand examples {:?}, 100 shardings {:?}, {time}", hand.err(), merge.err()),
    };

    let tmp = tempfile::tempdir().unwrap();
    let (pipelines, t6) = timed(|| {
        SEEDS.iter().map(|&seed| run_pipeline(seed, &tmp.path().join(format!("seed{seed}")))).collect::<Vec<_>>()
    });

    lines.push(Line {
        id: "4 freezing contracts",
        passed: pipelines.iter().all(|p| p.stage2_frozen_ok && p.stage3_frozen_ok && p.stage3_head_changed),
        detail: pipelines
            .iter()
            .map(|p| {
                format!(
                    "seed {}: stage-2 appearance unchanged {}, stage-3 stem+body unchanged {}, head and memory changed {}",
                    p.seed, p.stage2_frozen_ok, p.stage3_frozen_ok, p.stage3_head_changed
                )
            })
            .collect::<Vec<_>>()
            .join("; "),
    });
    lines.push(metrics_line);

    let gains: Vec<String> = pipelines
        .iter()
        .map(|p| {
            let (a, f) = (stuff_iou(&p.appearance), stuff_iou(&p.fused));
            let (ma, mf) = (p.appearance.confusion.mean_iou().unwrap(), p.fused.confusion.mean_iou().unwrap());
            format!("seed {}: stuff {:.2} -> {:.2} ({:+.2}), mIoU {:.2} -> {:.2}", p.seed, a * 100.0, f * 100.0, (f - a) * 100.0, ma * 100.0, mf * 100.0)
        })
        .collect();
    let (fast, time) = within(t6, 30 * 60);
    lines.push(Line {
        id: "6 temporal value",
        passed: fast
            && pipelines.iter().all(|p| {
                let (a, f) = (stuff_iou(&p.appearance), stuff_iou(&p.fused));
                (f - a) * 100.0 >= STUFF_GAIN_POINTS
                    && p.fused.confusion.mean_iou().unwrap() > p.appearance.confusion.mean_iou().unwrap()
            }),
        detail: format!("{}; 3 seeds in {time}", gains.join("; ")),
    });

    let gate_text: Vec<String> = pipelines
        .iter()
        .map(|p| {
            let g = p.fused.gate_stats.as_ref().unwrap();
            let (sa, sm) = g.pooled(&STUFF_CLASSES).unwrap();
            let (ta, tm) = g.pooled(&THING_CLASSES).unwrap();
            format!("seed {}: mem stuff {sm:.4} vs thing {tm:.4}, appr thing {ta:.4} vs stuff {sa:.4}", p.seed)
        })
        .collect();
    lines.push(Line {
        id: "7 gate direction",
        passed: pipelines.iter().all(|p| {
            let g = p.fused.gate_stats.as_ref().unwrap();
            let (sa, sm) = g.pooled(&STUFF_CLASSES).unwrap();
            let (ta, tm) = g.pooled(&THING_CLASSES).unwrap();
            sm > tm && ta > sa
        }),
        detail: gate_text.join("; "),
    });

    let rerun = run_pipeline(SEEDS[0], &tmp.path().join("rerun"));
    let same_files = run_files(&pipelines[0].root) == run_files(&rerun.root);
    let same_metrics = metric_bits(&pipelines[0]) == metric_bits(&rerun);
    lines.push(Line {
        id: "8 determinism",
        passed: same_files && same_metrics,
        detail: format!(
            "seed {} rerun: checkpoints, loss logs and reports byte-identical {same_files}, metrics bit-identical {same_metrics}",
            SEEDS[0]
        ),
    });

    lines.push(Line {
        id: "supplementary: loss decrease",
        passed: pipelines.iter().all(|p| p.stage_losses.iter().all(|(first, last)| last < first)),
        detail: pipelines
            .iter()
            .map(|p| {
                let s: Vec<String> = p.stage_losses.iter().map(|(a, b)| format!("{a:.4}->{b:.4}")).collect();
                format!("seed {}: {}", p.seed, s.join(" "))
            })
            .collect::<Vec<_>>()
            .join("; "),
    });
    lines.push(Line {
        id: "supplementary: memory on flickered stuff",
        passed: pipelines.iter().all(|p| p.flicker_accuracy.0 > p.flicker_accuracy.1),
        detail: pipelines
            .iter()
            .map(|p| {
                let (m, a, n) = p.flicker_accuracy;
                format!("seed {}: memory {:.4} vs appearance {:.4} on {n} px", p.seed, m, a)
            })
            .collect::<Vec<_>>()
            .join("; "),
    });

    let spec = SceneSpec { seed: 8, ..SceneSpec::default().clean() };
    let ((miou, stuff), t) = timed(|| {
        let train = generate_split(&spec, Split::Train, 100).unwrap();
        let val = generate_split(&spec, Split::Val, 20).unwrap();
        let mut m = Model32::new(ModelConfig::default(), 8).unwrap();
        let cfg = TrainConfig { seed: 8, ..TrainConfig::for_stage(Stage::Appearance) };
        train_stage1_appearance(&mut m, &stills(&train), &cfg).unwrap();
        let ev = evaluate(&m, &val, EvalMode::AppearanceOnly).unwrap();
        (ev.confusion.mean_iou().unwrap(), stuff_iou(&ev))
    });
    lines.push(Line {
        id: "supplementary: clean stills",
        passed: miou > 0.9,
        detail: format!("stage-1 mIoU {miou:.4} (> 0.9), stuff {stuff:.4}, 100 clean sequences, {:.1}s", t.as_secs_f64()),
    });

    let mut all = true;
    for l in &lines {
        all &= l.passed;
        println!("{} [{}] {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.detail);
    }
    if !all {
        std::process::exit(1);
    }
}
