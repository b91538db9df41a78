use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tseg::checkpoint::{load_checkpoint, save_checkpoint};
use tseg::dataset::read_manifest;
use tseg::nets::names;
use tseg::pnm::Image;
use tseg::synth::SceneSpec;
use tseg::{Model32, ModelConfig};

const SMALL: &[&str] = &["--width", "32", "--height", "32", "--num_frames", "4", "--num_train", "4", "--num_val", "2"];
const QUICK: &[&str] = &["--epochs", "1", "--batch_size", "4", "--sequence_length", "4"];

fn tseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tseg(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn gen(dir: &Path, seed: &str) {
    let mut args = vec!["gen", "--out", s(dir), "--seed", seed];
    args.extend_from_slice(SMALL);
    ok(&args);
}

fn train(data: &Path, out: &Path, stage: &str, init: Option<&Path>) {
    let mut args = vec!["train", "--stage", stage, "--data", s(data), "--out", s(out), "--seed", "5"];
    args.extend_from_slice(QUICK);
    if let Some(p) = init {
        args.extend_from_slice(&["--init", s(p)]);
    }
    ok(&args);
}

#[test]
fn gen_is_deterministic_and_records_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "7");
    gen(&b, "7");
    assert_eq!(tree(&a), tree(&b));
    let m = read_manifest(&a).unwrap();
    let want = SceneSpec { width: 32, height: 32, num_frames: 4, seed: 7, ..Default::default() };
    assert_eq!(m.spec, want);
    assert_eq!((m.num_train, m.num_val), (4, 2));
    assert_ne!(code(&["gen", "--out", s(&a), "--seed", "7"]), 0);
    ok(&["gen", "--out", s(&a), "--seed", "8", "--overwrite", "--width", "32", "--height", "32", "--num_train", "1", "--num_val", "1"]);
    assert_eq!(read_manifest(&a).unwrap().spec.seed, 8);
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&["gen", "--seed", "7"]), 2);
    assert_eq!(code(&["gen", "--out", "x", "--no_such_key", "1"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gen", "--out", "x", "--width", "wide"]), 2);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "width=32\nwidht=32\n").unwrap();
    assert_eq!(code(&["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]), 2);
    assert_eq!(code(&["train", "--stage", "2", "--data", "d", "--out", "o"]), 2);
    assert_eq!(code(&["train", "--data", "d", "--out", "o"]), 2);
}

#[test]
fn command_line_overrides_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nwidth=48\nheight=32\nnum_frames=3\nnum_train=1\nnum_val=1\nseed=3\n").unwrap();
    let out = tmp.path().join("d");
    ok(&["gen", "--config", s(&cfg), "--width", "32", "--out", s(&out)]);
    let m = read_manifest(&out).unwrap();
    assert_eq!((m.spec.width, m.spec.height, m.spec.num_frames, m.spec.seed), (32, 32, 3, 3));
}

#[test]
fn staged_training_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "2");
    let (r1, r2, r3) = (tmp.path().join("r1"), tmp.path().join("r2"), tmp.path().join("r3"));
    train(&data, &r1, "1", None);
    train(&data, &r2, "1", None);
    assert_eq!(fs::read(r1.join("stage1.ckpt")).unwrap(), fs::read(r2.join("stage1.ckpt")).unwrap());
    let log = fs::read_to_string(r1.join("stage1_loss.txt")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("epoch_1="));

    train(&data, &r1, "2", Some(&r1.join("stage1.ckpt")));
    let c1 = load_checkpoint(&r1.join("stage1.ckpt")).unwrap();
    let c2 = load_checkpoint(&r1.join("stage2.ckpt")).unwrap();
    assert_eq!(c2.stage, 2);
    for (name, t) in c1.tensors.iter().filter(|(n, _)| n.starts_with(names::APPEARANCE_PREFIX)) {
        let bits = |t: &tseg::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(c2.tensor(name).unwrap()), bits(t), "{name}");
    }
    assert!(c2.tensor(&format!("{}.weight", names::INPUT_GATE)).is_some());

    let ck2 = r1.join("stage2.ckpt");
    let eval = |mode: &str| tseg(&["eval", "--data", s(&data), "--ckpt", s(&ck2), "--mode", mode]);
    assert!(eval("memory_only").status.success());
    let fused = eval("fused");
    assert_eq!(fused.status.code(), Some(tseg::Error::Stage(String::new()).code()));
    assert!(String::from_utf8_lossy(&fused.stderr).contains("gate"));

    train(&data, &r3, "3", Some(&ck2));
    let ck3 = r3.join("stage3.ckpt");
    let metrics = tmp.path().join("metrics");
    let table = ok(&["eval", "--data", s(&data), "--ckpt", s(&ck3), "--out", s(&metrics)]);
    assert!(table.contains("mean") && table.contains("sigma_appr_car="));
    let kv = fs::read_to_string(metrics.join("metrics_val_fused.txt")).unwrap();
    let keys: Vec<&str> = kv.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(
        keys,
        ["iou_road", "iou_sidewalk", "iou_terrain", "iou_building", "iou_car", "iou_person", "mean_iou", "stuff_iou", "thing_iou"]
    );
    assert!(metrics.join("gates_val.txt").exists());

    assert_eq!(code(&["train", "--stage", "3", "--data", s(&data), "--out", s(&r3), "--init", s(&r1.join("stage1.ckpt"))]), 23);
    assert_eq!(code(&["eval", "--data", s(&data), "--ckpt", s(&ck3), "--hidden_channels", "8"]), 3);
}

#[test]
fn ground_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "4");
    let out = tmp.path().join("m");
    ok(&["eval", "--data", s(&data), "--ground_truth", "--split", "train", "--out", s(&out)]);
    let kv = fs::read_to_string(out.join("metrics_train_ground_truth.txt")).unwrap();
    assert!(kv.contains("mean_iou=1.000000"), "{kv}");
}

#[test]
fn infer_and_gates_write_one_image_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "6");
    let ckpt = tmp.path().join("full.ckpt");
    save_checkpoint(&Model32::new_full(ModelConfig::default(), 1).unwrap(), 3, [0; 4], &ckpt).unwrap();
    let seq = data.join("val/seq_0000");
    let run = |cmd: &str, out: &Path| ok(&[cmd, "--ckpt", s(&ckpt), "--sequence", s(&seq), "--out", s(out)]);

    let (p1, p2) = (tmp.path().join("p1"), tmp.path().join("p2"));
    run("infer", &p1);
    run("infer", &p2);
    let masks = tree(&p1);
    assert_eq!(masks.len(), 4);
    assert_eq!(masks, tree(&p2));
    let img = Image::read(&p1.join("pred_00000.pgm")).unwrap();
    assert_eq!((img.width, img.height, img.channels), (32, 32, 1));
    assert!(img.data.iter().all(|&v| v < 6));

    let g = tmp.path().join("g");
    run("gates", &g);
    run("gates", &g);
    let maps = tree(&g);
    assert_eq!(maps.len(), 8);
    for t in 0..4 {
        for kind in ["sigma_appr", "sigma_mem"] {
            let img = Image::read(&g.join(format!("{kind}_{t:05}.pgm"))).unwrap();
            assert_eq!((img.width, img.height), (32, 32));
            // zero gate weights give sigmoid(0) = 0.5 everywhere
            assert!(img.data.iter().all(|&v| v == 127));
        }
    }
    assert_eq!(code(&["gates", "--ckpt", s(&ckpt), "--out", s(&g)]), 2);
}
