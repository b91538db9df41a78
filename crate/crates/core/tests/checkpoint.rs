use tseg::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tseg::nets::{parameter_manifest, ModelConfig};
use tseg::{Error, Model32, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig { feature_channels: 2, hidden_channels: 1, num_classes: 2 }
}

/// Writes the documented layout field by field.
fn expected_bytes(model: &Model32, stage: f32, rng: [u64; 4]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"TSEG");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&(model.params.len() as u32 + 1).to_le_bytes());
    let mut tensor = |name: &str, dims: &[usize], data: &[f32]| {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            b.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    };
    tensor("meta.stage", &[1], &[stage]);
    for p in model.params.iter() {
        tensor(&p.name, p.tensor.shape(), p.tensor.data());
    }
    for w in rng {
        b.extend_from_slice(&w.to_le_bytes());
    }
    b
}

#[test]
fn byte_layout_matches_the_format() {
    let mut m = Model32::new_full(tiny(), 5).unwrap();
    for (i, p) in m.params.iter_mut().enumerate() {
        for (j, v) in p.tensor.data_mut().iter_mut().enumerate() {
            *v = i as f32 - 0.25 * j as f32;
        }
    }
    let rng = [7, 0, u64::MAX, 1 << 40];
    let got = Checkpoint::from_model(&m, 3, rng).encode();
    let want = expected_bytes(&m, 3.0, rng);
    assert_eq!(got, want);
    // head: magic, version 1, 26 tensors + stage
    assert_eq!(&got[..12], &[b'T', b'S', b'E', b'G', 1, 0, 0, 0, 27, 0, 0, 0]);
    assert_eq!(m.params.len(), parameter_manifest(&tiny()).len());
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model32::new_full(ModelConfig::default(), 11).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&m, 2, [1, 2, 3, 4], &a).unwrap();
    let ck = load_checkpoint(&a).unwrap();
    assert_eq!(ck.stage, 2);
    assert_eq!(ck.rng_state, [1, 2, 3, 4]);
    let back: Model32 = ck.to_model().unwrap();
    for (x, y) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(x.name, y.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.tensor), bits(&y.tensor));
    }
    save_checkpoint(&back, 2, ck.rng_state, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn appearance_only_and_partial_checkpoints() {
    let m = Model32::new(ModelConfig::default(), 1).unwrap();
    let back: Model32 = Checkpoint::from_model(&m, 1, [0; 4]).to_model().unwrap();
    assert!(!back.has_memory() && !back.has_gates());

    let full = Model32::new_full(ModelConfig::default(), 1).unwrap();
    let mut ck = Checkpoint::from_model(&full, 3, [0; 4]);
    ck.tensors.retain(|(n, _)| n != "memory.head.bias");
    assert!(matches!(ck.to_model::<f32>(), Err(Error::CheckpointShape { .. })));
}

#[test]
fn failures_have_distinct_codes() {
    let m = Model32::new(tiny(), 0).unwrap();
    let bytes = Checkpoint::from_model(&m, 1, [0; 4]).encode();

    let truncated = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
    let mut v2 = bytes.clone();
    v2[4] = 2;
    let version = Checkpoint::decode(&v2).unwrap_err();
    let mut ck = Checkpoint::from_model(&m, 1, [0; 4]);
    ck.tensors[0].1 = Tensor::zeros(&[16, 3, 3, 4]);
    let shape = ck.to_model::<f32>().unwrap_err();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let bad_magic = Checkpoint::decode(&magic).unwrap_err();

    assert!(matches!(truncated, Error::CorruptCheckpoint(_)));
    assert!(matches!(version, Error::VersionMismatch { found: 2, expected: 1 }));
    assert!(matches!(shape, Error::CheckpointShape { .. }));
    assert_eq!(bad_magic.code(), truncated.code());
    let codes = [truncated.code(), version.code(), shape.code()];
    assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    std::fs::write(&path, &bytes[..40]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
}
