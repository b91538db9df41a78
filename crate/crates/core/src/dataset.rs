//! On-disk synthetic datasets.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<split>/seq_0000/frame_00000.ppm   P6 RGB
//! <root>/<split>/seq_0000/label_00000.pgm   P5 class indices, 255 = ignore
//! <root>/<split>/seq_0000/corruption.txt    which stuff bands flickered per frame
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pnm::Image;
use crate::synth::{generate_sequence, Frame, LabeledSequence, SceneSpec};

/// Validation sequence `i` uses generator index `VAL_INDEX_OFFSET + i`, so the
/// two splits never share a stream.
pub const VAL_INDEX_OFFSET: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn sequence_index(self, i: usize) -> u64 {
        match self {
            Split::Train => i as u64,
            Split::Val => VAL_INDEX_OFFSET + i as u64,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Precondition(format!("unknown split `{s}` (train|val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub num_train: usize,
    pub num_val: usize,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Val => self.num_val,
        }
    }

    /// `(split, position, generator index)` for every sequence, train first.
    pub fn sequences(&self) -> Vec<(Split, usize, u64)> {
        [Split::Train, Split::Val]
            .into_iter()
            .flat_map(|s| (0..self.count(s)).map(move |i| (s, i, s.sequence_index(i))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.spec.entries() {
            writeln!(s, "{k}={v}").unwrap();
        }
        writeln!(s, "num_train={}", self.num_train).unwrap();
        writeln!(s, "num_val={}", self.num_val).unwrap();
        writeln!(s, "val_index_offset={VAL_INDEX_OFFSET}").unwrap();
        for (split, i, index) in self.sequences() {
            writeln!(s, "sequence.{}={}", sequence_path(split, i), index).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        let (mut num_train, mut num_val) = (None, None);
        let mut listed = 0usize;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected key=value", n + 1)))?;
            let count = || v.parse::<usize>().map_err(|_| Error::Manifest(format!("line {}: bad count", n + 1)));
            match k {
                "num_train" => num_train = Some(count()?),
                "num_val" => num_val = Some(count()?),
                "val_index_offset" if v == VAL_INDEX_OFFSET.to_string() => {}
                _ if k.starts_with("sequence.") => listed += 1,
                _ => {
                    if !spec.set(k, v).map_err(|e| Error::Manifest(e.to_string()))? {
                        return Err(Error::Manifest(format!("line {}: unknown key `{k}`", n + 1)));
                    }
                }
            }
        }
        let (Some(num_train), Some(num_val)) = (num_train, num_val) else {
            return Err(Error::Manifest("missing num_train or num_val".into()));
        };
        if listed != num_train + num_val {
            return Err(Error::Manifest(format!("lists {listed} sequences, counts say {}", num_train + num_val)));
        }
        Ok(Self { spec, num_train, num_val })
    }
}

pub fn sequence_path(split: Split, i: usize) -> String {
    format!("{}/seq_{i:04}", split.name())
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:05}.ppm")
}

pub fn label_file(t: usize) -> String {
    format!("label_{t:05}.pgm")
}

pub fn write_sequence(seq: &LabeledSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, (frame, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        Image::rgb(frame.width, frame.height, frame.rgb.clone())?.write(&dir.join(frame_file(t)))?;
        Image::gray(seq.width, seq.height, mask.clone())?.write(&dir.join(label_file(t)))?;
    }
    if !seq.flickered.is_empty() {
        let mut s = String::new();
        for (t, f) in seq.flickered.iter().enumerate() {
            let bits: Vec<&str> = f.iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(s, "frame_{t:05}={}", bits.join(",")).unwrap();
        }
        fs::write(dir.join("corruption.txt"), s)?;
    }
    Ok(())
}

fn parse_corruption(text: &str, frames: usize) -> Result<Vec<[bool; 4]>> {
    let mut out = Vec::with_capacity(frames);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let bad = || Error::Manifest(format!("bad corruption record `{line}`"));
        let (_, v) = line.split_once('=').ok_or_else(bad)?;
        let bits: Vec<bool> = v
            .split(',')
            .map(|b| match b.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad()),
            })
            .collect::<Result<_>>()?;
        out.push(bits.try_into().map_err(|_| bad())?);
    }
    if out.len() != frames {
        return Err(Error::Manifest(format!("{} corruption records for {frames} frames", out.len())));
    }
    Ok(out)
}

/// Reads consecutive frames until the first missing index.
pub fn read_sequence(dir: &Path) -> Result<LabeledSequence> {
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    loop {
        let t = frames.len();
        let frame_path = dir.join(frame_file(t));
        if !frame_path.exists() {
            break;
        }
        let img = Image::read(&frame_path)?;
        if img.channels != 3 {
            return Err(Error::Image { path: frame_path, detail: "expected an RGB (P6) frame".into() });
        }
        let label_path = dir.join(label_file(t));
        let label = Image::read(&label_path)?;
        if label.channels != 1 || label.width != img.width || label.height != img.height {
            return Err(Error::Image { path: label_path, detail: "label does not match its frame".into() });
        }
        if let Some(f) = frames.first() {
            let f: &Frame = f;
            if (f.width, f.height) != (img.width, img.height) {
                return Err(Error::Image { path: frame_path, detail: "frame size changes within sequence".into() });
            }
        }
        frames.push(Frame { width: img.width, height: img.height, rgb: img.data });
        masks.push(label.data);
    }
    let Some(first) = frames.first() else {
        return Err(Error::Image { path: dir.join(frame_file(0)), detail: "sequence has no frames".into() });
    };
    let (width, height) = (first.width, first.height);
    let corruption = dir.join("corruption.txt");
    let flickered = if corruption.exists() { parse_corruption(&fs::read_to_string(corruption)?, frames.len())? } else { vec![] };
    Ok(LabeledSequence { width, height, frames, masks, flickered })
}

fn is_nonempty_dir(p: &Path) -> Result<bool> {
    Ok(p.is_dir() && fs::read_dir(p)?.next().is_some())
}

/// Generates both splits in memory order and writes them under `root`.
pub fn generate_dataset(
    spec: &SceneSpec,
    num_train: usize,
    num_val: usize,
    root: &Path,
    overwrite: bool,
) -> Result<Manifest> {
    spec.validate()?;
    if root.exists() && !root.is_dir() {
        return Err(Error::OutputNotEmpty(root.to_path_buf()));
    }
    if is_nonempty_dir(root)? {
        if !overwrite {
            return Err(Error::OutputNotEmpty(root.to_path_buf()));
        }
        for split in [Split::Train, Split::Val] {
            let d = root.join(split.name());
            if d.exists() {
                fs::remove_dir_all(d)?;
            }
        }
    }
    let manifest = Manifest { spec: spec.clone(), num_train, num_val };
    for (split, i, index) in manifest.sequences() {
        let seq = generate_sequence(spec, index)?;
        write_sequence(&seq, &root.join(sequence_path(split, i)))?;
    }
    fs::write(root.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(root.join("manifest.txt"))?)
}

pub fn load_split(root: &Path, split: Split) -> Result<(Manifest, Vec<LabeledSequence>)> {
    let manifest = read_manifest(root)?;
    let seqs = (0..manifest.count(split))
        .map(|i| read_sequence(&root.join(sequence_path(split, i))))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, seqs))
}

/// One split generated directly in memory, identical to what [`generate_dataset`] writes.
pub fn generate_split(spec: &SceneSpec, split: Split, count: usize) -> Result<Vec<LabeledSequence>> {
    (0..count).map(|i| generate_sequence(spec, split.sequence_index(i))).collect()
}

pub fn sequence_dir(root: &Path, split: Split, i: usize) -> PathBuf {
    root.join(sequence_path(split, i))
}
