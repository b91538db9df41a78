//! Confusion matrices, IoU, and per-class gate statistics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `counts[i * k + j]`: pixels with ground truth `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Precondition(format!("{} counts for {k} classes", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one labeled prediction; ground-truth pixels equal to `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Precondition(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        // validate first so a bad input leaves the counts untouched
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore && (g as usize >= self.k || p as usize >= self.k) {
                return Err(Error::Precondition(format!(
                    "class out of range: gt {g}, pred {p}, {} classes",
                    self.k
                )));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore {
                self.counts[g as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Precondition(format!("merging {} into {} classes", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `tp / (row + col - tp)`; `None` when the class is absent from both ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over defined classes.
    pub fn mean_iou(&self) -> Result<f64> {
        mean_defined(self.per_class_iou().into_iter())
            .ok_or_else(|| Error::Precondition("no class has a defined IoU".into()))
    }

    /// Mean IoU over `stuff` classes and over the rest; either side may be undefined.
    pub fn stuff_thing_report(&self, stuff: &[u8]) -> (Option<f64>, Option<f64>) {
        let ious = self.per_class_iou();
        let is_stuff = |c: usize| stuff.contains(&(c as u8));
        let s = mean_defined(ious.iter().enumerate().filter(|(c, _)| is_stuff(*c)).map(|(_, v)| *v));
        let t = mean_defined(ious.iter().enumerate().filter(|(c, _)| !is_stuff(*c)).map(|(_, v)| *v));
        (s, t)
    }

    pub fn report(&self, class_names: &[&str], stuff: &[u8]) -> Result<MetricsReport> {
        if class_names.len() != self.k {
            return Err(Error::Precondition(format!("{} names for {} classes", class_names.len(), self.k)));
        }
        let (stuff_iou, thing_iou) = self.stuff_thing_report(stuff);
        Ok(MetricsReport {
            classes: class_names.iter().map(|s| s.to_string()).zip(self.per_class_iou()).collect(),
            mean_iou: self.mean_iou()?,
            stuff_iou,
            thing_iou,
            pixels: self.total(),
        })
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<(String, Option<f64>)>,
    pub mean_iou: f64,
    pub stuff_iou: Option<f64>,
    pub thing_iou: Option<f64>,
    pub pixels: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    /// One `key=value` line per class, then `mean_iou`, `stuff_iou`, `thing_iou`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (name, iou) in &self.classes {
            writeln!(s, "iou_{name}={}", fmt_opt(*iou)).unwrap();
        }
        writeln!(s, "mean_iou={:.6}", self.mean_iou).unwrap();
        writeln!(s, "stuff_iou={}", fmt_opt(self.stuff_iou)).unwrap();
        writeln!(s, "thing_iou={}", fmt_opt(self.thing_iou)).unwrap();
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(9);
        let mut s = String::new();
        writeln!(s, "{:<width$}  {:>9}", "class", "IoU").unwrap();
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0));
        for (name, iou) in &self.classes {
            writeln!(s, "{name:<width$}  {:>9}", pct(*iou)).unwrap();
        }
        writeln!(s, "{:<width$}  {:>9}", "mean", pct(Some(self.mean_iou))).unwrap();
        writeln!(s, "{:<width$}  {:>9}", "stuff", pct(self.stuff_iou)).unwrap();
        writeln!(s, "{:<width$}  {:>9}", "thing", pct(self.thing_iou)).unwrap();
        s
    }
}

/// Majority label of each `factor x factor` cell; ties go to the smaller label.
pub fn downsample_majority(mask: &[u8], height: usize, width: usize, factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) || mask.len() != height * width {
        return Err(Error::Precondition(format!(
            "cannot downsample a {height}x{width} mask ({} pixels) by {factor}",
            mask.len()
        )));
    }
    let (oh, ow) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(oh * ow);
    let mut hist = [0u32; 256];
    for cy in 0..oh {
        for cx in 0..ow {
            hist.fill(0);
            for y in cy * factor..(cy + 1) * factor {
                for &v in &mask[y * width + cx * factor..y * width + (cx + 1) * factor] {
                    hist[v as usize] += 1;
                }
            }
            let best = (0..256).max_by(|&a, &b| hist[a].cmp(&hist[b]).then(b.cmp(&a))).unwrap();
            out.push(best as u8);
        }
    }
    Ok(out)
}

pub const GATE_BINS: usize = 10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassGateStats {
    pub cells: u64,
    pub sum_appr: f64,
    pub sum_mem: f64,
    /// Ten equal-width bins over `[0, 1]`.
    pub hist_appr: [u64; GATE_BINS],
    pub hist_mem: [u64; GATE_BINS],
}

impl ClassGateStats {
    pub fn mean_appr(&self) -> Option<f64> {
        (self.cells > 0).then(|| self.sum_appr / self.cells as f64)
    }

    pub fn mean_mem(&self) -> Option<f64> {
        (self.cells > 0).then(|| self.sum_mem / self.cells as f64)
    }
}

fn bin(v: f64) -> usize {
    ((v * GATE_BINS as f64) as usize).min(GATE_BINS - 1)
}

/// Gate values grouped by the majority ground-truth class of each feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    pub factor: usize,
    pub ignore: u8,
    pub classes: Vec<ClassGateStats>,
}

impl GateStats {
    pub fn new(num_classes: usize, factor: usize, ignore: u8) -> Self {
        Self { factor, ignore, classes: vec![ClassGateStats::default(); num_classes] }
    }

    /// `sigma_appr` and `sigma_mem` are `[1, 1, h, w]` maps; `gt` is the full-resolution mask.
    pub fn accumulate<T: Scalar>(&mut self, sigma_appr: &Tensor<T>, sigma_mem: &Tensor<T>, gt: &[u8]) -> Result<()> {
        let (n, c, h, w) = sigma_appr.dims4();
        if sigma_mem.shape() != sigma_appr.shape() || n != 1 || c != 1 {
            return Err(Error::Precondition(format!(
                "gate maps {:?} and {:?} must both be [1, 1, h, w]",
                sigma_appr.shape(),
                sigma_mem.shape()
            )));
        }
        if gt.len() != h * w * self.factor * self.factor {
            return Err(Error::Precondition(format!(
                "{h}x{w} gate map does not match a {}-pixel mask at factor {}",
                gt.len(),
                self.factor
            )));
        }
        let cells = downsample_majority(gt, h * self.factor, w * self.factor, self.factor)?;
        for (i, &label) in cells.iter().enumerate() {
            if label == self.ignore {
                continue;
            }
            let s = self.classes.get_mut(label as usize).ok_or_else(|| {
                Error::Precondition(format!("ground-truth class {label} out of range"))
            })?;
            let (a, m) = (sigma_appr.data()[i].to_f64().unwrap(), sigma_mem.data()[i].to_f64().unwrap());
            s.cells += 1;
            s.sum_appr += a;
            s.sum_mem += m;
            s.hist_appr[bin(a)] += 1;
            s.hist_mem[bin(m)] += 1;
        }
        Ok(())
    }

    /// Cell-weighted `(mean sigma_appr, mean sigma_mem)` over a set of classes.
    pub fn pooled(&self, classes: &[u8]) -> Option<(f64, f64)> {
        let (mut n, mut a, mut m) = (0u64, 0.0, 0.0);
        for &c in classes {
            if let Some(s) = self.classes.get(c as usize) {
                n += s.cells;
                a += s.sum_appr;
                m += s.sum_mem;
            }
        }
        (n > 0).then(|| (a / n as f64, m / n as f64))
    }

    pub fn to_kv(&self, class_names: &[&str]) -> String {
        let mut s = String::new();
        for (name, st) in class_names.iter().zip(&self.classes) {
            writeln!(s, "cells_{name}={}", st.cells).unwrap();
            writeln!(s, "sigma_appr_{name}={}", fmt_opt(st.mean_appr())).unwrap();
            writeln!(s, "sigma_mem_{name}={}", fmt_opt(st.mean_mem())).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_two_class() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], 255).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
        assert_eq!(cm.per_class_iou(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(cm.mean_iou().unwrap(), (0.5 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn bad_input_leaves_counts() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0, 2], &[0, 1], 255).is_err());
        assert!(cm.accumulate(&[0], &[0, 1], 255).is_err());
        assert_eq!(cm.total(), 0);
        assert!(cm.mean_iou().is_err());
    }

    #[test]
    fn majority_ties_pick_smaller_label() {
        let mask = [1, 1, 2, 2, 0, 0, 255, 255];
        assert_eq!(downsample_majority(&mask, 2, 4, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn report_lines() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[0, 1, 2], 255).unwrap();
        let r = cm.report(&["a", "b", "c"], &[0, 1]).unwrap();
        assert_eq!(
            r.to_kv(),
            "iou_a=1.000000\niou_b=1.000000\niou_c=1.000000\nmean_iou=1.000000\nstuff_iou=1.000000\nthing_iou=1.000000\n"
        );
        assert!(r.to_table().contains("mean"));
    }
}
