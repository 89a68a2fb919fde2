//! Binary change masks, confusion counting and the four pixel metrics.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask; 1 marks a changed pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ChangeMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Any non-zero byte counts as changed.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count_changed(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn invert(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_ + self.fp, self)
    }

    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            iou: self.iou(),
            f1: self.f1(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

/// An empty prediction of an empty target scores 1; any other zero
/// denominator scores 0.
fn ratio(num: u64, den: u64, c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs label {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.recall()
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    c.f1()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Evaluation summary written as `eval.json` and `eval.txt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

impl EvalReport {
    pub fn new(counts: ConfusionCounts) -> Self {
        let m = counts.metrics();
        Self {
            iou: m.iou,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
            counts,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Percentages with two decimals.
    pub fn to_table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>8}", "metric", "value")?;
        for (name, v) in [
            ("IoU", self.iou),
            ("F1", self.f1),
            ("Precision", self.precision),
            ("Recall", self.recall),
        ] {
            writeln!(f, "{name:<10}{:>8.2}", v * 100.0)?;
        }
        let c = &self.counts;
        writeln!(f, "{:<10}{:>8}", "TP", c.tp)?;
        writeln!(f, "{:<10}{:>8}", "FP", c.fp)?;
        writeln!(f, "{:<10}{:>8}", "FN", c.fn_)?;
        writeln!(f, "{:<10}{:>8}", "TN", c.tn)
    }
}
