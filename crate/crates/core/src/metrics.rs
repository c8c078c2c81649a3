//! Dice evaluation and the per-view report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, ViewSpec};
use crate::error::{Error, Result};

/// `2|A∩B| / (|A|+|B|)`, with 1 for two empty masks.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!("mask {}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width)));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Positive logits, i.e. `σ(logit) > 0.5`.
pub fn binarize<T: glfusion_tensor::Scalar>(height: usize, width: usize, logits: &[T]) -> BinaryMask {
    BinaryMask { height, width, bits: logits.iter().map(|&v| v > T::zero()).collect() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub class: String,
    pub frame_count: usize,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDice {
    pub view: String,
    pub classes: Vec<ClassDice>,
    /// Mean over classes.
    pub mean_dice: f64,
}

/// Running Dice sums per view and class.
#[derive(Clone, Debug)]
pub struct DiceAccumulator {
    views: Vec<ViewSpec>,
    sums: Vec<Vec<(f64, usize)>>,
}

impl DiceAccumulator {
    pub fn new(views: &[ViewSpec]) -> Self {
        Self { views: views.to_vec(), sums: views.iter().map(|v| vec![(0.0, 0); v.num_classes()]).collect() }
    }

    /// Adds one frame of view `v`, one mask per class.
    pub fn add_frame(&mut self, view: usize, pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<()> {
        let classes =
            self.views.get(view).map(ViewSpec::num_classes).ok_or_else(|| {
                Error::Argument(format!("view index {view} outside a roster of {}", self.views.len()))
            })?;
        if pred.len() != classes || gt.len() != classes {
            return Err(Error::Shape(format!(
                "view {view}: {} predicted and {} true masks for {classes} classes",
                pred.len(),
                gt.len()
            )));
        }
        for (c, (p, g)) in pred.iter().zip(gt).enumerate() {
            let d = dice_score(p, g)?;
            let slot = &mut self.sums[view][c];
            slot.0 += d;
            slot.1 += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> DiceReport {
        let views = self
            .views
            .iter()
            .zip(&self.sums)
            .map(|(spec, sums)| {
                let classes: Vec<ClassDice> = spec
                    .class_set
                    .iter()
                    .zip(sums)
                    .map(|(c, &(s, n))| ClassDice {
                        class: c.to_string(),
                        frame_count: n,
                        mean_dice: if n == 0 { 0.0 } else { s / n as f64 },
                    })
                    .collect();
                let mean_dice = classes.iter().map(|c| c.mean_dice).sum::<f64>() / classes.len().max(1) as f64;
                ViewDice { view: spec.view_id.to_string(), classes, mean_dice }
            })
            .collect::<Vec<_>>();
        let average = views.iter().map(|v| v.mean_dice).sum::<f64>() / views.len().max(1) as f64;
        DiceReport { views, average }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub views: Vec<ViewDice>,
    /// Mean over views of the per-view class means.
    pub average: f64,
}

impl DiceReport {
    /// CSV with columns `view,class,frame_count,mean_dice`; view summaries use class `ALL` and the last row is `AVERAGE`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io { path: "<dice report>".into(), source: std::io::Error::other(e) };
        w.write_record(["view", "class", "frame_count", "mean_dice"]).map_err(err)?;
        for v in &self.views {
            for c in &v.classes {
                w.write_record([v.view.as_str(), &c.class, &c.frame_count.to_string(), &format!("{:.6}", c.mean_dice)])
                    .map_err(err)?;
            }
        }
        let frames = |v: &ViewDice| v.classes.first().map_or(0, |c| c.frame_count);
        for v in &self.views {
            w.write_record([v.view.as_str(), "ALL", &frames(v).to_string(), &format!("{:.6}", v.mean_dice)])
                .map_err(err)?;
        }
        let total: usize = self.views.iter().map(frames).sum();
        w.write_record(["AVERAGE", "ALL", &total.to_string(), &format!("{:.6}", self.average)]).map_err(err)?;
        w.flush().map_err(|e| Error::io("<dice report>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}
