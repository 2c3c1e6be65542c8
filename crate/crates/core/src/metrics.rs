//! Pixel-wise segmentation scores and centerline Dice.

use serde::{Deserialize, Serialize};

use crate::raster::{BinaryMask, RasterError};
use crate::skeleton::thin;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio((self.tp + self.tn) as f64, self.total() as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp as f64, (self.tp + self.fp) as f64)
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    pub fn iou(&self) -> Option<f64> {
        ratio(self.tp as f64, (self.tp + self.fp + self.fn_) as f64)
    }

    pub fn dice(&self) -> Option<f64> {
        ratio(2.0 * self.tp as f64, (2 * self.tp + self.fp + self.fn_) as f64)
    }
}

/// Confusion counts of `pred` against `gt` over the pixels of `roi`.
pub fn confusion(
    pred: &BinaryMask,
    gt: &BinaryMask,
    roi: &BinaryMask,
) -> Result<ConfusionCounts, RasterError> {
    pred.same_dims(gt)?;
    pred.same_dims(roi)?;
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &r) in pred.data().iter().zip(gt.data()).zip(roi.data()) {
        if !r {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Centerline Dice: harmonic mean of skeleton precision and skeleton sensitivity.
/// `None` when either skeleton is empty.
pub fn cl_dice(pred: &BinaryMask, gt: &BinaryMask) -> Option<f64> {
    let sp = thin(pred);
    let sg = thin(gt);
    let (np, ng) = (sp.count(), sg.count());
    if np == 0 || ng == 0 {
        return None;
    }
    let tprec = sp.and(gt).count() as f64 / np as f64;
    let tsens = sg.and(pred).count() as f64 / ng as f64;
    if tprec + tsens == 0.0 {
        return Some(0.0);
    }
    Some(2.0 * tprec * tsens / (tprec + tsens))
}

/// Scores of one frame. Absent entries were undefined for the frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub accuracy: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub cl_dice: Option<f64>,
}

impl SegScores {
    pub fn named(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("accuracy", self.accuracy),
            ("dice", self.dice),
            ("iou", self.iou),
            ("precision", self.precision),
            ("sensitivity", self.sensitivity),
            ("cl_dice", self.cl_dice),
        ]
    }
}

/// All scores of `pred` against `gt`, both restricted to `roi`.
pub fn score(pred: &BinaryMask, gt: &BinaryMask, roi: &BinaryMask) -> Result<SegScores, RasterError> {
    let c = confusion(pred, gt, roi)?;
    Ok(SegScores {
        accuracy: c.accuracy(),
        dice: c.dice(),
        iou: c.iou(),
        precision: c.precision(),
        sensitivity: c.sensitivity(),
        cl_dice: cl_dice(&pred.and(roi), &gt.and(roi)),
    })
}
