use super::SegMask;
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Counts for background (index 0) and break-up (index 1).
pub type Confusion = [ClassCounts; 2];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OverlapMetrics {
    pub iou: f64,
    pub dsc: f64,
    pub recall: f64,
    pub fpr: f64,
}

pub fn confusion(pred: &SegMask, gt: &SegMask) -> Result<Confusion> {
    pred.check_same_shape(gt)?;
    let mut fg = ClassCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p != 0, g != 0) {
            (true, true) => fg.tp += 1,
            (true, false) => fg.fp += 1,
            (false, true) => fg.fn_ += 1,
            (false, false) => fg.tn += 1,
        }
    }
    let bg = ClassCounts {
        tp: fg.tn,
        fp: fg.fn_,
        fn_: fg.fp,
        tn: fg.tp,
    };
    Ok([bg, fg])
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Overlap ratios; a zero denominator yields 0 (so an absent class scores 0).
pub fn overlap_metrics(c: &ClassCounts) -> OverlapMetrics {
    OverlapMetrics {
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        recall: ratio(c.tp, c.tp + c.fn_),
        fpr: ratio(c.fp, c.fp + c.tn),
    }
}
