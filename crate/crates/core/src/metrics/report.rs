use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{assd, confusion, hd95, overlap_metrics, OverlapMetrics, SegMask};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 2] = ["background", "tfbu"];

/// A surface distance in pixels, or undefined when a surface is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Distance(pub Option<f64>);

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.4}"),
            None => f.write_str("N/A"),
        }
    }
}

impl Serialize for Distance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("N/A"),
        }
    }
}

impl<'de> Deserialize<'de> for Distance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Distance(Some(v))),
            Raw::Text(t) if t == "N/A" => Ok(Distance(None)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"N/A\", got {t:?}"))),
        }
    }
}

/// Metrics of a single prediction/ground-truth pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub classes: [OverlapMetrics; 2],
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(pred: &SegMask, gt: &SegMask) -> Result<Self> {
        let counts = confusion(pred, gt)?;
        Ok(ImageMetrics {
            classes: counts.map(|c| overlap_metrics(&c)),
            hd95: hd95(pred, gt)?,
            assd: assd(pred, gt)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub iou: f64,
    pub dsc: f64,
    pub recall: f64,
    pub fpr: f64,
}

impl ClassReport {
    fn overlap(&self) -> OverlapMetrics {
        OverlapMetrics {
            iou: self.iou,
            dsc: self.dsc,
            recall: self.recall,
            fpr: self.fpr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub iou: f64,
    pub dsc: f64,
    pub recall: f64,
    pub fpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceReport {
    pub hd95: Distance,
    pub assd: Distance,
    pub hd95_undefined: usize,
    pub assd_undefined: usize,
}

/// Image-averaged evaluation over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: usize,
    pub mean: MeanReport,
    pub surface: SurfaceReport,
    pub class: Vec<ClassReport>,
}

impl MetricReport {
    pub fn tfbu(&self) -> &ClassReport {
        &self.class[1]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(format!("metric report: {e}")))
    }
}

fn mean_defined(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let undefined = values.len() - defined.len();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (mean, undefined)
}

/// Average per-image metrics over `(prediction, ground truth)` pairs.
///
/// Images with an undefined surface distance are left out of that mean and
/// counted instead.
pub fn evaluate_dataset(pairs: &[(SegMask, SegMask)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::format("evaluation needs at least one image pair"));
    }
    let per_image: Vec<ImageMetrics> = pairs
        .par_iter()
        .map(|(p, g)| ImageMetrics::compute(p, g))
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let class: Vec<ClassReport> = (0..2)
        .map(|c| {
            let mut acc = OverlapMetrics::default();
            for m in &per_image {
                acc.iou += m.classes[c].iou;
                acc.dsc += m.classes[c].dsc;
                acc.recall += m.classes[c].recall;
                acc.fpr += m.classes[c].fpr;
            }
            ClassReport {
                name: CLASS_NAMES[c].to_string(),
                iou: acc.iou / n,
                dsc: acc.dsc / n,
                recall: acc.recall / n,
                fpr: acc.fpr / n,
            }
        })
        .collect();
    let k = class.len() as f64;
    let sum = class.iter().map(ClassReport::overlap).fold(OverlapMetrics::default(), |a, b| OverlapMetrics {
        iou: a.iou + b.iou,
        dsc: a.dsc + b.dsc,
        recall: a.recall + b.recall,
        fpr: a.fpr + b.fpr,
    });
    let hd: Vec<Option<f64>> = per_image.iter().map(|m| m.hd95).collect();
    let asd: Vec<Option<f64>> = per_image.iter().map(|m| m.assd).collect();
    let (hd95, hd95_undefined) = mean_defined(&hd);
    let (assd, assd_undefined) = mean_defined(&asd);
    Ok(MetricReport {
        images: pairs.len(),
        mean: MeanReport {
            iou: sum.iou / k,
            dsc: sum.dsc / k,
            recall: sum.recall / k,
            fpr: sum.fpr / k,
        },
        surface: SurfaceReport {
            hd95: Distance(hd95),
            assd: Distance(assd),
            hd95_undefined,
            assd_undefined,
        },
        class,
    })
}
