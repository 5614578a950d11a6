//! Frame annotations, one JSON object per line:
//!
//! ```json
//! {"frame": 12, "label": "Broken", "width": 640, "height": 480,
//!  "boxes": {"inside": [x, y, w, h], "middle": [x, y, w, h], "outside": [x, y, w, h]},
//!  "polygons": [[[x, y], [x, y], [x, y]]]}
//! ```
//!
//! `boxes`, `polygons`, `width` and `height` are optional; polygons require
//! the frame size and are only allowed on `Broken` frames. Polygon vertices
//! are in pixel units where pixel `(x, y)` covers `[x, x+1) x [y, y+1)`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::read_file;
use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::pipeline::{FrameClassLabel, OracleClassifier, OracleDetector, OracleSegmenter, RingBoxes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub frame: usize,
    pub label: FrameClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<RingBoxes>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub polygons: Vec<Vec<[f64; 2]>>,
    /// Rasterized polygons, filled in at ingestion.
    #[serde(skip)]
    pub mask: Option<SegMask>,
}

impl AnnotationRecord {
    fn finish(mut self) -> Result<Self> {
        if self.frame == 0 {
            return Err(Error::format("frame numbers start at 1"));
        }
        if let Some(b) = &self.boxes {
            b.validate()?;
        }
        if self.polygons.is_empty() {
            return Ok(self);
        }
        if self.label != FrameClassLabel::Broken {
            return Err(Error::format(format!(
                "frame {} has polygons but is labelled {}",
                self.frame, self.label
            )));
        }
        let (Some(w), Some(h)) = (self.width, self.height) else {
            return Err(Error::format(format!("frame {} has polygons but no width/height", self.frame)));
        };
        for p in &self.polygons {
            if p.len() < 3 {
                return Err(Error::format(format!("frame {}: polygon with {} vertices", self.frame, p.len())));
            }
            if p.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::format(format!("frame {}: non-finite polygon vertex", self.frame)));
            }
        }
        self.mask = Some(rasterize_polygons(&self.polygons, h, w));
        Ok(self)
    }
}

/// Union of the even-odd fills of each polygon, sampled at pixel centres.
pub fn rasterize_polygons(polygons: &[Vec<[f64; 2]>], height: usize, width: usize) -> SegMask {
    let mut mask = SegMask::empty(height, width);
    let mut crossings = Vec::new();
    for poly in polygons {
        for y in 0..height {
            let py = y as f64 + 0.5;
            crossings.clear();
            for i in 0..poly.len() {
                let [xi, yi] = poly[i];
                let [xj, yj] = poly[(i + 1) % poly.len()];
                if (yi > py) != (yj > py) {
                    crossings.push(xi + (py - yi) * (xj - xi) / (yj - yi));
                }
            }
            crossings.sort_by(f64::total_cmp);
            // a centre is inside when an odd number of crossings lie strictly
            // to its right, i.e. it falls in [c0, c1), [c2, c3), ...
            for span in crossings.chunks_exact(2) {
                let first = (span[0] - 0.5).ceil().max(0.0);
                let last = (span[1] - 0.5).ceil().min(width as f64);
                let mut x = first;
                while x < last {
                    mask.set(y, x as usize, true);
                    x += 1.0;
                }
            }
        }
    }
    mask
}

/// Parse JSON-lines annotations; blank lines are ignored.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| Error::format(format!("annotation line {}: {e}", n + 1)))?;
        let rec = rec
            .finish()
            .map_err(|e| Error::format(format!("annotation line {}: {e}", n + 1)))?;
        if !seen.insert(rec.frame) {
            return Err(Error::format(format!("annotation line {}: frame {} repeated", n + 1, rec.frame)));
        }
        out.push(rec);
    }
    out.sort_by_key(|r| r.frame);
    Ok(out)
}

pub fn ingest_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(format!("{}: not UTF-8", path.display())))?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Classifier, detector and segmenter that replay the annotations.
pub fn oracle_stages(records: &[AnnotationRecord]) -> (OracleClassifier, OracleDetector, OracleSegmenter) {
    (
        OracleClassifier::new(records.iter().map(|r| (r.frame, r.label))),
        OracleDetector::new(records.iter().filter_map(|r| r.boxes.map(|b| (r.frame, b)))),
        OracleSegmenter::new(records.iter().filter_map(|r| r.mask.clone().map(|m| (r.frame, m)))),
    )
}
