//! Video analysis pipeline: classify every frame, track blink onset and the
//! break-up time, and segment break-up on the usable frames inside the
//! outer ring box.
//!
//! The state machine is strictly sequential. Detection, cropping,
//! segmentation and mapping back only depend on one frame, so they run in
//! parallel once every frame has been classified.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::model::TfNet;
use crate::tensor::{bilinear_resize, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameClassLabel {
    #[serde(alias = "clear", alias = "CLEAR")]
    Clear,
    #[serde(alias = "closed", alias = "CLOSED")]
    Closed,
    #[serde(alias = "broken", alias = "BROKEN")]
    Broken,
    #[serde(alias = "blur", alias = "BLUR")]
    Blur,
}

impl FrameClassLabel {
    pub const ALL: [FrameClassLabel; 4] = [
        FrameClassLabel::Clear,
        FrameClassLabel::Closed,
        FrameClassLabel::Broken,
        FrameClassLabel::Blur,
    ];

    /// Frames with these labels are segmented; closed eyes are not.
    pub fn is_segmented(self) -> bool {
        self != FrameClassLabel::Closed
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameClassLabel::Clear => "Clear",
            FrameClassLabel::Closed => "Closed",
            FrameClassLabel::Broken => "Broken",
            FrameClassLabel::Blur => "Blur",
        }
    }
}

impl fmt::Display for FrameClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FrameClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FrameClassLabel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format(format!("unknown frame label `{s}` (expected Clear, Closed, Broken or Blur)")))
    }
}

/// Axis-aligned rectangle in frame pixels; serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<[i64; 4]> for Rect {
    fn from([x, y, w, h]: [i64; 4]) -> Self {
        Rect { x, y, w, h }
    }
}

impl From<Rect> for [i64; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.x + other.w <= self.x + self.w && other.y + other.h <= self.y + self.h
    }

    /// Intersection with a `width x height` frame, or `None` if it is empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<Rect> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x + self.w).min(width as i64);
        let y1 = (self.y + self.h).min(height as i64);
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// The three ring boxes; only the outer one is needed for cropping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingBoxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inside: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub middle: Option<Rect>,
    pub outside: Rect,
}

impl RingBoxes {
    pub fn outside_only(outside: Rect) -> Self {
        RingBoxes {
            inside: None,
            middle: None,
            outside,
        }
    }

    /// Nesting of the boxes that are present.
    pub fn validate(&self) -> Result<()> {
        let chain: Vec<(&str, Rect)> = [("outside", Some(self.outside)), ("middle", self.middle), ("inside", self.inside)]
            .into_iter()
            .filter_map(|(n, r)| r.map(|r| (n, r)))
            .collect();
        for (name, r) in &chain {
            if r.w <= 0 || r.h <= 0 {
                return Err(Error::format(format!("{name} box {:?} has no area", <[i64; 4]>::from(*r))));
            }
        }
        for pair in chain.windows(2) {
            if !pair[0].1.contains(&pair[1].1) {
                return Err(Error::format(format!("{} box does not contain the {} box", pair[0].0, pair[1].0)));
            }
        }
        Ok(())
    }
}

/// Where a crop came from and how it was resized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    /// Source box after clamping to the frame.
    pub source: Rect,
    pub crop_h: usize,
    pub crop_w: usize,
    pub frame_h: usize,
    pub frame_w: usize,
}

impl CropTransform {
    /// Vertical and horizontal scale from box pixels to crop pixels.
    pub fn scale(&self) -> (f64, f64) {
        (
            self.crop_h as f64 / self.source.h as f64,
            self.crop_w as f64 / self.source.w as f64,
        )
    }

    /// Crop row sampled by frame row `y` (nearest, pixel centres).
    pub fn crop_row(&self, y: usize) -> usize {
        nearest(y as i64 - self.source.y, self.source.h, self.crop_h)
    }

    pub fn crop_col(&self, x: usize) -> usize {
        nearest(x as i64 - self.source.x, self.source.w, self.crop_w)
    }

    /// Frame row sampled by crop row `cy` (nearest, pixel centres).
    pub fn frame_row(&self, cy: usize) -> usize {
        self.source.y as usize + nearest(cy as i64, self.crop_h as i64, self.source.h as usize)
    }

    pub fn frame_col(&self, cx: usize) -> usize {
        self.source.x as usize + nearest(cx as i64, self.crop_w as i64, self.source.w as usize)
    }
}

/// Index in a grid of `to` cells whose centre is nearest to the centre of
/// cell `i` of a grid of `from` cells spanning the same extent.
fn nearest(i: i64, from: i64, to: usize) -> usize {
    let pos = ((i as f64 + 0.5) * to as f64 / from as f64).floor();
    (pos.max(0.0) as usize).min(to - 1)
}

fn frame_dims(frame: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = frame.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("frames must be 1x3xHxW, got {s}")));
    }
    Ok((s.h, s.w))
}

/// Extract `bbox` (clamped to the frame) and resize it bilinearly to `target`.
pub fn crop(frame: &Tensor<f32>, bbox: Rect, target: (usize, usize)) -> Result<(Tensor<f32>, CropTransform)> {
    let (fh, fw) = frame_dims(frame)?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::config("crop target size must be positive"));
    }
    let source = bbox.clamp_to(fw, fh).ok_or_else(|| {
        Error::Pipeline(format!("box {:?} does not overlap the {fw}x{fh} frame", <[i64; 4]>::from(bbox)))
    })?;
    let (x0, y0) = (source.x as usize, source.y as usize);
    let (bw, bh) = (source.w as usize, source.h as usize);
    let sub = Tensor::from_fn(Shape::new(1, 3, bh, bw), |_, c, y, x| frame.at(0, c, y0 + y, x0 + x));
    let out = bilinear_resize(&sub, th, tw)?;
    Ok((
        out,
        CropTransform {
            source,
            crop_h: th,
            crop_w: tw,
            frame_h: fh,
            frame_w: fw,
        },
    ))
}

/// Nearest-neighbour crop of a full-frame mask (used to crop annotations).
pub fn crop_mask(mask: &SegMask, t: &CropTransform) -> Result<SegMask> {
    if mask.height() != t.frame_h || mask.width() != t.frame_w {
        return Err(Error::shape(format!(
            "mask is {}x{}, frame is {}x{}",
            mask.height(),
            mask.width(),
            t.frame_h,
            t.frame_w
        )));
    }
    Ok(SegMask::from_fn(t.crop_h, t.crop_w, |cy, cx| mask.get(t.frame_row(cy), t.frame_col(cx))))
}

/// Paste a crop-space mask back into frame coordinates; zero outside the box.
pub fn map_back(mask: &SegMask, t: &CropTransform) -> Result<SegMask> {
    if mask.height() != t.crop_h || mask.width() != t.crop_w {
        return Err(Error::shape(format!(
            "mask is {}x{}, crop is {}x{}",
            mask.height(),
            mask.width(),
            t.crop_h,
            t.crop_w
        )));
    }
    let r = t.source;
    let inside = |y: usize, x: usize| {
        (y as i64) >= r.y && (y as i64) < r.y + r.h && (x as i64) >= r.x && (x as i64) < r.x + r.w
    };
    Ok(SegMask::from_fn(t.frame_h, t.frame_w, |y, x| {
        inside(y, x) && mask.get(t.crop_row(y), t.crop_col(x))
    }))
}

pub trait Classifier: Sync {
    fn classify(&self, index: usize, frame: &Tensor<f32>) -> Result<FrameClassLabel>;
}

pub trait Detector: Sync {
    fn detect(&self, index: usize, frame: &Tensor<f32>) -> Result<RingBoxes>;
}

pub trait Segmenter: Sync {
    /// Mask in crop coordinates for the crop of frame `index`.
    fn segment(&self, index: usize, crop: &Tensor<f32>, transform: &CropTransform) -> Result<SegMask>;
}

/// The three pluggable stages plus the crop resolution.
pub struct StageBackends<'a> {
    pub classifier: &'a dyn Classifier,
    pub detector: &'a dyn Detector,
    pub segmenter: &'a dyn Segmenter,
    pub crop_size: (usize, usize),
}

/// Replays annotated labels.
#[derive(Clone, Debug, Default)]
pub struct OracleClassifier {
    labels: HashMap<usize, FrameClassLabel>,
}

impl OracleClassifier {
    pub fn new(labels: impl IntoIterator<Item = (usize, FrameClassLabel)>) -> Self {
        OracleClassifier {
            labels: labels.into_iter().collect(),
        }
    }
}

impl Classifier for OracleClassifier {
    fn classify(&self, index: usize, _frame: &Tensor<f32>) -> Result<FrameClassLabel> {
        self.labels
            .get(&index)
            .copied()
            .ok_or_else(|| Error::Pipeline(format!("no annotated label for frame {index}")))
    }
}

/// Replays annotated ring boxes.
#[derive(Clone, Debug, Default)]
pub struct OracleDetector {
    boxes: HashMap<usize, RingBoxes>,
}

impl OracleDetector {
    pub fn new(boxes: impl IntoIterator<Item = (usize, RingBoxes)>) -> Self {
        OracleDetector {
            boxes: boxes.into_iter().collect(),
        }
    }
}

impl Detector for OracleDetector {
    fn detect(&self, index: usize, _frame: &Tensor<f32>) -> Result<RingBoxes> {
        self.boxes
            .get(&index)
            .copied()
            .ok_or_else(|| Error::Pipeline(format!("no annotated ring boxes for frame {index}")))
    }
}

/// Centred box covering `fraction` of each frame dimension; a stand-in when
/// no detector or box annotations are available.
#[derive(Clone, Copy, Debug)]
pub struct FixedFractionDetector {
    pub fraction: f64,
}

impl FixedFractionDetector {
    pub const DEFAULT_FRACTION: f64 = 0.8;

    pub fn new(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!("box fraction must lie in (0, 1], got {fraction}")));
        }
        Ok(FixedFractionDetector { fraction })
    }
}

impl Detector for FixedFractionDetector {
    fn detect(&self, _index: usize, frame: &Tensor<f32>) -> Result<RingBoxes> {
        let (h, w) = frame_dims(frame)?;
        let bw = ((w as f64 * self.fraction).round() as i64).max(1);
        let bh = ((h as f64 * self.fraction).round() as i64).max(1);
        Ok(RingBoxes::outside_only(Rect::new(
            (w as i64 - bw) / 2,
            (h as i64 - bh) / 2,
            bw,
            bh,
        )))
    }
}

/// Replays annotated full-frame masks, cropped the same way as the image.
#[derive(Clone, Debug, Default)]
pub struct OracleSegmenter {
    masks: HashMap<usize, SegMask>,
}

impl OracleSegmenter {
    pub fn new(masks: impl IntoIterator<Item = (usize, SegMask)>) -> Self {
        OracleSegmenter {
            masks: masks.into_iter().collect(),
        }
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, index: usize, _crop: &Tensor<f32>, transform: &CropTransform) -> Result<SegMask> {
        match self.masks.get(&index) {
            Some(m) => crop_mask(m, transform),
            // frames without polygons have no break-up
            None => Ok(SegMask::empty(transform.crop_h, transform.crop_w)),
        }
    }
}

/// A segmentation network applied to each crop.
pub struct ModelSegmenter {
    pub model: TfNet<f32>,
}

impl Segmenter for ModelSegmenter {
    fn segment(&self, _index: usize, crop: &Tensor<f32>, _transform: &CropTransform) -> Result<SegMask> {
        self.model.predict_mask(crop)
    }
}

/// Blink onset and break-up time, advanced one classified frame at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineState {
    /// Index of the most recent closed-eye frame (1 before any).
    pub t_onset: usize,
    /// Frames from onset to the first break-up; set at most once.
    pub t_but: Option<usize>,
    /// Last frame index processed (0 before the first frame).
    pub last_index: usize,
}

impl Default for PipelineState {
    fn default() -> Self {
        PipelineState {
            t_onset: 1,
            t_but: None,
            last_index: 0,
        }
    }
}

impl PipelineState {
    /// Advance over frame `index` (1-based, strictly increasing). Returns
    /// whether the frame should be segmented.
    pub fn advance(&mut self, index: usize, label: FrameClassLabel) -> Result<bool> {
        if index <= self.last_index {
            return Err(Error::Pipeline(format!(
                "frame {index} arrived after frame {}; indices must strictly increase",
                self.last_index
            )));
        }
        self.last_index = index;
        match label {
            FrameClassLabel::Closed => {
                self.t_onset = index;
                Ok(false)
            }
            FrameClassLabel::Broken => {
                if self.t_but.is_none() {
                    self.t_but = Some(index - self.t_onset);
                }
                Ok(true)
            }
            FrameClassLabel::Clear | FrameClassLabel::Blur => Ok(true),
        }
    }
}

/// Detect, crop, segment and map back one frame.
pub fn segment_frame(index: usize, frame: &Tensor<f32>, backends: &StageBackends<'_>) -> Result<SegMask> {
    let boxes = backends.detector.detect(index, frame)?;
    boxes.validate()?;
    let (cropped, transform) = crop(frame, boxes.outside, backends.crop_size)?;
    let mask = backends.segmenter.segment(index, &cropped, &transform)?;
    map_back(&mask, &transform)
}

/// One full step: classify, advance the state, and segment if required.
pub fn step(
    state: &mut PipelineState,
    index: usize,
    frame: &Tensor<f32>,
    backends: &StageBackends<'_>,
) -> Result<(FrameClassLabel, Option<SegMask>)> {
    let label = backends.classifier.classify(index, frame)?;
    let mask = if state.advance(index, label)? {
        Some(segment_frame(index, frame, backends)?)
    } else {
        None
    };
    Ok((label, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoResult {
    pub t_but_frames: Option<usize>,
    pub t_but_seconds: Option<f64>,
    pub labels: Vec<FrameClassLabel>,
    /// `None` exactly for closed-eye frames.
    pub masks: Vec<Option<SegMask>>,
}

/// Run the pipeline over frames numbered 1, 2, ... in order.
pub fn run_video(frames: &[Tensor<f32>], backends: &StageBackends<'_>, fps: f64) -> Result<VideoResult> {
    run_video_with(frames, backends, fps, true)
}

/// As [`run_video`], optionally segmenting frames one after another.
pub fn run_video_with(
    frames: &[Tensor<f32>],
    backends: &StageBackends<'_>,
    fps: f64,
    parallel: bool,
) -> Result<VideoResult> {
    if frames.is_empty() {
        return Err(Error::Pipeline("the frame stream is empty".into()));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::config(format!("fps must be positive, got {fps}")));
    }
    let mut state = PipelineState::default();
    let mut labels = Vec::with_capacity(frames.len());
    let mut wanted = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let index = i + 1;
        let label = backends.classifier.classify(index, frame)?;
        wanted.push(state.advance(index, label)?);
        labels.push(label);
    }
    let work = |(i, frame): (usize, &Tensor<f32>)| -> Result<Option<SegMask>> {
        if wanted[i] {
            segment_frame(i + 1, frame, backends).map(Some)
        } else {
            Ok(None)
        }
    };
    let masks: Vec<Option<SegMask>> = if parallel {
        frames.par_iter().enumerate().map(work).collect::<Result<_>>()?
    } else {
        frames.iter().enumerate().map(work).collect::<Result<_>>()?
    };
    Ok(VideoResult {
        t_but_frames: state.t_but,
        t_but_seconds: state.t_but.map(|f| f as f64 / fps),
        labels,
        masks,
    })
}
