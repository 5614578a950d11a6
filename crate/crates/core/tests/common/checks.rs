//! Oracle comparisons shared by the dedicated tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tearflow::metrics::{evaluate_dataset, Distance, ImageMetrics, SegMask};
use tearflow::pipeline::{
    crop, crop_mask, map_back, run_video_with, Classifier, FixedFractionDetector, FrameClassLabel, OracleSegmenter,
    Rect, StageBackends,
};
use tearflow::tensor::{Shape, Tensor};
use tearflow::Result;

use super::oracles::{map_back_oracle, overlap_oracle, surface_oracle, t_but_two_pass};

/// A random mask of at most `max_side` per side, mixing empty, full, noisy
/// and rectangle-union masks.
pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> SegMask {
    match rng.gen_range(0..10) {
        0 => SegMask::empty(h, w),
        1 => SegMask::from_fn(h, w, |_, _| true),
        2 | 3 => {
            let p = rng.gen_range(0.02..0.98);
            SegMask::from_fn(h, w, |_, _| rng.gen_bool(p))
        }
        _ => {
            let rects: Vec<(usize, usize, usize, usize)> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let y0 = rng.gen_range(0..h);
                    let x0 = rng.gen_range(0..w);
                    (y0, x0, rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1)
                })
                .collect();
            SegMask::from_fn(h, w, |y, x| {
                rects.iter().any(|&(y0, x0, y1, x1)| (y0..y1).contains(&y) && (x0..x1).contains(&x))
            })
        }
    }
}

#[derive(Debug, Default)]
pub struct MetricCheck {
    pub pairs: usize,
    pub overlap_mismatches: usize,
    pub worst_surface_err: f64,
    pub surface_definedness_mismatches: usize,
    pub worst_identity_err: f64,
    pub undefined_cases: usize,
    pub undefined_rendered_na: bool,
}

impl MetricCheck {
    pub fn passed(&self) -> bool {
        self.overlap_mismatches == 0
            && self.surface_definedness_mismatches == 0
            && self.worst_surface_err <= 1e-9
            && self.worst_identity_err <= 1e-12
            && self.undefined_cases > 0
            && self.undefined_rendered_na
    }
}

pub fn metric_oracle_check(seed: u64, pairs: usize, max_side: usize) -> MetricCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricCheck {
        pairs,
        undefined_rendered_na: true,
        ..Default::default()
    };
    for _ in 0..pairs {
        let h = rng.gen_range(1..=max_side);
        let w = rng.gen_range(1..=max_side);
        let pred = random_mask(&mut rng, h, w);
        let gt = random_mask(&mut rng, h, w);
        let m = ImageMetrics::compute(&pred, &gt).expect("same shape");
        for (c, class) in [(0, false), (1, true)] {
            let (iou, dsc, recall, fpr) = overlap_oracle(&pred, &gt, class);
            let got = &m.classes[c];
            if (got.iou, got.dsc, got.recall, got.fpr) != (iou, dsc, recall, fpr) {
                out.overlap_mismatches += 1;
            }
            let identity = 2.0 * got.iou / (1.0 + got.iou);
            out.worst_identity_err = out.worst_identity_err.max((got.dsc - identity).abs());
        }
        match (surface_oracle(&pred, &gt), m.hd95, m.assd) {
            (Some((hd, asd)), Some(h), Some(a)) => {
                out.worst_surface_err = out.worst_surface_err.max((hd - h).abs()).max((asd - a).abs());
            }
            (None, None, None) => {
                out.undefined_cases += 1;
                let rendered = (Distance(m.hd95).to_string(), Distance(m.assd).to_string());
                let report = evaluate_dataset(&[(pred.clone(), gt.clone())]).expect("one pair");
                let text = report.to_toml();
                out.undefined_rendered_na &= rendered == ("N/A".into(), "N/A".into())
                    && text.contains("hd95 = \"N/A\"")
                    && text.contains("assd = \"N/A\"");
            }
            _ => out.surface_definedness_mismatches += 1,
        }
    }
    out
}

/// Replays one label sequence.
pub struct SequenceClassifier(pub Vec<FrameClassLabel>);

impl Classifier for SequenceClassifier {
    fn classify(&self, index: usize, _frame: &Tensor<f32>) -> Result<FrameClassLabel> {
        Ok(self.0[index - 1])
    }
}

#[derive(Debug, Default)]
pub struct PipelineCheck {
    pub sequences: usize,
    pub t_but_mismatches: usize,
    pub mask_mismatches: usize,
    pub seconds_mismatches: usize,
    pub errors: usize,
}

impl PipelineCheck {
    pub fn passed(&self) -> bool {
        self.sequences > 0
            && self.t_but_mismatches == 0
            && self.mask_mismatches == 0
            && self.seconds_mismatches == 0
            && self.errors == 0
    }
}

/// Decode sequence number `code` into `len` labels (base 4, first frame lowest).
pub fn decode_sequence(mut code: usize, len: usize) -> Vec<FrameClassLabel> {
    (0..len)
        .map(|_| {
            let l = FrameClassLabel::ALL[code % 4];
            code /= 4;
            l
        })
        .collect()
}

/// Run every label sequence of length `len` through the full pipeline.
pub fn pipeline_oracle_check(len: usize, fps: f64) -> PipelineCheck {
    let frames: Vec<Tensor<f32>> = (0..len).map(|_| Tensor::zeros(Shape::new(1, 3, 4, 4))).collect();
    let detector = FixedFractionDetector::new(1.0).expect("valid fraction");
    let segmenter = OracleSegmenter::new(std::iter::empty());
    let total = 4usize.pow(len as u32);
    let results: Vec<(bool, bool, bool, bool)> = (0..total)
        .into_par_iter()
        .map(|code| {
            let labels = decode_sequence(code, len);
            let classifier = SequenceClassifier(labels.clone());
            let backends = StageBackends {
                classifier: &classifier,
                detector: &detector,
                segmenter: &segmenter,
                crop_size: (4, 4),
            };
            let Ok(r) = run_video_with(&frames, &backends, fps, false) else {
                return (false, false, false, true);
            };
            let expect = t_but_two_pass(&labels);
            let t_ok = r.t_but_frames == expect && r.labels == labels;
            let masks_ok = labels.iter().zip(&r.masks).all(|(l, m)| {
                let wanted = matches!(l, FrameClassLabel::Clear | FrameClassLabel::Blur | FrameClassLabel::Broken);
                m.is_some() == wanted
            });
            let secs_ok = r.t_but_seconds == expect.map(|f| f as f64 / fps);
            (t_ok, masks_ok, secs_ok, false)
        })
        .collect();
    let mut out = PipelineCheck {
        sequences: total,
        ..Default::default()
    };
    for (t, m, s, e) in results {
        out.t_but_mismatches += !t as usize;
        out.mask_mismatches += !m as usize;
        out.seconds_mismatches += !s as usize;
        out.errors += e as usize;
    }
    out
}

#[derive(Debug, Default)]
pub struct GeometryCheck {
    pub cases: usize,
    pub outside_nonzero: usize,
    pub identity_cases: usize,
    pub identity_failures: usize,
    pub scaled_cases: usize,
    pub scaled_failures: usize,
}

impl GeometryCheck {
    pub fn passed(&self) -> bool {
        self.identity_cases > 0
            && self.scaled_cases > 0
            && self.outside_nonzero == 0
            && self.identity_failures == 0
            && self.scaled_failures == 0
    }
}

/// Random frames and boxes (some partly off-frame), with crops either the
/// size of the clamped box or rescaled.
pub fn geometry_check(seed: u64, cases: usize) -> GeometryCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GeometryCheck::default();
    while out.cases < cases {
        let fh = rng.gen_range(4..48);
        let fw = rng.gen_range(4..48);
        let bbox = Rect::new(
            rng.gen_range(-6..fw as i64),
            rng.gen_range(-6..fh as i64),
            rng.gen_range(1..fw as i64 + 6),
            rng.gen_range(1..fh as i64 + 6),
        );
        let Some(clamped) = bbox.clamp_to(fw, fh) else { continue };
        out.cases += 1;
        let same_size = rng.gen_bool(0.4);
        let target = if same_size {
            (clamped.h as usize, clamped.w as usize)
        } else {
            (rng.gen_range(1..40), rng.gen_range(1..40))
        };
        let frame = Tensor::<f32>::from_fn(Shape::new(1, 3, fh, fw), |_, c, y, x| (c * 10_000 + y * 100 + x) as f32);
        let (cropped, t) = crop(&frame, bbox, target).expect("overlapping box");
        assert_eq!(t.source, clamped);

        let crop_m = random_mask(&mut rng, target.0, target.1);
        let back = map_back(&crop_m, &t).expect("crop-sized mask");
        for y in 0..fh {
            for x in 0..fw {
                let (yi, xi) = (y as i64, x as i64);
                let inside = yi >= clamped.y && yi < clamped.y + clamped.h && xi >= clamped.x && xi < clamped.x + clamped.w;
                if !inside && back.get(y, x) {
                    out.outside_nonzero += 1;
                }
            }
        }

        if same_size {
            out.identity_cases += 1;
            let frame_m = random_mask(&mut rng, fh, fw);
            let round = map_back(&crop_mask(&frame_m, &t).unwrap(), &t).unwrap();
            let restricted = SegMask::from_fn(fh, fw, |y, x| {
                let (yi, xi) = (y as i64, x as i64);
                frame_m.get(y, x)
                    && yi >= clamped.y
                    && yi < clamped.y + clamped.h
                    && xi >= clamped.x
                    && xi < clamped.x + clamped.w
            });
            let pixels_ok = (0..target.0).all(|cy| {
                (0..target.1).all(|cx| {
                    (0..3).all(|c| {
                        cropped.at(0, c, cy, cx)
                            == frame.at(0, c, clamped.y as usize + cy, clamped.x as usize + cx)
                    })
                })
            });
            if round != restricted || back != map_back_oracle(&crop_m, clamped, fh, fw) || !pixels_ok {
                out.identity_failures += 1;
            }
        } else {
            out.scaled_cases += 1;
            if back != map_back_oracle(&crop_m, clamped, fh, fw) {
                out.scaled_failures += 1;
            }
        }
    }
    out
}
