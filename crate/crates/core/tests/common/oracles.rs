//! Independent, deliberately naive reference implementations.

use tearflow::metrics::SegMask;
use tearflow::pipeline::{FrameClassLabel, Rect};

/// Confusion counts `(tp, fp, fn, tn)` of `class` from a direct pixel scan.
pub fn pixel_scan_counts(pred: &SegMask, gt: &SegMask, class: bool) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let p = pred.get(y, x) == class;
            let g = gt.get(y, x) == class;
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    (tp, fp, fn_, tn)
}

fn div_or_zero(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(iou, dsc, recall, fpr)` of `class`, zero when a denominator vanishes.
pub fn overlap_oracle(pred: &SegMask, gt: &SegMask, class: bool) -> (f64, f64, f64, f64) {
    let (tp, fp, fn_, tn) = pixel_scan_counts(pred, gt, class);
    (
        div_or_zero(tp, tp + fp + fn_),
        div_or_zero(2 * tp, 2 * tp + fp + fn_),
        div_or_zero(tp, tp + fn_),
        div_or_zero(fp, fp + tn),
    )
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary_oracle(m: &SegMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !on(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_all_pairs(a: &[(i64, i64)], b: &[(i64, i64)]) -> Vec<f64> {
    a.iter()
        .map(|&(ya, xa)| {
            b.iter()
                .map(|&(yb, xb)| (((ya - yb).pow(2) + (xa - xb).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `(hd95, assd)` from all pairs of boundary pixels; `None` if either boundary is empty.
pub fn surface_oracle(pred: &SegMask, gt: &SegMask) -> Option<(f64, f64)> {
    let a = boundary_oracle(pred);
    let b = boundary_oracle(gt);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut d = directed_all_pairs(&a, &b);
    d.extend(directed_all_pairs(&b, &a));
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let below = rank.floor() as usize;
    let frac = rank - below as f64;
    let hd = if below + 1 < d.len() {
        d[below] * (1.0 - frac) + d[below + 1] * frac
    } else {
        d[below]
    };
    Some((hd, mean))
}

/// Break-up time by two passes: locate the first broken frame, then the last
/// closed frame before it (onset 1 if none). Frames are numbered from 1.
pub fn t_but_two_pass(labels: &[FrameClassLabel]) -> Option<usize> {
    let first_broken = labels.iter().position(|&l| l == FrameClassLabel::Broken)? + 1;
    let onset = labels[..first_broken - 1]
        .iter()
        .rposition(|&l| l == FrameClassLabel::Closed)
        .map_or(1, |i| i + 1);
    Some(first_broken - onset)
}

/// Crossing-number point-in-polygon test at the centre of every pixel; the
/// union over polygons.
pub fn pip_oracle(polygons: &[Vec<[f64; 2]>], h: usize, w: usize) -> SegMask {
    SegMask::from_fn(h, w, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        polygons.iter().any(|poly| {
            let mut inside = false;
            let n = poly.len();
            for i in 0..n {
                let [x1, y1] = poly[i];
                let [x2, y2] = poly[(i + n - 1) % n];
                if (y1 > py) != (y2 > py) && px < x1 + (py - y1) * (x2 - x1) / (y2 - y1) {
                    inside = !inside;
                }
            }
            inside
        })
    })
}

/// Crop cell whose extent contains the centre of box cell `i`, in exact
/// integer arithmetic: `floor((2i + 1) * crop / (2 * box))`.
pub fn exact_nearest(i: i64, box_len: i64, crop_len: i64) -> i64 {
    ((2 * i + 1) * crop_len).div_euclid(2 * box_len).clamp(0, crop_len - 1)
}

/// Expected frame-space mask when a crop mask of `crop_h x crop_w` taken from
/// `clamped` is mapped back into an `fh x fw` frame.
pub fn map_back_oracle(crop: &SegMask, clamped: Rect, fh: usize, fw: usize) -> SegMask {
    let (ch, cw) = (crop.height() as i64, crop.width() as i64);
    SegMask::from_fn(fh, fw, |y, x| {
        let (ry, rx) = (y as i64 - clamped.y, x as i64 - clamped.x);
        if ry < 0 || rx < 0 || ry >= clamped.h || rx >= clamped.w {
            return false;
        }
        crop.get(
            exact_nearest(ry, clamped.h, ch) as usize,
            exact_nearest(rx, clamped.w, cw) as usize,
        )
    })
}
