use super::SegMask;
use crate::error::Result;

/// Foreground pixels with at least one background 4-neighbour; the image
/// border counts as background. Returned as `(y, x)` in raster order.
pub fn boundary_pixels(mask: &SegMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary length over area; undefined for an empty mask.
pub fn boundary_complexity(mask: &SegMask) -> Option<f64> {
    let area = mask.count();
    (area > 0).then(|| boundary_pixels(mask).len() as f64 / area as f64)
}

const FAR: f64 = 1e20;

/// One-dimensional lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn envelope_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        // z[0] = -inf terminates the scan before k underflows
        let s = loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s > z[k] {
                break s;
            }
            k -= 1;
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
///
/// Pixels are far (`>= 1e20`) when there are no sites at all.
pub fn squared_distance_transform(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        envelope_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Distance from each boundary pixel of `from` to the nearest boundary pixel of `to`.
///
/// `None` when either boundary is empty.
pub fn directed_distances(from: &SegMask, to: &SegMask) -> Result<Option<Vec<f64>>> {
    from.check_same_shape(to)?;
    let a = boundary_pixels(from);
    let b = boundary_pixels(to);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let dt = squared_distance_transform(to.height(), to.width(), &b);
    Ok(Some(a.iter().map(|&(y, x)| dt[y * to.width() + x].sqrt()).collect()))
}

fn pooled(pred: &SegMask, gt: &SegMask) -> Result<Option<Vec<f64>>> {
    let (Some(mut ab), Some(ba)) = (directed_distances(pred, gt)?, directed_distances(gt, pred)?) else {
        return Ok(None);
    };
    ab.extend(ba);
    Ok(Some(ab))
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// 95th percentile of the pooled symmetric boundary distances.
pub fn hd95(pred: &SegMask, gt: &SegMask) -> Result<Option<f64>> {
    Ok(pooled(pred, gt)?.and_then(|d| percentile(&d, 95.0)))
}

/// Mean of the pooled symmetric boundary distances.
pub fn assd(pred: &SegMask, gt: &SegMask) -> Result<Option<f64>> {
    Ok(pooled(pred, gt)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}
