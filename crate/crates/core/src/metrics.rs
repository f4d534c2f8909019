//! Overlap and boundary metrics on binary masks.

use crate::error::{ensure, Result};
use crate::plane::{BinaryMask, SoftMask};

/// Threshold applied to soft outputs before any metric.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ensure!(pred.same_shape(gt), "dsc shape mismatch: {:?} vs {:?}", pred.shape(), gt.shape());
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// DSC of float masks whose values must be exactly 0 or 1.
pub fn dsc_values(pred: &SoftMask, gt: &SoftMask) -> Result<f64> {
    dsc(&BinaryMask::try_from_values(pred)?, &BinaryMask::try_from_values(gt)?)
}

/// DSC after thresholding a soft prediction.
pub fn dsc_soft(pred: &SoftMask, gt: &BinaryMask) -> Result<f64> {
    dsc(&pred.threshold(BINARIZE_THRESHOLD), gt)
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first_finite = f[0].is_finite();
    for q in 1..n {
        if !f[q].is_finite() {
            continue;
        }
        if !first_finite {
            // Envelope so far holds only infinite parabolas; restart at q.
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
            first_finite = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !first_finite {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest foreground pixel.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.shape();
    let n = h.max(w);
    let mut grid: Vec<f64> = mask.as_slice().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; n];
    for j in 0..w {
        for i in 0..h {
            col[i] = grid[i * w + j];
        }
        edt_1d(&col, &mut tmp[..h], &mut v, &mut z);
        for i in 0..h {
            grid[i * w + j] = tmp[i];
        }
    }
    for i in 0..h {
        let row = grid[i * w..(i + 1) * w].to_vec();
        edt_1d(&row, &mut grid[i * w..(i + 1) * w], &mut v, &mut z);
    }
    grid
}

fn directed(from: &BinaryMask, to_dt: &[f64]) -> f64 {
    from.as_slice()
        .iter()
        .zip(to_dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Exact symmetric Hausdorff distance in pixels between foreground sets.
/// `None` when either mask is empty.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    ensure!(a.same_shape(b), "hausdorff shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
    if a.count() == 0 || b.count() == 0 {
        return Ok(None);
    }
    let (da, db) = (squared_distance_transform(a), squared_distance_transform(b));
    Ok(Some(directed(a, &db).max(directed(b, &da))))
}
