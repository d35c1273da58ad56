//! Image similarity: normalized mutual information, SSIM and PSNR.

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("image sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Bin index of `v` in `bins` equal-width bins over `[lo, hi]`.
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let k = ((v - lo) / (hi - lo) * bins as f64).floor();
    (k.max(0.0) as usize).min(bins - 1)
}

fn entropy(counts: &[f64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(A;B) / (H(A) + H(B))`, natural log.
///
/// Each image gets `bins` equal-width bins spanning its own min..max over
/// the voxels where `mask > 0.5` (all voxels without a mask). Two constant
/// images give 1; exactly one constant image gives 0.
pub fn nmi(a: &[f64], b: &[f64], bins: usize, mask: Option<&[f64]>) -> Result<f64> {
    same_len(a, b)?;
    if bins < 2 {
        return Err(Error::param(format!("need at least 2 bins, got {bins}")));
    }
    if let Some(m) = mask {
        same_len(a, m)?;
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i] > 0.5);
    let idx: Vec<usize> = (0..a.len()).filter(|&i| keep(i)).collect();
    if idx.is_empty() {
        return Err(Error::param("mask selects no voxels"));
    }
    let range = |x: &[f64]| {
        idx.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(x[i]), hi.max(x[i])))
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);

    let mut joint = vec![0.0; bins * bins];
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for &i in &idx {
        let ka = bin_of(a[i], alo, ahi, bins);
        let kb = bin_of(b[i], blo, bhi, bins);
        joint[ka * bins + kb] += 1.0;
        pa[ka] += 1.0;
        pb[kb] += 1.0;
    }
    let n = idx.len() as f64;
    let ha = entropy(&pa, n);
    let hb = entropy(&pb, n);
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let hab = entropy(&joint, n);
    let mi = ha + hb - hab;
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Local window used by [`ssim`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SsimWindow {
    /// Non-overlapping 8x8 blocks with uniform weights; partial blocks at the
    /// far edges are dropped.
    Block8,
    /// 7x7 Gaussian (sigma 1.5) at every position where it fits.
    #[default]
    Gaussian7,
}

impl SsimWindow {
    fn weights(self) -> (usize, Vec<f64>) {
        match self {
            SsimWindow::Block8 => (8, vec![1.0 / 64.0; 64]),
            SsimWindow::Gaussian7 => {
                let g: Vec<f64> = (-3..=3).map(|k: i32| (-(k * k) as f64 / 4.5).exp()).collect();
                let mut w: Vec<f64> = g.iter().flat_map(|x| g.iter().map(move |y| x * y)).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                (7, w)
            }
        }
    }

    fn stride(self) -> usize {
        match self {
            SsimWindow::Block8 => 8,
            SsimWindow::Gaussian7 => 1,
        }
    }
}

/// Mean structural similarity of two 2-D images of extent `shape`.
///
/// Window statistics are weighted population moments; `C1 = (0.01 L)^2`,
/// `C2 = (0.03 L)^2` with `L = dynamic_range`.
pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 2], window: SsimWindow, dynamic_range: f64) -> Result<f64> {
    same_len(a, b)?;
    let [nx, ny] = shape;
    if nx * ny != a.len() {
        return Err(Error::shape(format!("{shape:?} does not match {} values", a.len())));
    }
    if !(dynamic_range > 0.0) {
        return Err(Error::param(format!("dynamic range must be positive, got {dynamic_range}")));
    }
    let (w, weights) = window.weights();
    if nx < w || ny < w {
        return Err(Error::param(format!("{w}x{w} window larger than image {nx}x{ny}")));
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let step = window.stride();
    let (mut total, mut count) = (0.0, 0usize);
    for i0 in (0..=nx - w).step_by(step) {
        for j0 in (0..=ny - w).step_by(step) {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..w {
                for dj in 0..w {
                    let k = (i0 + di) * ny + j0 + dj;
                    let wt = weights[di * w + dj];
                    let (x, y) = (a[k], b[k]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &[f64], b: &[f64], dynamic_range: f64) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::param("empty images"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (dynamic_range * dynamic_range / mse).log10()).min(PSNR_CAP_DB))
}
