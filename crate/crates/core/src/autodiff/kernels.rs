//! Forward/backward kernels for the non-convolution primitives.

use super::tensor::split_axis;

/// Pull-sample every line along `axis` of `image` at `i + disp(i)`.
///
/// `image` has `channels` copies of the spatial block described by `spatial`;
/// `disp` holds one spatial block shared by all channels. Samples outside the
/// line contribute zero.
pub(crate) fn sample_pe_forward(
    image: &[f64],
    disp: &[f64],
    channels: usize,
    spatial: &[usize],
    axis: usize,
) -> Vec<f64> {
    let block: usize = spatial.iter().product();
    let (outer, n, inner) = split_axis(spatial, axis);
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        let img = &image[c * block..(c + 1) * block];
        let dst = &mut out[c * block..(c + 1) * block];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * n * inner + r;
                let at = |k: isize| -> f64 {
                    if k >= 0 && (k as usize) < n {
                        img[base + k as usize * inner]
                    } else {
                        0.0
                    }
                };
                for i in 0..n {
                    let idx = base + i * inner;
                    let p = i as f64 + disp[idx];
                    let f = p.floor();
                    let t = p - f;
                    let k = f as isize;
                    dst[idx] = (1.0 - t) * at(k) + t * at(k + 1);
                }
            }
        }
    }
    out
}

/// Returns (grad_image, grad_disp) for [`sample_pe_forward`].
pub(crate) fn sample_pe_backward(
    image: &[f64],
    disp: &[f64],
    grad_out: &[f64],
    channels: usize,
    spatial: &[usize],
    axis: usize,
) -> (Vec<f64>, Vec<f64>) {
    let block: usize = spatial.iter().product();
    let (outer, n, inner) = split_axis(spatial, axis);
    let mut g_img = vec![0.0; image.len()];
    let mut g_disp = vec![0.0; disp.len()];
    for c in 0..channels {
        let img = &image[c * block..(c + 1) * block];
        let go = &grad_out[c * block..(c + 1) * block];
        let gi = &mut g_img[c * block..(c + 1) * block];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * n * inner + r;
                let inside = |k: isize| k >= 0 && (k as usize) < n;
                for i in 0..n {
                    let idx = base + i * inner;
                    let p = i as f64 + disp[idx];
                    let f = p.floor();
                    let t = p - f;
                    let k = f as isize;
                    let g = go[idx];
                    let lo = if inside(k) { img[base + k as usize * inner] } else { 0.0 };
                    let hi = if inside(k + 1) { img[base + (k + 1) as usize * inner] } else { 0.0 };
                    if inside(k) {
                        gi[base + k as usize * inner] += (1.0 - t) * g;
                    }
                    if inside(k + 1) {
                        gi[base + (k + 1) as usize * inner] += t * g;
                    }
                    // slope of the cell to the right of floor(p)
                    g_disp[idx] += (hi - lo) * g;
                }
            }
        }
    }
    (g_img, g_disp)
}

/// Zero-padded moving sum with odd `window` extents over the spatial axes
/// of every channel. Self-adjoint, so it also serves as its own backward.
pub(crate) fn box_sum(data: &[f64], channels: usize, spatial: &[usize], window: &[usize]) -> Vec<f64> {
    let block: usize = spatial.iter().product();
    let mut cur = data.to_vec();
    let mut line = Vec::new();
    for (axis, &w) in window.iter().enumerate() {
        if w <= 1 {
            continue;
        }
        let r = w / 2;
        let (outer, n, inner) = split_axis(spatial, axis);
        let mut next = vec![0.0; cur.len()];
        for c in 0..channels {
            let src = &cur[c * block..(c + 1) * block];
            let dst = &mut next[c * block..(c + 1) * block];
            for o in 0..outer {
                for q in 0..inner {
                    let base = o * n * inner + q;
                    line.clear();
                    line.extend((0..n).map(|i| src[base + i * inner]));
                    for i in 0..n {
                        let lo = i.saturating_sub(r);
                        let hi = (i + r + 1).min(n);
                        dst[base + i * inner] = line[lo..hi].iter().sum();
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Nearest-neighbour upsampling of `[C, spatial]` by per-axis `factors`.
pub(crate) fn upsample_forward(data: &[f64], channels: usize, spatial: &[usize], factors: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_spatial: Vec<usize> = spatial.iter().zip(factors).map(|(s, f)| s * f).collect();
    let out_block: usize = out_spatial.iter().product();
    let in_block: usize = spatial.iter().product();
    let mut out = vec![0.0; channels * out_block];
    for c in 0..channels {
        for (j, dst) in out[c * out_block..(c + 1) * out_block].iter_mut().enumerate() {
            *dst = data[c * in_block + source_index(j, &out_spatial, spatial, factors)];
        }
    }
    (out_spatial, out)
}

pub(crate) fn upsample_backward(grad_out: &[f64], channels: usize, spatial: &[usize], factors: &[usize]) -> Vec<f64> {
    let out_spatial: Vec<usize> = spatial.iter().zip(factors).map(|(s, f)| s * f).collect();
    let out_block: usize = out_spatial.iter().product();
    let in_block: usize = spatial.iter().product();
    let mut g = vec![0.0; channels * in_block];
    for c in 0..channels {
        for (j, v) in grad_out[c * out_block..(c + 1) * out_block].iter().enumerate() {
            g[c * in_block + source_index(j, &out_spatial, spatial, factors)] += v;
        }
    }
    g
}

fn source_index(mut flat: usize, out_spatial: &[usize], in_spatial: &[usize], factors: &[usize]) -> usize {
    let mut idx = 0;
    let mut mult = 1;
    for a in (0..out_spatial.len()).rev() {
        let coord = flat % out_spatial[a];
        flat /= out_spatial[a];
        idx += (coord / factors[a]) * mult;
        mult *= in_spatial[a];
    }
    idx
}

/// Forward difference `x[i+1] - x[i]` along tensor axis `axis`.
pub(crate) fn forward_diff(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * (n - 1) * inner);
    for o in 0..outer {
        for i in 0..n - 1 {
            for q in 0..inner {
                let a = data[(o * n + i) * inner + q];
                let b = data[(o * n + i + 1) * inner + q];
                out.push(b - a);
            }
        }
    }
    out
}

pub(crate) fn forward_diff_backward(grad_out: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut g = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for i in 0..n - 1 {
            for q in 0..inner {
                let v = grad_out[(o * (n - 1) + i) * inner + q];
                g[(o * n + i + 1) * inner + q] += v;
                g[(o * n + i) * inner + q] -= v;
            }
        }
    }
    g
}
