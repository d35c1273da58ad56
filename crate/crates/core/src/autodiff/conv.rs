//! Zero-padded "same" convolution kernels for 2-D and 3-D channel-first data.
//!
//! A 2-D problem is run as a 3-D one with a unit leading spatial axis and a
//! kernel extent of 1 on that axis, so one set of loops serves both.

use crate::error::{Error, Result};

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    /// Input extents (d, h, w).
    pub input: [usize; 3],
    /// Output extents (d, h, w).
    pub output: [usize; 3],
    /// Kernel extents (d, h, w).
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        bias_shape: &[usize],
        stride: &[usize],
    ) -> Result<Self> {
        let nd = input_shape.len().checked_sub(1).unwrap_or(0);
        if !(nd == 2 || nd == 3) {
            return Err(Error::shape(format!(
                "convolution input must be [C, spatial] with 2 or 3 spatial axes, got {input_shape:?}"
            )));
        }
        if kernel_shape.len() != nd + 2 {
            return Err(Error::shape(format!(
                "kernel {kernel_shape:?} does not match {nd}-D input"
            )));
        }
        if kernel_shape[1] != input_shape[0] {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, input has {}",
                kernel_shape[1], input_shape[0]
            )));
        }
        if bias_shape != [kernel_shape[0]] {
            return Err(Error::shape(format!(
                "bias {bias_shape:?} does not match {} output channels",
                kernel_shape[0]
            )));
        }
        if stride.len() != nd {
            return Err(Error::shape(format!(
                "expected {nd} strides, got {}",
                stride.len()
            )));
        }
        let mut input = [1; 3];
        let mut kernel = [1; 3];
        let mut st = [1; 3];
        let off = 3 - nd;
        for a in 0..nd {
            input[off + a] = input_shape[1 + a];
            kernel[off + a] = kernel_shape[2 + a];
            st[off + a] = stride[a];
        }
        let mut output = [1; 3];
        for a in 0..3 {
            if kernel[a] % 2 == 0 {
                return Err(Error::shape("kernel extents must be odd".to_string()));
            }
            if st[a] == 0 || input[a] % st[a] != 0 {
                return Err(Error::shape(format!(
                    "spatial extent {} not divisible by stride {}",
                    input[a], st[a]
                )));
            }
            output[a] = input[a] / st[a];
        }
        Ok(Self {
            c_in: input_shape[0],
            c_out: kernel_shape[0],
            input,
            output,
            kernel,
            stride: st,
        })
    }

    pub fn output_shape(&self, nd: usize) -> Vec<usize> {
        let mut s = vec![self.c_out];
        s.extend_from_slice(&self.output[3 - nd..]);
        s
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Range of output indices `o` along an axis for which the input index
    /// `o * stride + k - pad` lies inside `[0, n_in)`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let pad = self.kernel[axis] / 2;
        let s = self.stride[axis];
        let n_in = self.input[axis] as isize;
        let shift = k as isize - pad as isize;
        // o*s + shift >= 0
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) as usize).div_ceil(s)
        };
        // o*s + shift <= n_in - 1
        let top = n_in - 1 - shift;
        let hi = if top < 0 {
            0
        } else {
            ((top as usize) / s + 1).min(self.output[axis])
        };
        (lo, hi.max(lo))
    }

    /// Visits every (output row, input row, w-range, input w offset) pairing
    /// for one kernel tap.
    #[inline]
    fn for_each_row(&self, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (z0, z1) = self.valid(0, kz);
        let (y0, y1) = self.valid(1, ky);
        let (x0, x1) = self.valid(2, kx);
        if x0 >= x1 {
            return;
        }
        let [_, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let [sd, sh, sw] = self.stride;
        let pz = self.kernel[0] / 2;
        let py = self.kernel[1] / 2;
        let px = self.kernel[2] / 2;
        let ix0 = x0 * sw + kx - px;
        for oz in z0..z1 {
            let iz = oz * sd + kz - pz;
            for oy in y0..y1 {
                let iy = oy * sh + ky - py;
                let out_row = (oz * oh + oy) * ow;
                let in_row = (iz * ih + iy) * iw;
                f(out_row, in_row, x0, x1, ix0);
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let taps = g.taps();
    let sw = g.stride[2];
    let mut out = vec![0.0; g.c_out * out_plane];
    for co in 0..g.c_out {
        let o = &mut out[co * out_plane..(co + 1) * out_plane];
        o.fill(bias[co]);
        for ci in 0..g.c_in {
            let x = &input[ci * in_plane..(ci + 1) * in_plane];
            let wbase = (co * g.c_in + ci) * taps;
            for kz in 0..g.kernel[0] {
                for ky in 0..g.kernel[1] {
                    for kx in 0..g.kernel[2] {
                        let w = kernel[wbase + (kz * g.kernel[1] + ky) * g.kernel[2] + kx];
                        g.for_each_row(kz, ky, kx, |orow, irow, x0, x1, ix0| {
                            let dst = &mut o[orow + x0..orow + x1];
                            if sw == 1 {
                                let src = &x[irow + ix0..irow + ix0 + dst.len()];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += w * s;
                                }
                            } else {
                                for (n, d) in dst.iter_mut().enumerate() {
                                    *d += w * x[irow + ix0 + n * sw];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to (input, kernel, bias).
pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let taps = g.taps();
    let sw = g.stride[2];

    let grad_input = need_input.then(|| {
        let mut gi = vec![0.0; g.c_in * in_plane];
        for ci in 0..g.c_in {
            let dst_plane = &mut gi[ci * in_plane..(ci + 1) * in_plane];
            for co in 0..g.c_out {
                let go = &grad_out[co * out_plane..(co + 1) * out_plane];
                let wbase = (co * g.c_in + ci) * taps;
                for kz in 0..g.kernel[0] {
                    for ky in 0..g.kernel[1] {
                        for kx in 0..g.kernel[2] {
                            let w = kernel[wbase + (kz * g.kernel[1] + ky) * g.kernel[2] + kx];
                            g.for_each_row(kz, ky, kx, |orow, irow, x0, x1, ix0| {
                                let src = &go[orow + x0..orow + x1];
                                if sw == 1 {
                                    let dst = &mut dst_plane[irow + ix0..irow + ix0 + src.len()];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += w * s;
                                    }
                                } else {
                                    for (n, s) in src.iter().enumerate() {
                                        dst_plane[irow + ix0 + n * sw] += w * s;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
        gi
    });

    let (grad_kernel, grad_bias) = if need_params {
        let mut gk = vec![0.0; g.c_out * g.c_in * taps];
        let mut gb = vec![0.0; g.c_out];
        for co in 0..g.c_out {
            let go = &grad_out[co * out_plane..(co + 1) * out_plane];
            gb[co] = go.iter().sum();
            for ci in 0..g.c_in {
                let x = &input[ci * in_plane..(ci + 1) * in_plane];
                let wbase = (co * g.c_in + ci) * taps;
                for kz in 0..g.kernel[0] {
                    for ky in 0..g.kernel[1] {
                        for kx in 0..g.kernel[2] {
                            let mut acc = 0.0;
                            g.for_each_row(kz, ky, kx, |orow, irow, x0, x1, ix0| {
                                let a = &go[orow + x0..orow + x1];
                                if sw == 1 {
                                    let b = &x[irow + ix0..irow + ix0 + a.len()];
                                    acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                                } else {
                                    for (n, p) in a.iter().enumerate() {
                                        acc += p * x[irow + ix0 + n * sw];
                                    }
                                }
                            });
                            gk[wbase + (kz * g.kernel[1] + ky) * g.kernel[2] + kx] = acc;
                        }
                    }
                }
            }
        }
        (Some(gk), Some(gb))
    } else {
        (None, None)
    };

    (grad_input, grad_kernel, grad_bias)
}
