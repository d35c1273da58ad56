//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] as they run. Each call returns a
//! [`Var`] handle into the tape; [`Tape::backward`] replays the records in
//! reverse and returns the gradient of a scalar node with respect to every
//! node that requires one.
//!
//! ```
//! use epicorr::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! Only the primitives the displacement network and its losses need are
//! provided; there is no broadcasting beyond scalar scaling.

mod conv;
mod gradcheck;
mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use conv::ConvGeometry;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    LeakyRelu(Var, f64),
    ForwardDiff(Var, usize),
    Upsample(Var, Vec<usize>),
    Concat(Var, Var),
    SliceChannels(Var, usize),
    Conv(Var, Var, Var, ConvGeometry),
    BoxSum(Var, Vec<usize>),
    SamplePe(Var, Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of every operation evaluated in one forward pass.
///
/// Records are appended in evaluation order, so inputs always precede the
/// nodes that consume them. A tape is single-use: build a new one per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it does not require one.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x >= 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// `x[i+1] - x[i]` along tensor axis `axis`; that axis shrinks by one.
    pub fn forward_diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() || v.shape()[axis] < 2 {
            return Err(Error::shape(format!(
                "forward difference along axis {axis} of {:?}",
                v.shape()
            )));
        }
        let mut shape = v.shape().to_vec();
        let data = kernels::forward_diff(v.data(), &shape, axis);
        shape[axis] -= 1;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ForwardDiff(a, axis), rg))
    }

    /// Nearest-neighbour upsampling of a `[C, spatial]` tensor, one factor
    /// per spatial axis.
    pub fn upsample_nearest(&mut self, a: Var, factors: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if factors.len() != v.rank() - 1 || factors.iter().any(|&f| f == 0) {
            return Err(Error::shape(format!(
                "upsample factors {factors:?} for shape {:?}",
                v.shape()
            )));
        }
        let (out_spatial, data) = kernels::upsample_forward(v.data(), v.channels(), v.spatial(), factors);
        let mut shape = vec![v.channels()];
        shape.extend(out_spatial);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Upsample(a, factors.to_vec()), rg))
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != vb.rank() || va.spatial() != vb.spatial() {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut shape = va.shape().to_vec();
        shape[0] += vb.channels();
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(a, b), rg))
    }

    /// Channels `start..start + len` of `a`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if len == 0 || start + len > v.channels() {
            return Err(Error::shape(format!(
                "channel slice {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let block: usize = v.spatial().iter().product();
        let data = v.data()[start * block..(start + len) * block].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceChannels(a, start), rg))
    }

    /// Zero-padded "same" convolution followed by striding.
    ///
    /// `input` is `[C_in, spatial]` with 2 or 3 spatial axes, `kernel` is
    /// `[C_out, C_in, k...]` with odd extents, `bias` is `[C_out]`; `stride`
    /// has one entry per spatial axis and must divide the extent.
    pub fn conv(&mut self, input: Var, kernel: Var, bias: Var, stride: &[usize]) -> Result<Var> {
        let vi = self.value(input);
        let g = ConvGeometry::new(vi.shape(), self.shape(kernel), self.shape(bias), stride)?;
        let data = conv::forward(&g, vi.data(), self.value(kernel).data(), self.value(bias).data());
        let shape = g.output_shape(vi.rank() - 1);
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Conv(input, kernel, bias, g), rg))
    }

    /// Zero-padded moving-window sum over the spatial axes of `[C, spatial]`.
    pub fn box_sum(&mut self, a: Var, window: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if window.len() != v.rank() - 1 || window.iter().any(|w| w % 2 == 0) {
            return Err(Error::shape(format!(
                "window {window:?} must be odd and match the spatial rank of {:?}",
                v.shape()
            )));
        }
        let data = kernels::box_sum(v.data(), v.channels(), v.spatial(), window);
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::BoxSum(a, window.to_vec()), rg))
    }

    /// Linear pull-sampling of `image` along spatial axis `pe_axis`.
    ///
    /// `image` is `[C, spatial]`, `displacement` is `[1, spatial]` in voxels.
    /// Output voxel `i` takes the image value at `i + displacement(i)` along
    /// `pe_axis`; positions outside the line read as zero.
    pub fn linear_sample_pe(&mut self, image: Var, displacement: Var, pe_axis: usize) -> Result<Var> {
        let value = sample_pe(self.value(image), self.value(displacement), pe_axis)?;
        let rg = self.rg(&[image, displacement]);
        Ok(self.push(value, Op::SamplePe(image, displacement, pe_axis), rg))
    }

    /// Reverse pass from scalar `loss`.
    ///
    /// Gradients accumulate additively when a node feeds several consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        // Only nodes that require a gradient report one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, data: Vec<f64>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(self.shape(v).to_vec(), data)?),
            }
            Ok(())
        };
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec())?;
                acc(*b, gd.to_vec())?;
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec())?;
                acc(*b, gd.iter().map(|x| -x).collect())?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect())?;
                acc(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect())?;
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, gd.iter().zip(vb).map(|(g, y)| g / y).collect())?;
                acc(
                    *b,
                    gd.iter().zip(va).zip(vb).map(|((g, x), y)| -g * x / (y * y)).collect(),
                )?;
            }
            Op::Scale(a, s) => acc(*a, gd.iter().map(|g| g * s).collect())?,
            Op::AddScalar(a) => acc(*a, gd.to_vec())?,
            Op::Square(a) => {
                let va = val(*a).data();
                acc(*a, gd.iter().zip(va).map(|(g, x)| 2.0 * x * g).collect())?;
            }
            Op::Sqrt(a) => {
                acc(*a, gd.iter().zip(out.data()).map(|(g, y)| g / (2.0 * y)).collect())?;
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).numel()])?,
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc(*a, vec![gd[0] / n as f64; n])?;
            }
            Op::LeakyRelu(a, slope) => {
                let va = val(*a).data();
                acc(
                    *a,
                    gd.iter()
                        .zip(va)
                        .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                        .collect(),
                )?;
            }
            Op::ForwardDiff(a, axis) => {
                acc(*a, kernels::forward_diff_backward(gd, val(*a).shape(), *axis))?;
            }
            Op::Upsample(a, factors) => {
                let va = val(*a);
                acc(*a, kernels::upsample_backward(gd, va.channels(), va.spatial(), factors))?;
            }
            Op::Concat(a, b) => {
                let na = val(*a).numel();
                acc(*a, gd[..na].to_vec())?;
                acc(*b, gd[na..].to_vec())?;
            }
            Op::SliceChannels(a, start) => {
                let va = val(*a);
                let block: usize = va.spatial().iter().product();
                let mut full = vec![0.0; va.numel()];
                full[start * block..start * block + gd.len()].copy_from_slice(gd);
                acc(*a, full)?;
            }
            Op::Conv(x, w, b, geom) => {
                let need_input = self.nodes[x.0].requires_grad;
                let need_params = self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad;
                let (gi, gw, gb) = conv::backward(geom, val(*x).data(), val(*w).data(), gd, need_input, need_params);
                if let Some(gi) = gi {
                    acc(*x, gi)?;
                }
                if let Some(gw) = gw {
                    acc(*w, gw)?;
                }
                if let Some(gb) = gb {
                    acc(*b, gb)?;
                }
            }
            Op::BoxSum(a, window) => {
                let va = val(*a);
                acc(*a, kernels::box_sum(gd, va.channels(), va.spatial(), window))?;
            }
            Op::SamplePe(img, disp, axis) => {
                let vi = val(*img);
                let (gi, gdisp) =
                    kernels::sample_pe_backward(vi.data(), val(*disp).data(), gd, vi.channels(), vi.spatial(), *axis);
                acc(*img, gi)?;
                acc(*disp, gdisp)?;
            }
        }
        Ok(())
    }
}

/// Untracked [`Tape::linear_sample_pe`] for inference paths.
pub fn sample_pe(image: &Tensor, displacement: &Tensor, pe_axis: usize) -> Result<Tensor> {
    if image.rank() < 2 || displacement.channels() != 1 || image.spatial() != displacement.spatial() {
        return Err(Error::shape(format!(
            "sampling image {:?} with displacement {:?}",
            image.shape(),
            displacement.shape()
        )));
    }
    if pe_axis >= image.rank() - 1 {
        return Err(Error::shape(format!(
            "PE axis {pe_axis} out of range for {:?}",
            image.shape()
        )));
    }
    let data = kernels::sample_pe_forward(
        image.data(),
        displacement.data(),
        image.channels(),
        image.spatial(),
        pe_axis,
    );
    Tensor::new(image.shape().to_vec(), data)
}
