//! Physical layer: off-resonance to voxel shift, pull-warp correction,
//! forward distortion and synthetic phantoms.
//!
//! Displacements are signed voxel counts along the phase-encoding axis.
//! Correction samples the distorted image at `i + d(i)`; simulation samples
//! the undistorted image at `i - d(i)`, so correcting a simulated image with
//! the same map approximately restores it.

mod phantom;

pub use phantom::{distorted_series, phantom_brain, phantom_fieldmap, Phantom, PhantomOptions, SeriesOptions};

use rayon::prelude::*;

use crate::autodiff::{sample_pe, Tensor};
use crate::error::{Error, Result};

/// Dense image with acquisition metadata.
///
/// `data` holds `frames` consecutive row-major blocks of extent `spatial`.
/// Axis 0 is the first image axis of the acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    spatial: Vec<usize>,
    frames: usize,
    data: Vec<f64>,
    pub pe_axis: usize,
    /// Bandwidth per voxel along PE, Hz.
    pub bw_pe: f64,
    /// Voxel size per spatial axis, mm.
    pub voxel_size: Vec<f64>,
    /// Intensity range before normalization, when normalized.
    pub intensity_range: Option<(f64, f64)>,
}

impl Volume {
    pub fn new(spatial: Vec<usize>, frames: usize, data: Vec<f64>) -> Result<Self> {
        if !(1..=3).contains(&spatial.len()) || spatial.contains(&0) || frames == 0 {
            return Err(Error::shape(format!(
                "volume must have 1-3 non-empty spatial axes and at least one frame, got {spatial:?} x {frames}"
            )));
        }
        let n: usize = spatial.iter().product::<usize>() * frames;
        if n != data.len() {
            return Err(Error::shape(format!(
                "{spatial:?} x {frames} frames needs {n} values, got {}",
                data.len()
            )));
        }
        let rank = spatial.len();
        Ok(Self {
            spatial,
            frames,
            data,
            pe_axis: 0,
            bw_pe: 1.0,
            voxel_size: vec![1.0; rank],
            intensity_range: None,
        })
    }

    pub fn zeros(spatial: &[usize], frames: usize) -> Self {
        let n = spatial.iter().product::<usize>() * frames;
        Self::new(spatial.to_vec(), frames, vec![0.0; n]).expect("consistent by construction")
    }

    /// Single-frame volume from a `[1, spatial]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::shape(format!("expected one channel, got {:?}", t.shape())));
        }
        Self::new(t.spatial().to_vec(), 1, t.data().to_vec())
    }

    /// Copies acquisition metadata from `other`.
    pub fn with_geometry_of(mut self, other: &Volume) -> Self {
        self.pe_axis = other.pe_axis;
        self.bw_pe = other.bw_pe;
        self.voxel_size = other.voxel_size.clone();
        self
    }

    pub fn with_pe(mut self, pe_axis: usize, bw_pe: f64) -> Result<Self> {
        if pe_axis >= self.spatial.len() {
            return Err(Error::param(format!(
                "PE axis {pe_axis} invalid for {}-D volume",
                self.spatial.len()
            )));
        }
        if !(bw_pe > 0.0) {
            return Err(Error::param(format!("PE bandwidth must be positive, got {bw_pe}")));
        }
        self.pe_axis = pe_axis;
        self.bw_pe = bw_pe;
        Ok(self)
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Spatial extents followed by the frame count when there is more than one.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = self.spatial.clone();
        if self.frames > 1 {
            s.push(self.frames);
        }
        s
    }

    pub fn frame_len(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frame `t` as a single-frame volume with the same metadata.
    pub fn frame_volume(&self, t: usize) -> Volume {
        Volume {
            spatial: self.spatial.clone(),
            frames: 1,
            data: self.frame(t).to_vec(),
            pe_axis: self.pe_axis,
            bw_pe: self.bw_pe,
            voxel_size: self.voxel_size.clone(),
            intensity_range: self.intensity_range,
        }
    }

    /// Stacks single-frame volumes with identical geometry into a series.
    pub fn stack(frames: &[Volume]) -> Result<Volume> {
        let first = frames.first().ok_or_else(|| Error::param("cannot stack zero frames"))?;
        let mut data = Vec::with_capacity(first.frame_len() * frames.len());
        for f in frames {
            if f.spatial != first.spatial {
                return Err(Error::shape(format!(
                    "frame extents differ: {:?} vs {:?}",
                    f.spatial, first.spatial
                )));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Volume::new(first.spatial.clone(), frames.len(), data)?.with_geometry_of(first))
    }

    /// Frame `t` as a `[1, spatial]` tensor.
    pub fn frame_tensor(&self, t: usize) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.spatial);
        Tensor::new(shape, self.frame(t).to_vec()).expect("frame matches extents")
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// 2-D slice `k` along the last spatial axis of frame `t`.
    pub fn slice(&self, t: usize, k: usize) -> Volume {
        let [nx, ny, nz] = [self.spatial[0], self.spatial[1], self.spatial[2]];
        let f = self.frame(t);
        let data = (0..nx * ny).map(|ij| f[ij * nz + k]).collect();
        let mut v = Volume::new(vec![nx, ny], 1, data).expect("slice extents");
        v.pe_axis = self.pe_axis;
        v.bw_pe = self.bw_pe;
        v.voxel_size = self.voxel_size[..2].to_vec();
        v
    }

    /// Reassembles 2-D slices (in order) into one 3-D frame.
    pub fn from_slices(slices: &[Volume]) -> Result<Volume> {
        let first = slices.first().ok_or_else(|| Error::param("no slices"))?;
        if first.spatial.len() != 2 {
            return Err(Error::shape("slices must be 2-D"));
        }
        let (nx, ny, nz) = (first.spatial[0], first.spatial[1], slices.len());
        let mut data = vec![0.0; nx * ny * nz];
        for (k, s) in slices.iter().enumerate() {
            if s.spatial != first.spatial {
                return Err(Error::shape("slice extents differ"));
            }
            for (ij, v) in s.data.iter().enumerate() {
                data[ij * nz + k] = *v;
            }
        }
        let mut vol = Volume::new(vec![nx, ny, nz], 1, data)?;
        vol.pe_axis = first.pe_axis;
        vol.bw_pe = first.bw_pe;
        let mut vs = first.voxel_size.clone();
        vs.push(1.0);
        vol.voxel_size = vs;
        Ok(vol)
    }
}

/// Off-resonance field in Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMap {
    pub spatial: Vec<usize>,
    pub data: Vec<f64>,
    pub pe_axis: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    VdmGroundTruth,
    GdmEstimated,
}

/// Signed shift along the PE axis, in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementMap {
    pub spatial: Vec<usize>,
    pub data: Vec<f64>,
    pub pe_axis: usize,
    pub kind: MapKind,
}

impl DisplacementMap {
    pub fn new(spatial: Vec<usize>, data: Vec<f64>, pe_axis: usize, kind: MapKind) -> Result<Self> {
        if spatial.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "displacement extents {spatial:?} do not match {} values",
                data.len()
            )));
        }
        if pe_axis >= spatial.len() {
            return Err(Error::param(format!("PE axis {pe_axis} invalid for {spatial:?}")));
        }
        Ok(Self {
            spatial,
            data,
            pe_axis,
            kind,
        })
    }

    pub fn constant(spatial: &[usize], value: f64, pe_axis: usize) -> Self {
        let n = spatial.iter().product();
        Self::new(spatial.to_vec(), vec![value; n], pe_axis, MapKind::VdmGroundTruth).expect("consistent")
    }

    /// `[1, spatial]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.spatial);
        Tensor::new(shape, self.data.clone()).expect("consistent")
    }

    pub fn from_tensor(t: &Tensor, pe_axis: usize, kind: MapKind) -> Result<Self> {
        Self::new(t.spatial().to_vec(), t.data().to_vec(), pe_axis, kind)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn to_volume(&self) -> Volume {
        let mut v = Volume::new(self.spatial.clone(), 1, self.data.clone()).expect("consistent");
        v.pe_axis = self.pe_axis;
        v
    }
}

/// Voxel shift from an off-resonance map: `ΔB / BW_PE`.
pub fn vdm_from_fieldmap(fm: &FieldMap, bw_pe: f64) -> Result<DisplacementMap> {
    if !(bw_pe > 0.0) {
        return Err(Error::param(format!("PE bandwidth must be positive, got {bw_pe}")));
    }
    let data = fm.data.iter().map(|hz| hz / bw_pe).collect();
    DisplacementMap::new(fm.spatial.clone(), data, fm.pe_axis, MapKind::VdmGroundTruth)
}

fn check_pair(vol: &Volume, d: &DisplacementMap) -> Result<()> {
    if vol.spatial() != d.spatial.as_slice() {
        return Err(Error::shape(format!(
            "image extents {:?} differ from displacement extents {:?}",
            vol.spatial(),
            d.spatial
        )));
    }
    if vol.pe_axis != d.pe_axis {
        return Err(Error::shape(format!(
            "image PE axis {} differs from displacement PE axis {}",
            vol.pe_axis, d.pe_axis
        )));
    }
    Ok(())
}

fn warp_frames(vol: &Volume, disp: &Tensor) -> Result<Volume> {
    let frames: Vec<Tensor> = (0..vol.frames())
        .into_par_iter()
        .map(|t| sample_pe(&vol.frame_tensor(t), disp, vol.pe_axis))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(vol.data().len());
    for f in frames {
        data.extend(f.into_data());
    }
    let mut out = Volume::new(vol.spatial().to_vec(), vol.frames(), data)?.with_geometry_of(vol);
    out.intensity_range = vol.intensity_range;
    Ok(out)
}

/// Applies a displacement map to every frame of `epi`: output voxel `i`
/// takes the value at `i + gdm(i)` along the PE axis. Geometry only; no
/// intensity modulation.
pub fn correct(epi: &Volume, gdm: &DisplacementMap) -> Result<Volume> {
    check_pair(epi, gdm)?;
    warp_frames(epi, &gdm.to_tensor())
}

/// Forward model: samples `truth` at `i - d(i)` along PE. With
/// `intensity_modulation`, scales by the local density change
/// `max(1 - ∂d/∂i, 0)` of that pull map so signal piles up where voxels
/// compress and thins where they stretch.
pub fn simulate_distortion(truth: &Volume, d: &DisplacementMap, intensity_modulation: bool) -> Result<Volume> {
    check_pair(truth, d)?;
    let neg = d.scaled(-1.0).to_tensor();
    let mut out = warp_frames(truth, &neg)?;
    if intensity_modulation {
        let jac = pe_derivative(&d.data, &d.spatial, d.pe_axis);
        let n = out.frame_len();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v *= (1.0 - jac[k % n]).max(0.0);
        }
    }
    Ok(out)
}

/// Central difference along `axis`, one-sided at the ends.
pub(crate) fn pe_derivative(data: &[f64], spatial: &[usize], axis: usize) -> Vec<f64> {
    let n = spatial[axis];
    let inner: usize = spatial[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    if n < 2 {
        return out;
    }
    for (idx, o) in out.iter_mut().enumerate() {
        let i = (idx / inner) % n;
        let at = |k: usize| data[idx - i * inner + k * inner];
        *o = if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            0.5 * (at(i + 1) - at(i - 1))
        };
    }
    out
}
