//! Resampling to model extents and intensity normalization.

use crate::distortion::{DisplacementMap, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub in_plane: [usize; 2],
    pub slices: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            in_plane: [64, 64],
            slices: 32,
        }
    }
}

/// Source coordinate of output voxel centre `i` when `n_in` voxels map onto
/// `n_out`, clamped to the input grid.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    let x = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    x.clamp(0.0, (n_in - 1) as f64)
}

/// Bilinear in-plane resampling of every slice and frame.
pub fn resample_in_plane(v: &Volume, target: [usize; 2]) -> Result<Volume> {
    let sp = v.spatial();
    if sp.len() < 2 {
        return Err(Error::shape("in-plane resampling needs at least 2 axes"));
    }
    if sp[0] == target[0] && sp[1] == target[1] {
        return Ok(v.clone());
    }
    let (nx, ny) = (sp[0], sp[1]);
    let nz: usize = sp[2..].iter().product();
    let [ox, oy] = target;
    let mut spatial = sp.to_vec();
    spatial[0] = ox;
    spatial[1] = oy;
    let mut data = Vec::with_capacity(ox * oy * nz * v.frames());
    for t in 0..v.frames() {
        let f = v.frame(t);
        let at = |i: usize, j: usize, k: usize| f[(i * ny + j) * nz + k];
        for i in 0..ox {
            let x = source_coord(i, nx, ox);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(nx - 1);
            for j in 0..oy {
                let y = source_coord(j, ny, oy);
                let (y0, fy) = (y.floor() as usize, y - y.floor());
                let y1 = (y0 + 1).min(ny - 1);
                for k in 0..nz {
                    let top = at(x0, y0, k) * (1.0 - fy) + at(x0, y1, k) * fy;
                    let bottom = at(x1, y0, k) * (1.0 - fy) + at(x1, y1, k) * fy;
                    data.push(top * (1.0 - fx) + bottom * fx);
                }
            }
        }
    }
    let mut out = Volume::new(spatial, v.frames(), data)?.with_geometry_of(v);
    out.voxel_size[0] *= nx as f64 / ox as f64;
    out.voxel_size[1] *= ny as f64 / oy as f64;
    out.intensity_range = v.intensity_range;
    Ok(out)
}

/// Nearest-slice selection along the third axis.
pub fn resample_slices(v: &Volume, target: usize) -> Result<Volume> {
    let sp = v.spatial();
    if sp.len() != 3 {
        return Err(Error::shape("slice resampling needs 3-D frames"));
    }
    let nz = sp[2];
    if nz == target {
        return Ok(v.clone());
    }
    let pick: Vec<usize> = (0..target)
        .map(|k| (((k as f64 + 0.5) * nz as f64 / target as f64).floor() as usize).min(nz - 1))
        .collect();
    let mut data = Vec::with_capacity(sp[0] * sp[1] * target * v.frames());
    for t in 0..v.frames() {
        let f = v.frame(t);
        for ij in 0..sp[0] * sp[1] {
            data.extend(pick.iter().map(|&k| f[ij * nz + k]));
        }
    }
    let mut out = Volume::new(vec![sp[0], sp[1], target], v.frames(), data)?.with_geometry_of(v);
    out.voxel_size[2] *= nz as f64 / target as f64;
    out.intensity_range = v.intensity_range;
    Ok(out)
}

/// Min-max normalization to `[0, 1]` over all frames.
///
/// The recorded range maps the output back to the original intensities and
/// composes with any range already present, so normalizing twice changes
/// nothing. A constant volume maps to zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let mut out = v.clone();
    if !(hi > lo) {
        log::warn!("volume has zero dynamic range; normalizing to 0");
        out.data_mut().iter_mut().for_each(|x| *x = 0.0);
    } else {
        let s = 1.0 / (hi - lo);
        out.data_mut().iter_mut().for_each(|x| *x = (*x - lo) * s);
    }
    let (a, b) = v.intensity_range.unwrap_or((0.0, 1.0));
    out.intensity_range = Some(match v.intensity_range {
        Some(_) => (a + lo * (b - a), a + hi * (b - a)),
        None => (lo, hi),
    });
    out
}

/// Maps normalized intensities back to the recorded range.
pub fn denormalize(v: &Volume) -> Volume {
    let mut out = v.clone();
    if let Some((lo, hi)) = v.intensity_range {
        out.data_mut().iter_mut().for_each(|x| *x = lo + *x * (hi - lo));
        out.intensity_range = None;
    }
    out
}

/// Resampled to model extents and normalized.
fn fit(v: &Volume, opts: &PreprocessOptions) -> Result<Volume> {
    let sp = v.spatial();
    if sp.len() != 3 || sp[2] < 2 {
        return Err(Error::param(format!(
            "preprocessing needs at least 2 slices, got extents {sp:?}"
        )));
    }
    if sp[..2] == opts.in_plane && sp[2] == opts.slices {
        return Ok(normalize(v));
    }
    Ok(normalize(&resample_slices(&resample_in_plane(v, opts.in_plane)?, opts.slices)?))
}

/// Resamples an EPI series and its T1w reference to model extents and
/// normalizes each to `[0, 1]` independently.
pub fn preprocess(epi: &Volume, t1w: &Volume) -> Result<(Volume, Volume)> {
    preprocess_with(epi, t1w, &PreprocessOptions::default())
}

pub fn preprocess_with(epi: &Volume, t1w: &Volume, opts: &PreprocessOptions) -> Result<(Volume, Volume)> {
    if epi.spatial() != t1w.spatial() {
        return Err(Error::shape(format!(
            "T1w extents {:?} differ from EPI {:?}; co-register first",
            t1w.spatial(),
            epi.spatial()
        )));
    }
    Ok((fit(epi, opts)?, fit(t1w, opts)?))
}

/// Brings a displacement map to model extents. Values along the PE axis are
/// rescaled with the voxel count so they stay in output voxels.
pub fn preprocess_displacement(d: &DisplacementMap, opts: &PreprocessOptions) -> Result<DisplacementMap> {
    let v = d.to_volume();
    let sp = v.spatial();
    if sp.len() != 3 || sp[2] < 2 {
        return Err(Error::param(format!("preprocessing needs at least 2 slices, got extents {sp:?}")));
    }
    let out = resample_slices(&resample_in_plane(&v, opts.in_plane)?, opts.slices)?;
    let target = out.spatial().to_vec();
    let factor = target[d.pe_axis] as f64 / d.spatial[d.pe_axis] as f64;
    let data = out.into_data().into_iter().map(|x| x * factor).collect();
    DisplacementMap::new(target, data, d.pe_axis, d.kind)
}
