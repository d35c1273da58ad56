//! Seeded synthetic head phantoms and off-resonance fields.
//!
//! Geometry lives in normalized coordinates `u ∈ (-1, 1)` per axis so the
//! same seed gives the same anatomy at any grid size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{simulate_distortion, vdm_from_fieldmap, DisplacementMap, FieldMap, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomOptions {
    /// Additive Gaussian noise on the EPI, as a fraction of its dynamic range.
    pub noise_sigma: f64,
    /// Peak relative amplitude of the smooth multiplicative EPI bias.
    pub bias_strength: f64,
    /// Partial-volume blur, voxels.
    pub blur_sigma: f64,
    pub pe_axis: usize,
    pub bw_pe: f64,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            noise_sigma: 0.01,
            bias_strength: 0.1,
            blur_sigma: 0.6,
            pe_axis: 0,
            bw_pe: 13.62,
        }
    }
}

/// One seeded subject: anatomical reference, undistorted EPI and brain mask.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub t1w: Volume,
    pub epi_truth: Volume,
    pub mask: Volume,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Skull,
    Grey,
    White,
    Csf,
}

impl Tissue {
    fn t1w(self) -> f64 {
        match self {
            Tissue::Background => 0.0,
            Tissue::Skull => 0.9,
            Tissue::Grey => 0.5,
            Tissue::White => 0.75,
            Tissue::Csf => 0.15,
        }
    }

    fn epi(self) -> f64 {
        match self {
            Tissue::Background => 0.0,
            Tissue::Skull => 0.15,
            Tissue::Grey => 0.7,
            Tissue::White => 0.5,
            Tissue::Csf => 1.0,
        }
    }
}

struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
    tissue: Tissue,
}

struct Anatomy {
    centre: [f64; 3],
    angle: f64,
    head: [f64; 3],
    gyri: usize,
    gyri_phase: f64,
    gyri_depth: f64,
    blobs: Vec<Blob>,
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let centre = [rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04), 0.0];
        let head = [
            rng.random_range(0.86..0.94),
            rng.random_range(0.76..0.84),
            rng.random_range(1.3..1.5),
        ];
        let mut blobs = Vec::new();
        let n = rng.random_range(4..8);
        for _ in 0..n {
            let r: f64 = rng.random_range(0.15..0.5);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let tissue = match rng.random_range(0..3) {
                0 => Tissue::Csf,
                1 => Tissue::Grey,
                _ => Tissue::White,
            };
            let size = rng.random_range(0.05..0.11);
            blobs.push(Blob {
                centre: [r * phi.cos(), r * phi.sin(), rng.random_range(-0.5..0.5)],
                radii: [size, size * rng.random_range(0.6..1.4), rng.random_range(0.2..0.5)],
                tissue,
            });
        }
        Self {
            centre,
            angle: rng.random_range(-0.15..0.15),
            head,
            gyri: rng.random_range(5..9),
            gyri_phase: rng.random_range(0.0..std::f64::consts::TAU),
            gyri_depth: rng.random_range(0.05..0.09),
            blobs,
        }
    }

    /// Tissue class at normalized position `u` (z ignored in 2-D).
    fn tissue(&self, u: [f64; 3]) -> Tissue {
        let (s, c) = self.angle.sin_cos();
        let dx = u[0] - self.centre[0];
        let dy = u[1] - self.centre[1];
        let x = c * dx + s * dy;
        let y = -s * dx + c * dy;
        let z = u[2];
        let radial = |scale: f64| {
            ((x / (scale * self.head[0])).powi(2)
                + (y / (scale * self.head[1])).powi(2)
                + (z / (scale * self.head[2])).powi(2))
            .sqrt()
        };
        if radial(1.0) > 1.0 {
            return Tissue::Background;
        }
        if radial(0.88) > 1.0 {
            return Tissue::Skull;
        }
        let ventricle = [-0.12, 0.12].iter().any(|&vx| {
            ((x - vx) / 0.07).powi(2) + ((y - 0.02) / 0.2).powi(2) + (z / 0.35).powi(2) <= 1.0
        });
        if ventricle {
            return Tissue::Csf;
        }
        for b in &self.blobs {
            let d = ((x - b.centre[0]) / b.radii[0]).powi(2)
                + ((y - b.centre[1]) / b.radii[1]).powi(2)
                + ((z - b.centre[2]) / b.radii[2]).powi(2);
            if d <= 1.0 {
                return b.tissue;
            }
        }
        let theta = y.atan2(x);
        let wm_edge = 0.68 + self.gyri_depth * (self.gyri as f64 * theta + self.gyri_phase).sin();
        if radial(0.88) <= wm_edge {
            Tissue::White
        } else {
            Tissue::Grey
        }
    }
}

fn check_size(size: &[usize]) -> Result<()> {
    if !(2..=3).contains(&size.len()) || size.iter().any(|&n| n < 4) {
        return Err(Error::param(format!(
            "phantom size must be 2-D or 3-D with extents >= 4, got {size:?}"
        )));
    }
    Ok(())
}

/// Normalized voxel-centre coordinate along an axis of extent `n`.
fn coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

fn coords(size: &[usize]) -> impl Iterator<Item = [f64; 3]> + '_ {
    let total: usize = size.iter().product();
    (0..total).map(move |mut idx| {
        let mut u = [0.0; 3];
        for a in (0..size.len()).rev() {
            u[a] = coord(idx % size[a], size[a]);
            idx /= size[a];
        }
        u
    })
}

fn voxel_size(rank: usize) -> Vec<f64> {
    let mut v = vec![3.75, 3.75];
    if rank == 3 {
        v.push(4.0);
    }
    v
}

/// Seeded head phantom of extent `size` (2-D or 3-D).
///
/// The T1w and EPI images share anatomy but assign different intensities
/// per tissue; the EPI also carries a smooth bias and additive noise. Both
/// are clamped to `[0, 1]`.
pub fn phantom_brain(seed: u64, size: &[usize], opts: &PhantomOptions) -> Result<Phantom> {
    check_size(size)?;
    if !(opts.noise_sigma >= 0.0) || !(opts.blur_sigma >= 0.0) || !(opts.bias_strength >= 0.0) {
        return Err(Error::param("phantom noise, blur and bias must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::sample(&mut rng);
    let labels: Vec<Tissue> = coords(size).map(|u| anatomy.tissue(u)).collect();

    let mut t1w: Vec<f64> = labels.iter().map(|t| t.t1w()).collect();
    let mut epi: Vec<f64> = labels.iter().map(|t| t.epi()).collect();
    let mask: Vec<f64> = labels
        .iter()
        .map(|t| f64::from(!matches!(t, Tissue::Background | Tissue::Skull)))
        .collect();
    gaussian_blur(&mut t1w, size, opts.blur_sigma);
    gaussian_blur(&mut epi, size, opts.blur_sigma);

    let bias: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, opts.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for (v, u) in epi.iter_mut().zip(coords(size)) {
        let b = bias[0] * u[0] + bias[1] * u[1] + bias[2] * u[0] * u[1] + bias[3] * (u[0] * u[0] - u[1] * u[1]);
        *v *= 1.0 + opts.bias_strength * 0.5 * b;
        if opts.noise_sigma > 0.0 {
            *v += noise.sample(&mut rng);
        }
    }
    for v in t1w.iter_mut().chain(epi.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }

    let make = |data: Vec<f64>| -> Result<Volume> {
        let mut v = Volume::new(size.to_vec(), 1, data)?.with_pe(opts.pe_axis, opts.bw_pe)?;
        v.voxel_size = voxel_size(size.len());
        Ok(v)
    };
    Ok(Phantom {
        t1w: make(t1w)?,
        epi_truth: make(epi)?,
        mask: make(mask)?,
    })
}

/// Seeded smooth off-resonance field with `max |ΔB| = max_hz`.
///
/// A low-order polynomial background plus Gaussian hotspots placed near the
/// brain boundary, where air-tissue interfaces sit. The field is smoothed
/// until every voxel's gradient magnitude (forward differences) is below
/// `max_hz / smoothness` Hz per voxel.
pub fn phantom_fieldmap(seed: u64, size: &[usize], max_hz: f64, smoothness: f64) -> Result<FieldMap> {
    check_size(size)?;
    if !(max_hz >= 0.0) || !max_hz.is_finite() {
        return Err(Error::param(format!("max_hz must be finite and >= 0, got {max_hz}")));
    }
    if !(smoothness > 0.0) || !smoothness.is_finite() {
        return Err(Error::param(format!("smoothness must be positive, got {smoothness}")));
    }
    let n: usize = size.iter().product();
    if max_hz == 0.0 {
        return Ok(FieldMap {
            spatial: size.to_vec(),
            data: vec![0.0; n],
            pe_axis: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let poly: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    // hotspot width in normalized units; one voxel spans 2/n
    let min_extent = size[..2].iter().copied().min().unwrap_or(1) as f64;
    let hotspots: Vec<([f64; 3], f64, f64)> = (0..rng.random_range(2..5))
        .map(|_| {
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.55..0.75);
            let z = rng.random_range(-0.6..0.6);
            let width = (2.0 * smoothness / min_extent * rng.random_range(1.0..1.5)).max(0.08);
            let amp = rng.random_range(1.0..2.5) * if rng.random_bool(0.8) { 1.0 } else { -1.0 };
            ([r * phi.cos(), 0.85 * r * phi.sin(), z], width, amp)
        })
        .collect();

    let rank = size.len();
    let mut data: Vec<f64> = coords(size)
        .map(|u| {
            let z = if rank == 3 { u[2] } else { 0.0 };
            let mut v = poly[0] * u[0]
                + poly[1] * u[1]
                + 0.5 * poly[2] * z
                + poly[3] * u[0] * u[0]
                + poly[4] * u[0] * u[1]
                + poly[5] * u[1] * u[1];
            for (c, w, a) in &hotspots {
                let mut d2 = (u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2);
                if rank == 3 {
                    d2 += (z - c[2]).powi(2);
                }
                v += a * (-d2 / (2.0 * w * w)).exp();
            }
            v
        })
        .collect();

    let bound = max_hz / smoothness;
    for _ in 0..200 {
        rescale(&mut data, max_hz);
        if max_gradient(&data, size) < bound {
            return Ok(FieldMap {
                spatial: size.to_vec(),
                data,
                pe_axis: 0,
            });
        }
        gaussian_blur(&mut data, size, 1.0);
    }
    Err(Error::Numeric(format!(
        "could not reach gradient bound {bound} Hz/voxel for smoothness {smoothness} on {size:?}"
    )))
}

fn rescale(data: &mut [f64], max_hz: f64) {
    let peak = data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = max_hz / peak;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Largest per-voxel gradient magnitude, from forward differences.
pub(crate) fn max_gradient(data: &[f64], size: &[usize]) -> f64 {
    let mut worst = 0.0_f64;
    for idx in 0..data.len() {
        let mut g2 = 0.0;
        let mut inner = 1;
        for a in (0..size.len()).rev() {
            let i = (idx / inner) % size[a];
            if i + 1 < size[a] {
                g2 += (data[idx + inner] - data[idx]).powi(2);
            }
            inner *= size[a];
        }
        worst = worst.max(g2.sqrt());
    }
    worst
}

/// In-place separable Gaussian blur with zero-flux (clamped) borders.
pub(crate) fn gaussian_blur(data: &mut [f64], size: &[usize], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    let mut line = Vec::new();
    for axis in 0..size.len() {
        let n = size[axis];
        let inner: usize = size[axis + 1..].iter().product();
        let outer: usize = size[..axis].iter().product();
        for o in 0..outer {
            for q in 0..inner {
                let base = o * n * inner + q;
                line.clear();
                line.extend((0..n).map(|i| data[base + i * inner]));
                for i in 0..n {
                    let mut acc = 0.0;
                    for (w, k) in weights.iter().zip(-radius..=radius) {
                        let j = (i as isize + k).clamp(0, n as isize - 1) as usize;
                        acc += w * line[j];
                    }
                    data[base + i * inner] = acc / norm;
                }
            }
        }
    }
}

/// Options for a synthetic dynamic series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesOptions {
    pub frames: usize,
    /// Relative amplitude of the slow sinusoidal field drift across frames.
    pub drift: f64,
    /// Fresh per-frame noise added after distortion.
    pub noise_sigma: f64,
    pub intensity_modulation: bool,
    pub seed: u64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self {
            frames: 8,
            drift: 0.05,
            noise_sigma: 0.005,
            intensity_modulation: true,
            seed: 0,
        }
    }
}

/// Distorts `truth` repeatedly with a slowly drifting version of `field`,
/// returning the 4-D series and the per-frame ground-truth displacement.
pub fn distorted_series(
    truth: &Volume,
    field: &FieldMap,
    opts: &SeriesOptions,
) -> Result<(Volume, Vec<DisplacementMap>)> {
    if opts.frames == 0 {
        return Err(Error::param("series needs at least one frame"));
    }
    let mut base = vdm_from_fieldmap(field, truth.bw_pe)?;
    base.pe_axis = truth.pe_axis;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = Normal::new(0.0, opts.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut frames = Vec::with_capacity(opts.frames);
    let mut maps = Vec::with_capacity(opts.frames);
    let single = truth.frame_volume(0);
    for t in 0..opts.frames {
        let phase = std::f64::consts::TAU * t as f64 / opts.frames as f64;
        let d = base.scaled(1.0 + opts.drift * phase.sin());
        let mut f = simulate_distortion(&single, &d, opts.intensity_modulation)?;
        if opts.noise_sigma > 0.0 {
            for v in f.data_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        frames.push(f);
        maps.push(d);
    }
    Ok((Volume::stack(&frames)?, maps))
}
