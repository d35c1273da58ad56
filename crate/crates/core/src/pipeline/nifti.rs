//! Single-file NIfTI-1 (`.nii`) subset: little-endian, int16 / float32 /
//! float64 payloads, 2-D to 4-D.
//!
//! NIfTI stores x fastest; volumes here are row-major with the last axis
//! fastest, so payloads are transposed on the way in and out. The fourth
//! dimension becomes the frame count.

use std::path::Path;

use super::fsio;
use crate::distortion::Volume;
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_MAGIC: usize = 344;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            64 => Some(Datatype::Float64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// The header fields this subset reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    /// Extents in file order (x, y, z, t), `dim[1..=dim[0]]`.
    pub dims: Vec<usize>,
    pub datatype: Datatype,
    pub pixdim: Vec<f64>,
    pub vox_offset: usize,
    pub scl_slope: f64,
    pub scl_inter: f64,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses and validates the fixed 348-byte header.
pub fn parse_header(b: &[u8]) -> Result<NiftiHeader> {
    if b.len() < HEADER_SIZE {
        return Err(parse_err(b.len(), format!("header truncated: {} of {HEADER_SIZE} bytes", b.len())));
    }
    let rank = i16_at(b, OFF_DIM);
    if !(1..=7).contains(&rank) {
        let swapped = i16::from_be_bytes([b[OFF_DIM], b[OFF_DIM + 1]]);
        if (1..=7).contains(&swapped) {
            return Err(Error::Unsupported("big-endian NIfTI files".into()));
        }
        return Err(parse_err(OFF_DIM, format!("dim[0] = {rank} is not a valid rank")));
    }
    match &b[OFF_MAGIC..OFF_MAGIC + 4] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Unsupported(
                "two-file NIfTI (magic \"ni1\"); only single-file \"n+1\" is supported".into(),
            ))
        }
        other => return Err(parse_err(OFF_MAGIC, format!("bad magic {other:?}, expected \"n+1\\0\""))),
    }
    let sizeof_hdr = i32::from_le_bytes(b[0..4].try_into().expect("4 bytes"));
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(parse_err(0, format!("sizeof_hdr = {sizeof_hdr}, expected {HEADER_SIZE}")));
    }
    if !(2..=4).contains(&rank) {
        return Err(parse_err(OFF_DIM, format!("{rank}-D images are not supported (2 to 4)")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for a in 1..=rank as usize {
        let d = i16_at(b, OFF_DIM + 2 * a);
        if d < 1 {
            return Err(parse_err(OFF_DIM + 2 * a, format!("dim[{a}] = {d} must be positive")));
        }
        dims.push(d as usize);
    }
    let code = i16_at(b, OFF_DATATYPE);
    let datatype = Datatype::from_code(code).ok_or_else(|| {
        parse_err(
            OFF_DATATYPE,
            format!("unsupported datatype {code} (supported: 4 int16, 16 float32, 64 float64)"),
        )
    })?;
    let bitpix = i16_at(b, OFF_BITPIX);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(parse_err(OFF_BITPIX, format!("bitpix {bitpix} does not match datatype {code}")));
    }
    let pixdim = (1..=rank as usize)
        .map(|a| f32_at(b, OFF_PIXDIM + 4 * a) as f64)
        .collect();
    let vox = f32_at(b, OFF_VOX_OFFSET);
    if !(vox >= HEADER_SIZE as f32) || vox.fract() != 0.0 {
        return Err(parse_err(OFF_VOX_OFFSET, format!("vox_offset {vox} invalid")));
    }
    Ok(NiftiHeader {
        dims,
        datatype,
        pixdim,
        vox_offset: vox as usize,
        scl_slope: f32_at(b, OFF_SCL_SLOPE) as f64,
        scl_inter: f32_at(b, OFF_SCL_INTER) as f64,
    })
}

/// Decodes a whole `.nii` byte image. Scaling applies when `scl_slope != 0`.
pub fn decode(b: &[u8]) -> Result<(NiftiHeader, Volume)> {
    let h = parse_header(b)?;
    let n: usize = h.dims.iter().product();
    let width = h.datatype.bytes();
    let end = h.vox_offset + n * width;
    if b.len() < end {
        return Err(parse_err(
            b.len(),
            format!("payload truncated: need {end} bytes for {:?}, file has {}", h.dims, b.len()),
        ));
    }
    let raw = &b[h.vox_offset..end];
    let mut vals: Vec<f64> = match h.datatype {
        Datatype::Int16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        Datatype::Float32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Datatype::Float64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if h.scl_slope != 0.0 && h.scl_slope.is_finite() && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        vals.iter_mut().for_each(|v| *v = *v * h.scl_slope + h.scl_inter);
    }
    let (spatial, frames) = if h.dims.len() == 4 {
        (h.dims[..3].to_vec(), h.dims[3])
    } else {
        (h.dims.clone(), 1)
    };
    let data = to_row_major(&vals, &spatial, frames);
    let mut vol = Volume::new(spatial.clone(), frames, data)?;
    vol.voxel_size = h.pixdim[..spatial.len()]
        .iter()
        .map(|&p| if p > 0.0 { p } else { 1.0 })
        .collect();
    Ok((h, vol))
}

/// x-fastest file order to row-major, frame by frame.
fn to_row_major(vals: &[f64], spatial: &[usize], frames: usize) -> Vec<f64> {
    let n: usize = spatial.iter().product();
    let mut out = vec![0.0; vals.len()];
    for t in 0..frames {
        for (file_idx, &v) in vals[t * n..(t + 1) * n].iter().enumerate() {
            out[t * n + row_major_index(file_idx, spatial)] = v;
        }
    }
    out
}

fn row_major_index(mut file_idx: usize, spatial: &[usize]) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    let mut coords = [0usize; 3];
    for (a, &e) in spatial.iter().enumerate() {
        coords[a] = file_idx % e;
        file_idx /= e;
    }
    for a in (0..spatial.len()).rev() {
        idx += coords[a] * stride;
        stride *= spatial[a];
    }
    idx
}

/// Encodes `vol` as a single-file NIfTI-1 image.
pub fn encode(vol: &Volume, datatype: Datatype) -> Result<Vec<u8>> {
    let spatial = vol.spatial();
    let mut dims = spatial.to_vec();
    if vol.frames() > 1 {
        if spatial.len() != 3 {
            return Err(Error::shape("multi-frame NIfTI output needs 3-D frames"));
        }
        dims.push(vol.frames());
    }
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::shape(format!("extents {dims:?} exceed the NIfTI-1 limit")));
    }
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    put_i16(&mut h, OFF_DIM, dims.len() as i16);
    for a in 1..8 {
        put_i16(&mut h, OFF_DIM + 2 * a, dims.get(a - 1).map_or(1, |&d| d as i16));
    }
    put_i16(&mut h, OFF_DATATYPE, datatype.code());
    put_i16(&mut h, OFF_BITPIX, 8 * datatype.bytes() as i16);
    put_f32(&mut h, OFF_PIXDIM, 1.0);
    for a in 1..8 {
        let p = match a {
            a if a <= spatial.len() => vol.voxel_size.get(a - 1).copied().unwrap_or(1.0),
            4 if dims.len() == 4 => 1.0,
            _ => 0.0,
        };
        put_f32(&mut h, OFF_PIXDIM + 4 * a, p as f32);
    }
    put_f32(&mut h, OFF_VOX_OFFSET, DATA_OFFSET as f32);
    put_f32(&mut h, OFF_SCL_SLOPE, 1.0);
    put_f32(&mut h, OFF_SCL_INTER, 0.0);
    // millimetres and seconds
    h[OFF_XYZT_UNITS] = 2 | 8;
    let descrip = b"epicorr";
    h[OFF_DESCRIP..OFF_DESCRIP + descrip.len()].copy_from_slice(descrip);
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");

    let n = vol.frame_len();
    let mut file_order = vec![0.0; vol.data().len()];
    for t in 0..vol.frames() {
        for (file_idx, slot) in file_order[t * n..(t + 1) * n].iter_mut().enumerate() {
            *slot = vol.data()[t * n + row_major_index(file_idx, spatial)];
        }
    }
    let mut out = h;
    out.reserve(file_order.len() * datatype.bytes());
    for v in file_order {
        match datatype {
            Datatype::Int16 => {
                let r = v.round();
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
                    return Err(Error::param(format!("value {v} does not fit int16")));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            Datatype::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Datatype::Float64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn nifti_read(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map(|(_, v)| v).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Unsupported(m) => Error::Unsupported(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `vol` atomically as float32.
pub fn nifti_write(vol: &Volume, path: &Path) -> Result<()> {
    nifti_write_as(vol, path, Datatype::Float32)
}

pub fn nifti_write_as(vol: &Volume, path: &Path, datatype: Datatype) -> Result<()> {
    fsio::write_atomic(path, &encode(vol, datatype)?)
}
