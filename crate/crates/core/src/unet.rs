//! Encoder-decoder network mapping (T1w, distorted EPI) to a displacement map.
//!
//! The two single-channel inputs are stacked as channels. Each encoder level
//! is a stride-2 convolution with LeakyReLU. The decoder alternates a
//! convolution, nearest-neighbour upsampling and concatenation with the
//! encoder activation of matching resolution, then runs any remaining
//! full-resolution convolutions. A final single-filter linear convolution
//! emits the displacement (in voxels along the PE axis).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::Mode;
use crate::pipeline::fsio;

pub const KERNEL_SIZE: usize = 3;
const FINAL_INIT_STD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Spatial rank: 2 (slice-wise) or 3 (volume-wise).
    pub dims: usize,
    /// One entry per downsampling level.
    pub encoder_filters: Vec<usize>,
    /// The first `encoder_filters.len()` entries run before each upsampling;
    /// any extra entries are full-resolution convolutions.
    pub decoder_filters: Vec<usize>,
    pub leaky_slope: f64,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            encoder_filters: vec![16, 32, 32, 32],
            decoder_filters: vec![32, 32, 32, 16, 16],
            leaky_slope: 0.2,
            kernel_size: KERNEL_SIZE,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn with_dims(dims: usize) -> Self {
        Self {
            dims,
            ..Self::default()
        }
    }

    /// Small network for tests and quick runs.
    pub fn reduced(dims: usize, encoder: &[usize], decoder: &[usize]) -> Self {
        Self {
            dims,
            encoder_filters: encoder.to_vec(),
            decoder_filters: decoder.to_vec(),
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dims == 2 || self.dims == 3) {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.kernel_size != KERNEL_SIZE {
            return Err(Error::Config(format!(
                "kernel size must be {KERNEL_SIZE}, got {}",
                self.kernel_size
            )));
        }
        if self.encoder_filters.is_empty() {
            return Err(Error::Config("at least one encoder level is required".into()));
        }
        if self.decoder_filters.len() < self.encoder_filters.len() {
            return Err(Error::Config(format!(
                "{} decoder filters cannot serve {} encoder levels",
                self.decoder_filters.len(),
                self.encoder_filters.len()
            )));
        }
        if self.encoder_filters.iter().chain(&self.decoder_filters).any(|&f| f == 0) {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "LeakyReLU slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let k = vec![self.kernel_size; self.dims];
        let kshape = |out: usize, inp: usize| {
            let mut s = vec![out, inp];
            s.extend_from_slice(&k);
            s
        };
        let mut specs = Vec::new();
        let mut enc_channels = vec![2];
        let mut c = 2;
        for (l, &f) in self.encoder_filters.iter().enumerate() {
            specs.push((format!("enc{l}.weight"), kshape(f, c)));
            specs.push((format!("enc{l}.bias"), vec![f]));
            c = f;
            enc_channels.push(f);
        }
        let depth = self.depth();
        for (l, &f) in self.decoder_filters.iter().enumerate() {
            specs.push((format!("dec{l}.weight"), kshape(f, c)));
            specs.push((format!("dec{l}.bias"), vec![f]));
            c = if l < depth { f + enc_channels[depth - l - 1] } else { f };
        }
        specs.push(("out.weight".into(), kshape(1, c)));
        specs.push(("out.bias".into(), vec![1]));
        specs
    }

    /// Per-level downsampling factors for an input of the given extents.
    ///
    /// An axis is halved while its extent is even. The two in-plane axes
    /// must be divisible by `2^depth`; a third (slice) axis stops halving
    /// once it becomes odd.
    pub fn level_strides(&self, spatial: &[usize]) -> Result<Vec<Vec<usize>>> {
        if spatial.len() != self.dims {
            return Err(Error::Config(format!(
                "{}-D network given {}-D input",
                self.dims,
                spatial.len()
            )));
        }
        let div = 1usize << self.depth();
        for &e in &spatial[..2] {
            if e % div != 0 {
                return Err(Error::shape(format!(
                    "in-plane extent {e} not divisible by 2^{}",
                    self.depth()
                )));
            }
        }
        let mut ext = spatial.to_vec();
        let mut out = Vec::with_capacity(self.depth());
        for _ in 0..self.depth() {
            let s: Vec<usize> = ext.iter().map(|&e| if e % 2 == 0 { 2 } else { 1 }).collect();
            for (e, s) in ext.iter_mut().zip(&s) {
                *e /= s;
            }
            out.push(s);
        }
        Ok(out)
    }
}

/// One named parameter tensor stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f64).collect())
            .expect("parameter shape matches its data")
    }
}

/// Provenance recorded with saved weights.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainingInfo {
    pub mode: Option<Mode>,
    pub lambda: Option<f64>,
}

/// Parameter set of the displacement network.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetWeights {
    pub config: UNetConfig,
    pub params: Vec<ParamTensor>,
    pub info: TrainingInfo,
}

/// Hidden kernels: He-uniform for LeakyReLU; final layer: N(0, 1e-5), so the
/// initial displacement is essentially zero. Biases start at zero.
pub fn unet_init(config: &UNetConfig) -> Result<UNetWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let specs = config.param_specs();
    let last = specs.len() - 2;
    let mut params = Vec::with_capacity(specs.len());
    for (idx, (name, shape)) in specs.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".bias") {
            vec![0.0; n]
        } else if idx == last {
            let normal = Normal::new(0.0, FINAL_INIT_STD).expect("finite std");
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let a = config.leaky_slope;
            let bound = (6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| u.sample(&mut rng) as f32).collect()
        };
        params.push(ParamTensor { name, shape, data });
    }
    Ok(UNetWeights {
        config: config.clone(),
        params,
        info: TrainingInfo::default(),
    })
}

impl UNetWeights {
    /// Builds weights from 64-bit tensors, rounding to 32-bit storage.
    pub fn from_tensors(config: &UNetConfig, tensors: &[Tensor], info: TrainingInfo) -> Result<Self> {
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), t) in specs.into_iter().zip(tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Incompatible {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            let data = t.data().iter().map(|&v| v as f32).collect();
            params.push(ParamTensor { name, shape, data });
        }
        Ok(Self {
            config: config.clone(),
            params,
            info,
        })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(ParamTensor::to_tensor).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Registers every parameter on `tape` and returns their handles.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = p.to_tensor();
                if trainable { tape.param(t) } else { tape.constant(t) }
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.iter_mut().find(|p| p.name == name)
    }
}

/// Records the network on `tape`. `t1w` and `epi` are `[1, spatial]`.
pub fn forward_on_tape(config: &UNetConfig, tape: &mut Tape, params: &[Var], t1w: Var, epi: Var) -> Result<Var> {
    build(config, tape, params, t1w, epi, false)
}

fn build(config: &UNetConfig, tape: &mut Tape, params: &[Var], t1w: Var, epi: Var, zero_skips: bool) -> Result<Var> {
    config.validate()?;
    let (st, se) = (tape.shape(t1w).to_vec(), tape.shape(epi).to_vec());
    if st != se {
        return Err(Error::shape(format!("T1w {st:?} and EPI {se:?} extents differ")));
    }
    if st[0] != 1 {
        return Err(Error::shape(format!("inputs must be single-channel, got {st:?}")));
    }
    let strides = config.level_strides(&st[1..])?;
    if params.len() != config.param_specs().len() {
        return Err(Error::Contract(format!(
            "network needs {} parameters, got {}",
            config.param_specs().len(),
            params.len()
        )));
    }
    let slope = config.leaky_slope;
    let unit = vec![1; config.dims];
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("parameter count checked above");

    let mut x = tape.concat_channels(t1w, epi)?;
    let mut skips = vec![x];
    for s in &strides {
        let (w, b) = (next(), next());
        let y = tape.conv(x, w, b, s)?;
        x = tape.leaky_relu(y, slope);
        skips.push(x);
    }
    let depth = config.depth();
    for l in 0..config.decoder_filters.len() {
        let (w, b) = (next(), next());
        let y = tape.conv(x, w, b, &unit)?;
        x = tape.leaky_relu(y, slope);
        if l < depth {
            let level = depth - l - 1;
            x = tape.upsample_nearest(x, &strides[level])?;
            let mut skip = skips[level];
            if zero_skips {
                skip = tape.scale(skip, 0.0);
            }
            x = tape.concat_channels(x, skip)?;
        }
    }
    let (w, b) = (next(), next());
    tape.conv(x, w, b, &unit)
}

/// Displacement map `[1, spatial]` for one (T1w, EPI) pair.
pub fn unet_forward(weights: &UNetWeights, t1w: &Tensor, epi: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = weights.register(&mut tape, false);
    let a = tape.constant(t1w.clone());
    let b = tape.constant(epi.clone());
    let out = forward_on_tape(&weights.config, &mut tape, &params, a, b)?;
    Ok(tape.value(out).clone())
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest")
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad integer list `{s}`")))
        })
        .collect()
}

/// Writes the 32-bit little-endian blob to `path` and a text manifest to
/// `path` with extension `.manifest`.
pub fn weights_save(weights: &UNetWeights, path: &Path) -> Result<()> {
    let c = &weights.config;
    let mut m = String::new();
    let _ = writeln!(m, "# displacement network weights");
    let _ = writeln!(m, "dims = {}", c.dims);
    let _ = writeln!(m, "encoder_filters = {}", join(&c.encoder_filters));
    let _ = writeln!(m, "decoder_filters = {}", join(&c.decoder_filters));
    let _ = writeln!(m, "leaky_slope = {}", c.leaky_slope);
    let _ = writeln!(m, "kernel_size = {}", c.kernel_size);
    let _ = writeln!(m, "seed = {}", c.seed);
    let mode = weights.info.mode.map(|m| m.to_string()).unwrap_or_else(|| "none".into());
    let _ = writeln!(m, "mode = {mode}");
    let lambda = weights.info.lambda.map(|l| l.to_string()).unwrap_or_else(|| "none".into());
    let _ = writeln!(m, "lambda = {lambda}");
    let blob_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let _ = writeln!(m, "blob = {blob_name}");

    let mut blob = Vec::with_capacity(weights.num_parameters() * 4);
    for p in &weights.params {
        let _ = writeln!(m, "tensor {} {} {}", p.name, join(&p.shape), blob.len());
        for v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fsio::write_atomic(path, &blob)?;
    fsio::write_atomic(&manifest_path(path), m.as_bytes())
}

/// Parsed manifest contents.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub config: UNetConfig,
    pub info: TrainingInfo,
    pub tensors: Vec<(String, Vec<usize>, usize)>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut config = UNetConfig::default();
    let mut info = TrainingInfo::default();
    let mut tensors = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("bad tensor line `{line}`")));
            }
            let offset = parts[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad offset in `{line}`")))?;
            tensors.push((parts[0].to_string(), parse_list(parts[1])?, offset));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad manifest line `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| -> Result<f64> { v.parse().map_err(|_| Error::Config(format!("bad number for {k}: `{v}`"))) };
        match k {
            "dims" => config.dims = num(v)? as usize,
            "encoder_filters" => config.encoder_filters = parse_list(v)?,
            "decoder_filters" => config.decoder_filters = parse_list(v)?,
            "leaky_slope" => config.leaky_slope = num(v)?,
            "kernel_size" => config.kernel_size = num(v)? as usize,
            "seed" => config.seed = v.parse().map_err(|_| Error::Config(format!("bad seed `{v}`")))?,
            "mode" => info.mode = if v == "none" { None } else { Some(v.parse()?) },
            "lambda" => info.lambda = if v == "none" { None } else { Some(num(v)?) },
            _ => {}
        }
    }
    Ok(Manifest { config, info, tensors })
}

/// Loads weights saved by [`weights_save`], validating every tensor shape
/// against `config`. Nothing is returned unless the whole file checks out.
pub fn weights_load(path: &Path, config: &UNetConfig) -> Result<UNetWeights> {
    config.validate()?;
    let manifest = read_manifest(path)?;
    if manifest.config.dims != config.dims {
        return Err(Error::Config(format!(
            "weights are {}-D but a {}-D network was requested",
            manifest.config.dims, config.dims
        )));
    }
    let specs = config.param_specs();
    if manifest.tensors.len() != specs.len() {
        let at = manifest.tensors.len().min(specs.len());
        let name = specs.get(at).map(|s| s.0.clone()).unwrap_or_else(|| manifest.tensors[at].0.clone());
        return Err(Error::Incompatible {
            name,
            expected: specs.get(at).map(|s| s.1.clone()).unwrap_or_default(),
            found: manifest.tensors.get(at).map(|t| t.1.clone()).unwrap_or_default(),
        });
    }
    for ((name, shape), (mname, mshape, _)) in specs.iter().zip(&manifest.tensors) {
        if name != mname || shape != mshape {
            return Err(Error::Incompatible {
                name: name.clone(),
                expected: shape.clone(),
                found: mshape.clone(),
            });
        }
    }
    let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut params = Vec::with_capacity(specs.len());
    for ((name, shape), (_, _, offset)) in specs.into_iter().zip(&manifest.tensors) {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > blob.len() {
            return Err(Error::Parse {
                offset: blob.len(),
                message: format!("weights blob truncated inside `{name}`"),
            });
        }
        let data = blob[*offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(ParamTensor { name, shape, data });
    }
    Ok(UNetWeights {
        config: config.clone(),
        params,
        info: manifest.info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> UNetConfig {
        UNetConfig::reduced(2, &[4, 4], &[4, 4, 4])
    }

    fn rand_input(seed: u64, spatial: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![1];
        shape.extend_from_slice(spatial);
        Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic() {
        let a = unet_init(&small()).unwrap();
        let b = unet_init(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 1;
        assert_ne!(a, unet_init(&other).unwrap());
    }

    #[test]
    fn final_layer_is_single_filter() {
        let cfg = UNetConfig::default();
        let specs = cfg.param_specs();
        let (name, shape) = &specs[specs.len() - 2];
        assert_eq!(name, "out.weight");
        assert_eq!(shape[0], 1);
        assert_eq!(shape[1], 16);
    }

    #[test]
    fn initial_displacement_is_near_zero() {
        let w = unet_init(&UNetConfig::default()).unwrap();
        let gdm = unet_forward(&w, &rand_input(1, &[64, 64]), &rand_input(2, &[64, 64])).unwrap();
        assert_eq!(gdm.shape(), &[1, 64, 64]);
        assert!(gdm.max_abs() < 0.01, "{}", gdm.max_abs());
    }

    #[test]
    fn zero_final_layer_gives_zero_map() {
        let mut w = unet_init(&small()).unwrap();
        w.get_mut("out.weight").unwrap().data.fill(0.0);
        let gdm = unet_forward(&w, &rand_input(3, &[16, 16]), &rand_input(4, &[16, 16])).unwrap();
        assert!(gdm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_of_depth_four_is_four_by_four() {
        let strides = UNetConfig::default().level_strides(&[64, 64]).unwrap();
        let mut e = [64usize, 64];
        for s in &strides {
            e[0] /= s[0];
            e[1] /= s[1];
        }
        assert_eq!(e, [4, 4]);
        let s3 = UNetConfig::with_dims(3).level_strides(&[64, 64, 32]).unwrap();
        let slices: usize = 32 / s3.iter().map(|s| s[2]).product::<usize>();
        assert_eq!(slices, 2);
    }

    #[test]
    fn output_extent_matches_input_across_configs() {
        let cases: Vec<(UNetConfig, Vec<usize>)> = vec![
            (UNetConfig::reduced(2, &[2], &[2]), vec![8, 8]),
            (UNetConfig::reduced(2, &[2, 3], &[3, 2]), vec![8, 12]),
            (UNetConfig::reduced(2, &[3, 3, 3], &[3, 3, 3, 2, 2]), vec![16, 16]),
            (UNetConfig::reduced(2, &[2, 2, 2, 2, 2], &[2, 2, 2, 2, 2]), vec![32, 64]),
            (UNetConfig::reduced(3, &[2, 2], &[2, 2, 2]), vec![8, 8, 4]),
            (UNetConfig::reduced(3, &[2, 2, 2], &[2, 2, 2]), vec![8, 8, 2]),
        ];
        for (cfg, spatial) in cases {
            let w = unet_init(&cfg).unwrap();
            let gdm = unet_forward(&w, &rand_input(5, &spatial), &rand_input(6, &spatial)).unwrap();
            assert_eq!(&gdm.shape()[1..], spatial.as_slice(), "{cfg:?}");
            assert_eq!(gdm.shape()[0], 1);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = unet_init(&small()).unwrap();
        let err = unet_forward(&w, &rand_input(1, &[6, 8]), &rand_input(2, &[6, 8])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = unet_forward(&w, &rand_input(1, &[8, 8, 4]), &rand_input(2, &[8, 8, 4])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = unet_forward(&w, &rand_input(1, &[8, 8]), &rand_input(2, &[8, 16])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn forward_is_deterministic() {
        let w = unet_init(&small()).unwrap();
        let (a, b) = (rand_input(7, &[16, 16]), rand_input(8, &[16, 16]));
        let g1 = unet_forward(&w, &a, &b).unwrap();
        let g2 = unet_forward(&w, &a, &b).unwrap();
        assert!(g1.data().iter().zip(g2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn skip_connections_are_wired() {
        let mut w = unet_init(&small()).unwrap();
        // make the output layer sensitive so differences are visible
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in &mut w.get_mut("out.weight").unwrap().data {
            *v = rng.random_range(-0.5..0.5);
        }
        let (a, b) = (rand_input(10, &[16, 16]), rand_input(11, &[16, 16]));
        let run = |zero: bool| {
            let mut tape = Tape::new();
            let params = w.register(&mut tape, false);
            let x = tape.constant(a.clone());
            let y = tape.constant(b.clone());
            let out = build(&w.config, &mut tape, &params, x, y, zero).unwrap();
            tape.value(out).clone()
        };
        let with = run(false);
        let without = run(true);
        let diff: f64 = with.data().iter().zip(without.data()).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut w = unet_init(&small()).unwrap();
        w.info = TrainingInfo {
            mode: Some(Mode::SelfSupervised),
            lambda: Some(1.0),
        };
        weights_save(&w, &path).unwrap();
        let back = weights_load(&path, &small()).unwrap();
        assert_eq!(back, w);

        let (a, b) = (rand_input(12, &[16, 16]), rand_input(13, &[16, 16]));
        let g1 = unet_forward(&w, &a, &b).unwrap();
        let g2 = unet_forward(&back, &a, &b).unwrap();
        assert!(g1.data().iter().zip(g2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let m = read_manifest(&path).unwrap();
        assert_eq!(m.info.mode, Some(Mode::SelfSupervised));
        assert_eq!(m.info.lambda, Some(1.0));
        let text = std::fs::read_to_string(path.with_extension("manifest")).unwrap();
        assert!(text.contains("mode = self"));
        assert!(text.contains("lambda = 1"));
    }

    #[test]
    fn load_rejects_incompatible_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        weights_save(&unet_init(&small()).unwrap(), &path).unwrap();

        let err = weights_load(&path, &UNetConfig::reduced(3, &[4, 4], &[4, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        let err = weights_load(&path, &UNetConfig::reduced(2, &[4, 8], &[4, 4, 4])).unwrap_err();
        match err {
            Error::Incompatible { name, .. } => assert_eq!(name, "enc1.weight"),
            other => panic!("unexpected {other}"),
        }
    }
}
