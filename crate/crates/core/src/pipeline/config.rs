//! Job configuration: a plain `key = value` file with command-line overrides.
//!
//! Values are resolved in order defaults, file, `--set key=value`, then the
//! dedicated command-line flags. Every command writes the resolved result to
//! `config.resolved` in its output directory; feeding that file back with
//! `--config` reruns the job exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::fsio;
use crate::distortion::{PhantomOptions, SeriesOptions};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Mode, DEFAULT_CC_WINDOW};
use crate::trainer::{TrainConfig, DEFAULT_LAMBDAS};
use crate::unet::UNetConfig;

pub const SNAPSHOT_NAME: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub struct JobConfig {
    pub seed: u64,
    pub output_dir: PathBuf,

    pub dims: usize,
    pub mode: Mode,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub cc_window: usize,
    pub semi_mse_weight: f64,
    pub checkpoint_every: usize,
    pub lambdas: Vec<f64>,
    pub sweep_epochs: usize,

    pub pe_axis: usize,
    pub bw_pe: f64,

    /// Phantom extents, 2-D or 3-D.
    pub size: Vec<usize>,
    pub phantoms: usize,
    pub frames: usize,
    pub max_hz: f64,
    /// Bound on field roughness: the largest voxel-to-voxel change stays
    /// below `max_hz / smoothness`.
    pub smoothness: f64,
    pub noise_sigma: f64,
    pub drift: f64,
    pub intensity_modulation: bool,

    pub bins: usize,

    pub data_dir: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub epi: Option<PathBuf>,
    pub t1w: Option<PathBuf>,
    pub static_vdm: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub methods: Vec<(String, PathBuf)>,
    pub baseline: Option<(String, PathBuf)>,
}

impl Default for JobConfig {
    fn default() -> Self {
        let unet = UNetConfig::default();
        let loss = LossConfig::new(Mode::SelfSupervised, 2);
        let train = TrainConfig::new(Mode::SelfSupervised, 2);
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            dims: 2,
            mode: Mode::SelfSupervised,
            lambda: loss.lambda_smooth,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            encoder_filters: unet.encoder_filters,
            decoder_filters: unet.decoder_filters,
            cc_window: DEFAULT_CC_WINDOW,
            semi_mse_weight: loss.semi_mse_weight,
            checkpoint_every: 0,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            sweep_epochs: 20,
            pe_axis: 0,
            bw_pe: PhantomOptions::default().bw_pe,
            size: vec![64, 64, 32],
            phantoms: 1,
            frames: 1,
            max_hz: 30.0,
            smoothness: 8.0,
            noise_sigma: 0.005,
            drift: SeriesOptions::default().drift,
            intensity_modulation: true,
            bins: 64,
            data_dir: None,
            weights: None,
            epi: None,
            t1w: None,
            static_vdm: None,
            mask: None,
            methods: Vec::new(),
            baseline: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "dims",
    "mode",
    "lambda",
    "learning_rate",
    "epochs",
    "encoder_filters",
    "decoder_filters",
    "cc_window",
    "semi_mse_weight",
    "checkpoint_every",
    "lambdas",
    "sweep_epochs",
    "pe_axis",
    "bw_pe",
    "size",
    "phantoms",
    "frames",
    "max_hz",
    "smoothness",
    "noise_sigma",
    "drift",
    "intensity_modulation",
    "bins",
    "data_dir",
    "weights",
    "epi",
    "t1w",
    "static_vdm",
    "mask",
    "methods",
    "baseline",
];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key}`: expected {what}, got `{value}`"))
}

fn int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn float(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| t.trim().parse().map_err(|_| bad(key, v, "a comma-separated list")))
        .collect()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn labelled(key: &str, v: &str) -> Result<(String, PathBuf)> {
    match v.split_once('=') {
        Some((l, p)) if !l.trim().is_empty() && !p.trim().is_empty() => {
            Ok((l.trim().to_string(), PathBuf::from(p.trim())))
        }
        _ => Err(bad(key, v, "label=path")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl JobConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, v) = (key.trim(), value.trim());
        match key {
            "seed" => self.seed = int(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dims" => self.dims = int(key, v)?,
            "mode" => self.mode = v.parse()?,
            "lambda" => self.lambda = float(key, v)?,
            "learning_rate" => self.learning_rate = float(key, v)?,
            "epochs" => self.epochs = int(key, v)?,
            "encoder_filters" => self.encoder_filters = list(key, v)?,
            "decoder_filters" => self.decoder_filters = list(key, v)?,
            "cc_window" => self.cc_window = int(key, v)?,
            "semi_mse_weight" => self.semi_mse_weight = float(key, v)?,
            "checkpoint_every" => self.checkpoint_every = int(key, v)?,
            "lambdas" => self.lambdas = list(key, v)?,
            "sweep_epochs" => self.sweep_epochs = int(key, v)?,
            "pe_axis" => self.pe_axis = int(key, v)?,
            "bw_pe" => self.bw_pe = float(key, v)?,
            "size" => {
                let s: Vec<usize> = list(key, &v.replace('x', ","))?;
                self.size = s;
            }
            "phantoms" => self.phantoms = int(key, v)?,
            "frames" => self.frames = int(key, v)?,
            "max_hz" => self.max_hz = float(key, v)?,
            "smoothness" => self.smoothness = float(key, v)?,
            "noise_sigma" => self.noise_sigma = float(key, v)?,
            "drift" => self.drift = float(key, v)?,
            "intensity_modulation" => {
                self.intensity_modulation = match v {
                    "true" | "yes" | "1" | "on" => true,
                    "false" | "no" | "0" | "off" => false,
                    _ => return Err(bad(key, v, "true or false")),
                }
            }
            "bins" => self.bins = int(key, v)?,
            "data_dir" => self.data_dir = path(v),
            "weights" => self.weights = path(v),
            "epi" => self.epi = path(v),
            "t1w" => self.t1w = path(v),
            "static_vdm" => self.static_vdm = path(v),
            "mask" => self.mask = path(v),
            "methods" => {
                self.methods = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|m| labelled(key, m)).collect::<Result<_>>()?
                }
            }
            "baseline" => self.baseline = if v.is_empty() { None } else { Some(labelled(key, v)?) },
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key = value` document. Blank lines and `#` comments are
    /// skipped.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{source}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !matches!(self.dims, 2 | 3) {
            return fail(format!("dims must be 2 or 3, got {}", self.dims));
        }
        if !matches!(self.size.len(), 2 | 3) || self.size.contains(&0) {
            return fail(format!("size must list 2 or 3 positive extents, got {:?}", self.size));
        }
        if self.pe_axis >= self.size.len() {
            return fail(format!("pe_axis {} out of range for size {:?}", self.pe_axis, self.size));
        }
        if !(self.bw_pe > 0.0) {
            return fail(format!("bw_pe must be positive, got {}", self.bw_pe));
        }
        if self.phantoms == 0 || self.frames == 0 {
            return fail("phantoms and frames must be at least 1".into());
        }
        if !(self.max_hz >= 0.0) || !(self.smoothness > 0.0) {
            return fail("max_hz must be non-negative and smoothness positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.drift >= 0.0) {
            return fail("noise_sigma and drift must be non-negative".into());
        }
        if self.bins < 2 {
            return fail(format!("bins must be at least 2, got {}", self.bins));
        }
        if self.lambdas.is_empty() {
            return fail("lambdas must not be empty".into());
        }
        Ok(())
    }

    /// Training settings for this job.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::new(self.mode, self.dims);
        t.learning_rate = self.learning_rate;
        t.epochs = self.epochs;
        t.seed = self.seed;
        t.pe_axis = self.pe_axis;
        t.unet.encoder_filters = self.encoder_filters.clone();
        t.unet.decoder_filters = self.decoder_filters.clone();
        t.unet.seed = self.seed;
        t.loss.lambda_smooth = self.lambda;
        t.loss.cc_window = vec![self.cc_window; self.dims];
        t.loss.semi_mse_weight = self.semi_mse_weight;
        t.checkpoint_every = self.checkpoint_every;
        t.validate()?;
        Ok(t)
    }

    pub fn phantom_options(&self) -> PhantomOptions {
        PhantomOptions {
            pe_axis: self.pe_axis,
            bw_pe: self.bw_pe,
            ..PhantomOptions::default()
        }
    }

    pub fn series_options(&self, seed: u64) -> SeriesOptions {
        SeriesOptions {
            frames: self.frames,
            drift: self.drift,
            noise_sigma: self.noise_sigma,
            intensity_modulation: self.intensity_modulation,
            seed,
        }
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("dims", self.dims.to_string());
        kv("mode", self.mode.to_string());
        kv("lambda", self.lambda.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("encoder_filters", join(&self.encoder_filters));
        kv("decoder_filters", join(&self.decoder_filters));
        kv("cc_window", self.cc_window.to_string());
        kv("semi_mse_weight", self.semi_mse_weight.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("lambdas", join(&self.lambdas));
        kv("sweep_epochs", self.sweep_epochs.to_string());
        kv("pe_axis", self.pe_axis.to_string());
        kv("bw_pe", self.bw_pe.to_string());
        kv("size", join(&self.size));
        kv("phantoms", self.phantoms.to_string());
        kv("frames", self.frames.to_string());
        kv("max_hz", self.max_hz.to_string());
        kv("smoothness", self.smoothness.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("drift", self.drift.to_string());
        kv("intensity_modulation", self.intensity_modulation.to_string());
        kv("bins", self.bins.to_string());
        kv("data_dir", show(&self.data_dir));
        kv("weights", show(&self.weights));
        kv("epi", show(&self.epi));
        kv("t1w", show(&self.t1w));
        kv("static_vdm", show(&self.static_vdm));
        kv("mask", show(&self.mask));
        kv(
            "methods",
            self.methods
                .iter()
                .map(|(l, p)| format!("{l}={}", p.display()))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "baseline",
            self.baseline
                .as_ref()
                .map(|(l, p)| format!("{l}={}", p.display()))
                .unwrap_or_default(),
        );
        s
    }

    /// Writes `config.resolved` under the output directory.
    pub fn write_snapshot(&self, command: &str) -> Result<PathBuf> {
        let path = self.output_dir.join(SNAPSHOT_NAME);
        let text = format!("# resolved configuration for `{command}`\n{}", self.to_text());
        fsio::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
