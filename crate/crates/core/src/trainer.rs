//! Adam, the training loop, the smoothness-weight sweep and per-frame
//! inference.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{sample_pe, Tape, Tensor};
use crate::distortion::{DisplacementMap, MapKind, Volume};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossValues, Mode};
use crate::metrics::nmi;
use crate::unet::{forward_on_tape, unet_forward, unet_init, weights_save, TrainingInfo, UNetConfig, UNetWeights};

pub const DEFAULT_LAMBDAS: [f64; 4] = [0.0, 0.5, 1.0, 1.5];

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter buffer.
pub fn adam_step(params: &mut [Vec<f64>], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Contract(format!(
                "parameter {i}: {} values, {} gradients, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// One training example, `[1, spatial]` tensors at model extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t1w: Tensor,
    pub epi: Tensor,
    pub vdm: Option<Tensor>,
}

fn plane_tensors(v: &Volume, dims: usize) -> Result<Vec<Tensor>> {
    let rank = v.spatial().len();
    let mut out = Vec::new();
    for t in 0..v.frames() {
        match (dims, rank) {
            (2, 2) | (3, 3) => out.push(v.frame_tensor(t)),
            (2, 3) => {
                for k in 0..v.spatial()[2] {
                    out.push(v.slice(t, k).frame_tensor(0));
                }
            }
            _ => {
                return Err(Error::shape(format!(
                    "{dims}-D model cannot take {rank}-D images"
                )))
            }
        }
    }
    Ok(out)
}

/// Splits aligned volumes into samples: slices for a 2-D model, whole
/// volumes for a 3-D one. Every EPI frame becomes its own sample, paired
/// with the single-frame T1w (and displacement map).
pub fn samples_from_volumes(
    t1w: &Volume,
    epi: &Volume,
    vdm: Option<&DisplacementMap>,
    dims: usize,
) -> Result<Vec<Sample>> {
    if t1w.spatial() != epi.spatial() {
        return Err(Error::shape(format!(
            "T1w {:?} and EPI {:?} extents differ",
            t1w.spatial(),
            epi.spatial()
        )));
    }
    if dims == 2 && epi.pe_axis >= 2 {
        return Err(Error::param("a 2-D model needs the PE axis in-plane (axis 0 or 1)"));
    }
    let t1 = plane_tensors(&t1w.frame_volume(0), dims)?;
    let ep = plane_tensors(epi, dims)?;
    let vd = match vdm {
        Some(d) => {
            if d.spatial != epi.spatial() {
                return Err(Error::shape("displacement extents differ from the EPI"));
            }
            Some(plane_tensors(&d.to_volume(), dims)?)
        }
        None => None,
    };
    Ok(ep
        .into_iter()
        .enumerate()
        .map(|(i, e)| Sample {
            t1w: t1[i % t1.len()].clone(),
            epi: e,
            vdm: vd.as_ref().map(|v| v[i % v.len()].clone()),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// PE axis within each sample's spatial extents.
    pub pe_axis: usize,
    pub unet: UNetConfig,
    pub loss: LossConfig,
    /// Evaluate validation NMI (and save weights when `checkpoint_dir` is
    /// set) every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: Mode, dims: usize) -> Self {
        Self {
            mode,
            learning_rate: 1e-5,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            pe_axis: 0,
            unet: UNetConfig::with_dims(dims),
            loss: LossConfig::new(mode, dims),
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn dims(&self) -> usize {
        self.unet.dims
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.loss.validate()?;
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch size must be 1, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.loss.mode != self.mode {
            return Err(Error::Config(format!(
                "loss mode {} differs from training mode {}",
                self.loss.mode, self.mode
            )));
        }
        if self.loss.cc_window.len() != self.dims() {
            return Err(Error::Config(format!(
                "CC window {:?} does not match {}-D model",
                self.loss.cc_window,
                self.dims()
            )));
        }
        if self.pe_axis >= self.dims() {
            return Err(Error::Config(format!("PE axis {} invalid for {}-D model", self.pe_axis, self.dims())));
        }
        Ok(())
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub mse: Option<f64>,
    pub cc: Option<f64>,
    pub smooth: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub validation_nmi: Option<f64>,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

fn kv(s: &mut String, key: &str, v: Option<f64>) {
    if let Some(v) = v {
        let _ = write!(s, " {key}={v:e}");
    }
}

impl TrainHistory {
    /// One `key=value` line per epoch, then one per checkpoint.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            let _ = write!(s, "epoch={} total={:e}", r.epoch, r.total);
            kv(&mut s, "mse", r.mse);
            kv(&mut s, "cc", r.cc);
            kv(&mut s, "smooth", r.smooth);
            let _ = writeln!(s, " wall_s={:.3}", r.wall_seconds);
        }
        for c in &self.checkpoints {
            let _ = write!(s, "checkpoint epoch={}", c.epoch);
            kv(&mut s, "val_nmi", c.validation_nmi);
            if let Some(p) = &c.path {
                let _ = write!(s, " path={}", p.display());
            }
            s.push('\n');
        }
        s
    }

    /// Epoch totals averaged over trailing windows of `w` epochs.
    pub fn smoothed_totals(&self, w: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.epochs.iter().map(|r| r.total).collect();
        totals.windows(w.max(1)).map(|x| x.iter().sum::<f64>() / x.len() as f64).collect()
    }
}

fn check_samples(dataset: &[Sample], config: &TrainConfig, what: &str) -> Result<()> {
    for (i, s) in dataset.iter().enumerate() {
        if s.t1w.shape() != s.epi.shape() {
            return Err(Error::shape(format!("{what} sample {i}: T1w and EPI extents differ")));
        }
        if s.epi.rank() != config.dims() + 1 {
            return Err(Error::shape(format!(
                "{what} sample {i}: {}-D model given shape {:?}",
                config.dims(),
                s.epi.shape()
            )));
        }
        if config.mode.needs_reference() && s.vdm.is_none() {
            return Err(Error::param(format!(
                "{what} sample {i}: {} mode needs a reference displacement map",
                config.mode
            )));
        }
    }
    Ok(())
}

/// Estimated map and corrected EPI for one sample.
pub fn estimate(weights: &UNetWeights, sample: &Sample, pe_axis: usize) -> Result<(Tensor, Tensor)> {
    let gdm = unet_forward(weights, &sample.t1w, &sample.epi)?;
    let corrected = sample_pe(&sample.epi, &gdm, pe_axis)?;
    Ok((gdm, corrected))
}

fn mean_validation_nmi(weights: &UNetWeights, validation: &[Sample], pe_axis: usize) -> Result<Option<f64>> {
    if validation.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in validation {
        let (_, corrected) = estimate(weights, s, pe_axis)?;
        total += nmi(corrected.data(), s.t1w.data(), 64, None)?;
    }
    Ok(Some(total / validation.len() as f64))
}

fn round_f32(p: &mut [Vec<f64>]) {
    for buf in p {
        for v in buf.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn fmt_values(v: &LossValues) -> String {
    format!("total={} mse={:?} cc={:?} smooth={:?}", v.total, v.mse, v.cc, v.smooth)
}

/// Trains a fresh network on `dataset`.
pub fn train(dataset: &[Sample], config: &TrainConfig) -> Result<(UNetWeights, TrainHistory)> {
    train_validated(dataset, &[], config)
}

/// As [`train`], evaluating mean NMI(corrected, T1w) over `validation` at
/// every checkpoint.
///
/// Parameters are kept at 32-bit precision between steps so that saved
/// weights reproduce the trained network exactly.
pub fn train_validated(
    dataset: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
) -> Result<(UNetWeights, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    check_samples(dataset, config, "training")?;
    check_samples(validation, config, "validation")?;

    let mut weights = unet_init(&config.unet)?;
    weights.info = TrainingInfo {
        mode: Some(config.mode),
        lambda: (config.mode == Mode::SelfSupervised).then_some(config.loss.lambda_smooth),
    };
    let mut master: Vec<Vec<f64>> = weights
        .params
        .iter()
        .map(|p| p.data.iter().map(|&v| v as f64).collect())
        .collect();
    let shapes: Vec<Vec<usize>> = weights.params.iter().map(|p| p.shape.clone()).collect();
    let mut adam = AdamState::new(&master.iter().map(Vec::len).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        let (mut n_mse, mut n_cc, mut n_smooth) = (0.0, 0.0, 0.0);
        for (step, &idx) in order.iter().enumerate() {
            let sample = &dataset[idx];
            let mut tape = Tape::new();
            let params: Vec<_> = master
                .iter()
                .zip(&shapes)
                .map(|(d, s)| tape.param(Tensor::new(s.clone(), d.clone()).expect("shape from config")))
                .collect();
            let t1 = tape.constant(sample.t1w.clone());
            let epi = tape.constant(sample.epi.clone());
            let gdm = forward_on_tape(&config.unet, &mut tape, &params, t1, epi)?;
            let corrected = if config.mode.uses_similarity() {
                Some(tape.linear_sample_pe(epi, gdm, config.pe_axis)?)
            } else {
                None
            };
            let vdm = sample.vdm.clone().map(|v| tape.constant(v));
            let terms = total_loss(&config.loss, &mut tape, gdm, corrected, t1, vdm)?;
            let values = terms.values(&tape);
            if !values.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {step} (sample {idx}): {}",
                    fmt_values(&values)
                )));
            }
            let grads = tape.backward(terms.total)?;
            let grad_refs: Vec<&[f64]> = params
                .iter()
                .map(|&p| grads.get(p).expect("parameters require gradients").data())
                .collect();
            if grad_refs.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, step {step} (sample {idx}): {}",
                    fmt_values(&values)
                )));
            }
            adam_step(&mut master, &grad_refs, &mut adam, config.learning_rate)?;
            round_f32(&mut master);

            sums.total += values.total;
            if let Some(v) = values.mse {
                *sums.mse.get_or_insert(0.0) += v;
                n_mse += 1.0;
            }
            if let Some(v) = values.cc {
                *sums.cc.get_or_insert(0.0) += v;
                n_cc += 1.0;
            }
            if let Some(v) = values.smooth {
                *sums.smooth.get_or_insert(0.0) += v;
                n_smooth += 1.0;
            }
        }
        let n = dataset.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            total: sums.total / n,
            mse: sums.mse.map(|v| v / n_mse),
            cc: sums.cc.map(|v| v / n_cc),
            smooth: sums.smooth.map(|v| v / n_smooth),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}/{}: loss {:.6e}", config.epochs, sums.total / n);

        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let snapshot = snapshot(&weights, &master);
            let path = match &config.checkpoint_dir {
                Some(dir) => {
                    let p = dir.join(format!("checkpoint_{epoch:04}.bin"));
                    weights_save(&snapshot, &p)?;
                    Some(p)
                }
                None => None,
            };
            history.checkpoints.push(CheckpointRecord {
                epoch,
                validation_nmi: mean_validation_nmi(&snapshot, validation, config.pe_axis)?,
                path,
            });
        }
    }
    Ok((snapshot(&weights, &master), history))
}

fn snapshot(template: &UNetWeights, master: &[Vec<f64>]) -> UNetWeights {
    let mut w = template.clone();
    for (p, m) in w.params.iter_mut().zip(master) {
        p.data = m.iter().map(|&v| v as f32).collect();
    }
    w
}

/// Summary of one self-supervised model in a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub max_abs_gdm: f64,
    pub mean_smoothness: f64,
    pub mean_nmi_corrected: f64,
    pub mean_nmi_uncorrected: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub epochs: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("lambda\tmax_abs_gdm\tmean_smoothness\tmean_nmi_corrected\tmean_nmi_uncorrected\tfinal_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6e}\t{:.6e}\t{:.6}\t{:.6}\t{:.6e}",
                r.lambda, r.max_abs_gdm, r.mean_smoothness, r.mean_nmi_corrected, r.mean_nmi_uncorrected, r.final_loss
            );
        }
        s
    }
}

/// Mean squared forward difference of a `[1, spatial]` map, averaged over
/// axes with more than one voxel.
pub fn smoothness_value(gdm: &Tensor) -> f64 {
    let spatial = gdm.spatial();
    let data = gdm.data();
    let mut total = 0.0;
    let mut axes = 0;
    for a in 0..spatial.len() {
        let n = spatial[a];
        if n < 2 {
            continue;
        }
        let inner: usize = spatial[a + 1..].iter().product();
        let (mut s, mut c) = (0.0, 0usize);
        for (idx, &v) in data.iter().enumerate() {
            if (idx / inner) % n + 1 < n {
                s += (data[idx + inner] - v).powi(2);
                c += 1;
            }
        }
        total += s / c as f64;
        axes += 1;
    }
    if axes == 0 { 0.0 } else { total / axes as f64 }
}

/// Trains one self-supervised model per `lambda` for `epochs` epochs from
/// the same seed, then evaluates each on `dataset`.
pub fn lambda_sweep(dataset: &[Sample], lambdas: &[f64], epochs: usize, base: &TrainConfig) -> Result<SweepReport> {
    if base.mode != Mode::SelfSupervised {
        return Err(Error::Config(format!("the lambda sweep runs in self mode, got {}", base.mode)));
    }
    if lambdas.is_empty() {
        return Err(Error::param("no lambda values to sweep"));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.epochs = epochs;
        cfg.loss.lambda_smooth = lambda;
        let (weights, history) = train(dataset, &cfg)?;
        let (mut max_abs, mut smooth, mut nc, mut nu) = (0.0_f64, 0.0, 0.0, 0.0);
        for s in dataset {
            let (gdm, corrected) = estimate(&weights, s, cfg.pe_axis)?;
            max_abs = max_abs.max(gdm.max_abs());
            smooth += smoothness_value(&gdm);
            nc += nmi(corrected.data(), s.t1w.data(), 64, None)?;
            nu += nmi(s.epi.data(), s.t1w.data(), 64, None)?;
        }
        let n = dataset.len() as f64;
        rows.push(SweepRow {
            lambda,
            max_abs_gdm: max_abs,
            mean_smoothness: smooth / n,
            mean_nmi_corrected: nc / n,
            mean_nmi_uncorrected: nu / n,
            final_loss: history.epochs.last().map_or(f64::NAN, |r| r.total),
        });
        log::info!("lambda {lambda}: max |GDM| {max_abs:.4}");
    }
    Ok(SweepReport { epochs, rows })
}

/// Result of dynamic correction.
#[derive(Clone, Debug)]
pub struct Inference {
    pub corrected: Volume,
    pub gdms: Vec<DisplacementMap>,
    /// Map estimation time per frame, seconds.
    pub estimate_seconds: Vec<f64>,
    /// Warp time per frame, seconds.
    pub correct_seconds: Vec<f64>,
}

fn estimate_frame(weights: &UNetWeights, frame: &Volume, t1w: &Volume) -> Result<DisplacementMap> {
    let dims = weights.config.dims;
    let rank = frame.spatial().len();
    let map = match (dims, rank) {
        (2, 2) | (3, 3) => unet_forward(weights, &t1w.frame_tensor(0), &frame.frame_tensor(0))?.into_data(),
        (2, 3) => {
            let slices: Vec<Volume> = (0..frame.spatial()[2])
                .map(|k| {
                    let g = unet_forward(weights, &t1w.slice(0, k).frame_tensor(0), &frame.slice(0, k).frame_tensor(0))?;
                    Volume::new(frame.spatial()[..2].to_vec(), 1, g.into_data())
                })
                .collect::<Result<_>>()?;
            Volume::from_slices(&slices)?.into_data()
        }
        _ => return Err(Error::shape(format!("{dims}-D model cannot take {rank}-D frames"))),
    };
    DisplacementMap::new(frame.spatial().to_vec(), map, frame.pe_axis, MapKind::GdmEstimated)
}

/// Estimates a fresh map for every frame of `epi_series` and corrects that
/// frame with it. Frames run in parallel; weights are shared read-only.
pub fn infer_correct(weights: &UNetWeights, epi_series: &Volume, t1w: &Volume) -> Result<Inference> {
    if epi_series.spatial() != t1w.spatial() {
        return Err(Error::shape(format!(
            "series extents {:?} differ from T1w {:?}",
            epi_series.spatial(),
            t1w.spatial()
        )));
    }
    let per: Vec<(Volume, DisplacementMap, f64, f64)> = (0..epi_series.frames())
        .into_par_iter()
        .map(|t| {
            let frame = epi_series.frame_volume(t);
            let t0 = Instant::now();
            let gdm = estimate_frame(weights, &frame, t1w)?;
            let t1 = Instant::now();
            let corrected = crate::distortion::correct(&frame, &gdm)?;
            let t2 = Instant::now();
            Ok((corrected, gdm, (t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    let estimate_seconds = per.iter().map(|p| p.2).collect();
    let correct_seconds = per.iter().map(|p| p.3).collect();
    let (frames, gdms): (Vec<Volume>, Vec<DisplacementMap>) = per.into_iter().map(|p| (p.0, p.1)).unzip();
    let mut corrected = Volume::stack(&frames)?;
    corrected.intensity_range = epi_series.intensity_range;
    Ok(Inference {
        corrected,
        gdms,
        estimate_seconds,
        correct_seconds,
    })
}

#[cfg(test)]
mod tests;
