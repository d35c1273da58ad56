//! The batch commands behind the CLI. Each reads its inputs from a resolved
//! [`JobConfig`], writes results under `output_dir`, and leaves a
//! `config.resolved` snapshot next to them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::JobConfig;
use super::fsio;
use super::nifti::{nifti_read, nifti_write};
use super::preprocess::{normalize, preprocess_displacement, preprocess_with, PreprocessOptions};
use crate::distortion::{
    correct as warp, distorted_series, phantom_brain, phantom_fieldmap, vdm_from_fieldmap, DisplacementMap, FieldMap,
    MapKind, Volume,
};
use crate::error::{Error, Result};
use crate::losses::Mode;
use crate::metrics::{slicewise_report, MetricsReport, ReportOptions};
use crate::trainer::{infer_correct, lambda_sweep, samples_from_volumes, train, Sample, SweepReport, TrainHistory};
use crate::unet::{read_manifest, unet_init, weights_load, weights_save, UNetWeights};

/// Process exit status for a failed command: 1 for configuration and usage
/// problems, 3 for numeric failures, 2 for everything else (bad or missing
/// data).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
}

/// Reads a NIfTI image and attaches the configured PE axis and bandwidth.
pub fn load_volume(path: &Path, cfg: &JobConfig) -> Result<Volume> {
    let v = nifti_read(path)?;
    v.with_pe(cfg.pe_axis, cfg.bw_pe).map_err(|e| match e {
        Error::Parameter(m) => Error::Parameter(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn map_from_volume(v: Volume, pe_axis: usize, kind: MapKind) -> Result<DisplacementMap> {
    DisplacementMap::new(v.spatial().to_vec(), v.into_data(), pe_axis, kind)
}

fn maps_to_volume(maps: &[DisplacementMap], like: &Volume) -> Result<Volume> {
    let frames: Vec<Volume> = maps.iter().map(|m| m.to_volume().with_geometry_of(like)).collect();
    Volume::stack(&frames)
}

fn model_extents(cfg: &JobConfig) -> Option<PreprocessOptions> {
    (cfg.size.len() == 3).then(|| PreprocessOptions {
        in_plane: [cfg.size[0], cfg.size[1]],
        slices: cfg.size[2],
    })
}

/// Brings an EPI and its T1w to model extents (3-D inputs) and `[0, 1]`.
fn prepare(cfg: &JobConfig, epi: &Volume, t1w: &Volume) -> Result<(Volume, Volume)> {
    match model_extents(cfg) {
        Some(opts) if epi.spatial().len() == 3 => preprocess_with(epi, t1w, &opts),
        _ => {
            if epi.spatial() != t1w.spatial() {
                return Err(Error::shape(format!(
                    "T1w extents {:?} differ from EPI {:?}",
                    t1w.spatial(),
                    epi.spatial()
                )));
            }
            Ok((normalize(epi), normalize(t1w)))
        }
    }
}

fn prepare_map(cfg: &JobConfig, d: DisplacementMap) -> Result<DisplacementMap> {
    match model_extents(cfg) {
        Some(opts) if d.spatial.len() == 3 => preprocess_displacement(&d, &opts),
        _ => Ok(d),
    }
}

/// Writes `phantoms` seeded subjects to `output_dir/phantom_NNN/`: `t1w`,
/// `epi_truth`, `epi_distorted`, `fieldmap` (Hz), `vdm` (voxels) and `mask`,
/// plus `vdm_frames` for multi-frame series. Returns the subject directories.
pub fn simulate(cfg: &JobConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut dirs = Vec::with_capacity(cfg.phantoms);
    for p in 0..cfg.phantoms {
        let seed = cfg.seed.wrapping_add(p as u64);
        let dir = cfg.output_dir.join(format!("phantom_{p:03}"));
        let ph = phantom_brain(seed, &cfg.size, &cfg.phantom_options())?;
        let mut field = phantom_fieldmap(seed, &cfg.size, cfg.max_hz, cfg.smoothness)?;
        field.pe_axis = cfg.pe_axis;
        let (series, maps) = distorted_series(&ph.epi_truth, &field, &cfg.series_options(seed))?;
        let like = &ph.epi_truth;
        nifti_write(&ph.t1w, &dir.join("t1w.nii"))?;
        nifti_write(like, &dir.join("epi_truth.nii"))?;
        nifti_write(&series, &dir.join("epi_distorted.nii"))?;
        nifti_write(&ph.mask, &dir.join("mask.nii"))?;
        let fm = Volume::new(field.spatial.clone(), 1, field.data.clone())?.with_geometry_of(like);
        nifti_write(&fm, &dir.join("fieldmap.nii"))?;
        let vdm = vdm_from_fieldmap(&field, cfg.bw_pe)?;
        nifti_write(&vdm.to_volume().with_geometry_of(like), &dir.join("vdm.nii"))?;
        if cfg.frames > 1 {
            nifti_write(&maps_to_volume(&maps, like)?, &dir.join("vdm_frames.nii"))?;
        }
        log::info!("phantom {p}: seed {seed}, max |VDM| {:.3} voxels", vdm.max_abs());
        dirs.push(dir);
    }
    cfg.write_snapshot("simulate")?;
    Ok(dirs)
}

/// Subject directories under `root`: every subdirectory holding `t1w.nii`
/// and `epi_distorted.nii`, in name order.
pub fn subject_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("t1w.nii").is_file() && p.join("epi_distorted.nii").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::param(format!(
            "{}: no subject directories with t1w.nii and epi_distorted.nii",
            root.display()
        )));
    }
    Ok(dirs)
}

/// Training samples from every subject under `data_dir`, with reference
/// maps when the mode needs them.
pub fn load_dataset(cfg: &JobConfig) -> Result<Vec<Sample>> {
    let root = required(&cfg.data_dir, "data_dir")?;
    let mut samples = Vec::new();
    for dir in subject_dirs(root)? {
        let t1w = load_volume(&dir.join("t1w.nii"), cfg)?;
        let epi = load_volume(&dir.join("epi_distorted.nii"), cfg)?;
        let (epi, t1w) = prepare(cfg, &epi, &t1w)?;
        if !cfg.mode.needs_reference() {
            samples.extend(samples_from_volumes(&t1w, &epi, None, cfg.dims)?);
            continue;
        }
        let frames_path = dir.join("vdm_frames.nii");
        let maps: Vec<DisplacementMap> = if epi.frames() > 1 && frames_path.is_file() {
            let v = load_volume(&frames_path, cfg)?;
            (0..v.frames())
                .map(|t| map_from_volume(v.frame_volume(t), cfg.pe_axis, MapKind::VdmGroundTruth))
                .collect::<Result<_>>()?
        } else {
            let path = dir.join("vdm.nii");
            if !path.is_file() {
                return Err(Error::param(format!("{}: {} mode needs vdm.nii", dir.display(), cfg.mode)));
            }
            vec![map_from_volume(load_volume(&path, cfg)?, cfg.pe_axis, MapKind::VdmGroundTruth)?]
        };
        if maps.len() != 1 && maps.len() != epi.frames() {
            return Err(Error::shape(format!(
                "{}: {} reference maps for {} frames",
                dir.display(),
                maps.len(),
                epi.frames()
            )));
        }
        for t in 0..epi.frames() {
            let d = prepare_map(cfg, maps[t % maps.len()].clone())?;
            samples.extend(samples_from_volumes(&t1w, &epi.frame_volume(t), Some(&d), cfg.dims)?);
        }
    }
    Ok(samples)
}

/// Trains on `data_dir`; writes `weights.bin` (+ manifest) and
/// `history.txt`.
pub fn train_cmd(cfg: &JobConfig) -> Result<(UNetWeights, TrainHistory)> {
    cfg.validate()?;
    let mut tc = cfg.train_config()?;
    if tc.checkpoint_every > 0 {
        tc.checkpoint_dir = Some(cfg.output_dir.join("checkpoints"));
    }
    let data = load_dataset(cfg)?;
    log::info!("training {} mode on {} samples", cfg.mode, data.len());
    let (weights, history) = train(&data, &tc)?;
    weights_save(&weights, &cfg.output_dir.join("weights.bin"))?;
    fsio::write_atomic(&cfg.output_dir.join("history.txt"), history.to_lines().as_bytes())?;
    cfg.write_snapshot("train")?;
    Ok((weights, history))
}

/// Self-supervised λ sweep over `lambdas`; writes `sweep.tsv`.
pub fn sweep_cmd(cfg: &JobConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.mode != Mode::SelfSupervised {
        return Err(Error::Config(format!("sweep runs in self mode; configured mode is {}", cfg.mode)));
    }
    let data = load_dataset(cfg)?;
    let report = lambda_sweep(&data, &cfg.lambdas, cfg.sweep_epochs, &cfg.train_config()?)?;
    fsio::write_atomic(&cfg.output_dir.join("sweep.tsv"), report.to_tsv().as_bytes())?;
    cfg.write_snapshot("sweep")?;
    Ok(report)
}

/// Loads weights together with the network configuration in their manifest.
pub fn load_weights(path: &Path) -> Result<UNetWeights> {
    let manifest = read_manifest(path)?;
    weights_load(path, &manifest.config)
}

/// Summary of a `correct` run.
#[derive(Clone, Debug)]
pub struct CorrectOutcome {
    pub frames: usize,
    /// Number of displacement maps written: one per frame for dynamic
    /// correction, one for static.
    pub maps: usize,
    pub estimate_seconds: Vec<f64>,
    pub correct_seconds: Vec<f64>,
}

/// Corrects `epi` and writes `corrected.nii`.
///
/// With `static_vdm` set, the field map there (Hz) is converted to a
/// displacement map and applied to every frame at native extents; `vdm.nii`
/// holds that map. Otherwise the network in `weights` estimates a map per
/// frame from the frame and `t1w` at model extents, and `gdm.nii` holds one
/// map per frame. Corrected intensities are mapped back to the input range.
pub fn correct_cmd(cfg: &JobConfig) -> Result<CorrectOutcome> {
    cfg.validate()?;
    let epi_path = required(&cfg.epi, "epi")?;
    let epi = load_volume(epi_path, cfg)?;
    let frames = epi.frames();
    let out = &cfg.output_dir;
    let outcome = if let Some(fm_path) = &cfg.static_vdm {
        let fm = load_volume(fm_path, cfg)?;
        if fm.frames() != 1 {
            return Err(Error::shape(format!("{}: field map must have one frame", fm_path.display())));
        }
        let field = FieldMap {
            spatial: fm.spatial().to_vec(),
            data: fm.data().to_vec(),
            pe_axis: cfg.pe_axis,
        };
        let vdm = vdm_from_fieldmap(&field, cfg.bw_pe)?;
        let t0 = Instant::now();
        let corrected = warp(&epi, &vdm)?;
        let secs = t0.elapsed().as_secs_f64() / frames as f64;
        nifti_write(&corrected, &out.join("corrected.nii"))?;
        nifti_write(&vdm.to_volume().with_geometry_of(&fm), &out.join("vdm.nii"))?;
        CorrectOutcome {
            frames,
            maps: 1,
            estimate_seconds: vec![0.0; frames],
            correct_seconds: vec![secs; frames],
        }
    } else {
        let weights = load_weights(required(&cfg.weights, "weights")?)?;
        let t1w = load_volume(required(&cfg.t1w, "t1w")?, cfg)?;
        let (epi_n, t1w_n) = prepare(cfg, &epi, &t1w)?;
        drop(epi);
        let mut inf = infer_correct(&weights, &epi_n, &t1w_n)?;
        drop(epi_n);
        if let Some((lo, hi)) = inf.corrected.intensity_range.take() {
            inf.corrected.data_mut().iter_mut().for_each(|x| *x = lo + *x * (hi - lo));
        }
        nifti_write(&inf.corrected, &out.join("corrected.nii"))?;
        let like = inf.corrected.frame_volume(0);
        drop(inf.corrected);
        nifti_write(&maps_to_volume(&inf.gdms, &like)?, &out.join("gdm.nii"))?;
        CorrectOutcome {
            frames,
            maps: inf.gdms.len(),
            estimate_seconds: inf.estimate_seconds,
            correct_seconds: inf.correct_seconds,
        }
    };
    cfg.write_snapshot("correct")?;
    Ok(outcome)
}

/// Compares the `methods` stacks against `t1w`; writes `metrics.tsv`.
pub fn evaluate_cmd(cfg: &JobConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if cfg.methods.is_empty() {
        return Err(Error::Config("`methods` is required: one or more label=path entries".into()));
    }
    let reference = load_volume(required(&cfg.t1w, "t1w")?, cfg)?;
    let methods: Vec<(String, Volume)> = cfg
        .methods
        .iter()
        .map(|(l, p)| Ok((l.clone(), load_volume(p, cfg)?)))
        .collect::<Result<_>>()?;
    let mask = cfg.mask.as_deref().map(|p| load_volume(p, cfg)).transpose()?;
    let baseline = match &cfg.baseline {
        Some((l, p)) => Some((l.as_str(), load_volume(p, cfg)?)),
        None => None,
    };
    let mut opts = ReportOptions {
        bins: cfg.bins,
        ..ReportOptions::default()
    };
    if let Some((_, b)) = &baseline {
        let (lo, hi) = b.min_max();
        if hi > lo {
            opts.dynamic_range = hi - lo;
        }
    }
    let report = slicewise_report(
        &methods,
        &reference,
        mask.as_ref(),
        baseline.as_ref().map(|(l, v)| (*l, v)),
        &opts,
    )?;
    fsio::write_atomic(&cfg.output_dir.join("metrics.tsv"), report.to_tsv().as_bytes())?;
    cfg.write_snapshot("evaluate")?;
    Ok(report)
}

/// Per-frame timing of map estimation and correction.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub frames: usize,
    pub estimate_seconds: Vec<f64>,
    pub correct_seconds: Vec<f64>,
    /// Elapsed time for the whole series.
    pub wall_seconds: f64,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl BenchReport {
    /// `(label, per-frame seconds)` for the estimation, correction and total
    /// rows.
    pub fn rows(&self) -> Vec<(&'static str, Vec<f64>)> {
        let total = self
            .estimate_seconds
            .iter()
            .zip(&self.correct_seconds)
            .map(|(a, b)| a + b)
            .collect();
        vec![
            ("VDM/GDM estimation", self.estimate_seconds.clone()),
            ("EPI correction", self.correct_seconds.clone()),
            ("total", total),
        ]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# frames = {}", self.frames);
        let _ = writeln!(s, "# wall_seconds = {:.6}", self.wall_seconds);
        let _ = writeln!(s, "stage\tsum_s\tper_frame_mean_s\tper_frame_sd_s");
        for (label, x) in self.rows() {
            let (m, sd) = mean_sd(&x);
            let _ = writeln!(s, "{label}\t{:.6}\t{:.6}\t{:.6}", x.iter().sum::<f64>(), m, sd);
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} frames, {:.2} s elapsed", self.frames, self.wall_seconds);
        let _ = writeln!(s, "{:<20} {:>12} {:>24}", "stage", "sum [s]", "per frame [s]");
        for (label, x) in self.rows() {
            let (m, sd) = mean_sd(&x);
            let _ = writeln!(
                s,
                "{label:<20} {:>12.3} {:>24}",
                x.iter().sum::<f64>(),
                format!("{m:.5} ± {sd:.5}")
            );
        }
        s
    }
}

/// Times dynamic correction of a series. Uses `epi`/`t1w` when given,
/// otherwise a simulated `frames`-frame phantom series; uses `weights` when
/// given, otherwise a freshly initialized network (timing does not depend on
/// trained values). Writes `bench.tsv`.
pub fn bench_cmd(cfg: &JobConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let (epi, t1w) = match (&cfg.epi, &cfg.t1w) {
        (Some(e), Some(t)) => {
            let (e, t) = (load_volume(e, cfg)?, load_volume(t, cfg)?);
            prepare(cfg, &e, &t)?
        }
        (None, None) => {
            let ph = phantom_brain(cfg.seed, &cfg.size, &cfg.phantom_options())?;
            let mut field = phantom_fieldmap(cfg.seed, &cfg.size, cfg.max_hz, cfg.smoothness)?;
            field.pe_axis = cfg.pe_axis;
            let (series, _) = distorted_series(&ph.epi_truth, &field, &cfg.series_options(cfg.seed))?;
            (series, ph.t1w)
        }
        _ => return Err(Error::Config("give both `epi` and `t1w`, or neither".into())),
    };
    let weights = match &cfg.weights {
        Some(p) => load_weights(p)?,
        None => unet_init(&cfg.train_config()?.unet)?,
    };
    let t0 = Instant::now();
    let inf = infer_correct(&weights, &epi, &t1w)?;
    let wall_seconds = t0.elapsed().as_secs_f64();
    let report = BenchReport {
        frames: epi.frames(),
        estimate_seconds: inf.estimate_seconds,
        correct_seconds: inf.correct_seconds,
        wall_seconds,
    };
    fsio::write_atomic(&cfg.output_dir.join("bench.tsv"), report.to_tsv().as_bytes())?;
    cfg.write_snapshot("bench")?;
    Ok(report)
}
