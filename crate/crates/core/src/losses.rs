//! Training objectives for the displacement network.
//!
//! - supervised: MSE between the estimated map and the reference VDM;
//! - semi-supervised: weighted MSE plus local cross-correlation between the
//!   corrected EPI and the T1w reference;
//! - self-supervised: local cross-correlation plus a diffusion smoothness
//!   penalty on the map.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_CC_EPS: f64 = 1e-5;
pub const DEFAULT_CC_WINDOW: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Supervised,
    SemiSupervised,
    SelfSupervised,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Supervised, Mode::SemiSupervised, Mode::SelfSupervised];

    /// Whether the objective needs a reference displacement map.
    pub fn needs_reference(self) -> bool {
        !matches!(self, Mode::SelfSupervised)
    }

    /// Whether the objective compares the corrected image with the T1w.
    pub fn uses_similarity(self) -> bool {
        !matches!(self, Mode::Supervised)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::SemiSupervised => "semi",
            Mode::SelfSupervised => "self",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "supervised" | "sup" => Ok(Mode::Supervised),
            "semi" | "semi_supervised" => Ok(Mode::SemiSupervised),
            "self" | "self_supervised" => Ok(Mode::SelfSupervised),
            other => Err(Error::Config(format!(
                "unknown training mode `{other}` (expected supervised, semi or self)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub mode: Mode,
    pub lambda_smooth: f64,
    /// Odd window extent per spatial axis.
    pub cc_window: Vec<usize>,
    pub semi_mse_weight: f64,
    pub cc_eps: f64,
}

impl LossConfig {
    pub fn new(mode: Mode, dims: usize) -> Self {
        Self {
            mode,
            lambda_smooth: 1.0,
            cc_window: vec![DEFAULT_CC_WINDOW; dims],
            semi_mse_weight: 1.0,
            cc_eps: DEFAULT_CC_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cc_window.iter().any(|w| w % 2 == 0) {
            return Err(Error::Config(format!("CC window {:?} must be odd", self.cc_window)));
        }
        if !(self.lambda_smooth >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.semi_mse_weight > 0.0) {
            return Err(Error::Config("semi-supervised MSE weight must be positive".into()));
        }
        if !(self.cc_eps >= 0.0) {
            return Err(Error::Config("CC epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean squared difference between the estimated and reference maps.
pub fn mse_map_loss(tape: &mut Tape, gdm: Var, vdm: Var) -> Result<Var> {
    let d = tape.sub(gdm, vdm)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Negated mean squared local correlation of `a` and `b` (`[C, spatial]`).
///
/// Window sums use zero padding; border windows are normalized by the count
/// of in-bounds voxels, so every window is centred on its own data.
pub fn local_cc_loss(tape: &mut Tape, a: Var, b: Var, window: &[usize], eps: f64) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "local CC: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let shape = tape.shape(a).to_vec();
    if window.len() + 1 != shape.len() {
        return Err(Error::shape(format!(
            "CC window {window:?} does not match image shape {shape:?}"
        )));
    }
    let ones = tape.constant(Tensor::full(&shape, 1.0));
    let count = tape.box_sum(ones, window)?;

    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let sa = tape.box_sum(a, window)?;
    let sb = tape.box_sum(b, window)?;
    let saa = tape.box_sum(aa, window)?;
    let sbb = tape.box_sum(bb, window)?;
    let sab = tape.box_sum(ab, window)?;

    let centred = |tape: &mut Tape, s_xy: Var, s_x: Var, s_y: Var| -> Result<Var> {
        let p = tape.mul(s_x, s_y)?;
        let p = tape.div(p, count)?;
        tape.sub(s_xy, p)
    };
    let cross = centred(tape, sab, sa, sb)?;
    let var_a = centred(tape, saa, sa, sa)?;
    let var_b = centred(tape, sbb, sb, sb)?;

    let num = tape.square(cross);
    let den = tape.mul(var_a, var_b)?;
    let den = tape.add_scalar(den, eps);
    let cc = tape.div(num, den)?;
    let m = tape.mean(cc);
    Ok(tape.neg(m))
}

/// Mean over spatial axes of the mean squared forward difference.
pub fn smoothness_loss(tape: &mut Tape, gdm: Var) -> Result<Var> {
    let shape = tape.shape(gdm).to_vec();
    let axes: Vec<usize> = (1..shape.len()).filter(|&a| shape[a] > 1).collect();
    if axes.is_empty() {
        return Err(Error::shape(format!(
            "smoothness needs a spatial axis with extent > 1, got {shape:?}"
        )));
    }
    let mut total: Option<Var> = None;
    for &axis in &axes {
        let d = tape.forward_diff(gdm, axis)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.expect("at least one axis");
    Ok(tape.scale(total, 1.0 / axes.len() as f64))
}

/// Total objective and its unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Option<Var>,
    pub cc: Option<Var>,
    pub smooth: Option<Var>,
}

/// Component values read back from the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mse: Option<f64>,
    pub cc: Option<f64>,
    pub smooth: Option<f64>,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let read = |v: Option<Var>| v.map(|v| tape.value(v).item());
        LossValues {
            total: tape.value(self.total).item(),
            mse: read(self.mse),
            cc: read(self.cc),
            smooth: read(self.smooth),
        }
    }
}

/// Objective for the configured mode.
///
/// `corrected` is required when the mode compares images; `vdm_gt` when the
/// mode is supervised or semi-supervised.
pub fn total_loss(
    config: &LossConfig,
    tape: &mut Tape,
    gdm: Var,
    corrected: Option<Var>,
    t1w: Var,
    vdm_gt: Option<Var>,
) -> Result<LossTerms> {
    config.validate()?;
    let reference = || {
        vdm_gt.ok_or_else(|| Error::Contract(format!("{} mode needs a reference displacement map", config.mode)))
    };
    let image = || {
        corrected.ok_or_else(|| Error::Contract(format!("{} mode needs the corrected image", config.mode)))
    };
    match config.mode {
        Mode::Supervised => {
            let mse = mse_map_loss(tape, gdm, reference()?)?;
            Ok(LossTerms {
                total: mse,
                mse: Some(mse),
                cc: None,
                smooth: None,
            })
        }
        Mode::SemiSupervised => {
            let mse = mse_map_loss(tape, gdm, reference()?)?;
            let cc = local_cc_loss(tape, image()?, t1w, &config.cc_window, config.cc_eps)?;
            let weighted = tape.scale(mse, config.semi_mse_weight);
            let total = tape.add(weighted, cc)?;
            Ok(LossTerms {
                total,
                mse: Some(mse),
                cc: Some(cc),
                smooth: None,
            })
        }
        Mode::SelfSupervised => {
            let cc = local_cc_loss(tape, image()?, t1w, &config.cc_window, config.cc_eps)?;
            let smooth = smoothness_loss(tape, gdm)?;
            let weighted = tape.scale(smooth, config.lambda_smooth);
            let total = tape.add(cc, weighted)?;
            Ok(LossTerms {
                total,
                mse: None,
                cc: Some(cc),
                smooth: Some(smooth),
            })
        }
    }
}
