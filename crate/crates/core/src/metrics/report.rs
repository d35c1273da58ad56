//! Slice-wise comparison of correction methods against the T1w reference.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::similarity::{nmi, psnr, ssim, SsimWindow};
use super::stats::{anova_oneway, bh_adjust, pooled_t_p, tukey_from_anova, Anova, TUKEY_ALPHAS};
use crate::distortion::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOptions {
    pub bins: usize,
    pub window: SsimWindow,
    pub dynamic_range: f64,
    pub alpha: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            bins: 64,
            window: SsimWindow::Gaussian7,
            dynamic_range: 1.0,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = if x.len() > 1 {
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodMetrics {
    pub label: String,
    pub nmi: Vec<f64>,
    /// Against the baseline stack, when one was given.
    pub ssim: Option<Vec<f64>>,
    pub psnr: Option<Vec<f64>>,
}

impl MethodMetrics {
    pub fn nmi_summary(&self) -> Summary {
        Summary::of(&self.nmi)
    }
}

/// One pairwise comparison of per-slice NMI.
#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub a: String,
    pub b: String,
    /// `mean NMI(b) - mean NMI(a)`.
    pub mean_diff: f64,
    pub q: f64,
    pub q_crit: f64,
    pub tukey_significant: bool,
    pub p_raw: f64,
    /// Benjamini-Hochberg adjusted across all pairs.
    pub p_adj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsBlock {
    pub anova: Anova,
    pub pairs: Vec<PairResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub slices: usize,
    pub methods: Vec<MethodMetrics>,
    pub baseline: Option<String>,
    /// Present with at least two methods and two slices.
    pub stats: Option<StatsBlock>,
}

/// 2-D planes of a volume: every frame of a 2-D image, or every slice along
/// the last axis of every frame of a 3-D one.
fn planes(v: &Volume) -> Result<Vec<Vec<f64>>> {
    match v.spatial().len() {
        2 => Ok((0..v.frames()).map(|t| v.frame(t).to_vec()).collect()),
        3 => Ok((0..v.frames())
            .flat_map(|t| (0..v.spatial()[2]).map(move |k| (t, k)))
            .map(|(t, k)| v.slice(t, k).into_data())
            .collect()),
        n => Err(Error::shape(format!("slice-wise metrics need 2-D or 3-D images, got {n}-D"))),
    }
}

fn plane_shape(v: &Volume) -> [usize; 2] {
    [v.spatial()[0], v.spatial()[1]]
}

/// Per-slice NMI of each method against `reference`, SSIM/PSNR against
/// `baseline`, then ANOVA, Tukey and BH-adjusted pairwise tests on NMI.
///
/// `reference`, `mask` and `baseline` planes repeat over the frames of a
/// multi-frame method stack. A mask plane with no voxels falls back to the
/// full plane for that slice.
pub fn slicewise_report(
    methods: &[(String, Volume)],
    reference: &Volume,
    mask: Option<&Volume>,
    baseline: Option<(&str, &Volume)>,
    opts: &ReportOptions,
) -> Result<MetricsReport> {
    if methods.is_empty() {
        return Err(Error::param("no methods to compare"));
    }
    let expected = methods[0].1.spatial();
    let frames = methods[0].1.frames();
    for (label, v) in methods {
        if v.spatial() != expected || v.frames() != frames {
            return Err(Error::shape(format!(
                "method `{label}` has extents {:?}, expected {:?}",
                v.shape(),
                methods[0].1.shape()
            )));
        }
    }
    let check = |what: &str, v: &Volume| -> Result<()> {
        if v.spatial() != expected {
            return Err(Error::shape(format!("{what} extents {:?} differ from {expected:?}", v.spatial())));
        }
        Ok(())
    };
    check("reference", reference)?;
    let ref_planes = planes(&reference.frame_volume(0))?;
    let mask_planes = match mask {
        Some(m) => {
            check("mask", m)?;
            Some(planes(&m.frame_volume(0))?)
        }
        None => None,
    };
    let base_planes = match baseline {
        Some((label, b)) => {
            check(&format!("baseline `{label}`"), b)?;
            Some(planes(b)?)
        }
        None => None,
    };
    let shape = plane_shape(reference);

    let mut rows = Vec::with_capacity(methods.len());
    for (label, v) in methods {
        let ps = planes(v)?;
        let per: Vec<(f64, Option<(f64, f64)>)> = ps
            .par_iter()
            .enumerate()
            .map(|(s, plane)| {
                let r = &ref_planes[s % ref_planes.len()];
                let m = mask_planes
                    .as_ref()
                    .map(|mp| mp[s % mp.len()].as_slice())
                    .filter(|m| m.iter().any(|&x| x > 0.5));
                let n = nmi(plane, r, opts.bins, m)?;
                let sp = match &base_planes {
                    Some(bp) => {
                        let b = &bp[s % bp.len()];
                        Some((
                            ssim(plane, b, shape, opts.window, opts.dynamic_range)?,
                            psnr(plane, b, opts.dynamic_range)?,
                        ))
                    }
                    None => None,
                };
                Ok((n, sp))
            })
            .collect::<Result<_>>()?;
        let has_base = base_planes.is_some();
        rows.push(MethodMetrics {
            label: label.clone(),
            nmi: per.iter().map(|p| p.0).collect(),
            ssim: has_base.then(|| per.iter().map(|p| p.1.unwrap().0).collect()),
            psnr: has_base.then(|| per.iter().map(|p| p.1.unwrap().1).collect()),
        });
    }
    let slices = rows[0].nmi.len();

    let stats = if rows.len() >= 2 && slices >= 2 {
        if !TUKEY_ALPHAS.contains(&opts.alpha) {
            return Err(Error::param(format!(
                "Tukey alpha {} not tabulated; supported levels: {TUKEY_ALPHAS:?}",
                opts.alpha
            )));
        }
        let groups: Vec<Vec<f64>> = rows.iter().map(|r| r.nmi.clone()).collect();
        let anova = anova_oneway(&groups)?;
        let tukey = tukey_from_anova(&anova)?;
        let raw: Vec<f64> = tukey
            .iter()
            .map(|t| pooled_t_p(&anova, t.a, t.b))
            .collect::<Result<_>>()?;
        let adj = bh_adjust(&raw)?;
        let pairs = tukey
            .iter()
            .zip(raw.iter().zip(&adj))
            .map(|(t, (&p_raw, &p_adj))| PairResult {
                a: rows[t.a].label.clone(),
                b: rows[t.b].label.clone(),
                mean_diff: t.mean_diff,
                q: t.q,
                q_crit: t.q_crit,
                tukey_significant: t.significant,
                p_raw,
                p_adj,
            })
            .collect();
        Some(StatsBlock { anova, pairs })
    } else {
        None
    };

    Ok(MetricsReport {
        slices,
        methods: rows,
        baseline: baseline.map(|(l, _)| l.to_string()),
        stats,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// Tab-separated sections, each introduced by a `#` line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# slices");
        let _ = writeln!(s, "slice\tmethod\tnmi\tssim\tpsnr");
        for m in &self.methods {
            for k in 0..self.slices {
                let _ = writeln!(
                    s,
                    "{k}\t{}\t{:.6}\t{}\t{}",
                    m.label,
                    m.nmi[k],
                    fmt_opt(m.ssim.as_ref().map(|v| v[k])),
                    fmt_opt(m.psnr.as_ref().map(|v| v[k])),
                );
            }
        }
        let _ = writeln!(s, "# summary");
        let _ = writeln!(s, "method\tnmi_mean\tnmi_sd\tssim_mean\tssim_sd\tpsnr_mean\tpsnr_sd");
        for m in &self.methods {
            let n = m.nmi_summary();
            let ss = m.ssim.as_deref().map(Summary::of);
            let ps = m.psnr.as_deref().map(Summary::of);
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
                m.label,
                n.mean,
                n.sd,
                fmt_opt(ss.as_ref().map(|x| x.mean)),
                fmt_opt(ss.as_ref().map(|x| x.sd)),
                fmt_opt(ps.as_ref().map(|x| x.mean)),
                fmt_opt(ps.as_ref().map(|x| x.sd)),
            );
        }
        if let Some(st) = &self.stats {
            let a = &st.anova;
            let _ = writeln!(s, "# anova");
            let _ = writeln!(s, "f\tdf_between\tdf_within\tp");
            let _ = writeln!(s, "{:.6}\t{}\t{}\t{:.6e}", a.f, a.df_between, a.df_within, a.p);
            let _ = writeln!(s, "# pairwise");
            let _ = writeln!(s, "method_a\tmethod_b\tmean_diff\tq\tq_crit\ttukey_significant\tp_raw\tp_adj");
            for p in &st.pairs {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{:.6}\t{:.4}\t{:.3}\t{}\t{:.6e}\t{:.6e}",
                    p.a, p.b, p.mean_diff, p.q, p.q_crit, p.tukey_significant, p.p_raw, p.p_adj
                );
            }
        }
        s
    }

    /// Aligned plain-text rendering for terminals.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} slices per method", self.slices);
        if let Some(b) = &self.baseline {
            let _ = writeln!(s, "SSIM/PSNR against `{b}`");
        }
        let _ = writeln!(s, "{:<20} {:>17} {:>17} {:>19}", "method", "NMI", "SSIM", "PSNR [dB]");
        for m in &self.methods {
            let n = m.nmi_summary();
            let pm = |v: &Option<Vec<f64>>, prec: usize| {
                v.as_deref().map(Summary::of).map_or_else(
                    || "-".to_string(),
                    |x| format!("{:.p$} ± {:.p$}", x.mean, x.sd, p = prec),
                )
            };
            let _ = writeln!(
                s,
                "{:<20} {:>17} {:>17} {:>19}",
                m.label,
                format!("{:.4} ± {:.4}", n.mean, n.sd),
                pm(&m.ssim, 4),
                pm(&m.psnr, 2)
            );
        }
        if let Some(st) = &self.stats {
            let a = &st.anova;
            let _ = writeln!(s, "\nANOVA on NMI: F({}, {}) = {:.4}, p = {:.3e}", a.df_between, a.df_within, a.f, a.p);
            let _ = writeln!(
                s,
                "{:<20} {:<20} {:>10} {:>9} {:>6} {:>11}",
                "method A", "method B", "mean diff", "q", "Tukey", "adj. p"
            );
            for p in &st.pairs {
                let _ = writeln!(
                    s,
                    "{:<20} {:<20} {:>10.4} {:>9.3} {:>6} {:>11.3e}",
                    p.a,
                    p.b,
                    p.mean_diff,
                    p.q,
                    if p.tukey_significant { "*" } else { "" },
                    p.p_adj
                );
            }
        }
        s
    }
}
