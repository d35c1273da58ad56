//! One-way ANOVA, Tukey HSD and Benjamini-Hochberg adjustment.

use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ss_between: f64,
    pub ss_within: f64,
    /// Within-group mean square (pooled variance).
    pub ms_within: f64,
    pub means: Vec<f64>,
    pub sizes: Vec<usize>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::param(format!("need at least 2 groups, got {}", groups.len())));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(Error::param(format!("group {i} has {} samples, need at least 2", g.len())));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::param("non-finite sample"));
    }
    Ok(())
}

/// One-way ANOVA with the p-value from the F survival function.
///
/// When every group is constant, identical means give `F = 0, p = 1` and
/// differing means give `F = inf, p = 0`.
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<Anova> {
    check_groups(groups)?;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let n: usize = sizes.iter().sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let ss_between: f64 = means
        .iter()
        .zip(&sizes)
        .map(|(m, &k)| k as f64 * (m - grand).powi(2))
        .sum();
    let ss_within: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let df_between = groups.len() - 1;
    let df_within = n - groups.len();
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;

    let (f, p) = if ms_between == 0.0 {
        (0.0, 1.0)
    } else if ms_within == 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = ms_between / ms_within;
        let dist = FisherSnedecor::new(df_between as f64, df_within as f64)
            .map_err(|e| Error::Numeric(format!("F distribution: {e}")))?;
        (f, dist.sf(f))
    };
    Ok(Anova {
        f,
        p,
        df_between,
        df_within,
        ss_between,
        ss_within,
        ms_within,
        means,
        sizes,
    })
}

/// Two-sided p-value of the pooled t statistic for groups `i` and `j`,
/// using the ANOVA's pooled variance and within-group degrees of freedom.
pub fn pooled_t_p(anova: &Anova, i: usize, j: usize) -> Result<f64> {
    let diff = anova.means[j] - anova.means[i];
    let se = (anova.ms_within * (1.0 / anova.sizes[i] as f64 + 1.0 / anova.sizes[j] as f64)).sqrt();
    if se == 0.0 {
        return Ok(if diff == 0.0 { 1.0 } else { 0.0 });
    }
    let t = StudentsT::new(0.0, 1.0, anova.df_within as f64)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    Ok((2.0 * t.sf((diff / se).abs())).min(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TukeyPair {
    pub a: usize,
    pub b: usize,
    /// `mean(b) - mean(a)`.
    pub mean_diff: f64,
    pub q: f64,
    pub q_crit: f64,
    pub significant: bool,
}

/// Significance levels with an embedded critical-value table.
pub const TUKEY_ALPHAS: [f64; 1] = [0.05];

/// Degrees of freedom rows of [`Q_05`]; `usize::MAX` stands for infinity.
const Q_DF: [usize; 26] = [
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 24, 30, 40, 60, 120, usize::MAX,
];

/// Upper 5% points of the studentized range, k = 2..=10 groups per row.
#[rustfmt::skip]
const Q_05: [[f64; 9]; 26] = [
    [17.969, 26.976, 32.819, 37.082, 40.408, 43.119, 45.397, 47.357, 49.071],
    [6.085, 8.331, 9.798, 10.881, 11.734, 12.435, 13.027, 13.539, 13.988],
    [4.501, 5.910, 6.825, 7.502, 8.037, 8.478, 8.852, 9.177, 9.462],
    [3.926, 5.040, 5.757, 6.287, 6.706, 7.053, 7.347, 7.602, 7.826],
    [3.635, 4.602, 5.218, 5.673, 6.033, 6.330, 6.582, 6.801, 6.995],
    [3.460, 4.339, 4.896, 5.305, 5.628, 5.895, 6.122, 6.319, 6.493],
    [3.344, 4.165, 4.681, 5.060, 5.359, 5.606, 5.815, 5.997, 6.158],
    [3.261, 4.041, 4.529, 4.886, 5.167, 5.399, 5.596, 5.767, 5.918],
    [3.199, 3.948, 4.415, 4.755, 5.024, 5.244, 5.432, 5.595, 5.738],
    [3.151, 3.877, 4.327, 4.654, 4.912, 5.124, 5.304, 5.460, 5.598],
    [3.113, 3.820, 4.256, 4.574, 4.823, 5.028, 5.202, 5.353, 5.486],
    [3.081, 3.773, 4.199, 4.508, 4.750, 4.950, 5.119, 5.265, 5.395],
    [3.055, 3.734, 4.151, 4.453, 4.690, 4.884, 5.049, 5.192, 5.318],
    [3.033, 3.701, 4.111, 4.407, 4.639, 4.829, 4.990, 5.130, 5.253],
    [3.014, 3.673, 4.076, 4.367, 4.595, 4.782, 4.940, 5.077, 5.198],
    [2.998, 3.649, 4.046, 4.333, 4.557, 4.741, 4.896, 5.031, 5.150],
    [2.984, 3.628, 4.020, 4.303, 4.524, 4.705, 4.858, 4.991, 5.108],
    [2.971, 3.609, 3.997, 4.276, 4.494, 4.673, 4.824, 4.955, 5.071],
    [2.960, 3.593, 3.977, 4.253, 4.468, 4.645, 4.794, 4.924, 5.037],
    [2.950, 3.578, 3.958, 4.232, 4.445, 4.620, 4.768, 4.895, 5.008],
    [2.919, 3.532, 3.901, 4.166, 4.373, 4.541, 4.684, 4.807, 4.915],
    [2.888, 3.486, 3.845, 4.102, 4.301, 4.464, 4.601, 4.720, 4.824],
    [2.858, 3.442, 3.791, 4.039, 4.232, 4.388, 4.521, 4.634, 4.735],
    [2.829, 3.399, 3.737, 3.977, 4.163, 4.314, 4.441, 4.550, 4.646],
    [2.800, 3.356, 3.685, 3.917, 4.096, 4.241, 4.363, 4.468, 4.560],
    [2.772, 3.314, 3.633, 3.858, 4.030, 4.170, 4.286, 4.387, 4.474],
];

/// Critical studentized range at 5% for `k` groups and `df` within-group
/// degrees of freedom. Between tabulated rows the lower df is used, which
/// gives the larger (conservative) critical value.
pub fn tukey_critical(k: usize, df: usize) -> Result<f64> {
    if !(2..=10).contains(&k) {
        return Err(Error::param(format!("Tukey table covers 2..=10 groups, got {k}")));
    }
    if df == 0 {
        return Err(Error::param("Tukey needs at least one within-group degree of freedom"));
    }
    let row = Q_DF.iter().rposition(|&d| d <= df).expect("df >= 1 matches the first row");
    Ok(Q_05[row][k - 2])
}

/// Tukey-Kramer pairwise comparisons at level `alpha`.
pub fn tukey_hsd(groups: &[Vec<f64>], alpha: f64) -> Result<Vec<TukeyPair>> {
    if !TUKEY_ALPHAS.contains(&alpha) {
        return Err(Error::param(format!(
            "Tukey alpha {alpha} not tabulated; supported levels: {TUKEY_ALPHAS:?}"
        )));
    }
    let anova = anova_oneway(groups)?;
    tukey_from_anova(&anova)
}

pub(crate) fn tukey_from_anova(anova: &Anova) -> Result<Vec<TukeyPair>> {
    let k = anova.means.len();
    let q_crit = tukey_critical(k, anova.df_within)?;
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let mean_diff = anova.means[b] - anova.means[a];
            let se = (anova.ms_within / 2.0 * (1.0 / anova.sizes[a] as f64 + 1.0 / anova.sizes[b] as f64)).sqrt();
            let q = if mean_diff == 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                mean_diff.abs() / se
            };
            out.push(TukeyPair {
                a,
                b,
                mean_diff,
                q,
                q_crit,
                significant: q > q_crit,
            });
        }
    }
    Ok(out)
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_adjust(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::param(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvals[i].total_cmp(&pvals[j]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0_f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(m as f64 * pvals[i] / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}
