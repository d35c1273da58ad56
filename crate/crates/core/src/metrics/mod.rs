//! Similarity metrics and the statistics used to compare correction methods.

mod report;
mod similarity;
mod stats;

pub use report::{slicewise_report, MethodMetrics, MetricsReport, PairResult, ReportOptions, StatsBlock, Summary};
pub use similarity::{nmi, psnr, ssim, SsimWindow, PSNR_CAP_DB};
pub use stats::{anova_oneway, bh_adjust, pooled_t_p, tukey_critical, tukey_hsd, Anova, TukeyPair, TUKEY_ALPHAS};
