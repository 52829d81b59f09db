//! Evaluation report structures: per-volume metrics plus mean ± std
//! aggregates, with and without largest-component post-processing.

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n-1); 0 for a single volume.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub dsc: MeanStd,
    pub td: MeanStd,
    pub bd: MeanStd,
    pub fpr: MeanStd,
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let pull = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    Aggregate {
        dsc: mean_std(&pull(|r| r.dsc)),
        td: mean_std(&pull(|r| r.td)),
        bd: mean_std(&pull(|r| r.bd)),
        fpr: mean_std(&pull(|r| r.fpr)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeReport {
    pub id: String,
    pub raw: MetricsReport,
    /// After largest-connected-component post-processing.
    pub post: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub threshold: f64,
    pub bd_frac: f64,
    /// The topology metrics here are centerline-referenced stand-ins, not
    /// the challenge-server definitions.
    pub note: String,
    pub volumes: Vec<VolumeReport>,
    pub aggregate_raw: Aggregate,
    pub aggregate_post: Aggregate,
}

impl EvalReport {
    pub fn new(
        config_hash: String,
        threshold: f64,
        bd_frac: f64,
        volumes: Vec<VolumeReport>,
    ) -> Self {
        let raws: Vec<MetricsReport> = volumes.iter().map(|v| v.raw.clone()).collect();
        let posts: Vec<MetricsReport> = volumes.iter().map(|v| v.post.clone()).collect();
        EvalReport {
            config_hash,
            threshold,
            bd_frac,
            note: "td/bd are centerline-referenced stand-ins computed against the synthetic \
                   ground-truth tree, not challenge-server definitions"
                .into(),
            volumes,
            aggregate_raw: aggregate(&raws),
            aggregate_post: aggregate(&posts),
        }
    }
}
