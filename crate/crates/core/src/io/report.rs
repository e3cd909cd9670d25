//! JSON report structures. Field order is fixed and maps are ordered, so a
//! report serializes to the same bytes for the same inputs.

use std::collections::BTreeMap;

use serde::Serialize;

use super::DatasetSummary;
use crate::error::{GediError, Result};
use crate::indicators::{didi_binned, didi_classification, didi_regression, gedi, gedi_v1, group_count, Task};
use crate::kernel::{build_kernel, condition_number, rank_check, singular_values, KernelSpec, DEFAULT_RANK_RTOL};
use crate::learners::LearnerSpec;
use crate::projection::Backend;
use crate::training::{MtStep, SbrStep};

pub const SCHEMA_VERSION: u32 = 1;

/// Bin counts of the discretized audit.
pub const DIDI_BINS: [usize; 4] = [2, 3, 5, 10];

/// Native-group DIDI is reported when the attribute has at most this many
/// distinct values.
pub const NATIVE_GROUP_LIMIT: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct Indicators {
    pub gedi: f64,
    pub gedi_v1: f64,
    pub didi_binned: BTreeMap<usize, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub didi: Option<f64>,
}

/// Indicator values as percentages of a reference; `None` where the
/// reference is zero or missing.
#[derive(Debug, Clone, Serialize)]
pub struct Percentages {
    pub gedi: Option<f64>,
    pub gedi_v1: Option<f64>,
    pub didi_binned: BTreeMap<usize, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub didi: Option<f64>,
}

fn didi_value(result: Result<crate::indicators::DidiResult>) -> Result<Option<f64>> {
    match result {
        Ok(r) => Ok(Some(r.value)),
        // a constant prediction is one class everywhere: no disparity
        Err(GediError::SingleClass) => Ok(Some(0.0)),
        Err(GediError::DegenerateBinning(_)) | Err(GediError::SingleGroup) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn indicators(x: &[f64], y: &[f64], kernel: &KernelSpec, task: Task) -> Result<Indicators> {
    let didi_binned = DIDI_BINS
        .iter()
        .map(|&b| Ok((b, didi_value(didi_binned(x, y, b, task))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let groups = group_count(x);
    let didi = if (2..=NATIVE_GROUP_LIMIT).contains(&groups) {
        didi_value(match task {
            Task::Regression => didi_regression(x, y),
            Task::Classification => didi_classification(x, y),
        })?
    } else {
        None
    };
    Ok(Indicators {
        gedi: gedi(x, y, kernel)?.value,
        gedi_v1: gedi_v1(x, y)?,
        didi_binned,
        didi,
    })
}

fn percent(value: Option<f64>, reference: Option<f64>) -> Option<f64> {
    match (value, reference) {
        (Some(v), Some(r)) if r != 0.0 => Some(100.0 * (v / r)),
        _ => None,
    }
}

impl Indicators {
    pub fn percent_of(&self, reference: &Indicators) -> Percentages {
        Percentages {
            gedi: percent(Some(self.gedi), Some(reference.gedi)),
            gedi_v1: percent(Some(self.gedi_v1), Some(reference.gedi_v1)),
            didi_binned: self
                .didi_binned
                .iter()
                .map(|(b, v)| (*b, percent(*v, reference.didi_binned.get(b).copied().flatten())))
                .collect(),
            didi: percent(self.didi, reference.didi),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelDiagnostics {
    pub rank: usize,
    pub condition_number: f64,
    pub singular_values: Vec<f64>,
}

pub fn kernel_diagnostics(x: &[f64], kernel: &KernelSpec) -> Result<KernelDiagnostics> {
    let km = build_kernel(x, kernel)?;
    Ok(KernelDiagnostics {
        rank: rank_check(&km, DEFAULT_RANK_RTOL)?,
        condition_number: condition_number(&km),
        singular_values: singular_values(&km),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub schema: u32,
    pub command: &'static str,
    pub dataset: DatasetSummary,
    pub kernel: String,
    /// Column the percentages are relative to.
    pub reference: String,
    pub indicators: Indicators,
    pub percentages: Percentages,
    pub diagnostics: KernelDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessReport {
    pub schema: u32,
    pub command: &'static str,
    pub dataset: DatasetSummary,
    pub kernel: String,
    /// Constraint as given on the command line.
    pub requested: String,
    pub relative: bool,
    /// Constraint with absolute bounds, as enforced.
    pub constraint: String,
    pub objective: f64,
    pub violation: f64,
    pub satisfied: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub backend: Backend,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamming: Option<usize>,
    pub before: Indicators,
    pub after: Indicators,
    pub percentages: Percentages,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitMetrics {
    pub rows: usize,
    /// R^2 for regression, accuracy for classification.
    pub metric: f64,
    pub indicators: Indicators,
    /// Relative to the indicators of the split's original targets.
    pub percentages: Percentages,
    /// Classification only: GeDI of the predicted probabilities, the quantity
    /// the training constraint acts on. Thresholding can raise it again.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability_gedi: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Trace {
    MovingTargets(Vec<MtStep>),
    Sbr(Vec<SbrStep>),
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub constraint: String,
    pub train: SplitMetrics,
    pub validation: SplitMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    pub trace: Trace,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub train_metric: f64,
    pub validation_metric: f64,
    pub train_gedi: f64,
    pub validation_gedi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub schema: u32,
    pub command: &'static str,
    pub dataset: DatasetSummary,
    pub method: String,
    pub learner: LearnerSpec,
    pub kernel: String,
    pub requested: String,
    pub relative: bool,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    /// Means over folds.
    pub summary: TrainSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub schema: u32,
    pub command: &'static str,
    pub rows: usize,
    pub seed: u64,
    pub output: String,
    pub indicators: Indicators,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBody {
    pub kind: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub schema: u32,
    pub error: ErrorBody,
}

impl ErrorReport {
    pub fn new(err: &GediError) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            error: ErrorBody {
                kind: err.kind(),
                message: err.to_string(),
            },
        }
    }
}
