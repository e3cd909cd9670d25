//! Command-line surface: `audit`, `preprocess`, `train` and `synth`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::constraints::{ConstraintMode, ConstraintSpec};
use crate::error::{GediError, Result};
use crate::indicators::{gedi, Task};
use crate::io::report::{
    indicators, kernel_diagnostics, AuditReport, FoldReport, PreprocessReport, SplitMetrics, SynthReport,
    Trace, TrainReport, TrainSummary, SCHEMA_VERSION,
};
use crate::io::{kfold_split, load_dataset, synth_fig2, Dataset, Schema};
use crate::kernel::KernelSpec;
use crate::learners::{LearnerModel, LearnerSpec};
use crate::projection::{Backend, Projector};
use crate::training::{moving_targets, sbr_train, score, MtConfig, SbrConfig};

#[derive(Debug, Parser)]
#[command(name = "gedi", version, about = "Audit and enforce generalized disparate impact bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report indicators of a dataset's target against its protected attribute.
    Audit(AuditArgs),
    /// Adjust targets minimally so that they satisfy a constraint.
    Preprocess(PreprocessArgs),
    /// Cross-validate a learner trained under a constraint.
    Train(TrainArgs),
    /// Write the synthetic `4 sin(x) + x^2 + noise` dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub protected: String,
    #[arg(long)]
    pub target: String,
    /// `reg` or `clf`; inferred from the target when omitted.
    #[arg(long)]
    pub task: Option<Task>,
    /// Do not use the protected attribute as a feature.
    #[arg(long)]
    pub drop_protected: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let schema = Schema {
            protected: self.protected.clone(),
            target: self.target.clone(),
            task: self.task,
            drop_protected: self.drop_protected,
        };
        let ds = load_dataset(&self.data, &schema)?;
        info!("loaded {} rows ({} dropped) from {}", ds.len(), ds.dropped_rows, self.data.display());
        Ok(ds)
    }
}

#[derive(Debug, Args)]
pub struct ConstraintArgs {
    /// `poly:K`, `fourier:K`.
    #[arg(long, default_value = "poly:1")]
    pub kernel: KernelSpec,
    /// `coarse:q`, `fine:q1,..,qk`, `exclusive:q1`; the bound may be left
    /// out and given with `--threshold`.
    #[arg(long)]
    pub constraint: String,
    /// Read bounds as fractions of the original linear indicator.
    #[arg(long)]
    pub relative: bool,
    /// Bound for a constraint given without one; for `fine` it bounds the
    /// linear coefficient and the higher ones are held at zero.
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl ConstraintArgs {
    fn spec(&self) -> Result<ConstraintSpec> {
        let mode = parse_constraint(&self.constraint, self.threshold, self.kernel.order)?;
        let cs = ConstraintSpec::new(mode, self.kernel.clone());
        let cs = if self.relative { cs.relative() } else { cs };
        cs.validate()?;
        Ok(cs)
    }
}

/// Accepts the full grammar or a bare mode name plus `threshold`.
pub fn parse_constraint(text: &str, threshold: Option<f64>, order: usize) -> Result<ConstraintMode> {
    let bare = !text.contains(':');
    match (bare, threshold) {
        (false, None) => text.parse(),
        (false, Some(_)) => Err(GediError::InvalidSpec(
            "give the bound either in --constraint or with --threshold, not both".into(),
        )),
        (true, None) => Err(GediError::InvalidSpec(format!("constraint `{text}` needs a bound (--threshold)"))),
        (true, Some(q)) => {
            let placeholder: ConstraintMode = match text.trim() {
                "coarse" => ConstraintMode::Coarse(0.0),
                "fine" => ConstraintMode::Fine(vec![0.0; order]),
                "exclusive" => ConstraintMode::Exclusive(0.0),
                other => return Err(GediError::InvalidSpec(format!("unknown constraint `{other}`"))),
            };
            Ok(placeholder.with_bound(q, order))
        }
    }
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "poly:1")]
    pub kernel: KernelSpec,
    /// Column the percentages are computed against; defaults to the target.
    #[arg(long)]
    pub reference_target: Option<String>,
    /// Directory for `audit.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Auto,
    ActiveSet,
    Admm,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Auto => Backend::Auto,
            BackendArg::ActiveSet => Backend::ActiveSet,
            BackendArg::Admm => Backend::Admm,
        }
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    #[arg(long, value_enum, default_value = "auto")]
    pub backend: BackendArg,
    /// Directory for `adjusted.csv` and `preprocess.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Include wall-clock times (makes reports differ between runs).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mt,
    Sbr,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    #[arg(long, value_enum, default_value = "mt")]
    pub method: Method,
    /// `ridge:<l2>`, `logistic:<lr>,<epochs>`, `gb:<n_trees>,<lr>`.
    #[arg(long, default_value = "ridge:1e-6")]
    pub learner: LearnerSpec,
    /// Expand every feature to its powers up to this degree.
    #[arg(long, default_value_t = 1)]
    pub feature_degree: usize,
    /// Moving-targets iterations.
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// SBR epochs.
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// SBR model learning rate.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// SBR multiplier step.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Directory for `train.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, report: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

/// Runs a command and returns its report as pretty JSON.
pub fn run(cli: &Cli) -> Result<String> {
    let text = match &cli.command {
        Command::Audit(a) => serde_json::to_string_pretty(&audit(a)?)?,
        Command::Preprocess(a) => serde_json::to_string_pretty(&preprocess(a)?)?,
        Command::Train(a) => serde_json::to_string_pretty(&train(a)?)?,
        Command::Synth(a) => serde_json::to_string_pretty(&synth(a)?)?,
    };
    Ok(text)
}

pub fn audit(args: &AuditArgs) -> Result<AuditReport> {
    let ds = args.data.load()?;
    let ind = indicators(&ds.protected, &ds.target, &args.kernel, ds.task)?;
    let (reference_name, reference) = match &args.reference_target {
        None => (ds.target_name.clone(), ind.clone()),
        Some(col) => {
            let schema = Schema {
                protected: ds.protected_name.clone(),
                target: col.clone(),
                task: Some(ds.task),
                drop_protected: args.data.drop_protected,
            };
            let other = load_dataset(&args.data.data, &schema)?;
            if other.len() != ds.len() {
                return Err(GediError::LengthMismatch {
                    expected: ds.len(),
                    found: other.len(),
                });
            }
            (col.clone(), indicators(&other.protected, &other.target, &args.kernel, ds.task)?)
        }
    };
    let report = AuditReport {
        schema: SCHEMA_VERSION,
        command: "audit",
        dataset: ds.summary(),
        kernel: args.kernel.to_string(),
        reference: reference_name,
        percentages: ind.percent_of(&reference),
        indicators: ind,
        diagnostics: kernel_diagnostics(&ds.protected, &args.kernel)?,
    };
    if let Some(dir) = &args.out {
        write_json(dir, "audit.json", &report)?;
    }
    Ok(report)
}

pub fn preprocess(args: &PreprocessArgs) -> Result<PreprocessReport> {
    let start = Instant::now();
    let ds = args.data.load()?;
    let requested = args.constraint.spec()?;
    let cs = requested.resolve(&ds.protected, &ds.target)?;
    let projector = Projector::new(&ds.protected, &cs)?.with_backend(args.backend.into());
    let result = match ds.task {
        Task::Regression => projector.project(&ds.target)?,
        Task::Classification => projector.project_binary(&ds.target)?,
    };
    let kernel = &cs.kernel;
    let before = indicators(&ds.protected, &ds.target, kernel, ds.task)?;
    let after = indicators(&ds.protected, &result.z, kernel, ds.task)?;

    let output = match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("adjusted.csv");
            let column = format!("{}_adjusted", ds.target_name);
            ds.save(&path, &[(column.as_str(), &result.z)])?;
            Some(path.display().to_string())
        }
        None => None,
    };
    let report = PreprocessReport {
        schema: SCHEMA_VERSION,
        command: "preprocess",
        dataset: ds.summary(),
        kernel: kernel.to_string(),
        requested: requested.mode.to_string(),
        relative: requested.threshold_is_relative,
        constraint: cs.mode.to_string(),
        objective: result.objective,
        violation: result.violation.max(),
        satisfied: result.satisfied,
        iterations: result.iterations,
        kkt_residual: result.kkt_residual,
        backend: result.backend,
        hamming: result.hamming,
        percentages: after.percent_of(&before),
        before,
        after,
        output,
        wall_time_ms: args.timings.then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    if let Some(dir) = &args.out {
        write_json(dir, "preprocess.json", &report)?;
    }
    Ok(report)
}

fn split_metrics(model: &LearnerModel, ds: &Dataset, kernel: &KernelSpec) -> Result<SplitMetrics> {
    let pred = model.predict(&ds.features)?;
    // classification indicators are taken on hard labels, like the targets
    let (audited, probability_gedi) = match ds.task {
        Task::Regression => (pred.clone(), None),
        Task::Classification => (
            model.predict_labels(&ds.features)?,
            Some(gedi(&ds.protected, &pred, kernel)?.value),
        ),
    };
    let ind = indicators(&ds.protected, &audited, kernel, ds.task)?;
    let original = indicators(&ds.protected, &ds.target, kernel, ds.task)?;
    Ok(SplitMetrics {
        rows: ds.len(),
        metric: score(ds.task, &ds.target, &pred),
        percentages: ind.percent_of(&original),
        indicators: ind,
        probability_gedi,
    })
}

fn train_fold(args: &TrainArgs, ds: &Dataset, fold: usize, train_idx: &[usize], valid_idx: &[usize]) -> Result<FoldReport> {
    let start = Instant::now();
    let train = ds.subset(train_idx);
    let valid = ds.subset(valid_idx);
    let cs = args.constraint.spec()?;
    let learner = args.learner.clone().with_feature_degree(args.feature_degree);
    let (model, trace, converged, resolved) = match args.method {
        Method::Mt => {
            let mut mt = MtConfig::new(learner, ds.task);
            mt.iterations = args.iterations;
            let r = moving_targets(&train.features, &train.protected, &train.target, &cs, &mt)?;
            (r.model, Trace::MovingTargets(r.trace), None, r.constraint)
        }
        Method::Sbr => {
            let mut sc = SbrConfig::new(learner, ds.task);
            sc.epochs = args.epochs;
            sc.lr = args.lr;
            sc.rho = args.rho;
            let r = sbr_train(&train.features, &train.protected, &train.target, &cs, &sc)?;
            (r.model, Trace::Sbr(r.trace), Some(r.converged), r.constraint)
        }
    };
    info!("fold {fold} trained");
    Ok(FoldReport {
        fold,
        constraint: resolved.mode.to_string(),
        train: split_metrics(&model, &train, &cs.kernel)?,
        validation: split_metrics(&model, &valid, &cs.kernel)?,
        converged,
        trace,
        wall_time_ms: args.timings.then(|| start.elapsed().as_secs_f64() * 1e3),
    })
}

pub fn train(args: &TrainArgs) -> Result<TrainReport> {
    let start = Instant::now();
    let ds = args.data.load()?;
    let cs = args.constraint.spec()?;
    args.learner.clone().with_feature_degree(args.feature_degree).validate()?;
    let splits = kfold_split(ds.len(), args.folds, args.seed)?;
    let jobs = args.jobs.max(1);

    let mut results: Vec<Option<Result<FoldReport>>> = (0..splits.len()).map(|_| None).collect();
    for (batch_idx, batch) in splits.chunks(jobs).enumerate() {
        let done: Vec<Result<FoldReport>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .enumerate()
                .map(|(j, (tr, va))| {
                    let ds = &ds;
                    let fold = batch_idx * jobs + j;
                    scope.spawn(move || train_fold(args, ds, fold, tr, va))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
        });
        for (j, r) in done.into_iter().enumerate() {
            results[batch_idx * jobs + j] = Some(r);
        }
    }
    let folds: Vec<FoldReport> = results.into_iter().map(|r| r.expect("every fold ran")).collect::<Result<_>>()?;

    let mean = |f: &dyn Fn(&FoldReport) -> f64| folds.iter().map(f).sum::<f64>() / folds.len() as f64;
    let summary = TrainSummary {
        train_metric: mean(&|f| f.train.metric),
        validation_metric: mean(&|f| f.validation.metric),
        train_gedi: mean(&|f| f.train.indicators.gedi),
        validation_gedi: mean(&|f| f.validation.indicators.gedi),
    };
    let report = TrainReport {
        schema: SCHEMA_VERSION,
        command: "train",
        dataset: ds.summary(),
        method: format!("{:?}", args.method).to_lowercase(),
        learner: args.learner.clone().with_feature_degree(args.feature_degree),
        kernel: cs.kernel.to_string(),
        requested: cs.mode.to_string(),
        relative: cs.threshold_is_relative,
        seed: args.seed,
        folds,
        summary,
        wall_time_ms: args.timings.then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    if let Some(dir) = &args.out {
        write_json(dir, "train.json", &report)?;
    }
    Ok(report)
}

pub fn synth(args: &SynthArgs) -> Result<SynthReport> {
    let ds = synth_fig2(args.rows, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    ds.save(&args.out, &[])?;
    Ok(SynthReport {
        schema: SCHEMA_VERSION,
        command: "synth",
        rows: ds.len(),
        seed: args.seed,
        output: args.out.display().to_string(),
        indicators: indicators(&ds.protected, &ds.target, &KernelSpec::polynomial(2), ds.task)?,
    })
}
