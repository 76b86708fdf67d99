//! The three evaluation axes: prediction quality (accuracy, F1 variants,
//! AUPRC, MSE/MAE), resource complexity (parameters, wall-clock time, peak
//! memory, input volume), and robustness under corruption (performance-
//! imperfection curves with relative/effective robustness scores), plus
//! min-max aggregation of results across models and tasks.

use crate::error::{Error, Result};
use crate::perturb::NoisyTestGrid;
use crate::synthdata::{Label, MultimodalSample, TaskKind};
use crate::training::{argmax, Model};
use serde::{Deserialize, Serialize};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Performance
// ---------------------------------------------------------------------------

/// Prediction-quality metrics for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum PerformanceReport {
    Classification {
        accuracy: f64,
        micro_f1: f64,
        macro_f1: f64,
        auprc: f64,
    },
    Regression {
        mse: f64,
        mae: f64,
    },
}

/// Which scalar a robustness curve tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSelector {
    Accuracy,
    MicroF1,
    MacroF1,
    Auprc,
    Mse,
    Mae,
}

impl MetricSelector {
    /// The natural selector for a task kind.
    pub fn default_for(task: &TaskKind) -> MetricSelector {
        match task {
            TaskKind::Classification { .. } => MetricSelector::Accuracy,
            TaskKind::Regression { .. } => MetricSelector::Mse,
        }
    }
}

impl PerformanceReport {
    /// Extract one metric; errors when the report is for the other task
    /// family.
    pub fn select(&self, metric: MetricSelector) -> Result<f64> {
        use MetricSelector::*;
        match (self, metric) {
            (PerformanceReport::Classification { accuracy, .. }, Accuracy) => Ok(*accuracy),
            (PerformanceReport::Classification { micro_f1, .. }, MicroF1) => Ok(*micro_f1),
            (PerformanceReport::Classification { macro_f1, .. }, MacroF1) => Ok(*macro_f1),
            (PerformanceReport::Classification { auprc, .. }, Auprc) => Ok(*auprc),
            (PerformanceReport::Regression { mse, .. }, Mse) => Ok(*mse),
            (PerformanceReport::Regression { mae, .. }, Mae) => Ok(*mae),
            _ => Err(Error::config(
                "metric",
                format!("{metric:?} is not defined for this report"),
            )),
        }
    }
}

/// Score predictions against ground truth. Classification expects one score
/// per class per sample (argmax decides the hard prediction); regression
/// expects predicted target vectors.
pub fn compute_performance(
    predictions: &[Vec<f64>],
    labels: &[Label],
    task: &TaskKind,
) -> Result<PerformanceReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::dim(
            "compute_performance",
            format!(
                "{} predictions vs {} labels (need equal, nonzero)",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    if predictions
        .iter()
        .any(|p| p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::non_finite("predictions"));
    }
    match task {
        TaskKind::Classification { classes } => {
            let k = *classes;
            if predictions.iter().any(|p| p.len() != k) {
                return Err(Error::dim(
                    "compute_performance",
                    format!("every score vector must have {k} entries"),
                ));
            }
            let truth: Vec<usize> = labels.iter().map(|l| l.class()).collect();
            let hard: Vec<usize> = predictions.iter().map(|p| argmax(p)).collect();
            let n = truth.len() as f64;
            let accuracy =
                truth.iter().zip(&hard).filter(|(t, h)| t == h).count() as f64 / n;

            // per-class confusion counts
            let mut tp = vec![0.0; k];
            let mut fp = vec![0.0; k];
            let mut f_neg = vec![0.0; k];
            for (&t, &h) in truth.iter().zip(&hard) {
                if t == h {
                    tp[t] += 1.0;
                } else {
                    fp[h] += 1.0;
                    f_neg[t] += 1.0;
                }
            }
            // Binary tasks pool only the positive class; with three or
            // more classes the pooled counts collapse to accuracy.
            let micro_f1 = if k == 2 {
                f1(tp[1], fp[1], f_neg[1])
            } else {
                let (t, p, q) = (tp.iter().sum(), fp.iter().sum(), f_neg.iter().sum());
                f1(t, p, q)
            };
            let macro_f1 =
                (0..k).map(|c| f1(tp[c], fp[c], f_neg[c])).sum::<f64>() / k as f64;
            let auprc = macro_auprc(predictions, &truth, k);
            Ok(PerformanceReport::Classification {
                accuracy,
                micro_f1,
                macro_f1,
                auprc,
            })
        }
        TaskKind::Regression { dim } => {
            if predictions.iter().any(|p| p.len() != *dim) {
                return Err(Error::dim(
                    "compute_performance",
                    format!("every prediction must have {dim} entries"),
                ));
            }
            let mut se = 0.0;
            let mut ae = 0.0;
            for (pred, label) in predictions.iter().zip(labels) {
                for (p, y) in pred.iter().zip(label.real()) {
                    se += (p - y).powi(2);
                    ae += (p - y).abs();
                }
            }
            let count = (predictions.len() * dim) as f64;
            Ok(PerformanceReport::Regression {
                mse: se / count,
                mae: ae / count,
            })
        }
    }
}

/// F1 from pooled counts; all-zero counts give 0 by convention.
fn f1(tp: f64, fp: f64, f_neg: f64) -> f64 {
    let denom = 2.0 * tp + fp + f_neg;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

/// One-vs-rest average precision, averaged over the classes that actually
/// occur in the labels (a class with no positives has no defined curve).
fn macro_auprc(predictions: &[Vec<f64>], truth: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..k {
        let positives = truth.iter().filter(|&&t| t == c).count();
        if positives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..truth.len()).collect();
        order.sort_by(|&a, &b| predictions[b][c].total_cmp(&predictions[a][c]));
        let mut ap = 0.0;
        let mut tp = 0.0;
        let mut prev_recall = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if truth[i] == c {
                tp += 1.0;
            }
            let recall = tp / positives as f64;
            let precision = tp / (rank + 1) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        total += ap;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Class scores for every sample in a slice, via the model's forward pass.
pub fn predict_all(model: &Model, samples: &[MultimodalSample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| model.predict(s)).collect()
}

/// Convenience: run the model over samples and score the predictions.
pub fn evaluate_model(model: &Model, samples: &[MultimodalSample]) -> Result<PerformanceReport> {
    let predictions = predict_all(model, samples)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label.clone()).collect();
    compute_performance(&predictions, &labels, model.bundle.task())
}

// ---------------------------------------------------------------------------
// Complexity
// ---------------------------------------------------------------------------

/// Resource accounting for one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Every parameter touched while training, auxiliary machinery included.
    pub train_param_count: usize,
    /// Parameters the persistent inference path keeps.
    pub inference_param_count: usize,
    pub train_time_s: f64,
    pub inference_time_s: f64,
    pub peak_memory_bytes: u64,
    /// Serialized size of the test inputs: 32 bits per stored value.
    pub input_bits: u64,
}

impl ComplexityReport {
    pub fn validate(&self) -> Result<()> {
        if self.inference_param_count > self.train_param_count {
            return Err(Error::config(
                "param counts",
                "inference parameters cannot exceed training parameters",
            ));
        }
        if self.train_time_s < 0.0 || self.inference_time_s < 0.0 {
            return Err(Error::config("times", "must be non-negative"));
        }
        Ok(())
    }
}

/// Measure a trained model: inference wall-clock over the whole test set,
/// parameter counts under the persistent-module rule, current peak process
/// memory, and the bit volume of the test inputs. Training time is passed
/// in by whoever ran the training loop.
pub fn profile_complexity(
    model: &Model,
    train_time_s: f64,
    testdata: &[MultimodalSample],
) -> Result<ComplexityReport> {
    if train_time_s < 0.0 {
        return Err(Error::config("train_time_s", "must be non-negative"));
    }
    let start = Instant::now();
    for sample in testdata {
        model.predict(sample)?;
    }
    let inference_time_s = start.elapsed().as_secs_f64();
    let entries: u64 = testdata
        .iter()
        .flat_map(|s| s.modalities.iter())
        .map(|x| x.len() as u64)
        .sum();
    let report = ComplexityReport {
        train_param_count: model.total_param_count(),
        inference_param_count: model.inference_param_count(),
        train_time_s,
        inference_time_s,
        peak_memory_bytes: peak_memory_bytes(),
        input_bits: entries * 32,
    };
    report.validate()?;
    Ok(report)
}

/// Peak resident set (VmHWM) of this process, or 0 when /proc is missing.
pub fn peak_memory_bytes() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .unwrap_or(0);
            return kb * 1024;
        }
    }
    0
}

/// Training-time cost score against the best unimodal reference:
/// `−log10(t_model / t_unimodal)`. Positive means cheaper than the
/// reference, negative means costlier.
pub fn aggregate_complexity(train_time_model: f64, train_time_best_unimodal: f64) -> Result<f64> {
    if train_time_model <= 0.0 || train_time_best_unimodal <= 0.0 {
        return Err(Error::config("times", "must be positive"));
    }
    Ok(-(train_time_model / train_time_best_unimodal).log10())
}

// ---------------------------------------------------------------------------
// Robustness
// ---------------------------------------------------------------------------

/// One performance-imperfection curve: metric value at each corruption
/// level for one grid partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub partition: String,
    /// `(σ, value)` points, σ strictly ascending from 0.
    pub points: Vec<(f64, f64)>,
}

impl RobustnessCurve {
    pub fn new(partition: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        let curve = RobustnessCurve {
            partition: partition.into(),
            points,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::config("points", "curve cannot be empty"));
        }
        if self.points[0].0 != 0.0 {
            return Err(Error::config("points", "first σ must be 0.0"));
        }
        if self.points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config("points", "σ must be strictly ascending"));
        }
        Ok(())
    }

    /// The metric on clean data (the σ = 0 point).
    pub fn clean_value(&self) -> f64 {
        self.points[0].1
    }

    /// `sigma,value` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,value\n");
        for (sigma, value) in &self.points {
            out.push_str(&format!("{sigma},{value}\n"));
        }
        out
    }
}

/// Relative and effective robustness against the late-fusion baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessScores {
    pub tau: f64,
    pub rho: f64,
}

/// One curve per grid partition: the model is evaluated on every
/// (partition, level) cell and the chosen metric recorded. The σ = 0 point
/// is computed on the clean data itself.
pub fn robustness_curves(
    model: &Model,
    grid: &NoisyTestGrid,
    metric: MetricSelector,
) -> Result<Vec<RobustnessCurve>> {
    if grid.clean_samples().is_empty() {
        return Err(Error::dim("robustness_curves", "grid has no test samples"));
    }
    let mut curves = Vec::with_capacity(grid.num_partitions());
    for (pi, part) in grid.partitions().iter().enumerate() {
        let mut points = Vec::with_capacity(grid.levels().len());
        for (li, &sigma) in grid.levels().iter().enumerate() {
            let samples = grid.corrupted(pi, li)?;
            let report = evaluate_model(model, &samples)?;
            points.push((sigma, report.select(metric)?));
        }
        curves.push(RobustnessCurve::new(part.name.clone(), points)?);
    }
    Ok(curves)
}

fn check_shared_grid(a: &RobustnessCurve, b: &RobustnessCurve) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if a.points.len() != b.points.len()
        || a.points
            .iter()
            .zip(&b.points)
            .any(|(x, y)| x.0 != y.0)
    {
        return Err(Error::dim(
            "robustness",
            "curves must share the same σ grid",
        ));
    }
    Ok(())
}

/// Trapezoidal integral of `f(σ) − g(σ)` over the shared σ grid.
fn trapezoid_diff(f: &RobustnessCurve, g: &RobustnessCurve) -> f64 {
    let mut total = 0.0;
    for i in 0..f.points.len() - 1 {
        let h = f.points[i + 1].0 - f.points[i].0;
        let d0 = f.points[i].1 - g.points[i].1;
        let d1 = f.points[i + 1].1 - g.points[i + 1].1;
        total += h * (d0 + d1) / 2.0;
    }
    total
}

/// Relative robustness τ: the signed area between the model's curve and
/// the baseline's.
pub fn relative_robustness(curve_f: &RobustnessCurve, curve_lf: &RobustnessCurve) -> Result<f64> {
    check_shared_grid(curve_f, curve_lf)?;
    Ok(trapezoid_diff(curve_f, curve_lf))
}

/// The baseline curve shifted so its clean point matches `clean_acc_f`,
/// clipped into [0, 1].
pub fn fit_baseline_trend(clean_acc_f: f64, curve_lf: &RobustnessCurve) -> Result<RobustnessCurve> {
    curve_lf.validate()?;
    let shift = clean_acc_f - curve_lf.clean_value();
    let points = curve_lf
        .points
        .iter()
        .map(|&(sigma, v)| (sigma, (v + shift).clamp(0.0, 1.0)))
        .collect();
    RobustnessCurve::new(curve_lf.partition.clone(), points)
}

/// Effective robustness ρ: the area between the model's curve and the
/// shifted baseline, so a model that merely starts higher scores 0.
pub fn effective_robustness(curve_f: &RobustnessCurve, curve_lf: &RobustnessCurve) -> Result<f64> {
    check_shared_grid(curve_f, curve_lf)?;
    let beta = fit_baseline_trend(curve_f.clean_value(), curve_lf)?;
    Ok(trapezoid_diff(curve_f, &beta))
}

/// Both robustness scores against the late-fusion baseline.
pub fn robustness_scores(
    curve_f: &RobustnessCurve,
    curve_lf: &RobustnessCurve,
) -> Result<RobustnessScores> {
    Ok(RobustnessScores {
        tau: relative_robustness(curve_f, curve_lf)?,
        rho: effective_robustness(curve_f, curve_lf)?,
    })
}

// ---------------------------------------------------------------------------
// The full three-axis evaluation
// ---------------------------------------------------------------------------

/// Everything `test_model` measures: one report per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub performance: PerformanceReport,
    pub complexity: ComplexityReport,
    pub curves: Vec<RobustnessCurve>,
}

/// Evaluate a trained model on all three axes at once: performance on the
/// grid's clean test samples, complexity (timing the same inference pass),
/// and one robustness curve per grid partition. `train_time_s` comes from
/// whoever ran the training loop.
pub fn test_model(
    model: &Model,
    grid: &NoisyTestGrid,
    train_time_s: f64,
    metric: MetricSelector,
) -> Result<TestReport> {
    let performance = evaluate_model(model, grid.clean_samples())?;
    let complexity = profile_complexity(model, train_time_s, grid.clean_samples())?;
    let curves = robustness_curves(model, grid, metric)?;
    Ok(TestReport {
        performance,
        complexity,
        curves,
    })
}

// ---------------------------------------------------------------------------
// Cross-task aggregation
// ---------------------------------------------------------------------------

/// Whether larger raw values are better for a metric column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// One task's results across models: `values[i]` belongs to the i-th model
/// and is `None` when that model never ran the task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskColumn {
    pub name: String,
    pub direction: Direction,
    pub weight: f64,
    pub values: Vec<Option<f64>>,
}

/// Min-max normalize each task column (best 1, worst 0, all-equal 1) and
/// combine into one score per model, weighting each task and averaging
/// every model only over the tasks it actually ran.
pub fn aggregate_minmax(models: &[String], tasks: &[TaskColumn]) -> Result<Vec<(String, f64)>> {
    if models.len() < 2 {
        return Err(Error::config("models", "need at least 2 models to rank"));
    }
    if tasks.is_empty() {
        return Err(Error::config("tasks", "need at least 1 task column"));
    }
    let mut normalized: Vec<Vec<Option<f64>>> = Vec::with_capacity(tasks.len());
    for task in tasks {
        if task.values.len() != models.len() {
            return Err(Error::dim(
                "aggregate_minmax",
                format!(
                    "task `{}` has {} values for {} models",
                    task.name,
                    task.values.len(),
                    models.len()
                ),
            ));
        }
        if task.weight <= 0.0 || !task.weight.is_finite() {
            return Err(Error::config("weight", "task weights must be positive"));
        }
        let present: Vec<f64> = task.values.iter().flatten().copied().collect();
        if present.len() < 2 {
            return Err(Error::config(
                "tasks",
                format!("task `{}` needs at least 2 models' results", task.name),
            ));
        }
        if present.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("task `{}` results", task.name)));
        }
        let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let col = task
            .values
            .iter()
            .map(|v| {
                v.map(|v| {
                    if lo == hi {
                        // a degenerate task says nothing; penalize no one
                        1.0
                    } else {
                        match task.direction {
                            Direction::HigherIsBetter => (v - lo) / (hi - lo),
                            Direction::LowerIsBetter => (hi - v) / (hi - lo),
                        }
                    }
                })
            })
            .collect();
        normalized.push(col);
    }
    let mut scores = Vec::with_capacity(models.len());
    for (mi, name) in models.iter().enumerate() {
        let mut weighted = 0.0;
        let mut weight_sum = 0.0;
        for (task, col) in tasks.iter().zip(&normalized) {
            if let Some(v) = col[mi] {
                weighted += task.weight * v;
                weight_sum += task.weight;
            }
        }
        if weight_sum == 0.0 {
            return Err(Error::config(
                "models",
                format!("model `{name}` ran no tasks"),
            ));
        }
        scores.push((name.clone(), weighted / weight_sum));
    }
    Ok(scores)
}
