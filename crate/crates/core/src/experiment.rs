//! Config-driven experiment pipeline: parse a JSON experiment description,
//! run it per seed (generate data, build the bundle, train per structure
//! tag, evaluate all three axes, persist), then compare, audit, or plot
//! finished run directories.
//!
//! Every run trains a late-fusion reference alongside the configured model
//! so the per-seed τ/ρ scores are always defined; when the run itself is a
//! plain supervised late-fusion model it doubles as its own reference and
//! the scores are exactly zero.

use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::evalmetrics::{
    aggregate_complexity, aggregate_minmax, compute_performance, effective_robustness,
    predict_all, profile_complexity, relative_robustness, Direction, MetricSelector,
    PerformanceReport, RobustnessCurve, RobustnessScores, TaskColumn,
};
use crate::fusion::FusionSpec;
use crate::perturb::{build_noisy_grid, NoisyTestGrid, PerturbFamily};
use crate::report::{
    mean_std, read_json, sanitize_stem, seed_dir_name, sha256_hex, to_canonical_json, write_json,
    LevelPredictions, ParamAccounting, PartitionPredictions, PredictionsRecord, RobustnessRecord,
    RunManifest, RunSummary, SeedFailure, SeedReports, Series, SummaryStat, TimingRecord,
    CHECKPOINT_STEM, CONFIG_FILE, CURVES_DIR, ERROR_FILE, HISTORY_FILE, MANIFEST_FILE,
    PREDICTIONS_FILE, REPORTS_FILE, SCHEMA_VERSION, SUMMARY_FILE, TIMING_FILE,
};
use crate::synthdata::{
    load_dataset, make_interaction, make_redundant, make_temporal, DatasetSplits, Label, TaskKind,
};
use crate::training::{
    mix, train_gradblend, train_mctn, train_mfm, train_supervised, train_supervised_with_terms,
    AuxObjective, History, Model, ModelBundle, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable that re-roots relative `output_dir` paths.
pub const OUTPUT_ROOT_ENV: &str = "MMFUSE_OUTPUT_ROOT";

const GRID_SALT: u64 = 0x4752_4944;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Where a run's data comes from. Generator sections draw a fresh dataset
/// per run seed; a path section loads the same directory for every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSection {
    /// Clustered classes visible in every modality.
    Redundant {
        modalities: usize,
        dims: Vec<usize>,
        n: usize,
        noise: f64,
    },
    /// Labels carried only by the cross-modality interaction.
    Interaction { n: usize, flip_prob: f64 },
    /// Co-occurring events across temporal streams.
    Temporal {
        modalities: usize,
        t: usize,
        rates: Vec<usize>,
        n: usize,
    },
    /// A dataset directory written by `save_dataset`.
    Path { path: String },
}

impl DatasetSection {
    /// Materialize the dataset for one run seed.
    pub fn materialize(&self, seed: u64) -> Result<DatasetSplits> {
        match self {
            DatasetSection::Redundant {
                modalities,
                dims,
                n,
                noise,
            } => make_redundant(*modalities, dims, *n, *noise, seed),
            DatasetSection::Interaction { n, flip_prob } => {
                make_interaction(2, *n, *flip_prob, seed)
            }
            DatasetSection::Temporal {
                modalities,
                t,
                rates,
                n,
            } => Ok(make_temporal(*modalities, *t, rates, *n, seed)?.0),
            DatasetSection::Path { path } => load_dataset(Path::new(path)),
        }
    }

    /// A minimum-size instance with the configured shapes, for validating
    /// the dimension chain without paying the configured `n`.
    fn probe(&self) -> Result<DatasetSplits> {
        match self {
            DatasetSection::Redundant {
                modalities,
                dims,
                noise,
                ..
            } => make_redundant(*modalities, dims, 12, *noise, 0),
            DatasetSection::Interaction { flip_prob, .. } => {
                make_interaction(2, 12, *flip_prob, 0)
            }
            DatasetSection::Temporal {
                modalities,
                t,
                rates,
                ..
            } => Ok(make_temporal(*modalities, *t, rates, 12, 0)?.0),
            DatasetSection::Path { path } => load_dataset(Path::new(path)),
        }
    }
}

/// Which training structure drives the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "kebab-case")]
pub enum TrainingSection {
    Supervised {
        #[serde(flatten)]
        cfg: TrainConfig,
    },
    GradBlend {
        #[serde(flatten)]
        cfg: TrainConfig,
    },
    Mctn {
        #[serde(flatten)]
        cfg: TrainConfig,
    },
    Mfm {
        lambda: f64,
        factor_dim: usize,
        #[serde(flatten)]
        cfg: TrainConfig,
    },
}

impl TrainingSection {
    pub fn cfg(&self) -> &TrainConfig {
        match self {
            TrainingSection::Supervised { cfg }
            | TrainingSection::GradBlend { cfg }
            | TrainingSection::Mctn { cfg }
            | TrainingSection::Mfm { cfg, .. } => cfg,
        }
    }

    fn cfg_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.cfg().clone()
        }
    }
}

/// Corruption grid description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSection {
    /// One perturbation family per modality.
    pub families: Vec<PerturbFamily>,
    /// Corruption levels, ascending from 0.0.
    pub levels: Vec<f64>,
    /// Metric tracked along the curves; defaults to accuracy or MSE by task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricSelector>,
    /// Extra entropy for the grid; mixed with the run seed either way.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// The complete description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSection,
    pub encoders: Vec<EncoderSpec>,
    pub fusion: FusionSpec,
    /// Alignment terms added to the supervised loss (supervised runs only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective: Vec<AuxObjective>,
    pub training: TrainingSection,
    pub robustness: RobustnessSection,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        read_json(path)
    }

    /// The metric the run tracks, given the dataset's task.
    pub fn metric_for(&self, task: &TaskKind) -> MetricSelector {
        self.robustness
            .metric
            .unwrap_or_else(|| MetricSelector::default_for(task))
    }

    /// Hash of the dataset section alone; runs are comparable only when
    /// these match.
    pub fn dataset_hash(&self) -> Result<String> {
        Ok(sha256_hex(to_canonical_json(&self.dataset)?.as_bytes()))
    }

    /// Full static validation: schema, seeds, training hyperparameters,
    /// structure constraints, the encoder/fusion/head dimension chain
    /// (against a probe dataset), and the corruption grid description.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "expected {SCHEMA_VERSION}, got {} (unsupported schema)",
                    self.schema_version
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be unique"));
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.training.cfg().validate()?;
        for term in &self.objective {
            term.validate()?;
        }
        match &self.training {
            TrainingSection::Supervised { .. } => {
                if !self.objective.is_empty() && self.encoders.len() != 2 {
                    return Err(Error::config(
                        "objective",
                        "alignment terms are defined for exactly two streams",
                    ));
                }
            }
            TrainingSection::GradBlend { .. } => {
                if self.fusion != FusionSpec::Lf {
                    return Err(Error::config(
                        "fusion",
                        "grad-blend training requires the `lf` fusion op",
                    ));
                }
                self.require_task_objective("grad-blend")?;
            }
            TrainingSection::Mctn { .. } => {
                if self.fusion != FusionSpec::Lf {
                    return Err(Error::config(
                        "fusion",
                        "mctn consumes one modality through the `lf` op",
                    ));
                }
                self.require_task_objective("mctn")?;
            }
            TrainingSection::Mfm {
                lambda, factor_dim, ..
            } => {
                if !lambda.is_finite() || *lambda < 0.0 {
                    return Err(Error::config("lambda", "must be finite and >= 0"));
                }
                if *factor_dim == 0 {
                    return Err(Error::config("factor_dim", "must be >= 1"));
                }
                self.require_task_objective("mfm")?;
            }
        }

        let probe = self.dataset.probe()?;
        match &self.training {
            TrainingSection::Mctn { .. } => {
                // mctn reads only the source modality, so the config
                // declares exactly that one encoder
                if self.encoders.len() != 1 {
                    return Err(Error::config(
                        "encoders",
                        "mctn takes one encoder, for the source modality",
                    ));
                }
                if probe.num_modalities() != 2 {
                    return Err(Error::config(
                        "dataset",
                        "mctn translates between exactly two modalities",
                    ));
                }
                ModelBundle::with_used_modalities(
                    vec![self.encoders[0].clone()],
                    FusionSpec::Lf,
                    &probe.specs,
                    &probe.task,
                    vec![0],
                )?;
            }
            _ => {
                if self.encoders.len() != probe.num_modalities() {
                    return Err(Error::config(
                        "encoders",
                        format!(
                            "dataset has {} modalities, config has {} encoders",
                            probe.num_modalities(),
                            self.encoders.len()
                        ),
                    ));
                }
                ModelBundle::new(
                    self.encoders.clone(),
                    self.fusion.clone(),
                    &probe.specs,
                    &probe.task,
                )?;
            }
        }
        build_noisy_grid(
            &probe,
            &self.robustness.families,
            &self.robustness.levels,
            0,
        )?;
        let metric = self.metric_for(&probe.task);
        let metric_is_regression =
            matches!(metric, MetricSelector::Mse | MetricSelector::Mae);
        if metric_is_regression != matches!(probe.task, TaskKind::Regression { .. }) {
            return Err(Error::config(
                "metric",
                format!("{metric:?} does not apply to the dataset's task"),
            ));
        }
        Ok(())
    }

    fn require_task_objective(&self, structure: &str) -> Result<()> {
        if !self.objective.is_empty() {
            return Err(Error::config(
                "objective",
                format!("{structure} training fixes its own objective; drop the extra terms"),
            ));
        }
        Ok(())
    }
}

/// `output_dir` resolution: a relative path is re-rooted under
/// [`OUTPUT_ROOT_ENV`] when that variable is set; absolute paths and unset
/// environments pass through.
pub fn resolve_output_dir(output_dir: &str) -> PathBuf {
    resolve_output_dir_with(std::env::var_os(OUTPUT_ROOT_ENV).as_deref(), output_dir)
}

fn resolve_output_dir_with(root: Option<&OsStr>, output_dir: &str) -> PathBuf {
    let dir = PathBuf::from(output_dir);
    match root {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

/// What `run_experiment` leaves behind, echoed back to the caller.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub summary: RunSummary,
    pub failures: Vec<SeedFailure>,
}

struct SeedOutput {
    reports: SeedReports,
    timing: TimingRecord,
    history: History,
    predictions: PredictionsRecord,
    model: Model,
}

/// Execute a validated config end to end and persist the run directory.
/// Per-seed training divergence is recorded (`seed_<k>/error.json`) without
/// aborting the remaining seeds; any other failure aborts the run. An
/// existing run directory produced by an earlier invocation is replaced.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_dir = resolve_output_dir(&cfg.output_dir);
    prepare_run_dir(&run_dir)?;

    let config_text = to_canonical_json(cfg)?;
    let config_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, &config_text)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    let config_sha256 = sha256_hex(config_text.as_bytes());
    let dataset_sha256 = cfg.dataset_hash()?;

    let mut completed = Vec::new();
    let mut failures = Vec::new();
    let mut reports_by_seed: Vec<(u64, SeedReports)> = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = run_dir.join(seed_dir_name(seed));
        std::fs::create_dir_all(&seed_dir)
            .map_err(|e| Error::io(seed_dir.display().to_string(), e))?;
        match run_seed(cfg, seed) {
            Ok(out) => {
                persist_seed(&seed_dir, seed, &out)?;
                completed.push(seed);
                reports_by_seed.push((seed, out.reports));
            }
            Err(err @ (Error::Diverged { .. } | Error::NonFinite { .. })) => {
                let failure = SeedFailure {
                    seed,
                    error: err.to_string(),
                };
                write_json(&seed_dir.join(ERROR_FILE), &failure)?;
                failures.push(failure);
            }
            Err(err) => return Err(err),
        }
    }

    let summary = summarize(&reports_by_seed);
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config_sha256,
        dataset_sha256,
        seeds: cfg.seeds.clone(),
        completed_seeds: completed,
    };
    // the manifest is the completion marker, so it goes last
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunOutcome {
        run_dir,
        manifest,
        summary,
        failures,
    })
}

/// Wipe and recreate the run directory — but only if it looks like one of
/// ours (empty, or containing a config/manifest), so a mistyped path can't
/// delete unrelated files.
fn prepare_run_dir(run_dir: &Path) -> Result<()> {
    if run_dir.exists() {
        let is_run = run_dir.join(CONFIG_FILE).exists()
            || run_dir.join(MANIFEST_FILE).exists()
            || run_dir
                .read_dir()
                .map(|mut d| d.next().is_none())
                .unwrap_or(false);
        if !is_run {
            return Err(Error::config(
                "output_dir",
                format!(
                    "{} exists and is not a run directory; refusing to overwrite",
                    run_dir.display()
                ),
            ));
        }
        std::fs::remove_dir_all(run_dir)
            .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let data = cfg.dataset.materialize(seed)?;
    let metric = cfg.metric_for(&data.task);
    let train_cfg = cfg.training.cfg_for_seed(seed);

    let started = Instant::now();
    let (model, history, blend_weights) = match &cfg.training {
        TrainingSection::Supervised { .. } => {
            let bundle = ModelBundle::new(
                cfg.encoders.clone(),
                cfg.fusion.clone(),
                &data.specs,
                &data.task,
            )?;
            let mut model = Model::new(bundle, seed);
            let history =
                train_supervised_with_terms(&mut model, &data, &train_cfg, &cfg.objective)?;
            (model, history, None)
        }
        TrainingSection::GradBlend { .. } => {
            let bundle = ModelBundle::new(
                cfg.encoders.clone(),
                cfg.fusion.clone(),
                &data.specs,
                &data.task,
            )?;
            let mut model = Model::new(bundle, seed);
            let (history, weights) = train_gradblend(&mut model, &data, &train_cfg)?;
            (model, history, Some(weights.weights().to_vec()))
        }
        TrainingSection::Mctn { .. } => {
            let (model, history) = train_mctn(&data, cfg.encoders[0].clone(), &train_cfg)?;
            (model, history, None)
        }
        TrainingSection::Mfm {
            lambda, factor_dim, ..
        } => {
            let bundle = ModelBundle::new(
                cfg.encoders.clone(),
                cfg.fusion.clone(),
                &data.specs,
                &data.task,
            )?;
            let mut model = Model::new(bundle, seed);
            let history = train_mfm(&mut model, &data, &train_cfg, *lambda, *factor_dim)?;
            (model, history, None)
        }
    };
    let train_time_s = started.elapsed().as_secs_f64();

    let grid_seed = mix(seed, cfg.robustness.seed.unwrap_or(GRID_SALT));
    let grid = build_noisy_grid(
        &data,
        &cfg.robustness.families,
        &cfg.robustness.levels,
        grid_seed,
    )?;
    let labels: Vec<Label> = data.test.iter().map(|s| s.label.clone()).collect();

    let clean = predict_all(&model, grid.clean_samples())?;
    let performance = compute_performance(&clean, &labels, &data.task)?;
    let (curves, grid_preds) = predict_grid(&model, &grid, &labels, &data.task, metric)?;
    let full_complexity = profile_complexity(&model, train_time_s, grid.clean_samples())?;

    // The late-fusion reference: the run itself when it already is plain
    // supervised late fusion, a freshly trained LF model otherwise.
    let is_own_reference = matches!(cfg.training, TrainingSection::Supervised { .. })
        && cfg.fusion == FusionSpec::Lf
        && cfg.objective.is_empty();
    let (baseline_clean, baseline_curves, baseline_grid, baseline_train_time_s) =
        if is_own_reference {
            (clean.clone(), curves.clone(), grid_preds.clone(), train_time_s)
        } else {
            // mctn declares a single source-modality encoder, so its
            // reference is the directly supervised unimodal model
            let bundle = match &cfg.training {
                TrainingSection::Mctn { .. } => ModelBundle::with_used_modalities(
                    vec![cfg.encoders[0].clone()],
                    FusionSpec::Lf,
                    &data.specs,
                    &data.task,
                    vec![0],
                )?,
                _ => ModelBundle::new(
                    cfg.encoders.clone(),
                    FusionSpec::Lf,
                    &data.specs,
                    &data.task,
                )?,
            };
            let mut baseline = Model::new(bundle, seed);
            let t0 = Instant::now();
            train_supervised(&mut baseline, &data, &train_cfg)?;
            let bt = t0.elapsed().as_secs_f64();
            let b_clean = predict_all(&baseline, grid.clean_samples())?;
            let (b_curves, b_grid) =
                predict_grid(&baseline, &grid, &labels, &data.task, metric)?;
            (b_clean, b_curves, b_grid, bt)
        };
    let scores = mean_scores(&curves, &baseline_curves)?;

    Ok(SeedOutput {
        reports: SeedReports {
            performance,
            complexity: ParamAccounting {
                train_param_count: full_complexity.train_param_count,
                inference_param_count: full_complexity.inference_param_count,
                input_bits: full_complexity.input_bits,
            },
            robustness: RobustnessRecord {
                curves,
                baseline_curves,
                scores,
            },
            blend_weights,
        },
        timing: TimingRecord {
            train_time_s,
            inference_time_s: full_complexity.inference_time_s,
            peak_memory_bytes: full_complexity.peak_memory_bytes,
            baseline_train_time_s,
        },
        history,
        predictions: PredictionsRecord {
            task: data.task,
            labels,
            clean,
            grid: grid_preds,
            baseline_clean,
            baseline_grid,
        },
        model,
    })
}

/// Predict on every (partition, level) cell, returning both the metric
/// curves and the raw predictions that re-derive them.
fn predict_grid(
    model: &Model,
    grid: &NoisyTestGrid,
    labels: &[Label],
    task: &TaskKind,
    metric: MetricSelector,
) -> Result<(Vec<RobustnessCurve>, Vec<PartitionPredictions>)> {
    let mut curves = Vec::with_capacity(grid.num_partitions());
    let mut records = Vec::with_capacity(grid.num_partitions());
    for (pi, part) in grid.partitions().iter().enumerate() {
        let mut points = Vec::with_capacity(grid.levels().len());
        let mut levels = Vec::with_capacity(grid.levels().len());
        for (li, &sigma) in grid.levels().iter().enumerate() {
            let samples = grid.corrupted(pi, li)?;
            let predictions = predict_all(model, &samples)?;
            let value = compute_performance(&predictions, labels, task)?.select(metric)?;
            points.push((sigma, value));
            levels.push(LevelPredictions {
                sigma,
                predictions,
            });
        }
        curves.push(RobustnessCurve::new(part.name.clone(), points)?);
        records.push(PartitionPredictions {
            partition: part.name.clone(),
            levels,
        });
    }
    Ok((curves, records))
}

/// τ/ρ of each partition's curve against the baseline's same-named curve,
/// averaged over partitions.
fn mean_scores(
    curves: &[RobustnessCurve],
    baseline: &[RobustnessCurve],
) -> Result<RobustnessScores> {
    if curves.is_empty() {
        return Err(Error::dim("robustness", "no curves to score"));
    }
    let mut tau = 0.0;
    let mut rho = 0.0;
    for c in curves {
        let b = baseline
            .iter()
            .find(|b| b.partition == c.partition)
            .ok_or_else(|| {
                Error::dim(
                    "robustness",
                    format!("baseline has no `{}` partition", c.partition),
                )
            })?;
        tau += relative_robustness(c, b)?;
        rho += effective_robustness(c, b)?;
    }
    let n = curves.len() as f64;
    Ok(RobustnessScores {
        tau: tau / n,
        rho: rho / n,
    })
}

fn persist_seed(seed_dir: &Path, seed: u64, out: &SeedOutput) -> Result<()> {
    out.model.params.save(
        &seed_dir.join(CHECKPOINT_STEM),
        serde_json::json!({ "seed": seed }),
    )?;
    write_json(&seed_dir.join(HISTORY_FILE), &out.history)?;
    write_json(&seed_dir.join(REPORTS_FILE), &out.reports)?;
    write_json(&seed_dir.join(TIMING_FILE), &out.timing)?;
    write_json(&seed_dir.join(PREDICTIONS_FILE), &out.predictions)?;
    let curves_dir = seed_dir.join(CURVES_DIR);
    std::fs::create_dir_all(&curves_dir)
        .map_err(|e| Error::io(curves_dir.display().to_string(), e))?;
    for c in &out.reports.robustness.curves {
        let path = curves_dir.join(format!("{}.csv", sanitize_stem(&c.partition)));
        std::fs::write(&path, c.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    for c in &out.reports.robustness.baseline_curves {
        let path = curves_dir.join(format!("baseline_{}.csv", sanitize_stem(&c.partition)));
        std::fs::write(&path, c.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn summarize(reports: &[(u64, SeedReports)]) -> RunSummary {
    let mut stats = Vec::new();
    let mut add = |name: &str, values: Vec<f64>| {
        if !values.is_empty() {
            let (mean, std) = mean_std(&values);
            stats.push(SummaryStat {
                name: name.to_string(),
                mean,
                std,
            });
        }
    };
    let collect = |f: &dyn Fn(&SeedReports) -> Option<f64>| -> Vec<f64> {
        reports.iter().filter_map(|(_, r)| f(r)).collect()
    };
    for (name, metric) in [
        ("accuracy", MetricSelector::Accuracy),
        ("micro_f1", MetricSelector::MicroF1),
        ("macro_f1", MetricSelector::MacroF1),
        ("auprc", MetricSelector::Auprc),
        ("mse", MetricSelector::Mse),
        ("mae", MetricSelector::Mae),
    ] {
        add(
            name,
            collect(&|r| r.performance.select(metric).ok()),
        );
    }
    add("tau", collect(&|r| Some(r.robustness.scores.tau)));
    add("rho", collect(&|r| Some(r.robustness.scores.rho)));
    RunSummary {
        completed_seeds: reports.iter().map(|(s, _)| *s).collect(),
        stats,
    }
}

// ---------------------------------------------------------------------------
// Loading finished runs
// ---------------------------------------------------------------------------

/// A finished run directory pulled back into memory.
pub struct LoadedRun {
    pub name: String,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
    pub reports: BTreeMap<u64, SeedReports>,
    pub timings: BTreeMap<u64, TimingRecord>,
}

impl LoadedRun {
    /// Read a run directory; a missing manifest means the run never
    /// completed and is refused.
    pub fn open(dir: &Path) -> Result<LoadedRun> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::audit(
                dir.display().to_string(),
                "no manifest — the run is incomplete or failed",
            ));
        }
        let manifest: RunManifest = read_json(&manifest_path)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("run uses schema {}", manifest.schema_version),
            ));
        }
        let config: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
        let mut reports = BTreeMap::new();
        let mut timings = BTreeMap::new();
        for &seed in &manifest.completed_seeds {
            let sd = dir.join(seed_dir_name(seed));
            reports.insert(seed, read_json::<SeedReports>(&sd.join(REPORTS_FILE))?);
            timings.insert(seed, read_json::<TimingRecord>(&sd.join(TIMING_FILE))?);
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(LoadedRun {
            name,
            dir: dir.to_path_buf(),
            config,
            manifest,
            reports,
            timings,
        })
    }

    /// The task family, read off any completed seed's performance report.
    fn task_is_regression(&self) -> Result<bool> {
        let (_, r) = self.reports.iter().next().ok_or_else(|| {
            Error::audit(self.dir.display().to_string(), "run has no completed seeds")
        })?;
        Ok(matches!(
            r.performance,
            PerformanceReport::Regression { .. }
        ))
    }

    fn metric(&self) -> Result<MetricSelector> {
        Ok(match self.config.robustness.metric {
            Some(m) => m,
            None => {
                if self.task_is_regression()? {
                    MetricSelector::Mse
                } else {
                    MetricSelector::Accuracy
                }
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Compare
// ---------------------------------------------------------------------------

/// One leaderboard row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub name: String,
    pub metric_mean: f64,
    pub metric_std: f64,
    /// Min-max normalized clean performance across the compared runs.
    pub normalized_performance: f64,
    /// `−log10(train_time / baseline train_time)`, mean times.
    pub complexity_score: f64,
    pub tau_mean: f64,
    pub rho_mean: f64,
}

/// The cross-run leaderboard, sorted best-first by normalized performance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: MetricSelector,
    pub baseline: String,
    pub rows: Vec<LeaderboardRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,metric_mean,metric_std,normalized_performance,complexity_score,tau,rho\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.name,
                r.metric_mean,
                r.metric_std,
                r.normalized_performance,
                r.complexity_score,
                r.tau_mean,
                r.rho_mean
            ));
        }
        out
    }
}

/// Compare finished runs against a designated late-fusion baseline run:
/// min-max normalized clean performance, the −log10 training-time ratio,
/// and τ/ρ of each run's curves against the baseline's, averaged over the
/// seeds all runs completed. Writes `leaderboard.csv` and `tradeoff.svg`
/// into `out_dir`.
pub fn compare_runs(dirs: &[PathBuf], baseline_dir: &Path, out_dir: &Path) -> Result<Comparison> {
    let baseline = LoadedRun::open(baseline_dir)?;
    let mut runs: Vec<LoadedRun> = vec![];
    let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    let baseline_canon = canon(baseline_dir);
    for d in dirs {
        if canon(d) == baseline_canon {
            continue; // the baseline is always included once
        }
        runs.push(LoadedRun::open(d)?);
    }
    let mut all: Vec<&LoadedRun> = Vec::with_capacity(runs.len() + 1);
    all.push(&baseline);
    all.extend(runs.iter());

    for r in &all {
        if r.manifest.dataset_sha256 != baseline.manifest.dataset_sha256 {
            return Err(Error::config(
                "runs",
                format!(
                    "`{}` was run on a different dataset section than the baseline",
                    r.name
                ),
            ));
        }
    }
    let metric = baseline.metric()?;
    for r in &all {
        if r.metric()? != metric {
            return Err(Error::config(
                "runs",
                format!("`{}` tracks a different metric than the baseline", r.name),
            ));
        }
    }

    // seeds every run completed
    let mut common: Vec<u64> = baseline.manifest.completed_seeds.clone();
    common.retain(|s| all.iter().all(|r| r.reports.contains_key(s)));
    if common.is_empty() {
        return Err(Error::config(
            "runs",
            "no seed completed in every compared run",
        ));
    }

    let names: Vec<String> = all.iter().map(|r| r.name.clone()).collect();
    let mut metric_means = Vec::with_capacity(all.len());
    let mut metric_stds = Vec::with_capacity(all.len());
    let mut taus = Vec::with_capacity(all.len());
    let mut rhos = Vec::with_capacity(all.len());
    let mut times = Vec::with_capacity(all.len());
    for r in &all {
        let vals: Vec<f64> = common
            .iter()
            .map(|s| r.reports[s].performance.select(metric))
            .collect::<Result<_>>()?;
        let (m, sd) = mean_std(&vals);
        metric_means.push(m);
        metric_stds.push(sd);

        let mut seed_taus = Vec::with_capacity(common.len());
        let mut seed_rhos = Vec::with_capacity(common.len());
        for s in &common {
            let scores = mean_scores(
                &r.reports[s].robustness.curves,
                &baseline.reports[s].robustness.curves,
            )?;
            seed_taus.push(scores.tau);
            seed_rhos.push(scores.rho);
        }
        taus.push(mean_std(&seed_taus).0);
        rhos.push(mean_std(&seed_rhos).0);

        let ts: Vec<f64> = common
            .iter()
            .map(|s| r.timings[s].train_time_s)
            .collect();
        times.push(mean_std(&ts).0);
    }

    let normalized: Vec<f64> = if all.len() < 2 {
        // a single run has nothing to normalize against
        vec![1.0; all.len()]
    } else {
        let direction = match metric {
            MetricSelector::Mse | MetricSelector::Mae => Direction::LowerIsBetter,
            _ => Direction::HigherIsBetter,
        };
        let column = TaskColumn {
            name: "performance".to_string(),
            direction,
            weight: 1.0,
            values: metric_means.iter().map(|&v| Some(v)).collect(),
        };
        aggregate_minmax(&names, &[column])?
            .into_iter()
            .map(|(_, v)| v)
            .collect()
    };

    let mut rows: Vec<LeaderboardRow> = (0..all.len())
        .map(|i| {
            Ok(LeaderboardRow {
                name: names[i].clone(),
                metric_mean: metric_means[i],
                metric_std: metric_stds[i],
                normalized_performance: normalized[i],
                complexity_score: aggregate_complexity(times[i], times[0])?,
                tau_mean: taus[i],
                rho_mean: rhos[i],
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| {
        b.normalized_performance
            .total_cmp(&a.normalized_performance)
            .then_with(|| a.name.cmp(&b.name))
    });

    let comparison = Comparison {
        metric,
        baseline: baseline.name.clone(),
        rows,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("leaderboard.csv");
    std::fs::write(&csv_path, comparison.to_csv())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let series: Vec<Series> = comparison
        .rows
        .iter()
        .map(|r| Series {
            name: r.name.clone(),
            points: vec![(r.complexity_score, r.normalized_performance)],
        })
        .collect();
    let svg = crate::report::render_chart(
        "performance vs training cost",
        "complexity score (higher = cheaper)",
        "normalized performance",
        &series,
        false,
    );
    let svg_path = out_dir.join("tradeoff.svg");
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(svg_path.display().to_string(), e))?;
    Ok(comparison)
}

// ---------------------------------------------------------------------------
// Plot
// ---------------------------------------------------------------------------

/// Render one performance-imperfection SVG per grid partition into
/// `<run>/plots/`, with one series per seed plus the cross-seed mean.
/// Returns the written paths.
pub fn plot_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let run = LoadedRun::open(dir)?;
    let (_, first) = run.reports.iter().next().ok_or_else(|| {
        Error::audit(dir.display().to_string(), "run has no completed seeds")
    })?;
    let metric = run.metric()?;
    let plots_dir = dir.join("plots");
    std::fs::create_dir_all(&plots_dir)
        .map_err(|e| Error::io(plots_dir.display().to_string(), e))?;

    let mut written = Vec::new();
    for curve in &first.robustness.curves {
        let partition = &curve.partition;
        let mut series = Vec::new();
        let mut sums = vec![0.0; curve.points.len()];
        for (seed, r) in &run.reports {
            let c = r
                .robustness
                .curves
                .iter()
                .find(|c| &c.partition == partition)
                .ok_or_else(|| {
                    Error::audit(
                        dir.display().to_string(),
                        format!("seed {seed} is missing the `{partition}` curve"),
                    )
                })?;
            for (i, p) in c.points.iter().enumerate() {
                sums[i] += p.1;
            }
            series.push(Series {
                name: format!("seed {seed}"),
                points: c.points.clone(),
            });
        }
        let n = run.reports.len() as f64;
        series.push(Series {
            name: "mean".to_string(),
            points: curve
                .points
                .iter()
                .zip(&sums)
                .map(|(&(sigma, _), &s)| (sigma, s / n))
                .collect(),
        });
        let svg = crate::report::render_chart(
            &format!("{partition} corruption"),
            "sigma",
            &format!("{metric:?}").to_lowercase(),
            &series,
            true,
        );
        let path = plots_dir.join(format!("{}.svg", sanitize_stem(partition)));
        std::fs::write(&path, svg).map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

/// What the audit checked and every discrepancy it found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub seeds_checked: Vec<u64>,
    pub problems: Vec<String>,
}

impl AuditOutcome {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Re-derive every persisted metric from the stored predictions + labels
/// and verify the hashes tying results to their config. Returns the list
/// of discrepancies (empty = the run is internally consistent).
pub fn audit_run(dir: &Path) -> Result<AuditOutcome> {
    let run = LoadedRun::open(dir)?;
    let mut problems = Vec::new();

    let config_path = dir.join(CONFIG_FILE);
    let config_bytes =
        std::fs::read(&config_path).map_err(|e| Error::io(config_path.display().to_string(), e))?;
    if sha256_hex(&config_bytes) != run.manifest.config_sha256 {
        problems.push("config.json does not match the manifest's config hash".to_string());
    }
    match run.config.dataset_hash() {
        Ok(h) if h == run.manifest.dataset_sha256 => {}
        Ok(_) => problems.push(
            "dataset section does not match the manifest's dataset hash".to_string(),
        ),
        Err(e) => problems.push(format!("dataset section not hashable: {e}")),
    }

    let mut reports_by_seed = Vec::new();
    for (&seed, reports) in &run.reports {
        let sd = dir.join(seed_dir_name(seed));
        let mut complain = |what: String| problems.push(format!("seed {seed}: {what}"));

        let preds: PredictionsRecord = match read_json(&sd.join(PREDICTIONS_FILE)) {
            Ok(p) => p,
            Err(e) => {
                complain(format!("unreadable predictions: {e}"));
                continue;
            }
        };
        match compute_performance(&preds.clean, &preds.labels, &preds.task) {
            Ok(p) if p == reports.performance => {}
            Ok(_) => complain("stored performance does not match its predictions".to_string()),
            Err(e) => complain(format!("stored predictions unusable: {e}")),
        }

        let metric = match run.config.robustness.metric {
            Some(m) => m,
            None => MetricSelector::default_for(&preds.task),
        };
        let redo = |grid: &[PartitionPredictions]| -> Result<Vec<RobustnessCurve>> {
            grid.iter()
                .map(|p| {
                    let points = p
                        .levels
                        .iter()
                        .map(|l| {
                            let v = compute_performance(&l.predictions, &preds.labels, &preds.task)?
                                .select(metric)?;
                            Ok((l.sigma, v))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    RobustnessCurve::new(p.partition.clone(), points)
                })
                .collect()
        };
        match (redo(&preds.grid), redo(&preds.baseline_grid)) {
            (Ok(curves), Ok(baseline_curves)) => {
                if curves != reports.robustness.curves {
                    complain("stored curves do not match their predictions".to_string());
                }
                if baseline_curves != reports.robustness.baseline_curves {
                    complain("stored baseline curves do not match their predictions".to_string());
                }
                match mean_scores(&curves, &baseline_curves) {
                    Ok(s) if s == reports.robustness.scores => {}
                    Ok(_) => complain("stored τ/ρ do not match the curves".to_string()),
                    Err(e) => complain(format!("curves not scorable: {e}")),
                }
            }
            (Err(e), _) | (_, Err(e)) => complain(format!("curves not re-derivable: {e}")),
        }

        if let Err(e) = crate::params::ParamSet::load(&sd.join(CHECKPOINT_STEM)) {
            complain(format!("checkpoint unreadable: {e}"));
        }
        if let Err(e) = read_json::<History>(&sd.join(HISTORY_FILE)) {
            complain(format!("history unreadable: {e}"));
        }
        reports_by_seed.push((seed, reports.clone()));
    }

    match read_json::<RunSummary>(&dir.join(SUMMARY_FILE)) {
        Ok(stored) => {
            if stored != summarize(&reports_by_seed) {
                problems.push("summary.json does not match the per-seed reports".to_string());
            }
        }
        Err(e) => problems.push(format!("summary unreadable: {e}")),
    }

    Ok(AuditOutcome {
        seeds_checked: run.manifest.completed_seeds.clone(),
        problems,
    })
}
