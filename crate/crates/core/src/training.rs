//! Training structures orchestrating encoders + fusion + head under a
//! composite objective: plain supervised descent, GradBlend's
//! generalization-weighted multi-task blend, MCTN cycle-consistent
//! translation, and MFM factorized reconstruction.
//!
//! A [`Model`] is a [`ModelBundle`] (the inference path) plus one flat
//! [`ParamSet`]. Training strategies may add parameters under the `aux.`
//! prefix — probe heads, translators, decoders — which the inference path
//! never reads and the inference parameter count excludes. Every run is a
//! pure function of (config, seed): same inputs, bit-identical parameters
//! and history.

use crate::encoders::{Encoder, EncoderKind, EncoderSpec, Rep};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionSpec};
use crate::graph::{Tape, Var};
use crate::objectives::{
    cca_loss, gaussian_reference, mctn_cycle_loss, mfm_objective, refnet_contrastive_loss,
    task_loss, AuxKind, AuxiliaryHead, Bandwidth,
};
use crate::params::{ParamSet, Scope};
use crate::synthdata::{DatasetSplits, Label, ModalitySpec, MultimodalSample, Split, TaskKind};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Parameters under this prefix belong to training-time machinery only and
/// are excluded from inference parameter counts.
pub const AUX_PREFIX: &str = "aux.";

/// splitmix64-style seed derivation so substreams never collide.
pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// The inference-path structure: per-modality encoders, one fusion operator,
/// and a linear head into label space, with every dimension checked at
/// construction.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    encoders: Vec<Encoder>,
    fusion: Fusion,
    head: AuxiliaryHead,
    task: TaskKind,
    /// Which sample modalities the encoders read (MCTN reads only the
    /// first; everything else reads all of them).
    used_modalities: Vec<usize>,
}

/// Output dimension of the task head for a task kind.
pub fn head_out_dim(task: &TaskKind) -> usize {
    match task {
        TaskKind::Classification { classes } => *classes,
        TaskKind::Regression { dim } => *dim,
    }
}

impl ModelBundle {
    /// A bundle reading every modality in order.
    pub fn new(
        encoder_specs: Vec<EncoderSpec>,
        fusion_spec: FusionSpec,
        data_specs: &[ModalitySpec],
        task: &TaskKind,
    ) -> Result<Self> {
        let used = (0..data_specs.len()).collect();
        Self::with_used_modalities(encoder_specs, fusion_spec, data_specs, task, used)
    }

    /// A bundle reading an explicit subset of the modalities.
    pub fn with_used_modalities(
        encoder_specs: Vec<EncoderSpec>,
        fusion_spec: FusionSpec,
        data_specs: &[ModalitySpec],
        task: &TaskKind,
        used_modalities: Vec<usize>,
    ) -> Result<Self> {
        if encoder_specs.is_empty() || encoder_specs.len() != used_modalities.len() {
            return Err(Error::config(
                "encoders",
                "need one encoder per used modality",
            ));
        }
        let mut encoders = Vec::with_capacity(encoder_specs.len());
        for (spec, &mi) in encoder_specs.into_iter().zip(&used_modalities) {
            let dspec = data_specs.get(mi).ok_or_else(|| {
                Error::config("used_modalities", format!("modality {mi} out of range"))
            })?;
            if spec.in_shape != dspec.shape {
                return Err(Error::dim(
                    format!("encoder for modality {mi}"),
                    format!(
                        "encoder expects {:?}, data provides {:?}",
                        spec.in_shape, dspec.shape
                    ),
                ));
            }
            encoders.push(Encoder::new(spec, dspec.kind)?);
        }
        if matches!(fusion_spec, FusionSpec::Ef)
            && encoders
                .iter()
                .any(|e| e.spec().kind != EncoderKind::Identity)
        {
            return Err(Error::config(
                "fusion",
                "ef concatenates raw inputs; every encoder must be identity",
            ));
        }
        let in_dims: Vec<usize> = encoders.iter().map(|e| e.out_dim()).collect();
        let fusion = Fusion::new(fusion_spec, &in_dims)?;
        if fusion.needs_sequences() && encoders.iter().any(|e| !e.is_temporal()) {
            return Err(Error::config(
                "fusion",
                "mult consumes sequence representations; every encoder must be temporal",
            ));
        }
        let head = AuxiliaryHead::new(AuxKind::ToLabel, fusion.out_dim(), head_out_dim(task))?;
        Ok(ModelBundle {
            encoders,
            fusion,
            head,
            task: *task,
            used_modalities,
        })
    }

    pub fn num_encoders(&self) -> usize {
        self.encoders.len()
    }

    pub fn encoder(&self, i: usize) -> &Encoder {
        &self.encoders[i]
    }

    pub fn encoder_specs(&self) -> Vec<EncoderSpec> {
        self.encoders.iter().map(|e| e.spec().clone()).collect()
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn head(&self) -> &AuxiliaryHead {
        &self.head
    }

    pub fn task(&self) -> &TaskKind {
        &self.task
    }

    pub fn used_modalities(&self) -> &[usize] {
        &self.used_modalities
    }

    pub fn param_count(&self) -> usize {
        self.encoders.iter().map(|e| e.param_count()).sum::<usize>()
            + self.fusion.param_count()
            + self.head.param_count()
    }

    /// Fresh parameters for the whole chain under one run seed.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, enc) in self.encoders.iter().enumerate() {
            ps.merge(
                &format!("enc{i}"),
                enc.init_params_with_seed(mix(seed, 0x45_4e43 ^ (i as u64) << 8)),
            );
        }
        ps.merge("fusion", self.fusion.init_params(mix(seed, 0x46_5553)));
        ps.merge("head", self.head.init_params(mix(seed, 0x48_4541)));
        ps
    }

    /// Per-modality representations for one sample.
    pub fn encode_sample(
        &self,
        tape: &mut Tape,
        root: &Scope<'_>,
        sample: &MultimodalSample,
    ) -> Result<Vec<Rep>> {
        let mut reps = Vec::with_capacity(self.encoders.len());
        for (i, enc) in self.encoders.iter().enumerate() {
            let mi = self.used_modalities[i];
            let x = sample.modalities.get(mi).ok_or_else(|| {
                Error::dim(
                    "encode_sample",
                    format!("sample has no modality {mi}"),
                )
            })?;
            let xv = tape.leaf(x.clone());
            reps.push(enc.forward_var(tape, &root.child(&format!("enc{i}")), xv)?);
        }
        Ok(reps)
    }

    /// Fused representation for one sample.
    pub fn fuse_sample(
        &self,
        tape: &mut Tape,
        root: &Scope<'_>,
        sample: &MultimodalSample,
    ) -> Result<Var> {
        let reps = self.encode_sample(tape, root, sample)?;
        self.fusion.fuse(tape, &root.child("fusion"), &reps)
    }

    /// Head output (logits or regression values) for one sample.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        root: &Scope<'_>,
        sample: &MultimodalSample,
    ) -> Result<Var> {
        let z = self.fuse_sample(tape, root, sample)?;
        Ok(self.head.apply(tape, &root.child("head"), z))
    }

    /// Stacked head outputs, one row per sample.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        root: &Scope<'_>,
        samples: &[&MultimodalSample],
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            rows.push(self.forward_sample(tape, root, s)?);
        }
        Ok(tape.stack_rows(&rows))
    }
}

// ---------------------------------------------------------------------------
// Model = bundle + parameters
// ---------------------------------------------------------------------------

/// A bundle plus its parameters (inference parameters and any `aux.*`
/// training-time extras in one flat set).
#[derive(Clone, Debug)]
pub struct Model {
    pub bundle: ModelBundle,
    pub params: ParamSet,
}

impl Model {
    pub fn new(bundle: ModelBundle, seed: u64) -> Model {
        let params = bundle.init_params(seed);
        Model { bundle, params }
    }

    pub fn predict(&self, sample: &MultimodalSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pred = self.bundle.forward_sample(&mut tape, &bound.root(), sample)?;
        Ok(tape.value(pred).iter().copied().collect())
    }

    pub fn predict_class(&self, sample: &MultimodalSample) -> Result<usize> {
        let scores = self.predict(sample)?;
        Ok(argmax(&scores))
    }

    /// Classification accuracy over a slice of samples.
    pub fn accuracy(&self, samples: &[MultimodalSample]) -> Result<f64> {
        let mut hits = 0usize;
        for s in samples {
            if self.predict_class(s)? == s.label.class() {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Parameters the test-time forward path actually uses.
    pub fn inference_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !n.starts_with(AUX_PREFIX))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// All parameters, training-time machinery included.
    pub fn total_param_count(&self) -> usize {
        self.params.num_scalars()
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Optimizers and config
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        epsilon: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

/// Hyperparameters of one training run; the seed fixes everything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Early stopping: stop after this many epochs without validation
    /// improvement. `None` trains the full schedule (the best-validation
    /// checkpoint is restored either way).
    #[serde(default)]
    pub patience: Option<usize>,
    /// Callers that orchestrate multiple runs (the experiment runner)
    /// override this per run.
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    32
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                "must be a finite non-negative number",
            ));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience", "must be >= 1 when set"));
        }
        match self.optimizer {
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("momentum", "must be in [0, 1)"));
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if !(0.0..1.0).contains(&beta1)
                    || !(0.0..1.0).contains(&beta2)
                    || epsilon <= 0.0
                {
                    return Err(Error::config("adam", "betas in [0, 1), epsilon > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Per-entry optimizer state aligned with `ParamSet` order.
struct Optimizer {
    kind: OptimizerKind,
    velocity: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
    step_count: usize,
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: &ParamSet) -> Optimizer {
        let zeros: Vec<ArrayD<f64>> = params
            .iter()
            .map(|(_, v)| ArrayD::zeros(v.raw_dim()))
            .collect();
        Optimizer {
            kind,
            velocity: zeros.clone(),
            second: zeros,
            step_count: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>], lr: f64) {
        debug_assert_eq!(grads.len(), params.len());
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for (i, g) in grads.iter().enumerate() {
                    let v = &mut self.velocity[i];
                    v.zip_mut_with(g, |v, &g| *v = momentum * *v + g);
                    params
                        .entry_mut(i)
                        .zip_mut_with(v, |p, &v| *p -= lr * v);
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                self.step_count += 1;
                let c1 = 1.0 - beta1.powi(self.step_count as i32);
                let c2 = 1.0 - beta2.powi(self.step_count as i32);
                for (i, g) in grads.iter().enumerate() {
                    let m = &mut self.velocity[i];
                    m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    let v = &mut self.second[i];
                    v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    let p = params.entry_mut(i);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        let mhat = m / c1;
                        let vhat = v / c2;
                        *p -= lr * mhat / (vhat.sqrt() + epsilon);
                    });
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

/// One epoch of the training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Named objective terms averaged over the epoch's training batches.
    #[serde(default)]
    pub terms: Vec<(String, f64)>,
}

/// Full training record, serialized as `history.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    /// Train/valid loss curves in stream-statistics form.
    pub fn stream_stats(&self) -> StreamStats {
        StreamStats {
            train_losses: self.epochs.iter().map(|e| e.train_loss).collect(),
            valid_losses: self.epochs.iter().map(|e| e.valid_loss).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// The shared minibatch engine
// ---------------------------------------------------------------------------

/// Runs minibatch descent over `params`: per-epoch seeded shuffles, the
/// batch objective from `batch_loss`, divergence abort, validation-loss
/// early stopping, and best-checkpoint restoration.
fn run_training<F>(
    params: &mut ParamSet,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    mut batch_loss: F,
) -> Result<History>
where
    F: FnMut(&mut Tape, &Scope<'_>, Split, &[usize], usize) -> Result<(Var, Vec<(String, Var)>)>,
{
    cfg.validate()?;
    let n_train = data.split(Split::Train).len();
    let n_valid = data.split(Split::Valid).len();
    if n_train == 0 {
        return Err(Error::dim("training", "empty training split".to_string()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, params);
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, ParamSet)> = None;
    let mut strikes = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(mix(cfg.seed ^ 0x5348_5546, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0.0;
        let mut term_sums: Vec<(String, f64)> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let root = bound.root();
            let (loss, named) = batch_loss(&mut tape, &root, Split::Train, chunk, epoch)?;
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let w = chunk.len() as f64;
            loss_sum += lv * w;
            seen += w;
            for (name, var) in &named {
                let v = tape.scalar_value(*var) * w;
                match term_sums.iter_mut().find(|(n, _)| n == name) {
                    Some((_, s)) => *s += v,
                    None => term_sums.push((name.clone(), v)),
                }
            }
            let grads = tape.backward(loss);
            let gvec: Vec<ArrayD<f64>> = (0..params.len())
                .map(|i| grads.get_or_zeros(bound.var_at(i), params.entry(i).1.shape()))
                .collect();
            drop(tape);
            opt.step(params, &gvec, cfg.learning_rate);
        }

        let mut vsum = 0.0;
        let mut vn = 0.0;
        let vidx: Vec<usize> = (0..n_valid).collect();
        for chunk in vidx.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let root = bound.root();
            let (loss, _) = batch_loss(&mut tape, &root, Split::Valid, chunk, epoch)?;
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            vsum += lv * chunk.len() as f64;
            vn += chunk.len() as f64;
        }
        let train_loss = loss_sum / seen;
        let valid_loss = if vn > 0.0 { vsum / vn } else { train_loss };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            terms: term_sums
                .into_iter()
                .map(|(n, s)| (n, s / seen))
                .collect(),
        });

        if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
            best = Some((valid_loss, params.clone()));
            history.best_epoch = epoch;
            strikes = 0;
        } else {
            strikes += 1;
            if cfg.patience.is_some_and(|p| strikes >= p) {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, bp)) = best {
        *params = bp;
    }
    Ok(history)
}

fn batch_of<'a>(
    data: &'a DatasetSplits,
    split: Split,
    idx: &[usize],
) -> (Vec<&'a MultimodalSample>, Vec<Label>) {
    let samples = data.split(split);
    let batch: Vec<&MultimodalSample> = idx.iter().map(|&i| &samples[i]).collect();
    let labels: Vec<Label> = batch.iter().map(|s| s.label.clone()).collect();
    (batch, labels)
}

// ---------------------------------------------------------------------------
// Supervised
// ---------------------------------------------------------------------------

/// Minibatch supervised training of the bundle's task loss.
pub fn train_supervised(
    model: &mut Model,
    data: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<History> {
    train_supervised_with_terms(model, data, cfg, &[])
}

/// Auxiliary alignment terms added onto the supervised task loss, each with
/// a positive weight. Both are defined for exactly two streams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "kebab-case")]
pub enum AuxObjective {
    /// Negated mean per-dimension correlation between the two stream
    /// representations (batch-level; needs matching stream widths).
    Cca { weight: f64 },
    /// Cosine alignment of the fused vector with each stream vector
    /// (per-sample; needs stream widths equal to the fused width).
    Contrastive { weight: f64 },
}

impl AuxObjective {
    pub fn weight(&self) -> f64 {
        match self {
            AuxObjective::Cca { weight } | AuxObjective::Contrastive { weight } => *weight,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AuxObjective::Cca { .. } => "cca",
            AuxObjective::Contrastive { .. } => "contrastive",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight().is_finite() || self.weight() <= 0.0 {
            return Err(Error::config(
                "objective",
                format!("{} weight must be positive and finite", self.name()),
            ));
        }
        Ok(())
    }
}

/// Supervised training with optional alignment regularizers. With an empty
/// term list this is exactly [`train_supervised`]; otherwise the batch loss
/// is `task + Σ weight·term` and the unweighted term values are recorded in
/// the history.
pub fn train_supervised_with_terms(
    model: &mut Model,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    aux: &[AuxObjective],
) -> Result<History> {
    for t in aux {
        t.validate()?;
        if aux.iter().filter(|o| o.name() == t.name()).count() > 1 {
            return Err(Error::config(
                "objective",
                format!("duplicate `{}` term", t.name()),
            ));
        }
    }
    if !aux.is_empty() && model.bundle.num_encoders() != 2 {
        return Err(Error::config(
            "objective",
            "alignment terms are defined for exactly two streams",
        ));
    }
    let Model { bundle, params } = model;
    let bundle = &*bundle;
    let wants_contrastive = aux
        .iter()
        .any(|t| matches!(t, AuxObjective::Contrastive { .. }));
    run_training(params, data, cfg, |tape, root, split, idx, _| {
        let (batch, labels) = batch_of(data, split, idx);
        if aux.is_empty() {
            let pred = bundle.forward_batch(tape, root, &batch)?;
            let loss = task_loss(tape, pred, &labels, bundle.task())?;
            return Ok((loss, Vec::new()));
        }
        let mut outs = Vec::with_capacity(batch.len());
        let mut h0 = Vec::with_capacity(batch.len());
        let mut h1 = Vec::with_capacity(batch.len());
        let mut align = Vec::with_capacity(batch.len());
        for s in &batch {
            let reps = bundle.encode_sample(tape, root, s)?;
            let z = bundle.fusion().fuse(tape, &root.child("fusion"), &reps)?;
            outs.push(bundle.head().apply(tape, &root.child("head"), z));
            h0.push(reps[0].vector());
            h1.push(reps[1].vector());
            if wants_contrastive {
                align.push(refnet_contrastive_loss(
                    tape,
                    z,
                    reps[0].vector(),
                    reps[1].vector(),
                )?);
            }
        }
        let pred = tape.stack_rows(&outs);
        let task = task_loss(tape, pred, &labels, bundle.task())?;
        let mut loss = task;
        let mut terms = vec![("task".to_string(), task)];
        for t in aux {
            let term = match t {
                AuxObjective::Cca { .. } => {
                    if batch.len() < 2 {
                        // a singleton batch has no correlation structure
                        continue;
                    }
                    let a = tape.stack_rows(&h0);
                    let b = tape.stack_rows(&h1);
                    cca_loss(tape, a, b)?
                }
                AuxObjective::Contrastive { .. } => {
                    let sum = align[1..]
                        .iter()
                        .fold(align[0], |acc, &v| tape.add(acc, v));
                    tape.scale(sum, 1.0 / align.len() as f64)
                }
            };
            terms.push((t.name().to_string(), term));
            let weighted = tape.scale(term, t.weight());
            loss = tape.add(loss, weighted);
        }
        Ok((loss, terms))
    })
}

/// The bundle's supervised loss over one split, without touching parameters.
pub fn evaluate_loss(model: &Model, data: &DatasetSplits, split: Split) -> Result<f64> {
    let samples = data.split(split);
    let mut sum = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(32) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let (batch, labels) = batch_of(data, split, chunk);
        let pred = model.bundle.forward_batch(&mut tape, &bound.root(), &batch)?;
        let loss = task_loss(&mut tape, pred, &labels, model.bundle.task())?;
        sum += tape.scalar_value(loss) * chunk.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// GradBlend
// ---------------------------------------------------------------------------

/// Per-stream weights on the probability simplex; the last entry is the
/// multimodal stream's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendWeights {
    weights: Vec<f64>,
}

impl BlendWeights {
    pub fn uniform(n: usize) -> BlendWeights {
        BlendWeights {
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Normalize non-negative raw scores onto the simplex.
    pub fn normalized(raw: Vec<f64>) -> Result<BlendWeights> {
        if raw.is_empty() {
            return Err(Error::config("blend weights", "need at least one stream"));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(
                "blend weights",
                "scores must be finite and non-negative",
            ));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Ok(BlendWeights::uniform(raw.len()));
        }
        Ok(BlendWeights {
            weights: raw.into_iter().map(|w| w / sum).collect(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Train/validation loss curves of one stream over the probe window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
}

/// Generalization-to-overfitting weighting: `w_k ∝ G_k / O_k^2` where `G_k`
/// is the stream's validation-loss improvement over the window and `O_k`
/// the growth of its train–validation gap, both floored at a small epsilon.
/// The floor sits just under the per-epoch loss-change scale: over a short
/// probe window the gap growth of a healthy stream is routinely ~0, and a
/// much smaller floor would let such a stream swallow the whole simplex
/// through a vanishing denominator. When no stream improves at all, the
/// statistics say nothing and the weights fall back to uniform.
pub fn compute_blend_weights(stats: &[StreamStats]) -> Result<BlendWeights> {
    const EPS: f64 = 1e-2;
    if stats.is_empty() {
        return Err(Error::config("blend stats", "need at least one stream"));
    }
    for (k, s) in stats.iter().enumerate() {
        if s.train_losses.len() < 2 || s.train_losses.len() != s.valid_losses.len() {
            return Err(Error::config(
                "blend stats",
                format!("stream {k} needs >= 2 aligned checkpoints"),
            ));
        }
    }
    let improvement =
        |s: &StreamStats| s.valid_losses.first().unwrap() - s.valid_losses.last().unwrap();
    if stats.iter().all(|s| improvement(s) <= 0.0) {
        eprintln!(
            "warning: no stream improved over the probe window; using uniform blend weights"
        );
        return Ok(BlendWeights::uniform(stats.len()));
    }
    let raw: Vec<f64> = stats
        .iter()
        .map(|s| {
            let g = improvement(s).max(EPS);
            let gap_first = s.valid_losses.first().unwrap() - s.train_losses.first().unwrap();
            let gap_last = s.valid_losses.last().unwrap() - s.train_losses.last().unwrap();
            let o = (gap_last - gap_first).max(EPS);
            g / (o * o)
        })
        .collect();
    BlendWeights::normalized(raw)
}

/// Multi-task training: each modality's auxiliary head plus the fused head,
/// with fixed stream weights. Auxiliary heads are created under
/// `aux.blend{m}` if absent and persist in the returned parameters.
pub fn train_blended(
    model: &mut Model,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    weights: &BlendWeights,
) -> Result<History> {
    let m = model.bundle.num_encoders();
    if weights.len() != m + 1 {
        return Err(Error::dim(
            "train_blended",
            format!("{} weights for {m} modality streams + 1 fused", weights.len()),
        ));
    }
    let out_dim = head_out_dim(model.bundle.task());
    let heads: Vec<AuxiliaryHead> = (0..m)
        .map(|i| {
            AuxiliaryHead::new(AuxKind::ToLabel, model.bundle.encoder(i).out_dim(), out_dim)
        })
        .collect::<Result<_>>()?;
    for (i, head) in heads.iter().enumerate() {
        if model.params.get(&format!("aux.blend{i}.w")).is_none() {
            model.params.merge(
                &format!("aux.blend{i}"),
                head.init_params(mix(cfg.seed, 0x424c_4e44 ^ i as u64)),
            );
        }
    }
    let Model { bundle, params } = model;
    let bundle = &*bundle;
    let heads = &heads;
    let w = weights.weights().to_vec();
    run_training(params, data, cfg, move |tape, root, split, idx, _| {
        let (batch, labels) = batch_of(data, split, idx);
        let mut uni_rows: Vec<Vec<Var>> = vec![Vec::new(); m];
        let mut fused_rows = Vec::with_capacity(batch.len());
        for s in &batch {
            let reps = bundle.encode_sample(tape, root, s)?;
            for (i, rep) in reps.iter().enumerate() {
                let scope = root.child(&format!("aux.blend{i}"));
                uni_rows[i].push(heads[i].apply(tape, &scope, rep.vector()));
            }
            let z = bundle
                .fusion()
                .fuse(tape, &root.child("fusion"), &reps)?;
            fused_rows.push(bundle.head().apply(tape, &root.child("head"), z));
        }
        let mut terms = Vec::with_capacity(m + 1);
        let mut total: Option<Var> = None;
        for (i, rows) in uni_rows.iter().enumerate() {
            let pred = tape.stack_rows(rows);
            let loss = task_loss(tape, pred, &labels, bundle.task())?;
            let scaled = tape.scale(loss, w[i]);
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled),
            });
            terms.push((format!("stream{i}"), loss));
        }
        let pred = tape.stack_rows(&fused_rows);
        let loss = task_loss(tape, pred, &labels, bundle.task())?;
        let scaled = tape.scale(loss, w[m]);
        let total = tape.add(total.unwrap(), scaled);
        terms.push(("fused".to_string(), loss));
        Ok((total, terms))
    })
}

/// GradBlend: probe each stream (every modality alone, then the full
/// multimodal model) for a short window, weight streams by their
/// generalization statistics, and train the blended multi-task objective.
/// Weights are computed once after the probe phase.
pub fn train_gradblend(
    model: &mut Model,
    data: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<(History, BlendWeights)> {
    if model.bundle.fusion().tag() != "lf" {
        return Err(Error::config(
            "fusion",
            format!(
                "gradblend needs per-modality streams (late fusion), got `{}`",
                model.bundle.fusion().tag()
            ),
        ));
    }
    let probe_cfg = TrainConfig {
        epochs: (cfg.epochs / 5).max(2),
        patience: None,
        ..cfg.clone()
    };
    let mut stats = Vec::new();
    let m = model.bundle.num_encoders();
    for i in 0..m {
        let spec = model.bundle.encoder(i).spec().clone();
        let bundle = ModelBundle::with_used_modalities(
            vec![spec],
            FusionSpec::Lf,
            &data.specs,
            &data.task,
            vec![model.bundle.used_modalities()[i]],
        )?;
        let mut probe = Model::new(bundle, mix(cfg.seed, 0x5052_4f42 ^ i as u64));
        let h = train_supervised(&mut probe, data, &probe_cfg)?;
        stats.push(h.stream_stats());
    }
    let bundle = ModelBundle::new(
        model.bundle.encoder_specs(),
        model.bundle.fusion().spec().clone(),
        &data.specs,
        &data.task,
    )?;
    let mut probe = Model::new(bundle, mix(cfg.seed, 0x5052_4f42 ^ 0x4d4d));
    let h = train_supervised(&mut probe, data, &probe_cfg)?;
    stats.push(h.stream_stats());

    let weights = compute_blend_weights(&stats)?;
    let history = train_blended(model, data, cfg, &weights)?;
    Ok((history, weights))
}

// ---------------------------------------------------------------------------
// MCTN
// ---------------------------------------------------------------------------

/// Cycle-consistent translation training for two modalities. The returned
/// model's forward path reads only modality 0: the translator decodes
/// x̂_2 from the joint representation, re-encodes it, and decodes x̂_1,
/// with both reconstructions penalized next to the task loss. Modality 1
/// appears solely as a training target.
pub fn train_mctn(
    data: &DatasetSplits,
    encoder: EncoderSpec,
    cfg: &TrainConfig,
) -> Result<(Model, History)> {
    if data.num_modalities() != 2 {
        return Err(Error::config(
            "mctn",
            format!("needs exactly 2 modalities, got {}", data.num_modalities()),
        ));
    }
    let bundle = ModelBundle::with_used_modalities(
        vec![encoder],
        FusionSpec::Lf,
        &data.specs,
        &data.task,
        vec![0],
    )?;
    let z_dim = bundle.fusion().out_dim();
    let x1_len = data.specs[0].num_entries();
    let x2_len = data.specs[1].num_entries();
    let mut model = Model::new(bundle, mix(cfg.seed, 0x4d43_544e));
    let dec2 = AuxiliaryHead::new(AuxKind::Decoder, z_dim, x2_len)?;
    let enc2 = AuxiliaryHead::new(AuxKind::ToJointSpace, x2_len, z_dim)?;
    let dec1 = AuxiliaryHead::new(AuxKind::Decoder, z_dim, x1_len)?;
    model
        .params
        .merge("aux.dec2", dec2.init_params(mix(cfg.seed, 0x4431)));
    model
        .params
        .merge("aux.enc2", enc2.init_params(mix(cfg.seed, 0x4532)));
    model
        .params
        .merge("aux.dec1", dec1.init_params(mix(cfg.seed, 0x4433)));

    let history = {
        let Model { bundle, params } = &mut model;
        let bundle = &*bundle;
        run_training(params, data, cfg, move |tape, root, split, idx, _| {
            let (batch, labels) = batch_of(data, split, idx);
            let mut pred_rows = Vec::new();
            let (mut x1_rows, mut x1h_rows) = (Vec::new(), Vec::new());
            let (mut x2_rows, mut x2h_rows) = (Vec::new(), Vec::new());
            for s in &batch {
                let reps = bundle.encode_sample(tape, root, s)?;
                let z = reps[0].vector();
                pred_rows.push(bundle.head().apply(tape, &root.child("head"), z));
                let xhat2 = dec2.apply(tape, &root.child("aux.dec2"), z);
                let z_back = enc2.apply(tape, &root.child("aux.enc2"), xhat2);
                let xhat1 = dec1.apply(tape, &root.child("aux.dec1"), z_back);
                x1_rows.push(flat_leaf(tape, &s.modalities[0]));
                x1h_rows.push(xhat1);
                x2_rows.push(flat_leaf(tape, &s.modalities[1]));
                x2h_rows.push(xhat2);
            }
            let pred = tape.stack_rows(&pred_rows);
            let task = task_loss(tape, pred, &labels, bundle.task())?;
            let x1 = tape.stack_rows(&x1_rows);
            let x1h = tape.stack_rows(&x1h_rows);
            let x2 = tape.stack_rows(&x2_rows);
            let x2h = tape.stack_rows(&x2h_rows);
            let cycle = mctn_cycle_loss(tape, x1, x1h, x2, x2h)?;
            let total = tape.add(task, cycle);
            Ok((
                total,
                vec![("task".to_string(), task), ("cycle".to_string(), cycle)],
            ))
        })?
    };
    Ok((model, history))
}

fn flat_leaf(tape: &mut Tape, x: &ArrayD<f64>) -> Var {
    let v = tape.leaf(x.clone());
    if x.ndim() == 1 {
        v
    } else {
        tape.reshape(v, &[x.len()])
    }
}

// ---------------------------------------------------------------------------
// MFM
// ---------------------------------------------------------------------------

/// Factorized training: per-modality factors `z_i` (linear maps of encoder
/// outputs under `aux.factor{i}`), decoders `aux.dec{i}` reconstructing each
/// input from `[z_i; z_y]`, the task loss on the fused `z_y`, and a
/// `lambda`-weighted MMD pulling pooled latents toward a unit Gaussian.
/// Decoders and factors never enter the inference path.
pub fn train_mfm(
    model: &mut Model,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    lambda: f64,
    factor_dim: usize,
) -> Result<History> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::config("lambda", "must be a non-negative number"));
    }
    if factor_dim == 0 {
        return Err(Error::config("factor_dim", "must be >= 1"));
    }
    let m = model.bundle.num_encoders();
    let fused_dim = model.bundle.fusion().out_dim();
    let mut factors = Vec::with_capacity(m);
    let mut decoders = Vec::with_capacity(m);
    for i in 0..m {
        let mi = model.bundle.used_modalities()[i];
        let enc_out = model.bundle.encoder(i).out_dim();
        let x_len = data.specs[mi].num_entries();
        let factor = AuxiliaryHead::new(AuxKind::ToJointSpace, enc_out, factor_dim)?;
        let dec = AuxiliaryHead::new(AuxKind::Decoder, factor_dim + fused_dim, x_len)?;
        if model.params.get(&format!("aux.factor{i}.w")).is_none() {
            model.params.merge(
                &format!("aux.factor{i}"),
                factor.init_params(mix(cfg.seed, 0x4641_4354 ^ i as u64)),
            );
            model.params.merge(
                &format!("aux.dec{i}"),
                dec.init_params(mix(cfg.seed, 0x4445_4343 ^ i as u64)),
            );
        }
        factors.push(factor);
        decoders.push(dec);
    }
    let latent_dim = m * factor_dim + fused_dim;
    let Model { bundle, params } = model;
    let bundle = &*bundle;
    let factors = &factors;
    let decoders = &decoders;
    let mut prior_counter = 0u64;
    let seed = cfg.seed;
    run_training(params, data, cfg, move |tape, root, split, idx, _| {
        let (batch, labels) = batch_of(data, split, idx);
        let mut pred_rows = Vec::new();
        let mut latent_rows = Vec::new();
        let mut x_rows: Vec<Vec<Var>> = vec![Vec::new(); m];
        let mut xh_rows: Vec<Vec<Var>> = vec![Vec::new(); m];
        for s in &batch {
            let reps = bundle.encode_sample(tape, root, s)?;
            let z_y = bundle
                .fusion()
                .fuse(tape, &root.child("fusion"), &reps)?;
            pred_rows.push(bundle.head().apply(tape, &root.child("head"), z_y));
            let mut latent_parts = Vec::with_capacity(m + 1);
            for (i, rep) in reps.iter().enumerate() {
                let z_i = factors[i].apply(tape, &root.child(&format!("aux.factor{i}")), rep.vector());
                let dec_in = tape.concat(&[z_i, z_y]);
                let xhat = decoders[i].apply(tape, &root.child(&format!("aux.dec{i}")), dec_in);
                let mi = bundle.used_modalities()[i];
                x_rows[i].push(flat_leaf(tape, &s.modalities[mi]));
                xh_rows[i].push(xhat);
                latent_parts.push(z_i);
            }
            latent_parts.push(z_y);
            latent_rows.push(tape.concat(&latent_parts));
        }
        let pred = tape.stack_rows(&pred_rows);
        let task = task_loss(tape, pred, &labels, bundle.task())?;
        let xs: Vec<Var> = x_rows.iter().map(|rows| tape.stack_rows(rows)).collect();
        let xhats: Vec<Var> = xh_rows.iter().map(|rows| tape.stack_rows(rows)).collect();
        let latents = tape.stack_rows(&latent_rows);
        let prior = tape.leaf(gaussian_reference(
            batch.len(),
            latent_dim,
            mix(seed ^ 0x4d46_4d50, prior_counter),
        ));
        prior_counter += 1;
        let obj = mfm_objective(
            tape,
            &xs,
            &xhats,
            task,
            latents,
            prior,
            lambda,
            Bandwidth::Median,
        )?;
        let total = obj.total(tape);
        let terms = obj
            .terms()
            .iter()
            .map(|t| (t.name.clone(), t.value))
            .collect();
        Ok((total, terms))
    })
}

/// The factorized representations `(z_1..z_M, z_y)` of one sample, for
/// inspection after MFM training.
pub fn mfm_factors(
    model: &Model,
    sample: &MultimodalSample,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if model.params.get("aux.factor0.w").is_none() {
        return Err(Error::config(
            "mfm_factors",
            "model has no factor parameters; train with train_mfm first",
        ));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let root = bound.root();
    let reps = model.bundle.encode_sample(&mut tape, &root, sample)?;
    let z_y = model
        .bundle
        .fusion()
        .fuse(&mut tape, &root.child("fusion"), &reps)?;
    let mut zs = Vec::with_capacity(reps.len());
    for (i, rep) in reps.iter().enumerate() {
        let w = root.child(&format!("aux.factor{i}"));
        let factor_dim = tape.value(w.var("b")).len();
        let head = AuxiliaryHead::new(
            AuxKind::ToJointSpace,
            model.bundle.encoder(i).out_dim(),
            factor_dim,
        )?;
        let z_i = head.apply(&mut tape, &w, rep.vector());
        zs.push(tape.value(z_i).iter().copied().collect());
    }
    Ok((zs, tape.value(z_y).iter().copied().collect()))
}
