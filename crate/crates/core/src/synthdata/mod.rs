//! Seeded synthetic multimodal datasets, the dataset/split abstraction, and
//! word-level temporal alignment.
//!
//! Three generators cover the structural challenges the harness is meant to
//! probe: [`make_redundant`] plants a shared latent that every modality sees
//! through its own noisy linear view, [`make_interaction`] plants a purely
//! second-order (XOR) signal that no additive model can recover, and
//! [`make_temporal`] plants cross-rate co-occurrence events whose label is
//! only visible after aligning modalities onto a common token grid.
//!
//! Every generator is a pure function of its arguments and seed: calling it
//! twice yields bit-identical splits. Datasets round-trip through a simple
//! on-disk directory format (see [`io`]), and anything else that can produce
//! a [`DatasetSplits`] — an external loader, a fixture — plugs into the rest
//! of the harness unchanged.

mod align;
mod generators;
pub mod io;

pub use align::{word_align, AlignedSequence};
pub use generators::{make_interaction, make_redundant, make_temporal};
pub use io::{load_dataset, save_dataset};

use crate::error::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Structural kind of a modality; constrains which encoders apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityKind {
    StaticVector,
    TemporalSequence,
    ImageGrid,
    Set,
    Table,
}

/// Shape and kind of one modality, fixed across a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// Dimension list; temporal kinds are `[T, d]` (time-length first).
    pub shape: Vec<usize>,
    /// Steps per unit time; temporal kinds only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<usize>,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.iter().any(|&s| s == 0) {
            return Err(Error::config(
                format!("modality `{}` shape", self.name),
                "every shape entry must be >= 1",
            ));
        }
        if self.kind == ModalityKind::TemporalSequence {
            if self.shape.len() != 2 {
                return Err(Error::config(
                    format!("modality `{}` shape", self.name),
                    "temporal modalities need shape [T, d]",
                ));
            }
            if self.sample_rate.is_none() {
                return Err(Error::config(
                    format!("modality `{}` sample_rate", self.name),
                    "temporal modalities need a sample rate",
                ));
            }
        }
        Ok(())
    }

    /// Total number of scalar entries in one sample of this modality.
    pub fn num_entries(&self) -> usize {
        self.shape.iter().product()
    }
}

/// What kind of prediction the dataset asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { dim: usize },
}

/// Ground-truth target for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Real(Vec<f64>),
}

impl Label {
    /// Class index; panics on regression labels (caller knows the task kind).
    pub fn class(&self) -> usize {
        match self {
            Label::Class(c) => *c,
            Label::Real(_) => panic!("regression label where class index expected"),
        }
    }

    pub fn real(&self) -> &[f64] {
        match self {
            Label::Real(v) => v,
            Label::Class(_) => panic!("class label where regression target expected"),
        }
    }
}

/// One draw of (per-modality arrays, label): the unit all pipelines consume.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub modalities: Vec<ArrayD<f64>>,
    pub label: Label,
}

/// A full dataset: disjoint train/valid/test splits over shared specs.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<MultimodalSample>,
    pub valid: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    pub specs: Vec<ModalitySpec>,
    pub task: TaskKind,
    pub seed: u64,
}

impl DatasetSplits {
    pub fn num_modalities(&self) -> usize {
        self.specs.len()
    }

    pub fn num_samples(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn split(&self, which: Split) -> &[MultimodalSample] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Check every sample against the specs (shape conformance, finiteness).
    pub fn validate(&self) -> Result<()> {
        for spec in &self.specs {
            spec.validate()?;
        }
        for (name, samples) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            for (i, s) in samples.iter().enumerate() {
                if s.modalities.len() != self.specs.len() {
                    return Err(Error::dim(
                        format!("{name}[{i}]"),
                        format!(
                            "sample has {} modalities, specs describe {}",
                            s.modalities.len(),
                            self.specs.len()
                        ),
                    ));
                }
                for (m, (arr, spec)) in s.modalities.iter().zip(&self.specs).enumerate() {
                    if arr.shape() != spec.shape.as_slice() {
                        return Err(Error::dim(
                            format!("{name}[{i}] modality {m}"),
                            format!("shape {:?} != spec {:?}", arr.shape(), spec.shape),
                        ));
                    }
                    if arr.iter().any(|v| !v.is_finite()) {
                        return Err(Error::malformed(
                            format!("{name}[{i}] modality {m}"),
                            "non-finite entry",
                        ));
                    }
                }
                match (&s.label, &self.task) {
                    (Label::Class(c), TaskKind::Classification { classes }) => {
                        if c >= classes {
                            return Err(Error::malformed(
                                format!("{name}[{i}] label"),
                                format!("class {c} out of range 0..{classes}"),
                            ));
                        }
                    }
                    (Label::Real(v), TaskKind::Regression { dim }) => {
                        if v.len() != *dim || v.iter().any(|x| !x.is_finite()) {
                            return Err(Error::malformed(
                                format!("{name}[{i}] label"),
                                "regression target has wrong dim or non-finite entry",
                            ));
                        }
                    }
                    _ => {
                        return Err(Error::malformed(
                            format!("{name}[{i}] label"),
                            "label kind does not match task kind",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Names of the three dataset splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Per-token (start, end) times annotating a token-granularity modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordIntervals {
    intervals: Vec<(f64, f64)>,
}

impl WordIntervals {
    /// Build from (start, end) pairs; enforces `0 <= s < e` and sortedness.
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(s, e)) in intervals.iter().enumerate() {
            if !(s >= 0.0 && s < e) {
                return Err(Error::config(
                    format!("intervals[{i}]"),
                    format!("need 0 <= start < end, got ({s}, {e})"),
                ));
            }
            if i > 0 && intervals[i - 1].0 > s {
                return Err(Error::config(
                    format!("intervals[{i}]"),
                    "intervals must be sorted by start time",
                ));
            }
        }
        Ok(Self { intervals })
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Rescale interval times into the row units of a sequence sampled at
    /// `rate` steps per unit time, for feeding [`word_align`].
    pub fn scaled(&self, rate: f64) -> WordIntervals {
        WordIntervals {
            intervals: self
                .intervals
                .iter()
                .map(|&(s, e)| (s * rate, e * rate))
                .collect(),
        }
    }
}

/// Deterministic 80/10/10 partition of `samples` by a seeded shuffle.
pub(crate) fn split_80_10_10(
    mut samples: Vec<MultimodalSample>,
    specs: Vec<ModalitySpec>,
    task: TaskKind,
    seed: u64,
) -> DatasetSplits {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed ^ 0x53504c4954u64);
    samples.shuffle(&mut rng);
    let n = samples.len();
    let n_valid = n / 10;
    let n_test = n / 10;
    let test = samples.split_off(n - n_test);
    let valid = samples.split_off(n - n_test - n_valid);
    DatasetSplits {
        train: samples,
        valid,
        test,
        specs,
        task,
        seed,
    }
}
