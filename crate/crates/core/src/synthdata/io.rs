//! On-disk dataset directories.
//!
//! A dataset directory holds `spec.json` — modality specs, seed, task kind,
//! split counts, and labels — plus one flat binary file per (split,
//! modality) named `<split>_<modality-name>.bin`, containing the samples of
//! that split concatenated row-major as little-endian 32-bit floats. Any
//! external dataset written in this format loads into [`DatasetSplits`] and
//! flows through the rest of the harness unchanged.

use super::{DatasetSplits, Label, ModalitySpec, MultimodalSample, Split, TaskKind};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct SpecFile {
    seed: u64,
    task: TaskKind,
    counts: Counts,
    modalities: Vec<ModalitySpec>,
    labels: SplitLabels,
}

#[derive(Serialize, Deserialize)]
struct Counts {
    train: usize,
    valid: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct SplitLabels {
    train: Vec<Label>,
    valid: Vec<Label>,
    test: Vec<Label>,
}

fn bin_name(split: Split, spec: &ModalitySpec) -> String {
    format!("{}_{}.bin", split.as_str(), spec.name)
}

/// Write a dataset directory (creating it if needed). Arrays are stored as
/// little-endian f32, so values survive with single precision.
pub fn save_dataset(dir: &Path, data: &DatasetSplits) -> Result<()> {
    data.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let spec = SpecFile {
        seed: data.seed,
        task: data.task,
        counts: Counts {
            train: data.train.len(),
            valid: data.valid.len(),
            test: data.test.len(),
        },
        modalities: data.specs.clone(),
        labels: SplitLabels {
            train: data.train.iter().map(|s| s.label.clone()).collect(),
            valid: data.valid.iter().map(|s| s.label.clone()).collect(),
            test: data.test.iter().map(|s| s.label.clone()).collect(),
        },
    };
    let spec_path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(&spec)
        .map_err(|e| Error::json(spec_path.display().to_string(), e))?;
    std::fs::write(&spec_path, json).map_err(|e| Error::io(spec_path.display().to_string(), e))?;

    for split in Split::ALL {
        let samples = data.split(split);
        for (m, mspec) in data.specs.iter().enumerate() {
            let path = dir.join(bin_name(split, mspec));
            let mut buf =
                Vec::with_capacity(samples.len() * mspec.num_entries() * std::mem::size_of::<f32>());
            for s in samples {
                for &v in s.modalities[m].iter() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            let mut f = std::fs::File::create(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            f.write_all(&buf)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`] (or by anything else
/// that follows the format). Shape or count mismatches between `spec.json`
/// and the binary files are reported as malformed data.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let spec_path = dir.join("spec.json");
    let text = std::fs::read_to_string(&spec_path)
        .map_err(|e| Error::io(spec_path.display().to_string(), e))?;
    let spec: SpecFile = serde_json::from_str(&text)
        .map_err(|e| Error::json(spec_path.display().to_string(), e))?;

    for m in &spec.modalities {
        m.validate()?;
    }

    let load_split = |split: Split, labels: &[Label], count: usize| -> Result<Vec<MultimodalSample>> {
        if labels.len() != count {
            return Err(Error::malformed(
                spec_path.display().to_string(),
                format!(
                    "{} declares {count} samples but has {} labels",
                    split.as_str(),
                    labels.len()
                ),
            ));
        }
        let mut per_modality: Vec<Vec<ArrayD<f64>>> = Vec::with_capacity(spec.modalities.len());
        for mspec in &spec.modalities {
            let path = dir.join(bin_name(split, mspec));
            let mut bytes = Vec::new();
            std::fs::File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let entries = mspec.num_entries();
            let expected = count * entries * std::mem::size_of::<f32>();
            if bytes.len() != expected {
                return Err(Error::malformed(
                    path.display().to_string(),
                    format!("expected {expected} bytes, found {}", bytes.len()),
                ));
            }
            let mut arrays = Vec::with_capacity(count);
            for i in 0..count {
                let vals: Vec<f64> = bytes[i * entries * 4..(i + 1) * entries * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                arrays.push(ArrayD::from_shape_vec(IxDyn(&mspec.shape), vals).unwrap());
            }
            per_modality.push(arrays);
        }
        Ok((0..count)
            .map(|i| MultimodalSample {
                modalities: per_modality.iter().map(|col| col[i].clone()).collect(),
                label: labels[i].clone(),
            })
            .collect())
    };

    let data = DatasetSplits {
        train: load_split(Split::Train, &spec.labels.train, spec.counts.train)?,
        valid: load_split(Split::Valid, &spec.labels.valid, spec.counts.valid)?,
        test: load_split(Split::Test, &spec.labels.test, spec.counts.test)?,
        specs: spec.modalities,
        task: spec.task,
        seed: spec.seed,
    };
    data.validate()?;
    Ok(data)
}
