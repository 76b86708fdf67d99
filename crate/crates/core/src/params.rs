//! Named, ordered parameter storage shared by encoders, fusion operators,
//! and heads.
//!
//! A [`ParamSet`] is a flat list of (name, array) entries with a fixed
//! order, which is what makes training deterministic: optimizers walk
//! entries by index, and binding a set onto a [`Tape`] yields one leaf per
//! entry in the same order every time. Component-local names are namespaced
//! when sets are merged into a model (`enc0.layer1.w`, `fusion.factors.0`),
//! and a [`Scope`] lets component code keep using its local names.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an entry; names must be unique within a set.
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
    }

    /// Absorb `other`, prefixing each of its names with `prefix.`.
    pub fn merge(&mut self, prefix: &str, other: ParamSet) {
        for (name, value) in other.entries {
            self.push(format!("{prefix}.{name}"), value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    /// Number of entries (arrays).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn entry(&self, idx: usize) -> (&str, &ArrayD<f64>) {
        let (n, v) = &self.entries[idx];
        (n.as_str(), v)
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.entries[idx].1
    }

    /// Register every entry as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), tape.leaf(v.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Write `<stem>.json` (manifest) and `<stem>.bin` (all entries
    /// concatenated as little-endian f64). `meta` is stored verbatim in the
    /// manifest for callers that need to tag the set (kind, shapes, seed).
    pub fn save(&self, stem: &Path, meta: serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            dtype: "f64le".to_string(),
            meta,
            entries: self
                .entries
                .iter()
                .map(|(n, v)| ManifestEntry {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let json_path = stem.with_extension("json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json(json_path.display().to_string(), e))?;
        std::fs::write(&json_path, json)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;

        let bin_path = stem.with_extension("bin");
        let mut buf = Vec::with_capacity(self.num_scalars() * 8);
        for (_, v) in &self.entries {
            for &x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(&bin_path)
            .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        Ok(())
    }

    /// Load a set written by [`ParamSet::save`]; returns the set and its meta.
    pub fn load(stem: &Path) -> Result<(ParamSet, serde_json::Value)> {
        let json_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&json_path)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::json(json_path.display().to_string(), e))?;
        if manifest.dtype != "f64le" {
            return Err(Error::malformed(
                json_path.display().to_string(),
                format!("unsupported dtype `{}`", manifest.dtype),
            ));
        }

        let bin_path = stem.with_extension("bin");
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        let total: usize = manifest
            .entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != total * 8 {
            return Err(Error::malformed(
                bin_path.display().to_string(),
                format!("expected {} bytes, found {}", total * 8, bytes.len()),
            ));
        }

        let mut set = ParamSet::new();
        let mut off = 0;
        for e in &manifest.entries {
            let count: usize = e.shape.iter().product();
            let vals: Vec<f64> = bytes[off..off + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += count * 8;
            set.push(
                e.name.clone(),
                ArrayD::from_shape_vec(IxDyn(&e.shape), vals).unwrap(),
            );
        }
        Ok((set, manifest.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    #[serde(default)]
    meta: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Tape leaves for every entry of a bound [`ParamSet`], in entry order.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Rebuild from names and leaf vars (used by gradient-check harnesses
    /// that create the leaves themselves).
    pub fn from_pairs(vars: Vec<(String, Var)>) -> Self {
        Self { vars }
    }

    /// Leaf var for a fully qualified name. Panics on unknown names: a
    /// lookup miss is a wiring bug, not a runtime condition.
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// (name, var) pairs in entry order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Var of the i-th entry (entry order matches the originating set).
    pub fn var_at(&self, idx: usize) -> Var {
        self.vars[idx].1
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Root scope for resolving component-local names.
    pub fn root(&self) -> Scope<'_> {
        Scope {
            bound: self,
            prefix: String::new(),
        }
    }
}

/// Name resolver carrying a namespace prefix, so component code can refer to
/// its parameters by local name regardless of where the model mounted it.
pub struct Scope<'a> {
    bound: &'a BoundParams,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn var(&self, local: &str) -> Var {
        if self.prefix.is_empty() {
            self.bound.var(local)
        } else {
            self.bound.var(&format!("{}.{local}", self.prefix))
        }
    }

    pub fn child(&self, segment: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: if self.prefix.is_empty() {
                segment.to_string()
            } else {
                format!("{}.{segment}", self.prefix)
            },
        }
    }
}
