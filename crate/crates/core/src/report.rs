//! On-disk artifact layer for experiment runs: the JSON record types one
//! run directory holds, hashing and summary-statistics helpers, and the
//! SVG/CSV renderers for curves and leaderboards.
//!
//! A completed run directory looks like
//!
//! ```text
//! <run>/config.json          exact config the run executed
//! <run>/seed_<k>/checkpoint.{json,bin}   trained parameters
//! <run>/seed_<k>/history.json            per-epoch losses and terms
//! <run>/seed_<k>/reports.json            the deterministic three-axis report
//! <run>/seed_<k>/timing.json             wall-clock and memory measurements
//! <run>/seed_<k>/predictions.json        raw predictions for re-derivation
//! <run>/seed_<k>/curves/*.csv            one sigma,value table per partition
//! <run>/summary.json         mean ± std across seeds
//! <run>/manifest.json        written last; its presence marks completion
//! ```
//!
//! Everything except `timing.json` is a pure function of the config, so a
//! rerun must reproduce those files byte for byte.

use crate::error::{Error, Result};
use crate::evalmetrics::{PerformanceReport, RobustnessCurve, RobustnessScores};
use crate::synthdata::Label;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Version stamp embedded in configs and manifests.
pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORTS_FILE: &str = "reports.json";
pub const TIMING_FILE: &str = "timing.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const CURVES_DIR: &str = "curves";
pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const ERROR_FILE: &str = "error.json";

/// `seed_<k>` directory name for one seed.
pub fn seed_dir_name(seed: u64) -> String {
    format!("seed_{seed}")
}

// ---------------------------------------------------------------------------
// JSON + hashing helpers
// ---------------------------------------------------------------------------

/// Pretty JSON with a trailing newline — the one serialization every
/// persisted artifact uses, so byte-identity claims are well-defined.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json("<serialize>", e))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = to_canonical_json(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Lowercase hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean and sample standard deviation (0 when fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Persisted record types
// ---------------------------------------------------------------------------

/// The deterministic slice of the complexity measurements (wall-clock and
/// memory live in [`TimingRecord`] so `reports.json` stays byte-stable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAccounting {
    pub train_param_count: usize,
    pub inference_param_count: usize,
    pub input_bits: u64,
}

/// Robustness artifacts for one seed: the model's curves, the late-fusion
/// reference curves trained alongside it, and the τ/ρ scores averaged over
/// partitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub curves: Vec<RobustnessCurve>,
    pub baseline_curves: Vec<RobustnessCurve>,
    pub scores: RobustnessScores,
}

/// Everything deterministic that one seed produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReports {
    pub performance: PerformanceReport,
    pub complexity: ParamAccounting,
    pub robustness: RobustnessRecord,
    /// GradBlend stream weights, when that structure trained the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blend_weights: Option<Vec<f64>>,
}

/// Wall-clock and memory measurements — excluded from determinism checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub train_time_s: f64,
    pub inference_time_s: f64,
    pub peak_memory_bytes: u64,
    /// Training time of the internal late-fusion reference (equals
    /// `train_time_s` when the run is its own reference).
    pub baseline_train_time_s: f64,
}

/// Predictions for one corruption level of one partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPredictions {
    pub sigma: f64,
    pub predictions: Vec<Vec<f64>>,
}

/// Predictions across the level ladder of one partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPredictions {
    pub partition: String,
    pub levels: Vec<LevelPredictions>,
}

/// Raw model outputs for every evaluation cell, stored so `audit` can
/// re-derive every metric in `reports.json` without re-running the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsRecord {
    pub task: crate::synthdata::TaskKind,
    pub labels: Vec<Label>,
    pub clean: Vec<Vec<f64>>,
    pub grid: Vec<PartitionPredictions>,
    pub baseline_clean: Vec<Vec<f64>>,
    pub baseline_grid: Vec<PartitionPredictions>,
}

/// Per-metric mean ± std across completed seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// `summary.json`: the cross-seed roll-up of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed_seeds: Vec<u64>,
    pub stats: Vec<SummaryStat>,
}

impl RunSummary {
    pub fn stat(&self, name: &str) -> Option<&SummaryStat> {
        self.stats.iter().find(|s| s.name == name)
    }
}

/// `manifest.json`: written after every other artifact, so its presence
/// marks a run as complete. Hashes tie the results to the exact config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// SHA-256 of the stored `config.json` bytes.
    pub config_sha256: String,
    /// SHA-256 of the canonical JSON of the config's dataset section —
    /// runs are comparable only when these match.
    pub dataset_sha256: String,
    pub seeds: Vec<u64>,
    /// Seeds that produced reports (divergent seeds are listed in `seeds`
    /// but not here).
    pub completed_seeds: Vec<u64>,
}

/// `error.json` for a seed whose training diverged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

/// One named line or point set in a chart.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

const W: f64 = 640.0;
const H: f64 = 440.0;
const ML: f64 = 64.0; // left margin
const MR: f64 = 24.0;
const MT: f64 = 40.0;
const MB: f64 = 52.0;

fn data_range(series: &[Series], axis: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for p in &s.points {
            let v = if axis == 0 { p.0 } else { p.1 };
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A self-contained chart: axes with ticks, a legend, and one polyline
/// (and point markers) per series.
pub fn render_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    lines: bool,
) -> String {
    let (x0, x1) = data_range(series, 0);
    let (y0, y1) = data_range(series, 1);
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    ));

    // axes
    out.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR
    ));
    out.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let xp = sx(xv);
        let yp = sy(yv);
        out.push_str(&format!(
            "<line x1=\"{xp}\" y1=\"{0}\" x2=\"{xp}\" y2=\"{1}\" stroke=\"black\"/>\n",
            H - MB,
            H - MB + 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            fmt_tick(xv)
        ));
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{yp}\" x2=\"{ML}\" y2=\"{yp}\" stroke=\"black\"/>\n",
            ML - 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            yp + 4.0,
            fmt_tick(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0,
        xml_escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>\n",
        (MT + H - MB) / 2.0,
        xml_escape(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if lines && s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", sx(x), sy(y)))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        // legend entry
        let ly = MT + 6.0 + i as f64 * 16.0;
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            W - MR - 130.0,
            W - MR - 110.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            W - MR - 104.0,
            ly + 4.0,
            xml_escape(&s.name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Replace anything outside `[A-Za-z0-9._-]` so partition names become
/// safe file stems.
pub fn sanitize_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn json_round_trips_byte_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.json");
        let value = TimingRecord {
            train_time_s: 1.25,
            inference_time_s: 0.03125,
            peak_memory_bytes: 1024,
            baseline_train_time_s: 1.25,
        };
        write_json(&path, &value).unwrap();
        let text1 = std::fs::read_to_string(&path).unwrap();
        assert!(text1.ends_with('\n'));
        let back: TimingRecord = read_json(&path).unwrap();
        assert_eq!(back, value);
        write_json(&path, &back).unwrap();
        let text2 = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text1, text2);
    }

    #[test]
    fn sha256_matches_the_known_empty_and_abc_digests() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn mean_std_handles_small_samples() {
        let (m, s) = mean_std(&[2.0]);
        assert_eq!((m, s), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2.0_f64.sqrt()).abs() < 1e-12);
        let (m, s) = mean_std(&[4.0, 4.0, 4.0, 4.0]);
        assert_eq!((m, s), (4.0, 0.0));
    }

    #[test]
    fn charts_contain_every_series_and_escape_labels() {
        let series = vec![
            Series {
                name: "model <a&b>".into(),
                points: vec![(0.0, 0.9), (0.5, 0.7), (1.0, 0.4)],
            },
            Series {
                name: "baseline".into(),
                points: vec![(0.0, 0.8), (0.5, 0.6), (1.0, 0.5)],
            },
        ];
        let svg = render_chart("robustness", "sigma", "accuracy", &series, true);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 6);
        assert!(svg.contains("model &lt;a&amp;b&gt;"));
        assert!(!svg.contains("<a&b>"));
        let scatter = render_chart("tradeoff", "complexity", "performance", &series, false);
        assert_eq!(scatter.matches("<polyline").count(), 0);
        assert_eq!(scatter.matches("<circle").count(), 6);
    }

    #[test]
    fn stems_are_filesystem_safe() {
        assert_eq!(sanitize_stem("tokens"), "tokens");
        assert_eq!(sanitize_stem("a b/c:d"), "a-b-c-d");
        assert_eq!(sanitize_stem("x_1.csv"), "x_1.csv");
    }
}
