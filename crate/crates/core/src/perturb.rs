//! Seeded test-time corruptions: typed per-modality families (typos, pixel
//! noise, dropped time steps, shuffled table entries, shrinking sets) plus
//! correlated multimodal imperfections driven by a single shared coin, and
//! the noisy test grid that organizes them into per-modality partitions.
//!
//! Every family is a pure function of (input, spec): level 0 returns the
//! input byte-identically, and the master seed is split into per-sample
//! streams by hashing the sample index, so grids are order-independent.

use crate::error::{Error, Result};
use crate::synthdata::{DatasetSplits, ModalityKind, ModalitySpec, MultimodalSample};
use crate::training::mix;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Target string selecting every modality at once.
pub const ALL_MODALITIES: &str = "ALL";

/// The corruption families, grouped by the data they understand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbFamily {
    // text tokens
    Typo,
    StickyKeys,
    Omission,
    Swap,
    MiddlePermute,
    // images
    GaussianPixel,
    SaltPepper,
    Grating,
    Grayscale,
    Contrast,
    Invert,
    WhiteBalance,
    Colorize,
    FlipHorizontal,
    Crop,
    Rotate,
    Translate,
    // time series / audio
    WhiteNoise,
    RandomDrop,
    StructuredDrop,
    // tabular rows and static vectors
    EntryDrop,
    EntrySwap,
    // sets
    SetDrop,
    SetNoise,
    // whole samples
    CorrelatedNoise,
    CorrelatedDrop,
    TemporalDrop,
    StructuredTemporalDrop,
    MissingModality,
}

impl PerturbFamily {
    /// Whether this family can corrupt one modality of the given kind.
    /// Text and multimodal families corrupt other shapes of data and
    /// return `false` for every kind.
    pub fn applies_to(self, kind: ModalityKind) -> bool {
        use PerturbFamily::*;
        match self {
            Typo | StickyKeys | Omission | Swap | MiddlePermute => false,
            GaussianPixel | SaltPepper | Grating | Grayscale | Contrast | Invert
            | WhiteBalance | Colorize | FlipHorizontal | Crop | Rotate | Translate => {
                kind == ModalityKind::ImageGrid
            }
            WhiteNoise | RandomDrop | StructuredDrop => kind == ModalityKind::TemporalSequence,
            EntryDrop | EntrySwap => {
                matches!(kind, ModalityKind::StaticVector | ModalityKind::Table)
            }
            SetDrop | SetNoise => kind == ModalityKind::Set,
            CorrelatedNoise | CorrelatedDrop | TemporalDrop | StructuredTemporalDrop
            | MissingModality => false,
        }
    }

    /// Whether this family corrupts whole samples rather than one modality.
    pub fn is_multimodal(self) -> bool {
        use PerturbFamily::*;
        matches!(
            self,
            CorrelatedNoise | CorrelatedDrop | TemporalDrop | StructuredTemporalDrop
                | MissingModality
        )
    }
}

/// Extra knobs some families read.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    /// Length `m` of the window for structured drops; defaults to a fifth
    /// of the sequence when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

/// One corruption: which modality, which family, at what level, under
/// which seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub target: String,
    pub family: PerturbFamily,
    /// Probability or magnitude in `[0, 1]`, depending on the family.
    pub level: f64,
    #[serde(default)]
    pub params: PerturbParams,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(
        target: impl Into<String>,
        family: PerturbFamily,
        level: f64,
        seed: u64,
    ) -> Result<Self> {
        let spec = PerturbationSpec {
            target: target.into(),
            family,
            level,
            params: PerturbParams::default(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.params.window = Some(window);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.level) {
            return Err(Error::config("level", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(mix(self.seed, 0x5045_5254))
    }
}

/// Always consumes exactly one draw, so streams stay aligned across levels.
fn coin(rng: &mut ChaCha20Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// Text
// ---------------------------------------------------------------------------

/// Physically adjacent keys on a QWERTY layout, lowercase letters only.
fn qwerty_neighbors(c: char) -> Option<&'static [char]> {
    Some(match c {
        'q' => &['w', 'a'],
        'w' => &['q', 'e', 'a', 's'],
        'e' => &['w', 'r', 's', 'd'],
        'r' => &['e', 't', 'd', 'f'],
        't' => &['r', 'y', 'f', 'g'],
        'y' => &['t', 'u', 'g', 'h'],
        'u' => &['y', 'i', 'h', 'j'],
        'i' => &['u', 'o', 'j', 'k'],
        'o' => &['i', 'p', 'k', 'l'],
        'p' => &['o', 'l'],
        'a' => &['q', 'w', 's', 'z'],
        's' => &['w', 'e', 'a', 'd', 'z', 'x'],
        'd' => &['e', 'r', 's', 'f', 'x', 'c'],
        'f' => &['r', 't', 'd', 'g', 'c', 'v'],
        'g' => &['t', 'y', 'f', 'h', 'v', 'b'],
        'h' => &['y', 'u', 'g', 'j', 'b', 'n'],
        'j' => &['u', 'i', 'h', 'k', 'n', 'm'],
        'k' => &['i', 'o', 'j', 'l', 'm'],
        'l' => &['o', 'p', 'k'],
        'z' => &['a', 's', 'x'],
        'x' => &['s', 'd', 'z', 'c'],
        'c' => &['d', 'f', 'x', 'v'],
        'v' => &['f', 'g', 'c', 'b'],
        'b' => &['g', 'h', 'v', 'n'],
        'n' => &['h', 'j', 'b', 'm'],
        'm' => &['j', 'k', 'n'],
        _ => return None,
    })
}

/// Keyboard-style token corruptions. Swaps and middle permutations leave
/// the first and last letters of a word in place.
pub fn perturb_text(tokens: &[String], spec: &PerturbationSpec) -> Result<Vec<String>> {
    spec.validate()?;
    use PerturbFamily::*;
    if !matches!(spec.family, Typo | StickyKeys | Omission | Swap | MiddlePermute) {
        return Err(Error::config(
            "family",
            format!("{:?} cannot corrupt text tokens", spec.family),
        ));
    }
    if spec.level == 0.0 {
        return Ok(tokens.to_vec());
    }
    let p = spec.level;
    let mut rng = spec.rng();
    let mut out = Vec::with_capacity(tokens.len());
    for token in tokens {
        let chars: Vec<char> = token.chars().collect();
        let word = match spec.family {
            Typo => chars
                .iter()
                .map(|&c| {
                    let lower = c.to_ascii_lowercase();
                    match qwerty_neighbors(lower) {
                        Some(nbrs) if coin(&mut rng, p) => {
                            let pick = nbrs[rng.random_range(0..nbrs.len())];
                            if c.is_uppercase() {
                                pick.to_ascii_uppercase()
                            } else {
                                pick
                            }
                        }
                        _ => c,
                    }
                })
                .collect(),
            StickyKeys => {
                let mut w = Vec::new();
                for &c in &chars {
                    w.push(c);
                    if c.is_alphabetic() && coin(&mut rng, p) {
                        w.push(c);
                    }
                }
                w
            }
            Omission => chars
                .iter()
                .filter(|c| !(c.is_alphabetic() && coin(&mut rng, p)))
                .copied()
                .collect(),
            Swap => {
                let mut w = chars.clone();
                if w.len() >= 4 {
                    let mut i = 1;
                    // both positions must be interior letters
                    while i + 1 <= w.len() - 2 {
                        if coin(&mut rng, p) {
                            w.swap(i, i + 1);
                            i += 2;
                        } else {
                            i += 1;
                        }
                    }
                }
                w
            }
            MiddlePermute => {
                let mut w = chars.clone();
                if coin(&mut rng, p) && w.len() >= 4 {
                    let end = w.len() - 1;
                    w[1..end].shuffle(&mut rng);
                }
                w
            }
            _ => unreachable!(),
        };
        out.push(word.into_iter().collect());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// `[H, W]` or `[H, W, C]` pixels; any value above 1 means a `[0, 255]`
/// image, otherwise `[0, 1]`.
fn image_range(img: &ArrayD<f64>) -> f64 {
    if img.iter().any(|&v| v > 1.0) {
        255.0
    } else {
        1.0
    }
}

/// Pixel-level and geometric image corruptions. Geometric families keep
/// the array shape, filling uncovered pixels with zeros; values are
/// clipped back to the input's range.
pub fn perturb_image(img: &ArrayD<f64>, spec: &PerturbationSpec) -> Result<ArrayD<f64>> {
    spec.validate()?;
    use PerturbFamily::*;
    let color_only = matches!(spec.family, Grayscale | WhiteBalance | Colorize);
    if !matches!(
        spec.family,
        GaussianPixel
            | SaltPepper
            | Grating
            | Grayscale
            | Contrast
            | Invert
            | WhiteBalance
            | Colorize
            | FlipHorizontal
            | Crop
            | Rotate
            | Translate
    ) {
        return Err(Error::config(
            "family",
            format!("{:?} cannot corrupt images", spec.family),
        ));
    }
    let shape = img.shape().to_vec();
    if shape.len() != 2 && shape.len() != 3 {
        return Err(Error::dim("perturb_image", "expected [H, W] or [H, W, C]"));
    }
    let channels = if shape.len() == 3 { shape[2] } else { 1 };
    if color_only && channels != 3 {
        return Err(Error::dim(
            "perturb_image",
            format!("{:?} needs 3 channels, image has {channels}", spec.family),
        ));
    }
    if spec.level == 0.0 {
        return Ok(img.clone());
    }

    let hi = image_range(img);
    let (h, w) = (shape[0], shape[1]);
    // work on an [H, W, C] copy and restore the original shape at the end
    let mut pix = img
        .clone()
        .into_shape_with_order(IxDyn(&[h, w, channels]))
        .expect("image reshape");
    let p = spec.level;
    let mut rng = spec.rng();
    let clip = |v: f64| v.clamp(0.0, hi);

    match spec.family {
        GaussianPixel => {
            // level is the noise variance on the unit scale
            let std = p.sqrt() * hi;
            for v in pix.iter_mut() {
                *v = clip(*v + std * gauss(&mut rng));
            }
        }
        SaltPepper => {
            for i in 0..h {
                for j in 0..w {
                    if coin(&mut rng, p) {
                        let mut brightness = 0.0;
                        for k in 0..channels {
                            brightness += pix[[i, j, k]];
                        }
                        brightness /= channels as f64;
                        // bright speckles in dark regions, dead pixels in bright ones
                        let target = if brightness < hi / 2.0 { hi } else { 0.0 };
                        for k in 0..channels {
                            pix[[i, j, k]] = target;
                        }
                    }
                }
            }
        }
        Grating => {
            let freq = std::f64::consts::TAU / 8.0;
            for i in 0..h {
                for j in 0..w {
                    let wave = p * hi * ((i + j) as f64 * freq).sin();
                    for k in 0..channels {
                        pix[[i, j, k]] = clip(pix[[i, j, k]] + wave);
                    }
                }
            }
        }
        Grayscale => {
            for i in 0..h {
                for j in 0..w {
                    let luma = 0.3 * pix[[i, j, 0]] + 0.59 * pix[[i, j, 1]]
                        + 0.11 * pix[[i, j, 2]];
                    for k in 0..3 {
                        pix[[i, j, k]] = (1.0 - p) * pix[[i, j, k]] + p * luma;
                    }
                }
            }
        }
        Contrast => {
            let mean = pix.mean().unwrap_or(0.0);
            pix.mapv_inplace(|v| mean + (1.0 - p) * (v - mean));
        }
        Invert => {
            if coin(&mut rng, p) {
                pix.mapv_inplace(|v| hi - v);
            }
        }
        WhiteBalance => {
            // warm shift: scale red up and blue down with the level
            for i in 0..h {
                for j in 0..w {
                    pix[[i, j, 0]] = clip(pix[[i, j, 0]] * (1.0 + 0.4 * p));
                    pix[[i, j, 2]] = clip(pix[[i, j, 2]] * (1.0 - 0.4 * p));
                }
            }
        }
        Colorize => {
            // blend toward a fixed sepia tint of the pixel's luma
            const TINT: [f64; 3] = [1.0, 0.85, 0.6];
            for i in 0..h {
                for j in 0..w {
                    let luma = 0.3 * pix[[i, j, 0]] + 0.59 * pix[[i, j, 1]]
                        + 0.11 * pix[[i, j, 2]];
                    for k in 0..3 {
                        pix[[i, j, k]] =
                            clip((1.0 - p) * pix[[i, j, k]] + p * luma * TINT[k]);
                    }
                }
            }
        }
        FlipHorizontal => {
            if coin(&mut rng, p) {
                let flipped = pix.clone();
                for i in 0..h {
                    for j in 0..w {
                        for k in 0..channels {
                            pix[[i, j, k]] = flipped[[i, w - 1 - j, k]];
                        }
                    }
                }
            }
        }
        Crop => {
            if coin(&mut rng, p) {
                // keep a 3/4-size window at a random offset, zero the rest
                let kh = (h * 3).div_ceil(4).max(1);
                let kw = (w * 3).div_ceil(4).max(1);
                let oi = rng.random_range(0..=h - kh);
                let oj = rng.random_range(0..=w - kw);
                for i in 0..h {
                    for j in 0..w {
                        let inside = i >= oi && i < oi + kh && j >= oj && j < oj + kw;
                        if !inside {
                            for k in 0..channels {
                                pix[[i, j, k]] = 0.0;
                            }
                        }
                    }
                }
            }
        }
        Rotate => {
            if coin(&mut rng, p) {
                let degrees: f64 = rng.random_range(20.0..=40.0);
                let sign = if coin(&mut rng, 0.5) { 1.0 } else { -1.0 };
                let theta = sign * degrees.to_radians();
                pix = resample(&pix, h, w, channels, |i, j| {
                    let (ci, cj) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
                    let (di, dj) = (i as f64 - ci, j as f64 - cj);
                    (
                        theta.cos() * di + theta.sin() * dj + ci,
                        -theta.sin() * di + theta.cos() * dj + cj,
                    )
                });
            }
        }
        Translate => {
            if coin(&mut rng, p) {
                let max_i = (h / 4).max(1) as i64;
                let max_j = (w / 4).max(1) as i64;
                let si = rng.random_range(-max_i..=max_i);
                let sj = rng.random_range(-max_j..=max_j);
                pix = resample(&pix, h, w, channels, |i, j| {
                    ((i as i64 - si) as f64, (j as i64 - sj) as f64)
                });
            }
        }
        _ => unreachable!(),
    }

    Ok(pix
        .into_shape_with_order(IxDyn(&shape))
        .expect("image reshape back"))
}

/// Nearest-neighbor resampling with zero fill outside the source.
fn resample(
    src: &ArrayD<f64>,
    h: usize,
    w: usize,
    channels: usize,
    map: impl Fn(usize, usize) -> (f64, f64),
) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[h, w, channels]));
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = map(i, j);
            let (ri, rj) = (si.round(), sj.round());
            if ri >= 0.0 && rj >= 0.0 && (ri as usize) < h && (rj as usize) < w {
                for k in 0..channels {
                    out[[i, j, k]] = src[[ri as usize, rj as usize, k]];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Time series, audio, tabular, sets
// ---------------------------------------------------------------------------

/// Row-level corruptions of a `[T, d]` sequence: additive white noise,
/// independent dropped steps, or one dropped window of `m` consecutive
/// steps. Drops zero the affected rows.
pub fn perturb_timeseries(seq: &ArrayD<f64>, spec: &PerturbationSpec) -> Result<ArrayD<f64>> {
    spec.validate()?;
    use PerturbFamily::*;
    if !matches!(spec.family, WhiteNoise | RandomDrop | StructuredDrop) {
        return Err(Error::config(
            "family",
            format!("{:?} cannot corrupt time series", spec.family),
        ));
    }
    if seq.ndim() != 2 {
        return Err(Error::dim("perturb_timeseries", "expected [T, d]"));
    }
    let t_len = seq.shape()[0];
    if spec.family == StructuredDrop {
        let m = window_len(spec, t_len);
        if m > t_len {
            return Err(Error::config(
                "window",
                format!("window {m} exceeds sequence length {t_len}"),
            ));
        }
    }
    if spec.level == 0.0 {
        return Ok(seq.clone());
    }
    let p = spec.level;
    let mut rng = spec.rng();
    let mut out = seq.clone();
    match spec.family {
        WhiteNoise => {
            for v in out.iter_mut() {
                *v += p * gauss(&mut rng);
            }
        }
        RandomDrop => {
            for t in 0..t_len {
                if coin(&mut rng, p) {
                    out.index_axis_mut(ndarray::Axis(0), t).fill(0.0);
                }
            }
        }
        StructuredDrop => {
            if coin(&mut rng, p) {
                let m = window_len(spec, t_len);
                let start = rng.random_range(0..=t_len - m);
                for t in start..start + m {
                    out.index_axis_mut(ndarray::Axis(0), t).fill(0.0);
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

fn window_len(spec: &PerturbationSpec, t_len: usize) -> usize {
    spec.params.window.unwrap_or((t_len / 5).max(1))
}

/// Waveform corruptions: a 1-D wave is treated as a `[T, 1]` series, a 2-D
/// spectrogram as-is; the time-series families apply unchanged.
pub fn perturb_audio(wave: &ArrayD<f64>, spec: &PerturbationSpec) -> Result<ArrayD<f64>> {
    if wave.ndim() == 1 {
        let t_len = wave.len();
        let tall = wave
            .clone()
            .into_shape_with_order(IxDyn(&[t_len, 1]))
            .expect("wave reshape");
        let out = perturb_timeseries(&tall, spec)?;
        Ok(out
            .into_shape_with_order(IxDyn(&[t_len]))
            .expect("wave reshape back"))
    } else {
        perturb_timeseries(wave, spec)
    }
}

/// Element corruptions of a 1-D row: zeroed entries or position swaps
/// (which preserve the multiset of values exactly).
pub fn perturb_tabular(row: &ArrayD<f64>, spec: &PerturbationSpec) -> Result<ArrayD<f64>> {
    spec.validate()?;
    use PerturbFamily::*;
    if !matches!(spec.family, EntryDrop | EntrySwap) {
        return Err(Error::config(
            "family",
            format!("{:?} cannot corrupt tabular rows", spec.family),
        ));
    }
    if row.ndim() != 1 {
        return Err(Error::dim("perturb_tabular", "expected a 1-D row"));
    }
    if spec.level == 0.0 {
        return Ok(row.clone());
    }
    let p = spec.level;
    let mut rng = spec.rng();
    let mut out = row.clone();
    let n = out.len();
    match spec.family {
        EntryDrop => {
            for v in out.iter_mut() {
                if coin(&mut rng, p) {
                    *v = 0.0;
                }
            }
        }
        EntrySwap => {
            for i in 0..n {
                if coin(&mut rng, p) {
                    let j = rng.random_range(0..n);
                    let (a, b) = (out[[i]], out[[j]]);
                    out[[i]] = b;
                    out[[j]] = a;
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Set corruptions on an `[n, d]` element array. Drops genuinely remove
/// elements — the one family that changes shape — and may leave the set
/// empty; noise perturbs element features in place.
pub fn perturb_set(elems: &ArrayD<f64>, spec: &PerturbationSpec) -> Result<ArrayD<f64>> {
    spec.validate()?;
    use PerturbFamily::*;
    if !matches!(spec.family, SetDrop | SetNoise) {
        return Err(Error::config(
            "family",
            format!("{:?} cannot corrupt sets", spec.family),
        ));
    }
    if elems.ndim() != 2 {
        return Err(Error::dim("perturb_set", "expected [n, d] elements"));
    }
    if spec.level == 0.0 {
        return Ok(elems.clone());
    }
    let p = spec.level;
    let mut rng = spec.rng();
    let (n, d) = (elems.shape()[0], elems.shape()[1]);
    match spec.family {
        SetDrop => {
            let mut kept = Vec::new();
            for i in 0..n {
                if !coin(&mut rng, p) {
                    for j in 0..d {
                        kept.push(elems[[i, j]]);
                    }
                }
            }
            let k = kept.len() / d;
            Ok(ArrayD::from_shape_vec(IxDyn(&[k, d]), kept).expect("set rebuild"))
        }
        SetNoise => {
            let mut out = elems.clone();
            for v in out.iter_mut() {
                *v += p * gauss(&mut rng);
            }
            Ok(out)
        }
        _ => unreachable!(),
    }
}

/// Dispatch a modality-level family by the modality's kind.
pub fn perturb_modality(
    x: &ArrayD<f64>,
    kind: ModalityKind,
    spec: &PerturbationSpec,
) -> Result<ArrayD<f64>> {
    if !spec.family.applies_to(kind) {
        return Err(Error::config(
            "family",
            format!("{:?} cannot corrupt a {kind:?} modality", spec.family),
        ));
    }
    match kind {
        ModalityKind::StaticVector | ModalityKind::Table => perturb_tabular(x, spec),
        ModalityKind::TemporalSequence => perturb_timeseries(x, spec),
        ModalityKind::ImageGrid => perturb_image(x, spec),
        ModalityKind::Set => perturb_set(x, spec),
    }
}

// ---------------------------------------------------------------------------
// Multimodal imperfections
// ---------------------------------------------------------------------------

/// Correlated whole-sample imperfections: one coin (or one set of time
/// steps) drives every modality jointly. Temporal families require all
/// modalities to share a time axis and reject datasets that don't.
pub fn perturb_multimodal(
    sample: &MultimodalSample,
    specs: &[ModalitySpec],
    spec: &PerturbationSpec,
) -> Result<MultimodalSample> {
    spec.validate()?;
    use PerturbFamily::*;
    if !spec.family.is_multimodal() {
        return Err(Error::config(
            "family",
            format!("{:?} is not a whole-sample family", spec.family),
        ));
    }
    if sample.modalities.len() != specs.len() {
        return Err(Error::dim(
            "perturb_multimodal",
            format!(
                "sample has {} modalities, specs describe {}",
                sample.modalities.len(),
                specs.len()
            ),
        ));
    }
    if spec.family == MissingModality {
        if !specs.iter().any(|s| s.name == spec.target) {
            return Err(Error::config(
                "target",
                format!("no modality named `{}`", spec.target),
            ));
        }
    } else if spec.target != ALL_MODALITIES {
        return Err(Error::config(
            "target",
            format!("{:?} targets all modalities; use `ALL`", spec.family),
        ));
    }
    let temporal = matches!(spec.family, TemporalDrop | StructuredTemporalDrop);
    if temporal {
        shared_time_axis(specs)?;
    }
    if spec.level == 0.0 {
        return Ok(sample.clone());
    }
    let p = spec.level;
    let mut rng = spec.rng();
    let mut out = sample.clone();
    match spec.family {
        CorrelatedNoise => {
            if coin(&mut rng, p) {
                for x in &mut out.modalities {
                    for v in x.iter_mut() {
                        *v += p * gauss(&mut rng);
                    }
                }
            }
        }
        CorrelatedDrop => {
            if coin(&mut rng, p) {
                for x in &mut out.modalities {
                    x.fill(0.0);
                }
            }
        }
        TemporalDrop => {
            let t_len = specs[0].shape[0];
            for t in 0..t_len {
                if coin(&mut rng, p) {
                    for x in &mut out.modalities {
                        x.index_axis_mut(ndarray::Axis(0), t).fill(0.0);
                    }
                }
            }
        }
        StructuredTemporalDrop => {
            let t_len = specs[0].shape[0];
            let m = window_len(spec, t_len);
            if m > t_len {
                return Err(Error::config(
                    "window",
                    format!("window {m} exceeds sequence length {t_len}"),
                ));
            }
            if coin(&mut rng, p) {
                let start = rng.random_range(0..=t_len - m);
                for t in start..start + m {
                    for x in &mut out.modalities {
                        x.index_axis_mut(ndarray::Axis(0), t).fill(0.0);
                    }
                }
            }
        }
        MissingModality => {
            if coin(&mut rng, p) {
                let mi = specs.iter().position(|s| s.name == spec.target).unwrap();
                out.modalities[mi].fill(0.0);
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// The shared sequence length, or an explicit unsupported error when the
/// modalities have no common time axis.
fn shared_time_axis(specs: &[ModalitySpec]) -> Result<usize> {
    let all_temporal = specs
        .iter()
        .all(|s| s.kind == ModalityKind::TemporalSequence);
    let t0 = specs.first().map(|s| s.shape[0]);
    if !all_temporal || specs.iter().any(|s| Some(s.shape[0]) != t0) {
        return Err(Error::config(
            "family",
            "temporal imperfections need every modality to share a time axis",
        ));
    }
    Ok(t0.unwrap_or(0))
}

// ---------------------------------------------------------------------------
// Noisy test grid
// ---------------------------------------------------------------------------

/// What one grid partition corrupts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PartitionTarget {
    Modality(usize),
    AllModalities,
}

/// One row of the grid: a named corruption family aimed at one modality
/// (or at all of them).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub family: PerturbFamily,
    pub target: PartitionTarget,
}

/// Corrupted copies of a test split at increasing levels: one partition
/// per modality plus a correlated multimodal partition when every modality
/// shares a time axis. Level sets are generated on demand; the level-0 set
/// is the clean data itself.
#[derive(Clone, Debug)]
pub struct NoisyTestGrid {
    levels: Vec<f64>,
    partitions: Vec<Partition>,
    skipped_multimodal: Option<String>,
    samples: Vec<MultimodalSample>,
    specs: Vec<ModalitySpec>,
    seed: u64,
}

/// Build the grid over `testdata`'s test split: `families[m]` corrupts
/// modality `m` in its own partition, and a correlated temporal-drop
/// partition is added when the dataset supports one (otherwise the reason
/// is recorded instead).
pub fn build_noisy_grid(
    testdata: &DatasetSplits,
    families: &[PerturbFamily],
    levels: &[f64],
    seed: u64,
) -> Result<NoisyTestGrid> {
    let m = testdata.num_modalities();
    if families.len() != m {
        return Err(Error::config(
            "families",
            format!("need one family per modality ({m}), got {}", families.len()),
        ));
    }
    for (family, mspec) in families.iter().zip(&testdata.specs) {
        if !family.applies_to(mspec.kind) {
            return Err(Error::config(
                "families",
                format!(
                    "{family:?} cannot corrupt `{}` ({:?})",
                    mspec.name, mspec.kind
                ),
            ));
        }
    }
    if levels.is_empty() || levels[0] != 0.0 {
        return Err(Error::config("levels", "must start at 0.0"));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) || levels.iter().any(|l| !(0.0..=1.0).contains(l))
    {
        return Err(Error::config(
            "levels",
            "must be strictly ascending within [0, 1]",
        ));
    }
    let mut partitions: Vec<Partition> = families
        .iter()
        .zip(&testdata.specs)
        .enumerate()
        .map(|(i, (family, mspec))| Partition {
            name: mspec.name.clone(),
            family: *family,
            target: PartitionTarget::Modality(i),
        })
        .collect();
    let skipped_multimodal = match shared_time_axis(&testdata.specs) {
        Ok(_) => {
            partitions.push(Partition {
                name: "multimodal".to_string(),
                family: PerturbFamily::TemporalDrop,
                target: PartitionTarget::AllModalities,
            });
            None
        }
        Err(e) => Some(e.to_string()),
    };
    Ok(NoisyTestGrid {
        levels: levels.to_vec(),
        partitions,
        skipped_multimodal,
        samples: testdata.split(crate::synthdata::Split::Test).to_vec(),
        specs: testdata.specs.clone(),
        seed,
    })
}

impl NoisyTestGrid {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Why no multimodal partition exists, when it doesn't.
    pub fn skipped_multimodal(&self) -> Option<&str> {
        self.skipped_multimodal.as_deref()
    }

    pub fn clean_samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    /// The corrupted test set for one (partition, level) cell. Samples are
    /// corrupted under per-sample seeds derived from the master seed, so
    /// the result is independent of evaluation order.
    pub fn corrupted(&self, partition: usize, level_idx: usize) -> Result<Vec<MultimodalSample>> {
        let part = self.partitions.get(partition).ok_or_else(|| {
            Error::config("partition", format!("index {partition} out of range"))
        })?;
        let level = *self
            .levels
            .get(level_idx)
            .ok_or_else(|| Error::config("level", format!("index {level_idx} out of range")))?;
        if level == 0.0 {
            return Ok(self.samples.clone());
        }
        let mut out = Vec::with_capacity(self.samples.len());
        for (idx, sample) in self.samples.iter().enumerate() {
            let sample_seed = mix(self.seed, ((partition as u64) << 32) ^ idx as u64);
            let corrupted = match part.target {
                PartitionTarget::Modality(mi) => {
                    let pspec = PerturbationSpec {
                        target: self.specs[mi].name.clone(),
                        family: part.family,
                        level,
                        params: PerturbParams::default(),
                        seed: sample_seed,
                    };
                    let mut s = sample.clone();
                    s.modalities[mi] =
                        perturb_modality(&s.modalities[mi], self.specs[mi].kind, &pspec)?;
                    s
                }
                PartitionTarget::AllModalities => {
                    let pspec = PerturbationSpec {
                        target: ALL_MODALITIES.to_string(),
                        family: part.family,
                        level,
                        params: PerturbParams::default(),
                        seed: sample_seed,
                    };
                    perturb_multimodal(sample, &self.specs, &pspec)?
                }
            };
            out.push(corrupted);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_redundant, Label, TaskKind};

    fn spec(family: PerturbFamily, level: f64, seed: u64) -> PerturbationSpec {
        PerturbationSpec::new(ALL_MODALITIES, family, level, seed).unwrap()
    }

    fn arr(shape: &[usize], f: impl Fn(usize) -> f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(f).collect()).unwrap()
    }

    fn bits_equal(a: &ArrayD<f64>, b: &ArrayD<f64>) -> bool {
        a.shape() == b.shape()
            && a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn every_family_is_identity_at_level_zero() {
        let tokens = vec!["hello".to_string(), "World".to_string()];
        for family in [
            PerturbFamily::Typo,
            PerturbFamily::StickyKeys,
            PerturbFamily::Omission,
            PerturbFamily::Swap,
            PerturbFamily::MiddlePermute,
        ] {
            assert_eq!(perturb_text(&tokens, &spec(family, 0.0, 1)).unwrap(), tokens);
        }

        let img = arr(&[5, 6, 3], |i| (i % 7) as f64 * 0.1 - 0.0);
        for family in [
            PerturbFamily::GaussianPixel,
            PerturbFamily::SaltPepper,
            PerturbFamily::Grating,
            PerturbFamily::Grayscale,
            PerturbFamily::Contrast,
            PerturbFamily::Invert,
            PerturbFamily::WhiteBalance,
            PerturbFamily::Colorize,
            PerturbFamily::FlipHorizontal,
            PerturbFamily::Crop,
            PerturbFamily::Rotate,
            PerturbFamily::Translate,
        ] {
            let out = perturb_image(&img, &spec(family, 0.0, 1)).unwrap();
            assert!(bits_equal(&out, &img), "{family:?} at level 0");
        }

        let seq = arr(&[6, 2], |i| i as f64 - 3.0);
        for family in [
            PerturbFamily::WhiteNoise,
            PerturbFamily::RandomDrop,
            PerturbFamily::StructuredDrop,
        ] {
            let out = perturb_timeseries(&seq, &spec(family, 0.0, 1)).unwrap();
            assert!(bits_equal(&out, &seq), "{family:?} at level 0");
        }

        let row = arr(&[7], |i| -(i as f64) * 0.5);
        for family in [PerturbFamily::EntryDrop, PerturbFamily::EntrySwap] {
            let out = perturb_tabular(&row, &spec(family, 0.0, 1)).unwrap();
            assert!(bits_equal(&out, &row), "{family:?} at level 0");
        }

        let set = arr(&[4, 3], |i| i as f64 * 0.25);
        for family in [PerturbFamily::SetDrop, PerturbFamily::SetNoise] {
            let out = perturb_set(&set, &spec(family, 0.0, 1)).unwrap();
            assert!(bits_equal(&out, &set), "{family:?} at level 0");
        }

        let sample = MultimodalSample {
            modalities: vec![arr(&[4, 2], |i| i as f64), arr(&[4, 3], |i| -(i as f64))],
            label: Label::Class(0),
        };
        let specs = vec![temporal_spec("a", 4, 2), temporal_spec("b", 4, 3)];
        for family in [
            PerturbFamily::CorrelatedNoise,
            PerturbFamily::CorrelatedDrop,
            PerturbFamily::TemporalDrop,
            PerturbFamily::StructuredTemporalDrop,
        ] {
            let out = perturb_multimodal(&sample, &specs, &spec(family, 0.0, 1)).unwrap();
            assert_eq!(out, sample, "{family:?} at level 0");
        }
    }

    #[test]
    fn outputs_are_determined_by_input_and_spec() {
        let seq = arr(&[20, 3], |i| (i as f64).sin());
        let s = spec(PerturbFamily::WhiteNoise, 0.5, 42);
        let a = perturb_timeseries(&seq, &s).unwrap();
        let b = perturb_timeseries(&seq, &s).unwrap();
        assert!(bits_equal(&a, &b));
        let c = perturb_timeseries(&seq, &spec(PerturbFamily::WhiteNoise, 0.5, 43)).unwrap();
        assert!(!bits_equal(&a, &c), "different seeds should differ");
    }

    #[test]
    fn typos_respect_the_qwerty_adjacency_table() {
        let tokens = vec!["cat".to_string()];
        let mut seen = std::collections::HashSet::new();
        for seed in 0..10_000 {
            let out = perturb_text(&tokens, &spec(PerturbFamily::Typo, 1.0, seed)).unwrap();
            let word: Vec<char> = out[0].chars().collect();
            assert_eq!(word.len(), 3);
            for (got, orig) in word.iter().zip("cat".chars()) {
                assert_ne!(*got, orig, "level 1 must replace every letter");
                assert!(
                    qwerty_neighbors(orig).unwrap().contains(got),
                    "`{got}` is not adjacent to `{orig}`"
                );
            }
            seen.insert(out[0].clone());
        }
        assert!(seen.len() > 10, "neighbor choices should vary");
    }

    #[test]
    fn swaps_and_permutations_preserve_word_edges() {
        let two = vec!["ab".to_string()];
        assert_eq!(
            perturb_text(&two, &spec(PerturbFamily::Swap, 1.0, 3)).unwrap(),
            two,
            "no interior pair exists"
        );
        let three = vec!["abc".to_string()];
        assert_eq!(
            perturb_text(&three, &spec(PerturbFamily::Swap, 1.0, 3)).unwrap(),
            three
        );
        for seed in 0..200 {
            let word = vec!["abcdefg".to_string()];
            for family in [PerturbFamily::Swap, PerturbFamily::MiddlePermute] {
                let out = perturb_text(&word, &spec(family, 1.0, seed)).unwrap();
                let got = &out[0];
                assert!(got.starts_with('a') && got.ends_with('g'), "{family:?}: {got}");
                let mut sorted: Vec<char> = got.chars().collect();
                sorted.sort_unstable();
                assert_eq!(sorted, "abcdefg".chars().collect::<Vec<_>>());
            }
        }
        assert_eq!(
            perturb_text(&vec!["cat".to_string()], &spec(PerturbFamily::StickyKeys, 1.0, 1))
                .unwrap(),
            vec!["ccaatt".to_string()]
        );
        assert_eq!(
            perturb_text(&vec!["cat".to_string()], &spec(PerturbFamily::Omission, 1.0, 1))
                .unwrap(),
            vec![String::new()]
        );
    }

    #[test]
    fn salt_pepper_dead_pixel_rate_matches_a_binomial_interval() {
        let img = arr(&[64, 64], |_| 0.5);
        let out = perturb_image(&img, &spec(PerturbFamily::SaltPepper, 0.1, 7)).unwrap();
        let changed = out
            .iter()
            .zip(img.iter())
            .filter(|(a, b)| a != b)
            .count() as f64;
        let rate = changed / 4096.0;
        let ci = 3.0 * (0.1 * 0.9 / 4096.0_f64).sqrt();
        assert!(
            (rate - 0.1).abs() <= ci,
            "speckle rate {rate} outside 0.1 ± {ci}"
        );
        // bright regions darken, dark regions brighten
        let bright = arr(&[8, 8], |_| 0.9);
        let speckled = perturb_image(&bright, &spec(PerturbFamily::SaltPepper, 1.0, 7)).unwrap();
        assert!(speckled.iter().all(|&v| v == 0.0));
        let dark = arr(&[8, 8], |_| 0.1);
        let speckled = perturb_image(&dark, &spec(PerturbFamily::SaltPepper, 1.0, 7)).unwrap();
        assert!(speckled.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inversion_is_an_involution() {
        let img = arr(&[6, 5, 3], |i| ((i * 37) % 256) as f64);
        let s = spec(PerturbFamily::Invert, 0.7, 11);
        let once = perturb_image(&img, &s).unwrap();
        let twice = perturb_image(&once, &s).unwrap();
        assert!(bits_equal(&twice, &img));
        // the [0, 255] range is detected from the values
        let forced = spec(PerturbFamily::Invert, 1.0, 11);
        let inv = perturb_image(&img, &forced).unwrap();
        assert_eq!(inv[[0, 0, 0]], 255.0 - img[[0, 0, 0]]);
    }

    #[test]
    fn color_families_validate_channels_and_grayscale_uses_the_luma_weights() {
        let rgb = arr(&[4, 4, 3], |i| ((i * 13) % 100) as f64 / 100.0);
        let gray = perturb_image(&rgb, &spec(PerturbFamily::Grayscale, 1.0, 1)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let luma =
                    0.3 * rgb[[i, j, 0]] + 0.59 * rgb[[i, j, 1]] + 0.11 * rgb[[i, j, 2]];
                for k in 0..3 {
                    assert!((gray[[i, j, k]] - luma).abs() < 1e-12);
                }
            }
        }
        let mono = arr(&[4, 4], |i| i as f64 / 16.0);
        for family in [
            PerturbFamily::Grayscale,
            PerturbFamily::WhiteBalance,
            PerturbFamily::Colorize,
        ] {
            assert!(perturb_image(&mono, &spec(family, 0.5, 1)).is_err());
        }
    }

    #[test]
    fn geometric_families_preserve_shape_and_stay_in_range() {
        let img = arr(&[9, 9, 1], |i| if i == 20 { 1.0 } else { 0.1 });
        for family in [
            PerturbFamily::FlipHorizontal,
            PerturbFamily::Crop,
            PerturbFamily::Rotate,
            PerturbFamily::Translate,
        ] {
            let out = perturb_image(&img, &spec(family, 1.0, 5)).unwrap();
            assert_eq!(out.shape(), img.shape(), "{family:?}");
            assert!(
                out.iter().all(|v| (0.0..=1.0).contains(v)),
                "{family:?} left the value range"
            );
            assert!(!bits_equal(&out, &img), "{family:?} at level 1 must act");
        }
    }

    #[test]
    fn drops_zero_rows_and_structured_drops_are_contiguous() {
        let seq = arr(&[10, 2], |_| 1.0);
        let all = perturb_timeseries(&seq, &spec(PerturbFamily::RandomDrop, 1.0, 3)).unwrap();
        assert!(all.iter().all(|&v| v == 0.0));

        for seed in 0..50 {
            let s = spec(PerturbFamily::StructuredDrop, 1.0, seed).with_window(3);
            let out = perturb_timeseries(&seq, &s).unwrap();
            let zero_rows: Vec<usize> = (0..10)
                .filter(|&t| (0..2).all(|j| out[[t, j]] == 0.0))
                .collect();
            assert_eq!(zero_rows.len(), 3, "exactly m rows drop");
            assert!(
                zero_rows.windows(2).all(|w| w[1] == w[0] + 1),
                "dropped rows must be consecutive: {zero_rows:?}"
            );
        }
        let too_big = spec(PerturbFamily::StructuredDrop, 0.5, 1).with_window(11);
        assert!(perturb_timeseries(&seq, &too_big).is_err());
    }

    #[test]
    fn audio_noise_standard_deviation_is_calibrated() {
        let wave = ArrayD::zeros(IxDyn(&[100_000]));
        let out = perturb_audio(&wave, &spec(PerturbFamily::WhiteNoise, 0.25, 9)).unwrap();
        assert_eq!(out.ndim(), 1);
        let var = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - 0.25).abs() / 0.25 < 0.05,
            "sample std {std} should be within 5% of 0.25"
        );
        let drop = perturb_audio(&wave, &spec(PerturbFamily::RandomDrop, 1.0, 9)).unwrap();
        assert!(drop.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tabular_swaps_preserve_the_multiset_and_drops_are_calibrated() {
        let row = arr(&[10_000], |i| i as f64 + 1.0);
        let swapped = perturb_tabular(&row, &spec(PerturbFamily::EntrySwap, 0.5, 13)).unwrap();
        let mut a: Vec<f64> = row.iter().copied().collect();
        let mut b: Vec<f64> = swapped.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert!(!bits_equal(&swapped, &row));

        let dropped = perturb_tabular(&row, &spec(PerturbFamily::EntryDrop, 0.3, 13)).unwrap();
        let rate = dropped.iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        let ci = 3.0 * (0.3 * 0.7 / 10_000.0_f64).sqrt();
        assert!((rate - 0.3).abs() <= ci, "drop rate {rate} outside 0.3 ± {ci}");
    }

    #[test]
    fn set_drops_shrink_and_the_encoder_accepts_an_empty_set() {
        let set = arr(&[1000, 3], |i| i as f64);
        let kept = perturb_set(&set, &spec(PerturbFamily::SetDrop, 0.4, 17)).unwrap();
        let n = kept.shape()[0] as f64;
        let ci = 3.0 * (1000.0 * 0.4 * 0.6_f64).sqrt();
        assert!((n - 600.0).abs() <= ci, "retained {n} outside 600 ± {ci}");

        let empty = perturb_set(&set, &spec(PerturbFamily::SetDrop, 1.0, 17)).unwrap();
        assert_eq!(empty.shape(), &[0, 3]);

        use crate::encoders::{Encoder, EncoderKind, EncoderSpec};
        let enc = Encoder::new(
            EncoderSpec {
                kind: EncoderKind::DeepSet,
                in_shape: vec![1000, 3],
                hidden_dims: vec![4],
                out_dim: 2,
                seed: 5,
                positional: true,
            },
            ModalityKind::Set,
        )
        .unwrap();
        let params = enc.init_params();
        let out = enc.encode(&params, &empty).unwrap().vector;
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    fn temporal_spec(name: &str, t: usize, d: usize) -> ModalitySpec {
        ModalitySpec {
            name: name.to_string(),
            kind: ModalityKind::TemporalSequence,
            shape: vec![t, d],
            sample_rate: Some(1),
        }
    }

    fn static_spec(name: &str, d: usize) -> ModalitySpec {
        ModalitySpec {
            name: name.to_string(),
            kind: ModalityKind::StaticVector,
            shape: vec![d],
            sample_rate: None,
        }
    }

    #[test]
    fn correlated_families_share_one_coin_across_modalities() {
        let specs = vec![static_spec("a", 3), static_spec("b", 4)];
        let mut triggered = 0;
        for idx in 0..200 {
            let sample = MultimodalSample {
                modalities: vec![arr(&[3], |i| i as f64 + 1.0), arr(&[4], |i| i as f64 + 1.0)],
                label: Label::Class(0),
            };
            let s = spec(PerturbFamily::CorrelatedDrop, 0.5, idx);
            let out = perturb_multimodal(&sample, &specs, &s).unwrap();
            let zeroed: Vec<bool> = out
                .modalities
                .iter()
                .map(|x| x.iter().all(|&v| v == 0.0))
                .collect();
            assert_eq!(zeroed[0], zeroed[1], "the coin must be shared");
            if zeroed[0] {
                triggered += 1;
            }
        }
        let ci = 3.0 * (200.0 * 0.25_f64).sqrt();
        assert!((f64::from(triggered) - 100.0).abs() <= ci);
    }

    #[test]
    fn temporal_drops_hit_the_same_steps_in_every_modality() {
        let specs = vec![temporal_spec("a", 30, 2), temporal_spec("b", 30, 3)];
        for seed in 0..40 {
            let sample = MultimodalSample {
                modalities: vec![arr(&[30, 2], |_| 1.0), arr(&[30, 3], |_| 1.0)],
                label: Label::Class(0),
            };
            let s = spec(PerturbFamily::TemporalDrop, 0.4, seed);
            let out = perturb_multimodal(&sample, &specs, &s).unwrap();
            let dropped = |x: &ArrayD<f64>, d: usize| -> Vec<usize> {
                (0..30)
                    .filter(|&t| (0..d).all(|j| x[[t, j]] == 0.0))
                    .collect()
            };
            assert_eq!(
                dropped(&out.modalities[0], 2),
                dropped(&out.modalities[1], 3)
            );
        }

        // temporal families reject datasets without a shared time axis
        let mixed = vec![temporal_spec("a", 30, 2), static_spec("b", 4)];
        let sample = MultimodalSample {
            modalities: vec![arr(&[30, 2], |_| 1.0), arr(&[4], |_| 1.0)],
            label: Label::Class(0),
        };
        let s = spec(PerturbFamily::TemporalDrop, 0.4, 1);
        assert!(perturb_multimodal(&sample, &mixed, &s).is_err());
        let ragged = vec![temporal_spec("a", 30, 2), temporal_spec("b", 20, 2)];
        let sample = MultimodalSample {
            modalities: vec![arr(&[30, 2], |_| 1.0), arr(&[20, 2], |_| 1.0)],
            label: Label::Class(0),
        };
        assert!(perturb_multimodal(&sample, &ragged, &s).is_err());
    }

    #[test]
    fn missing_modality_zeroes_only_its_target() {
        let specs = vec![static_spec("a", 3), static_spec("b", 4)];
        let sample = MultimodalSample {
            modalities: vec![arr(&[3], |i| i as f64 + 1.0), arr(&[4], |i| i as f64 + 1.0)],
            label: Label::Class(1),
        };
        let s = PerturbationSpec::new("b", PerturbFamily::MissingModality, 1.0, 3).unwrap();
        let out = perturb_multimodal(&sample, &specs, &s).unwrap();
        assert!(bits_equal(&out.modalities[0], &sample.modalities[0]));
        assert!(out.modalities[1].iter().all(|&v| v == 0.0));
        assert!(
            PerturbationSpec::new("nope", PerturbFamily::MissingModality, 1.0, 3)
                .map(|s| perturb_multimodal(&sample, &specs, &s))
                .unwrap()
                .is_err()
        );
    }

    #[test]
    fn additive_noise_magnitude_grows_with_the_level() {
        let seq = arr(&[50, 2], |i| (i as f64 * 0.1).cos());
        let mean_dist = |family: PerturbFamily, level: f64| -> f64 {
            let mut total = 0.0;
            for seed in 0..60 {
                let out = perturb_timeseries(&seq, &spec(family, level, seed)).unwrap();
                total += out
                    .iter()
                    .zip(seq.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
            total / 60.0
        };
        let mut prev = 0.0;
        for level in [0.0, 0.2, 0.5, 1.0] {
            let d = mean_dist(PerturbFamily::WhiteNoise, level);
            assert!(d >= prev, "E|out - in| fell from {prev} to {d} at {level}");
            prev = d;
        }
    }

    #[test]
    fn grids_have_a_partition_per_modality_plus_multimodal() {
        let mk = |i: usize| MultimodalSample {
            modalities: vec![
                arr(&[6, 2], |j| (i * 10 + j) as f64),
                arr(&[6, 3], |j| (i * 20 + j) as f64),
            ],
            label: Label::Class(i % 2),
        };
        let data = DatasetSplits {
            train: (0..10).map(mk).collect(),
            valid: (10..13).map(mk).collect(),
            test: (13..19).map(mk).collect(),
            specs: vec![temporal_spec("audio", 6, 2), temporal_spec("video", 6, 3)],
            task: TaskKind::Classification { classes: 2 },
            seed: 0,
        };
        let grid = build_noisy_grid(
            &data,
            &[PerturbFamily::RandomDrop, PerturbFamily::WhiteNoise],
            &[0.0, 0.3, 0.8],
            77,
        )
        .unwrap();
        assert_eq!(grid.num_partitions(), 3);
        assert_eq!(grid.partitions()[2].name, "multimodal");
        assert!(grid.skipped_multimodal().is_none());

        // the level-0 cell is the clean test data itself
        for part in 0..3 {
            let clean = grid.corrupted(part, 0).unwrap();
            assert_eq!(clean, data.test);
        }
        // cells are deterministic, and corruption only touches the target
        let a = grid.corrupted(0, 2).unwrap();
        let b = grid.corrupted(0, 2).unwrap();
        assert_eq!(a, b);
        for (got, clean) in a.iter().zip(&data.test) {
            assert!(bits_equal(&got.modalities[1], &clean.modalities[1]));
        }
        assert_ne!(a, data.test, "level 0.8 should corrupt something");
    }

    #[test]
    fn grids_without_a_shared_time_axis_record_the_reason() {
        let data = make_redundant(2, &[3, 4], 20, 0.1, 5).unwrap();
        let grid = build_noisy_grid(
            &data,
            &[PerturbFamily::EntryDrop, PerturbFamily::EntryDrop],
            &[0.0, 0.5],
            7,
        )
        .unwrap();
        assert_eq!(grid.num_partitions(), 2);
        let reason = grid.skipped_multimodal().expect("reason must be recorded");
        assert!(reason.contains("time axis"), "unclear reason: {reason}");

        // family/kind mismatches and malformed level lists are rejected
        assert!(build_noisy_grid(
            &data,
            &[PerturbFamily::WhiteNoise, PerturbFamily::EntryDrop],
            &[0.0, 0.5],
            7
        )
        .is_err());
        assert!(build_noisy_grid(
            &data,
            &[PerturbFamily::EntryDrop, PerturbFamily::EntryDrop],
            &[0.5, 0.8],
            7
        )
        .is_err());
        assert!(build_noisy_grid(
            &data,
            &[PerturbFamily::EntryDrop, PerturbFamily::EntryDrop],
            &[0.0, 0.5, 0.5],
            7
        )
        .is_err());
        assert!(build_noisy_grid(&data, &[PerturbFamily::EntryDrop], &[0.0, 0.5], 7).is_err());
    }

    #[test]
    fn specs_serialize_with_the_documented_keys() {
        let s = PerturbationSpec::new("audio", PerturbFamily::SaltPepper, 0.25, 9)
            .unwrap()
            .with_window(4);
        let value = serde_json::to_value(&s).unwrap();
        assert_eq!(value["target"], "audio");
        assert_eq!(value["family"], "salt-pepper");
        assert_eq!(value["level"], 0.25);
        assert_eq!(value["params"]["window"], 4);
        assert_eq!(value["seed"], 9);
        let back: PerturbationSpec = serde_json::from_value(value).unwrap();
        assert_eq!(back, s);

        let minimal: PerturbationSpec = serde_json::from_str(
            r#"{"target": "ALL", "family": "correlated-noise", "level": 0.5, "seed": 3}"#,
        )
        .unwrap();
        assert_eq!(minimal.family, PerturbFamily::CorrelatedNoise);
        assert_eq!(minimal.params.window, None);
        assert!(serde_json::from_str::<PerturbationSpec>(
            r#"{"target": "ALL", "family": "frobnicate", "level": 0.5, "seed": 3}"#
        )
        .is_err());

        assert!(PerturbationSpec::new("x", PerturbFamily::WhiteNoise, 1.5, 1).is_err());
        assert!(PerturbationSpec::new("x", PerturbFamily::WhiteNoise, -0.1, 1).is_err());
        assert!(PerturbationSpec::new("x", PerturbFamily::WhiteNoise, f64::NAN, 1).is_err());
    }
}
