//! The three synthetic dataset generators.
//!
//! Each generator owns an independent seeded RNG stream and draws in a fixed
//! order, so outputs are bit-identical across calls and insensitive to
//! unrelated code changes.

use super::{
    split_80_10_10, DatasetSplits, Label, ModalityKind, ModalitySpec, MultimodalSample, TaskKind,
    WordIntervals,
};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Latent dimensionality shared by all views in [`make_redundant`].
const LATENT_DIM: usize = 4;

/// Amplitude added to the event channel by [`make_temporal`]; the surrounding
/// noise on that channel is uniform in (-1, 1), so a threshold halfway up
/// recovers event placements exactly.
pub const TEMPORAL_EVENT_AMPLITUDE: f64 = 5.0;

/// Default per-modality feature dims for [`make_temporal`], mimicking common
/// affect-recognition features: 300-d token embeddings, 35-d visual
/// descriptors, 74-d acoustic descriptors; further modalities fall back to 32.
const TEMPORAL_DIMS: [usize; 3] = [300, 35, 74];

/// Every modality observes a shared 4-d latent through its own noisy linear
/// view; the label is the sign of the first latent coordinate.
///
/// `dims` gives per-modality view dimensions, either one entry per modality
/// or a single entry broadcast to all. Views with dimension >= 4 use mixing
/// matrices with orthonormal columns, so each view is an isometric embedding
/// of the latent plus `noise`-scaled white Gaussian noise: the best
/// achievable accuracy from any single view has the closed form
/// `1/2 + arcsin(1/sqrt(1 + noise^2)) / pi`.
pub fn make_redundant(
    num_modalities: usize,
    dims: &[usize],
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<DatasetSplits> {
    if num_modalities < 1 {
        return Err(Error::config("num_modalities", "need at least 1 modality"));
    }
    if n < 10 {
        return Err(Error::config("n", "need at least 10 samples"));
    }
    let dims = broadcast_dims(dims, num_modalities)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("noise", "must be finite and non-negative"));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x524544);

    // mixing matrices first, then samples, in a fixed order
    let mixers: Vec<ArrayD<f64>> = dims.iter().map(|&d| mixing_matrix(&mut rng, d)).collect();

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let u: Vec<f64> = (0..LATENT_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let label = usize::from(u[0] > 0.0);
        let mut modalities = Vec::with_capacity(num_modalities);
        for (m, &d) in dims.iter().enumerate() {
            let b = &mixers[m];
            let mut x = vec![0.0; d];
            for (i, xi) in x.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &uk) in u.iter().enumerate() {
                    acc += b[[i, k]] * uk;
                }
                *xi = acc + noise * rng.sample::<f64, _>(StandardNormal);
            }
            modalities.push(ArrayD::from_shape_vec(IxDyn(&[d]), x).unwrap());
        }
        samples.push(MultimodalSample {
            modalities,
            label: Label::Class(label),
        });
    }

    let specs = dims
        .iter()
        .enumerate()
        .map(|(m, &d)| ModalitySpec {
            name: format!("view{m}"),
            kind: ModalityKind::StaticVector,
            shape: vec![d],
            sample_rate: None,
        })
        .collect();
    Ok(split_80_10_10(
        samples,
        specs,
        TaskKind::Classification { classes: 2 },
        seed,
    ))
}

fn broadcast_dims(dims: &[usize], m: usize) -> Result<Vec<usize>> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::config("dims", "dimensions must be positive"));
    }
    match dims.len() {
        1 => Ok(vec![dims[0]; m]),
        l if l == m => Ok(dims.to_vec()),
        l => Err(Error::config(
            "dims",
            format!("got {l} dims for {m} modalities"),
        )),
    }
}

/// Seeded Gaussian `d x LATENT_DIM` matrix; columns orthonormalized by
/// Gram-Schmidt when `d >= LATENT_DIM` (otherwise left Gaussian, scaled so
/// entries keep unit-order variance).
fn mixing_matrix(rng: &mut ChaCha20Rng, d: usize) -> ArrayD<f64> {
    let mut b = ArrayD::from_shape_fn(IxDyn(&[d, LATENT_DIM]), |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    if d < LATENT_DIM {
        b.mapv_inplace(|v| v / (LATENT_DIM as f64).sqrt());
        return b;
    }
    for j in 0..LATENT_DIM {
        for prev in 0..j {
            let dot: f64 = (0..d).map(|i| b[[i, j]] * b[[i, prev]]).sum();
            for i in 0..d {
                let sub = dot * b[[i, prev]];
                b[[i, j]] -= sub;
            }
        }
        let norm: f64 = (0..d).map(|i| b[[i, j]] * b[[i, j]]).sum::<f64>().sqrt();
        for i in 0..d {
            b[[i, j]] /= norm;
        }
    }
    b
}

/// Each modality hides one Bernoulli bit inside a noisy 8-d vector; the label
/// is the XOR of the two bits, flipped with probability `flip_prob`.
///
/// Both bits are marginally independent of the label, so any predictor that
/// is additive across modalities (late fusion of per-modality scores, in
/// particular anything linear) carries no usable signal, while models that
/// represent cross-modal interactions can reach `1 - flip_prob`.
pub fn make_interaction(
    num_modalities: usize,
    n: usize,
    flip_prob: f64,
    seed: u64,
) -> Result<DatasetSplits> {
    if num_modalities != 2 {
        return Err(Error::config(
            "num_modalities",
            "interaction generator supports exactly 2 modalities",
        ));
    }
    if n < 10 {
        return Err(Error::config("n", "need at least 10 samples"));
    }
    if !(0.0..0.5).contains(&flip_prob) {
        return Err(Error::config("flip_prob", "must lie in [0, 0.5)"));
    }

    const D: usize = 8;
    const BIT_NOISE: f64 = 0.1;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x494e54);

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let bits = [rng.random_bool(0.5), rng.random_bool(0.5)];
        let clean = bits[0] ^ bits[1];
        let flipped = rng.random_bool(flip_prob);
        let label = usize::from(clean ^ flipped);
        let modalities = bits
            .iter()
            .map(|&b| {
                let mut x = vec![0.0; D];
                x[0] = if b { 1.0 } else { -1.0 }
                    + BIT_NOISE * rng.sample::<f64, _>(StandardNormal);
                for xi in x.iter_mut().skip(1) {
                    *xi = rng.sample::<f64, _>(StandardNormal);
                }
                ArrayD::from_shape_vec(IxDyn(&[D]), x).unwrap()
            })
            .collect();
        samples.push(MultimodalSample {
            modalities,
            label: Label::Class(label),
        });
    }

    let specs = (0..num_modalities)
        .map(|m| ModalitySpec {
            name: format!("bits{m}"),
            kind: ModalityKind::StaticVector,
            shape: vec![D],
            sample_rate: None,
        })
        .collect();
    Ok(split_80_10_10(
        samples,
        specs,
        TaskKind::Classification { classes: 2 },
        seed,
    ))
}

/// Modalities sampled at different rates share planted event structure; the
/// label says whether some token carries an event in *every* modality at
/// once, which is invisible until sequences are aligned to the token grid.
///
/// Modality 0 is the token-granularity stream (`rates[0]` must be 1) and the
/// returned [`WordIntervals`] partition `[0, T)` one token per unit. Events
/// add [`TEMPORAL_EVENT_AMPLITUDE`] to feature channel 0 over the covered
/// rows; channel-0 background noise is uniform in (-1, 1), so thresholding
/// the aligned channel halfway up recovers event placements exactly.
pub fn make_temporal(
    num_modalities: usize,
    t: usize,
    rates: &[usize],
    n: usize,
    seed: u64,
) -> Result<(DatasetSplits, WordIntervals)> {
    if num_modalities < 2 {
        return Err(Error::config(
            "num_modalities",
            "co-occurrence needs at least 2 modalities",
        ));
    }
    if t < 4 {
        return Err(Error::config("t", "need at least 4 tokens"));
    }
    if n < 10 {
        return Err(Error::config("n", "need at least 10 samples"));
    }
    if rates.len() != num_modalities {
        return Err(Error::config(
            "rates",
            format!("got {} rates for {num_modalities} modalities", rates.len()),
        ));
    }
    if rates[0] != 1 {
        return Err(Error::config(
            "rates",
            "modality 0 is the token stream and must have rate 1",
        ));
    }
    for (m, &r) in rates.iter().enumerate() {
        if r < 1 {
            return Err(Error::config(format!("rates[{m}]"), "rates must be >= 1"));
        }
        if r > t {
            return Err(Error::config(
                format!("rates[{m}]"),
                format!("rate {r} exceeds time-length {t}"),
            ));
        }
    }

    let dims: Vec<usize> = (0..num_modalities)
        .map(|m| TEMPORAL_DIMS.get(m).copied().unwrap_or(32))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x54454d50);

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_bool(0.5);
        let events = draw_event_sets(&mut rng, num_modalities, t, label);
        let mut modalities = Vec::with_capacity(num_modalities);
        for (m, (&r, &d)) in rates.iter().zip(&dims).enumerate() {
            let rows = t * r;
            let mut x = vec![0.0; rows * d];
            for j in 0..rows {
                let token = j / r;
                let base = j * d;
                x[base] = rng.random_range(-1.0..1.0);
                if events[m].contains(&token) {
                    x[base] += TEMPORAL_EVENT_AMPLITUDE;
                }
                for k in 1..d {
                    x[base + k] = 0.5 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            modalities.push(ArrayD::from_shape_vec(IxDyn(&[rows, d]), x).unwrap());
        }
        samples.push(MultimodalSample {
            modalities,
            label: Label::Class(usize::from(label)),
        });
    }

    let specs = rates
        .iter()
        .zip(&dims)
        .enumerate()
        .map(|(m, (&r, &d))| ModalitySpec {
            name: if m == 0 {
                "tokens".to_string()
            } else {
                format!("series{m}")
            },
            kind: ModalityKind::TemporalSequence,
            shape: vec![t * r, d],
            sample_rate: Some(r),
        })
        .collect();
    let intervals =
        WordIntervals::new((0..t).map(|k| (k as f64, (k + 1) as f64)).collect()).unwrap();
    Ok((
        split_80_10_10(
            samples,
            specs,
            TaskKind::Classification { classes: 2 },
            seed,
        ),
        intervals,
    ))
}

/// Per-modality event-token sets whose common intersection is non-empty
/// exactly when `label` holds. Negative draws are rejection-sampled, which
/// terminates fast because a shared token across all modalities is rare.
fn draw_event_sets(
    rng: &mut ChaCha20Rng,
    num_modalities: usize,
    t: usize,
    label: bool,
) -> Vec<Vec<usize>> {
    loop {
        let shared = rng.random_range(0..t);
        let sets: Vec<Vec<usize>> = (0..num_modalities)
            .map(|_| {
                let mut s = Vec::new();
                if label {
                    s.push(shared);
                }
                if rng.random_bool(0.5) {
                    let extra = rng.random_range(0..t);
                    if !s.contains(&extra) {
                        s.push(extra);
                    }
                }
                if s.is_empty() {
                    s.push(rng.random_range(0..t));
                }
                s
            })
            .collect();
        let has_common = (0..t).any(|tok| sets.iter().all(|s| s.contains(&tok)));
        if has_common == label {
            return sets;
        }
    }
}
