//! Loss library: supervised task losses plus the alignment, reconstruction,
//! and cycle-consistency objectives used by the training strategies, all
//! composable into a weighted sum.
//!
//! Every loss is built on the tape and gradient-checked. Reconstruction
//! norms are per-sample root-mean-square (mean-per-element L2), so loss
//! scale does not depend on input shape; correlation and cosine terms carry
//! 1e-8 floors so degenerate directions contribute zero instead of NaN.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{ParamSet, Scope};
use crate::synthdata::{Label, TaskKind};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Variance/norm floor: squared denominators get this value added so a
/// zero-variance dimension or zero vector yields correlation/cosine 0.
const EPS_SQ: f64 = 1e-16;

/// What an auxiliary per-modality head maps into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxKind {
    /// Projection to label space (correlation objectives).
    ToLabel,
    /// Projection to the joint representation space (contrastive objectives).
    ToJointSpace,
    /// Reconstruction decoder back to an input modality.
    Decoder,
}

/// A single linear auxiliary map `g_i`: the smallest head that can serve as
/// label projector, joint-space projector, or decoder.
#[derive(Clone, Debug)]
pub struct AuxiliaryHead {
    pub kind: AuxKind,
    in_dim: usize,
    out_dim: usize,
}

impl AuxiliaryHead {
    pub fn new(kind: AuxKind, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("auxiliary head", "dims must be >= 1"));
        }
        Ok(AuxiliaryHead {
            kind,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x415558);
        let lim = 1.0 / (self.in_dim as f64).sqrt();
        let mut ps = ParamSet::new();
        ps.push(
            "w",
            ArrayD::from_shape_fn(IxDyn(&[self.out_dim, self.in_dim]), |_| {
                rng.random_range(-lim..lim)
            }),
        );
        ps.push("b", ArrayD::zeros(IxDyn(&[self.out_dim])));
        ps
    }

    /// Apply to a vector `(d)` or a batch of rows `(B, d)`.
    pub fn apply(&self, tape: &mut Tape, scope: &Scope<'_>, x: Var) -> Var {
        let w = scope.var("w");
        let b = scope.var("b");
        match tape.value(x).ndim() {
            1 => {
                let lin = tape.matvec(w, x);
                tape.add(lin, b)
            }
            2 => {
                let wt = tape.transpose(w);
                let mm = tape.matmul(x, wt);
                tape.add_row_vec(mm, b)
            }
            n => panic!("auxiliary head input must be 1-D or 2-D, got {n}-D"),
        }
    }
}

/// One weighted term of a composite objective.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: Var,
}

/// A weighted sum of named loss terms; the total stays on the tape so the
/// whole composite backpropagates as one scalar.
#[derive(Clone, Debug)]
pub struct CompositeObjective {
    terms: Vec<LossTerm>,
}

impl CompositeObjective {
    pub fn new(terms: Vec<LossTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::config("objective", "needs at least one term"));
        }
        for t in &terms {
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::config(
                    "objective",
                    format!("term `{}` has negative or non-finite weight", t.name),
                ));
            }
        }
        Ok(CompositeObjective { terms })
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    /// `Σ weight · value` as a tape scalar.
    pub fn total(&self, tape: &mut Tape) -> Var {
        let mut acc: Option<Var> = None;
        for t in &self.terms {
            let scaled = tape.scale(t.value, t.weight);
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled),
            });
        }
        acc.unwrap()
    }

    /// `(name, weight, value)` rows for history reporting.
    pub fn report(&self, tape: &Tape) -> Vec<(String, f64, f64)> {
        self.terms
            .iter()
            .map(|t| (t.name.clone(), t.weight, tape.scalar_value(t.value)))
            .collect()
    }
}

/// Supervised task loss: batch-mean cross-entropy for classification,
/// mean squared error for regression.
pub fn task_loss(tape: &mut Tape, pred: Var, labels: &[Label], task: &TaskKind) -> Result<Var> {
    if tape.value(pred).iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("task predictions"));
    }
    if labels.is_empty() {
        return Err(Error::dim("task_loss", "empty batch".to_string()));
    }
    match task {
        TaskKind::Classification { classes } => {
            let shape = tape.value(pred).shape().to_vec();
            if shape.len() != 2 || shape[0] != labels.len() || shape[1] != *classes {
                return Err(Error::dim(
                    "task_loss",
                    format!(
                        "expected logits ({}, {classes}), got {shape:?}",
                        labels.len()
                    ),
                ));
            }
            let targets: Vec<usize> = labels.iter().map(|l| l.class()).collect();
            Ok(tape.cross_entropy(pred, &targets))
        }
        TaskKind::Regression { dim } => {
            let mut target = ArrayD::zeros(IxDyn(&[labels.len(), *dim]));
            for (i, l) in labels.iter().enumerate() {
                let v = l.real();
                if v.len() != *dim {
                    return Err(Error::dim(
                        "task_loss",
                        format!("label {i} has dim {}, expected {dim}", v.len()),
                    ));
                }
                for (j, &x) in v.iter().enumerate() {
                    target[[i, j]] = x;
                }
            }
            if tape.value(pred).shape() != target.shape() {
                return Err(Error::dim(
                    "task_loss",
                    format!(
                        "prediction shape {:?} vs target {:?}",
                        tape.value(pred).shape(),
                        target.shape()
                    ),
                ));
            }
            let t = tape.leaf(target);
            Ok(mse(tape, pred, t))
        }
    }
}

/// Mean squared error over every entry.
pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    tape.mean(sq)
}

/// Negated per-dimension Pearson correlation between two `(B, d)` batches,
/// averaged over dimensions. In `[-1, 1]`; zero-variance dimensions
/// contribute 0.
pub fn cca_loss(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (xs, ys) = (
        tape.value(x).shape().to_vec(),
        tape.value(y).shape().to_vec(),
    );
    if xs.len() != 2 || xs != ys {
        return Err(Error::dim(
            "cca_loss",
            format!("need matching (B, d) batches, got {xs:?} and {ys:?}"),
        ));
    }
    if xs[0] < 2 {
        return Err(Error::dim("cca_loss", "batch size must be >= 2".to_string()));
    }
    let xc = center_columns(tape, x);
    let yc = center_columns(tape, y);
    let xy = tape.mul(xc, yc);
    let cov = tape.mean_axis(xy, 0);
    let xx = tape.mul(xc, xc);
    let var_x = tape.mean_axis(xx, 0);
    let yy = tape.mul(yc, yc);
    let var_y = tape.mean_axis(yy, 0);
    let vprod = tape.mul(var_x, var_y);
    let vprod = tape.add_const(vprod, EPS_SQ);
    let denom = tape.sqrt(vprod);
    let corr = tape.div(cov, denom);
    let mean_corr = tape.mean(corr);
    Ok(tape.neg(mean_corr))
}

fn center_columns(tape: &mut Tape, x: Var) -> Var {
    let mean = tape.mean_axis(x, 0);
    let neg_mean = tape.neg(mean);
    tape.add_row_vec(x, neg_mean)
}

/// Contrastive alignment `1 - cos(z_mm, a) + 1 - cos(z_mm, b)` in `[0, 4]`.
pub fn refnet_contrastive_loss(tape: &mut Tape, z_mm: Var, a: Var, b: Var) -> Result<Var> {
    let d = tape.value(z_mm).len();
    for (name, v) in [("first", a), ("second", b)] {
        if tape.value(v).ndim() != 1 || tape.value(v).len() != d {
            return Err(Error::dim(
                "refnet_contrastive_loss",
                format!("{name} projection must match z_mm dim {d}"),
            ));
        }
    }
    let c1 = cosine(tape, z_mm, a);
    let c2 = cosine(tape, z_mm, b);
    let s = tape.add(c1, c2);
    let n = tape.neg(s);
    Ok(tape.add_const(n, 2.0))
}

fn cosine(tape: &mut Tape, u: Var, v: Var) -> Var {
    let uv = tape.dot(u, v);
    let uu = tape.dot(u, u);
    let vv = tape.dot(v, v);
    let prod = tape.mul(uu, vv);
    let prod = tape.add_const(prod, EPS_SQ);
    let denom = tape.sqrt(prod);
    tape.div(uv, denom)
}

/// Gaussian-kernel bandwidth selection for [`mmd`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled samples (falls back to 1
    /// when the median is 0). Recomputed per call, not differentiated.
    Median,
    Fixed { sigma: f64 },
}

/// Which MMD^2 estimator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdEstimator {
    /// V-statistic: always >= 0, exactly 0 on identical sample sets.
    Biased,
    /// U-statistic: unbiased, may dip slightly below 0; needs >= 2 samples
    /// per set.
    Unbiased,
}

/// Median pairwise Euclidean distance over the pooled rows of `q` and `p`.
pub fn median_bandwidth(q: &ArrayD<f64>, p: &ArrayD<f64>) -> f64 {
    let rows: Vec<Vec<f64>> = q
        .rows()
        .into_iter()
        .chain(p.rows())
        .map(|r| r.to_vec())
        .collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Squared maximum mean discrepancy between two `(n, d)` sample sets under a
/// Gaussian kernel `exp(-|x-y|^2 / (2 sigma^2))`.
pub fn mmd(
    tape: &mut Tape,
    q: Var,
    p: Var,
    bandwidth: Bandwidth,
    estimator: MmdEstimator,
) -> Result<Var> {
    let qs = tape.value(q).shape().to_vec();
    let ps = tape.value(p).shape().to_vec();
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(Error::dim(
            "mmd",
            format!("need (n, d) sample sets with equal d, got {qs:?} and {ps:?}"),
        ));
    }
    if qs[0] == 0 || ps[0] == 0 {
        return Err(Error::dim("mmd", "empty sample set".to_string()));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed { sigma } => {
            if sigma <= 0.0 || !sigma.is_finite() {
                return Err(Error::config("bandwidth", "sigma must be positive"));
            }
            sigma
        }
        Bandwidth::Median => median_bandwidth(tape.value(q), tape.value(p)),
    };
    let (n, m) = (qs[0], ps[0]);
    if estimator == MmdEstimator::Unbiased && (n < 2 || m < 2) {
        return Err(Error::dim(
            "mmd",
            "unbiased estimator needs >= 2 samples per set".to_string(),
        ));
    }
    let k_qq = gaussian_gram(tape, q, q, sigma);
    let k_pp = gaussian_gram(tape, p, p, sigma);
    let k_qp = gaussian_gram(tape, q, p, sigma);
    let cross = tape.mean(k_qp);
    let cross2 = tape.scale(cross, -2.0);
    let (t_qq, t_pp) = match estimator {
        MmdEstimator::Biased => (tape.mean(k_qq), tape.mean(k_pp)),
        MmdEstimator::Unbiased => {
            // diagonal entries are exp(0) = 1, so subtract n before averaging
            // over the n(n-1) off-diagonal pairs
            let sum_qq = tape.sum(k_qq);
            let off_qq = tape.add_const(sum_qq, -(n as f64));
            let t_qq = tape.scale(off_qq, 1.0 / (n * (n - 1)) as f64);
            let sum_pp = tape.sum(k_pp);
            let off_pp = tape.add_const(sum_pp, -(m as f64));
            let t_pp = tape.scale(off_pp, 1.0 / (m * (m - 1)) as f64);
            (t_qq, t_pp)
        }
    };
    let s = tape.add(t_qq, t_pp);
    Ok(tape.add(s, cross2))
}

/// Gram matrix `K[i,j] = exp(-|a_i - b_j|^2 / (2 sigma^2))`.
fn gaussian_gram(tape: &mut Tape, a: Var, b: Var, sigma: f64) -> Var {
    let a_sq = tape.mul(a, a);
    let a_norms = tape.mean_axis(a_sq, 1);
    let d = tape.value(a).shape()[1] as f64;
    let a_norms = tape.scale(a_norms, d);
    let b_sq = tape.mul(b, b);
    let b_norms = tape.mean_axis(b_sq, 1);
    let b_norms = tape.scale(b_norms, d);
    let bt = tape.transpose(b);
    let ab = tape.matmul(a, bt);
    let ab2 = tape.scale(ab, -2.0);
    let pair = tape.outer_sum(a_norms, b_norms);
    let d2 = tape.add(pair, ab2);
    let scaled = tape.scale(d2, -1.0 / (2.0 * sigma * sigma));
    tape.exp(scaled)
}

/// Per-sample root-mean-square reconstruction error, batch-averaged.
/// Accepts a single vector or a `(B, d)` batch of rows.
pub fn rms_reconstruction(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if tape.value(x).shape() != tape.value(x_hat).shape() {
        return Err(Error::dim(
            "reconstruction",
            format!(
                "shape {:?} vs {:?}",
                tape.value(x).shape(),
                tape.value(x_hat).shape()
            ),
        ));
    }
    let diff = tape.sub(x, x_hat);
    let sq = tape.mul(diff, diff);
    match tape.value(x).ndim() {
        1 => {
            let m = tape.mean(sq);
            Ok(tape.sqrt(m))
        }
        2 => {
            let per_sample = tape.mean_axis(sq, 1);
            let rms = tape.sqrt(per_sample);
            Ok(tape.mean(rms))
        }
        n => Err(Error::dim(
            "reconstruction",
            format!("expected 1-D or 2-D input, got {n}-D"),
        )),
    }
}

/// Cycle-consistency loss: both translation directions' reconstruction
/// errors, summed.
pub fn mctn_cycle_loss(
    tape: &mut Tape,
    x1: Var,
    x1_hat: Var,
    x2: Var,
    x2_hat: Var,
) -> Result<Var> {
    let r1 = rms_reconstruction(tape, x1, x1_hat)?;
    let r2 = rms_reconstruction(tape, x2, x2_hat)?;
    Ok(tape.add(r1, r2))
}

/// Factorization objective: per-modality reconstruction, the task loss, and
/// a `lambda`-weighted MMD pulling the pooled latents toward the unit
/// Gaussian reference sample.
#[allow(clippy::too_many_arguments)]
pub fn mfm_objective(
    tape: &mut Tape,
    xs: &[Var],
    x_hats: &[Var],
    task_term: Var,
    latents: Var,
    prior: Var,
    lambda: f64,
    bandwidth: Bandwidth,
) -> Result<CompositeObjective> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::config("lambda", "must be a non-negative number"));
    }
    if xs.len() != x_hats.len() || xs.is_empty() {
        return Err(Error::dim(
            "mfm_objective",
            "need one reconstruction per modality".to_string(),
        ));
    }
    let mut recon: Option<Var> = None;
    for (&x, &xh) in xs.iter().zip(x_hats) {
        let r = rms_reconstruction(tape, x, xh)?;
        recon = Some(match recon {
            None => r,
            Some(acc) => tape.add(acc, r),
        });
    }
    let mut terms = vec![
        LossTerm {
            name: "reconstruction".to_string(),
            weight: 1.0,
            value: recon.unwrap(),
        },
        LossTerm {
            name: "task".to_string(),
            weight: 1.0,
            value: task_term,
        },
    ];
    if lambda > 0.0 {
        let prior_term = mmd(tape, latents, prior, bandwidth, MmdEstimator::Biased)?;
        terms.push(LossTerm {
            name: "mmd".to_string(),
            weight: lambda,
            value: prior_term,
        });
    }
    CompositeObjective::new(terms)
}

/// Seeded unit-Gaussian reference sample for the MFM prior term.
pub fn gaussian_reference(n: usize, dim: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x505a);
    ArrayD::from_shape_fn(IxDyn(&[n, dim]), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}
