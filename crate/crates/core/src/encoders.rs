//! Unimodal encoders mapping raw modality arrays to representations.
//!
//! Each encoder kind is the smallest member of its family: a tanh MLP, a
//! single gated recurrent cell, one self-attention block with feed-forward,
//! one convolution plus global pooling, and a deep-set network whose pooling
//! step sums in a canonical order so permutation invariance holds *exactly*,
//! not just up to float reordering. All forward passes run on a [`Tape`], so
//! every encoder is differentiable end to end and checked against central
//! finite differences in the tests.
//!
//! Vector-producing kinds yield [`Rep::Vector`]; temporal kinds yield
//! [`Rep::Sequence`] carrying both the full hidden sequence (crossmodal
//! fusion consumes this) and the last-step vector (concatenation fusion
//! consumes this).

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{ParamSet, Scope};
use crate::synthdata::ModalityKind;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Encoder families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mlp,
    Recurrent,
    Convolutional,
    Transformer,
    DeepSet,
    Identity,
}

/// Declarative encoder description; validated against the modality it reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Expected input shape: `[d]`, `[T, d]`, or `[H, W, C]` by kind.
    pub in_shape: Vec<usize>,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub seed: u64,
    /// Transformer only: add sinusoidal positional encodings.
    #[serde(default = "default_true")]
    pub positional: bool,
}

fn default_true() -> bool {
    true
}

/// Output of an encoder on the tape.
#[derive(Clone, Copy, Debug)]
pub enum Rep {
    /// A `d_m` vector.
    Vector(Var),
    /// A `T x d_m` hidden sequence plus its last-step vector.
    Sequence { seq: Var, last: Var },
}

impl Rep {
    /// The vector form: the vector itself, or the last step of a sequence.
    pub fn vector(&self) -> Var {
        match self {
            Rep::Vector(v) => *v,
            Rep::Sequence { last, .. } => *last,
        }
    }

    /// The sequence form, when the encoder produces one.
    pub fn sequence(&self) -> Option<Var> {
        match self {
            Rep::Vector(_) => None,
            Rep::Sequence { seq, .. } => Some(*seq),
        }
    }
}

/// Plain-array encoder output (for callers not holding a tape).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub vector: ArrayD<f64>,
    pub sequence: Option<ArrayD<f64>>,
}

/// A validated encoder: spec plus the modality kind it was checked against.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
}

impl Encoder {
    /// Validate `spec` against the kind of modality it will read.
    pub fn new(spec: EncoderSpec, modality: ModalityKind) -> Result<Self> {
        if spec.out_dim == 0 {
            return Err(Error::config("out_dim", "must be >= 1"));
        }
        if spec.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden_dims", "entries must be >= 1"));
        }
        let compatible = match spec.kind {
            EncoderKind::Mlp | EncoderKind::Identity => {
                matches!(modality, ModalityKind::StaticVector | ModalityKind::Table)
            }
            EncoderKind::Recurrent | EncoderKind::Transformer => {
                matches!(modality, ModalityKind::TemporalSequence)
            }
            EncoderKind::Convolutional => matches!(modality, ModalityKind::ImageGrid),
            EncoderKind::DeepSet => matches!(modality, ModalityKind::Set),
        };
        if !compatible {
            return Err(Error::config(
                "kind",
                format!("{:?} encoder cannot read a {modality:?} modality", spec.kind),
            ));
        }
        let arity = match spec.kind {
            EncoderKind::Mlp | EncoderKind::Identity => 1,
            EncoderKind::Convolutional => 3,
            _ => 2,
        };
        if spec.in_shape.len() != arity || spec.in_shape.iter().any(|&s| s == 0) {
            return Err(Error::config(
                "in_shape",
                format!(
                    "{:?} encoder needs {arity} positive dims, got {:?}",
                    spec.kind, spec.in_shape
                ),
            ));
        }
        match spec.kind {
            EncoderKind::Identity => {
                if spec.out_dim != spec.in_shape[0] {
                    return Err(Error::config(
                        "out_dim",
                        "identity encoder requires out_dim == input dim",
                    ));
                }
                if !spec.hidden_dims.is_empty() {
                    return Err(Error::config("hidden_dims", "identity encoder takes none"));
                }
            }
            EncoderKind::Recurrent => {
                if !spec.hidden_dims.is_empty() {
                    return Err(Error::config(
                        "hidden_dims",
                        "recurrent cell state is out_dim; hidden_dims must be empty",
                    ));
                }
            }
            EncoderKind::Convolutional => {
                if spec.in_shape[0] < 3 || spec.in_shape[1] < 3 {
                    return Err(Error::config(
                        "in_shape",
                        "convolutional encoder needs spatial dims >= 3 for its 3x3 kernel",
                    ));
                }
            }
            _ => {}
        }
        Ok(Encoder { spec })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    /// Whether this encoder produces a sequence representation.
    pub fn is_temporal(&self) -> bool {
        matches!(
            self.spec.kind,
            EncoderKind::Recurrent | EncoderKind::Transformer
        )
    }

    /// Sequence length of the output, for temporal kinds.
    pub fn seq_len(&self) -> Option<usize> {
        self.is_temporal().then(|| self.spec.in_shape[0])
    }

    /// Feed-forward width used by the transformer kind.
    fn ff_dim(&self) -> usize {
        self.spec
            .hidden_dims
            .first()
            .copied()
            .unwrap_or(2 * self.spec.out_dim)
    }

    /// Channel count used by the convolutional kind.
    fn conv_channels(&self) -> usize {
        self.spec.hidden_dims.first().copied().unwrap_or(8)
    }

    /// Deep-set element-network layer widths (input layer excluded).
    fn phi_dims(&self) -> Vec<usize> {
        self.spec.hidden_dims.clone()
    }

    /// Analytic parameter count; the tests pin it to the materialized sets.
    pub fn param_count(&self) -> usize {
        let d_out = self.spec.out_dim;
        match self.spec.kind {
            EncoderKind::Identity => 0,
            EncoderKind::Mlp => {
                let mut count = 0;
                let mut prev = self.spec.in_shape[0];
                for &h in self.spec.hidden_dims.iter().chain([d_out].iter()) {
                    count += prev * h + h;
                    prev = h;
                }
                count
            }
            EncoderKind::Recurrent => {
                let d_in = self.spec.in_shape[1];
                3 * (d_out * d_in + d_out * d_out + d_out)
            }
            EncoderKind::Transformer => {
                let d_in = self.spec.in_shape[1];
                let f = self.ff_dim();
                (d_out * d_in + d_out)
                    + 4 * (d_out * d_out + d_out)
                    + (f * d_out + f)
                    + (d_out * f + d_out)
            }
            EncoderKind::Convolutional => {
                let c_in = self.spec.in_shape[2];
                let c1 = self.conv_channels();
                9 * c_in * c1 + c1 + c1 * d_out + d_out
            }
            EncoderKind::DeepSet => {
                let mut count = 0;
                let mut prev = self.spec.in_shape[1];
                for &h in &self.phi_dims() {
                    count += prev * h + h;
                    prev = h;
                }
                count + prev * d_out + d_out
            }
        }
    }

    /// Seeded fan-in-uniform initialization; biases start at zero.
    pub fn init_params(&self) -> ParamSet {
        self.init_params_with_seed(self.spec.seed)
    }

    /// Same initialization under an explicit seed (model bundles derive
    /// per-run seeds instead of using the spec's).
    pub fn init_params_with_seed(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x454e43);
        let mut ps = ParamSet::new();
        let d_out = self.spec.out_dim;
        match self.spec.kind {
            EncoderKind::Identity => {}
            EncoderKind::Mlp => {
                let mut prev = self.spec.in_shape[0];
                let dims: Vec<usize> = self
                    .spec
                    .hidden_dims
                    .iter()
                    .copied()
                    .chain([d_out])
                    .collect();
                for (i, h) in dims.into_iter().enumerate() {
                    ps.push(format!("layer{i}.w"), uniform(&mut rng, &[h, prev], prev));
                    ps.push(format!("layer{i}.b"), ArrayD::zeros(IxDyn(&[h])));
                    prev = h;
                }
            }
            EncoderKind::Recurrent => {
                let d_in = self.spec.in_shape[1];
                for gate in ["z", "r", "h"] {
                    ps.push(format!("w{gate}"), uniform(&mut rng, &[d_out, d_in], d_in));
                    ps.push(format!("u{gate}"), uniform(&mut rng, &[d_out, d_out], d_out));
                    ps.push(format!("b{gate}"), ArrayD::zeros(IxDyn(&[d_out])));
                }
            }
            EncoderKind::Transformer => {
                let d_in = self.spec.in_shape[1];
                let f = self.ff_dim();
                ps.push("proj.w", uniform(&mut rng, &[d_out, d_in], d_in));
                ps.push("proj.b", ArrayD::zeros(IxDyn(&[d_out])));
                for name in ["wq", "wk", "wv", "wo"] {
                    ps.push(
                        format!("attn.{name}"),
                        uniform(&mut rng, &[d_out, d_out], d_out),
                    );
                    ps.push(
                        format!("attn.b{}", &name[1..]),
                        ArrayD::zeros(IxDyn(&[d_out])),
                    );
                }
                ps.push("ff.w1", uniform(&mut rng, &[f, d_out], d_out));
                ps.push("ff.b1", ArrayD::zeros(IxDyn(&[f])));
                ps.push("ff.w2", uniform(&mut rng, &[d_out, f], f));
                ps.push("ff.b2", ArrayD::zeros(IxDyn(&[d_out])));
            }
            EncoderKind::Convolutional => {
                let c_in = self.spec.in_shape[2];
                let c1 = self.conv_channels();
                ps.push("conv.k", uniform(&mut rng, &[3, 3, c_in, c1], 9 * c_in));
                ps.push("conv.b", ArrayD::zeros(IxDyn(&[c1])));
                ps.push("dense.w", uniform(&mut rng, &[d_out, c1], c1));
                ps.push("dense.b", ArrayD::zeros(IxDyn(&[d_out])));
            }
            EncoderKind::DeepSet => {
                let mut prev = self.spec.in_shape[1];
                for (i, &h) in self.phi_dims().iter().enumerate() {
                    ps.push(format!("phi{i}.w"), uniform(&mut rng, &[h, prev], prev));
                    ps.push(format!("phi{i}.b"), ArrayD::zeros(IxDyn(&[h])));
                    prev = h;
                }
                ps.push("rho.w", uniform(&mut rng, &[d_out, prev], prev));
                ps.push("rho.b", ArrayD::zeros(IxDyn(&[d_out])));
            }
        }
        debug_assert_eq!(ps.num_scalars(), self.param_count());
        ps
    }

    /// Run the encoder on an input already registered on the tape.
    ///
    /// Set inputs may have any cardinality (sets shrink under element
    /// drops); every other kind must match the declared shape exactly.
    pub fn forward_var(&self, tape: &mut Tape, scope: &Scope<'_>, x: Var) -> Result<Rep> {
        let shape = tape.value(x).shape();
        let ok = if self.spec.kind == EncoderKind::DeepSet {
            shape.len() == 2 && shape[1] == self.spec.in_shape[1]
        } else {
            shape == self.spec.in_shape.as_slice()
        };
        if !ok {
            return Err(Error::dim(
                "encode",
                format!(
                    "input shape {:?} != expected {:?}",
                    tape.value(x).shape(),
                    self.spec.in_shape
                ),
            ));
        }
        Ok(match self.spec.kind {
            EncoderKind::Identity => Rep::Vector(x),
            EncoderKind::Mlp => {
                let n_layers = self.spec.hidden_dims.len() + 1;
                let mut h = x;
                for i in 0..n_layers {
                    let w = scope.var(&format!("layer{i}.w"));
                    let b = scope.var(&format!("layer{i}.b"));
                    let lin = dense_vec(tape, w, b, h);
                    h = tape.tanh(lin);
                }
                Rep::Vector(h)
            }
            EncoderKind::Recurrent => self.forward_gru(tape, scope, x),
            EncoderKind::Transformer => self.forward_transformer(tape, scope, x),
            EncoderKind::Convolutional => {
                let k = scope.var("conv.k");
                let b = scope.var("conv.b");
                let conv = tape.conv2d(x, k, b);
                let act = tape.relu(conv);
                let shape = tape.value(act).shape().to_vec();
                let flat = tape.reshape(act, &[shape[0] * shape[1], shape[2]]);
                let pooled = tape.mean_axis(flat, 0);
                let w = scope.var("dense.w");
                let db = scope.var("dense.b");
                let lin = dense_vec(tape, w, db, pooled);
                Rep::Vector(tape.tanh(lin))
            }
            EncoderKind::DeepSet => {
                // The empty set pools to the zero vector; rho still runs.
                let pooled = if tape.value(x).shape()[0] == 0 {
                    let width = self.phi_dims().last().copied().unwrap_or(self.spec.in_shape[1]);
                    tape.leaf(ArrayD::zeros(IxDyn(&[width])))
                } else {
                    let mut h = x;
                    for i in 0..self.phi_dims().len() {
                        let w = scope.var(&format!("phi{i}.w"));
                        let b = scope.var(&format!("phi{i}.b"));
                        let lin = dense_rows(tape, w, b, h);
                        h = tape.tanh(lin);
                    }
                    tape.sorted_mean_axis0(h)
                };
                let w = scope.var("rho.w");
                let b = scope.var("rho.b");
                let lin = dense_vec(tape, w, b, pooled);
                Rep::Vector(tape.tanh(lin))
            }
        })
    }

    fn forward_gru(&self, tape: &mut Tape, scope: &Scope<'_>, x: Var) -> Rep {
        let t_len = self.spec.in_shape[0];
        let h_dim = self.spec.out_dim;
        let (wz, uz, bz) = (scope.var("wz"), scope.var("uz"), scope.var("bz"));
        let (wr, ur, br) = (scope.var("wr"), scope.var("ur"), scope.var("br"));
        let (wh, uh, bh) = (scope.var("wh"), scope.var("uh"), scope.var("bh"));
        let mut h = tape.leaf(ArrayD::zeros(IxDyn(&[h_dim])));
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.row(x, t);
            let z = gru_gate(tape, wz, uz, bz, xt, h);
            let z = tape.sigmoid(z);
            let r = gru_gate(tape, wr, ur, br, xt, h);
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, h);
            let cand = gru_gate(tape, wh, uh, bh, xt, rh);
            let cand = tape.tanh(cand);
            let neg_z = tape.neg(z);
            let keep = tape.add_const(neg_z, 1.0);
            let kept = tape.mul(keep, h);
            let new = tape.mul(z, cand);
            h = tape.add(kept, new);
            steps.push(h);
        }
        let seq = tape.stack_rows(&steps);
        Rep::Sequence { seq, last: h }
    }

    fn forward_transformer(&self, tape: &mut Tape, scope: &Scope<'_>, x: Var) -> Rep {
        let t_len = self.spec.in_shape[0];
        let dm = self.spec.out_dim;
        let proj = dense_rows(tape, scope.var("proj.w"), scope.var("proj.b"), x);
        let x0 = if self.spec.positional {
            let pe = tape.leaf(sinusoidal_encoding(t_len, dm));
            tape.add(proj, pe)
        } else {
            proj
        };
        let attn = scope.child("attn");
        let q = dense_rows(tape, attn.var("wq"), attn.var("bq"), x0);
        let k = dense_rows(tape, attn.var("wk"), attn.var("bk"), x0);
        let v = dense_rows(tape, attn.var("wv"), attn.var("bv"), x0);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (dm as f64).sqrt());
        let weights = tape.softmax_rows(scaled);
        let ctx = tape.matmul(weights, v);
        let out = dense_rows(tape, attn.var("wo"), attn.var("bo"), ctx);
        let x1 = tape.add(x0, out);
        let ff = scope.child("ff");
        let h1 = dense_rows(tape, ff.var("w1"), ff.var("b1"), x1);
        let h1 = tape.relu(h1);
        let h2 = dense_rows(tape, ff.var("w2"), ff.var("b2"), h1);
        let x2 = tape.add(x1, h2);
        let last = tape.row(x2, t_len - 1);
        Rep::Sequence { seq: x2, last }
    }

    /// Convenience wrapper: build a throwaway tape and return plain arrays.
    pub fn encode(&self, params: &ParamSet, x: &ArrayD<f64>) -> Result<Encoded> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let rep = self.forward_var(&mut tape, &bound.root(), xv)?;
        Ok(match rep {
            Rep::Vector(v) => Encoded {
                vector: tape.value(v).clone(),
                sequence: None,
            },
            Rep::Sequence { seq, last } => Encoded {
                vector: tape.value(last).clone(),
                sequence: Some(tape.value(seq).clone()),
            },
        })
    }
}

/// `W x + b` for vector input and `(out, in)` weight.
fn dense_vec(tape: &mut Tape, w: Var, b: Var, x: Var) -> Var {
    let mv = tape.matvec(w, x);
    tape.add(mv, b)
}

/// Row-wise `X W^T + b` for `(rows, in)` input and `(out, in)` weight.
fn dense_rows(tape: &mut Tape, w: Var, b: Var, x: Var) -> Var {
    let wt = tape.transpose(w);
    let mm = tape.matmul(x, wt);
    tape.add_row_vec(mm, b)
}

fn gru_gate(tape: &mut Tape, w: Var, u: Var, b: Var, xt: Var, h: Var) -> Var {
    let wx = tape.matvec(w, xt);
    let uh = tape.matvec(u, h);
    let s = tape.add(wx, uh);
    tape.add(s, b)
}

fn uniform(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let lim = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-lim..lim))
}

/// Fixed sinusoidal positional encodings, shape `(t_len, dim)`.
fn sinusoidal_encoding(t_len: usize, dim: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[t_len, dim]), |ix| {
        let (t, i) = (ix[0] as f64, ix[1]);
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        if i % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}
