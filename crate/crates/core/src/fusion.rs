//! The fusion-paradigm zoo: every operator maps unimodal representations to
//! one multimodal representation on the tape.
//!
//! Concatenation (`ef`/`lf`) sets the floor; tensor fusion (`tf`) and its
//! low-rank approximation (`lrtf`) capture full higher-order interactions;
//! multiplicative interactions (`mi-*`) cover the bilinear family at three
//! sizes; `film` and `nlgate` modulate one modality by a network of the
//! other; `mult` runs crossmodal transformer blocks between sequence
//! representations. Operators are pure functions of (inputs, parameters)
//! and every one is gradient-checked against finite differences.
//!
//! Output dimensions are fixed by construction-time formulas (concat: sum of
//! dims; `tf`: product of dims+1; `mult`: pairs x d_model), so heads can be
//! sized before any data flows.

use crate::encoders::Rep;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{ParamSet, Scope};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Default entry cap for tensor fusion; the product of (d_m + 1) scales
/// exponentially with the number of modalities, so anything beyond this is
/// rejected with an explicit scalability error instead of an allocation.
pub const TF_DEFAULT_CAP: usize = 10_000_000;

fn default_cap() -> usize {
    TF_DEFAULT_CAP
}

fn default_heads() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Gate-network shape for `nlgate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "form")]
pub enum GateVariant {
    /// One sigmoid-activated linear layer from `z_2`.
    #[default]
    Dense,
    /// Query-key-value gate: learned queries attend over `slots` key/value
    /// slots projected from `z_2`; the attended summary is mapped to `d_1`
    /// gate weights. Internal sizes are not fixed by any reference, so they
    /// are explicit configuration with small defaults.
    QueryKeyValue {
        #[serde(default = "default_slots")]
        slots: usize,
        #[serde(default = "default_slot_dim")]
        dim: usize,
    },
}

fn default_slots() -> usize {
    4
}

fn default_slot_dim() -> usize {
    8
}

/// Declarative fusion-operator description, tagged with the operator string
/// used in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum FusionSpec {
    /// Early fusion: concatenate (flattened) raw inputs before any model.
    #[serde(rename = "ef")]
    Ef,
    /// Late fusion: concatenate encoder output vectors.
    #[serde(rename = "lf")]
    Lf,
    /// Tensor fusion: flattened outer product of bias-augmented vectors.
    #[serde(rename = "tf")]
    Tf {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    /// Low-rank tensor fusion with per-modality factor matrices.
    #[serde(rename = "lrtf")]
    Lrtf { rank: usize, out_dim: usize },
    /// Full bilinear product `z_1 W z_2 + z_1' U + V z_2 + b`.
    #[serde(rename = "mi-matrix")]
    MiMatrix { out_dim: usize },
    /// Diagonal bilinear: `w o z_1 o z_2 + u o z_1 + V z_2 + b`.
    #[serde(rename = "mi-vector")]
    MiVector,
    /// Scalar bilinear: `(w . z_2 + u) z_1 + (v . z_2 + b)`.
    #[serde(rename = "mi-scalar")]
    MiScalar,
    /// Feature-wise linear modulation by gamma/beta networks of `z_2`.
    #[serde(rename = "film")]
    Film {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden: Option<usize>,
    },
    /// Non-local gate `z_1 o h(z_2)` with sigmoid gate `h`.
    #[serde(rename = "nlgate")]
    NlGate {
        #[serde(default)]
        variant: GateVariant,
    },
    /// Crossmodal transformer over sequence representations.
    #[serde(rename = "mult")]
    Mult {
        d_model: usize,
        #[serde(default = "default_heads")]
        heads: usize,
        #[serde(default = "default_true")]
        positional: bool,
        /// Required for more than 3 modalities: a partition into at most 3
        /// groups, each early-fused along the feature axis. Which modalities
        /// belong together is the caller's judgment, not computed here.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        groups: Option<Vec<Vec<usize>>>,
    },
}

impl FusionSpec {
    /// The operator tag used in configs and reports.
    pub fn tag(&self) -> &'static str {
        match self {
            FusionSpec::Ef => "ef",
            FusionSpec::Lf => "lf",
            FusionSpec::Tf { .. } => "tf",
            FusionSpec::Lrtf { .. } => "lrtf",
            FusionSpec::MiMatrix { .. } => "mi-matrix",
            FusionSpec::MiVector => "mi-vector",
            FusionSpec::MiScalar => "mi-scalar",
            FusionSpec::Film { .. } => "film",
            FusionSpec::NlGate { .. } => "nlgate",
            FusionSpec::Mult { .. } => "mult",
        }
    }
}

/// Extra tape handles some operators expose for inspection (currently the
/// per-pair, per-head crossmodal attention matrices of `mult`).
#[derive(Debug, Default)]
pub struct FusionDetails {
    pub attention: Vec<Var>,
}

/// A fusion operator validated against its per-modality input dims.
#[derive(Clone, Debug)]
pub struct Fusion {
    spec: FusionSpec,
    /// Vector dims for vector operators; sequence feature dims for `mult`
    /// (after any grouping, the effective dims are derived from these).
    in_dims: Vec<usize>,
    out_dim: usize,
}

impl Fusion {
    pub fn new(spec: FusionSpec, in_dims: &[usize]) -> Result<Self> {
        let m = in_dims.len();
        if m == 0 || in_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("in_dims", "need positive dims"));
        }
        let out_dim = match &spec {
            FusionSpec::Ef | FusionSpec::Lf => in_dims.iter().sum(),
            FusionSpec::Tf { cap } => {
                if m < 2 {
                    return Err(Error::config("tf", "tensor fusion needs >= 2 modalities"));
                }
                let mut prod = 1usize;
                for &d in in_dims {
                    prod = prod.checked_mul(d + 1).unwrap_or(usize::MAX);
                }
                if prod > *cap {
                    return Err(Error::TooLarge {
                        context: "tensor fusion output".to_string(),
                        requested: prod,
                        limit: *cap,
                    });
                }
                prod
            }
            FusionSpec::Lrtf { rank, out_dim } => {
                if m < 2 {
                    return Err(Error::config("lrtf", "needs >= 2 modalities"));
                }
                if *rank == 0 {
                    return Err(Error::config("rank", "must be >= 1"));
                }
                if *out_dim == 0 {
                    return Err(Error::config("out_dim", "must be >= 1"));
                }
                *out_dim
            }
            FusionSpec::MiMatrix { out_dim } => {
                require_two(m, "mi-matrix")?;
                if *out_dim == 0 {
                    return Err(Error::config("out_dim", "must be >= 1"));
                }
                *out_dim
            }
            FusionSpec::MiVector => {
                require_two(m, "mi-vector")?;
                if in_dims[0] != in_dims[1] {
                    return Err(Error::dim(
                        "mi-vector",
                        format!(
                            "diagonal mode needs equal dims, got {} and {}",
                            in_dims[0], in_dims[1]
                        ),
                    ));
                }
                in_dims[0]
            }
            FusionSpec::MiScalar => {
                require_two(m, "mi-scalar")?;
                in_dims[0]
            }
            FusionSpec::Film { hidden } => {
                require_two(m, "film")?;
                if hidden == &Some(0) {
                    return Err(Error::config("hidden", "must be >= 1 when given"));
                }
                in_dims[0]
            }
            FusionSpec::NlGate { variant } => {
                require_two(m, "nlgate")?;
                if let GateVariant::QueryKeyValue { slots, dim } = variant {
                    if *slots == 0 || *dim == 0 {
                        return Err(Error::config("nlgate", "slots and dim must be >= 1"));
                    }
                }
                in_dims[0]
            }
            FusionSpec::Mult {
                d_model,
                heads,
                groups,
                ..
            } => {
                if *heads == 0 || d_model % heads != 0 {
                    return Err(Error::config(
                        "heads",
                        format!("head count must divide d_model ({d_model})"),
                    ));
                }
                let n_groups = validate_groups(groups.as_deref(), m)?;
                n_groups * (n_groups - 1) * d_model
            }
        };
        Ok(Fusion {
            spec,
            in_dims: in_dims.to_vec(),
            out_dim,
        })
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    pub fn tag(&self) -> &'static str {
        self.spec.tag()
    }

    /// Fused representation dimension, fixed at construction.
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Whether this operator consumes sequence representations.
    pub fn needs_sequences(&self) -> bool {
        matches!(self.spec, FusionSpec::Mult { .. })
    }

    /// Modality index groups used by `mult` (singleton groups by default).
    fn mult_groups(&self) -> Vec<Vec<usize>> {
        match &self.spec {
            FusionSpec::Mult {
                groups: Some(g), ..
            } => g.clone(),
            _ => (0..self.in_dims.len()).map(|i| vec![i]).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        let dims = &self.in_dims;
        match &self.spec {
            FusionSpec::Ef | FusionSpec::Lf | FusionSpec::Tf { .. } => 0,
            FusionSpec::Lrtf { rank, out_dim } => dims
                .iter()
                .map(|&d| rank * out_dim * (d + 1))
                .sum(),
            FusionSpec::MiMatrix { out_dim } => {
                let (d1, d2) = (dims[0], dims[1]);
                d1 * out_dim * d2 + d1 * out_dim + out_dim * d2 + out_dim
            }
            FusionSpec::MiVector => {
                let d = dims[0];
                d + d + d * d + d
            }
            FusionSpec::MiScalar => 2 * dims[1] + 2,
            FusionSpec::Film { hidden } => {
                let (d1, d2) = (dims[0], dims[1]);
                let one_net = match hidden {
                    None => d2 * d1 + d1,
                    Some(h) => d2 * h + h + h * d1 + d1,
                };
                2 * one_net
            }
            FusionSpec::NlGate { variant } => {
                let (d1, d2) = (dims[0], dims[1]);
                match variant {
                    GateVariant::Dense => d1 * d2 + d1,
                    GateVariant::QueryKeyValue { slots, dim } => {
                        let sd = slots * dim;
                        sd + 2 * (sd * d2 + sd) + d1 * sd + d1
                    }
                }
            }
            FusionSpec::Mult { d_model, heads, .. } => {
                let groups = self.mult_groups();
                let dm = *d_model;
                let dh = dm / heads;
                let f = 2 * dm;
                let proj: usize = groups
                    .iter()
                    .map(|g| {
                        let d: usize = g.iter().map(|&i| dims[i]).sum();
                        dm * d + dm
                    })
                    .sum();
                let n = groups.len();
                let per_pair =
                    heads * 3 * (dh * dm + dh) + dm * dm + dm + f * dm + f + dm * f + dm;
                proj + n * (n - 1) * per_pair
            }
        }
    }

    /// Seeded fan-in-uniform parameter initialization; biases start at zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x465553);
        let mut ps = ParamSet::new();
        let dims = &self.in_dims;
        match &self.spec {
            FusionSpec::Ef | FusionSpec::Lf | FusionSpec::Tf { .. } => {}
            FusionSpec::Lrtf { rank, out_dim } => {
                for (m, &d) in dims.iter().enumerate() {
                    for r in 0..*rank {
                        ps.push(
                            format!("factor{m}.{r}"),
                            uniform(&mut rng, &[*out_dim, d + 1], d + 1),
                        );
                    }
                }
            }
            FusionSpec::MiMatrix { out_dim } => {
                let (d1, d2) = (dims[0], dims[1]);
                ps.push("w", uniform(&mut rng, &[d1, *out_dim, d2], d1 * d2));
                ps.push("u", uniform(&mut rng, &[d1, *out_dim], d1));
                ps.push("v", uniform(&mut rng, &[*out_dim, d2], d2));
                ps.push("b", ArrayD::zeros(IxDyn(&[*out_dim])));
            }
            FusionSpec::MiVector => {
                let d = dims[0];
                ps.push("w", uniform(&mut rng, &[d], d));
                ps.push("u", uniform(&mut rng, &[d], d));
                ps.push("v", uniform(&mut rng, &[d, d], d));
                ps.push("b", ArrayD::zeros(IxDyn(&[d])));
            }
            FusionSpec::MiScalar => {
                let d2 = dims[1];
                ps.push("w", uniform(&mut rng, &[d2], d2));
                ps.push("u", ArrayD::zeros(IxDyn(&[])));
                ps.push("v", uniform(&mut rng, &[d2], d2));
                ps.push("b", ArrayD::zeros(IxDyn(&[])));
            }
            FusionSpec::Film { hidden } => {
                let (d1, d2) = (dims[0], dims[1]);
                for net in ["gamma", "beta"] {
                    match hidden {
                        None => {
                            ps.push(format!("{net}.layer0.w"), uniform(&mut rng, &[d1, d2], d2));
                            ps.push(format!("{net}.layer0.b"), ArrayD::zeros(IxDyn(&[d1])));
                        }
                        Some(h) => {
                            ps.push(format!("{net}.layer0.w"), uniform(&mut rng, &[*h, d2], d2));
                            ps.push(format!("{net}.layer0.b"), ArrayD::zeros(IxDyn(&[*h])));
                            ps.push(format!("{net}.layer1.w"), uniform(&mut rng, &[d1, *h], *h));
                            ps.push(format!("{net}.layer1.b"), ArrayD::zeros(IxDyn(&[d1])));
                        }
                    }
                }
            }
            FusionSpec::NlGate { variant } => {
                let (d1, d2) = (dims[0], dims[1]);
                match variant {
                    GateVariant::Dense => {
                        ps.push("gate.w", uniform(&mut rng, &[d1, d2], d2));
                        ps.push("gate.b", ArrayD::zeros(IxDyn(&[d1])));
                    }
                    GateVariant::QueryKeyValue { slots, dim } => {
                        let sd = slots * dim;
                        ps.push("gate.q", uniform(&mut rng, &[*slots, *dim], *dim));
                        ps.push("gate.wk", uniform(&mut rng, &[sd, d2], d2));
                        ps.push("gate.bk", ArrayD::zeros(IxDyn(&[sd])));
                        ps.push("gate.wv", uniform(&mut rng, &[sd, d2], d2));
                        ps.push("gate.bv", ArrayD::zeros(IxDyn(&[sd])));
                        ps.push("gate.wo", uniform(&mut rng, &[d1, sd], sd));
                        ps.push("gate.bo", ArrayD::zeros(IxDyn(&[d1])));
                    }
                }
            }
            FusionSpec::Mult { d_model, heads, .. } => {
                let dm = *d_model;
                let dh = dm / heads;
                let f = 2 * dm;
                let groups = self.mult_groups();
                for (g, members) in groups.iter().enumerate() {
                    let d: usize = members.iter().map(|&i| dims[i]).sum();
                    ps.push(format!("proj{g}.w"), uniform(&mut rng, &[dm, d], d));
                    ps.push(format!("proj{g}.b"), ArrayD::zeros(IxDyn(&[dm])));
                }
                let n = groups.len();
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let pair = format!("cm{i}_{j}");
                        for h in 0..*heads {
                            for mat in ["wq", "wk", "wv"] {
                                ps.push(
                                    format!("{pair}.head{h}.{mat}"),
                                    uniform(&mut rng, &[dh, dm], dm),
                                );
                                ps.push(
                                    format!("{pair}.head{h}.b{}", &mat[1..]),
                                    ArrayD::zeros(IxDyn(&[dh])),
                                );
                            }
                        }
                        ps.push(format!("{pair}.wo"), uniform(&mut rng, &[dm, dm], dm));
                        ps.push(format!("{pair}.bo"), ArrayD::zeros(IxDyn(&[dm])));
                        ps.push(format!("{pair}.ff.w1"), uniform(&mut rng, &[f, dm], dm));
                        ps.push(format!("{pair}.ff.b1"), ArrayD::zeros(IxDyn(&[f])));
                        ps.push(format!("{pair}.ff.w2"), uniform(&mut rng, &[dm, f], f));
                        ps.push(format!("{pair}.ff.b2"), ArrayD::zeros(IxDyn(&[dm])));
                    }
                }
            }
        }
        debug_assert_eq!(ps.num_scalars(), self.param_count());
        ps
    }

    /// Fuse representations into one multimodal vector on the tape.
    pub fn fuse(&self, tape: &mut Tape, scope: &Scope<'_>, inputs: &[Rep]) -> Result<Var> {
        self.fuse_detailed(tape, scope, inputs).map(|(v, _)| v)
    }

    /// Like [`Fusion::fuse`], also returning inspection handles.
    pub fn fuse_detailed(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        inputs: &[Rep],
    ) -> Result<(Var, FusionDetails)> {
        if inputs.len() != self.in_dims.len() {
            return Err(Error::dim(
                "fuse",
                format!(
                    "got {} inputs for {} modalities",
                    inputs.len(),
                    self.in_dims.len()
                ),
            ));
        }
        let mut details = FusionDetails::default();
        let out = match &self.spec {
            FusionSpec::Ef => {
                // flatten anything (sequences included) before concatenating
                let flats: Vec<Var> = inputs
                    .iter()
                    .map(|rep| match rep {
                        Rep::Vector(v) => *v,
                        Rep::Sequence { seq, .. } => {
                            let len = tape.value(*seq).len();
                            tape.reshape(*seq, &[len])
                        }
                    })
                    .collect();
                tape.concat(&flats)
            }
            FusionSpec::Lf => {
                let vecs: Vec<Var> = inputs.iter().map(|r| r.vector()).collect();
                tape.concat(&vecs)
            }
            FusionSpec::Tf { .. } => {
                let mut acc = self.augmented(tape, inputs[0].vector(), 0)?;
                for (m, rep) in inputs.iter().enumerate().skip(1) {
                    let aug = self.augmented(tape, rep.vector(), m)?;
                    acc = tape.kron(acc, aug);
                }
                acc
            }
            FusionSpec::Lrtf { rank, .. } => {
                let mut total = None;
                for r in 0..*rank {
                    let mut prod = None;
                    for (m, rep) in inputs.iter().enumerate() {
                        let aug = self.augmented(tape, rep.vector(), m)?;
                        let w = scope.var(&format!("factor{m}.{r}"));
                        let proj = tape.matvec(w, aug);
                        prod = Some(match prod {
                            None => proj,
                            Some(p) => tape.mul(p, proj),
                        });
                    }
                    let prod = prod.unwrap();
                    total = Some(match total {
                        None => prod,
                        Some(t) => tape.add(t, prod),
                    });
                }
                total.unwrap()
            }
            FusionSpec::MiMatrix { out_dim } => {
                let (z1, z2) = self.two_vectors(tape, inputs)?;
                let (d1, d2) = (self.in_dims[0], self.in_dims[1]);
                let w = scope.var("w");
                let w2 = tape.reshape(w, &[d1, out_dim * d2]);
                let z1w = tape.vecmat(z1, w2);
                let z1w = tape.reshape(z1w, &[*out_dim, d2]);
                let bilinear = tape.matvec(z1w, z2);
                let u = scope.var("u");
                let z1u = tape.vecmat(z1, u);
                let v = scope.var("v");
                let vz2 = tape.matvec(v, z2);
                let b = scope.var("b");
                let s1 = tape.add(bilinear, z1u);
                let s2 = tape.add(s1, vz2);
                tape.add(s2, b)
            }
            FusionSpec::MiVector => {
                let (z1, z2) = self.two_vectors(tape, inputs)?;
                let w = scope.var("w");
                let wz2 = tape.mul(w, z2);
                let bil = tape.mul(wz2, z1);
                let u = scope.var("u");
                let uz1 = tape.mul(u, z1);
                let v = scope.var("v");
                let vz2 = tape.matvec(v, z2);
                let b = scope.var("b");
                let s1 = tape.add(bil, uz1);
                let s2 = tape.add(s1, vz2);
                tape.add(s2, b)
            }
            FusionSpec::MiScalar => {
                let (z1, z2) = self.two_vectors(tape, inputs)?;
                let w = scope.var("w");
                let gamma = tape.dot(w, z2);
                let gamma = tape.add(gamma, scope.var("u"));
                let v = scope.var("v");
                let beta = tape.dot(v, z2);
                let beta = tape.add(beta, scope.var("b"));
                let scaled = tape.mul(z1, gamma);
                tape.add(scaled, beta)
            }
            FusionSpec::Film { hidden } => {
                let (z1, z2) = self.two_vectors(tape, inputs)?;
                let gamma = film_net(tape, &scope.child("gamma"), z2, hidden.is_some());
                let beta = film_net(tape, &scope.child("beta"), z2, hidden.is_some());
                let modulated = tape.mul(gamma, z1);
                tape.add(modulated, beta)
            }
            FusionSpec::NlGate { variant } => {
                let (z1, z2) = self.two_vectors(tape, inputs)?;
                let gate = scope.child("gate");
                let h = match variant {
                    GateVariant::Dense => {
                        let lin = tape.matvec(gate.var("w"), z2);
                        let lin = tape.add(lin, gate.var("b"));
                        tape.sigmoid(lin)
                    }
                    GateVariant::QueryKeyValue { slots, dim } => {
                        let k = tape.matvec(gate.var("wk"), z2);
                        let k = tape.add(k, gate.var("bk"));
                        let k = tape.reshape(k, &[*slots, *dim]);
                        let v = tape.matvec(gate.var("wv"), z2);
                        let v = tape.add(v, gate.var("bv"));
                        let v = tape.reshape(v, &[*slots, *dim]);
                        let q = gate.var("q");
                        let kt = tape.transpose(k);
                        let scores = tape.matmul(q, kt);
                        let scores = tape.scale(scores, 1.0 / (*dim as f64).sqrt());
                        let weights = tape.softmax_rows(scores);
                        let ctx = tape.matmul(weights, v);
                        let flat = tape.reshape(ctx, &[slots * dim]);
                        let lin = tape.matvec(gate.var("wo"), flat);
                        let lin = tape.add(lin, gate.var("bo"));
                        tape.sigmoid(lin)
                    }
                };
                tape.mul(z1, h)
            }
            FusionSpec::Mult {
                d_model,
                heads,
                positional,
                ..
            } => self.fuse_mult(tape, scope, inputs, *d_model, *heads, *positional, &mut details)?,
        };
        Ok((out, details))
    }

    /// `[z; 1]` with a shape check against the declared dim.
    fn augmented(&self, tape: &mut Tape, z: Var, m: usize) -> Result<Var> {
        let got = tape.value(z).len();
        if tape.value(z).ndim() != 1 || got != self.in_dims[m] {
            return Err(Error::dim(
                "fuse",
                format!("modality {m}: expected vector of dim {}, got {got}", self.in_dims[m]),
            ));
        }
        let one = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        Ok(tape.concat(&[z, one]))
    }

    fn two_vectors(&self, tape: &mut Tape, inputs: &[Rep]) -> Result<(Var, Var)> {
        let z1 = inputs[0].vector();
        let z2 = inputs[1].vector();
        for (m, &z) in [z1, z2].iter().enumerate() {
            if tape.value(z).len() != self.in_dims[m] {
                return Err(Error::dim(
                    "fuse",
                    format!(
                        "modality {m}: expected dim {}, got {}",
                        self.in_dims[m],
                        tape.value(z).len()
                    ),
                ));
            }
        }
        Ok((z1, z2))
    }

    #[allow(clippy::too_many_arguments)]
    fn fuse_mult(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        inputs: &[Rep],
        d_model: usize,
        heads: usize,
        positional: bool,
        details: &mut FusionDetails,
    ) -> Result<Var> {
        let groups = self.mult_groups();
        // group sequences: feature-concat members, then project to d_model
        let mut projected = Vec::with_capacity(groups.len());
        for (g, members) in groups.iter().enumerate() {
            let mut seqs = Vec::with_capacity(members.len());
            let mut t_len = None;
            for &i in members {
                let seq = inputs[i].sequence().ok_or_else(|| {
                    Error::dim(
                        "mult",
                        format!("modality {i} must provide a sequence representation"),
                    )
                })?;
                let shape = tape.value(seq).shape().to_vec();
                match t_len {
                    None => t_len = Some(shape[0]),
                    Some(t) if t != shape[0] => {
                        return Err(Error::dim(
                            "mult",
                            format!(
                                "group {g} mixes sequence lengths {t} and {}; align first",
                                shape[0]
                            ),
                        ))
                    }
                    _ => {}
                }
                seqs.push(seq);
            }
            let fused_seq = if seqs.len() == 1 {
                seqs[0]
            } else {
                tape.concat_cols(&seqs)
            };
            let pscope = scope.child(&format!("proj{g}"));
            let proj = dense_rows(tape, pscope.var("w"), pscope.var("b"), fused_seq);
            let proj = if positional {
                let t = tape.value(proj).shape()[0];
                let pe = tape.leaf(sinusoidal_encoding(t, d_model));
                tape.add(proj, pe)
            } else {
                proj
            };
            projected.push(proj);
        }

        let n = projected.len();
        let mut pooled = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pair = scope.child(&format!("cm{i}_{j}"));
                let block = crossmodal_block(
                    tape,
                    &pair,
                    projected[i],
                    projected[j],
                    d_model,
                    heads,
                    details,
                );
                pooled.push(tape.mean_axis(block, 0));
            }
        }
        Ok(tape.concat(&pooled))
    }
}

fn require_two(m: usize, op: &str) -> Result<()> {
    if m != 2 {
        return Err(Error::config(
            op,
            format!("operator takes exactly 2 modalities, got {m}"),
        ));
    }
    Ok(())
}

fn validate_groups(groups: Option<&[Vec<usize>]>, m: usize) -> Result<usize> {
    match groups {
        None => {
            if m < 2 {
                return Err(Error::config("mult", "needs >= 2 modalities"));
            }
            if m > 3 {
                return Err(Error::config(
                    "mult",
                    format!(
                        "{m} modalities exceed the 3 crossmodal streams; supply a `groups` \
                         clustering into at most 3 groups"
                    ),
                ));
            }
            Ok(m)
        }
        Some(gs) => {
            if !(2..=3).contains(&gs.len()) {
                return Err(Error::config("groups", "need 2 or 3 groups"));
            }
            let mut seen = vec![false; m];
            for g in gs {
                if g.is_empty() {
                    return Err(Error::config("groups", "empty group"));
                }
                for &i in g {
                    if i >= m || seen[i] {
                        return Err(Error::config(
                            "groups",
                            format!("modality {i} missing, duplicated, or out of range"),
                        ));
                    }
                    seen[i] = true;
                }
            }
            if !seen.iter().all(|&s| s) {
                return Err(Error::config("groups", "groups must cover every modality"));
            }
            Ok(gs.len())
        }
    }
}

/// One crossmodal transformer block: queries from `a`, keys/values from `b`,
/// multi-head attention, residual, feed-forward, residual.
fn crossmodal_block(
    tape: &mut Tape,
    scope: &Scope<'_>,
    a: Var,
    b: Var,
    d_model: usize,
    heads: usize,
    details: &mut FusionDetails,
) -> Var {
    let dh = d_model / heads;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let hs = scope.child(&format!("head{h}"));
        let q = dense_rows(tape, hs.var("wq"), hs.var("bq"), a);
        let k = dense_rows(tape, hs.var("wk"), hs.var("bk"), b);
        let v = dense_rows(tape, hs.var("wv"), hs.var("bv"), b);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax_rows(scaled);
        details.attention.push(weights);
        head_outs.push(tape.matmul(weights, v));
    }
    let ctx = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    let out = dense_rows(tape, scope.var("wo"), scope.var("bo"), ctx);
    let x1 = tape.add(a, out);
    let ff = scope.child("ff");
    let h1 = dense_rows(tape, ff.var("w1"), ff.var("b1"), x1);
    let h1 = tape.relu(h1);
    let h2 = dense_rows(tape, ff.var("w2"), ff.var("b2"), h1);
    tape.add(x1, h2)
}

/// gamma/beta network for FiLM: tanh hidden layer when configured, linear
/// output so modulation weights can reach and exceed 1.
fn film_net(tape: &mut Tape, scope: &Scope<'_>, z2: Var, has_hidden: bool) -> Var {
    let l0 = tape.matvec(scope.var("layer0.w"), z2);
    let l0 = tape.add(l0, scope.var("layer0.b"));
    if !has_hidden {
        return l0;
    }
    let h = tape.tanh(l0);
    let l1 = tape.matvec(scope.var("layer1.w"), h);
    tape.add(l1, scope.var("layer1.b"))
}

/// Row-wise `X W^T + b` (same convention as the encoders).
fn dense_rows(tape: &mut Tape, w: Var, b: Var, x: Var) -> Var {
    let wt = tape.transpose(w);
    let mm = tape.matmul(x, wt);
    tape.add_row_vec(mm, b)
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
