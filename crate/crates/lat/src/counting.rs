//! Co-attentive counting model with a low-rank bilinear count regressor.
//!
//! The encoder scores every (object, question word) pair from the packed
//! visual+box projection, the label embedding, and the word embedding,
//! then derives object weights (mu) and word weights (nu) from row and
//! column sums of the score matrix. The image encodes as the mu-weighted
//! sum of projected visual features; the question as a Bi-LSTM over the
//! nu-weighted word embeddings. The regressor evaluates the Tucker-factored
//! bilinear form `(Wq^T f)^T Tc (Wf^T q) + b_r` without ever materializing
//! the dense `d x d` weight; the dense reconstruction exists only as a test
//! oracle.
//!
//! Ablation variants (used by the harness) reconfigure the same model:
//! `NoCoattention` pins the word weights uniform, `NoL`/`NoVB`/`NoB` drop
//! terms from the score, `LinearRegression` swaps the factored regressor
//! for an elementwise-product affine head, and the one-hot variants replace
//! the pre-trained embeddings with learned projections of one-hot vectors
//! (separate or shared between object labels and question words).

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::embedding::QuestionFeatures;
use crate::error::{LatError, Result};
use crate::features::SceneFeatures;
use crate::tensor::cells::{bilstm_encode, CellKind, RecurrentCell};
use crate::tensor::norm::{BatchNorm, Mode};
use crate::tensor::ops::{linear_rows, stack_rows};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Score written into masked (padding) columns of the score matrix; large
/// and negative but finite so the engine's finiteness checks hold.
pub const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoCoattention,
    NoL,
    NoVB,
    NoB,
    LinearRegression,
    OnehotSeparate,
    OnehotShared,
}

impl Variant {
    pub fn all() -> [Variant; 8] {
        [
            Variant::Full,
            Variant::NoCoattention,
            Variant::NoL,
            Variant::NoVB,
            Variant::NoB,
            Variant::LinearRegression,
            Variant::OnehotSeparate,
            Variant::OnehotShared,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCoattention => "no_coattention",
            Variant::NoL => "no_L",
            Variant::NoVB => "no_VB",
            Variant::NoB => "no_B",
            Variant::LinearRegression => "linear_regression",
            Variant::OnehotSeparate => "onehot_separate",
            Variant::OnehotShared => "onehot_shared",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LatError;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::all()
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LatError::Contract(format!("unknown counting variant '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct CountingConfig {
    pub d_v: usize,
    pub d_w: usize,
    /// Joint encoding dimension (must be even: the Bi-LSTM halves it).
    pub d: usize,
    /// Tucker rank of the count regressor.
    pub k: usize,
    pub variant: Variant,
}

impl CountingConfig {
    pub fn new(d_v: usize, d_w: usize, d: usize, k: usize) -> CountingConfig {
        CountingConfig { d_v, d_w, d, k, variant: Variant::Full }
    }

    pub fn with_variant(mut self, variant: Variant) -> CountingConfig {
        self.variant = variant;
        self
    }
}

/// Two-layer projection of packed visual+box rows into the linguistic
/// space, with batch normalization and ReLU between the layers.
struct VisualProjection {
    w1: Tensor,
    b1: Tensor,
    bn: BatchNorm,
    w2: Tensor,
    b2: Tensor,
}

impl VisualProjection {
    fn new(in_dim: usize, d_w: usize, rng: &mut crate::Rng) -> VisualProjection {
        VisualProjection {
            w1: Tensor::glorot(in_dim, d_w, rng),
            b1: Tensor::zeros_param(&[d_w]),
            bn: BatchNorm::new(d_w),
            w2: Tensor::glorot(d_w, d_w, rng),
            b2: Tensor::zeros_param(&[d_w]),
        }
    }

    fn apply(&self, o: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = linear_rows(o, &self.w1, Some(&self.b1))?;
        let h = self.bn.forward(&h, mode)?.relu()?;
        linear_rows(&h, &self.w2, Some(&self.b2))
    }
}

/// Learned one-hot projections used by the embedding-free ablations.
enum OnehotProj {
    Separate { obj: Tensor, txt: Tensor },
    Shared { proj: Tensor },
}

pub struct CountingModel {
    pub cfg: CountingConfig,
    proj: Option<VisualProjection>,
    w_a: Tensor,
    b_a: Tensor,
    w_s: Tensor,
    lstm_f: RecurrentCell,
    lstm_b: RecurrentCell,
    // factored regressor (absent under LinearRegression)
    w_q: Option<Tensor>,
    t_c: Option<Tensor>,
    w_f: Option<Tensor>,
    // affine head for the LinearRegression ablation
    lin_w: Option<Tensor>,
    b_r: Tensor,
    onehot: Option<OnehotProj>,
    vocab: Option<Vocab>,
}

/// Everything one forward pass needs. `labels` and `tokens` feed the
/// one-hot variants; embedding-based variants read the precomputed
/// matrices only.
pub struct CountingInput<'a> {
    pub scene: &'a SceneFeatures,
    pub question: &'a QuestionFeatures,
    pub labels: &'a [String],
    pub tokens: &'a [String],
}

/// Attention snapshot for inspection; values copied out of the graph.
#[derive(Debug, Clone)]
pub struct CoAttentionWeights {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    /// Row-major `[m, n]` score matrix (masked columns hold the sentinel).
    pub s: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

pub struct CountingOutput {
    pub score: Tensor,
    pub weights: CoAttentionWeights,
}

/// Round half away from zero, clamped below at zero.
pub fn round_count(score: f64) -> i64 {
    (score.round().max(0.0)) as i64
}

impl CountingModel {
    pub fn new(cfg: CountingConfig, rng: &mut crate::Rng) -> Result<CountingModel> {
        Self::with_vocab(cfg, None, rng)
    }

    /// One-hot variants need the dataset vocabulary; every other variant
    /// rejects one.
    pub fn with_vocab(
        cfg: CountingConfig,
        vocab: Option<Vocab>,
        rng: &mut crate::Rng,
    ) -> Result<CountingModel> {
        if cfg.d % 2 != 0 {
            return Err(LatError::Contract(format!(
                "encoding dimension d={} must be even for the Bi-LSTM halves",
                cfg.d
            )));
        }
        if cfg.k == 0 || cfg.k > cfg.d {
            return Err(LatError::Contract(format!(
                "rank k={} must lie in [1, d={}]",
                cfg.k, cfg.d
            )));
        }
        let onehot_variant =
            matches!(cfg.variant, Variant::OnehotSeparate | Variant::OnehotShared);
        if onehot_variant != vocab.is_some() {
            return Err(LatError::Contract(
                "one-hot variants require a vocabulary; others take none".into(),
            ));
        }

        let proj = match cfg.variant {
            Variant::NoVB => None,
            Variant::NoB => Some(VisualProjection::new(cfg.d_v, cfg.d_w, rng)),
            _ => Some(VisualProjection::new(cfg.d_v + 5, cfg.d_w, rng)),
        };
        let w_a = Tensor::glorot_vec(cfg.d_w, rng);
        let b_a = Tensor::zeros_param(&[]);
        let w_s = Tensor::glorot(cfg.d_v, cfg.d, rng);
        let lstm_f = RecurrentCell::new(CellKind::Lstm, cfg.d_w, cfg.d / 2, rng)?;
        let lstm_b = RecurrentCell::new(CellKind::Lstm, cfg.d_w, cfg.d / 2, rng)?;
        let (w_q, t_c, w_f, lin_w) = if cfg.variant == Variant::LinearRegression {
            (None, None, None, Some(Tensor::glorot_vec(cfg.d, rng)))
        } else {
            (
                Some(Tensor::glorot(cfg.d, cfg.k, rng)),
                Some(Tensor::glorot(cfg.k, cfg.k, rng)),
                Some(Tensor::glorot(cfg.d, cfg.k, rng)),
                None,
            )
        };
        let b_r = Tensor::zeros_param(&[]);
        let onehot = match (&cfg.variant, &vocab) {
            (Variant::OnehotSeparate, Some(v)) => Some(OnehotProj::Separate {
                obj: Tensor::glorot(v.len(), cfg.d_w, rng),
                txt: Tensor::glorot(v.len(), cfg.d_w, rng),
            }),
            (Variant::OnehotShared, Some(v)) => Some(OnehotProj::Shared {
                proj: Tensor::glorot(v.len(), cfg.d_w, rng),
            }),
            _ => None,
        };
        Ok(CountingModel {
            cfg,
            proj,
            w_a,
            b_a,
            w_s,
            lstm_f,
            lstm_b,
            w_q,
            t_c,
            w_f,
            lin_w,
            b_r,
            onehot,
            vocab,
        })
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        self.vocab.as_ref()
    }

    /// Ordered, named parameter list (the optimizer and checkpoint order).
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        if let Some(p) = &self.proj {
            out.push(("co.w1".into(), p.w1.clone()));
            out.push(("co.b1".into(), p.b1.clone()));
            out.push(("co.bn.gamma".into(), p.bn.gamma.clone()));
            out.push(("co.bn.beta".into(), p.bn.beta.clone()));
            out.push(("co.w2".into(), p.w2.clone()));
            out.push(("co.b2".into(), p.b2.clone()));
        }
        out.push(("co.w_a".into(), self.w_a.clone()));
        out.push(("co.b_a".into(), self.b_a.clone()));
        out.push(("enc.w_s".into(), self.w_s.clone()));
        for (prefix, cell) in [("enc.lstm_f", &self.lstm_f), ("enc.lstm_b", &self.lstm_b)] {
            for (name, t) in cell.params() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        if let Some(t) = &self.w_q {
            out.push(("reg.w_q".into(), t.clone()));
        }
        if let Some(t) = &self.t_c {
            out.push(("reg.t_c".into(), t.clone()));
        }
        if let Some(t) = &self.w_f {
            out.push(("reg.w_f".into(), t.clone()));
        }
        if let Some(t) = &self.lin_w {
            out.push(("reg.lin_w".into(), t.clone()));
        }
        out.push(("reg.b_r".into(), self.b_r.clone()));
        match &self.onehot {
            Some(OnehotProj::Separate { obj, txt }) => {
                out.push(("emb.obj".into(), obj.clone()));
                out.push(("emb.txt".into(), txt.clone()));
            }
            Some(OnehotProj::Shared { proj }) => {
                out.push(("emb.shared".into(), proj.clone()));
            }
            None => {}
        }
        out
    }

    /// Batch-norm running statistics, exposed for checkpointing.
    pub fn bn_state(&self) -> Option<(&BatchNorm, &'static str)> {
        self.proj.as_ref().map(|p| (&p.bn, "co.bn"))
    }

    /// Number of stored values in the count-regression head.
    pub fn regression_param_count(&self) -> usize {
        let factored = self.w_q.as_ref().map_or(0, Tensor::numel)
            + self.t_c.as_ref().map_or(0, Tensor::numel)
            + self.w_f.as_ref().map_or(0, Tensor::numel);
        factored + self.lin_w.as_ref().map_or(0, Tensor::numel) + self.b_r.numel()
    }

    fn label_matrix(&self, input: &CountingInput) -> Result<Option<Tensor>> {
        match self.cfg.variant {
            Variant::NoL => Ok(None),
            Variant::OnehotSeparate | Variant::OnehotShared => {
                let vocab = self.vocab.as_ref().expect("onehot model has a vocab");
                let proj = match self.onehot.as_ref().expect("onehot model has projections") {
                    OnehotProj::Separate { obj, .. } => obj,
                    OnehotProj::Shared { proj } => proj,
                };
                if input.labels.len() != input.scene.m {
                    return Err(LatError::Contract(format!(
                        "{} labels for {} objects",
                        input.labels.len(),
                        input.scene.m
                    )));
                }
                let rows: Vec<Tensor> = input
                    .labels
                    .iter()
                    .map(|l| proj.row(vocab.get_or_unk(l)?))
                    .collect::<Result<_>>()?;
                Ok(Some(stack_rows(&rows)?))
            }
            _ => Ok(Some(input.scene.l_tensor()?)),
        }
    }

    fn question_matrix(&self, input: &CountingInput) -> Result<Tensor> {
        match self.cfg.variant {
            Variant::OnehotSeparate | Variant::OnehotShared => {
                let vocab = self.vocab.as_ref().expect("onehot model has a vocab");
                let proj = match self.onehot.as_ref().expect("onehot model has projections") {
                    OnehotProj::Separate { txt, .. } => txt,
                    OnehotProj::Shared { proj } => proj,
                };
                let q = input.question;
                let mut rows: Vec<Tensor> = Vec::with_capacity(q.rows);
                for j in 0..q.rows {
                    if q.mask[j] {
                        let token = input.tokens.get(j).ok_or_else(|| {
                            LatError::Contract(format!(
                                "question mask marks token {j} but only {} tokens given",
                                input.tokens.len()
                            ))
                        })?;
                        rows.push(proj.row(vocab.get_or_unk(token)?)?);
                    } else {
                        rows.push(Tensor::zeros(&[self.cfg.d_w]));
                    }
                }
                stack_rows(&rows)
            }
            _ => {
                if input.question.dim != self.cfg.d_w {
                    return Err(LatError::shape(
                        "score_matrix",
                        format!(
                            "question embedding dim {} vs model d_w {}",
                            input.question.dim, self.cfg.d_w
                        ),
                    ));
                }
                input.question.q_tensor()
            }
        }
    }

    /// The packed projection input for one scene, per the variant; `None`
    /// when the visual path is ablated.
    fn projection_input(&self, scene: &SceneFeatures) -> Result<Option<Tensor>> {
        match self.cfg.variant {
            Variant::NoVB => Ok(None),
            Variant::NoB => Ok(Some(scene.v_tensor()?)),
            _ => Ok(Some(scene.concat_visual_box()?)),
        }
    }

    /// Eq.-style pairwise scores: `S[i, j] = w_a . tanh(Wv(o_i) * l_i * q_j) + b_a`
    /// for unmasked words; masked columns hold [`MASKED_SCORE`].
    pub fn score_matrix(&self, input: &CountingInput, mode: Mode) -> Result<Tensor> {
        let p = match self.projection_input(input.scene)? {
            Some(o) => Some(self.proj.as_ref().expect("projection present").apply(&o, mode)?),
            None => None,
        };
        self.score_matrix_with_projection(input, p)
    }

    fn score_matrix_with_projection(
        &self,
        input: &CountingInput,
        p: Option<Tensor>,
    ) -> Result<Tensor> {
        let scene = input.scene;
        if scene.d_w != self.cfg.d_w && !matches!(self.cfg.variant, Variant::OnehotSeparate | Variant::OnehotShared) {
            return Err(LatError::shape(
                "score_matrix",
                format!("scene d_w {} vs model d_w {}", scene.d_w, self.cfg.d_w),
            ));
        }
        let m = scene.m;
        let l = self.label_matrix(input)?;
        let base = match (p, l) {
            (Some(p), Some(l)) => p.mul(&l)?,
            (Some(p), None) => p,
            (None, Some(l)) => l,
            (None, None) => {
                return Err(LatError::Contract(
                    "score matrix has no inputs: NoVB and NoL cannot combine".into(),
                ))
            }
        };
        let q_mat = self.question_matrix(input)?;
        let mask = &input.question.mask;
        let n = mask.len();
        let w_a_col = self.w_a.reshape(&[self.cfg.d_w, 1])?;
        let sentinel = Tensor::from_vec(&[m, 1], vec![MASKED_SCORE; m])?;
        let mut cols: Vec<Tensor> = Vec::with_capacity(n);
        for j in 0..n {
            if mask[j] {
                let qj = q_mat.row(j)?.expand_rows(m)?;
                let scores = base.mul(&qj)?.tanh()?.matmul(&w_a_col)?;
                cols.push(scores.reshape(&[m, 1])?.add_scalar(&self.b_a)?);
            } else {
                cols.push(sentinel.clone());
            }
        }
        let refs: Vec<&Tensor> = cols.iter().collect();
        Tensor::concat(&refs, 1)
    }

    /// Object weights from masked row sums, word weights from masked
    /// column sums. `NoCoattention` pins the word weights uniform over the
    /// unmasked positions.
    pub fn coattention_weights(&self, s: &Tensor, mask: &[bool]) -> Result<(Tensor, Tensor)> {
        let shape = s.shape();
        if shape.len() != 2 || shape[1] != mask.len() {
            return Err(LatError::shape(
                "coattention_weights",
                format!("scores {:?} vs mask length {}", shape, mask.len()),
            ));
        }
        let (m, n) = (shape[0], shape[1]);
        let keep: Vec<f64> = mask.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        let mut keep_mat = Vec::with_capacity(m * n);
        for _ in 0..m {
            keep_mat.extend_from_slice(&keep);
        }
        let keep_mat = Tensor::from_vec(&[m, n], keep_mat)?;
        let zeroed = s.mul(&keep_mat)?;
        let mu = zeroed.sum_axis(1)?.softmax_masked(None)?;
        let nu = if self.cfg.variant == Variant::NoCoattention {
            let live = mask.iter().filter(|b| **b).count();
            if live == 0 {
                return Err(LatError::Degenerate("question is fully masked".into()));
            }
            let uniform: Vec<f64> =
                mask.iter().map(|b| if *b { 1.0 / live as f64 } else { 0.0 }).collect();
            Tensor::from_vec(&[n], uniform)?
        } else {
            zeroed.sum_axis(0)?.softmax_masked(Some(mask))?
        };
        Ok((mu, nu))
    }

    /// `f = sum_i mu_i (Ws^T v_i)`.
    pub fn encode_image(&self, scene: &SceneFeatures, mu: &Tensor) -> Result<Tensor> {
        let vp = scene.v_tensor()?.matmul(&self.w_s)?;
        mu.reshape(&[1, scene.m])?.matmul(&vp)?.reshape(&[self.cfg.d])
    }

    /// Bi-LSTM over the nu-weighted word embeddings of the unmasked
    /// positions, in order; the encoding concatenates the two final states.
    pub fn encode_question(&self, input: &CountingInput, nu: &Tensor) -> Result<Tensor> {
        let q_mat = self.question_matrix(input)?;
        let mask = &input.question.mask;
        let mut inputs = Vec::new();
        for j in 0..mask.len() {
            if mask[j] {
                inputs.push(q_mat.row(j)?.mul_scalar(&nu.element(j)?)?);
            }
        }
        if inputs.is_empty() {
            return Err(LatError::Degenerate("question is fully masked".into()));
        }
        bilstm_encode(&self.lstm_f, &self.lstm_b, &inputs)
    }

    /// Raw count score: the factored bilinear form, or the elementwise
    /// affine head under the `LinearRegression` ablation. No rounding.
    pub fn predict_count(&self, f: &Tensor, q: &Tensor) -> Result<Tensor> {
        if f.shape() != [self.cfg.d] || q.shape() != [self.cfg.d] {
            return Err(LatError::shape(
                "predict_count",
                format!("f {:?}, q {:?}, expected [{}]", f.shape(), q.shape(), self.cfg.d),
            ));
        }
        match (&self.w_q, &self.t_c, &self.w_f, &self.lin_w) {
            (Some(w_q), Some(t_c), Some(w_f), None) => {
                let u = f.reshape(&[1, self.cfg.d])?.matmul(w_q)?;
                let w = q.reshape(&[1, self.cfg.d])?.matmul(w_f)?;
                u.matmul(t_c)?.mul(&w)?.sum()?.add(&self.b_r)
            }
            (None, None, None, Some(lin_w)) => {
                f.mul(q)?.mul(lin_w)?.sum()?.add(&self.b_r)
            }
            _ => Err(LatError::Contract("inconsistent regressor parameters".into())),
        }
    }

    /// Dense `d x d` regression weight rebuilt from the Tucker factors.
    /// Testing oracle only; the forward path never materializes it.
    pub fn reconstruct_wr(&self) -> Result<Vec<f64>> {
        let (w_q, t_c, w_f) = match (&self.w_q, &self.t_c, &self.w_f) {
            (Some(a), Some(b), Some(c)) => (a.values(), b.values(), c.values()),
            _ => {
                return Err(LatError::Contract(
                    "reconstruct_wr: the LinearRegression variant has no factors".into(),
                ))
            }
        };
        let (d, k) = (self.cfg.d, self.cfg.k);
        // W_r = W_q . T_c . W_f^T
        let mut qt = vec![0.0; d * k];
        for i in 0..d {
            for b in 0..k {
                let mut acc = 0.0;
                for a in 0..k {
                    acc += w_q[i * k + a] * t_c[a * k + b];
                }
                qt[i * k + b] = acc;
            }
        }
        let mut wr = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for b in 0..k {
                    acc += qt[i * k + b] * w_f[j * k + b];
                }
                wr[i * d + j] = acc;
            }
        }
        Ok(wr)
    }

    /// Full pipeline: scores, co-attention, both encoders, raw count.
    pub fn forward(&self, input: &CountingInput, mode: Mode) -> Result<CountingOutput> {
        let mut out = self.forward_batch(std::slice::from_ref(input), mode)?;
        Ok(out.pop().expect("one input, one output"))
    }

    /// Forward a batch of scenes with the visual projections normalized
    /// jointly: batch statistics pool the objects of every scene in the
    /// batch, matching batched training. A batch of one reduces to the
    /// per-scene forward.
    pub fn forward_batch(&self, inputs: &[CountingInput], mode: Mode) -> Result<Vec<CountingOutput>> {
        if inputs.is_empty() {
            return Err(LatError::Degenerate("forward over an empty batch".into()));
        }
        let projections: Vec<Option<Tensor>> = match &self.proj {
            None => vec![None; inputs.len()],
            Some(proj) => {
                let os: Vec<Tensor> = inputs
                    .iter()
                    .map(|i| {
                        self.projection_input(i.scene)
                            .map(|o| o.expect("projection input present"))
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = os.iter().collect();
                let packed = proj.apply(&Tensor::concat(&refs, 0)?, mode)?;
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|i| {
                        let rows = packed.slice_rows(offset, i.scene.m)?;
                        offset += i.scene.m;
                        Ok(Some(rows))
                    })
                    .collect::<Result<_>>()?
            }
        };
        inputs
            .iter()
            .zip(projections)
            .map(|(input, p)| self.forward_with_projection(input, p))
            .collect()
    }

    fn forward_with_projection(
        &self,
        input: &CountingInput,
        p: Option<Tensor>,
    ) -> Result<CountingOutput> {
        let s = self.score_matrix_with_projection(input, p)?;
        let (mu, nu) = self.coattention_weights(&s, &input.question.mask)?;
        let f = self.encode_image(input.scene, &mu)?;
        let q = self.encode_question(input, &nu)?;
        let score = self.predict_count(&f, &q)?;
        let shape = s.shape();
        let weights = CoAttentionWeights {
            mu: mu.values(),
            nu: nu.values(),
            s: s.values(),
            m: shape[0],
            n: shape[1],
        };
        Ok(CountingOutput { score, weights })
    }

    /// Smooth L1 between the raw score and the integer target; rounding
    /// never enters the loss path.
    pub fn training_loss(&self, score: &Tensor, target: i64) -> Result<Tensor> {
        if target < 0 {
            return Err(LatError::Contract(format!("count target {target} is negative")));
        }
        score.smooth_l1(&Tensor::scalar(target as f64)?)
    }
}

/// Brute-force generalized inner product `<a, b> = sum_ij a[ij] b[ij]`.
pub fn generalized_inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Finite-difference check of the whole model at the given dims; returns
/// the max relative error over every parameter entry.
pub fn counting_gradient_check(seed: u64) -> Result<f64> {
    let mut rng = crate::rng(seed);
    let cfg = CountingConfig::new(6, 4, 8, 3);
    let model = CountingModel::new(cfg, &mut rng)?;
    let (scene, question, labels, tokens) = toy_input(3, 6, 4, 4, &mut rng)?;
    let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    crate::tensor::gradcheck::finite_diff_check(
        &params,
        || {
            let out = model.forward(&input, Mode::Train)?;
            model.training_loss(&out.score, 2)
        },
        crate::tensor::gradcheck::DEFAULT_EPS,
    )
}

/// Small random scene/question pair for tests and gradient checks.
pub fn toy_input(
    m: usize,
    d_v: usize,
    d_w: usize,
    n: usize,
    rng: &mut crate::Rng,
) -> Result<(SceneFeatures, QuestionFeatures, Vec<String>, Vec<String>)> {
    let v: Vec<f64> = (0..m * d_v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let l: Vec<f64> = (0..m * d_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut b = Vec::with_capacity(m * 5);
    for _ in 0..m {
        let h: f64 = rng.gen_range(0.1..0.9);
        let w: f64 = rng.gen_range(0.1..0.9);
        b.extend_from_slice(&[rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), h, w, h * w]);
    }
    let scene = SceneFeatures { v, l, b, m, d_v, d_w };
    let real = n - 1; // leave one padded position so masking is exercised
    let mut q = vec![0.0; n * d_w];
    let mut mask = vec![false; n];
    for j in 0..real {
        mask[j] = true;
        for x in q[j * d_w..(j + 1) * d_w].iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let question = QuestionFeatures { q, rows: n, dim: d_w, mask };
    let labels: Vec<String> = (0..m).map(|i| format!("class{i}")).collect();
    let tokens: Vec<String> = (0..real).map(|j| format!("word{j}")).collect();
    Ok((scene, question, labels, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_model(seed: u64) -> (CountingModel, SceneFeatures, QuestionFeatures, Vec<String>, Vec<String>) {
        let mut rng = crate::rng(seed);
        let cfg = CountingConfig::new(6, 4, 8, 3);
        let model = CountingModel::new(cfg, &mut rng).unwrap();
        let (scene, question, labels, tokens) = toy_input(3, 6, 4, 4, &mut rng).unwrap();
        (model, scene, question, labels, tokens)
    }

    #[test]
    fn zeroed_wa_makes_every_unmasked_score_the_bias() {
        let (model, scene, question, labels, tokens) = full_model(1);
        model.w_a.set_values(&vec![0.0; 4]).unwrap();
        model.b_a.set_values(&[0.7]).unwrap();
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let s = model.score_matrix(&input, Mode::Eval).unwrap();
        let vals = s.values();
        for i in 0..3 {
            for j in 0..4 {
                let v = vals[i * 4 + j];
                if question.mask[j] {
                    assert!((v - 0.7).abs() < 1e-12, "S[{i},{j}] = {v}");
                } else {
                    assert_eq!(v, MASKED_SCORE);
                }
            }
        }
    }

    #[test]
    fn zero_label_row_scores_the_bias_everywhere() {
        let (model, mut scene, question, labels, tokens) = full_model(2);
        model.b_a.set_values(&[0.3]).unwrap();
        // out-of-vocabulary label embeds to zero: row 1 of L
        for x in scene.l[4..8].iter_mut() {
            *x = 0.0;
        }
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let s = model.score_matrix(&input, Mode::Eval).unwrap();
        let vals = s.values();
        for j in 0..4 {
            if question.mask[j] {
                assert!((vals[4 + j] - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_matrix_matches_scalar_evaluation() {
        // m=2, n=2, d_w=3, NoVB variant so the score is w_a . tanh(l_i * q_j) + b_a
        let mut rng = crate::rng(3);
        let cfg = CountingConfig::new(4, 3, 8, 2).with_variant(Variant::NoVB);
        let model = CountingModel::new(cfg, &mut rng).unwrap();
        model.w_a.set_values(&[0.5, -1.0, 2.0]).unwrap();
        model.b_a.set_values(&[0.25]).unwrap();
        let scene = SceneFeatures {
            v: vec![0.0; 2 * 4],
            l: vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6],
            b: vec![0.5, 0.5, 0.2, 0.2, 0.04, 0.5, 0.5, 0.1, 0.1, 0.01],
            m: 2,
            d_v: 4,
            d_w: 3,
        };
        let question = QuestionFeatures {
            q: vec![1.0, -1.0, 0.5, 0.2, 0.3, -0.7],
            rows: 2,
            dim: 3,
            mask: vec![true, true],
        };
        let input = CountingInput { scene: &scene, question: &question, labels: &[], tokens: &[] };
        let s = model.score_matrix(&input, Mode::Eval).unwrap().values();
        let l: [[f64; 3]; 2] = [[0.1, 0.2, 0.3], [-0.4, 0.5, -0.6]];
        let q: [[f64; 3]; 2] = [[1.0, -1.0, 0.5], [0.2, 0.3, -0.7]];
        let w_a = [0.5, -1.0, 2.0];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.25;
                for c in 0..3 {
                    acc += w_a[c] * (l[i][c] * q[j][c]).tanh();
                }
                assert!((s[i * 2 + j] - acc).abs() < 1e-12, "S[{i},{j}]");
            }
        }
    }

    #[test]
    fn constant_scores_give_uniform_attention() {
        let (model, scene, question, labels, tokens) = full_model(4);
        model.w_a.set_values(&vec![0.0; 4]).unwrap();
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let s = model.score_matrix(&input, Mode::Eval).unwrap();
        let (mu, nu) = model.coattention_weights(&s, &question.mask).unwrap();
        for v in mu.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let nu = nu.values();
        for j in 0..4 {
            if question.mask[j] {
                assert!((nu[j] - 1.0 / 3.0).abs() < 1e-12);
            } else {
                assert_eq!(nu[j], 0.0);
            }
        }
    }

    #[test]
    fn coattention_closed_form_case() {
        // S = [[10, 10], [0, 0]]: nu = [0.5, 0.5], mu = softmax([20, 0])
        let mut rng = crate::rng(5);
        let model = CountingModel::new(CountingConfig::new(4, 3, 8, 2), &mut rng).unwrap();
        let s = Tensor::from_vec(&[2, 2], vec![10.0, 10.0, 0.0, 0.0]).unwrap();
        let (mu, nu) = model.coattention_weights(&s, &[true, true]).unwrap();
        let nu = nu.values();
        assert!((nu[0] - 0.5).abs() < 1e-12);
        assert!((nu[1] - 0.5).abs() < 1e-12);
        let mu = mu.values();
        let expect = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((mu[0] - expect).abs() < 1e-12);
        assert!((mu[0] - (1.0 - 2.06e-9)).abs() < 1e-10);
        assert!((mu[1] - 2.061e-9).abs() < 1e-11);
    }

    #[test]
    fn encode_image_selects_and_ignores() {
        let (model, scene, _question, _labels, _tokens) = full_model(6);
        // one-hot mu selects a single projected row
        let mu = Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        let f = model.encode_image(&scene, &mu).unwrap();
        let vp = scene.v_tensor().unwrap().matmul(&model.w_s).unwrap();
        let expect = vp.values()[8..16].to_vec();
        for (a, b) in f.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // identical objects make f independent of mu
        let mut same = scene;
        let first: Vec<f64> = same.v[0..6].to_vec();
        for i in 1..3 {
            same.v.copy_within(0..6, i * 6);
        }
        assert_eq!(&same.v[12..18], first.as_slice());
        let mu_a = Tensor::from_vec(&[3], vec![0.2, 0.5, 0.3]).unwrap();
        let mu_b = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let fa = model.encode_image(&same, &mu_a).unwrap().values();
        let fb = model.encode_image(&same, &mu_b).unwrap().values();
        for (a, b) in fa.iter().zip(&fb) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_question_zero_weights_is_the_zero_input_response() {
        let (model, scene, question, labels, tokens) = full_model(7);
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let nu = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let q = model.encode_question(&input, &nu).unwrap();
        // the same cell run on literal zero inputs must agree exactly
        let zeros: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[4])).collect();
        let expect = crate::tensor::cells::bilstm_encode(&model.lstm_f, &model.lstm_b, &zeros)
            .unwrap()
            .values();
        assert_eq!(q.values(), expect);
    }

    #[test]
    fn predict_count_identity_factors_reduce_to_dot_product() {
        let mut rng = crate::rng(8);
        let d = 4;
        let model = CountingModel::new(CountingConfig::new(4, 3, d, d), &mut rng).unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        model.w_q.as_ref().unwrap().set_values(&eye).unwrap();
        model.w_f.as_ref().unwrap().set_values(&eye).unwrap();
        model.t_c.as_ref().unwrap().set_values(&eye).unwrap();
        model.b_r.set_values(&[0.0]).unwrap();
        let f = Tensor::from_vec(&[d], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let q = Tensor::from_vec(&[d], vec![0.5, -1.0, 2.0, 4.0]).unwrap();
        let score = model.predict_count(&f, &q).unwrap().value().unwrap();
        let dot: f64 = f.values().iter().zip(q.values()).map(|(a, b)| a * b).sum();
        assert!((score - dot).abs() < 1e-12);
        // f = 0 collapses to the bias
        model.b_r.set_values(&[1.25]).unwrap();
        let zero = Tensor::zeros(&[d]);
        assert_eq!(model.predict_count(&zero, &q).unwrap().value().unwrap(), 1.25);
    }

    #[test]
    fn factored_score_matches_brute_force_reconstruction() {
        let mut rng = crate::rng(9);
        let model = CountingModel::new(CountingConfig::new(4, 3, 8, 3), &mut rng).unwrap();
        use rand::Rng as _;
        let f: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ft = Tensor::from_vec(&[8], f.clone()).unwrap();
        let qt = Tensor::from_vec(&[8], q.clone()).unwrap();
        let fast = model.predict_count(&ft, &qt).unwrap().value().unwrap();
        let wr = model.reconstruct_wr().unwrap();
        let outer: Vec<f64> = f.iter().flat_map(|a| q.iter().map(move |b| a * b)).collect();
        let slow = generalized_inner(&outer, &wr) + model.b_r.value().unwrap();
        assert!((fast - slow).abs() < 1e-10, "fast {fast} vs slow {slow}");
    }

    #[test]
    fn reconstruct_wr_identity_and_rank_law() {
        let mut rng = crate::rng(10);
        let d = 4;
        let model = CountingModel::new(CountingConfig::new(4, 3, d, d), &mut rng).unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        model.w_q.as_ref().unwrap().set_values(&eye).unwrap();
        model.w_f.as_ref().unwrap().set_values(&eye).unwrap();
        model.t_c.as_ref().unwrap().set_values(&eye).unwrap();
        assert_eq!(model.reconstruct_wr().unwrap(), eye);

        // k = 1 forces rank 1: every 2x2 minor vanishes
        let model = CountingModel::new(CountingConfig::new(4, 3, d, 1), &mut rng).unwrap();
        let wr = model.reconstruct_wr().unwrap();
        for i in 0..d {
            for j in (i + 1)..d {
                for a in 0..d {
                    for b in (a + 1)..d {
                        let minor = wr[i * d + a] * wr[j * d + b] - wr[i * d + b] * wr[j * d + a];
                        assert!(minor.abs() < 1e-9, "minor ({i},{j},{a},{b}) = {minor}");
                    }
                }
            }
        }
    }

    #[test]
    fn round_count_policy() {
        assert_eq!(round_count(2.4), 2);
        assert_eq!(round_count(2.5), 3);
        assert_eq!(round_count(-0.3), 0);
        assert_eq!(round_count(-2.5), 0);
        assert_eq!(round_count(0.0), 0);
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let (model, scene, question, labels, tokens) = full_model(11);
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let a = model.forward(&input, Mode::Eval).unwrap();
        let b = model.forward(&input, Mode::Eval).unwrap();
        assert_eq!(a.score.value().unwrap(), b.score.value().unwrap());
        assert_eq!(a.weights.mu, b.weights.mu);
    }

    #[test]
    fn object_permutation_permutes_mu_and_keeps_score() {
        let (model, scene, question, labels, tokens) = full_model(12);
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let base = model.forward(&input, Mode::Eval).unwrap();

        // rotate objects by one
        let perm = [2usize, 0, 1];
        let pick = |mat: &[f64], cols: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(mat.len());
            for &src in &perm {
                out.extend_from_slice(&mat[src * cols..(src + 1) * cols]);
            }
            out
        };
        let permuted = SceneFeatures {
            v: pick(&scene.v, scene.d_v),
            l: pick(&scene.l, scene.d_w),
            b: pick(&scene.b, 5),
            m: scene.m,
            d_v: scene.d_v,
            d_w: scene.d_w,
        };
        let labels2: Vec<String> = perm.iter().map(|&i| labels[i].clone()).collect();
        let input2 = CountingInput {
            scene: &permuted,
            question: &question,
            labels: &labels2,
            tokens: &tokens,
        };
        let out2 = model.forward(&input2, Mode::Eval).unwrap();
        let s1 = base.score.value().unwrap();
        let s2 = out2.score.value().unwrap();
        assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
        for (dst, &src) in perm.iter().enumerate() {
            assert!((out2.weights.mu[dst] - base.weights.mu[src]).abs() < 1e-9);
        }
    }

    #[test]
    fn word_order_changes_the_score() {
        let (model, scene, mut question, labels, tokens) = full_model(13);
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let a = model.forward(&input, Mode::Eval).unwrap().score.value().unwrap();
        // swap the first two real words
        let d = question.dim;
        let row0: Vec<f64> = question.q[0..d].to_vec();
        let row1: Vec<f64> = question.q[d..2 * d].to_vec();
        question.q[0..d].copy_from_slice(&row1);
        question.q[d..2 * d].copy_from_slice(&row0);
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        let b = model.forward(&input, Mode::Eval).unwrap().score.value().unwrap();
        assert!((a - b).abs() > 1e-9, "Bi-LSTM should be order sensitive: {a} vs {b}");
    }

    #[test]
    fn training_loss_formula_values() {
        let (model, ..) = full_model(14);
        let s = Tensor::scalar(3.0).unwrap();
        assert_eq!(model.training_loss(&s, 3).unwrap().value().unwrap(), 0.0);
        let s = Tensor::scalar(3.5).unwrap();
        assert!((model.training_loss(&s, 3).unwrap().value().unwrap() - 0.125).abs() < 1e-15);
        let s = Tensor::scalar(6.0).unwrap();
        assert!((model.training_loss(&s, 3).unwrap().value().unwrap() - 2.5).abs() < 1e-15);
        assert!(model.training_loss(&s, -1).is_err());
    }

    #[test]
    fn mu_nu_invariants_hold_after_forward() {
        for seed in 20..30 {
            let (model, scene, question, labels, tokens) = full_model(seed);
            let input =
                CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
            let out = model.forward(&input, Mode::Train).unwrap();
            let mu_sum: f64 = out.weights.mu.iter().sum();
            assert!((mu_sum - 1.0).abs() < 1e-9);
            assert!(out.weights.mu.iter().all(|v| *v >= 0.0));
            let nu_sum: f64 = out.weights.nu.iter().sum();
            assert!((nu_sum - 1.0).abs() < 1e-9);
            for (j, v) in out.weights.nu.iter().enumerate() {
                if question.mask[j] {
                    assert!(*v >= 0.0);
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn parameter_economy_matches_the_closed_form() {
        let mut rng = crate::rng(15);
        let model = CountingModel::new(CountingConfig::new(4, 3, 64, 8), &mut rng).unwrap();
        assert_eq!(model.regression_param_count(), 8 * 8 + 2 * 64 * 8 + 1);
    }

    #[test]
    fn full_model_gradient_check_at_toy_dims() {
        let err = counting_gradient_check(40).unwrap();
        assert!(err < 1e-4, "counting model FD error {err}");
    }
}
