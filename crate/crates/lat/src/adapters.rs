//! Gated-tanh visual attention with a linguistic branch, injected into
//! three simplified VQA decoders.
//!
//! Each adapted model keeps its baseline structure and adds the
//! linguistic pathway as an optional branch:
//!
//! - UpDn: object attention over `[v_i, q]` plus a per-word linguistic
//!   score; the decoder fuses the attended image and the GRU question by
//!   elementwise product and a sigmoid head.
//! - MUREL (stand-in): per-object bilinear fusion with the question; the
//!   baseline max-pools the fused features, the adapted model pools them
//!   with the attention weights instead. The pairwise relational core of
//!   the original is out of scope; only the pooling contract changes.
//! - BAN (stand-in): one low-rank bilinear co-attention glimpse between
//!   GRU word states and V, plus an additive second glimpse between the
//!   raw word embeddings and L.
//!
//! Stripping a branch (`without_lat`) or zeroing its parameters recovers
//! the baseline forward, which the tests assert bitwise.

use crate::embedding::QuestionFeatures;
use crate::error::{LatError, Result};
use crate::features::SceneFeatures;
use crate::tensor::cells::{CellKind, RecurrentCell};
use crate::tensor::gradcheck::{finite_diff_check, DEFAULT_EPS};
use crate::tensor::ops::{linear_rows, stack_rows};
use crate::tensor::Tensor;

/// `y = tanh(W x + b) . sigmoid(W' x + b')`, applied row-wise.
pub struct GatedTanh {
    pub w: Tensor,
    pub w_gate: Tensor,
    pub b: Tensor,
    pub b_gate: Tensor,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GatedTanh {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut crate::Rng) -> GatedTanh {
        GatedTanh {
            w: Tensor::glorot(in_dim, out_dim, rng),
            w_gate: Tensor::glorot(in_dim, out_dim, rng),
            b: Tensor::zeros_param(&[out_dim]),
            b_gate: Tensor::zeros_param(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let rows = x.reshape(&[1, self.in_dim])?;
        self.apply_rows(&rows)?.reshape(&[self.out_dim])
    }

    /// Row-wise application to `[m, in_dim]`.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        let a = linear_rows(x, &self.w, Some(&self.b))?.tanh()?;
        let g = linear_rows(x, &self.w_gate, Some(&self.b_gate))?.sigmoid()?;
        a.mul(&g)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w"), self.w.clone()),
            (format!("{prefix}.w_gate"), self.w_gate.clone()),
            (format!("{prefix}.b"), self.b.clone()),
            (format!("{prefix}.b_gate"), self.b_gate.clone()),
        ]
    }

    pub fn zero(&self) -> Result<()> {
        for (_, t) in self.params("") {
            t.set_values(&vec![0.0; t.numel()])?;
        }
        Ok(())
    }
}

/// Baseline object attention: score each object from `[v_i, q]`.
pub struct VisualAttention {
    pub f_v: GatedTanh,
    pub w_v: Tensor,
}

impl VisualAttention {
    pub fn new(d_v: usize, d: usize, d_w: usize, rng: &mut crate::Rng) -> VisualAttention {
        VisualAttention {
            f_v: GatedTanh::new(d_v + d, d_w, rng),
            w_v: Tensor::glorot_vec(d_w, rng),
        }
    }

    fn scores(&self, v_mat: &Tensor, q_ctx: &Tensor) -> Result<Tensor> {
        let m = v_mat.shape()[0];
        let x = Tensor::concat(&[v_mat, &q_ctx.expand_rows(m)?], 1)?;
        let h = self.f_v.apply_rows(&x)?;
        h.matmul(&self.w_v.reshape(&[self.f_v.out_dim, 1])?)?.reshape(&[m])
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.f_v.params(&format!("{prefix}.f_v"));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
        out
    }
}

/// The linguistic addition: per-word gated-tanh scores over `l_i * q_j`.
pub struct LatBranch {
    pub f_l: GatedTanh,
    pub w_l: Tensor,
    pub b_l: Tensor,
}

impl LatBranch {
    pub fn new(d_w: usize, rng: &mut crate::Rng) -> LatBranch {
        LatBranch {
            f_l: GatedTanh::new(d_w, d_w, rng),
            w_l: Tensor::glorot_vec(d_w, rng),
            b_l: Tensor::zeros_param(&[d_w]),
        }
    }

    /// `sum_j w_l . (f_l(l_i * q_j) + b_l)` over unmasked words, per object.
    fn scores(&self, l_mat: &Tensor, question: &QuestionFeatures) -> Result<Tensor> {
        let m = l_mat.shape()[0];
        let d_w = l_mat.shape()[1];
        let q_mat = question.q_tensor()?;
        let w_l_col = self.w_l.reshape(&[d_w, 1])?;
        let mut total: Option<Tensor> = None;
        for j in 0..question.rows {
            if !question.mask[j] {
                continue;
            }
            let qj = q_mat.row(j)?.expand_rows(m)?;
            let h = self.f_l.apply_rows(&l_mat.mul(&qj)?)?;
            let h = h.add(&self.b_l.expand_rows(m)?)?;
            let s = h.matmul(&w_l_col)?.reshape(&[m])?;
            total = Some(match total {
                Some(t) => t.add(&s)?,
                None => s,
            });
        }
        total.ok_or_else(|| LatError::Degenerate("question is fully masked".into()))
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.f_l.params(&format!("{prefix}.f_l"));
        out.push((format!("{prefix}.w_l"), self.w_l.clone()));
        out.push((format!("{prefix}.b_l"), self.b_l.clone()));
        out
    }

    pub fn zero(&self) -> Result<()> {
        self.f_l.zero()?;
        self.w_l.set_values(&vec![0.0; self.w_l.numel()])?;
        self.b_l.set_values(&vec![0.0; self.b_l.numel()])?;
        Ok(())
    }
}

/// Attention weights over objects from the visual scores plus, when
/// present, the linguistic branch.
pub fn lat_visual_attention(
    va: &VisualAttention,
    lat: Option<&LatBranch>,
    scene: &SceneFeatures,
    question: &QuestionFeatures,
    q_ctx: &Tensor,
) -> Result<Tensor> {
    let v_mat = scene.v_tensor()?;
    let mut s = va.scores(&v_mat, q_ctx)?;
    if let Some(branch) = lat {
        let l_mat = scene.l_tensor()?;
        s = s.add(&branch.scores(&l_mat, question)?)?;
    }
    s.softmax_masked(None)
}

/// Weighted average pooling of per-object fused features (the adapted
/// replacement for the baseline's global max pooling).
pub fn murel_lat_pool(fused: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let shape = fused.shape();
    if shape.len() != 2 || gamma.shape() != [shape[0]] {
        return Err(LatError::shape(
            "murel_lat_pool",
            format!("features {:?} vs weights {:?}", shape, gamma.shape()),
        ));
    }
    gamma.reshape(&[1, shape[0]])?.matmul(fused)?.reshape(&[shape[1]])
}

/// One low-rank bilinear co-attention glimpse.
pub struct BilinearCoAttention {
    pub u: Tensor,
    pub w: Tensor,
    pub p: Tensor,
    pub joint_dim: usize,
}

pub struct BilinearOutput {
    pub joint: Tensor,
    /// Attention over all pairs, `[rows_x, rows_y]`, sums to 1.
    pub map: Tensor,
}

impl BilinearCoAttention {
    pub fn new(d_x: usize, d_y: usize, joint_dim: usize, rng: &mut crate::Rng) -> BilinearCoAttention {
        BilinearCoAttention {
            u: Tensor::glorot(d_x, joint_dim, rng),
            w: Tensor::glorot(d_y, joint_dim, rng),
            p: Tensor::glorot_vec(joint_dim, rng),
            joint_dim,
        }
    }

    pub fn apply(&self, x: &Tensor, y: &Tensor) -> Result<BilinearOutput> {
        let (a, b) = (x.shape()[0], y.shape()[0]);
        if a == 0 || b == 0 {
            return Err(LatError::Degenerate("bilinear co-attention over empty inputs".into()));
        }
        let xp = x.matmul(&self.u)?;
        let yp = y.matmul(&self.w)?;
        let scaled = xp.mul(&self.p.expand_rows(a)?)?;
        let scores = scaled.matmul(&yp.transpose()?)?;
        let map = scores.reshape(&[a * b])?.softmax_masked(None)?.reshape(&[a, b])?;
        let pooled = map.matmul(&yp)?; // [a, C]
        let joint = xp.mul(&pooled)?.sum_axis(0)?;
        Ok(BilinearOutput { joint, map })
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.u"), self.u.clone()),
            (format!("{prefix}.w"), self.w.clone()),
            (format!("{prefix}.p"), self.p.clone()),
        ]
    }

    pub fn zero(&self) -> Result<()> {
        for (_, t) in self.params("") {
            t.set_values(&vec![0.0; t.numel()])?;
        }
        Ok(())
    }
}

/// GRU question encoding: final hidden state and the per-word states over
/// the unmasked positions.
fn gru_question(gru: &RecurrentCell, question: &QuestionFeatures) -> Result<(Tensor, Vec<Tensor>)> {
    let q_mat = question.q_tensor()?;
    let mut state = gru.zero_state();
    let mut states = Vec::new();
    for j in 0..question.rows {
        if !question.mask[j] {
            continue;
        }
        state = gru.step(&q_mat.row(j)?, &state)?;
        states.push(state.h.clone());
    }
    if states.is_empty() {
        return Err(LatError::Degenerate("question is fully masked".into()));
    }
    Ok((state.h, states))
}

pub struct AdapterOutput {
    /// Pre-sigmoid answer logits (training target).
    pub logits: Tensor,
    /// Per-class sigmoid scores in (0, 1).
    pub scores: Vec<f64>,
    /// Object attention weights, when the model computes them.
    pub gamma: Option<Vec<f64>>,
    /// Bilinear attention maps (BAN), row-major with dims.
    pub maps: Vec<(Vec<f64>, usize, usize)>,
}

// ---------------------------------------------------------------------------
// UpDn
// ---------------------------------------------------------------------------

pub struct UpdnModel {
    pub d_o: usize,
    d: usize,
    gru: RecurrentCell,
    va: VisualAttention,
    pub lat: Option<LatBranch>,
    w_s: Tensor,
    w_o: Tensor,
}

impl UpdnModel {
    pub fn new(
        d_v: usize,
        d_w: usize,
        d: usize,
        d_o: usize,
        with_lat: bool,
        rng: &mut crate::Rng,
    ) -> Result<UpdnModel> {
        if d_o < 2 {
            return Err(LatError::Contract("answer vocabulary needs at least 2 classes".into()));
        }
        // shared parameters draw first so the LAT branch extends the
        // baseline's parameter stream
        let gru = RecurrentCell::new(CellKind::Gru, d_w, d, rng)?;
        let va = VisualAttention::new(d_v, d, d_w, rng);
        let w_s = Tensor::glorot(d_v, d, rng);
        let w_o = Tensor::glorot(d, d_o, rng);
        let lat = with_lat.then(|| LatBranch::new(d_w, rng));
        Ok(UpdnModel { d_o, d, gru, va, lat, w_s, w_o })
    }

    /// The same model with the linguistic branch stripped; shares the
    /// remaining parameter tensors.
    pub fn without_lat(&self) -> UpdnModel {
        UpdnModel {
            d_o: self.d_o,
            d: self.d,
            gru: RecurrentCell {
                kind: self.gru.kind,
                input_size: self.gru.input_size,
                hidden_size: self.gru.hidden_size,
                w_x: self.gru.w_x.clone(),
                w_h: self.gru.w_h.clone(),
                b: self.gru.b.clone(),
            },
            va: VisualAttention { f_v: clone_gated(&self.va.f_v), w_v: self.va.w_v.clone() },
            lat: None,
            w_s: self.w_s.clone(),
            w_o: self.w_o.clone(),
        }
    }

    pub fn forward(&self, scene: &SceneFeatures, question: &QuestionFeatures) -> Result<AdapterOutput> {
        let (q_ctx, _) = gru_question(&self.gru, question)?;
        let gamma = lat_visual_attention(&self.va, self.lat.as_ref(), scene, question, &q_ctx)?;
        let vp = scene.v_tensor()?.matmul(&self.w_s)?;
        let f = gamma.reshape(&[1, scene.m])?.matmul(&vp)?.reshape(&[self.d])?;
        let fused = f.mul(&q_ctx)?;
        let logits = fused.reshape(&[1, self.d])?.matmul(&self.w_o)?.reshape(&[self.d_o])?;
        let scores = logits.sigmoid()?.values();
        Ok(AdapterOutput { logits, scores, gamma: Some(gamma.values()), maps: Vec::new() })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.gru.params() {
            out.push((format!("gru.{name}"), t));
        }
        out.extend(self.va.params("att"));
        out.push(("enc.w_s".into(), self.w_s.clone()));
        out.push(("dec.w_o".into(), self.w_o.clone()));
        if let Some(lat) = &self.lat {
            out.extend(lat.params("lat"));
        }
        out
    }
}

fn clone_gated(g: &GatedTanh) -> GatedTanh {
    GatedTanh {
        w: g.w.clone(),
        w_gate: g.w_gate.clone(),
        b: g.b.clone(),
        b_gate: g.b_gate.clone(),
        in_dim: g.in_dim,
        out_dim: g.out_dim,
    }
}

// ---------------------------------------------------------------------------
// MUREL stand-in
// ---------------------------------------------------------------------------

pub struct MurelModel {
    pub d_o: usize,
    d: usize,
    gru: RecurrentCell,
    w_fuse_v: Tensor,
    w_fuse_q: Tensor,
    w_head_q: Tensor,
    w_o: Tensor,
    /// The adapted pooling path; `None` max-pools like the baseline.
    pub attention: Option<(VisualAttention, LatBranch)>,
}

impl MurelModel {
    pub fn new(
        d_v: usize,
        d_w: usize,
        d: usize,
        d_o: usize,
        with_lat: bool,
        rng: &mut crate::Rng,
    ) -> Result<MurelModel> {
        if d_o < 2 {
            return Err(LatError::Contract("answer vocabulary needs at least 2 classes".into()));
        }
        let gru = RecurrentCell::new(CellKind::Gru, d_w, d, rng)?;
        let w_fuse_v = Tensor::glorot(d_v, d, rng);
        let w_fuse_q = Tensor::glorot(d, d, rng);
        let w_head_q = Tensor::glorot(d, d, rng);
        let w_o = Tensor::glorot(d, d_o, rng);
        let attention = with_lat
            .then(|| (VisualAttention::new(d_v, d, d_w, rng), LatBranch::new(d_w, rng)));
        Ok(MurelModel { d_o, d, gru, w_fuse_v, w_fuse_q, w_head_q, w_o, attention })
    }

    pub fn without_lat(&self) -> MurelModel {
        MurelModel {
            d_o: self.d_o,
            d: self.d,
            gru: RecurrentCell {
                kind: self.gru.kind,
                input_size: self.gru.input_size,
                hidden_size: self.gru.hidden_size,
                w_x: self.gru.w_x.clone(),
                w_h: self.gru.w_h.clone(),
                b: self.gru.b.clone(),
            },
            w_fuse_v: self.w_fuse_v.clone(),
            w_fuse_q: self.w_fuse_q.clone(),
            w_head_q: self.w_head_q.clone(),
            w_o: self.w_o.clone(),
            attention: None,
        }
    }

    pub fn forward(&self, scene: &SceneFeatures, question: &QuestionFeatures) -> Result<AdapterOutput> {
        let (q_ctx, _) = gru_question(&self.gru, question)?;
        // per-object bilinear fusion with the question
        let vp = scene.v_tensor()?.matmul(&self.w_fuse_v)?;
        let qp = linear_rows(&q_ctx.reshape(&[1, self.d])?, &self.w_fuse_q, None)?
            .reshape(&[self.d])?;
        let fused = vp.mul(&qp.expand_rows(scene.m)?)?;
        let (pooled, gamma) = match &self.attention {
            Some((va, lat)) => {
                let gamma = lat_visual_attention(va, Some(lat), scene, question, &q_ctx)?;
                (murel_lat_pool(&fused, &gamma)?, Some(gamma.values()))
            }
            None => (fused.max_axis0()?, None),
        };
        let hq = linear_rows(&q_ctx.reshape(&[1, self.d])?, &self.w_head_q, None)?
            .reshape(&[self.d])?;
        let logits = pooled
            .mul(&hq)?
            .reshape(&[1, self.d])?
            .matmul(&self.w_o)?
            .reshape(&[self.d_o])?;
        let scores = logits.sigmoid()?.values();
        Ok(AdapterOutput { logits, scores, gamma, maps: Vec::new() })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.gru.params() {
            out.push((format!("gru.{name}"), t));
        }
        out.push(("fuse.w_v".into(), self.w_fuse_v.clone()));
        out.push(("fuse.w_q".into(), self.w_fuse_q.clone()));
        out.push(("head.w_q".into(), self.w_head_q.clone()));
        out.push(("head.w_o".into(), self.w_o.clone()));
        if let Some((va, lat)) = &self.attention {
            out.extend(va.params("att"));
            out.extend(lat.params("lat"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// BAN stand-in
// ---------------------------------------------------------------------------

pub struct BanModel {
    pub d_o: usize,
    pub joint_dim: usize,
    gru: RecurrentCell,
    block_v: BilinearCoAttention,
    /// The linguistic glimpse between raw word embeddings and L.
    pub block_l: Option<BilinearCoAttention>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl BanModel {
    pub fn new(
        d_v: usize,
        d_w: usize,
        d: usize,
        joint_dim: usize,
        d_o: usize,
        with_lat: bool,
        rng: &mut crate::Rng,
    ) -> Result<BanModel> {
        if d_o < 2 {
            return Err(LatError::Contract("answer vocabulary needs at least 2 classes".into()));
        }
        let gru = RecurrentCell::new(CellKind::Gru, d_w, d, rng)?;
        let block_v = BilinearCoAttention::new(d, d_v, joint_dim, rng);
        let hidden = joint_dim;
        let w1 = Tensor::glorot(joint_dim, hidden, rng);
        let b1 = Tensor::zeros_param(&[hidden]);
        let w2 = Tensor::glorot(hidden, d_o, rng);
        let b2 = Tensor::zeros_param(&[d_o]);
        let block_l = with_lat.then(|| BilinearCoAttention::new(d_w, d_w, joint_dim, rng));
        Ok(BanModel { d_o, joint_dim, gru, block_v, block_l, w1, b1, w2, b2 })
    }

    pub fn without_lat(&self) -> BanModel {
        BanModel {
            d_o: self.d_o,
            joint_dim: self.joint_dim,
            gru: RecurrentCell {
                kind: self.gru.kind,
                input_size: self.gru.input_size,
                hidden_size: self.gru.hidden_size,
                w_x: self.gru.w_x.clone(),
                w_h: self.gru.w_h.clone(),
                b: self.gru.b.clone(),
            },
            block_v: BilinearCoAttention {
                u: self.block_v.u.clone(),
                w: self.block_v.w.clone(),
                p: self.block_v.p.clone(),
                joint_dim: self.block_v.joint_dim,
            },
            block_l: None,
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
        }
    }

    /// `f_o = BAN(Q_hat, V) + BAN(Q, L)`; the second glimpse is absent in
    /// the baseline configuration.
    pub fn combine(&self, scene: &SceneFeatures, question: &QuestionFeatures) -> Result<(Tensor, Vec<(Vec<f64>, usize, usize)>)> {
        let (_, states) = gru_question(&self.gru, question)?;
        let q_hat = stack_rows(&states)?;
        let v_mat = scene.v_tensor()?;
        let out_v = self.block_v.apply(&q_hat, &v_mat)?;
        let mut maps = Vec::new();
        let shape_v = out_v.map.shape();
        maps.push((out_v.map.values(), shape_v[0], shape_v[1]));
        match &self.block_l {
            Some(block) => {
                // unmasked rows of Q
                let q_mat = question.q_tensor()?;
                let mut rows = Vec::new();
                for j in 0..question.rows {
                    if question.mask[j] {
                        rows.push(q_mat.row(j)?);
                    }
                }
                let q_rows = stack_rows(&rows)?;
                let out_l = block.apply(&q_rows, &scene.l_tensor()?)?;
                let shape_l = out_l.map.shape();
                maps.push((out_l.map.values(), shape_l[0], shape_l[1]));
                Ok((out_v.joint.add(&out_l.joint)?, maps))
            }
            None => Ok((out_v.joint, maps)),
        }
    }

    pub fn forward(&self, scene: &SceneFeatures, question: &QuestionFeatures) -> Result<AdapterOutput> {
        let (f_o, maps) = self.combine(scene, question)?;
        let h = linear_rows(&f_o.reshape(&[1, self.joint_dim])?, &self.w1, Some(&self.b1))?
            .relu()?;
        let logits = linear_rows(&h, &self.w2, Some(&self.b2))?.reshape(&[self.d_o])?;
        let scores = logits.sigmoid()?.values();
        Ok(AdapterOutput { logits, scores, gamma: None, maps })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.gru.params() {
            out.push((format!("gru.{name}"), t));
        }
        out.extend(self.block_v.params("ban_v"));
        out.push(("mlp.w1".into(), self.w1.clone()));
        out.push(("mlp.b1".into(), self.b1.clone()));
        out.push(("mlp.w2".into(), self.w2.clone()));
        out.push(("mlp.b2".into(), self.b2.clone()));
        if let Some(block) = &self.block_l {
            out.extend(block.params("ban_l"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// gradient-check helpers
// ---------------------------------------------------------------------------

fn toy_pair(rng: &mut crate::Rng) -> Result<(SceneFeatures, QuestionFeatures)> {
    let (scene, question, _, _) = crate::counting::toy_input(3, 5, 4, 4, rng)?;
    Ok((scene, question))
}

fn bce_target(d_o: usize) -> Result<Tensor> {
    let mut t = vec![0.0; d_o];
    t[1] = 1.0;
    Tensor::from_vec(&[d_o], t)
}

pub fn updn_gradient_check(seed: u64) -> Result<f64> {
    let mut rng = crate::rng(seed);
    let model = UpdnModel::new(5, 4, 6, 4, true, &mut rng)?;
    let (scene, question) = toy_pair(&mut rng)?;
    let target = bce_target(4)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    finite_diff_check(
        &params,
        || model.forward(&scene, &question)?.logits.bce_with_logits(&target),
        DEFAULT_EPS,
    )
}

pub fn murel_gradient_check(seed: u64) -> Result<f64> {
    let mut rng = crate::rng(seed);
    let model = MurelModel::new(5, 4, 6, 4, true, &mut rng)?;
    let (scene, question) = toy_pair(&mut rng)?;
    let target = bce_target(4)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    finite_diff_check(
        &params,
        || model.forward(&scene, &question)?.logits.bce_with_logits(&target),
        DEFAULT_EPS,
    )
}

pub fn ban_gradient_check(seed: u64) -> Result<f64> {
    let mut rng = crate::rng(seed);
    let model = BanModel::new(5, 4, 6, 6, 4, true, &mut rng)?;
    let (scene, question) = toy_pair(&mut rng)?;
    let target = bce_target(4)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    finite_diff_check(
        &params,
        || model.forward(&scene, &question)?.logits.bce_with_logits(&target),
        DEFAULT_EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gated_tanh_zero_params_give_zero_output() {
        let mut rng = crate::rng(1);
        let g = GatedTanh::new(3, 2, &mut rng);
        g.zero().unwrap();
        let x = Tensor::from_vec(&[3], vec![0.4, -0.2, 1.0]).unwrap();
        assert_eq!(g.apply(&x).unwrap().values(), vec![0.0, 0.0]);
    }

    #[test]
    fn gated_tanh_saturated_gate_reduces_to_tanh() {
        let mut rng = crate::rng(2);
        let g = GatedTanh::new(3, 2, &mut rng);
        g.b_gate.set_values(&[30.0, 30.0]).unwrap();
        g.w_gate.set_values(&vec![0.0; 6]).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.4, -0.2, 1.0]).unwrap();
        let y = g.apply(&x).unwrap().values();
        let plain = crate::tensor::ops::linear(&g.w.transpose().unwrap(), &x, None)
            .unwrap()
            .add(&g.b)
            .unwrap()
            .tanh()
            .unwrap()
            .values();
        // w is stored [in, out]; linear wants [out, in], hence the transpose
        for (a, b) in y.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gated_tanh_output_is_bounded() {
        let mut rng = crate::rng(3);
        let g = GatedTanh::new(4, 3, &mut rng);
        use rand::Rng as _;
        for _ in 0..20 {
            let x = Tensor::from_vec(
                &[4],
                (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            for v in g.apply(&x).unwrap().values() {
                assert!(v > -1.0 && v < 1.0, "gated tanh out of range: {v}");
            }
        }
        // extreme inputs saturate to the closed interval in floating point
        let x = Tensor::from_vec(&[4], vec![500.0, -500.0, 500.0, -500.0]).unwrap();
        for v in g.apply(&x).unwrap().values() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    fn toy_scene_question(seed: u64) -> (SceneFeatures, QuestionFeatures) {
        let mut rng = crate::rng(seed);
        toy_pair(&mut rng).unwrap()
    }

    #[test]
    fn identical_objects_attend_uniformly() {
        let mut rng = crate::rng(4);
        let model = UpdnModel::new(5, 4, 6, 4, true, &mut rng).unwrap();
        let (mut scene, question) = toy_scene_question(5);
        for i in 1..scene.m {
            scene.v.copy_within(0..5, i * 5);
            scene.l.copy_within(0..4, i * 4);
            scene.b.copy_within(0..5, i * 5);
        }
        let out = model.forward(&scene, &question).unwrap();
        for g in out.gamma.unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn updn_scores_live_in_the_open_unit_interval() {
        let mut rng = crate::rng(6);
        let model = UpdnModel::new(5, 4, 6, 4, true, &mut rng).unwrap();
        let (scene, question) = toy_scene_question(7);
        let out = model.forward(&scene, &question).unwrap();
        for s in &out.scores {
            assert!(*s > 0.0 && *s < 1.0);
        }
        let g = out.gamma.unwrap();
        let sum: f64 = g.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zeroed_lat_branch_reproduces_the_baseline_updn_bitwise() {
        let mut rng = crate::rng(8);
        let model = UpdnModel::new(5, 4, 6, 4, true, &mut rng).unwrap();
        model.lat.as_ref().unwrap().zero().unwrap();
        let baseline = model.without_lat();
        let (scene, question) = toy_scene_question(9);
        let a = model.forward(&scene, &question).unwrap();
        let b = baseline.forward(&scene, &question).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.gamma, b.gamma);
    }

    #[test]
    fn murel_pool_selects_averages_and_matches_hand_case() {
        let fused = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let onehot = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(murel_lat_pool(&fused, &onehot).unwrap().values(), vec![4., 5., 6.]);
        let uniform = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(murel_lat_pool(&fused, &uniform).unwrap().values(), vec![2.5, 3.5, 4.5]);
        let w = Tensor::from_vec(&[2], vec![0.25, 0.75]).unwrap();
        let out = murel_lat_pool(&fused, &w).unwrap().values();
        assert_eq!(out, vec![0.25 * 1. + 0.75 * 4., 0.25 * 2. + 0.75 * 5., 0.25 * 3. + 0.75 * 6.]);
    }

    #[test]
    fn murel_uniform_pool_equals_row_mean() {
        let mut rng = crate::rng(10);
        use rand::Rng as _;
        let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fused = Tensor::from_vec(&[4, 3], vals).unwrap();
        let uniform = Tensor::from_vec(&[4], vec![0.25; 4]).unwrap();
        let pooled = murel_lat_pool(&fused, &uniform).unwrap().values();
        let mean = fused.mean_axis(0).unwrap().values();
        for (a, b) in pooled.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn murel_without_attention_max_pools_like_the_baseline() {
        let mut rng = crate::rng(11);
        let model = MurelModel::new(5, 4, 6, 4, true, &mut rng).unwrap();
        let baseline = model.without_lat();
        let (scene, question) = toy_scene_question(12);
        let a = baseline.forward(&scene, &question).unwrap();
        // stripping the attention is exactly the baseline path
        let direct = MurelModel {
            attention: None,
            ..model.without_lat()
        };
        let b = direct.forward(&scene, &question).unwrap();
        assert_eq!(a.scores, b.scores);
        assert!(a.gamma.is_none());
    }

    #[test]
    fn murel_zeroed_attention_params_pool_uniformly() {
        let mut rng = crate::rng(13);
        let model = MurelModel::new(5, 4, 6, 4, true, &mut rng).unwrap();
        let (va, lat) = model.attention.as_ref().unwrap();
        va.f_v.zero().unwrap();
        va.w_v.set_values(&vec![0.0; va.w_v.numel()]).unwrap();
        lat.zero().unwrap();
        let (scene, question) = toy_scene_question(14);
        let out = model.forward(&scene, &question).unwrap();
        for g in out.gamma.unwrap() {
            assert!((g - 1.0 / scene.m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_map_sums_to_one_and_degenerates_gracefully() {
        let mut rng = crate::rng(15);
        let block = BilinearCoAttention::new(3, 4, 5, &mut rng);
        use rand::Rng as _;
        let x = Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let y = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let out = block.apply(&x, &y).unwrap();
        let total: f64 = out.map.values().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        // single row each side -> the map is [[1]]
        let x1 = Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let y1 = Tensor::from_vec(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(block.apply(&x1, &y1).unwrap().map.values(), vec![1.0]);
        // zero score weights -> uniform map
        block.p.set_values(&vec![0.0; 5]).unwrap();
        let out = block.apply(&x, &y).unwrap();
        for v in out.map.values() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ban_combine_is_exactly_additive() {
        let mut rng = crate::rng(16);
        let model = BanModel::new(5, 4, 6, 6, 4, true, &mut rng).unwrap();
        let (scene, question) = toy_scene_question(17);
        let (f_o, _) = model.combine(&scene, &question).unwrap();
        // compute the branches independently
        let baseline = model.without_lat();
        let (f_v, _) = baseline.combine(&scene, &question).unwrap();
        let q_mat = question.q_tensor().unwrap();
        let mut rows = Vec::new();
        for j in 0..question.rows {
            if question.mask[j] {
                rows.push(q_mat.row(j).unwrap());
            }
        }
        let q_rows = stack_rows(&rows).unwrap();
        let f_l = model
            .block_l
            .as_ref()
            .unwrap()
            .apply(&q_rows, &scene.l_tensor().unwrap())
            .unwrap()
            .joint;
        let fo = f_o.values();
        let fv = f_v.values();
        let fl = f_l.values();
        for i in 0..fo.len() {
            assert_eq!(fo[i], fv[i] + fl[i], "additive identity at {i}");
        }
    }

    #[test]
    fn ban_zeroed_l_branch_reproduces_the_baseline_bitwise() {
        let mut rng = crate::rng(18);
        let model = BanModel::new(5, 4, 6, 6, 4, true, &mut rng).unwrap();
        model.block_l.as_ref().unwrap().zero().unwrap();
        let baseline = model.without_lat();
        let (scene, question) = toy_scene_question(19);
        let a = model.forward(&scene, &question).unwrap();
        let b = baseline.forward(&scene, &question).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn adapter_gradient_checks_pass_at_toy_dims() {
        assert!(updn_gradient_check(30).unwrap() < 1e-4);
        assert!(murel_gradient_check(31).unwrap() < 1e-4);
        assert!(ban_gradient_check(32).unwrap() < 1e-4);
    }

    #[test]
    fn lat_attention_hand_case_m2() {
        // tiny dims, every parameter pinned; scores checked against scalar math
        let mut rng = crate::rng(20);
        let va = VisualAttention::new(1, 1, 1, &mut rng);
        va.f_v.w.set_values(&[1.0, 0.5]).unwrap(); // [in=2, out=1]
        va.f_v.w_gate.set_values(&[0.0, 0.0]).unwrap();
        va.f_v.b.set_values(&[0.0]).unwrap();
        va.f_v.b_gate.set_values(&[30.0]).unwrap(); // gate ~ 1
        va.w_v.set_values(&[2.0]).unwrap();
        let lat = LatBranch::new(1, &mut rng);
        lat.f_l.w.set_values(&[1.0]).unwrap();
        lat.f_l.w_gate.set_values(&[0.0]).unwrap();
        lat.f_l.b.set_values(&[0.0]).unwrap();
        lat.f_l.b_gate.set_values(&[30.0]).unwrap();
        lat.w_l.set_values(&[1.0]).unwrap();
        lat.b_l.set_values(&[0.25]).unwrap();
        let scene = SceneFeatures {
            v: vec![0.5, -0.5],
            l: vec![1.0, -1.0],
            b: vec![0.5, 0.5, 0.1, 0.1, 0.01, 0.5, 0.5, 0.1, 0.1, 0.01],
            m: 2,
            d_v: 1,
            d_w: 1,
        };
        let question = QuestionFeatures {
            q: vec![0.8, -0.3],
            rows: 2,
            dim: 1,
            mask: vec![true, true],
        };
        let q_ctx = Tensor::from_vec(&[1], vec![0.6]).unwrap();
        let gamma =
            lat_visual_attention(&va, Some(&lat), &scene, &question, &q_ctx).unwrap().values();
        // hand evaluation with the gate saturated to ~1
        let s_hand: Vec<f64> = [0.5f64, -0.5]
            .iter()
            .zip([1.0f64, -1.0])
            .map(|(v, l)| {
                let base = 2.0 * (v + 0.5 * 0.6f64).tanh();
                let lat_sum: f64 = [0.8f64, -0.3]
                    .iter()
                    .map(|q| (l * q).tanh() + 0.25)
                    .sum();
                base + lat_sum
            })
            .collect();
        let max = s_hand[0].max(s_hand[1]);
        let e: Vec<f64> = s_hand.iter().map(|s| (s - max).exp()).collect();
        let total = e[0] + e[1];
        for (g, eh) in gamma.iter().zip(&e) {
            assert!((g - eh / total).abs() < 1e-6, "{g} vs {}", eh / total);
        }
    }
}
