//! Dual-stream captioning cell: a V-LSTM and an L-LSTM aggregate the
//! averaged visual and linguistic features with the current word, two
//! attention heads weight the per-object features against those states,
//! and an O-LSTM decodes the next-word distribution.
//!
//! Training is teacher-forced cross-entropy over the reference caption;
//! decoding is greedy argmax (ties break toward the lowest token index),
//! from the start token until the end token or the length cap.

use crate::embedding::EmbeddingTable;
use crate::error::{LatError, Result};
use crate::features::SceneFeatures;
use crate::tensor::cells::{CellKind, CellState, RecurrentCell};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, END, START};

#[derive(Debug, Clone)]
pub struct CaptionConfig {
    pub d_v: usize,
    pub d_w: usize,
    /// Hidden size of the V- and L-LSTMs.
    pub d_e: usize,
    /// Attention projection size.
    pub d_att: usize,
}

pub struct CaptionModel {
    pub cfg: CaptionConfig,
    pub vocab: Vocab,
    v_lstm: RecurrentCell,
    /// The linguistic input stream; absent in the baseline configuration.
    l_lstm: Option<RecurrentCell>,
    o_lstm: RecurrentCell,
    w_v: Tensor,
    w_h_v: Tensor,
    w_va: Tensor,
    l_att: Option<LAttention>,
    w_y: Tensor,
    b_y: Tensor,
}

struct LAttention {
    w_l: Tensor,
    w_h_l: Tensor,
    w_la: Tensor,
}

/// Hidden and cell states of all three LSTMs at one timestep.
pub struct CaptionState {
    pub v: CellState,
    pub l: CellState,
    pub o: CellState,
}

pub struct StepOutput {
    /// Next-word probabilities (softmax, sums to 1).
    pub y: Tensor,
    /// Pre-softmax logits (the training surface).
    pub logits: Tensor,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CaptionModel {
    pub fn new(cfg: CaptionConfig, vocab: Vocab, with_lat: bool, rng: &mut crate::Rng) -> Result<CaptionModel> {
        let d_o = vocab.len();
        if d_o < 4 {
            return Err(LatError::Contract(format!(
                "caption vocabulary needs at least 4 tokens (pad/start/end/unk), got {d_o}"
            )));
        }
        // the caption context h^o has the vocabulary size, so the input
        // streams see [h^o, mean-feature, word]
        let v_lstm = RecurrentCell::new(CellKind::Lstm, d_o + cfg.d_v + cfg.d_w, cfg.d_e, rng)?;
        let o_in = cfg.d_v + cfg.d_w + 2 * cfg.d_e;
        let o_lstm = RecurrentCell::new(CellKind::Lstm, o_in, d_o, rng)?;
        let w_v = Tensor::glorot(cfg.d_v, cfg.d_att, rng);
        let w_h_v = Tensor::glorot(cfg.d_e, cfg.d_att, rng);
        let w_va = Tensor::glorot_vec(cfg.d_att, rng);
        let w_y = Tensor::glorot(d_o, d_o, rng);
        let b_y = Tensor::zeros_param(&[d_o]);
        let (l_lstm, l_att) = if with_lat {
            (
                Some(RecurrentCell::new(CellKind::Lstm, d_o + 2 * cfg.d_w, cfg.d_e, rng)?),
                Some(LAttention {
                    w_l: Tensor::glorot(cfg.d_w, cfg.d_att, rng),
                    w_h_l: Tensor::glorot(cfg.d_e, cfg.d_att, rng),
                    w_la: Tensor::glorot_vec(cfg.d_att, rng),
                }),
            )
        } else {
            (None, None)
        };
        Ok(CaptionModel { cfg, vocab, v_lstm, l_lstm, o_lstm, w_v, w_h_v, w_va, l_att, w_y, b_y })
    }

    /// Strip the linguistic stream; the O-LSTM keeps its input width and
    /// sees zeros in the linguistic slots.
    pub fn without_lat(&self) -> CaptionModel {
        CaptionModel {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            v_lstm: clone_cell(&self.v_lstm),
            l_lstm: None,
            o_lstm: clone_cell(&self.o_lstm),
            w_v: self.w_v.clone(),
            w_h_v: self.w_h_v.clone(),
            w_va: self.w_va.clone(),
            l_att: None,
            w_y: self.w_y.clone(),
            b_y: self.b_y.clone(),
        }
    }

    pub fn zero_state(&self) -> CaptionState {
        CaptionState {
            v: self.v_lstm.zero_state(),
            l: match &self.l_lstm {
                Some(c) => c.zero_state(),
                None => CellState { h: Tensor::zeros(&[self.cfg.d_e]), c: None },
            },
            o: self.o_lstm.zero_state(),
        }
    }

    /// V-LSTM and L-LSTM over `[h^o_{t-1}, mean-feature, q_t]`.
    pub fn input_layer_step(
        &self,
        h_o_prev: &Tensor,
        v_bar: &Tensor,
        l_bar: &Tensor,
        q_t: &Tensor,
        state: &CaptionState,
    ) -> Result<(CellState, CellState)> {
        let x_v = Tensor::concat(&[h_o_prev, v_bar, q_t], 0)?;
        let v_next = self.v_lstm.step(&x_v, &state.v)?;
        let l_next = match &self.l_lstm {
            Some(cell) => {
                let x_l = Tensor::concat(&[h_o_prev, l_bar, q_t], 0)?;
                cell.step(&x_l, &state.l)?
            }
            None => CellState { h: Tensor::zeros(&[self.cfg.d_e]), c: None },
        };
        Ok((v_next, l_next))
    }

    /// Attention over objects from each stream's hidden state.
    pub fn dual_attention(
        &self,
        v_mat: &Tensor,
        l_mat: &Tensor,
        h_v: &Tensor,
        h_l: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let m = v_mat.shape()[0];
        let alpha = {
            let proj = v_mat.matmul(&self.w_v)?;
            let hp = h_v.reshape(&[1, self.cfg.d_e])?.matmul(&self.w_h_v)?.reshape(&[self.cfg.d_att])?;
            let scores = proj
                .add(&hp.expand_rows(m)?)?
                .tanh()?
                .matmul(&self.w_va.reshape(&[self.cfg.d_att, 1])?)?
                .reshape(&[m])?;
            scores.softmax_masked(None)?
        };
        let beta = match &self.l_att {
            Some(att) => {
                let proj = l_mat.matmul(&att.w_l)?;
                let hp = h_l.reshape(&[1, self.cfg.d_e])?.matmul(&att.w_h_l)?.reshape(&[self.cfg.d_att])?;
                let scores = proj
                    .add(&hp.expand_rows(m)?)?
                    .tanh()?
                    .matmul(&att.w_la.reshape(&[self.cfg.d_att, 1])?)?
                    .reshape(&[m])?;
                scores.softmax_masked(None)?
            }
            None => Tensor::from_vec(&[m], vec![1.0 / m as f64; m])?,
        };
        Ok((alpha, beta))
    }

    /// Weighted sums of the object features under each attention head.
    pub fn attend_encode(
        &self,
        v_mat: &Tensor,
        alpha: &Tensor,
        l_mat: &Tensor,
        beta: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let m = v_mat.shape()[0];
        let o_v = alpha.reshape(&[1, m])?.matmul(v_mat)?.reshape(&[self.cfg.d_v])?;
        let o_l = match self.l_att {
            Some(_) => beta.reshape(&[1, m])?.matmul(l_mat)?.reshape(&[self.cfg.d_w])?,
            None => Tensor::zeros(&[self.cfg.d_w]),
        };
        Ok((o_v, o_l))
    }

    /// O-LSTM over `[o^v, o^l, h^v, h^l]`, then the word distribution.
    pub fn output_layer_step(
        &self,
        o_v: &Tensor,
        o_l: &Tensor,
        h_v: &Tensor,
        h_l: &Tensor,
        state_o: &CellState,
    ) -> Result<(StepOutput, CellState)> {
        let x_o = Tensor::concat(&[o_v, o_l, h_v, h_l], 0)?;
        let next = self.o_lstm.step(&x_o, state_o)?;
        let d_o = self.vocab.len();
        let logits = next
            .h
            .reshape(&[1, d_o])?
            .matmul(&self.w_y)?
            .reshape(&[d_o])?
            .add(&self.b_y)?;
        let y = logits.softmax_masked(None)?;
        Ok((StepOutput { y, logits, alpha: Vec::new(), beta: Vec::new() }, next))
    }

    /// One full decoder step from the previous word embedding.
    pub fn step(
        &self,
        scene_v: &Tensor,
        scene_l: &Tensor,
        v_bar: &Tensor,
        l_bar: &Tensor,
        q_t: &Tensor,
        state: &CaptionState,
    ) -> Result<(StepOutput, CaptionState)> {
        let (v_next, l_next) = self.input_layer_step(&state.o.h, v_bar, l_bar, q_t, state)?;
        let (alpha, beta) = self.dual_attention(scene_v, scene_l, &v_next.h, &l_next.h)?;
        let (o_v, o_l) = self.attend_encode(scene_v, &alpha, scene_l, &beta)?;
        let (mut out, o_next) = self.output_layer_step(&o_v, &o_l, &v_next.h, &l_next.h, &state.o)?;
        out.alpha = alpha.values();
        out.beta = beta.values();
        Ok((out, CaptionState { v: v_next, l: l_next, o: o_next }))
    }

    /// Teacher-forced mean cross-entropy over a reference caption that
    /// starts with `<s>` and ends with `</s>`.
    pub fn caption_loss(
        &self,
        scene: &SceneFeatures,
        reference: &[String],
        table: &EmbeddingTable,
    ) -> Result<Tensor> {
        self.check_reference(reference)?;
        let (scene_v, scene_l, v_bar, l_bar) = self.scene_tensors(scene)?;
        let mut state = self.zero_state();
        let mut total: Option<Tensor> = None;
        let steps = reference.len() - 1;
        for t in 0..steps {
            let q_t = Tensor::from_vec(&[self.cfg.d_w], table.lookup(&reference[t]).0)?;
            let (out, next) = self.step(&scene_v, &scene_l, &v_bar, &l_bar, &q_t, &state)?;
            state = next;
            let target = self.vocab.get_or_unk(&reference[t + 1])?;
            let ce = out.logits.cross_entropy_logits(target)?;
            total = Some(match total {
                Some(acc) => acc.add(&ce)?,
                None => ce,
            });
        }
        total.expect("at least one step").scale(1.0 / steps as f64)
    }

    /// Greedy decode; returns the tokens between the start and end markers.
    pub fn generate_caption(
        &self,
        scene: &SceneFeatures,
        table: &EmbeddingTable,
        max_len: usize,
    ) -> Result<Vec<String>> {
        let (scene_v, scene_l, v_bar, l_bar) = self.scene_tensors(scene)?;
        let end = self.vocab.get(END).ok_or_else(|| {
            LatError::Contract("vocabulary lacks the end token".into())
        })?;
        let mut state = self.zero_state();
        let mut prev = START.to_string();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let q_t = Tensor::from_vec(&[self.cfg.d_w], table.lookup(&prev).0)?;
            let (step, next) = self.step(&scene_v, &scene_l, &v_bar, &l_bar, &q_t, &state)?;
            state = next;
            let y = step.y.values();
            // first maximal index: ties break toward the lowest token id
            let mut best = 0usize;
            for (i, v) in y.iter().enumerate() {
                if *v > y[best] {
                    best = i;
                }
            }
            if best == end {
                break;
            }
            let token = self
                .vocab
                .token(best)
                .ok_or_else(|| LatError::Contract(format!("decoded index {best} out of vocab")))?
                .to_string();
            out.push(token.clone());
            prev = token;
        }
        Ok(out)
    }

    fn check_reference(&self, reference: &[String]) -> Result<()> {
        if reference.len() < 2 || reference[0] != START || reference[reference.len() - 1] != END {
            return Err(LatError::Contract(
                "reference caption must start with <s> and end with </s>".into(),
            ));
        }
        Ok(())
    }

    fn scene_tensors(&self, scene: &SceneFeatures) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        if scene.d_v != self.cfg.d_v || scene.d_w != self.cfg.d_w {
            return Err(LatError::shape(
                "caption_forward",
                format!(
                    "scene (d_v {}, d_w {}) vs model (d_v {}, d_w {})",
                    scene.d_v, scene.d_w, self.cfg.d_v, self.cfg.d_w
                ),
            ));
        }
        let v = scene.v_tensor()?;
        let l = scene.l_tensor()?;
        let v_bar = v.mean_axis(0)?;
        let l_bar = l.mean_axis(0)?;
        Ok((v, l, v_bar, l_bar))
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.v_lstm.params() {
            out.push((format!("v_lstm.{name}"), t));
        }
        if let Some(cell) = &self.l_lstm {
            for (name, t) in cell.params() {
                out.push((format!("l_lstm.{name}"), t));
            }
        }
        for (name, t) in self.o_lstm.params() {
            out.push((format!("o_lstm.{name}"), t));
        }
        out.push(("att.w_v".into(), self.w_v.clone()));
        out.push(("att.w_h_v".into(), self.w_h_v.clone()));
        out.push(("att.w_va".into(), self.w_va.clone()));
        if let Some(att) = &self.l_att {
            out.push(("att.w_l".into(), att.w_l.clone()));
            out.push(("att.w_h_l".into(), att.w_h_l.clone()));
            out.push(("att.w_la".into(), att.w_la.clone()));
        }
        out.push(("out.w_y".into(), self.w_y.clone()));
        out.push(("out.b_y".into(), self.b_y.clone()));
        out
    }

    pub fn has_lat(&self) -> bool {
        self.l_lstm.is_some()
    }

    /// Zero every parameter of the linguistic stream in place.
    pub fn zero_lat(&self) -> Result<()> {
        if let Some(cell) = &self.l_lstm {
            for (_, t) in cell.params() {
                t.set_values(&vec![0.0; t.numel()])?;
            }
        }
        if let Some(att) = &self.l_att {
            for t in [&att.w_l, &att.w_h_l, &att.w_la] {
                t.set_values(&vec![0.0; t.numel()])?;
            }
        }
        Ok(())
    }
}

fn clone_cell(c: &RecurrentCell) -> RecurrentCell {
    RecurrentCell {
        kind: c.kind,
        input_size: c.input_size,
        hidden_size: c.hidden_size,
        w_x: c.w_x.clone(),
        w_h: c.w_h.clone(),
        b: c.b.clone(),
    }
}

/// Finite-difference check of the unrolled caption loss at toy dims.
pub fn caption_gradient_check(seed: u64) -> Result<f64> {
    let mut rng = crate::rng(seed);
    let (model, scene, table) = toy_caption_setup(&mut rng)?;
    let reference: Vec<String> =
        [START, "2", "car", END].iter().map(|s| s.to_string()).collect();
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    crate::tensor::gradcheck::finite_diff_check(
        &params,
        || model.caption_loss(&scene, &reference, &table),
        crate::tensor::gradcheck::DEFAULT_EPS,
    )
}

/// Tiny captioner (m=2, d_e=8, d_o=6) plus a matching scene and table.
pub fn toy_caption_setup(rng: &mut crate::Rng) -> Result<(CaptionModel, SceneFeatures, EmbeddingTable)> {
    use rand::Rng as _;
    let (d_v, d_w) = (5, 4);
    let vocab = Vocab::caption(["car".to_string(), "2".to_string()])?;
    let cfg = CaptionConfig { d_v, d_w, d_e: 8, d_att: 4 };
    let model = CaptionModel::new(cfg, vocab, true, rng)?;
    let m = 2;
    let v: Vec<f64> = (0..m * d_v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let l: Vec<f64> = (0..m * d_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = vec![0.5, 0.5, 0.2, 0.2, 0.04, 0.25, 0.25, 0.1, 0.1, 0.01];
    let scene = SceneFeatures { v, l, b, m, d_v, d_w };
    let words: Vec<(String, Vec<f64>)> = ["<s>", "</s>", "car", "2"]
        .iter()
        .map(|w| {
            (w.to_string(), (0..d_w).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
        })
        .collect();
    let table = EmbeddingTable::from_pairs(d_w, words)?;
    Ok((model, scene, table))
}
