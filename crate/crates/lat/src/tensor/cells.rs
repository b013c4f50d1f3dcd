//! LSTM and GRU cells built from primitive differentiable ops.
//!
//! Gate conventions (asserted by hand-computed tests):
//!
//! LSTM, stacked gate order `[i, f, g, o]`:
//! ```text
//! i = sigmoid(Wi x + Ui h + bi)      f = sigmoid(Wf x + Uf h + bf)
//! g = tanh(Wg x + Ug h + bg)         o = sigmoid(Wo x + Uo h + bo)
//! c' = f . c + i . g                 h' = o . tanh(c')
//! ```
//!
//! GRU, stacked gate order `[r, z, n]`, with the reset gate applied to the
//! hidden projection (`n = tanh(Wn x + r . (Un h) + bn)`) and the update
//! gate interpolating toward the candidate:
//! ```text
//! h' = (1 - z) . h + z . n
//! ```
//! so forcing `z -> 1` replaces the state with the candidate rather than
//! keeping the previous hidden state.

use rand::Rng;

use super::ops::linear;
use super::Tensor;
use crate::error::{LatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

/// Parameters of one recurrent cell with stacked gate blocks.
pub struct RecurrentCell {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    /// `[gates * hidden, input]`
    pub w_x: Tensor,
    /// `[gates * hidden, hidden]`
    pub w_h: Tensor,
    /// `[gates * hidden]`
    pub b: Tensor,
}

/// Recurrent state; `c` is `None` for GRU cells.
#[derive(Clone)]
pub struct CellState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

impl RecurrentCell {
    pub fn new(
        kind: CellKind,
        input_size: usize,
        hidden_size: usize,
        rng: &mut impl Rng,
    ) -> Result<RecurrentCell> {
        if hidden_size == 0 || input_size == 0 {
            return Err(LatError::Contract(
                "recurrent cell sizes must be positive".into(),
            ));
        }
        let g = kind.gates();
        Ok(RecurrentCell {
            kind,
            input_size,
            hidden_size,
            w_x: Tensor::glorot(g * hidden_size, input_size, rng),
            w_h: Tensor::glorot(g * hidden_size, hidden_size, rng),
            b: Tensor::zeros_param(&[g * hidden_size]),
        })
    }

    pub fn zero_state(&self) -> CellState {
        CellState {
            h: Tensor::zeros(&[self.hidden_size]),
            c: match self.kind {
                CellKind::Lstm => Some(Tensor::zeros(&[self.hidden_size])),
                CellKind::Gru => None,
            },
        }
    }

    /// One step of the cell; `x` must have length `input_size` and the
    /// state vectors length `hidden_size`.
    pub fn step(&self, x: &Tensor, state: &CellState) -> Result<CellState> {
        if x.shape() != [self.input_size] {
            return Err(LatError::shape(
                "recurrent_step",
                format!("input {:?}, cell expects [{}]", x.shape(), self.input_size),
            ));
        }
        if state.h.shape() != [self.hidden_size] {
            return Err(LatError::shape(
                "recurrent_step",
                format!("state {:?}, cell expects [{}]", state.h.shape(), self.hidden_size),
            ));
        }
        let h = self.hidden_size;
        let px = linear(&self.w_x, x, None)?;
        let ph = linear(&self.w_h, &state.h, None)?;
        match self.kind {
            CellKind::Lstm => {
                let c = state.c.as_ref().ok_or_else(|| {
                    LatError::Contract("LSTM step needs a cell state".into())
                })?;
                let pre = px.add(&ph)?.add(&self.b)?;
                let i = pre.narrow(0, h)?.sigmoid()?;
                let f = pre.narrow(h, h)?.sigmoid()?;
                let g = pre.narrow(2 * h, h)?.tanh()?;
                let o = pre.narrow(3 * h, h)?.sigmoid()?;
                let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
                let h_next = o.mul(&c_next.tanh()?)?;
                Ok(CellState { h: h_next, c: Some(c_next) })
            }
            CellKind::Gru => {
                let bx = px.add(&self.b)?;
                let r = bx.narrow(0, h)?.add(&ph.narrow(0, h)?)?.sigmoid()?;
                let z = bx.narrow(h, h)?.add(&ph.narrow(h, h)?)?.sigmoid()?;
                let n = bx.narrow(2 * h, h)?.add(&r.mul(&ph.narrow(2 * h, h)?)?)?.tanh()?;
                // h' = (1 - z) . h + z . n
                let keep = z.neg()?.offset(1.0)?;
                let h_next = keep.mul(&state.h)?.add(&z.mul(&n)?)?;
                Ok(CellState { h: h_next, c: None })
            }
        }
    }

    pub fn params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("w_x", self.w_x.clone()),
            ("w_h", self.w_h.clone()),
            ("b", self.b.clone()),
        ]
    }
}

/// Run a cell over a sequence, returning the hidden state after every step.
pub fn run_sequence(cell: &RecurrentCell, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut state = cell.zero_state();
    let mut hidden = Vec::with_capacity(inputs.len());
    for x in inputs {
        state = cell.step(x, &state)?;
        hidden.push(state.h.clone());
    }
    Ok(hidden)
}

/// Bidirectional encoding: run `fwd` left-to-right and `bwd` right-to-left,
/// concatenating the two final hidden states.
pub fn bilstm_encode(fwd: &RecurrentCell, bwd: &RecurrentCell, inputs: &[Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(LatError::Degenerate("bilstm over an empty sequence".into()));
    }
    let f = run_sequence(fwd, inputs)?;
    let reversed: Vec<Tensor> = inputs.iter().rev().cloned().collect();
    let b = run_sequence(bwd, &reversed)?;
    let f_last = f.last().expect("nonempty");
    let b_last = b.last().expect("nonempty");
    Tensor::concat(&[f_last, b_last], 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_cell(kind: CellKind, input: usize, hidden: usize) -> RecurrentCell {
        let g = kind.gates();
        RecurrentCell {
            kind,
            input_size: input,
            hidden_size: hidden,
            w_x: Tensor::zeros_param(&[g * hidden, input]),
            w_h: Tensor::zeros_param(&[g * hidden, hidden]),
            b: Tensor::zeros_param(&[g * hidden]),
        }
    }

    #[test]
    fn lstm_zero_params_zero_input_gives_zero_hidden() {
        // gates: i = f = o = 0.5, g = 0; c' = 0.5*0 + 0.5*0 = 0; h' = 0.5*tanh(0) = 0
        let cell = zero_cell(CellKind::Lstm, 3, 2);
        let x = Tensor::zeros(&[3]);
        let s = cell.step(&x, &cell.zero_state()).unwrap();
        assert_eq!(s.h.values(), vec![0.0, 0.0]);
        assert_eq!(s.c.unwrap().values(), vec![0.0, 0.0]);
    }

    #[test]
    fn gru_update_gate_forced_to_one_replaces_state() {
        // With the documented convention h' = (1-z) h + z n, a huge update-gate
        // bias gives h' ~= n, NOT h_{t-1}. With all other params zero, n = 0.
        let cell = zero_cell(CellKind::Gru, 2, 2);
        let b = cell.b.values();
        let mut b = b;
        b[2] = 30.0; // z-gate bias, hidden index 0
        b[3] = 30.0; // z-gate bias, hidden index 1
        cell.b.set_values(&b).unwrap();
        let prev = CellState {
            h: Tensor::from_vec(&[2], vec![0.7, -0.4]).unwrap(),
            c: None,
        };
        let x = Tensor::zeros(&[2]);
        let s = cell.step(&x, &prev).unwrap();
        for v in s.h.values() {
            assert!(v.abs() < 1e-9, "state was replaced by the candidate, got {v}");
        }
    }

    #[test]
    fn gru_hand_computed_step() {
        // Scalar cell, every weight pinned, values computed by hand:
        //   w_x = [0.5 (r), 1.0 (z), -1.0 (n)], w_h = [0.25, 0.5, 2.0], b = 0
        //   x = 1, h = 0.5
        //   r = sigmoid(0.5*1 + 0.25*0.5) = sigmoid(0.625)   = 0.65135486...
        //   z = sigmoid(1.0*1 + 0.5*0.5)  = sigmoid(1.25)    = 0.77729986...
        //   n = tanh(-1.0*1 + r*(2.0*0.5)) = tanh(-0.34864514) = -0.33515181...
        //   h' = (1-z)*0.5 + z*n = -0.14917652...
        let cell = RecurrentCell {
            kind: CellKind::Gru,
            input_size: 1,
            hidden_size: 1,
            w_x: Tensor::param(&[3, 1], vec![0.5, 1.0, -1.0]).unwrap(),
            w_h: Tensor::param(&[3, 1], vec![0.25, 0.5, 2.0]).unwrap(),
            b: Tensor::zeros_param(&[3]),
        };
        let prev = CellState {
            h: Tensor::from_vec(&[1], vec![0.5]).unwrap(),
            c: None,
        };
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let s = cell.step(&x, &prev).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x as f64).exp());
        let r = sig(0.625);
        let z = sig(1.25);
        let n = (-1.0 + r * 1.0_f64).tanh();
        let expect = (1.0 - z) * 0.5 + z * n;
        assert!((s.h.value().unwrap() - expect).abs() < 1e-12);
        assert!((expect + 0.149176).abs() < 1e-4);
    }

    #[test]
    fn wrong_input_length_is_a_dimension_error() {
        let cell = zero_cell(CellKind::Lstm, 3, 2);
        let x = Tensor::zeros(&[4]);
        assert!(cell.step(&x, &cell.zero_state()).is_err());
    }

    #[test]
    fn bilstm_single_word_sees_one_step_per_direction() {
        let mut rng = crate::rng(3);
        let fwd = RecurrentCell::new(CellKind::Lstm, 3, 2, &mut rng).unwrap();
        let bwd = RecurrentCell::new(CellKind::Lstm, 3, 2, &mut rng).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let enc = bilstm_encode(&fwd, &bwd, &[x.clone()]).unwrap();
        assert_eq!(enc.shape(), vec![4]);
        let f1 = fwd.step(&x, &fwd.zero_state()).unwrap();
        let b1 = bwd.step(&x, &bwd.zero_state()).unwrap();
        let expect: Vec<f64> = f1.h.values().into_iter().chain(b1.h.values()).collect();
        assert_eq!(enc.values(), expect);
    }
}
