//! Two-layer LSTM over latent-vector sequences.

use super::{init_uniform, Param, Visit};
use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

/// Single LSTM cell. Gate pre-activations are packed as [i, f, g, o]
/// along the output axis of a [4H, D] input map and a [4H, H] recurrent
/// map sharing one bias.
#[derive(Debug, Clone)]
pub struct LstmCell<T: Element> {
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub bias: Param<T>,
    pub hidden: usize,
}

impl<T: Element> LstmCell<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmCell {
            w_ih: Param::new(init_uniform(vec![4 * hidden, input], input, rng)),
            w_hh: Param::new(init_uniform(vec![4 * hidden, hidden], hidden, rng)),
            bias: Param::new(Tensor::zeros(vec![4 * hidden])),
            hidden,
        }
    }

    /// One step: (x [N,D], h [N,H], c [N,H]) → (h', c').
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hs = self.hidden;
        let from_x = tape.linear(x, self.w_ih.var(), Some(self.bias.var()))?;
        let from_h = tape.linear(h, self.w_hh.var(), None)?;
        let gates = tape.add(from_x, from_h)?;
        let i_raw = tape.slice(gates, 1, 0, hs)?;
        let f_raw = tape.slice(gates, 1, hs, hs)?;
        let g_raw = tape.slice(gates, 1, 2 * hs, hs)?;
        let o_raw = tape.slice(gates, 1, 3 * hs, hs)?;
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act)?;
        Ok((h_next, c_next))
    }
}

impl<T: Element> Visit<T> for LstmCell<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.w_ih"), &mut self.w_ih);
        f(&format!("{prefix}.w_hh"), &mut self.w_hh);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Stack of two LSTM cells; hidden and cell states start at zero and the
/// output is the top layer's hidden state after the final step.
#[derive(Debug, Clone)]
pub struct LstmStack<T: Element> {
    pub layers: Vec<LstmCell<T>>,
}

impl<T: Element> LstmStack<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmStack {
            layers: vec![
                LstmCell::new(input, hidden, rng),
                LstmCell::new(hidden, hidden, rng),
            ],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().unwrap().hidden
    }

    /// Runs the stack over `sequence` (each element [N, D]) and returns
    /// the final hidden state of the last layer, [N, H].
    pub fn forward(&mut self, tape: &mut Tape<T>, sequence: &[Var]) -> Result<Var> {
        if sequence.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "lstm_forward",
                shape: vec![],
                reason: "empty sequence".into(),
            });
        }
        let n = tape.shape(sequence[0])[0];
        let mut states: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|cell| {
                let zeros = Tensor::zeros(vec![n, cell.hidden]);
                (tape.constant(zeros.clone()), tape.constant(zeros))
            })
            .collect();
        let mut top = states.last().unwrap().0;
        for &x in sequence {
            let mut input = x;
            for (cell, state) in self.layers.iter_mut().zip(states.iter_mut()) {
                let (h, c) = cell.forward(tape, input, state.0, state.1)?;
                *state = (h, c);
                input = h;
            }
            top = input;
        }
        Ok(top)
    }
}

impl<T: Element> Visit<T> for LstmStack<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, cell) in self.layers.iter_mut().enumerate() {
            cell.visit_params(&format!("{prefix}.layer{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::bind_all;
    use crate::layers::testutil::{check_layer_grad, rng, smooth_random};

    #[test]
    fn zero_weights_single_step_outputs_zero() {
        let mut stack = LstmStack::<f64>::new(3, 4, &mut rng(0));
        for cell in &mut stack.layers {
            cell.w_ih.value = Tensor::zeros(cell.w_ih.value.shape().to_vec());
            cell.w_hh.value = Tensor::zeros(cell.w_hh.value.shape().to_vec());
        }
        let mut tape = Tape::new();
        bind_all(&mut stack, &mut tape, false);
        let x = tape.constant(smooth_random(vec![2, 3], 1));
        let out = stack.forward(&mut tape, &[x]).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut stack = LstmStack::<f64>::new(3, 4, &mut rng(0));
        let mut tape = Tape::new();
        bind_all(&mut stack, &mut tape, false);
        assert!(stack.forward(&mut tape, &[]).is_err());
    }

    #[test]
    fn order_sensitivity() {
        // A constant sequence and a permuted non-constant sequence with the
        // same multiset of elements give different outputs.
        let mut stack = LstmStack::<f64>::new(2, 8, &mut rng(5));
        let mut tape = Tape::new();
        bind_all(&mut stack, &mut tape, false);
        let a = tape.constant(Tensor::new(vec![1, 2], vec![0.9, -0.4]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], vec![-0.7, 0.2]).unwrap());
        let ab = stack.forward(&mut tape, &[a, b]).unwrap();
        let ba = stack.forward(&mut tape, &[b, a]).unwrap();
        assert_ne!(tape.value(ab).data(), tape.value(ba).data());
    }

    #[test]
    fn gradient_check_through_three_steps() {
        let mut stack = LstmStack::<f64>::new(3, 5, &mut rng(7));
        // One leaf feeds all three steps scaled differently, exercising
        // backpropagation through time with fan-out.
        let x = smooth_random(vec![2, 3], 8);
        let err = check_layer_grad(&mut stack, &x, 1e-5, |l, t, v| {
            let half = t.scale(v, 0.5);
            let neg = t.scale(v, -1.0);
            let out = l.forward(t, &[v, half, neg])?;
            Ok(t.sum(out))
        });
        assert!(err < 1e-4, "err {err}");
    }
}
