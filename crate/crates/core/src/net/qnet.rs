//! Q-network over (state, clean action sequence) pairs.

use rand::Rng;

use super::{insert_linear, Bound, NumArray, ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::schedule::{MaskedSeq, Vocab};

/// MLP on `[state, one-hot(a_1..a_K)]` with SiLU hidden layers and a scalar head.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetSpec {
    pub vocab: Vocab,
    pub seq_len: usize,
    pub state_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl QNetSpec {
    fn input_dim(&self) -> usize {
        self.state_dim + self.seq_len * self.vocab.size()
    }

    fn input_matrix(&self, states: &[&[f64]], actions: &[&MaskedSeq]) -> Result<NumArray> {
        if states.len() != actions.len() || states.is_empty() {
            return Err(Error::Shape(format!(
                "{} states for {} actions",
                states.len(),
                actions.len()
            )));
        }
        let width = self.input_dim();
        let a = self.vocab.size();
        let mut data = vec![0.0; states.len() * width];
        for (i, (s, act)) in states.iter().zip(actions).enumerate() {
            if s.len() != self.state_dim {
                return Err(Error::Shape(format!(
                    "state has {} features, expected {}",
                    s.len(),
                    self.state_dim
                )));
            }
            if act.len() != self.seq_len || act.vocab() != self.vocab {
                return Err(Error::Shape(format!(
                    "action of length {}, expected {}",
                    act.len(),
                    self.seq_len
                )));
            }
            if !act.is_clean() {
                return Err(invalid!("Q-network input action contains MASK"));
            }
            let row = &mut data[i * width..(i + 1) * width];
            row[..self.state_dim].copy_from_slice(s);
            for (k, &t) in act.tokens().iter().enumerate() {
                row[self.state_dim + k * a + t] = 1.0;
            }
        }
        NumArray::new(vec![states.len(), width], data)
    }
}

pub fn init_qnet<R: Rng + ?Sized>(spec: &QNetSpec, rng: &mut R) -> Result<ParamStore> {
    if spec.seq_len == 0 || (spec.layers > 0 && spec.hidden == 0) {
        return Err(Error::Shape(format!("Q-network dimensions must be positive: {spec:?}")));
    }
    let mut s = ParamStore::new();
    let mut fan_in = spec.input_dim();
    for l in 0..spec.layers {
        insert_linear(&mut s, &format!("q.l{l}"), fan_in, spec.hidden, false, rng);
        fan_in = spec.hidden;
    }
    insert_linear(&mut s, "q.out", fan_in, 1, false, rng);
    Ok(s)
}

/// Batched Q-values `[B, 1]`.
pub fn qnet_batch<'t>(
    spec: &QNetSpec,
    p: &Bound<'t, '_>,
    states: &[&[f64]],
    actions: &[&MaskedSeq],
) -> Result<Var<'t>> {
    let mut x = p.tape().constant(spec.input_matrix(states, actions)?);
    for l in 0..spec.layers {
        x = p.linear(&format!("q.l{l}"), x)?.silu();
    }
    p.linear("q.out", x)
}

/// Q-value of one pair.
pub fn qnet_forward(spec: &QNetSpec, params: &ParamStore, s: &[f64], a: &MaskedSeq) -> Result<f64> {
    Ok(qnet_values(spec, params, &[s], &[a])?[0])
}

/// Q-values of a batch without gradients.
pub fn qnet_values(
    spec: &QNetSpec,
    params: &ParamStore,
    states: &[&[f64]],
    actions: &[&MaskedSeq],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = tape.bind(params, false);
    Ok(qnet_batch(spec, &p, states, actions)?.value().data().to_vec())
}
