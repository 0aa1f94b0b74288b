//! The denoiser `f_θ(a^n, n, s)`: per-position logits over primitive actions.
//!
//! Conditioning on the diffusion step and the state enters only through FiLM
//! heads (`norm(h) * (1 + scale) + shift`, plus a residual gate `1 + gate`),
//! all zero-initialized, so a fresh network ignores its conditioning.

use rand::Rng;

use super::{insert_linear, tape::softmax_row, Bound, NumArray, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::schedule::{MaskedSeq, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    /// Token + optional positional embedding, `n_blocks` single-head blocks.
    Transformer { d_model: usize, n_blocks: usize, ff_hidden: usize, pos_emb: bool },
    /// One-hot input, `layers` FiLM-conditioned hidden layers. With
    /// `layers = 0` there are no parameters and the logits are zero.
    Mlp { hidden: usize, layers: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserSpec {
    pub vocab: Vocab,
    pub seq_len: usize,
    pub state_dim: usize,
    pub time_dim: usize,
    pub arch: Arch,
}

/// Raw logits `[K, |A|]` for one sequence. MASK is not an output token.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub logits: NumArray,
}

/// Sinusoidal embedding of the diffusion step.
pub fn time_embedding(n: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out[2 * i] = (n as f64 * freq).sin();
        out[2 * i + 1] = (n as f64 * freq).cos();
    }
    out
}

const FILM: [&str; 3] = ["shift", "scale", "gate"];

impl DenoiserSpec {
    fn cond_dim(&self) -> usize {
        self.time_dim + self.state_dim
    }

    fn validate(&self) -> Result<()> {
        let positive = match self.arch {
            Arch::Transformer { d_model, ff_hidden, .. } => d_model > 0 && ff_hidden > 0,
            Arch::Mlp { hidden, .. } => hidden > 0,
        };
        if self.seq_len == 0 || self.cond_dim() == 0 || !positive {
            return Err(Error::Shape(format!("denoiser dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new();
        let a = self.vocab.size();
        let c = self.cond_dim();
        match self.arch {
            Arch::Transformer { d_model: d, n_blocks, ff_hidden, pos_emb } => {
                s.insert("den.tok", super::fan_in_uniform(d, a + 1, rng).reshaped(vec![a + 1, d])?);
                if pos_emb {
                    s.insert("den.pos", super::fan_in_uniform(d, self.seq_len, rng).reshaped(vec![self.seq_len, d])?);
                }
                for b in 0..n_blocks {
                    for part in ["attn", "ff"] {
                        for f in FILM {
                            insert_linear(&mut s, &format!("den.b{b}.{part}_{f}"), c, d, true, rng);
                        }
                    }
                    for proj in ["q", "k", "v", "o"] {
                        insert_linear(&mut s, &format!("den.b{b}.{proj}"), d, d, false, rng);
                    }
                    insert_linear(&mut s, &format!("den.b{b}.ff1"), d, ff_hidden, false, rng);
                    insert_linear(&mut s, &format!("den.b{b}.ff2"), ff_hidden, d, false, rng);
                }
                insert_linear(&mut s, "den.final_shift", c, d, true, rng);
                insert_linear(&mut s, "den.final_scale", c, d, true, rng);
                insert_linear(&mut s, "den.out", d, a, false, rng);
            }
            Arch::Mlp { hidden, layers } => {
                if layers > 0 {
                    let mut fan_in = self.seq_len * (a + 1);
                    for l in 0..layers {
                        insert_linear(&mut s, &format!("den.l{l}"), fan_in, hidden, false, rng);
                        insert_linear(&mut s, &format!("den.l{l}_shift"), c, hidden, true, rng);
                        insert_linear(&mut s, &format!("den.l{l}_scale"), c, hidden, true, rng);
                        fan_in = hidden;
                    }
                    insert_linear(&mut s, "den.out", hidden, self.seq_len * a, false, rng);
                }
            }
        }
        Ok(s)
    }

    fn check_inputs(&self, seqs: &[&MaskedSeq], steps: &[usize], states: &[&[f64]]) -> Result<()> {
        if seqs.len() != steps.len() || seqs.len() != states.len() || seqs.is_empty() {
            return Err(Error::Shape(format!(
                "batch sizes differ or empty: {} seqs, {} steps, {} states",
                seqs.len(),
                steps.len(),
                states.len()
            )));
        }
        for (seq, st) in seqs.iter().zip(states) {
            if seq.len() != self.seq_len || seq.vocab() != self.vocab {
                return Err(Error::Shape(format!(
                    "sequence of length {} over {} tokens, expected {} over {}",
                    seq.len(),
                    seq.vocab().size(),
                    self.seq_len,
                    self.vocab.size()
                )));
            }
            if st.len() != self.state_dim {
                return Err(Error::Shape(format!(
                    "state has {} features, expected {}",
                    st.len(),
                    self.state_dim
                )));
            }
        }
        Ok(())
    }

    fn cond_matrix(&self, steps: &[usize], states: &[&[f64]]) -> NumArray {
        let mut data = Vec::with_capacity(steps.len() * self.cond_dim());
        for (&n, st) in steps.iter().zip(states) {
            data.extend(time_embedding(n, self.time_dim));
            data.extend_from_slice(st);
        }
        NumArray::new(vec![steps.len(), self.cond_dim()], data).unwrap()
    }

    /// Batched forward pass; returns logits `[B*K, |A|]`, rows grouped by sequence.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, '_>,
        seqs: &[&MaskedSeq],
        steps: &[usize],
        states: &[&[f64]],
    ) -> Result<Var<'t>> {
        self.check_inputs(seqs, steps, states)?;
        let tape = p.tape();
        let k = self.seq_len;
        let a = self.vocab.size();
        let b = seqs.len();
        let cond = tape.constant(self.cond_matrix(steps, states));
        let film = |name: &str| -> Result<Var<'t>> { Ok(p.linear(name, cond)?.repeat_rows(k)) };
        let modulate = |h: Var<'t>, prefix: &str| -> Result<Var<'t>> {
            let shift = film(&format!("{prefix}_shift"))?;
            let scale = film(&format!("{prefix}_scale"))?;
            Ok(h.layer_norm() * scale.shift(1.0) + shift)
        };
        match self.arch {
            Arch::Transformer { n_blocks, pos_emb, .. } => {
                let idx: Vec<usize> = seqs.iter().flat_map(|s| s.tokens().iter().copied()).collect();
                let mut x = p.get("den.tok")?.gather_rows(&idx);
                if pos_emb {
                    let pos: Vec<usize> = (0..b).flat_map(|_| 0..k).collect();
                    x = x + p.get("den.pos")?.gather_rows(&pos);
                }
                for blk in 0..n_blocks {
                    let pre = format!("den.b{blk}");
                    let h = modulate(x, &format!("{pre}.attn"))?;
                    let q = p.linear(&format!("{pre}.q"), h)?;
                    let kk = p.linear(&format!("{pre}.k"), h)?;
                    let v = p.linear(&format!("{pre}.v"), h)?;
                    let att = p.linear(&format!("{pre}.o"), q.seq_attention(kk, v, k))?;
                    x = x + att * film(&format!("{pre}.attn_gate"))?.shift(1.0);
                    let h = modulate(x, &format!("{pre}.ff"))?;
                    let f = p.linear(&format!("{pre}.ff2"), p.linear(&format!("{pre}.ff1"), h)?.silu())?;
                    x = x + f * film(&format!("{pre}.ff_gate"))?.shift(1.0);
                }
                let h = modulate(x, "den.final")?;
                p.linear("den.out", h)
            }
            Arch::Mlp { layers, .. } => {
                if layers == 0 {
                    return Ok(tape.constant(NumArray::zeros(vec![b * k, a])));
                }
                let width = k * (a + 1);
                let mut onehot = vec![0.0; b * width];
                for (i, s) in seqs.iter().enumerate() {
                    for (pos, &t) in s.tokens().iter().enumerate() {
                        onehot[i * width + pos * (a + 1) + t] = 1.0;
                    }
                }
                let mut x = tape.constant(NumArray::new(vec![b, width], onehot)?);
                for l in 0..layers {
                    let z = p.linear(&format!("den.l{l}"), x)?;
                    let shift = p.linear(&format!("den.l{l}_shift"), cond)?;
                    let scale = p.linear(&format!("den.l{l}_scale"), cond)?;
                    x = (z.layer_norm() * scale.shift(1.0) + shift).silu();
                }
                Ok(p.linear("den.out", x)?.reshape(b * k, a))
            }
        }
    }

    /// Logits for a batch without recording gradients for later use.
    pub fn logits_batch(
        &self,
        params: &ParamStore,
        seqs: &[&MaskedSeq],
        steps: &[usize],
        states: &[&[f64]],
    ) -> Result<NumArray> {
        let tape = Tape::new();
        let p = tape.bind(params, false);
        let out = self.forward(&p, seqs, steps, states)?;
        Ok((*out.value()).clone())
    }
}

/// Fresh parameters for `spec`.
pub fn init_params<R: Rng + ?Sized>(spec: &DenoiserSpec, rng: &mut R) -> Result<ParamStore> {
    spec.init(rng)
}

/// Forward pass for a single sequence.
pub fn denoiser_forward(
    spec: &DenoiserSpec,
    params: &ParamStore,
    a_n: &MaskedSeq,
    n: usize,
    s: &[f64],
) -> Result<DenoiserOutput> {
    let logits = spec.logits_batch(params, &[a_n], &[n], &[s])?;
    Ok(DenoiserOutput { logits: logits.reshaped(vec![spec.seq_len, spec.vocab.size()])? })
}

/// Clean-sequence estimate: softmax rows at masked positions, one-hot copies
/// of the existing token elsewhere.
pub fn mu_theta(out: &DenoiserOutput, a_n: &MaskedSeq) -> Result<NumArray> {
    let l = &out.logits;
    if l.rows() != a_n.len() || l.cols() != a_n.vocab().size() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match a sequence of length {} over {} tokens",
            l.shape(),
            a_n.len(),
            a_n.vocab().size()
        )));
    }
    let a = l.cols();
    let mut data = Vec::with_capacity(l.len());
    for (k, &t) in a_n.tokens().iter().enumerate() {
        if a_n.is_masked(k) {
            data.extend(softmax_row(l.row_slice(k)));
        } else {
            data.extend((0..a).map(|j| if j == t { 1.0 } else { 0.0 }));
        }
    }
    NumArray::new(vec![a_n.len(), a], data)
}
