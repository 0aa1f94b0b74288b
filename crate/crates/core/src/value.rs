//! Policy evaluation over macro-actions: replay, bootstrapped TD targets,
//! advantage batches and target-network averaging.

use std::sync::Mutex;

use rand::seq::index;
use rand::Rng;

use crate::diffusion::{DiffusionModel, SamplerConfig};
use crate::error::{invalid, Error, Result};
use crate::net::{qnet_batch, qnet_values, ParamStore, QNetSpec, Tape};
use crate::pmd::PmdBatch;
use crate::schedule::MaskedSeq;

pub const DEFAULT_GAMMA: f64 = 0.997;
pub const DEFAULT_TAU: f64 = 0.005;
pub const DEFAULT_M_BOOT: usize = 4;

/// One executed macro-action. `reward` is the discounted within-macro sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: MaskedSeq,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

impl Transition {
    pub fn new(state: Vec<f64>, action: MaskedSeq, reward: f64, next_state: Vec<f64>, done: bool) -> Result<Self> {
        if !reward.is_finite() {
            return Err(Error::NonFinite(format!("reward {reward}")));
        }
        action.ensure_clean()?;
        Ok(Self { state, action, reward, next_state, done })
    }
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid!("replay capacity must be positive"));
        }
        Ok(Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), cursor: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, tr: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(tr);
        } else {
            self.items[self.cursor] = tr;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// `n` uniform draws: without replacement when `n ≤ len`, with replacement otherwise.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let len = self.items.len();
        Ok(if n <= len {
            index::sample(rng, len, n).into_iter().map(|i| self.items[i].clone()).collect()
        } else {
            (0..n).map(|_| self.items[rng.gen_range(0..len)].clone()).collect()
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Replay buffer shared between actor threads and the learner.
#[derive(Debug)]
pub struct SharedReplay(Mutex<ReplayBuffer>);

impl SharedReplay {
    pub fn new(buffer: ReplayBuffer) -> Self {
        Self(Mutex::new(buffer))
    }

    pub fn push(&self, tr: Transition) {
        self.0.lock().unwrap().push(tr);
    }

    pub fn push_all(&self, trs: impl IntoIterator<Item = Transition>) {
        let mut b = self.0.lock().unwrap();
        for tr in trs {
            b.push(tr);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        self.0.lock().unwrap().sample(n, rng)
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_inner(self) -> ReplayBuffer {
        self.0.into_inner().unwrap()
    }
}

/// Q-network, diffusion policy and sampler used to bootstrap and score actions.
#[derive(Clone, Copy, Debug)]
pub struct Critic<'a> {
    pub qspec: &'a QNetSpec,
    pub model: &'a DiffusionModel,
    pub sampler: &'a SamplerConfig,
    /// Score only the first element of each sampled sequence (planner mode).
    pub commit_first: bool,
}

impl Critic<'_> {
    fn score(&self, q_params: &ParamStore, states: &[&[f64]], actions: &[&MaskedSeq]) -> Result<Vec<f64>> {
        if !self.commit_first {
            return qnet_values(self.qspec, q_params, states, actions);
        }
        let firsts: Vec<MaskedSeq> = actions.iter().map(|a| first_element(a)).collect::<Result<_>>()?;
        let refs: Vec<&MaskedSeq> = firsts.iter().collect();
        qnet_values(self.qspec, q_params, states, &refs)
    }

    /// `r` if done or `γ = 0`, else `r + γ · mean_j Q_target(s', a'_j)` with
    /// `a'_j ~ π(·|s')`. All non-terminal transitions share one sampler call.
    pub fn q_targets<R: Rng + ?Sized>(
        &self,
        batch: &[Transition],
        target_q: &ParamStore,
        policy: &ParamStore,
        m_boot: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if m_boot == 0 {
            return Err(invalid!("need at least one bootstrap action"));
        }
        let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].done && gamma != 0.0).collect();
        let mut out: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        if live.is_empty() {
            return Ok(out);
        }
        let states: Vec<&[f64]> =
            live.iter().flat_map(|&i| std::iter::repeat(&batch[i].next_state[..]).take(m_boot)).collect();
        let trajs = self.model.sample_batch(policy, &states, self.sampler, rng)?;
        let actions: Vec<&MaskedSeq> = trajs.iter().map(|t| t.clean()).collect();
        let q = self.score(target_q, &states, &actions)?;
        for (j, &i) in live.iter().enumerate() {
            let boot = q[j * m_boot..(j + 1) * m_boot].iter().sum::<f64>() / m_boot as f64;
            out[i] += gamma * boot;
        }
        Ok(out)
    }

    pub fn q_target<R: Rng + ?Sized>(
        &self,
        tr: &Transition,
        target_q: &ParamStore,
        policy: &ParamStore,
        m_boot: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<f64> {
        Ok(self.q_targets(std::slice::from_ref(tr), target_q, policy, m_boot, gamma, rng)?[0])
    }

    /// For each state, samples `m` actions from `policy` and scores them with
    /// `q_params`. Advantages use the mean baseline, weights are `softmax(q/λ)`.
    pub fn advantages<R: Rng + ?Sized>(
        &self,
        states: &[Vec<f64>],
        q_params: &ParamStore,
        policy: &ParamStore,
        m: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Vec<PmdBatch>> {
        if m < 2 {
            return Err(invalid!("advantage batches need at least two actions, got {m}"));
        }
        let flat: Vec<&[f64]> = states.iter().flat_map(|s| std::iter::repeat(&s[..]).take(m)).collect();
        let mut trajs = self.model.sample_batch(policy, &flat, self.sampler, rng)?;
        let actions: Vec<&MaskedSeq> = trajs.iter().map(|t| t.clean()).collect();
        let q = self.score(q_params, &flat, &actions)?;
        let mut out = Vec::with_capacity(states.len());
        for (i, s) in states.iter().enumerate().rev() {
            let chunk: Vec<_> = trajs.drain(i * m..).collect();
            let acts = chunk.iter().map(|t| t.clean().clone()).collect();
            let b = PmdBatch::new(s.clone(), acts, q[i * m..(i + 1) * m].to_vec(), lambda)?.with_trajectories(chunk)?;
            out.push(b);
        }
        out.reverse();
        Ok(out)
    }

    pub fn advantages_for<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        q_params: &ParamStore,
        policy: &ParamStore,
        m: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<PmdBatch> {
        Ok(self.advantages(&[state.to_vec()], q_params, policy, m, lambda, rng)?.pop().unwrap())
    }
}

/// The length-1 sequence holding the first element of `a`.
pub fn first_element(a: &MaskedSeq) -> Result<MaskedSeq> {
    MaskedSeq::new(a.tokens()[..1].to_vec(), a.vocab())
}

/// Mean squared error between `Q(s, a)` and `targets`; gradients are added to `q_params`.
pub fn td_loss(qspec: &QNetSpec, q_params: &mut ParamStore, batch: &[Transition], targets: &[f64]) -> Result<f64> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(invalid!("{} transitions for {} targets", batch.len(), targets.len()));
    }
    let snapshot = q_params.clone();
    let tape = Tape::new();
    let p = tape.bind(&snapshot, true);
    let states: Vec<&[f64]> = batch.iter().map(|t| &t.state[..]).collect();
    let actions: Vec<&MaskedSeq> = batch.iter().map(|t| &t.action).collect();
    let pred = qnet_batch(qspec, &p, &states, &actions)?;
    let target = tape.constant(crate::net::NumArray::new(vec![targets.len(), 1], targets.to_vec())?);
    let diff = pred - target;
    let loss = (diff * diff).mean();
    tape.backward(loss).accumulate_into(p.slot(), q_params)?;
    Ok(loss.scalar())
}

/// `target ← (1 − τ) target + τ online`, elementwise.
pub fn polyak_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid!("tau must be in [0, 1], got {tau}"));
    }
    if !target.same_layout(online) {
        return Err(Error::Shape("target and online parameters differ in layout".into()));
    }
    let names: Vec<String> = online.names().cloned().collect();
    for name in names {
        let src = online.value(&name)?.data();
        let dst = target.value_mut(&name)?.data_mut();
        if tau == 1.0 {
            dst.copy_from_slice(src);
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (1.0 - tau) * *d + tau * s;
            }
        }
    }
    Ok(())
}
