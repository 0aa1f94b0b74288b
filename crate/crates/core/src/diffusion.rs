//! The learned reverse process.
//!
//! A reverse step from `a^n` unmasks each MASK position independently with
//! probability `ᾱ_n`, drawing its token from `μ_θ(a^n, n, s)`; unmasked
//! positions are copied. The remask sampler follows each step with an
//! independent re-mask of every unmasked position with probability
//! `η (1 − α_{n−1})` (zero at the last step).

use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::error::{invalid, Error, Result};
use crate::net::{softmax_row, Bound, DenoiserSpec, NumArray, ParamStore, Tape, Var};
use crate::schedule::{forward_mask, MaskedSeq, NoiseSchedule};

/// Largest K for which exact_n enumerates every mask pattern.
pub const EXACT_ENUM_MAX_K: usize = 4;
/// Largest K accepted by exact_n (Monte-Carlo over mask patterns above 4).
pub const EXACT_MAX_K: usize = 12;
/// Mask draws per step in exact_n mode when K > 4.
pub const EXACT_MC_DRAWS: usize = 256;
const EXACT_MC_SEED: u64 = 0x6d61_736b;

/// A denoiser architecture together with its noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub spec: DenoiserSpec,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    Ancestral,
    TopP,
    Remask,
}

impl FromStr for SamplerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "top_p" => Ok(Self::TopP),
            "remask" => Ok(Self::Remask),
            other => Err(Error::Config(format!("unknown sampler mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub top_p: f64,
    pub remask_eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Ancestral, top_p: 0.98, remask_eta: 0.0 }
    }
}

impl SamplerConfig {
    pub fn ancestral() -> Self {
        Self::default()
    }

    pub fn top_p(p: f64) -> Self {
        Self { mode: SamplerMode::TopP, top_p: p, ..Self::default() }
    }

    pub fn remask(eta: f64) -> Self {
        Self { mode: SamplerMode::Remask, remask_eta: eta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if !(0.0..1.0).contains(&self.remask_eta) {
            return Err(invalid!("remask_eta must be in [0, 1), got {}", self.remask_eta));
        }
        Ok(())
    }

    fn eta(&self) -> f64 {
        if self.mode == SamplerMode::Remask {
            self.remask_eta
        } else {
            0.0
        }
    }
}

/// Re-mask probability applied after the unmasking phase of step `n`.
pub fn remask_prob(schedule: &NoiseSchedule, n: usize, eta: f64) -> f64 {
    if n <= 1 {
        0.0
    } else {
        eta * (1.0 - schedule.alpha(n - 1))
    }
}

/// One sampled reverse chain.
///
/// `states[n]` is `a^n`: `states[N]` is all-MASK and `states[0]` is the clean
/// action. `step_log_probs[n - 1]` is `log p(a^{n-1} | a^n, s)` for the
/// transition taken at step `n`, under the unfiltered model that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseTrajectory {
    pub states: Vec<MaskedSeq>,
    pub step_log_probs: Vec<f64>,
    pub remask_eta: f64,
}

impl ReverseTrajectory {
    pub fn n_steps(&self) -> usize {
        self.step_log_probs.len()
    }

    pub fn clean(&self) -> &MaskedSeq {
        &self.states[0]
    }

    pub fn total_log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.step_log_probs.len();
        if n == 0 || self.states.len() != n + 1 {
            return Err(invalid!(
                "trajectory has {} states for {} steps",
                self.states.len(),
                n
            ));
        }
        if !self.states[n].is_all_masked() || !self.states[0].is_clean() {
            return Err(invalid!("trajectory must run from all-MASK to a clean sequence"));
        }
        Ok(())
    }
}

/// Nucleus filter: keeps the shortest probability-descending prefix (ties by
/// lower id) with mass ≥ `p` and renormalizes.
pub fn top_p_filter(row: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return row.to_vec();
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; row.len()];
    let mut cum = 0.0;
    for &i in &order {
        out[i] = row[i];
        cum += row[i];
        if cum >= p {
            break;
        }
    }
    out.iter_mut().for_each(|v| *v /= cum);
    out
}

fn sample_categorical<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let total: f64 = row.iter().sum();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            cum += p / total;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// Exact log-probability of the step `a_n → a_prev` given per-position
/// distributions `mu` (rows `[K, |A|]`, only masked rows are read),
/// unmask probability `abar` and re-mask probability `remask`.
pub fn transition_log_prob(
    mu: &NumArray,
    a_n: &MaskedSeq,
    a_prev: &MaskedSeq,
    abar: f64,
    remask: f64,
) -> f64 {
    let mut lp = 0.0;
    for k in 0..a_n.len() {
        let p = match (a_n.is_masked(k), a_prev.is_masked(k)) {
            (true, true) => (1.0 - abar) + abar * remask,
            (true, false) => abar * mu.at(k, a_prev.tokens()[k]) * (1.0 - remask),
            (false, true) => remask,
            (false, false) => {
                if a_n.tokens()[k] == a_prev.tokens()[k] {
                    1.0 - remask
                } else {
                    0.0
                }
            }
        };
        lp += p.ln();
    }
    lp
}

/// Applies one reverse step given the model's per-position distributions.
fn apply_step<R: Rng + ?Sized>(
    mu: &NumArray,
    a_n: &MaskedSeq,
    abar: f64,
    remask: f64,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> (MaskedSeq, f64) {
    let mut out = a_n.clone();
    for k in 0..a_n.len() {
        if !a_n.is_masked(k) {
            continue;
        }
        let u: f64 = rng.gen();
        if u < abar {
            let row = mu.row_slice(k);
            let tok = if cfg.mode == SamplerMode::TopP {
                sample_categorical(&top_p_filter(row, cfg.top_p), rng)
            } else {
                sample_categorical(row, rng)
            };
            out.set(k, tok);
        }
    }
    if remask > 0.0 {
        for k in 0..out.len() {
            if !out.is_masked(k) && rng.gen::<f64>() < remask {
                out.mask(k);
            }
        }
    }
    let lp = transition_log_prob(mu, a_n, &out, abar, remask);
    (out, lp)
}

/// Row-wise softmax of a logits array.
pub fn softmax_rows(logits: &NumArray) -> NumArray {
    let mut data = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        data.extend(softmax_row(logits.row_slice(r)));
    }
    NumArray::new(logits.shape().to_vec(), data).unwrap()
}

fn block(rows: &NumArray, i: usize, k: usize) -> NumArray {
    let c = rows.cols();
    NumArray::new(vec![k, c], rows.data()[i * k * c..(i + 1) * k * c].to_vec()).unwrap()
}

impl DiffusionModel {
    pub fn new(spec: DenoiserSpec, schedule: NoiseSchedule) -> Self {
        Self { spec, schedule }
    }

    pub fn n_steps(&self) -> usize {
        self.schedule.n_steps()
    }

    /// Per-position `μ_θ` rows for a batch, `[B*K, |A|]` (softmax of logits;
    /// rows at unmasked positions are unused by the samplers).
    fn mu_batch(
        &self,
        params: &ParamStore,
        seqs: &[&MaskedSeq],
        steps: &[usize],
        states: &[&[f64]],
    ) -> Result<NumArray> {
        Ok(softmax_rows(&self.spec.logits_batch(params, seqs, steps, states)?))
    }

    fn check_step(&self, n: usize) -> Result<f64> {
        self.schedule.abar(n)
    }

    /// One ancestral (or top-p) reverse step. The returned log-probability
    /// is under the unfiltered model.
    pub fn reverse_step<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        a_n: &MaskedSeq,
        n: usize,
        s: &[f64],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<(MaskedSeq, f64)> {
        cfg.validate()?;
        let abar = self.check_step(n)?;
        if a_n.is_clean() {
            return Ok((a_n.clone(), 0.0));
        }
        let mu = self.mu_batch(params, &[a_n], &[n], &[s])?;
        let plain = match cfg.mode {
            SamplerMode::Remask => SamplerConfig { mode: SamplerMode::Ancestral, ..*cfg },
            _ => *cfg,
        };
        Ok(apply_step(&mu, a_n, abar, 0.0, &plain, rng))
    }

    /// Reverse step followed by independent re-masking.
    pub fn remask_step<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        a_n: &MaskedSeq,
        n: usize,
        s: &[f64],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<MaskedSeq> {
        cfg.validate()?;
        if cfg.mode != SamplerMode::Remask {
            return Err(invalid!("remask_step needs sampler mode remask"));
        }
        let abar = self.check_step(n)?;
        let r = remask_prob(&self.schedule, n, cfg.remask_eta);
        let mu = if a_n.is_clean() {
            NumArray::zeros(vec![a_n.len(), a_n.vocab().size()])
        } else {
            self.mu_batch(params, &[a_n], &[n], &[s])?
        };
        Ok(apply_step(&mu, a_n, abar, r, cfg, rng).0)
    }

    /// Runs one reverse chain per state, batching the denoiser across chains.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        states: &[&[f64]],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<Vec<ReverseTrajectory>> {
        cfg.validate()?;
        let n_steps = self.n_steps();
        let eta = cfg.eta();
        let start = MaskedSeq::all_masked(self.spec.seq_len, self.spec.vocab);
        let mut chains: Vec<Vec<MaskedSeq>> = vec![vec![start]; states.len()];
        let mut logps: Vec<Vec<f64>> = vec![Vec::with_capacity(n_steps); states.len()];
        let zeros = NumArray::zeros(vec![self.spec.seq_len, self.spec.vocab.size()]);
        for n in (1..=n_steps).rev() {
            let abar = self.schedule.abar(n)?;
            let r = remask_prob(&self.schedule, n, eta);
            let active: Vec<usize> =
                (0..states.len()).filter(|&i| !chains[i].last().unwrap().is_clean()).collect();
            let mu = if active.is_empty() {
                None
            } else {
                let seqs: Vec<&MaskedSeq> = active.iter().map(|&i| chains[i].last().unwrap()).collect();
                let st: Vec<&[f64]> = active.iter().map(|&i| states[i]).collect();
                Some(self.mu_batch(params, &seqs, &vec![n; active.len()], &st)?)
            };
            let mut next_active = 0;
            for i in 0..states.len() {
                let a_n = chains[i].last().unwrap().clone();
                let rows = if next_active < active.len() && active[next_active] == i {
                    next_active += 1;
                    block(mu.as_ref().unwrap(), next_active - 1, self.spec.seq_len)
                } else {
                    zeros.clone()
                };
                let (a_prev, lp) = apply_step(&rows, &a_n, abar, r, cfg, rng);
                chains[i].push(a_prev);
                logps[i].push(lp);
            }
        }
        Ok(chains
            .into_iter()
            .zip(logps)
            .map(|(mut c, mut l)| {
                c.reverse();
                l.reverse();
                ReverseTrajectory { states: c, step_log_probs: l, remask_eta: eta }
            })
            .collect())
    }

    /// Samples a clean action from the all-MASK prior.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        s: &[f64],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<(MaskedSeq, ReverseTrajectory)> {
        let traj = self.sample_batch(params, &[s], cfg, rng)?.pop().unwrap();
        Ok((traj.clean().clone(), traj))
    }

    /// Noisy-input cross-entropy terms whose weighted sum is the ELBO of `a0`.
    pub fn elbo_terms<'a, R: Rng + ?Sized>(
        &self,
        a0: &'a MaskedSeq,
        s: &'a [f64],
        mode: ElboMode,
        rng: &mut R,
    ) -> Result<Vec<CeTerm<'a>>> {
        if !a0.is_clean() {
            return Err(invalid!("ELBO needs a clean action"));
        }
        let big_n = self.n_steps();
        let k = a0.len();
        let mut terms = Vec::new();
        match mode {
            ElboMode::Mc => {
                let n = rng.gen_range(1..=big_n);
                let noisy = forward_mask(a0, n, &self.schedule, rng)?;
                let w = big_n as f64 * self.schedule.abar(n)?;
                if noisy.n_masked() > 0 {
                    terms.push(CeTerm { noisy, n, clean: a0, state: s, weight: w });
                }
            }
            ElboMode::ExactN if k <= EXACT_ENUM_MAX_K => {
                for n in 1..=big_n {
                    let abar = self.schedule.abar(n)?;
                    let (keep, drop) = self.schedule.marginal(n);
                    for bits in 1u32..(1 << k) {
                        let mut noisy = a0.clone();
                        let mut prob = 1.0;
                        for pos in 0..k {
                            if bits >> pos & 1 == 1 {
                                noisy.mask(pos);
                                prob *= drop;
                            } else {
                                prob *= keep;
                            }
                        }
                        if prob > 0.0 {
                            terms.push(CeTerm { noisy, n, clean: a0, state: s, weight: abar * prob });
                        }
                    }
                }
            }
            ElboMode::ExactN if k <= EXACT_MAX_K => {
                let mut fixed = crate::Rng::seed_from_u64(EXACT_MC_SEED);
                for n in 1..=big_n {
                    let w = self.schedule.abar(n)? / EXACT_MC_DRAWS as f64;
                    for _ in 0..EXACT_MC_DRAWS {
                        let noisy = forward_mask(a0, n, &self.schedule, &mut fixed)?;
                        if noisy.n_masked() > 0 {
                            terms.push(CeTerm { noisy, n, clean: a0, state: s, weight: w });
                        }
                    }
                }
            }
            ElboMode::ExactN => {
                return Err(Error::RefusedScale(format!("exact ELBO needs K ≤ {EXACT_MAX_K}, got {k}")))
            }
        }
        Ok(terms)
    }

    /// `Σ_i w_i Σ_{k masked in noisy_i} log μ_θ(noisy_i, n_i, s_i)_{clean_i,k}` on the tape.
    pub fn weighted_ce<'t>(&self, p: &Bound<'t, '_>, terms: &[CeTerm<'_>]) -> Result<Var<'t>> {
        if terms.is_empty() {
            return Ok(p.tape().scalar(0.0));
        }
        let seqs: Vec<&MaskedSeq> = terms.iter().map(|t| &t.noisy).collect();
        let steps: Vec<usize> = terms.iter().map(|t| t.n).collect();
        let states: Vec<&[f64]> = terms.iter().map(|t| t.state).collect();
        let logp = self.spec.forward(p, &seqs, &steps, &states)?.log_softmax();
        let k = self.spec.seq_len;
        let a = self.spec.vocab.size();
        let mut picks = Vec::new();
        for (i, t) in terms.iter().enumerate() {
            if !t.clean.is_clean() {
                return Err(invalid!("cross-entropy target contains MASK"));
            }
            for pos in 0..k {
                if t.noisy.is_masked(pos) {
                    picks.push((0, (i * k + pos) * a + t.clean.tokens()[pos], t.weight));
                }
            }
        }
        Ok(logp.reshape(1, terms.len() * k * a).sparse_sum(1, picks))
    }

    /// ELBO `ℓ(a0, s; θ)`, a nonpositive lower bound on `log π_θ(a0 | s)`.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        a0: &MaskedSeq,
        s: &[f64],
        mode: ElboMode,
        rng: &mut R,
    ) -> Result<f64> {
        let terms = self.elbo_terms(a0, s, mode, rng)?;
        let tape = Tape::new();
        let p = tape.bind(params, false);
        Ok(self.weighted_ce(&p, &terms)?.scalar())
    }

    /// Deterministic exact_n ELBO (no caller RNG needed).
    pub fn elbo_exact(&self, params: &ParamStore, a0: &MaskedSeq, s: &[f64]) -> Result<f64> {
        let mut unused = crate::seeded_rng(0);
        self.elbo(params, a0, s, ElboMode::ExactN, &mut unused)
    }

    /// `log π_θ(a0 | s)` by dynamic programming over the set of unmasked
    /// positions (tokens pinned to `a0`). Requires K ≤ 4 and N ≤ 4.
    pub fn exact_log_likelihood(&self, params: &ParamStore, a0: &MaskedSeq, s: &[f64]) -> Result<f64> {
        let k = a0.len();
        let big_n = self.n_steps();
        if k > 4 || big_n > 4 {
            return Err(Error::RefusedScale(format!("exact likelihood needs K ≤ 4 and N ≤ 4, got K={k}, N={big_n}")));
        }
        if !a0.is_clean() {
            return Err(invalid!("exact likelihood needs a clean action"));
        }
        let full = (1usize << k) - 1;
        let seq_for = |unmasked: usize| {
            let mut seq = a0.clone();
            for pos in 0..k {
                if unmasked >> pos & 1 == 0 {
                    seq.mask(pos);
                }
            }
            seq
        };
        let mut mass = vec![0.0; full + 1];
        mass[0] = 1.0;
        for n in (1..=big_n).rev() {
            let abar = self.schedule.abar(n)?;
            let live: Vec<usize> = (0..full).filter(|&u| mass[u] > 0.0).collect();
            let mut next = vec![0.0; full + 1];
            next[full] = mass[full];
            if !live.is_empty() {
                let seqs: Vec<MaskedSeq> = live.iter().map(|&u| seq_for(u)).collect();
                let refs: Vec<&MaskedSeq> = seqs.iter().collect();
                let mu = self.mu_batch(params, &refs, &vec![n; live.len()], &vec![s; live.len()])?;
                for (i, &u) in live.iter().enumerate() {
                    let masked = full & !u;
                    // iterate over subsets of the masked positions that unmask now
                    let mut sub = masked;
                    loop {
                        let mut p = mass[u];
                        for pos in 0..k {
                            if masked >> pos & 1 == 1 {
                                p *= if sub >> pos & 1 == 1 {
                                    abar * mu.at(i * k + pos, a0.tokens()[pos])
                                } else {
                                    1.0 - abar
                                };
                            }
                        }
                        next[u | sub] += p;
                        if sub == 0 {
                            break;
                        }
                        sub = (sub - 1) & masked;
                    }
                }
            }
            mass = next;
        }
        Ok(mass[full].ln())
    }

    /// Differentiable per-step log-probabilities of a recorded trajectory.
    pub fn trajectory_eval<'t>(
        &self,
        p: &Bound<'t, '_>,
        traj: &ReverseTrajectory,
        s: &[f64],
    ) -> Result<StepEval<'t>> {
        traj.validate()?;
        let big_n = traj.n_steps();
        if big_n != self.n_steps() {
            return Err(invalid!("trajectory has {} steps, model has {}", big_n, self.n_steps()));
        }
        let k = self.spec.seq_len;
        let a = self.spec.vocab.size();
        let seqs: Vec<&MaskedSeq> = (1..=big_n).map(|n| &traj.states[n]).collect();
        let steps: Vec<usize> = (1..=big_n).collect();
        let log_mu = self.spec.forward(p, &seqs, &steps, &vec![s; big_n])?.log_softmax();
        let mut consts = vec![0.0; big_n];
        let mut picks = Vec::new();
        let mut kl_weights = vec![0.0; big_n * k];
        for n in 1..=big_n {
            let abar = self.schedule.abar(n)?;
            let r = remask_prob(&self.schedule, n, traj.remask_eta);
            let (a_n, a_prev) = (&traj.states[n], &traj.states[n - 1]);
            for pos in 0..k {
                let row = (n - 1) * k + pos;
                let c = match (a_n.is_masked(pos), a_prev.is_masked(pos)) {
                    (true, true) => (1.0 - abar) + abar * r,
                    (true, false) => {
                        picks.push((n - 1, row * a + a_prev.tokens()[pos], 1.0));
                        abar * (1.0 - r)
                    }
                    (false, true) => r,
                    (false, false) if a_n.tokens()[pos] == a_prev.tokens()[pos] => 1.0 - r,
                    (false, false) => 0.0,
                };
                consts[n - 1] += c.ln();
                if a_n.is_masked(pos) {
                    kl_weights[row] = abar * (1.0 - r);
                }
            }
        }
        let log_probs = log_mu.reshape(1, big_n * k * a).sparse_sum(big_n, picks)
            + p.tape().constant(NumArray::row(consts));
        Ok(StepEval { log_probs, log_mu, kl_weights, n_steps: big_n })
    }
}

/// Per-step quantities of one trajectory on a tape.
pub struct StepEval<'t> {
    /// `[1, N]`; entry `n - 1` is `log p(a^{n-1} | a^n, s)`.
    pub log_probs: Var<'t>,
    /// `[N*K, |A|]` log-softmax rows of the denoiser at each `(a^n, n)`.
    pub log_mu: Var<'t>,
    /// Per-row weight of the categorical KL for that step (zero at unmasked positions).
    pub kl_weights: Vec<f64>,
    pub n_steps: usize,
}

impl<'t> StepEval<'t> {
    /// `[1, N]` exact per-step KL between this model's reverse kernel and `other`'s.
    pub fn kl_to(&self, other: &StepEval<'t>) -> Var<'t> {
        let diff = self.log_mu - other.log_mu;
        let elem = self.log_mu.exp() * diff;
        let a = elem.cols();
        let k = self.kl_weights.len() / self.n_steps;
        let mut terms = Vec::new();
        for (row, &w) in self.kl_weights.iter().enumerate() {
            if w != 0.0 {
                for j in 0..a {
                    terms.push((row / k, row * a + j, w));
                }
            }
        }
        elem.reshape(1, self.kl_weights.len() * a).sparse_sum(self.n_steps, terms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElboMode {
    /// Exact expectation over mask patterns (K ≤ 4), fixed-seed Monte-Carlo
    /// with 256 draws per step for 4 < K ≤ 12.
    ExactN,
    /// One step and one mask draw, scaled by N.
    Mc,
}

impl FromStr for ElboMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_n" => Ok(Self::ExactN),
            "mc" => Ok(Self::Mc),
            other => Err(Error::Config(format!("unknown ELBO mode '{other}'"))),
        }
    }
}

/// One weighted cross-entropy term: predict `clean` at the masked positions
/// of `noisy` at step `n`.
#[derive(Clone, Debug)]
pub struct CeTerm<'a> {
    pub noisy: MaskedSeq,
    pub n: usize,
    pub clean: &'a MaskedSeq,
    pub state: &'a [f64],
    pub weight: f64,
}

/// `(a^n, n, a^0)` for `n = 1..N` taken from a sampled trajectory.
pub fn onpolicy_pairs(traj: &ReverseTrajectory) -> Vec<(MaskedSeq, usize, MaskedSeq)> {
    (1..traj.states.len())
        .map(|n| (traj.states[n].clone(), n, traj.states[0].clone()))
        .collect()
}

/// ELBO-style terms built from on-policy pairs, weighted by `ᾱ_n * weight`.
pub fn onpolicy_terms<'a>(
    schedule: &NoiseSchedule,
    traj: &'a ReverseTrajectory,
    s: &'a [f64],
    weight: f64,
) -> Result<Vec<CeTerm<'a>>> {
    let mut out = Vec::new();
    for n in 1..traj.states.len() {
        let noisy = traj.states[n].clone();
        if noisy.n_masked() > 0 {
            out.push(CeTerm { noisy, n, clean: traj.clean(), state: s, weight: weight * schedule.abar(n)? });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Arch};
    use crate::schedule::Vocab;
    use crate::seeded_rng;

    fn model(a: usize, k: usize, n: usize, arch: Arch) -> DiffusionModel {
        DiffusionModel::new(
            DenoiserSpec { vocab: Vocab::new(a).unwrap(), seq_len: k, state_dim: 1, time_dim: 2, arch },
            NoiseSchedule::linear(n).unwrap(),
        )
    }

    fn uniform(a: usize, k: usize, n: usize) -> (DiffusionModel, ParamStore) {
        let m = model(a, k, n, Arch::Mlp { hidden: 1, layers: 0 });
        let p = init_params(&m.spec, &mut seeded_rng(0)).unwrap();
        (m, p)
    }

    fn random(a: usize, k: usize, n: usize, seed: u64) -> (DiffusionModel, ParamStore) {
        let m = model(a, k, n, Arch::Transformer { d_model: 8, n_blocks: 1, ff_hidden: 8, pos_emb: true });
        let mut p = init_params(&m.spec, &mut seeded_rng(seed)).unwrap();
        let mut rng = seeded_rng(seed + 1000);
        let names: Vec<String> = p.names().cloned().collect();
        for name in names {
            for v in p.value_mut(&name).unwrap().data_mut() {
                *v += rng.gen_range(-0.7..0.7);
            }
        }
        (m, p)
    }

    fn seq(t: &[usize], a: usize) -> MaskedSeq {
        MaskedSeq::new(t.to_vec(), Vocab::new(a).unwrap()).unwrap()
    }

    #[test]
    fn top_p_examples() {
        assert_eq!(top_p_filter(&[0.7, 0.2, 0.1], 1.0), vec![0.7, 0.2, 0.1]);
        let f = top_p_filter(&[0.7, 0.2, 0.1], 0.8);
        assert!((f[0] - 7.0 / 9.0).abs() < 1e-12 && (f[1] - 2.0 / 9.0).abs() < 1e-12 && f[2] == 0.0);
        assert_eq!(top_p_filter(&[0.0, 1.0, 0.0], 0.5), vec![0.0, 1.0, 0.0]);
        // ties: lower id first
        assert_eq!(top_p_filter(&[0.25, 0.25, 0.25, 0.25], 0.5), vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn last_step_unmasks_everything() {
        let (m, p) = random(3, 3, 4, 1);
        let mut rng = seeded_rng(2);
        for _ in 0..20 {
            let (out, _) = m.reverse_step(&p, &seq(&[3, 1, 3], 3), 1, &[1.0], &SamplerConfig::ancestral(), &mut rng).unwrap();
            assert!(out.is_clean());
            let out = m.remask_step(&p, &seq(&[3, 1, 3], 3), 1, &[1.0], &SamplerConfig::remask(0.9), &mut rng).unwrap();
            assert!(out.is_clean());
        }
    }

    #[test]
    fn clean_input_is_a_fixed_point() {
        let (m, p) = random(3, 2, 4, 3);
        let a = seq(&[0, 2], 3);
        let (out, lp) = m.reverse_step(&p, &a, 3, &[1.0], &SamplerConfig::ancestral(), &mut seeded_rng(0)).unwrap();
        assert_eq!(out, a);
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn step_range_checked() {
        let (m, p) = uniform(2, 1, 2);
        let a = seq(&[2], 2);
        let cfg = SamplerConfig::ancestral();
        assert!(matches!(m.reverse_step(&p, &a, 0, &[1.0], &cfg, &mut seeded_rng(0)), Err(Error::OutOfRange(_))));
        assert!(matches!(m.reverse_step(&p, &a, 3, &[1.0], &cfg, &mut seeded_rng(0)), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn transition_kernel_examples() {
        // K=1, |A|=2, uniform μ, ᾱ = 0.5
        let mu = NumArray::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let m = seq(&[2], 2);
        let p = |to: usize| transition_log_prob(&mu, &m, &seq(&[to], 2), 0.5, 0.0).exp();
        assert!((p(2) - 0.5).abs() < 1e-15);
        assert!((p(0) - 0.25).abs() < 1e-15);
        assert!((p(1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reverse_step_frequencies() {
        let (m, p) = uniform(2, 1, 2);
        let mut rng = seeded_rng(4);
        let mut counts = [0usize; 3];
        let trials = 100_000;
        for _ in 0..trials {
            let (out, _) = m.reverse_step(&p, &seq(&[2], 2), 2, &[1.0], &SamplerConfig::ancestral(), &mut rng).unwrap();
            counts[out.tokens()[0]] += 1;
        }
        let f: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
        assert!((f[2] - 0.5).abs() < 0.01 && (f[0] - 0.25).abs() < 0.01 && (f[1] - 0.25).abs() < 0.01);
    }

    #[test]
    fn remask_zero_matches_ancestral_draws() {
        let (m, p) = random(3, 3, 4, 5);
        let s = [1.0];
        let mut r1 = seeded_rng(9);
        let mut r2 = seeded_rng(9);
        for _ in 0..10 {
            let (a, _) = m.sample_action(&p, &s, &SamplerConfig::ancestral(), &mut r1).unwrap();
            let (b, _) = m.sample_action(&p, &s, &SamplerConfig::remask(0.0), &mut r2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn remask_composite_kernel() {
        // K=1, |A|=2, N=2, η=0.5, uniform μ: from MASK at n=2, ᾱ=1/2, r=η(1-α_1)=1/4
        let abar = 0.5;
        let r = 0.25;
        let mu = NumArray::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let m = seq(&[2], 2);
        let p = |to: usize| transition_log_prob(&mu, &m, &seq(&[to], 2), abar, r).exp();
        // stay masked: 1/2 + 1/2·1/4 = 5/8; token t: 1/2·1/2·3/4 = 3/16
        assert!((p(2) - 5.0 / 8.0).abs() < 1e-12);
        assert!((p(0) - 3.0 / 16.0).abs() < 1e-12);
        assert!((p(0) + p(1) + p(2) - 1.0).abs() < 1e-12);

        let (model, params) = uniform(2, 1, 2);
        let mut rng = seeded_rng(11);
        let cfg = SamplerConfig::remask(0.5);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[model.remask_step(&params, &m, 2, &[1.0], &cfg, &mut rng).unwrap().tokens()[0]] += 1;
        }
        assert!((counts[2] as f64 / 1e5 - 5.0 / 8.0).abs() < 0.01);
        assert!((counts[0] as f64 / 1e5 - 3.0 / 16.0).abs() < 0.01);
    }

    #[test]
    fn trajectories_are_well_formed() {
        let (m, p) = random(3, 3, 4, 6);
        let mut rng = seeded_rng(12);
        for cfg in [SamplerConfig::ancestral(), SamplerConfig::top_p(0.98), SamplerConfig::remask(0.5)] {
            let trajs = m.sample_batch(&p, &[&[1.0], &[0.5], &[-1.0]], &cfg, &mut rng).unwrap();
            for t in &trajs {
                t.validate().unwrap();
                assert_eq!(t.states.len(), 5);
                if cfg.mode != SamplerMode::Remask {
                    for n in 1..=4 {
                        assert!(t.states[n].n_masked() >= t.states[n - 1].n_masked());
                        for k in 0..3 {
                            if !t.states[n].is_masked(k) {
                                assert_eq!(t.states[n].tokens()[k], t.states[0].tokens()[k]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn recorded_log_probs_match_trajectory_eval() {
        let (m, p) = random(3, 3, 3, 7);
        let mut rng = seeded_rng(13);
        for cfg in [SamplerConfig::ancestral(), SamplerConfig::remask(0.6)] {
            let (_, traj) = m.sample_action(&p, &[0.3], &cfg, &mut rng).unwrap();
            let tape = Tape::new();
            let b = tape.bind(&p, false);
            let ev = m.trajectory_eval(&b, &traj, &[0.3]).unwrap();
            for (x, y) in ev.log_probs.value().data().iter().zip(&traj.step_log_probs) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn one_step_chain_is_product_of_mu() {
        let (m, p) = random(3, 2, 1, 8);
        let a0 = seq(&[2, 0], 3);
        let out = crate::net::denoiser_forward(&m.spec, &p, &seq(&[3, 3], 3), 1, &[1.0]).unwrap();
        let mu = softmax_rows(&out.logits);
        let direct = mu.at(0, 2).ln() + mu.at(1, 0).ln();
        let exact = m.exact_log_likelihood(&p, &a0, &[1.0]).unwrap();
        let elbo = m.elbo_exact(&p, &a0, &[1.0]).unwrap();
        assert!((direct - exact).abs() < 1e-12);
        assert!((elbo - exact).abs() < 1e-12);
    }

    #[test]
    fn uniform_elbo_closed_form() {
        let (m, p) = uniform(3, 2, 2);
        let a0 = seq(&[0, 2], 3);
        let l = m.elbo_exact(&p, &a0, &[1.0]).unwrap();
        assert!((l - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
        let exact = m.exact_log_likelihood(&p, &a0, &[1.0]).unwrap();
        assert!((exact - (1.0f64 / 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn mc_elbo_is_unbiased() {
        let (m, p) = random(3, 2, 3, 9);
        let a0 = seq(&[1, 2], 3);
        let exact = m.elbo_exact(&p, &a0, &[1.0]).unwrap();
        let mut rng = seeded_rng(14);
        let draws: Vec<f64> =
            (0..20_000).map(|_| m.elbo(&p, &a0, &[1.0], ElboMode::Mc, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let se = (var / draws.len() as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn exact_elbo_refuses_long_sequences() {
        let (m, p) = uniform(2, 13, 2);
        let a0 = MaskedSeq::new(vec![0; 13], Vocab::new(2).unwrap()).unwrap();
        assert!(matches!(m.elbo_exact(&p, &a0, &[1.0]), Err(Error::RefusedScale(_))));
        let (m, p) = uniform(2, 5, 2);
        let a0 = MaskedSeq::new(vec![0; 5], Vocab::new(2).unwrap()).unwrap();
        assert!(matches!(m.exact_log_likelihood(&p, &a0, &[1.0]), Err(Error::RefusedScale(_))));
        let a0 = MaskedSeq::new(vec![0, 0, 0, 0, 2], Vocab::new(2).unwrap()).unwrap();
        assert!(matches!(m.elbo_exact(&p, &a0, &[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn onpolicy_pairs_shape() {
        let (m, p) = random(3, 3, 2, 10);
        let (_, traj) = m.sample_action(&p, &[1.0], &SamplerConfig::ancestral(), &mut seeded_rng(1)).unwrap();
        let pairs = onpolicy_pairs(&traj);
        assert_eq!(pairs.len(), 2);
        assert!(pairs[1].0.is_all_masked());
        assert!(pairs[1].0.n_masked() >= pairs[0].0.n_masked());
    }

    #[test]
    fn weighted_ce_gradients() {
        let (m, p) = random(3, 2, 2, 15);
        let a0 = seq(&[1, 2], 3);
        let s = [0.4];
        let terms = m.elbo_terms(&a0, &s, ElboMode::ExactN, &mut seeded_rng(0)).unwrap();
        let err = crate::net::gradcheck::max_rel_error(&p, |b| m.weighted_ce(b, &terms)).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
