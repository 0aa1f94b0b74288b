//! Policy improvement: the mirror-descent target and the losses that project
//! a diffusion policy onto it.
//!
//! The target is `π_MD(a) ∝ π_old(a) exp(A(a)/λ)`. The forward-KL loss is a
//! softmax-weighted negative ELBO over actions sampled from `π_old`; the
//! reverse-KL losses are clipped importance-ratio surrogates, either per
//! denoising step or with an ELBO-difference ratio.

use crate::diffusion::{CeTerm, DiffusionModel, ElboMode, ReverseTrajectory};
use crate::error::{invalid, Result};
use crate::net::{logsumexp, ParamStore, Tape, Var};
use crate::schedule::MaskedSeq;
use rand::Rng;

pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 1e4;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(invalid!("temperature must be positive and finite, got {lambda}"));
    }
    Ok(())
}

/// Exact target `π_old · exp(A/λ)`, normalized in log space.
pub fn pmd_exact(pi_old: &[f64], advantages: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if pi_old.len() != advantages.len() {
        return Err(invalid!("{} probabilities for {} advantages", pi_old.len(), advantages.len()));
    }
    if pi_old.iter().any(|&p| p < 0.0) || pi_old.iter().all(|&p| p == 0.0) {
        return Err(invalid!("old policy has no probability mass"));
    }
    let logits: Vec<f64> = pi_old
        .iter()
        .zip(advantages)
        .map(|(&p, &a)| if p > 0.0 { p.ln() + a / lambda } else { f64::NEG_INFINITY })
        .collect();
    let z = logsumexp(&logits);
    Ok(logits.iter().map(|l| (l - z).exp()).collect())
}

/// Softmax weights `exp(q_i/λ) / Σ_j exp(q_j/λ)`.
pub fn fkl_weights(q_values: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if q_values.is_empty() {
        return Err(invalid!("need at least one q-value"));
    }
    let scaled: Vec<f64> = q_values.iter().map(|q| q / lambda).collect();
    let z = logsumexp(&scaled);
    Ok(scaled.iter().map(|l| (l - z).exp()).collect())
}

/// Actions sampled from `π_old` at one state, with their Q-values, mean-baseline
/// advantages and softmax weights.
#[derive(Clone, Debug)]
pub struct PmdBatch {
    pub state: Vec<f64>,
    pub actions: Vec<MaskedSeq>,
    pub q_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
    /// Reverse chains that produced `actions`, when available.
    pub trajectories: Vec<ReverseTrajectory>,
}

impl PmdBatch {
    pub fn new(state: Vec<f64>, actions: Vec<MaskedSeq>, q_values: Vec<f64>, lambda: f64) -> Result<Self> {
        if actions.is_empty() || actions.len() != q_values.len() {
            return Err(invalid!("{} actions for {} q-values", actions.len(), q_values.len()));
        }
        if let Some(a) = actions.iter().find(|a| !a.is_clean()) {
            return Err(invalid!("batch action {:?} contains MASK", a.tokens()));
        }
        let mean = q_values.iter().sum::<f64>() / q_values.len() as f64;
        let advantages = q_values.iter().map(|q| q - mean).collect();
        let weights = fkl_weights(&q_values, lambda)?;
        Ok(Self { state, actions, q_values, advantages, weights, trajectories: Vec::new() })
    }

    pub fn with_trajectories(mut self, trajectories: Vec<ReverseTrajectory>) -> Result<Self> {
        if trajectories.len() != self.actions.len()
            || trajectories.iter().zip(&self.actions).any(|(t, a)| t.clean() != a)
        {
            return Err(invalid!("trajectories do not match the batch actions"));
        }
        self.trajectories = trajectories;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Where the noisy inputs of the ELBO term come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairSource {
    /// Fresh forward-process masks; `draws` Monte-Carlo draws per action in `Mc` mode.
    Forward { mode: ElboMode, draws: usize },
    /// The realized states of each action's own reverse chain.
    OnPolicy,
}

/// Loss value and the number of noisy inputs that fed it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub pairs: usize,
}

/// `−Σ_i ŵ_i ℓ(a_i, s; θ)`, averaged over batches. Gradients are added to `params`.
pub fn fkl_loss<R: Rng + ?Sized>(
    model: &DiffusionModel,
    params: &mut ParamStore,
    batches: &[PmdBatch],
    source: PairSource,
    rng: &mut R,
) -> Result<LossReport> {
    if batches.is_empty() {
        return Err(invalid!("no batches"));
    }
    let scale = 1.0 / batches.len() as f64;
    let mut terms: Vec<CeTerm<'_>> = Vec::new();
    for b in batches {
        for (i, a) in b.actions.iter().enumerate() {
            let w = b.weights[i] * scale;
            match source {
                PairSource::Forward { mode, draws } => {
                    let reps = if mode == ElboMode::Mc { draws.max(1) } else { 1 };
                    for _ in 0..reps {
                        for mut t in model.elbo_terms(a, &b.state, mode, rng)? {
                            t.weight *= w / reps as f64;
                            terms.push(t);
                        }
                    }
                }
                PairSource::OnPolicy => {
                    let traj = b
                        .trajectories
                        .get(i)
                        .ok_or_else(|| invalid!("on-policy pairs need the batch trajectories"))?;
                    terms.extend(crate::diffusion::onpolicy_terms(&model.schedule, traj, &b.state, w)?);
                }
            }
        }
    }
    let snapshot = params.clone();
    let tape = Tape::new();
    let p = tape.bind(&snapshot, true);
    let loss = -model.weighted_ce(&p, &terms)?;
    let grads = tape.backward(loss);
    grads.accumulate_into(p.slot(), params)?;
    Ok(LossReport { loss: loss.scalar(), pairs: terms.len() })
}

/// `exp(ℓ(a0,s;θ) − ℓ(a0,s;θ_old))` with exact_n ELBOs.
pub fn elbo_ratio(
    model: &DiffusionModel,
    params: &ParamStore,
    params_old: &ParamStore,
    a0: &MaskedSeq,
    s: &[f64],
) -> Result<f64> {
    let new = model.elbo_exact(params, a0, s)?;
    let old = model.elbo_exact(params_old, a0, s)?;
    Ok((new - old).exp())
}

/// PPO-style clipping and the optional KL penalty for the reverse-KL losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig {
    pub ratio_clip: f64,
    pub kl_coeff: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { ratio_clip: 0.2, kl_coeff: 0.0 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_clip > 0.0 && self.ratio_clip < 1.0) {
            return Err(invalid!("ratio clip must be in (0, 1), got {}", self.ratio_clip));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(invalid!("KL coefficient must be nonnegative, got {}", self.kl_coeff));
        }
        Ok(())
    }
}

/// One clean action with the chain that produced it under `θ_old`.
#[derive(Clone, Copy, Debug)]
pub struct RklSample<'a> {
    pub traj: &'a ReverseTrajectory,
    pub state: &'a [f64],
    pub advantage: f64,
}

fn clipped_surrogate<'t>(ratio: Var<'t>, advantage: f64, clip: f64) -> Var<'t> {
    let unclipped = ratio.scale(advantage);
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip).scale(advantage);
    -unclipped.minimum(clipped)
}

fn check_recorded(recorded: &[f64], recomputed: &[f64]) -> Result<()> {
    for (n, (r, c)) in recorded.iter().zip(recomputed).enumerate() {
        if (r - c).abs() > 1e-8 * r.abs().max(1.0) {
            return Err(invalid!(
                "trajectory log-prob at step {} is {r}, old parameters give {c}",
                n + 1
            ));
        }
    }
    Ok(())
}

/// Clipped single-step ratio loss, averaged over steps and then samples.
/// The old parameters must reproduce the recorded per-step log-probabilities.
pub fn rkl_loss_single_step(
    model: &DiffusionModel,
    params: &mut ParamStore,
    params_old: &ParamStore,
    samples: &[RklSample<'_>],
    clip: &ClipConfig,
) -> Result<f64> {
    clip.validate()?;
    if samples.is_empty() {
        return Err(invalid!("no samples"));
    }
    let snapshot = params.clone();
    let tape = Tape::new();
    let p = tape.bind(&snapshot, true);
    let old = tape.bind(params_old, false);
    let mut total: Option<Var<'_>> = None;
    for smp in samples {
        let new_eval = model.trajectory_eval(&p, smp.traj, smp.state)?;
        let old_eval = model.trajectory_eval(&old, smp.traj, smp.state)?;
        check_recorded(&smp.traj.step_log_probs, old_eval.log_probs.value().data())?;
        let ratio = (new_eval.log_probs - old_eval.log_probs).exp();
        let mut per_step = clipped_surrogate(ratio, smp.advantage, clip.ratio_clip);
        if clip.kl_coeff > 0.0 {
            per_step = per_step + new_eval.kl_to(&old_eval).scale(clip.kl_coeff);
        }
        let l = per_step.mean();
        total = Some(match total {
            Some(t) => t + l,
            None => l,
        });
    }
    let loss = total.unwrap().scale(1.0 / samples.len() as f64);
    let grads = tape.backward(loss);
    grads.accumulate_into(p.slot(), params)?;
    Ok(loss.scalar())
}

/// Clipped ELBO-ratio loss: the ratio is `exp(ℓ_θ − ℓ_old)` on the clean
/// action; the KL penalty is the mean per-step KL along the recorded chain.
pub fn rkl_loss_elbo_ratio(
    model: &DiffusionModel,
    params: &mut ParamStore,
    params_old: &ParamStore,
    samples: &[RklSample<'_>],
    clip: &ClipConfig,
) -> Result<f64> {
    clip.validate()?;
    if samples.is_empty() {
        return Err(invalid!("no samples"));
    }
    let snapshot = params.clone();
    let tape = Tape::new();
    let p = tape.bind(&snapshot, true);
    let old = tape.bind(params_old, false);
    let mut unused = crate::seeded_rng(0);
    let mut total: Option<Var<'_>> = None;
    for smp in samples {
        let a0 = smp.traj.clean();
        let terms = model.elbo_terms(a0, smp.state, ElboMode::ExactN, &mut unused)?;
        let l_new = model.weighted_ce(&p, &terms)?;
        let l_old = model.weighted_ce(&old, &terms)?;
        let ratio = (l_new - l_old).exp();
        let mut l = clipped_surrogate(ratio, smp.advantage, clip.ratio_clip);
        if clip.kl_coeff > 0.0 {
            let new_eval = model.trajectory_eval(&p, smp.traj, smp.state)?;
            let old_eval = model.trajectory_eval(&old, smp.traj, smp.state)?;
            l = l + new_eval.kl_to(&old_eval).mean().scale(clip.kl_coeff);
        }
        total = Some(match total {
            Some(t) => t + l,
            None => l,
        });
    }
    let loss = total.unwrap().scale(1.0 / samples.len() as f64);
    let grads = tape.backward(loss);
    grads.accumulate_into(p.slot(), params)?;
    Ok(loss.scalar())
}

/// Temperature, KL budget and learning rate of the dual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureState {
    pub lambda: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl TemperatureState {
    pub fn new(lambda: f64, epsilon: f64, lr: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if !(epsilon > 0.0) || !(lr > 0.0) {
            return Err(invalid!("epsilon and lr must be positive"));
        }
        Ok(Self { lambda: lambda.clamp(LAMBDA_MIN, LAMBDA_MAX), epsilon, lr })
    }
}

/// `g(λ) = λε + λ logsumexp(A/λ) − λ log M`.
pub fn temperature_dual(advantages: &[f64], lambda: f64, epsilon: f64) -> f64 {
    let scaled: Vec<f64> = advantages.iter().map(|a| a / lambda).collect();
    lambda * epsilon + lambda * logsumexp(&scaled) - lambda * (advantages.len() as f64).ln()
}

/// `dg/dλ = ε − KL(softmax(A/λ) ‖ uniform)`.
pub fn temperature_dual_grad(advantages: &[f64], lambda: f64, epsilon: f64) -> f64 {
    let scaled: Vec<f64> = advantages.iter().map(|a| a / lambda).collect();
    let z = logsumexp(&scaled);
    let m = advantages.len() as f64;
    let kl: f64 = scaled.iter().map(|l| (l - z).exp() * (l - z + m.ln())).sum();
    epsilon - kl
}

/// One gradient step on `g` in `u = ln λ`, clamped to `[1e-4, 1e4]`.
pub fn tune_lambda(advantages: &[f64], ts: TemperatureState) -> Result<TemperatureState> {
    if advantages.len() < 2 {
        return Err(invalid!("temperature tuning needs at least two advantages"));
    }
    let g = temperature_dual_grad(advantages, ts.lambda, ts.epsilon);
    let u = ts.lambda.ln() - ts.lr * ts.lambda * g;
    let lambda = if u.is_finite() { u.exp().clamp(LAMBDA_MIN, LAMBDA_MAX) } else { ts.lambda };
    Ok(TemperatureState { lambda, ..ts })
}
