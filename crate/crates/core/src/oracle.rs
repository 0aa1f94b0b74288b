//! Brute-force references: tabular dynamic programming, exact policy
//! distributions of small diffusion policies, exact KL divergences.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::diffusion::{softmax_rows, transition_log_prob, DiffusionModel};
use crate::error::{invalid, Error, Result};
use crate::net::ParamStore;
use crate::pmd::pmd_exact;
use crate::schedule::{MaskedSeq, Vocab};

/// Largest action space materialized by [`policy_distribution`].
pub const MAX_ENUM_ACTIONS: usize = 10_000;

/// Finite MDP with dense transition and reward tables.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Initial state distribution.
    pub start: Vec<f64>,
}

/// Tabular stochastic policy `pi[s][a]`.
pub type TabularPolicy = Vec<Vec<f64>>;

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if self.transitions.len() != ns || self.rewards.len() != ns || self.start.len() != ns {
            return Err(Error::Shape("tables disagree with n_states".into()));
        }
        for s in 0..ns {
            if self.transitions[s].len() != na || self.rewards[s].len() != na {
                return Err(Error::Shape(format!("state {s}: tables disagree with n_actions")));
            }
            for a in 0..na {
                let row = &self.transitions[s][a];
                if row.len() != ns || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(invalid!("P[{s}][{a}] is not a distribution"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid!("gamma must be in [0, 1), got {}", self.gamma));
        }
        Ok(())
    }

    /// `q(s, a) = r(s, a) + γ Σ_s' P(s'|s,a) v(s')`.
    pub fn q_from_v(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| {
                        let next: f64 = self.transitions[s][a].iter().zip(v).map(|(p, x)| p * x).sum();
                        self.rewards[s][a] + self.gamma * next
                    })
                    .collect()
            })
            .collect()
    }

    pub fn expected_start_value(&self, v: &[f64]) -> f64 {
        self.start.iter().zip(v).map(|(p, x)| p * x).sum()
    }

    /// Deterministic policy choosing `actions[s]`.
    pub fn deterministic_policy(&self, actions: &[usize]) -> TabularPolicy {
        actions
            .iter()
            .map(|&a| (0..self.n_actions).map(|j| if j == a { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}

/// Optimal values and a greedy policy (lowest action id among ties).
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    mdp.validate()?;
    let mut v = vec![0.0; mdp.n_states];
    loop {
        let q = mdp.q_from_v(&v);
        let next: Vec<f64> = q.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if residual < tol * (1.0 - mdp.gamma) {
            break;
        }
    }
    let q = mdp.q_from_v(&v);
    let greedy = q
        .iter()
        .map(|row| {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&x| x >= best - 1e-12).unwrap()
        })
        .collect();
    Ok((v, greedy))
}

/// Exact `v^π` by solving `(I − γ P_π) v = r_π`.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.validate()?;
    let n = mdp.n_states;
    if pi.len() != n || pi.iter().any(|row| row.len() != mdp.n_actions) {
        return Err(Error::Shape("policy does not match the MDP".into()));
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let p = pi[s][a];
            if p == 0.0 {
                continue;
            }
            r[s] += p * mdp.rewards[s][a];
            for t in 0..n {
                m[(s, t)] -= mdp.gamma * p * mdp.transitions[s][a][t];
            }
        }
    }
    let v = m.lu().solve(&r).ok_or_else(|| invalid!("policy evaluation system is singular"))?;
    Ok(v.iter().copied().collect())
}

/// Exact PMD loop: evaluate `q^π`, set `π ← π_MD(π, q − v, λ)` per state.
/// Returns `n_iters + 1` policies with their values, starting with the input.
pub fn tabular_pmd_iterate(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    lambda: f64,
    n_iters: usize,
) -> Result<Vec<(TabularPolicy, Vec<f64>)>> {
    let mut out = Vec::with_capacity(n_iters + 1);
    let mut cur = pi.clone();
    let mut v = policy_evaluation(mdp, &cur)?;
    out.push((cur.clone(), v.clone()));
    for _ in 0..n_iters {
        let q = mdp.q_from_v(&v);
        cur = cur
            .iter()
            .zip(&q)
            .zip(&v)
            .map(|((row, qs), &vs)| {
                let adv: Vec<f64> = qs.iter().map(|x| x - vs).collect();
                pmd_exact(row, &adv, lambda)
            })
            .collect::<Result<_>>()?;
        v = policy_evaluation(mdp, &cur)?;
        out.push((cur.clone(), v.clone()));
    }
    Ok(out)
}

/// Four states in a row, actions left/right, reward 1 for pushing right at
/// the right end, γ = 0.9, start at the left end.
pub fn chain_mdp() -> TabularMdp {
    let n = 4;
    let mut transitions = vec![vec![vec![0.0; n]; 2]; n];
    let mut rewards = vec![vec![0.0; 2]; n];
    for s in 0..n {
        transitions[s][0][s.saturating_sub(1)] = 1.0;
        transitions[s][1][(s + 1).min(n - 1)] = 1.0;
    }
    rewards[n - 1][1] = 1.0;
    let mut start = vec![0.0; n];
    start[0] = 1.0;
    TabularMdp { n_states: n, n_actions: 2, transitions, rewards, gamma: 0.9, start }
}

/// Half the L1 distance.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0
}

/// `Σ p log(p/q)`; fails if `p` puts mass where `q` has none.
pub fn kl_exact(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} vs {} outcomes", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::Support(format!("outcome {i} has p = {a} but q = 0")));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// All clean sequences of length `k`, lexicographic (position 0 most significant).
pub fn enumerate_actions(vocab: Vocab, k: usize) -> Result<Vec<MaskedSeq>> {
    let a = vocab.size();
    let count = (a as f64).powi(k as i32);
    if count > MAX_ENUM_ACTIONS as f64 {
        return Err(Error::RefusedScale(format!("{a}^{k} actions")));
    }
    let count = count as usize;
    let mut out = Vec::with_capacity(count);
    for mut idx in 0..count {
        let mut tokens = vec![0; k];
        for pos in (0..k).rev() {
            tokens[pos] = idx % a;
            idx /= a;
        }
        out.push(MaskedSeq::new(tokens, vocab)?);
    }
    Ok(out)
}

/// Index of a clean action in [`enumerate_actions`] order.
pub fn action_index(a: &MaskedSeq) -> usize {
    let v = a.vocab().size();
    a.tokens().iter().fold(0, |acc, &t| acc * v + t)
}

/// `π_θ(· | s)` over every clean action, from the exact likelihood.
pub fn policy_distribution(model: &DiffusionModel, params: &ParamStore, s: &[f64]) -> Result<Vec<f64>> {
    let actions = enumerate_actions(model.spec.vocab, model.spec.seq_len)?;
    actions
        .iter()
        .map(|a| model.exact_log_likelihood(params, a, s).map(f64::exp))
        .collect()
}

/// `log π_θ(a0|s) − ℓ(a0,s;θ)` computed as the KL between the forward
/// posterior over mask chains and the model's reverse posterior, by
/// enumerating every chain of nested mask sets. Also returns `log π_θ(a0|s)`
/// as the log of the summed chain probabilities.
pub fn elbo_gap(model: &DiffusionModel, params: &ParamStore, a0: &MaskedSeq, s: &[f64]) -> Result<(f64, f64)> {
    let k = a0.len();
    let big_n = model.n_steps();
    if k > 4 || big_n > 4 {
        return Err(Error::RefusedScale(format!("chain enumeration needs K ≤ 4 and N ≤ 4, got K={k}, N={big_n}")));
    }
    a0.ensure_clean()?;
    let full = (1usize << k) - 1;
    let sched = &model.schedule;
    let seq_for = |masked: usize| {
        let mut seq = a0.clone();
        for pos in 0..k {
            if masked >> pos & 1 == 1 {
                seq.mask(pos);
            }
        }
        seq
    };
    let mut mu_cache: HashMap<(usize, usize), crate::net::NumArray> = HashMap::new();
    // chains[i] = masked sets M_0 = ∅, M_1, ..., M_N = full with forward probability
    let mut chains: Vec<(Vec<usize>, f64)> = vec![(vec![0], 1.0)];
    for n in 1..=big_n {
        let survive = sched.alpha(n) / sched.alpha(n - 1);
        let mut next = Vec::new();
        for (chain, q) in &chains {
            let prev = *chain.last().unwrap();
            let unmasked = full & !prev;
            let mut sub = unmasked;
            loop {
                // `sub` newly masked at step n
                let newly = sub.count_ones() as i32;
                let kept = unmasked.count_ones() as i32 - newly;
                let p = (1.0 - survive).powi(newly) * survive.powi(kept);
                if p > 0.0 {
                    let mut c = chain.clone();
                    c.push(prev | sub);
                    next.push((c, q * p));
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & unmasked;
            }
        }
        chains = next;
    }
    let mut gap_terms = Vec::with_capacity(chains.len());
    let mut log_joint = Vec::with_capacity(chains.len());
    for (chain, q) in &chains {
        let mut lp = 0.0;
        for n in 1..=big_n {
            let a_n = seq_for(chain[n]);
            let a_prev = seq_for(chain[n - 1]);
            let mu = match mu_cache.get(&(chain[n], n)) {
                Some(mu) => mu.clone(),
                None => {
                    let logits = model.spec.logits_batch(params, &[&a_n], &[n], &[s])?;
                    let mu = softmax_rows(&logits);
                    mu_cache.insert((chain[n], n), mu.clone());
                    mu
                }
            };
            lp += transition_log_prob(&mu, &a_n, &a_prev, sched.abar(n)?, 0.0);
        }
        log_joint.push(lp);
        gap_terms.push((*q, lp));
    }
    let log_pi = crate::net::logsumexp(&log_joint);
    let gap = gap_terms.iter().map(|(q, lp)| q * (q.ln() - lp + log_pi)).sum();
    Ok((gap, log_pi))
}

/// One named identity check of the oracle suite.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs the identity suite. `quick` uses fewer random instances.
pub fn run_suite(quick: bool) -> Vec<CheckResult> {
    suite::run(quick)
}

mod suite {
    use super::*;
    use crate::diffusion::SamplerConfig;
    use crate::net::{init_params, Arch, DenoiserSpec, NumArray, Tape};
    use crate::pmd::{fkl_weights, temperature_dual_grad};
    use crate::schedule::NoiseSchedule;
    use crate::seeded_rng;
    use rand::Rng;

    fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
        match f() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        }
    }

    pub(super) fn random_model(a: usize, k: usize, n: usize, seed: u64) -> Result<(DiffusionModel, ParamStore)> {
        let model = DiffusionModel::new(
            DenoiserSpec {
                vocab: Vocab::new(a)?,
                seq_len: k,
                state_dim: 1,
                time_dim: 4,
                arch: Arch::Transformer { d_model: 8, n_blocks: 1, ff_hidden: 8, pos_emb: true },
            },
            NoiseSchedule::linear(n)?,
        );
        let mut p = init_params(&model.spec, &mut seeded_rng(seed))?;
        let mut rng = seeded_rng(seed ^ 0xabcd);
        let names: Vec<String> = p.names().cloned().collect();
        for name in names {
            for v in p.value_mut(&name)?.data_mut() {
                *v += rng.gen_range(-0.8..0.8);
            }
        }
        Ok((model, p))
    }

    pub(super) fn run(quick: bool) -> Vec<CheckResult> {
        let reps = if quick { 10 } else { 100 };
        let mut out = Vec::new();

        out.push(check("elbo lower-bounds the exact likelihood", || {
            let mut worst = f64::INFINITY;
            for i in 0..reps {
                let (m, p) = random_model(3, 2, 2, i)?;
                for a in enumerate_actions(m.spec.vocab, 2)? {
                    let gap = m.exact_log_likelihood(&p, &a, &[1.0])? - m.elbo_exact(&p, &a, &[1.0])?;
                    worst = worst.min(gap);
                }
            }
            Ok((worst >= -1e-12, format!("smallest gap {worst:e}")))
        }));

        out.push(check("one-step elbo is exact", || {
            let mut worst: f64 = 0.0;
            for i in 0..reps {
                let (m, p) = random_model(3, 2, 1, 1000 + i)?;
                for a in enumerate_actions(m.spec.vocab, 2)? {
                    let d = m.exact_log_likelihood(&p, &a, &[1.0])? - m.elbo_exact(&p, &a, &[1.0])?;
                    worst = worst.max(d.abs());
                }
            }
            Ok((worst <= 1e-12, format!("largest difference {worst:e}")))
        }));

        out.push(check("policy distribution sums to one", || {
            let mut worst: f64 = 0.0;
            for i in 0..reps.min(20) {
                let (m, p) = random_model(3, 2, 2, 2000 + i)?;
                let total: f64 = policy_distribution(&m, &p, &[1.0])?.iter().sum();
                worst = worst.max((total - 1.0).abs());
            }
            Ok((worst <= 1e-8, format!("largest deviation {worst:e}")))
        }));

        out.push(check("elbo ratio equals likelihood ratio times bias factor", || {
            let mut worst: f64 = 0.0;
            for i in 0..reps.min(20) {
                let (m, p_old) = random_model(2, 2, 2, 3000 + i)?;
                let (_, p_new) = random_model(2, 2, 2, 4000 + i)?;
                for a in enumerate_actions(m.spec.vocab, 2)? {
                    let (bias_old, lp_old) = elbo_gap(&m, &p_old, &a, &[1.0])?;
                    let (bias_new, lp_new) = elbo_gap(&m, &p_new, &a, &[1.0])?;
                    let eta = (lp_new - lp_old).exp();
                    let est = crate::pmd::elbo_ratio(&m, &p_new, &p_old, &a, &[1.0])?;
                    let want = eta * (bias_old - bias_new).exp();
                    worst = worst.max((est - want).abs() / want);
                }
            }
            Ok((worst <= 1e-10, format!("largest relative error {worst:e}")))
        }));

        out.push(check("pmd target is shift invariant", || {
            let pi = [0.1, 0.2, 0.3, 0.4];
            let adv = [0.5, -1.0, 0.25, 2.0];
            let x = pmd_exact(&pi, &adv, 0.7)?;
            let shifted: Vec<f64> = adv.iter().map(|a| a + 13.0).collect();
            let y = pmd_exact(&pi, &shifted, 0.7)?;
            let d = total_variation(&x, &y);
            Ok((d <= 1e-12, format!("tv {d:e}")))
        }));

        out.push(check("pmd KL to the old policy is nonincreasing in temperature", || {
            let pi = [0.1, 0.2, 0.3, 0.4];
            let adv = [0.5, -1.0, 0.25, 2.0];
            let mut prev = f64::INFINITY;
            let mut ok = true;
            for i in 0..40 {
                let lambda = 10f64.powf(-3.0 + 0.15 * i as f64);
                let kl = kl_exact(&pmd_exact(&pi, &adv, lambda)?, &pi)?;
                ok &= kl <= prev + 1e-12;
                prev = kl;
            }
            Ok((ok, String::new()))
        }));

        out.push(check("forward KL bound holds", || {
            let mut worst = f64::INFINITY;
            let mut rng = seeded_rng(5);
            for i in 0..reps.min(20) {
                let (m, p_old) = random_model(2, 2, 2, 5000 + i)?;
                let (_, p) = random_model(2, 2, 2, 6000 + i)?;
                let actions = enumerate_actions(m.spec.vocab, 2)?;
                let pi_old = policy_distribution(&m, &p_old, &[1.0])?;
                let adv: Vec<f64> = (0..actions.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let target = pmd_exact(&pi_old, &adv, 0.5)?;
                let pi = policy_distribution(&m, &p, &[1.0])?;
                let mut bound = 0.0;
                for (j, a) in actions.iter().enumerate() {
                    bound += target[j] * -m.elbo_exact(&p, a, &[1.0])?;
                }
                worst = worst.min(bound - kl_exact(&target, &pi)?);
            }
            Ok((worst >= -1e-10, format!("smallest slack {worst:e}")))
        }));

        out.push(check("reverse KL to the target matches the regularized objective gradient", || {
            let worst = rkl_pmd_gradient_gap(reps.min(50) as u64)?;
            Ok((worst <= 1e-8, format!("largest gradient difference {worst:e}")))
        }));

        out.push(check("tabular PMD improves monotonically and converges", || {
            let mdp = chain_mdp();
            let uniform = vec![vec![0.5; 2]; 4];
            let iters = tabular_pmd_iterate(&mdp, &uniform, 0.1, 50)?;
            let values: Vec<f64> = iters.iter().map(|(_, v)| mdp.expected_start_value(v)).collect();
            let monotone = values.windows(2).all(|w| w[1] >= w[0] - 1e-10);
            let (_, greedy) = value_iteration(&mdp, 1e-12)?;
            let opt = mdp.deterministic_policy(&greedy);
            let tv = iters
                .last()
                .unwrap()
                .0
                .iter()
                .zip(&opt)
                .map(|(a, b)| total_variation(a, b))
                .fold(0.0, f64::max);
            Ok((monotone && tv <= 1e-3, format!("final tv {tv:e}")))
        }));

        out.push(check("value iteration matches the geometric series", || {
            let mdp = TabularMdp {
                n_states: 1,
                n_actions: 1,
                transitions: vec![vec![vec![1.0]]],
                rewards: vec![vec![1.0]],
                gamma: 0.9,
                start: vec![1.0],
            };
            let (v, _) = value_iteration(&mdp, 1e-10)?;
            Ok(((v[0] - 10.0).abs() < 1e-9, format!("v = {}", v[0])))
        }));

        out.push(check("KL closed forms", || {
            let a = kl_exact(&[1.0, 0.0], &[0.5, 0.5])?;
            let b = kl_exact(&[0.3, 0.7], &[0.3, 0.7])?;
            let support = matches!(kl_exact(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Support(_)));
            Ok(((a - 2f64.ln()).abs() < 1e-15 && b == 0.0 && support, String::new()))
        }));

        out.push(check("softmax weights are shift invariant", || {
            let w = fkl_weights(&[0.2, 1.5, -0.3], 0.3)?;
            let v = fkl_weights(&[100.2, 101.5, 99.7], 0.3)?;
            let d = total_variation(&w, &v);
            Ok((d <= 1e-12, format!("tv {d:e}")))
        }));

        out.push(check("temperature dual gradient is the KL gap", || {
            let adv = [0.3, -0.4, 1.1, 0.0];
            let (lambda, eps) = (0.6, 0.05);
            let h = 1e-6;
            let g = |l: f64| crate::pmd::temperature_dual(&adv, l, eps);
            let fd = (g(lambda + h) - g(lambda - h)) / (2.0 * h);
            let d = (fd - temperature_dual_grad(&adv, lambda, eps)).abs();
            Ok((d < 1e-7, format!("difference {d:e}")))
        }));

        out.push(check("sampler matches the exact policy distribution", || {
            let (m, p) = random_model(2, 2, 2, 7000)?;
            let exact = policy_distribution(&m, &p, &[1.0])?;
            let draws = if quick { 20_000 } else { 200_000 };
            let mut counts = vec![0.0; exact.len()];
            let mut rng = seeded_rng(7001);
            let cfg = SamplerConfig::ancestral();
            let states = vec![&[1.0][..]; 1000];
            for _ in 0..draws / 1000 {
                for t in m.sample_batch(&p, &states, &cfg, &mut rng)? {
                    counts[action_index(t.clean())] += 1.0 / draws as f64;
                }
            }
            let tv = total_variation(&counts, &exact);
            let tol = if quick { 0.02 } else { 0.01 };
            Ok((tv <= tol, format!("tv {tv:.4}")))
        }));

        out.push(check("denoiser gradients match finite differences", || {
            let (m, p) = random_model(3, 3, 3, 8000)?;
            let a0 = MaskedSeq::new(vec![2, 0, 1], m.spec.vocab)?;
            let terms = m.elbo_terms(&a0, &[0.5], crate::diffusion::ElboMode::ExactN, &mut seeded_rng(0))?;
            let err = crate::net::gradcheck::max_rel_error(&p, |b| m.weighted_ce(b, &terms))?;
            Ok((err < 1e-4, format!("relative error {err:e}")))
        }));

        out
    }

    /// Largest |∇ λ KL(π_θ‖π_MD) + ∇[E_θ A − λ KL(π_θ‖π_old)]| over random
    /// tabular softmax policies.
    pub fn rkl_pmd_gradient_gap(instances: u64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = seeded_rng(9000 + i);
            let n = rng.gen_range(2..7);
            let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let old_logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pi_old = crate::net::softmax_row(&old_logits);
            let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lambda = rng.gen_range(0.1..2.0);
            let target = pmd_exact(&pi_old, &adv, lambda)?;

            let tape = Tape::new();
            let th = tape.leaf(NumArray::row(theta.clone()));
            let logp = th.log_softmax();
            let p = logp.exp();
            let log_target = tape.constant(NumArray::row(target.iter().map(|x| x.ln()).collect()));
            let kl_target = (p * (logp - log_target)).sum().scale(lambda);
            let g1 = tape.backward(kl_target).wrt(th).unwrap().to_vec();

            let tape = Tape::new();
            let th = tape.leaf(NumArray::row(theta.clone()));
            let logp = th.log_softmax();
            let p = logp.exp();
            let log_old = tape.constant(NumArray::row(pi_old.iter().map(|x| x.ln()).collect()));
            let kl_old = (p * (logp - log_old)).sum();
            let objective = p.dot_const(&adv) - kl_old.scale(lambda);
            let g2 = tape.backward(-objective).wrt(th).unwrap().to_vec();

            for (a, b) in g1.iter().zip(&g2) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

pub use suite::rkl_pmd_gradient_gap;
