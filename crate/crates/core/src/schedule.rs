//! Noise schedules and the forward masking process.
//!
//! The schedule is stored as survival probabilities `alpha[0..=N]`, the
//! probability that a token of the clean sequence is still unmasked after `n`
//! forward steps. Everything downstream (posterior unmask rates, ELBO weights)
//! is a function of `alpha` alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Primitive action vocabulary plus the reserved MASK token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid!("vocabulary needs at least 2 primitive actions, got {size}"));
        }
        Ok(Self { size })
    }

    /// Number of primitive actions `|A|`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// The MASK id, one past the last primitive action.
    pub fn mask_id(&self) -> usize {
        self.size
    }
}

/// A length-K sequence over `A ∪ {MASK}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskedSeq {
    tokens: Vec<usize>,
    mask_id: usize,
}

impl MaskedSeq {
    pub fn new(tokens: Vec<usize>, vocab: Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t > vocab.mask_id()) {
            return Err(Error::OutOfRange(format!(
                "token {bad} exceeds mask id {}",
                vocab.mask_id()
            )));
        }
        Ok(Self { tokens, mask_id: vocab.mask_id() })
    }

    pub fn all_masked(len: usize, vocab: Vocab) -> Self {
        Self { tokens: vec![vocab.mask_id(); len], mask_id: vocab.mask_id() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { size: self.mask_id }
    }

    pub fn is_masked(&self, k: usize) -> bool {
        self.tokens[k] == self.mask_id
    }

    pub fn n_masked(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id).count()
    }

    pub fn is_clean(&self) -> bool {
        self.n_masked() == 0
    }

    pub fn is_all_masked(&self) -> bool {
        self.n_masked() == self.len()
    }

    pub(crate) fn set(&mut self, k: usize, token: usize) {
        debug_assert!(token <= self.mask_id);
        self.tokens[k] = token;
    }

    pub(crate) fn mask(&mut self, k: usize) {
        self.tokens[k] = self.mask_id;
    }

    /// Fails unless the sequence contains no MASK token.
    pub fn ensure_clean(&self) -> Result<()> {
        if self.is_clean() {
            Ok(())
        } else {
            Err(invalid!("expected a fully unmasked sequence, got {:?}", self.tokens))
        }
    }
}

/// Which schedule family to build. Only the linear schedule is shipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_n = 1 - n/N`.
    pub fn linear(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid!("n_steps must be at least 1"));
        }
        let n = n_steps as f64;
        let mut alpha: Vec<f64> = (0..=n_steps).map(|i| 1.0 - i as f64 / n).collect();
        alpha[0] = 1.0;
        alpha[n_steps] = 0.0;
        Ok(Self { alpha })
    }

    pub fn build(kind: ScheduleKind, n_steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(n_steps),
        }
    }

    /// Builds from explicit survival probabilities, checking the endpoint and
    /// monotonicity invariants.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(invalid!("schedule needs at least two entries"));
        }
        if alpha[0] != 1.0 || *alpha.last().unwrap() != 0.0 {
            return Err(invalid!("schedule must start at 1 and end at 0"));
        }
        if alpha.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid!("schedule must be strictly decreasing"));
        }
        Ok(Self { alpha })
    }

    pub fn n_steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// Posterior unmask probability `(alpha_{n-1} - alpha_n) / (1 - alpha_n)`.
    /// Also the ELBO weight of step `n`.
    pub fn abar(&self, n: usize) -> Result<f64> {
        if n == 0 || n > self.n_steps() {
            return Err(Error::OutOfRange(format!(
                "abar step {n} outside 1..={}",
                self.n_steps()
            )));
        }
        let denom = 1.0 - self.alpha[n];
        if denom <= 0.0 {
            return Err(invalid!("alpha_{n} = 1 makes abar undefined"));
        }
        Ok((self.alpha[n - 1] - self.alpha[n]) / denom)
    }

    /// Forward-process marginal `q(a^n_k | a^0_k)`: probability that a clean
    /// token survives `n` steps, paired with the probability it is masked.
    pub fn marginal(&self, n: usize) -> (f64, f64) {
        (self.alpha[n], 1.0 - self.alpha[n])
    }
}

fn check_step(schedule: &NoiseSchedule, n: usize) -> Result<()> {
    if n > schedule.n_steps() {
        return Err(Error::OutOfRange(format!(
            "diffusion step {n} outside 0..={}",
            schedule.n_steps()
        )));
    }
    Ok(())
}

/// Samples `a^n ~ q(. | a^0)`: each position keeps its token with
/// probability `alpha_n`, independently.
pub fn forward_mask<R: Rng + ?Sized>(
    a0: &MaskedSeq,
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<MaskedSeq> {
    a0.ensure_clean()?;
    check_step(schedule, n)?;
    let keep = schedule.alpha(n);
    let mut out = a0.clone();
    for k in 0..out.len() {
        // one draw per position regardless of n, so streams line up across steps
        let u: f64 = rng.gen();
        if u >= keep {
            out.mask(k);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn vocab(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    #[test]
    fn linear_schedule_values() {
        let s = NoiseSchedule::linear(4).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(NoiseSchedule::linear(1).unwrap().alphas(), &[1.0, 0.0]);
        assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
        assert!(NoiseSchedule::linear(0).is_err());
    }

    #[test]
    fn abar_values() {
        let s = NoiseSchedule::linear(4).unwrap();
        assert_eq!(s.abar(2).unwrap(), 0.5);
        assert_eq!(s.abar(1).unwrap(), 1.0);
        assert_eq!(s.abar(4).unwrap(), 0.25);
        for n in 1..=4 {
            assert!((s.abar(n).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        }
        assert!(matches!(s.abar(0), Err(Error::OutOfRange(_))));
        assert!(matches!(s.abar(5), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn telescoping_identity() {
        for n_steps in 1..20 {
            let s = NoiseSchedule::linear(n_steps).unwrap();
            for n in 1..=n_steps {
                let ab = s.abar(n).unwrap();
                let rebuilt = s.alpha(n) + ab * (1.0 - s.alpha(n));
                assert!((rebuilt - s.alpha(n - 1)).abs() < 1e-12);
                let (keep, drop) = s.marginal(n);
                assert!((keep + drop - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn from_alpha_checks_invariants() {
        assert!(NoiseSchedule::from_alpha(vec![1.0, 0.5, 0.0]).is_ok());
        assert!(NoiseSchedule::from_alpha(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha(vec![0.9, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha(vec![1.0, 0.1]).is_err());
    }

    #[test]
    fn forward_mask_endpoints() {
        let v = vocab(4);
        let s = NoiseSchedule::linear(4).unwrap();
        let a0 = MaskedSeq::new(vec![0, 1, 2, 3, 0, 1], v).unwrap();
        let mut rng = seeded_rng(1);
        assert_eq!(forward_mask(&a0, 0, &s, &mut rng).unwrap(), a0);
        assert!(forward_mask(&a0, 4, &s, &mut rng).unwrap().is_all_masked());
    }

    #[test]
    fn forward_mask_errors() {
        let v = vocab(3);
        let s = NoiseSchedule::linear(4).unwrap();
        let mut rng = seeded_rng(1);
        let masked = MaskedSeq::new(vec![0, 3], v).unwrap();
        assert!(matches!(
            forward_mask(&masked, 1, &s, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        let clean = MaskedSeq::new(vec![0, 2], v).unwrap();
        assert!(matches!(forward_mask(&clean, 5, &s, &mut rng), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn forward_mask_is_seeded() {
        let v = vocab(4);
        let s = NoiseSchedule::linear(4).unwrap();
        let a0 = MaskedSeq::new(vec![0, 1, 2, 3, 0, 1, 2, 3], v).unwrap();
        let x = forward_mask(&a0, 2, &s, &mut seeded_rng(9)).unwrap();
        let y = forward_mask(&a0, 2, &s, &mut seeded_rng(9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forward_mask_keep_rate() {
        let v = vocab(4);
        let s = NoiseSchedule::linear(4).unwrap();
        let a0 = MaskedSeq::new(vec![0, 1, 2, 3, 0, 1, 2, 3], v).unwrap();
        let mut rng = seeded_rng(3);
        let trials = 100_000;
        let mut kept = vec![0usize; 8];
        for _ in 0..trials {
            let an = forward_mask(&a0, 2, &s, &mut rng).unwrap();
            for (k, c) in kept.iter_mut().enumerate() {
                if !an.is_masked(k) {
                    *c += 1;
                }
            }
        }
        for c in kept {
            let rate = c as f64 / trials as f64;
            assert!((rate - 0.5).abs() < 0.01, "keep rate {rate}");
        }
    }

    #[test]
    fn masked_seq_validation() {
        let v = vocab(3);
        assert!(MaskedSeq::new(vec![0, 4], v).is_err());
        let s = MaskedSeq::new(vec![0, 3, 2], v).unwrap();
        assert_eq!(s.n_masked(), 1);
        assert!(s.is_masked(1));
        assert!(Vocab::new(1).is_err());
    }
}
