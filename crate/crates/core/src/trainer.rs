//! The outer policy-iteration loop: actors fill a replay buffer with the
//! current policy, the learner alternates TD steps on the Q-network with
//! policy-improvement steps, and target networks trail by Polyak averaging.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::diffusion::{DiffusionModel, ElboMode, SamplerConfig, SamplerMode};
use crate::envs::{Env, EnvKind, EnvSpec};
use crate::error::{invalid, Error, Result};
use crate::net::checkpoint::Checkpoint;
use crate::net::{init_params, init_qnet, Adam, Arch, DenoiserSpec, ParamStore, QNetSpec};
use crate::pmd::{fkl_loss, rkl_loss_elbo_ratio, rkl_loss_single_step, ClipConfig, PairSource, PmdBatch, RklSample, TemperatureState};
use crate::schedule::{MaskedSeq, NoiseSchedule, ScheduleKind, Vocab};
use crate::value::{polyak_update, td_loss, Critic, ReplayBuffer, Transition};
use crate::{seeded_rng, Rng};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV_VAR: &str = "RLD2_SEED";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
const EVAL_SALT: u64 = 0x6576_616c;
const LEARNER_SALT: u64 = 0x6c65_6172;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyLoss {
    Fkl,
    RklSingleStep,
    RklElboRatio,
}

impl FromStr for PolicyLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fkl" => Ok(Self::Fkl),
            "rkl_single_step" => Ok(Self::RklSingleStep),
            "rkl_elbo_ratio" => Ok(Self::RklElboRatio),
            _ => Err(Error::Config(format!("unknown pmd.loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmdConfig {
    pub loss: PolicyLoss,
    pub lambda: f64,
    /// Actions sampled from the old policy per state.
    pub m: usize,
    /// States per improvement step, taken from the replay batch.
    pub states: usize,
    pub elbo_mode: ElboMode,
    /// Monte-Carlo ELBO draws per action in `mc` mode.
    pub mc_draws: usize,
    pub clip: ClipConfig,
    pub tune_lambda: bool,
    pub epsilon: f64,
    pub temperature_lr: f64,
    /// Polyak rate of the old policy; 1 copies the policy after every step.
    pub policy_tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueConfig {
    pub gamma: f64,
    pub tau: f64,
    pub m_boot: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub env: EnvSpec,
    pub denoiser: Arch,
    pub time_dim: usize,
    pub n_steps: usize,
    pub schedule: ScheduleKind,
    pub policy_lr: f64,
    pub max_grad_norm: Option<f64>,
    pub sampler: SamplerConfig,
    pub pmd: PmdConfig,
    pub value: ValueConfig,
    pub buffer_capacity: usize,
    pub batch: usize,
    pub warmup: usize,
    pub sample_to_insert: f64,
    pub total_env_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
    pub actors: usize,
    /// Parallel environments per actor.
    pub lanes: usize,
    pub seed: u64,
    pub planner_mode: bool,
    pub onpolicy_diffusion: bool,
    pub log_wall_time: bool,
    pub out_dir: Option<PathBuf>,
    /// The key=value entries this configuration was parsed from.
    pub raw: BTreeMap<String, String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

struct Keys<'a> {
    map: &'a BTreeMap<String, String>,
    used: BTreeSet<&'a str>,
}

impl<'a> Keys<'a> {
    fn get<T: FromStr>(&mut self, key: &'a str, default: T) -> Result<T> {
        self.used.insert(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    /// Like `get`, but also accepts an alternative spelling of the key.
    fn get_or_alias<T: FromStr>(&mut self, key: &'a str, alias: &'a str, default: T) -> Result<T> {
        if self.map.contains_key(key) && self.map.contains_key(alias) {
            return Err(Error::Config(format!("both {key} and {alias} are set")));
        }
        self.used.insert(alias);
        match self.map.contains_key(alias) {
            true => self.get(alias, default),
            false => self.get(key, default),
        }
    }

    fn opt<T: FromStr>(&mut self, key: &'a str) -> Result<Option<T>> {
        self.used.insert(key);
        self.map
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))))
            .transpose()
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().find(|k| !self.used.contains(k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

fn parse_grid(v: &str) -> Result<usize> {
    let (a, b) = v.split_once('x').ok_or_else(|| Error::Config(format!("env.grid: expected WxW, got {v:?}")))?;
    let (a, b): (usize, usize) = (
        a.trim().parse().map_err(|_| Error::Config(format!("env.grid: bad width {a:?}")))?,
        b.trim().parse().map_err(|_| Error::Config(format!("env.grid: bad height {b:?}")))?,
    );
    if a != b {
        return Err(Error::Config(format!("env.grid must be square, got {v}")));
    }
    Ok(a)
}

impl TrainerConfig {
    pub fn from_kv(map: BTreeMap<String, String>) -> Result<Self> {
        let mut k = Keys { map: &map, used: BTreeSet::new() };
        let kind: EnvKind = k.get("env.kind", EnvKind::SeqBandit)?;
        let seq_len = k.get("env.k", 4)?;
        let n_prim = k.get("env.n_primitive", 4)?;
        let env_seed = k.get("env.seed", 0u64)?;
        let mut env = match kind {
            EnvKind::SeqBandit => EnvSpec::seq_bandit(seq_len, n_prim, env_seed),
            EnvKind::CoopGame => EnvSpec::coop_game(seq_len, n_prim, env_seed),
            EnvKind::GridMacro => {
                let w = match k.opt::<String>("env.grid")? {
                    Some(v) => parse_grid(&v)?,
                    None => 5,
                };
                let mut e = EnvSpec::grid_macro(w, seq_len, env_seed);
                e.n_primitive = n_prim;
                e
            }
        };
        env.horizon = k.get("env.horizon", env.horizon)?;
        env.wall_density = k.get("env.wall_density", env.wall_density)?;
        env.gamma_env = k.opt("env.gamma_env")?;
        env.bonus = k.get("env.bonus", false)?;

        let arch_name: String = k.get("net.arch", "transformer".to_string())?;
        let denoiser = match arch_name.as_str() {
            "transformer" => Arch::Transformer {
                d_model: k.get("net.d_model", 32)?,
                n_blocks: k.get("net.n_blocks", 1)?,
                ff_hidden: k.get("net.ff_hidden", 64)?,
                pos_emb: k.get("net.pos_emb", true)?,
            },
            "mlp" => Arch::Mlp { hidden: k.get("net.hidden", 64)?, layers: k.get("net.layers", 2)? },
            other => return Err(Error::Config(format!("unknown net.arch {other:?}"))),
        };
        let one_shot = kind != EnvKind::GridMacro;
        let sampler = SamplerConfig {
            mode: k.get("sampler.mode", SamplerMode::Ancestral)?,
            top_p: k.get("sampler.top_p", 0.98)?,
            remask_eta: k.get("sampler.remask_eta", 0.0)?,
        };
        let pmd = PmdConfig {
            loss: k.get("pmd.loss", PolicyLoss::Fkl)?,
            lambda: k.get("pmd.lambda", 1.0)?,
            m: k.get_or_alias("pmd.m", "pmd.samples_M", 8)?,
            states: k.get("pmd.states", 4)?,
            elbo_mode: k.get("pmd.elbo_mode", ElboMode::Mc)?,
            mc_draws: k.get("pmd.mc_draws", 1)?,
            clip: ClipConfig { ratio_clip: k.get_or_alias("pmd.ratio_clip", "clip.ratio", 0.2)?, kl_coeff: k.get("pmd.kl_coeff", 0.0)? },
            tune_lambda: k.get_or_alias("pmd.tune_lambda", "pmd.auto_temp", false)?,
            epsilon: k.get("pmd.epsilon", 0.1)?,
            temperature_lr: k.get("pmd.temperature_lr", 1e-2)?,
            policy_tau: 0.0,
        };
        let value = ValueConfig {
            gamma: k.get("value.gamma", if one_shot { 0.0 } else { crate::value::DEFAULT_GAMMA })?,
            tau: k.get("value.tau", crate::value::DEFAULT_TAU)?,
            m_boot: k.get("value.m_boot", crate::value::DEFAULT_M_BOOT)?,
            hidden: k.get("value.hidden", 64)?,
            layers: k.get("value.layers", 2)?,
            lr: k.get("value.lr", 1e-4)?,
        };
        let pmd = PmdConfig { policy_tau: k.get("pmd.policy_tau", value.tau)?, ..pmd };
        let batch = k.get("learner.batch", 32)?;
        let seed = k.get("seed", 0u64)?;
        let cfg = Self {
            env,
            denoiser,
            time_dim: k.get("net.time_dim", 8)?,
            n_steps: k.get("diffusion.n_steps", 4)?,
            schedule: k.get("diffusion.schedule", ScheduleKind::Linear)?,
            policy_lr: k.get("net.lr", 1e-4)?,
            max_grad_norm: k.opt("net.max_grad_norm")?,
            sampler,
            pmd,
            value,
            buffer_capacity: k.get("buffer.capacity", 100_000)?,
            batch,
            warmup: k.get("learner.warmup", batch)?,
            sample_to_insert: k.get("learner.sample_to_insert", 4.0)?,
            total_env_steps: k.get("total_env_steps", 10_000)?,
            eval_every: k.get("eval_every", 1000)?,
            eval_episodes: k.get("eval_episodes", 100)?,
            checkpoint_every: k.get("checkpoint_every", 0)?,
            actors: k.get("actors", 1)?,
            lanes: k.get("actors.lanes", 8)?,
            seed,
            planner_mode: k.get("planner_mode", false)?,
            onpolicy_diffusion: k.get("onpolicy_diffusion", false)?,
            log_wall_time: k.get("log_wall_time", false)?,
            out_dir: k.opt::<String>("out_dir")?.map(PathBuf::from),
            raw: BTreeMap::new(),
        };
        k.finish()?;
        let cfg = Self { raw: map, ..cfg };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(parse_kv(text)?)
    }

    /// Reads a config file, applies `key=value` overrides, then the seed
    /// environment variable.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        let mut map = parse_kv(&text)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            seed.parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={seed:?} is not a u64")))?;
            map.insert("seed".into(), seed);
        }
        Self::from_kv(map)
    }

    /// The configuration as `key = value` lines, in key order.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.raw {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::Config(msg));
        self.env.validate()?;
        self.sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pmd.clip.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.planner_mode && self.env.kind != EnvKind::GridMacro {
            return c("planner_mode needs env.kind = grid_macro".into());
        }
        if self.n_steps == 0 || self.time_dim == 0 {
            return c("diffusion.n_steps and net.time_dim must be positive".into());
        }
        if self.pmd.m < 2 || self.pmd.states == 0 {
            return c("pmd.m must be at least 2 and pmd.states positive".into());
        }
        if !(self.pmd.lambda > 0.0) || !(self.pmd.epsilon > 0.0) || !(self.pmd.temperature_lr > 0.0) {
            return c("pmd.lambda, pmd.epsilon and pmd.temperature_lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pmd.policy_tau) || !(0.0..=1.0).contains(&self.value.tau) {
            return c("Polyak rates must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.value.gamma) {
            return c(format!("value.gamma {} outside [0, 1)", self.value.gamma));
        }
        if self.value.m_boot == 0 || self.value.hidden == 0 {
            return c("value.m_boot and value.hidden must be positive".into());
        }
        if !(self.policy_lr > 0.0) || !(self.value.lr > 0.0) {
            return c("learning rates must be positive".into());
        }
        if self.batch == 0 || self.buffer_capacity == 0 || self.actors == 0 || self.lanes == 0 {
            return c("learner.batch, buffer.capacity, actors and actors.lanes must be positive".into());
        }
        if !(self.sample_to_insert > 0.0) {
            return c("learner.sample_to_insert must be positive".into());
        }
        if self.eval_every == 0 {
            return c("eval_every must be positive".into());
        }
        if self.pmd.loss != PolicyLoss::Fkl && self.sampler.mode == SamplerMode::Remask {
            return c("reverse-KL losses need a sampler without re-masking".into());
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_eval_return: f64,
    pub eval_stderr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    pub mean_elbo: f64,
    pub lambda: f64,
    pub realized_kl_estimate: f64,
    pub td_loss: f64,
    pub policy_loss: f64,
    pub forward_pairs: usize,
    pub onpolicy_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    pub stderr: f64,
    /// Fraction of episodes reaching the goal (grid only).
    pub success_rate: Option<f64>,
    /// Clean actions chosen at the first decision of each episode.
    pub first_actions: Vec<MaskedSeq>,
}

/// Samples a full plan and returns its first move.
pub fn act_planner<R: rand::Rng + ?Sized>(
    model: &DiffusionModel,
    params: &ParamStore,
    s: &[f64],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<usize> {
    let (a, _) = model.sample_action(params, s, cfg, rng)?;
    Ok(a.tokens()[0])
}

#[derive(Clone, Debug)]
struct Lane {
    state: Vec<f64>,
    decisions: usize,
}

/// One actor: a private copy of the environment and its lanes.
#[derive(Clone, Debug)]
struct Actor {
    env: Env,
    lanes: Vec<Lane>,
    rng: Rng,
}

#[derive(Clone, Copy, Debug, Default)]
struct LearnerStats {
    td_loss: f64,
    policy_loss: f64,
    realized_kl: f64,
}

/// Owns every network, optimizer and buffer of a run.
pub struct Trainer {
    cfg: TrainerConfig,
    env: Env,
    model: DiffusionModel,
    qspec: QNetSpec,
    policy: ParamStore,
    policy_old: ParamStore,
    q: ParamStore,
    q_target: ParamStore,
    policy_opt: Adam,
    q_opt: Adam,
    temperature: TemperatureState,
    replay: ReplayBuffer,
    actors: Vec<Actor>,
    rng: Rng,
    env_steps: usize,
    learner_steps: usize,
    tokens: f64,
    forward_pairs: usize,
    onpolicy_pairs: usize,
    last: LearnerStats,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let env = Env::new(cfg.env.clone(), cfg.value.gamma)?;
        let vocab = cfg.env.vocab()?;
        let spec = DenoiserSpec {
            vocab,
            seq_len: cfg.env.k,
            state_dim: env.state_dim(),
            time_dim: cfg.time_dim,
            arch: cfg.denoiser.clone(),
        };
        let model = DiffusionModel::new(spec, NoiseSchedule::build(cfg.schedule, cfg.n_steps)?);
        let qspec = QNetSpec {
            vocab,
            seq_len: if cfg.planner_mode { 1 } else { cfg.env.k },
            state_dim: env.state_dim(),
            hidden: cfg.value.hidden,
            layers: cfg.value.layers,
        };
        let mut init = seeded_rng(cfg.seed);
        let policy = init_params(&model.spec, &mut init)?;
        let q = init_qnet(&qspec, &mut init)?;
        let actors = (0..cfg.actors)
            .map(|i| {
                let mut rng = seeded_rng(cfg.seed.wrapping_add(1000 + i as u64));
                let lanes = (0..cfg.lanes).map(|_| Lane { state: env.reset(&mut rng), decisions: 0 }).collect();
                Actor { env: env.clone(), lanes, rng }
            })
            .collect();
        Ok(Self {
            policy_opt: Adam::new(&policy, cfg.policy_lr).with_clip(cfg.max_grad_norm),
            q_opt: Adam::new(&q, cfg.value.lr).with_clip(cfg.max_grad_norm),
            policy_old: policy.deep_copy(),
            q_target: q.deep_copy(),
            policy,
            q,
            temperature: TemperatureState::new(cfg.pmd.lambda, cfg.pmd.epsilon, cfg.pmd.temperature_lr)?,
            replay: ReplayBuffer::new(cfg.buffer_capacity)?,
            actors,
            rng: seeded_rng(cfg.seed ^ LEARNER_SALT),
            env_steps: 0,
            learner_steps: 0,
            tokens: 0.0,
            forward_pairs: 0,
            onpolicy_pairs: 0,
            last: LearnerStats::default(),
            started: Instant::now(),
            env,
            model,
            qspec,
            cfg,
        })
    }

    /// Rebuilds a trainer from a checkpoint and the `config.txt` next to it.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let cfg = TrainerConfig::load(dir.join(CONFIG_FILE), &[])?;
        let mut t = Self::new(cfg)?;
        let ck = Checkpoint::load(path)?;
        for (prefix, store) in [
            ("policy", &mut t.policy),
            ("policy_old", &mut t.policy_old),
            ("q", &mut t.q),
            ("q_target", &mut t.q_target),
        ] {
            let loaded = ck.store(prefix);
            if !loaded.same_layout(store) {
                return Err(Error::Checkpoint(format!("{prefix} parameters do not match the config")));
            }
            *store = loaded;
        }
        t.temperature.lambda = ck.scalar("lambda")?;
        t.env_steps = ck.scalar("env_steps")? as usize;
        t.learner_steps = ck.scalar("learner_steps")? as usize;
        Ok(t)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn qspec(&self) -> &QNetSpec {
        &self.qspec
    }

    pub fn policy(&self) -> &ParamStore {
        &self.policy
    }

    pub fn q_params(&self) -> &ParamStore {
        &self.q
    }

    pub fn lambda(&self) -> f64 {
        self.temperature.lambda
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn learner_steps(&self) -> usize {
        self.learner_steps
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    /// Noisy inputs fed to the ELBO term so far: (forward-masked, on-policy).
    pub fn pair_counters(&self) -> (usize, usize) {
        (self.forward_pairs, self.onpolicy_pairs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_store("policy", &self.policy);
        ck.put_store("policy_old", &self.policy_old);
        ck.put_store("q", &self.q);
        ck.put_store("q_target", &self.q_target);
        ck.put_scalar("lambda", self.temperature.lambda);
        ck.put_scalar("env_steps", self.env_steps as f64);
        ck.put_scalar("learner_steps", self.learner_steps as f64);
        ck
    }

    fn save_checkpoint(&self, suffix: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.cfg.out_dir else { return Ok(None) };
        let path = dir.join(format!("ckpt_{}{suffix}.rld2", self.env_steps));
        self.checkpoint().save(&path)?;
        Ok(Some(path))
    }

    /// One decision in every lane of every actor, pushed in actor order.
    /// Returns the number of transitions inserted.
    pub fn collect_round(&mut self) -> Result<usize> {
        let model = &self.model;
        let policy = &self.policy;
        let sampler = &self.cfg.sampler;
        let planner = self.cfg.planner_mode;
        let vocab = self.model.spec.vocab;
        let work = |actor: &mut Actor| actor_round(actor, model, policy, sampler, planner, vocab);
        let results: Vec<Result<Vec<Transition>>> = if self.actors.len() == 1 {
            vec![work(&mut self.actors[0])]
        } else {
            std::thread::scope(|sc| {
                let handles: Vec<_> = self.actors.iter_mut().map(|a| sc.spawn(move || work(a))).collect();
                handles.into_iter().map(|h| h.join().expect("actor thread panicked")).collect()
            })
        };
        let remaining = self.cfg.total_env_steps.saturating_sub(self.env_steps);
        let mut inserted = 0;
        for r in results {
            for tr in r? {
                if inserted < remaining {
                    self.replay.push(tr);
                    inserted += 1;
                }
            }
        }
        self.env_steps += inserted;
        Ok(inserted)
    }

    /// TD step, policy-improvement step, target updates, optional temperature step.
    pub fn learner_step(&mut self) -> Result<()> {
        let batch = self.replay.sample(self.cfg.batch, &mut self.rng)?;
        let critic = Critic { qspec: &self.qspec, model: &self.model, sampler: &self.cfg.sampler, commit_first: self.cfg.planner_mode };
        let targets =
            critic.q_targets(&batch, &self.q_target, &self.policy, self.cfg.value.m_boot, self.cfg.value.gamma, &mut self.rng)?;
        let td = td_loss(&self.qspec, &mut self.q, &batch, &targets)?;
        self.guard(td, "td loss")?;
        self.q_opt.step(&mut self.q).or_else(|e| self.abort(e))?;

        let states: Vec<Vec<f64>> = batch.iter().take(self.cfg.pmd.states).map(|t| t.state.clone()).collect();
        let lambda = self.temperature.lambda;
        let batches = critic.advantages(&states, &self.q, &self.policy_old, self.cfg.pmd.m, lambda, &mut self.rng)?;
        let policy_loss = self.improve(&batches)?;
        self.guard(policy_loss, "policy loss")?;
        self.policy_opt.step(&mut self.policy).or_else(|e| self.abort(e))?;

        polyak_update(&mut self.q_target, &self.q, self.cfg.value.tau)?;
        polyak_update(&mut self.policy_old, &self.policy, self.cfg.pmd.policy_tau)?;
        if self.cfg.pmd.tune_lambda {
            for b in &batches {
                self.temperature = crate::pmd::tune_lambda(&b.advantages, self.temperature)?;
            }
        }
        let realized_kl = batches
            .iter()
            .map(|b| b.weights.iter().map(|w| if *w > 0.0 { w * (w * b.len() as f64).ln() } else { 0.0 }).sum::<f64>())
            .sum::<f64>()
            / batches.len() as f64;
        self.last = LearnerStats { td_loss: td, policy_loss, realized_kl };
        self.learner_steps += 1;
        Ok(())
    }

    fn improve(&mut self, batches: &[PmdBatch]) -> Result<f64> {
        let pmd = &self.cfg.pmd;
        match pmd.loss {
            PolicyLoss::Fkl => {
                let source = if self.cfg.onpolicy_diffusion {
                    PairSource::OnPolicy
                } else {
                    PairSource::Forward { mode: pmd.elbo_mode, draws: pmd.mc_draws }
                };
                let report = fkl_loss(&self.model, &mut self.policy, batches, source, &mut self.rng)?;
                match source {
                    PairSource::OnPolicy => self.onpolicy_pairs += report.pairs,
                    PairSource::Forward { .. } => self.forward_pairs += report.pairs,
                }
                Ok(report.loss)
            }
            PolicyLoss::RklSingleStep | PolicyLoss::RklElboRatio => {
                let samples: Vec<RklSample<'_>> = batches
                    .iter()
                    .flat_map(|b| {
                        b.trajectories.iter().zip(&b.advantages).map(|(traj, &advantage)| RklSample {
                            traj,
                            state: &b.state,
                            advantage,
                        })
                    })
                    .collect();
                if pmd.loss == PolicyLoss::RklSingleStep {
                    rkl_loss_single_step(&self.model, &mut self.policy, &self.policy_old, &samples, &pmd.clip)
                } else {
                    rkl_loss_elbo_ratio(&self.model, &mut self.policy, &self.policy_old, &samples, &pmd.clip)
                }
            }
        }
    }

    fn guard(&self, loss: f64, what: &str) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            self.abort(Error::NonFinite(format!("{what} is {loss} at learner step {}", self.learner_steps)))
        }
    }

    fn abort(&self, e: Error) -> Result<()> {
        if matches!(e, Error::NonFinite(_)) {
            self.save_checkpoint("_nonfinite")?;
        }
        Err(e)
    }

    /// Runs `episodes` episodes of the stochastic policy from a fixed seed.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalStats> {
        self.evaluate_params(&self.policy, episodes)
    }

    pub fn evaluate_params(&self, params: &ParamStore, episodes: usize) -> Result<EvalStats> {
        if episodes == 0 {
            return Err(invalid!("evaluation needs at least one episode"));
        }
        let mut rng = seeded_rng(self.cfg.seed ^ EVAL_SALT);
        let env = &self.env;
        let limit = if self.cfg.planner_mode { env.spec().horizon } else { env.max_decisions() };
        let mut returns = Vec::with_capacity(episodes);
        let mut successes = 0usize;
        let mut first_actions = Vec::with_capacity(episodes);
        let chunk = 256;
        for start in (0..episodes).step_by(chunk) {
            let n = chunk.min(episodes - start);
            let mut states: Vec<Vec<f64>> = (0..n).map(|_| env.reset(&mut rng)).collect();
            let mut ret = vec![0.0; n];
            let mut live: Vec<usize> = (0..n).collect();
            for t in 0..limit {
                if live.is_empty() {
                    break;
                }
                let refs: Vec<&[f64]> = live.iter().map(|&i| &states[i][..]).collect();
                let trajs = self.model.sample_batch(params, &refs, &self.cfg.sampler, &mut rng)?;
                let mut still = Vec::with_capacity(live.len());
                for (&i, traj) in live.iter().zip(&trajs) {
                    if t == 0 {
                        first_actions.push(traj.clean().clone());
                    }
                    let r = if self.cfg.planner_mode {
                        env.step_primitive(&states[i], traj.clean().tokens()[0])?
                    } else {
                        env.step(&states[i], traj.clean(), &mut rng)?
                    };
                    ret[i] += r.reward;
                    if r.info.get("success") == Some(&1.0) {
                        successes += 1;
                    }
                    if !r.done {
                        still.push(i);
                    }
                    states[i] = r.next_state;
                }
                live = still;
            }
            returns.extend(ret);
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = if returns.len() > 1 { returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let success_rate = (self.cfg.env.kind == EnvKind::GridMacro).then(|| successes as f64 / n);
        Ok(EvalStats { mean, stderr: (var / n).sqrt(), success_rate, first_actions })
    }

    fn mean_elbo(&self, actions: &[MaskedSeq], state: &[f64]) -> Result<f64> {
        let take = actions.len().min(16);
        if take == 0 {
            return Ok(f64::NAN);
        }
        let mode = if self.model.spec.seq_len <= crate::diffusion::EXACT_ENUM_MAX_K { ElboMode::ExactN } else { ElboMode::Mc };
        let mut rng = seeded_rng(self.cfg.seed ^ EVAL_SALT ^ 1);
        let mut total = 0.0;
        for a in &actions[..take] {
            total += self.model.elbo(&self.policy, a, state, mode, &mut rng)?;
        }
        Ok(total / take as f64)
    }

    fn record(&self) -> Result<MetricsRecord> {
        let ev = self.evaluate(self.cfg.eval_episodes)?;
        let s0 = self.env.reset(&mut seeded_rng(0));
        Ok(MetricsRecord {
            iteration: self.learner_steps,
            env_steps: self.env_steps,
            mean_eval_return: ev.mean,
            eval_stderr: ev.stderr,
            success_rate: ev.success_rate,
            mean_elbo: self.mean_elbo(&ev.first_actions, &s0)?,
            lambda: self.temperature.lambda,
            realized_kl_estimate: self.last.realized_kl,
            td_loss: self.last.td_loss,
            policy_loss: self.last.policy_loss,
            forward_pairs: self.forward_pairs,
            onpolicy_pairs: self.onpolicy_pairs,
            wall_time: self.cfg.log_wall_time.then(|| self.started.elapsed().as_secs_f64()),
        })
    }

    /// Runs the loop to `total_env_steps`, writing metrics and checkpoints
    /// when an output directory is configured.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let mut metrics_file = match &self.cfg.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(CONFIG_FILE), self.cfg.to_kv_string())?;
                Some(fs::File::create(dir.join(METRICS_FILE))?)
            }
            None => None,
        };
        let mut checkpoints: Vec<PathBuf> = self.save_checkpoint("")?.into_iter().collect();
        let mut metrics = Vec::new();
        let mut next_eval = self.env_steps + self.cfg.eval_every;
        let mut next_ckpt = self.cfg.checkpoint_every.max(1) + self.env_steps;
        while self.env_steps < self.cfg.total_env_steps {
            let inserted = self.collect_round()?;
            if self.replay.len() >= self.cfg.warmup {
                self.tokens += inserted as f64 * self.cfg.sample_to_insert;
                while self.tokens >= self.cfg.batch as f64 {
                    self.learner_step()?;
                    self.tokens -= self.cfg.batch as f64;
                }
            }
            let last = self.env_steps >= self.cfg.total_env_steps;
            if self.env_steps >= next_eval || last {
                let rec = self.record()?;
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec).expect("metrics serialize"))?;
                }
                metrics.push(rec);
                while next_eval <= self.env_steps {
                    next_eval += self.cfg.eval_every;
                }
            }
            if self.cfg.checkpoint_every > 0 && self.env_steps >= next_ckpt && !last {
                checkpoints.extend(self.save_checkpoint("")?);
                while next_ckpt <= self.env_steps {
                    next_ckpt += self.cfg.checkpoint_every;
                }
            }
        }
        if self.env_steps > 0 {
            checkpoints.extend(self.save_checkpoint("")?);
        }
        Ok(TrainOutcome { metrics, checkpoints })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn actor_round(
    actor: &mut Actor,
    model: &DiffusionModel,
    policy: &ParamStore,
    sampler: &SamplerConfig,
    planner: bool,
    vocab: Vocab,
) -> Result<Vec<Transition>> {
    let refs: Vec<&[f64]> = actor.lanes.iter().map(|l| &l.state[..]).collect();
    let trajs = model.sample_batch(policy, &refs, sampler, &mut actor.rng)?;
    let limit = if planner { actor.env.spec().horizon } else { actor.env.max_decisions() };
    let mut out = Vec::with_capacity(trajs.len());
    for (lane, traj) in actor.lanes.iter_mut().zip(&trajs) {
        let (action, r) = if planner {
            let mv = traj.clean().tokens()[0];
            (MaskedSeq::new(vec![mv], vocab)?, actor.env.step_primitive(&lane.state, mv)?)
        } else {
            (traj.clean().clone(), actor.env.step(&lane.state, traj.clean(), &mut actor.rng)?)
        };
        out.push(Transition::new(lane.state.clone(), action, r.reward, r.next_state.clone(), r.done)?);
        lane.decisions += 1;
        if r.done || lane.decisions >= limit {
            lane.state = actor.env.reset(&mut actor.rng);
            lane.decisions = 0;
        } else {
            lane.state = r.next_state;
        }
    }
    Ok(out)
}

/// Trains from a config and returns the trainer with its outcome.
pub fn train(cfg: TrainerConfig) -> Result<(Trainer, TrainOutcome)> {
    let mut t = Trainer::new(cfg)?;
    let out = t.run()?;
    Ok((t, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(extra: &str) -> TrainerConfig {
        TrainerConfig::parse(&format!(
            "env.kind = seq_bandit\nenv.k = 3\nenv.n_primitive = 3\nnet.d_model = 8\nnet.ff_hidden = 8\n\
             net.time_dim = 4\ndiffusion.n_steps = 3\nvalue.hidden = 8\nlearner.batch = 8\npmd.m = 4\npmd.states = 2\n\
             eval_episodes = 8\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn parse_and_defaults() {
        let cfg = small("");
        assert_eq!(cfg.env.kind, EnvKind::SeqBandit);
        assert_eq!(cfg.value.gamma, 0.0);
        assert_eq!(cfg.sample_to_insert, 4.0);
        assert_eq!(cfg.value.tau, 0.005);
        assert_eq!(cfg.pmd.temperature_lr, 1e-2);
        let grid = TrainerConfig::parse("env.kind = grid_macro\nenv.grid = 6x6\n").unwrap();
        assert_eq!(grid.env.grid, 6);
        assert_eq!(grid.value.gamma, 0.997);
        assert_eq!(TrainerConfig::parse(&small("").to_kv_string()).unwrap(), small(""));
    }

    #[test]
    fn config_errors() {
        for bad in [
            "bogus = 1",
            "env.k = many",
            "env.kind = grid_macro\nenv.grid = 5x6",
            "pmd.m = 1",
            "planner_mode = true",
            "pmd.loss = rkl_single_step\nsampler.mode = remask\nsampler.remask_eta = 0.5",
            "no equals sign",
            "pmd.m = 4\npmd.samples_M = 4",
        ] {
            assert!(matches!(TrainerConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn alternative_key_names() {
        let cfg = TrainerConfig::parse("pmd.samples_M = 12\nclip.ratio = 0.1\npmd.auto_temp = true").unwrap();
        assert_eq!(cfg.pmd.m, 12);
        assert_eq!(cfg.pmd.clip.ratio_clip, 0.1);
        assert!(cfg.pmd.tune_lambda);
    }

    #[test]
    fn zero_steps_only_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&format!("total_env_steps = 0\nout_dir = {}", dir.path().display()));
        let (_, out) = train(cfg).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.checkpoints.len(), 1);
        assert!(out.checkpoints[0].ends_with("ckpt_0.rld2"));
        assert!(dir.path().join(CONFIG_FILE).exists());
    }

    #[test]
    fn evaluation_rules() {
        let t = Trainer::new(small("")).unwrap();
        assert!(t.evaluate(0).is_err());
        let a = t.evaluate(50).unwrap();
        let b = t.evaluate(50).unwrap();
        assert_eq!(a, b);
        assert!(a.success_rate.is_none());
    }

    #[test]
    fn sample_to_insert_ratio_is_honoured() {
        let cfg = small("total_env_steps = 400\neval_every = 400\nlearner.warmup = 8");
        let (t, _) = train(cfg).unwrap();
        let consumed = t.learner_steps() * 8;
        let allowed = (t.env_steps() - 8) as f64 * 4.0;
        assert!((consumed as f64 - allowed).abs() <= 8.0 + 8.0 * 4.0, "{consumed} vs {allowed}");
    }

    #[test]
    fn pair_counters_follow_the_toggle() {
        let (t, _) = train(small("total_env_steps = 64\neval_every = 64")).unwrap();
        let (fwd, onp) = t.pair_counters();
        assert!(fwd > 0 && onp == 0);
        let (t, _) = train(small("total_env_steps = 64\neval_every = 64\nonpolicy_diffusion = true")).unwrap();
        let (fwd, onp) = t.pair_counters();
        assert!(fwd == 0 && onp > 0);
    }

    #[test]
    fn planner_commits_the_first_element() {
        let t = Trainer::new(
            TrainerConfig::parse("env.kind = grid_macro\nenv.grid = 4x4\nenv.k = 1\nplanner_mode = true\nnet.d_model = 8").unwrap(),
        )
        .unwrap();
        let s = t.env().reset(&mut seeded_rng(0));
        let cfg = SamplerConfig::ancestral();
        let mv = act_planner(t.model(), t.policy(), &s, &cfg, &mut seeded_rng(3)).unwrap();
        let (a, _) = t.model().sample_action(t.policy(), &s, &cfg, &mut seeded_rng(3)).unwrap();
        assert_eq!(a.tokens(), &[mv]);
        assert_eq!(mv, act_planner(t.model(), t.policy(), &s, &cfg, &mut seeded_rng(3)).unwrap());
    }

    #[test]
    fn wall_time_is_opt_in() {
        let (_, out) = train(small("total_env_steps = 16\neval_every = 16")).unwrap();
        assert!(out.metrics[0].wall_time.is_none());
        let line = serde_json::to_string(&out.metrics[0]).unwrap();
        assert!(!line.contains("wall_time"));
    }
}
