//! Small environments over sequence actions: a combinatorial bandit, a
//! gridworld driven by fixed-length move sequences, and a one-shot
//! cooperative game.

use std::collections::{BTreeMap, VecDeque};
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::oracle::{value_iteration, TabularMdp};
use crate::schedule::{MaskedSeq, Vocab};
use crate::seeded_rng;

/// Largest action space searched exhaustively for the bandit optimum.
pub const MAX_BONUS_SEARCH: usize = 1_000_000;
/// Largest macro-action set materialized for the grid MDP.
pub const MAX_GRID_ACTIONS: usize = 4096;

pub const STEP_COST: f64 = 0.01;
pub const BONUS_SCALE: f64 = 0.1;
const BONUS_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    SeqBandit,
    GridMacro,
    CoopGame,
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq_bandit" => Ok(Self::SeqBandit),
            "grid_macro" => Ok(Self::GridMacro),
            "coop_game" => Ok(Self::CoopGame),
            _ => Err(Error::Config(format!("unknown env kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Sequence length.
    pub k: usize,
    /// Number of primitive actions.
    pub n_primitive: usize,
    /// Grid side length.
    pub grid: usize,
    /// Fraction of grid cells turned into walls.
    pub wall_density: f64,
    /// Episode limit in primitive steps (grid only).
    pub horizon: usize,
    /// Within-macro discount; `None` means `γ^(1/K)` of the agent's discount.
    pub gamma_env: Option<f64>,
    /// Enables the frozen-network bonus of the bandit.
    pub bonus: bool,
    pub seed: u64,
}

impl EnvSpec {
    pub fn seq_bandit(k: usize, n_primitive: usize, seed: u64) -> Self {
        Self {
            kind: EnvKind::SeqBandit,
            k,
            n_primitive,
            grid: 0,
            wall_density: 0.0,
            horizon: 1,
            gamma_env: None,
            bonus: false,
            seed,
        }
    }

    pub fn grid_macro(width: usize, k: usize, seed: u64) -> Self {
        Self {
            kind: EnvKind::GridMacro,
            k,
            n_primitive: 4,
            grid: width,
            wall_density: 0.2,
            horizon: 8 * width,
            gamma_env: None,
            bonus: false,
            seed,
        }
    }

    pub fn coop_game(k: usize, n_primitive: usize, seed: u64) -> Self {
        Self { kind: EnvKind::CoopGame, ..Self::seq_bandit(k, n_primitive, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("env.k must be at least 1".into()));
        }
        if self.n_primitive < 2 {
            return Err(Error::Config("env.n_primitive must be at least 2".into()));
        }
        if self.kind == EnvKind::GridMacro {
            if self.n_primitive != 4 {
                return Err(Error::Config("grid_macro has exactly 4 primitive moves".into()));
            }
            if self.grid < 2 {
                return Err(Error::Config("grid must be at least 2x2".into()));
            }
            if !(0.0..0.6).contains(&self.wall_density) {
                return Err(Error::Config(format!("wall density {} outside [0, 0.6)", self.wall_density)));
            }
            if self.horizon == 0 {
                return Err(Error::Config("env.horizon must be positive".into()));
            }
        }
        if let Some(g) = self.gamma_env {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("env.gamma_env {g} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.n_primitive)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

/// Frozen one-hidden-layer tanh scorer of one-hot action sequences.
#[derive(Clone, Debug)]
struct BonusNet {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl BonusNet {
    fn new(input: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed ^ 0x626f6e7573);
        let scale = 3.0 / (input as f64).sqrt();
        let w1 = (0..input * BONUS_HIDDEN).map(|_| rng.gen_range(-scale..scale)).collect();
        let b1 = (0..BONUS_HIDDEN).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w2 = (0..BONUS_HIDDEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { w1, b1, w2 }
    }

    /// `0.1 · sigmoid(w2 · tanh(W1ᵀ onehot(a) + b1))`.
    fn score(&self, tokens: &[usize], n_primitive: usize) -> f64 {
        let mut h = self.b1.clone();
        for (k, &t) in tokens.iter().enumerate() {
            let row = (k * n_primitive + t) * BONUS_HIDDEN;
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += self.w1[row + j];
            }
        }
        let out: f64 = h.iter().zip(&self.w2).map(|(x, w)| x.tanh() * w).sum();
        BONUS_SCALE / (1.0 + (-out).exp())
    }
}

/// Wall layout of a grid, start at the top-left and goal at the bottom-right.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub width: usize,
    pub walls: Vec<bool>,
}

impl GridMap {
    pub fn start(&self) -> usize {
        0
    }

    pub fn goal(&self) -> usize {
        self.width * self.width - 1
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.width
    }

    /// Move 0 up, 1 down, 2 left, 3 right; blocked moves stay put.
    pub fn step(&self, cell: usize, mv: usize) -> usize {
        let w = self.width;
        let (x, y) = (cell % w, cell / w);
        let (nx, ny) = match mv {
            0 if y > 0 => (x, y - 1),
            1 if y + 1 < w => (x, y + 1),
            2 if x > 0 => (x - 1, y),
            3 if x + 1 < w => (x + 1, y),
            _ => (x, y),
        };
        let next = ny * w + nx;
        if self.walls[next] {
            cell
        } else {
            next
        }
    }

    /// Shortest path lengths from every cell to the goal; `None` if unreachable.
    pub fn distances_to_goal(&self) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_cells()];
        let mut queue = VecDeque::from([self.goal()]);
        dist[self.goal()] = Some(0);
        while let Some(c) = queue.pop_front() {
            for mv in 0..4 {
                // moves are reversible on a grid, so forward neighbours suffice
                let n = self.step(c, mv);
                if dist[n].is_none() {
                    dist[n] = Some(dist[c].unwrap() + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    fn generate(width: usize, density: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed ^ 0x67726964);
        loop {
            let mut walls: Vec<bool> = (0..width * width).map(|_| rng.gen_bool(density)).collect();
            walls[0] = false;
            walls[width * width - 1] = false;
            let map = Self { width, walls };
            if map.distances_to_goal()[map.start()].is_some() {
                return map;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Layout {
    Bandit { target: Vec<usize>, bonus: Option<BonusNet> },
    Grid(GridMap),
    Coop { patterns: [Vec<usize>; 2] },
}

/// An environment instance. Stepping is a pure function of the state
/// features and the action.
#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    gamma_env: f64,
    layout: Layout,
}

impl Env {
    /// Builds the seed-derived layout. `agent_gamma` sets the default within-macro discount.
    pub fn new(spec: EnvSpec, agent_gamma: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(spec.seed);
        let layout = match spec.kind {
            EnvKind::SeqBandit => Layout::Bandit {
                target: (0..spec.k).map(|_| rng.gen_range(0..spec.n_primitive)).collect(),
                bonus: spec.bonus.then(|| BonusNet::new(spec.k * spec.n_primitive, spec.seed)),
            },
            EnvKind::GridMacro => Layout::Grid(GridMap::generate(spec.grid, spec.wall_density, spec.seed)),
            EnvKind::CoopGame => {
                if (spec.n_primitive as f64).powi(spec.k as i32) < 2.0 {
                    return Err(Error::Config("coop_game needs at least two joint actions".into()));
                }
                let first: Vec<usize> = (0..spec.k).map(|_| rng.gen_range(0..spec.n_primitive)).collect();
                let second = loop {
                    let p: Vec<usize> = (0..spec.k).map(|_| rng.gen_range(0..spec.n_primitive)).collect();
                    if p != first {
                        break p;
                    }
                };
                Layout::Coop { patterns: [first, second] }
            }
        };
        let gamma_env = spec.gamma_env.unwrap_or_else(|| agent_gamma.powf(1.0 / spec.k as f64));
        Ok(Self { spec, gamma_env, layout })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn gamma_env(&self) -> f64 {
        self.gamma_env
    }

    pub fn state_dim(&self) -> usize {
        match &self.layout {
            Layout::Grid(map) => map.n_cells(),
            _ => 1,
        }
    }

    pub fn grid_map(&self) -> Option<&GridMap> {
        match &self.layout {
            Layout::Grid(map) => Some(map),
            _ => None,
        }
    }

    pub fn bandit_target(&self) -> Option<&[usize]> {
        match &self.layout {
            Layout::Bandit { target, .. } => Some(target),
            _ => None,
        }
    }

    pub fn coop_patterns(&self) -> Option<&[Vec<usize>; 2]> {
        match &self.layout {
            Layout::Coop { patterns } => Some(patterns),
            _ => None,
        }
    }

    /// Episode limit in decisions: one for the one-shot tasks, `⌈horizon/K⌉` for the grid.
    pub fn max_decisions(&self) -> usize {
        match self.layout {
            Layout::Grid(_) => self.spec.horizon.div_ceil(self.spec.k),
            _ => 1,
        }
    }

    pub fn features(&self, cell: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.state_dim()];
        f[cell] = 1.0;
        f
    }

    /// Grid cell encoded by one-hot features.
    pub fn cell_of(&self, state: &[f64]) -> Result<usize> {
        if state.len() != self.state_dim() {
            return Err(Error::Shape(format!("state has {} features, expected {}", state.len(), self.state_dim())));
        }
        state
            .iter()
            .position(|&x| x == 1.0)
            .ok_or_else(|| invalid!("state is not a one-hot cell encoding"))
    }

    pub fn reset<R: Rng + ?Sized>(&self, _rng: &mut R) -> Vec<f64> {
        match &self.layout {
            Layout::Grid(map) => self.features(map.start()),
            _ => vec![1.0],
        }
    }

    fn check_action(&self, a: &MaskedSeq) -> Result<()> {
        a.ensure_clean()?;
        if a.len() != self.spec.k || a.vocab().size() != self.spec.n_primitive {
            return Err(invalid!("action {:?} does not fit K={}, |A|={}", a.tokens(), self.spec.k, self.spec.n_primitive));
        }
        Ok(())
    }

    /// Reward of a one-shot task, without checks.
    fn one_shot_reward(&self, tokens: &[usize]) -> f64 {
        match &self.layout {
            Layout::Bandit { target, bonus } => {
                let hits = tokens.iter().zip(target).filter(|(a, b)| a == b).count();
                let base = hits as f64 / self.spec.k as f64;
                base + bonus.as_ref().map_or(0.0, |b| b.score(tokens, self.spec.n_primitive))
            }
            Layout::Coop { patterns } => {
                if patterns.iter().any(|p| p == tokens) {
                    1.0
                } else if tokens.iter().all(|&t| t == tokens[0]) {
                    0.2
                } else {
                    0.0
                }
            }
            Layout::Grid(_) => unreachable!(),
        }
    }

    /// Runs moves from `cell` until they run out or the goal is hit.
    /// Returns the final cell, discounted reward, and whether the goal was reached.
    fn run_moves(&self, map: &GridMap, mut cell: usize, moves: &[usize]) -> (usize, f64, bool) {
        let mut reward = 0.0;
        let mut disc = 1.0;
        for &mv in moves {
            cell = map.step(cell, mv);
            if cell == map.goal() {
                return (cell, reward + disc, true);
            }
            reward -= disc * STEP_COST;
            disc *= self.gamma_env;
        }
        (cell, reward, false)
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &[f64], a: &MaskedSeq, _rng: &mut R) -> Result<StepResult> {
        self.check_action(a)?;
        let mut info = BTreeMap::new();
        match &self.layout {
            Layout::Grid(map) => {
                let cell = self.cell_of(state)?;
                if cell == map.goal() {
                    return Err(invalid!("episode already ended at the goal"));
                }
                let (next, reward, done) = self.run_moves(map, cell, a.tokens());
                info.insert("success".into(), if done { 1.0 } else { 0.0 });
                Ok(StepResult { next_state: self.features(next), reward, done, info })
            }
            _ => {
                let reward = self.one_shot_reward(a.tokens());
                Ok(StepResult { next_state: state.to_vec(), reward, done: true, info })
            }
        }
    }

    /// A single primitive move on the grid; reward 1 at the goal, `−0.01` otherwise.
    pub fn step_primitive(&self, state: &[f64], mv: usize) -> Result<StepResult> {
        let map = self.grid_map().ok_or_else(|| invalid!("primitive steps exist only on the grid"))?;
        if mv >= 4 {
            return Err(invalid!("move {mv} out of range"));
        }
        let cell = self.cell_of(state)?;
        let (next, reward, done) = self.run_moves(map, cell, &[mv]);
        let mut info = BTreeMap::new();
        info.insert("success".into(), if done { 1.0 } else { 0.0 });
        Ok(StepResult { next_state: self.features(next), reward, done, info })
    }

    /// Macro-action MDP over grid cells with every `4^K` move sequence.
    /// The goal is absorbing with zero reward.
    pub fn macro_mdp(&self, gamma: f64) -> Result<TabularMdp> {
        let map = self.grid_map().ok_or_else(|| invalid!("only the grid has a tabular form"))?;
        let n_actions = 4usize
            .checked_pow(self.spec.k as u32)
            .filter(|&n| n <= MAX_GRID_ACTIONS)
            .ok_or_else(|| Error::RefusedScale(format!("4^{} macro-actions", self.spec.k)))?;
        let n = map.n_cells();
        let mut transitions = vec![vec![vec![0.0; n]; n_actions]; n];
        let mut rewards = vec![vec![0.0; n_actions]; n];
        let mut moves = vec![0; self.spec.k];
        for cell in 0..n {
            for a in 0..n_actions {
                if cell == map.goal() || map.walls[cell] {
                    transitions[cell][a][cell] = 1.0;
                    continue;
                }
                let mut idx = a;
                for pos in (0..self.spec.k).rev() {
                    moves[pos] = idx % 4;
                    idx /= 4;
                }
                let (next, r, _) = self.run_moves(map, cell, &moves);
                transitions[cell][a][next] = 1.0;
                rewards[cell][a] = r;
            }
        }
        let mut start = vec![0.0; n];
        start[map.start()] = 1.0;
        Ok(TabularMdp { n_states: n, n_actions, transitions, rewards, gamma, start })
    }

    /// Probability that uniformly random primitive moves reach the goal
    /// within the horizon, by dynamic programming over cells.
    pub fn random_walk_success(&self) -> Result<f64> {
        let map = self.grid_map().ok_or_else(|| invalid!("random walks are defined on the grid"))?;
        let mut p = vec![0.0; map.n_cells()];
        p[map.start()] = 1.0;
        let mut hit = 0.0;
        for _ in 0..self.spec.horizon {
            let mut next = vec![0.0; map.n_cells()];
            for (c, &pc) in p.iter().enumerate() {
                if pc == 0.0 {
                    continue;
                }
                for mv in 0..4 {
                    next[map.step(c, mv)] += pc / 4.0;
                }
            }
            hit += next[map.goal()];
            next[map.goal()] = 0.0;
            p = next;
        }
        Ok(hit)
    }

    /// Best achievable expected return from the start state.
    ///
    /// The bandit optimum is the exhaustive maximum of the full reward when
    /// the action space has at most a million entries, else 1.
    pub fn optimal_value(&self, gamma: f64) -> Result<f64> {
        match &self.layout {
            Layout::Bandit { bonus: None, .. } | Layout::Coop { .. } => Ok(1.0),
            Layout::Bandit { bonus: Some(_), .. } => {
                let (k, a) = (self.spec.k, self.spec.n_primitive);
                let count = (a as f64).powi(k as i32);
                if count > MAX_BONUS_SEARCH as f64 {
                    return Ok(1.0);
                }
                let mut best = f64::NEG_INFINITY;
                let mut tokens = vec![0; k];
                for mut idx in 0..count as usize {
                    for pos in (0..k).rev() {
                        tokens[pos] = idx % a;
                        idx /= a;
                    }
                    best = best.max(self.one_shot_reward(&tokens));
                }
                Ok(best)
            }
            Layout::Grid(map) => {
                let mdp = self.macro_mdp(gamma)?;
                let (v, _) = value_iteration(&mdp, 1e-10)?;
                Ok(v[map.start()])
            }
        }
    }
}
