//! Grid maze with a risky cell.
//!
//! Map alphabet: `#` wall, `.` free, `S` start, `G` goal, `R` risky. Rows are
//! newline separated; trailing whitespace and blank lines are ignored. State
//! index is `row * width + col` with row 0 at the top.
//!
//! Moves are deterministic (up/down/left/right, blocked moves stay put). Every
//! step costs `step_reward`, except a step that lands on a risky cell, whose
//! reward is a draw from the maze's [`NoiseSpec`] instead.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Pareto, StandardNormal};

use crate::error::{Error, Result};
use crate::softmax_policy::ActionSampler;

/// The pinned 6×6 layout: the bottom row is the short path through the risky
/// cell (5 moves), the perimeter corridor is the long path (15 moves).
pub const DEFAULT_MAP: &str = "\
......
.####.
.####.
.####.
.####.
S.R..G
";

pub const N_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub fn from_index(a: usize) -> Option<Self> {
        match a {
            0 => Some(Action::Up),
            1 => Some(Action::Down),
            2 => Some(Action::Left),
            3 => Some(Action::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    Start,
    Goal,
    Risky,
}

impl Cell {
    fn symbol(self) -> char {
        match self {
            Cell::Free => '.',
            Cell::Wall => '#',
            Cell::Start => 'S',
            Cell::Goal => 'G',
            Cell::Risky => 'R',
        }
    }
}

/// One uniform component of a mixture noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformComponent {
    pub weight: f64,
    pub low: f64,
    pub high: f64,
}

/// Reward distribution of the risky cell.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    /// The risky cell pays the ordinary step reward.
    None,
    /// `mean + std · Z`.
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// `−1 − (L − E[L]) · multiplier` with `L ~ Lomax(shape, 1)`.
    Pareto {
        shape: f64,
        multiplier: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    HandcraftMixture {
        components: Vec<UniformComponent>,
    },
    /// Finite support, used by exact enumeration.
    Discrete {
        atoms: Vec<(f64, f64)>,
    },
}

impl NoiseSpec {
    pub fn gaussian() -> Self {
        NoiseSpec::Gaussian {
            mean: -1.0,
            std: 20.0,
        }
    }

    pub fn pareto() -> Self {
        NoiseSpec::Pareto {
            shape: 3.0,
            multiplier: 20.0,
        }
    }

    pub fn uniform() -> Self {
        NoiseSpec::Uniform {
            low: -25.0,
            high: 23.0,
        }
    }

    /// `U[−2,0]` w.p. 0.95, `U[−57,−56]` and `U[54,55]` w.p. 0.025 each.
    pub fn handcraft() -> Self {
        NoiseSpec::HandcraftMixture {
            components: vec![
                UniformComponent {
                    weight: 0.95,
                    low: -2.0,
                    high: 0.0,
                },
                UniformComponent {
                    weight: 0.025,
                    low: -57.0,
                    high: -56.0,
                },
                UniformComponent {
                    weight: 0.025,
                    low: 54.0,
                    high: 55.0,
                },
            ],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseSpec::None => "none",
            NoiseSpec::Gaussian { .. } => "gaussian",
            NoiseSpec::Pareto { .. } => "pareto",
            NoiseSpec::Uniform { .. } => "uniform",
            NoiseSpec::HandcraftMixture { .. } => "handcraft",
            NoiseSpec::Discrete { .. } => "discrete",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            NoiseSpec::None => true,
            NoiseSpec::Gaussian { mean, std } => mean.is_finite() && *std >= 0.0,
            NoiseSpec::Pareto { shape, multiplier } => *shape > 1.0 && multiplier.is_finite(),
            NoiseSpec::Uniform { low, high } => low.is_finite() && high > low,
            NoiseSpec::HandcraftMixture { components } => {
                !components.is_empty()
                    && components.iter().all(|c| c.weight >= 0.0 && c.high > c.low)
                    && (components.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() < 1e-9
            }
            NoiseSpec::Discrete { atoms } => {
                !atoms.is_empty()
                    && atoms.iter().all(|&(v, p)| v.is_finite() && p >= 0.0)
                    && (atoms.iter().map(|a| a.1).sum::<f64>() - 1.0).abs() < 1e-12
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid {} noise parameters",
                self.name()
            )))
        }
    }

    /// Analytic mean of a draw (`step_reward` for [`NoiseSpec::None`]).
    pub fn mean(&self, step_reward: f64) -> f64 {
        match self {
            NoiseSpec::None => step_reward,
            NoiseSpec::Gaussian { mean, .. } => *mean,
            NoiseSpec::Pareto { .. } => -1.0,
            NoiseSpec::Uniform { low, high } => 0.5 * (low + high),
            NoiseSpec::HandcraftMixture { components } => components
                .iter()
                .map(|c| c.weight * 0.5 * (c.low + c.high))
                .sum(),
            NoiseSpec::Discrete { atoms } => atoms.iter().map(|(v, p)| v * p).sum(),
        }
    }

    /// Finite support of the risky reward, if it has one.
    pub fn support(&self, step_reward: f64) -> Option<Vec<(f64, f64)>> {
        match self {
            NoiseSpec::None => Some(vec![(step_reward, 1.0)]),
            NoiseSpec::Discrete { atoms } => Some(atoms.clone()),
            _ => None,
        }
    }
}

/// One draw of the risky-cell reward.
pub fn sample_noise<R: Rng + ?Sized>(spec: &NoiseSpec, step_reward: f64, rng: &mut R) -> f64 {
    match spec {
        NoiseSpec::None => step_reward,
        NoiseSpec::Gaussian { mean, std } => {
            let z: f64 = StandardNormal.sample(rng);
            mean + std * z
        }
        NoiseSpec::Pareto { shape, multiplier } => {
            let classic = Pareto::new(1.0, *shape).expect("validated Pareto shape");
            let lomax = classic.sample(rng) - 1.0;
            -1.0 - (lomax - 1.0 / (shape - 1.0)) * multiplier
        }
        NoiseSpec::Uniform { low, high } => rng.random_range(*low..*high),
        NoiseSpec::HandcraftMixture { components } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let last = components.len() - 1;
            for (k, c) in components.iter().enumerate() {
                acc += c.weight;
                if u < acc || k == last {
                    return rng.random_range(c.low..c.high);
                }
            }
            unreachable!("mixture has at least one component")
        }
        NoiseSpec::Discrete { atoms } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for &(v, p) in atoms {
                acc += p;
                if u < acc {
                    return v;
                }
            }
            atoms[atoms.len() - 1].0
        }
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: usize,
    pub reward: f64,
    pub done: bool,
    pub reached_goal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMaze {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    start: usize,
    goal: usize,
    pub gamma: f64,
    pub max_steps: usize,
    pub step_reward: f64,
    pub noise: NoiseSpec,
}

impl Default for GridMaze {
    fn default() -> Self {
        parse_map(DEFAULT_MAP).expect("default map is valid")
    }
}

/// Parses and validates an ASCII map; environment parameters take their defaults
/// (γ = 0.999, 100 steps, step reward −1, no noise).
pub fn parse_map(text: &str) -> Result<GridMaze> {
    let rows: Vec<&str> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .collect();
    if rows.is_empty() {
        return Err(Error::map(None, None, "map is empty"));
    }
    let width = rows[0].chars().count();
    let mut cells = Vec::with_capacity(width * rows.len());
    let mut start = None;
    let mut goal = None;
    for (r, row) in rows.iter().enumerate() {
        let len = row.chars().count();
        if len != width {
            return Err(Error::map(
                Some(r),
                None,
                format!("row has {len} cells, expected {width}"),
            ));
        }
        for (c, ch) in row.chars().enumerate() {
            let cell = match ch {
                '.' => Cell::Free,
                '#' => Cell::Wall,
                'S' => Cell::Start,
                'G' => Cell::Goal,
                'R' => Cell::Risky,
                other => {
                    return Err(Error::map(
                        Some(r),
                        Some(c),
                        format!("unknown map symbol `{other}`"),
                    ))
                }
            };
            let idx = r * width + c;
            match cell {
                Cell::Start if start.is_some() => {
                    return Err(Error::map(Some(r), Some(c), "duplicate start `S`"))
                }
                Cell::Goal if goal.is_some() => {
                    return Err(Error::map(Some(r), Some(c), "duplicate goal `G`"))
                }
                Cell::Start => start = Some(idx),
                Cell::Goal => goal = Some(idx),
                _ => {}
            }
            cells.push(cell);
        }
    }
    let start = start.ok_or_else(|| Error::map(None, None, "map has no start `S`"))?;
    let goal = goal.ok_or_else(|| Error::map(None, None, "map has no goal `G`"))?;
    let maze = GridMaze {
        width,
        height: rows.len(),
        cells,
        start,
        goal,
        gamma: 0.999,
        max_steps: 100,
        step_reward: -1.0,
        noise: NoiseSpec::None,
    };
    if maze.shortest_path(false).is_none() {
        let (r, c) = maze.position(goal);
        return Err(Error::map(
            Some(r),
            Some(c),
            "goal is unreachable from start",
        ));
    }
    Ok(maze)
}

impl GridMaze {
    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_step_reward(mut self, step_reward: f64) -> Self {
        self.step_reward = step_reward;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be positive"));
        }
        if !self.step_reward.is_finite() {
            return Err(Error::invalid("step reward must be finite"));
        }
        self.noise.validate()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn cell(&self, state: usize) -> Cell {
        self.cells[state]
    }

    pub fn position(&self, state: usize) -> (usize, usize) {
        (state / self.width, state % self.width)
    }

    pub fn is_risky(&self, state: usize) -> bool {
        self.cells[state] == Cell::Risky
    }

    /// Deterministic successor of a move; walls and edges leave the agent in place.
    pub fn next_state(&self, state: usize, action: Action) -> usize {
        let (r, c) = self.position(state);
        let (nr, nc) = match action {
            Action::Up if r > 0 => (r - 1, c),
            Action::Down if r + 1 < self.height => (r + 1, c),
            Action::Left if c > 0 => (r, c - 1),
            Action::Right if c + 1 < self.width => (r, c + 1),
            _ => (r, c),
        };
        let idx = nr * self.width + nc;
        if self.cells[idx] == Cell::Wall {
            state
        } else {
            idx
        }
    }

    /// Number of moves on a shortest start→goal path, optionally avoiding risky cells.
    pub fn shortest_path(&self, avoid_risky: bool) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.cells.len()];
        let mut queue = VecDeque::from([self.start]);
        dist[self.start] = 0;
        while let Some(s) = queue.pop_front() {
            if s == self.goal {
                return Some(dist[s]);
            }
            for a in 0..N_ACTIONS {
                let next = self.next_state(s, Action::from_index(a).expect("valid action"));
                if dist[next] != usize::MAX || (avoid_risky && self.is_risky(next)) {
                    continue;
                }
                dist[next] = dist[s] + 1;
                queue.push_back(next);
            }
        }
        None
    }

    /// One transition; `step_index` counts the steps already taken this episode.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: usize,
        action: usize,
        step_index: usize,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let action = Action::from_index(action)
            .ok_or_else(|| Error::invalid(format!("action index {action} out of range")))?;
        if state >= self.cells.len() || state == self.goal {
            return Err(Error::invalid(format!("state {state} is not a live state")));
        }
        let next_state = self.next_state(state, action);
        let reward = if self.is_risky(next_state) {
            sample_noise(&self.noise, self.step_reward, rng)
        } else {
            self.step_reward
        };
        let reached_goal = next_state == self.goal;
        Ok(StepOutcome {
            next_state,
            reward,
            done: reached_goal || step_index + 1 >= self.max_steps,
            reached_goal,
        })
    }

    pub fn rollout_episode<P, R>(&self, policy: &P, rng: &mut R) -> Trajectory
    where
        P: ActionSampler + ?Sized,
        R: Rng + ?Sized,
    {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut visited_risky = false;
        let mut reached_goal = false;
        let mut state = self.start;
        for t in 0..self.max_steps {
            let action = policy.sample_action(state, rng);
            let out = self
                .step(state, action, t, rng)
                .expect("policy emits valid actions from live states");
            states.push(state);
            actions.push(action);
            rewards.push(out.reward);
            visited_risky |= self.is_risky(out.next_state);
            state = out.next_state;
            if out.done {
                reached_goal = out.reached_goal;
                break;
            }
        }
        Trajectory::from_steps(
            states,
            actions,
            rewards,
            self.gamma,
            visited_risky,
            reached_goal,
        )
    }
}

impl fmt::Display for GridMaze {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.cells.chunks(self.width) {
            let line: String = row.iter().map(|c| c.symbol()).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// `n` independent episodes drawn sequentially from one RNG stream.
pub fn rollout_episodes<P, R>(maze: &GridMaze, policy: &P, n: usize, rng: &mut R) -> Vec<Trajectory>
where
    P: ActionSampler + ?Sized,
    R: Rng + ?Sized,
{
    (0..n).map(|_| maze.rollout_episode(policy, rng)).collect()
}

/// One episode: `states[t]`, `actions[t]`, and the reward `rewards[t]` received
/// after taking `actions[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// `Σ_t γ^t r_{t+1}`.
    pub total_return: f64,
    /// `R_{τ,t} = r_{t+1} + γ R_{τ,t+1}`.
    pub rewards_to_go: Vec<f64>,
    pub visited_risky: bool,
    pub reached_goal: bool,
}

impl Trajectory {
    pub fn from_steps(
        states: Vec<usize>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        gamma: f64,
        visited_risky: bool,
        reached_goal: bool,
    ) -> Self {
        let mut rewards_to_go = vec![0.0; rewards.len()];
        let mut acc = 0.0;
        for t in (0..rewards.len()).rev() {
            acc = rewards[t] + gamma * acc;
            rewards_to_go[t] = acc;
        }
        Self {
            states,
            actions,
            total_return: rewards_to_go.first().copied().unwrap_or(0.0),
            rewards,
            rewards_to_go,
            visited_risky,
            reached_goal,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Reached the goal without touching a risky cell.
    pub fn is_risk_averse(&self) -> bool {
        self.reached_goal && !self.visited_risky
    }
}

/// Fraction of episodes that reach the goal without visiting a risky cell
/// (0 for an empty slice).
pub fn risk_averse_rate(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    let hits = trajectories.iter().filter(|t| t.is_risk_averse()).count();
    hits as f64 / trajectories.len() as f64
}

pub fn goal_rate(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    let hits = trajectories.iter().filter(|t| t.reached_goal).count();
    hits as f64 / trajectories.len() as f64
}
