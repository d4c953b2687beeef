//! Seedable discrete-action environments and an auto-resetting batch wrapper.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::types::{Layout, Observation};

pub const CARTPOLE_GRAVITY: f64 = 9.8;
pub const CARTPOLE_CART_MASS: f64 = 1.0;
pub const CARTPOLE_POLE_MASS: f64 = 0.1;
pub const CARTPOLE_HALF_LENGTH: f64 = 0.5;
pub const CARTPOLE_FORCE: f64 = 10.0;
pub const CARTPOLE_TAU: f64 = 0.02;
pub const CARTPOLE_X_LIMIT: f64 = 2.4;
pub const CARTPOLE_THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const CARTPOLE_MAX_STEPS: u32 = 500;

pub const GRID_STEP_REWARD: f64 = -0.01;
pub const GRID_GOAL_REWARD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    CartPole,
    /// Square grid of the given side length.
    GridWorld(u32),
}

impl EnvKind {
    pub fn obs_dim(&self) -> usize {
        match self {
            EnvKind::CartPole => 4,
            EnvKind::GridWorld(_) => 2,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvKind::CartPole => 2,
            EnvKind::GridWorld(_) => 4,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.obs_dim(), self.action_count())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("cartpole") {
            return Ok(EnvKind::CartPole);
        }
        if let Some(n) = s.strip_prefix("gridworld:") {
            return match n.parse::<u32>() {
                Ok(n) if n >= 1 => Ok(EnvKind::GridWorld(n)),
                _ => Err(Error::Config(format!("env: bad grid size in {s:?}"))),
            };
        }
        Err(Error::Config(format!("env: unknown environment {s:?}")))
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::CartPole => write!(f, "cartpole"),
            EnvKind::GridWorld(n) => write!(f, "gridworld:{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    /// One Euler step of the cart-pole equations of motion. `push_right`
    /// selects the sign of the applied force.
    pub fn integrate(&self, push_right: bool) -> Self {
        let force = if push_right {
            CARTPOLE_FORCE
        } else {
            -CARTPOLE_FORCE
        };
        let total_mass = CARTPOLE_CART_MASS + CARTPOLE_POLE_MASS;
        let polemass_length = CARTPOLE_POLE_MASS * CARTPOLE_HALF_LENGTH;
        let (sin, cos) = self.theta.sin_cos();
        let temp = (force + polemass_length * self.theta_dot * self.theta_dot * sin) / total_mass;
        let theta_acc = (CARTPOLE_GRAVITY * sin - cos * temp)
            / (CARTPOLE_HALF_LENGTH * (4.0 / 3.0 - CARTPOLE_POLE_MASS * cos * cos / total_mass));
        let x_acc = temp - polemass_length * theta_acc * cos / total_mass;
        Self {
            x: self.x + CARTPOLE_TAU * self.x_dot,
            x_dot: self.x_dot + CARTPOLE_TAU * x_acc,
            theta: self.theta + CARTPOLE_TAU * self.theta_dot,
            theta_dot: self.theta_dot + CARTPOLE_TAU * theta_acc,
        }
    }

    pub fn out_of_bounds(&self) -> bool {
        self.x.abs() > CARTPOLE_X_LIMIT || self.theta.abs() > CARTPOLE_THETA_LIMIT
    }

    fn observation(&self) -> Observation {
        Observation(vec![self.x, self.x_dot, self.theta, self.theta_dot])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Physical {
    CartPole(CartPoleState),
    Grid { size: u32, row: u32, col: u32 },
}

/// Grid moves: 0 up, 1 down, 2 left, 3 right. Off-grid moves leave the
/// position unchanged.
pub fn grid_move(size: u32, row: u32, col: u32, action: u32) -> (u32, u32) {
    let last = size - 1;
    match action {
        0 => (row.saturating_sub(1), col),
        1 => ((row + 1).min(last), col),
        2 => (row, col.saturating_sub(1)),
        _ => (row, (col + 1).min(last)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// A single environment instance. The RNG stream it carries feeds its own
/// resets.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub kind: EnvKind,
    pub physical: Physical,
    pub steps: u32,
    pub done: bool,
    pub rng: RngState,
}

impl EnvState {
    pub fn observation(&self) -> Observation {
        match self.physical {
            Physical::CartPole(s) => s.observation(),
            Physical::Grid { row, col, .. } => Observation(vec![row as f64, col as f64]),
        }
    }

    pub fn step_limit(&self) -> u32 {
        match self.kind {
            EnvKind::CartPole => CARTPOLE_MAX_STEPS,
            EnvKind::GridWorld(n) => 4 * n * n,
        }
    }

    pub fn step(&self, action: u32) -> Result<(EnvState, StepResult)> {
        if self.done {
            return Err(Error::Usage(
                "step called on a finished episode; reset first".into(),
            ));
        }
        if action as usize >= self.kind.action_count() {
            return Err(Error::Usage(format!(
                "action {action} invalid for {}",
                self.kind
            )));
        }
        let steps = self.steps + 1;
        let (physical, reward, terminated) = match self.physical {
            Physical::CartPole(s) => {
                let next = s.integrate(action == 1);
                (Physical::CartPole(next), 1.0, next.out_of_bounds())
            }
            Physical::Grid { size, row, col } => {
                let (row, col) = grid_move(size, row, col, action);
                let goal = row == size - 1 && col == size - 1;
                let reward = if goal {
                    GRID_GOAL_REWARD
                } else {
                    GRID_STEP_REWARD
                };
                (Physical::Grid { size, row, col }, reward, goal)
            }
        };
        let truncated = !terminated && steps >= self.step_limit();
        let next = EnvState {
            kind: self.kind,
            physical,
            steps,
            done: terminated || truncated,
            rng: self.rng.clone(),
        };
        let result = StepResult {
            obs: next.observation(),
            reward,
            terminated,
            truncated,
        };
        Ok((next, result))
    }
}

pub fn env_reset(kind: EnvKind, rng: RngState) -> Result<(EnvState, Observation)> {
    let mut rng = rng;
    let physical = match kind {
        EnvKind::CartPole => Physical::CartPole(CartPoleState {
            x: rng.uniform_range(-0.05, 0.05),
            x_dot: rng.uniform_range(-0.05, 0.05),
            theta: rng.uniform_range(-0.05, 0.05),
            theta_dot: rng.uniform_range(-0.05, 0.05),
        }),
        EnvKind::GridWorld(0) => {
            return Err(Error::Config("env: grid size must be positive".into()))
        }
        EnvKind::GridWorld(size) => Physical::Grid {
            size,
            row: 0,
            col: 0,
        },
    };
    let state = EnvState {
        kind,
        physical,
        steps: 0,
        done: false,
        rng,
    };
    let obs = state.observation();
    Ok((state, obs))
}

pub fn env_step(state: &EnvState, action: u32) -> Result<(EnvState, StepResult)> {
    state.step(action)
}

/// Batch of environments with auto-reset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VecEnv {
    envs: Vec<EnvState>,
}

impl VecEnv {
    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn states(&self) -> &[EnvState] {
        &self.envs
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.envs.iter().map(EnvState::observation).collect()
    }

    /// Steps every environment. A slot whose episode ends is reset at once:
    /// its result carries the done flags of the finished step and the first
    /// observation of the next episode.
    pub fn step(&mut self, actions: &[u32]) -> Result<Vec<StepResult>> {
        if self.envs.is_empty() {
            return Err(Error::Usage("vectorized step before reset".into()));
        }
        if actions.len() != self.envs.len() {
            return Err(Error::Usage(format!(
                "{} actions for {} environments",
                actions.len(),
                self.envs.len()
            )));
        }
        let mut results = Vec::with_capacity(actions.len());
        for (env, &action) in self.envs.iter_mut().zip(actions) {
            let (next, mut result) = env.step(action)?;
            if result.done() {
                let (fresh, obs) = env_reset(next.kind, next.rng)?;
                *env = fresh;
                result.obs = obs;
            } else {
                *env = next;
            }
            results.push(result);
        }
        Ok(results)
    }
}

/// Resets `count` environments, each on the sub-stream `rng.split(index)`.
pub fn vec_reset(
    kind: EnvKind,
    count: usize,
    rng: &RngState,
) -> Result<(VecEnv, Vec<Observation>)> {
    if count == 0 {
        return Err(Error::Config("env count must be at least 1".into()));
    }
    let mut envs = Vec::with_capacity(count);
    let mut obs = Vec::with_capacity(count);
    for i in 0..count {
        let (state, o) = env_reset(kind, rng.split(i as u64))?;
        envs.push(state);
        obs.push(o);
    }
    Ok((VecEnv { envs }, obs))
}

pub fn vec_step(envs: &mut VecEnv, actions: &[u32]) -> Result<Vec<StepResult>> {
    envs.step(actions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_at(size: u32, row: u32, col: u32) -> EnvState {
        EnvState {
            kind: EnvKind::GridWorld(size),
            physical: Physical::Grid { size, row, col },
            steps: 0,
            done: false,
            rng: RngState::new(0),
        }
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("cartpole".parse::<EnvKind>().unwrap(), EnvKind::CartPole);
        assert_eq!(
            "gridworld:5".parse::<EnvKind>().unwrap(),
            EnvKind::GridWorld(5)
        );
        assert!("gridworld:0".parse::<EnvKind>().is_err());
        assert!("gridworld:x".parse::<EnvKind>().is_err());
        assert!("lunarlander".parse::<EnvKind>().is_err());
        assert_eq!(EnvKind::GridWorld(7).to_string(), "gridworld:7");
    }

    #[test]
    fn grid_reset_at_origin() {
        let (state, obs) = env_reset(EnvKind::GridWorld(5), RngState::new(3)).unwrap();
        assert_eq!(obs.as_slice(), &[0.0, 0.0]);
        assert_eq!(state.steps, 0);
    }

    #[test]
    fn cartpole_reset_range_and_determinism() {
        for seed in 0..50 {
            let (_, obs) = env_reset(EnvKind::CartPole, RngState::new(seed)).unwrap();
            assert!(obs.as_slice().iter().all(|v| v.abs() <= 0.05));
        }
        let (_, a) = env_reset(EnvKind::CartPole, RngState::new(42)).unwrap();
        let (_, b) = env_reset(EnvKind::CartPole, RngState::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_step_examples() {
        let (_, r) = grid_at(5, 0, 0).step(3).unwrap();
        assert_eq!(r.obs.as_slice(), &[0.0, 1.0]);
        assert_eq!(r.reward, -0.01);
        assert!(!r.terminated && !r.truncated);

        let (s, r) = grid_at(5, 4, 3).step(3).unwrap();
        assert_eq!(r.obs.as_slice(), &[4.0, 4.0]);
        assert_eq!(r.reward, 1.0);
        assert!(r.terminated);
        assert!(matches!(s.step(0), Err(Error::Usage(_))));
    }

    #[test]
    fn grid_off_grid_is_noop() {
        let (_, r) = grid_at(5, 0, 0).step(0).unwrap();
        assert_eq!(r.obs.as_slice(), &[0.0, 0.0]);
        let (_, r) = grid_at(5, 0, 0).step(2).unwrap();
        assert_eq!(r.obs.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn grid_truncates_at_four_n_squared() {
        let (mut s, _) = env_reset(EnvKind::GridWorld(3), RngState::new(0)).unwrap();
        for t in 1..=36 {
            let (next, r) = s.step(0).unwrap();
            assert_eq!(r.truncated, t == 36);
            s = next;
        }
        assert!(s.done);
    }

    #[test]
    fn invalid_action_rejected() {
        let (s, _) = env_reset(EnvKind::CartPole, RngState::new(0)).unwrap();
        assert!(s.step(2).is_err());
    }

    #[test]
    fn cartpole_episode_return_bounds() {
        for seed in 0..20 {
            let (mut s, _) = env_reset(EnvKind::CartPole, RngState::new(seed)).unwrap();
            let mut rng = RngState::new(seed + 100);
            let mut ret = 0.0;
            loop {
                let action = (rng.uniform() < 0.5) as u32;
                let (next, r) = s.step(action).unwrap();
                ret += r.reward;
                s = next;
                if r.done() {
                    break;
                }
            }
            assert!((1.0..=500.0).contains(&ret));
        }
    }

    #[test]
    fn vec_reset_examples() {
        let rng = RngState::new(11);
        let (v, obs) = vec_reset(EnvKind::CartPole, 1, &rng).unwrap();
        let (single, o) = env_reset(EnvKind::CartPole, rng.split(0)).unwrap();
        assert_eq!(obs[0], o);
        assert_eq!(v.states()[0], single);

        let (_, obs) = vec_reset(EnvKind::GridWorld(5), 64, &rng).unwrap();
        assert_eq!(obs.len(), 64);
        assert!(obs.iter().all(|o| o.as_slice() == [0.0, 0.0]));

        let (_, obs) = vec_reset(EnvKind::CartPole, 2, &rng).unwrap();
        assert_ne!(obs[0], obs[1]);

        assert!(matches!(
            vec_reset(EnvKind::CartPole, 0, &rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vec_step_auto_resets() {
        let rng = RngState::new(5);
        let (mut v, _) = vec_reset(EnvKind::GridWorld(5), 2, &rng).unwrap();
        // put slot 1 next to the goal
        v.envs[1].physical = Physical::Grid {
            size: 5,
            row: 4,
            col: 3,
        };
        let expected_reset = env_reset(EnvKind::GridWorld(5), v.envs[1].rng.clone()).unwrap();
        let results = v.step(&[3, 3]).unwrap();
        assert!(!results[0].done());
        assert_eq!(results[0].obs.as_slice(), &[0.0, 1.0]);
        assert!(results[1].terminated);
        assert_eq!(results[1].obs, expected_reset.1);
        assert_eq!(v.envs[1], expected_reset.0);
    }

    #[test]
    fn vec_step_cartpole_reset_uses_stream() {
        let rng = RngState::new(8);
        let (mut v, _) = vec_reset(EnvKind::CartPole, 1, &rng).unwrap();
        v.envs[0].physical = Physical::CartPole(CartPoleState {
            x: 2.39,
            x_dot: 5.0,
            theta: 0.0,
            theta_dot: 0.0,
        });
        let expected = env_reset(EnvKind::CartPole, v.envs[0].rng.clone()).unwrap();
        let r = v.step(&[1]).unwrap();
        assert!(r[0].terminated);
        assert_eq!(r[0].obs, expected.1);
    }

    #[test]
    fn vec_step_misuse() {
        let mut empty = VecEnv::default();
        assert!(matches!(empty.step(&[]), Err(Error::Usage(_))));
        let (mut v, _) = vec_reset(EnvKind::CartPole, 2, &RngState::new(0)).unwrap();
        assert!(matches!(v.step(&[0]), Err(Error::Usage(_))));
    }
}
