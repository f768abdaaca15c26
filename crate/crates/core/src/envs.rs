//! The two benchmark environments and their target/behavior policies.

use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp};
use crate::scalar::Scalar;

/// Chain MDP: `horizon` in-line states that always move right regardless of
/// the action, ending in an absorbing terminal. The only reward is drawn on
/// the transition leaving the rightmost in-line state, Gaussian per action
/// with mean 1 for the optimal action and 0 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec<T> {
    pub n_actions: usize,
    /// Number of in-line states; equals the episodic horizon.
    pub horizon: usize,
    /// Mixes the behavior policy between the target (1) and uniform (0).
    pub off_policy_level: T,
    pub noise_std: T,
    pub optimal_action: usize,
    pub discount: T,
}

impl<T: Scalar> Default for ChainSpec<T> {
    fn default() -> Self {
        ChainSpec {
            n_actions: 5,
            horizon: 10,
            off_policy_level: T::zero(),
            noise_std: T::from_f64(0.1),
            optimal_action: 0,
            discount: T::from_f64(0.95),
        }
    }
}

impl<T: Scalar> ChainSpec<T> {
    fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::InvalidArgument("chain horizon must be at least 2".into()));
        }
        if self.n_actions == 0 || self.optimal_action >= self.n_actions {
            return Err(Error::InvalidArgument("optimal action out of range".into()));
        }
        if self.off_policy_level < T::zero() || self.off_policy_level > T::one() {
            return Err(Error::InvalidArgument("off-policy level must lie in [0, 1]".into()));
        }
        if self.noise_std < T::zero() {
            return Err(Error::InvalidArgument("noise std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn start_state(&self) -> usize {
        0
    }
}

/// Build the chain MDP with its deterministic target policy and the mixed
/// behavior policy `beta * target + (1 - beta) * uniform`.
pub fn build_chain<T: Scalar>(spec: &ChainSpec<T>) -> Result<(TabularMdp<T>, Policy<T>, Policy<T>)> {
    spec.validate()?;
    let t = spec.horizon;
    let n_states = t + 1; // in-line states plus the absorbing terminal
    let na = spec.n_actions;
    let terminal = t;

    let mut transition = vec![T::zero(); n_states * na * n_states];
    let mut mean_reward = vec![T::zero(); n_states * na];
    let mut noise = vec![T::zero(); n_states * na];
    for x in 0..n_states {
        let next = if x < t { x + 1 } else { terminal };
        for a in 0..na {
            transition[(x * na + a) * n_states + next] = T::one();
        }
    }
    for a in 0..na {
        let pair = (t - 1) * na + a;
        mean_reward[pair] = if a == spec.optimal_action { T::one() } else { T::zero() };
        noise[pair] = spec.noise_std;
    }

    let mdp = TabularMdp::new(n_states, na, transition, mean_reward, noise, spec.discount, &[terminal])?;
    let target = Policy::deterministic(n_states, na, spec.optimal_action);
    let behavior = target.mix(&Policy::uniform(n_states, na), spec.off_policy_level)?;
    Ok((mdp, target, behavior))
}

/// Open World: an `side x side` deterministic grid with actions
/// left/up/right/down, no-ops at the boundary, start at the top-left and an
/// absorbing goal at the bottom-right rewarding 1 on entry. The behavior
/// policy is uniform over all four actions; the target policy walks
/// uniformly over {down, right}.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorldSpec<T> {
    pub side: usize,
    pub discount: T,
}

impl<T: Scalar> Default for OpenWorldSpec<T> {
    fn default() -> Self {
        OpenWorldSpec { side: 10, discount: T::from_f64(0.95) }
    }
}

pub const OPEN_WORLD_ACTIONS: usize = 4;
pub const ACTION_LEFT: usize = 0;
pub const ACTION_UP: usize = 1;
pub const ACTION_RIGHT: usize = 2;
pub const ACTION_DOWN: usize = 3;

impl<T: Scalar> OpenWorldSpec<T> {
    fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::InvalidArgument("open world needs side >= 2".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.side * self.side
    }

    pub fn start_state(&self) -> usize {
        0
    }

    pub fn goal_state(&self) -> usize {
        self.side * self.side - 1
    }

    pub fn state_at(&self, row: usize, col: usize) -> usize {
        row * self.side + col
    }
}

fn grid_move(side: usize, state: usize, action: usize) -> usize {
    let (row, col) = (state / side, state % side);
    let (nr, nc) = match action {
        ACTION_LEFT => (row, col.saturating_sub(1)),
        ACTION_UP => (row.saturating_sub(1), col),
        ACTION_RIGHT => (row, if col + 1 < side { col + 1 } else { col }),
        ACTION_DOWN => (if row + 1 < side { row + 1 } else { row }, col),
        _ => (row, col),
    };
    nr * side + nc
}

pub fn build_open_world<T: Scalar>(
    spec: &OpenWorldSpec<T>,
) -> Result<(TabularMdp<T>, Policy<T>, Policy<T>)> {
    spec.validate()?;
    let side = spec.side;
    let n_states = spec.n_states();
    let goal = spec.goal_state();
    let na = OPEN_WORLD_ACTIONS;

    let mut transition = vec![T::zero(); n_states * na * n_states];
    let mut mean_reward = vec![T::zero(); n_states * na];
    for x in 0..n_states {
        for a in 0..na {
            let next = if x == goal { goal } else { grid_move(side, x, a) };
            transition[(x * na + a) * n_states + next] = T::one();
            if x != goal && next == goal {
                mean_reward[x * na + a] = T::one();
            }
        }
    }
    let noise = vec![T::zero(); n_states * na];
    let mdp = TabularMdp::new(n_states, na, transition, mean_reward, noise, spec.discount, &[goal])?;

    let behavior = Policy::uniform(n_states, na);
    let mut probs = vec![T::zero(); n_states * na];
    let half = T::from_f64(0.5);
    for x in 0..n_states {
        probs[x * na + ACTION_RIGHT] = half;
        probs[x * na + ACTION_DOWN] = half;
    }
    let target = Policy::new(n_states, na, probs)?;
    Ok((mdp, target, behavior))
}
