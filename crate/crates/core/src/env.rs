//! Point-mass circle task with a vertical safety boundary.
//!
//! A unit-mass point moves in a walled arena. Reward is signed tangential
//! circulation around a ring, discounted by distance from the ring; a cost of
//! 1 is charged on every step that ends with `|x| > x_lim`. The ring crosses
//! the boundary, so the highest-reward path is unsafe.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 16;
pub const VECTOR_OBS_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsMode {
    Vector,
    Image,
}

impl ObsMode {
    pub fn dim(self) -> usize {
        match self {
            ObsMode::Vector => VECTOR_OBS_DIM,
            ObsMode::Image => IMAGE_SIDE * IMAGE_SIDE,
        }
    }
}

impl std::fmt::Display for ObsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObsMode::Vector => "vector",
            ObsMode::Image => "image",
        })
    }
}

impl std::str::FromStr for ObsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(ObsMode::Vector),
            "image" => Ok(ObsMode::Image),
            other => Err(Error::Config(format!("unknown obs_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleConfig {
    pub dt: f64,
    pub drag: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub ring_radius: f64,
    pub x_lim: f64,
    pub episode_length: usize,
    pub arena: f64,
    pub reward_scale: f64,
    pub obs_mode: ObsMode,
}

impl Default for CircleConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            drag: 0.05,
            a_max: 1.0,
            v_max: 2.0,
            ring_radius: 1.5,
            x_lim: 1.25,
            episode_length: 500,
            arena: 3.0,
            reward_scale: 1.0,
            obs_mode: ObsMode::Vector,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub step_index: usize,
}

impl EnvState {
    pub fn at(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self {
            x,
            y,
            vx,
            vy,
            step_index: 0,
        }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Vec<f32>,
    pub reward: f64,
    pub cost: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct CircleEnv {
    pub cfg: CircleConfig,
}

impl CircleEnv {
    pub fn new(cfg: CircleConfig) -> Self {
        Self { cfg }
    }

    pub fn obs_dim(&self) -> usize {
        self.cfg.obs_mode.dim()
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = EnvState::at(rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5), 0.0, 0.0);
        (s, self.observe(&s))
    }

    pub fn cost_at(&self, s: &EnvState) -> f64 {
        if s.x.abs() > self.cfg.x_lim {
            1.0
        } else {
            0.0
        }
    }

    pub fn reward_at(&self, s: &EnvState) -> f64 {
        let circulation = -s.y * s.vx + s.x * s.vy;
        let off_ring = (s.x.hypot(s.y) - self.cfg.ring_radius).abs();
        circulation / (1.0 + off_ring) * self.cfg.reward_scale
    }

    pub fn step(&self, state: &EnvState, action: [f64; 2]) -> Result<(EnvState, StepResult)> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("action {action:?}")));
        }
        if state.step_index >= self.cfg.episode_length {
            return Err(Error::InvalidArgument("step after episode end".into()));
        }
        if action.iter().any(|a| a.abs() > 1.0 + 1e-6) {
            log::warn!("action {action:?} outside [-1, 1]; clamping");
        }
        let [ax, ay] = action.map(|a| a.clamp(-1.0, 1.0));
        let c = &self.cfg;
        let mut vx = state.vx * (1.0 - c.drag) + ax * c.a_max * c.dt;
        let mut vy = state.vy * (1.0 - c.drag) + ay * c.a_max * c.dt;
        let speed = vx.hypot(vy);
        if speed > c.v_max {
            vx *= c.v_max / speed;
            vy *= c.v_max / speed;
        }
        let mut x = state.x + vx * c.dt;
        let mut y = state.y + vy * c.dt;
        if x.abs() > c.arena {
            x = x.signum() * c.arena;
            vx = 0.0;
        }
        if y.abs() > c.arena {
            y = y.signum() * c.arena;
            vy = 0.0;
        }
        let next = EnvState {
            x,
            y,
            vx,
            vy,
            step_index: state.step_index + 1,
        };
        let result = StepResult {
            observation: self.observe(&next),
            reward: self.reward_at(&next),
            cost: self.cost_at(&next),
            terminal: next.step_index == c.episode_length,
        };
        Ok((next, result))
    }

    pub fn observe(&self, s: &EnvState) -> Vec<f32> {
        match self.cfg.obs_mode {
            ObsMode::Vector => self.vector_obs(s).to_vec(),
            ObsMode::Image => self.render(s),
        }
    }

    pub fn vector_obs(&self, s: &EnvState) -> [f32; VECTOR_OBS_DIM] {
        let theta = s.y.atan2(s.x);
        [
            s.x as f32,
            s.y as f32,
            s.vx as f32,
            s.vy as f32,
            theta.cos() as f32,
            theta.sin() as f32,
            (self.cfg.x_lim - s.x.abs()) as f32,
            s.speed() as f32,
        ]
    }

    /// 16x16 grayscale raster, row 0 at the top (`y = +arena`). Ring pixels
    /// are 0.5, boundary columns 0.3, and the agent a 2x2 blob at 1.0.
    pub fn render(&self, s: &EnvState) -> Vec<f32> {
        let c = &self.cfg;
        let cell = 2.0 * c.arena / IMAGE_SIDE as f64;
        let mut img = vec![0.0f32; IMAGE_SIDE * IMAGE_SIDE];
        for r in 0..IMAGE_SIDE {
            for col in 0..IMAGE_SIDE {
                let px = -c.arena + (col as f64 + 0.5) * cell;
                let py = c.arena - (r as f64 + 0.5) * cell;
                let mut v = 0.0f32;
                if (px.hypot(py) - c.ring_radius).abs() < 0.5 * cell {
                    v = 0.5;
                }
                if (px.abs() - c.x_lim).abs() < 0.5 * cell {
                    v = v.max(0.3);
                }
                img[r * IMAGE_SIDE + col] = v;
            }
        }
        let last = (IMAGE_SIDE - 2) as f64;
        let cx = ((s.x + c.arena) / cell).round() - 1.0;
        let cy = ((c.arena - s.y) / cell).round() - 1.0;
        let c0 = cx.clamp(0.0, last) as usize;
        let r0 = cy.clamp(0.0, last) as usize;
        for r in r0..r0 + 2 {
            for col in c0..c0 + 2 {
                img[r * IMAGE_SIDE + col] = 1.0;
            }
        }
        img
    }
}

/// Undiscounted total cost of an episode.
pub fn episode_cost(results: &[StepResult]) -> f64 {
    results.iter().map(|r| r.cost).sum()
}

/// One row of a trajectory dump.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub state: EnvState,
    pub action: [f64; 2],
    pub reward: f64,
    pub cost: f64,
    /// Planner diagnostics `(c_obs, c_sum, chose_safe)` when available.
    pub plan: Option<(f64, f64, bool)>,
}

/// Writes `step,x,y,vx,vy,ax,ay,reward,cost`, plus `c_obs,c_sum,chose_safe`
/// when `with_plan` is set.
pub fn write_trajectory_csv(w: &mut impl Write, rows: &[TrajectoryRow], with_plan: bool) -> Result<()> {
    write!(w, "step,x,y,vx,vy,ax,ay,reward,cost")?;
    if with_plan {
        write!(w, ",c_obs,c_sum,chose_safe")?;
    }
    writeln!(w)?;
    for r in rows {
        let s = &r.state;
        write!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step, s.x, s.y, s.vx, s.vy, r.action[0], r.action[1], r.reward, r.cost
        )?;
        if with_plan {
            let (co, cs, safe) = r.plan.unwrap_or((f64::NAN, f64::NAN, false));
            write!(w, ",{co},{cs},{}", safe as u8)?;
        }
        writeln!(w)?;
    }
    Ok(())
}
