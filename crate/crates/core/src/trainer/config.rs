//! Flat `key = value` run configuration with dotted module namespaces.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{CircleConfig, ObsMode, ACTION_DIM};
use crate::error::{Error, Result};
use crate::lagrangian::LagrangeConfig;
use crate::policy::PolicyConfig;
use crate::world_model::WorldModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: CircleConfig,
    pub wm: WorldModelConfig,
    pub wm_lr: f64,
    pub policy: PolicyConfig,
    pub disc_hidden: usize,
    pub disc_layers: usize,
    pub disc_lr: f64,
    pub lagrange: LagrangeConfig,
    pub planner_horizon: usize,
    pub planner_scale: f64,
    /// Per-episode cost budget `b`.
    pub budget: f64,
    pub seq_len: usize,
    pub batch: usize,
    /// Imagination start states per update, drawn from the posterior batch;
    /// 0 uses all of them.
    pub imag_starts: usize,
    pub prefill: u64,
    /// Environment steps per gradient step.
    pub train_every: u64,
    pub total_steps: u64,
    pub replay_capacity: usize,
    pub prefill_noise: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub train_world: bool,
    pub train_control: bool,
    pub train_safe: bool,
    pub train_disc: bool,
    pub train_lagrange: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let env = CircleConfig::default();
        Self {
            wm: WorldModelConfig::new(env.obs_mode.dim(), ACTION_DIM),
            env,
            wm_lr: 6e-4,
            policy: PolicyConfig::default(),
            disc_hidden: 128,
            disc_layers: 2,
            disc_lr: 1e-4,
            lagrange: LagrangeConfig::default(),
            planner_horizon: 15,
            planner_scale: 1.0,
            budget: 25.0,
            seq_len: 50,
            batch: 16,
            imag_starts: 0,
            prefill: 5000,
            train_every: 5,
            total_steps: 300_000,
            replay_capacity: 1_000_000,
            prefill_noise: 0.3,
            grad_clip: 100.0,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            log_every: 100,
            checkpoint_every: 0,
            train_world: true,
            train_control: true,
            train_safe: true,
            train_disc: true,
            train_lagrange: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

trait ConfigValue {
    fn show(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {
        $(impl ConfigValue for $t {
            fn show(&self) -> String {
                self.to_string()
            }
        })*
    };
}

display_value!(f64, usize, u64, bool, ObsMode);

impl ConfigValue for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every recognised key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl TrainConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Serializes every key; [`TrainConfig::parse`] reads it back exactly.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", $key, self.$($field).+.show()));)*
                s
            }
        }
    };
}

keys! {
    "env.dt" => env.dt,
    "env.drag" => env.drag,
    "env.a_max" => env.a_max,
    "env.v_max" => env.v_max,
    "env.ring_radius" => env.ring_radius,
    "env.x_lim" => env.x_lim,
    "env.episode_length" => env.episode_length,
    "env.arena" => env.arena,
    "env.reward_scale" => env.reward_scale,
    "env.obs_mode" => env.obs_mode,
    "wm.deter" => wm.deter,
    "wm.stoch" => wm.stoch,
    "wm.hidden" => wm.hidden,
    "wm.embed" => wm.embed,
    "wm.std_floor" => wm.std_floor,
    "wm.free_bits" => wm.free_bits,
    "wm.kl_balance" => wm.kl_balance,
    "wm.alpha_r" => wm.alpha_r,
    "wm.alpha_c" => wm.alpha_c,
    "wm.beta_kl" => wm.beta_kl,
    "wm.lr" => wm_lr,
    "policy.horizon" => policy.horizon,
    "policy.lambda" => policy.lambda,
    "policy.eta" => policy.eta,
    "policy.gamma" => policy.gamma,
    "policy.hidden" => policy.hidden,
    "policy.layers" => policy.layers,
    "policy.actor_lr" => policy.actor_lr,
    "policy.critic_lr" => policy.critic_lr,
    "policy.std_floor" => policy.std_floor,
    "policy.target_every" => policy.target_every,
    "disc.hidden" => disc_hidden,
    "disc.layers" => disc_layers,
    "disc.lr" => disc_lr,
    "lagrange.init" => lagrange.init,
    "lagrange.alpha" => lagrange.alpha,
    "lagrange.lambda_min" => lagrange.lambda_min,
    "lagrange.lambda_max" => lagrange.lambda_max,
    "lagrange.window" => lagrange.window,
    "lagrange.paper_sign" => lagrange.paper_sign,
    "planner.horizon" => planner_horizon,
    "planner.budget_scale" => planner_scale,
    "budget" => budget,
    "train.seq_len" => seq_len,
    "train.batch" => batch,
    "train.imag_starts" => imag_starts,
    "train.prefill" => prefill,
    "train.train_every" => train_every,
    "train.total_steps" => total_steps,
    "train.replay_capacity" => replay_capacity,
    "train.prefill_noise" => prefill_noise,
    "train.grad_clip" => grad_clip,
    "train.log_every" => log_every,
    "train.checkpoint_every" => checkpoint_every,
    "train.world" => train_world,
    "train.control" => train_control,
    "train.safe" => train_safe,
    "train.disc" => train_disc,
    "train.lagrange" => train_lagrange,
    "seed" => seed,
    "output_dir" => output_dir,
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Derives dependent fields and validates.
    pub fn finish(&mut self) -> Result<()> {
        self.wm.obs_dim = self.env.obs_mode.dim();
        self.wm.act_dim = ACTION_DIM;
        self.lagrange.budget = self.budget;
        self.lagrange.episode_length = self.env.episode_length;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive_usize = [
            ("env.episode_length", self.env.episode_length),
            ("wm.deter", self.wm.deter),
            ("wm.stoch", self.wm.stoch),
            ("wm.hidden", self.wm.hidden),
            ("wm.embed", self.wm.embed),
            ("policy.horizon", self.policy.horizon),
            ("policy.hidden", self.policy.hidden),
            ("disc.hidden", self.disc_hidden),
            ("train.seq_len", self.seq_len),
            ("train.batch", self.batch),
            ("train.replay_capacity", self.replay_capacity),
        ];
        for (k, v) in positive_usize {
            if v == 0 {
                return bad(format!("`{k}` must be positive"));
            }
        }
        let positive_f64 = [
            ("env.dt", self.env.dt),
            ("env.a_max", self.env.a_max),
            ("env.v_max", self.env.v_max),
            ("env.arena", self.env.arena),
            ("wm.std_floor", self.wm.std_floor),
            ("wm.lr", self.wm_lr),
            ("policy.actor_lr", self.policy.actor_lr),
            ("policy.critic_lr", self.policy.critic_lr),
            ("policy.std_floor", self.policy.std_floor),
            ("disc.lr", self.disc_lr),
            ("train.grad_clip", self.grad_clip),
        ];
        for (k, v) in positive_f64 {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("`{k}` must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("env.drag", self.env.drag),
            ("wm.free_bits", self.wm.free_bits),
            ("wm.alpha_r", self.wm.alpha_r),
            ("wm.alpha_c", self.wm.alpha_c),
            ("wm.beta_kl", self.wm.beta_kl),
            ("policy.eta", self.policy.eta),
            ("planner.budget_scale", self.planner_scale),
            ("train.prefill_noise", self.prefill_noise),
        ];
        for (k, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("`{k}` must be >= 0, got {v}"));
            }
        }
        for (k, v) in [
            ("wm.kl_balance", self.wm.kl_balance),
            ("policy.lambda", self.policy.lambda),
            ("policy.gamma", self.policy.gamma),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("`{k}` must lie in [0, 1], got {v}"));
            }
        }
        if self.train_every == 0 {
            return bad("`train.train_every` must be positive".into());
        }
        if self.seq_len > self.env.episode_length + 1 {
            return bad("`train.seq_len` exceeds the stored episode length".into());
        }
        if self.replay_capacity < self.env.episode_length + 1 {
            return bad("`train.replay_capacity` cannot hold one episode".into());
        }
        if self.policy.target_every == 0 {
            return bad("`policy.target_every` must be positive".into());
        }
        self.lagrange.validate()
    }

    pub fn obs_mode(&self) -> ObsMode {
        self.env.obs_mode
    }
}
