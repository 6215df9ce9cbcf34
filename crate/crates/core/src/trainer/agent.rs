//! Training state and the collect / train / evaluate cycle.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{MetricsRow, RowKind};
use super::replay::{Episode, ReplayBuffer};
use crate::discriminator::{DiscBatch, Discriminator};
use crate::env::{CircleEnv, EnvState, TrajectoryRow, ACTION_DIM};
use crate::error::{Error, Result};
use crate::lagrangian::LagrangeState;
use crate::nn::{clip_global_norm, read_checkpoint, write_checkpoint, Adam, Bind, Grads, Graph, NodeId, ParamSet, Tensor};
use crate::planner::{plan_action, planner_budget, LearnedModel, PlanConfig, PlanDiagnostics, SwitchMode};
use crate::policy::{self, ActMode, Actor, ActorId, Critic, CriticId};
use crate::world_model::{LatentState, LossBreakdown, WorldModel};
use crate::dist;

pub const PARAMS_FILE: &str = "params.nmdr";
pub const CONFIG_FILE: &str = "config.txt";
pub const STATE_FILE: &str = "state.json";

/// Network architectures; parameters live in [`Params`].
#[derive(Clone, Debug)]
pub struct Models {
    pub wm: WorldModel,
    pub actor_c: Actor,
    pub actor_s: Actor,
    pub critic_r: Critic,
    pub critic_c: Critic,
    pub disc: Discriminator,
}

impl Models {
    pub fn new(cfg: &TrainConfig) -> Self {
        let wm = WorldModel::new(cfg.wm.clone());
        let f = cfg.wm.feat_dim();
        Self {
            actor_c: Actor::new(ActorId::Control, f, ACTION_DIM, &cfg.policy),
            actor_s: Actor::new(ActorId::Safe, f, ACTION_DIM, &cfg.policy),
            critic_r: Critic::new(CriticId::Reward, f, &cfg.policy),
            critic_c: Critic::new(CriticId::Cost, f, &cfg.policy),
            disc: Discriminator::new(f, ACTION_DIM, cfg.disc_hidden, cfg.disc_layers, cfg.disc_lr),
            wm,
        }
    }
}

/// One parameter set (with its own optimizer state) per trainable module.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub wm: ParamSet<f32>,
    pub actor_c: ParamSet<f32>,
    pub actor_s: ParamSet<f32>,
    pub critic_r: ParamSet<f32>,
    pub critic_c: ParamSet<f32>,
    pub disc: ParamSet<f32>,
}

const SETS: [&str; 6] = ["wm", "actor_c", "actor_s", "critic_r", "critic_c", "disc"];

impl Params {
    pub fn init(m: &Models, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self {
            wm: ParamSet::new(),
            actor_c: ParamSet::new(),
            actor_s: ParamSet::new(),
            critic_r: ParamSet::new(),
            critic_c: ParamSet::new(),
            disc: ParamSet::new(),
        };
        m.wm.init(&mut p.wm, rng)?;
        m.actor_c.init(&mut p.actor_c, rng)?;
        m.actor_s.init(&mut p.actor_s, rng)?;
        m.critic_r.init(&mut p.critic_r, rng)?;
        m.critic_c.init(&mut p.critic_c, rng)?;
        m.disc.init(&mut p.disc, rng)?;
        Ok(p)
    }

    fn sets(&self) -> [&ParamSet<f32>; 6] {
        [&self.wm, &self.actor_c, &self.actor_s, &self.critic_r, &self.critic_c, &self.disc]
    }

    pub fn content_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in self.sets() {
            s.content_hash().hash(&mut h);
        }
        h.finish()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        SETS.iter()
            .zip(self.sets())
            .flat_map(|(name, s)| s.to_entries(&format!("{name}.step")))
            .collect()
    }

    pub fn from_entries(e: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let load = |name: &str| ParamSet::from_entries(e, name, &format!("{name}.step"));
        Ok(Self {
            wm: load("wm")?,
            actor_c: load("actor_c")?,
            actor_s: load("actor_s")?,
            critic_r: load("critic_r")?,
            critic_c: load("critic_c")?,
            disc: load("disc")?,
        })
    }

    pub fn planner<'a>(&'a self, m: &'a Models) -> LearnedModel<'a> {
        LearnedModel {
            wm: &m.wm,
            wm_params: &self.wm,
            control: (&m.actor_c, &self.actor_c),
            safe: (&m.actor_s, &self.actor_s),
        }
    }

    /// Latent filtering step for one environment. With `rng = None` the
    /// posterior mean is used.
    pub fn posterior(
        &self,
        m: &Models,
        prev: &LatentState<f32>,
        prev_action: &[f32],
        obs: &[f32],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LatentState<f32>> {
        let mut g = Graph::new();
        let l = prev.to_graph(&mut g);
        let a = g.constant(Tensor::new(vec![1, prev_action.len()], prev_action.to_vec())?);
        let o = g.constant(Tensor::new(vec![1, obs.len()], obs.to_vec())?);
        let noise = match rng {
            Some(r) => dist::std_normal_noise(&[1, m.wm.cfg.stoch], r),
            None => Tensor::zeros(&[1, m.wm.cfg.stoch]),
        };
        let (post, _) = m.wm.observe_step(&mut g, Bind::frozen(&self.wm), &l, a, o, noise)?;
        g.check_finite("posterior update")?;
        Ok(post.values(&g))
    }
}

/// Scalars from one gradient step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub world: LossBreakdown,
    pub actor_c_loss: Option<f64>,
    pub critic_r_loss: Option<f64>,
    pub actor_s_loss: Option<f64>,
    pub critic_c_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub c_k: Option<f64>,
    /// Mean imagined per-step cost under the safe actor.
    pub imagined_cost: Option<f64>,
}

/// The environment episode in progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveEpisode {
    pub env_state: EnvState,
    pub obs: Vec<f32>,
    pub latent: LatentState<f32>,
    pub prev_action: Vec<f32>,
    pub episode: Episode,
    pub safe_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(r: &ChaCha8Rng) -> Self {
        Self {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", self.word_pos)))?;
        r.set_word_pos(pos);
        Ok(r)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SavedState {
    env_step: u64,
    grad_step: u64,
    rng: RngState,
    lagrange: LagrangeState,
    live: LiveEpisode,
    elapsed_s: f64,
    last_stats: Option<TrainStats>,
}

/// Summary of evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub costs: Vec<f64>,
    pub chose_safe_rates: Vec<f64>,
    pub mean_return: f64,
    pub mean_cost: f64,
    pub chose_safe_rate: f64,
    /// Mean episode cost exceeds the budget.
    pub violation: bool,
}

pub struct Agent {
    pub cfg: TrainConfig,
    pub env: CircleEnv,
    pub models: Models,
    pub params: Params,
    pub lagrange: LagrangeState,
    pub replay: ReplayBuffer,
    pub live: LiveEpisode,
    pub env_step: u64,
    pub grad_step: u64,
    /// Environment-step switching mode used while collecting.
    pub switch_mode: SwitchMode,
    pub last_stats: Option<TrainStats>,
    rng: ChaCha8Rng,
    rows: Vec<MetricsRow>,
    started: Instant,
    elapsed_before: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn stack(g: &Graph<f32>, ids: &[NodeId]) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = ids.iter().map(|&i| g.value(i)).collect();
    Tensor::vstack(&parts)
}

impl Agent {
    pub fn new(mut cfg: TrainConfig) -> Result<Self> {
        cfg.finish()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let models = Models::new(&cfg);
        let params = Params::init(&models, &mut rng)?;
        let env = CircleEnv::new(cfg.env.clone());
        let lagrange = LagrangeState::new(cfg.lagrange.clone())?;
        let replay = ReplayBuffer::new(cfg.replay_capacity);
        let live = Self::fresh_episode(&env, &models, &mut rng)?;
        Ok(Self {
            env,
            models,
            params,
            lagrange,
            replay,
            live,
            env_step: 0,
            grad_step: 0,
            switch_mode: SwitchMode::Switch,
            last_stats: None,
            rng,
            rows: Vec::new(),
            started: Instant::now(),
            elapsed_before: 0.0,
            cfg,
        })
    }

    fn fresh_episode(env: &CircleEnv, models: &Models, rng: &mut ChaCha8Rng) -> Result<LiveEpisode> {
        let (s, obs) = env.reset(rng.random());
        Ok(LiveEpisode {
            env_state: s,
            episode: Episode::start(&obs, ACTION_DIM),
            obs,
            latent: models.wm.initial_state(1)?,
            prev_action: vec![0.0; ACTION_DIM],
            safe_steps: 0,
        })
    }

    pub fn elapsed_s(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    pub fn planner_budget(&self) -> Result<f64> {
        planner_budget(self.cfg.budget, self.cfg.planner_horizon, self.cfg.env.episode_length, self.cfg.planner_scale)
    }

    /// Metrics rows produced since the last call.
    pub fn drain_rows(&mut self) -> Vec<MetricsRow> {
        std::mem::take(&mut self.rows)
    }

    /// One environment step with the planner in the loop.
    pub fn collect_step(&mut self) -> Result<PlanDiagnostics> {
        let post = self.params.posterior(&self.models, &self.live.latent, &self.live.prev_action, &self.live.obs, Some(&mut self.rng))?;
        let plan_cfg = PlanConfig {
            horizon: self.cfg.planner_horizon,
            budget: self.planner_budget()?,
            mode: self.switch_mode,
            warmup: self.grad_step == 0,
            act_mode: ActMode::Sample,
        };
        let planner = self.params.planner(&self.models);
        let (action, diag) = plan_action(&planner, &post, &plan_cfg, &mut self.rng)?;
        let mut a = [action.data()[0] as f64, action.data()[1] as f64];
        if self.env_step < self.cfg.prefill && self.cfg.prefill_noise > 0.0 {
            let n = Normal::new(0.0, self.cfg.prefill_noise).map_err(|e| Error::Config(e.to_string()))?;
            for v in &mut a {
                *v = (*v + n.sample(&mut self.rng)).clamp(-1.0, 1.0);
            }
        }
        let (next, res) = self.env.step(&self.live.env_state, a)?;
        self.lagrange.record_cost(res.cost)?;
        let af = [a[0] as f32, a[1] as f32];
        let live = &mut self.live;
        live.episode.push(&res.observation, &af, res.reward, res.cost, res.terminal);
        live.env_state = next;
        live.obs = res.observation;
        live.latent = post;
        live.prev_action = af.to_vec();
        live.safe_steps += diag.chose_safe as usize;
        self.env_step += 1;
        if res.terminal {
            let steps = self.live.episode.len() - 1;
            let mut row = MetricsRow::new(RowKind::Episode, self.env_step, self.grad_step, self.lagrange.lambda);
            row.episode_return = Some(self.live.episode.total_reward());
            row.episode_cost = Some(self.live.episode.total_cost());
            row.chose_safe_rate = Some(self.live.safe_steps as f64 / steps.max(1) as f64);
            row.c_k = self.lagrange.mean_cost().ok();
            row.wallclock_s = self.elapsed_s();
            self.rows.push(row);
            let fresh = Self::fresh_episode(&self.env, &self.models, &mut self.rng)?;
            let done = std::mem::replace(&mut self.live, fresh);
            self.replay.add(done.episode)?;
        }
        Ok(diag)
    }

    fn apply(opt: Adam, ps: &mut ParamSet<f32>, mut grads: Grads<f32>, clip: f64) -> Result<()> {
        grads.retain(|k, _| !k.contains("_target."));
        clip_global_norm(&mut grads, clip);
        opt.step(ps, &grads)
    }

    /// Draws imagination start states from the posterior batch.
    fn starts(&mut self, post: &LatentState<f32>) -> LatentState<f32> {
        let n = post.batch();
        let k = self.cfg.imag_starts;
        if k == 0 || k >= n {
            return post.clone();
        }
        let rows = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        post.gather(&rows)
    }

    /// One gradient step over all enabled phases.
    pub fn train_step(&mut self) -> Result<TrainStats> {
        let cfg = self.cfg.clone();
        let mut stats = TrainStats::default();
        let batch = self
            .replay
            .sample_sequences(cfg.batch, cfg.seq_len, &mut self.rng)
            .map_err(|e| e.in_phase("sample"))?;

        let wl = self
            .models
            .wm
            .world_loss(&self.params.wm, &batch, &mut self.rng)
            .map_err(|e| e.in_phase("world model"))?;
        stats.world = wl.breakdown;
        if cfg.train_world {
            let gr = wl.graph.grad(wl.loss, &self.params.wm).map_err(|e| e.in_phase("world model"))?;
            Self::apply(Adam::new(cfg.wm_lr), &mut self.params.wm, gr, cfg.grad_clip).map_err(|e| e.in_phase("world model"))?;
        }
        let post = wl.posterior;
        drop(wl.graph);

        let h = cfg.policy.horizon;
        if cfg.train_control {
            let start = self.starts(&post);
            self.control_phase(&start, h, &mut stats).map_err(|e| e.in_phase("control actor"))?;
        }
        if cfg.train_safe || cfg.train_disc {
            let start = self.starts(&post);
            self.safe_phase(&start, h, &mut stats).map_err(|e| e.in_phase("safe actor"))?;
        }
        if cfg.train_lagrange && !self.lagrange.window.is_empty() {
            stats.c_k = Some(self.lagrange.update().map_err(|e| e.in_phase("lagrangian"))?);
        }
        self.grad_step += 1;
        if cfg.log_every > 0 && self.grad_step.is_multiple_of(cfg.log_every) {
            let mut row = MetricsRow::new(RowKind::Train, self.env_step, self.grad_step, self.lagrange.lambda);
            row.c_k = stats.c_k;
            row.wm_recon = Some(stats.world.recon);
            row.wm_reward = Some(stats.world.reward);
            row.wm_cost = Some(stats.world.cost);
            row.wm_kl = Some(stats.world.kl);
            row.actor_c_loss = stats.actor_c_loss;
            row.actor_s_loss = stats.actor_s_loss;
            row.critic_r_loss = stats.critic_r_loss;
            row.critic_c_loss = stats.critic_c_loss;
            row.disc_loss = stats.disc_loss;
            row.wallclock_s = self.elapsed_s();
            self.rows.push(row);
        }
        self.last_stats = Some(stats.clone());
        Ok(stats)
    }

    fn control_phase(&mut self, start: &LatentState<f32>, h: usize, stats: &mut TrainStats) -> Result<()> {
        let (m, p, cfg) = (&self.models, &mut self.params, &self.cfg);
        let mut g = Graph::new();
        let tr = policy::rollout(&mut g, &m.wm, &p.wm, &m.actor_c, Bind::train(&p.actor_c), start, h, cfg.policy.gamma, &mut policy::RngNoise(&mut self.rng))?;
        let cb = Bind::frozen(&p.critic_r);
        let vals = policy::state_values(&mut g, &tr.feats, |g, f| m.critic_r.target_value(g, cb, f))?;
        let targets = policy::lambda_targets_graph(&mut g, &tr.rewards, &tr.discounts, &vals, cfg.policy.lambda)?;
        let loss = policy::control_actor_loss(&mut g, &tr, &targets, cfg.policy.eta);
        let closs = policy::critic_loss(&mut g, &m.critic_r, Bind::train(&p.critic_r), &tr.feats[..h], &targets)?;
        g.check_finite("control rollout")?;
        stats.actor_c_loss = Some(g.item(loss) as f64);
        stats.critic_r_loss = Some(g.item(closs) as f64);
        let ga = g.grad(loss, &p.actor_c)?;
        let gc = g.grad(closs, &p.critic_r)?;
        drop(g);
        Self::apply(Adam::new(cfg.policy.actor_lr), &mut p.actor_c, ga, cfg.grad_clip)?;
        Self::apply(Adam::new(cfg.policy.critic_lr), &mut p.critic_r, gc, cfg.grad_clip)?;
        if p.critic_r.step() % cfg.policy.target_every == 0 {
            m.critic_r.sync_target(&mut p.critic_r)?;
        }
        Ok(())
    }

    fn safe_phase(&mut self, start: &LatentState<f32>, h: usize, stats: &mut TrainStats) -> Result<()> {
        let (m, p, cfg) = (&self.models, &mut self.params, &self.cfg);
        let mut g = Graph::new();
        let tr = policy::rollout(&mut g, &m.wm, &p.wm, &m.actor_s, Bind::train(&p.actor_s), start, h, cfg.policy.gamma, &mut policy::RngNoise(&mut self.rng))?;
        let cb = Bind::frozen(&p.critic_c);
        let vals = policy::state_values(&mut g, &tr.feats, |g, f| m.critic_c.target_value(g, cb, f))?;
        let targets = policy::lambda_targets_graph(&mut g, &tr.costs, &tr.discounts, &vals, cfg.policy.lambda)?;
        let db = Bind::frozen(&p.disc);
        let scores = (0..h)
            .map(|t| m.disc.clone_signal(&mut g, db, tr.feats[t], tr.actions[t]))
            .collect::<Result<Vec<_>>>()?;
        let loss = policy::safe_actor_loss(&mut g, &tr, &targets, self.lagrange.lambda, &scores, cfg.policy.eta);
        let closs = policy::critic_loss(&mut g, &m.critic_c, Bind::train(&p.critic_c), &tr.feats[..h], &targets)?;
        g.check_finite("safe rollout")?;
        stats.imagined_cost = Some(stack(&g, &tr.costs)?.mean() as f64);
        let feats = stack(&g, &tr.feats[..h])?;
        let safe_actions = stack(&g, &tr.actions)?;
        if cfg.train_safe {
            stats.actor_s_loss = Some(g.item(loss) as f64);
            stats.critic_c_loss = Some(g.item(closs) as f64);
            let ga = g.grad(loss, &p.actor_s)?;
            let gc = g.grad(closs, &p.critic_c)?;
            drop(g);
            Self::apply(Adam::new(cfg.policy.actor_lr), &mut p.actor_s, ga, cfg.grad_clip)?;
            Self::apply(Adam::new(cfg.policy.critic_lr), &mut p.critic_c, gc, cfg.grad_clip)?;
            if p.critic_c.step() % cfg.policy.target_every == 0 {
                m.critic_c.sync_target(&mut p.critic_c)?;
            }
        }
        if cfg.train_disc {
            let control_actions = m.actor_c.act_feat(&p.actor_c, &feats, ActMode::Sample, &mut self.rng)?;
            let batch = DiscBatch {
                feats,
                control_actions,
                safe_actions,
            };
            let mut g = Graph::new();
            let l = m.disc.train_loss(&mut g, Bind::train(&p.disc), &batch)?;
            g.check_finite("discriminator")?;
            stats.disc_loss = Some(g.item(l) as f64);
            let gd = g.grad(l, &p.disc)?;
            Self::apply(Adam::new(m.disc.lr), &mut p.disc, gd, cfg.grad_clip)?;
        }
        Ok(())
    }

    /// Whether a gradient step is due after the current environment step.
    pub fn train_due(&self) -> bool {
        self.env_step >= self.cfg.prefill
            && self.env_step.is_multiple_of(self.cfg.train_every)
            && self.replay.num_episodes() > 0
    }

    /// Collects (and trains) until `env_step` reaches `until`.
    pub fn run_until(&mut self, until: u64, mut on_rows: impl FnMut(&[MetricsRow]) -> Result<()>) -> Result<()> {
        while self.env_step < until {
            self.collect_step()?;
            if self.train_due() {
                self.train_step()?;
            }
            if !self.rows.is_empty() {
                let rows = self.drain_rows();
                on_rows(&rows)?;
            }
        }
        Ok(())
    }

    /// Planner-in-the-loop episodes with mean actions; touches neither the
    /// replay buffer nor any parameters.
    pub fn evaluate(&self, episodes: usize, mode: SwitchMode, seed: u64) -> Result<EvalSummary> {
        Ok(self.evaluate_with_trajectories(episodes, mode, seed)?.0)
    }

    pub fn evaluate_with_trajectories(&self, episodes: usize, mode: SwitchMode, seed: u64) -> Result<(EvalSummary, Vec<Vec<TrajectoryRow>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan_cfg = PlanConfig {
            horizon: self.cfg.planner_horizon,
            budget: self.planner_budget()?,
            mode,
            warmup: false,
            act_mode: ActMode::Mean,
        };
        let planner = self.params.planner(&self.models);
        let (mut returns, mut costs, mut rates, mut trajs) = (vec![], vec![], vec![], vec![]);
        for _ in 0..episodes {
            let (mut s, mut obs) = self.env.reset(rng.random());
            let mut latent = self.models.wm.initial_state(1)?;
            let mut prev = vec![0.0f32; ACTION_DIM];
            let (mut ret, mut cost, mut safe) = (0.0, 0.0, 0usize);
            let mut rows = Vec::with_capacity(self.cfg.env.episode_length);
            loop {
                latent = self.params.posterior(&self.models, &latent, &prev, &obs, None)?;
                let (a, d) = plan_action(&planner, &latent, &plan_cfg, &mut rng)?;
                let act = [a.data()[0] as f64, a.data()[1] as f64];
                let (next, res) = self.env.step(&s, act)?;
                ret += res.reward;
                cost += res.cost;
                safe += d.chose_safe as usize;
                rows.push(TrajectoryRow {
                    step: next.step_index,
                    state: next,
                    action: act,
                    reward: res.reward,
                    cost: res.cost,
                    plan: Some((d.c_obs, d.c_sum, d.chose_safe)),
                });
                prev = vec![act[0] as f32, act[1] as f32];
                s = next;
                obs = res.observation;
                if res.terminal {
                    break;
                }
            }
            returns.push(ret);
            costs.push(cost);
            rates.push(safe as f64 / rows.len() as f64);
            trajs.push(rows);
        }
        let mean_cost = mean(&costs);
        Ok((
            EvalSummary {
                mean_return: mean(&returns),
                mean_cost,
                chose_safe_rate: mean(&rates),
                violation: mean_cost > self.cfg.budget,
                returns,
                costs,
                chose_safe_rates: rates,
            },
            trajs,
        ))
    }

    /// Writes `params.nmdr`, `config.txt` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = self.params.to_entries();
        entries.extend(self.replay.to_entries());
        write_checkpoint(&dir.join(PARAMS_FILE), &entries)?;
        std::fs::write(dir.join(CONFIG_FILE), self.cfg.to_text())?;
        let state = SavedState {
            env_step: self.env_step,
            grad_step: self.grad_step,
            rng: RngState::capture(&self.rng),
            lagrange: self.lagrange.clone(),
            live: self.live.clone(),
            elapsed_s: self.elapsed_s(),
            last_stats: self.last_stats.clone(),
        };
        std::fs::write(dir.join(STATE_FILE), serde_json::to_string(&state)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let entries = read_checkpoint(&dir.join(PARAMS_FILE))?;
        let params = Params::from_entries(&entries)?;
        let replay = ReplayBuffer::from_entries(&entries, cfg.replay_capacity)?;
        let text = std::fs::read_to_string(dir.join(STATE_FILE))?;
        let st: SavedState = serde_json::from_str(&text)?;
        let models = Models::new(&cfg);
        // Every expected parameter must be present with the right shape.
        let mut fresh = ChaCha8Rng::seed_from_u64(0);
        let reference = Params::init(&models, &mut fresh)?;
        for (want, got) in reference.sets().iter().zip(params.sets()) {
            for (name, t) in want.iter() {
                match got.get(name) {
                    Some(g) if g.shape() == t.shape() => {}
                    Some(_) => return Err(Error::Checkpoint(format!("parameter `{name}` has the wrong shape"))),
                    None => return Err(Error::Checkpoint(format!("parameter `{name}` missing"))),
                }
            }
            if want.len() != got.len() {
                return Err(Error::Checkpoint("unexpected extra parameters".into()));
            }
        }
        Ok(Self {
            env: CircleEnv::new(cfg.env.clone()),
            models,
            params,
            lagrange: st.lagrange,
            replay,
            live: st.live,
            env_step: st.env_step,
            grad_step: st.grad_step,
            switch_mode: SwitchMode::Switch,
            last_stats: st.last_stats,
            rng: st.rng.restore()?,
            rows: Vec::new(),
            started: Instant::now(),
            elapsed_before: st.elapsed_s,
            cfg,
        })
    }
}

/// Mean return and cost of uniformly random actions.
pub fn random_policy_baseline(env: &CircleEnv, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut r, mut c) = (vec![], vec![]);
    for _ in 0..episodes {
        let (mut s, _) = env.reset(rng.random());
        let (mut ret, mut cost) = (0.0, 0.0);
        loop {
            let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            let (n, res) = env.step(&s, a)?;
            ret += res.reward;
            cost += res.cost;
            s = n;
            if res.terminal {
                break;
            }
        }
        r.push(ret);
        c.push(cost);
    }
    Ok((mean(&r), mean(&c)))
}
