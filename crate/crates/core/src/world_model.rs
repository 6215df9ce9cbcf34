//! Recurrent latent world model.
//!
//! Seven components share the parameter prefix `wm.`: a gated recurrent
//! cell, an observation encoder (embedding + posterior head), a decoder, the
//! prior ("transition") head, and reward, cost and discount heads. All heads
//! read the feature vector `concat(h, z)`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dist::{self, DiagGaussian};
use crate::error::{Error, Result};
use crate::nn::{Bind, Graph, Mlp, NodeId, ParamSet, Real, Tensor};

pub const PREFIX: &str = "wm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub embed: usize,
    pub std_floor: f64,
    pub free_bits: f64,
    /// Weight of `KL[sg(q) || p]`; the posterior side gets `1 - kl_balance`.
    pub kl_balance: f64,
    pub alpha_r: f64,
    pub alpha_c: f64,
    pub beta_kl: f64,
}

impl WorldModelConfig {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            deter: 64,
            stoch: 16,
            hidden: 128,
            embed: 64,
            std_floor: 0.1,
            free_bits: 1.0,
            kl_balance: 0.8,
            alpha_r: 1.0,
            alpha_c: 10.0,
            beta_kl: 1.0,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.deter + self.stoch
    }
}

/// Latent state as plain values, rows = batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState<T: Real = f32> {
    pub h: Tensor<T>,
    pub z: Tensor<T>,
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

impl<T: Real> LatentState<T> {
    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    /// Places the state on a graph as constants (a detached start point).
    pub fn to_graph(&self, g: &mut Graph<T>) -> Latent {
        Latent {
            h: g.constant(self.h.clone()),
            z: g.constant(self.z.clone()),
            dist: DiagGaussian {
                mean: g.constant(self.mean.clone()),
                std: g.constant(self.std.clone()),
            },
        }
    }

    /// Rows `[start, end)` of every component.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            h: self.h.slice_rows(start, end),
            z: self.z.slice_rows(start, end),
            mean: self.mean.slice_rows(start, end),
            std: self.std.slice_rows(start, end),
        }
    }

    /// Selects the given rows.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let pick = |t: &Tensor<T>| {
            let parts: Vec<Tensor<T>> = rows.iter().map(|&r| t.slice_rows(r, r + 1)).collect();
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            Tensor::vstack(&refs).expect("gather")
        };
        Self {
            h: pick(&self.h),
            z: pick(&self.z),
            mean: pick(&self.mean),
            std: pick(&self.std),
        }
    }

    /// `concat(h, z)` as a value.
    pub fn feat(&self) -> Tensor<T> {
        let (hc, zc) = (self.h.cols(), self.z.cols());
        let mut data = Vec::with_capacity(self.h.rows() * (hc + zc));
        for r in 0..self.h.rows() {
            data.extend_from_slice(self.h.row(r));
            data.extend_from_slice(self.z.row(r));
        }
        Tensor::new(vec![self.h.rows(), hc + zc], data).expect("feat")
    }
}

/// Latent state living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub h: NodeId,
    pub z: NodeId,
    pub dist: DiagGaussian,
}

impl Latent {
    pub fn feat<T: Real>(&self, g: &mut Graph<T>) -> NodeId {
        g.concat(&[self.h, self.z])
    }

    pub fn values<T: Real>(&self, g: &Graph<T>) -> LatentState<T> {
        LatentState {
            h: g.value(self.h).clone(),
            z: g.value(self.z).clone(),
            mean: g.value(self.dist.mean).clone(),
            std: g.value(self.dist.std).clone(),
        }
    }
}

/// Head outputs for a batch of features.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub obs: NodeId,
    pub reward: NodeId,
    pub cost: NodeId,
    /// Logit of the continuation probability.
    pub discount_logit: NodeId,
}

/// Head means as values.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValues {
    pub obs: Tensor<f32>,
    pub reward: Tensor<f32>,
    pub cost: Tensor<f32>,
    /// Continuation probability in (0, 1).
    pub discount: Tensor<f32>,
}

/// Time-major batch of sequences. Row `t * batch + b` holds step `t` of
/// sequence `b`. The action at step `t` is the one that produced
/// observation `t`; step 0 carries a zero placeholder action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub time: usize,
    pub batch: usize,
    pub obs: Tensor<f32>,
    pub actions: Tensor<f32>,
    pub rewards: Tensor<f32>,
    pub costs: Tensor<f32>,
    pub terminals: Tensor<f32>,
}

impl SequenceBatch {
    pub fn rows(&self, t: usize) -> (usize, usize) {
        (t * self.batch, (t + 1) * self.batch)
    }
}

/// Scalar components of the world-model loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub reward: f64,
    pub cost: f64,
    pub discount: f64,
    /// Balanced, free-bits-clamped KL term as it enters `total`.
    pub kl: f64,
    /// Unclamped `KL[q || p]`.
    pub kl_raw: f64,
    pub total: f64,
}

pub struct WorldLoss<T: Real = f32> {
    pub breakdown: LossBreakdown,
    pub graph: Graph<T>,
    pub loss: NodeId,
    /// `KL[sg(q) || p]`, trains the prior.
    pub kl_prior_side: NodeId,
    /// `KL[q || sg(p)]`, trains the posterior.
    pub kl_post_side: NodeId,
    /// Posterior states for every row of the batch (time-major), detached.
    pub posterior: LatentState<T>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WorldModelConfig,
    embed: Mlp,
    post: Mlp,
    prior: Mlp,
    decoder: Mlp,
    reward: Mlp,
    cost: Mlp,
    discount: Mlp,
}

impl WorldModel {
    pub fn new(cfg: WorldModelConfig) -> Self {
        let f = cfg.feat_dim();
        let hid = cfg.hidden;
        Self {
            embed: Mlp::new(format!("{PREFIX}.embed"), &[cfg.obs_dim, hid, cfg.embed]),
            post: Mlp::new(format!("{PREFIX}.post"), &[cfg.deter + cfg.embed, hid, 2 * cfg.stoch]),
            prior: Mlp::new(format!("{PREFIX}.prior"), &[cfg.deter, hid, 2 * cfg.stoch]),
            decoder: Mlp::new(format!("{PREFIX}.dec"), &[f, hid, cfg.obs_dim]),
            reward: Mlp::new(format!("{PREFIX}.reward"), &[f, hid, 1]),
            cost: Mlp::new(format!("{PREFIX}.cost"), &[f, hid, 1]),
            discount: Mlp::new(format!("{PREFIX}.discount"), &[f, hid, 1]),
            cfg,
        }
    }

    fn gru_in(&self) -> usize {
        self.cfg.stoch + self.cfg.act_dim
    }

    pub fn init(&self, ps: &mut ParamSet<f32>, rng: &mut impl Rng) -> Result<()> {
        let d = self.cfg.deter;
        let fan_in = self.gru_in() + d;
        for (name, width) in [("gates", 2 * d), ("cand", d)] {
            let std = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * width)
                .map(|_| (crate::nn::mlp::truncated_std_normal(rng) * std) as f32)
                .collect();
            ps.insert(&format!("{PREFIX}.gru.{name}.w"), Tensor::new(vec![fan_in, width], w)?)?;
            ps.insert(&format!("{PREFIX}.gru.{name}.b"), Tensor::zeros(&[width]))?;
        }
        for m in self.mlps() {
            m.init(ps, rng, false)?;
        }
        Ok(())
    }

    fn mlps(&self) -> [&Mlp; 7] {
        [
            &self.embed,
            &self.post,
            &self.prior,
            &self.decoder,
            &self.reward,
            &self.cost,
            &self.discount,
        ]
    }

    /// Prefixes of the prior ("transition") head parameters.
    pub fn prior_prefix(&self) -> &str {
        &self.prior.prefix
    }

    /// Prefixes of the posterior head parameters.
    pub fn posterior_prefix(&self) -> &str {
        &self.post.prefix
    }

    pub fn initial_state<T: Real>(&self, batch: usize) -> Result<LatentState<T>> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let s = self.cfg.stoch;
        Ok(LatentState {
            h: Tensor::zeros(&[batch, self.cfg.deter]),
            z: Tensor::zeros(&[batch, s]),
            mean: Tensor::zeros(&[batch, s]),
            std: Tensor::full(&[batch, s], T::c(self.cfg.std_floor)),
        })
    }

    /// Gated recurrent update `h_t = f(h_{t-1}, z_{t-1}, a_t)`.
    pub fn recurrent<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, prev: &Latent, action: NodeId) -> Result<NodeId> {
        let d = self.cfg.deter;
        let (ar, ac) = (g.value(action).rows(), g.value(action).cols());
        if ac != self.cfg.act_dim || ar != g.value(prev.h).rows() {
            return Err(Error::Shape(format!(
                "action {:?} for latent batch {}",
                g.shape(action),
                g.value(prev.h).rows()
            )));
        }
        let wg = g.bind(p, &format!("{PREFIX}.gru.gates.w"))?;
        let bg = g.bind(p, &format!("{PREFIX}.gru.gates.b"))?;
        let wc = g.bind(p, &format!("{PREFIX}.gru.cand.w"))?;
        let bc = g.bind(p, &format!("{PREFIX}.gru.cand.b"))?;
        let x = g.concat(&[prev.z, action]);
        let xh = g.concat(&[x, prev.h]);
        let gl = g.matmul(xh, wg);
        let gl = g.add(gl, bg);
        let gates = g.sigmoid(gl);
        let reset = g.slice_cols(gates, 0, d);
        let update = g.slice_cols(gates, d, 2 * d);
        let rh = g.mul(reset, prev.h);
        let xrh = g.concat(&[x, rh]);
        let cl = g.matmul(xrh, wc);
        let cl = g.add(cl, bc);
        let cand = g.tanh(cl);
        let delta = g.sub(cand, prev.h);
        let step = g.mul(update, delta);
        Ok(g.add(prev.h, step))
    }

    /// Prior over `z` given `h`.
    pub fn prior_dist<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, h: NodeId) -> Result<DiagGaussian> {
        let raw = self.prior.forward(g, p, h)?;
        Ok(dist::diag_gaussian_head(g, raw, self.cfg.std_floor))
    }

    pub fn embed_obs<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, obs: NodeId) -> Result<NodeId> {
        self.embed.forward(g, p, obs)
    }

    /// One filtering step from an already-embedded observation.
    pub fn observe_step_embedded<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        prev: &Latent,
        action: NodeId,
        embedded: NodeId,
        noise: Tensor<T>,
    ) -> Result<(Latent, DiagGaussian)> {
        let h = self.recurrent(g, p, prev, action)?;
        let prior = self.prior_dist(g, p, h)?;
        let he = g.concat(&[h, embedded]);
        let raw = self.post.forward(g, p, he)?;
        let post = dist::diag_gaussian_head(g, raw, self.cfg.std_floor);
        let z = dist::gaussian_sample(g, post, noise);
        Ok((Latent { h, z, dist: post }, prior))
    }

    /// Posterior update from a raw observation: returns the posterior latent
    /// and the prior it was compared against.
    pub fn observe_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        prev: &Latent,
        action: NodeId,
        obs: NodeId,
        noise: Tensor<T>,
    ) -> Result<(Latent, DiagGaussian)> {
        let e = self.embed_obs(g, p, obs)?;
        self.observe_step_embedded(g, p, prev, action, e, noise)
    }

    /// Observation-free step. With `noise = None` the prior mean is used.
    pub fn imagine_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        prev: &Latent,
        action: NodeId,
        noise: Option<Tensor<T>>,
    ) -> Result<Latent> {
        let h = self.recurrent(g, p, prev, action)?;
        let prior = self.prior_dist(g, p, h)?;
        let z = match noise {
            Some(eps) => dist::gaussian_sample(g, prior, eps),
            None => prior.mean,
        };
        Ok(Latent { h, z, dist: prior })
    }

    /// Observation-free unroll over `actions`, returning the start state and
    /// every imagined state. Without `rng` each step takes the prior mean.
    pub fn imagine(
        &self,
        params: &ParamSet<f32>,
        start: &LatentState<f32>,
        actions: &[Tensor<f32>],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<LatentState<f32>>> {
        let mut g = Graph::new();
        let mut s = start.to_graph(&mut g);
        let mut out = vec![start.clone()];
        for a in actions {
            let a = g.constant(a.clone());
            let eps = rng.as_deref_mut().map(|mut r| dist::std_normal_noise(&[start.batch(), self.cfg.stoch], &mut r));
            s = self.imagine_step(&mut g, Bind::frozen(params), &s, a, eps)?;
            out.push(s.values(&g));
        }
        g.check_finite("imagination")?;
        Ok(out)
    }

    pub fn heads<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId) -> Result<Heads> {
        Ok(Heads {
            obs: self.decoder.forward(g, p, feat)?,
            reward: self.reward.forward(g, p, feat)?,
            cost: self.cost.forward(g, p, feat)?,
            discount_logit: self.discount.forward(g, p, feat)?,
        })
    }

    pub fn reward_head<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId) -> Result<NodeId> {
        self.reward.forward(g, p, feat)
    }

    pub fn cost_head<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId) -> Result<NodeId> {
        self.cost.forward(g, p, feat)
    }

    pub fn discount_head<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId) -> Result<NodeId> {
        self.discount.forward(g, p, feat)
    }

    /// Deterministic head means for a latent state.
    pub fn predict_heads(&self, params: &ParamSet<f32>, state: &LatentState<f32>) -> Result<HeadValues> {
        let mut g = Graph::new();
        let l = state.to_graph(&mut g);
        let f = l.feat(&mut g);
        let h = self.heads(&mut g, Bind::frozen(params), f)?;
        let disc = g.sigmoid(h.discount_logit);
        Ok(HeadValues {
            obs: g.value(h.obs).clone(),
            reward: g.value(h.reward).clone(),
            cost: g.value(h.cost).clone(),
            discount: g.value(disc).clone(),
        })
    }

    /// Unrolls the posterior over `batch` and builds the composite loss
    /// `recon + a_r * reward + a_c * cost + discount + beta * kl`.
    ///
    /// The KL term is balanced: `kl_balance * max(free, KL[sg(q)||p]) +
    /// (1 - kl_balance) * max(free, KL[q||sg(p)])`.
    pub fn world_loss<T: Real>(&self, params: &ParamSet<T>, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<WorldLoss<T>> {
        let c = &self.cfg;
        let (tl, b) = (batch.time, batch.batch);
        if tl == 0 || b == 0 {
            return Err(Error::InvalidArgument("empty sequence batch".into()));
        }
        let n = tl * b;
        let check = |t: &Tensor<f32>, cols: usize, what: &str| -> Result<()> {
            if t.rows() != n || t.cols() != cols {
                return Err(Error::Shape(format!("{what}: {:?}, expected [{n}, {cols}]", t.shape())));
            }
            Ok(())
        };
        check(&batch.obs, c.obs_dim, "observations")?;
        check(&batch.actions, c.act_dim, "actions")?;
        check(&batch.rewards, 1, "rewards")?;
        check(&batch.costs, 1, "costs")?;
        check(&batch.terminals, 1, "terminals")?;
        if batch.actions.data()[..b * c.act_dim].iter().any(|&a| a != 0.0) {
            return Err(Error::InvalidArgument("first action of each sequence must be the zero placeholder".into()));
        }

        let p = Bind::train(params);
        let mut g = Graph::<T>::new();
        let obs = g.constant(batch.obs.cast());
        let emb = self.embed_obs(&mut g, p, obs)?;
        let mut state = self.initial_state::<T>(b)?.to_graph(&mut g);
        let mut posts = Vec::with_capacity(tl);
        let mut priors = Vec::with_capacity(tl);
        for t in 0..tl {
            let (r0, r1) = batch.rows(t);
            let a = g.constant(batch.actions.slice_rows(r0, r1).cast());
            let e = g.slice_rows(emb, r0, r1);
            let noise = dist::std_normal_noise(&[b, c.stoch], rng);
            let (post, prior) = self.observe_step_embedded(&mut g, p, &state, a, e, noise)?;
            posts.push(post);
            priors.push(prior);
            state = post;
        }
        let stack = |g: &mut Graph<T>, ids: Vec<NodeId>| g.concat_rows(&ids);
        let hs = stack(&mut g, posts.iter().map(|l| l.h).collect());
        let zs = stack(&mut g, posts.iter().map(|l| l.z).collect());
        let q = DiagGaussian {
            mean: stack(&mut g, posts.iter().map(|l| l.dist.mean).collect()),
            std: stack(&mut g, posts.iter().map(|l| l.dist.std).collect()),
        };
        let pr = DiagGaussian {
            mean: stack(&mut g, priors.iter().map(|d| d.mean).collect()),
            std: stack(&mut g, priors.iter().map(|d| d.std).collect()),
        };
        let feat = g.concat(&[hs, zs]);
        let heads = self.heads(&mut g, p, feat)?;

        let rewards = g.constant(batch.rewards.cast());
        let costs = g.constant(batch.costs.cast());
        let cont = g.constant(batch.terminals.map(|v| 1.0 - v).cast());

        let recon_rows = dist::unit_gaussian_nll(&mut g, heads.obs, obs);
        let recon = g.mean(recon_rows);
        let rew_rows = dist::unit_gaussian_nll(&mut g, heads.reward, rewards);
        let rew = g.mean(rew_rows);
        let cost_rows = dist::unit_gaussian_nll(&mut g, heads.cost, costs);
        let cost = g.mean(cost_rows);
        let disc_lp = dist::bernoulli_log_prob(&mut g, heads.discount_logit, cont);
        let disc_mean = g.mean(disc_lp);
        let disc = g.neg(disc_mean);

        let q_sg = dist::detach_gaussian(&mut g, q);
        let p_sg = dist::detach_gaussian(&mut g, pr);
        let kl_prior_side = dist::diag_gaussian_kl(&mut g, q_sg, pr);
        let kl_post_side = dist::diag_gaussian_kl(&mut g, q, p_sg);
        let kp = g.max_scalar(kl_prior_side, c.free_bits);
        let kq = g.max_scalar(kl_post_side, c.free_bits);
        let kp = g.scale(kp, c.kl_balance);
        let kq = g.scale(kq, 1.0 - c.kl_balance);
        let kl = g.add(kp, kq);

        let mut terms = vec![recon];
        terms.push(g.scale(rew, c.alpha_r));
        terms.push(g.scale(cost, c.alpha_c));
        terms.push(disc);
        terms.push(g.scale(kl, c.beta_kl));
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }

        let named = [("reconstruction", recon), ("reward", rew), ("cost", cost), ("discount", disc), ("kl", kl)];
        for (name, id) in named {
            if !g.item(id).is_finite() {
                return Err(Error::NonFinite(format!("world-model {name} loss")));
            }
        }
        g.check_finite("world-model forward")?;

        let v = |id: NodeId| g.item(id).to_f64c();
        let breakdown = LossBreakdown {
            recon: v(recon),
            reward: v(rew),
            cost: v(cost),
            discount: v(disc),
            kl: v(kl),
            kl_raw: v(kl_prior_side),
            total: v(total),
        };
        let posterior = LatentState {
            h: g.value(hs).clone(),
            z: g.value(zs).clone(),
            mean: g.value(q.mean).clone(),
            std: g.value(q.std).clone(),
        };
        Ok(WorldLoss {
            breakdown,
            graph: g,
            loss: total,
            kl_prior_side,
            kl_post_side,
            posterior,
        })
    }
}
