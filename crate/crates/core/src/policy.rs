//! Control and safe actors, reward and cost critics, imagination rollouts
//! and lambda-returns.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{self, TruncNormal};
use crate::error::{Error, Result};
use crate::nn::{Bind, Graph, Mlp, NodeId, ParamSet, Real, Tensor};
use crate::world_model::{Latent, LatentState, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActorId {
    Control,
    Safe,
}

impl ActorId {
    pub fn prefix(self) -> &'static str {
        match self {
            ActorId::Control => "actor_c",
            ActorId::Safe => "actor_s",
        }
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActorId::Control => "control",
            ActorId::Safe => "safe",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CriticId {
    Reward,
    Cost,
}

impl CriticId {
    pub fn prefix(self) -> &'static str {
        match self {
            CriticId::Reward => "critic_r",
            CriticId::Cost => "critic_c",
        }
    }

    pub fn target_prefix(self) -> &'static str {
        match self {
            CriticId::Reward => "critic_r_target",
            CriticId::Cost => "critic_c_target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub lambda: f64,
    pub eta: f64,
    pub gamma: f64,
    pub hidden: usize,
    pub layers: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub std_floor: f64,
    /// Critic updates between hard copies into the target critic.
    pub target_every: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            lambda: 0.95,
            eta: 3e-4,
            gamma: 0.99,
            hidden: 128,
            layers: 2,
            actor_lr: 4e-5,
            critic_lr: 1e-4,
            std_floor: 0.1,
            target_every: 100,
        }
    }
}

fn hidden_sizes(input: usize, hidden: usize, layers: usize, out: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(hidden, layers));
    s.push(out);
    s
}

#[derive(Clone, Debug)]
pub struct Actor {
    pub id: ActorId,
    pub net: Mlp,
    pub act_dim: usize,
    pub std_floor: f64,
}

impl Actor {
    pub fn new(id: ActorId, feat_dim: usize, act_dim: usize, cfg: &PolicyConfig) -> Self {
        Self {
            id,
            net: Mlp::new(id.prefix(), &hidden_sizes(feat_dim, cfg.hidden, cfg.layers, 2 * act_dim)),
            act_dim,
            std_floor: cfg.std_floor,
        }
    }

    pub fn init(&self, ps: &mut ParamSet<f32>, rng: &mut impl Rng) -> Result<()> {
        self.net.init(ps, rng, false)
    }

    pub fn dist<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId) -> Result<TruncNormal> {
        let raw = self.net.forward(g, p, feat)?;
        Ok(dist::trunc_normal_head(g, raw, self.std_floor))
    }

    /// Action for a batch of latent states; never records gradients.
    pub fn act(&self, params: &ParamSet<f32>, state: &LatentState<f32>, mode: ActMode, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        self.act_feat(params, &state.feat(), mode, rng)
    }

    /// As [`Actor::act`], from `concat(h, z)` features.
    pub fn act_feat(&self, params: &ParamSet<f32>, feat: &Tensor<f32>, mode: ActMode, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let f = g.constant(feat.clone());
        let d = self.dist(&mut g, Bind::frozen(params), f)?;
        let a = match mode {
            ActMode::Sample => dist::trunc_normal_draw(&mut g, d, rng),
            ActMode::Mean => d.mean,
        };
        g.check_finite("actor forward")?;
        Ok(g.value(a).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub id: CriticId,
    pub net: Mlp,
    pub target: Mlp,
}

impl Critic {
    pub fn new(id: CriticId, feat_dim: usize, cfg: &PolicyConfig) -> Self {
        let sizes = hidden_sizes(feat_dim, cfg.hidden, cfg.layers, 1);
        Self {
            id,
            net: Mlp::new(id.prefix(), &sizes),
            target: Mlp::new(id.target_prefix(), &sizes),
        }
    }

    /// Initializes the online critic and a matching target copy.
    pub fn init(&self, ps: &mut ParamSet<f32>, rng: &mut impl Rng) -> Result<()> {
        self.net.init(ps, rng, true)?;
        self.sync_target(ps)
    }

    /// Hard copy of the online weights into the target critic.
    pub fn sync_target(&self, ps: &mut ParamSet<f32>) -> Result<()> {
        let from = format!("{}.", self.id.prefix());
        let to = format!("{}.", self.id.target_prefix());
        let src = ps.clone();
        src.copy_prefixed_into(&from, &to, ps)
    }

    pub fn value<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId) -> Result<NodeId> {
        self.net.forward(g, p, feat)
    }

    pub fn target_value<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId) -> Result<NodeId> {
        self.target.forward(g, p, feat)
    }
}

/// Imagined rollout living on a graph. Step `t` pairs the action taken at
/// `states[t]` with the reward, cost and discount predicted at
/// `states[t + 1]`. Each entry is `[B, ·]`.
#[derive(Clone, Debug)]
pub struct ImaginedTrajectory {
    pub states: Vec<Latent>,
    pub feats: Vec<NodeId>,
    pub actions: Vec<NodeId>,
    pub log_probs: Vec<NodeId>,
    pub entropies: Vec<NodeId>,
    pub rewards: Vec<NodeId>,
    pub costs: Vec<NodeId>,
    /// `gamma * p(continue)`.
    pub discounts: Vec<NodeId>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Source of the reparameterization noise used by [`rollout`].
pub trait RolloutNoise<T: Real> {
    /// Standard-normal noise for a truncated-normal action draw.
    fn action(&mut self, mean: &Tensor<T>, std: &Tensor<T>) -> Tensor<T>;
    /// Standard-normal noise for a latent sample.
    fn latent(&mut self, shape: &[usize]) -> Tensor<T>;
}

/// Fresh noise from a random generator.
pub struct RngNoise<'a, R>(pub &'a mut R);

impl<T: Real, R: Rng> RolloutNoise<T> for RngNoise<'_, R> {
    fn action(&mut self, mean: &Tensor<T>, std: &Tensor<T>) -> Tensor<T> {
        dist::trunc_normal_noise(mean, std, self.0)
    }

    fn latent(&mut self, shape: &[usize]) -> Tensor<T> {
        dist::std_normal_noise(shape, self.0)
    }
}

/// Records the draws of an inner source so they can be replayed.
#[derive(Clone, Debug, Default)]
pub struct NoiseTape {
    pub draws: Vec<Tensor<f64>>,
    cursor: usize,
}

impl NoiseTape {
    /// Restarts replay from the first draw.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    fn next<T: Real>(&mut self) -> Tensor<T> {
        let t = self.draws[self.cursor].cast();
        self.cursor += 1;
        t
    }
}

/// Records `inner`'s draws into `tape`.
pub struct Recording<'a, N> {
    pub inner: N,
    pub tape: &'a mut NoiseTape,
}

impl<T: Real, N: RolloutNoise<T>> RolloutNoise<T> for Recording<'_, N> {
    fn action(&mut self, mean: &Tensor<T>, std: &Tensor<T>) -> Tensor<T> {
        let e = self.inner.action(mean, std);
        self.tape.draws.push(e.cast());
        e
    }

    fn latent(&mut self, shape: &[usize]) -> Tensor<T> {
        let e = self.inner.latent(shape);
        self.tape.draws.push(e.cast());
        e
    }
}

/// Replays recorded draws in order.
impl<T: Real> RolloutNoise<T> for NoiseTape {
    fn action(&mut self, _mean: &Tensor<T>, _std: &Tensor<T>) -> Tensor<T> {
        self.next()
    }

    fn latent(&mut self, _shape: &[usize]) -> Tensor<T> {
        self.next()
    }
}

/// Rolls `actor` forward for `horizon` steps from `start` inside the world
/// model. World-model parameters are bound frozen; the actor is bound with
/// `actor_bind`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Real>(
    g: &mut Graph<T>,
    wm: &WorldModel,
    wm_params: &ParamSet<T>,
    actor: &Actor,
    actor_bind: Bind<'_, T>,
    start: &LatentState<T>,
    horizon: usize,
    gamma: f64,
    noise: &mut impl RolloutNoise<T>,
) -> Result<ImaginedTrajectory> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("imagination horizon must be at least 1".into()));
    }
    let wp = Bind::frozen(wm_params);
    let b = start.batch();
    let mut state = start.to_graph(g);
    let mut states = vec![state];
    let mut feats = vec![state.feat(g)];
    let (mut actions, mut log_probs, mut entropies) = (vec![], vec![], vec![]);
    for t in 0..horizon {
        let d = actor.dist(g, actor_bind, feats[t])?;
        let eps = noise.action(g.value(d.mean), g.value(d.std));
        let a = dist::trunc_normal_sample(g, d, eps);
        let sg_a = g.detach(a);
        log_probs.push(dist::trunc_normal_log_prob(g, d, sg_a)?);
        entropies.push(dist::trunc_normal_entropy(g, d));
        actions.push(a);
        let z_eps = noise.latent(&[b, wm.cfg.stoch]);
        state = wm.imagine_step(g, wp, &state, a, Some(z_eps))?;
        states.push(state);
        feats.push(state.feat(g));
    }
    let next = g.concat_rows(&feats[1..]);
    let r = wm.reward_head(g, wp, next)?;
    let c = wm.cost_head(g, wp, next)?;
    let dl = wm.discount_head(g, wp, next)?;
    let cont = g.sigmoid(dl);
    let disc = g.scale(cont, gamma);
    let split = |g: &mut Graph<T>, x: NodeId| (0..horizon).map(|t| g.slice_rows(x, t * b, (t + 1) * b)).collect::<Vec<_>>();
    let rewards = split(g, r);
    let costs = split(g, c);
    let discounts = split(g, disc);
    Ok(ImaginedTrajectory {
        states,
        feats,
        actions,
        log_probs,
        entropies,
        rewards,
        costs,
        discounts,
    })
}

/// Critic values at every state of the trajectory (`H + 1` entries).
pub fn state_values<T: Real>(
    g: &mut Graph<T>,
    feats: &[NodeId],
    f: impl FnOnce(&mut Graph<T>, NodeId) -> Result<NodeId>,
) -> Result<Vec<NodeId>> {
    let b = g.value(feats[0]).rows();
    let all = g.concat_rows(feats);
    let v = f(g, all)?;
    Ok((0..feats.len()).map(|t| g.slice_rows(v, t * b, (t + 1) * b)).collect())
}

fn check_lengths(r: usize, d: usize, v: usize, lambda: f64) -> Result<()> {
    if r == 0 || d != r || v != r + 1 {
        return Err(Error::InvalidArgument(format!(
            "lambda targets need matching rewards/discounts and one extra value; got {r}, {d}, {v}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Lambda-returns for one sequence. `values[t]` is the value of the state
/// that step `t` starts from; `values[H]` bootstraps the final step.
///
/// `V_{H-1} = r_{H-1} + g_{H-1} v_H`,
/// `V_t = r_t + g_t ((1 - lambda) v_{t+1} + lambda V_{t+1})`.
pub fn lambda_targets(rewards: &[f64], discounts: &[f64], values: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lengths(rewards.len(), discounts.len(), values.len(), lambda)?;
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let boot = if t == h - 1 {
            values[h]
        } else {
            (1.0 - lambda) * values[t + 1] + lambda * next
        };
        out[t] = rewards[t] + discounts[t] * boot;
        next = out[t];
    }
    Ok(out)
}

/// Graph version of [`lambda_targets`] over `[B, 1]` columns.
pub fn lambda_targets_graph<T: Real>(
    g: &mut Graph<T>,
    rewards: &[NodeId],
    discounts: &[NodeId],
    values: &[NodeId],
    lambda: f64,
) -> Result<Vec<NodeId>> {
    check_lengths(rewards.len(), discounts.len(), values.len(), lambda)?;
    let h = rewards.len();
    let mut out = vec![values[h]; h];
    for t in (0..h).rev() {
        let boot = if t == h - 1 {
            values[h]
        } else {
            let v = g.scale(values[t + 1], 1.0 - lambda);
            let n = g.scale(out[t + 1], lambda);
            g.add(v, n)
        };
        let gb = g.mul(discounts[t], boot);
        out[t] = g.add(rewards[t], gb);
    }
    Ok(out)
}

fn mean_of<T: Real>(g: &mut Graph<T>, cols: &[NodeId]) -> NodeId {
    let all = g.concat_rows(cols);
    g.mean(all)
}

/// `mean(-V - eta * H)` over steps and batch.
pub fn control_actor_loss<T: Real>(g: &mut Graph<T>, traj: &ImaginedTrajectory, targets: &[NodeId], eta: f64) -> NodeId {
    let v = mean_of(g, targets);
    let h = mean_of(g, &traj.entropies);
    let nv = g.neg(v);
    let eh = g.scale(h, eta);
    g.sub(nv, eh)
}

/// `mean(lambda_p * C - logD - eta * H)` over steps and batch.
pub fn safe_actor_loss<T: Real>(
    g: &mut Graph<T>,
    traj: &ImaginedTrajectory,
    cost_targets: &[NodeId],
    lambda_p: f64,
    disc_scores: &[NodeId],
    eta: f64,
) -> NodeId {
    let c = mean_of(g, cost_targets);
    let d = mean_of(g, disc_scores);
    let h = mean_of(g, &traj.entropies);
    let lc = g.scale(c, lambda_p);
    let ld = g.sub(lc, d);
    let eh = g.scale(h, eta);
    g.sub(ld, eh)
}

/// Unit-variance Gaussian NLL of detached targets under the critic, with
/// detached input states.
pub fn critic_loss<T: Real>(
    g: &mut Graph<T>,
    critic: &Critic,
    p: Bind<'_, T>,
    feats: &[NodeId],
    targets: &[NodeId],
) -> Result<NodeId> {
    if feats.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} critic states for {} targets",
            feats.len(),
            targets.len()
        )));
    }
    let f = g.concat_rows(feats);
    let f = g.detach(f);
    let y = g.concat_rows(targets);
    let y = g.detach(y);
    let v = critic.value(g, p, f)?;
    let nll = dist::unit_gaussian_nll(g, v, y);
    Ok(g.mean(nll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world_model::WorldModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Explicit mixture of n-step returns.
    fn mixture_oracle(r: &[f64], d: &[f64], v: &[f64], lambda: f64) -> Vec<f64> {
        let h = r.len();
        let nstep = |t: usize, n: usize| {
            let mut acc = 0.0;
            let mut disc = 1.0;
            for k in 0..n {
                acc += disc * r[t + k];
                disc *= d[t + k];
            }
            acc + disc * v[t + n]
        };
        (0..h)
            .map(|t| {
                let m = h - t;
                let mut out = 0.0;
                for n in 1..m {
                    out += (1.0 - lambda) * lambda.powi(n as i32 - 1) * nstep(t, n);
                }
                out + lambda.powi(m as i32 - 1) * nstep(t, m)
            })
            .collect()
    }

    #[test]
    fn terminal_case_example() {
        let v = lambda_targets(&[1.0], &[0.9], &[0.0, 2.0], 0.5).unwrap();
        assert!((v[0] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_one_step() {
        let r = [0.3, -1.0, 2.0];
        let d = [0.9, 0.5, 0.99];
        let v = [1.0, 2.0, 3.0, 4.0];
        let out = lambda_targets(&r, &d, &v, 0.0).unwrap();
        for t in 0..3 {
            assert!((out[t] - (r[t] + d[t] * v[t + 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_targets_errors() {
        assert!(lambda_targets(&[1.0], &[0.9], &[2.0], 0.5).is_err());
        assert!(lambda_targets(&[1.0], &[0.9, 0.9], &[0.0, 2.0], 0.5).is_err());
        assert!(lambda_targets(&[1.0], &[0.9], &[0.0, 2.0], 1.5).is_err());
        assert!(lambda_targets(&[], &[], &[0.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn recursion_matches_mixture(
            seq in (1usize..=10).prop_flat_map(|h| (
                prop::collection::vec(-5.0f64..5.0, h),
                prop::collection::vec(0.0f64..1.0, h),
                prop::collection::vec(-5.0f64..5.0, h + 1),
                0.0f64..=1.0,
            ))
        ) {
            let (r, d, v, l) = seq;
            let a = lambda_targets(&r, &d, &v, l).unwrap();
            let b = mixture_oracle(&r, &d, &v, l);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn graph_targets_match_values_and_are_bitwise_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 6;
        let r: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..1.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let col = |g: &mut Graph<f64>, x: f64| g.constant(Tensor::from_rows(&[vec![x]]));
        let rn: Vec<_> = r.iter().map(|&x| col(&mut g, x)).collect();
        let dn: Vec<_> = d.iter().map(|&x| col(&mut g, x)).collect();
        let vn: Vec<_> = v.iter().map(|&x| col(&mut g, x)).collect();
        let out = lambda_targets_graph(&mut g, &rn, &dn, &vn, 0.95).unwrap();
        let again = lambda_targets_graph(&mut g, &rn, &dn, &vn, 0.95).unwrap();
        let want = lambda_targets(&r, &d, &v, 0.95).unwrap();
        for t in 0..h {
            assert!((g.item(out[t]) - want[t]).abs() < 1e-12);
            assert_eq!(g.item(out[t]).to_bits(), g.item(again[t]).to_bits());
        }
    }

    struct Setup {
        wm: WorldModel,
        wm_ps: ParamSet<f32>,
        actor: Actor,
        actor_ps: ParamSet<f32>,
        critic: Critic,
        critic_ps: ParamSet<f32>,
        start: LatentState<f32>,
    }

    fn setup(seed: u64) -> Setup {
        let wm = WorldModel::new(WorldModelConfig {
            deter: 6,
            stoch: 3,
            hidden: 12,
            embed: 6,
            ..WorldModelConfig::new(4, 2)
        });
        let cfg = PolicyConfig {
            hidden: 16,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wm_ps = ParamSet::new();
        wm.init(&mut wm_ps, &mut rng).unwrap();
        let actor = Actor::new(ActorId::Control, wm.cfg.feat_dim(), 2, &cfg);
        let mut actor_ps = ParamSet::new();
        actor.init(&mut actor_ps, &mut rng).unwrap();
        let critic = Critic::new(CriticId::Reward, wm.cfg.feat_dim(), &cfg);
        let mut critic_ps = ParamSet::new();
        critic.init(&mut critic_ps, &mut rng).unwrap();
        let start = LatentState {
            h: dist::std_normal_noise(&[5, 6], &mut rng),
            z: dist::std_normal_noise(&[5, 3], &mut rng),
            mean: Tensor::zeros(&[5, 3]),
            std: Tensor::full(&[5, 3], 1.0),
        };
        Setup {
            wm,
            wm_ps,
            actor,
            actor_ps,
            critic,
            critic_ps,
            start,
        }
    }

    #[test]
    fn rollout_shapes_and_reproducibility() {
        let s = setup(1);
        let run = |h: usize| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let tr = rollout(&mut g, &s.wm, &s.wm_ps, &s.actor, Bind::train(&s.actor_ps), &s.start, h, 0.99, &mut RngNoise(&mut rng)).unwrap();
            let acts: Vec<Tensor<f32>> = tr.actions.iter().map(|&a| g.value(a).clone()).collect();
            (tr, acts, g)
        };
        let (tr, acts, g) = run(1);
        assert_eq!(tr.states.len(), 2);
        assert_eq!(tr.actions.len(), 1);
        assert_eq!(g.shape(tr.rewards[0]), &[5, 1]);
        assert!(acts[0].data().iter().all(|a| a.abs() <= 1.0));
        let (_, a2, _) = run(4);
        let (_, a3, _) = run(4);
        assert_eq!(a2, a3);
        for d in &tr.discounts {
            assert!(g.value(*d).data().iter().all(|&x| x > 0.0 && x < 0.99));
        }
    }

    #[test]
    fn rollout_rejects_zero_horizon() {
        let s = setup(1);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(rollout(&mut g, &s.wm, &s.wm_ps, &s.actor, Bind::train(&s.actor_ps), &s.start, 0, 0.99, &mut RngNoise(&mut rng)).is_err());
    }

    #[test]
    fn actor_losses_reach_only_the_actor() {
        let s = setup(2);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = rollout(&mut g, &s.wm, &s.wm_ps, &s.actor, Bind::train(&s.actor_ps), &s.start, 5, 0.99, &mut RngNoise(&mut rng)).unwrap();
        let cb = Bind::frozen(&s.critic_ps);
        let vals = state_values(&mut g, &tr.feats, |g, f| s.critic.target_value(g, cb, f)).unwrap();
        let targets = lambda_targets_graph(&mut g, &tr.rewards, &tr.discounts, &vals, 0.95).unwrap();
        let loss = control_actor_loss(&mut g, &tr, &targets, 3e-4);
        for ps in [&s.wm_ps, &s.critic_ps] {
            let gr = g.grad(loss, ps).unwrap();
            assert!(gr.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        let ga = g.grad(loss, &s.actor_ps).unwrap();
        assert!(ga.values().any(|t| t.sq_norm() > 0.0));
        // Critic loss ignores the actor entirely.
        let cl = critic_loss(&mut g, &s.critic, Bind::train(&s.critic_ps), &tr.feats[..5], &targets).unwrap();
        let ga = g.grad(cl, &s.actor_ps).unwrap();
        assert!(ga.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let gc = g.grad(cl, &s.critic_ps).unwrap();
        assert!(gc.iter().any(|(n, t)| n.starts_with("critic_r.") && t.sq_norm() > 0.0));
        assert!(gc.iter().filter(|(n, _)| n.starts_with("critic_r_target.")).all(|(_, t)| t.sq_norm() == 0.0));
    }

    #[test]
    fn loss_term_isolation() {
        let s = setup(3);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = rollout(&mut g, &s.wm, &s.wm_ps, &s.actor, Bind::train(&s.actor_ps), &s.start, 3, 0.99, &mut RngNoise(&mut rng)).unwrap();
        let targets = tr.rewards.clone();
        let l0 = control_actor_loss(&mut g, &tr, &targets, 0.0);
        let all = g.concat_rows(&targets);
        let m = g.mean(all);
        assert!((g.item(l0) + g.item(m)).abs() < 1e-6);
        let l1 = control_actor_loss(&mut g, &tr, &targets, 0.1);
        let l2 = control_actor_loss(&mut g, &tr, &targets, 0.2);
        let hm = mean_of(&mut g, &tr.entropies);
        let ent = g.item(hm);
        assert!(((g.item(l1) - g.item(l2)) - 0.1 * ent).abs() < 1e-5);
        let disc = tr.costs.clone();
        let ls = safe_actor_loss(&mut g, &tr, &targets, 0.0, &disc, 0.0);
        let dm = mean_of(&mut g, &disc);
        assert!((g.item(ls) + g.item(dm)).abs() < 1e-6);
    }

    #[test]
    fn entropy_above_floor_minimum() {
        // The narrowest head a std floor allows has the smallest entropy.
        let s = setup(4);
        let mut g = Graph::<f64>::new();
        let floor_head = TruncNormal {
            mean: g.constant(Tensor::zeros(&[1, 2])),
            std: g.constant(Tensor::full(&[1, 2], 0.1)),
        };
        let hmin = dist::trunc_normal_entropy(&mut g, floor_head);
        let hmin = g.item(hmin) as f32;
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = rollout(&mut g, &s.wm, &s.wm_ps, &s.actor, Bind::train(&s.actor_ps), &s.start, 3, 0.99, &mut RngNoise(&mut rng)).unwrap();
        for e in &tr.entropies {
            assert!(g.value(*e).data().iter().all(|&h| h >= hmin - 1e-4));
        }
    }

    #[test]
    fn act_modes() {
        let s = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m1 = s.actor.act(&s.actor_ps, &s.start, ActMode::Mean, &mut rng).unwrap();
        let m2 = s.actor.act(&s.actor_ps, &s.start, ActMode::Mean, &mut rng).unwrap();
        assert_eq!(m1, m2);
        let x = s.actor.act(&s.actor_ps, &s.start, ActMode::Sample, &mut rng).unwrap();
        assert_eq!(x.shape(), &[5, 2]);
        assert!(x.data().iter().all(|a| a.abs() <= 1.0));
    }

    #[test]
    fn sample_moments_match_head() {
        // Monte Carlo mean of draws vs the analytic truncated-normal mean.
        let s = setup(6);
        let one = s.start.slice(0, 1);
        let mut g = Graph::<f32>::new();
        let l = one.to_graph(&mut g);
        let f = l.feat(&mut g);
        let d = s.actor.dist(&mut g, Bind::frozen(&s.actor_ps), f).unwrap();
        let (mu, sd) = (g.value(d.mean).data().to_vec(), g.value(d.std).data().to_vec());
        let n = 20_000;
        let rep = one.gather(&vec![0; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = s.actor.act(&s.actor_ps, &rep, ActMode::Sample, &mut rng).unwrap();
        for k in 0..2 {
            let emp: f64 = (0..n).map(|i| x.row(i)[k] as f64).sum::<f64>() / n as f64;
            let (m, sdv) = (mu[k] as f64, sd[k] as f64);
            let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let cdf = |z: f64| 0.5 * (1.0 + libm::erf(z / 2f64.sqrt()));
            let (a, b) = ((-1.0 - m) / sdv, (1.0 - m) / sdv);
            let want = m + sdv * (phi(a) - phi(b)) / (cdf(b) - cdf(a));
            assert!((emp - want).abs() < 0.02, "dim {k}: {emp} vs {want}");
        }
    }

    #[test]
    fn target_sync_copies_weights() {
        let mut s = setup(7);
        let name = "critic_r.l0.w";
        let bumped = s.critic_ps.get(name).unwrap().map(|v| v + 1.0);
        s.critic_ps.set(name, bumped).unwrap();
        assert_ne!(s.critic_ps.get(name).unwrap(), s.critic_ps.get("critic_r_target.l0.w").unwrap());
        s.critic.sync_target(&mut s.critic_ps).unwrap();
        assert_eq!(s.critic_ps.get(name).unwrap(), s.critic_ps.get("critic_r_target.l0.w").unwrap());
    }
}
