//! Control-vs-safe action classifier. `D(s, a) = 1` means "looks like the
//! control actor".

use rand::Rng;

use crate::dist;
use crate::error::Result;
use crate::nn::{Bind, Graph, Mlp, NodeId, ParamSet, Real, Tensor};

pub const PREFIX: &str = "disc";
/// Bound applied to logits before the clone signal.
pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub net: Mlp,
    pub lr: f64,
}

/// Detached features with paired control and safe actions, all `[N, ·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscBatch {
    pub feats: Tensor<f32>,
    pub control_actions: Tensor<f32>,
    pub safe_actions: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub prob: Tensor<f32>,
    pub log_prob: Tensor<f32>,
}

impl Discriminator {
    pub fn new(feat_dim: usize, act_dim: usize, hidden: usize, layers: usize, lr: f64) -> Self {
        let mut sizes = vec![feat_dim + act_dim];
        sizes.extend(std::iter::repeat_n(hidden, layers));
        sizes.push(1);
        Self {
            net: Mlp::new(PREFIX, &sizes),
            lr,
        }
    }

    /// Zero output layer, so an untrained discriminator says 0.5 everywhere.
    pub fn init(&self, ps: &mut ParamSet<f32>, rng: &mut impl Rng) -> Result<()> {
        self.net.init(ps, rng, true)
    }

    pub fn logits<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId, action: NodeId) -> Result<NodeId> {
        let x = g.concat(&[feat, action]);
        self.net.forward(g, p, x)
    }

    /// Probability and log-probability of the control label.
    pub fn score(&self, params: &ParamSet<f32>, feats: &Tensor<f32>, actions: &Tensor<f32>) -> Result<Scores> {
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let a = g.constant(actions.clone());
        let l = self.logits(&mut g, Bind::frozen(params), f, a)?;
        let p = g.sigmoid(l);
        let lp = g.log_sigmoid(l);
        Ok(Scores {
            prob: g.value(p).clone(),
            log_prob: g.value(lp).clone(),
        })
    }

    /// Two-class cross-entropy: `-mean log D(s, a_c) - mean log(1 - D(s, a_s))`.
    pub fn train_loss<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, batch: &DiscBatch) -> Result<NodeId> {
        let f = g.constant(batch.feats.cast());
        let ac = g.constant(batch.control_actions.cast());
        let as_ = g.constant(batch.safe_actions.cast());
        let lc = self.logits(g, p, f, ac)?;
        let ls = self.logits(g, p, f, as_)?;
        let nlc = g.neg(lc);
        let c_term = g.softplus(nlc);
        let s_term = g.softplus(ls);
        let c_mean = g.mean(c_term);
        let s_mean = g.mean(s_term);
        Ok(g.add(c_mean, s_mean))
    }

    /// `log D(s, a)` on detached features. Gradients reach `action` only when
    /// the discriminator is bound frozen. Logits pass through a
    /// straight-through clip at `±LOGIT_CLAMP`.
    pub fn clone_signal<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: NodeId, action: NodeId) -> Result<NodeId> {
        let f = g.detach(feat);
        let l = self.logits(g, p, f, action)?;
        let l = g.clip_straight_through(l, -LOGIT_CLAMP, LOGIT_CLAMP);
        Ok(g.log_sigmoid(l))
    }

    /// Fraction of correctly labelled actions (threshold 0.5).
    pub fn accuracy(&self, params: &ParamSet<f32>, batch: &DiscBatch) -> Result<f64> {
        let c = self.score(params, &batch.feats, &batch.control_actions)?;
        let s = self.score(params, &batch.feats, &batch.safe_actions)?;
        let hits = c.prob.data().iter().filter(|&&p| p > 0.5).count() + s.prob.data().iter().filter(|&&p| p < 0.5).count();
        Ok(hits as f64 / (c.prob.len() + s.prob.len()) as f64)
    }
}

/// Separable clusters: control actions near `+centre`, safe near `-centre`,
/// on random features.
pub fn synthetic_clusters(n: usize, feat_dim: usize, act_dim: usize, centre: f32, spread: f32, rng: &mut impl Rng) -> DiscBatch {
    let feats = dist::std_normal_noise::<f32>(&[n, feat_dim], rng);
    let mut cluster = |c: f32| {
        let noise = dist::std_normal_noise::<f32>(&[n, act_dim], rng);
        noise.map(|e| (c + spread * e).clamp(-1.0, 1.0))
    };
    let control_actions = cluster(centre);
    let safe_actions = cluster(-centre);
    DiscBatch {
        feats,
        control_actions,
        safe_actions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(seed: u64) -> (Discriminator, ParamSet<f32>) {
        let d = Discriminator::new(6, 2, 32, 2, 1e-3);
        let mut ps = ParamSet::new();
        d.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (d, ps)
    }

    #[test]
    fn untrained_is_one_half() {
        let (d, ps) = disc(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = synthetic_clusters(32, 6, 2, 0.8, 0.1, &mut rng);
        let s = d.score(&ps, &b.feats, &b.control_actions).unwrap();
        assert!(s.prob.data().iter().all(|&p| p == 0.5));
        let mut g = Graph::new();
        let l = d.train_loss(&mut g, Bind::train(&ps), &b).unwrap();
        assert!((g.item(l) as f64 - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let (d, ps) = disc(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps2 = ps.clone();
        let b = synthetic_clusters(16, 6, 2, 0.8, 0.3, &mut rng);
        // Make the network non-trivial first.
        let mut g = Graph::new();
        let l = d.train_loss(&mut g, Bind::train(&ps2), &b).unwrap();
        let gr = g.grad(l, &ps2).unwrap();
        Adam::new(0.05).step(&mut ps2, &gr).unwrap();
        let order: Vec<usize> = (0..16).rev().collect();
        let perm = |t: &Tensor<f32>| {
            let rows: Vec<Vec<f32>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows)
        };
        let pb = DiscBatch {
            feats: perm(&b.feats),
            control_actions: perm(&b.control_actions),
            safe_actions: perm(&b.safe_actions),
        };
        let mut g = Graph::new();
        let a = d.train_loss(&mut g, Bind::frozen(&ps2), &b).unwrap();
        let c = d.train_loss(&mut g, Bind::frozen(&ps2), &pb).unwrap();
        assert!((g.item(a) - g.item(c)).abs() < 1e-6);
        drop(ps);
    }

    #[test]
    fn separates_clusters_with_label_convention() {
        let (d, mut ps) = disc(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opt = Adam::new(d.lr);
        for _ in 0..300 {
            let b = synthetic_clusters(64, 6, 2, 0.8, 0.2, &mut rng);
            let mut g = Graph::new();
            let l = d.train_loss(&mut g, Bind::train(&ps), &b).unwrap();
            let gr = g.grad(l, &ps).unwrap();
            opt.step(&mut ps, &gr).unwrap();
        }
        let b = synthetic_clusters(256, 6, 2, 0.8, 0.2, &mut rng);
        assert!(d.accuracy(&ps, &b).unwrap() > 0.95);
        let c = d.score(&ps, &b.feats, &b.control_actions).unwrap();
        let s = d.score(&ps, &b.feats, &b.safe_actions).unwrap();
        assert!(c.prob.mean() > 0.5 && s.prob.mean() < 0.5);
        // Clone signal is larger for control-like actions, and its log is <= 0.
        let mut g = Graph::new();
        let f = g.constant(b.feats.clone());
        let ac = g.constant(b.control_actions.clone());
        let as_ = g.constant(b.safe_actions.clone());
        let sc = d.clone_signal(&mut g, Bind::frozen(&ps), f, ac).unwrap();
        let ss = d.clone_signal(&mut g, Bind::frozen(&ps), f, as_).unwrap();
        assert!(g.value(sc).mean() > g.value(ss).mean());
        assert!(g.value(sc).data().iter().all(|&v| v <= 0.0));
        assert!(g.value(sc).mean() > -0.1);
    }

    #[test]
    fn clone_signal_freeze_contract() {
        let (d, ps) = disc(6);
        let mut g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = g.constant(dist::std_normal_noise(&[4, 6], &mut rng));
        let raw = g.constant(dist::std_normal_noise(&[4, 2], &mut rng));
        // The action stands in for an actor output via a trainable leaf.
        let mut actor = ParamSet::new();
        actor.insert("a", g.value(raw).map(|v| v.tanh())).unwrap();
        let a = g.param(&actor, "a").unwrap();
        let sig = d.clone_signal(&mut g, Bind::frozen(&ps), f, a).unwrap();
        let loss = g.mean(sig);
        let gd = g.grad(loss, &ps).unwrap();
        assert!(gd.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(g.grad(loss, &actor).unwrap().len(), 1);
    }

    #[test]
    fn train_loss_does_not_reach_actions() {
        // Actions enter as constants, so nothing upstream can receive gradient.
        let (d, ps) = disc(7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = synthetic_clusters(8, 6, 2, 0.8, 0.2, &mut rng);
        let mut g = Graph::new();
        let l = d.train_loss(&mut g, Bind::train(&ps), &b).unwrap();
        let mut other = ParamSet::new();
        other.insert("actor_s.l0.w", Tensor::zeros(&[2, 2])).unwrap();
        let go = g.grad(l, &other).unwrap();
        assert!(go.values().all(|t| t.sq_norm() == 0.0));
    }
}
