//! Finite-difference gradient suites for every differentiable op and every
//! trainable module's loss.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{synthetic_clusters, DiscBatch, Discriminator};
use crate::dist::{self, DiagGaussian, TruncNormal};
use crate::error::Result;
use crate::nn::gradcheck::{check, LossFn};
use crate::nn::{Bind, Graph, Mlp, NodeId, ParamSet, Real, Tensor};
use crate::policy::{self, Actor, ActorId, Critic, CriticId, ImaginedTrajectory, NoiseTape, PolicyConfig, Recording, RngNoise};
use crate::world_model::{LatentState, SequenceBatch, WorldModel, WorldModelConfig};

/// Relative-error threshold.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const STEP: f64 = 1e-3;
const COORDS: usize = 4;

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub failures: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances > 0
    }
}

fn run_suite<L: LossFn>(name: &str, instances: usize, seed: u64, mut make: impl FnMut(&mut ChaCha8Rng) -> Result<(L, ParamSet<f32>)>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..instances {
        let (loss, ps) = make(&mut rng)?;
        let r = check(&loss, &ps, STEP, COORDS, &mut rng)?;
        if r.rel_err.is_nan() || r.rel_err >= TOLERANCE {
            failures += 1;
        }
        worst = worst.max(if r.rel_err.is_nan() { f64::INFINITY } else { r.rel_err });
    }
    Ok(SuiteReport {
        name: name.to_string(),
        instances,
        worst,
        failures,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()).unwrap()
}

/// Values bounded away from `kinks` by at least `gap`.
fn away_from(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v as f32;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Neg,
    Elu,
    Tanh,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Exp,
    Ln,
    Square,
    Sqrt,
    Erf,
    Scale,
    AddScalar,
    Clamp,
    MaxScalar,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulCol,
    DivScalar,
    Sum,
    Mean,
    SumCols,
    Concat,
    SliceCols,
    ConcatRows,
    SliceRows,
}

pub const ALL_OPS: [OpKind; 30] = [
    OpKind::Neg,
    OpKind::Elu,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Softplus,
    OpKind::LogSigmoid,
    OpKind::Exp,
    OpKind::Ln,
    OpKind::Square,
    OpKind::Sqrt,
    OpKind::Erf,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Clamp,
    OpKind::MaxScalar,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::AddRow,
    OpKind::MulCol,
    OpKind::DivScalar,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::SumCols,
    OpKind::Concat,
    OpKind::SliceCols,
    OpKind::ConcatRows,
    OpKind::SliceRows,
];

/// `sum(op(x, y) * w)` for a fixed random weighting `w`.
pub struct OpCase {
    pub op: OpKind,
    weight: Tensor<f64>,
}

impl OpCase {
    fn apply<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        let x = g.param(ps, "x")?;
        let y = if ps.contains("y") { Some(g.param(ps, "y")?) } else { None };
        let y = || y.expect("binary op needs y");
        Ok(match self.op {
            OpKind::Neg => g.neg(x),
            OpKind::Elu => g.elu(x),
            OpKind::Tanh => g.tanh(x),
            OpKind::Sigmoid => g.sigmoid(x),
            OpKind::Softplus => g.softplus(x),
            OpKind::LogSigmoid => g.log_sigmoid(x),
            OpKind::Exp => g.exp(x),
            OpKind::Ln => g.ln(x),
            OpKind::Square => g.square(x),
            OpKind::Sqrt => g.sqrt(x),
            OpKind::Erf => g.erf(x),
            OpKind::Scale => g.scale(x, -1.7),
            OpKind::AddScalar => g.add_scalar(x, 0.3),
            OpKind::Clamp => g.clamp(x, -0.5, 0.5),
            OpKind::MaxScalar => g.max_scalar(x, 0.2),
            OpKind::MatMul => g.matmul(x, y()),
            OpKind::Add | OpKind::AddRow => g.add(x, y()),
            OpKind::Sub => g.sub(x, y()),
            OpKind::Mul | OpKind::MulCol => g.mul(x, y()),
            OpKind::Div | OpKind::DivScalar => g.div(x, y()),
            OpKind::Sum => g.sum(x),
            OpKind::Mean => g.mean(x),
            OpKind::SumCols => g.sum_cols(x),
            OpKind::Concat => g.concat(&[x, y(), x]),
            OpKind::SliceCols => g.slice_cols(x, 1, 3),
            OpKind::ConcatRows => g.concat_rows(&[y(), x]),
            OpKind::SliceRows => g.slice_rows(x, 1, 2),
        })
    }
}

impl LossFn for OpCase {
    fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        let out = self.apply(g, ps)?;
        let w = g.constant(self.weight.cast());
        let m = g.mul(out, w);
        Ok(g.sum(m))
    }
}

fn op_case(op: OpKind, rng: &mut ChaCha8Rng) -> Result<(OpCase, ParamSet<f32>)> {
    let (r, c) = (rng.random_range(2..5usize), rng.random_range(3..6usize));
    let s = [r, c];
    let mut ps = ParamSet::new();
    let x = match op {
        OpKind::Ln | OpKind::Sqrt => uniform(&s, 0.2, 3.0, rng),
        OpKind::Elu => away_from(&s, -2.0, 2.0, &[0.0], 0.01, rng),
        OpKind::Clamp => away_from(&s, -1.5, 1.5, &[-0.5, 0.5], 0.01, rng),
        OpKind::MaxScalar => away_from(&s, -1.5, 1.5, &[0.2], 0.01, rng),
        _ => uniform(&s, -2.0, 2.0, rng),
    };
    ps.insert("x", x)?;
    let y = match op {
        OpKind::MatMul => Some(uniform(&[c, rng.random_range(1..4usize)], -1.0, 1.0, rng)),
        OpKind::Add | OpKind::Sub | OpKind::Mul => Some(uniform(&s, -2.0, 2.0, rng)),
        OpKind::Div => Some(uniform(&s, 0.5, 2.0, rng)),
        OpKind::AddRow => Some(uniform(&[c], -1.0, 1.0, rng)),
        OpKind::MulCol => Some(uniform(&[r, 1], -1.0, 1.0, rng)),
        OpKind::DivScalar => Some(uniform(&[1], 0.5, 2.0, rng)),
        OpKind::Concat => Some(uniform(&[r, 2], -1.0, 1.0, rng)),
        OpKind::ConcatRows => Some(uniform(&[1, c], -1.0, 1.0, rng)),
        _ => None,
    };
    if let Some(y) = y {
        ps.insert("y", y)?;
    }
    let mut case = OpCase {
        op,
        weight: Tensor::zeros(&[1]),
    };
    let mut g = Graph::<f32>::new();
    let out = case.apply(&mut g, &ps)?;
    case.weight = uniform(g.value(out).shape(), -1.0, 1.0, rng).cast();
    Ok((case, ps))
}

/// Truncated-normal log-density, entropy and reparameterized sample.
pub struct TruncNormalCase {
    action: Tensor<f64>,
    eps: Tensor<f64>,
}

impl LossFn for TruncNormalCase {
    fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        let raw = g.param(ps, "raw")?;
        let d = dist::trunc_normal_head(g, raw, 0.1);
        let a = g.constant(self.action.cast());
        let lp = dist::trunc_normal_log_prob(g, d, a)?;
        let h = dist::trunc_normal_entropy(g, d);
        let s = dist::trunc_normal_sample(g, d, self.eps.cast());
        let s2 = g.square(s);
        let terms = [g.sum(lp), g.sum(h), g.sum(s2)];
        let ab = g.add(terms[0], terms[1]);
        Ok(g.add(ab, terms[2]))
    }
}

/// Gaussian KL, reparameterized sample, Bernoulli and Gaussian likelihoods.
pub struct GaussianCase {
    eps: Tensor<f64>,
    target: Tensor<f64>,
    bits: Tensor<f64>,
}

impl LossFn for GaussianCase {
    fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        let rq = g.param(ps, "q")?;
        let rp = g.param(ps, "p")?;
        let q: DiagGaussian = dist::diag_gaussian_head(g, rq, 0.1);
        let p = dist::diag_gaussian_head(g, rp, 0.1);
        let kl = dist::diag_gaussian_kl(g, q, p);
        let z = dist::gaussian_sample(g, q, self.eps.cast());
        let t = g.constant(self.target.cast());
        let nll = dist::unit_gaussian_nll(g, z, t);
        let nll = g.mean(nll);
        let b = g.constant(self.bits.cast());
        let blp = dist::bernoulli_log_prob(g, z, b);
        let blp = g.mean(blp);
        let a = g.add(kl, nll);
        Ok(g.sub(a, blp))
    }
}

pub struct MlpCase {
    net: Mlp,
    input: Tensor<f64>,
}

impl LossFn for MlpCase {
    fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        let x = g.constant(self.input.cast());
        let y = self.net.forward(g, Bind::train(ps), x)?;
        let y2 = g.square(y);
        Ok(g.mean(y2))
    }
}

fn micro_wm_cfg() -> WorldModelConfig {
    WorldModelConfig {
        deter: 4,
        stoch: 2,
        hidden: 5,
        embed: 3,
        free_bits: 0.0,
        // Balanced KL has a deliberately partial gradient, so finite
        // differences cannot see it; its pieces are checked separately.
        beta_kl: 0.0,
        ..WorldModelConfig::new(3, 2)
    }
}

pub struct WorldLossCase {
    wm: WorldModel,
    batch: SequenceBatch,
    noise_seed: u64,
}

impl LossFn for WorldLossCase {
    fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let out = self.wm.world_loss(ps, &self.batch, &mut rng)?;
        *g = out.graph;
        Ok(out.loss)
    }
}

fn micro_batch(cfg: &WorldModelConfig, time: usize, batch: usize, rng: &mut impl Rng) -> SequenceBatch {
    let n = time * batch;
    let mut actions = uniform(&[n, cfg.act_dim], -1.0, 1.0, rng);
    for v in &mut actions.data_mut()[..batch * cfg.act_dim] {
        *v = 0.0;
    }
    let costs = uniform(&[n, 1], 0.0, 1.0, rng).map(|v| (v > 0.6) as u8 as f32);
    let mut term = Tensor::zeros(&[n, 1]);
    term.data_mut()[n - 1] = 1.0;
    SequenceBatch {
        time,
        batch,
        obs: uniform(&[n, cfg.obs_dim], -1.0, 1.0, rng),
        actions,
        rewards: uniform(&[n, 1], -1.0, 1.0, rng),
        costs,
        terminals: term,
    }
}

/// Which imagination loss to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyLoss {
    ControlActor,
    SafeActor,
    RewardCritic,
}

/// Actor and critic losses over a short imagined rollout, w.r.t. the actor
/// or the online critic. Everything else is fixed, including the noise.
pub struct PolicyCase {
    which: PolicyLoss,
    wm: WorldModel,
    wm_ps: ParamSet<f64>,
    actor: Actor,
    /// Actor parameters when the critic is under test.
    actor_ps: ParamSet<f64>,
    critic: Critic,
    /// Target critic parameters.
    target_ps: ParamSet<f64>,
    disc: Discriminator,
    disc_ps: ParamSet<f64>,
    start: LatentState<f64>,
    tape: RefCell<NoiseTape>,
    /// Unperturbed features for the discriminator, which sees them detached.
    disc_feats: Vec<Tensor<f64>>,
    horizon: usize,
}

fn cast_state<T: Real, U: Real>(s: &LatentState<T>) -> LatentState<U> {
    LatentState {
        h: s.h.cast(),
        z: s.z.cast(),
        mean: s.mean.cast(),
        std: s.std.cast(),
    }
}

impl PolicyCase {
    fn trajectory<T: Real>(&self, g: &mut Graph<T>, actor: Bind<'_, T>) -> Result<ImaginedTrajectory> {
        let mut tape = self.tape.borrow_mut();
        tape.rewind();
        let wm_ps = self.wm_ps.cast::<T>();
        policy::rollout(g, &self.wm, &wm_ps, &self.actor, actor, &cast_state(&self.start), self.horizon, 0.99, &mut *tape)
    }
}

impl LossFn for PolicyCase {
    fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        let actor_ps = self.actor_ps.cast::<T>();
        let target_ps = self.target_ps.cast::<T>();
        let actor = match self.which {
            PolicyLoss::RewardCritic => Bind::frozen(&actor_ps),
            _ => Bind::train(ps),
        };
        let tr = self.trajectory(g, actor)?;
        let tb = Bind::frozen(&target_ps);
        let vals = policy::state_values(g, &tr.feats, |g, f| self.critic.target_value(g, tb, f))?;
        let h = self.horizon;
        Ok(match self.which {
            PolicyLoss::ControlActor => {
                let t = policy::lambda_targets_graph(g, &tr.rewards, &tr.discounts, &vals, 0.95)?;
                policy::control_actor_loss(g, &tr, &t, 0.01)
            }
            PolicyLoss::SafeActor => {
                let t = policy::lambda_targets_graph(g, &tr.costs, &tr.discounts, &vals, 0.95)?;
                let disc_ps = self.disc_ps.cast::<T>();
                let db = Bind::frozen(&disc_ps);
                let mut scores = Vec::with_capacity(h);
                for k in 0..h {
                    let f = g.constant(self.disc_feats[k].cast());
                    scores.push(self.disc.clone_signal(g, db, f, tr.actions[k])?);
                }
                policy::safe_actor_loss(g, &tr, &t, 0.7, &scores, 0.01)
            }
            PolicyLoss::RewardCritic => {
                let t = policy::lambda_targets_graph(g, &tr.rewards, &tr.discounts, &vals, 0.95)?;
                policy::critic_loss(g, &self.critic, Bind::train(ps), &tr.feats[..h], &t)?
            }
        })
    }
}

fn subset(ps: &ParamSet<f32>, prefix: &str) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for (name, t) in ps.iter().filter(|(n, _)| n.starts_with(prefix)) {
        out.insert(name, t.clone())?;
    }
    Ok(out)
}

fn policy_case(which: PolicyLoss, rng: &mut ChaCha8Rng) -> Result<(PolicyCase, ParamSet<f32>)> {
    let wm = WorldModel::new(micro_wm_cfg());
    let pc = PolicyConfig {
        hidden: 6,
        ..PolicyConfig::default()
    };
    let f = wm.cfg.feat_dim();
    let id = if which == PolicyLoss::SafeActor { ActorId::Safe } else { ActorId::Control };
    let actor = Actor::new(id, f, 2, &pc);
    let critic = Critic::new(CriticId::Reward, f, &pc);
    let disc = Discriminator::new(f, 2, 6, 2, 1e-3);
    let (mut wp, mut ap, mut cp, mut dp) = (ParamSet::new(), ParamSet::new(), ParamSet::new(), ParamSet::new());
    wm.init(&mut wp, rng)?;
    actor.init(&mut ap, rng)?;
    // Non-zero output layers so every weight carries gradient.
    critic.net.init(&mut cp, rng, false)?;
    critic.target.init(&mut cp, rng, false)?;
    disc.net.init(&mut dp, rng, false)?;
    let b = 2;
    let start = LatentState {
        h: uniform(&[b, wm.cfg.deter], -0.8, 0.8, rng),
        z: uniform(&[b, wm.cfg.stoch], -1.0, 1.0, rng),
        mean: Tensor::zeros(&[b, wm.cfg.stoch]),
        std: Tensor::full(&[b, wm.cfg.stoch], 1.0),
    };
    let horizon = 3;
    let mut tape = NoiseTape::default();
    {
        let mut g = Graph::<f32>::new();
        let mut rec = Recording {
            inner: RngNoise(&mut *rng),
            tape: &mut tape,
        };
        policy::rollout(&mut g, &wm, &wp, &actor, Bind::train(&ap), &start, horizon, 0.99, &mut rec)?;
    }
    let mut case = PolicyCase {
        which,
        wm,
        wm_ps: wp.cast(),
        actor,
        actor_ps: ap.cast(),
        target_ps: subset(&cp, &format!("{}.", CriticId::Reward.target_prefix()))?.cast(),
        critic,
        disc,
        disc_ps: dp.cast(),
        start: cast_state(&start),
        tape: RefCell::new(tape),
        disc_feats: Vec::new(),
        horizon,
    };
    let mut g = Graph::<f64>::new();
    let ap64 = case.actor_ps.clone();
    let tr = case.trajectory(&mut g, Bind::frozen(&ap64))?;
    case.disc_feats = tr.feats[..horizon].iter().map(|&n| g.value(n).clone()).collect();
    let checked = match which {
        PolicyLoss::RewardCritic => subset(&cp, &format!("{}.", CriticId::Reward.prefix()))?,
        _ => ap,
    };
    Ok((case, checked))
}

pub struct DiscCase {
    disc: Discriminator,
    batch: DiscBatch,
}

impl LossFn for DiscCase {
    fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
        self.disc.train_loss(g, Bind::train(ps), &self.batch)
    }
}

/// Runs every suite with `instances` random instances each.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    for (i, &op) in ALL_OPS.iter().enumerate() {
        out.push(run_suite(&format!("op/{op:?}"), instances, seed + i as u64, |rng| op_case(op, rng))?);
    }
    out.push(run_suite("dist/truncated_normal", instances, seed + 100, |rng| {
        let (b, n) = (rng.random_range(1..4usize), 2);
        let raw = uniform(&[b, 2 * n], -1.5, 1.5, rng);
        let action = uniform(&[b, n], -0.95, 0.95, rng);
        let mut g = Graph::<f32>::new();
        let r = g.constant(raw.clone());
        let d: TruncNormal = dist::trunc_normal_head(&mut g, r, 0.1);
        let eps = dist::trunc_normal_noise(g.value(d.mean), g.value(d.std), rng);
        // Keep samples clear of the clip so finite differences stay smooth.
        let mean = g.value(d.mean).clone();
        let std = g.value(d.std).clone();
        let eps = Tensor::new(
            eps.shape().to_vec(),
            eps.data()
                .iter()
                .zip(mean.data().iter().zip(std.data()))
                .map(|(&e, (&m, &s))| if (m + s * e).abs() > 0.98 { 0.0 } else { e })
                .collect(),
        )?;
        let mut ps = ParamSet::new();
        ps.insert("raw", raw)?;
        Ok((
            TruncNormalCase {
                action: action.cast(),
                eps: eps.cast(),
            },
            ps,
        ))
    })?);
    out.push(run_suite("dist/gaussian_bernoulli", instances, seed + 101, |rng| {
        let (b, n) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let mut ps = ParamSet::new();
        ps.insert("q", uniform(&[b, 2 * n], -1.5, 1.5, rng))?;
        ps.insert("p", uniform(&[b, 2 * n], -1.5, 1.5, rng))?;
        let eps = dist::std_normal_noise::<f64>(&[b, n], rng);
        let target = uniform(&[b, n], -1.0, 1.0, rng).cast();
        let bits = uniform(&[b, n], 0.0, 1.0, rng).map(|v| (v > 0.5) as u8 as f32).cast();
        Ok((GaussianCase { eps, target, bits }, ps))
    })?);
    out.push(run_suite("nn/mlp", instances, seed + 102, |rng| {
        let sizes = [rng.random_range(1..5usize), rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4)];
        let net = Mlp::new("m", &sizes);
        let mut ps = ParamSet::new();
        net.init(&mut ps, rng, false)?;
        let input = uniform(&[3, sizes[0]], -1.5, 1.5, rng).cast();
        Ok((MlpCase { net, input }, ps))
    })?);
    out.push(run_suite("world_model/world_loss", instances, seed + 103, |rng| {
        let wm = WorldModel::new(micro_wm_cfg());
        let mut ps = ParamSet::new();
        wm.init(&mut ps, rng)?;
        let batch = micro_batch(&wm.cfg, 3, 2, rng);
        Ok((
            WorldLossCase {
                wm,
                batch,
                noise_seed: rng.random(),
            },
            ps,
        ))
    })?);
    for (name, which) in [
        ("policy/control_actor", PolicyLoss::ControlActor),
        ("policy/safe_actor", PolicyLoss::SafeActor),
        ("policy/critic", PolicyLoss::RewardCritic),
    ] {
        out.push(run_suite(name, instances, seed + 104 + which as u64, |rng| policy_case(which, rng))?);
    }
    out.push(run_suite("discriminator/train_loss", instances, seed + 110, |rng| {
        let disc = Discriminator::new(5, 2, 6, 2, 1e-3);
        let mut ps = ParamSet::new();
        disc.net.init(&mut ps, rng, false)?;
        let batch = synthetic_clusters(4, 5, 2, 0.5, 0.4, rng);
        Ok((DiscCase { disc, batch }, ps))
    })?);
    Ok(out)
}
