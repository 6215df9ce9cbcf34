//! Online switch between the control and safe actors based on the cost the
//! world model predicts along a control-actor rollout.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bind, Graph, ParamSet, Tensor};
use crate::policy::{ActMode, Actor, ActorId};
use crate::world_model::{LatentState, WorldModel};

/// What the planner needs from the model and the actors. Every method works
/// on a batch of one state and must not record gradients.
pub trait PlanModel {
    /// Predicted per-step cost at `state`.
    fn cost(&self, state: &LatentState<f32>) -> Result<f64>;
    /// Prior-mean transition.
    fn imagine(&self, state: &LatentState<f32>, action: &Tensor<f32>) -> Result<LatentState<f32>>;
    fn act(&self, actor: ActorId, state: &LatentState<f32>, mode: ActMode, rng: &mut dyn RngCore) -> Result<Tensor<f32>>;
}

/// The learned world model with both actors.
pub struct LearnedModel<'a> {
    pub wm: &'a WorldModel,
    pub wm_params: &'a ParamSet<f32>,
    pub control: (&'a Actor, &'a ParamSet<f32>),
    pub safe: (&'a Actor, &'a ParamSet<f32>),
}

impl PlanModel for LearnedModel<'_> {
    fn cost(&self, state: &LatentState<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let l = state.to_graph(&mut g);
        let f = l.feat(&mut g);
        let c = self.wm.cost_head(&mut g, Bind::frozen(self.wm_params), f)?;
        g.check_finite("planner cost head")?;
        Ok(g.value(c).mean() as f64)
    }

    fn imagine(&self, state: &LatentState<f32>, action: &Tensor<f32>) -> Result<LatentState<f32>> {
        let mut g = Graph::new();
        let l = state.to_graph(&mut g);
        let a = g.constant(action.clone());
        let next = self.wm.imagine_step(&mut g, Bind::frozen(self.wm_params), &l, a, None)?;
        g.check_finite("planner imagination")?;
        Ok(next.values(&g))
    }

    fn act(&self, actor: ActorId, state: &LatentState<f32>, mode: ActMode, mut rng: &mut dyn RngCore) -> Result<Tensor<f32>> {
        let (a, p) = match actor {
            ActorId::Control => self.control,
            ActorId::Safe => self.safe,
        };
        a.act(p, state, mode, &mut rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchMode {
    /// Threshold on predicted cost.
    Switch,
    AlwaysControl,
    AlwaysSafe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanConfig {
    pub horizon: usize,
    pub budget: f64,
    pub mode: SwitchMode,
    /// Forces the control actor (before any training).
    pub warmup: bool,
    pub act_mode: ActMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub c_obs: f64,
    pub c_imagined: Vec<f64>,
    pub c_sum: f64,
    pub chose_safe: bool,
    /// The choice was dictated by warmup or a fixed mode, not the threshold.
    pub forced: bool,
}

/// `b_s = scale * b * (H_p + 1) / T`.
pub fn planner_budget(budget: f64, horizon: usize, episode_length: usize, scale: f64) -> Result<f64> {
    if !(budget >= 0.0 && budget.is_finite()) || episode_length == 0 || !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "planner budget needs b >= 0, T > 0, scale >= 0; got {budget}, {episode_length}, {scale}"
        )));
    }
    Ok(scale * budget * (horizon + 1) as f64 / episode_length as f64)
}

/// Sums the posterior cost and `H_p` prior-mean steps under the control
/// actor's mean action, then samples from the control actor when
/// `c_sum <= b_s` and from the safe actor otherwise.
pub fn plan_action(model: &dyn PlanModel, posterior: &LatentState<f32>, cfg: &PlanConfig, rng: &mut dyn RngCore) -> Result<(Tensor<f32>, PlanDiagnostics)> {
    if posterior.batch() != 1 {
        return Err(Error::InvalidArgument(format!("planner takes one state, got {}", posterior.batch())));
    }
    let c_obs = model.cost(posterior)?;
    let mut c_imagined = Vec::with_capacity(cfg.horizon);
    let mut s = posterior.clone();
    for _ in 0..cfg.horizon {
        let a = model.act(ActorId::Control, &s, ActMode::Mean, rng)?;
        s = model.imagine(&s, &a)?;
        c_imagined.push(model.cost(&s)?);
    }
    let c_sum = c_obs + c_imagined.iter().sum::<f64>();
    if !c_sum.is_finite() {
        return Err(Error::NonFinite("planner cost sum".into()));
    }
    let threshold = c_sum > cfg.budget;
    let (chose_safe, forced) = match (cfg.warmup, cfg.mode) {
        (true, _) => (false, true),
        (false, SwitchMode::Switch) => (threshold, false),
        (false, SwitchMode::AlwaysControl) => (false, true),
        (false, SwitchMode::AlwaysSafe) => (true, true),
    };
    let actor = if chose_safe { ActorId::Safe } else { ActorId::Control };
    let action = model.act(actor, posterior, cfg.act_mode, rng)?;
    Ok((
        action,
        PlanDiagnostics {
            c_obs,
            c_imagined,
            c_sum,
            chose_safe,
            forced,
        },
    ))
}

/// Scripted model for tests and diagnostics: the state's `h[0]` counts steps,
/// the cost at the posterior is `c_obs` and every imagined step costs
/// `step_costs[k]`. Control actions are `+1`, safe actions `-1`.
#[derive(Clone, Debug)]
pub struct StubModel {
    pub c_obs: f64,
    pub step_costs: Vec<f64>,
}

impl StubModel {
    pub fn start(&self) -> LatentState<f32> {
        LatentState {
            h: Tensor::zeros(&[1, 1]),
            z: Tensor::zeros(&[1, 1]),
            mean: Tensor::zeros(&[1, 1]),
            std: Tensor::full(&[1, 1], 1.0),
        }
    }
}

impl PlanModel for StubModel {
    fn cost(&self, state: &LatentState<f32>) -> Result<f64> {
        let k = state.h.data()[0] as usize;
        Ok(if k == 0 { self.c_obs } else { self.step_costs[(k - 1) % self.step_costs.len()] })
    }

    fn imagine(&self, state: &LatentState<f32>, _action: &Tensor<f32>) -> Result<LatentState<f32>> {
        let mut s = state.clone();
        s.h.data_mut()[0] += 1.0;
        Ok(s)
    }

    fn act(&self, actor: ActorId, _state: &LatentState<f32>, _mode: ActMode, _rng: &mut dyn RngCore) -> Result<Tensor<f32>> {
        let v = if actor == ActorId::Control { 1.0 } else { -1.0 };
        Ok(Tensor::full(&[1, 2], v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world_model::WorldModelConfig;
    use crate::policy::PolicyConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(horizon: usize, budget: f64) -> PlanConfig {
        PlanConfig {
            horizon,
            budget,
            mode: SwitchMode::Switch,
            warmup: false,
            act_mode: ActMode::Sample,
        }
    }

    fn run(m: &StubModel, c: &PlanConfig) -> (Tensor<f32>, PlanDiagnostics) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        plan_action(m, &m.start(), c, &mut rng).unwrap()
    }

    #[test]
    fn zero_costs_choose_control() {
        let m = StubModel { c_obs: 0.0, step_costs: vec![0.0] };
        let (a, d) = run(&m, &cfg(15, 2.0));
        assert!(!d.chose_safe);
        assert_eq!(a.data(), &[1.0, 1.0]);
    }

    #[test]
    fn posterior_cost_alone_triggers_safe() {
        let m = StubModel { c_obs: 3.0, step_costs: vec![0.0] };
        for h in 0..4 {
            let (a, d) = run(&m, &cfg(h, 2.0));
            assert!(d.chose_safe);
            assert_eq!(a.data(), &[-1.0, -1.0]);
        }
    }

    #[test]
    fn stub_sum_example() {
        let m = StubModel { c_obs: 0.3, step_costs: vec![0.5] };
        let (_, d) = run(&m, &cfg(4, 2.0));
        assert_eq!(d.c_imagined, vec![0.5; 4]);
        assert!((d.c_sum - 2.3).abs() < 1e-12);
        assert!(d.chose_safe);
    }

    #[test]
    fn zero_horizon_is_posterior_threshold() {
        let m = StubModel { c_obs: 0.7, step_costs: vec![5.0] };
        let (_, d) = run(&m, &cfg(0, 1.0));
        assert_eq!(d.c_sum, 0.7);
        assert!(!d.chose_safe);
    }

    #[test]
    fn threshold_is_a_step_function() {
        let m = StubModel { c_obs: 0.2, step_costs: vec![0.1, 0.3] };
        let mut prev = true;
        let mut flips = 0;
        for i in 0..=400 {
            let b = i as f64 * 0.01;
            let (_, d) = run(&m, &cfg(5, b));
            assert_eq!(d.chose_safe, d.c_sum > b);
            if d.chose_safe != prev {
                flips += 1;
            }
            prev = d.chose_safe;
        }
        assert_eq!(flips, 1);
    }

    #[test]
    fn warmup_and_fixed_modes() {
        let m = StubModel { c_obs: 9.0, step_costs: vec![1.0] };
        let (a, d) = run(&m, &PlanConfig { warmup: true, ..cfg(3, 0.5) });
        assert!(!d.chose_safe && d.forced);
        assert_eq!(a.data()[0], 1.0);
        let (_, d) = run(&m, &PlanConfig { mode: SwitchMode::AlwaysControl, ..cfg(3, 0.5) });
        assert!(!d.chose_safe);
        let m0 = StubModel { c_obs: 0.0, step_costs: vec![0.0] };
        let (_, d) = run(&m0, &PlanConfig { mode: SwitchMode::AlwaysSafe, ..cfg(3, 0.5) });
        assert!(d.chose_safe);
    }

    #[test]
    fn budget_formula() {
        assert!((planner_budget(25.0, 15, 500, 1.0).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(planner_budget(25.0, 15, 500, 0.0).unwrap(), 0.0);
        assert!(planner_budget(25.0, 15, 0, 1.0).is_err());
        assert!(planner_budget(-1.0, 15, 500, 1.0).is_err());
    }

    #[test]
    fn learned_model_leaves_params_untouched() {
        let wm = WorldModel::new(WorldModelConfig {
            deter: 6,
            stoch: 3,
            hidden: 12,
            embed: 6,
            ..WorldModelConfig::new(8, 2)
        });
        let pc = PolicyConfig { hidden: 16, ..PolicyConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut wp = ParamSet::new();
        wm.init(&mut wp, &mut rng).unwrap();
        let ac = Actor::new(ActorId::Control, 9, 2, &pc);
        let as_ = Actor::new(ActorId::Safe, 9, 2, &pc);
        let (mut cp, mut sp) = (ParamSet::new(), ParamSet::new());
        ac.init(&mut cp, &mut rng).unwrap();
        as_.init(&mut sp, &mut rng).unwrap();
        let hashes = (wp.content_hash(), cp.content_hash(), sp.content_hash());
        let m = LearnedModel { wm: &wm, wm_params: &wp, control: (&ac, &cp), safe: (&as_, &sp) };
        let s = wm.initial_state(1).unwrap();
        let c = PlanConfig { act_mode: ActMode::Mean, ..cfg(15, 0.8) };
        let (a1, d1) = plan_action(&m, &s, &c, &mut rng).unwrap();
        let (a2, d2) = plan_action(&m, &s, &c, &mut rng).unwrap();
        assert_eq!((a1, d1.clone()), (a2, d2));
        assert_eq!(d1.c_imagined.len(), 15);
        assert!((d1.c_sum - d1.c_obs - d1.c_imagined.iter().sum::<f64>()).abs() < 1e-6);
        assert_eq!(hashes, (wp.content_hash(), cp.content_hash(), sp.content_hash()));
        assert!(plan_action(&m, &wm.initial_state(2).unwrap(), &c, &mut rng).is_err());
    }
}
