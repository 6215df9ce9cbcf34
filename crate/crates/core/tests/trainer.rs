use safewm::planner::SwitchMode;
use safewm::trainer::metrics::RowKind;
use safewm::trainer::{Agent, MetricsRow, TrainConfig};

fn tiny(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::parse(
        "wm.deter = 12\nwm.stoch = 3\nwm.hidden = 24\nwm.embed = 12\npolicy.hidden = 24\npolicy.horizon = 4\n\
         disc.hidden = 24\nplanner.horizon = 4\nenv.episode_length = 60\ntrain.seq_len = 8\ntrain.batch = 3\n\
         train.prefill = 120\ntrain.log_every = 1\n",
    )
    .unwrap();
    c.seed = seed;
    c
}

fn run(agent: &mut Agent, until: u64) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    agent
        .run_until(until, |r| {
            rows.extend_from_slice(r);
            Ok(())
        })
        .unwrap();
    rows
}

#[test]
fn prefill_forces_the_control_actor() {
    let mut a = Agent::new(tiny(1)).unwrap();
    while a.env_step < a.cfg.prefill {
        let d = a.collect_step().unwrap();
        assert!(d.forced && !d.chose_safe);
    }
    assert_eq!(a.grad_step, 0);
}

#[test]
fn episode_rows_match_ground_truth() {
    let mut a = Agent::new(tiny(2)).unwrap();
    let rows = run(&mut a, 400);
    let episodes: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == RowKind::Episode).collect();
    assert_eq!(episodes.len(), a.replay.num_episodes());
    for (row, ep) in episodes.iter().zip(a.replay.episodes()) {
        assert_eq!(row.episode_cost, Some(ep.total_cost()));
        assert!((row.episode_return.unwrap() - ep.total_reward()).abs() < 1e-6);
        let rate = row.chose_safe_rate.unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
    // Buffer accounting.
    assert_eq!(a.replay.steps(), a.replay.episodes().map(|e| e.len()).sum::<usize>());
    // The multiplier sees the environment's per-step costs, not predictions.
    let mut recent: Vec<f64> = a.replay.episodes().flat_map(|e| e.costs[1..].iter().map(|&c| c as f64)).collect();
    recent.extend(a.live.episode.costs[1..].iter().map(|&c| c as f64));
    let w: Vec<f64> = a.lagrange.window.iter().copied().collect();
    assert_eq!(&recent[recent.len() - w.len()..], &w[..]);
}

#[test]
fn training_rows_are_finite_and_counted() {
    let mut a = Agent::new(tiny(3)).unwrap();
    let rows = run(&mut a, 300);
    let train: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == RowKind::Train).collect();
    assert_eq!(train.len() as u64, a.grad_step);
    assert_eq!(a.grad_step, (300 - 120) / 5 + 1);
    for r in train {
        for v in [r.wm_recon, r.wm_kl, r.actor_c_loss, r.actor_s_loss, r.critic_r_loss, r.critic_c_loss, r.disc_loss] {
            assert!(v.unwrap().is_finite());
        }
        assert!(r.lambda_p >= a.cfg.lagrange.lambda_min && r.lambda_p <= a.cfg.lagrange.lambda_max);
    }
}

#[test]
fn evaluation_is_finite_and_side_effect_free() {
    let a = Agent::new(tiny(4)).unwrap();
    let (hash, steps) = (a.params.content_hash(), a.replay.steps());
    let (s, trajs) = a.evaluate_with_trajectories(5, SwitchMode::Switch, 8).unwrap();
    assert_eq!(s.returns.len(), 5);
    assert!(s.mean_return.is_finite() && s.mean_cost.is_finite());
    assert_eq!(a.params.content_hash(), hash);
    assert_eq!(a.replay.steps(), steps);
    let returns: Vec<f64> = trajs.iter().map(|t| t.iter().map(|r| r.reward).sum()).collect();
    let costs: Vec<f64> = trajs.iter().map(|t| t.iter().map(|r| r.cost).sum()).collect();
    assert_eq!(returns, s.returns);
    assert_eq!(costs, s.costs);
    assert!((s.mean_cost - costs.iter().sum::<f64>() / 5.0).abs() < 1e-9);
    assert_eq!(s.violation, s.mean_cost > a.cfg.budget);
    assert_eq!(a.evaluate(5, SwitchMode::Switch, 8).unwrap(), s);
}

#[test]
fn checkpoint_rejects_mismatched_config() {
    let mut a = Agent::new(tiny(5)).unwrap();
    run(&mut a, 150);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let cfg = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    std::fs::write(dir.path().join("config.txt"), cfg.replace("wm.deter = 12", "wm.deter = 13")).unwrap();
    assert!(Agent::load(dir.path()).is_err());
}
