use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use safewm::env::write_trajectory_csv;
use safewm::planner::{plan_action, PlanConfig, SwitchMode};
use safewm::policy::ActMode;
use safewm::trainer::metrics::column;
use safewm::trainer::{Agent, MetricsWriter, TrainConfig};
use safewm::{checks, Result};

#[derive(Parser)]
#[command(name = "safewm", version, about = "Safe model-based RL on a point-mass circle task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Switch,
    Control,
    Safe,
}

impl From<Mode> for SwitchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Switch => SwitchMode::Switch,
            Mode::Control => SwitchMode::AlwaysControl,
            Mode::Safe => SwitchMode::AlwaysSafe,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `<out>/checkpoint` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with mean actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = Mode::Switch)]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory for per-episode trajectory CSVs.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every trainable module.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Print planner diagnostics for the first steps of an episode.
    PlanDebug {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.finish()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoint");
    let mut agent = if resume && ckpt.join(safewm::trainer::agent::STATE_FILE).exists() {
        info!("resuming from {}", ckpt.display());
        Agent::load(&ckpt)?
    } else {
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
        let _ = std::fs::remove_file(dir.join("metrics.csv"));
        Agent::new(cfg.clone())?
    };
    let metrics_path = dir.join("metrics.csv");
    if resume {
        // Rows logged after the checkpoint will be produced again.
        truncate_metrics(&metrics_path, agent.env_step)?;
    }
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let total = agent.cfg.total_steps;
    let every = match agent.cfg.checkpoint_every {
        0 => total,
        n => n,
    };
    while agent.env_step < total {
        let until = ((agent.env_step / every + 1) * every).min(total);
        agent.run_until(until, |rows| {
            for r in rows {
                metrics.write(r)?;
                if let (Some(ret), Some(cost)) = (r.episode_return, r.episode_cost) {
                    info!(
                        "step {} grad {} return {:.1} cost {} lambda {:.3} safe {:.2}",
                        r.env_step,
                        r.grad_step,
                        ret,
                        cost,
                        r.lambda_p,
                        r.chose_safe_rate.unwrap_or(0.0)
                    );
                }
            }
            metrics.flush()
        })?;
        agent.save(&ckpt)?;
    }
    info!("done: {} env steps, {} gradient steps", agent.env_step, agent.grad_step);
    Ok(())
}

fn truncate_metrics(path: &Path, env_step: u64) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let step_col = column("env_step").expect("env_step column");
    let kept: String = text
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || l.split(',').nth(step_col).and_then(|v| v.parse::<u64>().ok()).is_some_and(|s| s <= env_step))
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept)?;
    Ok(())
}

fn eval(checkpoint: &Path, episodes: usize, mode: Mode, seed: u64, trajectories: Option<PathBuf>) -> Result<()> {
    let agent = Agent::load(checkpoint)?;
    let (s, trajs) = agent.evaluate_with_trajectories(episodes, mode.into(), seed)?;
    if let Some(dir) = trajectories {
        std::fs::create_dir_all(&dir)?;
        for (i, rows) in trajs.iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("episode_{i:03}.csv")))?);
            write_trajectory_csv(&mut f, rows, true)?;
        }
    }
    println!("episodes        {}", s.returns.len());
    println!("mean_return     {:.3}", s.mean_return);
    println!("mean_cost       {:.3}", s.mean_cost);
    println!("chose_safe_rate {:.4}", s.chose_safe_rate);
    println!("budget          {}", agent.cfg.budget);
    println!("violation       {}", s.violation);
    Ok(())
}

fn plan_debug(checkpoint: &Path, steps: usize, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let agent = Agent::load(checkpoint)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = PlanConfig {
        horizon: agent.cfg.planner_horizon,
        budget: agent.planner_budget()?,
        mode: SwitchMode::Switch,
        warmup: false,
        act_mode: ActMode::Mean,
    };
    let planner = agent.params.planner(&agent.models);
    let (mut s, mut obs) = agent.env.reset(rng.random());
    let mut latent = agent.models.wm.initial_state(1)?;
    let mut prev = vec![0.0f32; 2];
    println!("b_s = {:.4}", cfg.budget);
    println!("step,x,y,c_obs,c_sum,chose_safe,ax,ay,cost,c_imagined");
    for _ in 0..steps {
        latent = agent.params.posterior(&agent.models, &latent, &prev, &obs, None)?;
        let (a, d) = plan_action(&planner, &latent, &cfg, &mut rng)?;
        let act = [a.data()[0] as f64, a.data()[1] as f64];
        let (next, res) = agent.env.step(&s, act)?;
        let imagined: Vec<String> = d.c_imagined.iter().map(|c| format!("{c:.3}")).collect();
        println!(
            "{},{:.3},{:.3},{:.4},{:.4},{},{:.3},{:.3},{},{}",
            next.step_index,
            s.x,
            s.y,
            d.c_obs,
            d.c_sum,
            d.chose_safe as u8,
            act[0],
            act[1],
            res.cost,
            imagined.join(" ")
        );
        prev = vec![act[0] as f32, act[1] as f32];
        s = next;
        obs = res.observation;
        if res.terminal {
            break;
        }
    }
    Ok(())
}

fn gradcheck(instances: usize) -> Result<bool> {
    let reports = checks::run_all(instances, 0)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<28} instances {:>4}  worst rel err {:.2e}  {}",
            r.name,
            r.instances,
            r.worst,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Train { config, seed, out, resume } => train(&config, seed, out, resume).map(|_| true),
        Cmd::Eval {
            checkpoint,
            episodes,
            mode,
            seed,
            trajectories,
        } => eval(&checkpoint, episodes, mode, seed, trajectories).map(|_| true),
        Cmd::Gradcheck { instances } => gradcheck(instances),
        Cmd::PlanDebug { checkpoint, steps, seed } => plan_debug(&checkpoint, steps, seed).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

