//! Append-only metrics CSV.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Episode,
    Train,
    Eval,
}

impl RowKind {
    fn as_str(self) -> &'static str {
        match self {
            RowKind::Episode => "episode",
            RowKind::Train => "train",
            RowKind::Eval => "eval",
        }
    }
}

/// One CSV row. Fields that do not apply to the row kind are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: RowKind,
    pub env_step: u64,
    pub grad_step: u64,
    pub episode_return: Option<f64>,
    pub episode_cost: Option<f64>,
    pub lambda_p: f64,
    pub c_k: Option<f64>,
    pub wm_recon: Option<f64>,
    pub wm_reward: Option<f64>,
    pub wm_cost: Option<f64>,
    pub wm_kl: Option<f64>,
    pub actor_c_loss: Option<f64>,
    pub actor_s_loss: Option<f64>,
    pub critic_r_loss: Option<f64>,
    pub critic_c_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub chose_safe_rate: Option<f64>,
    pub wallclock_s: f64,
}

pub const HEADER: &str = "kind,env_step,grad_step,episode_return,episode_cost,lambda_p,c_k,wm_recon,wm_reward,wm_cost,wm_kl,actor_c_loss,actor_s_loss,critic_r_loss,critic_c_loss,disc_loss,chose_safe_rate,wallclock_s";

impl MetricsRow {
    pub fn new(kind: RowKind, env_step: u64, grad_step: u64, lambda_p: f64) -> Self {
        Self {
            kind,
            env_step,
            grad_step,
            episode_return: None,
            episode_cost: None,
            lambda_p,
            c_k: None,
            wm_recon: None,
            wm_reward: None,
            wm_cost: None,
            wm_kl: None,
            actor_c_loss: None,
            actor_s_loss: None,
            critic_r_loss: None,
            critic_c_loss: None,
            disc_loss: None,
            chose_safe_rate: None,
            wallclock_s: 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.kind.as_str(),
            self.env_step,
            self.grad_step,
            o(self.episode_return),
            o(self.episode_cost),
            self.lambda_p,
            o(self.c_k),
            o(self.wm_recon),
            o(self.wm_reward),
            o(self.wm_cost),
            o(self.wm_kl),
            o(self.actor_c_loss),
            o(self.actor_s_loss),
            o(self.critic_r_loss),
            o(self.critic_c_loss),
            o(self.disc_loss),
            o(self.chose_safe_rate),
            self.wallclock_s
        )
    }
}

/// Writes the header on creation; appends to an existing file otherwise.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(f);
        if fresh {
            writeln!(out, "{HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Column index by name in [`HEADER`].
pub fn column(name: &str) -> Option<usize> {
    HEADER.split(',').position(|c| c == name)
}

/// Drops the wallclock column so two runs can be compared.
pub fn strip_wallclock(csv: &str) -> String {
    let idx = column("wallclock_s").expect("wallclock column");
    csv.lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            cols.iter()
                .enumerate()
                .filter(|&(i, _)| i != idx)
                .map(|(_, c)| *c)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
