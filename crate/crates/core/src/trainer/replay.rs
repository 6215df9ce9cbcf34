//! Episode replay storage and sequence sampling.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::world_model::SequenceBatch;

/// One complete episode. Entry `i` holds observation `i`, the action that led
/// to it, and the reward, cost and terminal flag of that transition; entry 0
/// is the reset observation with zero action and zero reward.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub costs: Vec<f32>,
    pub terminals: Vec<f32>,
}

impl Episode {
    pub fn start(obs: &[f32], act_dim: usize) -> Self {
        let mut e = Self {
            obs_dim: obs.len(),
            act_dim,
            ..Self::default()
        };
        e.push(obs, &vec![0.0; act_dim], 0.0, 0.0, false);
        e
    }

    pub fn push(&mut self, obs: &[f32], action: &[f32], reward: f64, cost: f64, terminal: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.len(), self.act_dim);
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(action);
        self.rewards.push(reward as f32);
        self.costs.push(cost as f32);
        self.terminals.push(terminal as u8 as f32);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().map(|&c| c as f64).sum()
    }

    fn to_entries(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let n = self.len();
        let t = |cols: usize, d: &[f32]| Tensor::new(vec![n, cols], d.to_vec()).expect("episode shape");
        vec![
            (format!("{prefix}.obs"), t(self.obs_dim, &self.obs)),
            (format!("{prefix}.actions"), t(self.act_dim, &self.actions)),
            (format!("{prefix}.rewards"), t(1, &self.rewards)),
            (format!("{prefix}.costs"), t(1, &self.costs)),
            (format!("{prefix}.terminals"), t(1, &self.terminals)),
        ]
    }

    fn from_entries(entries: &BTreeMap<String, Tensor<f32>>, prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            entries
                .get(&format!("{prefix}.{k}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing `{prefix}.{k}`")))
        };
        let (obs, actions) = (get("obs")?, get("actions")?);
        let n = obs.rows();
        let e = Self {
            obs_dim: obs.cols(),
            act_dim: actions.cols(),
            obs: obs.data().to_vec(),
            actions: actions.data().to_vec(),
            rewards: get("rewards")?.data().to_vec(),
            costs: get("costs")?.data().to_vec(),
            terminals: get("terminals")?.data().to_vec(),
        };
        if [actions.rows(), e.rewards.len(), e.costs.len(), e.terminals.len()].iter().any(|&m| m != n) {
            return Err(Error::Checkpoint(format!("episode `{prefix}` has ragged columns")));
        }
        Ok(e)
    }
}

/// Whole episodes up to `capacity` total entries; the oldest episodes are
/// evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    episodes: VecDeque<Episode>,
    steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            steps: 0,
        }
    }

    pub fn add(&mut self, ep: Episode) -> Result<()> {
        if ep.len() > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "episode of {} entries exceeds replay capacity {}",
                ep.len(),
                self.capacity
            )));
        }
        if let Some(first) = self.episodes.front() {
            if (first.obs_dim, first.act_dim) != (ep.obs_dim, ep.act_dim) {
                return Err(Error::Shape("episode dimensions differ from the buffer's".into()));
            }
        }
        self.steps += ep.len();
        self.episodes.push_back(ep);
        while self.steps > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty");
            self.steps -= old.len();
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Uniform over episodes long enough, then uniform over offsets in
    /// `[0, len - seq_len]`. Returns the batch and the chosen pairs.
    pub fn sample_with_index(&self, batch: usize, seq_len: usize, rng: &mut impl Rng) -> Result<(SequenceBatch, Vec<(usize, usize)>)> {
        if batch == 0 || seq_len == 0 {
            return Err(Error::InvalidArgument("batch and sequence length must be positive".into()));
        }
        let eligible: Vec<usize> = (0..self.episodes.len()).filter(|&i| self.episodes[i].len() >= seq_len).collect();
        if eligible.is_empty() {
            return Err(Error::InsufficientData(format!("no stored episode has {seq_len} entries")));
        }
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|_| {
                let e = eligible[rng.random_range(0..eligible.len())];
                let off = rng.random_range(0..=self.episodes[e].len() - seq_len);
                (e, off)
            })
            .collect();
        let first = &self.episodes[eligible[0]];
        let (od, ad) = (first.obs_dim, first.act_dim);
        let n = batch * seq_len;
        let (mut obs, mut act) = (Vec::with_capacity(n * od), Vec::with_capacity(n * ad));
        let (mut rew, mut cost, mut term) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for t in 0..seq_len {
            for &(e, off) in &picks {
                let ep = &self.episodes[e];
                let i = off + t;
                obs.extend_from_slice(&ep.obs[i * od..(i + 1) * od]);
                if t == 0 {
                    act.extend(std::iter::repeat_n(0.0, ad));
                } else {
                    act.extend_from_slice(&ep.actions[i * ad..(i + 1) * ad]);
                }
                rew.push(ep.rewards[i]);
                cost.push(ep.costs[i]);
                term.push(ep.terminals[i]);
            }
        }
        let col = |d: Vec<f32>| Tensor::new(vec![n, 1], d).expect("column");
        Ok((
            SequenceBatch {
                time: seq_len,
                batch,
                obs: Tensor::new(vec![n, od], obs)?,
                actions: Tensor::new(vec![n, ad], act)?,
                rewards: col(rew),
                costs: col(cost),
                terminals: col(term),
            },
            picks,
        ))
    }

    pub fn sample_sequences(&self, batch: usize, seq_len: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        Ok(self.sample_with_index(batch, seq_len, rng)?.0)
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![("replay.count".to_string(), Tensor::scalar(self.episodes.len() as f32))];
        for (i, e) in self.episodes.iter().enumerate() {
            out.extend(e.to_entries(&format!("replay.{i:06}")));
        }
        out
    }

    pub fn from_entries(entries: &BTreeMap<String, Tensor<f32>>, capacity: usize) -> Result<Self> {
        let count = entries
            .get("replay.count")
            .ok_or_else(|| Error::Checkpoint("missing `replay.count`".into()))?
            .item() as usize;
        let mut buf = Self::new(capacity);
        for i in 0..count {
            buf.add(Episode::from_entries(entries, &format!("replay.{i:06}"))?)?;
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(len: usize, tag: f32) -> Episode {
        let mut e = Episode::start(&[tag, 0.0], 1);
        for i in 1..len {
            e.push(&[tag, i as f32], &[i as f32 / 1000.0], i as f64, (i % 2) as f64, i + 1 == len);
        }
        e
    }

    #[test]
    fn offsets_stay_inside_one_episode() {
        let mut b = ReplayBuffer::new(10_000);
        b.add(episode(500, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (batch, picks) = b.sample_with_index(4, 50, &mut rng).unwrap();
            assert!(picks.iter().all(|&(_, o)| o <= 450));
            for (s, &(_, off)) in picks.iter().enumerate() {
                for t in 0..50 {
                    let row = batch.obs.row(t * 4 + s);
                    assert_eq!(row[1], (off + t) as f32);
                    let a = batch.actions.row(t * 4 + s)[0];
                    if t == 0 {
                        assert_eq!(a, 0.0);
                    } else {
                        assert_eq!(a, (off + t) as f32 / 1000.0);
                    }
                }
            }
        }
    }

    #[test]
    fn eviction_and_accounting() {
        let mut b = ReplayBuffer::new(1000);
        for i in 0..5 {
            b.add(episode(300, i as f32)).unwrap();
            assert_eq!(b.steps(), b.episodes().map(|e| e.len()).sum::<usize>());
            assert!(b.steps() <= 1000);
        }
        assert_eq!(b.num_episodes(), 3);
        assert_eq!(b.episodes().next().unwrap().obs[0], 2.0);
        assert!(b.add(episode(1001, 9.0)).is_err());
    }

    #[test]
    fn sampling_errors_and_determinism() {
        let mut b = ReplayBuffer::new(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_sequences(2, 10, &mut rng), Err(Error::InsufficientData(_))));
        b.add(episode(5, 0.0)).unwrap();
        assert!(b.sample_sequences(2, 10, &mut rng).is_err());
        b.add(episode(20, 1.0)).unwrap();
        let a = b.sample_sequences(3, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = b.sample_sequences(3, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, c);
        assert!(a.obs.data().chunks(2).all(|r| r[0] == 1.0));
    }

    #[test]
    fn offsets_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut b = ReplayBuffer::new(1000);
        b.add(episode(500, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; 451];
        for _ in 0..10_000 {
            let (_, p) = b.sample_with_index(1, 50, &mut rng).unwrap();
            counts[p[0].1] += 1;
        }
        let expect = 10_000.0 / 451.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new(450.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn entries_round_trip() {
        let mut b = ReplayBuffer::new(1000);
        b.add(episode(30, 0.0)).unwrap();
        b.add(episode(40, 1.0)).unwrap();
        let map: BTreeMap<_, _> = b.to_entries().into_iter().collect();
        assert_eq!(ReplayBuffer::from_entries(&map, 1000).unwrap(), b);
    }
}
