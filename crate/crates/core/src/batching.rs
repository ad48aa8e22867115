//! Per-epoch batch plans.
//!
//! Time-sequential plans cut every session into consecutive chronological
//! runs of `batch_size` frames and only shuffle the order of those runs.
//! Shuffled plans permute all frames globally before chunking.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TimeSequential,
    Shuffled,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::TimeSequential => "time-sequential",
            Strategy::Shuffled => "shuffled",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time-sequential" | "time_sequential" | "sequential" => Ok(Strategy::TimeSequential),
            "shuffled" | "shuffle" => Ok(Strategy::Shuffled),
            other => Err(Error::Config(format!(
                "unknown batching strategy `{other}` (expected time-sequential or shuffled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub epoch: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Indices into the frame slice the plan was built from.
    pub batches: Vec<Vec<usize>>,
}

/// Seed for one epoch's permutation, derived with the SplitMix64 mix.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, streams::EPOCH + epoch as u64)
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    Ok(())
}

/// Consecutive chronological runs of at most `batch_size` frames, never
/// crossing sessions. Sessions appear in order of their earliest frame.
pub fn chronological_batches(frames: &[Frame], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    check_batch_size(batch_size)?;
    let mut sessions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        sessions.entry(f.session_id.as_str()).or_default().push(i);
    }
    let mut runs: Vec<Vec<usize>> = sessions.into_values().collect();
    for run in &mut runs {
        run.sort_by_key(|&i| frames[i].chrono_index);
    }
    runs.sort_by_key(|run| frames[run[0]].chrono_index);
    Ok(runs
        .iter()
        .flat_map(|run| run.chunks(batch_size).map(<[usize]>::to_vec))
        .collect())
}

pub fn time_sequential_batches(
    frames: &[Frame],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchPlan> {
    let mut batches = chronological_batches(frames, batch_size)?;
    batches.shuffle(&mut rng_for(epoch_seed(seed, epoch), 0));
    Ok(BatchPlan {
        epoch,
        strategy: Strategy::TimeSequential,
        seed,
        batches,
    })
}

pub fn shuffled_batches(frames: &[Frame], batch_size: usize, seed: u64, epoch: usize) -> Result<BatchPlan> {
    check_batch_size(batch_size)?;
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(&mut rng_for(epoch_seed(seed, epoch), 0));
    Ok(BatchPlan {
        epoch,
        strategy: Strategy::Shuffled,
        seed,
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    })
}

pub fn plan_epoch(
    frames: &[Frame],
    batch_size: usize,
    strategy: Strategy,
    seed: u64,
    epoch: usize,
) -> Result<BatchPlan> {
    match strategy {
        Strategy::TimeSequential => time_sequential_batches(frames, batch_size, seed, epoch),
        Strategy::Shuffled => shuffled_batches(frames, batch_size, seed, epoch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn frames(sessions: &[usize]) -> Vec<Frame> {
        let mut out = Vec::new();
        for (s, &n) in sessions.iter().enumerate() {
            for i in 0..n {
                let chrono = out.len();
                out.push(Frame {
                    data: vec![0.0],
                    window: 1,
                    channels: 1,
                    label: 0,
                    chrono_index: chrono,
                    session_id: format!("s{s}"),
                    start: i,
                });
            }
        }
        out
    }

    fn sorted_contents(plan: &BatchPlan) -> Vec<Vec<usize>> {
        let mut c = plan.batches.clone();
        c.sort();
        c
    }

    #[test]
    fn ten_frames_batch_four() {
        let f = frames(&[10]);
        let plan = time_sequential_batches(&f, 4, 1, 0).unwrap();
        assert_eq!(
            sorted_contents(&plan),
            vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]
        );
    }

    #[test]
    fn batch_larger_than_data() {
        let f = frames(&[5]);
        let plan = time_sequential_batches(&f, 8, 1, 3).unwrap();
        assert_eq!(plan.batches, vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn empty_frames_give_empty_plan() {
        assert!(time_sequential_batches(&[], 4, 0, 0).unwrap().batches.is_empty());
        assert!(shuffled_batches(&[], 4, 0, 0).unwrap().batches.is_empty());
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        assert!(matches!(plan_epoch(&frames(&[3]), 0, Strategy::Shuffled, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn order_changes_across_epochs_contents_do_not() {
        let f = frames(&[40]);
        let a = time_sequential_batches(&f, 4, 9, 1).unwrap();
        let b = time_sequential_batches(&f, 4, 9, 2).unwrap();
        assert_ne!(a.batches, b.batches);
        assert_eq!(sorted_contents(&a), sorted_contents(&b));
    }

    #[test]
    fn sessions_are_never_mixed() {
        let f = frames(&[5, 3]);
        let plan = time_sequential_batches(&f, 4, 0, 0).unwrap();
        assert_eq!(
            sorted_contents(&plan),
            vec![vec![0, 1, 2, 3], vec![4], vec![5, 6, 7]]
        );
    }

    #[test]
    fn shuffled_is_a_partition_and_deterministic() {
        let f = frames(&[30, 20]);
        let plan = shuffled_batches(&f, 7, 4, 0).unwrap();
        let mut all: Vec<usize> = plan.batches.concat();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(plan, shuffled_batches(&f, 7, 4, 0).unwrap());
        assert_eq!(plan.batches.last().unwrap().len(), 50 % 7);
    }

    #[test]
    fn shuffled_batches_are_not_chronological() {
        let f = frames(&[1000]);
        for seed in 0..5 {
            let plan = shuffled_batches(&f, 128, seed, 0).unwrap();
            for batch in &plan.batches {
                let chronological = batch.windows(2).all(|w| f[w[0]].chrono_index < f[w[1]].chrono_index);
                assert!(!chronological);
            }
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("time-sequential".parse::<Strategy>().unwrap(), Strategy::TimeSequential);
        assert_eq!("shuffled".parse::<Strategy>().unwrap(), Strategy::Shuffled);
        assert!("random".parse::<Strategy>().is_err());
        assert_eq!(Strategy::TimeSequential.to_string(), "time-sequential");
    }
}
