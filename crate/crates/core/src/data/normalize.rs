use serde::{Deserialize, Serialize};

use super::Recording;
use crate::error::{Error, Result};

/// Channels with a population std below this are left untouched.
const MIN_STD: f64 = 1e-8;

/// Per-channel population mean and standard deviation from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &[Recording]) -> Result<Self> {
        let Some(first) = train.iter().find(|r| !r.is_empty()) else {
            return Err(Error::Data("cannot fit a normalizer on zero samples".into()));
        };
        let d = first.channels;
        if let Some(bad) = train.iter().find(|r| r.channels != d) {
            return Err(Error::Data(format!(
                "session {} has {} channels, expected {d}",
                bad.session_id, bad.channels
            )));
        }
        let n: usize = train.iter().map(Recording::len).sum();
        let mut mean = vec![0.0; d];
        for rec in train {
            for row in rec.samples.chunks_exact(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for rec in train {
            for row in rec.samples.chunks_exact(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    fn is_constant(&self, ch: usize) -> bool {
        self.std[ch] < MIN_STD
    }

    pub fn apply(&self, rec: &Recording) -> Result<Recording> {
        self.map(rec, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, rec: &Recording) -> Result<Recording> {
        self.map(rec, |v, m, s| v * s + m)
    }

    fn map(&self, rec: &Recording, f: impl Fn(f64, f64, f64) -> f64) -> Result<Recording> {
        let d = self.mean.len();
        if rec.channels != d {
            return Err(Error::Data(format!(
                "session {} has {} channels, normalizer expects {d}",
                rec.session_id, rec.channels
            )));
        }
        let mut out = rec.clone();
        for row in out.samples.chunks_exact_mut(d) {
            for (ch, v) in row.iter_mut().enumerate() {
                if !self.is_constant(ch) {
                    *v = f(*v, self.mean[ch], self.std[ch]);
                }
            }
        }
        Ok(out)
    }
}
