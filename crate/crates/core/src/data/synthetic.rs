//! Synthetic multichannel activity streams.
//!
//! A hidden activity sequence follows a first-order Markov chain with
//! uniformly distributed dwell times. Every activity emits a sinusoid plus
//! offset plus Gaussian noise per channel.
//!
//! With `context` on, the top `2 * pairs` class ids form ambiguous pairs
//! whose two members emit exactly the same signal. Which member of a pair
//! is entered is fixed by the parity of the previous (context) activity, so
//! a single frame of a pair member is indistinguishable from its twin and
//! only the surrounding frames tell them apart. Leaving a pair member goes
//! to a uniformly drawn context class of the same parity as the one before
//! it, so the pair is framed by same-parity context on both sides, while a
//! context activity followed by another context activity always flips
//! parity, and the context closing a pair segment never opens another. Across
//! a long stretch both parities are therefore about equally common and only
//! the neighbours of a pair segment identify its member.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_recording_csv, Recording};
use crate::error::{Error, Result};
use crate::seed::{rng_for, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub channels: usize,
    pub sessions: usize,
    /// Samples per session.
    pub session_length: usize,
    /// Samples per dwell unit; normally the frame step.
    pub dwell_unit: usize,
    /// Dwell time is uniform on `[min_dwell, max_dwell]` units.
    pub min_dwell: usize,
    pub max_dwell: usize,
    /// Probability that a context activity is followed by a pair member.
    pub pair_probability: f64,
    pub context: bool,
    pub noise: f64,
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            channels: 3,
            sessions: 6,
            session_length: 6400,
            dwell_unit: 8,
            min_dwell: 3,
            max_dwell: 6,
            pair_probability: 0.9,
            context: true,
            noise: 0.5,
            sample_rate: 32.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("synthetic.classes must be >= 2, got {}", self.classes));
        }
        if self.context && self.classes < 4 {
            return fail(format!(
                "context mode needs >= 4 classes (two context classes and one pair), got {}",
                self.classes
            ));
        }
        if self.channels == 0 || self.sessions == 0 || self.session_length == 0 || self.dwell_unit == 0 {
            return fail("synthetic channels, sessions, session_length and dwell_unit must be positive".into());
        }
        if self.min_dwell == 0 || self.max_dwell < self.min_dwell {
            return fail(format!(
                "dwell range [{}, {}] is empty",
                self.min_dwell, self.max_dwell
            ));
        }
        if (self.min_dwell + self.max_dwell) as f64 / 2.0 < 3.0 {
            return fail("mean dwell must be at least 3 windows".into());
        }
        if !(0.0..=1.0).contains(&self.pair_probability) {
            return fail(format!("pair_probability {} outside [0, 1]", self.pair_probability));
        }
        if !(self.noise >= 0.0) || !(self.sample_rate > 0.0) {
            return fail("noise must be >= 0 and sample_rate > 0".into());
        }
        Ok(())
    }

    /// Number of ambiguous pairs in context mode.
    pub fn pairs(&self) -> usize {
        if self.context {
            ((self.classes - 2) / 4).max(1)
        } else {
            0
        }
    }

    fn context_classes(&self) -> usize {
        self.classes - 2 * self.pairs()
    }

    /// Ambiguous class pairs `(a, b)`: identical emissions.
    pub fn ambiguous_pairs(&self) -> Vec<(usize, usize)> {
        let base = self.context_classes();
        (0..self.pairs()).map(|j| (base + 2 * j, base + 2 * j + 1)).collect()
    }

    /// Signature shared by all classes that emit identically.
    fn emission_id(&self, class: usize) -> usize {
        let base = self.context_classes();
        if class < base {
            class
        } else {
            base + (class - base) / 2
        }
    }

    /// `last_context` is the most recent context activity before `current`.
    fn next_activity<R: Rng>(&self, current: usize, previous: usize, last_context: usize, rng: &mut R) -> usize {
        let uniform_other = |n: usize, cur: usize, rng: &mut R| {
            let k = rng.random_range(0..n - 1);
            if k >= cur {
                k + 1
            } else {
                k
            }
        };
        if !self.context {
            return uniform_other(self.classes, current, rng);
        }
        let ctx = self.context_classes();
        if current >= ctx {
            let parity = last_context % 2;
            let same: Vec<usize> = (0..ctx).filter(|c| c % 2 == parity).collect();
            return same[rng.random_range(0..same.len())];
        }
        // The context closing a pair segment never opens another one.
        let closing = previous >= ctx;
        if !closing && rng.random::<f64>() < self.pair_probability {
            let (a, b) = self.ambiguous_pairs()[rng.random_range(0..self.pairs())];
            if current % 2 == 0 {
                a
            } else {
                b
            }
        } else {
            let flipped: Vec<usize> = (0..ctx).filter(|c| c % 2 != current % 2).collect();
            flipped[rng.random_range(0..flipped.len())]
        }
    }
}

#[derive(Debug, Clone)]
struct Signature {
    freq: f64,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
    offset: Vec<f64>,
}

fn signatures(cfg: &SyntheticConfig) -> Vec<Signature> {
    let mut rng = rng_for(cfg.seed, streams::SIGNATURE);
    let n = cfg.context_classes() + cfg.pairs();
    (0..n)
        .map(|e| Signature {
            freq: 0.5 + 0.75 * e as f64,
            amplitude: (0..cfg.channels).map(|_| rng.random_range(0.5..1.5)).collect(),
            phase: (0..cfg.channels).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
            offset: (0..cfg.channels).map(|_| rng.random_range(-2.0..2.0)).collect(),
        })
        .collect()
}

pub fn session_id(index: usize) -> String {
    format!("session_{index:02}")
}

/// Deterministic per seed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let sigs = signatures(cfg);
    let d = cfg.channels;
    let mut out = Vec::with_capacity(cfg.sessions);
    for s in 0..cfg.sessions {
        let mut rng = rng_for(cfg.seed, streams::SESSION + s as u64);
        let mut labels = Vec::with_capacity(cfg.session_length);
        let first_pair = cfg.classes - 2 * cfg.pairs();
        let mut activity = rng.random_range(0..first_pair);
        let mut last_context = activity;
        let mut previous = activity;
        while labels.len() < cfg.session_length {
            let dwell = rng.random_range(cfg.min_dwell..=cfg.max_dwell) * cfg.dwell_unit;
            let n = dwell.min(cfg.session_length - labels.len());
            labels.extend(std::iter::repeat_n(activity, n));
            if activity < first_pair {
                last_context = activity;
            }
            let next = cfg.next_activity(activity, previous, last_context, &mut rng);
            previous = activity;
            activity = next;
        }
        let mut samples = Vec::with_capacity(cfg.session_length * d);
        for (i, &label) in labels.iter().enumerate() {
            let sig = &sigs[cfg.emission_id(label)];
            let t = i as f64 / cfg.sample_rate;
            for ch in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let clean = sig.offset[ch] + sig.amplitude[ch] * (2.0 * PI * sig.freq * t + sig.phase[ch]).sin();
                samples.push(clean + cfg.noise * noise);
            }
        }
        out.push(Recording {
            session_id: session_id(s),
            samples,
            channels: d,
            labels,
            sample_rate: cfg.sample_rate,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub seed: u64,
    pub classes: usize,
    pub sessions: Vec<String>,
    pub ambiguous_pairs: Vec<(usize, usize)>,
    pub config: SyntheticConfig,
}

impl SyntheticManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generates and writes one CSV per session plus `manifest.json`.
pub fn write_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<SyntheticManifest> {
    let recordings = generate_synthetic(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for rec in &recordings {
        write_recording_csv(rec, &out_dir.join(format!("{}.csv", rec.session_id)))?;
    }
    let manifest = SyntheticManifest {
        seed: cfg.seed,
        classes: cfg.classes,
        sessions: recordings.iter().map(|r| r.session_id.clone()).collect(),
        ambiguous_pairs: cfg.ambiguous_pairs(),
        config: cfg.clone(),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
