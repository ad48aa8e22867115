use log::warn;

use super::{window_sessions, Frame, Normalizer, Recording, WindowSpec};
use crate::error::{Error, Result};

/// Session-disjoint partition of the recordings.
#[derive(Debug, Clone)]
pub struct SessionSplit {
    pub train: Vec<Recording>,
    pub validation: Vec<Recording>,
    pub test: Vec<Recording>,
}

/// Sorted by session id: the last session is the test set, the one before
/// it validation, the rest training. With only two sessions the second one
/// serves as both validation and test.
pub fn split_sessions(recordings: &[Recording]) -> Result<SessionSplit> {
    let mut sorted: Vec<Recording> = recordings.to_vec();
    sorted.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    match sorted.len() {
        0 | 1 => Err(Error::Data(format!(
            "need at least 2 sessions to split, found {}",
            sorted.len()
        ))),
        2 => {
            warn!("only two sessions: `{}` is used for validation and test", sorted[1].session_id);
            let test = vec![sorted.pop().unwrap()];
            Ok(SessionSplit {
                train: sorted,
                validation: test.clone(),
                test,
            })
        }
        _ => {
            let test = vec![sorted.pop().unwrap()];
            let validation = vec![sorted.pop().unwrap()];
            Ok(SessionSplit {
                train: sorted,
                validation,
                test,
            })
        }
    }
}

/// Normalized, windowed frames for every split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Frame>,
    pub validation: Vec<Frame>,
    pub test: Vec<Frame>,
    pub normalizer: Normalizer,
    pub classes: usize,
    pub channels: usize,
}

impl Dataset {
    /// Splits by session, fits the normalizer on training sessions only and
    /// windows each split. `classes` defaults to the largest label plus one.
    pub fn prepare(recordings: &[Recording], spec: &WindowSpec, classes: Option<usize>) -> Result<Self> {
        spec.validate()?;
        let max_label = recordings.iter().flat_map(|r| r.labels.iter()).max().copied();
        let Some(max_label) = max_label else {
            return Err(Error::Data("no labelled samples".into()));
        };
        let classes = classes.unwrap_or(max_label + 1);
        if max_label >= classes {
            return Err(Error::Data(format!(
                "label {max_label} out of range for {classes} classes"
            )));
        }
        let split = split_sessions(recordings)?;
        let normalizer = Normalizer::fit(&split.train)?;
        let frames = |recs: &[Recording]| -> Result<Vec<Frame>> {
            let normed = recs.iter().map(|r| normalizer.apply(r)).collect::<Result<Vec<_>>>()?;
            window_sessions(&normed, spec)
        };
        let train = frames(&split.train)?;
        let validation = frames(&split.validation)?;
        let test = frames(&split.test)?;
        for (name, f) in [("train", &train), ("validation", &validation), ("test", &test)] {
            if f.is_empty() {
                return Err(Error::Data(format!(
                    "{name} split has no frames (window {} longer than its sessions?)",
                    spec.window
                )));
            }
        }
        Ok(Self {
            channels: normalizer.mean.len(),
            train,
            validation,
            test,
            normalizer,
            classes,
        })
    }
}
