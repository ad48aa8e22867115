use serde::{Deserialize, Serialize};

use super::{Frame, Recording};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// Most frequent label; ties go to the tied label seen last in the window.
    #[default]
    Majority,
    LastSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub window: usize,
    pub step: usize,
    pub label_rule: LabelRule,
}

impl Default for WindowSpec {
    fn default() -> Self {
        // 24-sample windows with 50% overlap.
        Self {
            window: 24,
            step: 12,
            label_rule: LabelRule::Majority,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.step == 0 || self.step > self.window {
            return Err(Error::Config(format!(
                "window step must satisfy 1 <= step <= window, got step {} window {}",
                self.step, self.window
            )));
        }
        Ok(())
    }

    /// `floor((len - window) / step) + 1`, or 0 when the recording is too short.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.step + 1
        }
    }
}

fn frame_label(labels: &[usize], rule: LabelRule) -> usize {
    let last = *labels.last().expect("non-empty window");
    match rule {
        LabelRule::LastSample => last,
        LabelRule::Majority => {
            let max_label = labels.iter().copied().max().unwrap_or(0);
            let mut counts = vec![0usize; max_label + 1];
            let mut last_seen = vec![0usize; max_label + 1];
            for (i, &l) in labels.iter().enumerate() {
                counts[l] += 1;
                last_seen[l] = i;
            }
            (0..=max_label)
                .filter(|&l| counts[l] > 0)
                .max_by_key(|&l| (counts[l], last_seen[l]))
                .unwrap_or(last)
        }
    }
}

/// Segments one recording. Frames get local chronological indices `0..n`;
/// use [`window_sessions`] for indices that are global over several sessions.
pub fn sliding_window(recording: &Recording, spec: &WindowSpec) -> Result<Vec<Frame>> {
    spec.validate()?;
    let len = recording.len();
    if len < spec.window {
        log::warn!(
            "session {}: {} samples is shorter than the {}-sample window; no frames",
            recording.session_id,
            len,
            spec.window
        );
        return Ok(Vec::new());
    }
    let d = recording.channels;
    let frames = (0..spec.frame_count(len))
        .map(|i| {
            let start = i * spec.step;
            let end = start + spec.window;
            Frame {
                data: recording.samples[start * d..end * d].to_vec(),
                window: spec.window,
                channels: d,
                label: frame_label(&recording.labels[start..end], spec.label_rule),
                chrono_index: i,
                session_id: recording.session_id.clone(),
                start,
            }
        })
        .collect();
    Ok(frames)
}

/// Segments every recording and numbers frames chronologically across
/// sessions, ordered by (session id, window start).
pub fn window_sessions(recordings: &[Recording], spec: &WindowSpec) -> Result<Vec<Frame>> {
    let mut order: Vec<&Recording> = recordings.iter().collect();
    order.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    let mut frames = Vec::new();
    for rec in order {
        let base = frames.len();
        for mut f in sliding_window(rec, spec)? {
            f.chrono_index += base;
            frames.push(f);
        }
    }
    Ok(frames)
}
