//! Recordings, frames, CSV ingestion, normalization, segmentation and the
//! synthetic context-dependent stream generator.

mod csv_io;
mod normalize;
mod split;
mod synthetic;
mod window;

pub use csv_io::{load_recordings, write_recording_csv, LoadReport};
pub use normalize::Normalizer;
pub use split::{split_sessions, Dataset, SessionSplit};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticConfig, SyntheticManifest};
pub use window::{sliding_window, window_sessions, LabelRule, WindowSpec};

/// One continuous multichannel recording with a label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub session_id: String,
    /// Row-major `len × channels`.
    pub samples: Vec<f64>,
    pub channels: usize,
    pub labels: Vec<usize>,
    pub sample_rate: f64,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.channels..(i + 1) * self.channels]
    }
}

/// A window of `window × channels` samples: the unit the model classifies.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Row-major `window × channels`.
    pub data: Vec<f64>,
    pub window: usize,
    pub channels: usize,
    pub label: usize,
    pub chrono_index: usize,
    pub session_id: String,
    /// First sample of the window within its recording.
    pub start: usize,
}
