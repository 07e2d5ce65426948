//! Sequences, datasets, CSV ingestion, the synthetic generator, windowing,
//! normalization and splitting.

mod csvio;
mod synth;
mod window;

pub use csvio::{load_csv, read_meta, write_csv, write_meta, DatasetMeta};
pub use synth::{
    duration_samples, generate_synthetic, generate_with_events, GestureClass, GestureConfig, GestureEvent, CHANNEL_NAMES,
    SynthConfig, WalkConfig, WalkSegment,
};
pub use window::{
    cover_windows, split, stack_windows, window, windows_at, Normalizer, PadPolicy, Window,
};

pub use crate::model::LabelSpec;
use crate::error::{Error, Result};

/// One recording: `K` channels and `H` dense label rows over `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSequence {
    pub id: String,
    /// Channel-major `[K × T]`.
    pub x: Vec<f64>,
    /// `[H][T]` class ids.
    pub y: Vec<Vec<usize>>,
    pub sample_rate_hz: f64,
}

impl SampleSequence {
    pub fn len(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.x.len().checked_div(self.len()).unwrap_or(0)
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let t = self.len();
        &self.x[k * t..(k + 1) * t]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SampleSequence>,
    pub labels: Vec<LabelSpec>,
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    /// Set once a [`Normalizer`] has been applied.
    pub normalized: bool,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(SampleSequence::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.labels {
            l.validate()?;
        }
        let (k, h) = (self.channels(), self.num_labels());
        for s in &self.sequences {
            let t = s.len();
            if t == 0 {
                return Err(Error::Data(format!("sequence {} is empty", s.id)));
            }
            if s.y.len() != h || s.y.iter().any(|row| row.len() != t) {
                return Err(Error::Data(format!(
                    "sequence {} must carry {h} label rows of length {t}",
                    s.id
                )));
            }
            if s.x.len() != k * t {
                return Err(Error::Data(format!(
                    "sequence {} has {} values, expected {k}×{t}",
                    s.id,
                    s.x.len()
                )));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sequence {} contains non-finite values", s.id)));
            }
            for (row, spec) in s.y.iter().zip(&self.labels) {
                if let Some(bad) = row.iter().find(|&&c| c >= spec.num_classes) {
                    return Err(Error::Label(format!(
                        "sequence {}: class {bad} out of range for label {}",
                        s.id, spec.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same metadata, a subset of sequences.
    pub fn with_sequences(&self, sequences: Vec<SampleSequence>) -> Dataset {
        Dataset {
            sequences,
            labels: self.labels.clone(),
            channel_names: self.channel_names.clone(),
            sample_rate_hz: self.sample_rate_hz,
            normalized: self.normalized,
        }
    }

    /// Fraction of steps of each class for label `h`.
    pub fn class_prevalence(&self, h: usize) -> Vec<f64> {
        let mut counts = vec![0usize; self.labels[h].num_classes];
        for s in &self.sequences {
            for &c in &s.y[h] {
                counts[c] += 1;
            }
        }
        let total = self.total_steps().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }
}
