use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::engine::{SeededRng, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    /// Only full windows; a trailing remainder is discarded.
    #[default]
    Drop,
    /// Keep a final partial window, zero-padded (labels padded with the null class).
    ZeroPad,
}

/// Fixed-length slice of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub seq: usize,
    pub offset: usize,
    /// Number of real (unpadded) steps.
    pub valid: usize,
    /// Channel-major `[K × L]`.
    pub x: Vec<f64>,
    /// `[H][L]`.
    pub y: Vec<Vec<usize>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn cut(ds: &Dataset, seq: usize, offset: usize, length: usize) -> Window {
    let s = &ds.sequences[seq];
    let t_len = s.len();
    let valid = length.min(t_len.saturating_sub(offset));
    let k = ds.channels();
    let mut x = vec![0.0; k * length];
    for c in 0..k {
        x[c * length..c * length + valid].copy_from_slice(&s.channel(c)[offset..offset + valid]);
    }
    let y = s
        .y
        .iter()
        .zip(&ds.labels)
        .map(|(row, spec)| {
            let mut out = vec![spec.null_class; length];
            out[..valid].copy_from_slice(&row[offset..offset + valid]);
            out
        })
        .collect();
    Window {
        seq,
        offset,
        valid,
        x,
        y,
    }
}

fn check_geometry(length: usize, stride: usize) -> Result<()> {
    if length == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window length and stride must be positive, got {length} and {stride}"
        )));
    }
    Ok(())
}

/// Slides a window of `length` with `stride` over every sequence.
///
/// With [`PadPolicy::Drop`] a sequence shorter than `length` contributes
/// nothing; callers should treat an empty result as a warning.
pub fn window(ds: &Dataset, length: usize, stride: usize, pad: PadPolicy) -> Result<Vec<Window>> {
    check_geometry(length, stride)?;
    let mut out = Vec::new();
    for (i, s) in ds.sequences.iter().enumerate() {
        let t_len = s.len();
        let mut off = 0;
        while off + length <= t_len {
            out.push(cut(ds, i, off, length));
            off += stride;
        }
        if pad == PadPolicy::ZeroPad && off < t_len && (off == 0 || off - stride + length < t_len) {
            out.push(cut(ds, i, off, length));
        }
    }
    Ok(out)
}

/// Window offsets that cover a sequence of `t_len` steps completely: the
/// regular stride grid plus, if needed, one window flush with the end.
/// A sequence shorter than `length` gets a single padded window at 0.
/// A stride longer than the window is clamped so no step is skipped.
pub fn cover_windows(t_len: usize, length: usize, stride: usize) -> Result<Vec<usize>> {
    check_geometry(length, stride)?;
    let stride = stride.min(length);
    if t_len <= length {
        return Ok(vec![0]);
    }
    let mut offs: Vec<usize> = (0..=t_len - length).step_by(stride).collect();
    if *offs.last().expect("non-empty") + length < t_len {
        offs.push(t_len - length);
    }
    Ok(offs)
}

/// Cuts windows at explicit offsets of sequence `seq`.
pub fn windows_at(ds: &Dataset, seq: usize, offsets: &[usize], length: usize) -> Vec<Window> {
    offsets.iter().map(|&o| cut(ds, seq, o, length)).collect()
}

/// Batches windows into `[B, K, L]` inputs and per-label targets of length `B·L`.
pub fn stack_windows(windows: &[&Window]) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let (l, h) = (first.len(), first.y.len());
    let k = first.x.len() / l.max(1);
    let mut x = Vec::with_capacity(windows.len() * k * l);
    let mut y = vec![Vec::with_capacity(windows.len() * l); h];
    for w in windows {
        if w.len() != l || w.x.len() != k * l || w.y.len() != h {
            return Err(Error::Dimension("windows in a batch must share their geometry".into()));
        }
        x.extend_from_slice(&w.x);
        for (dst, src) in y.iter_mut().zip(&w.y) {
            dst.extend_from_slice(src);
        }
    }
    Ok((Tensor::new(vec![windows.len(), k, l], x)?, y))
}

/// Per-channel standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation of each channel. A constant
    /// channel gets a unit scale so it maps to zero.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.normalized {
            return Err(Error::Contract("dataset is already normalized".into()));
        }
        let n = ds.total_steps();
        if n == 0 {
            return Err(Error::Data("cannot fit a normalizer on an empty dataset".into()));
        }
        let k = ds.channels();
        let mut mean = vec![0.0; k];
        for s in &ds.sequences {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += s.channel(c).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; k];
        for s in &ds.sequences {
            for c in 0..k {
                var[c] += s.channel(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        if ds.normalized {
            return Err(Error::Contract("dataset is already normalized".into()));
        }
        if ds.channels() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalizer has {} channels, dataset has {}",
                self.mean.len(),
                ds.channels()
            )));
        }
        for s in &mut ds.sequences {
            let t = s.len();
            for (c, chunk) in s.x.chunks_mut(t).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
            }
        }
        ds.normalized = true;
        Ok(())
    }
}

/// Splits whole sequences into train and held-out parts. Each side keeps at
/// least one sequence; the original order is preserved within each side.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1), got {train_frac}")));
    }
    let n = ds.sequences.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 sequences to split, have {n}")));
    }
    let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).stream("split").shuffle(&mut idx);
    let mut train_idx = idx[..n_train].to_vec();
    let mut test_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |ids: &[usize]| ds.with_sequences(ids.iter().map(|&i| ds.sequences[i].clone()).collect());
    Ok((pick(&train_idx), pick(&test_idx)))
}
