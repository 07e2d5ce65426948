//! Shuffled mini-batch Adam on the summed per-label loss.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{stack_windows, window, Dataset, PadPolicy, Window};
use crate::engine::{AdamConfig, AdamState, SeededRng, Tape};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{chain_loss, ForwardCtx, LabelModel, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: PadPolicy,
    pub adam: AdamConfig,
    /// Validation every this many epochs (and always after the last); 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            window: 64,
            stride: 32,
            pad: PadPolicy::Drop,
            adam: AdamConfig::default(),
            eval_every: 1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub tau: f64,
    /// `(accuracy, macro_f1)` per label; empty when validation was skipped.
    pub val: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub label_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// `epoch,loss,tau,val_acc_<label>,val_f1_<label>,...`; skipped
    /// validation leaves empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,tau");
        for n in &self.label_names {
            write!(out, ",val_acc_{n},val_f1_{n}").unwrap();
        }
        out.push('\n');
        for e in &self.epochs {
            write!(out, "{},{},{}", e.epoch, e.loss, e.tau).unwrap();
            if e.val.is_empty() {
                out.push_str(&",,".repeat(self.label_names.len()));
            } else {
                for (a, f) in &e.val {
                    write!(out, ",{a},{f}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn train<M: LabelModel>(
    model: &mut M,
    data: &Dataset,
    val: Option<&Dataset>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainHistory> {
    train_with(model, data, val, opts, seed, |_, _, _| Ok(()))
}

/// Like [`train`], calling `on_epoch(epoch, model, record)` after every epoch.
pub fn train_with<M, F>(
    model: &mut M,
    data: &Dataset,
    val: Option<&Dataset>,
    opts: &TrainOptions,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    M: LabelModel,
    F: FnMut(usize, &M, &EpochRecord) -> Result<()>,
{
    opts.validate()?;
    let m = model.time_multiple();
    if !opts.window.is_multiple_of(m) {
        return Err(Error::Geometry(format!(
            "window length {} is not divisible by {m}; use {}",
            opts.window,
            opts.window.div_ceil(m) * m
        )));
    }
    crate::metrics::check_compatible(model, data)?;
    let windows = window(data, opts.window, opts.stride, opts.pad)?;
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "no training windows of length {} (sequences too short?)",
            opts.window
        )));
    }

    let root = SeededRng::new(seed);
    let mut shuffle_rng = root.stream("shuffle");
    let mut gumbel_rng = root.stream("gumbel");
    let mut adam = AdamState::new(opts.adam, model.named_params().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    // fewer windows than a batch: train on all of them at once
    let batch = opts.batch_size.min(windows.len());
    let mut history = TrainHistory {
        label_names: model.labels().iter().map(|l| l.name.clone()).collect(),
        epochs: Vec::with_capacity(opts.epochs),
    };

    for epoch in 0..opts.epochs {
        let tau = model.tau(epoch);
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        // the trailing partial batch is dropped
        for chunk in order.chunks_exact(batch) {
            let refs: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let (x, y) = stack_windows(&refs)?;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let xv = tape.constant(x);
            let mut ctx = ForwardCtx {
                mode: Mode::Train,
                tau,
                rng: Some(&mut gumbel_rng),
                targets: Some(&y),
            };
            let logits = model.forward(&mut tape, xv, &params, &mut ctx)?;
            let loss = chain_loss(&mut tape, &logits, &y)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("loss became {value} at batch {batches}"),
                });
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = params.iter().map(|&p| grads.take(p)).collect();
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("non-finite gradient at batch {batches}"),
                });
            }
            adam.step(model.params_mut(), &g)?;
            total += value;
            batches += 1;
        }
        let last = epoch + 1 == opts.epochs;
        let val_metrics = match val {
            Some(v) if opts.eval_every > 0 && (last || (epoch + 1) % opts.eval_every == 0) => {
                let (report, _) = evaluate(model, v, opts.window, opts.stride)?;
                report.labels.iter().map(|l| (l.accuracy, l.macro_f1)).collect()
            }
            _ => Vec::new(),
        };
        let record = EpochRecord {
            epoch,
            loss: total / batches as f64,
            tau,
            val: val_metrics,
        };
        on_epoch(epoch, model, &record)?;
        history.epochs.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::{ChainConfig, ConditionalUNet, UNetShape};

    fn tiny() -> (Dataset, ConditionalUNet) {
        let ds = generate_synthetic(&SynthConfig {
            num_sequences: 2,
            duration_s: 10.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = ChainConfig::new(6, ds.labels.clone());
        cfg.unet = UNetShape {
            depth: 2,
            base_channels: 4,
            kernel_size: 3,
        };
        let m = ConditionalUNet::build(cfg, &mut SeededRng::new(1)).unwrap();
        (ds, m)
    }

    fn opts(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: 4,
            window: 32,
            stride: 16,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn epoch_contract() {
        let (ds, mut m) = tiny();
        assert!(matches!(
            train(&mut m, &ds, None, &opts(0), 0),
            Err(Error::Config(_))
        ));
        let h = train(&mut m, &ds, Some(&ds), &opts(1), 0).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.epochs[0].val.len(), 2);
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,loss,tau,val_acc_walk,val_f1_walk,val_acc_gesture,val_f1_gesture\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn deterministic_given_seed() {
        let (ds, mut a) = tiny();
        let (_, mut b) = tiny();
        let ha = train(&mut a, &ds, None, &opts(3), 9).unwrap();
        let hb = train(&mut b, &ds, None, &opts(3), 9).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.named_params(), b.named_params());
    }

    #[test]
    fn loss_drops_on_two_sequences() {
        let ds = generate_synthetic(&SynthConfig {
            num_sequences: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = ChainConfig::new(6, ds.labels.clone());
        cfg.unet = UNetShape {
            depth: 2,
            base_channels: 8,
            kernel_size: 3,
        };
        let mut m = ConditionalUNet::build(cfg, &mut SeededRng::new(1)).unwrap();
        let o = TrainOptions {
            epochs: 200,
            batch_size: 4,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainOptions::default()
        };
        let h = train(&mut m, &ds, None, &o, 0).unwrap();
        let first = h.epochs[0].loss;
        let last = h.final_loss().unwrap();
        assert!(last < 0.1 * first, "loss {first} -> {last}");
        // annealed temperature never increases
        assert!(h.epochs.windows(2).all(|w| w[1].tau <= w[0].tau));
    }

    #[test]
    fn geometry_and_data_errors() {
        let (ds, mut m) = tiny();
        let bad = TrainOptions {
            window: 30,
            ..opts(1)
        };
        assert!(matches!(train(&mut m, &ds, None, &bad, 0), Err(Error::Geometry(_))));
        let long = TrainOptions {
            window: 1024,
            ..opts(1)
        };
        assert!(matches!(train(&mut m, &ds, None, &long, 0), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_names_epoch() {
        let (ds, mut m) = tiny();
        m.params_mut()[0].data_mut()[0] = f64::NAN;
        match train(&mut m, &ds, None, &opts(2), 0) {
            Err(Error::Divergence { epoch: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
