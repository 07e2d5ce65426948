//! Turns a stage's logits into a conditioning signal for later stages:
//! generate a hard class per time step, embed it, and merge the embedding
//! with the raw sensor channels.

use serde::{Deserialize, Serialize};

use crate::engine::kernels::{argmax_columns, one_hot_columns, softmax_columns};
use crate::engine::{gumbel_sample, SeededRng, StraightThrough, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Continuous relaxation whose Jacobian carries the straight-through
/// gradient of the Gumbel-Max generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// `tanh((q + g) / tau)`, applied element-wise.
    #[default]
    Tanh,
    /// `softmax((q + g) / tau)` over classes; better-conditioned gradients.
    Softmax,
}

/// `tau(e) = max(tau_min, tau0 · exp(−decay_rate · e))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub decay_rate: f64,
    pub tau_min: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            decay_rate: 0.01,
            tau_min: 0.5,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.tau0 > 0.0 && self.tau_min > 0.0 && self.decay_rate >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid temperature schedule {self:?}")))
        }
    }

    pub fn anneal(&self, epoch: usize) -> f64 {
        (self.tau0 * (-self.decay_rate * epoch as f64).exp()).max(self.tau_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorMode {
    NaiveMax,
    GumbelMax {
        #[serde(default)]
        schedule: TemperatureSchedule,
        #[serde(default)]
        relaxation: Relaxation,
    },
}

impl Default for GeneratorMode {
    fn default() -> Self {
        GeneratorMode::GumbelMax {
            schedule: TemperatureSchedule::default(),
            relaxation: Relaxation::Tanh,
        }
    }
}

impl GeneratorMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorMode::NaiveMax => Ok(()),
            GeneratorMode::GumbelMax { schedule, .. } => schedule.validate(),
        }
    }

    /// Temperature at `epoch` (1.0 for Naive-Max, where it is unused).
    pub fn tau(&self, epoch: usize) -> f64 {
        match self {
            GeneratorMode::NaiveMax => 1.0,
            GeneratorMode::GumbelMax { schedule, .. } => schedule.anneal(epoch),
        }
    }
}

/// Default embedding width for a label with `classes` classes: `ceil(C / 2)`.
pub fn default_embedding_dim(classes: usize) -> usize {
    classes.div_ceil(2).max(1)
}

/// Learnable `[C, E]` table for one label of the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub label: usize,
    pub weights: Tensor,
}

impl EmbeddingTable {
    /// Standard-normal initialization.
    pub fn new(label: usize, classes: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::Config(format!(
                "embedding for label {label} needs positive size, got [{classes}, {dim}]"
            )));
        }
        let data = (0..classes * dim).map(|_| rng.normal()).collect();
        Ok(Self {
            label,
            weights: Tensor::new(vec![classes, dim], data)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

fn one_hot_tensor(ids: &[usize], batch: usize, classes: usize, t: usize) -> Tensor {
    Tensor::new(vec![batch, classes, t], one_hot_columns(ids, batch, classes, t)).expect("consistent dims")
}

/// Hard argmax per `(b, t)` column (lowest class on ties). The backward pass
/// routes the upstream gradient of the selected entry to its logit.
pub fn generate_naive_max(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (batch, classes, t) = tape.value(logits).dims3()?;
    let ids = argmax_columns(tape.value(logits).data(), batch, classes, t);
    let hard = one_hot_tensor(&ids, batch, classes, t);
    tape.straight_through(logits, hard, StraightThrough::Select { ids })
}

/// Gumbel-Max sample per column with a straight-through relaxation.
///
/// Forward: `z = (q + g) / tau`, emit the one-hot of `argmax z`, which is
/// also the argmax of the relaxed `act(z)` since both relaxations preserve
/// order. Backward: the Jacobian of `act(z)` with respect to `q`.
///
/// `rng = None` forces the noise to zero.
pub fn generate_gumbel_max(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    relaxation: Relaxation,
    rng: Option<&mut SeededRng>,
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let noise = match rng {
        Some(rng) => gumbel_sample(rng, &shape),
        None => Tensor::zeros(&shape),
    };
    gumbel_node(tape, logits, tau, relaxation, &noise, true)
}

/// The relaxed output `act((q + g) / tau)` with the same backward rule as
/// [`generate_gumbel_max`]; a smooth surrogate for gradient checks.
pub fn relaxed_gumbel(tape: &mut Tape, logits: Var, tau: f64, relaxation: Relaxation, noise: &Tensor) -> Result<Var> {
    gumbel_node(tape, logits, tau, relaxation, noise, false)
}

fn gumbel_node(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    relaxation: Relaxation,
    noise: &Tensor,
    hard: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (batch, classes, t) = tape.value(logits).dims3()?;
    if noise.shape() != tape.value(logits).shape() {
        return Err(Error::Dimension("gumbel noise shape differs from logits".into()));
    }
    let z: Vec<f64> = tape
        .value(logits)
        .data()
        .iter()
        .zip(noise.data())
        .map(|(q, g)| (q + g) / tau)
        .collect();
    let relaxed = match relaxation {
        Relaxation::Tanh => z.iter().map(|v| v.tanh()).collect(),
        Relaxation::Softmax => softmax_columns(&z, batch, classes, t),
    };
    let forward = if hard {
        let ids = argmax_columns(&z, batch, classes, t);
        one_hot_tensor(&ids, batch, classes, t)
    } else {
        Tensor::new(vec![batch, classes, t], relaxed.clone())?
    };
    let rule = match relaxation {
        Relaxation::Tanh => StraightThrough::Tanh { relaxed, tau },
        Relaxation::Softmax => StraightThrough::Softmax { relaxed, tau },
    };
    tape.straight_through(logits, forward, rule)
}

/// `[B, C, T]` one-hot → `[B, E, T]` embedding through `table` (a bound `[C, E]` leaf).
pub fn embed(tape: &mut Tape, onehot: Var, table: Var) -> Result<Var> {
    tape.embedding(table, onehot)
}

/// Channel concatenation: raw channels first, then embeddings in chain order.
pub fn merge(tape: &mut Tape, x: Var, embeddings: &[Var]) -> Result<Var> {
    let (b, _, t) = tape.value(x).dims3()?;
    for e in embeddings {
        let (eb, _, et) = tape.value(*e).dims3()?;
        if eb != b || et != t {
            return Err(Error::Dimension(format!(
                "merge: embedding {:?} does not match input batch {b} / time {t}",
                tape.value(*e).shape()
            )));
        }
    }
    let mut parts = Vec::with_capacity(1 + embeddings.len());
    parts.push(x);
    parts.extend_from_slice(embeddings);
    tape.concat_channels(&parts)
}
