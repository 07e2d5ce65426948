//! The Conditional-UNet chain and the independent multi-head baseline.
//!
//! Both models index labels the way the dataset does: `logits[h]` and
//! `targets[h]` always refer to dataset label `h`, whatever position that
//! label occupies in the conditioning chain.

use serde::{Deserialize, Serialize};

use crate::conditioning::{
    default_embedding_dim, embed, generate_gumbel_max, generate_naive_max, relaxed_gumbel, merge, EmbeddingTable, GeneratorMode,
};
use crate::engine::kernels::{argmax_columns, one_hot_columns};
use crate::engine::{gumbel_sample, SeededRng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::unet::{build_unet, UNet1D, UNetConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub name: String,
    pub num_classes: usize,
    #[serde(default)]
    pub null_class: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl LabelSpec {
    pub fn new(name: &str, num_classes: usize) -> Self {
        Self {
            name: name.to_string(),
            num_classes,
            null_class: 0,
            class_names: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "label {} needs at least 2 classes, got {}",
                self.name, self.num_classes
            )));
        }
        if self.null_class >= self.num_classes {
            return Err(Error::Config(format!(
                "label {}: null class {} out of range",
                self.name, self.null_class
            )));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "label {}: {} class names for {} classes",
                self.name,
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class_{class}"))
    }
}

/// UNet hyperparameters shared by every stage (channel counts are derived).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetShape {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
}

impl Default for UNetShape {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            kernel_size: 3,
        }
    }
}

impl UNetShape {
    pub fn with_io(self, in_channels: usize, out_classes: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            out_classes,
            depth: self.depth,
            base_channels: self.base_channels,
            kernel_size: self.kernel_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Raw sensor channel count `K`.
    pub in_channels: usize,
    /// Label specs in dataset order.
    pub labels: Vec<LabelSpec>,
    /// Conditioning order as dataset label indices; the first is unconditioned.
    pub order: Vec<usize>,
    #[serde(default)]
    pub unet: UNetShape,
    /// Per-stage overrides, indexed by stage position.
    #[serde(default)]
    pub stage_unet: Vec<Option<UNetShape>>,
    /// Embedding widths per stage (all but the last); default `ceil(C/2)`.
    #[serde(default)]
    pub embedding_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub generator: GeneratorMode,
    #[serde(default)]
    pub teacher_forcing: bool,
    /// Sample with Gumbel noise at inference instead of taking the argmax.
    #[serde(default)]
    pub stochastic_inference: bool,
}

impl ChainConfig {
    /// Chain in dataset order with defaults everywhere else.
    pub fn new(in_channels: usize, labels: Vec<LabelSpec>) -> Self {
        let order = (0..labels.len()).collect();
        Self {
            in_channels,
            labels,
            order,
            unet: UNetShape::default(),
            stage_unet: Vec::new(),
            embedding_dims: None,
            generator: GeneratorMode::default(),
            teacher_forcing: false,
            stochastic_inference: false,
        }
    }

    /// Resolves label names to a conditioning order.
    pub fn order_by_names(&mut self, names: &[String]) -> Result<()> {
        let order = names
            .iter()
            .map(|n| {
                self.labels
                    .iter()
                    .position(|l| &l.name == n)
                    .ok_or_else(|| Error::Config(format!("unknown label {n:?} in chain order")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.order = order;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Config("a chain needs at least one label".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        for l in &self.labels {
            l.validate()?;
        }
        let mut seen = vec![false; self.labels.len()];
        if self.order.len() != self.labels.len() {
            return Err(Error::Config(format!(
                "chain order {:?} must list all {} labels",
                self.order,
                self.labels.len()
            )));
        }
        for &h in &self.order {
            if h >= seen.len() || std::mem::replace(&mut seen[h], true) {
                return Err(Error::Config(format!(
                    "chain order {:?} is not a permutation",
                    self.order
                )));
            }
        }
        if self.stage_unet.len() > self.labels.len() {
            return Err(Error::Config("more stage overrides than stages".into()));
        }
        if let Some(dims) = &self.embedding_dims {
            if dims.len() != self.labels.len() - 1 || dims.contains(&0) {
                return Err(Error::Config(format!(
                    "embedding_dims {dims:?} must give one positive width per conditioning stage"
                )));
            }
        }
        self.generator.validate()
    }

    pub fn stage_shape(&self, stage: usize) -> UNetShape {
        self.stage_unet.get(stage).copied().flatten().unwrap_or(self.unet)
    }

    pub fn embedding_dim(&self, stage: usize) -> usize {
        match &self.embedding_dims {
            Some(d) => d[stage],
            None => default_embedding_dim(self.labels[self.order[stage]].num_classes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
    /// Like `Train`, but Gumbel generators pass their soft relaxation
    /// forward instead of the hard one-hot. The whole chain is then smooth,
    /// which finite-difference checks need. Naive-max generators stay hard.
    Relaxed,
}

/// Per-call state for a forward pass.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub tau: f64,
    pub rng: Option<&'a mut SeededRng>,
    /// Ground-truth class ids per dataset label in `[B, T]` order; used for
    /// teacher forcing.
    pub targets: Option<&'a [Vec<usize>]>,
}

impl ForwardCtx<'_> {
    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            tau: 1.0,
            rng: None,
            targets: None,
        }
    }
}

/// Common surface of trainable dense multi-label models.
pub trait LabelModel {
    /// Label specs in dataset order.
    fn labels(&self) -> &[LabelSpec];
    fn in_channels(&self) -> usize;
    /// Input time lengths must be a multiple of this.
    fn time_multiple(&self) -> usize;
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Logits per dataset label, each `[B, C_h, T]`. `params` are the bound
    /// leaves in [`LabelModel::named_params`] order.
    fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], ctx: &mut ForwardCtx<'_>) -> Result<Vec<Var>>;

    /// Relaxation temperature used while training epoch `epoch`.
    fn tau(&self, _epoch: usize) -> f64 {
        1.0
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, k, t] = shape[..] else {
            return Err(Error::Dimension(format!("input must be [B, K, T], got {shape:?}")));
        };
        if k != self.in_channels() {
            return Err(Error::Dimension(format!(
                "model expects {} sensor channels, got {k}",
                self.in_channels()
            )));
        }
        let m = self.time_multiple();
        if t % m != 0 {
            return Err(Error::Geometry(format!(
                "time length {t} is not divisible by {m}; pad by {}",
                t.div_ceil(m) * m - t
            )));
        }
        Ok(())
    }
}

pub struct Stage {
    /// Dataset label index this stage predicts.
    pub label: usize,
    pub unet: UNet1D,
    pub embedding: Option<EmbeddingTable>,
}

/// Chain of UNets; stage `i` sees the sensors merged with embeddings of the
/// classes generated by stages `0..i`.
pub struct ConditionalUNet {
    config: ChainConfig,
    stages: Vec<Stage>,
}

impl ConditionalUNet {
    pub fn build(config: ChainConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.order.len());
        let mut in_channels = config.in_channels;
        let last = config.order.len() - 1;
        for (i, &h) in config.order.iter().enumerate() {
            let classes = config.labels[h].num_classes;
            let unet = build_unet(config.stage_shape(i).with_io(in_channels, classes), rng).map_err(|e| e.in_stage(i))?;
            let embedding = if i < last {
                let dim = config.embedding_dim(i);
                in_channels += dim;
                Some(EmbeddingTable::new(h, classes, dim, rng)?)
            } else {
                None
            };
            stages.push(Stage {
                label: h,
                unet,
                embedding,
            });
        }
        Ok(Self { config, stages })
    }

    pub fn from_stages(config: ChainConfig, stages: Vec<Stage>) -> Result<Self> {
        config.validate()?;
        let mut in_channels = config.in_channels;
        if stages.len() != config.order.len() {
            return Err(Error::Contract(format!(
                "{} stages for {} labels",
                stages.len(),
                config.order.len()
            )));
        }
        for (i, s) in stages.iter().enumerate() {
            let last = i + 1 == stages.len();
            let ok = s.label == config.order[i]
                && s.unet.config().in_channels == in_channels
                && s.unet.config().out_classes == config.labels[s.label].num_classes
                && s.embedding.is_some() != last;
            if !ok {
                return Err(Error::Contract(format!("stage {i} does not match the chain config")));
            }
            if let Some(e) = &s.embedding {
                in_channels += e.dim();
            }
        }
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }
}

impl LabelModel for ConditionalUNet {
    fn labels(&self) -> &[LabelSpec] {
        &self.config.labels
    }

    fn tau(&self, epoch: usize) -> f64 {
        self.config.generator.tau(epoch)
    }

    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn time_multiple(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.unet.config().time_multiple())
            .max()
            .unwrap_or(1)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (n, t) in s.unet.names().iter().zip(s.unet.params()) {
                out.push((format!("stage.{i}.unet.{n}"), t));
            }
            if let Some(e) = &s.embedding {
                out.push((format!("stage.{i}.embed.W"), &e.weights));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend(s.unet.params_mut().iter_mut());
            if let Some(e) = &mut s.embedding {
                out.push(&mut e.weights);
            }
        }
        out
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], ctx: &mut ForwardCtx<'_>) -> Result<Vec<Var>> {
        self.check_input(tape.value(x).shape())?;
        let (batch, _, t) = tape.value(x).dims3()?;
        let mut logits: Vec<Option<Var>> = vec![None; self.stages.len()];
        let mut embeddings = Vec::with_capacity(self.stages.len());
        let mut offset = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            let n = stage.unet.params().len();
            let input = merge(tape, x, &embeddings).map_err(|e| e.in_stage(i))?;
            let out = stage
                .unet
                .forward(tape, input, &params[offset..offset + n])
                .map_err(|e| e.in_stage(i))?;
            offset += n;
            logits[stage.label] = Some(out);
            let Some(table) = &stage.embedding else { continue };
            let table_var = params[offset];
            offset += 1;
            let classes = table.classes();
            let forced = match (ctx.mode, self.config.teacher_forcing, ctx.targets) {
                (Mode::Train | Mode::Relaxed, true, Some(targets)) => Some(&targets[stage.label]),
                _ => None,
            };
            let onehot = if let Some(ids) = forced {
                if ids.len() != batch * t {
                    return Err(Error::Dimension("teacher-forcing targets do not match input".into()).in_stage(i));
                }
                tape.constant(Tensor::new(vec![batch, classes, t], one_hot_columns(ids, batch, classes, t))?)
            } else {
                let sample = ctx.mode != Mode::Infer || self.config.stochastic_inference;
                match self.config.generator {
                    GeneratorMode::GumbelMax { relaxation, .. } if ctx.mode == Mode::Relaxed => {
                        let shape = tape.value(out).shape().to_vec();
                        let noise = match ctx.rng.as_deref_mut() {
                            Some(rng) => gumbel_sample(rng, &shape),
                            None => Tensor::zeros(&shape),
                        };
                        relaxed_gumbel(tape, out, ctx.tau, relaxation, &noise).map_err(|e| e.in_stage(i))?
                    }
                    GeneratorMode::GumbelMax { relaxation, .. } if sample => {
                        let rng = ctx.rng.as_deref_mut();
                        generate_gumbel_max(tape, out, ctx.tau, relaxation, rng).map_err(|e| e.in_stage(i))?
                    }
                    _ => generate_naive_max(tape, out).map_err(|e| e.in_stage(i))?,
                }
            };
            embeddings.push(embed(tape, onehot, table_var).map_err(|e| e.in_stage(i))?);
        }
        Ok(logits.into_iter().map(|l| l.expect("every label has a stage")).collect())
    }
}

/// Baseline: one UNet whose head emits `Σ C_h` channels, split per label,
/// with no conditioning between labels.
pub struct IndependentUNet {
    in_channels: usize,
    labels: Vec<LabelSpec>,
    unet: UNet1D,
}

impl IndependentUNet {
    pub fn build(in_channels: usize, labels: Vec<LabelSpec>, shape: UNetShape, rng: &mut SeededRng) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("baseline needs at least one label".into()));
        }
        for l in &labels {
            l.validate()?;
        }
        let total = labels.iter().map(|l| l.num_classes).sum();
        let unet = build_unet(shape.with_io(in_channels, total), rng)?;
        Ok(Self {
            in_channels,
            labels,
            unet,
        })
    }

    pub fn from_unet(in_channels: usize, labels: Vec<LabelSpec>, unet: UNet1D) -> Result<Self> {
        let total: usize = labels.iter().map(|l| l.num_classes).sum();
        if unet.config().in_channels != in_channels || unet.config().out_classes != total {
            return Err(Error::Contract("baseline UNet does not match its labels".into()));
        }
        Ok(Self {
            in_channels,
            labels,
            unet,
        })
    }

    pub fn unet(&self) -> &UNet1D {
        &self.unet
    }

    /// Channel range of each label in the shared head.
    pub fn head_split(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.labels
            .iter()
            .map(|l| {
                let r = start..start + l.num_classes;
                start = r.end;
                r
            })
            .collect()
    }
}

impl LabelModel for IndependentUNet {
    fn labels(&self) -> &[LabelSpec] {
        &self.labels
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn time_multiple(&self) -> usize {
        self.unet.config().time_multiple()
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.unet
            .names()
            .iter()
            .zip(self.unet.params())
            .map(|(n, t)| (format!("unet.{n}"), t))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.unet.params_mut().iter_mut().collect()
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Var>> {
        self.check_input(tape.value(x).shape())?;
        let out = self.unet.forward(tape, x, params)?;
        if self.labels.len() == 1 {
            return Ok(vec![out]);
        }
        self.head_split()
            .into_iter()
            .map(|r| tape.slice_channels(out, r.start, r.end))
            .collect()
    }
}

/// Either model kind, as stored in checkpoints.
pub enum Model {
    Chain(ConditionalUNet),
    Baseline(IndependentUNet),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Chain(_) => "conditional_unet",
            Model::Baseline(_) => "independent_unet",
        }
    }

    fn inner(&self) -> &dyn LabelModel {
        match self {
            Model::Chain(m) => m,
            Model::Baseline(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn LabelModel {
        match self {
            Model::Chain(m) => m,
            Model::Baseline(m) => m,
        }
    }
}

impl LabelModel for Model {
    fn labels(&self) -> &[LabelSpec] {
        self.inner().labels()
    }

    fn tau(&self, epoch: usize) -> f64 {
        self.inner().tau(epoch)
    }

    fn in_channels(&self) -> usize {
        self.inner().in_channels()
    }

    fn time_multiple(&self) -> usize {
        self.inner().time_multiple()
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.inner().named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner_mut().params_mut()
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], ctx: &mut ForwardCtx<'_>) -> Result<Vec<Var>> {
        self.inner().forward(tape, x, params, ctx)
    }
}

/// Runs a forward pass on a fresh tape and returns the logits per label.
pub fn forward_chain<M: LabelModel + ?Sized>(model: &M, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, xv, &params, ctx)?;
    Ok(logits.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// `Σ_h CE(logits_h, targets_h)`; every term is already a mean over `B·T`.
pub fn chain_loss(tape: &mut Tape, logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "{} logit tensors but {} target rows",
            logits.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (h, (&l, y)) in logits.iter().zip(targets).enumerate() {
        let term = tape.cross_entropy(l, y).map_err(|e| match e {
            Error::Label(msg) => Error::Label(format!("label {h}: {msg}")),
            other => other,
        })?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Class ids `[H][B·T]` (dataset label order, `[B, T]` within each) from
/// deterministic inference.
pub fn predict_dense<M: LabelModel + ?Sized>(model: &M, x: &Tensor) -> Result<Vec<Vec<usize>>> {
    let logits = forward_chain(model, x, &mut ForwardCtx::infer())?;
    Ok(logits.iter().map(argmax_logits).collect())
}

pub fn argmax_logits(logits: &Tensor) -> Vec<usize> {
    let (b, c, t) = logits.dims3().expect("rank-3 logits");
    argmax_columns(logits.data(), b, c, t)
}
