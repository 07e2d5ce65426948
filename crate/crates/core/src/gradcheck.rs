//! Central finite-difference checks of every differentiable op and of a
//! tiny end-to-end two-label chain.
//!
//! Error metric: `max|a - n| / max(max|a|, max|n|, 1e-12)` over all input
//! elements of a case, where `a` is the analytic and `n` the numeric
//! gradient. Straight-through ops are compared against the smooth function
//! whose Jacobian they implement (see each case).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conditioning::{generate_gumbel_max, generate_naive_max, relaxed_gumbel, Relaxation};
use crate::engine::kernels::argmax_columns;
use crate::engine::{gumbel_sample, SeededRng, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{chain_loss, ChainConfig, ConditionalUNet, ForwardCtx, LabelModel, LabelSpec, Mode, UNetShape};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const CHAIN_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Eval = Box<dyn Fn(&[Tensor]) -> Result<f64>>;

/// One check: a scalar function of `inputs` with an analytic gradient.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub tolerance: f64,
    /// Builds the scalar on a tape whose first leaves are `inputs`.
    analytic: Build,
    /// Function differenced numerically; `None` means the value of `analytic`.
    numeric: Option<Eval>,
}

impl GradCase {
    pub fn new(
        name: &str,
        inputs: Vec<Tensor>,
        tolerance: f64,
        analytic: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            inputs,
            tolerance,
            analytic: Box::new(analytic),
            numeric: None,
        }
    }

    pub fn with_surrogate(mut self, f: impl Fn(&[Tensor]) -> Result<f64> + 'static) -> Self {
        self.numeric = Some(Box::new(f));
        self
    }

    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        if let Some(f) = &self.numeric {
            return f(inputs);
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.analytic)(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }

    pub fn check(&self) -> Result<CheckResult> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.analytic)(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v)).collect();

        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = self.inputs.clone();
        for i in 0..probe.len() {
            for j in 0..probe[i].numel() {
                let orig = probe[i].data()[j];
                probe[i].data_mut()[j] = orig + STEP;
                let up = self.value(&probe)?;
                probe[i].data_mut()[j] = orig - STEP;
                let down = self.value(&probe)?;
                probe[i].data_mut()[j] = orig;
                numeric.push((up - down) / (2.0 * STEP));
            }
        }
        Ok(CheckResult {
            name: self.name.clone(),
            elements: analytic.len(),
            max_rel_error: rel_error(&analytic, &numeric),
            tolerance: self.tolerance,
        })
    }
}

/// `max|a - n| / max(max|a|, max|n|, 1e-12)`.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    if a.iter().chain(n).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(n)).max(1e-12)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            writeln!(
                out,
                "{:<28} {:>6} elems  max rel err {:.3e}  (tol {:.0e})  {}",
                r.name,
                r.elements,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        out
    }
}

fn normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Values at least 0.1 away from zero so ReLU is differentiable at each.
fn off_kink(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let mut t = normal(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

/// Distinct values on a 0.1 grid, so a tiny perturbation never changes the
/// maximum of a pooling window.
fn distinct(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    rng.shuffle(&mut vals);
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn one_hot(rng: &mut SeededRng, b: usize, c: usize, t: usize) -> Tensor {
    let mut data = vec![0.0; b * c * t];
    for bi in 0..b {
        for ti in 0..t {
            data[(bi * c + rng.below(c)) * t + ti] = 1.0;
        }
    }
    Tensor::new(vec![b, c, t], data).expect("shape")
}

/// `Σ R ⊙ v` with fixed random weights, so every output element matters
/// with a different weight.
fn weighted(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(v, r)?;
    Ok(tape.sum(p))
}

fn weights_like(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    normal(rng, shape)
}

/// All per-op cases plus the end-to-end chain checks.
pub fn registry(seed: u64) -> Vec<GradCase> {
    let root = SeededRng::new(seed);
    let mut r = root.stream("gradcheck");
    let mut cases = Vec::new();
    let tol = OP_TOLERANCE;

    let (a, b, w) = (normal(&mut r, &[2, 3, 4]), normal(&mut r, &[2, 3, 4]), weights_like(&mut r, &[2, 3, 4]));
    let w1 = w.clone();
    cases.push(GradCase::new("add", vec![a.clone(), b.clone()], tol, move |t, v| {
        let o = t.add(v[0], v[1])?;
        weighted(t, o, &w1)
    }));
    let w1 = w.clone();
    cases.push(GradCase::new("mul", vec![a.clone(), b], tol, move |t, v| {
        let o = t.mul(v[0], v[1])?;
        weighted(t, o, &w1)
    }));
    let w1 = w.clone();
    cases.push(GradCase::new("scale", vec![a.clone()], tol, move |t, v| {
        let o = t.scale(v[0], -1.7);
        weighted(t, o, &w1)
    }));
    cases.push(GradCase::new("sum", vec![a], tol, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    }));
    let x = off_kink(&mut r, &[2, 3, 4]);
    cases.push(GradCase::new("relu", vec![x], tol, move |t, v| {
        let o = t.relu(v[0]);
        weighted(t, o, &w)
    }));

    // two geometries: same-padded stride 1 and unpadded stride 2
    let (x, wt, bias) = (normal(&mut r, &[2, 3, 9]), normal(&mut r, &[4, 3, 3]), normal(&mut r, &[4]));
    let (r1, r2) = (weights_like(&mut r, &[2, 4, 9]), weights_like(&mut r, &[2, 4, 4]));
    cases.push(GradCase::new("conv1d", vec![x, wt, bias], tol, move |t, v| {
        let o1 = t.conv1d(v[0], v[1], v[2], 1, 1)?;
        let o2 = t.conv1d(v[0], v[1], v[2], 2, 0)?;
        let l1 = weighted(t, o1, &r1)?;
        let l2 = weighted(t, o2, &r2)?;
        t.add(l1, l2)
    }));
    let (x, wt, bias) = (normal(&mut r, &[2, 3, 5]), normal(&mut r, &[3, 2, 2]), normal(&mut r, &[2]));
    let rw = weights_like(&mut r, &[2, 2, 10]);
    cases.push(GradCase::new("conv_transpose1d", vec![x, wt, bias], tol, move |t, v| {
        let o = t.conv_transpose1d(v[0], v[1], v[2], 2)?;
        weighted(t, o, &rw)
    }));
    let x = distinct(&mut r, &[2, 3, 8]);
    let rw = weights_like(&mut r, &[2, 3, 4]);
    cases.push(GradCase::new("maxpool1d", vec![x], tol, move |t, v| {
        let o = t.maxpool1d(v[0], 2)?;
        weighted(t, o, &rw)
    }));
    let (p, q) = (normal(&mut r, &[2, 2, 4]), normal(&mut r, &[2, 3, 4]));
    let rw = weights_like(&mut r, &[2, 5, 4]);
    cases.push(GradCase::new("concat_channels", vec![p, q], tol, move |t, v| {
        let o = t.concat_channels(&[v[0], v[1]])?;
        weighted(t, o, &rw)
    }));
    let x = normal(&mut r, &[2, 5, 4]);
    let rw = weights_like(&mut r, &[2, 3, 4]);
    cases.push(GradCase::new("slice_channels", vec![x], tol, move |t, v| {
        let o = t.slice_channels(v[0], 1, 4)?;
        weighted(t, o, &rw)
    }));
    let table = normal(&mut r, &[4, 3]);
    let oh = one_hot(&mut r, 2, 4, 5);
    let rw = weights_like(&mut r, &[2, 3, 5]);
    cases.push(GradCase::new("embedding_lookup", vec![table], tol, move |t, v| {
        let h = t.constant(oh.clone());
        let o = t.embedding(v[0], h)?;
        weighted(t, o, &rw)
    }));
    let logits = normal(&mut r, &[2, 4, 5]);
    let targets: Vec<usize> = (0..10).map(|_| r.below(4)).collect();
    cases.push(GradCase::new("cross_entropy_dense", vec![logits], tol, move |t, v| {
        t.cross_entropy(v[0], &targets)
    }));

    // naive max: the backward routes the gradient to the argmax logit only,
    // i.e. it is the Jacobian of q ↦ onehot(argmax q) ⊙ q at fixed argmax
    let q = normal(&mut r, &[2, 4, 5]);
    let rw = weights_like(&mut r, &[2, 4, 5]);
    let rw2 = rw.clone();
    cases.push(
        GradCase::new("naive_max_st", vec![q], tol, move |t, v| {
            let o = generate_naive_max(t, v[0])?;
            weighted(t, o, &rw)
        })
        .with_surrogate(move |inputs| {
            let q = &inputs[0];
            let (b, c, tt) = q.dims3()?;
            let ids = argmax_columns(q.data(), b, c, tt);
            let mut total = 0.0;
            for bi in 0..b {
                for ti in 0..tt {
                    let k = (bi * c + ids[bi * tt + ti]) * tt + ti;
                    total += rw2.data()[k] * q.data()[k];
                }
            }
            Ok(total)
        }),
    );

    // Gumbel max: the backward is the Jacobian of the relaxed sample with
    // the same noise, so the surrogate is the relaxed forward itself
    for (name, relaxation) in [
        ("gumbel_max_st_tanh", Relaxation::Tanh),
        ("gumbel_max_st_softmax", Relaxation::Softmax),
    ] {
        let q = normal(&mut r, &[2, 4, 5]);
        let rw = weights_like(&mut r, &[2, 4, 5]);
        let rw2 = rw.clone();
        let noise_seed = r.next_u64();
        let noise = gumbel_sample(&mut SeededRng::new(noise_seed), &[2, 4, 5]);
        let tau = 0.7;
        cases.push(
            GradCase::new(name, vec![q], tol, move |t, v| {
                let mut rng = SeededRng::new(noise_seed);
                let o = generate_gumbel_max(t, v[0], tau, relaxation, Some(&mut rng))?;
                weighted(t, o, &rw)
            })
            .with_surrogate(move |inputs| {
                let mut t = Tape::new();
                let q = t.constant(inputs[0].clone());
                let o = relaxed_gumbel(&mut t, q, tau, relaxation, &noise)?;
                let l = weighted(&mut t, o, &rw2)?;
                Ok(t.value(l).item())
            }),
        );
    }

    for relaxation in [Relaxation::Tanh, Relaxation::Softmax] {
        cases.push(chain_case(&root, relaxation).expect("tiny chain builds"));
    }
    cases
}

/// Two-label chain (D=1, base 2, T=8) run in relaxed mode; inputs are all
/// of its parameters.
fn chain_case(root: &SeededRng, relaxation: Relaxation) -> Result<GradCase> {
    let tag = match relaxation {
        Relaxation::Tanh => "tanh",
        Relaxation::Softmax => "softmax",
    };
    let mut r = root.stream(&format!("chain-{tag}"));
    let labels = vec![LabelSpec::new("a", 2), LabelSpec::new("b", 3)];
    let mut cfg = ChainConfig::new(3, labels);
    cfg.unet = UNetShape {
        depth: 1,
        base_channels: 2,
        kernel_size: 3,
    };
    if let crate::conditioning::GeneratorMode::GumbelMax { relaxation: rel, .. } = &mut cfg.generator {
        *rel = relaxation;
    }
    let model = ConditionalUNet::build(cfg, &mut r)?;
    // a generic point: the initializer's zero biases can leave dead
    // channels whose downstream pre-activations sit exactly on the ReLU kink
    let inputs: Vec<Tensor> = model
        .named_params()
        .into_iter()
        .map(|(_, t)| {
            let mut v = normal(&mut r, t.shape());
            v.data_mut().iter_mut().for_each(|x| *x *= 0.5);
            v
        })
        .collect();
    let x = normal(&mut r, &[2, 3, 8]);
    let targets: Vec<Vec<usize>> = vec![
        (0..16).map(|_| r.below(2)).collect(),
        (0..16).map(|_| r.below(3)).collect(),
    ];
    let noise_seed = r.next_u64();
    Ok(GradCase::new(
        &format!("end_to_end_chain_{tag}"),
        inputs,
        CHAIN_TOLERANCE,
        move |t, params| {
            let xv = t.constant(x.clone());
            let mut rng = SeededRng::new(noise_seed);
            let mut ctx = ForwardCtx {
                mode: Mode::Relaxed,
                tau: 0.8,
                rng: Some(&mut rng),
                targets: None,
            };
            let logits = model.forward(t, xv, params, &mut ctx)?;
            chain_loss(t, &logits, &targets)
        },
    ))
}

/// Negative control: an op whose backward is deliberately wrong
/// (`d/dx x² = 3x` instead of `2x`).
pub fn corrupted_case(seed: u64) -> GradCase {
    let mut r = SeededRng::new(seed).stream("corrupted");
    let x = normal(&mut r, &[2, 3, 4]);
    let rw = weights_like(&mut r, &[2, 3, 4]);
    GradCase::new("corrupted_square", vec![x], OP_TOLERANCE, move |t, v| {
        let src = t.value(v[0]);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|a| a * a).collect())?;
        let o = t.custom("corrupted_square", &[v[0]], value, |inputs, g| {
            vec![inputs[0].data().iter().zip(g).map(|(a, g)| 3.0 * a * g).collect()]
        });
        weighted(t, o, &rw)
    })
}

pub fn run(seed: u64, extra: Vec<GradCase>) -> Result<GradcheckReport> {
    let results = registry(seed)
        .into_iter()
        .chain(extra)
        .map(|c| c.check())
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { seed, results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::DIFFERENTIABLE_OPS;

    #[test]
    fn registry_covers_every_op() {
        let names: Vec<String> = registry(0).into_iter().map(|c| c.name).collect();
        for op in DIFFERENTIABLE_OPS {
            assert!(names.iter().any(|n| n == op), "{op} has no gradient check");
        }
        assert!(names.iter().any(|n| n.starts_with("end_to_end_chain")));
    }

    #[test]
    fn default_seed_passes() {
        let report = run(0, Vec::new()).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        for r in &report.results {
            if !r.name.starts_with("end_to_end") {
                assert!(r.max_rel_error < OP_TOLERANCE, "{}", r.name);
            }
        }
    }

    #[test]
    fn other_seeds_pass() {
        for seed in [1, 2, 3] {
            let report = run(seed, Vec::new()).unwrap();
            assert!(report.passed(), "seed {seed}\n{}", report.to_text());
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let report = run(0, vec![corrupted_case(0)]).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures(), vec!["corrupted_square"]);
    }

    #[test]
    fn rel_error_metric() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 1.0]), 0.5);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(rel_error(&[f64::NAN], &[0.0]), f64::INFINITY);
    }
}
