//! 1-D UNet for dense per-time-step classification.
//!
//! Encoder level `ℓ` runs two `same`-padded convolutions with `base·2^ℓ`
//! channels followed by a max-pool of 2. The bottleneck doubles the width
//! once more. Each decoder level upsamples with a stride-2 transposed
//! convolution, concatenates the matching encoder activation, and runs two
//! more convolutions. A 1×1 convolution maps to class logits.

use serde::{Deserialize, Serialize};

use crate::engine::{SeededRng, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_classes: usize,
    /// Number of pooling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("unet depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_classes == 0 {
            return Err(Error::Config(format!(
                "unet channel counts must be positive: {self:?}"
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "unet kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Time lengths must be a multiple of this.
    pub fn time_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut out = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            out.push((format!("{name}.w"), vec![c_out, c_in, k]));
            out.push((format!("{name}.b"), vec![c_out]));
        };
        let mut c_prev = self.in_channels;
        for l in 0..self.depth {
            let c = self.width(l);
            conv(format!("enc.{l}.conv1"), c, c_prev, k);
            conv(format!("enc.{l}.conv2"), c, c, k);
            c_prev = c;
        }
        let cb = self.width(self.depth);
        conv("bottleneck.conv1".into(), cb, c_prev, k);
        conv("bottleneck.conv2".into(), cb, cb, k);
        for l in (0..self.depth).rev() {
            let c = self.width(l);
            let c_up = self.width(l + 1);
            // transposed conv weights are [Cin, Cout, k]
            out.push((format!("dec.{l}.up.w"), vec![c_up, c, 2]));
            out.push((format!("dec.{l}.up.b"), vec![c]));
            let mut conv = |name: String, c_out: usize, c_in: usize| {
                out.push((format!("{name}.w"), vec![c_out, c_in, k]));
                out.push((format!("{name}.b"), vec![c_out]));
            };
            conv(format!("dec.{l}.conv1"), c, 2 * c);
            conv(format!("dec.{l}.conv2"), c, c);
        }
        out.push(("head.w".into(), vec![self.out_classes, self.base_channels, 1]));
        out.push(("head.b".into(), vec![self.out_classes]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet1D {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Builds a UNet with fan-in scaled uniform weights
/// (`bound = sqrt(6 / fan_in)`) and zero biases.
pub fn build_unet(config: UNetConfig, rng: &mut SeededRng) -> Result<UNet1D> {
    config.validate()?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in config.parameter_layout() {
        let tensor = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            // inputs feeding one output: Cin·k for conv, Cin for a k = stride transposed conv
            let fan_in = if name.contains(".up.") {
                shape[0]
            } else {
                shape[1] * shape[2]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::new(shape, data)?
        };
        names.push(name);
        params.push(tensor);
    }
    Ok(UNet1D {
        config,
        names,
        params,
    })
}

impl UNet1D {
    /// Reassembles a model from stored tensors, checking names and shapes.
    pub fn from_parts(config: UNetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != named.len() {
            return Err(Error::Contract(format!(
                "unet expects {} parameters, got {}",
                layout.len(),
                named.len()
            )));
        }
        for ((want_name, want_shape), (name, t)) in layout.iter().zip(&named) {
            if want_name != name || want_shape.as_slice() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Pushes every parameter onto the tape as a leaf, in storage order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, t] = shape[..] else {
            return Err(Error::Dimension(format!(
                "unet input must be [B, C, T], got {shape:?}"
            )));
        };
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "unet expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.time_multiple();
        if t % m != 0 {
            let padded = t.div_ceil(m) * m;
            return Err(Error::Geometry(format!(
                "time length {t} is not divisible by 2^{} = {m}; pad by {} to {padded}",
                self.config.depth,
                padded - t
            )));
        }
        Ok(())
    }

    /// Logits `[B, out_classes, T]` for input `[B, in_channels, T]`.
    /// `params` are this network's bound leaves (see [`UNet1D::bind`]).
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        self.forward_with(tape, x, params, true)
    }

    /// Forward pass; with `skips = false` every skip tensor is replaced by
    /// zeros of the same shape.
    pub fn forward_with(&self, tape: &mut Tape, x: Var, params: &[Var], skips: bool) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "unet bound with {} parameters, expected {}",
                params.len(),
                self.params.len()
            )));
        }
        let pad = (self.config.kernel_size - 1) / 2;
        let mut p = params.iter().copied();
        let conv_relu = |tape: &mut Tape, h: Var, p: &mut dyn Iterator<Item = Var>| -> Result<Var> {
            let (w, b) = (p.next().expect("layout"), p.next().expect("layout"));
            let y = tape.conv1d(h, w, b, 1, pad)?;
            Ok(tape.relu(y))
        };

        let mut h = x;
        let mut skip_acts = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            h = conv_relu(tape, h, &mut p)?;
            h = conv_relu(tape, h, &mut p)?;
            skip_acts.push(h);
            h = tape.maxpool1d(h, 2)?;
        }
        h = conv_relu(tape, h, &mut p)?;
        h = conv_relu(tape, h, &mut p)?;
        for skip in skip_acts.into_iter().rev() {
            let (w, b) = (p.next().expect("layout"), p.next().expect("layout"));
            let up = tape.conv_transpose1d(h, w, b, 2)?;
            let skip = if skips {
                skip
            } else {
                tape.constant(Tensor::zeros(tape.value(skip).shape()))
            };
            h = tape.concat_channels(&[up, skip])?;
            h = conv_relu(tape, h, &mut p)?;
            h = conv_relu(tape, h, &mut p)?;
        }
        let (w, b) = (p.next().expect("layout"), p.next().expect("layout"));
        tape.conv1d(h, w, b, 1, 0)
    }

    /// Convenience forward on a fresh tape; returns the logits tensor.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, &params)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::AdamConfig;
    use crate::engine::AdamState;

    fn cfg(in_channels: usize, out_classes: usize, depth: usize, base: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            out_classes,
            depth,
            base_channels: base,
            kernel_size: 3,
        }
    }

    fn random_input(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn head_shape() {
        let net = build_unet(cfg(6, 9, 3, 16), &mut SeededRng::new(0)).unwrap();
        let (name, head) = net.names().iter().zip(net.params()).rev().nth(1).unwrap();
        assert_eq!(name, "head.w");
        assert_eq!(head.shape(), &[9, 16, 1]);
    }

    #[test]
    fn deterministic_init() {
        let a = build_unet(cfg(6, 9, 2, 4), &mut SeededRng::new(11)).unwrap();
        let b = build_unet(cfg(6, 9, 2, 4), &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // in=6, base=8, D=2, k=3, classes=2, counted layer by layer:
        let enc0 = (8 * 6 * 3 + 8) + (8 * 8 * 3 + 8);
        let enc1 = (16 * 8 * 3 + 16) + (16 * 16 * 3 + 16);
        let bottleneck = (32 * 16 * 3 + 32) + (32 * 32 * 3 + 32);
        let dec1 = (32 * 16 * 2 + 16) + (16 * 32 * 3 + 16) + (16 * 16 * 3 + 16);
        let dec0 = (16 * 8 * 2 + 8) + (8 * 16 * 3 + 8) + (8 * 8 * 3 + 8);
        let head = 2 * 8 + 2;
        let total = enc0 + enc1 + bottleneck + dec1 + dec0 + head;
        assert_eq!(total, 10458);
        let net = build_unet(cfg(6, 2, 2, 8), &mut SeededRng::new(0)).unwrap();
        assert_eq!(net.num_parameters(), total);
    }

    #[test]
    fn invalid_configs() {
        let mut rng = SeededRng::new(0);
        for bad in [
            UNetConfig { kernel_size: 4, ..cfg(6, 2, 2, 8) },
            cfg(6, 2, 0, 8),
            cfg(6, 2, 2, 0),
        ] {
            assert!(matches!(build_unet(bad, &mut rng), Err(Error::Config(_))));
        }
    }

    #[test]
    fn dense_shape_contract() {
        let mut rng = SeededRng::new(1);
        let net = build_unet(cfg(6, 9, 3, 4), &mut rng).unwrap();
        let x = random_input(&mut rng, &[2, 6, 64]);
        assert_eq!(net.predict_logits(&x).unwrap().shape(), &[2, 9, 64]);
    }

    #[test]
    fn refuses_indivisible_length_with_hint() {
        let mut rng = SeededRng::new(1);
        let net = build_unet(cfg(6, 9, 3, 4), &mut rng).unwrap();
        let err = net.predict_logits(&Tensor::zeros(&[1, 6, 60])).unwrap_err();
        let Error::Geometry(msg) = err else { panic!("{err}") };
        assert!(msg.contains("pad by 4 to 64"), "{msg}");
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut rng = SeededRng::new(2);
        let mut net = build_unet(cfg(6, 9, 2, 4), &mut rng).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let y = net.predict_logits(&random_input(&mut rng, &[2, 6, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_connections_are_live() {
        let mut rng = SeededRng::new(3);
        let net = build_unet(cfg(3, 4, 2, 4), &mut rng).unwrap();
        let x = random_input(&mut rng, &[1, 3, 16]);
        let run = |skips: bool| {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = net.forward_with(&mut tape, xv, &p, skips).unwrap();
            tape.value(y).clone()
        };
        assert_ne!(run(true), run(false));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(4);
        let net = build_unet(cfg(2, 3, 1, 2), &mut rng).unwrap();
        let x = random_input(&mut rng, &[1, 2, 8]);
        let targets: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();
        let loss_of = |net: &UNet1D| {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = net.forward(&mut tape, xv, &p).unwrap();
            let l = tape.cross_entropy(y, &targets).unwrap();
            (tape, p, l)
        };
        let (tape, p, l) = loss_of(&net);
        let grads = tape.backward(l).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, pv) in p.iter().enumerate() {
            let analytic = grads.wrt(*pv);
            let mut numeric = Vec::new();
            for j in 0..net.params()[i].numel() {
                let mut probe = net.clone();
                probe.params_mut()[i].data_mut()[j] += eps;
                let (t, _, l) = loss_of(&probe);
                let up = t.value(l).item();
                probe.params_mut()[i].data_mut()[j] -= 2.0 * eps;
                let (t, _, l) = loss_of(&probe);
                numeric.push((up - t.value(l).item()) / (2.0 * eps));
            }
            let scale = analytic.iter().chain(&numeric).fold(1e-12_f64, |m, v| m.max(v.abs()));
            let err = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn overfits_two_sequences() {
        let mut rng = SeededRng::new(5);
        let mut net = build_unet(cfg(2, 3, 2, 8), &mut rng).unwrap();
        let t = 32;
        let x = random_input(&mut rng, &[2, 2, t]);
        // labels follow a piecewise pattern unrelated to the input noise
        let targets: Vec<usize> = (0..2 * t).map(|i| (i / 5) % 3).collect();
        let mut adam = AdamState::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, net.params());
        for _ in 0..200 {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = net.forward(&mut tape, xv, &p).unwrap();
            let l = tape.cross_entropy(y, &targets).unwrap();
            let mut g = tape.backward(l).unwrap();
            let grads: Vec<Vec<f64>> = p.iter().map(|v| g.take(*v)).collect();
            adam.step(net.params_mut().iter_mut().collect(), &grads).unwrap();
        }
        let logits = net.predict_logits(&x).unwrap();
        let pred = crate::engine::kernels::argmax_columns(logits.data(), 2, 3, t);
        let acc = pred.iter().zip(&targets).filter(|(a, b)| a == b).count() as f64 / targets.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }
}
