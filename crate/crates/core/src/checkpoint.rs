//! JSON checkpoints. Parameters are stored by name with their shape and the
//! little-endian bytes of the `f64` values in base64, so a save/load cycle
//! is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::engine::{SeededRng, Tensor};
use crate::error::{Error, Result};
use crate::model::{ChainConfig, ConditionalUNet, IndependentUNet, LabelModel, LabelSpec, Model, UNetShape};

pub const FORMAT_VERSION: u32 = 1;

/// Enough to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    ConditionalUnet {
        config: ChainConfig,
    },
    IndependentUnet {
        in_channels: usize,
        labels: Vec<LabelSpec>,
        unet: UNetShape,
    },
}

impl ModelSpec {
    pub fn of(model: &Model) -> Self {
        match model {
            Model::Chain(m) => ModelSpec::ConditionalUnet {
                config: m.config().clone(),
            },
            Model::Baseline(m) => {
                let c = m.unet().config();
                ModelSpec::IndependentUnet {
                    in_channels: m.in_channels(),
                    labels: m.labels().to_vec(),
                    unet: UNetShape {
                        depth: c.depth,
                        base_channels: c.base_channels,
                        kernel_size: c.kernel_size,
                    },
                }
            }
        }
    }

    /// Freshly initialized model with this architecture.
    pub fn build(&self, rng: &mut SeededRng) -> Result<Model> {
        Ok(match self {
            ModelSpec::ConditionalUnet { config } => Model::Chain(ConditionalUNet::build(config.clone(), rng)?),
            ModelSpec::IndependentUnet {
                in_channels,
                labels,
                unet,
            } => Model::Baseline(IndependentUNet::build(*in_channels, labels.clone(), *unet, rng)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Base64 of the little-endian `f64` bytes.
    pub data: String,
}

/// Window geometry used in training; evaluation reuses it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelSpec,
    pub normalizer: Option<Normalizer>,
    pub window: Option<WindowSpec>,
    pub params: Vec<ParamRecord>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Data(format!("parameter {name}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!("parameter {name}: {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn capture(model: &Model, normalizer: Option<&Normalizer>, window: Option<WindowSpec>) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, t)| ParamRecord {
                name,
                shape: t.shape().to_vec(),
                data: encode(t.data()),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            model: ModelSpec::of(model),
            normalizer: normalizer.cloned(),
            window,
            params,
        }
    }

    /// Rebuilds the model and checks every parameter's name and shape.
    pub fn restore(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut model = self.model.build(&mut SeededRng::new(0))?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, shape), rec) in expected.iter().zip(&self.params) {
            if *name != rec.name || *shape != rec.shape {
                return Err(Error::Data(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {} {:?}",
                    rec.name, rec.shape
                )));
            }
            values.push(Tensor::new(rec.shape.clone(), decode(name, &rec.data)?)?);
        }
        for (dst, src) in model.params_mut().into_iter().zip(values) {
            *dst = src;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<LabelSpec> {
        vec![LabelSpec::new("walk", 2), LabelSpec::new("gesture", 9)]
    }

    fn shape() -> UNetShape {
        UNetShape {
            depth: 1,
            base_channels: 3,
            kernel_size: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ChainConfig::new(6, labels());
        cfg.unet = shape();
        cfg.order = vec![1, 0];
        let chain = Model::Chain(ConditionalUNet::build(cfg, &mut SeededRng::new(4)).unwrap());
        let base = Model::Baseline(IndependentUNet::build(6, labels(), shape(), &mut SeededRng::new(4)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let norm = Normalizer {
            mean: vec![0.1; 6],
            std: vec![1.0 / 3.0; 6],
        };
        for m in [chain, base] {
            let ck = Checkpoint::capture(
                &m,
                Some(&norm),
                Some(WindowSpec {
                    length: 64,
                    stride: 32,
                }),
            );
            let p = dir.path().join(format!("{}.json", m.kind()));
            ck.save(&p).unwrap();
            let back = Checkpoint::load(&p).unwrap();
            assert_eq!(back, ck);
            let restored = back.restore().unwrap();
            assert_eq!(restored.kind(), m.kind());
            for ((na, ta), (nb, tb)) in m.named_params().into_iter().zip(restored.named_params()) {
                assert_eq!(na, nb);
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(ta), bits(tb));
            }
        }
    }

    #[test]
    fn encodes_special_values() {
        let v = [0.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, -1e300];
        let back = decode("x", &encode(&v)).unwrap();
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_mismatched_params() {
        let base = Model::Baseline(IndependentUNet::build(6, labels(), shape(), &mut SeededRng::new(0)).unwrap());
        let mut ck = Checkpoint::capture(&base, None, None);
        ck.params[0].shape = vec![1];
        assert!(matches!(ck.restore(), Err(Error::Data(_))));
        let mut ck = Checkpoint::capture(&base, None, None);
        ck.params.pop();
        assert!(ck.restore().is_err());
        let mut ck = Checkpoint::capture(&base, None, None);
        ck.format_version = 99;
        assert!(ck.restore().is_err());
    }
}
