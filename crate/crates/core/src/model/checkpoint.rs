//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "lsg-checkpoint",
//!   "version": 1,
//!   "input": {"kind": "flat", "size": 784},
//!   "layers": [{"kind": "dense", "inputs": 784, "outputs": 128}, ...],
//!   "params": [{"layer": "fc1", "shape": [784, 128], "weight": [...], "bias": [...]}, ...],
//!   "normalization": {"mean": [...], "std": [...]} | null
//! }
//! ```
//!
//! `shape` is the natural weight shape: `[m, n]` for dense layers and
//! `[n, m, k, k]` for conv kernels. `weight` is row-major in that shape, which
//! for conv kernels coincides with the flattened `n × m·k²` matrix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, Params, Shape};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};

pub const FORMAT: &str = "lsg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamRecord>,
    pub normalization: Option<Normalization>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub layer: String,
    pub shape: Vec<usize>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, normalization: Option<Normalization>) -> Self {
        let params = net
            .layers()
            .iter()
            .filter_map(|layer| {
                let p = layer.params()?;
                let shape = match *layer.spec() {
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => vec![out_channels, in_channels, kernel, kernel],
                    _ => vec![p.weight.rows(), p.weight.cols()],
                };
                Some(ParamRecord {
                    layer: layer.name().to_string(),
                    shape,
                    weight: p.weight.as_slice().to_vec(),
                    bias: p.bias.clone(),
                })
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            input: net.input_shape(),
            layers: net.specs(),
            params,
            normalization,
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut net = Network::new(self.input, &self.layers, &mut RngState::new(0))?;
        let trainable = net.trainable_layers();
        if trainable.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameter records for {} trainable layers",
                self.params.len(),
                trainable.len()
            )));
        }
        for (&idx, rec) in trainable.iter().zip(&self.params) {
            if net.layers()[idx].name() != rec.layer {
                return Err(Error::Config(format!(
                    "parameter record `{}` found where `{}` was expected",
                    rec.layer,
                    net.layers()[idx].name()
                )));
            }
            let (rows, cols) = net.params(idx).weight.shape();
            let weight = Matrix::from_vec(rows, cols, rec.weight.clone())?;
            net.set_params(
                idx,
                Params {
                    weight,
                    bias: rec.bias.clone(),
                },
            )?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn round_trip_preserves_network() {
        let arch: Architecture = "cnn:2".parse().unwrap();
        let net = arch
            .build(
                Shape::Image {
                    channels: 1,
                    height: 6,
                    width: 6,
                },
                3,
                &mut RngState::new(8),
            )
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let norm = Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        };
        Checkpoint::from_network(&net, Some(norm.clone()))
            .save(&path)
            .unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.params[0].shape, vec![2, 1, 3, 3]);
        assert_eq!(ck.normalization, Some(norm));
        assert_eq!(ck.to_network().unwrap(), net);
    }
}
