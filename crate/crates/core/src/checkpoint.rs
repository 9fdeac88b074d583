//! JSON checkpoints of trained models.
//!
//! Weights are stored row-major (`out × in`) per layer; latent matrices are
//! stored row-major with their shape. Floats round-trip exactly.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cacdr::CacdrModel;
use crate::config::TrainConfig;
use crate::data::Axis;
use crate::error::{Error, Result};
use crate::eval::{Method, TrainedModel};
use crate::lfacdr::{LatentSide, LfacdrDomain, LfacdrModel};
use crate::numerics::{Activation, DenseLayer, DenseNetwork};

pub const FORMAT: &str = "cdrec-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub name: String,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub method: Method,
    pub shared_axis: Axis,
    pub config: TrainConfig,
    pub networks: Vec<NetworkRecord>,
    pub latents: Vec<LatentRecord>,
}

fn net_record(name: &str, net: &DenseNetwork) -> NetworkRecord {
    NetworkRecord {
        name: name.to_string(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                input: l.input_size(),
                output: l.output_size(),
                activation: l.activation,
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect(),
    }
}

fn latent_record(name: &str, m: &Array2<f64>) -> LatentRecord {
    LatentRecord {
        name: name.to_string(),
        rows: m.nrows(),
        cols: m.ncols(),
        values: m.iter().copied().collect(),
    }
}

fn corrupt(message: String) -> Error {
    Error::Data(format!("checkpoint: {message}"))
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel, config: &TrainConfig) -> Self {
        let (method, shared_axis, networks, latents) = match model {
            TrainedModel::Cacdr(m) => (
                Method::Cacdr,
                m.shared_axis,
                vec![
                    net_record("source.encoder", &m.source_encoder),
                    net_record("source.decoder", &m.source_decoder),
                    net_record("target.encoder", &m.target_encoder),
                    net_record("target.decoder", &m.target_decoder),
                    net_record("mapper", &m.mapper),
                ],
                Vec::new(),
            ),
            TrainedModel::Lfacdr(m) => {
                let mut nets = Vec::new();
                let mut lats = Vec::new();
                for (d, domain) in [("source", &m.source), ("target", &m.target)] {
                    for (s, side) in [("items", &domain.items), ("users", &domain.users)] {
                        nets.push(net_record(&format!("{d}.{s}.encoder"), &side.encoder));
                        nets.push(net_record(&format!("{d}.{s}.decoder"), &side.decoder));
                        lats.push(latent_record(&format!("{d}.{s}"), &side.latents));
                    }
                }
                nets.push(net_record("mapper", &m.mapper));
                (Method::Lfacdr, m.shared_axis, nets, lats)
            }
        };
        Self {
            format: FORMAT.to_string(),
            method,
            shared_axis,
            config: config.clone(),
            networks,
            latents,
        }
    }

    fn network(&self, name: &str) -> Result<DenseNetwork> {
        let rec = self
            .networks
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| corrupt(format!("missing network `{name}`")))?;
        let layers = rec
            .layers
            .iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.output, l.input), l.weights.clone())
                    .map_err(|e| corrupt(format!("{name} weights: {e}")))?;
                DenseLayer::new(weights, Array1::from(l.bias.clone()), l.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNetwork::new(layers)
    }

    fn latent(&self, name: &str) -> Result<Array2<f64>> {
        let rec = self
            .latents
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| corrupt(format!("missing latents `{name}`")))?;
        Array2::from_shape_vec((rec.rows, rec.cols), rec.values.clone())
            .map_err(|e| corrupt(format!("{name} latents: {e}")))
    }

    fn side(&self, domain: &str, side: &str) -> Result<LatentSide> {
        Ok(LatentSide {
            encoder: self.network(&format!("{domain}.{side}.encoder"))?,
            decoder: self.network(&format!("{domain}.{side}.decoder"))?,
            latents: self.latent(&format!("{domain}.{side}"))?,
        })
    }

    pub fn to_model(&self) -> Result<TrainedModel> {
        if self.format != FORMAT {
            return Err(corrupt(format!("unsupported format `{}`", self.format)));
        }
        match self.method {
            Method::Cacdr => Ok(TrainedModel::Cacdr(CacdrModel {
                source_encoder: self.network("source.encoder")?,
                source_decoder: self.network("source.decoder")?,
                target_encoder: self.network("target.encoder")?,
                target_decoder: self.network("target.decoder")?,
                mapper: self.network("mapper")?,
                shared_axis: self.shared_axis,
            })),
            Method::Lfacdr => {
                let domain = |d: &str| -> Result<LfacdrDomain> {
                    Ok(LfacdrDomain {
                        items: self.side(d, "items")?,
                        users: self.side(d, "users")?,
                        lambda: self.config.lambda,
                    })
                };
                Ok(TrainedModel::Lfacdr(LfacdrModel {
                    source: domain("source")?,
                    target: domain("target")?,
                    mapper: self.network("mapper")?,
                    shared_axis: self.shared_axis,
                }))
            }
            Method::Baseline => Err(corrupt("baseline has no model".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
