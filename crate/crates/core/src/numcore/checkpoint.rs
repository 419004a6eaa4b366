//! Single-document JSON model files.
//!
//! Parameters are stored as one base64 string of little-endian `f64`s in
//! layer order (weights row-major in×out, then biases). Spectrally normalized
//! networks also store their power-iteration vectors the same way.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::error::{NumError, NumResult};
use super::matrix::Matrix;
use super::mlp::{Dense, Mlp};
use super::scalar::Scalar;

pub const MODEL_FORMAT: &str = "xalign-mlp/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub spectral_norm: bool,
    pub params: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sn_vectors: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn encode<T: Scalar>(values: impl Iterator<Item = T>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode(s: &str) -> NumResult<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| NumError::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(NumError::Checkpoint(format!(
            "parameter payload of {} bytes is not a whole number of f64s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl ModelFile {
    pub fn from_mlp<T: Scalar>(net: &Mlp<T>, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        let params = encode(net.param_slices().into_iter().flatten().copied());
        let sn_vectors = net.spectral_norm().then(|| {
            encode(
                net.layers()
                    .iter()
                    .flat_map(|l| l.sn_u.iter().flatten().copied()),
            )
        });
        Self {
            format: MODEL_FORMAT.to_string(),
            layer_dims: net.layer_dims(),
            activations: net.activations(),
            spectral_norm: net.spectral_norm(),
            params,
            sn_vectors,
            metadata,
        }
    }

    pub fn to_mlp<T: Scalar>(&self) -> NumResult<Mlp<T>> {
        if self.format != MODEL_FORMAT {
            return Err(NumError::Checkpoint(format!(
                "unsupported format {:?}",
                self.format
            )));
        }
        let dims = &self.layer_dims;
        if dims.len() < 2 || self.activations.len() != dims.len() - 1 {
            return Err(NumError::Checkpoint(format!(
                "{} layer dims with {} activations",
                dims.len(),
                self.activations.len()
            )));
        }
        let params = decode(&self.params)?;
        let expected: usize = dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum();
        if params.len() != expected {
            return Err(NumError::Checkpoint(format!(
                "layer dims {dims:?} need {expected} parameters, file has {}",
                params.len()
            )));
        }
        let sn = match (&self.sn_vectors, self.spectral_norm) {
            (Some(s), true) => {
                let v = decode(s)?;
                let want: usize = dims[..dims.len() - 1].iter().sum();
                if v.len() != want {
                    return Err(NumError::Checkpoint(format!(
                        "expected {want} power-iteration entries, file has {}",
                        v.len()
                    )));
                }
                Some(v)
            }
            (None, false) => None,
            _ => {
                return Err(NumError::Checkpoint(
                    "spectral_norm flag and power-iteration vectors disagree".into(),
                ))
            }
        };
        let mut p = params.into_iter().map(T::lit);
        let mut u_off = 0;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (d, &activation) in dims.windows(2).zip(&self.activations) {
            let (fan_in, fan_out) = (d[0], d[1]);
            let weight = Matrix::from_vec(fan_in, fan_out, p.by_ref().take(fan_in * fan_out).collect())?;
            let bias = p.by_ref().take(fan_out).collect();
            let sn_u = sn.as_ref().map(|v| {
                let u = v[u_off..u_off + fan_in].iter().map(|&x| T::lit(x)).collect();
                u_off += fan_in;
                u
            });
            layers.push(Dense {
                weight,
                bias,
                activation,
                sn_u,
            });
        }
        Mlp::from_layers(layers, self.spectral_norm)
    }

    /// Loads and additionally checks the architecture against `dims`.
    pub fn to_mlp_expecting<T: Scalar>(&self, dims: &[usize]) -> NumResult<Mlp<T>> {
        if self.layer_dims != dims {
            return Err(NumError::Checkpoint(format!(
                "expected layer dims {dims:?}, file has {:?}",
                self.layer_dims
            )));
        }
        self.to_mlp()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model file serializes")
    }

    pub fn from_json(s: &str) -> NumResult<Self> {
        serde_json::from_str(s).map_err(|e| NumError::Checkpoint(e.to_string()))
    }
}
