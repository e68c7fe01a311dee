//! JSON weights file.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "arch": "mlp_tanh",
//!   "input_shape": [8, 8],
//!   "layers": [
//!     {"kind": "dense", "shape": [16, 64], "weights": [...], "bias": [...]},
//!     {"kind": "dense", "shape": [3, 16], "weights": [...], "bias": [...]}
//!   ],
//!   "class_names": ["a", "b", "c"]
//! }
//! ```
//!
//! Arrays are row-major. `convnet_small` uses the layer kinds `conv3x3`
//! (`shape [C, 1, 3, 3]`), `mean_pool2x2` and `dense`; `analytic` holds one
//! layer whose kind names the closed-form function.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analytic::{AnalyticKind, AnalyticModel};
use super::nets::{ConvNetSmall, DenseLayer, LinearModel, MlpTanh};
use super::{analytic_model, Architecture, DifferentiableModel, InputShape, Model, Network};
use crate::error::{Error, Result};
use crate::scale_space::ScalarField2D;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<ModelLayer>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayer {
    pub kind: String,
    #[serde(default)]
    pub shape: Vec<usize>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: Vec<f64>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Model::from_file(&file)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(&model.to_file())
        .expect("model file serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dense_layer(layer: &ModelLayer, at: &str) -> Result<DenseLayer> {
    if layer.kind != "dense" {
        return Err(Error::validation(format!(
            "{at}.kind: expected `dense`, found `{}`",
            layer.kind
        )));
    }
    let [outputs, inputs] = layer.shape[..] else {
        return Err(Error::validation(format!(
            "{at}.shape: expected [outputs, inputs], found {:?}",
            layer.shape
        )));
    };
    DenseLayer::new(inputs, outputs, layer.weights.clone(), layer.bias.clone())
        .map_err(|e| Error::validation(format!("{at}: {e}")))
}

fn to_dense(layer: &DenseLayer) -> ModelLayer {
    ModelLayer {
        kind: "dense".into(),
        shape: vec![layer.outputs, layer.inputs],
        weights: layer.weights.clone(),
        bias: layer.bias.clone(),
    }
}

fn expect_layers(file: &ModelFile, n: usize) -> Result<()> {
    if file.layers.len() != n {
        return Err(Error::validation(format!(
            "layers: `{}` expects {n} layer(s), found {}",
            file.arch,
            file.layers.len()
        )));
    }
    Ok(())
}

impl Model {
    pub fn to_file(&self) -> ModelFile {
        let shape = self.input_shape();
        let layers = match self.network() {
            Network::Linear(m) => vec![to_dense(m.layer())],
            Network::MlpTanh(m) => m.layers().iter().map(to_dense).collect(),
            Network::ConvNetSmall(m) => vec![
                ModelLayer {
                    kind: "conv3x3".into(),
                    shape: vec![m.channels(), 1, 3, 3],
                    weights: m.conv_weights().to_vec(),
                    bias: m.conv_bias().to_vec(),
                },
                ModelLayer {
                    kind: "mean_pool2x2".into(),
                    shape: vec![2, 2],
                    weights: Vec::new(),
                    bias: Vec::new(),
                },
                to_dense(m.dense()),
            ],
            Network::Analytic(m) => vec![ModelLayer {
                kind: m.kind().tag().into(),
                shape: m
                    .template()
                    .map(|_| vec![shape.height, shape.width])
                    .unwrap_or_default(),
                weights: m.template().map(|t| t.values().to_vec()).unwrap_or_default(),
                bias: Vec::new(),
            }],
        };
        ModelFile {
            format_version: FORMAT_VERSION,
            arch: self.architecture().tag().into(),
            input_shape: vec![shape.height, shape.width],
            layers,
            class_names: self.class_names().to_vec(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Model> {
        if file.format_version != FORMAT_VERSION {
            return Err(Error::validation(format!(
                "format_version: expected {FORMAT_VERSION}, found {}",
                file.format_version
            )));
        }
        let shape = match file.input_shape[..] {
            [n] if n > 0 => InputShape::new(1, n),
            [h, w] if h > 0 && w > 0 => InputShape::new(h, w),
            _ => {
                return Err(Error::validation(format!(
                    "input_shape: expected [length] or [height, width] with positive entries, found {:?}",
                    file.input_shape
                )))
            }
        };
        for (i, layer) in file.layers.iter().enumerate() {
            if let Some(j) = layer.weights.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(format!("layers[{i}].weights[{j}] is not finite")));
            }
            if let Some(j) = layer.bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(format!("layers[{i}].bias[{j}] is not finite")));
            }
        }

        let network = match file.arch.as_str() {
            "linear" => {
                expect_layers(file, 1)?;
                let layer = dense_layer(&file.layers[0], "layers[0]")?;
                if layer.inputs != shape.len() {
                    return Err(Error::validation(format!(
                        "layers[0].shape: expects {} inputs but input_shape has {}",
                        layer.inputs,
                        shape.len()
                    )));
                }
                Network::Linear(LinearModel { shape, layer })
            }
            "mlp_tanh" => {
                let layers = file
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| dense_layer(l, &format!("layers[{i}]")))
                    .collect::<Result<Vec<_>>>()?;
                Network::MlpTanh(MlpTanh::new(shape, layers)?)
            }
            "convnet_small" => {
                expect_layers(file, 3)?;
                let conv = &file.layers[0];
                if conv.kind != "conv3x3" {
                    return Err(Error::validation(format!(
                        "layers[0].kind: expected `conv3x3`, found `{}`",
                        conv.kind
                    )));
                }
                let [channels, 1, 3, 3] = conv.shape[..] else {
                    return Err(Error::validation(format!(
                        "layers[0].shape: expected [channels, 1, 3, 3], found {:?}",
                        conv.shape
                    )));
                };
                if conv.bias.len() != channels {
                    return Err(Error::validation(format!(
                        "layers[0].bias: expected {channels} values, found {}",
                        conv.bias.len()
                    )));
                }
                if file.layers[1].kind != "mean_pool2x2" {
                    return Err(Error::validation(format!(
                        "layers[1].kind: expected `mean_pool2x2`, found `{}`",
                        file.layers[1].kind
                    )));
                }
                let dense = dense_layer(&file.layers[2], "layers[2]")?;
                Network::ConvNetSmall(ConvNetSmall::new(
                    shape,
                    conv.weights.clone(),
                    conv.bias.clone(),
                    dense,
                )?)
            }
            "analytic" => {
                expect_layers(file, 1)?;
                let layer = &file.layers[0];
                let kind = AnalyticKind::from_tag(&layer.kind).ok_or_else(|| {
                    Error::validation(format!(
                        "layers[0].kind: unknown analytic function `{}`",
                        layer.kind
                    ))
                })?;
                if kind == AnalyticKind::GaussianBumpDetector && !layer.weights.is_empty() {
                    let template = ScalarField2D::new(shape.width, shape.height, layer.weights.clone())
                        .map_err(|e| Error::validation(format!("layers[0].weights: {e}")))?;
                    Network::Analytic(AnalyticModel::with_template(template))
                } else {
                    Network::Analytic(analytic_model(kind, shape))
                }
            }
            other => {
                return Err(Error::validation(format!(
                    "arch: unknown architecture `{other}` (expected one of linear, mlp_tanh, convnet_small, analytic)"
                )))
            }
        };
        let model = Model::new(network);
        if file.class_names.is_empty() {
            Ok(model)
        } else {
            model.with_class_names(file.class_names.clone())
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp_tanh" => Ok(Architecture::MlpTanh),
            "convnet_small" => Ok(Architecture::ConvnetSmall),
            "analytic" => Ok(Architecture::Analytic),
            other => Err(Error::validation(format!("unknown architecture `{other}`"))),
        }
    }
}
