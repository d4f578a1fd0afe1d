// SPDX-License-Identifier: Apache-2.0

//! Small convolutional classifiers with a capturable convolutional stage.
//!
//! A model is an ordered list of layers split at the capture layer into a
//! feature extractor and a classification head. The activations at the split
//! point (`A` in Grad-CAM) and the gradient of a chosen logit with respect to
//! them are what the rest of the toolkit consumes.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayD, Ix2, Ix4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiaError};
use crate::tensor::{self, Tensor};

pub const TEMPLATES: &[&str] = &["tiny-cnn-3block", "tiny-vgg", "tiny-1conv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        bias: bool,
    },
    Relu {
        name: String,
    },
    MaxPool {
        name: String,
    },
    GlobalAvgPool {
        name: String,
    },
    Flatten {
        name: String,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::Relu { name }
            | LayerSpec::MaxPool { name }
            | LayerSpec::GlobalAvgPool { name }
            | LayerSpec::Flatten { name }
            | LayerSpec::Dense { name, .. } => name,
        }
    }

    fn is_head(&self) -> bool {
        matches!(
            self,
            LayerSpec::GlobalAvgPool { .. } | LayerSpec::Flatten { .. } | LayerSpec::Dense { .. }
        )
    }

    fn conv(name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            padding: 1,
            bias,
        }
    }

    fn dense(name: &str, fin: usize, fout: usize, bias: bool) -> Self {
        LayerSpec::Dense {
            name: name.into(),
            in_features: fin,
            out_features: fout,
            bias,
        }
    }

    fn relu(name: &str) -> Self {
        LayerSpec::Relu { name: name.into() }
    }

    fn pool(name: &str) -> Self {
        LayerSpec::MaxPool { name: name.into() }
    }
}

fn default_channels() -> usize {
    3
}

fn default_input_size() -> usize {
    64
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub template: String,
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
    /// Side length of the square input images.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Layer after which activations are captured; defaults to the
    /// activation that follows the last convolution.
    #[serde(default)]
    pub capture_layer: Option<String>,
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            template: "tiny-cnn-3block".into(),
            num_classes: 10,
            input_channels: 3,
            input_size: 64,
            seed: 0,
            capture_layer: None,
            bias: true,
        }
    }
}

impl ModelConfig {
    pub fn new(template: &str, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            template: template.into(),
            num_classes,
            seed,
            ..Default::default()
        }
    }

    fn layers(&self) -> Result<Vec<LayerSpec>> {
        let (c, s, k, b) = (self.input_channels, self.input_size, self.num_classes, self.bias);
        let layers = match self.template.as_str() {
            "tiny-cnn-3block" => vec![
                LayerSpec::conv("conv1", c, 8, b),
                LayerSpec::relu("relu1"),
                LayerSpec::pool("pool1"),
                LayerSpec::conv("conv2", 8, 16, b),
                LayerSpec::relu("relu2"),
                LayerSpec::pool("pool2"),
                LayerSpec::conv("conv3", 16, 32, b),
                LayerSpec::relu("relu3"),
                LayerSpec::GlobalAvgPool { name: "gap".into() },
                LayerSpec::dense("fc", 32, k, b),
            ],
            "tiny-vgg" => {
                let flat = 32 * (s / 8) * (s / 8);
                vec![
                    LayerSpec::conv("conv1", c, 8, b),
                    LayerSpec::relu("relu1"),
                    LayerSpec::conv("conv2", 8, 8, b),
                    LayerSpec::relu("relu2"),
                    LayerSpec::pool("pool1"),
                    LayerSpec::conv("conv3", 8, 16, b),
                    LayerSpec::relu("relu3"),
                    LayerSpec::pool("pool2"),
                    LayerSpec::conv("conv4", 16, 32, b),
                    LayerSpec::relu("relu4"),
                    LayerSpec::pool("pool3"),
                    LayerSpec::Flatten { name: "flatten".into() },
                    LayerSpec::dense("fc1", flat, 64, b),
                    LayerSpec::relu("relu5"),
                    LayerSpec::dense("fc2", 64, k, b),
                ]
            }
            "tiny-1conv" => vec![
                LayerSpec::conv("conv1", c, 4, b),
                LayerSpec::relu("relu1"),
                LayerSpec::Flatten { name: "flatten".into() },
                LayerSpec::dense("fc", 4 * s * s, k, b),
            ],
            other => {
                return Err(RiaError::Config(format!(
                    "unknown model template '{other}' (known: {})",
                    TEMPLATES.join(", ")
                )))
            }
        };
        Ok(layers)
    }
}

/// Activations of the capture layer and, after a backward pass, the gradient
/// of the selected logit with respect to them. Shape `(N, K, H', W')`.
#[derive(Clone, Debug)]
pub struct CapturedActivations {
    pub activations: Array4<f64>,
    pub gradients: Option<Array4<f64>>,
}

/// Parameters as graph leaves, keyed by parameter name.
pub type ParamTensors = BTreeMap<String, Tensor>;

/// Result of a capturing forward pass; holds the graph needed by
/// [`ClassifierModel::backward_capture`].
pub struct ForwardPass {
    logits: Tensor,
    activations: Tensor,
    pub captured: CapturedActivations,
}

impl ForwardPass {
    pub fn logits(&self) -> Array2<f64> {
        self.logits.value().clone().into_dimensionality::<Ix2>().expect("2-D logits")
    }

    /// Index of the largest logit for each sample (first on ties).
    pub fn top1(&self) -> Vec<usize> {
        argmax_rows(&self.logits())
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    /// Number of layers in the feature part (the capture layer is the last of them).
    split: usize,
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ClassifierModel {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let layers = config.layers()?;
        Self::from_layers(config.clone(), layers)
    }

    /// Builds a model from an explicit layer list, initialized from `config.seed`.
    pub fn from_layers(config: ModelConfig, layers: Vec<LayerSpec>) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(RiaError::Config("num_classes must be at least 2".into()));
        }
        let split = capture_split(&layers, config.capture_layer.as_deref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        for layer in &layers {
            match layer {
                LayerSpec::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let shape = [*out_channels, *in_channels, *kernel, *kernel];
                    params.insert(format!("{name}.weight"), he_uniform(&shape, fan_in, &mut rng));
                    if *bias {
                        params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[1, *out_channels, 1, 1])));
                    }
                }
                LayerSpec::Dense {
                    name,
                    in_features,
                    out_features,
                    bias,
                } => {
                    let shape = [*in_features, *out_features];
                    params.insert(format!("{name}.weight"), he_uniform(&shape, *in_features, &mut rng));
                    if *bias {
                        params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[1, *out_features])));
                    }
                }
                _ => {}
            }
        }
        let model = ClassifierModel {
            config,
            layers,
            split,
            params,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Runs a zero input through the network to validate layer wiring.
    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let x = Array4::zeros((1, c.input_channels, c.input_size, c.input_size));
        let logits = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tensor::no_grad(|| {
                let params = self.param_tensors(false);
                self.forward_graph(&Tensor::constant(x.into_dyn()), &params).0
            })
        }))
        .map_err(|_| RiaError::Config("layer shapes are inconsistent with the input size".into()))?;
        if logits.shape() != [1, c.num_classes] {
            return Err(RiaError::Config(format!(
                "network produces {:?} logits, expected {} classes",
                logits.shape(),
                c.num_classes
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn capture_layer(&self) -> &str {
        self.layers[self.split - 1].name()
    }

    pub fn params(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn set_param(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| RiaError::Input(format!("no parameter named '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(RiaError::Input(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.params.iter_mut()
    }

    /// Graph leaves for every parameter.
    pub fn param_tensors(&self, requires_grad: bool) -> ParamTensors {
        self.params
            .iter()
            .map(|(k, v)| {
                let t = if requires_grad {
                    Tensor::variable(v.clone())
                } else {
                    Tensor::constant(v.clone())
                };
                (k.clone(), t)
            })
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4
            || shape[0] == 0
            || shape[1] != c.input_channels
            || shape[2] != c.input_size
            || shape[3] != c.input_size
        {
            return Err(RiaError::Input(format!(
                "expected images of shape (N, {}, {}, {}), got {shape:?}",
                c.input_channels, c.input_size, c.input_size
            )));
        }
        Ok(())
    }

    fn run_layers(&self, mut x: Tensor, layers: &[LayerSpec], params: &ParamTensors) -> Tensor {
        for layer in layers {
            x = match layer {
                LayerSpec::Conv { name, padding, bias, .. } => {
                    let y = x.conv2d(&params[&format!("{name}.weight")], *padding);
                    if *bias {
                        y.add(&params[&format!("{name}.bias")])
                    } else {
                        y
                    }
                }
                LayerSpec::Relu { .. } => x.relu(),
                LayerSpec::MaxPool { .. } => x.max_pool2d(),
                LayerSpec::GlobalAvgPool { .. } => {
                    let (n, c) = (x.shape()[0], x.shape()[1]);
                    x.mean_axes(&[2, 3]).reshape(&[n, c])
                }
                LayerSpec::Flatten { .. } => {
                    let n = x.shape()[0];
                    let rest = x.shape()[1..].iter().product::<usize>();
                    x.reshape(&[n, rest])
                }
                LayerSpec::Dense { name, bias, .. } => {
                    let y = x.matmul(&params[&format!("{name}.weight")]);
                    if *bias {
                        y.add(&params[&format!("{name}.bias")])
                    } else {
                        y
                    }
                }
            };
        }
        x
    }

    pub fn features_graph(&self, images: &Tensor, params: &ParamTensors) -> Tensor {
        self.run_layers(images.clone(), &self.layers[..self.split], params)
    }

    pub fn head_graph(&self, activations: &Tensor, params: &ParamTensors) -> Tensor {
        self.run_layers(activations.clone(), &self.layers[self.split..], params)
    }

    /// Full forward pass on the graph; returns `(logits, capture activations)`.
    pub fn forward_graph(&self, images: &Tensor, params: &ParamTensors) -> (Tensor, Tensor) {
        let a = self.features_graph(images, params);
        let logits = self.head_graph(&a, params);
        (logits, a)
    }

    pub fn forward_with_capture(&self, images: &Array4<f64>) -> Result<ForwardPass> {
        self.check_input(images.shape())?;
        let params = self.param_tensors(false);
        let a = tensor::no_grad(|| self.features_graph(&Tensor::constant(images.clone().into_dyn()), &params));
        // The head is recorded with the activations as the differentiation point.
        let a = Tensor::variable(a.value().clone());
        let logits = tensor::with_grad_mode(true, || self.head_graph(&a, &params));
        let captured = CapturedActivations {
            activations: a.value().clone().into_dimensionality::<Ix4>().expect("4-D activations"),
            gradients: None,
        };
        Ok(ForwardPass {
            logits,
            activations: a,
            captured,
        })
    }

    /// Fills `pass.captured.gradients` with ∂y^{t_i}/∂A for each sample `i`.
    pub fn backward_capture(&self, pass: &mut ForwardPass, class_index: &[usize]) -> Result<()> {
        let n = pass.logits.shape()[0];
        if class_index.len() != n {
            return Err(RiaError::Input(format!(
                "{} class indices for a batch of {n}",
                class_index.len()
            )));
        }
        if let Some(&bad) = class_index.iter().find(|&&c| c >= self.num_classes()) {
            return Err(RiaError::Input(format!(
                "class index {bad} out of range for {} classes",
                self.num_classes()
            )));
        }
        let selected = pass.logits.select_per_row(class_index).sum_all();
        let g = tensor::grad(&selected, &[&pass.activations], false)
            .pop()
            .flatten()
            .map(|g| g.value().clone())
            .unwrap_or_else(|| ArrayD::zeros(pass.activations.value().raw_dim()));
        pass.captured.gradients = Some(g.into_dimensionality::<Ix4>().expect("4-D gradients"));
        Ok(())
    }

    pub fn forward(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(images.shape())?;
        let params = self.param_tensors(false);
        let logits = tensor::no_grad(|| self.forward_graph(&Tensor::constant(images.clone().into_dyn()), &params).0);
        Ok(logits.value().clone().into_dimensionality::<Ix2>().expect("2-D logits"))
    }

    /// Logits computed from given capture-layer activations.
    pub fn forward_head(&self, activations: &Array4<f64>) -> Array2<f64> {
        let params = self.param_tensors(false);
        let logits = tensor::no_grad(|| self.head_graph(&Tensor::constant(activations.clone().into_dyn()), &params));
        logits.value().clone().into_dimensionality::<Ix2>().expect("2-D logits")
    }

    pub fn predict(&self, images: &Array4<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(images)?))
    }

    pub(crate) fn replace_params(&mut self, params: BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(RiaError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            self.set_param(&name, value)
                .map_err(|e| RiaError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

fn capture_split(layers: &[LayerSpec], capture: Option<&str>) -> Result<usize> {
    let head_start = layers.iter().position(LayerSpec::is_head).ok_or_else(|| {
        RiaError::Config("network has no classification head (pooling, flatten or dense)".into())
    })?;
    let idx = match capture {
        Some(name) => layers
            .iter()
            .position(|l| l.name() == name)
            .ok_or_else(|| RiaError::Config(format!("capture layer '{name}' not found")))?,
        None => {
            let last_conv = layers[..head_start]
                .iter()
                .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
                .ok_or_else(|| RiaError::Config("network has no convolutional stage".into()))?;
            match layers.get(last_conv + 1) {
                Some(LayerSpec::Relu { .. }) => last_conv + 1,
                _ => last_conv,
            }
        }
    };
    if idx >= head_start {
        return Err(RiaError::Config(format!(
            "capture layer '{}' must precede the classification head",
            layers[idx].name()
        )));
    }
    Ok(idx + 1)
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}
