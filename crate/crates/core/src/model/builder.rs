//! Programmatic model construction.
//!
//! Used by tests and tooling to assemble models without hand-writing
//! manifests; `save_model` turns the result into a manifest + blob pair.

use std::collections::BTreeMap;

use rand::Rng;

use crate::model::{LayerSpec, Model, ModelError, Padding};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    current_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            current_shape: input_shape.clone(),
            input_shape,
            layers: Vec::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Output shape of the layers added so far (the input shape when empty).
    pub fn current_shape(&self) -> &[usize] {
        &self.current_shape
    }

    fn push(&mut self, layer: LayerSpec) {
        if let Ok(next) = crate::model::layer_output_shape(&layer, &self.current_shape) {
            self.current_shape = next;
        }
        self.layers.push(layer);
    }

    fn name(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.layers.len())
    }

    /// Dense layer from a `[in, out]` weight matrix in row-major order.
    pub fn dense_from(mut self, shape: Vec<usize>, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Self {
        assert_eq!(shape.len(), 2, "dense weights must be [in, out]");
        let weight_ref = self.name("w");
        let bias_ref = bias.map(|b| {
            let name = self.name("b");
            self.tensors.insert(name.clone(), Tensor::from_vec(b));
            name
        });
        let layer = LayerSpec::Dense {
            in_features: shape[0],
            out_features: shape[1],
            weight_ref: weight_ref.clone(),
            bias_ref,
        };
        self.tensors
            .insert(weight_ref, Tensor::new(shape, weights).expect("dense weights"));
        self.push(layer);
        self
    }

    pub fn dense(self, weights: Tensor, bias: Option<Tensor>) -> Self {
        let shape = weights.shape().to_vec();
        self.dense_from(shape, weights.into_data(), bias.map(Tensor::into_data))
    }

    /// Conv layer; the input channel count is taken from the running shape,
    /// which must be rank 3 at this point.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_from(
        mut self,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Self {
        assert_eq!(
            self.current_shape.len(),
            3,
            "conv2d needs a [c, h, w] input, current shape is {:?}",
            self.current_shape
        );
        let in_channels = self.current_shape[0];
        let weight_ref = self.name("w");
        let bias_ref = bias.map(|b| {
            let name = self.name("b");
            self.tensors.insert(name.clone(), Tensor::from_vec(b));
            name
        });
        let layer = LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weight_ref: weight_ref.clone(),
            bias_ref,
        };
        self.tensors.insert(
            weight_ref,
            Tensor::new(vec![out_channels, in_channels, kernel_h, kernel_w], weights)
                .expect("conv weights"),
        );
        self.push(layer);
        self
    }

    pub fn maxpool(mut self, window_h: usize, window_w: usize, stride: usize) -> Self {
        self.push(LayerSpec::Maxpool2d {
            window_h,
            window_w,
            stride,
        });
        self
    }

    pub fn avgpool(mut self, window_h: usize, window_w: usize, stride: usize) -> Self {
        self.push(LayerSpec::Avgpool2d {
            window_h,
            window_w,
            stride,
        });
        self
    }

    pub fn relu(mut self) -> Self {
        self.push(LayerSpec::Relu);
        self
    }

    pub fn flatten(mut self) -> Self {
        self.push(LayerSpec::Flatten);
        self
    }

    pub fn softmax(mut self) -> Self {
        self.push(LayerSpec::Softmax);
        self
    }

    pub fn batchnorm(mut self, scale: Vec<f64>, shift: Vec<f64>) -> Self {
        let scale_ref = self.name("bn_scale_");
        let shift_ref = format!("bn_shift_{}", self.layers.len());
        self.tensors.insert(scale_ref.clone(), Tensor::from_vec(scale));
        self.tensors.insert(shift_ref.clone(), Tensor::from_vec(shift));
        self.push(LayerSpec::Batchnorm {
            scale_ref,
            shift_ref,
        });
        self
    }

    /// Validates the assembled model. Batchnorm layers are kept as-is; only
    /// `load_model` folds them.
    pub fn build(self) -> Result<Model, ModelError> {
        let model = Model {
            input_shape: self.input_shape,
            layers: self.layers,
            tensors: self.tensors,
        };
        let diags = crate::model::validate_model(&model);
        if !diags.is_empty() {
            return Err(ModelError::Invalid(diags));
        }
        Ok(model)
    }

    /// Random ReLU MLP: dense layers of the given sizes with relu between
    /// them (none after the last). Weights are uniform in ±1/sqrt(fan_in).
    pub fn random_mlp(rng: &mut impl Rng, in_dim: usize, sizes: &[usize], with_bias: bool) -> Model {
        let mut builder = ModelBuilder::new(vec![in_dim]);
        let mut fan_in = in_dim;
        for (i, &out) in sizes.iter().enumerate() {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let weights: Vec<f64> = (0..fan_in * out)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            let bias: Option<Vec<f64>> =
                with_bias.then(|| (0..out).map(|_| rng.random_range(-0.1..0.1)).collect());
            builder = builder.dense_from(vec![fan_in, out], weights, bias);
            if i + 1 < sizes.len() {
                builder = builder.relu();
            }
            fan_in = out;
        }
        builder.build().expect("random mlp is structurally valid")
    }
}
