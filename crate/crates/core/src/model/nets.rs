use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DifferentiableModel, InputShape};
use crate::error::{Error, Result};
use crate::scale_space::ScalarField2D;

/// Fully connected layer, `y = W x + b` with `W` stored row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::validation("dense layer dimensions must be positive"));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::validation(format!(
                "dense weights: expected {} values for [{outputs}, {inputs}], found {}",
                inputs * outputs,
                weights.len()
            )));
        }
        if bias.len() != outputs {
            return Err(Error::validation(format!(
                "dense bias: expected {outputs} values, found {}",
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    /// He-style Gaussian initialisation with standard deviation `1/sqrt(inputs)`.
    pub fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("valid std");
        let weights = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        let bias = (0..outputs).map(|_| 0.1 * normal.sample(rng)).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// `W^T g`
    pub fn backward_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += go * w;
            }
        }
        out
    }

    fn column_is_zero(&self, j: usize) -> bool {
        (0..self.outputs).all(|o| self.weights[o * self.inputs + j] == 0.0)
    }
}

/// `F(z) = W vec(z) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub(crate) shape: InputShape,
    pub(crate) layer: DenseLayer,
}

impl LinearModel {
    pub fn new(shape: InputShape, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let layer = DenseLayer::new(shape.len(), bias.len(), weights, bias)?;
        Ok(Self { shape, layer })
    }

    pub fn layer(&self) -> &DenseLayer {
        &self.layer
    }
}

impl DifferentiableModel for LinearModel {
    fn input_shape(&self) -> InputShape {
        self.shape
    }

    fn num_outputs(&self) -> usize {
        self.layer.outputs
    }

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        assert!(self.shape.matches(input), "input shape mismatch");
        self.layer.forward(input.values())
    }

    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        assert!(self.shape.matches(input), "input shape mismatch");
        ScalarField2D::from_raw(
            input.width(),
            input.height(),
            self.layer.backward_input(cotangent),
        )
    }

    fn dummy_coordinates(&self, output: usize) -> Vec<usize> {
        let n = self.layer.inputs;
        let row = &self.layer.weights[output * n..(output + 1) * n];
        row.iter()
            .enumerate()
            .filter(|(_, &w)| w == 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Dense layers with tanh between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTanh {
    pub(crate) shape: InputShape,
    pub(crate) layers: Vec<DenseLayer>,
}

impl MlpTanh {
    pub fn new(shape: InputShape, layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::validation("mlp_tanh needs at least one layer"))?;
        if first.inputs != shape.len() {
            return Err(Error::validation(format!(
                "layers[0]: expects {} inputs but input_shape {shape} has {}",
                first.inputs,
                shape.len()
            )));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(Error::validation(format!(
                    "layers[{}]: expects {} inputs but layers[{i}] produces {}",
                    i + 1,
                    w[1].inputs,
                    w[0].outputs
                )));
            }
        }
        Ok(Self { shape, layers })
    }

    /// Random weights with the given hidden widths.
    pub fn random(shape: InputShape, hidden: &[usize], outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![shape.len()];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::random(w[0], w[1], &mut rng))
            .collect();
        Self { shape, layers }
    }

    /// Same architecture with every weight and bias zeroed except the final bias.
    pub fn zeroed(shape: InputShape, hidden: &[usize], bias: Vec<f64>) -> Self {
        let mut widths = vec![shape.len()];
        widths.extend_from_slice(hidden);
        widths.push(bias.len());
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: if i + 1 == n { bias.clone() } else { vec![0.0; w[1]] },
            })
            .collect();
        Self { shape, layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Post-activation outputs of every hidden layer.
    fn hidden_activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            x = layer.forward(&x).into_iter().map(f64::tanh).collect();
            acts.push(x.clone());
        }
        acts
    }
}

impl DifferentiableModel for MlpTanh {
    fn input_shape(&self) -> InputShape {
        self.shape
    }

    fn num_outputs(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        assert!(self.shape.matches(input), "input shape mismatch");
        let acts = self.hidden_activations(input.values());
        let last_in = acts.last().map(|v| v.as_slice()).unwrap_or(input.values());
        self.layers.last().expect("non-empty").forward(last_in)
    }

    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        assert!(self.shape.matches(input), "input shape mismatch");
        let acts = self.hidden_activations(input.values());
        let mut g = cotangent.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward_input(&g);
            if i > 0 {
                for (gi, a) in g.iter_mut().zip(&acts[i - 1]) {
                    *gi *= 1.0 - a * a;
                }
            }
        }
        ScalarField2D::from_raw(input.width(), input.height(), g)
    }

    fn dummy_coordinates(&self, _output: usize) -> Vec<usize> {
        let first = &self.layers[0];
        (0..first.inputs).filter(|&j| first.column_is_zero(j)).collect()
    }
}

/// 3x3 same-padded convolution (tanh) -> 2x2 mean pool -> dense logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetSmall {
    pub(crate) shape: InputShape,
    pub(crate) channels: usize,
    /// `[channels, 1, 3, 3]`
    pub(crate) conv_weights: Vec<f64>,
    pub(crate) conv_bias: Vec<f64>,
    pub(crate) dense: DenseLayer,
}

pub const CONVNET_CHANNELS: usize = 4;

/// Gradients of a scalar objective with respect to every convnet parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetGrads {
    pub conv_weights: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub dense_weights: Vec<f64>,
    pub dense_bias: Vec<f64>,
}

impl ConvNetGrads {
    pub fn zeros_like(net: &ConvNetSmall) -> Self {
        Self {
            conv_weights: vec![0.0; net.conv_weights.len()],
            conv_bias: vec![0.0; net.conv_bias.len()],
            dense_weights: vec![0.0; net.dense.weights.len()],
            dense_bias: vec![0.0; net.dense.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ConvNetGrads) {
        for (dst, src) in [
            (&mut self.conv_weights, &other.conv_weights),
            (&mut self.conv_bias, &other.conv_bias),
            (&mut self.dense_weights, &other.dense_weights),
            (&mut self.dense_bias, &other.dense_bias),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

struct ConvForward {
    /// tanh activations, `[channels, h, w]`
    act: Vec<f64>,
    /// pooled features, `[channels, h/2, w/2]`
    pooled: Vec<f64>,
}

impl ConvNetSmall {
    pub fn new(
        shape: InputShape,
        conv_weights: Vec<f64>,
        conv_bias: Vec<f64>,
        dense: DenseLayer,
    ) -> Result<Self> {
        if shape.height < 2 || shape.width < 2 {
            return Err(Error::validation(format!(
                "convnet_small needs inputs of at least 2x2, got {shape}"
            )));
        }
        let channels = conv_bias.len();
        if channels == 0 {
            return Err(Error::validation("conv layer needs at least one channel"));
        }
        if conv_weights.len() != channels * 9 {
            return Err(Error::validation(format!(
                "conv weights: expected {} values for [{channels}, 1, 3, 3], found {}",
                channels * 9,
                conv_weights.len()
            )));
        }
        let features = channels * (shape.height / 2) * (shape.width / 2);
        if dense.inputs != features {
            return Err(Error::validation(format!(
                "dense layer expects {} inputs but pooled features number {features}",
                dense.inputs
            )));
        }
        Ok(Self {
            shape,
            channels,
            conv_weights,
            conv_bias,
            dense,
        })
    }

    pub fn random(shape: InputShape, outputs: usize, seed: u64) -> Self {
        assert!(shape.height >= 2 && shape.width >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = CONVNET_CHANNELS;
        let normal = Normal::new(0.0, 1.0 / 3.0).expect("valid std");
        let conv_weights = (0..channels * 9).map(|_| normal.sample(&mut rng)).collect();
        let conv_bias = (0..channels).map(|_| 0.1 * normal.sample(&mut rng)).collect();
        let features = channels * (shape.height / 2) * (shape.width / 2);
        let dense = DenseLayer::random(features, outputs, &mut rng);
        Self {
            shape,
            channels,
            conv_weights,
            conv_bias,
            dense,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn conv_weights(&self) -> &[f64] {
        &self.conv_weights
    }

    pub fn conv_bias(&self) -> &[f64] {
        &self.conv_bias
    }

    pub fn dense(&self) -> &DenseLayer {
        &self.dense
    }

    fn pooled_dims(&self) -> (usize, usize) {
        (self.shape.height / 2, self.shape.width / 2)
    }

    fn forward(&self, z: &[f64]) -> ConvForward {
        let (h, w) = (self.shape.height, self.shape.width);
        let (ph, pw) = self.pooled_dims();
        let mut act = vec![0.0; self.channels * h * w];
        for c in 0..self.channels {
            let k = &self.conv_weights[c * 9..(c + 1) * 9];
            for y in 0..h {
                for x in 0..w {
                    let mut a = self.conv_bias[c];
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            a += k[ky * 3 + kx] * z[yy as usize * w + xx as usize];
                        }
                    }
                    act[(c * h + y) * w + x] = a.tanh();
                }
            }
        }
        let mut pooled = vec![0.0; self.channels * ph * pw];
        for c in 0..self.channels {
            for py in 0..ph {
                for px in 0..pw {
                    let base = (c * h + 2 * py) * w + 2 * px;
                    pooled[(c * ph + py) * pw + px] =
                        0.25 * (act[base] + act[base + 1] + act[base + w] + act[base + w + 1]);
                }
            }
        }
        ConvForward { act, pooled }
    }

    /// Backpropagate logit cotangents. Returns the input gradient and, when
    /// requested, the parameter gradients.
    fn backward(
        &self,
        z: &[f64],
        fwd: &ConvForward,
        cotangent: &[f64],
        want_params: bool,
    ) -> (Vec<f64>, Option<ConvNetGrads>) {
        let (h, w) = (self.shape.height, self.shape.width);
        let (ph, pw) = self.pooled_dims();
        let dpooled = self.dense.backward_input(cotangent);

        // d(pre-activation), zero outside the pooled window
        let mut dpre = vec![0.0; self.channels * h * w];
        for c in 0..self.channels {
            for py in 0..ph {
                for px in 0..pw {
                    let g = 0.25 * dpooled[(c * ph + py) * pw + px];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (c * h + 2 * py + dy) * w + 2 * px + dx;
                        let a = fwd.act[i];
                        dpre[i] = g * (1.0 - a * a);
                    }
                }
            }
        }

        let mut dz = vec![0.0; h * w];
        let mut grads = want_params.then(|| ConvNetGrads::zeros_like(self));
        for c in 0..self.channels {
            let k = &self.conv_weights[c * 9..(c + 1) * 9];
            for y in 0..h {
                for x in 0..w {
                    let d = dpre[(c * h + y) * w + x];
                    if d == 0.0 {
                        continue;
                    }
                    if let Some(g) = grads.as_mut() {
                        g.conv_bias[c] += d;
                    }
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let src = yy as usize * w + xx as usize;
                            dz[src] += k[ky * 3 + kx] * d;
                            if let Some(g) = grads.as_mut() {
                                g.conv_weights[c * 9 + ky * 3 + kx] += d * z[src];
                            }
                        }
                    }
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            let n = self.dense.inputs;
            for (o, &go) in cotangent.iter().enumerate() {
                g.dense_bias[o] = go;
                for (dst, p) in g.dense_weights[o * n..(o + 1) * n].iter_mut().zip(&fwd.pooled) {
                    *dst = go * p;
                }
            }
        }
        (dz, grads)
    }

    /// Logits, input gradient, and parameter gradients of
    /// `sum_k cotangent_fn(logits)[k] * logit_k` in one pass.
    pub(crate) fn logits_and_param_grads(
        &self,
        input: &ScalarField2D,
        cotangent_fn: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> (Vec<f64>, ConvNetGrads) {
        let fwd = self.forward(input.values());
        let logits = self.dense.forward(&fwd.pooled);
        let cot = cotangent_fn(&logits);
        let (_, grads) = self.backward(input.values(), &fwd, &cot, true);
        (logits, grads.expect("requested"))
    }

    pub(crate) fn apply_update(&mut self, update: &ConvNetGrads) {
        for (dst, src) in [
            (&mut self.conv_weights, &update.conv_weights),
            (&mut self.conv_bias, &update.conv_bias),
            (&mut self.dense.weights, &update.dense_weights),
            (&mut self.dense.bias, &update.dense_bias),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

impl DifferentiableModel for ConvNetSmall {
    fn input_shape(&self) -> InputShape {
        self.shape
    }

    fn num_outputs(&self) -> usize {
        self.dense.outputs
    }

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        assert!(self.shape.matches(input), "input shape mismatch");
        let fwd = self.forward(input.values());
        self.dense.forward(&fwd.pooled)
    }

    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        assert!(self.shape.matches(input), "input shape mismatch");
        let fwd = self.forward(input.values());
        let (dz, _) = self.backward(input.values(), &fwd, cotangent, false);
        ScalarField2D::from_raw(input.width(), input.height(), dz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_gradient;

    fn random_field(shape: InputShape, seed: u64) -> ScalarField2D {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField2D::from_fn(shape.width, shape.height, |_, _| rng.random::<f64>())
    }

    #[test]
    fn linear_model_evaluates_and_differentiates_exactly() {
        let shape = InputShape::new(2, 2);
        let w = vec![1.0, -2.0, 0.5, 0.0, 3.0, 0.0, 0.0, 1.0];
        let m = LinearModel::new(shape, w.clone(), vec![0.25, -1.0]).unwrap();
        let z = ScalarField2D::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = m.evaluate(&z);
        assert!((out[0] - (0.25 + 0.1 - 0.4 + 0.15)).abs() < 1e-15);
        assert!((out[1] - (-1.0 + 0.3 + 0.4)).abs() < 1e-15);
        assert_eq!(m.gradient(&z, 0).values(), &w[0..4]);
        assert_eq!(m.gradient(&z, 1).values(), &w[4..8]);
        assert_eq!(m.dummy_coordinates(0), vec![3]);
        assert_eq!(m.dummy_coordinates(1), vec![1, 2]);
        assert!(check_gradient(&m, &z, 1, 1e-3).unwrap() <= 1e-9);
    }

    #[test]
    fn linear_model_rejects_bad_shapes() {
        assert!(LinearModel::new(InputShape::new(2, 2), vec![0.0; 7], vec![0.0; 2]).is_err());
    }

    #[test]
    fn zero_mlp_returns_bias_with_zero_gradient() {
        let shape = InputShape::new(3, 3);
        let m = MlpTanh::zeroed(shape, &[5, 4], vec![0.3, -0.7]);
        let z = random_field(shape, 1);
        assert_eq!(m.evaluate(&z), vec![0.3, -0.7]);
        for k in 0..2 {
            assert!(m.gradient(&z, k).values().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_difference() {
        let shape = InputShape::new(4, 4);
        let m = MlpTanh::random(shape, &[8, 6], 3, 7);
        for seed in 0..5 {
            let z = random_field(shape, seed);
            for k in 0..3 {
                let err = check_gradient(&m, &z, k, 1e-4).unwrap();
                assert!(err <= 1e-5, "seed {seed} class {k}: {err}");
            }
        }
    }

    #[test]
    fn mlp_layer_chain_is_validated() {
        let shape = InputShape::new(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = DenseLayer::random(4, 3, &mut rng);
        let b = DenseLayer::random(2, 1, &mut rng);
        assert!(MlpTanh::new(shape, vec![a.clone(), b]).is_err());
        assert!(MlpTanh::new(InputShape::new(3, 2), vec![a]).is_err());
        assert!(MlpTanh::new(shape, vec![]).is_err());
    }

    #[test]
    fn convnet_gradient_matches_finite_difference() {
        let shape = InputShape::new(16, 16);
        let m = ConvNetSmall::random(shape, 3, 3);
        let z = random_field(shape, 4);
        for k in 0..3 {
            let err = check_gradient(&m, &z, k, 1e-4).unwrap();
            assert!(err <= 1e-5, "class {k}: {err}");
        }
        // odd sizes drop the last row/column in pooling
        let odd = InputShape::new(7, 5);
        let m = ConvNetSmall::random(odd, 2, 8);
        let z = random_field(odd, 9);
        assert!(check_gradient(&m, &z, 1, 1e-4).unwrap() <= 1e-5);
    }

    #[test]
    fn convnet_parameter_gradients_match_finite_difference() {
        let shape = InputShape::new(6, 6);
        let net = ConvNetSmall::random(shape, 2, 21);
        let z = random_field(shape, 22);
        let cot = vec![0.7, -1.3];
        let objective = |n: &ConvNetSmall| -> f64 {
            n.evaluate(&z).iter().zip(&cot).map(|(l, c)| l * c).sum()
        };
        let (_, grads) = net.logits_and_param_grads(&z, |_| cot.clone());
        let eps = 1e-5;
        let probe = |which: usize, i: usize| -> f64 {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let (p, m) = match which {
                0 => (&mut plus.conv_weights[i], &mut minus.conv_weights[i]),
                1 => (&mut plus.conv_bias[i], &mut minus.conv_bias[i]),
                2 => (&mut plus.dense.weights[i], &mut minus.dense.weights[i]),
                _ => (&mut plus.dense.bias[i], &mut minus.dense.bias[i]),
            };
            *p += eps;
            *m -= eps;
            (objective(&plus) - objective(&minus)) / (2.0 * eps)
        };
        for i in 0..grads.conv_weights.len() {
            assert!((probe(0, i) - grads.conv_weights[i]).abs() < 1e-7);
        }
        for i in 0..grads.conv_bias.len() {
            assert!((probe(1, i) - grads.conv_bias[i]).abs() < 1e-7);
        }
        for i in (0..grads.dense_weights.len()).step_by(5) {
            assert!((probe(2, i) - grads.dense_weights[i]).abs() < 1e-7);
        }
        for i in 0..grads.dense_bias.len() {
            assert!((probe(3, i) - grads.dense_bias[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let shape = InputShape::new(8, 8);
        let m = ConvNetSmall::random(shape, 3, 1);
        let z = random_field(shape, 2);
        let a = m.evaluate(&z);
        let b = m.evaluate(&z.clone());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
