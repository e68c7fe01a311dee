//! Differentiable models: the interface the attribution engine integrates
//! against, the built-in networks, and a finite-difference gradient check.

mod analytic;
mod file;
mod fit;
mod nets;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scale_space::ScalarField2D;

pub use analytic::{analytic_model, gaussian_template, AnalyticKind, AnalyticModel};
pub use file::{load_model, save_model, ModelFile, ModelLayer, FORMAT_VERSION};
pub use fit::{fit_convnet, FitConfig, FitReport};
pub use nets::{ConvNetSmall, DenseLayer, LinearModel, MlpTanh};

/// Input dimensions of a model. 1-D models use `height == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, field: &ScalarField2D) -> bool {
        field.height() == self.height && field.width() == self.width
    }

    pub fn check(&self, field: &ScalarField2D) -> Result<()> {
        if self.matches(field) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.to_string(),
                found: field.shape_string(),
            })
        }
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A function from a scalar field to a vector of real scores with an exact
/// gradient.
///
/// Implementations may panic if handed an input whose shape differs from
/// [`input_shape`](Self::input_shape); callers in this crate validate shapes
/// before evaluating.
pub trait DifferentiableModel: Send + Sync {
    fn input_shape(&self) -> InputShape;

    fn num_outputs(&self) -> usize;

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64>;

    /// Vector-Jacobian product: `sum_k cotangent[k] * dF_k/dinput`.
    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D;

    /// `dF_output/dinput`, same shape as the input.
    fn gradient(&self, input: &ScalarField2D, output: usize) -> ScalarField2D {
        let mut onehot = vec![0.0; self.num_outputs()];
        onehot[output] = 1.0;
        self.vjp(input, &onehot)
    }

    /// Flat pixel indices on which output `output` provably does not depend.
    fn dummy_coordinates(&self, _output: usize) -> Vec<usize> {
        Vec::new()
    }
}

impl<M: DifferentiableModel + ?Sized> DifferentiableModel for &M {
    fn input_shape(&self) -> InputShape {
        (**self).input_shape()
    }
    fn num_outputs(&self) -> usize {
        (**self).num_outputs()
    }
    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        (**self).evaluate(input)
    }
    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        (**self).vjp(input, cotangent)
    }
    fn gradient(&self, input: &ScalarField2D, output: usize) -> ScalarField2D {
        (**self).gradient(input, output)
    }
    fn dummy_coordinates(&self, output: usize) -> Vec<usize> {
        (**self).dummy_coordinates(output)
    }
}

impl<M: DifferentiableModel + ?Sized> DifferentiableModel for Box<M> {
    fn input_shape(&self) -> InputShape {
        (**self).input_shape()
    }
    fn num_outputs(&self) -> usize {
        (**self).num_outputs()
    }
    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        (**self).evaluate(input)
    }
    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        (**self).vjp(input, cotangent)
    }
    fn gradient(&self, input: &ScalarField2D, output: usize) -> ScalarField2D {
        (**self).gradient(input, output)
    }
    fn dummy_coordinates(&self, output: usize) -> Vec<usize> {
        (**self).dummy_coordinates(output)
    }
}

impl<M: DifferentiableModel + ?Sized> DifferentiableModel for Arc<M> {
    fn input_shape(&self) -> InputShape {
        (**self).input_shape()
    }
    fn num_outputs(&self) -> usize {
        (**self).num_outputs()
    }
    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        (**self).evaluate(input)
    }
    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        (**self).vjp(input, cotangent)
    }
    fn gradient(&self, input: &ScalarField2D, output: usize) -> ScalarField2D {
        (**self).gradient(input, output)
    }
    fn dummy_coordinates(&self, output: usize) -> Vec<usize> {
        (**self).dummy_coordinates(output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    MlpTanh,
    ConvnetSmall,
    Analytic,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::MlpTanh => "mlp_tanh",
            Architecture::ConvnetSmall => "convnet_small",
            Architecture::Analytic => "analytic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Linear(LinearModel),
    MlpTanh(MlpTanh),
    ConvNetSmall(ConvNetSmall),
    Analytic(AnalyticModel),
}

/// One of the built-in serializable models together with its class names.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    network: Network,
    class_names: Vec<String>,
}

impl Model {
    pub fn new(network: Network) -> Self {
        let n = match &network {
            Network::Linear(m) => m.num_outputs(),
            Network::MlpTanh(m) => m.num_outputs(),
            Network::ConvNetSmall(m) => m.num_outputs(),
            Network::Analytic(m) => m.num_outputs(),
        };
        Self {
            network,
            class_names: (0..n).map(|i| format!("class_{i}")).collect(),
        }
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_outputs() {
            return Err(Error::validation(format!(
                "class_names: expected {} names, found {}",
                self.num_outputs(),
                names.len()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn architecture(&self) -> Architecture {
        match self.network {
            Network::Linear(_) => Architecture::Linear,
            Network::MlpTanh(_) => Architecture::MlpTanh,
            Network::ConvNetSmall(_) => Architecture::ConvnetSmall,
            Network::Analytic(_) => Architecture::Analytic,
        }
    }

    fn inner(&self) -> &dyn DifferentiableModel {
        match &self.network {
            Network::Linear(m) => m,
            Network::MlpTanh(m) => m,
            Network::ConvNetSmall(m) => m,
            Network::Analytic(m) => m,
        }
    }
}

impl From<LinearModel> for Model {
    fn from(m: LinearModel) -> Self {
        Model::new(Network::Linear(m))
    }
}

impl From<MlpTanh> for Model {
    fn from(m: MlpTanh) -> Self {
        Model::new(Network::MlpTanh(m))
    }
}

impl From<ConvNetSmall> for Model {
    fn from(m: ConvNetSmall) -> Self {
        Model::new(Network::ConvNetSmall(m))
    }
}

impl From<AnalyticModel> for Model {
    fn from(m: AnalyticModel) -> Self {
        Model::new(Network::Analytic(m))
    }
}

impl DifferentiableModel for Model {
    fn input_shape(&self) -> InputShape {
        self.inner().input_shape()
    }
    fn num_outputs(&self) -> usize {
        self.inner().num_outputs()
    }
    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        self.inner().evaluate(input)
    }
    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        self.inner().vjp(input, cotangent)
    }
    fn gradient(&self, input: &ScalarField2D, output: usize) -> ScalarField2D {
        self.inner().gradient(input, output)
    }
    fn dummy_coordinates(&self, output: usize) -> Vec<usize> {
        self.inner().dummy_coordinates(output)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax head over a logit model's outputs.
#[derive(Debug, Clone)]
pub struct Softmax<M>(pub M);

impl<M: DifferentiableModel> DifferentiableModel for Softmax<M> {
    fn input_shape(&self) -> InputShape {
        self.0.input_shape()
    }

    fn num_outputs(&self) -> usize {
        self.0.num_outputs()
    }

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        softmax(&self.0.evaluate(input))
    }

    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        // dp_k/dl_j = p_k (delta_kj - p_j)
        let p = self.evaluate(input);
        let weighted: f64 = cotangent.iter().zip(&p).map(|(c, p)| c * p).sum();
        let inner: Vec<f64> = p
            .iter()
            .zip(cotangent)
            .map(|(pj, cj)| pj * (cj - weighted))
            .collect();
        self.0.vjp(input, &inner)
    }

    fn dummy_coordinates(&self, _output: usize) -> Vec<usize> {
        // Every output depends on every logit; only pixels no logit reads are dummies.
        let n = self.0.num_outputs();
        let mut common = self.0.dummy_coordinates(0);
        for k in 1..n {
            let other = self.0.dummy_coordinates(k);
            common.retain(|i| other.contains(i));
        }
        common
    }
}

/// `a * first + b * second`, output by output.
#[derive(Debug, Clone)]
pub struct LinearCombination<A, B> {
    pub a: f64,
    pub first: A,
    pub b: f64,
    pub second: B,
}

impl<A: DifferentiableModel, B: DifferentiableModel> LinearCombination<A, B> {
    pub fn new(a: f64, first: A, b: f64, second: B) -> Result<Self> {
        if first.input_shape() != second.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: first.input_shape().to_string(),
                found: second.input_shape().to_string(),
            });
        }
        if first.num_outputs() != second.num_outputs() {
            return Err(Error::validation(format!(
                "combined models must have equal output counts ({} vs {})",
                first.num_outputs(),
                second.num_outputs()
            )));
        }
        Ok(Self { a, first, b, second })
    }
}

impl<A: DifferentiableModel, B: DifferentiableModel> DifferentiableModel for LinearCombination<A, B> {
    fn input_shape(&self) -> InputShape {
        self.first.input_shape()
    }

    fn num_outputs(&self) -> usize {
        self.first.num_outputs()
    }

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        let f = self.first.evaluate(input);
        let g = self.second.evaluate(input);
        f.iter().zip(&g).map(|(f, g)| self.a * f + self.b * g).collect()
    }

    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        let f = self.first.vjp(input, cotangent);
        let g = self.second.vjp(input, cotangent);
        f.zip_map(&g, |f, g| self.a * f + self.b * g)
    }

    fn dummy_coordinates(&self, output: usize) -> Vec<usize> {
        let mut common = self.first.dummy_coordinates(output);
        let other = self.second.dummy_coordinates(output);
        common.retain(|i| other.contains(i));
        common
    }
}

/// `F(w) = inner(w')` where `w'` equals `w` except at one pixel, which is
/// mapped back through the affine feature change `w'_j = (w_j - offset) / scale`.
#[derive(Debug, Clone)]
pub struct AffineFeature<M> {
    pub inner: M,
    pub pixel: usize,
    pub scale: f64,
    pub offset: f64,
}

impl<M: DifferentiableModel> AffineFeature<M> {
    pub fn new(inner: M, pixel: usize, scale: f64, offset: f64) -> Result<Self> {
        if scale == 0.0 || !scale.is_finite() || !offset.is_finite() {
            return Err(Error::param(format!(
                "affine feature change needs finite non-zero scale, got c={scale}, d={offset}"
            )));
        }
        if pixel >= inner.input_shape().len() {
            return Err(Error::param(format!(
                "pixel {pixel} out of range for input {}",
                inner.input_shape()
            )));
        }
        Ok(Self {
            inner,
            pixel,
            scale,
            offset,
        })
    }

    /// Apply the forward feature change `z_j -> scale * z_j + offset`.
    pub fn transform(&self, field: &ScalarField2D) -> ScalarField2D {
        let mut out = field.clone();
        let v = &mut out.values_mut()[self.pixel];
        *v = self.scale * *v + self.offset;
        out
    }

    fn untransform(&self, field: &ScalarField2D) -> ScalarField2D {
        let mut out = field.clone();
        let v = &mut out.values_mut()[self.pixel];
        *v = (*v - self.offset) / self.scale;
        out
    }
}

impl<M: DifferentiableModel> DifferentiableModel for AffineFeature<M> {
    fn input_shape(&self) -> InputShape {
        self.inner.input_shape()
    }

    fn num_outputs(&self) -> usize {
        self.inner.num_outputs()
    }

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        self.inner.evaluate(&self.untransform(input))
    }

    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        let mut g = self.inner.vjp(&self.untransform(input), cotangent);
        g.values_mut()[self.pixel] /= self.scale;
        g
    }

    fn dummy_coordinates(&self, output: usize) -> Vec<usize> {
        self.inner.dummy_coordinates(output)
    }
}

/// Largest absolute gap between `model.gradient` and a central-difference
/// estimate with the given step.
pub fn check_gradient<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output_index: usize,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::param(format!("step must be in (0, 1e-2], got {step}")));
    }
    model.input_shape().check(input)?;
    if output_index >= model.num_outputs() {
        return Err(Error::validation(format!(
            "output index {output_index} out of range ({} outputs)",
            model.num_outputs()
        )));
    }
    let analytic = model.gradient(input, output_index);
    let mut probe = input.clone();
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = model.evaluate(&probe)[output_index];
        probe.values_mut()[i] = orig - step;
        let minus = model.evaluate(&probe)[output_index];
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((numeric - analytic.values()[i]).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, seed: u64) -> ScalarField2D {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ScalarField2D::from_fn(w, h, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let q = softmax(&[1001.0, 1002.0, 1003.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn softmax_head_gradient_matches_finite_difference() {
        let mlp = MlpTanh::random(InputShape::new(4, 5), &[6], 3, 11);
        let head = Softmax(&mlp);
        let x = field(4, 5, 2);
        for k in 0..3 {
            assert!(check_gradient(&head, &x, k, 1e-4).unwrap() < 1e-8);
        }
    }

    #[test]
    fn affine_feature_gradient_matches_finite_difference() {
        let mlp = MlpTanh::random(InputShape::new(3, 3), &[4], 2, 5);
        let m = AffineFeature::new(&mlp, 4, -2.0, 0.5).unwrap();
        let x = field(3, 3, 9);
        assert!(check_gradient(&m, &x, 1, 1e-4).unwrap() < 1e-8);
        let back = m.untransform(&m.transform(&x));
        assert!(back.max_abs_diff(&x) < 1e-15);
        assert!(AffineFeature::new(&mlp, 4, 0.0, 1.0).is_err());
        assert!(AffineFeature::new(&mlp, 9, 1.0, 1.0).is_err());
    }

    #[test]
    fn linear_combination_rejects_mismatched_models() {
        let a = analytic_model(AnalyticKind::SumOfSquares, InputShape::new(4, 4));
        let b = analytic_model(AnalyticKind::SumOfSquares, InputShape::new(4, 5));
        assert!(LinearCombination::new(1.0, &a, 1.0, &b).is_err());
        let c = MlpTanh::random(InputShape::new(4, 4), &[3], 2, 0);
        assert!(LinearCombination::new(1.0, &a, 1.0, &c).is_err());
    }

    #[test]
    fn check_gradient_validates_step() {
        let m = analytic_model(AnalyticKind::SumOfSquares, InputShape::new(2, 2));
        let x = ScalarField2D::zeros(2, 2);
        assert!(check_gradient(&m, &x, 0, 0.0).is_err());
        assert!(check_gradient(&m, &x, 0, 0.02).is_err());
        assert!(check_gradient(&m, &x, 1, 1e-4).is_err());
        assert!(check_gradient(&m, &ScalarField2D::zeros(3, 2), 0, 1e-4).is_err());
    }
}
