//! Minimal Adam fit of [`ConvNetSmall`] on labelled fields, used to build
//! classifier fixtures.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nets::{ConvNetGrads, ConvNetSmall};
use super::{argmax, softmax, DifferentiableModel, InputShape};
use crate::error::{Error, Result};
use crate::scale_space::ScalarField2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
}

struct Adam {
    m: ConvNetGrads,
    v: ConvNetGrads,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, grads: &ConvNetGrads, lr: f64) -> ConvNetGrads {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut update = grads.clone();
        for ((m, v), (g, u)) in [
            (&mut self.m.conv_weights, &mut self.v.conv_weights),
            (&mut self.m.conv_bias, &mut self.v.conv_bias),
            (&mut self.m.dense_weights, &mut self.v.dense_weights),
            (&mut self.m.dense_bias, &mut self.v.dense_bias),
        ]
        .into_iter()
        .zip([
            (&grads.conv_weights, &mut update.conv_weights),
            (&grads.conv_bias, &mut update.conv_bias),
            (&grads.dense_weights, &mut update.dense_weights),
            (&grads.dense_bias, &mut update.dense_bias),
        ]) {
            for i in 0..g.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                u[i] = -lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
        update
    }
}

/// Fit a randomly initialised convnet to `(field, class)` pairs by
/// minimising softmax cross-entropy. Deterministic for a given config.
pub fn fit_convnet(
    samples: &[(ScalarField2D, usize)],
    num_classes: usize,
    config: &FitConfig,
) -> Result<(ConvNetSmall, FitReport)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("cannot fit on an empty dataset"))?;
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::param("epochs and batch_size must be positive"));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::param("learning rate must be positive"));
    }
    let shape = InputShape::new(first.0.height(), first.0.width());
    for (i, (f, c)) in samples.iter().enumerate() {
        shape.check(f)?;
        if *c >= num_classes {
            return Err(Error::validation(format!(
                "sample {i} has class {c} but only {num_classes} classes exist"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = ConvNetSmall::random(shape, num_classes, config.seed);
    let mut adam = Adam {
        m: ConvNetGrads::zeros_like(&net),
        v: ConvNetGrads::zeros_like(&net),
        t: 0,
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let per_sample: Vec<ConvNetGrads> = batch
                .par_iter()
                .map(|&i| {
                    let (field, class) = &samples[i];
                    let (_, g) = net.logits_and_param_grads(field, |logits| {
                        let mut p = softmax(logits);
                        p[*class] -= 1.0;
                        p.iter().map(|v| v * scale).collect()
                    });
                    g
                })
                .collect();
            let mut total = ConvNetGrads::zeros_like(&net);
            for g in &per_sample {
                total.accumulate(g);
            }
            let update = adam.step(&total, config.learning_rate);
            net.apply_update(&update);
        }
    }

    let (loss, correct) = samples
        .iter()
        .map(|(f, c)| {
            let logits = net.evaluate(f);
            let p = softmax(&logits);
            (-(p[*c].max(1e-300)).ln(), usize::from(argmax(&logits) == *c))
        })
        .fold((0.0, 0), |(l, n), (li, ci)| (l + li, n + ci));
    let report = FitReport {
        final_loss: loss / samples.len() as f64,
        train_accuracy: correct as f64 / samples.len() as f64,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_samples() -> Vec<(ScalarField2D, usize)> {
        // class 0: bright left half, class 1: bright right half
        (0..24)
            .map(|i| {
                let class = i % 2;
                let jitter = (i as f64 * 0.37).sin() * 0.1;
                let f = ScalarField2D::from_fn(6, 6, |x, _| {
                    let bright = if class == 0 { x < 3 } else { x >= 3 };
                    if bright { 0.9 + jitter } else { 0.1 - jitter }
                });
                (f, class)
            })
            .collect()
    }

    #[test]
    fn fit_separates_a_trivial_problem() {
        let config = FitConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 0.02,
            seed: 3,
        };
        let (_, report) = fit_convnet(&toy_samples(), 2, &config).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        assert!(report.final_loss < 0.1, "{report:?}");
    }

    #[test]
    fn fit_is_deterministic() {
        let config = FitConfig {
            epochs: 3,
            batch_size: 5,
            learning_rate: 0.01,
            seed: 9,
        };
        let (a, _) = fit_convnet(&toy_samples(), 2, &config).unwrap();
        let (b, _) = fit_convnet(&toy_samples(), 2, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_validates_inputs() {
        assert!(fit_convnet(&[], 2, &FitConfig::default()).is_err());
        let mut s = toy_samples();
        s[3].1 = 5;
        assert!(fit_convnet(&s, 2, &FitConfig::default()).is_err());
    }
}
