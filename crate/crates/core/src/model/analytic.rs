use serde::{Deserialize, Serialize};

use super::{DifferentiableModel, InputShape};
use crate::scale_space::ScalarField2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticKind {
    /// `F(z) = sum z^2`
    SumOfSquares,
    /// `F(z) = sum t * z` for a fixed template `t` (a centred Gaussian by default).
    GaussianBumpDetector,
    /// `F(z) = z(0, 0)`
    SinglePixel,
}

impl AnalyticKind {
    pub fn tag(self) -> &'static str {
        match self {
            AnalyticKind::SumOfSquares => "sum_of_squares",
            AnalyticKind::GaussianBumpDetector => "gaussian_bump_detector",
            AnalyticKind::SinglePixel => "single_pixel",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "sum_of_squares" => Some(AnalyticKind::SumOfSquares),
            "gaussian_bump_detector" => Some(AnalyticKind::GaussianBumpDetector),
            "single_pixel" => Some(AnalyticKind::SinglePixel),
            _ => None,
        }
    }
}

/// Single-output closed-form fixtures with exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticModel {
    kind: AnalyticKind,
    shape: InputShape,
    template: Option<ScalarField2D>,
}

/// Build one of the closed-form fixtures for inputs of `shape`.
pub fn analytic_model(kind: AnalyticKind, shape: InputShape) -> AnalyticModel {
    assert!(!shape.is_empty(), "input shape must be non-empty");
    let template = match kind {
        AnalyticKind::GaussianBumpDetector => Some(gaussian_template(shape)),
        _ => None,
    };
    AnalyticModel {
        kind,
        shape,
        template,
    }
}

/// Centred Gaussian with standard deviation `max(1, min(h, w) / 6)` and unit peak.
pub fn gaussian_template(shape: InputShape) -> ScalarField2D {
    let s = (shape.height.min(shape.width) as f64 / 6.0).max(1.0);
    let cx = (shape.width as f64 - 1.0) / 2.0;
    let cy = (shape.height as f64 - 1.0) / 2.0;
    ScalarField2D::from_fn(shape.width, shape.height, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
    })
}

impl AnalyticModel {
    /// Correlation detector with a caller-supplied template.
    pub fn with_template(template: ScalarField2D) -> Self {
        Self {
            kind: AnalyticKind::GaussianBumpDetector,
            shape: InputShape::new(template.height(), template.width()),
            template: Some(template),
        }
    }

    pub fn kind(&self) -> AnalyticKind {
        self.kind
    }

    pub fn template(&self) -> Option<&ScalarField2D> {
        self.template.as_ref()
    }
}

impl DifferentiableModel for AnalyticModel {
    fn input_shape(&self) -> InputShape {
        self.shape
    }

    fn num_outputs(&self) -> usize {
        1
    }

    fn evaluate(&self, input: &ScalarField2D) -> Vec<f64> {
        assert!(self.shape.matches(input), "input shape mismatch");
        let v = match self.kind {
            AnalyticKind::SumOfSquares => input.values().iter().map(|v| v * v).sum(),
            AnalyticKind::GaussianBumpDetector => {
                let t = self.template.as_ref().expect("detector has a template");
                t.values().iter().zip(input.values()).map(|(a, b)| a * b).sum()
            }
            AnalyticKind::SinglePixel => input.values()[0],
        };
        vec![v]
    }

    fn vjp(&self, input: &ScalarField2D, cotangent: &[f64]) -> ScalarField2D {
        assert!(self.shape.matches(input), "input shape mismatch");
        let c = cotangent[0];
        match self.kind {
            AnalyticKind::SumOfSquares => input.map(|v| 2.0 * v * c),
            AnalyticKind::GaussianBumpDetector => {
                self.template.as_ref().expect("detector has a template").scale(c)
            }
            AnalyticKind::SinglePixel => {
                let mut g = ScalarField2D::zeros(input.width(), input.height());
                g.values_mut()[0] = c;
                g
            }
        }
    }

    fn dummy_coordinates(&self, _output: usize) -> Vec<usize> {
        match self.kind {
            AnalyticKind::SumOfSquares => Vec::new(),
            AnalyticKind::GaussianBumpDetector => self
                .template
                .as_ref()
                .expect("detector has a template")
                .values()
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == 0.0)
                .map(|(i, _)| i)
                .collect(),
            AnalyticKind::SinglePixel => (1..self.shape.len()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_gradient;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let m = analytic_model(AnalyticKind::SumOfSquares, InputShape::new(3, 4));
        let z = ScalarField2D::from_fn(4, 3, |x, y| x as f64 * 0.5 - y as f64);
        let g = m.gradient(&z, 0);
        for (gi, zi) in g.values().iter().zip(z.values()) {
            assert_eq!(*gi, 2.0 * zi);
        }
        assert!(check_gradient(&m, &z, 0, 1e-4).unwrap() <= 1e-6);
    }

    #[test]
    fn single_pixel_gradient_is_indicator() {
        let m = analytic_model(AnalyticKind::SinglePixel, InputShape::new(3, 3));
        let z = ScalarField2D::filled(3, 3, 0.4);
        let g = m.gradient(&z, 0);
        assert_eq!(g.values()[0], 1.0);
        assert!(g.values()[1..].iter().all(|&v| v == 0.0));
        assert_eq!(m.dummy_coordinates(0), (1..9).collect::<Vec<_>>());
    }

    /// Shift a field by (dx, dy) with zero fill.
    fn shifted(f: &ScalarField2D, dx: isize, dy: isize) -> ScalarField2D {
        ScalarField2D::from_fn(f.width(), f.height(), |x, y| {
            let sx = x as isize - dx;
            let sy = y as isize - dy;
            if sx < 0 || sy < 0 || sx >= f.width() as isize || sy >= f.height() as isize {
                0.0
            } else {
                f.get(sx as usize, sy as usize)
            }
        })
    }

    #[test]
    fn bump_detector_scores_its_template_highest() {
        let shape = InputShape::new(12, 12);
        let m = analytic_model(AnalyticKind::GaussianBumpDetector, shape);
        let t = m.template().unwrap().clone();
        let own = m.evaluate(&t)[0];
        for dy in -11..=11 {
            for dx in -11..=11 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let other = m.evaluate(&shifted(&t, dx, dy))[0];
                assert!(other < own, "shift ({dx},{dy}) scored {other} >= {own}");
            }
        }
    }
}
