use serde::Serialize;

use crate::error::{Error, Result};
use crate::scale_space::ScalarField2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    /// Green for positive, red for negative attribution.
    #[default]
    SignedGreenRed,
    GrayscaleAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RenderConfig {
    pub colormap: Colormap,
    /// Percentile of `|values|` mapped to full intensity.
    pub percentile_clip: f64,
    /// Blend the map half and half with the input.
    pub overlay: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            colormap: Colormap::default(),
            percentile_clip: 99.0,
            overlay: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.percentile_clip > 0.0 && self.percentile_clip <= 100.0 {
            Ok(())
        } else {
            Err(Error::param(format!(
                "percentile clip must be in (0, 100], got {}",
                self.percentile_clip
            )))
        }
    }
}

/// Nearest-rank percentile of `|values|`.
pub fn abs_percentile(values: &ScalarField2D, p: f64) -> f64 {
    let mut mags: Vec<f64> = values.values().iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * mags.len() as f64).ceil() as usize;
    mags[rank.clamp(1, mags.len()) - 1]
}

/// RGB8 pixels for `values`. `input` is required when overlaying.
pub fn render(values: &ScalarField2D, input: Option<&ScalarField2D>, config: &RenderConfig) -> Result<Vec<u8>> {
    config.validate()?;
    let clip = abs_percentile(values, config.percentile_clip);
    let base = match (config.overlay, input) {
        (false, _) => None,
        (true, Some(z)) if z.same_shape(values) => Some(z),
        (true, Some(z)) => {
            return Err(Error::ShapeMismatch {
                expected: values.shape_string(),
                found: z.shape_string(),
            })
        }
        (true, None) => return Err(Error::param("overlay needs the input image")),
    };
    let mut out = Vec::with_capacity(values.len() * 3);
    for (i, &v) in values.values().iter().enumerate() {
        let m = if clip > 0.0 { (v.abs() / clip).min(1.0) } else { 0.0 };
        let rgb = match config.colormap {
            Colormap::SignedGreenRed if v > 0.0 => [0.0, m, 0.0],
            Colormap::SignedGreenRed => [m, 0.0, 0.0],
            Colormap::GrayscaleAbs => [m; 3],
        };
        let rgb = match base {
            Some(z) => {
                let g = z.values()[i].clamp(0.0, 1.0);
                rgb.map(|c| 0.5 * c + 0.5 * g)
            }
            None => rgb,
        };
        out.extend(rgb.map(|c| (c * 255.0).round() as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outlier_is_clipped() {
        let mut f = ScalarField2D::from_fn(10, 10, |x, _| if x % 2 == 0 { 1.0 } else { -0.5 });
        f.set(0, 0, 1e6);
        let px = render(&f, None, &RenderConfig::default()).unwrap();
        // Pixel (2, 0) is positive and saturates green despite the outlier.
        assert_eq!(&px[6..9], &[0, 255, 0]);
        assert_eq!(&px[3..6], &[128, 0, 0]);
    }

    #[test]
    fn zero_map_is_black_and_bad_clip_rejected() {
        let f = ScalarField2D::zeros(3, 2);
        assert!(render(&f, None, &RenderConfig::default()).unwrap().iter().all(|&b| b == 0));
        let bad = RenderConfig {
            percentile_clip: 0.0,
            ..RenderConfig::default()
        };
        assert!(render(&f, None, &bad).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let f = ScalarField2D::from_fn(100, 1, |x, _| -(x as f64 + 1.0));
        assert_eq!(abs_percentile(&f, 99.0), 99.0);
        assert_eq!(abs_percentile(&f, 100.0), 100.0);
        assert_eq!(abs_percentile(&f, 0.5), 1.0);
    }
}
