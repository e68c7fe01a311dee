//! Path-method attributions over a [`DifferentiableModel`].
//!
//! Every method here discretizes a path of fields from an informationless
//! start to the explicand and accumulates `grad F(midpoint) * segment` over
//! its segments. Per-segment partial maps are kept so that the final sum is
//! taken in a fixed order, independent of how gradients were scheduled.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, DifferentiableModel, Softmax};
use crate::scale_space::{
    blur2d, laplacian, scale_family, uniform_alpha_grid, BoundaryMode, ScalarField2D,
    ScaleParameter,
};

/// Tolerance on `|F(max blur) - F(mean image)|` before a blur path is
/// reported as not reaching an informationless start.
pub const INFORMATIONLESS_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Baseline {
    Black,
    /// Uniform noise over the input's value range.
    Random { seed: u64 },
    /// Constant field at the input's mean intensity.
    Grayscale,
    #[serde(skip)]
    Custom(ScalarField2D),
}

impl Baseline {
    /// The baseline field for `input`.
    pub fn resolve(&self, input: &ScalarField2D) -> Result<ScalarField2D> {
        let (w, h) = (input.width(), input.height());
        match self {
            Baseline::Black => Ok(ScalarField2D::zeros(w, h)),
            Baseline::Grayscale => Ok(ScalarField2D::filled(w, h, input.mean())),
            Baseline::Random { seed } => {
                let (lo, hi) = (input.min(), input.max());
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(ScalarField2D::from_fn(w, h, |_, _| {
                    lo + (hi - lo) * rng.random::<f64>()
                }))
            }
            Baseline::Custom(field) => {
                if !field.same_shape(input) {
                    return Err(Error::ShapeMismatch {
                        expected: input.shape_string(),
                        found: field.shape_string(),
                    });
                }
                Ok(field.clone())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Baseline::Black => "black".into(),
            Baseline::Random { seed } => format!("random:{seed}"),
            Baseline::Grayscale => "grayscale".into(),
            Baseline::Custom(_) => "custom".into(),
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "black" => Ok(Baseline::Black),
            "grayscale" => Ok(Baseline::Grayscale),
            _ => match s.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| Baseline::Random { seed })
                    .map_err(|_| Error::param(format!("bad random baseline seed in {s:?}"))),
                None => Err(Error::param(format!(
                    "unknown baseline {s:?} (expected black, grayscale or random:<seed>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    /// Straight line from a baseline to the input.
    Intensity { baseline: Baseline },
    /// Gaussian scale space from `sigma_max` down to the input.
    Blur { sigma_max: ScaleParameter },
}

/// A discretized attribution path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    #[serde(flatten)]
    pub kind: PathKind,
    pub steps: usize,
    pub boundary: BoundaryMode,
}

impl PathSpec {
    pub fn intensity(baseline: Baseline, steps: usize) -> Self {
        Self {
            kind: PathKind::Intensity { baseline },
            steps,
            boundary: BoundaryMode::default(),
        }
    }

    pub fn blur(sigma_max: ScaleParameter, steps: usize) -> Self {
        Self {
            kind: PathKind::Blur { sigma_max },
            steps,
            boundary: BoundaryMode::default(),
        }
    }

    /// Blur path with [`default_sigma_max`] for `input`.
    pub fn blur_default(input: &ScalarField2D, steps: usize) -> Self {
        Self::blur(default_sigma_max(input.width(), input.height()), steps)
    }

    pub fn with_boundary(mut self, boundary: BoundaryMode) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn is_blur(&self) -> bool {
        matches!(self.kind, PathKind::Blur { .. })
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps must be at least 1"));
        }
        if let PathKind::Blur { sigma_max } = &self.kind {
            if sigma_max.is_zero() {
                return Err(Error::param("blur path needs sigma_max > 0"));
            }
        }
        Ok(())
    }

    /// The `steps + 1` path points from the informationless start to
    /// `input`, with each point's coordinate (`t` for intensity paths,
    /// `sigma` for blur paths).
    pub fn discretize(&self, input: &ScalarField2D) -> Result<(Vec<ScalarField2D>, Vec<f64>)> {
        self.validate()?;
        let s = self.steps;
        match &self.kind {
            PathKind::Intensity { baseline } => {
                let start = baseline.resolve(input)?;
                let delta = input.sub(&start);
                let ts: Vec<f64> = (0..=s).map(|i| i as f64 / s as f64).collect();
                let points = ts
                    .iter()
                    .map(|&t| {
                        if t == 1.0 {
                            input.clone()
                        } else {
                            start.zip_map(&delta, |a, d| a + t * d)
                        }
                    })
                    .collect();
                Ok((points, ts))
            }
            PathKind::Blur { sigma_max } => {
                let grid = uniform_alpha_grid(*sigma_max, s);
                let mut family = scale_family(input, &grid, self.boundary)?;
                family.reverse();
                let sigmas = grid.iter().rev().map(|g| g.sigma()).collect();
                Ok((family, sigmas))
            }
        }
    }
}

/// Half the smaller side, which is `4 * min(h, w) / 8`.
pub fn default_sigma_max(width: usize, height: usize) -> ScaleParameter {
    ScaleParameter::new(4.0 * width.min(height) as f64 / 8.0).expect("positive finite")
}

/// How the scale derivative of the blur path is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurBackend {
    /// Difference of consecutive blurred images.
    #[default]
    FiniteDifference,
    /// `dL/dalpha = laplacian(L) / 4`, the five-point Laplacian of the image
    /// blurred to each segment's mid scale.
    Laplacian,
}

/// Signed per-pixel attribution for one model output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionMap {
    pub values: ScalarField2D,
    /// One map per path segment, ordered from the informationless end.
    #[serde(skip)]
    pub per_step_partials: Option<Vec<ScalarField2D>>,
    pub path: PathSpec,
    /// Coordinate of each path point (`t` or `sigma`), from the start.
    pub path_positions: Vec<f64>,
    pub output_index: usize,
    pub f_start: f64,
    pub f_end: f64,
    pub residual: f64,
    pub warnings: Vec<String>,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// `residual / |f_end - f_start|`; infinite when the gap is zero but the
    /// residual is not.
    pub fn relative_residual(&self) -> f64 {
        let gap = (self.f_end - self.f_start).abs();
        if self.residual == 0.0 {
            0.0
        } else if gap == 0.0 {
            f64::INFINITY
        } else {
            self.residual / gap
        }
    }

    /// Running sum of the per-step partial totals, starting with 0 at the
    /// informationless end. Empty when partials were not kept.
    pub fn cumulative_mass(&self) -> Vec<f64> {
        let Some(parts) = &self.per_step_partials else {
            return Vec::new();
        };
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(parts.len() + 1);
        out.push(0.0);
        for p in parts {
            acc += p.sum();
            out.push(acc);
        }
        out
    }
}

fn check_call<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output: usize,
) -> Result<()> {
    model.input_shape().check(input)?;
    if output >= model.num_outputs() {
        return Err(Error::validation(format!(
            "output index {output} out of range for a model with {} outputs",
            model.num_outputs()
        )));
    }
    Ok(())
}

/// Sum the partial maps in order.
fn accumulate(partials: &[ScalarField2D], like: &ScalarField2D) -> ScalarField2D {
    let mut total = ScalarField2D::zeros(like.width(), like.height());
    for p in partials {
        total.add_assign(p);
    }
    total
}

fn segment_partials<M: DifferentiableModel + ?Sized>(
    model: &M,
    output: usize,
    points: &[ScalarField2D],
) -> Vec<ScalarField2D> {
    (0..points.len() - 1)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (&points[i], &points[i + 1]);
            let mid = a.zip_map(b, |a, b| 0.5 * (a + b));
            let g = model.gradient(&mid, output);
            let step = b.sub(a);
            g.zip_map(&step, |g, d| g * d)
        })
        .collect()
}

fn assemble<M: DifferentiableModel + ?Sized>(
    model: &M,
    output: usize,
    start: &ScalarField2D,
    input: &ScalarField2D,
    partials: Vec<ScalarField2D>,
    path: PathSpec,
    path_positions: Vec<f64>,
) -> AttributionMap {
    let values = accumulate(&partials, input);
    let f_start = model.evaluate(start)[output];
    let f_end = model.evaluate(input)[output];
    let residual = (values.sum() - (f_end - f_start)).abs();
    AttributionMap {
        values,
        per_step_partials: Some(partials),
        path,
        path_positions,
        output_index: output,
        f_start,
        f_end,
        residual,
        warnings: Vec::new(),
    }
}

/// Generic path method over an explicit list of points ending at the input.
pub fn path_integrated_gradients<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output: usize,
    path_points: &[ScalarField2D],
) -> Result<AttributionMap> {
    if path_points.len() < 2 {
        return Err(Error::param(format!(
            "a path needs at least 2 points, got {}",
            path_points.len()
        )));
    }
    check_call(model, input, output)?;
    for p in path_points {
        if !p.same_shape(input) {
            return Err(Error::ShapeMismatch {
                expected: input.shape_string(),
                found: p.shape_string(),
            });
        }
    }
    let partials = segment_partials(model, output, path_points);
    let steps = path_points.len() - 1;
    let positions = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let path = PathSpec::intensity(Baseline::Custom(path_points[0].clone()), steps);
    Ok(assemble(
        model,
        output,
        &path_points[0],
        path_points.last().expect("non-empty"),
        partials,
        path,
        positions,
    ))
}

/// Integrated gradients along the straight line from the baseline, using
/// the midpoint rule.
pub fn integrated_gradients<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output: usize,
    path: &PathSpec,
) -> Result<AttributionMap> {
    let PathKind::Intensity { baseline } = &path.kind else {
        return Err(Error::param("integrated gradients needs an intensity path"));
    };
    path.validate()?;
    check_call(model, input, output)?;
    let start = baseline.resolve(input)?;
    let delta = input.sub(&start);
    let s = path.steps;
    let partials: Vec<ScalarField2D> = (0..s)
        .into_par_iter()
        .map(|i| {
            let t = (i as f64 + 0.5) / s as f64;
            let point = start.zip_map(&delta, |a, d| a + t * d);
            let g = model.gradient(&point, output);
            g.zip_map(&delta, |g, d| g * d / s as f64)
        })
        .collect();
    let positions = (0..=s).map(|i| i as f64 / s as f64).collect();
    Ok(assemble(model, output, &start, input, partials, path.clone(), positions))
}

/// Blur integrated gradients along the scale space from `sigma_max` to the
/// input, with scale steps uniform in `alpha`.
pub fn blur_integrated_gradients<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output: usize,
    path: &PathSpec,
) -> Result<AttributionMap> {
    blur_integrated_gradients_with(model, input, output, path, BlurBackend::FiniteDifference)
}

pub fn blur_integrated_gradients_with<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output: usize,
    path: &PathSpec,
    backend: BlurBackend,
) -> Result<AttributionMap> {
    let PathKind::Blur { sigma_max } = path.kind else {
        return Err(Error::param("blur integrated gradients needs a blur path"));
    };
    path.validate()?;
    check_call(model, input, output)?;
    let (points, sigmas) = path.discretize(input)?;
    let partials = match backend {
        BlurBackend::FiniteDifference => segment_partials(model, output, &points),
        BlurBackend::Laplacian => (0..points.len() - 1)
            .into_par_iter()
            .map(|i| {
                let a_from = 2.0 * sigmas[i] * sigmas[i];
                let a_to = 2.0 * sigmas[i + 1] * sigmas[i + 1];
                let mid_scale = ScaleParameter::from_alpha(0.5 * (a_from + a_to))
                    .expect("alpha grid is non-negative");
                let lap = laplacian(&blur2d(input, mid_scale, path.boundary), path.boundary);
                let mid = points[i].zip_map(&points[i + 1], |a, b| 0.5 * (a + b));
                let g = model.gradient(&mid, output);
                let dalpha = a_to - a_from;
                g.zip_map(&lap, |g, l| g * 0.25 * l * dalpha)
            })
            .collect(),
    };
    let mut map = assemble(model, output, &points[0], input, partials, path.clone(), sigmas);

    let flat = ScalarField2D::filled(input.width(), input.height(), input.mean());
    let blurred = blur2d(input, sigma_max, path.boundary);
    let gap = (model.evaluate(&blurred)[output] - model.evaluate(&flat)[output]).abs();
    if gap > INFORMATIONLESS_TOLERANCE {
        let msg = format!(
            "sigma_max={} may be too small: F(max blur) differs from F(mean image) by {gap:.3e}",
            sigma_max.sigma()
        );
        log::warn!("{msg}");
        map.warnings.push(msg);
    }
    Ok(map)
}

/// Dispatch on the path kind.
pub fn attribute<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output: usize,
    path: &PathSpec,
) -> Result<AttributionMap> {
    match path.kind {
        PathKind::Intensity { .. } => integrated_gradients(model, input, output, path),
        PathKind::Blur { .. } => blur_integrated_gradients(model, input, output, path),
    }
}

/// Integrated gradients averaged over `runs` random baselines with seeds
/// `seed, seed + 1, ...`. Partials are not kept.
pub fn averaged_random_baseline<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    output: usize,
    steps: usize,
    runs: usize,
    seed: u64,
) -> Result<AttributionMap> {
    if runs == 0 {
        return Err(Error::param("runs must be at least 1"));
    }
    let maps = (0..runs as u64)
        .map(|k| {
            let path = PathSpec::intensity(Baseline::Random { seed: seed + k }, steps);
            integrated_gradients(model, input, output, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs as f64;
    let mut values = ScalarField2D::zeros(input.width(), input.height());
    let mut f_start = 0.0;
    for m in &maps {
        values.add_assign(&m.values);
        f_start += m.f_start;
    }
    let values = values.scale(1.0 / n);
    let f_start = f_start / n;
    let f_end = maps[0].f_end;
    let residual = (values.sum() - (f_end - f_start)).abs();
    Ok(AttributionMap {
        values,
        per_step_partials: None,
        path: maps[0].path.clone(),
        path_positions: maps[0].path_positions.clone(),
        output_index: output,
        f_start,
        f_end,
        residual,
        warnings: Vec::new(),
    })
}

/// An attribution method usable by the axiom checkers and evaluation.
pub trait AttributionMethod: Send + Sync {
    fn name(&self) -> String;

    fn attribute(
        &self,
        model: &dyn DifferentiableModel,
        input: &ScalarField2D,
        output: usize,
    ) -> Result<AttributionMap>;
}

impl AttributionMethod for PathSpec {
    fn name(&self) -> String {
        match &self.kind {
            PathKind::Intensity { baseline } => format!("ig[{}]", baseline.label()),
            PathKind::Blur { sigma_max } => format!("blur-ig[sigma_max={}]", sigma_max.sigma()),
        }
    }

    fn attribute(
        &self,
        model: &dyn DifferentiableModel,
        input: &ScalarField2D,
        output: usize,
    ) -> Result<AttributionMap> {
        attribute(model, input, output, self)
    }
}

/// Which transform of the model outputs a trend reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    Raw,
    #[default]
    Softmax,
}

impl std::str::FromStr for ScoreTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ScoreTransform::Raw),
            "softmax" => Ok(ScoreTransform::Softmax),
            _ => Err(Error::param(format!(
                "unknown score transform {s:?} (expected raw or softmax)"
            ))),
        }
    }
}

/// Scores and accumulated attribution along a path, from the
/// informationless end to the input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCurve {
    pub path: PathSpec,
    /// Blur scale per point; `None` for intensity paths.
    pub sigmas: Option<Vec<f64>>,
    /// `2 sigma^2` for blur paths, interpolation `t` for intensity paths.
    pub alphas: Vec<f64>,
    pub classes: Vec<usize>,
    pub transform: ScoreTransform,
    /// `scores[i][c]` is the score of `classes[c]` at point `i`.
    pub scores: Vec<Vec<f64>>,
    /// Attribution to `classes[0]` summed over the segments up to point `i`.
    pub cumulative_mass: Vec<f64>,
}

impl TrendCurve {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

pub fn prediction_trend<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    tracked_classes: &[usize],
    path: &PathSpec,
    transform: ScoreTransform,
) -> Result<TrendCurve> {
    let Some(&first) = tracked_classes.first() else {
        return Err(Error::validation("at least one class must be tracked"));
    };
    if let Some(&bad) = tracked_classes.iter().find(|&&c| c >= model.num_outputs()) {
        return Err(Error::validation(format!(
            "class {bad} out of range for a model with {} outputs",
            model.num_outputs()
        )));
    }
    let map = match transform {
        ScoreTransform::Raw => attribute(model, input, first, path)?,
        ScoreTransform::Softmax => attribute(&Softmax(model), input, first, path)?,
    };
    let (points, positions) = path.discretize(input)?;
    let scores = points
        .par_iter()
        .map(|p| {
            let raw = model.evaluate(p);
            let out = match transform {
                ScoreTransform::Raw => raw,
                ScoreTransform::Softmax => crate::model::softmax(&raw),
            };
            tracked_classes.iter().map(|&c| out[c]).collect()
        })
        .collect();
    let (sigmas, alphas) = if path.is_blur() {
        let alphas = positions.iter().map(|s| 2.0 * s * s).collect();
        (Some(positions), alphas)
    } else {
        (None, positions)
    };
    Ok(TrendCurve {
        path: path.clone(),
        sigmas,
        alphas,
        classes: tracked_classes.to_vec(),
        transform,
        scores,
        cumulative_mass: map.cumulative_mass(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelPathResult {
    /// Argmax class at each path point, from the informationless end.
    pub argmax_per_step: Vec<usize>,
    /// Last argmax along the path that differs from `true_class`.
    pub second_last_label: Option<usize>,
    pub true_class: usize,
    pub no_transition: bool,
}

pub fn second_last_label<M: DifferentiableModel + ?Sized>(
    model: &M,
    input: &ScalarField2D,
    true_class: usize,
    path: &PathSpec,
) -> Result<LabelPathResult> {
    if model.num_outputs() < 2 {
        return Err(Error::validation("label paths need a model with at least 2 outputs"));
    }
    check_call(model, input, true_class)?;
    let (points, _) = path.discretize(input)?;
    let argmax_per_step: Vec<usize> = points
        .par_iter()
        .map(|p| argmax(&model.evaluate(p)))
        .collect();
    let second_last_label = argmax_per_step
        .iter()
        .rev()
        .find(|&&c| c != true_class)
        .copied();
    Ok(LabelPathResult {
        argmax_per_step,
        second_last_label,
        true_class,
        no_transition: second_last_label.is_none(),
    })
}

/// Signed attribution sums over row bands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandAggregate {
    pub band_sums: Vec<f64>,
    /// Sum over rows `[0, h/2)`.
    pub top_sum: f64,
    /// Sum over rows `[h/2, h)`.
    pub bottom_sum: f64,
    /// `(top, bottom)` scaled so that `|bottom| = 1`; `None` if `bottom` is 0.
    pub ratio: Option<(f64, f64)>,
}

/// Per-band sums of `values`. `bands` must partition the rows.
pub fn frequency_band_aggregate(values: &ScalarField2D, bands: &[Range<usize>]) -> Result<BandAggregate> {
    let h = values.height();
    let mut owner = vec![None; h];
    for (b, r) in bands.iter().enumerate() {
        if r.start >= r.end || r.end > h {
            return Err(Error::validation(format!(
                "band {b} ({}..{}) is empty or exceeds {h} rows",
                r.start, r.end
            )));
        }
        for slot in &mut owner[r.clone()] {
            if let Some(prev) = slot.replace(b) {
                return Err(Error::validation(format!("bands {prev} and {b} overlap")));
            }
        }
    }
    if let Some(row) = owner.iter().position(Option::is_none) {
        return Err(Error::validation(format!("row {row} is not covered by any band")));
    }
    let row_sum = |y: usize| values.row(y).iter().sum::<f64>();
    let band_sums = bands.iter().map(|r| r.clone().map(row_sum).sum()).collect();
    let top_sum: f64 = (0..h / 2).map(row_sum).sum();
    let bottom_sum: f64 = (h / 2..h).map(row_sum).sum();
    let ratio = (bottom_sum != 0.0).then(|| (top_sum / bottom_sum.abs(), bottom_sum / bottom_sum.abs()));
    Ok(BandAggregate {
        band_sums,
        top_sum,
        bottom_sum,
        ratio,
    })
}
