//! Executable checks for the scale-space causality axiom and the
//! path-method axioms (dummy, linearity, completeness, affine scale
//! invariance), plus the built-in fixture suite used by `blurig axioms`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::attribution::{
    attribute, path_integrated_gradients, AttributionMap, AttributionMethod, Baseline, PathKind,
    PathSpec,
};
use crate::error::{Error, Result};
use crate::model::{
    analytic_model, AffineFeature, AnalyticKind, AnalyticModel, ConvNetSmall, DenseLayer,
    DifferentiableModel, InputShape, LinearCombination, LinearModel, MlpTanh,
};
use crate::scale_space::{
    blur1d, scale_family_1d, uniform_alpha_grid, BoundaryMode, ScalarField2D, ScaleParameter,
    Signal1D,
};

// ---------------------------------------------------------------------------
// Causality

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EnhancedMax,
    EnhancedMin,
    NewExtremum,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub index: usize,
    /// The violation appears going from family member `scale_step` to
    /// `scale_step + 1`.
    pub scale_step: usize,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalityReport {
    pub path_kind: String,
    pub tolerance: f64,
    /// Violations with magnitude above `tolerance`.
    pub violations: Vec<Violation>,
    /// Strict interior extrema per family member.
    pub extrema_counts: Vec<usize>,
    pub min_values: Vec<f64>,
    pub max_values: Vec<f64>,
    pub pass: bool,
}

impl CausalityReport {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn extrema_counts_non_increasing(&self) -> bool {
        self.extrema_counts.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Extremum {
    Max,
    Min,
}

fn strict_extremum(v: &[f64], i: usize) -> Option<Extremum> {
    if i == 0 || i + 1 >= v.len() {
        return None;
    }
    if v[i] > v[i - 1] && v[i] > v[i + 1] {
        Some(Extremum::Max)
    } else if v[i] < v[i - 1] && v[i] < v[i + 1] {
        Some(Extremum::Min)
    } else {
        None
    }
}

/// Indices strictly between the nearest opposite-type extrema around `i`
/// (or the signal ends).
fn basin(v: &[f64], i: usize, kind: Extremum) -> Range<usize> {
    let opposite = |j: usize| strict_extremum(v, j).is_some_and(|k| k != kind);
    let left = (1..i).rev().find(|&j| opposite(j)).map_or(0, |j| j + 1);
    let right = (i + 1..v.len()).find(|&j| opposite(j)).unwrap_or(v.len());
    left..right
}

/// Family of signals ordered by increasing perturbation: blur scale rising
/// from zero, or the interpolation weight on the input falling from one.
pub fn causality_family(signal: &Signal1D, path: &PathSpec) -> Result<Vec<Signal1D>> {
    if path.steps == 0 {
        return Err(Error::param("steps must be at least 1"));
    }
    match &path.kind {
        PathKind::Blur { sigma_max } => {
            if sigma_max.is_zero() {
                return Err(Error::param("blur path needs sigma_max > 0"));
            }
            let grid = uniform_alpha_grid(*sigma_max, path.steps);
            scale_family_1d(signal, &grid, path.boundary)
        }
        PathKind::Intensity { baseline } => {
            let z = signal.to_field();
            let start = baseline.resolve(&z)?;
            let delta = z.sub(&start);
            let s = path.steps;
            (0..=s)
                .map(|k| {
                    let t = 1.0 - k as f64 / s as f64;
                    let f = start.zip_map(&delta, |a, d| a + t * d);
                    Signal1D::new(f.into_values())
                })
                .collect()
        }
    }
}

/// Track strict interior extrema through the path's family and report any
/// that are enhanced, plus any that appear without a same-type predecessor
/// at the same or an adjacent index.
///
/// Enhancement compares values at the same index and applies only to
/// extrema with a same-type successor within one index at the next step.
/// An extremum is inherited if a same-type extremum of the previous member
/// lies within one index or inside its basin.
pub fn check_causality_1d(signal: &Signal1D, path: &PathSpec, tolerance: f64) -> Result<CausalityReport> {
    if !(tolerance >= 0.0) {
        return Err(Error::param(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let family = causality_family(signal, path)?;
    let n = signal.len();
    let mut violations = Vec::new();
    for (k, w) in family.windows(2).enumerate() {
        let (now, next) = (w[0].values(), w[1].values());
        for i in 1..n.saturating_sub(1) {
            let here = strict_extremum(now, i);
            // An extremum annihilated within the step has no successor to enhance.
            let persists = here.is_some() && (i - 1..=i + 1).any(|j| strict_extremum(next, j) == here);
            match here.filter(|_| persists) {
                Some(Extremum::Max) if next[i] - now[i] > tolerance => violations.push(Violation {
                    index: i,
                    scale_step: k,
                    kind: ViolationKind::EnhancedMax,
                    magnitude: next[i] - now[i],
                }),
                Some(Extremum::Min) if now[i] - next[i] > tolerance => violations.push(Violation {
                    index: i,
                    scale_step: k,
                    kind: ViolationKind::EnhancedMin,
                    magnitude: now[i] - next[i],
                }),
                _ => {}
            }
            let Some(kind) = strict_extremum(next, i) else {
                continue;
            };
            let inherited = (i - 1..=i + 1).any(|j| strict_extremum(now, j) == Some(kind))
                || basin(next, i, kind).any(|j| strict_extremum(now, j) == Some(kind));
            if !inherited {
                let prominence = (next[i] - next[i - 1]).abs().min((next[i] - next[i + 1]).abs());
                if prominence > tolerance {
                    violations.push(Violation {
                        index: i,
                        scale_step: k,
                        kind: ViolationKind::NewExtremum,
                        magnitude: prominence,
                    });
                }
            }
        }
    }
    let extrema_counts = family
        .iter()
        .map(|s| (1..n.saturating_sub(1)).filter(|&i| strict_extremum(s.values(), i).is_some()).count())
        .collect();
    Ok(CausalityReport {
        path_kind: path_kind_label(path),
        tolerance,
        pass: violations.is_empty(),
        violations,
        extrema_counts,
        min_values: family.iter().map(Signal1D::min).collect(),
        max_values: family.iter().map(Signal1D::max).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalityReport2D {
    pub rows: Vec<CausalityReport>,
    pub columns: Vec<CausalityReport>,
    pub pass: bool,
}

/// The 1-D check applied to every row and every column of `field`.
pub fn check_causality_rows_columns(
    field: &ScalarField2D,
    path: &PathSpec,
    tolerance: f64,
) -> Result<CausalityReport2D> {
    let rows = (0..field.height())
        .map(|y| check_causality_1d(&Signal1D::new(field.row(y).to_vec())?, path, tolerance))
        .collect::<Result<Vec<_>>>()?;
    let columns = (0..field.width())
        .map(|x| check_causality_1d(&Signal1D::new(field.column(x))?, path, tolerance))
        .collect::<Result<Vec<_>>>()?;
    let pass = rows.iter().chain(&columns).all(|r| r.pass);
    Ok(CausalityReport2D { rows, columns, pass })
}

fn path_kind_label(path: &PathSpec) -> String {
    match &path.kind {
        PathKind::Blur { .. } => "blur".into(),
        PathKind::Intensity { baseline } => format!("intensity/{}", baseline.label()),
    }
}

/// `x^2 + 1` at `n` evenly spaced points on `[-3, 3]`.
pub fn parabola_signal(n: usize) -> Signal1D {
    assert!(n >= 3, "need at least 3 samples");
    let values = (0..n)
        .map(|i| {
            let x = -3.0 + 6.0 * i as f64 / (n - 1) as f64;
            x * x + 1.0
        })
        .collect();
    Signal1D::new(values).expect("finite samples")
}

/// White noise smoothed at `smoothing` and rescaled to `[0, 1]`.
pub fn smoothed_noise_signal(n: usize, smoothing: f64, seed: u64) -> Signal1D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sigma = ScaleParameter::new(smoothing).expect("non-negative smoothing");
    let smooth = blur1d(&Signal1D::new(raw).expect("finite"), sigma, BoundaryMode::Reflect);
    let (lo, hi) = (smooth.min(), smooth.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    Signal1D::new(smooth.values().iter().map(|v| (v - lo) / span).collect()).expect("finite")
}

// ---------------------------------------------------------------------------
// Path-method axioms

/// Wraps a method and adds a constant to every attribution. Used as a
/// negative control for the dummy check.
pub struct OffsetMethod<A> {
    pub inner: A,
    pub epsilon: f64,
}

impl<A: AttributionMethod> AttributionMethod for OffsetMethod<A> {
    fn name(&self) -> String {
        format!("offset({}, {})", self.inner.name(), self.epsilon)
    }

    fn attribute(
        &self,
        model: &dyn DifferentiableModel,
        input: &ScalarField2D,
        output: usize,
    ) -> Result<AttributionMap> {
        let mut map = self.inner.attribute(model, input, output)?;
        map.values = map.values.map(|v| v + self.epsilon);
        Ok(map)
    }
}

/// Uniform `[0, 1)` fields of the given shape.
pub fn random_inputs(shape: InputShape, count: usize, seed: u64) -> Vec<ScalarField2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| ScalarField2D::from_fn(shape.width, shape.height, |_, _| rng.random::<f64>()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DummyWitness {
    pub trial: usize,
    pub pixel: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DummyReport {
    pub method: String,
    pub dummy_pixels: usize,
    pub trials: usize,
    pub pass: bool,
    pub witness: Option<DummyWitness>,
}

/// Over `trials` random inputs, every pixel the model declares it ignores
/// must receive exactly zero attribution.
pub fn check_dummy(
    model: &dyn DifferentiableModel,
    method: &dyn AttributionMethod,
    output: usize,
    trials: usize,
    seed: u64,
) -> Result<DummyReport> {
    let dummies = model.dummy_coordinates(output);
    let mut witness = None;
    for (trial, z) in random_inputs(model.input_shape(), trials, seed).iter().enumerate() {
        let map = method.attribute(model, z, output)?;
        if let Some(&pixel) = dummies.iter().find(|&&p| map.values.values()[p] != 0.0) {
            witness = Some(DummyWitness {
                trial,
                pixel,
                value: map.values.values()[pixel],
            });
            break;
        }
    }
    Ok(DummyReport {
        method: method.name(),
        dummy_pixels: dummies.len(),
        trials,
        pass: witness.is_none(),
        witness,
    })
}

/// Largest `|attr(a f1 + b f2) - a attr(f1) - b attr(f2)|` over `trials`
/// random inputs.
pub fn check_linearity(
    first: &dyn DifferentiableModel,
    second: &dyn DifferentiableModel,
    a: f64,
    b: f64,
    method: &dyn AttributionMethod,
    output: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let combined = LinearCombination::new(a, first, b, second)?;
    let mut worst = 0.0f64;
    for z in random_inputs(first.input_shape(), trials, seed) {
        let c = method.attribute(&combined, &z, output)?;
        let f = method.attribute(first, &z, output)?;
        let g = method.attribute(second, &z, output)?;
        let mix = f.values.zip_map(&g.values, |f, g| a * f + b * g);
        worst = worst.max(c.values.max_abs_diff(&mix));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletenessReport {
    pub steps: Vec<usize>,
    pub residuals: Vec<f64>,
    /// `|f_end - f_start|`
    pub gap: f64,
    pub non_increasing: bool,
    /// Residual at the top of the ladder is at most 1% of the gap.
    pub within_one_percent: bool,
}

/// Relative size of rounding noise below which residual differences are
/// ignored.
pub const RESIDUAL_NOISE: f64 = 1e-10;

/// Completeness residual of `path` at each step count in `ladder`.
pub fn check_completeness(
    model: &dyn DifferentiableModel,
    input: &ScalarField2D,
    output: usize,
    path: &PathSpec,
    ladder: &[usize],
) -> Result<CompletenessReport> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("steps ladder must be non-empty and strictly increasing"));
    }
    let maps = ladder
        .iter()
        .map(|&s| {
            let mut p = path.clone();
            p.steps = s;
            attribute(model, input, output, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    let gap = (maps[0].f_end - maps[0].f_start).abs();
    let residuals: Vec<f64> = maps.iter().map(|m| m.residual).collect();
    let noise = RESIDUAL_NOISE * gap.max(1.0);
    let non_increasing = residuals.windows(2).all(|w| w[1] <= w[0] + noise);
    let top = *residuals.last().expect("non-empty ladder");
    Ok(CompletenessReport {
        steps: ladder.to_vec(),
        within_one_percent: top <= 0.01 * gap + noise,
        residuals,
        gap,
        non_increasing,
    })
}

/// Compare attributions for `(model, z, z')` against those for the model
/// composed with the inverse of `w_j -> c w_j + d`, evaluated at the
/// transformed input and baseline. Returns the largest elementwise gap over
/// `trials` random inputs.
///
/// Blur paths have no baseline; the transformed instance then uses the blur
/// path of the transformed input.
pub fn check_asi(
    model: &dyn DifferentiableModel,
    path: &PathSpec,
    output: usize,
    pixel: usize,
    c: f64,
    d: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if c == 0.0 {
        return Err(Error::param("affine scale c must be non-zero"));
    }
    let transformed = AffineFeature::new(model, pixel, c, d)?;
    let mut worst = 0.0f64;
    for z in random_inputs(model.input_shape(), trials, seed) {
        let original = attribute(model, &z, output, path)?;
        let tz = transformed.transform(&z);
        let moved_path = match &path.kind {
            PathKind::Intensity { baseline } => {
                let tb = transformed.transform(&baseline.resolve(&z)?);
                PathSpec {
                    kind: PathKind::Intensity {
                        baseline: Baseline::Custom(tb),
                    },
                    ..path.clone()
                }
            }
            PathKind::Blur { .. } => path.clone(),
        };
        let moved = attribute(&transformed, &tz, output, &moved_path)?;
        worst = worst.max(original.values.max_abs_diff(&moved.values));
    }
    Ok(worst)
}

/// Largest gap between `attribute` on `path` and the generic path method
/// fed the same discretized points.
pub fn path_equality_gap(
    model: &dyn DifferentiableModel,
    input: &ScalarField2D,
    output: usize,
    path: &PathSpec,
) -> Result<f64> {
    let direct = attribute(model, input, output, path)?;
    let (points, _) = path.discretize(input)?;
    let generic = path_integrated_gradients(model, input, output, &points)?;
    Ok(direct.values.max_abs_diff(&generic.values))
}

// ---------------------------------------------------------------------------
// Built-in fixtures and the suite runner

/// A named built-in model.
pub struct Fixture {
    pub name: &'static str,
    pub model: Box<dyn DifferentiableModel>,
}

/// Every built-in model family at `shape`, with weights drawn from `seed`.
/// The linear model and the first MLP have exactly-zero weights on a subset
/// of pixels so that the dummy check is not vacuous.
pub fn builtin_fixtures(shape: InputShape, seed: u64) -> Vec<Fixture> {
    let n = shape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let linear_weights: Vec<f64> = (0..2 * n)
        .map(|i| if (i % n).is_multiple_of(5) { 0.0 } else { rng.random::<f64>() * 2.0 - 1.0 })
        .collect();
    let linear = LinearModel::new(shape, linear_weights, vec![0.1, -0.2]).expect("consistent shapes");

    let mut sparse = MlpTanh::random(shape, &[8], 3, seed ^ 0x5eed);
    let first: &mut DenseLayer = &mut sparse.layers[0];
    for o in 0..first.outputs {
        for i in (0..first.inputs).filter(|i| i % 3 == 0) {
            first.weights[o * first.inputs + i] = 0.0;
        }
    }

    let masked = gaussian_template_with_hole(shape);
    vec![
        Fixture { name: "linear", model: Box::new(linear) },
        Fixture { name: "mlp_tanh", model: Box::new(sparse) },
        Fixture {
            name: "mlp_tanh_deep",
            model: Box::new(MlpTanh::random(shape, &[10, 6], 3, seed.wrapping_add(1))),
        },
        Fixture {
            name: "convnet_small",
            model: Box::new(ConvNetSmall::random(shape, 3, seed.wrapping_add(2))),
        },
        Fixture {
            name: "sum_of_squares",
            model: Box::new(analytic_model(AnalyticKind::SumOfSquares, shape)),
        },
        Fixture {
            name: "gaussian_bump_detector",
            model: Box::new(analytic_model(AnalyticKind::GaussianBumpDetector, shape)),
        },
        Fixture {
            name: "bump_detector_with_hole",
            model: Box::new(AnalyticModel::with_template(masked)),
        },
        Fixture {
            name: "single_pixel",
            model: Box::new(analytic_model(AnalyticKind::SinglePixel, shape)),
        },
    ]
}

/// Centred Gaussian template with its left quarter set to zero.
fn gaussian_template_with_hole(shape: InputShape) -> ScalarField2D {
    let t = crate::model::gaussian_template(shape);
    ScalarField2D::from_fn(shape.width, shape.height, |x, y| {
        if x < shape.width / 4 { 0.0 } else { t.get(x, y) }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Causality,
    Dummy,
    Linearity,
    Completeness,
    Asi,
    All,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    /// Whether a failure of this check fails the suite.
    pub asserted: bool,
    pub pass: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub format_version: u32,
    pub suite: Suite,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| c.asserted && !c.pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Include the offset-method dummy check, which is expected to fail.
    pub negative_control: bool,
    pub shape: InputShape,
    pub trials: usize,
    pub steps: usize,
    pub corpus_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            negative_control: false,
            shape: InputShape::new(8, 8),
            trials: 3,
            steps: 200,
            corpus_size: 200,
        }
    }
}

/// Signal length and blur path used for the causality corpus.
pub const CORPUS_LENGTH: usize = 128;
pub const CORPUS_SMOOTHING: f64 = 2.0;

pub fn corpus_blur_path() -> PathSpec {
    PathSpec::blur(ScaleParameter::new(8.0).expect("positive"), 64)
}

/// Strict tolerance for the exact axioms.
pub const AXIOM_TOLERANCE: f64 = 1e-10;
/// Tolerance for extremum enhancement along a family.
pub const CAUSALITY_TOLERANCE: f64 = 1e-9;

fn methods(steps: usize, sigma_max: ScaleParameter) -> Vec<PathSpec> {
    vec![
        PathSpec::intensity(Baseline::Black, steps),
        PathSpec::blur(sigma_max, steps),
    ]
}

fn check(suite: Suite, name: impl Into<String>, asserted: bool, pass: bool, detail: serde_json::Value) -> CheckResult {
    CheckResult {
        suite,
        name: name.into(),
        asserted,
        pass,
        detail,
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report types serialize")
}

pub fn run_suite(suite: Suite, config: &SuiteConfig) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    if suite.includes(Suite::Causality) {
        checks.extend(causality_checks(config)?);
    }
    let fixtures = builtin_fixtures(config.shape, config.seed);
    let sigma_max = crate::attribution::default_sigma_max(config.shape.width, config.shape.height);
    if suite.includes(Suite::Dummy) {
        checks.extend(dummy_checks(&fixtures, config, sigma_max)?);
    }
    if suite.includes(Suite::Linearity) {
        checks.extend(linearity_checks(&fixtures, config, sigma_max)?);
    }
    if suite.includes(Suite::Completeness) {
        checks.extend(completeness_checks(&fixtures, config, sigma_max)?);
    }
    if suite.includes(Suite::Asi) {
        checks.extend(asi_checks(&fixtures, config, sigma_max)?);
    }
    let pass = checks.iter().all(|c| !c.asserted || c.pass);
    Ok(SuiteReport {
        format_version: 1,
        suite,
        seed: config.seed,
        pass,
        checks,
    })
}

fn causality_checks(config: &SuiteConfig) -> Result<Vec<CheckResult>> {
    let s = Suite::Causality;
    let parabola = parabola_signal(61);
    let blur = PathSpec::blur(ScaleParameter::new(3.0)?, 60);
    let black = PathSpec::intensity(Baseline::Black, 60);
    let random = PathSpec::intensity(Baseline::Random { seed: config.seed }, 60);
    let tol = CAUSALITY_TOLERANCE;
    let mut out = Vec::new();

    let r = check_causality_1d(&parabola, &blur, tol)?;
    let rising = r.min_values.windows(2).all(|w| w[1] > w[0]);
    out.push(check(s, "parabola/blur passes with rising minimum", true, r.pass && rising, to_json(&r)));

    let r = check_causality_1d(&parabola, &black, tol)?;
    let ok = r.count(ViolationKind::EnhancedMin) > 0 && r.count(ViolationKind::NewExtremum) == 0;
    out.push(check(s, "parabola/intensity-black enhances only", true, ok, to_json(&r)));

    let r = check_causality_1d(&parabola, &random, tol)?;
    let ok = r.count(ViolationKind::NewExtremum) > 0;
    out.push(check(s, "parabola/intensity-random creates extrema", true, ok, to_json(&r)));

    let corpus: Vec<Signal1D> = (0..config.corpus_size as u64)
        .map(|i| smoothed_noise_signal(CORPUS_LENGTH, CORPUS_SMOOTHING, config.seed.wrapping_add(i)))
        .collect();
    let blur_path = corpus_blur_path();
    let black_path = PathSpec::intensity(Baseline::Black, 64);
    let stats: Vec<(bool, bool, bool, bool)> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, sig)| {
            let b = check_causality_1d(sig, &blur_path, tol).expect("valid path");
            let k = check_causality_1d(sig, &black_path, tol).expect("valid path");
            let rnd = PathSpec::intensity(
                Baseline::Random {
                    seed: config.seed.wrapping_add(1_000_000 + i as u64),
                },
                64,
            );
            let r = check_causality_1d(sig, &rnd, tol).expect("valid path");
            (
                b.pass,
                b.extrema_counts_non_increasing(),
                k.count(ViolationKind::NewExtremum) == 0,
                r.count(ViolationKind::NewExtremum) > 0,
            )
        })
        .collect();
    let n = stats.len().max(1) as f64;
    let blur_pass = stats.iter().filter(|s| s.0).count();
    let counts_ok = stats.iter().filter(|s| s.1).count();
    let black_ok = stats.iter().filter(|s| s.2).count();
    let random_new = stats.iter().filter(|s| s.3).count();
    out.push(check(
        s,
        "corpus/blur passes",
        true,
        blur_pass == stats.len() && counts_ok == stats.len(),
        serde_json::json!({
            "signals": stats.len(),
            "passed": blur_pass,
            "extrema_counts_non_increasing": counts_ok,
        }),
    ));
    out.push(check(
        s,
        "corpus/intensity-black creates no extrema",
        true,
        black_ok == stats.len(),
        serde_json::json!({ "signals": stats.len(), "without_new_extrema": black_ok }),
    ));
    out.push(check(
        s,
        "corpus/intensity-random new-extremum rate",
        false,
        random_new as f64 / n >= 0.9,
        serde_json::json!({ "signals": stats.len(), "rate": random_new as f64 / n }),
    ));
    Ok(out)
}

fn dummy_checks(fixtures: &[Fixture], config: &SuiteConfig, sigma_max: ScaleParameter) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for f in fixtures {
        if f.model.dummy_coordinates(0).is_empty() {
            continue;
        }
        for m in methods(config.steps, sigma_max) {
            let r = check_dummy(f.model.as_ref(), &m, 0, config.trials, config.seed)?;
            out.push(check(Suite::Dummy, format!("{}/{}", f.name, m.name()), true, r.pass, to_json(&r)));
        }
    }
    if config.negative_control {
        let f = fixtures
            .iter()
            .find(|f| f.name == "single_pixel")
            .expect("single_pixel fixture");
        let broken = OffsetMethod {
            inner: PathSpec::intensity(Baseline::Black, config.steps),
            epsilon: 1e-6,
        };
        let r = check_dummy(f.model.as_ref(), &broken, 0, config.trials, config.seed)?;
        out.push(check(Suite::Dummy, format!("{}/{}", f.name, broken.name()), true, r.pass, to_json(&r)));
    }
    Ok(out)
}

fn fixture<'a>(fixtures: &'a [Fixture], name: &str) -> &'a dyn DifferentiableModel {
    fixtures
        .iter()
        .find(|f| f.name == name)
        .map(|f| f.model.as_ref())
        .unwrap_or_else(|| panic!("missing fixture {name}"))
}

fn linearity_checks(fixtures: &[Fixture], config: &SuiteConfig, sigma_max: ScaleParameter) -> Result<Vec<CheckResult>> {
    let pairs = [
        ("sum_of_squares", "gaussian_bump_detector", 2.0, -3.0),
        ("mlp_tanh", "convnet_small", 0.7, 1.3),
        ("mlp_tanh_deep", "linear", 1.0, 0.0),
        ("convnet_small", "mlp_tanh", 0.0, 0.0),
    ];
    let mut out = Vec::new();
    for (a_name, b_name, a, b) in pairs {
        let (fa, fb) = (fixture(fixtures, a_name), fixture(fixtures, b_name));
        if fa.num_outputs() != fb.num_outputs() {
            continue;
        }
        for m in methods(config.steps, sigma_max) {
            let dev = check_linearity(fa, fb, a, b, &m, 0, config.trials, config.seed)?;
            out.push(check(
                Suite::Linearity,
                format!("{a}*{a_name}+{b}*{b_name}/{}", m.name()),
                true,
                dev <= AXIOM_TOLERANCE,
                serde_json::json!({ "max_deviation": dev }),
            ));
        }
    }
    Ok(out)
}

fn completeness_checks(
    fixtures: &[Fixture],
    config: &SuiteConfig,
    sigma_max: ScaleParameter,
) -> Result<Vec<CheckResult>> {
    let ladder = [50, 100, 200, 400, 800];
    let inputs = random_inputs(config.shape, config.trials, config.seed ^ 0xc0de);
    let mut out = Vec::new();
    for f in fixtures {
        for m in methods(config.steps, sigma_max) {
            let mut reports = Vec::new();
            let mut gap = 0.0f64;
            for z in &inputs {
                let r = check_completeness(f.model.as_ref(), z, 0, &m, &ladder)?;
                gap = gap.max(path_equality_gap(f.model.as_ref(), z, 0, &m)?);
                reports.push(r);
            }
            let pass = reports.iter().all(|r| r.non_increasing && r.within_one_percent);
            out.push(check(
                Suite::Completeness,
                format!("{}/{}", f.name, m.name()),
                true,
                pass,
                to_json(&reports),
            ));
            out.push(check(
                Suite::Completeness,
                format!("{}/{}/path-equality", f.name, m.name()),
                true,
                gap <= AXIOM_TOLERANCE,
                serde_json::json!({ "max_deviation": gap }),
            ));
        }
    }
    Ok(out)
}

fn asi_checks(fixtures: &[Fixture], config: &SuiteConfig, sigma_max: ScaleParameter) -> Result<Vec<CheckResult>> {
    let transforms = [(1.0, 0.0), (2.0, 0.5), (-1.0, 0.0), (0.3, -1.2)];
    let pixel = config.shape.len() / 2 + config.shape.width / 2;
    let mut out = Vec::new();
    for f in fixtures {
        for &(c, d) in &transforms {
            for baseline in [Baseline::Black, Baseline::Random { seed: config.seed }] {
                let path = PathSpec::intensity(baseline, config.steps);
                let dev = check_asi(f.model.as_ref(), &path, 0, pixel, c, d, config.trials, config.seed)?;
                out.push(check(
                    Suite::Asi,
                    format!("{}/{}/c={c},d={d}", f.name, path.name()),
                    true,
                    dev <= AXIOM_TOLERANCE,
                    serde_json::json!({ "max_deviation": dev }),
                ));
            }
            // Blur paths do not commute with per-pixel affine maps; logged only.
            let blur = PathSpec::blur(sigma_max, config.steps);
            let dev = check_asi(f.model.as_ref(), &blur, 0, pixel, c, d, config.trials, config.seed)?;
            out.push(check(
                Suite::Asi,
                format!("{}/{}/c={c},d={d}", f.name, blur.name()),
                false,
                dev <= AXIOM_TOLERANCE,
                serde_json::json!({ "max_deviation": dev }),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabola_blur_passes() {
        let r = check_causality_1d(&parabola_signal(61), &PathSpec::blur(ScaleParameter::new(3.0).unwrap(), 60), 1e-9)
            .unwrap();
        assert!(r.pass, "{:?}", r.violations);
        assert!(r.min_values.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn parabola_black_baseline_enhances_minimum_only() {
        let r = check_causality_1d(&parabola_signal(61), &PathSpec::intensity(Baseline::Black, 20), 1e-9).unwrap();
        assert!(!r.pass);
        assert!(r.count(ViolationKind::EnhancedMin) > 0);
        assert_eq!(r.count(ViolationKind::NewExtremum), 0);
        assert!(r.violations.iter().all(|v| v.index == 30));
    }

    #[test]
    fn parabola_random_baseline_creates_extrema() {
        let path = PathSpec::intensity(Baseline::Random { seed: 0 }, 20);
        let r = check_causality_1d(&parabola_signal(61), &path, 1e-9).unwrap();
        assert!(r.count(ViolationKind::NewExtremum) > 0);
    }

    #[test]
    fn report_pass_matches_violations() {
        let sig = smoothed_noise_signal(64, 1.5, 4);
        for tol in [0.0, 1e-9, 1.0] {
            let path = PathSpec::intensity(Baseline::Random { seed: 1 }, 10);
            let r = check_causality_1d(&sig, &path, tol).unwrap();
            assert_eq!(r.pass, r.violations.iter().all(|v| v.magnitude <= tol));
            assert!(r.violations.iter().all(|v| v.magnitude > tol));
        }
        assert!(check_causality_1d(&sig, &corpus_blur_path(), -1.0).is_err());
    }

    #[test]
    fn plateaus_are_not_extrema() {
        assert_eq!(strict_extremum(&[0.0, 1.0, 1.0, 0.0], 1), None);
        assert_eq!(strict_extremum(&[0.0, 1.0, 0.5], 1), Some(Extremum::Max));
        assert_eq!(strict_extremum(&[0.0, 1.0, 0.5], 0), None);
    }

    #[test]
    fn rows_and_columns() {
        let f = ScalarField2D::from_fn(12, 10, |x, y| (x as f64 * 0.9).sin() + (y as f64 * 0.6).cos());
        let r = check_causality_rows_columns(&f, &PathSpec::blur(ScaleParameter::new(3.0).unwrap(), 30), 1e-9)
            .unwrap();
        assert_eq!(r.rows.len(), 10);
        assert_eq!(r.columns.len(), 12);
        assert!(r.pass);
    }

    #[test]
    fn dummy_on_single_pixel_and_negative_control() {
        let shape = InputShape::new(5, 5);
        let m = analytic_model(AnalyticKind::SinglePixel, shape);
        for path in methods(30, ScaleParameter::new(2.5).unwrap()) {
            let r = check_dummy(&m, &path, 0, 3, 0).unwrap();
            assert!(r.pass);
            assert_eq!(r.dummy_pixels, 24);
        }
        let broken = OffsetMethod {
            inner: PathSpec::intensity(Baseline::Black, 30),
            epsilon: 1e-6,
        };
        let r = check_dummy(&m, &broken, 0, 3, 0).unwrap();
        assert!(!r.pass);
        let w = r.witness.unwrap();
        assert_eq!((w.trial, w.pixel), (0, 1));
    }

    #[test]
    fn linearity_trivial_cases() {
        let shape = InputShape::new(4, 4);
        let f = MlpTanh::random(shape, &[5], 1, 3);
        let g = analytic_model(AnalyticKind::SumOfSquares, shape);
        let path = PathSpec::intensity(Baseline::Black, 50);
        assert_eq!(check_linearity(&f, &g, 1.0, 0.0, &path, 0, 2, 0).unwrap(), 0.0);
        assert_eq!(check_linearity(&f, &g, 0.0, 0.0, &path, 0, 2, 0).unwrap(), 0.0);
    }

    #[test]
    fn linearity_squares_and_bump() {
        let shape = InputShape::new(6, 6);
        let f = analytic_model(AnalyticKind::SumOfSquares, shape);
        let g = analytic_model(AnalyticKind::GaussianBumpDetector, shape);
        for path in methods(200, ScaleParameter::new(3.0).unwrap()) {
            assert!(check_linearity(&f, &g, 2.0, -3.0, &path, 0, 3, 1).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn completeness_ladders() {
        let shape = InputShape::new(6, 6);
        let z = random_inputs(shape, 1, 5).pop().unwrap();
        let lin = LinearModel::new(shape, (0..36).map(|i| i as f64 / 36.0).collect(), vec![0.0]).unwrap();
        let path = PathSpec::intensity(Baseline::Black, 1);
        let r = check_completeness(&lin, &z, 0, &path, &[1, 7, 40]).unwrap();
        assert!(r.residuals.iter().all(|&v| v <= 1e-12));

        let mlp = MlpTanh::random(shape, &[6], 1, 9);
        let r = check_completeness(&mlp, &z, 0, &path, &[50, 100, 200, 400, 800]).unwrap();
        assert!(r.residuals.windows(2).all(|w| w[1] < w[0]), "{:?}", r.residuals);
        assert!(r.within_one_percent);

        let same = PathSpec::intensity(Baseline::Custom(z.clone()), 1);
        let r = check_completeness(&mlp, &z, 0, &same, &[5, 10]).unwrap();
        assert!(r.residuals.iter().all(|&v| v == 0.0));
        assert!(check_completeness(&mlp, &z, 0, &same, &[10, 5]).is_err());
    }

    #[test]
    fn asi_cases() {
        let shape = InputShape::new(5, 5);
        let lin = LinearModel::new(shape, (0..25).map(|i| (i % 4) as f64 - 1.5).collect(), vec![0.2]).unwrap();
        let path = PathSpec::intensity(Baseline::Black, 40);
        assert_eq!(check_asi(&lin, &path, 0, 7, 1.0, 0.0, 2, 0).unwrap(), 0.0);
        assert!(check_asi(&lin, &path, 0, 7, 2.0, 0.5, 2, 0).unwrap() <= 1e-10);
        assert!(check_asi(&lin, &path, 0, 7, -1.0, 0.0, 2, 0).unwrap() <= 1e-10);
        assert!(matches!(check_asi(&lin, &path, 0, 7, 0.0, 1.0, 2, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn suite_passes_and_negative_control_fails() {
        let config = SuiteConfig {
            corpus_size: 20,
            trials: 1,
            steps: 60,
            ..SuiteConfig::default()
        };
        let report = run_suite(Suite::All, &config).unwrap();
        let failed: Vec<_> = report.failures().map(|c| c.name.clone()).collect();
        assert!(report.pass, "{failed:?}");
        let broken = run_suite(Suite::Dummy, &SuiteConfig { negative_control: true, ..config }).unwrap();
        assert!(!broken.pass);
        assert_eq!(broken.failures().count(), 1);
    }
}
