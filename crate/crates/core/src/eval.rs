//! Saliency evaluation against binary masks and a seeded synthetic shape
//! dataset for desk-scale localization experiments.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, default_sigma_max, Baseline, PathSpec};
use crate::error::{Error, Result};
use crate::model::DifferentiableModel;
use crate::scale_space::{ScalarField2D, ScaleParameter};

/// Binary annotation, row-major. Holds at least one positive and one
/// negative pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMask {
    width: usize,
    height: usize,
    inside: Vec<bool>,
}

impl AnnotationMask {
    pub fn new(width: usize, height: usize, inside: Vec<bool>) -> Result<Self> {
        if width * height != inside.len() || inside.is_empty() {
            return Err(Error::validation(format!(
                "mask of {height}x{width} needs {} entries, found {}",
                width * height,
                inside.len()
            )));
        }
        let positives = inside.iter().filter(|&&b| b).count();
        if positives == 0 || positives == inside.len() {
            return Err(Error::validation(
                "mask needs at least one positive and one negative pixel",
            ));
        }
        Ok(Self {
            width,
            height,
            inside,
        })
    }

    /// Pixels with value above 0.5 are inside.
    pub fn from_field(field: &ScalarField2D) -> Result<Self> {
        Self::new(
            field.width(),
            field.height(),
            field.values().iter().map(|&v| v > 0.5).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn area(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            inside: self.inside.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_field(&self) -> ScalarField2D {
        ScalarField2D::from_fn(self.width, self.height, |x, y| {
            if self.inside[y * self.width + x] { 1.0 } else { 0.0 }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub f1: f64,
    pub mae: f64,
    /// Normalized-score threshold at which `f1` was attained.
    pub threshold_used: f64,
    pub n_pixels: usize,
    /// Signed sum of the raw saliency inside and outside the mask.
    pub signed_inside: f64,
    pub signed_outside: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Score `saliency` against `mask` using `|saliency|` scaled to `[0, 1]`
/// by its largest magnitude.
pub fn evaluate_saliency(saliency: &ScalarField2D, mask: &AnnotationMask) -> Result<EvalReport> {
    if saliency.width() != mask.width || saliency.height() != mask.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", mask.height, mask.width),
            found: saliency.shape_string(),
        });
    }
    let peak = saliency.max_abs();
    let mut warnings = Vec::new();
    let scores: Vec<f64> = if peak > 0.0 {
        saliency.values().iter().map(|v| v.abs() / peak).collect()
    } else {
        let msg = "saliency map is identically zero; AUC set to 0.5".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        vec![0.0; saliency.len()]
    };
    let labels = mask.inside();
    let auc = if peak > 0.0 { roc_auc(&scores, labels) } else { 0.5 };
    let (f1, threshold_used) = best_f1(&scores, labels);
    let mae = scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| (s - if l { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / scores.len() as f64;
    let (mut signed_inside, mut signed_outside) = (0.0, 0.0);
    for (v, &l) in saliency.values().iter().zip(labels) {
        if l {
            signed_inside += v;
        } else {
            signed_outside += v;
        }
    }
    Ok(EvalReport {
        auc,
        f1,
        mae,
        threshold_used,
        n_pixels: scores.len(),
        signed_inside,
        signed_outside,
        warnings,
    })
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Area under the ROC curve, with tied scores forming one trapezoid step.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let order = descending(scores);
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp + tp0) / 2.0;
    }
    area / (pos * neg)
}

/// Largest F1 over thresholds `t` (predict positive when `score >= t`),
/// together with the threshold that attains it.
pub fn best_f1(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let order = descending(scores);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut best = (0.0, scores[order[0]]);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let f1 = 2.0 * tp / (tp + fp + pos);
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best
}

/// F1 at a fixed threshold.
pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    2.0 * tp / (tp + fp + pos)
}

// ---------------------------------------------------------------------------
// Synthetic dataset

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Bright filled square.
    Square,
    /// Bright filled disc.
    Disc,
    /// One-pixel checkerboard whose mean matches the background.
    Texture,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Texture];

    pub fn tag(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disc => "disc",
            ShapeKind::Texture => "texture",
        }
    }

    /// Mask of the shape with bounding-box side `side`, relative to its box.
    fn covers(self, side: usize, dx: usize, dy: usize) -> bool {
        match self {
            ShapeKind::Square | ShapeKind::Texture => true,
            ShapeKind::Disc => {
                let c = side as f64 / 2.0;
                let (px, py) = (dx as f64 + 0.5 - c, dy as f64 + 0.5 - c);
                px * px + py * py <= c * c
            }
        }
    }

    fn area(self, side: usize) -> usize {
        (0..side)
            .flat_map(|dy| (0..side).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| self.covers(side, dx, dy))
            .count()
    }
}

pub const BACKGROUND_LEVEL: f64 = 0.5;
pub const SHAPE_LEVEL: f64 = 0.9;
pub const TEXTURE_AMPLITUDE: f64 = 0.4;

/// Range of bounding-box sides for an image of `height x width`.
pub fn side_range(height: usize, width: usize) -> (usize, usize) {
    let m = height.min(width);
    ((m / 4).max(3), (m / 2).max(4))
}

/// Smallest and largest mask area any generated sample can have.
pub fn mask_area_bounds(height: usize, width: usize, kinds: &[ShapeKind]) -> (usize, usize) {
    let (lo, hi) = side_range(height, width);
    let areas = kinds
        .iter()
        .flat_map(|k| (lo..=hi).map(move |s| k.area(s)));
    let min = areas.clone().min().unwrap_or(0);
    let max = areas.max().unwrap_or(0);
    (min, max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub field: ScalarField2D,
    pub mask: AnnotationMask,
    pub class: usize,
    /// Set for generated samples; `class` is then the index of the kind in
    /// the generator's kind list.
    pub kind: Option<ShapeKind>,
}

/// `n` images, each with one shape at a random position and size on a
/// noisy background. Sample `i` has kind `kinds[i % kinds.len()]`.
pub fn generate_shape_dataset(
    n: usize,
    height: usize,
    width: usize,
    kinds: &[ShapeKind],
    noise_level: f64,
    seed: u64,
) -> Result<Vec<ShapeSample>> {
    if height < 8 || width < 8 {
        return Err(Error::param(format!("dataset images must be at least 8x8, got {height}x{width}")));
    }
    if kinds.is_empty() {
        return Err(Error::param("at least one shape kind is required"));
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::param(format!("noise level must be finite and non-negative, got {noise_level}")));
    }
    let (lo, hi) = side_range(height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % kinds.len();
        let kind = kinds[class];
        let side = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=width - side);
        let y0 = rng.random_range(0..=height - side);
        let mut inside = vec![false; width * height];
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let noise = noise_level * (2.0 * rng.random::<f64>() - 1.0);
                let in_box = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
                let covered = in_box && kind.covers(side, x - x0, y - y0);
                inside[y * width + x] = covered;
                let base = match (covered, kind) {
                    (false, _) => BACKGROUND_LEVEL,
                    (true, ShapeKind::Texture) => {
                        let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        BACKGROUND_LEVEL + sign * TEXTURE_AMPLITUDE
                    }
                    (true, _) => SHAPE_LEVEL,
                };
                values.push(base + noise);
            }
        }
        out.push(ShapeSample {
            field: ScalarField2D::new(width, height, values)?,
            mask: AnnotationMask::new(width, height, inside)?,
            class,
            kind: Some(kind),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Method comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum EvalMethod {
    IntegratedGradients { baseline: Baseline, steps: usize },
    /// `sigma_max = None` picks the default for each input.
    BlurIntegratedGradients { sigma_max: Option<f64>, steps: usize },
    /// Uniform noise saliency; sample `i` uses seed `seed + i`.
    UniformRandom { seed: u64 },
    /// The mask itself.
    MaskOracle,
}

impl EvalMethod {
    pub fn name(&self) -> String {
        match self {
            EvalMethod::IntegratedGradients { baseline, .. } => format!("ig[{}]", baseline.label()),
            EvalMethod::BlurIntegratedGradients { .. } => "blur-ig".into(),
            EvalMethod::UniformRandom { seed } => format!("random:{seed}"),
            EvalMethod::MaskOracle => "oracle".into(),
        }
    }

    /// Parse `ig`, `ig:<baseline>`, `blur-ig`, `random[:<seed>]` or
    /// `oracle`, using `steps` and `sigma_max` for the path methods.
    pub fn parse(spec: &str, steps: usize, sigma_max: Option<f64>) -> Result<Self> {
        let (head, rest) = match spec.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (spec, None),
        };
        match (head, rest) {
            ("ig", None) => Ok(EvalMethod::IntegratedGradients {
                baseline: Baseline::Black,
                steps,
            }),
            ("ig", Some(b)) => Ok(EvalMethod::IntegratedGradients {
                baseline: b.parse()?,
                steps,
            }),
            ("blur-ig", None) => Ok(EvalMethod::BlurIntegratedGradients { sigma_max, steps }),
            ("random", None) => Ok(EvalMethod::UniformRandom { seed: 0 }),
            ("random", Some(s)) => s
                .parse()
                .map(|seed| EvalMethod::UniformRandom { seed })
                .map_err(|_| Error::param(format!("bad seed in method {spec:?}"))),
            ("oracle", None) => Ok(EvalMethod::MaskOracle),
            _ => Err(Error::param(format!(
                "unknown method {spec:?} (expected ig, ig:<baseline>, blur-ig, random[:<seed>], oracle)"
            ))),
        }
    }

    /// Saliency for `sample` (index `index` in its dataset), attributing the
    /// sample's class.
    pub fn saliency<M: DifferentiableModel + ?Sized>(
        &self,
        model: &M,
        sample: &ShapeSample,
        index: usize,
    ) -> Result<ScalarField2D> {
        let z = &sample.field;
        match self {
            EvalMethod::IntegratedGradients { baseline, steps } => {
                let path = PathSpec::intensity(baseline.clone(), *steps);
                Ok(attribute(model, z, sample.class, &path)?.values)
            }
            EvalMethod::BlurIntegratedGradients { sigma_max, steps } => {
                let s = match sigma_max {
                    Some(s) => ScaleParameter::new(*s)?,
                    None => default_sigma_max(z.width(), z.height()),
                };
                Ok(attribute(model, z, sample.class, &PathSpec::blur(s, *steps))?.values)
            }
            EvalMethod::UniformRandom { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
                Ok(ScalarField2D::from_fn(z.width(), z.height(), |_, _| rng.random::<f64>()))
            }
            EvalMethod::MaskOracle => Ok(sample.mask.to_field()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub samples: usize,
    pub mean_auc: f64,
    pub mean_f1: f64,
    pub mean_mae: f64,
    #[serde(skip)]
    pub per_sample: Vec<EvalReport>,
}

/// Mean metrics per method over `dataset`.
pub fn compare_methods<M: DifferentiableModel + ?Sized>(
    model: &M,
    dataset: &[ShapeSample],
    methods: &[EvalMethod],
) -> Result<Vec<MethodSummary>> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    for s in dataset {
        model.input_shape().check(&s.field)?;
        if s.class >= model.num_outputs() {
            return Err(Error::validation(format!(
                "sample class {} out of range for a model with {} outputs",
                s.class,
                model.num_outputs()
            )));
        }
    }
    methods
        .iter()
        .map(|m| {
            let per_sample = dataset
                .par_iter()
                .enumerate()
                .map(|(i, s)| evaluate_saliency(&m.saliency(model, s, i)?, &s.mask))
                .collect::<Result<Vec<_>>>()?;
            let n = per_sample.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
            Ok(MethodSummary {
                method: m.name(),
                samples: per_sample.len(),
                mean_auc: mean(|r| r.auc),
                mean_f1: mean(|r| r.f1),
                mean_mae: mean(|r| r.mae),
                per_sample,
            })
        })
        .collect()
}

/// One CSV row per method with the mean metrics.
pub fn write_summary_csv<W: Write>(summaries: &[MethodSummary], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let io = |e: csv::Error| Error::validation(format!("writing CSV: {e}"));
    w.write_record(["method", "samples", "mean_auc", "mean_f1", "mean_mae"])
        .map_err(io)?;
    for s in summaries {
        w.write_record([
            s.method.clone(),
            s.samples.to_string(),
            format!("{:.12e}", s.mean_auc),
            format!("{:.12e}", s.mean_f1),
            format!("{:.12e}", s.mean_mae),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::validation(format!("writing CSV: {e}")))?;
    Ok(())
}

/// One CSV row per method and sample.
pub fn write_per_sample_csv<W: Write>(summaries: &[MethodSummary], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let io = |e: csv::Error| Error::validation(format!("writing CSV: {e}"));
    w.write_record(["method", "sample", "auc", "f1", "mae", "threshold", "n_pixels"])
        .map_err(io)?;
    for s in summaries {
        for (i, r) in s.per_sample.iter().enumerate() {
            w.write_record([
                s.method.clone(),
                i.to_string(),
                format!("{:.12e}", r.auc),
                format!("{:.12e}", r.f1),
                format!("{:.12e}", r.mae),
                format!("{:.12e}", r.threshold_used),
                r.n_pixels.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::validation(format!("writing CSV: {e}")))?;
    Ok(())
}
