//! Gaussian scale space over scalar fields.
//!
//! The public scale is `sigma`, the standard deviation of the Gaussian in
//! pixels. Derivatives along the path are taken with respect to the variance
//! parameter `alpha = 2 * sigma^2`, for which the blurred family obeys
//! `dL/dalpha = (1/4) * laplacian(L)`.
//!
//! Blurring uses the discrete Gaussian, for which that identity holds
//! exactly with the five-point [`laplacian`] and blurs compose exactly. The
//! sampled profile ([`gaussian_kernel`]) and the sampled LoG are kept as
//! standalone filters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum taps per side, as a multiple of sigma.
pub const DEFAULT_TRUNCATION: f64 = 4.0;

/// Work size (pixels times taps) above which convolution passes run on the
/// rayon pool. Each output pixel is computed the same way either way.
const PARALLEL_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// Half-sample symmetric extension (`c b a | a b c | c b a`).
    #[default]
    Reflect,
    /// Repeat the edge sample.
    Clamp,
}

impl BoundaryMode {
    /// Map a possibly out-of-range index onto `0..n`.
    #[inline]
    pub fn resolve(self, i: isize, n: usize) -> usize {
        debug_assert!(n > 0);
        match self {
            BoundaryMode::Reflect => {
                let period = 2 * n as isize;
                let m = i.rem_euclid(period) as usize;
                if m < n {
                    m
                } else {
                    2 * n - 1 - m
                }
            }
            BoundaryMode::Clamp => i.clamp(0, n as isize - 1) as usize,
        }
    }
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflect" => Ok(BoundaryMode::Reflect),
            "clamp" => Ok(BoundaryMode::Clamp),
            other => Err(Error::param(format!("unknown boundary mode `{other}`"))),
        }
    }
}

/// A 2-D grid of finite reals stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarField2D {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "field dimensions must be positive, got {width}x{height}"
            )));
        }
        if width * height != values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {width}x{height}", width * height),
                found: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "field dimensions must be positive");
        assert!(value.is_finite());
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    /// Build a field from `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "field dimensions must be positive");
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::from_raw(width, height, values)
    }

    /// Crate-internal constructor for values already known to be valid.
    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(width * height, values.len());
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &ScalarField2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.values[y * self.width..(y + 1) * self.width]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField2D {
        Self::from_raw(self.width, self.height, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped fields.
    pub fn zip_map(&self, other: &ScalarField2D, f: impl Fn(f64, f64) -> f64) -> ScalarField2D {
        assert!(self.same_shape(other), "zip_map on mismatched shapes");
        Self::from_raw(
            self.width,
            self.height,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sub(&self, other: &ScalarField2D) -> ScalarField2D {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ScalarField2D) -> ScalarField2D {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: f64) -> ScalarField2D {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &ScalarField2D) {
        assert!(self.same_shape(other), "add_assign on mismatched shapes");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &ScalarField2D) -> f64 {
        assert!(self.same_shape(other));
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn column(&self, x: usize) -> Vec<f64> {
        (0..self.height).map(|y| self.get(x, y)).collect()
    }
}

/// A 1-D signal of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Signal1D {
    values: Vec<f64>,
}

impl Signal1D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("signal must have at least one sample"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite sample {} at index {i}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// View as a one-row field.
    pub fn to_field(&self) -> ScalarField2D {
        ScalarField2D::from_raw(self.values.len(), 1, self.values.clone())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Gaussian standard deviation in pixels. Zero is the identity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleParameter(f64);

impl ScaleParameter {
    pub const ZERO: ScaleParameter = ScaleParameter(0.0);

    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::param(format!(
                "sigma must be finite and non-negative, got {sigma}"
            )));
        }
        Ok(Self(sigma))
    }

    /// Scale with variance parameter `alpha = 2 sigma^2`.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::param(format!(
                "alpha must be finite and non-negative, got {alpha}"
            )));
        }
        Ok(Self((alpha / 2.0).sqrt()))
    }

    pub fn sigma(self) -> f64 {
        self.0
    }

    pub fn alpha(self) -> f64 {
        2.0 * self.0 * self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

/// `steps + 1` scales uniformly spaced in `alpha`, from zero up to `sigma_max`.
pub fn uniform_alpha_grid(sigma_max: ScaleParameter, steps: usize) -> Vec<ScaleParameter> {
    let alpha_max = sigma_max.alpha();
    (0..=steps)
        .map(|i| {
            if i == steps {
                sigma_max
            } else {
                ScaleParameter((i as f64 * alpha_max / steps as f64 / 2.0).sqrt())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    LaplacianOfGaussian,
}

/// A symmetric convolution kernel.
///
/// Gaussian kernels are stored as the 1-D profile (`2r+1` taps) of a
/// separable filter; Laplacian-of-Gaussian kernels are stored as the full
/// `(2r+1)^2` grid, row-major with `dy` as the outer index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn taps(&self) -> usize {
        2 * self.radius + 1
    }

    /// 2-D weight at offset `(dx, dy)`; zero outside the support.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        let ix = (dx + r) as usize;
        let iy = (dy + r) as usize;
        match self.kind {
            KernelKind::Gaussian => self.weights[ix] * self.weights[iy],
            KernelKind::LaplacianOfGaussian => self.weights[iy * self.taps() + ix],
        }
    }
}

fn check_truncation(truncation_multiple: f64) -> Result<()> {
    if !truncation_multiple.is_finite() || truncation_multiple < 2.0 {
        return Err(Error::param(format!(
            "truncation multiple must be >= 2, got {truncation_multiple}"
        )));
    }
    Ok(())
}

fn radius_for(sigma: f64, truncation_multiple: f64) -> usize {
    (truncation_multiple * sigma).ceil() as usize
}

/// Sampled Gaussian, truncated at `ceil(truncation_multiple * sigma)` taps per
/// side and renormalized to unit sum.
pub fn gaussian_kernel(sigma: ScaleParameter, truncation_multiple: f64) -> Result<Kernel> {
    check_truncation(truncation_multiple)?;
    let s = sigma.sigma();
    if !s.is_finite() {
        return Err(Error::param("sigma must be finite"));
    }
    if s == 0.0 {
        return Ok(Kernel {
            kind: KernelKind::Gaussian,
            radius: 0,
            weights: vec![1.0],
        });
    }
    let radius = radius_for(s, truncation_multiple);
    let denom = 2.0 * s * s;
    let half: Vec<f64> = (0..=radius)
        .map(|k| (-((k * k) as f64) / denom).exp())
        .collect();
    let total = half[0] + 2.0 * half[1..].iter().sum::<f64>();
    let weights = (0..2 * radius + 1)
        .map(|i| half[i.abs_diff(radius)] / total)
        .collect();
    Ok(Kernel {
        kind: KernelKind::Gaussian,
        radius,
        weights,
    })
}

/// Discrete Gaussian `exp(-t) I_n(t)` with `t = sigma^2`, the kernel of the
/// discrete diffusion equation. Unlike the sampled profile its variance is
/// exactly `sigma^2` at every scale, and `k(s1) * k(s2) = k(sqrt(s1^2 + s2^2))`.
///
/// The radius is at least `ceil(truncation_multiple * sigma)` and grows until
/// the discarded two-sided mass is at most that of the continuous Gaussian
/// beyond `truncation_multiple * sigma`. Renormalized to unit sum.
pub fn discrete_gaussian_kernel(sigma: ScaleParameter, truncation_multiple: f64) -> Result<Kernel> {
    check_truncation(truncation_multiple)?;
    let s = sigma.sigma();
    if !s.is_finite() {
        return Err(Error::param("sigma must be finite"));
    }
    if s == 0.0 {
        return Ok(Kernel {
            kind: KernelKind::Gaussian,
            radius: 0,
            weights: vec![1.0],
        });
    }
    let min_radius = radius_for(s, truncation_multiple);
    // Terms past `10 sigma + 30` are below 1e-20 of the peak.
    let top = min_radius + (10.0 * s).ceil() as usize + 30;
    let half = scaled_bessel(s * s, top);
    let budget = libm::erfc(truncation_multiple / std::f64::consts::SQRT_2);
    let mut radius = min_radius.min(top);
    let mut tail = 2.0 * half[radius + 1..].iter().sum::<f64>();
    while tail > budget && radius < top {
        radius += 1;
        tail -= 2.0 * half[radius];
    }
    let total = half[0] + 2.0 * half[1..=radius].iter().sum::<f64>();
    let weights = (0..2 * radius + 1)
        .map(|i| half[i.abs_diff(radius)] / total)
        .collect();
    Ok(Kernel {
        kind: KernelKind::Gaussian,
        radius,
        weights,
    })
}

/// `exp(-t) I_n(t)` for `n in 0..=top` by Miller's backward recurrence,
/// normalized with `I_0 + 2 sum I_n = exp(t)`. Accurate while `I_top` is
/// negligible against `I_0`.
fn scaled_bessel(t: f64, top: usize) -> Vec<f64> {
    let mut v = vec![0.0; top + 2];
    v[top] = 1e-280;
    for n in (1..=top).rev() {
        v[n - 1] = (2.0 * n as f64 / t) * v[n] + v[n + 1];
        if v[n - 1] > 1e250 {
            for x in &mut v[n - 1..] {
                *x *= 1e-250;
            }
        }
    }
    v.truncate(top + 1);
    let norm = v[0] + 2.0 * v[1..].iter().sum::<f64>();
    v.iter().map(|x| x / norm).collect()
}

/// Five-point discrete Laplacian, neighbors resolved by `boundary`.
pub fn laplacian(field: &ScalarField2D, boundary: BoundaryMode) -> ScalarField2D {
    let (w, h) = (field.width(), field.height());
    let v = field.values();
    let xi = |x: isize| boundary.resolve(x, w);
    let yi = |y: isize| boundary.resolve(y, h);
    let mut out = Vec::with_capacity(v.len());
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = v[y as usize * w + x as usize];
            let row = y as usize * w;
            let sum = v[row + xi(x - 1)] + v[row + xi(x + 1)] + v[yi(y - 1) * w + x as usize]
                + v[yi(y + 1) * w + x as usize];
            out.push(sum - 4.0 * c);
        }
    }
    ScalarField2D::from_raw(w, h, out)
}

/// Pieces of the sampled LoG kernel in separable form:
/// `w(x, y) = scale * (c * (h(x) g(y) + g(x) h(y)) - mean)`.
struct LogParts {
    radius: usize,
    g: Vec<f64>,
    h: Vec<f64>,
    c: f64,
    mean: f64,
    scale: f64,
}

impl LogParts {
    fn new(sigma: f64, truncation_multiple: f64) -> Self {
        let radius = radius_for(sigma, truncation_multiple).max(1);
        let s2 = sigma * sigma;
        let s4 = s2 * s2;
        let taps = 2 * radius + 1;
        let offset = |i: usize| i as f64 - radius as f64;
        let g: Vec<f64> = (0..taps)
            .map(|i| (-(offset(i) * offset(i)) / (2.0 * s2)).exp())
            .collect();
        let h: Vec<f64> = (0..taps)
            .map(|i| {
                let x2 = offset(i) * offset(i);
                g[i] * (x2 / s4 - 1.0 / s2)
            })
            .collect();
        let c = 1.0 / (2.0 * std::f64::consts::PI * s2);

        let raw = |ix: usize, iy: usize| c * (h[ix] * g[iy] + g[ix] * h[iy]);
        let mut sum = 0.0;
        for iy in 0..taps {
            for ix in 0..taps {
                sum += raw(ix, iy);
            }
        }
        let mean = sum / (taps * taps) as f64;
        // Second moment of the zero-mean kernel along x; a consistent
        // discrete Laplacian has moment 2 (it maps x^2 to 2).
        let mut moment = 0.0;
        for iy in 0..taps {
            for ix in 0..taps {
                moment += (raw(ix, iy) - mean) * offset(ix) * offset(ix);
            }
        }
        let scale = 2.0 / moment;
        Self {
            radius,
            g,
            h,
            c,
            mean,
            scale,
        }
    }

    fn weight(&self, ix: usize, iy: usize) -> f64 {
        let raw = self.c * (self.h[ix] * self.g[iy] + self.g[ix] * self.h[iy]);
        self.scale * (raw - self.mean)
    }
}

/// Sampled Laplacian of Gaussian at `sigma`, zero-mean corrected and scaled
/// to unit second moment so that it acts as a consistent Laplacian at every
/// scale.
pub fn log_kernel(sigma: ScaleParameter, truncation_multiple: f64) -> Result<Kernel> {
    check_truncation(truncation_multiple)?;
    if sigma.is_zero() {
        return Err(Error::param(
            "Laplacian of Gaussian is undefined at zero scale",
        ));
    }
    let parts = LogParts::new(sigma.sigma(), truncation_multiple);
    let taps = 2 * parts.radius + 1;
    let mut weights = Vec::with_capacity(taps * taps);
    for iy in 0..taps {
        for ix in 0..taps {
            weights.push(parts.weight(ix, iy));
        }
    }
    Ok(Kernel {
        kind: KernelKind::LaplacianOfGaussian,
        radius: parts.radius,
        weights,
    })
}

/// Index table: for each output position, the source index of every tap.
fn tap_table(n: usize, radius: usize, boundary: BoundaryMode) -> Vec<usize> {
    let taps = 2 * radius + 1;
    let mut table = Vec::with_capacity(n * taps);
    for i in 0..n {
        for k in 0..taps {
            let j = i as isize + k as isize - radius as isize;
            table.push(boundary.resolve(j, n));
        }
    }
    table
}

#[inline]
fn dot_taps(weights: &[f64], idx: &[usize], src: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for (w, &j) in weights.iter().zip(idx) {
        acc += w * src(j);
    }
    acc
}

/// Convolve every row of a `width x height` buffer with a symmetric 1-D kernel.
fn convolve_rows(
    src: &[f64],
    width: usize,
    weights: &[f64],
    radius: usize,
    boundary: BoundaryMode,
) -> Vec<f64> {
    let taps = weights.len();
    let table = tap_table(width, radius, boundary);
    let mut out = vec![0.0; src.len()];
    let work = |(row_out, row_in): (&mut [f64], &[f64])| {
        for (x, o) in row_out.iter_mut().enumerate() {
            *o = dot_taps(weights, &table[x * taps..(x + 1) * taps], |j| row_in[j]);
        }
    };
    if src.len() * taps >= PARALLEL_THRESHOLD {
        out.par_chunks_mut(width)
            .zip(src.par_chunks(width))
            .for_each(work);
    } else {
        out.chunks_mut(width).zip(src.chunks(width)).for_each(work);
    }
    out
}

/// Convolve every column of a `width x height` buffer with a symmetric 1-D kernel.
fn convolve_cols(
    src: &[f64],
    width: usize,
    height: usize,
    weights: &[f64],
    radius: usize,
    boundary: BoundaryMode,
) -> Vec<f64> {
    let taps = weights.len();
    let table = tap_table(height, radius, boundary);
    let mut out = vec![0.0; src.len()];
    let work = |(y, row_out): (usize, &mut [f64])| {
        let idx = &table[y * taps..(y + 1) * taps];
        for (x, o) in row_out.iter_mut().enumerate() {
            *o = dot_taps(weights, idx, |j| src[j * width + x]);
        }
    };
    if src.len() * taps >= PARALLEL_THRESHOLD {
        out.par_chunks_mut(width).enumerate().for_each(work);
    } else {
        out.chunks_mut(width).enumerate().for_each(work);
    }
    out
}

fn separable(
    field: &ScalarField2D,
    row_weights: &[f64],
    col_weights: &[f64],
    radius: usize,
    boundary: BoundaryMode,
) -> Vec<f64> {
    let rows = convolve_rows(field.values(), field.width(), row_weights, radius, boundary);
    convolve_cols(
        &rows,
        field.width(),
        field.height(),
        col_weights,
        radius,
        boundary,
    )
}

/// Gaussian blur with the default truncation.
pub fn blur2d(field: &ScalarField2D, sigma: ScaleParameter, boundary: BoundaryMode) -> ScalarField2D {
    blur2d_with(field, sigma, boundary, DEFAULT_TRUNCATION)
        .expect("default truncation multiple is valid")
}

/// Gaussian blur with [`discrete_gaussian_kernel`]: a row pass followed by
/// a column pass.
pub fn blur2d_with(
    field: &ScalarField2D,
    sigma: ScaleParameter,
    boundary: BoundaryMode,
    truncation_multiple: f64,
) -> Result<ScalarField2D> {
    if sigma.is_zero() {
        check_truncation(truncation_multiple)?;
        return Ok(field.clone());
    }
    let kernel = discrete_gaussian_kernel(sigma, truncation_multiple)?;
    // Constants are fixed points of diffusion; kernel rounding would
    // otherwise perturb them in the last bits.
    if is_constant(field.values()) {
        return Ok(field.clone());
    }
    let values = separable(field, &kernel.weights, &kernel.weights, kernel.radius, boundary);
    Ok(ScalarField2D::from_raw(field.width(), field.height(), values))
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

pub fn blur1d(signal: &Signal1D, sigma: ScaleParameter, boundary: BoundaryMode) -> Signal1D {
    blur1d_with(signal, sigma, boundary, DEFAULT_TRUNCATION)
        .expect("default truncation multiple is valid")
}

pub fn blur1d_with(
    signal: &Signal1D,
    sigma: ScaleParameter,
    boundary: BoundaryMode,
    truncation_multiple: f64,
) -> Result<Signal1D> {
    if sigma.is_zero() {
        check_truncation(truncation_multiple)?;
        return Ok(signal.clone());
    }
    let kernel = discrete_gaussian_kernel(sigma, truncation_multiple)?;
    if is_constant(signal.values()) {
        return Ok(signal.clone());
    }
    let values = convolve_rows(
        signal.values(),
        signal.len(),
        &kernel.weights,
        kernel.radius,
        boundary,
    );
    Ok(Signal1D { values })
}

/// Laplacian-of-Gaussian response with the default truncation.
pub fn log_filter(
    field: &ScalarField2D,
    sigma: ScaleParameter,
    boundary: BoundaryMode,
) -> Result<ScalarField2D> {
    log_filter_with(field, sigma, boundary, DEFAULT_TRUNCATION)
}

/// Convolution with [`log_kernel`], evaluated through its separable
/// decomposition (two separable products minus a box term).
pub fn log_filter_with(
    field: &ScalarField2D,
    sigma: ScaleParameter,
    boundary: BoundaryMode,
    truncation_multiple: f64,
) -> Result<ScalarField2D> {
    check_truncation(truncation_multiple)?;
    if sigma.is_zero() {
        return Err(Error::param(
            "Laplacian of Gaussian is undefined at zero scale",
        ));
    }
    if is_constant(field.values()) {
        return Ok(ScalarField2D::zeros(field.width(), field.height()));
    }
    let p = LogParts::new(sigma.sigma(), truncation_multiple);
    let ones = vec![1.0; 2 * p.radius + 1];
    let hg = separable(field, &p.h, &p.g, p.radius, boundary);
    let gh = separable(field, &p.g, &p.h, p.radius, boundary);
    let boxed = separable(field, &ones, &ones, p.radius, boundary);
    let values = hg
        .iter()
        .zip(&gh)
        .zip(&boxed)
        .map(|((a, b), m)| p.scale * (p.c * (a + b) - p.mean * m))
        .collect();
    Ok(ScalarField2D::from_raw(field.width(), field.height(), values))
}

/// Blur `field` at each scale. `sigmas` must start at zero and increase
/// strictly; element 0 is the input itself.
pub fn scale_family(
    field: &ScalarField2D,
    sigmas: &[ScaleParameter],
    boundary: BoundaryMode,
) -> Result<Vec<ScalarField2D>> {
    validate_scale_sequence(sigmas)?;
    Ok(sigmas
        .par_iter()
        .map(|&s| blur2d(field, s, boundary))
        .collect())
}

/// 1-D counterpart of [`scale_family`].
pub fn scale_family_1d(
    signal: &Signal1D,
    sigmas: &[ScaleParameter],
    boundary: BoundaryMode,
) -> Result<Vec<Signal1D>> {
    validate_scale_sequence(sigmas)?;
    Ok(sigmas
        .iter()
        .map(|&s| blur1d(signal, s, boundary))
        .collect())
}

fn validate_scale_sequence(sigmas: &[ScaleParameter]) -> Result<()> {
    match sigmas.first() {
        None => return Err(Error::param("scale sequence is empty")),
        Some(s) if !s.is_zero() => {
            return Err(Error::param(format!(
                "scale sequence must start at 0, starts at {}",
                s.sigma()
            )))
        }
        _ => {}
    }
    if let Some(w) = sigmas.windows(2).find(|w| w[1].sigma() <= w[0].sigma()) {
        return Err(Error::param(format!(
            "scale sequence must be strictly increasing ({} then {})",
            w[0].sigma(),
            w[1].sigma()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigma(s: f64) -> ScaleParameter {
        ScaleParameter::new(s).unwrap()
    }

    /// Non-separable reference convolution using `Kernel::at`.
    fn direct_convolve(field: &ScalarField2D, kernel: &Kernel, boundary: BoundaryMode) -> ScalarField2D {
        let r = kernel.radius as isize;
        ScalarField2D::from_fn(field.width(), field.height(), |x, y| {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = boundary.resolve(x as isize + dx, field.width());
                    let sy = boundary.resolve(y as isize + dy, field.height());
                    acc += kernel.at(dx, dy) * field.get(sx, sy);
                }
            }
            acc
        })
    }

    fn bump(width: usize, height: usize, cx: f64, cy: f64, s: f64) -> ScalarField2D {
        ScalarField2D::from_fn(width, height, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn reflect_boundary_is_half_sample_symmetric() {
        let n = 4;
        let got: Vec<usize> = (-5..9).map(|i| BoundaryMode::Reflect.resolve(i, n)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
        assert_eq!(BoundaryMode::Clamp.resolve(-3, n), 0);
        assert_eq!(BoundaryMode::Clamp.resolve(7, n), 3);
    }

    #[test]
    fn zero_sigma_kernel_is_identity() {
        let k = gaussian_kernel(ScaleParameter::ZERO, 4.0).unwrap();
        assert_eq!(k.radius, 0);
        assert_eq!(k.weights, vec![1.0]);
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        for s in [0.3, 0.5, 1.0, 1.7, 2.0, 3.3, 6.45, 16.0] {
            let k = gaussian_kernel(sigma(s), 4.0).unwrap();
            let total: f64 = k.weights.iter().sum();
            assert!((total - 1.0).abs() <= 1e-15, "sigma={s} sum={total}");
            assert!(k.weights.iter().all(|&w| w >= 0.0));
            assert!(k.radius as f64 >= (4.0 * s).ceil());
        }
    }

    #[test]
    fn gaussian_center_weight_matches_direct_sum() {
        let k = gaussian_kernel(sigma(1.0), 4.0).unwrap();
        assert_eq!(k.radius, 4);
        let mut z = 0.0;
        for t in -4i32..=4 {
            z += (-(t * t) as f64 / 2.0).exp();
        }
        assert!((k.weights[4] - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn discrete_gaussian_has_exact_variance() {
        // Wide truncation so the discarded tail does not bias the moment.
        for s in [0.1, 0.5, 1.0, 2.0, 7.3, 30.0] {
            let k = discrete_gaussian_kernel(sigma(s), 9.0).unwrap();
            let r = k.radius as isize;
            let total: f64 = k.weights.iter().sum();
            let var: f64 = (-r..=r).zip(&k.weights).map(|(d, w)| w * (d * d) as f64).sum();
            assert!((total - 1.0).abs() <= 1e-14, "sigma={s} sum={total}");
            assert!((var - s * s).abs() <= 1e-12 * s * s.max(1.0) * s.max(1.0), "sigma={s} var={var}");
            assert!(k.weights.iter().all(|&w| w >= 0.0));
            assert!(k.radius as f64 >= (9.0 * s).ceil());
        }
    }

    #[test]
    fn discrete_gaussian_matches_bessel_values() {
        // exp(-1) I_0(1) and exp(-1) I_1(1).
        let half = scaled_bessel(1.0, 40);
        assert!((half[0] - 0.465_759_607_593_640_3).abs() < 1e-14);
        assert!((half[1] - 0.207_910_415_349_708_4).abs() < 1e-14);
    }

    #[test]
    fn discrete_gaussians_compose() {
        let a = discrete_gaussian_kernel(sigma(0.5), 6.0).unwrap();
        let b = discrete_gaussian_kernel(sigma(1.2), 6.0).unwrap();
        let c = discrete_gaussian_kernel(sigma(1.3), 6.0).unwrap();
        let tap = |k: &Kernel, n: isize| {
            let i = n + k.radius as isize;
            if i < 0 || i >= k.taps() as isize { 0.0 } else { k.weights[i as usize] }
        };
        let ra = a.radius as isize;
        for n in -(c.radius as isize)..=c.radius as isize {
            let conv: f64 = (-ra..=ra).map(|m| tap(&a, m) * tap(&b, n - m)).sum();
            let want = tap(&c, n);
            assert!((conv - want).abs() < 1e-8, "n={n} {conv} vs {want}");
        }
    }

    #[test]
    fn five_point_laplacian_of_quadratic() {
        let f = ScalarField2D::from_fn(6, 5, |x, y| (x * x) as f64 + 2.0 * (y * y) as f64);
        let lap = laplacian(&f, BoundaryMode::Reflect);
        assert_eq!(lap.get(2, 2), 6.0);
        // Reflect repeats the edge sample: x = 0 sees neighbors 0 and 1.
        assert_eq!(lap.get(0, 2), 5.0);
        assert!(laplacian(&ScalarField2D::filled(3, 3, 2.0), BoundaryMode::Clamp)
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_parameter_errors() {
        assert!(gaussian_kernel(sigma(1.0), 1.5).is_err());
        assert!(ScaleParameter::new(f64::NAN).is_err());
        assert!(ScaleParameter::new(f64::INFINITY).is_err());
        assert!(ScaleParameter::new(-1.0).is_err());
        assert!(log_kernel(ScaleParameter::ZERO, 4.0).is_err());
        let f = ScalarField2D::zeros(4, 4);
        assert!(log_filter(&f, ScaleParameter::ZERO, BoundaryMode::Reflect).is_err());
    }

    #[test]
    fn kernels_are_exactly_symmetric() {
        for s in [0.4, 1.0, 2.5] {
            for kernel in [gaussian_kernel(sigma(s), 4.0).unwrap(), log_kernel(sigma(s), 4.0).unwrap()] {
                let r = kernel.radius as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let w = kernel.at(dx, dy);
                        assert_eq!(w.to_bits(), kernel.at(-dx, dy).to_bits());
                        assert_eq!(w.to_bits(), kernel.at(dy, dx).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn log_kernel_is_zero_sum_with_unit_moment() {
        for s in [0.25, 0.7, 1.0, 2.0, 4.0] {
            let k = log_kernel(sigma(s), 4.0).unwrap();
            let total: f64 = k.weights.iter().sum();
            assert!(total.abs() < 1e-12, "sigma={s} sum={total}");
            let r = k.radius as isize;
            let mut moment = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    moment += k.at(dx, dy) * (dx * dx) as f64;
                }
            }
            assert!((moment - 2.0).abs() < 1e-9, "sigma={s} moment={moment}");
        }
    }

    #[test]
    fn log_normalization_is_small_at_moderate_scale() {
        // Above ~1px the sampled LoG is already close to a unit-moment Laplacian.
        for s in [1.5, 2.0, 4.0] {
            let p = LogParts::new(s, 4.0);
            assert!((p.scale - 1.0).abs() < 0.02, "sigma={s} scale={}", p.scale);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let f = ScalarField2D::filled(9, 7, 0.37);
        for b in [BoundaryMode::Reflect, BoundaryMode::Clamp] {
            let out = blur2d(&f, sigma(2.3), b);
            for &v in out.values() {
                assert!((v - 0.37).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_sigma_blur_is_bitwise_identity() {
        let f = ScalarField2D::from_fn(5, 4, |x, y| -(x as f64 * 0.3 - y as f64).sin());
        let out = blur2d(&f, ScaleParameter::ZERO, BoundaryMode::Reflect);
        for (a, b) in f.values().iter().zip(out.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let s = Signal1D::new(vec![-0.0, 1.0, 2.5]).unwrap();
        let o = blur1d(&s, ScaleParameter::ZERO, BoundaryMode::Clamp);
        assert_eq!(o.values()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn separable_blur_matches_direct_convolution_on_impulse() {
        let mut f = ScalarField2D::zeros(5, 5);
        f.set(2, 2, 1.0);
        let k = discrete_gaussian_kernel(sigma(1.0), 4.0).unwrap();
        for b in [BoundaryMode::Reflect, BoundaryMode::Clamp] {
            let fast = blur2d(&f, sigma(1.0), b);
            let slow = direct_convolve(&f, &k, b);
            assert!(fast.max_abs_diff(&slow) < 1e-15);
        }
        // Off-centre impulse exercises the boundary folding.
        let mut g = ScalarField2D::zeros(5, 5);
        g.set(0, 1, 1.0);
        let fast = blur2d(&g, sigma(1.0), BoundaryMode::Reflect);
        let slow = direct_convolve(&g, &k, BoundaryMode::Reflect);
        assert!(fast.max_abs_diff(&slow) < 1e-15);
    }

    #[test]
    fn log_filter_matches_direct_convolution() {
        let f = ScalarField2D::from_fn(11, 9, |x, y| ((x * 7 + y * 3) % 5) as f64 / 4.0);
        for s in [0.5, 1.3, 2.0] {
            let k = log_kernel(sigma(s), 4.0).unwrap();
            for b in [BoundaryMode::Reflect, BoundaryMode::Clamp] {
                let fast = log_filter(&f, sigma(s), b).unwrap();
                let slow = direct_convolve(&f, &k, b);
                assert!(fast.max_abs_diff(&slow) < 1e-12, "sigma={s}");
            }
        }
    }

    #[test]
    fn log_of_constant_is_zero() {
        let f = ScalarField2D::filled(12, 10, 3.5);
        let out = log_filter(&f, sigma(1.5), BoundaryMode::Reflect).unwrap();
        assert!(out.max_abs() < 1e-12);
    }

    #[test]
    fn log_lobes_straddle_step_edge() {
        let f = ScalarField2D::from_fn(32, 8, |x, _| if x < 16 { 0.0 } else { 1.0 });
        let out = log_filter(&f, sigma(1.5), BoundaryMode::Reflect).unwrap();
        let row = out.row(4);
        let (argmax, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let (argmin, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::MAX), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
        // Lobes sit about one sigma either side of the edge between columns 15 and 16.
        assert!((14..=15).contains(&argmax), "positive lobe at {argmax}");
        assert!((16..=17).contains(&argmin), "negative lobe at {argmin}");
        assert!(row[15] > 0.0 && row[16] < 0.0);
    }

    #[test]
    fn narrow_log_peaks_on_edge_columns() {
        let f = ScalarField2D::from_fn(32, 8, |x, _| if x < 16 { 0.0 } else { 1.0 });
        let out = log_filter(&f, sigma(0.5), BoundaryMode::Reflect).unwrap();
        let row = out.row(4);
        let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let at = row.iter().position(|v| v.abs() == peak).unwrap();
        assert!(at == 15 || at == 16, "strongest response at {at}");
    }

    #[test]
    fn log_matches_scale_derivative_of_blur() {
        // dL/dsigma = sigma * laplacian(L) for the Gaussian family.
        // Kept away from multiples of 0.25 so the truncation radius is fixed over [s-h, s+h].
        let f = bump(40, 40, 19.5, 20.0, 3.0);
        let s = 2.1;
        let h = 1e-3;
        let up = blur2d(&f, sigma(s + h), BoundaryMode::Reflect);
        let down = blur2d(&f, sigma(s - h), BoundaryMode::Reflect);
        let fd = up.sub(&down).scale(1.0 / (2.0 * h * s));
        let log = log_filter(&f, sigma(s), BoundaryMode::Reflect).unwrap();
        let peak = log.max_abs();
        let mut worst = 0.0f64;
        for y in 8..32 {
            for x in 8..32 {
                worst = worst.max((fd.get(x, y) - log.get(x, y)).abs());
            }
        }
        assert!(worst < 0.02 * peak, "worst={worst} peak={peak}");
    }

    #[test]
    fn blur_preserves_mean_under_reflect() {
        let f = ScalarField2D::from_fn(13, 6, |x, y| ((x * 31 + y * 17) % 11) as f64 / 10.0);
        for s in [0.7, 2.0, 9.0] {
            let out = blur2d(&f, sigma(s), BoundaryMode::Reflect);
            assert!((out.mean() - f.mean()).abs() < 1e-10);
        }
    }

    #[test]
    fn scale_family_contract() {
        let f = bump(16, 16, 7.0, 8.0, 2.0);
        let fam = scale_family(&f, &[ScaleParameter::ZERO], BoundaryMode::Reflect).unwrap();
        assert_eq!(fam, vec![f.clone()]);

        assert!(scale_family(&f, &[sigma(1.0)], BoundaryMode::Reflect).is_err());
        assert!(scale_family(&f, &[ScaleParameter::ZERO, sigma(2.0), sigma(1.0)], BoundaryMode::Reflect).is_err());
        assert!(scale_family(&f, &[ScaleParameter::ZERO, sigma(1.0), sigma(1.0)], BoundaryMode::Reflect).is_err());
        assert!(scale_family(&f, &[], BoundaryMode::Reflect).is_err());

        let sigmas = [ScaleParameter::ZERO, sigma(1.5), sigma(2.5)];
        let fam = scale_family(&f, &sigmas, BoundaryMode::Reflect).unwrap();
        let two_stage = blur2d(&fam[1], sigma((2.5f64.powi(2) - 1.5f64.powi(2)).sqrt()), BoundaryMode::Reflect);
        assert!(fam[2].max_abs_diff(&two_stage) < 1e-3);
        for w in fam.windows(2) {
            assert!(w[1].variance() <= w[0].variance() + 1e-15);
        }
    }

    #[test]
    fn parabola_minimum_rises_with_blur() {
        let xs: Vec<f64> = (0..61).map(|i| -3.0 + 0.1 * i as f64).collect();
        let signal = Signal1D::new(xs.iter().map(|x| x * x + 1.0).collect()).unwrap();
        let mut prev = signal.min();
        for s in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let m = blur1d(&signal, sigma(s), BoundaryMode::Reflect).min();
            assert!(m > prev, "sigma={s}: {m} <= {prev}");
            prev = m;
        }
    }

    #[test]
    fn alpha_grid_is_uniform_in_alpha() {
        let grid = uniform_alpha_grid(sigma(4.0), 8);
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], ScaleParameter::ZERO);
        assert_eq!(grid[8], sigma(4.0));
        for (i, s) in grid.iter().enumerate() {
            assert!((s.alpha() - 32.0 * i as f64 / 8.0).abs() < 1e-12);
        }
    }
}
