//! Command-line front end. [`run`] parses arguments, dispatches to one
//! subcommand and maps failures to exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | an asserted axiom check failed |
//! | 2 | invalid flags or flag values |
//! | 3 | a model, input or output file could not be read or written |
//! | 4 | input shape does not match the model |

pub mod io;
pub mod render;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::attribution::{
    blur_integrated_gradients_with, default_sigma_max, integrated_gradients, prediction_trend,
    second_last_label, AttributionMap, Baseline, BlurBackend, PathSpec, ScoreTransform,
};
use crate::axioms::{run_suite, Suite, SuiteConfig};
use crate::error::{Error, Result};
use crate::eval::{
    compare_methods, generate_shape_dataset, write_per_sample_csv, write_summary_csv, EvalMethod,
    ShapeKind, ShapeSample,
};
use crate::model::{fit_convnet, load_model, save_model, DifferentiableModel, FitConfig, Model};
use crate::scale_space::{BoundaryMode, ScalarField2D, ScaleParameter};

use self::io::{create, finish, fmt_real, with_suffix};
use self::render::{render, Colormap, RenderConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const META_FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_AXIOM_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_LOAD: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "blurig", version, about = "Blur and straight-line integrated gradients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attribute one model output to the input pixels.
    Attribute(AttributeArgs),
    /// Track class scores and attribution mass along the blur path.
    Trend(TrendArgs),
    /// Run the axiom checks on built-in fixtures.
    Axioms(AxiomsArgs),
    /// Score saliency methods against shape masks.
    Eval(EvalArgs),
    /// Write a synthetic shape dataset to a directory.
    Dataset(DatasetArgs),
    /// Fit a small convnet classifier on a shape dataset.
    Fit(FitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ig,
    BlurIg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    /// Finite difference between neighbouring blur levels.
    Fd,
    /// Five-point Laplacian of the input blurred to each segment's mid scale.
    Laplacian,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Model weights (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Grayscale PNG/PGM image or CSV grid.
    #[arg(long)]
    pub input: PathBuf,
    /// Output index to attribute.
    #[arg(long = "class")]
    pub class: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Largest blur scale (blur-ig only); defaults to half the
    /// smaller image side.
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// black, grayscale or random:<seed> (ig only).
    #[arg(long, value_parser = parse_baseline)]
    pub baseline: Option<Baseline>,
    #[arg(long, value_parser = parse_boundary, default_value = "reflect")]
    pub boundary: BoundaryMode,
    #[arg(long, value_enum, default_value_t = Backend::Fd)]
    pub backend: Backend,
    #[arg(long, value_enum, default_value_t = Colormap::SignedGreenRed)]
    pub colormap: Colormap,
    /// Percentile of |attribution| mapped to full colour.
    #[arg(long, default_value_t = 99.0)]
    pub clip: f64,
    /// Blend the rendered map with the input.
    #[arg(long)]
    pub overlay: bool,
    /// Output prefix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrendArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Classes to track; the first one is attributed.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long, value_parser = parse_transform, default_value = "softmax")]
    pub scores: ScoreTransform,
    #[arg(long, value_parser = parse_boundary, default_value = "reflect")]
    pub boundary: BoundaryMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AxiomsArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path, written whether or not the checks pass.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Add a method that breaks the dummy axiom; the suite must then fail.
    #[arg(long)]
    pub negative_control: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated: ig, ig:<baseline>, blur-ig, random[:<seed>], oracle.
    #[arg(long, value_delimiter = ',', default_value = "blur-ig,ig,random:0")]
    pub methods: Vec<String>,
    /// generate:<n>:<seed> or a directory with manifest.csv.
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// Background noise amplitude for generated datasets.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "square,disc,texture")]
    pub kinds: Vec<ShapeKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub n: usize,
    /// Image size as <height>x<width>.
    #[arg(long, value_parser = parse_size, default_value = "32x32")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "square,disc,texture")]
    pub kinds: Vec<ShapeKind>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// generate:<n>:<seed> or a directory with manifest.csv.
    #[arg(long)]
    pub dataset: String,
    /// Image size for generated datasets, <height>x<width>.
    #[arg(long, value_parser = parse_size, default_value = "32x32")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "square,disc,texture")]
    pub kinds: Vec<ShapeKind>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model weights output (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_boundary(s: &str) -> std::result::Result<BoundaryMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_transform(s: &str) -> std::result::Result<ScoreTransform, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected <height>x<width>, got {s:?}"))?;
    let dim = |v: &str| v.parse::<usize>().map_err(|_| format!("bad dimension {v:?} in {s:?}"));
    Ok((dim(h)?, dim(w)?))
}

/// Failure carrying the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parameter(_) | Error::Validation(_) => EXIT_USAGE,
            Error::Format { .. } | Error::Io { .. } => EXIT_LOAD,
            Error::ShapeMismatch { .. } => EXIT_SHAPE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Tool version and flags, recorded in every output file.
struct Provenance {
    args: Vec<String>,
}

impl Provenance {
    fn line(&self) -> String {
        format!("blurig {VERSION} {}", self.args.join(" "))
    }

    fn json(&self) -> serde_json::Value {
        json!({ "tool": "blurig", "version": VERSION, "args": self.args })
    }

    fn png_texts(&self) -> [(&'static str, String); 2] {
        [
            ("Software", format!("blurig {VERSION}")),
            ("Comment", self.args.join(" ")),
        ]
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let provenance = Provenance {
        args: args
            .iter()
            .skip(1)
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
    };
    let result = match &cli.command {
        Command::Attribute(a) => cmd_attribute(a, &provenance),
        Command::Trend(a) => cmd_trend(a, &provenance),
        Command::Axioms(a) => cmd_axioms(a, &provenance),
        Command::Eval(a) => cmd_eval(a, &provenance),
        Command::Dataset(a) => cmd_dataset(a, &provenance),
        Command::Fit(a) => cmd_fit(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load(path: &Path) -> Result<Model> {
    load_model(path).map_err(|e| match e {
        e @ (Error::Io { .. } | Error::Format { .. }) => e,
        other => Error::format(path, other.to_string()),
    })
}

fn load_input(model: &Model, path: &Path) -> Result<ScalarField2D> {
    let input = io::read_field(path)?;
    model.input_shape().check(&input)?;
    Ok(input)
}

fn check_class(model: &Model, class: usize) -> std::result::Result<(), Failure> {
    if class >= model.num_outputs() {
        return Err(usage(format!(
            "class {class} out of range for a model with {} outputs",
            model.num_outputs()
        )));
    }
    Ok(())
}

fn blur_path(input: &ScalarField2D, sigma_max: Option<f64>, steps: usize) -> Result<PathSpec> {
    let s = match sigma_max {
        Some(s) => ScaleParameter::new(s)?,
        None => default_sigma_max(input.width(), input.height()),
    };
    Ok(PathSpec::blur(s, steps))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_text(path, &text)
}

fn cmd_attribute(a: &AttributeArgs, prov: &Provenance) -> CmdResult {
    match (a.method, &a.sigma_max, &a.baseline) {
        (Method::Ig, Some(_), _) => return Err(usage("--sigma-max applies to blur-ig only")),
        (Method::BlurIg, _, Some(_)) => return Err(usage("--baseline applies to ig only")),
        _ => {}
    }
    let render_config = RenderConfig {
        colormap: a.colormap,
        percentile_clip: a.clip,
        overlay: a.overlay,
    };
    render_config.validate()?;
    let model = load(&a.model)?;
    check_class(&model, a.class)?;
    let input = load_input(&model, &a.input)?;

    let map: AttributionMap = match a.method {
        Method::Ig => {
            let baseline = a.baseline.clone().unwrap_or(Baseline::Black);
            let path = PathSpec::intensity(baseline, a.steps).with_boundary(a.boundary);
            integrated_gradients(&model, &input, a.class, &path)?
        }
        Method::BlurIg => {
            let path = blur_path(&input, a.sigma_max, a.steps)?.with_boundary(a.boundary);
            let backend = match a.backend {
                Backend::Fd => BlurBackend::FiniteDifference,
                Backend::Laplacian => BlurBackend::Laplacian,
            };
            blur_integrated_gradients_with(&model, &input, a.class, &path, backend)?
        }
    };
    let csv_path = with_suffix(&a.out, ".attr.csv");
    let mut w = create(&csv_path)?;
    let mut text = format!("# {}\ny,x,value\n", prov.line());
    for y in 0..map.values.height() {
        for x in 0..map.values.width() {
            text.push_str(&format!("{y},{x},{}\n", fmt_real(map.values.get(x, y))));
        }
    }
    std::io::Write::write_all(&mut w, text.as_bytes()).map_err(|e| Error::io(&csv_path, e))?;
    finish(&csv_path, w)?;

    let pixels = render(&map.values, Some(&input), &render_config)?;
    let texts = prov.png_texts();
    let texts: Vec<(&str, &str)> = texts.iter().map(|(k, v)| (*k, v.as_str())).collect();
    io::write_png(
        &with_suffix(&a.out, ".saliency.png"),
        input.width(),
        input.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &pixels,
        &texts,
    )?;

    let meta = json!({
        "format_version": META_FORMAT_VERSION,
        "provenance": prov.json(),
        "command": "attribute",
        "method": map_method_name(a.method),
        "input": { "path": a.input, "height": input.height(), "width": input.width() },
        "model": { "path": a.model, "architecture": model.architecture().tag() },
        "class": a.class,
        "class_name": model.class_names()[a.class],
        "path": map.path,
        "backend": match a.backend { Backend::Fd => "finite_difference", Backend::Laplacian => "laplacian" },
        "f_start": map.f_start,
        "f_end": map.f_end,
        "total": map.total(),
        "residual": map.residual,
        "relative_residual": finite_or_null(map.relative_residual()),
        "render": render_config,
        "warnings": map.warnings,
    });
    write_json(&with_suffix(&a.out, ".meta.json"), &meta)?;
    Ok(EXIT_OK)
}

fn map_method_name(m: Method) -> &'static str {
    match m {
        Method::Ig => "ig",
        Method::BlurIg => "blur-ig",
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() { json!(v) } else { serde_json::Value::Null }
}

fn cmd_trend(a: &TrendArgs, prov: &Provenance) -> CmdResult {
    let model = load(&a.model)?;
    for &c in &a.classes {
        check_class(&model, c)?;
    }
    let input = load_input(&model, &a.input)?;
    let path = blur_path(&input, a.sigma_max, a.steps)?.with_boundary(a.boundary);
    let curve = prediction_trend(&model, &input, &a.classes, &path, a.scores)?;
    let labels = if model.num_outputs() >= 2 {
        Some(second_last_label(&model, &input, a.classes[0], &path)?)
    } else {
        None
    };

    let csv_path = with_suffix(&a.out, ".trend.csv");
    let mut text = format!("# {}\nsigma,alpha", prov.line());
    for c in &a.classes {
        text.push_str(&format!(",score_{c}"));
    }
    text.push_str(",cumulative_mass\n");
    let sigmas = curve.sigmas.as_deref().unwrap_or_default();
    for i in 0..curve.len() {
        text.push_str(&fmt_real(sigmas[i]));
        text.push(',');
        text.push_str(&fmt_real(curve.alphas[i]));
        for s in &curve.scores[i] {
            text.push(',');
            text.push_str(&fmt_real(*s));
        }
        text.push(',');
        text.push_str(&fmt_real(curve.cumulative_mass[i]));
        text.push('\n');
    }
    write_text(&csv_path, &text)?;

    // Index of the last path point whose argmax differs from the first
    // tracked class; the crossover happens right after it.
    let crossover = labels.as_ref().and_then(|l| {
        l.argmax_per_step
            .iter()
            .rposition(|&c| c != a.classes[0])
    });
    let summary = json!({
        "format_version": META_FORMAT_VERSION,
        "provenance": prov.json(),
        "command": "trend",
        "path": curve.path,
        "classes": a.classes,
        "scores": curve.transform,
        "argmax_per_step": labels.as_ref().map(|l| &l.argmax_per_step),
        "second_last_label": labels.as_ref().and_then(|l| l.second_last_label),
        "last_other_index": crossover,
        "last_other_sigma": crossover.map(|i| sigmas[i]),
    });
    write_json(&with_suffix(&a.out, ".trend.json"), &summary)?;
    Ok(EXIT_OK)
}

fn cmd_axioms(a: &AxiomsArgs, prov: &Provenance) -> CmdResult {
    let config = SuiteConfig {
        seed: a.seed,
        negative_control: a.negative_control,
        ..SuiteConfig::default()
    };
    let report = run_suite(a.suite, &config)?;
    for c in &report.checks {
        let status = match (c.pass, c.asserted) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "note",
        };
        println!("{status} {:?} {}", c.suite, c.name);
    }
    if let Some(path) = &a.report {
        let mut value = serde_json::to_value(&report).expect("reports serialize");
        value["provenance"] = prov.json();
        write_json(path, &value)?;
    }
    if report.pass {
        println!("all asserted checks passed");
        Ok(EXIT_OK)
    } else {
        for c in report.failures() {
            eprintln!("failed: {} {}", c.name, c.detail);
        }
        Ok(EXIT_AXIOM_FAILURE)
    }
}

/// `generate:<n>:<seed>` or a dataset directory.
fn load_dataset(spec: &str, shape: (usize, usize), kinds: &[ShapeKind], noise: f64) -> std::result::Result<Vec<ShapeSample>, Failure> {
    match spec.strip_prefix("generate:") {
        Some(rest) => {
            let (n, seed) = rest
                .split_once(':')
                .and_then(|(n, s)| Some((n.parse().ok()?, s.parse().ok()?)))
                .ok_or_else(|| usage(format!("expected generate:<n>:<seed>, got {spec:?}")))?;
            Ok(generate_shape_dataset(n, shape.0, shape.1, kinds, noise, seed)?)
        }
        None => Ok(io::read_dataset_dir(Path::new(spec))?),
    }
}

fn cmd_eval(a: &EvalArgs, prov: &Provenance) -> CmdResult {
    let methods = a
        .methods
        .iter()
        .map(|m| EvalMethod::parse(m, a.steps, a.sigma_max))
        .collect::<Result<Vec<_>>>()?;
    let model = load(&a.model)?;
    let shape = model.input_shape();
    let data = load_dataset(&a.dataset, (shape.height, shape.width), &a.kinds, a.noise)?;
    if data.is_empty() {
        return Err(usage("dataset is empty"));
    }
    let summaries = compare_methods(&model, &data, &methods)?;

    let header = format!("# {}\n", prov.line());
    for (suffix, per_sample) in [(".eval.csv", false), (".samples.csv", true)] {
        let path = with_suffix(&a.out, suffix);
        let mut buf = header.clone().into_bytes();
        if per_sample {
            write_per_sample_csv(&summaries, &mut buf)?;
        } else {
            write_summary_csv(&summaries, &mut buf)?;
        }
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    let summary = json!({
        "format_version": META_FORMAT_VERSION,
        "provenance": prov.json(),
        "command": "eval",
        "samples": data.len(),
        "methods": summaries,
    });
    write_json(&with_suffix(&a.out, ".eval.json"), &summary)?;
    for s in &summaries {
        println!(
            "{:<16} auc {:.4}  f1 {:.4}  mae {:.4}",
            s.method, s.mean_auc, s.mean_f1, s.mean_mae
        );
    }
    Ok(EXIT_OK)
}

fn cmd_dataset(a: &DatasetArgs, prov: &Provenance) -> CmdResult {
    let data = generate_shape_dataset(a.n, a.size.0, a.size.1, &a.kinds, a.noise, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let texts = prov.png_texts();
    let texts: Vec<(&str, &str)> = texts.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let mut manifest = format!("# {}\nimage,mask,class,kind\n", prov.line());
    for (i, s) in data.iter().enumerate() {
        let image = format!("image_{i:04}.png");
        let mask = format!("mask_{i:04}.png");
        io::write_gray16(&a.out.join(&image), &s.field, &texts)?;
        io::write_mask(&a.out.join(&mask), &s.mask, &texts)?;
        let kind = s.kind.map_or("", ShapeKind::tag);
        manifest.push_str(&format!("{image},{mask},{},{kind}\n", s.class));
    }
    write_text(&a.out.join(io::MANIFEST), &manifest)?;
    Ok(EXIT_OK)
}

fn cmd_fit(a: &FitArgs) -> CmdResult {
    let data = load_dataset(&a.dataset, a.size, &a.kinds, a.noise)?;
    if data.is_empty() {
        return Err(usage("dataset is empty"));
    }
    let generated = a.dataset.starts_with("generate:");
    let num_classes = if generated {
        a.kinds.len()
    } else {
        data.iter().map(|s| s.class).max().unwrap_or(0) + 1
    };
    let pairs: Vec<(ScalarField2D, usize)> = data.iter().map(|s| (s.field.clone(), s.class)).collect();
    let config = FitConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
    };
    let (net, report) = fit_convnet(&pairs, num_classes, &config)?;
    let mut model = Model::from(net);
    if generated {
        model = model.with_class_names(a.kinds.iter().map(|k| k.tag().to_string()).collect())?;
    }
    save_model(&model, &a.out)?;
    println!(
        "final loss {:.6}  train accuracy {:.4}",
        report.final_loss, report.train_accuracy
    );
    Ok(EXIT_OK)
}
