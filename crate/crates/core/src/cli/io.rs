//! File formats used by the command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::eval::{AnnotationMask, ShapeSample};
use crate::scale_space::ScalarField2D;

/// Formats a real for CSV output. Negative zero prints as zero.
pub fn fmt_real(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.12e}")
}

/// `prefix` with `suffix` appended to its final component.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn finish(path: &Path, mut w: impl Write) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a single-channel field. `.csv` files hold a numeric grid with
/// one image row per line; anything else is decoded as an 8- or 16-bit
/// grayscale PNG or PGM and scaled to `[0, 1]`.
pub fn read_field(path: &Path) -> Result<ScalarField2D> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_csv_grid(path)
    } else {
        read_gray_image(path)
    }
}

fn read_gray_image(path: &Path) -> Result<ScalarField2D> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let values: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(img) => img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(img) => img
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!("expected a single-channel grayscale image, found {:?}", other.color()),
            ))
        }
    };
    ScalarField2D::new(w, h, values).map_err(|e| Error::format(path, e.to_string()))
}

fn read_csv_grid(path: &Path) -> Result<ScalarField2D> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            // A non-numeric first row is a header.
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::format(path, format!("row {}: {e}", i + 1))),
        }
    }
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 {
        return Err(Error::format(path, "no numeric rows"));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::format(
            path,
            format!("row {} has {} values, expected {width}", bad + 1, rows[bad].len()),
        ));
    }
    let height = rows.len();
    ScalarField2D::new(width, height, rows.concat()).map_err(|e| Error::format(path, e.to_string()))
}

/// PNG writer; `texts` become `tEXt` chunks.
pub fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    texts: &[(&str, &str)],
) -> Result<()> {
    let file = create(path)?;
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let png_err = |e: png::EncodingError| Error::format(path, e.to_string());
    for (k, v) in texts {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(png_err)?;
    }
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes `field` clamped to `[0, 1]` as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, field: &ScalarField2D, texts: &[(&str, &str)]) -> Result<()> {
    let data: Vec<u8> = field
        .values()
        .iter()
        .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png(
        path,
        field.width(),
        field.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
        texts,
    )
}

pub fn write_mask(path: &Path, mask: &AnnotationMask, texts: &[(&str, &str)]) -> Result<()> {
    let data: Vec<u8> = mask.inside().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
        texts,
    )
}

pub const MANIFEST: &str = "manifest.csv";

/// Loads `<dir>/manifest.csv` with columns `image,mask,class`; paths are
/// relative to `dir`. Extra columns are ignored.
pub fn read_dataset_dir(dir: &Path) -> Result<Vec<ShapeSample>> {
    let manifest = dir.join(MANIFEST);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(&manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&manifest, io),
            other => Error::format(&manifest, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(&manifest, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(&manifest, format!("missing column {name:?}")))
    };
    let (ci, cm, cc) = (column("image")?, column("mask")?, column("class")?);
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(&manifest, e.to_string()))?;
        let field = read_field(&dir.join(&record[ci]))?;
        let mask_path = dir.join(&record[cm]);
        let mask = AnnotationMask::from_field(&read_field(&mask_path)?)
            .map_err(|e| Error::format(&mask_path, e.to_string()))?;
        let class = record[cc].parse().map_err(|_| {
            Error::format(&manifest, format!("row {}: bad class {:?}", row + 1, &record[cc]))
        })?;
        samples.push(ShapeSample {
            field,
            mask,
            class,
            kind: None,
        });
    }
    if samples.is_empty() {
        return Err(Error::format(&manifest, "no samples listed"));
    }
    Ok(samples)
}
