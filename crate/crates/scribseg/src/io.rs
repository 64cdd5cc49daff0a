//! On-disk formats: binary PGM (P5) for grids, versioned JSON for
//! reports and manifests, CSV with a header row, and minimal SVG 1.1
//! line charts.
//!
//! Label maps are 8-bit PGM with 255 encoding the unlabeled sentinel,
//! which caps usable class indices at 254. Images are 16-bit PGM with
//! fixed-point intensities: stored value = round(intensity * 8192),
//! so the representable range is [0, 8) at a resolution of 1/8192.
//! Multi-channel images are one PGM per channel plus an index JSON.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::core::{Image, LabelMap, ProbMap, UNLABELED};
use crate::error::{Error, Result};

/// Version stamped into every JSON artifact; readers reject others.
pub const SCHEMA_VERSION: u32 = 1;

/// Fixed-point scale for 16-bit image PGMs.
pub const INTENSITY_SCALE: f64 = 8192.0;

/// Highest class index storable in an 8-bit label PGM (255 is the
/// unlabeled sentinel).
pub const MAX_PGM_LABEL: u16 = 254;

fn bad_file(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

fn write_pgm(path: &Path, width: usize, height: usize, maxval: u32, raster: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(raster.len() + 32);
    write!(out, "P5\n{width} {height}\n{maxval}\n")?;
    out.extend_from_slice(raster);
    fs::write(path, out)?;
    Ok(())
}

struct Pgm {
    width: usize,
    height: usize,
    maxval: u32,
    raster: Vec<u8>,
}

fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad_file(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(bad_file(path, "not a P5 PGM"));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| bad_file(path, format!("bad header token {s:?}")))
    };
    let width = parse(token(&bytes)?)?;
    let height = parse(token(&bytes)?)?;
    let maxval = parse(token(&bytes)?)? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(bad_file(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let expect = width * height * bytes_per;
    if bytes.len() < pos || bytes.len() - pos != expect {
        return Err(bad_file(
            path,
            format!(
                "raster size {} != expected {expect}",
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        raster: bytes[pos..].to_vec(),
    })
}

/// Writes a label map as an 8-bit PGM; unlabeled pixels become 255.
pub fn write_label_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let raster = labels
        .labels
        .iter()
        .map(|&l| {
            if l == UNLABELED {
                Ok(255u8)
            } else if l > MAX_PGM_LABEL {
                Err(Error::ClassOutOfRange {
                    label: l,
                    m: MAX_PGM_LABEL as usize + 1,
                })
            } else {
                Ok(l as u8)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    write_pgm(path, labels.width, labels.height, 255, &raster)
}

/// Reads an 8-bit label PGM; 255 becomes the unlabeled sentinel.
pub fn read_label_pgm(path: &Path) -> Result<LabelMap> {
    let pgm = read_pgm(path)?;
    if pgm.maxval != 255 {
        return Err(bad_file(path, "label PGM must have maxval 255"));
    }
    let labels = pgm
        .raster
        .iter()
        .map(|&b| if b == 255 { UNLABELED } else { b as u16 })
        .collect();
    LabelMap::new(pgm.height, pgm.width, labels)
}

fn write_channel_pgm(path: &Path, image: &Image, ch: usize) -> Result<()> {
    let mut raster = Vec::with_capacity(image.n_pixels() * 2);
    for row in 0..image.height {
        for col in 0..image.width {
            let v = (image.at(row, col, ch) * INTENSITY_SCALE).round();
            let q = v.clamp(0.0, 65535.0) as u16;
            raster.extend_from_slice(&q.to_be_bytes());
        }
    }
    write_pgm(path, image.width, image.height, 65535, &raster)
}

fn read_channel_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let pgm = read_pgm(path)?;
    if pgm.maxval != 65535 {
        return Err(bad_file(path, "image PGM must have maxval 65535"));
    }
    let data = pgm
        .raster
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / INTENSITY_SCALE)
        .collect();
    Ok((pgm.height, pgm.width, data))
}

/// Index JSON written alongside the per-channel PGMs of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageIndex {
    pub schema_version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channel file names, relative to the index file's directory.
    pub files: Vec<String>,
}

/// Writes an image as one 16-bit PGM per channel named
/// `<stem>.ch<k>.pgm`, plus `<stem>.index.json`; returns the index
/// path.
pub fn write_image(dir: &Path, stem: &str, image: &Image) -> Result<PathBuf> {
    let mut files = Vec::new();
    for ch in 0..image.channels {
        let name = format!("{stem}.ch{ch}.pgm");
        write_channel_pgm(&dir.join(&name), image, ch)?;
        files.push(name);
    }
    let index = ImageIndex {
        schema_version: SCHEMA_VERSION,
        height: image.height,
        width: image.width,
        channels: image.channels,
        files,
    };
    let path = dir.join(format!("{stem}.index.json"));
    write_json(&path, &index)?;
    Ok(path)
}

/// Reads an image back through its index JSON.
pub fn read_image(index_path: &Path) -> Result<Image> {
    let index: ImageIndex = read_json(index_path)?;
    check_schema_version(index_path, index.schema_version)?;
    if index.files.len() != index.channels || index.channels == 0 {
        return Err(bad_file(
            index_path,
            "channel count disagrees with file list",
        ));
    }
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let mut data = vec![0.0; index.height * index.width * index.channels];
    for (ch, name) in index.files.iter().enumerate() {
        let (h, w, channel) = read_channel_pgm(&dir.join(name))?;
        if h != index.height || w != index.width {
            return Err(bad_file(
                index_path,
                format!("channel {ch} has wrong extent"),
            ));
        }
        for (i, v) in channel.into_iter().enumerate() {
            data[i * index.channels + ch] = v;
        }
    }
    Image::new(index.height, index.width, index.channels, data)
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Rejects artifacts written under a different schema version.
pub fn check_schema_version(path: &Path, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(bad_file(
            path,
            format!("schema version {version} unsupported (expected {SCHEMA_VERSION})"),
        ));
    }
    Ok(())
}

/// JSON surface of a probability map (model predictions on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbMapFile {
    pub schema_version: u32,
    pub height: usize,
    pub width: usize,
    pub m: usize,
    /// Row-major, class-innermost probabilities.
    pub probs: Vec<f64>,
}

pub fn write_probmap(path: &Path, pred: &ProbMap) -> Result<()> {
    write_json(
        path,
        &ProbMapFile {
            schema_version: SCHEMA_VERSION,
            height: pred.height,
            width: pred.width,
            m: pred.m,
            probs: pred.probs.clone(),
        },
    )
}

pub fn read_probmap(path: &Path) -> Result<ProbMap> {
    let file: ProbMapFile = read_json(path)?;
    check_schema_version(path, file.schema_version)?;
    ProbMap::new(file.height, file.width, file.m, file.probs)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Writes a CSV file with a header row. Cells are emitted verbatim;
/// callers format numbers themselves so output stays byte-stable.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Canonical float formatting for CSV cells.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

/// One polyline of a line chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const SVG_COLORS: [&str; 6] = [
    "#1f6fb2", "#d1495b", "#2e8b57", "#b8860b", "#6a4fa3", "#444444",
];

/// Renders a minimal SVG 1.1 line chart: axes, tick labels at the data
/// extremes, one polyline per series, and a legend. Output depends
/// only on the input values.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 160.0, 50.0, 60.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .collect();
    let min_max = |f: fn(&(f64, f64)) -> f64| -> (f64, f64) {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if all.is_empty() || lo > hi {
            (0.0, 1.0)
        } else if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = min_max(|p| p.0);
    let (y0, y1) = min_max(|p| p.1);
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"25\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{}</text>\n",
        ml + pw / 2.0,
        xml_escape(title)
    ));
    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    // Axis labels and extreme ticks.
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\">{}</text>\n",
        ml + pw / 2.0,
        h - 15.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\" transform=\"rotate(-90 18 {:.2})\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        xml_escape(y_label)
    ));
    for (v, x, y, anchor) in [
        (x0, px(x0), mt + ph + 18.0, "middle"),
        (x1, px(x1), mt + ph + 18.0, "middle"),
        (y0, ml - 8.0, py(y0) + 4.0, "end"),
        (y1, ml - 8.0, py(y1) + 4.0, "end"),
    ] {
        svg.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" \
             font-family=\"sans-serif\" font-size=\"11\">{v:.3}</text>\n"
        ));
    }
    // Polylines and legend.
    for (i, s) in series.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = mt + 14.0 + i as f64 * 18.0;
        svg.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ml + pw + 10.0,
            ml + pw + 34.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            ml + pw + 40.0,
            ly + 4.0,
            xml_escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
