//! PCA projections of activations and file exports for plots.
//!
//! PCA: rows are sorted into a canonical order (lexicographic on the
//! feature vector) before the mean and covariance are accumulated, so the
//! result does not depend on input order at all. The covariance
//! `X^T X / (n - 1)` of the centred rows is diagonalised with a symmetric
//! eigendecomposition, eigenpairs are sorted by decreasing eigenvalue, and
//! each component is flipped so that its largest-magnitude coordinate is
//! positive (the first such coordinate on ties).
//!
//! Files:
//!
//! * `layer_curves.csv`: `task,layer,probe,metric,mean,ci95,seeds`, one row
//!   per layer, probe kind and metric (`accuracy`, `pearson_r`, `r2`);
//! * `confusion_layer<L>_<probe>.csv`: a `true` column of class names then
//!   one count column per predicted class;
//! * projections: JSON lines, a header `{layer, dims, explained_variance}`
//!   followed by one `{x, y, label, hand_id}` point per line.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probes::{Label, LayerResult, ProbeReport, ProbeSample, Stat};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("PCA needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("samples have inconsistent dimensions")]
    Ragged,
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

/// Principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit components, most variance first.
    pub components: Vec<Vec<f64>>,
    /// Share of the total variance on each component.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum()).collect()
    }
}

/// Fits `dims` principal components to `rows`.
pub fn pca(rows: &[&[f64]], dims: usize) -> Result<Pca, AnalysisError> {
    let needed = dims.max(3);
    if rows.len() < needed {
        return Err(AnalysisError::TooFewSamples { needed, got: rows.len() });
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) || dims > d {
        return Err(AnalysisError::Ragged);
    }
    let mut sorted: Vec<&[f64]> = rows.to_vec();
    sorted.sort_by(|a, b| {
        a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = sorted.len() as f64;
    let mut mean = vec![0.0; d];
    for r in &sorted {
        mean.iter_mut().zip(*r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centred = DMatrix::from_fn(sorted.len(), d, |i, j| sorted[i][j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n - 1.0);
    let total = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &k in &order[..dims] {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = c.iter().enumerate().fold(0, |best, (i, v)| if v.abs() > c[best].abs() { i } else { best });
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        let lambda = eig.eigenvalues[k].max(0.0);
        explained.push(if total > 0.0 { (lambda / total).min(1.0) } else { 0.0 });
    }
    Ok(Pca { mean, components, explained_variance: explained })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: Label,
    pub hand_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub layer: usize,
    pub points: Vec<ProjectedPoint>,
    pub explained_variance: [f64; 2],
}

/// Two-component PCA of the samples' activations, in input order.
pub fn pca_project(samples: &[ProbeSample]) -> Result<Projection2D, AnalysisError> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.activation.as_slice()).collect();
    let p = pca(&rows, 2)?;
    let points = samples
        .iter()
        .map(|s| {
            let v = p.project(&s.activation);
            ProjectedPoint { x: v[0], y: v[1], label: s.label, hand_id: s.hand_id }
        })
        .collect();
    Ok(Projection2D {
        layer: samples[0].layer,
        points,
        explained_variance: [p.explained_variance[0], p.explained_variance[1]],
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    layer: usize,
    dims: usize,
    explained_variance: [f64; 2],
}

pub fn write_projection(path: &Path, proj: &Projection2D) -> Result<(), AnalysisError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    let header = ProjectionHeader { layer: proj.layer, dims: 2, explained_variance: proj.explained_variance };
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io_err(path))?;
    for p in &proj.points {
        writeln!(w, "{}", serde_json::to_string(p)?).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_projection(path: &Path) -> Result<Projection2D, AnalysisError> {
    let mut lines = BufReader::new(fs::File::open(path).map_err(io_err(path))?).lines();
    let header: ProjectionHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(io_err(path))?)?,
        None => {
            return Err(AnalysisError::Format { path: path.to_path_buf(), message: "empty projection file".into() })
        }
    };
    let mut points = Vec::new();
    for l in lines {
        let l = l.map_err(io_err(path))?;
        if !l.trim().is_empty() {
            points.push(serde_json::from_str(&l)?);
        }
    }
    Ok(Projection2D { layer: header.layer, points, explained_variance: header.explained_variance })
}

pub const CURVES_HEADER: &str = "task,layer,probe,metric,mean,ci95,seeds";

fn curve_rows(report: &ProbeReport, r: &LayerResult) -> Vec<String> {
    let metrics: [(&str, &Option<Stat>); 3] = [("accuracy", &r.accuracy), ("pearson_r", &r.pearson_r), ("r2", &r.r2)];
    metrics
        .iter()
        .filter_map(|(name, s)| s.as_ref().map(|s| (name, s)))
        .map(|(name, s)| {
            let ci = s.ci95.map(|c| c.to_string()).unwrap_or_default();
            format!(
                "{},{},{},{},{},{},{}",
                report.task.name(),
                r.layer,
                r.probe.name(),
                name,
                s.mean,
                ci,
                s.per_seed.len()
            )
        })
        .collect()
}

/// `layer_curves.csv` contents.
pub fn curves_csv(report: &ProbeReport) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for r in &report.layers {
        for row in curve_rows(report, r) {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

pub fn confusion_csv(classes: &[String], confusion: &[Vec<usize>]) -> String {
    let mut out = String::from("true");
    for c in classes {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (c, row) in classes.iter().zip(confusion) {
        out.push_str(c);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), AnalysisError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes `report.json`, `layer_curves.csv`, `layer_curves.svg` and one
/// confusion CSV and SVG per layer and probe. Returns the written paths.
pub fn export_report(report: &ProbeReport, dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: String| -> Result<(), AnalysisError> {
        let path = dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    put("report.json".into(), serde_json::to_string_pretty(report)?)?;
    put("layer_curves.csv".into(), curves_csv(report))?;
    put("layer_curves.svg".into(), curves_svg(report))?;
    for r in &report.layers {
        if let Some(conf) = &r.confusion {
            let stem = format!("confusion_layer{}_{}", r.layer, r.probe.name());
            put(format!("{stem}.csv"), confusion_csv(&report.classes, conf))?;
            put(format!("{stem}.svg"), confusion_svg(&report.classes, conf))?;
        }
    }
    Ok(written)
}

/// Writes `projection_layer<L>.jsonl` and a scatter SVG next to it.
pub fn export_projection(proj: &Projection2D, dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let jsonl = dir.join(format!("projection_layer{}.jsonl", proj.layer));
    write_projection(&jsonl, proj)?;
    let svg = dir.join(format!("projection_layer{}.svg", proj.layer));
    write_file(&svg, &projection_svg(proj))?;
    Ok(vec![jsonl, svg])
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 40.0;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn svg_open(title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    )
}

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn headline(r: &LayerResult) -> Option<f64> {
    r.accuracy.as_ref().or(r.pearson_r.as_ref()).map(|s| s.mean)
}

/// Headline metric by layer, one polyline per probe kind.
pub fn curves_svg(report: &ProbeReport) -> String {
    let metric = if report.task.is_classification() { "accuracy" } else { "pearson r" };
    let mut svg = svg_open(&format!("{} {metric} by layer", report.task.name()));
    let (l0, l1) = bounds(report.layers.iter().map(|r| r.layer as f64));
    let (m0, m1) = bounds(report.layers.iter().filter_map(headline));
    let (m0, m1) = (m0.min(0.0), m1.max(1.0));
    let mut kinds: Vec<_> = report.layers.iter().map(|r| r.probe).collect();
    kinds.dedup();
    kinds.sort_by_key(|k| k.name());
    kinds.dedup();
    for (i, kind) in kinds.iter().enumerate() {
        let pts: Vec<String> = report
            .layers
            .iter()
            .filter(|r| r.probe == *kind)
            .filter_map(|r| {
                headline(r).map(|m| {
                    format!("{:.2},{:.2}", scale(r.layer as f64, l0, l1, M, W - M), scale(m, m0, m1, H - M, M))
                })
            })
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            W - M - 60.0,
            M + 16.0 * i as f64,
            kind.name()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn confusion_svg(classes: &[String], confusion: &[Vec<usize>]) -> String {
    let mut svg = svg_open("confusion (rows true, columns predicted)");
    let n = classes.len().max(1) as f64;
    let cell = ((W.min(H) - 2.0 * M) / n).floor();
    for (i, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let _ = writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/>",
                M + j as f64 * cell,
                M + i as f64 * cell
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn projection_svg(proj: &Projection2D) -> String {
    let mut svg = svg_open(&format!(
        "layer {} PCA ({:.1}% / {:.1}%)",
        proj.layer,
        100.0 * proj.explained_variance[0],
        100.0 * proj.explained_variance[1]
    ));
    let (x0, x1) = bounds(proj.points.iter().map(|p| p.x));
    let (y0, y1) = bounds(proj.points.iter().map(|p| p.y));
    let (v0, v1) =
        bounds(proj.points.iter().filter_map(|p| if let Label::Value(v) = p.label { Some(v) } else { None }));
    for p in &proj.points {
        let color = match p.label {
            Label::Class(c) => PALETTE[c % PALETTE.len()].to_string(),
            Label::Value(v) => {
                let t = scale(v, v0, v1, 0.0, 255.0).round() as u8;
                format!("rgb({t},0,{})", 255 - t)
            }
        };
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.6\"/>",
            scale(p.x, x0, x1, M, W - M),
            scale(p.y, y0, y1, H - M, M)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
