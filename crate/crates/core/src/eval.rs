//! Image quality metrics, dataset evaluation reports and training curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{index_dataset, load_image, to_rgb};
use crate::error::{Error, Result};
use crate::network::{Hdn, NetworkWeights};
use crate::tensor::{Shape, Tensor};
use crate::train::MetricRow;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsnrMode {
    Rgb,
    /// BT.601 luma `0.299 R + 0.587 G + 0.114 B`.
    YChannel,
}

fn luma(img: &Tensor) -> Tensor {
    let s = img.shape();
    if s.c != 3 {
        return img.clone();
    }
    Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
        0.299 * img.at(n, 0, y, x) + 0.587 * img.at(n, 1, y, x) + 0.114 * img.at(n, 2, y, x)
    })
}

/// `10 log10(1 / MSE)` on values clamped to `[0, 1]`, capped at 100 dB.
pub fn psnr(x: &Tensor, y: &Tensor, mode: PsnrMode) -> Result<f64> {
    x.expect_same_shape("psnr", y)?;
    let (x, y) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
    let (x, y) = match mode {
        PsnrMode::Rgb => (x, y),
        PsnrMode::YChannel => (luma(&x), luma(&y)),
    };
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of one `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Channel-mean grayscale planes, one per batch item.
fn gray_planes(img: &Tensor) -> Vec<Vec<f64>> {
    let s = img.shape();
    (0..s.n)
        .map(|n| {
            let mut g = vec![0.0; s.plane()];
            for c in 0..s.c {
                for (a, v) in g.iter_mut().zip(img.plane(n, c)) {
                    *a += v;
                }
            }
            g.iter().map(|v| v / s.c as f64).collect()
        })
        .collect()
}

/// Single-scale SSIM on channel-mean grayscale: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 1, averaged over valid windows.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.expect_same_shape("ssim", y)?;
    let s = x.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            s.h, s.w
        )));
    }
    let g = gaussian_1d();
    let mut total = 0.0;
    let mut count = 0usize;
    for (px, py) in gray_planes(x).iter().zip(gray_planes(y).iter()) {
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(px, s.h, s.w, &g);
        let my = filter_valid(py, s.h, s.w, &g);
        let exx = filter_valid(&prod(px, px), s.h, s.w, &g);
        let eyy = filter_valid(&prod(py, py), s.h, s.w, &g);
        let exy = filter_valid(&prod(px, py), s.h, s.w, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (exx[i] - ux * ux, eyy[i] - uy * uy, exy[i] - ux * uy);
            let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr_db: f64,
    /// `None` for images smaller than the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub checkpoint: String,
    pub mode: PsnrMode,
    pub rows: Vec<EvalRow>,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub skipped: Vec<String>,
}

impl EvalReport {
    fn finish(mut self) -> Self {
        self.rows.sort_by(|a, b| a.name.cmp(&b.name));
        let n = self.rows.len() as f64;
        self.mean_psnr_db = (!self.rows.is_empty()).then(|| self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / n);
        let ssims: Vec<f64> = self.rows.iter().filter_map(|r| r.ssim).collect();
        self.mean_ssim = (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64);
        self
    }
}

/// What produced the images being scored.
pub struct EvalSubject<'a> {
    pub net: &'a Hdn,
    pub weights: &'a NetworkWeights,
    pub checkpoint: String,
    pub fingerprint: String,
}

/// Dehaze every `hazy/<name>` under `dataset_dir`, score the clamped A1
/// against `clear/<name>`, and write `report.json` and `report.csv` to
/// `out_dir`. Unpaired files are listed as skipped.
pub fn evaluate_dir(subject: &EvalSubject<'_>, dataset_dir: &Path, mode: PsnrMode, out_dir: &Path) -> Result<EvalReport> {
    let index = index_dataset(dataset_dir)?;
    let mut report = EvalReport {
        config_fingerprint: subject.fingerprint.clone(),
        checkpoint: subject.checkpoint.clone(),
        mode,
        rows: Vec::new(),
        mean_psnr_db: None,
        mean_ssim: None,
        skipped: index.unpaired.clone(),
    };
    if index.pairs.is_empty() {
        log::warn!("no image pairs found under {}", dataset_dir.display());
    }
    for pair in &index.pairs {
        let hazy = to_rgb(load_image(&pair.hazy)?)?;
        let clear = to_rgb(load_image(&pair.clear)?)?;
        if hazy.shape() != clear.shape() {
            log::warn!("skipping {}: hazy and clear sizes differ", pair.name);
            report.skipped.push(pair.name.clone());
            continue;
        }
        let [a1, _, _] = subject.net.dehaze_padded(subject.weights, &hazy)?;
        let a1 = a1.clamp(0.0, 1.0);
        let s = a1.shape();
        let ssim = if s.h >= SSIM_WINDOW && s.w >= SSIM_WINDOW {
            Some(ssim(&a1, &clear)?)
        } else {
            None
        };
        report.rows.push(EvalRow {
            name: pair.name.clone(),
            psnr_db: psnr(&a1, &clear, mode)?,
            ssim,
        });
    }
    report.skipped.sort();
    let report = report.finish();
    write_report(&report, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join("report.json");
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let csv_path = out_dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for r in &report.rows {
        w.serialize(r).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Read a training metrics CSV.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| csv_error(path, e))?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl SeriesStats {
    fn of(points: &[(f64, f64)]) -> Option<Self> {
        let (first, last) = (points.first()?, points.last()?);
        Some(Self {
            initial: first.1,
            last: last.1,
            min: points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            max: points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
            points: points.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCurves {
    pub label: String,
    pub loss: Option<SeriesStats>,
    pub val_psnr: Option<SeriesStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub runs: Vec<RunCurves>,
    /// Plot files written, relative to the output directory.
    pub plots: Vec<String>,
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

/// Plot total loss and validation PSNR against step for one or more
/// metrics files, overlaid, and write `summary.json`. Plots are skipped
/// when no run has data for them.
pub fn emit_curves(metrics: &[PathBuf], out_dir: &Path) -> Result<CurveSummary> {
    let mut loss = Vec::new();
    let mut val = Vec::new();
    let mut runs = Vec::new();
    for (i, path) in metrics.iter().enumerate() {
        let rows = read_metrics(path)?;
        let mut label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        if metrics.len() > 1 {
            if let Some(parent) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
                label = format!("{parent}/{label}");
            }
            if runs.iter().any(|r: &RunCurves| r.label == label) {
                label = format!("{label}#{i}");
            }
        }
        let lp: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.step as f64, r.total?))).collect();
        let vp: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.step as f64, r.val_psnr?))).collect();
        runs.push(RunCurves {
            label: label.clone(),
            loss: SeriesStats::of(&lp),
            val_psnr: SeriesStats::of(&vp),
        });
        loss.push(Series {
            label: label.clone(),
            points: lp,
        });
        val.push(Series { label, points: vp });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut plots = Vec::new();
    for (file, title, ylabel, series) in [
        ("loss.svg", "training loss", "total loss", &loss),
        ("val_psnr.svg", "validation PSNR", "PSNR (dB)", &val),
    ] {
        if series.iter().any(|s| !s.points.is_empty()) {
            let p = out_dir.join(file);
            std::fs::write(&p, svg_plot(title, ylabel, series)).map_err(|e| Error::io(&p, e))?;
            plots.push(file.to_string());
        }
    }
    let summary = CurveSummary { runs, plots };
    let p = out_dir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_plot(title: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="black" points="{left},{top} {left},{} {},{}"/>"#,
        h - bottom,
        w - right,
        h - bottom
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), h - bottom + 18.0, fmt_tick(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, sy(yv) + 4.0, fmt_tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{ylabel}</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if !coords.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        }
        let ly = top + 14.0 * i as f64 + 6.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - right - 150.0,
            w - right - 130.0,
            w - right - 125.0,
            ly + 4.0,
            xml_escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
