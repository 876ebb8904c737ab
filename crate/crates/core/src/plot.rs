//! Curve and radar images plus a `key = value` report of every plotted number.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{CfbtError, Result};
use crate::eval::{npr_thresholds, precision_thresholds, success_thresholds, MetricReport};

pub const REPORT_FILE: &str = "report.txt";
pub const PRECISION_PLOT: &str = "precision.png";
pub const SUCCESS_PLOT: &str = "success.png";
pub const RADAR_PLOT: &str = "radar.png";

const W: u32 = 420;
const H: u32 = 320;
const MARGIN: f64 = 30.0;
const BLUE: Rgb<u8> = Rgb([30, 80, 200]);
const RED: Rgb<u8> = Rgb([200, 40, 40]);
const GREY: Rgb<u8> = Rgb([200, 200, 200]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Debug, Clone, PartialEq)]
pub struct PlotArtifacts {
    pub report: PathBuf,
    pub precision: PathBuf,
    pub success: PathBuf,
    pub radar: Option<PathBuf>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn scalar_lines(out: &mut String, prefix: &str, r: &MetricReport) {
    let _ = writeln!(out, "{prefix}frames = {}", r.frames);
    let _ = writeln!(out, "{prefix}pr20 = {}", r.pr);
    let _ = writeln!(out, "{prefix}npr = {}", r.npr);
    let _ = writeln!(out, "{prefix}sr = {}", r.sr);
    let _ = writeln!(out, "{prefix}mpr20 = {}", r.mpr);
    let _ = writeln!(out, "{prefix}msr = {}", r.msr);
}

/// The structured text report.
pub fn format_report(r: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str("# toolkit conventions; the metric names come without formulas\n");
    out.push_str("convention.pr20 = share of frames with centre error <= 20 px\n");
    out.push_str("convention.npr = share of frames with size-normalized centre error <= 0.2\n");
    out.push_str("convention.sr = mean over IoU thresholds 0.01..1.00 of the share with IoU >= threshold\n");
    out.push_str("convention.mpr20 = pr20 with the per-frame smaller error against RGB and TIR ground truth\n");
    out.push_str("convention.msr = sr with the per-frame larger IoU against RGB and TIR ground truth\n");
    out.push_str("convention.excluded = frames whose ground truth has zero width or height\n");
    scalar_lines(&mut out, "", r);
    let _ = writeln!(out, "precision_thresholds = {}", join(&precision_thresholds()));
    let _ = writeln!(out, "precision_curve = {}", join(&r.precision_curve));
    let _ = writeln!(out, "max_precision_curve = {}", join(&r.max_precision_curve));
    let _ = writeln!(out, "npr_thresholds = {}", join(&npr_thresholds()));
    let _ = writeln!(out, "npr_curve = {}", join(&r.npr_curve));
    let _ = writeln!(out, "success_thresholds = {}", join(&success_thresholds()));
    let _ = writeln!(out, "success_curve = {}", join(&r.success_curve));
    let _ = writeln!(out, "max_success_curve = {}", join(&r.max_success_curve));
    let tags: Vec<&str> = r.attributes.keys().map(|s| s.as_str()).collect();
    let _ = writeln!(out, "attributes = {}", if tags.is_empty() { "none".to_string() } else { tags.join(",") });
    for (tag, sub) in &r.attributes {
        scalar_lines(&mut out, &format!("attr.{tag}."), sub);
    }
    if tags.is_empty() {
        out.push_str("radar = omitted (no attribute tags)\n");
    } else {
        let _ = writeln!(out, "radar = {RADAR_PLOT}");
    }
    out
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        put(img, x.round() as i64, y.round() as i64, c);
        put(img, x.round() as i64, y.round() as i64 + 1, c);
    }
}

fn curve_plot(xs: &[f64], series: &[(&[f64], Rgb<u8>)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x_lo, x_hi) = (xs[0], xs[xs.len() - 1]);
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (W as f64 - 2.0 * MARGIN);
    let py = |y: f64| H as f64 - MARGIN - y * (H as f64 - 2.0 * MARGIN);
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        line(&mut img, (px(x_lo), py(v)), (px(x_hi), py(v)), GREY);
    }
    line(&mut img, (px(x_lo), py(0.0)), (px(x_hi), py(0.0)), BLACK);
    line(&mut img, (px(x_lo), py(0.0)), (px(x_lo), py(1.0)), BLACK);
    for (ys, c) in series {
        for i in 1..ys.len().min(xs.len()) {
            line(&mut img, (px(xs[i - 1]), py(ys[i - 1])), (px(xs[i]), py(ys[i])), *c);
        }
    }
    img
}

fn radar_plot(values: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(H, H, Rgb([255, 255, 255]));
    let c = H as f64 / 2.0;
    let r = c - MARGIN;
    let n = values.len();
    let at = |i: usize, v: f64| {
        let a = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        (c + r * v * a.cos(), c + r * v * a.sin())
    };
    for i in 0..n {
        line(&mut img, (c, c), at(i, 1.0), GREY);
        for ring in [0.25, 0.5, 0.75, 1.0] {
            line(&mut img, at(i, ring), at((i + 1) % n, ring), GREY);
        }
    }
    for (pick, colour) in [(0usize, BLUE), (1, RED)] {
        let get = |i: usize| if pick == 0 { values[i].0 } else { values[i].1 };
        for i in 0..n {
            line(&mut img, at(i, get(i)), at((i + 1) % n, get((i + 1) % n)), colour);
        }
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => CfbtError::io(path, io),
        other => CfbtError::Data(format!("{}: {other}", path.display())),
    })
}

/// Writes the report, precision and success curves and, when attributes
/// exist, a radar of per-attribute PR (blue) and SR (red).
pub fn emit_plots(report: &MetricReport, dir: &Path) -> Result<PlotArtifacts> {
    fs::create_dir_all(dir).map_err(|e| CfbtError::io(dir, e))?;
    let report_path = dir.join(REPORT_FILE);
    fs::write(&report_path, format_report(report)).map_err(|e| CfbtError::io(&report_path, e))?;
    let precision = dir.join(PRECISION_PLOT);
    let empty = vec![0.0; 101];
    let or_empty = |v: &Vec<f64>| if v.is_empty() { empty.clone() } else { v.clone() };
    let (p, mp) = (or_empty(&report.precision_curve), or_empty(&report.max_precision_curve));
    save(&curve_plot(&precision_thresholds(), &[(&p, BLUE), (&mp, RED)]), &precision)?;
    let success = dir.join(SUCCESS_PLOT);
    let (s, ms) = (or_empty(&report.success_curve), or_empty(&report.max_success_curve));
    save(&curve_plot(&success_thresholds(), &[(&s, BLUE), (&ms, RED)]), &success)?;
    let radar = if report.attributes.is_empty() {
        None
    } else {
        let values: Vec<(f64, f64)> = report.attributes.values().map(|r| (r.pr, r.sr)).collect();
        let path = dir.join(RADAR_PLOT);
        save(&radar_plot(&values), &path)?;
        Some(path)
    };
    Ok(PlotArtifacts {
        report: report_path,
        precision,
        success,
        radar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use crate::eval::compute_metrics;
    use std::collections::BTreeMap;

    #[test]
    fn report_formats_pr_exactly() {
        let r = MetricReport {
            pr: 0.732,
            ..MetricReport::default()
        };
        let text = format_report(&r);
        assert!(text.lines().any(|l| l == "pr20 = 0.732"));
        assert!(text.contains("radar = omitted"));
    }

    #[test]
    fn emission_is_deterministic() {
        let g = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 3];
        let p = vec![g[0], BBox::new(4.0, 0.0, 10.0, 10.0), BBox::new(40.0, 0.0, 10.0, 10.0)];
        let mut tags = BTreeMap::new();
        tags.insert("HO".to_string(), vec![true, true, false]);
        tags.insert("SV".to_string(), vec![false, true, true]);
        tags.insert("MB".to_string(), vec![true, false, true]);
        let r = compute_metrics(&p, &g, &g, &tags).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let pa = emit_plots(&r, a.path()).unwrap();
        let pb = emit_plots(&r, b.path()).unwrap();
        for (x, y) in [(&pa.report, &pb.report), (&pa.precision, &pb.precision), (&pa.success, &pb.success)] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        assert!(pa.radar.is_some());
        let text = fs::read_to_string(&pa.report).unwrap();
        assert!(text.contains("attr.HO.pr20 = 1"));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let r = MetricReport::default();
        assert!(matches!(emit_plots(&r, &f.path().join("sub")), Err(CfbtError::Io { .. })));
    }
}
