//! Metric report files: `metrics.json`, `metrics.csv` and `curve.svg`.

use std::fmt::Write as _;
use std::path::Path;

use geopose_core::metrics::{accuracy_curve, MetricReport, AUC_MAX_M};

use crate::error::Result;
use crate::fsutil::{write_atomic, write_json};

/// Points on the accuracy-vs-threshold curve.
const CURVE_STEPS: usize = 100;

pub fn csv(report: &MetricReport) -> String {
    let mut s = String::from("sample_id,add_m,adds_m,pass_01d\n");
    for r in &report.samples {
        let _ = writeln!(s, "{},{},{},{}", r.sample_id, r.add_m, r.adds_m, r.pass_01d);
    }
    s
}

/// Headline accuracy against threshold on `[0, 0.1 m]` as an SVG polyline.
pub fn curve_svg(report: &MetricReport) -> String {
    let (w, h, pad) = (400.0, 300.0, 40.0);
    let pts = accuracy_curve(&report.headline_distances(), AUC_MAX_M, CURVE_STEPS);
    let mut poly = String::new();
    for (thr, acc) in &pts {
        let x = pad + (w - 2.0 * pad) * thr / AUC_MAX_M;
        let y = h - pad - (h - 2.0 * pad) * acc;
        let _ = write!(poly, "{x:.2},{y:.2} ");
    }
    let metric = if report.symmetric { "ADD-S" } else { "ADD" };
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="100%" height="100%" fill="white"/>
<line x1="{pad}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/>
<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{yb}" stroke="black"/>
<text x="{cx}" y="{tb}" font-size="12" text-anchor="middle">{metric} threshold (0 to {AUC_MAX_M} m)</text>
<text x="12" y="{cy}" font-size="12" transform="rotate(-90 12 {cy})" text-anchor="middle">accuracy</text>
<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>
</svg>
"##,
        yb = h - pad,
        xr = w - pad,
        cx = w / 2.0,
        tb = h - 10.0,
        cy = h / 2.0,
        poly = poly.trim_end(),
    )
}

pub fn write(dir: &Path, report: &MetricReport) -> Result<()> {
    write_json(&dir.join("metrics.json"), report)?;
    write_atomic(&dir.join("metrics.csv"), csv(report).as_bytes())?;
    write_atomic(&dir.join("curve.svg"), curve_svg(report).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use geopose_core::metrics::aggregate;

    #[test]
    fn csv_has_one_row_per_sample() {
        let r = aggregate(&[(3, 0.5, 0.001), (8, 0.001, 0.0005)], 0.1, false);
        let text = csv(&r);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,add_m,adds_m,pass_01d");
        assert_eq!(lines[1], "3,0.5,0.001,false");
        assert_eq!(lines[2], "8,0.001,0.0005,true");
    }

    #[test]
    fn svg_polyline_spans_the_curve() {
        let r = aggregate(&[(0, 0.02, 0.02), (1, 0.2, 0.2)], 0.1, false);
        let svg = curve_svg(&r);
        let poly = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(poly.split_whitespace().count(), CURVE_STEPS + 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
