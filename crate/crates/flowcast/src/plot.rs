//! Batch plot emission: hand-rolled SVG line charts (MSE vs horizon,
//! PR-style curves) and qualitative label-map overlays as color PNGs.
//! No plotting dependency — the charts are a few polylines and text tags.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::SemanticMap;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 10000.0) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

impl LinePlot {
    /// Render to a standalone SVG document.
    pub fn to_svg(&self) -> Result<String> {
        if self.series.is_empty() || self.series.iter().all(|s| s.points.is_empty()) {
            return Err(Error::Config("plot with no data".into()));
        }
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Config("non-finite plot point".into()));
            }
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
             viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            W / 2.0,
            xml_escape(&self.title)
        ));
        // axes
        s.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = H - MARGIN,
            r = W - MARGIN,
            t = MARGIN
        ));
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                sx(fx),
                H - MARGIN + 18.0,
                fmt_tick(fx)
            ));
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
                MARGIN - 6.0,
                sy(fy) + 4.0,
                fmt_tick(fy)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            W / 2.0,
            H - 12.0,
            xml_escape(&self.x_label)
        ));
        s.push_str(&format!(
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
            H / 2.0,
            H / 2.0,
            xml_escape(&self.y_label)
        ));
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            s.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
            for &(x, y) in &series.points {
                s.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                    sx(x),
                    sy(y)
                ));
            }
            let ly = MARGIN + 16.0 * i as f64;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{:.1}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n\
                 <text x=\"{}\" y=\"{:.1}\">{}</text>\n",
                W - MARGIN - 150.0,
                ly - 2.0,
                W - MARGIN - 132.0,
                ly + 4.0,
                xml_escape(&series.label)
            ));
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg()?)?;
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Fixed per-class colors for qualitative overlays (index 0 = background).
fn class_color(label: u8) -> [u8; 3] {
    match label {
        0 => [24, 24, 24],
        1 => [31, 119, 180],
        2 => [214, 39, 40],
        3 => [44, 160, 44],
        4 => [148, 103, 189],
        5 => [255, 127, 14],
        6 => [23, 190, 207],
        7 => [227, 119, 194],
        _ => [188, 189, 34],
    }
}

/// Write a colorized label map as an RGB PNG.
pub fn write_label_overlay(sem: &SemanticMap, path: &Path) -> Result<()> {
    let (h, w) = sem.labels.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for &l in sem.labels.iter() {
        buf.extend_from_slice(&class_color(l));
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Format("overlay buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn svg_contains_series_and_labels() {
        let p = LinePlot {
            title: "MSE vs horizon".into(),
            x_label: "step".into(),
            y_label: "MSE".into(),
            series: vec![
                Series {
                    label: "predicted".into(),
                    points: vec![(1.0, 0.1), (2.0, 0.2), (3.0, 0.35)],
                },
                Series {
                    label: "zero-flow".into(),
                    points: vec![(1.0, 0.5), (2.0, 0.6), (3.0, 0.8)],
                },
            ],
        };
        let svg = p.to_svg().unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("predicted"));
        assert!(svg.contains("zero-flow"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn empty_plot_is_error() {
        let p = LinePlot {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            series: vec![],
        };
        assert!(p.to_svg().is_err());
    }

    #[test]
    fn overlay_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = Array2::<u8>::zeros((8, 10));
        labels[(2, 3)] = 1;
        labels[(5, 7)] = 4;
        let sem = SemanticMap { labels };
        let path = dir.path().join("overlay.png");
        write_label_overlay(&sem, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (10, 8));
        assert_eq!(img.get_pixel(3, 2).0, [31, 119, 180]);
        assert_eq!(img.get_pixel(0, 0).0, [24, 24, 24]);
    }
}
