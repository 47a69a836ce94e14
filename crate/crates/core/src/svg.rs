//! Minimal SVG emission: scatter points, polylines, circles and captions.
//! Enough for the sample-cloud and trajectory figures; nothing more.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// A fixed-viewport plot mapping data coordinates to pixels.
pub struct SvgPlot {
    width: f64,
    height: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    body: String,
}

impl SvgPlot {
    /// `x_range`/`y_range` are data-space bounds; the drawing area keeps a
    /// 5% margin on every side.
    pub fn new(width: u32, height: u32, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        SvgPlot {
            width: width as f64,
            height: height as f64,
            x_range,
            y_range,
            body: String::new(),
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let mx = 0.05 * self.width;
        let my = 0.05 * self.height;
        let sx = (self.width - 2.0 * mx) / (self.x_range.1 - self.x_range.0);
        let sy = (self.height - 2.0 * my) / (self.y_range.1 - self.y_range.0);
        (
            mx + (x - self.x_range.0) * sx,
            // svg y axis points down
            self.height - my - (y - self.y_range.0) * sy,
        )
    }

    pub fn scatter(&mut self, points: &[(f64, f64)], radius: f64, color: &str, opacity: f64) {
        for &(x, y) in points {
            let (px, py) = self.map(x, y);
            let _ = writeln!(
                self.body,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="{radius:.2}" fill="{color}" fill-opacity="{opacity:.2}"/>"#
            );
        }
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], color: &str, stroke_width: f64) {
        if points.len() < 2 {
            return;
        }
        let mut path = String::new();
        for &(x, y) in points {
            let (px, py) = self.map(x, y);
            let _ = write!(path, "{px:.2},{py:.2} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{stroke_width:.2}"/>"#,
            path.trim_end()
        );
    }

    /// Dashed data-space circle centered at the origin (reference radii).
    pub fn reference_circle(&mut self, radius: f64, color: &str) {
        let (cx, cy) = self.map(0.0, 0.0);
        let (rx, _) = self.map(radius, 0.0);
        let r = rx - cx;
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="none" stroke="{color}" stroke-width="1" stroke-dasharray="4 4"/>"#
        );
    }

    pub fn caption(&mut self, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="16" font-family="monospace" font-size="13">{text}</text>"#,
            0.05 * self.width
        );
    }

    pub fn to_string(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emits_wellformed_svg_with_all_primitives() {
        let mut plot = SvgPlot::new(400, 300, (-3.0, 3.0), (-3.0, 3.0));
        plot.caption("demo");
        plot.reference_circle(1.0, "#888888");
        plot.scatter(&[(0.0, 0.0), (1.0, 1.0)], 2.0, "#1f77b4", 0.5);
        plot.polyline(&[(-1.0, -1.0), (0.0, 0.5), (1.0, -0.5)], "#d62728", 1.5);
        let text = plot.to_string();
        assert!(text.starts_with("<svg "));
        assert!(text.trim_end().ends_with("</svg>"));
        assert_eq!(text.matches("<circle").count(), 3);
        assert_eq!(text.matches("<polyline").count(), 1);
        assert_eq!(text.matches("<text").count(), 1);
    }

    #[test]
    fn output_is_deterministic() {
        let build = || {
            let mut p = SvgPlot::new(200, 200, (0.0, 1.0), (0.0, 1.0));
            p.scatter(&[(0.25, 0.75)], 1.0, "#000000", 1.0);
            p.to_string()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn y_axis_is_flipped() {
        let mut p = SvgPlot::new(100, 100, (0.0, 1.0), (0.0, 1.0));
        p.scatter(&[(0.0, 0.0), (0.0, 1.0)], 1.0, "#000000", 1.0);
        let text = p.to_string();
        // the y=0 point must land lower on the canvas (larger cy) than y=1
        let cys: Vec<f64> = text
            .match_indices("cy=\"")
            .map(|(i, _)| {
                let rest = &text[i + 4..];
                rest[..rest.find('"').unwrap()].parse().unwrap()
            })
            .collect();
        assert!(cys[0] > cys[1]);
    }
}
