//! SVG drawings of two-vehicle rollouts over a scene raster. Output carries
//! no timestamps, so equal inputs give byte-identical files.

use std::fmt::Write;

use routegan_core::geometry::Point2;
use routegan_core::scene::Scene;

pub const V1_COLOR: &str = "#d62728";
pub const V2_COLOR: &str = "#1f77b4";
const ROAD_COLOR: &str = "#e6e6e6";
const OFFROAD_COLOR: &str = "#4d4d4d";

/// Marker sizes as fractions of the panel side.
pub const START_RADIUS: f64 = 0.02;
pub const KEYPOINT_RADIUS: f64 = 0.008;
pub const PATH_WIDTH: f64 = 0.004;

const LABEL_HEIGHT: f64 = 24.0;
const GAP: f64 = 8.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.2} {h:.2}\">\n"
    )
}

/// Maps normalized scene coordinates to panel units.
struct Canvas<'a> {
    scene: &'a Scene,
    size: f64,
}

impl Canvas<'_> {
    fn sx(&self) -> f64 {
        self.size / self.scene.width() as f64
    }

    fn sy(&self) -> f64 {
        self.size / self.scene.height() as f64
    }

    fn map(&self, p: Point2) -> (f64, f64) {
        let (col, row) = self.scene.frame.to_pixel(p);
        (col * self.sx(), row * self.sy())
    }

    /// Off-road background with drivable cells drawn as horizontal runs.
    fn raster(&self, out: &mut String) {
        let (sx, sy) = (self.sx(), self.sy());
        let _ = writeln!(out, "<rect width=\"{0:.2}\" height=\"{0:.2}\" fill=\"{OFFROAD_COLOR}\"/>", self.size);
        let _ = writeln!(out, "<g fill=\"{ROAD_COLOR}\" shape-rendering=\"crispEdges\">");
        for row in 0..self.scene.height() {
            let mut col = 0;
            while col < self.scene.width() {
                if self.scene.cell(col, row) == 0 {
                    col += 1;
                    continue;
                }
                let start = col;
                while col < self.scene.width() && self.scene.cell(col, row) == 1 {
                    col += 1;
                }
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\"/>",
                    start as f64 * sx,
                    row as f64 * sy,
                    (col - start) as f64 * sx,
                    sy
                );
            }
        }
        out.push_str("</g>\n");
    }

    fn path(&self, out: &mut String, positions: &[Point2], color: &str) {
        let pts: Vec<String> = positions
            .iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            "<polyline class=\"path\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{:.2}\" stroke-linejoin=\"round\"/>",
            pts.join(" "),
            PATH_WIDTH * self.size
        );
    }

    fn circle(&self, out: &mut String, class: &str, p: Point2, r: f64, color: &str, stroke: &str) {
        let (x, y) = self.map(p);
        let _ = writeln!(
            out,
            "<circle class=\"{class}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{:.2}\" fill=\"{color}\" stroke=\"{stroke}\" stroke-width=\"{:.2}\"/>",
            r * self.size,
            0.5 * PATH_WIDTH * self.size
        );
    }
}

/// Scene raster plus both trajectories in a `size` x `size` panel: V1 red,
/// V2 blue, every `stride`-th sample marked as a keypoint and the starts as
/// the largest circles.
pub fn episode_body(scene: &Scene, x1: &[Point2], x2: &[Point2], stride: usize, size: f64) -> String {
    let canvas = Canvas { scene, size };
    let mut out = String::new();
    canvas.raster(&mut out);
    let tracks = [(x1, V1_COLOR), (x2, V2_COLOR)];
    for (pos, color) in tracks {
        canvas.path(&mut out, pos, color);
    }
    for (pos, color) in tracks {
        if let Some(&p) = pos.first() {
            canvas.circle(&mut out, "start", p, START_RADIUS, color, "#000000");
        }
    }
    for (pos, color) in tracks {
        for &p in pos.iter().skip(stride.max(1)).step_by(stride.max(1)) {
            canvas.circle(&mut out, "keypoint", p, KEYPOINT_RADIUS, color, "#ffffff");
        }
    }
    out
}

/// Standalone SVG document for one episode.
pub fn episode_svg(scene: &Scene, x1: &[Point2], x2: &[Point2], stride: usize, size: f64, title: &str) -> String {
    let mut out = header(size, size);
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    out.push_str(&episode_body(scene, x1, x2, stride, size));
    out.push_str("</svg>\n");
    out
}

/// One labelled panel of a composite.
pub struct Panel {
    pub label: String,
    pub body: String,
}

/// Panels laid out row-major in `cols` columns, each `size` wide with its
/// label above.
pub fn grid_svg(panels: &[Panel], cols: usize, size: f64, title: &str) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols);
    let cell_w = size + GAP;
    let cell_h = size + LABEL_HEIGHT + GAP;
    let mut out = header(cols as f64 * cell_w + GAP, rows as f64 * cell_h + GAP);
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>");
    for (i, panel) in panels.iter().enumerate() {
        let x = GAP + (i % cols) as f64 * cell_w;
        let y = GAP + (i / cols) as f64 * cell_h;
        let _ = writeln!(out, "<g transform=\"translate({x:.2},{y:.2})\">");
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
            0.5 * size,
            LABEL_HEIGHT - 7.0,
            escape(&panel.label)
        );
        let _ = writeln!(
            out,
            "<svg y=\"{LABEL_HEIGHT:.2}\" width=\"{size:.2}\" height=\"{size:.2}\" viewBox=\"0 0 {size:.2} {size:.2}\">"
        );
        out.push_str(&panel.body);
        out.push_str("</svg>\n</g>\n");
    }
    out.push_str("</svg>\n");
    out
}
