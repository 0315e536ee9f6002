use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::evaluate::Predictor;
use super::map::detections;
use super::metrics::{EGO_LENGTH, EGO_WIDTH};
use crate::error::{Error, Result};
use crate::geometry::{OrientedRect, Point};
use crate::model::ModelOutput;
use crate::scene::{MapClass, SceneGenConfig, VectorScene};
use crate::train::commanded_mode;

/// Maps ego-frame meters to SVG pixels with forward pointing up and left
/// pointing left: `u = margin + (lateral - y) * scale`,
/// `v = margin + (forward - x) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub scale: f64,
    pub margin: f64,
    pub forward: f64,
    pub backward: f64,
    pub lateral: f64,
}

impl Viewport {
    pub const SCALE: f64 = 8.0;
    pub const MARGIN: f64 = 20.0;

    pub fn for_scene(cfg: &SceneGenConfig) -> Self {
        Self {
            scale: Self::SCALE,
            margin: Self::MARGIN,
            forward: cfg.range_forward,
            backward: cfg.range_backward,
            lateral: cfg.range_lateral,
        }
    }

    pub fn to_svg(&self, p: Point<f64>) -> Point<f64> {
        [
            self.margin + (self.lateral - p[1]) * self.scale,
            self.margin + (self.forward - p[0]) * self.scale,
        ]
    }

    pub fn from_svg(&self, q: Point<f64>) -> Point<f64> {
        [
            self.forward - (q[1] - self.margin) / self.scale,
            self.lateral - (q[0] - self.margin) / self.scale,
        ]
    }

    pub fn width(&self) -> f64 {
        2.0 * self.margin + 2.0 * self.lateral * self.scale
    }

    pub fn height(&self) -> f64 {
        2.0 * self.margin + (self.forward + self.backward) * self.scale
    }
}

fn class_color(class: usize) -> &'static str {
    match MapClass::from_index(class) {
        Some(MapClass::Boundary) => "#d62728",
        Some(MapClass::Divider) => "#7f7f7f",
        None => "#000000",
    }
}

struct Svg<'a> {
    out: String,
    view: &'a Viewport,
}

impl Svg<'_> {
    fn coords(&self, pts: &[Point<f64>]) -> String {
        pts.iter()
            .map(|&p| {
                let [u, v] = self.view.to_svg(p);
                format!("{u},{v}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn polyline(&mut self, class: &str, pts: &[Point<f64>], style: &str, extra: &str) {
        let coords = self.coords(pts);
        let _ = writeln!(
            self.out,
            r#"<polyline class="{class}" points="{coords}" fill="none" {style}{extra}/>"#
        );
    }

    fn polygon(&mut self, class: &str, pts: &[Point<f64>], style: &str) {
        let coords = self.coords(pts);
        let _ = writeln!(
            self.out,
            r#"<polygon class="{class}" points="{coords}" {style}/>"#
        );
    }
}

/// One scene with its predictions: ground-truth map solid, detected map
/// elements dashed, agent boxes with true and predicted futures, ego box
/// with true and predicted plans, a legend and a 1 m grid.
pub fn render_svg(scene: &VectorScene, output: &ModelOutput<f64>, cfg: &SceneGenConfig) -> String {
    let view = Viewport::for_scene(cfg);
    let (w, h) = (view.width(), view.height());
    let mut svg = Svg {
        out: String::new(),
        view: &view,
    };
    let _ = writeln!(
        svg.out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg.out,
        r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##
    );

    svg.out
        .push_str(r##"<g class="grid" stroke="#eeeeee" stroke-width="0.5">"##);
    svg.out.push('\n');
    let (x0, x1) = (-cfg.range_backward, cfg.range_forward);
    let (y0, y1) = (-cfg.range_lateral, cfg.range_lateral);
    for x in (x0.ceil() as i64)..=(x1.floor() as i64) {
        let ([u0, v], [u1, _]) = (view.to_svg([x as f64, y1]), view.to_svg([x as f64, y0]));
        let _ = writeln!(svg.out, r#"<line x1="{u0}" y1="{v}" x2="{u1}" y2="{v}"/>"#);
    }
    for y in (y0.ceil() as i64)..=(y1.floor() as i64) {
        let ([u, v0], [_, v1]) = (view.to_svg([x1, y as f64]), view.to_svg([x0, y as f64]));
        let _ = writeln!(svg.out, r#"<line x1="{u}" y1="{v0}" x2="{u}" y2="{v1}"/>"#);
    }
    svg.out.push_str("</g>\n");

    for e in &scene.map_elements {
        let style = format!(
            r#"stroke="{}" stroke-width="2""#,
            class_color(e.class.index())
        );
        svg.polyline("map-gt", &e.points, &style, "");
    }
    for d in detections(&output.map_points, &output.map_class_logits) {
        let style = format!(
            r#"stroke="{}" stroke-width="1.5" stroke-dasharray="6 4""#,
            class_color(d.class)
        );
        svg.polyline("map-pred", &d.points, &style, "");
    }

    for (i, a) in scene.agents.iter().enumerate() {
        let c = a.current();
        let rect = OrientedRect::new([c[0], c[1]], c[2], a.footprint[0], a.footprint[1]);
        svg.polygon(
            "agent",
            &rect.corners(),
            r##"fill="#1f77b4" fill-opacity="0.5" stroke="#1f77b4""##,
        );
        let mut future = vec![[c[0], c[1]]];
        future.extend(a.future.iter().map(|f| [f[0], f[1]]));
        svg.polyline(
            "agent-gt",
            &future,
            r##"stroke="#1f77b4" stroke-width="1.5""##,
            "",
        );
        for mode in output.agent_trajectories.get(i).into_iter().flatten() {
            svg.polyline(
                "agent-pred",
                mode,
                r##"stroke="#17becf" stroke-width="1" stroke-dasharray="3 2""##,
                "",
            );
        }
    }

    let ego = OrientedRect::new([0.0, 0.0], 0.0, EGO_LENGTH, EGO_WIDTH);
    svg.polygon(
        "ego",
        &ego.corners(),
        r##"fill="#2ca02c" fill-opacity="0.6" stroke="#2ca02c""##,
    );
    svg.polyline(
        "ego-gt",
        &scene.ego_future,
        r##"stroke="#2ca02c" stroke-width="2""##,
        "",
    );
    let chosen = commanded_mode(scene.command.index(), output.ego_trajectories.len().max(1));
    for (k, mode) in output.ego_trajectories.iter().enumerate() {
        let width = if k == chosen { 2.0 } else { 1.0 };
        svg.polyline(
            "ego-pred",
            mode,
            &format!(r##"stroke="#ff7f0e" stroke-width="{width}" stroke-dasharray="4 2""##),
            &format!(r#" data-mode="{k}" data-selected="{}""#, k == chosen),
        );
    }

    let mut entries = vec![
        ("boundary (true)", class_color(0), ""),
        ("divider (true)", class_color(1), ""),
        ("map (predicted)", "#000000", "6 4"),
        ("ego plan (true)", "#2ca02c", ""),
        ("ego plan (predicted)", "#ff7f0e", "4 2"),
    ];
    if !scene.agents.is_empty() {
        entries.push(("agent future (true)", "#1f77b4", ""));
        entries.push(("agent future (predicted)", "#17becf", "3 2"));
    }
    svg.out
        .push_str("<g class=\"legend\" font-family=\"sans-serif\" font-size=\"10\">\n");
    for (i, (label, color, dash)) in entries.iter().enumerate() {
        let y = view.margin + 12.0 * i as f64;
        let x = view.margin;
        let _ = writeln!(
            svg.out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
            x + 16.0
        );
        let _ = writeln!(
            svg.out,
            r#"<text x="{}" y="{}">{label}</text>"#,
            x + 20.0,
            y + 3.0
        );
    }
    svg.out.push_str("</g>\n</svg>\n");
    svg.out
}

pub fn emit_plot(
    scene: &VectorScene,
    output: &ModelOutput<f64>,
    cfg: &SceneGenConfig,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, render_svg(scene, output, cfg)).map_err(|e| Error::io(path, e))
}

/// Renders the first `count` scenes into `dir` as `scene_NNNN.svg`.
pub fn emit_plots<P: Predictor + ?Sized>(
    predictor: &P,
    scenes: &[VectorScene],
    cfg: &SceneGenConfig,
    dir: &Path,
    count: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenes
        .iter()
        .take(count)
        .enumerate()
        .map(|(i, scene)| {
            let path = dir.join(format!("scene_{i:04}.svg"));
            emit_plot(scene, &predictor.predict(scene, cfg)?, cfg, &path)?;
            Ok(path)
        })
        .collect()
}
