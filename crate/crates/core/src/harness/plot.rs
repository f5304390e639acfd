//! SVG rendering of a scene with its forecast.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::eval::{Frame, PredictionRecord};
use crate::error::{Error, Result};
use crate::scene::{normalize_scene, Point2, RawScene};

const SIZE: f64 = 800.0;
const MARGIN: f64 = 20.0;

struct View {
    min: Point2,
    scale: f64,
    height: f64,
}

impl View {
    fn fit(points: &[Point2]) -> View {
        let (mut lo, mut hi) = (Point2::new(f64::MAX, f64::MAX), Point2::new(f64::MIN, f64::MIN));
        for p in points {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let span = (hi.x - lo.x).max(hi.y - lo.y).max(1.0);
        let scale = (SIZE - 2.0 * MARGIN) / span;
        View {
            min: lo,
            scale,
            height: (hi.y - lo.y) * scale + 2.0 * MARGIN,
        }
    }

    fn map(&self, p: Point2) -> (f64, f64) {
        (
            MARGIN + (p.x - self.min.x) * self.scale,
            self.height - MARGIN - (p.y - self.min.y) * self.scale,
        )
    }

    fn points(&self, pts: &[Point2]) -> String {
        let mut s = String::new();
        for (i, p) in pts.iter().enumerate() {
            let (x, y) = self.map(*p);
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{x:.2},{y:.2}").unwrap();
        }
        s
    }
}

/// Lanes gray, observed track blue, ground truth green, modes orange with
/// endpoint radius growing with probability.
pub fn render_svg(scene: &RawScene, pred: &PredictionRecord) -> Result<String> {
    if scene.scene_id != pred.scene_id {
        return Err(Error::InvalidArgument(format!(
            "prediction `{}` does not belong to scene `{}`",
            pred.scene_id, scene.scene_id
        )));
    }
    let scene = match pred.frame {
        Frame::Raw => scene.clone(),
        Frame::Normalized => normalize_scene(scene)?.scene,
    };
    let observed: Vec<Point2> = scene.aoi().observed().map(|s| s.point()).collect();
    let mut all: Vec<Point2> = observed.clone();
    all.extend(scene.gt_future.iter().copied());
    for m in &pred.modes {
        all.extend(m.trajectory.iter().copied());
    }
    let view = View::fit(&all);

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE:.0}\" height=\"{:.0}\" viewBox=\"0 0 {SIZE:.0} {:.0}\">",
        view.height, view.height
    )
    .unwrap();
    writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    writeln!(svg, "<g class=\"lanes\" fill=\"none\" stroke=\"#a0a0a0\" stroke-width=\"1\">").unwrap();
    for lane in &scene.lanes {
        writeln!(svg, "<polyline class=\"lane\" points=\"{}\"/>", view.points(&lane.centerline)).unwrap();
    }
    writeln!(svg, "</g>").unwrap();
    writeln!(
        svg,
        "<polyline class=\"observed\" fill=\"none\" stroke=\"#1f5fd6\" stroke-width=\"2.5\" points=\"{}\"/>",
        view.points(&observed)
    )
    .unwrap();
    if !scene.gt_future.is_empty() {
        writeln!(
            svg,
            "<polyline class=\"ground-truth\" fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"2.5\" points=\"{}\"/>",
            view.points(&scene.gt_future)
        )
        .unwrap();
    }
    writeln!(svg, "<g class=\"predictions\">").unwrap();
    for m in &pred.modes {
        writeln!(
            svg,
            "<polyline class=\"prediction\" fill=\"none\" stroke=\"#ff8c00\" stroke-width=\"1.5\" points=\"{}\"/>",
            view.points(&m.trajectory)
        )
        .unwrap();
    }
    for m in &pred.modes {
        let (x, y) = view.map(m.endpoint);
        let r = 2.0 + 8.0 * m.probability.clamp(0.0, 1.0).sqrt();
        writeln!(
            svg,
            "<circle class=\"endpoint\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" fill=\"#ff8c00\" fill-opacity=\"0.7\"/>"
        )
        .unwrap();
    }
    writeln!(svg, "</g>").unwrap();
    writeln!(svg, "</svg>").unwrap();
    Ok(svg)
}

pub fn plot(scene: &RawScene, pred: &PredictionRecord, out: &Path) -> Result<()> {
    let svg = render_svg(scene, pred)?;
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}
