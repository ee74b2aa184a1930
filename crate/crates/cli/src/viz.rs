//! PPM and SVG renderings of a plan over a depth background.

use std::fmt::Write as _;

use flowrig::flowio::{DepthImage, FlowField};
use flowrig::geometry::{CameraIntrinsics, Pixel};
use flowrig::manip_planner::SubgoalPlan;

use crate::config::VizSettings;

pub const CURRENT: [u8; 3] = [230, 30, 30];
pub const NEXT: [u8; 3] = [40, 90, 255];
pub const FLOW: [u8; 3] = [255, 210, 0];
const LEGEND_BG: [u8; 3] = [16, 16, 16];
const TEXT: [u8; 3] = [255, 255, 255];

/// Legend box in the top-left corner: `(width, height)`.
pub const LEGEND_SIZE: (usize, usize) = (40, 27);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
        let (mut x, mut y) = a;
        let (dx, dy) = ((b.0 - x).abs(), -(b.1 - y).abs());
        let (sx, sy) = (if x < b.0 { 1 } else { -1 }, if y < b.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x, y, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.put(x + 4 * i as i64 + col, y + r as i64, c);
                    }
                }
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

/// 3x5 glyphs for the legend labels.
fn glyph(c: char) -> [u8; 5] {
    match c {
        'C' => [0b111, 0b100, 0b100, 0b100, 0b111],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'N' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'O' => [0b111, 0b101, 0b101, 0b101, 0b111],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        _ => [0; 5],
    }
}

/// Grey depth image: near is bright, missing depth is black.
pub fn background(depth: &DepthImage) -> Canvas {
    let valid: Vec<f64> = depth.values().iter().copied().filter(|d| *d > 0.0).collect();
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = depth
        .values()
        .iter()
        .map(|&d| {
            if !(d > 0.0) {
                return [0, 0, 0];
            }
            let g = if hi > lo { 255.0 - 200.0 * (d - lo) / (hi - lo) } else { 200.0 };
            let g = g.round() as u8;
            [g, g, g]
        })
        .collect();
    Canvas { width: depth.width(), height: depth.height(), pixels }
}

fn draw_legend(c: &mut Canvas) {
    c.fill(0, 0, LEGEND_SIZE.0 as i64 - 1, LEGEND_SIZE.1 as i64 - 1, LEGEND_BG);
    for (i, (label, color)) in [("CURRENT", CURRENT), ("NEXT", NEXT), ("FLOW", FLOW)].into_iter().enumerate() {
        let y = 2 + 8 * i as i64;
        c.fill(2, y, 6, y + 4, color);
        c.text(9, y, label, TEXT);
    }
}

/// Quiver sample points: every `stride` pixels, offset by half a stride.
pub fn quiver_points(width: usize, height: usize, stride: usize) -> impl Iterator<Item = (usize, usize)> {
    let s = stride.max(1);
    (s / 2..height).step_by(s).flat_map(move |y| (s / 2..width).step_by(s).map(move |x| (x, y)))
}

fn arrows(flow: &FlowField, stride: usize) -> Vec<(usize, usize, f64, f64)> {
    quiver_points(flow.width(), flow.height(), stride)
        .filter(|&(x, y)| flow.is_known(x, y) && flow.magnitude(x, y) >= 0.5)
        .map(|(x, y)| {
            let (du, dv) = flow.get(x, y);
            (x, y, du as f64, dv as f64)
        })
        .collect()
}

/// Projected subgoals split into the current one and the ones after it.
fn markers(k: &CameraIntrinsics, plan: &SubgoalPlan, current: usize) -> Vec<(Pixel, [u8; 3])> {
    plan.subgoal_points()
        .iter()
        .enumerate()
        .skip(current)
        .filter_map(|(i, p)| {
            let (px, _) = k.project(p).ok()?;
            Some((px, if i == current { CURRENT } else { NEXT }))
        })
        .collect()
}

pub fn render(depth: &DepthImage, k: &CameraIntrinsics, plan: &SubgoalPlan, flow: Option<&FlowField>, s: &VizSettings) -> Canvas {
    let mut c = background(depth);
    if let Some(f) = flow {
        for (x, y, du, dv) in arrows(f, s.quiver_stride) {
            let end = ((x as f64 + du).round() as i64, (y as f64 + dv).round() as i64);
            c.line((x as i64, y as i64), end, FLOW);
        }
    }
    let r = s.marker_radius as i64;
    // Next subgoals first so the current one stays on top.
    let mut m = markers(k, plan, s.current);
    m.reverse();
    for (px, color) in m {
        let (u, v) = (px.u.round() as i64, px.v.round() as i64);
        c.fill(u - r, v - r, u + r, v + r, color);
    }
    draw_legend(&mut c);
    c
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// SVG overlay with the flow quiver and the subgoal markers.
pub fn render_svg(k: &CameraIntrinsics, width: usize, height: usize, plan: &SubgoalPlan, flow: Option<&FlowField>, s: &VizSettings) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r##"<rect width="{width}" height="{height}" fill="#000000"/>"##);
    if let Some(f) = flow {
        let _ = writeln!(out, r#"<g stroke="{}" stroke-width="0.5">"#, hex(FLOW));
        for (x, y, du, dv) in arrows(f, s.quiver_stride) {
            let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{:.3}" y2="{:.3}"/>"#, x as f64 + du, y as f64 + dv);
        }
        let _ = writeln!(out, "</g>");
    }
    let mut m = markers(k, plan, s.current);
    m.reverse();
    for (px, color) in m {
        let _ = writeln!(out, r#"<circle cx="{:.3}" cy="{:.3}" r="{}" fill="{}"/>"#, px.u, px.v, s.marker_radius.max(1), hex(color));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowrig::manip_planner::InteractionMode;
    use nalgebra::Vector3;

    fn depth() -> DepthImage {
        DepthImage::from_vec(128, 96, (0..128 * 96).map(|i| 1.0 + (i % 128) as f64 * 0.01).collect()).unwrap()
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 64.0, 48.0).unwrap()
    }

    fn plan(subgoals: &[Vector3<f64>]) -> SubgoalPlan {
        SubgoalPlan::new(InteractionMode::Grasp, Vector3::new(0.0, 0.0, 2.0), None, subgoals)
    }

    #[test]
    fn empty_plan_only_adds_legend() {
        let bg = background(&depth());
        let c = render(&depth(), &k(), &plan(&[]), None, &VizSettings::default());
        for y in 0..96 {
            for x in 0..128 {
                if x >= LEGEND_SIZE.0 || y >= LEGEND_SIZE.1 {
                    assert_eq!(c.get(x, y), bg.get(x, y));
                }
            }
        }
        assert_ne!(c, bg);
    }

    #[test]
    fn axis_subgoal_marks_principal_point() {
        let c = render(&depth(), &k(), &plan(&[Vector3::new(0.0, 0.0, 2.0)]), None, &VizSettings::default());
        assert_eq!(c.get(64, 48), CURRENT);
        assert_eq!(c.get(66, 50), CURRENT);
        assert_ne!(c.get(67, 48), CURRENT);
    }

    #[test]
    fn current_and_next_differ() {
        let p = plan(&[Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.4, 0.0, 2.0)]);
        let c = render(&depth(), &k(), &p, None, &VizSettings::default());
        assert_eq!(c.get(64, 48), CURRENT);
        assert_eq!(c.get(74, 48), NEXT);
        let later = VizSettings { current: 1, ..Default::default() };
        let c = render(&depth(), &k(), &p, None, &later);
        assert_eq!(c.get(74, 48), CURRENT);
        assert_ne!(c.get(64, 48), NEXT);
    }

    #[test]
    fn quiver_draws_flow() {
        let flow = FlowField::from_fn(128, 96, |_, _| (3.0, 0.0));
        let c = render(&depth(), &k(), &plan(&[]), Some(&flow), &VizSettings::default());
        assert_eq!(c.get(44, 36), FLOW);
        assert_eq!(c.get(47, 36), FLOW);
        let svg = render_svg(&k(), 128, 96, &plan(&[]), Some(&flow), &VizSettings::default());
        assert_eq!(svg.matches("<line").count(), quiver_points(128, 96, 8).count());
    }

    #[test]
    fn ppm_is_deterministic() {
        let p = plan(&[Vector3::new(0.1, 0.0, 2.0)]);
        let a = render(&depth(), &k(), &p, None, &VizSettings::default()).to_ppm();
        let b = render(&depth(), &k(), &p, None, &VizSettings::default()).to_ppm();
        assert_eq!(a, b);
        assert!(a.starts_with(b"P6\n128 96\n255\n"));
        assert_eq!(a.len(), 14 + 128 * 96 * 3);
    }
}
