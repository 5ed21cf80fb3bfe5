//! Scene rendering to standalone SVG documents.
//!
//! Draws the drivable-area mask, per-agent history and ground-truth tracks,
//! and optionally a set of predicted trajectories. Output is plain SVG text
//! with fixed two-decimal coordinates, so identical inputs produce identical
//! bytes.

use crate::decoder::TrajectorySample;
use crate::scene::{Scene, EXTENT_M, GRID};

// ─── canvas layout ──────────────────────────────────────────────────────────

/// Side length of the square map viewport in pixels.
pub const MAP_PX: f64 = 700.0;
/// Height of the legend strip under the map.
pub const LEGEND_PX: f64 = 90.0;

const BG: &str = "#20242b";
const DRIVABLE: &str = "#3d434d";
const HISTORY: &str = "#9aa0a8";
const TRUTH: &str = "#e03131";
const BODY: &str = "#f2c94c";
const TEXT: &str = "#e8e8e8";

/// Scene x coordinate to pixel column.
fn px(x: f64) -> f64 {
    (x + EXTENT_M / 2.0) / EXTENT_M * MAP_PX
}

/// Scene y coordinate to pixel row. SVG rows grow downward, scene y grows up.
fn py(y: f64) -> f64 {
    (EXTENT_M / 2.0 - y) / EXTENT_M * MAP_PX
}

// ─── orientation ────────────────────────────────────────────────────────────

/// Heading angle in radians taken from the most recent displacement of a
/// history track. A track that never moves faces east.
pub fn heading_of(past: &[[f64; 2]]) -> f64 {
    if past.len() < 2 {
        return 0.0;
    }
    let last = past[past.len() - 1];
    for p in past[..past.len() - 1].iter().rev() {
        let dx = last[0] - p[0];
        let dy = last[1] - p[1];
        if dx.hypot(dy) > 1e-9 {
            return dy.atan2(dx);
        }
    }
    0.0
}

/// Linear blend from blue to red, returned as an SVG color literal.
fn ramp_color(frac: f64) -> String {
    let f = frac.clamp(0.0, 1.0);
    let r = (255.0 * f).round() as u8;
    let b = (255.0 * (1.0 - f)).round() as u8;
    format!("rgb({r},0,{b})")
}

// ─── element helpers ────────────────────────────────────────────────────────

fn rect(out: &mut String, x: f64, y: f64, w: f64, h: f64, fill: &str) {
    out.push_str(&format!(
        "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>\n"
    ));
}

fn line(out: &mut String, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
    out.push_str(&format!(
        "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
         stroke=\"{stroke}\" stroke-width=\"{width:.2}\" stroke-linecap=\"round\"/>\n"
    ));
}

fn polyline(out: &mut String, pts: &[(f64, f64)], stroke: &str, width: f64) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    out.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" \
         stroke-width=\"{width:.2}\" stroke-linejoin=\"round\"/>\n",
        coords.join(" ")
    ));
}

fn polygon(out: &mut String, pts: &[(f64, f64)], fill: &str) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    out.push_str(&format!(
        "<polygon points=\"{}\" fill=\"{fill}\"/>\n",
        coords.join(" ")
    ));
}

fn text(out: &mut String, x: f64, y: f64, size: f64, body: &str) {
    out.push_str(&format!(
        "<text x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"monospace\" \
         font-size=\"{size:.2}\" fill=\"{TEXT}\">{body}</text>\n"
    ));
}

// ─── layers ─────────────────────────────────────────────────────────────────

fn draw_mask(out: &mut String, scene: &Scene) {
    let res = scene.mask.resolution;
    let cell_px = res / EXTENT_M * MAP_PX;
    for r in 0..GRID {
        let y_top = py(scene.mask.origin.1 + (r as f64 + 1.0) * res);
        let mut c = 0;
        while c < GRID {
            if !scene.mask.cell(r, c) {
                c += 1;
                continue;
            }
            let start = c;
            while c < GRID && scene.mask.cell(r, c) {
                c += 1;
            }
            let x_left = px(scene.mask.origin.0 + start as f64 * res);
            let w = (c - start) as f64 * cell_px;
            rect(out, x_left, y_top, w, cell_px, DRIVABLE);
        }
    }
}

fn draw_tracks(out: &mut String, scene: &Scene) {
    for agent in &scene.agents {
        let hist: Vec<(f64, f64)> = agent.past.iter().map(|p| (px(p[0]), py(p[1]))).collect();
        polyline(out, &hist, HISTORY, 1.5);
        let mut truth = vec![{
            let c = agent.current();
            (px(c[0]), py(c[1]))
        }];
        truth.extend(agent.future.iter().map(|p| (px(p[0]), py(p[1]))));
        polyline(out, &truth, TRUTH, 2.5);
    }
}

/// One trajectory as per-step segments shaded from blue at the first step to
/// red at the horizon, starting from the agent's current position.
fn draw_prediction(out: &mut String, start: (f64, f64), steps: &[(f64, f64)]) {
    let mut prev = start;
    let denom = (steps.len().max(2) - 1) as f64;
    for (i, &p) in steps.iter().enumerate() {
        let color = ramp_color(i as f64 / denom);
        line(out, prev.0, prev.1, p.0, p.1, &color, 1.8);
        prev = p;
    }
}

fn draw_agents(out: &mut String, scene: &Scene) {
    for agent in &scene.agents {
        let c = agent.current();
        let theta = heading_of(&agent.past);
        let (u, v) = (theta.cos(), theta.sin());
        // Body axes: n along heading, o to the agent's left.
        let n = (u, v);
        let o = (-v, u);
        let (hl, hw) = (1.1, 0.55);
        let corner = |s: f64, t: f64| {
            (
                px(c[0] + s * hl * n.0 + t * hw * o.0),
                py(c[1] + s * hl * n.1 + t * hw * o.1),
            )
        };
        polygon(
            out,
            &[
                corner(1.0, 1.0),
                corner(1.0, -1.0),
                corner(-1.0, -1.0),
                corner(-1.0, 1.0),
            ],
            BODY,
        );
        let tip = |s: f64, t: f64| (px(c[0] + s * n.0 + t * o.0), py(c[1] + s * n.1 + t * o.1));
        polygon(out, &[tip(1.0, 0.0), tip(-0.4, 0.45), tip(-0.4, -0.45)], BG);
        text(
            out,
            px(c[0]) + 8.0,
            py(c[1]) - 8.0,
            11.0,
            &format!("a{}", agent.id),
        );
    }
}

fn draw_legend(out: &mut String, scene: &Scene, n_preds: usize) {
    let base = MAP_PX;
    line(out, 0.0, base, MAP_PX, base, DRIVABLE, 1.0);
    text(
        out,
        12.0,
        base + 22.0,
        12.0,
        &format!(
            "scene {}   agents {}   drivable {:.2}   predictions {}",
            scene.id,
            scene.agents.len(),
            scene.mask.drivable_fraction(),
            n_preds
        ),
    );
    let y = base + 45.0;
    line(out, 12.0, y, 44.0, y, HISTORY, 1.5);
    text(out, 50.0, y + 4.0, 11.0, "history");
    line(out, 140.0, y, 172.0, y, TRUTH, 2.5);
    text(out, 178.0, y + 4.0, 11.0, "truth");
    line(out, 260.0, y, 276.0, y, &ramp_color(0.0), 1.8);
    line(out, 276.0, y, 292.0, y, &ramp_color(1.0), 1.8);
    text(out, 298.0, y + 4.0, 11.0, "prediction, early to late");
    let y = base + 70.0;
    let bar = 10.0 / EXTENT_M * MAP_PX;
    line(out, 12.0, y, 12.0 + bar, y, TEXT, 1.5);
    line(out, 12.0, y - 4.0, 12.0, y + 4.0, TEXT, 1.5);
    line(out, 12.0 + bar, y - 4.0, 12.0 + bar, y + 4.0, TEXT, 1.5);
    text(out, 12.0 + bar + 8.0, y + 4.0, 11.0, "10 m");
}

// ─── entry point ────────────────────────────────────────────────────────────

/// Render a scene, and optionally a set of predicted trajectories, as a
/// complete SVG document. Predictions whose agent axis does not match the
/// scene are drawn for the agents both sides share.
pub fn render_scene(scene: &Scene, preds: Option<&[TrajectorySample]>) -> String {
    let total_h = MAP_PX + LEGEND_PX;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{MAP_PX:.0}\" \
         height=\"{total_h:.0}\" viewBox=\"0 0 {MAP_PX:.0} {total_h:.0}\">\n"
    ));
    rect(&mut out, 0.0, 0.0, MAP_PX, total_h, BG);
    draw_mask(&mut out, scene);
    draw_tracks(&mut out, scene);
    if let Some(samples) = preds {
        for sample in samples {
            let shared = sample.a.min(scene.agents.len());
            for (a, agent) in scene.agents.iter().enumerate().take(shared) {
                let c = agent.current();
                let steps: Vec<(f64, f64)> = (0..sample.t)
                    .map(|t| {
                        let (x, y) = sample.point(a, t);
                        (px(x), py(y))
                    })
                    .collect();
                draw_prediction(&mut out, (px(c[0]), py(c[1])), &steps);
            }
        }
    }
    draw_agents(&mut out, scene);
    draw_legend(&mut out, scene, preds.map_or(0, <[TrajectorySample]>::len));
    out.push_str("</svg>\n");
    out
}

// ─── tests ──────────────────────────────────────────────────────────────────
