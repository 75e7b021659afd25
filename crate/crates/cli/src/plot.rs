//! Static SVG rendering of sampling trajectories.

use std::fmt::Write as _;

use groundiff::geometry::Bbox;

use crate::SampleTrajectory;

const SIDE: f64 = 200.0;
const PAD: f64 = 12.0;
const TITLE: f64 = 18.0;
const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn rect(out: &mut String, x0: f64, y0: f64, b: Bbox, style: &str) {
    let xy = b.to_xyxy();
    let _ = writeln!(
        out,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" {style}/>"#,
        x0 + xy.x1 * SIDE,
        y0 + xy.y1 * SIDE,
        (xy.x2 - xy.x1) * SIDE,
        (xy.y2 - xy.y1) * SIDE,
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One panel per step: that step's predicted boxes in grey over the ground
/// truth (dashed, one color per phrase). The last panel also shows the
/// selected boxes.
pub fn trajectory_svg(s: &SampleTrajectory) -> String {
    let panels = s.trajectory.len().max(1);
    let w = panels as f64 * (SIDE + PAD) + PAD;
    let h = SIDE + TITLE + 2.0 * PAD;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, step) in s.trajectory.iter().enumerate() {
        let x0 = PAD + k as f64 * (SIDE + PAD);
        let y0 = PAD + TITLE;
        let _ = writeln!(out, r#"<g class="panel">"#);
        let title = format!("step {}: t={} to {}", k + 1, step.t, step.t_next);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="11">{}</text>"#,
            x0,
            PAD + 11.0,
            escape(&title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y0:.2}" width="{SIDE}" height="{SIDE}" fill="#f7f7f7" stroke="#444"/>"##
        );
        for b in &step.boxes {
            rect(&mut out, x0, y0, *b, r##"fill="none" stroke="#888" stroke-opacity="0.35" stroke-width="0.6""##);
        }
        for (i, set) in s.gt.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            for b in set {
                let style = format!(r#"fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="4 2""#);
                rect(&mut out, x0, y0, *b, &style);
            }
        }
        if k + 1 == s.trajectory.len() {
            for (i, preds) in s.predictions.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                for p in preds {
                    let style = format!(r#"fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="2""#);
                    rect(&mut out, x0, y0, p.bbox, &style);
                }
            }
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}
