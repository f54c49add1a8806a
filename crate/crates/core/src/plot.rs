//! Static SVG timeline of one annotated recording.

use std::fmt::Write;

use crate::annotations::{boundaries_of, AnnotationRecord, Label, Level};
use crate::error::Result;

const WIDTH: f64 = 960.0;
const MARGIN: f64 = 40.0;
const STRUCT_Y: f64 = 30.0;
const STRUCT_H: f64 = 40.0;
const THEME_Y: f64 = 78.0;
const THEME_H: f64 = 22.0;
const AXIS_Y: f64 = 112.0;
const HEIGHT: f64 = 150.0;

fn color(label: Label) -> &'static str {
    match label.as_str() {
        "E" => "#4e79a7",
        "D" => "#f28e2b",
        "R" => "#59a14f",
        "S1" => "#a0cbe8",
        "TR" => "#bab0ac",
        "S2" => "#8cd17d",
        "C" => "#d4a6c8",
        _ => "#ffbe7d",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders structure blocks, a thematic sub-track (when annotated), internal
/// boundary ticks and, if given, predicted boundaries as dashed markers.
/// Output depends only on the inputs.
pub fn timeline_svg(record: &AnnotationRecord, predictions: Option<&[f64]>) -> Result<String> {
    let span = WIDTH - 2.0 * MARGIN;
    let x = |t: f64| MARGIN + span * (t / record.duration_s).clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="18">{} / {}</text>"#,
        escape(&record.piece_id),
        escape(&record.version_id)
    );
    for (level, y, h) in [(Level::Structure, STRUCT_Y, STRUCT_H), (Level::Thematic, THEME_Y, THEME_H)] {
        let _ = writeln!(s, r#"<g class="{level}">"#);
        for seg in record.segments_at(level) {
            let (x0, x1) = (x(seg.start_s), x(seg.end_s));
            let _ = writeln!(
                s,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{}" stroke="white"/>"#,
                x1 - x0,
                color(seg.label)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                (x0 + x1) / 2.0,
                y + h / 2.0 + 4.0,
                seg.label.as_str()
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, r#"<g class="boundaries">"#);
    for &b in boundaries_of(record, Level::Structure)?.times() {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black" stroke-width="2"/>"#,
            x(b),
            STRUCT_Y - 4.0,
            STRUCT_Y + STRUCT_H + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    if let Some(pred) = predictions {
        let _ = writeln!(s, r#"<g class="predictions">"#);
        for &b in pred {
            let _ = writeln!(
                s,
                r##"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="#d62728" stroke-width="2" stroke-dasharray="4,3"/>"##,
                x(b),
                STRUCT_Y - 8.0,
                AXIS_Y
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{AXIS_Y}" x2="{:.2}" y2="{AXIS_Y}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    let step = tick_step(record.duration_s);
    let mut t = 0.0;
    while t <= record.duration_s + 1e-9 {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x(t),
            AXIS_Y + 16.0,
            format_time(t)
        );
        t += step;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick_step(duration_s: f64) -> f64 {
    [5.0, 10.0, 30.0, 60.0, 120.0, 300.0]
        .into_iter()
        .find(|&st| duration_s / st <= 12.0)
        .unwrap_or(600.0)
}

fn format_time(t: f64) -> String {
    let t = t.round() as u64;
    format!("{}:{:02}", t / 60, t % 60)
}
