//! Static SVG view of a decode trace: one cell per token, shaded by the step
//! that accepted it, with each slot outlined and labelled by the iteration
//! that committed it.

use std::fmt::Write;

use crate::decoder::DecodeTrace;

const CELL: usize = 22;
const MARGIN: usize = 10;
const ROW_TARGET: usize = 32;

/// Slot length inferred from the trace.
fn slot_len(trace: &DecodeTrace) -> usize {
    let mut origins: Vec<usize> = trace.slots.iter().map(|s| s.origin).collect();
    origins.sort_unstable();
    let gap = origins.windows(2).map(|w| w[1] - w[0]).min();
    gap.unwrap_or_else(|| trace.tokens.len().max(1))
}

pub fn render_svg(trace: &DecodeTrace) -> String {
    let k = slot_len(trace).max(1);
    let cols = k * (ROW_TARGET / k).max(1);
    let end = trace.tokens.iter().map(|t| t.pos + 1).max().unwrap_or(0);
    let rows = end.div_ceil(cols).max(1);
    let max_iter = trace.tokens.iter().map(|t| t.iter).max().unwrap_or(1).max(1);
    let (w, h) = (2 * MARGIN + cols * CELL, 2 * MARGIN + rows * CELL);
    let at = |pos: usize| (MARGIN + (pos % cols) * CELL, MARGIN + (pos / cols) * CELL);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="9">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for t in &trace.tokens {
        let (x, y) = at(t.pos);
        let shade = 235 - (200 * t.iter / max_iter).min(200);
        let _ = writeln!(
            svg,
            r#"<rect class="token" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" data-pos="{}" data-iter="{}"/>"#,
            t.pos, t.iter
        );
    }
    let mut slots: Vec<_> = trace.slots.iter().collect();
    slots.sort_by_key(|s| s.origin);
    for s in slots {
        let (x, y) = at(s.origin);
        let width = k.min(cols - s.origin % cols) * CELL;
        let _ = writeln!(
            svg,
            r#"<rect class="slot" x="{x}" y="{y}" width="{width}" height="{CELL}" fill="none" stroke="black" stroke-width="1.5"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text class="order" x="{}" y="{}">{}</text>"#,
            x + 2,
            y + 9,
            s.iteration
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// The iteration labels in positional slot order, read back from an SVG
/// produced by [`render_svg`].
pub fn order_labels(svg: &str) -> Vec<usize> {
    svg.lines()
        .filter(|l| l.starts_with(r#"<text class="order""#))
        .filter_map(|l| l.split('>').nth(1)?.split('<').next()?.parse().ok())
        .collect()
}
