//! ASCII and SVG frames of recorded episodes.

use std::fmt::Write as _;

use crate::grid::{Cell, GridMap};
use crate::sim::EpisodeTrace;

const AGENT_GLYPHS: &[u8] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
const CELL_PX: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub t: usize,
    pub positions: Vec<Cell>,
    pub goals: Vec<Cell>,
}

/// Frame 0 shows the starts, frame `t + 1` the state after step `t`.
pub fn frames(trace: &EpisodeTrace) -> Vec<Frame> {
    let mut out = vec![Frame {
        t: 0,
        positions: trace.header.starts.clone(),
        goals: trace.header.goals.clone(),
    }];
    out.extend(trace.steps.iter().map(|s| Frame {
        t: s.t + 1,
        positions: s.positions.clone(),
        goals: s.goals.clone(),
    }));
    out
}

fn glyph(agent: usize) -> char {
    AGENT_GLYPHS[agent % AGENT_GLYPHS.len()] as char
}

/// Walls `#`, free `.`, unoccupied goals `*`, agents by index glyph.
pub fn ascii_frame(map: &GridMap, frame: &Frame) -> String {
    let mut grid: Vec<Vec<char>> = (0..map.height())
        .map(|r| {
            (0..map.width())
                .map(|c| if map.is_blocked(Cell::new(r, c)) { '#' } else { '.' })
                .collect()
        })
        .collect();
    for g in &frame.goals {
        grid[g.row][g.col] = '*';
    }
    for (i, p) in frame.positions.iter().enumerate() {
        grid[p.row][p.col] = glyph(i);
    }
    let mut out = format!("t={}\n", frame.t);
    for row in grid {
        out.extend(row);
        out.push('\n');
    }
    out
}

/// All frames separated by blank lines.
pub fn ascii_animation(trace: &EpisodeTrace) -> String {
    let map = trace.map();
    frames(trace)
        .iter()
        .map(|f| ascii_frame(&map, f))
        .collect::<Vec<_>>()
        .join("\n")
}

fn hue(agent: usize, n: usize) -> usize {
    agent * 360 / n.max(1)
}

pub fn svg_frame(map: &GridMap, frame: &Frame) -> String {
    let (w, h) = (map.width() * CELL_PX, map.height() * CELL_PX);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for i in 0..map.len() {
        let cell = map.cell_at(i);
        if map.is_blocked(cell) {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL_PX}" height="{CELL_PX}" fill="black"/>"#,
                cell.col * CELL_PX,
                cell.row * CELL_PX
            );
        }
    }
    let n = frame.positions.len();
    for (i, g) in frame.goals.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="hsl({},70%,45%)" stroke-width="2"/>"#,
            g.col * CELL_PX + 3,
            g.row * CELL_PX + 3,
            CELL_PX - 6,
            CELL_PX - 6,
            hue(i, n)
        );
    }
    for (i, p) in frame.positions.iter().enumerate() {
        let (cx, cy) = (p.col * CELL_PX + CELL_PX / 2, p.row * CELL_PX + CELL_PX / 2);
        let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="{}" fill="hsl({},70%,55%)"/>"#, CELL_PX * 2 / 5, hue(i, n));
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" font-size="10" text-anchor="middle" font-family="monospace">{i}</text>"#,
            cy + 4
        );
    }
    let _ = writeln!(s, r#"<text x="2" y="10" font-size="9" fill="gray">t={}</text>"#, frame.t);
    s.push_str("</svg>\n");
    s
}
