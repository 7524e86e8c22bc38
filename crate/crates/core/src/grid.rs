//! Obstacle grids, map file I/O and BFS distance fields.
//!
//! Coordinates are `(row, col)`, zero-based, row 0 at the top. `Up`
//! decreases the row index.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("missing or malformed header: {0}")]
    BadHeader(String),
    #[error("dimension mismatch at line {line}: expected {expected}, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown glyph {glyph:?} at row {row}, col {col}")]
    UnknownGlyph { row: usize, col: usize, glyph: char },
    #[error("goal {0} is on an obstacle or out of bounds")]
    GoalOnObstacle(Cell),
    #[error("cell {0} is on an obstacle or out of bounds")]
    CellOnObstacle(Cell),
}

/// A grid coordinate. Serialized as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

impl From<(usize, usize)> for Cell {
    fn from((row, col): (usize, usize)) -> Self {
        Cell { row, col }
    }
}

impl From<Cell> for (usize, usize) {
    fn from(c: Cell) -> Self {
        (c.row, c.col)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// The five per-cell actions. The discriminants are the wire encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Wait = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Wait,
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
    ];

    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Action> {
        Action::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Wait => "wait",
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }

    /// `(d_row, d_col)`.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Wait => (0, 0),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }

    /// The action that takes `from` to `to`, if they are equal or 4-adjacent.
    pub fn between(from: Cell, to: Cell) -> Option<Action> {
        let dr = to.row as isize - from.row as isize;
        let dc = to.col as isize - from.col as isize;
        Action::ALL.into_iter().find(|a| a.delta() == (dr, dc))
    }

    pub fn reverse(self) -> Action {
        match self {
            Action::Wait => Action::Wait,
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }
}

/// Static obstacle grid. `blocked[r * width + c]` is true for obstacles.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridMap {
    height: usize,
    width: usize,
    blocked: Vec<bool>,
}

impl GridMap {
    /// # Panics
    /// If `blocked.len() != height * width` or either dimension is zero.
    pub fn new(height: usize, width: usize, blocked: Vec<bool>) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        assert_eq!(blocked.len(), height * width, "cell count mismatch");
        GridMap {
            height,
            width,
            blocked,
        }
    }

    pub fn open(height: usize, width: usize) -> Self {
        GridMap::new(height, width, vec![false; height * width])
    }

    /// Builds a map from rows of `'.'` (free) and `'#'` (blocked).
    /// Intended for tests and small fixtures.
    pub fn from_rows(rows: &[&str]) -> Result<Self, MapError> {
        let text = format!("{} {}\n{}\n", rows.len(), rows.first().map_or(0, |r| r.len()), rows.join("\n"));
        parse_map(text.as_bytes())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.blocked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocked.is_empty()
    }

    pub fn cells(&self) -> &[bool] {
        &self.blocked
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index / self.width, index % self.width)
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.row < self.height && cell.col < self.width
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        self.in_bounds(cell) && !self.blocked[self.index(cell)]
    }

    pub fn is_blocked(&self, cell: Cell) -> bool {
        !self.is_free(cell)
    }

    pub fn set_blocked(&mut self, cell: Cell, blocked: bool) {
        let i = self.index(cell);
        self.blocked[i] = blocked;
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len())
            .filter(|&i| !self.blocked[i])
            .map(|i| self.cell_at(i))
    }

    pub fn free_count(&self) -> usize {
        self.blocked.iter().filter(|b| !**b).count()
    }

    pub fn obstacle_fraction(&self) -> f64 {
        (self.len() - self.free_count()) as f64 / self.len() as f64
    }

    /// Destination of `action` from `cell`, if in bounds. Does not check obstacles.
    pub fn step(&self, cell: Cell, action: Action) -> Option<Cell> {
        let (dr, dc) = action.delta();
        let row = cell.row.checked_add_signed(dr)?;
        let col = cell.col.checked_add_signed(dc)?;
        let next = Cell::new(row, col);
        self.in_bounds(next).then_some(next)
    }

    /// Destination of `action` from `cell` if it is in bounds and free.
    pub fn step_free(&self, cell: Cell, action: Action) -> Option<Cell> {
        self.step(cell, action).filter(|&c| self.is_free(c))
    }

    /// All `(action, destination)` pairs available from a free cell, wait first.
    pub fn neighbors(&self, cell: Cell) -> Result<Vec<(Action, Cell)>, MapError> {
        if !self.is_free(cell) {
            return Err(MapError::CellOnObstacle(cell));
        }
        Ok(Action::ALL
            .into_iter()
            .filter_map(|a| self.step_free(cell, a).map(|c| (a, c)))
            .collect())
    }

    /// Number of free 4-neighbors of a cell (wait excluded).
    pub fn degree(&self, cell: Cell) -> usize {
        Action::MOVES
            .into_iter()
            .filter(|&a| self.step_free(cell, a).is_some())
            .count()
    }

    /// Row-major `'.'`/`'#'` string without line breaks.
    pub fn to_compact_string(&self) -> String {
        self.blocked
            .iter()
            .map(|&b| if b { '#' } else { '.' })
            .collect()
    }

    /// Inverse of [`GridMap::to_compact_string`].
    pub fn from_compact_string(height: usize, width: usize, s: &str) -> Result<Self, MapError> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != height * width {
            return Err(MapError::DimensionMismatch {
                line: 0,
                expected: height * width,
                found: chars.len(),
            });
        }
        let blocked = chars
            .iter()
            .enumerate()
            .map(|(i, &ch)| match ch {
                '.' => Ok(false),
                '#' => Ok(true),
                glyph => Err(MapError::UnknownGlyph {
                    row: i / width,
                    col: i % width,
                    glyph,
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GridMap::new(height, width, blocked))
    }
}

fn glyph_blocked(glyph: char, movingai: bool) -> Option<bool> {
    match (glyph, movingai) {
        ('.', _) => Some(false),
        ('@' | 'T' | 'O', true) => Some(true),
        ('#', false) => Some(true),
        _ => None,
    }
}

/// Parses a MovingAI `.map` file or the compact `"H W"` format.
///
/// MovingAI maps accept `.` (free) and `@`, `T`, `O` (blocked). The compact
/// format accepts `.` and `#`.
pub fn parse_map(text: &[u8]) -> Result<GridMap, MapError> {
    let text = std::str::from_utf8(text).map_err(|e| MapError::BadHeader(e.to_string()))?;
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let first = lines
        .iter()
        .position(|l| !l.trim().is_empty())
        .ok_or_else(|| MapError::BadHeader("empty input".into()))?;

    let (height, width, body_start, movingai) = if lines[first].trim_start().starts_with("type") {
        let mut height = None;
        let mut width = None;
        let mut idx = first + 1;
        loop {
            let line = lines
                .get(idx)
                .ok_or_else(|| MapError::BadHeader("missing `map` line".into()))?
                .trim();
            idx += 1;
            if line == "map" {
                break;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next();
            let value = parts.next().and_then(|v| v.parse::<usize>().ok());
            match (key, value) {
                (Some("height"), Some(v)) => height = Some(v),
                (Some("width"), Some(v)) => width = Some(v),
                _ => return Err(MapError::BadHeader(format!("unexpected header line {line:?}"))),
            }
        }
        let h = height.ok_or_else(|| MapError::BadHeader("missing height".into()))?;
        let w = width.ok_or_else(|| MapError::BadHeader("missing width".into()))?;
        (h, w, idx, true)
    } else {
        let mut parts = lines[first].split_whitespace().map(|p| p.parse::<usize>());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(h)), Some(Ok(w)), None) => (h, w, first + 1, false),
            _ => {
                return Err(MapError::BadHeader(format!(
                    "expected `type octile` or `H W`, found {:?}",
                    lines[first]
                )))
            }
        }
    };
    if height == 0 || width == 0 {
        return Err(MapError::BadHeader("dimensions must be positive".into()));
    }

    let mut body: Vec<(usize, &str)> = lines[body_start..]
        .iter()
        .enumerate()
        .map(|(i, l)| (body_start + i + 1, *l))
        .collect();
    while body.last().is_some_and(|(_, l)| l.is_empty()) {
        body.pop();
    }
    if body.len() != height {
        return Err(MapError::DimensionMismatch {
            line: body.last().map_or(body_start, |(n, _)| *n),
            expected: height,
            found: body.len(),
        });
    }

    let mut blocked = Vec::with_capacity(height * width);
    for (row, (line_no, line)) in body.into_iter().enumerate() {
        let count = line.chars().count();
        if count != width {
            return Err(MapError::DimensionMismatch {
                line: line_no,
                expected: width,
                found: count,
            });
        }
        for (col, glyph) in line.chars().enumerate() {
            blocked.push(glyph_blocked(glyph, movingai).ok_or(MapError::UnknownGlyph { row, col, glyph })?);
        }
    }
    Ok(GridMap::new(height, width, blocked))
}

/// Renders a map in MovingAI format with `.` and `@`.
pub fn render_map(map: &GridMap) -> Vec<u8> {
    let mut out = format!(
        "type octile\nheight {}\nwidth {}\nmap\n",
        map.height(),
        map.width()
    );
    for row in map.blocked.chunks(map.width) {
        out.extend(row.iter().map(|&b| if b { '@' } else { '.' }));
        out.push('\n');
    }
    out.into_bytes()
}

/// Shortest 4-connected unit-cost distances from every cell to `goal`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    goal: Cell,
    height: usize,
    width: usize,
    dist: Vec<Option<u32>>,
}

impl DistanceField {
    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `None` for obstacles, out-of-bounds and unreachable cells.
    pub fn get(&self, cell: Cell) -> Option<u32> {
        if cell.row < self.height && cell.col < self.width {
            self.dist[cell.row * self.width + cell.col]
        } else {
            None
        }
    }

    pub fn as_slice(&self) -> &[Option<u32>] {
        &self.dist
    }

    pub fn max_finite(&self) -> u32 {
        self.dist.iter().flatten().copied().max().unwrap_or(0)
    }
}

pub fn bfs_distance(map: &GridMap, goal: Cell) -> Result<DistanceField, MapError> {
    if !map.is_free(goal) {
        return Err(MapError::GoalOnObstacle(goal));
    }
    let mut dist = vec![None; map.len()];
    dist[map.index(goal)] = Some(0);
    let mut queue = VecDeque::from([goal]);
    while let Some(cell) = queue.pop_front() {
        let d = dist[map.index(cell)].expect("queued cells have distances");
        for action in Action::MOVES {
            if let Some(next) = map.step_free(cell, action) {
                let slot = &mut dist[map.index(next)];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
    }
    Ok(DistanceField {
        goal,
        height: map.height(),
        width: map.width(),
        dist,
    })
}

/// Connected-component label per cell; `None` for obstacles.
pub fn components(map: &GridMap) -> Vec<Option<usize>> {
    let mut label = vec![None; map.len()];
    let mut next = 0;
    for start in 0..map.len() {
        if map.cells()[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(next);
        let mut queue = VecDeque::from([map.cell_at(start)]);
        while let Some(cell) = queue.pop_front() {
            for action in Action::MOVES {
                if let Some(n) = map.step_free(cell, action) {
                    let i = map.index(n);
                    if label[i].is_none() {
                        label[i] = Some(next);
                        queue.push_back(n);
                    }
                }
            }
        }
        next += 1;
    }
    label
}

/// True if every free cell is reachable from every other (vacuously true with
/// no free cells).
pub fn is_connected(map: &GridMap) -> bool {
    components(map).iter().flatten().all(|&c| c == 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    #[test]
    fn parses_all_free_compact_map() {
        let map = parse_map(b"2 4\n....\n....\n").unwrap();
        assert_eq!((map.height(), map.width()), (2, 4));
        assert!(map.cells().iter().all(|b| !b));
    }

    #[test]
    fn parses_movingai_glyphs() {
        let map = parse_map(b"type octile\nheight 2\nwidth 2\nmap\n.@\n@.").unwrap();
        assert_eq!(map.cells(), &[false, true, true, false]);
        let map = parse_map(b"type octile\r\nheight 1\r\nwidth 3\r\nmap\r\nT.O\r\n").unwrap();
        assert_eq!(map.cells(), &[true, false, true]);
    }

    #[test]
    fn rejects_bad_maps() {
        assert_eq!(
            parse_map(b"type octile\nheight 2\nwidth 2\nmap\n.@\n@x\n"),
            Err(MapError::UnknownGlyph { row: 1, col: 1, glyph: 'x' })
        );
        assert!(matches!(
            parse_map(b"type octile\nheight 2\nwidth 3\nmap\n...\n..\n"),
            Err(MapError::DimensionMismatch { expected: 3, found: 2, .. })
        ));
        assert!(matches!(
            parse_map(b"type octile\nheight 3\nwidth 2\nmap\n..\n..\n"),
            Err(MapError::DimensionMismatch { expected: 3, found: 2, .. })
        ));
        // '#' belongs to the compact format only, '@' to MovingAI only
        assert!(matches!(parse_map(b"1 2\n.@\n"), Err(MapError::UnknownGlyph { .. })));
        assert!(matches!(
            parse_map(b"type octile\nheight 1\nwidth 2\nmap\n.#\n"),
            Err(MapError::UnknownGlyph { .. })
        ));
        assert!(matches!(parse_map(b""), Err(MapError::BadHeader(_))));
        assert!(matches!(parse_map(b"2\n..\n"), Err(MapError::BadHeader(_))));
    }

    #[test]
    fn render_parse_round_trip() {
        let map = GridMap::from_rows(&["..#.", "#...", "...#"]).unwrap();
        let text = render_map(&map);
        assert!(text.starts_with(b"type octile\nheight 3\nwidth 4\nmap\n..@.\n"));
        assert_eq!(parse_map(&text).unwrap(), map);
        let compact = map.to_compact_string();
        assert_eq!(GridMap::from_compact_string(3, 4, &compact).unwrap(), map);
    }

    #[test]
    fn corridor_distances() {
        let map = GridMap::open(1, 3);
        let field = bfs_distance(&map, Cell::new(0, 0)).unwrap();
        assert_eq!(field.as_slice(), &[Some(0), Some(1), Some(2)]);
        assert_eq!(field.get(Cell::new(0, 0)), Some(0));
        assert_eq!(field.get(Cell::new(5, 5)), None);
    }

    #[test]
    fn bfs_rejects_obstacle_goal_and_marks_unreachable() {
        let map = GridMap::from_rows(&[".#."]).unwrap();
        assert_eq!(
            bfs_distance(&map, Cell::new(0, 1)),
            Err(MapError::GoalOnObstacle(Cell::new(0, 1)))
        );
        let field = bfs_distance(&map, Cell::new(0, 0)).unwrap();
        assert_eq!(field.as_slice(), &[Some(0), None, None]);
    }

    #[test]
    fn neighbor_counts() {
        let map = GridMap::open(3, 3);
        assert_eq!(map.neighbors(Cell::new(1, 1)).unwrap().len(), 5);
        let corner = map.neighbors(Cell::new(0, 0)).unwrap();
        assert_eq!(
            corner,
            vec![
                (Action::Wait, Cell::new(0, 0)),
                (Action::Down, Cell::new(1, 0)),
                (Action::Right, Cell::new(0, 1)),
            ]
        );
        let walled = GridMap::from_rows(&["###", "#.#", "###"]).unwrap();
        assert_eq!(
            walled.neighbors(Cell::new(1, 1)).unwrap(),
            vec![(Action::Wait, Cell::new(1, 1))]
        );
        assert_eq!(
            walled.neighbors(Cell::new(0, 0)),
            Err(MapError::CellOnObstacle(Cell::new(0, 0)))
        );
    }

    #[test]
    fn neighbor_count_matches_wall_enumeration() {
        // every subset of the four walls around the centre of a 3x3 grid
        for mask in 0u8..16 {
            let mut map = GridMap::open(3, 3);
            let around = [Cell::new(0, 1), Cell::new(2, 1), Cell::new(1, 0), Cell::new(1, 2)];
            for (bit, cell) in around.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    map.set_blocked(*cell, true);
                }
            }
            let got = map.neighbors(Cell::new(1, 1)).unwrap();
            assert_eq!(got.len(), 5 - mask.count_ones() as usize);
            assert!(got.iter().all(|(_, c)| map.is_free(*c)));
        }
    }

    #[test]
    fn action_between_and_reverse() {
        let a = Cell::new(2, 2);
        for action in Action::ALL {
            let b = GridMap::open(5, 5).step(a, action).unwrap();
            assert_eq!(Action::between(a, b), Some(action));
            assert_eq!(Action::between(b, a), Some(action.reverse()));
        }
        assert_eq!(Action::between(a, Cell::new(3, 3)), None);
        assert_eq!(Action::from_id(4), Some(Action::Right));
        assert_eq!(Action::from_id(5), None);
    }

    fn dijkstra(map: &GridMap, goal: Cell) -> Vec<Option<u32>> {
        let mut dist: Vec<Option<u32>> = vec![None; map.len()];
        let mut heap = BinaryHeap::new();
        dist[map.index(goal)] = Some(0);
        heap.push(Reverse((0u32, map.index(goal))));
        while let Some(Reverse((d, i))) = heap.pop() {
            if dist[i].is_some_and(|x| x < d) {
                continue;
            }
            let cell = map.cell_at(i);
            for (action, next) in map.neighbors(cell).unwrap() {
                if action == Action::Wait {
                    continue;
                }
                let j = map.index(next);
                if dist[j].is_none_or(|x| x > d + 1) {
                    dist[j] = Some(d + 1);
                    heap.push(Reverse((d + 1, j)));
                }
            }
        }
        dist
    }

    proptest::proptest! {
        #[test]
        fn bfs_matches_dijkstra(cells in proptest::collection::vec(proptest::bool::weighted(0.3), 64), goal in 0usize..64) {
            let mut map = GridMap::new(8, 8, cells);
            let goal = map.cell_at(goal);
            map.set_blocked(goal, false);
            let field = bfs_distance(&map, goal).unwrap();
            proptest::prop_assert_eq!(field.as_slice(), &dijkstra(&map, goal)[..]);
            // adjacent reachable cells differ by exactly one
            for cell in map.free_cells() {
                for (_, n) in map.neighbors(cell).unwrap() {
                    if let (Some(a), Some(b)) = (field.get(cell), field.get(n)) {
                        proptest::prop_assert!(a.abs_diff(b) <= 1);
                    }
                }
            }
        }

        #[test]
        fn bfs_is_symmetric(cells in proptest::collection::vec(proptest::bool::weighted(0.25), 36), a in 0usize..36, b in 0usize..36) {
            let map = GridMap::new(6, 6, cells);
            let (a, b) = (map.cell_at(a), map.cell_at(b));
            proptest::prop_assume!(map.is_free(a) && map.is_free(b));
            let from_a = bfs_distance(&map, a).unwrap();
            let from_b = bfs_distance(&map, b).unwrap();
            proptest::prop_assert_eq!(from_a.get(b), from_b.get(a));
        }

        #[test]
        fn neighbors_stay_on_free_cells(cells in proptest::collection::vec(proptest::bool::weighted(0.4), 30)) {
            let map = GridMap::new(5, 6, cells);
            for cell in map.free_cells() {
                for (action, next) in map.neighbors(cell).unwrap() {
                    proptest::prop_assert!(map.is_free(next));
                    proptest::prop_assert_eq!(map.step(cell, action), Some(next));
                }
            }
        }
    }
}
