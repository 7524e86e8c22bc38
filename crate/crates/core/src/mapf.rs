//! MAPF instances, solutions, collision detection and validation.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Cell, GridMap};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapfError {
    #[error("agent {agent}: {which} {cell} is not a free cell")]
    NotFree {
        agent: usize,
        which: &'static str,
        cell: Cell,
    },
    #[error("agents {0} and {1} share a start")]
    DuplicateStart(usize, usize),
    #[error("agents {0} and {1} share a goal")]
    DuplicateGoal(usize, usize),
    #[error("expected {expected} entries, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("malformed scenario line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// Starts and goals of `N` agents on a shared map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    map: Arc<GridMap>,
    starts: Vec<Cell>,
    goals: Vec<Cell>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        map: Arc<GridMap>,
        starts: Vec<Cell>,
        goals: Vec<Cell>,
    ) -> Result<Self, MapfError> {
        if starts.len() != goals.len() {
            return Err(MapfError::LengthMismatch {
                expected: starts.len(),
                found: goals.len(),
            });
        }
        for (which, cells) in [("start", &starts), ("goal", &goals)] {
            let mut seen = HashMap::with_capacity(cells.len());
            for (agent, &cell) in cells.iter().enumerate() {
                if !map.is_free(cell) {
                    return Err(MapfError::NotFree { agent, which, cell });
                }
                if let Some(prev) = seen.insert(cell, agent) {
                    return Err(if which == "start" {
                        MapfError::DuplicateStart(prev, agent)
                    } else {
                        MapfError::DuplicateGoal(prev, agent)
                    });
                }
            }
        }
        Ok(Instance {
            id: id.into(),
            map,
            starts,
            goals,
        })
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn shared_map(&self) -> Arc<GridMap> {
        Arc::clone(&self.map)
    }

    pub fn starts(&self) -> &[Cell] {
        &self.starts
    }

    pub fn goals(&self) -> &[Cell] {
        &self.goals
    }

    pub fn num_agents(&self) -> usize {
        self.starts.len()
    }
}

/// One path per agent. Agents rest at the last vertex of their path forever.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Solution {
    pub paths: Vec<Vec<Cell>>,
}

impl Solution {
    pub fn new(paths: Vec<Vec<Cell>>) -> Self {
        Solution { paths }
    }

    /// Position of `agent` at `t` under the rest-at-target extension.
    pub fn position(&self, agent: usize, t: usize) -> Cell {
        let path = &self.paths[agent];
        path[t.min(path.len() - 1)]
    }

    pub fn positions_at(&self, t: usize) -> Vec<Cell> {
        (0..self.paths.len()).map(|i| self.position(i, t)).collect()
    }

    /// Earliest `t` from which each agent stays on its final vertex.
    pub fn arrival_times(&self) -> Vec<usize> {
        self.paths
            .iter()
            .map(|path| match path.last() {
                None => 0,
                Some(last) => path.iter().rposition(|c| c != last).map_or(0, |i| i + 1),
            })
            .collect()
    }

    /// Last time step stored in any path.
    pub fn horizon(&self) -> usize {
        self.paths.iter().map(|p| p.len().saturating_sub(1)).max().unwrap_or(0)
    }

    /// Paths truncated at each agent's arrival time.
    pub fn canonical(&self) -> Solution {
        let arrivals = self.arrival_times();
        Solution {
            paths: self
                .paths
                .iter()
                .zip(arrivals)
                .map(|(p, t)| p[..(t + 1).min(p.len())].to_vec())
                .collect(),
        }
    }

    /// Paths padded with rests so every path has `len` vertices.
    pub fn extended_to(&self, len: usize) -> Solution {
        Solution {
            paths: self
                .paths
                .iter()
                .map(|p| {
                    let mut p = p.clone();
                    if let Some(&last) = p.last() {
                        p.resize(len.max(p.len()), last);
                    }
                    p
                })
                .collect(),
        }
    }
}

/// Sum of arrival times.
pub fn soc(solution: &Solution) -> u64 {
    solution.arrival_times().iter().map(|&t| t as u64).sum()
}

/// Latest arrival time.
pub fn makespan(solution: &Solution) -> u64 {
    solution.arrival_times().into_iter().max().unwrap_or(0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CollisionKind {
    /// Both agents occupy `cell` at time `t`.
    Vertex { cell: Cell },
    /// The lower-indexed agent moves `from -> to` while the other moves back.
    Edge { from: Cell, to: Cell },
}

/// A collision between agents `agents.0 < agents.1`. Vertex collisions are
/// stamped with the time they occupy the cell, edge collisions with the time
/// the traversal starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Collision {
    #[serde(flatten)]
    pub kind: CollisionKind,
    pub agents: (usize, usize),
    pub t: usize,
}

impl Collision {
    pub fn is_vertex(&self) -> bool {
        matches!(self.kind, CollisionKind::Vertex { .. })
    }
}

/// All vertex and edge collisions of the joint move `before -> after`, where
/// `before` is the configuration at time `t`.
///
/// Output is sorted, each unordered pair appears at most once per kind.
pub fn detect_collisions(
    t: usize,
    before: &[Cell],
    after: &[Cell],
) -> Result<Vec<Collision>, MapfError> {
    if before.len() != after.len() {
        return Err(MapfError::LengthMismatch {
            expected: before.len(),
            found: after.len(),
        });
    }
    let mut out = Vec::new();

    let mut at_next: HashMap<Cell, Vec<usize>> = HashMap::with_capacity(after.len());
    for (i, &c) in after.iter().enumerate() {
        at_next.entry(c).or_default().push(i);
    }
    for (&cell, agents) in &at_next {
        for (k, &i) in agents.iter().enumerate() {
            for &j in &agents[k + 1..] {
                out.push(Collision {
                    kind: CollisionKind::Vertex { cell },
                    agents: (i, j),
                    t: t + 1,
                });
            }
        }
    }

    let mut at_prev: HashMap<Cell, Vec<usize>> = HashMap::with_capacity(before.len());
    for (i, &c) in before.iter().enumerate() {
        at_prev.entry(c).or_default().push(i);
    }
    for i in 0..before.len() {
        if after[i] == before[i] {
            continue;
        }
        let Some(others) = at_prev.get(&after[i]) else {
            continue;
        };
        for &j in others {
            if j > i && after[j] == before[i] {
                out.push(Collision {
                    kind: CollisionKind::Edge {
                        from: before[i],
                        to: after[i],
                    },
                    agents: (i, j),
                    t,
                });
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    AgentCount { expected: usize, found: usize },
    EmptyPath { agent: usize },
    StartMismatch { agent: usize, expected: Cell, found: Cell },
    GoalMismatch { agent: usize, expected: Cell, found: Cell },
    OffMap { agent: usize, t: usize, cell: Cell },
    InvalidMove { agent: usize, t: usize, from: Cell, to: Cell },
    Collision { collision: Collision },
}

/// Outcome of [`validate`]. Serializes as `{"ok": bool, "violations": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Checks endpoints, move connectivity and collision-freeness under the
/// rest-at-target extension.
pub fn validate(instance: &Instance, solution: &Solution) -> ValidationReport {
    let mut violations = Vec::new();
    let n = instance.num_agents();
    if solution.paths.len() != n {
        violations.push(Violation::AgentCount {
            expected: n,
            found: solution.paths.len(),
        });
        return ValidationReport { ok: false, violations };
    }
    let map = instance.map();
    let mut structural = false;
    for (agent, path) in solution.paths.iter().enumerate() {
        let (Some(&first), Some(&last)) = (path.first(), path.last()) else {
            violations.push(Violation::EmptyPath { agent });
            structural = true;
            continue;
        };
        if first != instance.starts()[agent] {
            violations.push(Violation::StartMismatch {
                agent,
                expected: instance.starts()[agent],
                found: first,
            });
        }
        if last != instance.goals()[agent] {
            violations.push(Violation::GoalMismatch {
                agent,
                expected: instance.goals()[agent],
                found: last,
            });
        }
        for (t, &cell) in path.iter().enumerate() {
            if !map.is_free(cell) {
                violations.push(Violation::OffMap { agent, t, cell });
                structural = true;
            }
        }
        for (t, w) in path.windows(2).enumerate() {
            if Action::between(w[0], w[1]).is_none() {
                violations.push(Violation::InvalidMove {
                    agent,
                    t,
                    from: w[0],
                    to: w[1],
                });
            }
        }
    }
    if !structural {
        let horizon = solution.horizon();
        let mut before = solution.positions_at(0);
        for (i, j) in duplicate_pairs(&before) {
            violations.push(Violation::Collision {
                collision: Collision {
                    kind: CollisionKind::Vertex { cell: before[i] },
                    agents: (i, j),
                    t: 0,
                },
            });
        }
        for t in 0..horizon {
            let after = solution.positions_at(t + 1);
            let collisions = detect_collisions(t, &before, &after).expect("equal lengths");
            violations.extend(collisions.into_iter().map(|collision| Violation::Collision { collision }));
            before = after;
        }
    }
    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

fn duplicate_pairs(cells: &[Cell]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            if cells[i] == cells[j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// One line of a MovingAI `.scen` file. `x` is the column, `y` the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenEntry {
    pub bucket: u32,
    pub map: String,
    pub map_width: usize,
    pub map_height: usize,
    pub start: Cell,
    pub goal: Cell,
    pub optimal: f64,
}

pub fn parse_scen(text: &str) -> Result<Vec<ScenEntry>, MapfError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || (idx == 0 && line.starts_with("version")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(MapfError::MalformedLine {
                line: line_no,
                reason: format!("expected 9 tab-separated columns, found {}", cols.len()),
            });
        }
        let num = |i: usize| -> Result<usize, MapfError> {
            cols[i].trim().parse().map_err(|_| MapfError::MalformedLine {
                line: line_no,
                reason: format!("column {} is not an integer: {:?}", i + 1, cols[i]),
            })
        };
        let optimal = cols[8].trim().parse().map_err(|_| MapfError::MalformedLine {
            line: line_no,
            reason: format!("column 9 is not a number: {:?}", cols[8]),
        })?;
        out.push(ScenEntry {
            bucket: num(0)? as u32,
            map: cols[1].to_string(),
            map_width: num(2)?,
            map_height: num(3)?,
            start: Cell::new(num(5)?, num(4)?),
            goal: Cell::new(num(7)?, num(6)?),
            optimal,
        });
    }
    Ok(out)
}

pub fn render_scen(entries: &[ScenEntry]) -> String {
    let mut out = String::from("version 1\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.8}\n",
            e.bucket,
            e.map,
            e.map_width,
            e.map_height,
            e.start.col,
            e.start.row,
            e.goal.col,
            e.goal.row,
            e.optimal
        ));
    }
    out
}

/// Builds an instance from the first `agents` scenario entries (all when `None`).
pub fn instance_from_scen(
    id: impl Into<String>,
    map: Arc<GridMap>,
    entries: &[ScenEntry],
    agents: Option<usize>,
) -> Result<Instance, MapfError> {
    let n = agents.unwrap_or(entries.len());
    if n > entries.len() {
        return Err(MapfError::LengthMismatch {
            expected: n,
            found: entries.len(),
        });
    }
    let starts = entries[..n].iter().map(|e| e.start).collect();
    let goals = entries[..n].iter().map(|e| e.goal).collect();
    Instance::new(id, map, starts, goals)
}

/// Scenario entries for an instance, with BFS-optimal lengths.
pub fn scen_from_instance(instance: &Instance, map_name: &str) -> Vec<ScenEntry> {
    let map = instance.map();
    instance
        .starts()
        .iter()
        .zip(instance.goals())
        .map(|(&s, &g)| {
            let optimal = crate::grid::bfs_distance(map, g)
                .ok()
                .and_then(|f| f.get(s))
                .map_or(-1.0, f64::from);
            ScenEntry {
                bucket: 0,
                map: map_name.to_string(),
                map_width: map.width(),
                map_height: map.height(),
                start: s,
                goal: g,
                optimal,
            }
        })
        .collect()
}
