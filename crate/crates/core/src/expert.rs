//! Reference solvers used to produce expert trajectories.
//!
//! [`solve_prioritized`] plans agents one at a time with space-time A*
//! against a reservation table of the agents planned before them, restarting
//! with a fresh random priority order when an agent cannot be routed.
//! [`pibt_step`] computes a single collision-free joint step with priority
//! inheritance and backtracking; it doubles as a greedy closed-loop policy
//! and as an optional fallback solver.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::splitmix64;
use crate::grid::{bfs_distance, Action, Cell, DistanceField, GridMap, MapError};
use crate::mapf::{Instance, Solution};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExpertError {
    #[error("timed out after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u64 },
    #[error("agent {agent} could not be routed after {restarts} restarts")]
    Unsolvable { agent: usize, restarts: u32 },
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub timeout_ms: u64,
    pub max_restarts: u32,
    pub seed: u64,
    /// Run a PIBT rollout when every prioritized attempt fails.
    pub pibt_fallback: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            timeout_ms: 2000,
            max_restarts: 30,
            seed: 0,
            pibt_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMethod {
    Prioritized,
    PibtFallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertRun {
    /// Canonical solution: each path ends at its agent's arrival time.
    pub solution: Solution,
    /// Priority orders tried before success (0 = first order worked).
    pub restarts: u32,
    pub method: ExpertMethod,
}

/// Prioritized planning with random-restart priority orders.
pub fn solve_prioritized(instance: &Instance, config: &ExpertConfig) -> Result<Solution, ExpertError> {
    solve(instance, config).map(|run| run.solution)
}

/// Like [`solve_prioritized`] but reports how the solution was found.
pub fn solve(instance: &Instance, config: &ExpertConfig) -> Result<ExpertRun, ExpertError> {
    let started = Instant::now();
    let deadline = started + Duration::from_millis(config.timeout_ms);
    let map = instance.map();
    let n = instance.num_agents();
    let fields = instance
        .goals()
        .iter()
        .map(|&g| bfs_distance(map, g))
        .collect::<Result<Vec<_>, _>>()?;

    let mut max_dist = 0;
    for (agent, field) in fields.iter().enumerate() {
        match field.get(instance.starts()[agent]) {
            Some(d) => max_dist = max_dist.max(d as usize),
            None => return Err(ExpertError::Unsolvable { agent, restarts: 0 }),
        }
    }
    let horizon = 4 * (map.height() + map.width()) + max_dist;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (Reverse(fields[i].get(instance.starts()[i])), i));

    let timeout = || ExpertError::Timeout {
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    let mut last_failed = 0;
    for attempt in 0..=config.max_restarts {
        if attempt > 0 {
            order.shuffle(&mut rng);
        }
        match plan_in_order(instance, &fields, &order, horizon, deadline) {
            Ok(paths) => {
                return Ok(ExpertRun {
                    solution: Solution::new(paths).canonical(),
                    restarts: attempt,
                    method: ExpertMethod::Prioritized,
                })
            }
            Err(PlanFailure::Deadline) => return Err(timeout()),
            Err(PlanFailure::Agent(agent)) => last_failed = agent,
        }
    }

    if config.pibt_fallback {
        if let Some(solution) = pibt_rollout(instance, &fields, horizon * 4, deadline) {
            return Ok(ExpertRun {
                solution,
                restarts: config.max_restarts,
                method: ExpertMethod::PibtFallback,
            });
        }
        if Instant::now() > deadline {
            return Err(timeout());
        }
    }
    Err(ExpertError::Unsolvable {
        agent: last_failed,
        restarts: config.max_restarts,
    })
}

enum PlanFailure {
    Deadline,
    Agent(usize),
}

const NO_OWNER: u32 = u32::MAX;

/// Space-time occupancy of already planned agents.
struct Reservations {
    cells: usize,
    horizon: usize,
    /// `owner[t * cells + cell]` for `t <= horizon`.
    owner: Vec<u32>,
    /// Goal cells held forever from the stored time on.
    parked: Vec<Option<(usize, u32)>>,
    /// Latest time any planned agent occupies the cell.
    last_use: Vec<Option<usize>>,
}

impl Reservations {
    fn new(cells: usize, horizon: usize) -> Self {
        Reservations {
            cells,
            horizon,
            owner: vec![NO_OWNER; cells * (horizon + 1)],
            parked: vec![None; cells],
            last_use: vec![None; cells],
        }
    }

    fn owner(&self, cell: usize, t: usize) -> Option<u32> {
        if let Some((since, agent)) = self.parked[cell] {
            if t >= since {
                return Some(agent);
            }
        }
        if t <= self.horizon {
            let o = self.owner[t * self.cells + cell];
            (o != NO_OWNER).then_some(o)
        } else {
            None
        }
    }

    fn reserve(&mut self, agent: u32, path: &[usize]) {
        for (t, &cell) in path.iter().enumerate() {
            self.owner[t * self.cells + cell] = agent;
            self.last_use[cell] = Some(self.last_use[cell].map_or(t, |l| l.max(t)));
        }
        let last = *path.last().expect("paths are non-empty");
        self.parked[last] = Some((path.len() - 1, agent));
    }
}

fn plan_in_order(
    instance: &Instance,
    fields: &[DistanceField],
    order: &[usize],
    horizon: usize,
    deadline: Instant,
) -> Result<Vec<Vec<Cell>>, PlanFailure> {
    let map = instance.map();
    let mut reservations = Reservations::new(map.len(), horizon);
    let mut paths = vec![Vec::new(); instance.num_agents()];
    for &agent in order {
        let path = space_time_astar(
            map,
            &reservations,
            instance.starts()[agent],
            &fields[agent],
            horizon,
            deadline,
        )?
        .ok_or(PlanFailure::Agent(agent))?;
        let indices: Vec<usize> = path.iter().map(|&c| map.index(c)).collect();
        reservations.reserve(agent as u32, &indices);
        paths[agent] = path;
    }
    Ok(paths)
}

/// Earliest-arrival path from `start` to the field's goal that avoids every
/// reservation and can rest at the goal forever. `Ok(None)` if no such path
/// exists within `horizon`.
fn space_time_astar(
    map: &GridMap,
    res: &Reservations,
    start: Cell,
    field: &DistanceField,
    horizon: usize,
    deadline: Instant,
) -> Result<Option<Vec<Cell>>, PlanFailure> {
    let cells = map.len();
    let goal = map.index(field.goal());
    let h = |cell: usize| field.as_slice()[cell].expect("reachable") as usize;
    let start_idx = map.index(start);

    // g == t for every node, so the first visit of a (cell, t) state is final.
    let mut parent = vec![u32::MAX; cells * (horizon + 1)];
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    parent[start_idx] = start_idx as u32;
    open.push(Reverse((h(start_idx), h(start_idx), 0u8, seq, start_idx, 0usize)));

    while let Some(Reverse((_, _, _, _, cell, t))) = open.pop() {
        seq += 1;
        if seq.is_multiple_of(4096) && Instant::now() > deadline {
            return Err(PlanFailure::Deadline);
        }
        if cell == goal && res.last_use[goal].is_none_or(|l| l < t) {
            let mut path = Vec::with_capacity(t + 1);
            let (mut c, mut k) = (cell, t);
            loop {
                path.push(map.cell_at(c));
                if k == 0 {
                    break;
                }
                c = parent[k * cells + c] as usize;
                k -= 1;
            }
            path.reverse();
            return Ok(Some(path));
        }
        if t == horizon {
            continue;
        }
        let here = map.cell_at(cell);
        for action in Action::ALL {
            let Some(next) = map.step_free(here, action) else {
                continue;
            };
            let ni = map.index(next);
            let slot = (t + 1) * cells + ni;
            if parent[slot] != u32::MAX || res.owner(ni, t + 1).is_some() {
                continue;
            }
            // swap with whoever sits on `next` now and moves onto `here`
            if let Some(other) = res.owner(ni, t) {
                if res.owner(cell, t + 1) == Some(other) {
                    continue;
                }
            }
            parent[slot] = cell as u32;
            let hn = h(ni);
            seq += 1;
            open.push(Reverse((t + 1 + hn, hn, action.id(), seq, ni, t + 1)));
        }
    }
    Ok(None)
}

/// One collision-free joint step by priority inheritance with backtracking.
///
/// Agents are served in decreasing `priorities` order and each moves to the
/// free neighbor (or wait) closest to its goal. An agent that wants a cell
/// held by an undecided agent lends it its priority; if the lender's
/// descendants cannot move away it tries its next candidate, falling back to
/// waiting.
///
/// # Panics
/// If the slice lengths differ or a position is not a free cell.
pub fn pibt_step(
    map: &GridMap,
    current: &[Cell],
    priorities: &[f64],
    distances: &[DistanceField],
) -> Vec<Action> {
    pibt_step_salted(map, current, priorities, distances, None)
}

/// [`pibt_step`] with equally good candidates ordered by a hash of
/// `(salt, agent, action)` instead of by action id. Varying the salt per step
/// breaks the cycles the fixed order can fall into.
pub fn pibt_step_salted(
    map: &GridMap,
    current: &[Cell],
    priorities: &[f64],
    distances: &[DistanceField],
    salt: Option<u64>,
) -> Vec<Action> {
    assert_eq!(current.len(), priorities.len());
    assert_eq!(current.len(), distances.len());
    let next = PibtStep::new(map, current, distances, salt).run(priorities);
    current
        .iter()
        .zip(next)
        .map(|(&a, b)| Action::between(a, b).expect("PIBT moves to neighbors"))
        .collect()
}

struct PibtStep<'a> {
    map: &'a GridMap,
    current: &'a [Cell],
    distances: &'a [DistanceField],
    salt: Option<u64>,
    occupied_now: Vec<Option<usize>>,
    occupied_next: Vec<Option<usize>>,
    next: Vec<Option<Cell>>,
}

impl<'a> PibtStep<'a> {
    fn new(map: &'a GridMap, current: &'a [Cell], distances: &'a [DistanceField], salt: Option<u64>) -> Self {
        let mut occupied_now = vec![None; map.len()];
        for (i, &c) in current.iter().enumerate() {
            assert!(map.is_free(c), "agent {i} is not on a free cell");
            occupied_now[map.index(c)] = Some(i);
        }
        PibtStep {
            map,
            current,
            distances,
            salt,
            occupied_now,
            occupied_next: vec![None; map.len()],
            next: vec![None; current.len()],
        }
    }

    fn run(mut self, priorities: &[f64]) -> Vec<Cell> {
        let mut order: Vec<usize> = (0..self.current.len()).collect();
        order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]).then(a.cmp(&b)));
        for agent in order {
            if self.next[agent].is_none() {
                self.assign(agent, None);
            }
        }
        self.next.into_iter().map(|c| c.expect("all assigned")).collect()
    }

    fn claim(&mut self, agent: usize, cell: Cell) {
        if let Some(prev) = self.next[agent] {
            let i = self.map.index(prev);
            if self.occupied_next[i] == Some(agent) {
                self.occupied_next[i] = None;
            }
        }
        self.next[agent] = Some(cell);
        let i = self.map.index(cell);
        self.occupied_next[i] = Some(agent);
    }

    fn assign(&mut self, agent: usize, parent: Option<usize>) -> bool {
        let here = self.current[agent];
        let field = &self.distances[agent];
        let salt = self.salt;
        let mut candidates: Vec<(u32, bool, u64, Cell)> = self
            .map
            .neighbors(here)
            .expect("agents stand on free cells")
            .into_iter()
            .map(|(a, c)| {
                let busy = self.occupied_now[self.map.index(c)].is_some_and(|o| o != agent);
                let order = match salt {
                    Some(s) => splitmix64(s ^ splitmix64(((agent as u64) << 3) | a.id() as u64)),
                    None => a.id() as u64,
                };
                (field.get(c).unwrap_or(u32::MAX), busy, order, c)
            })
            .collect();
        candidates.sort();

        for (_, _, _, cell) in candidates {
            let idx = self.map.index(cell);
            if self.occupied_next[idx].is_some() {
                continue;
            }
            if parent.is_some_and(|p| self.current[p] == cell) {
                continue;
            }
            self.claim(agent, cell);
            if let Some(other) = self.occupied_now[idx] {
                if other != agent && self.next[other].is_none() && !self.assign(other, Some(agent)) {
                    continue;
                }
            }
            return true;
        }
        self.claim(agent, here);
        false
    }
}

/// Repeated PIBT steps with the usual dynamic priorities until every agent
/// stands on its goal at once. Returns a canonical solution.
pub fn pibt_rollout(
    instance: &Instance,
    fields: &[DistanceField],
    max_steps: usize,
    deadline: Instant,
) -> Option<Solution> {
    let map = instance.map();
    let n = instance.num_agents();
    let goals = instance.goals();
    let mut positions = instance.starts().to_vec();
    let mut priorities: Vec<f64> = (0..n).map(|i| base_priority(i, n)).collect();
    let mut paths: Vec<Vec<Cell>> = positions.iter().map(|&c| vec![c]).collect();
    for _ in 0..max_steps {
        if positions.iter().zip(goals).all(|(p, g)| p == g) {
            return Some(Solution::new(paths).canonical());
        }
        if Instant::now() > deadline {
            return None;
        }
        update_priorities(&mut priorities, &positions, goals);
        let actions = pibt_step(map, &positions, &priorities, fields);
        for (i, a) in actions.into_iter().enumerate() {
            positions[i] = map.step(positions[i], a).expect("PIBT stays on the map");
            paths[i].push(positions[i]);
        }
    }
    positions
        .iter()
        .zip(goals)
        .all(|(p, g)| p == g)
        .then(|| Solution::new(paths).canonical())
}

/// Distinct tie-breaking priority in `[0, 1)` for agent `i` of `n`.
pub fn base_priority(i: usize, n: usize) -> f64 {
    i as f64 / n.max(1) as f64
}

/// Agents away from their goal gain one unit of priority per step; agents on
/// their goal drop back to their base priority.
pub fn update_priorities(priorities: &mut [f64], positions: &[Cell], goals: &[Cell]) {
    let n = priorities.len();
    for (i, p) in priorities.iter_mut().enumerate() {
        if positions[i] == goals[i] {
            *p = base_priority(i, n);
        } else {
            *p += 1.0;
        }
    }
}
