//! Per-timestep action fields.
//!
//! An [`ActionField`] assigns one action to every agent-occupied cell of the
//! grid and leaves the remaining cells [`CellAction::Free`]. Because a
//! collision-free configuration holds at most one agent per cell, the field
//! determines the joint move uniquely, and a sequence of fields is a
//! complete plan.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Cell, GridMap};
use crate::mapf::{detect_collisions, makespan, validate, Collision, Instance, Solution, Violation};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FieldError {
    #[error("solution is not valid: {0:?}")]
    InvalidSolution(Vec<Violation>),
    #[error("field is {found:?}, map is {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("collision while applying field {t}: {collisions:?}")]
    CollisionAt { t: usize, collisions: Vec<Collision> },
    #[error("agent {agent} has no executable action in field {t}")]
    InvalidActionAt { t: usize, agent: usize },
    #[error("agent {0} does not end on its goal")]
    AgentNotAtGoal(usize),
    #[error("invalid action id {0}")]
    InvalidActionId(u8),
}

/// Encoded cell action. `Free` marks cells no agent occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellAction {
    Wait = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
    Free = 255,
}

pub const FREE_ID: u8 = CellAction::Free as u8;

impl CellAction {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self, FieldError> {
        match id {
            FREE_ID => Ok(CellAction::Free),
            _ => Action::from_id(id)
                .map(CellAction::from)
                .ok_or(FieldError::InvalidActionId(id)),
        }
    }

    pub fn action(self) -> Option<Action> {
        match self {
            CellAction::Wait => Some(Action::Wait),
            CellAction::Up => Some(Action::Up),
            CellAction::Down => Some(Action::Down),
            CellAction::Left => Some(Action::Left),
            CellAction::Right => Some(Action::Right),
            CellAction::Free => None,
        }
    }
}

impl From<Action> for CellAction {
    fn from(a: Action) -> Self {
        match a {
            Action::Wait => CellAction::Wait,
            Action::Up => CellAction::Up,
            Action::Down => CellAction::Down,
            Action::Left => CellAction::Left,
            Action::Right => CellAction::Right,
        }
    }
}

/// Action ids keyed by name, as stored in dataset and protocol metadata.
pub fn action_encoding() -> Vec<(&'static str, u8)> {
    let mut out: Vec<(&'static str, u8)> = Action::ALL.iter().map(|a| (a.name(), a.id())).collect();
    out.push(("free", FREE_ID));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionField {
    pub t: usize,
    height: usize,
    width: usize,
    actions: Vec<CellAction>,
}

impl ActionField {
    pub fn free(t: usize, height: usize, width: usize) -> Self {
        ActionField {
            t,
            height,
            width,
            actions: vec![CellAction::Free; height * width],
        }
    }

    /// Builds a field from row-major action ids.
    pub fn from_ids(t: usize, height: usize, width: usize, ids: &[u8]) -> Result<Self, FieldError> {
        if ids.len() != height * width {
            return Err(FieldError::DimensionMismatch {
                expected: (height, width),
                found: (ids.len() / width.max(1), width),
            });
        }
        let actions = ids.iter().map(|&id| CellAction::from_id(id)).collect::<Result<_, _>>()?;
        Ok(ActionField { t, height, width, actions })
    }

    /// Field with `actions[i]` written at `positions[i]`.
    pub fn from_agent_actions(t: usize, map: &GridMap, positions: &[Cell], actions: &[Action]) -> Self {
        let mut field = ActionField::free(t, map.height(), map.width());
        for (&p, &a) in positions.iter().zip(actions) {
            field.set(p, a.into());
        }
        field
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, cell: Cell) -> CellAction {
        self.actions[cell.row * self.width + cell.col]
    }

    pub fn set(&mut self, cell: Cell, action: CellAction) {
        self.actions[cell.row * self.width + cell.col] = action;
    }

    pub fn actions(&self) -> &[CellAction] {
        &self.actions
    }

    pub fn ids(&self) -> Vec<u8> {
        self.actions.iter().map(|a| a.id()).collect()
    }

    pub fn non_free_count(&self) -> usize {
        self.actions.iter().filter(|a| **a != CellAction::Free).count()
    }
}

/// One action field per step `t in [0, makespan)` of a valid solution.
pub fn fields_from_solution(instance: &Instance, solution: &Solution) -> Result<Vec<ActionField>, FieldError> {
    let report = validate(instance, solution);
    if !report.ok {
        return Err(FieldError::InvalidSolution(report.violations));
    }
    let map = instance.map();
    let horizon = makespan(solution) as usize;
    let mut fields = Vec::with_capacity(horizon);
    let mut before = solution.positions_at(0);
    for t in 0..horizon {
        let after = solution.positions_at(t + 1);
        let mut field = ActionField::free(t, map.height(), map.width());
        for (&a, &b) in before.iter().zip(&after) {
            let action = Action::between(a, b).expect("validated moves are unit steps");
            field.set(a, action.into());
        }
        fields.push(field);
        before = after;
    }
    Ok(fields)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    /// Colliding joint moves are rejected: nobody moves.
    Strict,
    /// Both participants of every collision stay put, repeated to a fixpoint.
    Tolerant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub positions: Vec<Cell>,
    /// Collisions of the joint move as proposed by the field.
    pub collisions: Vec<Collision>,
    /// Agents whose cell held `Free` or a move off the free grid; they wait.
    pub invalid_actions: usize,
    /// Action each agent actually executed.
    pub applied: Vec<Action>,
}

/// Reads each agent's action from its own cell and executes the joint move.
///
/// In strict mode a move with collisions is not committed and the outcome
/// keeps the old positions. In tolerant mode colliding agents are held back
/// until the remaining move is collision-free; only the collisions of the
/// original proposal are reported.
pub fn apply_field(
    map: &GridMap,
    positions: &[Cell],
    field: &ActionField,
    mode: CollisionMode,
) -> Result<StepOutcome, FieldError> {
    if (field.height(), field.width()) != (map.height(), map.width()) {
        return Err(FieldError::DimensionMismatch {
            expected: (map.height(), map.width()),
            found: (field.height(), field.width()),
        });
    }
    let mut invalid_actions = 0;
    let mut proposed = Vec::with_capacity(positions.len());
    for &p in positions {
        let next = field
            .get(p)
            .action()
            .and_then(|a| map.step_free(p, a));
        if next.is_none() {
            invalid_actions += 1;
        }
        proposed.push(next.unwrap_or(p));
    }

    let t = field.t;
    let collisions = detect_collisions(t, positions, &proposed).expect("equal lengths");
    let committed = match mode {
        CollisionMode::Strict if !collisions.is_empty() => positions.to_vec(),
        CollisionMode::Strict => proposed,
        CollisionMode::Tolerant => {
            let mut current = collisions.clone();
            while !current.is_empty() {
                for c in &current {
                    proposed[c.agents.0] = positions[c.agents.0];
                    proposed[c.agents.1] = positions[c.agents.1];
                }
                current = detect_collisions(t, positions, &proposed).expect("equal lengths");
            }
            proposed
        }
    };
    let applied = positions
        .iter()
        .zip(&committed)
        .map(|(&a, &b)| Action::between(a, b).expect("unit steps"))
        .collect();
    Ok(StepOutcome {
        positions: committed,
        collisions,
        invalid_actions,
        applied,
    })
}

/// Executes a field sequence from the instance's starts in strict mode and
/// returns the induced canonical solution.
pub fn apply_fields(instance: &Instance, fields: &[ActionField]) -> Result<Solution, FieldError> {
    let map = instance.map();
    let mut positions = instance.starts().to_vec();
    let mut paths: Vec<Vec<Cell>> = positions.iter().map(|&c| vec![c]).collect();
    for (t, field) in fields.iter().enumerate() {
        let outcome = apply_field(map, &positions, field, CollisionMode::Strict)?;
        if !outcome.collisions.is_empty() {
            return Err(FieldError::CollisionAt {
                t,
                collisions: outcome.collisions,
            });
        }
        if outcome.invalid_actions > 0 {
            let agent = positions
                .iter()
                .position(|&p| field.get(p).action().and_then(|a| map.step_free(p, a)).is_none())
                .expect("an invalid action was counted");
            return Err(FieldError::InvalidActionAt { t, agent });
        }
        positions = outcome.positions;
        for (path, &p) in paths.iter_mut().zip(&positions) {
            path.push(p);
        }
    }
    if let Some(agent) = positions.iter().zip(instance.goals()).position(|(p, g)| p != g) {
        return Err(FieldError::AgentNotAtGoal(agent));
    }
    Ok(Solution::new(paths).canonical())
}
