//! Model input tensors and training labels.
//!
//! The input is an `(n, m, 6)` channel-last `f32` tensor with channels
//! `[map, current, goal, cost_to_goal, grad_x, grad_y]`. Agent indices in
//! the `current` and `goal` channels are 1-based so that 0 means empty.
//! Cost-to-goal and its gradient are written at agent-occupied cells only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_field::{ActionField, CellAction};
use crate::grid::{Action, Cell, DistanceField, GridMap};
use crate::mapf::detect_collisions;

pub const NUM_CHANNELS: usize = 6;
pub const CHANNEL_ORDER: [&str; NUM_CHANNELS] = ["map", "current", "goal", "cost_to_goal", "grad_x", "grad_y"];

pub const CH_MAP: usize = 0;
pub const CH_CURRENT: usize = 1;
pub const CH_GOAL: usize = 2;
pub const CH_COST: usize = 3;
pub const CH_GRAD_X: usize = 4;
pub const CH_GRAD_Y: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("no distance field towards the goal of agent {0}")]
    MissingDistanceField(usize),
    #[error("cell {0} cannot reach the goal")]
    UnreachableCell(Cell),
    #[error("agent {agent}: invalid transition {from} -> {to}")]
    InvalidTransition { agent: usize, from: Cell, to: Cell },
    #[error("expected {expected} agents, found {found}")]
    AgentCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Divide agent indices in the current/goal channels by the agent count.
    pub normalize_agent_index: bool,
}

/// Row-major, channel-last feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, channel: usize) -> Vec<f32> {
        self.data.iter().skip(channel).step_by(self.channels).copied().collect()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != height * width * channels * 4 {
            return None;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Some(FeatureTensor {
            height,
            width,
            channels,
            data,
        })
    }
}

/// Stable 64-bit FNV-1a hash, used to key random streams by string ids.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based coin flips for gradient ties, keyed by
/// `(seed, instance id, t)` and then by cell and axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TieBreak {
    key: u64,
}

impl TieBreak {
    pub fn new(seed: u64, instance_id: &str, t: usize) -> Self {
        let key = splitmix64(seed ^ splitmix64(stable_hash(instance_id.as_bytes()) ^ splitmix64(t as u64)));
        TieBreak { key }
    }

    /// `+1` or `-1`.
    pub fn sign(&self, cell: Cell, axis: u8) -> i8 {
        let word = splitmix64(self.key ^ splitmix64(((cell.row as u64) << 34) ^ ((cell.col as u64) << 2) ^ axis as u64));
        if word >> 63 == 0 {
            1
        } else {
            -1
        }
    }
}

fn delta(field: &DistanceField, here: u32, cell: Cell, action: Action) -> Option<i64> {
    let (dr, dc) = action.delta();
    let row = cell.row.checked_add_signed(dr)?;
    let col = cell.col.checked_add_signed(dc)?;
    field.get(Cell::new(row, col)).map(|d| d as i64 - here as i64)
}

/// Sign of one axis: `neg` is the move towards lower coordinates.
fn axis_sign(neg: Option<i64>, pos: Option<i64>, coin: impl FnOnce() -> i8) -> i8 {
    // walls, out-of-bounds and unreachable neighbors never approach the goal
    let neg_improves = neg.is_some_and(|d| d < 0);
    let pos_improves = pos.is_some_and(|d| d < 0);
    match (neg_improves, pos_improves) {
        (false, false) => 0,
        (false, true) => 1,
        (true, false) => -1,
        (true, true) => coin(),
    }
}

/// `(dx, dy)` of the cost-to-goal gradient at `cell`. `dx = +1` means moving
/// right decreases the distance, `dy = +1` means moving down does.
pub fn gradient_at(field: &DistanceField, cell: Cell, tiebreak: &TieBreak) -> Result<(i8, i8), FeatureError> {
    let here = field.get(cell).ok_or(FeatureError::UnreachableCell(cell))?;
    let dx = axis_sign(
        delta(field, here, cell, Action::Left),
        delta(field, here, cell, Action::Right),
        || tiebreak.sign(cell, 0),
    );
    let dy = axis_sign(
        delta(field, here, cell, Action::Up),
        delta(field, here, cell, Action::Down),
        || tiebreak.sign(cell, 1),
    );
    Ok((dx, dy))
}

/// Builds the model input for one configuration.
///
/// `fields[i]` must be the distance field towards `goals[i]`.
pub fn build_features(
    map: &GridMap,
    positions: &[Cell],
    goals: &[Cell],
    fields: &[DistanceField],
    config: &FeatureConfig,
    tiebreak: &TieBreak,
) -> Result<FeatureTensor, FeatureError> {
    if goals.len() != positions.len() {
        return Err(FeatureError::AgentCount {
            expected: positions.len(),
            found: goals.len(),
        });
    }
    let (n, m) = (map.height(), map.width());
    let mut tensor = FeatureTensor::zeros(n, m, NUM_CHANNELS);
    for (i, &blocked) in map.cells().iter().enumerate() {
        if blocked {
            tensor.data[i * NUM_CHANNELS + CH_MAP] = 1.0;
        }
    }
    let scale = if config.normalize_agent_index {
        1.0 / positions.len().max(1) as f32
    } else {
        1.0
    };
    let cost_scale = 1.0 / (n + m) as f32;
    for (agent, (&pos, &goal)) in positions.iter().zip(goals).enumerate() {
        let field = fields
            .get(agent)
            .filter(|f| f.goal() == goal)
            .ok_or(FeatureError::MissingDistanceField(agent))?;
        let index = (agent + 1) as f32 * scale;
        tensor.set(pos.row, pos.col, CH_CURRENT, index);
        tensor.set(goal.row, goal.col, CH_GOAL, index);
        let dist = field.get(pos).ok_or(FeatureError::UnreachableCell(pos))?;
        tensor.set(pos.row, pos.col, CH_COST, dist as f32 * cost_scale);
        let (dx, dy) = gradient_at(field, pos, tiebreak)?;
        tensor.set(pos.row, pos.col, CH_GRAD_X, dx as f32);
        tensor.set(pos.row, pos.col, CH_GRAD_Y, dy as f32);
    }
    Ok(tensor)
}

pub type LabelField = ActionField;

/// Label field of the transition `current -> next`: the executed action at
/// every occupied cell, `Free` elsewhere.
pub fn build_label(map: &GridMap, t: usize, current: &[Cell], next: &[Cell]) -> Result<LabelField, FeatureError> {
    if current.len() != next.len() {
        return Err(FeatureError::AgentCount {
            expected: current.len(),
            found: next.len(),
        });
    }
    let mut field = ActionField::free(t, map.height(), map.width());
    for (agent, (&from, &to)) in current.iter().zip(next).enumerate() {
        let action = Action::between(from, to)
            .filter(|_| map.is_free(from) && map.is_free(to))
            .ok_or(FeatureError::InvalidTransition { agent, from, to })?;
        field.set(from, CellAction::from(action));
    }
    if let Some(c) = detect_collisions(t, current, next).expect("equal lengths").first() {
        let agent = c.agents.0;
        return Err(FeatureError::InvalidTransition {
            agent,
            from: current[agent],
            to: next[agent],
        });
    }
    Ok(field)
}

/// Bottom/right padding applied by [`pad_to_valid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl Padding {
    pub fn for_shape(height: usize, width: usize, multiple: usize) -> Self {
        let multiple = multiple.max(1);
        Padding {
            height,
            width,
            padded_height: height.div_ceil(multiple) * multiple,
            padded_width: width.div_ceil(multiple) * multiple,
        }
    }

    /// Original region of a padded row-major buffer with `channels` values per cell.
    pub fn crop<T: Copy>(&self, data: &[T], channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.height * self.width * channels);
        for r in 0..self.height {
            let start = r * self.padded_width * channels;
            out.extend_from_slice(&data[start..start + self.width * channels]);
        }
        out
    }
}

/// Pads to the next multiple of `multiple` in both dimensions. Padded cells
/// are obstacles with every other channel zero.
pub fn pad_to_valid(tensor: &FeatureTensor, multiple: usize) -> (FeatureTensor, Padding) {
    let (h, w, k) = tensor.shape();
    let pad = Padding::for_shape(h, w, multiple);
    let mut out = FeatureTensor::zeros(pad.padded_height, pad.padded_width, k);
    for r in 0..pad.padded_height {
        for c in 0..pad.padded_width {
            if r < h && c < w {
                for ch in 0..k {
                    out.set(r, c, ch, tensor.get(r, c, ch));
                }
            } else if k > CH_MAP {
                out.set(r, c, CH_MAP, 1.0);
            }
        }
    }
    (out, pad)
}

pub fn crop(tensor: &FeatureTensor, padding: &Padding) -> FeatureTensor {
    FeatureTensor {
        height: padding.height,
        width: padding.width,
        channels: tensor.channels,
        data: padding.crop(&tensor.data, tensor.channels),
    }
}
