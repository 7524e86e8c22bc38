//! Closed-loop episodes driven through a line-delimited JSON step protocol.
//!
//! The engine sends one `init` message, then one `obs` per step and waits
//! for an `act` reply, and finally an `end` message. Policies either answer
//! with a full action field (`"field"`, `height * width` ids, row-major) or
//! with one action per agent (`"actions"`). A field wins if both are given.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_field::{action_encoding, apply_field, ActionField, CellAction, CollisionMode, FieldError};
use crate::expert::{self, base_priority, pibt_step_salted, update_priorities, ExpertConfig};
use crate::features::{build_features, gradient_at, FeatureConfig, FeatureError, TieBreak, CHANNEL_ORDER, NUM_CHANNELS};
use crate::grid::{bfs_distance, components, Action, Cell, DistanceField, GridMap};
use crate::mapf::{self, detect_collisions, Collision, Instance, Solution};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("protocol violation at step {t}: {detail}")]
    ProtocolViolation { t: usize, detail: String },
    #[error("policy did not answer step {t} within {timeout_ms} ms")]
    PolicyTimeout { t: usize, timeout_ms: u64 },
    #[error("unknown builtin policy {0:?}")]
    UnknownPolicy(String),
    #[error("failed to start policy {command:?}: {source}")]
    Spawn { command: String, source: io::Error },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn violation(t: usize, detail: impl Into<String>) -> SimError {
    SimError::ProtocolViolation { t, detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mapf,
    Lmapf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Select {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitMessage {
    pub protocol_version: u32,
    pub mode: Mode,
    pub height: usize,
    pub width: usize,
    /// Row-major `'.'`/`'#'` layout.
    pub map: String,
    pub num_agents: usize,
    pub k: usize,
    pub channel_order: Vec<String>,
    pub action_encoding: Vec<(String, u8)>,
    /// Whether `obs` messages carry encoded feature tensors.
    pub features: bool,
    pub select: Select,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentObs {
    pub id: usize,
    pub r: usize,
    pub c: usize,
    pub gr: usize,
    pub gc: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsMessage {
    pub t: usize,
    pub agents: Vec<AgentObs>,
    /// Base64 of the little-endian `f32` feature tensor, channel-last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

impl ObsMessage {
    pub fn positions(&self) -> Vec<Cell> {
        self.agents.iter().map(|a| Cell::new(a.r, a.c)).collect()
    }

    pub fn goals(&self) -> Vec<Cell> {
        self.agents.iter().map(|a| Cell::new(a.gr, a.gc)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndMessage {
    pub t: usize,
    pub success: bool,
    pub reason: EndReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EngineMessage {
    Init(InitMessage),
    Obs(ObsMessage),
    End(EndMessage),
}

/// Policy reply. Ids are kept as plain integers so that out-of-range values
/// are reported as protocol violations rather than parse errors.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<i64>>,
}

impl ActMessage {
    pub fn with_actions(t: usize, actions: &[Action]) -> Self {
        ActMessage {
            kind: "act".into(),
            t,
            field: None,
            actions: Some(actions.iter().map(|a| a.id() as i64).collect()),
        }
    }

    pub fn with_field(t: usize, field: &ActionField) -> Self {
        ActMessage {
            kind: "act".into(),
            t,
            field: Some(field.ids().into_iter().map(i64::from).collect()),
            actions: None,
        }
    }

    /// Converts the reply into an action field over the agents' cells.
    pub fn to_field(&self, map: &GridMap, positions: &[Cell], t: usize) -> Result<ActionField, SimError> {
        if self.kind != "act" {
            return Err(violation(t, format!("expected an act message, got type {:?}", self.kind)));
        }
        if self.t != t {
            return Err(violation(t, format!("reply is for step {}", self.t)));
        }
        let to_u8 = |v: i64| u8::try_from(v).map_err(|_| violation(t, format!("action id {v} out of range")));
        if let Some(ids) = &self.field {
            if ids.len() != map.len() {
                return Err(violation(t, format!("field has {} entries, expected {}", ids.len(), map.len())));
            }
            let ids = ids.iter().map(|&v| to_u8(v)).collect::<Result<Vec<_>, _>>()?;
            return ActionField::from_ids(t, map.height(), map.width(), &ids).map_err(|e| violation(t, e.to_string()));
        }
        if let Some(ids) = &self.actions {
            if ids.len() != positions.len() {
                return Err(violation(t, format!("{} actions for {} agents", ids.len(), positions.len())));
            }
            let mut field = ActionField::free(t, map.height(), map.width());
            for (&p, &v) in positions.iter().zip(ids) {
                let action = CellAction::from_id(to_u8(v)?).map_err(|e| violation(t, e.to_string()))?;
                field.set(p, action);
            }
            return Ok(field);
        }
        Err(violation(t, "reply has neither field nor actions"))
    }
}

/// Anything that answers observations with actions.
pub trait Policy {
    fn init(&mut self, msg: &InitMessage) -> Result<(), SimError>;
    fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError>;
    fn end(&mut self, _msg: &EndMessage) {}
}

pub const BUILTIN_POLICIES: [&str; 4] = ["expert_replay", "greedy_gradient", "pibt_step", "random_valid"];

pub fn builtin_policy(name: &str) -> Result<Box<dyn Policy + Send>, SimError> {
    Ok(match name {
        "expert_replay" => Box::new(ExpertReplay::default()),
        "greedy_gradient" => Box::new(GreedyGradient::default()),
        "pibt_step" => Box::new(PibtPolicy::default()),
        "random_valid" => Box::new(RandomValid::default()),
        other => return Err(SimError::UnknownPolicy(other.to_string())),
    })
}

/// `builtin:<name>` or a shell command speaking the protocol on stdio.
pub fn open_policy(source: &str, timeout: Duration) -> Result<Box<dyn Policy + Send>, SimError> {
    match source.strip_prefix("builtin:") {
        Some(name) => builtin_policy(name),
        None => Ok(Box::new(ProcessPolicy::spawn(source, timeout)?)),
    }
}

/// Map and BFS fields shared by the builtin policies.
struct World {
    map: Arc<GridMap>,
    fields: HashMap<Cell, DistanceField>,
}

impl Default for World {
    fn default() -> Self {
        World {
            map: Arc::new(GridMap::open(1, 1)),
            fields: HashMap::new(),
        }
    }
}

impl World {
    fn init(&mut self, msg: &InitMessage) -> Result<(), SimError> {
        let map = GridMap::from_compact_string(msg.height, msg.width, &msg.map).map_err(|e| violation(0, e.to_string()))?;
        self.map = Arc::new(map);
        self.fields.clear();
        Ok(())
    }

    fn check(&self, obs: &ObsMessage) -> Result<(), SimError> {
        for a in &obs.agents {
            for cell in [Cell::new(a.r, a.c), Cell::new(a.gr, a.gc)] {
                if !self.map.is_free(cell) {
                    return Err(violation(obs.t, format!("agent {} references blocked cell {cell}", a.id)));
                }
            }
        }
        Ok(())
    }

    fn field(&mut self, goal: Cell) -> &DistanceField {
        let map = &self.map;
        self.fields
            .entry(goal)
            .or_insert_with(|| bfs_distance(map, goal).expect("goal checked free"))
    }

    fn fields_for(&mut self, goals: &[Cell]) -> Vec<DistanceField> {
        goals.iter().map(|&g| self.field(g).clone()).collect()
    }
}

/// Plays back an expert plan, replanning from the observed state whenever it
/// diverges from the plan or goals change.
#[derive(Default)]
pub struct ExpertReplay {
    world: World,
    seed: u64,
    plan: Option<(usize, Vec<Cell>, Solution)>,
}

impl Policy for ExpertReplay {
    fn init(&mut self, msg: &InitMessage) -> Result<(), SimError> {
        self.seed = msg.seed;
        self.plan = None;
        self.world.init(msg)
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError> {
        self.world.check(obs)?;
        let positions = obs.positions();
        let goals = obs.goals();
        let on_plan = self.plan.as_ref().is_some_and(|(t0, g, sol)| {
            *g == goals && obs.t >= *t0 && sol.positions_at(obs.t - t0) == positions
        });
        if !on_plan {
            let config = ExpertConfig {
                seed: self.seed,
                ..ExpertConfig::default()
            };
            self.plan = Instance::new("replay", self.world.map.clone(), positions.clone(), goals.clone())
                .ok()
                .and_then(|inst| expert::solve(&inst, &config).ok())
                .map(|run| (obs.t, goals, run.solution));
        }
        let actions: Vec<Action> = match &self.plan {
            Some((t0, _, sol)) => positions
                .iter()
                .enumerate()
                .map(|(i, &p)| Action::between(p, sol.position(i, obs.t - t0 + 1)).unwrap_or(Action::Wait))
                .collect(),
            None => vec![Action::Wait; positions.len()],
        };
        Ok(ActMessage::with_actions(obs.t, &actions))
    }
}

/// Follows the cost-to-goal gradient, preferring moves into cells that are
/// not occupied right now.
#[derive(Default)]
pub struct GreedyGradient {
    world: World,
    seed: u64,
}

impl Policy for GreedyGradient {
    fn init(&mut self, msg: &InitMessage) -> Result<(), SimError> {
        self.seed = msg.seed;
        self.world.init(msg)
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError> {
        self.world.check(obs)?;
        let positions = obs.positions();
        let occupied: std::collections::HashSet<Cell> = positions.iter().copied().collect();
        let tiebreak = TieBreak::new(self.seed, "greedy_gradient", obs.t);
        let mut actions = Vec::with_capacity(positions.len());
        for (&pos, goal) in positions.iter().zip(obs.goals()) {
            let field = self.world.field(goal);
            let (dx, dy) = gradient_at(field, pos, &tiebreak).unwrap_or((0, 0));
            let horizontal = match dx {
                1 => Some(Action::Right),
                -1 => Some(Action::Left),
                _ => None,
            };
            let vertical = match dy {
                1 => Some(Action::Down),
                -1 => Some(Action::Up),
                _ => None,
            };
            let mut options: Vec<Action> = [horizontal, vertical].into_iter().flatten().collect();
            if tiebreak.sign(pos, 2) < 0 {
                options.reverse();
            }
            let free_target = options
                .iter()
                .copied()
                .find(|&a| self.world.map.step_free(pos, a).is_some_and(|n| !occupied.contains(&n)));
            actions.push(free_target.unwrap_or(Action::Wait));
        }
        Ok(ActMessage::with_actions(obs.t, &actions))
    }
}

/// One PIBT step per observation with dynamic priorities. Ties between
/// equally close candidates are broken by a hash of the seed and step.
#[derive(Default)]
pub struct PibtPolicy {
    world: World,
    priorities: Vec<f64>,
    seed: u64,
}

impl Policy for PibtPolicy {
    fn init(&mut self, msg: &InitMessage) -> Result<(), SimError> {
        let n = msg.num_agents;
        self.priorities = (0..n).map(|i| base_priority(i, n)).collect();
        self.seed = msg.seed;
        self.world.init(msg)
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError> {
        self.world.check(obs)?;
        let positions = obs.positions();
        let goals = obs.goals();
        if self.priorities.len() != positions.len() {
            return Err(violation(obs.t, "agent count changed"));
        }
        update_priorities(&mut self.priorities, &positions, &goals);
        let fields = self.world.fields_for(&goals);
        let salt = derive_salt(self.seed, obs.t);
        let actions = pibt_step_salted(&self.world.map, &positions, &self.priorities, &fields, Some(salt));
        Ok(ActMessage::with_actions(obs.t, &actions))
    }
}

fn derive_salt(seed: u64, t: usize) -> u64 {
    crate::features::splitmix64(seed ^ crate::features::splitmix64(t as u64))
}

/// Uniform choice among wait and the moves into free cells.
pub struct RandomValid {
    world: World,
    rng: ChaCha8Rng,
}

impl Default for RandomValid {
    fn default() -> Self {
        RandomValid {
            world: World::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for RandomValid {
    fn init(&mut self, msg: &InitMessage) -> Result<(), SimError> {
        self.rng = ChaCha8Rng::seed_from_u64(msg.seed);
        self.world.init(msg)
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError> {
        self.world.check(obs)?;
        let actions: Vec<Action> = obs
            .positions()
            .into_iter()
            .map(|p| {
                let options = self.world.map.neighbors(p).expect("checked free");
                options.choose(&mut self.rng).expect("wait is always an option").0
            })
            .collect();
        Ok(ActMessage::with_actions(obs.t, &actions))
    }
}

/// External policy process started with `sh -c`.
pub struct ProcessPolicy {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
}

impl ProcessPolicy {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, SimError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|source| SimError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ProcessPolicy {
            command: command.to_string(),
            stdin: child.stdin.take(),
            child,
            lines: rx,
            timeout,
        })
    }

    fn send(&mut self, t: usize, msg: &EngineMessage) -> Result<(), SimError> {
        let stdin = self.stdin.as_mut().ok_or_else(|| violation(t, "policy input is closed"))?;
        let mut line = serde_json::to_vec(msg)?;
        line.push(b'\n');
        stdin
            .write_all(&line)
            .and_then(|_| stdin.flush())
            .map_err(|e| violation(t, format!("policy {:?} stopped reading: {e}", self.command)))
    }
}

impl Policy for ProcessPolicy {
    fn init(&mut self, msg: &InitMessage) -> Result<(), SimError> {
        self.send(0, &EngineMessage::Init(msg.clone()))
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError> {
        self.send(obs.t, &EngineMessage::Obs(obs.clone()))?;
        loop {
            let line = match self.lines.recv_timeout(self.timeout) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(SimError::PolicyTimeout {
                        t: obs.t,
                        timeout_ms: self.timeout.as_millis() as u64,
                    })
                }
                Err(RecvTimeoutError::Disconnected) => return Err(violation(obs.t, "policy exited")),
            };
            if line.trim().is_empty() {
                continue;
            }
            return serde_json::from_str(&line).map_err(|e| violation(obs.t, format!("unparseable reply: {e}")));
        }
    }

    fn end(&mut self, msg: &EndMessage) {
        let _ = self.send(msg.t, &EngineMessage::End(msg.clone()));
        self.stdin = None;
    }
}

impl Drop for ProcessPolicy {
    fn drop(&mut self) {
        self.stdin = None;
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs `policy` as a protocol server over the given streams until `end` or EOF.
pub fn serve(policy: &mut dyn Policy, input: impl BufRead, mut output: impl Write) -> Result<(), SimError> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EngineMessage>(&line)? {
            EngineMessage::Init(msg) => policy.init(&msg)?,
            EngineMessage::Obs(obs) => {
                let reply = policy.act(&obs)?;
                serde_json::to_writer(&mut output, &reply)?;
                output.write_all(b"\n")?;
                output.flush()?;
            }
            EngineMessage::End(msg) => {
                policy.end(&msg);
                break;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub mode: Mode,
    /// Defaults to `4 * (height + width)`.
    pub max_steps: Option<usize>,
    pub collision: CollisionMode,
    pub select: Select,
    pub seed: u64,
    /// Seed of the lifelong goal stream.
    pub goal_seed: u64,
    pub send_features: bool,
    pub features: FeatureConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            mode: Mode::Mapf,
            max_steps: None,
            collision: CollisionMode::Strict,
            select: Select::Argmax,
            seed: 0,
            goal_seed: 0,
            send_features: false,
            features: FeatureConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn max_steps_for(&self, map: &GridMap) -> usize {
        self.max_steps.unwrap_or(4 * (map.height() + map.width()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    AllAtGoals,
    MaxSteps,
    /// A strict-mode step proposed a collision.
    Collision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub instance_id: String,
    pub policy: String,
    pub config: EpisodeConfig,
    pub max_steps: usize,
    pub height: usize,
    pub width: usize,
    pub map: String,
    pub starts: Vec<Cell>,
    pub goals: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Action ids found at each agent's cell in the policy's field.
    pub proposed: Vec<u8>,
    /// Action ids actually executed.
    pub applied: Vec<u8>,
    /// Positions after the step.
    pub positions: Vec<Cell>,
    /// Goals after the step, including lifelong reassignments.
    pub goals: Vec<Cell>,
    pub collisions: Vec<Collision>,
    pub invalid_actions: usize,
    /// Agents that reached their goal on this step (lifelong mode).
    pub completions: Vec<usize>,
    pub latency_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub success: bool,
    pub end_reason: EndReason,
    pub steps: usize,
    pub soc: u64,
    pub makespan: u64,
    pub collisions: usize,
    pub invalid_actions: usize,
    pub completions: usize,
    pub throughput: f64,
    pub mean_latency_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub summary: TraceSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
    Summary(TraceSummary),
}

impl EpisodeTrace {
    pub fn num_agents(&self) -> usize {
        self.header.starts.len()
    }

    /// Positions over time, starting with the starts.
    pub fn solution(&self) -> Solution {
        let mut paths: Vec<Vec<Cell>> = self.header.starts.iter().map(|&c| vec![c]).collect();
        for step in &self.steps {
            for (path, &p) in paths.iter_mut().zip(&step.positions) {
                path.push(p);
            }
        }
        Solution::new(paths)
    }

    pub fn map(&self) -> GridMap {
        GridMap::from_compact_string(self.header.height, self.header.width, &self.header.map)
            .expect("trace header holds a valid layout")
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        let mut line = |l: &TraceLine| -> io::Result<()> {
            serde_json::to_writer(&mut out, l)?;
            out.write_all(b"\n")
        };
        line(&TraceLine::Header(self.header.clone()))?;
        for s in &self.steps {
            line(&TraceLine::Step(s.clone()))?;
        }
        line(&TraceLine::Summary(self.summary.clone()))
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, SimError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut summary = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TraceLine>(&line)? {
                TraceLine::Header(h) if header.is_none() => header = Some(h),
                TraceLine::Step(s) if header.is_some() && summary.is_none() => steps.push(s),
                TraceLine::Summary(s) if header.is_some() && summary.is_none() => summary = Some(s),
                _ => return Err(violation(i, format!("trace line {} is out of order", i + 1))),
            }
        }
        match (header, summary) {
            (Some(header), Some(summary)) => Ok(EpisodeTrace { header, steps, summary }),
            _ => Err(violation(0, "trace needs a header and a summary line")),
        }
    }
}

/// Fresh goal for `agent`: uniform over free cells of its component that are
/// not another agent's goal and not its own finished goal.
fn reassign_goal(
    map: &GridMap,
    labels: &[Option<usize>],
    agent: usize,
    position: Cell,
    goals: &[Cell],
    rng: &mut ChaCha8Rng,
) -> Cell {
    let component = labels[map.index(position)];
    let candidates: Vec<Cell> = map
        .free_cells()
        .filter(|&c| labels[map.index(c)] == component && !goals.contains(&c))
        .collect();
    candidates.choose(rng).copied().unwrap_or(goals[agent])
}

pub fn init_message(instance: &Instance, config: &EpisodeConfig) -> InitMessage {
    let map = instance.map();
    InitMessage {
        protocol_version: PROTOCOL_VERSION,
        mode: config.mode,
        height: map.height(),
        width: map.width(),
        map: map.to_compact_string(),
        num_agents: instance.num_agents(),
        k: NUM_CHANNELS,
        channel_order: CHANNEL_ORDER.iter().map(|s| s.to_string()).collect(),
        action_encoding: action_encoding().into_iter().map(|(n, id)| (n.to_string(), id)).collect(),
        features: config.send_features,
        select: config.select,
        seed: config.seed,
    }
}

/// Drives `policy` on `instance` until the episode ends.
///
/// MAPF episodes end when every agent stands on its goal or after
/// `max_steps`. Lifelong episodes always run `max_steps` steps and hand a
/// new goal to each agent that reaches its current one. A strict-mode step
/// with a collision ends the episode as a failure.
pub fn run_episode(
    instance: &Instance,
    policy: &mut dyn Policy,
    policy_name: &str,
    config: &EpisodeConfig,
) -> Result<EpisodeTrace, SimError> {
    let map = instance.map();
    let max_steps = config.max_steps_for(map);
    let n = instance.num_agents();
    let header = TraceHeader {
        instance_id: instance.id.clone(),
        policy: policy_name.to_string(),
        config: config.clone(),
        max_steps,
        height: map.height(),
        width: map.width(),
        map: map.to_compact_string(),
        starts: instance.starts().to_vec(),
        goals: instance.goals().to_vec(),
    };
    policy.init(&init_message(instance, config))?;

    let labels = components(map);
    let mut goal_rng = ChaCha8Rng::seed_from_u64(config.goal_seed);
    let mut fields: HashMap<Cell, DistanceField> = HashMap::new();
    let mut positions = instance.starts().to_vec();
    let mut goals = instance.goals().to_vec();
    let mut steps = Vec::new();
    let at_goals = |p: &[Cell], g: &[Cell]| p == g;

    let mut end_reason = EndReason::MaxSteps;
    for t in 0..max_steps {
        if config.mode == Mode::Mapf && at_goals(&positions, &goals) {
            end_reason = EndReason::AllAtGoals;
            break;
        }
        let features = if config.send_features {
            let goal_fields: Vec<DistanceField> = goals
                .iter()
                .map(|&g| {
                    fields
                        .entry(g)
                        .or_insert_with(|| bfs_distance(map, g).expect("goals are free"))
                        .clone()
                })
                .collect();
            let tiebreak = TieBreak::new(config.seed, &instance.id, t);
            let tensor = build_features(map, &positions, &goals, &goal_fields, &config.features, &tiebreak)?;
            Some(BASE64.encode(tensor.to_le_bytes()))
        } else {
            None
        };
        let obs = ObsMessage {
            t,
            agents: positions
                .iter()
                .zip(&goals)
                .enumerate()
                .map(|(id, (p, g))| AgentObs {
                    id,
                    r: p.row,
                    c: p.col,
                    gr: g.row,
                    gc: g.col,
                })
                .collect(),
            features,
        };
        let started = Instant::now();
        let reply = policy.act(&obs)?;
        let latency_us = started.elapsed().as_micros() as u64;
        let field = reply.to_field(map, &positions, t)?;
        let outcome = apply_field(map, &positions, &field, config.collision)?;
        if config.collision == CollisionMode::Tolerant {
            let residual = detect_collisions(t, &positions, &outcome.positions).expect("equal lengths");
            assert!(residual.is_empty(), "tolerant step left collisions: {residual:?}");
        }
        let strict_collision = config.collision == CollisionMode::Strict && !outcome.collisions.is_empty();
        positions = outcome.positions;

        let mut completions = Vec::new();
        if config.mode == Mode::Lmapf {
            for i in 0..n {
                if positions[i] == goals[i] {
                    completions.push(i);
                    goals[i] = reassign_goal(map, &labels, i, positions[i], &goals, &mut goal_rng);
                }
            }
        }
        steps.push(StepRecord {
            t,
            proposed: positions_ids(&field, &obs.positions()),
            applied: outcome.applied.iter().map(|a| a.id()).collect(),
            positions: positions.clone(),
            goals: goals.clone(),
            collisions: outcome.collisions,
            invalid_actions: outcome.invalid_actions,
            completions,
            latency_us,
        });
        if strict_collision {
            end_reason = EndReason::Collision;
            break;
        }
    }
    if end_reason == EndReason::MaxSteps && config.mode == Mode::Mapf && at_goals(&positions, &goals) {
        end_reason = EndReason::AllAtGoals;
    }

    let success = config.mode == Mode::Mapf && end_reason == EndReason::AllAtGoals;
    let mut trace = EpisodeTrace {
        header,
        steps,
        summary: TraceSummary {
            success,
            end_reason,
            steps: 0,
            soc: 0,
            makespan: 0,
            collisions: 0,
            invalid_actions: 0,
            completions: 0,
            throughput: 0.0,
            mean_latency_us: 0.0,
        },
    };
    trace.summary = summarize(&trace, success, end_reason);
    policy.end(&EndMessage {
        t: trace.steps.len(),
        success,
        reason: end_reason,
    });
    Ok(trace)
}

fn positions_ids(field: &ActionField, positions: &[Cell]) -> Vec<u8> {
    positions.iter().map(|&p| field.get(p).id()).collect()
}

fn summarize(trace: &EpisodeTrace, success: bool, end_reason: EndReason) -> TraceSummary {
    let solution = trace.solution();
    let steps = trace.steps.len();
    let completions: usize = trace.steps.iter().map(|s| s.completions.len()).sum();
    TraceSummary {
        success,
        end_reason,
        steps,
        soc: mapf::soc(&solution),
        makespan: mapf::makespan(&solution),
        collisions: trace.steps.iter().map(|s| s.collisions.len()).sum(),
        invalid_actions: trace.steps.iter().map(|s| s.invalid_actions).sum(),
        completions,
        throughput: if trace.header.config.mode == Mode::Lmapf {
            completions as f64 / trace.header.max_steps.max(1) as f64
        } else {
            0.0
        },
        mean_latency_us: if steps == 0 {
            0.0
        } else {
            trace.steps.iter().map(|s| s.latency_us as f64).sum::<f64>() / steps as f64
        },
    }
}

/// Plays a fixed field sequence, then waits. Useful for exact replays and tests.
pub struct ScriptedPolicy {
    pub fields: Vec<ActionField>,
}

impl Policy for ScriptedPolicy {
    fn init(&mut self, _msg: &InitMessage) -> Result<(), SimError> {
        Ok(())
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError> {
        match self.fields.get(obs.t) {
            Some(f) => Ok(ActMessage::with_field(obs.t, f)),
            None => Ok(ActMessage::with_actions(obs.t, &vec![Action::Wait; obs.agents.len()])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_field::fields_from_solution;
    use crate::dataset::{generate_maze, generate_scenario};
    use crate::features::FeatureTensor;
    use crate::mapf::validate;

    fn c(r: usize, col: usize) -> Cell {
        Cell::new(r, col)
    }

    fn instance(rows: &[&str], starts: Vec<Cell>, goals: Vec<Cell>) -> Instance {
        Instance::new("test", Arc::new(GridMap::from_rows(rows).unwrap()), starts, goals).unwrap()
    }

    #[test]
    fn scripted_replay_matches_expert_soc() {
        let map = Arc::new(generate_maze(12, 12, 0.6, 0.3, 4));
        let inst = generate_scenario("m", map, 6, 9).unwrap();
        let run = expert::solve(&inst, &ExpertConfig::default()).unwrap();
        let fields = fields_from_solution(&inst, &run.solution).unwrap();
        let mut policy = ScriptedPolicy { fields };
        let trace = run_episode(&inst, &mut policy, "scripted", &EpisodeConfig::default()).unwrap();
        assert!(trace.summary.success);
        assert_eq!(trace.summary.soc, mapf::soc(&run.solution));
        assert_eq!(trace.solution().canonical(), run.solution);
    }

    #[test]
    fn all_wait_fails_at_max_steps() {
        let inst = instance(&["...."], vec![c(0, 0)], vec![c(0, 3)]);
        let mut policy = ScriptedPolicy { fields: vec![] };
        let trace = run_episode(&inst, &mut policy, "wait", &EpisodeConfig::default()).unwrap();
        assert!(!trace.summary.success);
        assert_eq!(trace.summary.end_reason, EndReason::MaxSteps);
        assert_eq!(trace.steps.len(), 4 * (1 + 4));
        assert_eq!(trace.summary.collisions, 0);
    }

    #[test]
    fn already_solved_episode_has_no_steps() {
        let inst = instance(&["..."], vec![c(0, 1)], vec![c(0, 1)]);
        let mut policy = builtin_policy("random_valid").unwrap();
        let trace = run_episode(&inst, policy.as_mut(), "r", &EpisodeConfig::default()).unwrap();
        assert!(trace.summary.success);
        assert!(trace.steps.is_empty());
        assert_eq!(trace.summary.soc, 0);
    }

    #[test]
    fn pibt_solves_two_agents_on_open_maps() {
        for h in 2..5 {
            for w in 2..5 {
                let map = Arc::new(GridMap::open(h, w));
                let cells: Vec<Cell> = map.free_cells().collect();
                for s0 in &cells {
                    for s1 in &cells {
                        for g0 in &cells {
                            for g1 in &cells {
                                if s0 == s1 || g0 == g1 {
                                    continue;
                                }
                                let inst = Instance::new("o", map.clone(), vec![*s0, *s1], vec![*g0, *g1]).unwrap();
                                for seed in 0..3 {
                                    let config = EpisodeConfig { seed, ..EpisodeConfig::default() };
                                    let mut policy = builtin_policy("pibt_step").unwrap();
                                    let trace = run_episode(&inst, policy.as_mut(), "pibt", &config).unwrap();
                                    assert!(trace.summary.success, "{h}x{w} {s0} {s1} -> {g0} {g1} seed {seed}");
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn expert_replay_solves_in_strict_mode() {
        for seed in 0..5 {
            let map = Arc::new(generate_maze(16, 16, 0.6, 0.4, seed));
            let inst = generate_scenario(format!("e{seed}"), map, 8, seed).unwrap();
            let mut policy = builtin_policy("expert_replay").unwrap();
            let trace = run_episode(&inst, policy.as_mut(), "builtin:expert_replay", &EpisodeConfig::default()).unwrap();
            assert!(trace.summary.success);
            assert_eq!(trace.summary.collisions, 0);
            assert!(validate(&inst, &trace.solution()).ok);
        }
    }

    #[test]
    fn strict_collision_ends_episode() {
        let inst = instance(&["..."], vec![c(0, 0), c(0, 2)], vec![c(0, 2), c(0, 0)]);
        let field = ActionField::from_agent_actions(0, inst.map(), inst.starts(), &[Action::Right, Action::Left]);
        let mut policy = ScriptedPolicy { fields: vec![field] };
        let trace = run_episode(&inst, &mut policy, "s", &EpisodeConfig::default()).unwrap();
        assert_eq!(trace.summary.end_reason, EndReason::Collision);
        assert_eq!(trace.summary.collisions, 1);
        assert_eq!(trace.steps[0].positions, inst.starts());
    }

    #[test]
    fn tolerant_random_policy_never_overlaps() {
        let map = Arc::new(generate_maze(10, 10, 0.4, 0.5, 2));
        let inst = generate_scenario("r", map.clone(), 20, 3).unwrap();
        let config = EpisodeConfig {
            collision: CollisionMode::Tolerant,
            max_steps: Some(200),
            ..EpisodeConfig::default()
        };
        let mut policy = builtin_policy("random_valid").unwrap();
        let trace = run_episode(&inst, policy.as_mut(), "random", &config).unwrap();
        for step in &trace.steps {
            let mut cells = step.positions.clone();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 20);
            assert_eq!(step.invalid_actions, 0);
        }
    }

    #[test]
    fn lifelong_runs_full_length_and_reassigns_distinct_goals() {
        let map = Arc::new(GridMap::open(6, 6));
        let inst = generate_scenario("l", map, 5, 1).unwrap();
        let config = EpisodeConfig {
            mode: Mode::Lmapf,
            max_steps: Some(60),
            collision: CollisionMode::Tolerant,
            goal_seed: 7,
            ..EpisodeConfig::default()
        };
        let mut policy = builtin_policy("pibt_step").unwrap();
        let trace = run_episode(&inst, policy.as_mut(), "pibt", &config).unwrap();
        assert_eq!(trace.steps.len(), 60);
        assert!(trace.summary.completions > 5);
        assert_eq!(trace.summary.throughput, trace.summary.completions as f64 / 60.0);
        for step in &trace.steps {
            let mut g = step.goals.clone();
            g.sort();
            g.dedup();
            assert_eq!(g.len(), 5);
        }
        let again = run_episode(&inst, builtin_policy("pibt_step").unwrap().as_mut(), "pibt", &config).unwrap();
        assert_eq!(
            again.steps.iter().map(|s| &s.goals).collect::<Vec<_>>(),
            trace.steps.iter().map(|s| &s.goals).collect::<Vec<_>>()
        );
    }

    #[test]
    fn greedy_gradient_walks_a_corridor() {
        let inst = instance(&["#....", ".....", "#...."], vec![c(1, 0)], vec![c(1, 4)]);
        let mut policy = builtin_policy("greedy_gradient").unwrap();
        let trace = run_episode(&inst, policy.as_mut(), "g", &EpisodeConfig::default()).unwrap();
        assert!(trace.summary.success);
        assert_eq!(trace.summary.soc, 4);
    }

    #[test]
    fn reply_conversion() {
        let map = GridMap::open(2, 2);
        let pos = [c(0, 0), c(1, 1)];
        let both = ActMessage {
            kind: "act".into(),
            t: 3,
            field: Some(vec![4, 255, 255, 1]),
            actions: Some(vec![0, 0]),
        };
        let f = both.to_field(&map, &pos, 3).unwrap();
        assert_eq!(f.get(c(0, 0)), CellAction::Right);
        assert_eq!(f.get(c(1, 1)), CellAction::Up);

        let actions = ActMessage::with_actions(3, &[Action::Down, Action::Wait]);
        assert_eq!(actions.to_field(&map, &pos, 3).unwrap().get(c(0, 0)), CellAction::Down);

        let bad = |field: Option<Vec<i64>>, actions: Option<Vec<i64>>, t| {
            let msg = ActMessage {
                kind: "act".into(),
                t,
                field,
                actions,
            };
            matches!(msg.to_field(&map, &pos, 3), Err(SimError::ProtocolViolation { .. }))
        };
        assert!(bad(Some(vec![0, 0, 0]), None, 3));
        assert!(bad(Some(vec![0, 0, 0, 9]), None, 3));
        assert!(bad(Some(vec![0, 0, 0, -1]), None, 3));
        assert!(bad(None, Some(vec![0]), 3));
        assert!(bad(None, Some(vec![0, 0]), 2));
        assert!(bad(None, None, 3));
    }

    #[test]
    fn messages_use_documented_json_shape() {
        let inst = instance(&["..", ".#"], vec![c(0, 0)], vec![c(1, 0)]);
        let config = EpisodeConfig {
            send_features: true,
            ..EpisodeConfig::default()
        };
        let init = serde_json::to_value(EngineMessage::Init(init_message(&inst, &config))).unwrap();
        assert_eq!(init["type"], "init");
        assert_eq!(init["map"], "...#");
        assert_eq!(init["k"], 6);
        assert_eq!(init["features"], true);
        assert_eq!(init["action_encoding"][4], serde_json::json!(["right", 4]));

        let obs: EngineMessage =
            serde_json::from_str(r#"{"type":"obs","t":0,"agents":[{"id":0,"r":0,"c":0,"gr":1,"gc":0}]}"#).unwrap();
        assert!(matches!(obs, EngineMessage::Obs(ObsMessage { features: None, .. })));
        let act: ActMessage = serde_json::from_str(r#"{"type":"act","t":0,"actions":[2]}"#).unwrap();
        assert_eq!(act.actions, Some(vec![2]));
    }

    /// Records the observations it receives.
    struct Recorder(Vec<ObsMessage>);

    impl Policy for Recorder {
        fn init(&mut self, _msg: &InitMessage) -> Result<(), SimError> {
            Ok(())
        }
        fn act(&mut self, obs: &ObsMessage) -> Result<ActMessage, SimError> {
            self.0.push(obs.clone());
            Ok(ActMessage::with_actions(obs.t, &[Action::Down]))
        }
    }

    #[test]
    fn features_are_sent_when_requested() {
        let inst = instance(&["..", ".#"], vec![c(0, 0)], vec![c(1, 0)]);
        let config = EpisodeConfig {
            send_features: true,
            ..EpisodeConfig::default()
        };
        let mut rec = Recorder(Vec::new());
        run_episode(&inst, &mut rec, "rec", &config).unwrap();
        let bytes = BASE64.decode(rec.0[0].features.as_ref().unwrap()).unwrap();
        let tensor = FeatureTensor::from_le_bytes(2, 2, 6, &bytes).unwrap();
        assert_eq!(tensor.get(1, 1, 0), 1.0);
        assert_eq!(tensor.get(0, 0, 1), 1.0);
        assert_eq!(tensor.get(1, 0, 2), 1.0);
        assert_eq!(tensor.get(0, 0, 5), 1.0);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let inst = instance(&["...", "..."], vec![c(0, 0), c(1, 2)], vec![c(1, 2), c(0, 0)]);
        let mut policy = builtin_policy("pibt_step").unwrap();
        let trace = run_episode(&inst, policy.as_mut(), "pibt", &EpisodeConfig::default()).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with(r#"{"kind":"header""#));
        assert_eq!(text.lines().count(), trace.steps.len() + 2);
        assert_eq!(EpisodeTrace::read_jsonl(&buf[..]).unwrap(), trace);
        assert!(EpisodeTrace::read_jsonl(&buf[..buf.len() / 2]).is_err());
    }

    #[test]
    fn serve_loop_answers_each_observation() {
        let inst = instance(&["..."], vec![c(0, 0)], vec![c(0, 2)]);
        let config = EpisodeConfig::default();
        let mut input = String::new();
        input += &serde_json::to_string(&EngineMessage::Init(init_message(&inst, &config))).unwrap();
        input += "\n";
        for t in 0..2 {
            let obs = ObsMessage {
                t,
                agents: vec![AgentObs { id: 0, r: 0, c: t, gr: 0, gc: 2 }],
                features: None,
            };
            input += &serde_json::to_string(&EngineMessage::Obs(obs)).unwrap();
            input += "\n";
        }
        input += r#"{"type":"end","t":2,"success":true,"reason":"all_at_goals"}"#;
        let mut out = Vec::new();
        let mut policy = builtin_policy("expert_replay").unwrap();
        serve(policy.as_mut(), input.as_bytes(), &mut out).unwrap();
        let replies: Vec<ActMessage> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(replies.len(), 2);
        assert_eq!(replies[0].actions, Some(vec![4]));
        assert_eq!(replies[1].t, 1);
    }

    #[test]
    fn process_policy_speaks_protocol() {
        // replies "right" for a single agent on every observation
        let script = r#"while read line; do case "$line" in *'"obs"'*) t=$(echo "$line" | sed 's/.*"t":\([0-9]*\).*/\1/'); echo "{\"type\":\"act\",\"t\":$t,\"actions\":[4]}";; *'"end"'*) exit 0;; esac; done"#;
        let inst = instance(&["...."], vec![c(0, 0)], vec![c(0, 3)]);
        let mut policy = ProcessPolicy::spawn(script, Duration::from_secs(5)).unwrap();
        let trace = run_episode(&inst, &mut policy, script, &EpisodeConfig::default()).unwrap();
        assert!(trace.summary.success);
        assert_eq!(trace.summary.soc, 3);
    }

    #[test]
    fn process_policy_timeout_and_exit() {
        let inst = instance(&["...."], vec![c(0, 0)], vec![c(0, 3)]);
        let mut silent = ProcessPolicy::spawn("cat > /dev/null", Duration::from_millis(100)).unwrap();
        let err = run_episode(&inst, &mut silent, "silent", &EpisodeConfig::default()).unwrap_err();
        assert!(matches!(err, SimError::PolicyTimeout { t: 0, .. }));

        let mut gone = ProcessPolicy::spawn("true", Duration::from_secs(5)).unwrap();
        let err = run_episode(&inst, &mut gone, "gone", &EpisodeConfig::default()).unwrap_err();
        assert!(matches!(err, SimError::ProtocolViolation { .. }));
    }

    #[test]
    fn random_valid_never_moves_into_walls() {
        let map = generate_maze(9, 9, 0.8, 0.0, 1);
        let msg = init_message(
            &Instance::new("x", Arc::new(map.clone()), vec![], vec![]).unwrap(),
            &EpisodeConfig::default(),
        );
        let mut policy = RandomValid::default();
        policy.init(&msg).unwrap();
        let cells: Vec<Cell> = map.free_cells().collect();
        for t in 0..200 {
            let agents = cells
                .iter()
                .map(|p| AgentObs { id: 0, r: p.row, c: p.col, gr: p.row, gc: p.col })
                .collect();
            let reply = policy.act(&ObsMessage { t, agents, features: None }).unwrap();
            for (p, a) in cells.iter().zip(reply.actions.unwrap()) {
                let action = Action::from_id(a as u8).unwrap();
                assert!(map.step_free(*p, action).is_some());
            }
        }
    }
}
