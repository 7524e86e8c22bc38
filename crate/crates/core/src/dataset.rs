//! Maze and scenario generation, and supervised dataset export.
//!
//! A dataset directory holds `meta.json` and `samples.bin`. The sample file
//! is a little-endian stream of records:
//!
//! ```text
//! u32 record_len   bytes that follow this field
//! u16 n, u16 m, u16 k
//! f32 features[n * m * k]   row-major, channel-last
//! u8  labels[n * m]         action ids, 255 where no agent stands
//! ```
//!
//! Records are written in `(map, scenario, t)` order, so a file can be
//! sliced per instance with the sample ranges stored in the metadata.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_field::{action_encoding, FREE_ID};
use crate::expert::{self, ExpertConfig, ExpertMethod};
use crate::features::{
    build_features, build_label, splitmix64, stable_hash, FeatureConfig, FeatureError, FeatureTensor, TieBreak,
    CHANNEL_ORDER, NUM_CHANNELS,
};
use crate::grid::{bfs_distance, components, is_connected, parse_map, Action, Cell, GridMap, MapError};
use crate::mapf::{self, Instance, MapfError};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const LOG_FILE: &str = "build.log";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{requested} agents requested but the map has {free} free cells")]
    TooManyAgents { requested: usize, free: usize },
    #[error("sink is full after {written} bytes (limit {limit})")]
    SinkFull { written: u64, limit: u64 },
    #[error("expert failed on {failed} of {total} scenarios, above the allowed rate {threshold}")]
    ExpertFailureRateExceeded { failed: usize, total: usize, threshold: f64 },
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("map {path}: {source}")]
    MapFile { path: PathBuf, source: MapError },
    #[error("malformed sample record at byte {offset}: {reason}")]
    MalformedRecord { offset: u64, reason: String },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Mapf(#[from] MapfError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mixes a seed with a label and indices into an independent seed.
pub fn derive_seed(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ stable_hash(label.as_bytes()));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Random maze with roughly `wall_density * 0.5` obstacle fraction.
///
/// A recursive backtracker carves a perfect maze on the even-coordinate
/// lattice, `braid` is the probability of opening each dead end into a
/// neighboring corridor, and density passes then open or close cells until
/// the obstacle fraction is within 0.01 of the target. The free region is
/// always connected.
///
/// Panics if either side is smaller than 4.
pub fn generate_maze(height: usize, width: usize, wall_density: f64, braid: f64, seed: u64) -> GridMap {
    assert!(height >= 4 && width >= 4, "maze must be at least 4x4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = GridMap::new(height, width, vec![true; height * width]);
    carve_backtracker(&mut map, &mut rng);
    knock_out_dead_ends(&mut map, braid.clamp(0.0, 1.0), &mut rng);
    adjust_density(&mut map, wall_density.clamp(0.0, 1.0) * 0.5, &mut rng);
    map
}

const LATTICE_MOVES: [(isize, isize); 4] = [(-2, 0), (2, 0), (0, -2), (0, 2)];

fn lattice_step(map: &GridMap, cell: Cell, (dr, dc): (isize, isize)) -> Option<Cell> {
    let next = Cell::new(cell.row.checked_add_signed(dr)?, cell.col.checked_add_signed(dc)?);
    map.in_bounds(next).then_some(next)
}

fn midpoint(a: Cell, b: Cell) -> Cell {
    Cell::new((a.row + b.row) / 2, (a.col + b.col) / 2)
}

fn carve_backtracker(map: &mut GridMap, rng: &mut ChaCha8Rng) {
    let start = Cell::new(0, 0);
    map.set_blocked(start, false);
    let mut stack = vec![start];
    while let Some(&cell) = stack.last() {
        let unvisited: Vec<Cell> = LATTICE_MOVES
            .iter()
            .filter_map(|&d| lattice_step(map, cell, d))
            .filter(|&n| map.is_blocked(n))
            .collect();
        match unvisited.choose(rng) {
            Some(&next) => {
                map.set_blocked(midpoint(cell, next), false);
                map.set_blocked(next, false);
                stack.push(next);
            }
            None => {
                stack.pop();
            }
        }
    }
}

fn knock_out_dead_ends(map: &mut GridMap, braid: f64, rng: &mut ChaCha8Rng) {
    if braid <= 0.0 {
        return;
    }
    let lattice: Vec<Cell> = (0..map.height())
        .step_by(2)
        .flat_map(|r| (0..map.width()).step_by(2).map(move |c| Cell::new(r, c)))
        .collect();
    for cell in lattice {
        if map.degree(cell) != 1 || !rng.gen_bool(braid) {
            continue;
        }
        let walls: Vec<Cell> = LATTICE_MOVES
            .iter()
            .filter_map(|&d| lattice_step(map, cell, d))
            .map(|n| midpoint(cell, n))
            .filter(|&w| map.is_blocked(w))
            .collect();
        if let Some(&wall) = walls.choose(rng) {
            map.set_blocked(wall, false);
        }
    }
}

fn has_free_neighbor(map: &GridMap, cell: Cell) -> bool {
    Action::MOVES.iter().any(|&a| map.step_free(cell, a).is_some())
}

fn adjust_density(map: &mut GridMap, target: f64, rng: &mut ChaCha8Rng) {
    let total = map.len() as f64;
    let target_walls = (target * total).round() as usize;
    let walls = |m: &GridMap| m.len() - m.free_count();

    // open walls next to the free region; each opening keeps it connected
    while walls(map) > target_walls {
        let mut candidates: Vec<Cell> = (0..map.len())
            .map(|i| map.cell_at(i))
            .filter(|&c| map.is_blocked(c) && has_free_neighbor(map, c))
            .collect();
        if candidates.is_empty() {
            break;
        }
        candidates.shuffle(rng);
        for cell in candidates {
            if walls(map) <= target_walls {
                break;
            }
            if has_free_neighbor(map, cell) {
                map.set_blocked(cell, false);
            }
        }
    }

    // close free cells whose removal keeps the free region connected
    if walls(map) < target_walls {
        let mut candidates: Vec<Cell> = map.free_cells().collect();
        candidates.shuffle(rng);
        for cell in candidates {
            if walls(map) >= target_walls || map.free_count() <= 2 {
                break;
            }
            map.set_blocked(cell, true);
            if !is_connected(map) {
                map.set_blocked(cell, false);
            }
        }
    }
}

/// Random instance with distinct starts and distinct goals, each goal in the
/// same connected component as its start.
pub fn generate_scenario(
    id: impl Into<String>,
    map: Arc<GridMap>,
    num_agents: usize,
    seed: u64,
) -> Result<Instance, DatasetError> {
    let free: Vec<Cell> = map.free_cells().collect();
    if num_agents > free.len() {
        return Err(DatasetError::TooManyAgents {
            requested: num_agents,
            free: free.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Cell> = free.choose_multiple(&mut rng, num_agents).copied().collect();

    let labels = components(&map);
    let count = labels.iter().flatten().max().map_or(0, |&c| c + 1);
    let mut pools: Vec<Vec<Cell>> = vec![Vec::new(); count];
    for &cell in &free {
        if let Some(c) = labels[map.index(cell)] {
            pools[c].push(cell);
        }
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let goals: Vec<Cell> = starts
        .iter()
        .map(|&s| {
            let c = labels[map.index(s)].expect("start is free");
            pools[c].pop().expect("a component holds at least as many cells as starts")
        })
        .collect();
    Ok(Instance::new(id, map, starts, goals)?)
}

/// How many scenarios to draw per map at a given agent count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub agents: usize,
    pub count: usize,
}

/// Five agent counts with 127 scenarios per map in total.
pub fn full_scale_scenarios() -> Vec<ScenarioRow> {
    [(16, 2), (32, 5), (64, 20), (96, 40), (128, 60)]
        .into_iter()
        .map(|(agents, count)| ScenarioRow { agents, count })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Generated mazes; densities and braid factors are drawn uniformly from
    /// the closed ranges.
    Generate {
        count: usize,
        height: usize,
        width: usize,
        density: (f64, f64),
        braid: (f64, f64),
    },
    /// Map files, relative paths resolved against the recipe's directory.
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub seed: u64,
    pub maps: MapSource,
    pub scenarios: Vec<ScenarioRow>,
    #[serde(default)]
    pub expert: ExpertConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default = "default_max_failure_rate")]
    pub max_failure_rate: f64,
}

fn default_max_failure_rate() -> f64 {
    0.05
}

impl Recipe {
    /// 10 mazes of 16x16 with two scenarios each at 4, 8 and 12 agents.
    pub fn desk(seed: u64) -> Self {
        Recipe {
            seed,
            maps: MapSource::Generate {
                count: 10,
                height: 16,
                width: 16,
                density: (0.3, 0.8),
                braid: (0.0, 0.5),
            },
            scenarios: [4, 8, 12].map(|agents| ScenarioRow { agents, count: 2 }).to_vec(),
            expert: ExpertConfig::default(),
            features: FeatureConfig::default(),
            max_failure_rate: default_max_failure_rate(),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: &str| Err(DatasetError::InvalidRecipe(msg.to_string()));
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return bad("max_failure_rate must be in [0, 1]");
        }
        if self.scenarios.is_empty() {
            return bad("scenario table is empty");
        }
        match &self.maps {
            MapSource::Generate {
                height,
                width,
                density,
                braid,
                ..
            } => {
                if *height < 4 || *width < 4 {
                    return bad("generated maps must be at least 4x4");
                }
                if *height > u16::MAX as usize || *width > u16::MAX as usize {
                    return bad("map dimensions must fit in u16");
                }
                for (name, (lo, hi)) in [("density", density), ("braid", braid)] {
                    if !(0.0 <= *lo && lo <= hi && *hi <= 1.0) {
                        return Err(DatasetError::InvalidRecipe(format!("{name} range must satisfy 0 <= lo <= hi <= 1")));
                    }
                }
            }
            MapSource::Files(paths) => {
                if paths.is_empty() {
                    return bad("map file list is empty");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Generator parameters; absent for maps loaded from files.
    pub seed: Option<u64>,
    pub density: Option<f64>,
    pub braid: Option<f64>,
    pub obstacle_fraction: f64,
    /// Row-major `'.'`/`'#'` layout.
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub map: usize,
    pub seed: u64,
    pub starts: Vec<Cell>,
    pub goals: Vec<Cell>,
    pub soc: u64,
    pub makespan: u64,
    pub method: ExpertMethod,
    /// Index of this instance's first record in `samples.bin`.
    pub first_sample: u64,
    pub num_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub map: usize,
    pub agents: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCounts {
    pub attempted: usize,
    pub solved: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub agent_index_divided_by_count: bool,
    /// Cost-to-goal is BFS distance divided by this expression.
    pub cost_to_goal_divisor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub record_layout: String,
    pub action_encoding: Vec<(String, u8)>,
    pub masked_label: u8,
    pub channel_order: Vec<String>,
    pub k: usize,
    pub normalization: Normalization,
    pub seed: u64,
    /// Key of the gradient tie-break stream: `(seed, instance id, t)`.
    pub tiebreak_seed: u64,
    pub maps: Vec<MapRecord>,
    pub scenario_table: Vec<ScenarioRow>,
    pub scenario_counts: ScenarioCounts,
    pub expert: ExpertConfig,
    pub features: FeatureConfig,
    pub max_failure_rate: f64,
    pub sample_count: u64,
    pub instances: Vec<InstanceRecord>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub instance_id: String,
    pub t: usize,
    pub features: FeatureTensor,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn encode(&self) -> Vec<u8> {
        let (n, m, k) = self.features.shape();
        let body = 6 + n * m * k * 4 + n * m;
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_le_bytes());
        for d in [n, m, k] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.features.to_le_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

/// One decoded record of `samples.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub features: FeatureTensor,
    pub labels: Vec<u8>,
}

/// Streaming reader over `samples.bin` records.
pub struct RecordReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        RecordReader { inner, offset: 0 }
    }

    fn malformed(&self, reason: impl Into<String>) -> DatasetError {
        DatasetError::MalformedRecord {
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn next_record(&mut self) -> Result<Option<Record>, DatasetError> {
        let mut len = [0u8; 4];
        match self.inner.read(&mut len[..1])? {
            0 => return Ok(None),
            _ => self.inner.read_exact(&mut len[1..]).map_err(|_| self.malformed("truncated length"))?,
        }
        let len = u32::from_le_bytes(len) as usize;
        if len < 6 {
            return Err(self.malformed("record shorter than its header"));
        }
        let mut body = vec![0u8; len];
        self.inner.read_exact(&mut body).map_err(|_| self.malformed("truncated record"))?;
        let dim = |i: usize| u16::from_le_bytes([body[2 * i], body[2 * i + 1]]) as usize;
        let (n, m, k) = (dim(0), dim(1), dim(2));
        let feature_bytes = n * m * k * 4;
        if len != 6 + feature_bytes + n * m {
            return Err(self.malformed(format!("length {len} does not match shape ({n}, {m}, {k})")));
        }
        let features = FeatureTensor::from_le_bytes(n, m, k, &body[6..6 + feature_bytes]).expect("length checked");
        let labels = body[6 + feature_bytes..].to_vec();
        self.offset += 4 + len as u64;
        Ok(Some(Record { features, labels }))
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<Record, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, DatasetError> {
    RecordReader::new(io::BufReader::new(File::open(path)?)).collect()
}

pub trait SampleSink {
    fn write(&mut self, sample: &Sample) -> Result<(), DatasetError>;

    fn finish(&mut self) -> Result<(), DatasetError> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub samples: Vec<Sample>,
}

impl SampleSink for MemorySink {
    fn write(&mut self, sample: &Sample) -> Result<(), DatasetError> {
        self.samples.push(sample.clone());
        Ok(())
    }
}

/// Appends encoded records to a file, optionally capped at `max_bytes`.
pub struct FileSink {
    writer: BufWriter<File>,
    written: u64,
    max_bytes: Option<u64>,
}

impl FileSink {
    pub fn create(path: &Path, max_bytes: Option<u64>) -> Result<Self, DatasetError> {
        Ok(FileSink {
            writer: BufWriter::new(File::create(path)?),
            written: 0,
            max_bytes,
        })
    }

    pub fn bytes_written(&self) -> u64 {
        self.written
    }
}

impl SampleSink for FileSink {
    fn write(&mut self, sample: &Sample) -> Result<(), DatasetError> {
        let bytes = sample.encode();
        if let Some(limit) = self.max_bytes {
            if self.written + bytes.len() as u64 > limit {
                return Err(DatasetError::SinkFull {
                    written: self.written,
                    limit,
                });
            }
        }
        self.writer.write_all(&bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    fn finish(&mut self) -> Result<(), DatasetError> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Materializes the recipe's maps. `base_dir` resolves relative map files.
pub fn build_maps(recipe: &Recipe, base_dir: &Path) -> Result<Vec<(MapRecord, Arc<GridMap>)>, DatasetError> {
    let record = |name: String, map: &GridMap, gen: Option<(u64, f64, f64)>| MapRecord {
        name,
        height: map.height(),
        width: map.width(),
        seed: gen.map(|g| g.0),
        density: gen.map(|g| g.1),
        braid: gen.map(|g| g.2),
        obstacle_fraction: map.obstacle_fraction(),
        layout: map.to_compact_string(),
    };
    match &recipe.maps {
        MapSource::Generate {
            count,
            height,
            width,
            density,
            braid,
        } => Ok((0..*count)
            .map(|i| {
                let seed = derive_seed(recipe.seed, "map", &[i as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = rng.gen_range(density.0..=density.1);
                let b = rng.gen_range(braid.0..=braid.1);
                let map = generate_maze(*height, *width, d, b, seed);
                (record(format!("maze-{i:03}"), &map, Some((seed, d, b))), Arc::new(map))
            })
            .collect()),
        MapSource::Files(paths) => paths
            .iter()
            .map(|p| {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let map = parse_map(&std::fs::read(&path)?).map_err(|source| DatasetError::MapFile {
                    path: path.clone(),
                    source,
                })?;
                let name = path.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                Ok((record(name, &map, None), Arc::new(map)))
            })
            .collect(),
    }
}

struct WorkUnit {
    map: usize,
    agents: usize,
    id: String,
    seed: u64,
}

enum UnitResult {
    Solved {
        instance: Instance,
        soc: u64,
        makespan: u64,
        method: ExpertMethod,
        samples: Vec<Sample>,
    },
    Failed(String),
}

/// Samples of one expert-solved instance, one per time step before the makespan.
pub fn instance_samples(
    instance: &Instance,
    solution: &mapf::Solution,
    config: &FeatureConfig,
    seed: u64,
) -> Result<Vec<Sample>, DatasetError> {
    let map = instance.map();
    let fields = instance
        .goals()
        .iter()
        .map(|&g| bfs_distance(map, g))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| DatasetError::MapFile {
            path: PathBuf::from(&instance.id),
            source,
        })?;
    let makespan = mapf::makespan(solution) as usize;
    let mut samples = Vec::with_capacity(makespan);
    let mut current = solution.positions_at(0);
    for t in 0..makespan {
        let next = solution.positions_at(t + 1);
        let tiebreak = TieBreak::new(seed, &instance.id, t);
        let features = build_features(map, &current, instance.goals(), &fields, config, &tiebreak)?;
        let labels = build_label(map, t, &current, &next)?.ids();
        samples.push(Sample {
            instance_id: instance.id.clone(),
            t,
            features,
            labels,
        });
        current = next;
    }
    Ok(samples)
}

fn run_unit(unit: &WorkUnit, map: &Arc<GridMap>, recipe: &Recipe) -> Result<UnitResult, DatasetError> {
    let instance = match generate_scenario(unit.id.clone(), map.clone(), unit.agents, unit.seed) {
        Ok(inst) => inst,
        Err(e @ DatasetError::TooManyAgents { .. }) => return Ok(UnitResult::Failed(e.to_string())),
        Err(e) => return Err(e),
    };
    let run = match expert::solve(&instance, &recipe.expert) {
        Ok(run) => run,
        Err(e) => return Ok(UnitResult::Failed(e.to_string())),
    };
    let report = mapf::validate(&instance, &run.solution);
    if !report.ok {
        return Ok(UnitResult::Failed(format!("expert produced an invalid solution: {:?}", report.violations)));
    }
    let samples = instance_samples(&instance, &run.solution, &recipe.features, recipe.seed)?;
    Ok(UnitResult::Solved {
        soc: mapf::soc(&run.solution),
        makespan: mapf::makespan(&run.solution),
        method: run.method,
        instance,
        samples,
    })
}

/// Solves every scenario of the recipe and streams samples to `sink` in
/// `(map, scenario, t)` order. `jobs` worker threads solve scenarios; output
/// does not depend on it. Each line of `log` describes one scenario.
pub fn build_dataset(
    recipe: &Recipe,
    base_dir: &Path,
    sink: &mut dyn SampleSink,
    jobs: usize,
    log: &mut dyn Write,
) -> Result<DatasetMeta, DatasetError> {
    recipe.validate()?;
    let maps = build_maps(recipe, base_dir)?;
    let mut units = Vec::new();
    for (m, (record, _)) in maps.iter().enumerate() {
        for row in &recipe.scenarios {
            for j in 0..row.count {
                units.push(WorkUnit {
                    map: m,
                    agents: row.agents,
                    id: format!("{}/a{}/s{}", record.name, row.agents, j),
                    seed: derive_seed(recipe.seed, "scenario", &[m as u64, row.agents as u64, j as u64]),
                });
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DatasetError::Io(io::Error::other(e)))?;
    let mut instances = Vec::new();
    let mut failures = Vec::new();
    let mut sample_count = 0u64;
    // bounded batches keep memory flat while emission stays ordered
    for batch in units.chunks(jobs.max(1) * 4) {
        let results: Vec<Result<UnitResult, DatasetError>> =
            pool.install(|| batch.par_iter().map(|u| run_unit(u, &maps[u.map].1, recipe)).collect());
        for (unit, result) in batch.iter().zip(results) {
            match result? {
                UnitResult::Solved {
                    instance,
                    soc,
                    makespan,
                    method,
                    samples,
                } => {
                    for s in &samples {
                        sink.write(s)?;
                    }
                    writeln!(log, "solved {} agents={} soc={soc} makespan={makespan} samples={}", unit.id, unit.agents, samples.len())?;
                    log::debug!("solved {} with {} samples", unit.id, samples.len());
                    instances.push(InstanceRecord {
                        id: unit.id.clone(),
                        map: unit.map,
                        seed: unit.seed,
                        starts: instance.starts().to_vec(),
                        goals: instance.goals().to_vec(),
                        soc,
                        makespan,
                        method,
                        first_sample: sample_count,
                        num_samples: samples.len() as u64,
                    });
                    sample_count += samples.len() as u64;
                }
                UnitResult::Failed(reason) => {
                    writeln!(log, "failed {} agents={}: {reason}", unit.id, unit.agents)?;
                    log::warn!("expert failed on {}: {reason}", unit.id);
                    failures.push(FailureRecord {
                        id: unit.id.clone(),
                        map: unit.map,
                        agents: unit.agents,
                        reason,
                    });
                }
            }
        }
    }
    sink.finish()?;

    let total = units.len();
    if total > 0 && failures.len() as f64 / total as f64 > recipe.max_failure_rate {
        return Err(DatasetError::ExpertFailureRateExceeded {
            failed: failures.len(),
            total,
            threshold: recipe.max_failure_rate,
        });
    }

    Ok(DatasetMeta {
        format_version: FORMAT_VERSION,
        record_layout: "u32 record_len, u16 n, u16 m, u16 k, f32[n*m*k] features (row-major, channel-last), u8[n*m] labels; little-endian".to_string(),
        action_encoding: action_encoding().into_iter().map(|(n, id)| (n.to_string(), id)).collect(),
        masked_label: FREE_ID,
        channel_order: CHANNEL_ORDER.iter().map(|s| s.to_string()).collect(),
        k: NUM_CHANNELS,
        normalization: Normalization {
            agent_index_divided_by_count: recipe.features.normalize_agent_index,
            cost_to_goal_divisor: "height + width".to_string(),
        },
        seed: recipe.seed,
        tiebreak_seed: recipe.seed,
        maps: maps.into_iter().map(|(r, _)| r).collect(),
        scenario_table: recipe.scenarios.clone(),
        scenario_counts: ScenarioCounts {
            attempted: total,
            solved: instances.len(),
            failed: failures.len(),
        },
        expert: recipe.expert.clone(),
        features: recipe.features,
        max_failure_rate: recipe.max_failure_rate,
        sample_count,
        instances,
        failures,
    })
}

/// Writes `samples.bin`, `build.log` and finally `meta.json` into `out_dir`.
pub fn export_dataset(
    recipe: &Recipe,
    base_dir: &Path,
    out_dir: &Path,
    jobs: usize,
    max_bytes: Option<u64>,
) -> Result<DatasetMeta, DatasetError> {
    std::fs::create_dir_all(out_dir)?;
    let mut sink = FileSink::create(&out_dir.join(SAMPLES_FILE), max_bytes)?;
    let mut log = BufWriter::new(File::create(out_dir.join(LOG_FILE))?);
    let result = build_dataset(recipe, base_dir, &mut sink, jobs, &mut log);
    if let Err(e) = &result {
        writeln!(log, "error: {e}")?;
    }
    log.flush()?;
    let meta = result?;
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    std::fs::write(out_dir.join(META_FILE), json)?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta, DatasetError> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join(META_FILE))?)?)
}
