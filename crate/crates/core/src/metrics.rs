//! Episode metrics and summary tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{EpisodeTrace, Mode};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no best value to compare against")]
    MissingBest,
    #[error("best value is zero")]
    ZeroBest,
    #[error("best SoC {best} is larger than the solved SoC {soc}")]
    BestExceeded { soc: u64, best: u64 },
    #[error("agent counts must increase, got {agents_1} then {agents_2}")]
    OrderViolation { agents_1: usize, agents_2: usize },
    #[error("runtime must be positive and finite, got {0}")]
    InvalidRuntime(f64),
    #[error("nothing to aggregate: {0}")]
    EmptyGroup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Outcome {
    Mapf { solved: bool, soc: u64 },
    Lmapf { throughput: f64 },
}

/// `soc_best / soc` for solved MAPF episodes, 0 for unsolved ones, and
/// `throughput / throughput_best` in lifelong mode.
pub fn performance(outcome: Outcome, best: Option<f64>) -> Result<f64, MetricsError> {
    match outcome {
        Outcome::Mapf { solved: false, .. } => Ok(0.0),
        Outcome::Mapf { solved: true, soc } => {
            let best = best.ok_or(MetricsError::MissingBest)?;
            if best > soc as f64 {
                return Err(MetricsError::BestExceeded { soc, best: best as u64 });
            }
            if soc == 0 {
                return Ok(1.0);
            }
            Ok(best / soc as f64)
        }
        Outcome::Lmapf { throughput } => {
            let best = best.ok_or(MetricsError::MissingBest)?;
            if best <= 0.0 {
                return Err(MetricsError::ZeroBest);
            }
            Ok((throughput / best).clamp(0.0, 1.0))
        }
    }
}

/// `1 - collisions / (agents * episode_length)`, clamped to `[0, 1]`.
/// An empty episode or agent set scores 1.
pub fn coordination(num_collisions: usize, num_agents: usize, episode_length: usize) -> f64 {
    let denom = num_agents as f64 * episode_length as f64;
    if denom == 0.0 {
        return 1.0;
    }
    (1.0 - num_collisions as f64 / denom).clamp(0.0, 1.0)
}

/// `(runtime_1 / runtime_2) / (agents_1 / agents_2)` for `agents_1 < agents_2`.
/// Values above 1 mean runtime grows slower than the agent count.
pub fn scalability(runtime_1: f64, agents_1: usize, runtime_2: f64, agents_2: usize) -> Result<f64, MetricsError> {
    if agents_1 == 0 || agents_1 >= agents_2 {
        return Err(MetricsError::OrderViolation { agents_1, agents_2 });
    }
    for r in [runtime_1, runtime_2] {
        if !(r.is_finite() && r > 0.0) {
            return Err(MetricsError::InvalidRuntime(r));
        }
    }
    Ok((runtime_1 / runtime_2) / (agents_1 as f64 / agents_2 as f64))
}

/// `optimal_soc / single_agent_soc`, so an optimal path scores 1; 0 when no
/// path was found.
pub fn pathfinding(single_agent_soc: u64, optimal_soc: u64, found: bool) -> f64 {
    if !found {
        return 0.0;
    }
    if single_agent_soc == 0 {
        return 1.0;
    }
    (optimal_soc as f64 / single_agent_soc as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub instance_id: String,
    pub algorithm: String,
    pub map_type: String,
    pub mode: Mode,
    pub num_agents: usize,
    pub success: bool,
    pub soc: u64,
    pub makespan: u64,
    pub throughput: f64,
    pub collisions: usize,
    pub episode_length: usize,
    pub coordination: f64,
    pub mean_latency_us: f64,
    /// Best SoC (MAPF) or throughput (lifelong) over the compared algorithms.
    pub best: Option<f64>,
    pub performance: Option<f64>,
}

impl EpisodeReport {
    /// Report of one trace. Performance stays empty until bests are known,
    /// see [`assign_performance`].
    pub fn from_trace(trace: &EpisodeTrace, map_type: &str) -> Self {
        let s = &trace.summary;
        let n = trace.num_agents();
        let episode_length = trace.steps.len();
        EpisodeReport {
            instance_id: trace.header.instance_id.clone(),
            algorithm: trace.header.policy.clone(),
            map_type: map_type.to_string(),
            mode: trace.header.config.mode,
            num_agents: n,
            success: s.success,
            soc: s.soc,
            makespan: s.makespan,
            throughput: s.throughput,
            collisions: s.collisions,
            episode_length,
            coordination: coordination(s.collisions, n, episode_length),
            mean_latency_us: s.mean_latency_us,
            best: None,
            performance: None,
        }
    }

    pub fn outcome(&self) -> Outcome {
        match self.mode {
            Mode::Mapf => Outcome::Mapf {
                solved: self.success,
                soc: self.soc,
            },
            Mode::Lmapf => Outcome::Lmapf {
                throughput: self.throughput,
            },
        }
    }
}

/// Computes bests per `(instance, mode)` over all reports and fills in
/// performance. Lifelong groups where every algorithm has zero throughput
/// get no performance value.
pub fn assign_performance(reports: &mut [EpisodeReport]) {
    let mut bests: BTreeMap<(String, bool), Option<f64>> = BTreeMap::new();
    for r in reports.iter() {
        let key = (r.instance_id.clone(), r.mode == Mode::Mapf);
        let entry = bests.entry(key).or_insert(None);
        let candidate = match r.mode {
            Mode::Mapf if r.success => Some(r.soc as f64),
            Mode::Mapf => None,
            Mode::Lmapf => Some(r.throughput),
        };
        *entry = match (*entry, candidate, r.mode) {
            (None, c, _) => c,
            (b, None, _) => b,
            (Some(b), Some(c), Mode::Mapf) => Some(b.min(c)),
            (Some(b), Some(c), Mode::Lmapf) => Some(b.max(c)),
        };
    }
    for r in reports.iter_mut() {
        let best = bests[&(r.instance_id.clone(), r.mode == Mode::Mapf)];
        r.best = best;
        r.performance = match performance(r.outcome(), best) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("no performance for {} / {}: {e}", r.instance_id, r.algorithm);
                None
            }
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub algorithm: bool,
    pub map_type: bool,
    pub agents: bool,
}

impl Default for Grouping {
    fn default() -> Self {
        Grouping {
            algorithm: true,
            map_type: true,
            agents: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub map_type: String,
    pub num_agents: String,
    pub episodes: usize,
    pub csr: f64,
    /// Means over solved episodes; empty if none was solved.
    pub mean_soc: Option<f64>,
    pub mean_makespan: Option<f64>,
    pub mean_throughput: f64,
    pub mean_performance: Option<f64>,
    pub mean_coordination: f64,
    pub mean_latency_us: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// One row per group, ordered by the group key.
pub fn aggregate(reports: &[EpisodeReport], grouping: Grouping) -> Result<Vec<SummaryRow>, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyGroup("no episode reports".into()));
    }
    let all = || "*".to_string();
    let mut groups: BTreeMap<(String, String, usize), Vec<&EpisodeReport>> = BTreeMap::new();
    for r in reports {
        let key = (
            if grouping.algorithm { r.algorithm.clone() } else { all() },
            if grouping.map_type { r.map_type.clone() } else { all() },
            if grouping.agents { r.num_agents } else { 0 },
        );
        groups.entry(key).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((algorithm, map_type, agents), rs)| {
            let solved = || rs.iter().filter(|r| r.success);
            SummaryRow {
                algorithm,
                map_type,
                num_agents: if grouping.agents { agents.to_string() } else { all() },
                episodes: rs.len(),
                csr: solved().count() as f64 / rs.len() as f64,
                mean_soc: mean(solved().map(|r| r.soc as f64)),
                mean_makespan: mean(solved().map(|r| r.makespan as f64)),
                mean_throughput: mean(rs.iter().map(|r| r.throughput)).unwrap_or(0.0),
                mean_performance: mean(rs.iter().filter_map(|r| r.performance)),
                mean_coordination: mean(rs.iter().map(|r| r.coordination)).unwrap_or(1.0),
                mean_latency_us: mean(rs.iter().map(|r| r.mean_latency_us)).unwrap_or(0.0),
            }
        })
        .collect())
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String, csv::Error> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityRow {
    pub agents_1: usize,
    pub agents_2: usize,
    pub runtime_1: f64,
    pub runtime_2: f64,
    pub scalability: f64,
}

/// Scalability between consecutive agent counts of `(agents, runtime)` points.
pub fn scalability_table(points: &[(usize, f64)]) -> Result<Vec<ScalabilityRow>, MetricsError> {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.0);
    sorted
        .windows(2)
        .map(|w| {
            let ((a1, r1), (a2, r2)) = (w[0], w[1]);
            Ok(ScalabilityRow {
                agents_1: a1,
                agents_2: a2,
                runtime_1: r1,
                runtime_2: r2,
                scalability: scalability(r1, a1, r2, a2)?,
            })
        })
        .collect()
}
