use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use gridflow_core::action_field::CollisionMode;
use gridflow_core::dataset::{self, derive_seed, generate_maze, generate_scenario, DatasetError, Recipe};
use gridflow_core::expert::{self, ExpertConfig, ExpertError, ExpertMethod};
use gridflow_core::features::FeatureConfig;
use gridflow_core::grid::{parse_map, render_map, GridMap, MapError};
use gridflow_core::mapf::{self, instance_from_scen, parse_scen, render_scen, scen_from_instance, Instance, MapfError};
use gridflow_core::metrics::{self, aggregate, assign_performance, EpisodeReport, Grouping, MetricsError};
use gridflow_core::render;
use gridflow_core::sim::{self, open_policy, EpisodeConfig, EpisodeTrace, Mode, Select, SimError};

#[derive(Parser)]
#[command(name = "gridflow", version, about = "Grid multi-agent path finding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate maze maps in MovingAI format.
    GenMaps {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0.6)]
        density: f64,
        #[arg(long, default_value_t = 0.2)]
        braid: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate random scenario files for a map.
    GenScens {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        agents: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the .scen files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a scenario with the expert and validate the result.
    Solve {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scen: PathBuf,
        /// Use only the first N scenario entries.
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 30)]
        restarts: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Solution JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a supervised dataset from a recipe.
    ExportDataset {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Abort when samples.bin would exceed this size.
        #[arg(long)]
        max_bytes: Option<u64>,
    },
    /// Run a policy in closed loop on one or more scenarios.
    Evaluate {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        scen: Vec<PathBuf>,
        #[arg(long)]
        agents: Option<usize>,
        /// `builtin:<name>` or a shell command speaking the step protocol.
        #[arg(long)]
        policy: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Mapf)]
        mode: ModeArg,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = CollisionArg::Strict)]
        collision: CollisionArg,
        #[arg(long, value_enum, default_value_t = SelectArg::Argmax)]
        select: SelectArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        goal_seed: u64,
        /// Send encoded feature tensors with each observation.
        #[arg(long)]
        features: bool,
        #[arg(long)]
        normalize_agent_index: bool,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory for traces and reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure policy latency at increasing agent counts.
    BenchScalability {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scen: PathBuf,
        #[arg(long)]
        policy: String,
        /// Comma-separated increasing agent counts.
        #[arg(long, value_delimiter = ',', required = true)]
        agents: Vec<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize episode traces.
    Aggregate {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_group_agents: bool,
    },
    /// Render a trace as ASCII or SVG frames.
    Render {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Ascii)]
        format: FormatArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve a builtin policy over stdin/stdout.
    #[command(hide = true)]
    ServeBuiltin { name: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mapf,
    Lmapf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CollisionArg {
    Strict,
    Tolerant,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    Argmax,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Ascii,
    Svg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

#[derive(Debug)]
enum CliError {
    ValidationFailed { instance_id: String, violations: usize },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::ValidationFailed { instance_id, violations } => {
                write!(f, "solution for {instance_id} has {violations} violations")
            }
        }
    }
}

impl std::error::Error for CliError {}

/// Name of the first known error variant in the chain.
fn error_kind(e: &anyhow::Error) -> String {
    fn variant(debug: String) -> String {
        debug
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .next()
            .unwrap_or("Error")
            .to_string()
    }
    for cause in e.chain() {
        macro_rules! try_kind {
            ($($t:ty),*) => {$(
                if let Some(err) = cause.downcast_ref::<$t>() {
                    return variant(format!("{err:?}"));
                }
            )*};
        }
        try_kind!(CliError, DatasetError, SimError, ExpertError, MapfError, MapError, MetricsError);
        if cause.downcast_ref::<io::Error>().is_some() {
            return "Io".into();
        }
    }
    "Error".into()
}

fn error_json(e: &anyhow::Error) -> String {
    serde_json::json!({
        "error": {
            "kind": error_kind(e),
            "message": e.to_string(),
            "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        }
    })
    .to_string()
}

fn read_map(path: &Path) -> Result<GridMap> {
    let bytes = fs::read(path).with_context(|| format!("reading map {}", path.display()))?;
    parse_map(&bytes).with_context(|| format!("parsing map {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "unnamed".into(), |s| s.to_string_lossy().into_owned())
}

fn load_instance(map: &Arc<GridMap>, map_path: &Path, scen: &Path, agents: Option<usize>) -> Result<Instance> {
    let text = fs::read_to_string(scen).with_context(|| format!("reading scenario {}", scen.display()))?;
    let entries = parse_scen(&text).with_context(|| format!("parsing scenario {}", scen.display()))?;
    let id = format!("{}/{}", stem(map_path), stem(scen));
    instance_from_scen(id, map.clone(), &entries, agents).with_context(|| format!("building instance from {}", scen.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Map family from a map name: trailing digits and separators are dropped.
fn map_type(name: &str) -> String {
    let trimmed = name.trim_end_matches(|c: char| c.is_ascii_digit() || c == '-' || c == '_');
    if trimmed.is_empty() {
        name.to_string()
    } else {
        trimmed.to_string()
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenMaps {
            count,
            height,
            width,
            density,
            braid,
            seed,
            out_dir,
        } => {
            if height < 4 || width < 4 {
                bail!("maps must be at least 4x4");
            }
            fs::create_dir_all(&out_dir)?;
            for i in 0..count {
                let map = generate_maze(height, width, density, braid, derive_seed(seed, "map", &[i as u64]));
                let path = out_dir.join(format!("maze-{i:03}.map"));
                fs::write(&path, render_map(&map)).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::GenScens {
            map,
            agents,
            count,
            seed,
            out,
        } => {
            let grid = Arc::new(read_map(&map)?);
            let map_name = map
                .file_name()
                .map_or_else(|| "map".into(), |s| s.to_string_lossy().into_owned());
            fs::create_dir_all(&out)?;
            for j in 0..count {
                let name = format!("{}-a{agents}-{j:03}", stem(&map));
                let inst = generate_scenario(&name, grid.clone(), agents, derive_seed(seed, "scen", &[agents as u64, j as u64]))?;
                let path = out.join(format!("{name}.scen"));
                fs::write(&path, render_scen(&scen_from_instance(&inst, &map_name)))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Solve {
            map,
            scen,
            agents,
            timeout_ms,
            restarts,
            seed,
            out,
        } => {
            let grid = Arc::new(read_map(&map)?);
            let inst = load_instance(&grid, &map, &scen, agents)?;
            let config = ExpertConfig {
                timeout_ms,
                max_restarts: restarts,
                seed,
                ..ExpertConfig::default()
            };
            let run = expert::solve(&inst, &config).with_context(|| format!("solving {}", inst.id))?;
            let report = mapf::validate(&inst, &run.solution);
            write_json(
                &out,
                &serde_json::json!({ "instance_id": inst.id, "paths": run.solution.paths }),
            )?;
            #[derive(Serialize)]
            struct SolveReport<'a> {
                instance_id: &'a str,
                num_agents: usize,
                ok: bool,
                violations: &'a [mapf::Violation],
                soc: u64,
                makespan: u64,
                method: ExpertMethod,
                restarts: u32,
            }
            let summary = SolveReport {
                instance_id: &inst.id,
                num_agents: inst.num_agents(),
                ok: report.ok,
                violations: &report.violations,
                soc: mapf::soc(&run.solution),
                makespan: mapf::makespan(&run.solution),
                method: run.method,
                restarts: run.restarts,
            };
            let report_path = out.with_extension("report.json");
            write_json(&report_path, &summary)?;
            println!("{}", serde_json::to_string(&summary)?);
            if !report.ok {
                return Err(CliError::ValidationFailed {
                    instance_id: inst.id.clone(),
                    violations: report.violations.len(),
                }
                .into());
            }
            Ok(())
        }
        Command::ExportDataset {
            recipe,
            out_dir,
            jobs,
            max_bytes,
        } => {
            let text = fs::read_to_string(&recipe).with_context(|| format!("reading recipe {}", recipe.display()))?;
            let parsed: Recipe = serde_json::from_str(&text).with_context(|| format!("parsing recipe {}", recipe.display()))?;
            let base = recipe.parent().unwrap_or(Path::new("."));
            let meta = dataset::export_dataset(&parsed, base, &out_dir, jobs, max_bytes)?;
            println!(
                "{}",
                serde_json::json!({
                    "samples": meta.sample_count,
                    "solved": meta.scenario_counts.solved,
                    "failed": meta.scenario_counts.failed,
                })
            );
            Ok(())
        }
        Command::Evaluate {
            map,
            scen,
            agents,
            policy,
            mode,
            max_steps,
            collision,
            select,
            seed,
            goal_seed,
            features,
            normalize_agent_index,
            timeout_ms,
            jobs,
            out,
        } => {
            let grid = Arc::new(read_map(&map)?);
            let config = EpisodeConfig {
                mode: match mode {
                    ModeArg::Mapf => Mode::Mapf,
                    ModeArg::Lmapf => Mode::Lmapf,
                },
                max_steps,
                collision: match collision {
                    CollisionArg::Strict => CollisionMode::Strict,
                    CollisionArg::Tolerant => CollisionMode::Tolerant,
                },
                select: match select {
                    SelectArg::Argmax => Select::Argmax,
                    SelectArg::Sample => Select::Sample,
                },
                seed,
                goal_seed,
                send_features: features,
                features: FeatureConfig { normalize_agent_index },
            };
            let instances = scen
                .iter()
                .map(|s| load_instance(&grid, &map, s, agents))
                .collect::<Result<Vec<_>>>()?;
            let traces_dir = out.join("traces");
            fs::create_dir_all(&traces_dir)?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
            let timeout = Duration::from_millis(timeout_ms);
            let traces = pool.install(|| {
                instances
                    .par_iter()
                    .map(|inst| -> Result<EpisodeTrace> {
                        let mut p = open_policy(&policy, timeout)?;
                        sim::run_episode(inst, p.as_mut(), &policy, &config).with_context(|| format!("episode {}", inst.id))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let kind = map_type(&stem(&map));
            let mut reports = Vec::new();
            for (trace, s) in traces.iter().zip(&scen) {
                let path = traces_dir.join(format!("{}.jsonl", stem(s)));
                let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?);
                trace.write_jsonl(&mut w)?;
                w.flush()?;
                reports.push(EpisodeReport::from_trace(trace, &kind));
            }
            assign_performance(&mut reports);
            write_json(&out.join("reports.json"), &reports)?;
            let rows = aggregate(&reports, Grouping::default())?;
            write_json(&out.join("summary.json"), &rows)?;
            println!("{}", serde_json::to_string(&rows)?);
            Ok(())
        }
        Command::BenchScalability {
            map,
            scen,
            policy,
            agents,
            max_steps,
            seed,
            timeout_ms,
            out,
        } => {
            let grid = Arc::new(read_map(&map)?);
            let config = EpisodeConfig {
                max_steps,
                seed,
                collision: CollisionMode::Tolerant,
                ..EpisodeConfig::default()
            };
            let mut points = Vec::new();
            for &n in &agents {
                let inst = load_instance(&grid, &map, &scen, Some(n))?;
                let mut p = open_policy(&policy, Duration::from_millis(timeout_ms))?;
                let trace = sim::run_episode(&inst, p.as_mut(), &policy, &config)?;
                let latency = trace.summary.mean_latency_us.max(1.0);
                log::info!("{n} agents: mean latency {latency:.1} us over {} steps", trace.steps.len());
                points.push((n, latency));
            }
            let table = metrics::scalability_table(&points)?;
            write_json(&out, &table)?;
            println!("{}", serde_json::to_string(&table)?);
            Ok(())
        }
        Command::Aggregate {
            traces,
            out,
            no_group_agents,
        } => {
            let mut files = Vec::new();
            collect_traces(&traces, &mut files)?;
            files.sort();
            let mut reports = Vec::new();
            for f in &files {
                let reader = BufReader::new(fs::File::open(f)?);
                let trace = EpisodeTrace::read_jsonl(reader).with_context(|| format!("reading trace {}", f.display()))?;
                let map_name = trace.header.instance_id.split('/').next().unwrap_or("").to_string();
                reports.push(EpisodeReport::from_trace(&trace, &map_type(&map_name)));
            }
            assign_performance(&mut reports);
            let grouping = Grouping {
                agents: !no_group_agents,
                ..Grouping::default()
            };
            let rows = aggregate(&reports, grouping)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("reports.json"), &reports)?;
            write_json(&out.join("summary.json"), &rows)?;
            fs::write(out.join("summary.csv"), metrics::summary_csv(&rows)?)?;
            Ok(())
        }
        Command::Render { trace, format, out_dir } => {
            let reader = BufReader::new(fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?);
            let trace = EpisodeTrace::read_jsonl(reader)?;
            let map = trace.map();
            fs::create_dir_all(&out_dir)?;
            for frame in render::frames(&trace) {
                let (text, ext) = match format {
                    FormatArg::Ascii => (render::ascii_frame(&map, &frame), "txt"),
                    FormatArg::Svg => (render::svg_frame(&map, &frame), "svg"),
                };
                fs::write(out_dir.join(format!("frame_{:04}.{ext}", frame.t)), text)?;
            }
            if let FormatArg::Ascii = format {
                fs::write(out_dir.join("animation.txt"), render::ascii_animation(&trace))?;
            }
            Ok(())
        }
        Command::ServeBuiltin { name } => {
            let mut policy = sim::builtin_policy(&name)?;
            let stdin = io::stdin().lock();
            let stdout = io::stdout().lock();
            sim::serve(policy.as_mut(), stdin, stdout)?;
            Ok(())
        }
    }
}

fn collect_traces(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_traces(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(anyhow!(MetricsError::EmptyGroup(format!("no .jsonl traces under {}", dir.display()))));
    }
    Ok(())
}
