//! `reachtrack` command-line front end.
//!
//! Failures print a single `error[<class>]: <message>` line on stderr and exit
//! with status 1 (2 for command-line usage errors).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use reachtrack::config::LoadedConfig;
use reachtrack::exec::Execution;
use reachtrack::planner::TermMask;
use reachtrack::reachability::{build_map, ReachabilityMap};
use reachtrack::report;
use reachtrack::sim::{
    self, ablation_cases, ablation_configs, case_by_label, speed_histogram, CaseResult, SimContext, SimState,
};
use reachtrack::world::save_grid_dump;
use reachtrack::{timing, Error};

type Result<T> = std::result::Result<T, Error>;

/// Visual tracking with occlusion, collision and reachability terms:
/// reachability maps, scenario runs, ablations and stage timings.
#[derive(Debug, Parser)]
#[command(name = "reachtrack", version)]
struct Cli {
    /// Configuration file (JSON). Without it the built-in `paper-table1`
    /// profile is used.
    #[arg(long, short, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for result files; created if missing.
    #[arg(long, short, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Run everything on the calling thread instead of the worker pool.
    /// Results are identical either way.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the reachability map offline and write it with a build report.
    BuildMap(BuildMapArgs),
    /// Run one scenario case with one objective configuration.
    Run(RunArgs),
    /// Run the objective configurations across all five scenario cases.
    Ablate(AblateArgs),
    /// Time the plan, IK and rasterize stages on representative states.
    Bench(BenchArgs),
    /// Export a horizontal reachability slice, and optionally an occupancy
    /// grid dump.
    ExportSlice(ExportSliceArgs),
}

#[derive(Debug, Args)]
struct MapArg {
    /// Reachability map file; defaults to the config's `map.path`.
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Override the scenario RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of runs per case.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Debug, Args)]
struct BuildMapArgs {
    #[command(flatten)]
    map: MapArg,
    /// Override the orientation sample seed of the map build.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    map: MapArg,
    #[command(flatten)]
    overrides: Overrides,
    /// Scenario case: s1-0obs, s1-1obs, s1-2obs, s2-stop or s2-move.
    /// Defaults to the config's scenario.
    #[arg(long)]
    case: Option<String>,
    /// Objective terms joined by `+`, e.g. `occl+col+reach`; the tracking
    /// term is always on. Defaults to the config's `scenario.terms`.
    #[arg(long, value_name = "TERMS")]
    ablation: Option<String>,
    /// Also write every tick to `steps.csv`.
    #[arg(long)]
    traces: bool,
    /// Include per-stage wall times in `steps.csv` (not reproducible).
    #[arg(long, requires = "traces")]
    timing: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    map: MapArg,
    #[command(flatten)]
    overrides: Overrides,
    /// Objective configuration to include; repeat for several. Defaults to
    /// occl, occl+col, occl+reach and occl+col+reach.
    #[arg(long, value_name = "TERMS")]
    ablation: Vec<String>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    map: MapArg,
    /// Timed ticks per stage; defaults to the config's `bench.samples`.
    #[arg(long)]
    samples: Option<usize>,
    /// Override the seed of the benchmark scenes.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ExportSliceArgs {
    #[command(flatten)]
    map: MapArg,
    /// Height of the slice (m); the nearest cell layer is written.
    #[arg(long, allow_hyphen_values = true)]
    z: f64,
    /// Also dump the occupancy grid of run 0 of the configured scenario
    /// after this many ticks.
    #[arg(long, value_name = "TICK")]
    grid_tick: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut loaded = LoadedConfig::load(cli.config.as_deref())?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match &cli.command {
        Command::BuildMap(a) => {
            if let Some(s) = a.seed {
                loaded.config.map.build.seed = s;
            }
            cmd_build_map(&loaded, a.map.map.as_deref(), &cli.out, exec)
        }
        Command::Run(a) => {
            apply_overrides(&mut loaded, &a.overrides);
            if let Some(t) = &a.ablation {
                loaded.config.scenario.terms = TermMask::parse(t)?;
            }
            if let Some(c) = &a.case {
                let terms = loaded.config.scenario.terms;
                loaded.config.scenario = case_by_label(&loaded.config.scenario, c)?.with_terms(terms);
            }
            cmd_run(&loaded, a, &cli.out, exec)
        }
        Command::Ablate(a) => {
            apply_overrides(&mut loaded, &a.overrides);
            let masks = if a.ablation.is_empty() {
                ablation_configs().to_vec()
            } else {
                a.ablation.iter().map(|s| TermMask::parse(s)).collect::<Result<_>>()?
            };
            cmd_ablate(&loaded, a.map.map.as_deref(), &masks, &cli.out, exec)
        }
        Command::Bench(a) => {
            if let Some(s) = a.samples {
                loaded.config.bench.samples = s;
            }
            if let Some(s) = a.seed {
                loaded.config.bench.seed = s;
            }
            cmd_bench(&loaded, a.map.map.as_deref(), &cli.out)
        }
        Command::ExportSlice(a) => cmd_export_slice(&loaded, a, &cli.out),
    }
}

fn apply_overrides(loaded: &mut LoadedConfig, o: &Overrides) {
    if let Some(s) = o.seed {
        loaded.config.scenario.seed = s;
    }
    if let Some(r) = o.runs {
        loaded.config.scenario.runs = r;
    }
}

fn validate(loaded: &LoadedConfig) -> Result<()> {
    loaded.config.scenario.validate()?;
    Ok(())
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn map_path(loaded: &LoadedConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| loaded.map_path())
}

/// Loads the map when any of `masks` needs it; a missing file is reported
/// as such so the user knows to build it first.
fn load_map(loaded: &LoadedConfig, flag: Option<&Path>, needed: bool) -> Result<Option<ReachabilityMap>> {
    if !needed {
        return Ok(None);
    }
    let path = map_path(loaded, flag);
    if !path.exists() {
        return Err(Error::MissingMap);
    }
    Ok(Some(ReachabilityMap::load_for_chain(&path, &loaded.chain)?))
}

fn context<'a>(loaded: &'a LoadedConfig, map: Option<&'a ReachabilityMap>) -> SimContext<'a> {
    SimContext {
        chain: &loaded.chain,
        grid: loaded.config.grid,
        planner: loaded.config.planner,
        ik: loaded.config.ik,
        map,
    }
}

fn cmd_build_map(loaded: &LoadedConfig, flag: Option<&Path>, out: &Path, exec: Execution) -> Result<()> {
    let path = map_path(loaded, flag);
    let hash = loaded.hash();
    let build = &loaded.config.map.build;
    let t = Instant::now();
    let mut map = build_map(&loaded.chain, build, &loaded.config.ik, exec)?;
    let secs = t.elapsed().as_secs_f64();
    map.set_config_hash(&hash);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    map.save(&path)?;

    out_dir(out)?;
    let scores = map.scores();
    let report = serde_json::json!({
        "config_hash": hash,
        "map": path,
        "cells": scores.len(),
        "dims": map.grid().dims,
        "orientations": build.orientations,
        "restarts": build.restarts,
        "seed": build.seed,
        "nonzero_cells": scores.iter().filter(|s| **s > 0.0).count(),
        "mean_score": scores.iter().sum::<f64>() / scores.len().max(1) as f64,
        "wall_time_s": secs,
    });
    let report_path = out.join("build_report.json");
    write_file(&report_path, |w| writeln!(w, "{report:#}"))?;
    println!(
        "wrote {} ({} cells, {} orientations, {secs:.1} s)",
        path.display(),
        scores.len(),
        build.orientations
    );
    Ok(())
}

fn histogram_group(r: &CaseResult, spec: &sim::ScenarioSpec) -> (String, String, Vec<sim::SpeedBin>) {
    (
        r.aggregate.case.clone(),
        r.aggregate.objective.clone(),
        speed_histogram(&r.metrics, spec.obstacle_speed, 4),
    )
}

fn cmd_run(loaded: &LoadedConfig, a: &RunArgs, out: &Path, exec: Execution) -> Result<()> {
    validate(loaded)?;
    let spec = &loaded.config.scenario;
    let map = load_map(loaded, a.map.map.as_deref(), spec.terms.reach)?;
    let ctx = context(loaded, map.as_ref());
    let hash = loaded.hash();
    let r = sim::run(&ctx, spec, exec, a.traces)?;

    out_dir(out)?;
    let rows = [r.aggregate.clone()];
    write_file(&out.join("aggregate.csv"), |w| report::write_aggregate_csv(w, &hash, &rows))?;
    write_file(&out.join("aggregate.json"), |w| writeln!(w, "{}", report::aggregate_json(&hash, &rows)))?;
    write_file(&out.join("runs.csv"), |w| {
        report::write_metrics_csv(w, &hash, &r.aggregate.case, &r.aggregate.objective, &r.metrics)
    })?;
    let groups = [histogram_group(&r, spec)];
    write_file(&out.join("histogram.csv"), |w| report::write_histogram_csv(w, &hash, &groups))?;
    if let Some(traces) = &r.traces {
        let t: Vec<(usize, &[sim::StepRecord])> = traces.iter().enumerate().map(|(i, t)| (i, t.as_slice())).collect();
        write_file(&out.join("steps.csv"), |w| report::write_steps_csv(w, &hash, &t, a.timing))?;
    }
    print_rows(&rows);
    Ok(())
}

fn cmd_ablate(loaded: &LoadedConfig, flag: Option<&Path>, masks: &[TermMask], out: &Path, exec: Execution) -> Result<()> {
    validate(loaded)?;
    let map = load_map(loaded, flag, masks.iter().any(|m| m.reach))?;
    let ctx = context(loaded, map.as_ref());
    let hash = loaded.hash();
    out_dir(out)?;

    let mut rows = Vec::new();
    let mut groups = Vec::new();
    let mut per_run = create(&out.join("ablation_runs.csv"))?;
    let mut first = true;
    for case in ablation_cases(&loaded.config.scenario) {
        for &m in masks {
            let spec = case.clone().with_terms(m);
            let r = sim::run(&ctx, &spec, exec, false)?;
            // One header for the whole file: later blocks drop theirs.
            let mut buf = Vec::new();
            report::write_metrics_csv(&mut buf, &hash, &r.aggregate.case, &r.aggregate.objective, &r.metrics)
                .map_err(|e| Error::io(out.join("ablation_runs.csv"), e))?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            let body: String = if first {
                text
            } else {
                text.lines().skip(2).map(|l| format!("{l}\n")).collect()
            };
            first = false;
            per_run
                .write_all(body.as_bytes())
                .map_err(|e| Error::io(out.join("ablation_runs.csv"), e))?;
            groups.push(histogram_group(&r, &spec));
            rows.push(r.aggregate);
        }
    }
    per_run.flush().map_err(|e| Error::io(out.join("ablation_runs.csv"), e))?;
    write_file(&out.join("ablation.csv"), |w| report::write_aggregate_csv(w, &hash, &rows))?;
    write_file(&out.join("ablation.json"), |w| writeln!(w, "{}", report::aggregate_json(&hash, &rows)))?;
    write_file(&out.join("histogram.csv"), |w| report::write_histogram_csv(w, &hash, &groups))?;
    print_rows(&rows);
    Ok(())
}

fn print_rows(rows: &[sim::AggregateRow]) {
    println!(
        "{:<8} {:<22} {:>8} {:>8} {:>8} {:>8}",
        "case", "objective", "failures", "elapsed", "ik_fail", "tracking"
    );
    for r in rows {
        println!(
            "{:<8} {:<22} {:>8} {:>8.2} {:>8.3} {:>8.3}",
            r.case, r.objective, r.collision_failures, r.avg_elapsed_steps, r.ik_failure_rate, r.tracking_rate
        );
    }
}

fn cmd_bench(loaded: &LoadedConfig, flag: Option<&Path>, out: &Path) -> Result<()> {
    let map = load_map(loaded, flag, true)?;
    let ctx = context(loaded, map.as_ref());
    let hash = loaded.hash();
    let b = loaded.config.bench;
    let rep = timing::measure(&ctx, b.samples, b.seed, &hash)?;
    out_dir(out)?;
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    write_file(&out.join("bench.json"), |w| writeln!(w, "{json}"))?;
    println!("{:<10} {:>8} {:>10} {:>10} {:>10}", "stage", "samples", "median_ms", "p95_ms", "max_ms");
    for s in &rep.stages {
        println!(
            "{:<10} {:>8} {:>10.3} {:>10.3} {:>10.3}",
            s.stage, s.samples, s.median_ms, s.p95_ms, s.max_ms
        );
    }
    Ok(())
}

fn cmd_export_slice(loaded: &LoadedConfig, a: &ExportSliceArgs, out: &Path) -> Result<()> {
    let map = load_map(loaded, a.map.map.as_deref(), true)?.expect("map requested");
    let hash = loaded.hash();
    out_dir(out)?;
    let slice = out.join(format!("slice_z{}.csv", a.z));
    write_file(&slice, |w| map.write_slice_csv(a.z, &hash, w))?;
    println!("wrote {}", slice.display());

    if let Some(tick) = a.grid_tick {
        validate(loaded)?;
        let spec = &loaded.config.scenario;
        let ctx = context(loaded, spec.terms.reach.then_some(&map));
        sim::check_context(&ctx, spec)?;
        let mut state = SimState::new(sim::setup_run(&ctx, spec, 0)?);
        while state.tick < tick.min(spec.horizon) && !state.terminated {
            state.step(&ctx, spec)?;
        }
        let grid = state.occupancy(&ctx, spec)?;
        let path = out.join(format!("grid_tick{}.bin", state.tick));
        save_grid_dump(&grid, &hash, &path)?;
        println!("wrote {} ({} occupied cells)", path.display(), grid.occupied_count());
    }
    Ok(())
}
