//! Result files. Every CSV starts with a `# config_hash: <hash>` comment
//! line and every JSON document carries a `config_hash` field, so an output
//! can always be traced to the configuration that produced it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::sim::{AggregateRow, RunMetrics, SpeedBin, StepRecord};

/// Column order of the result tables.
pub const AGGREGATE_COLUMNS: [&str; 6] = [
    "case",
    "objective",
    "collision_failures",
    "avg_elapsed_steps",
    "ik_failure_rate",
    "tracking_rate",
];

pub fn write_hash_comment<W: Write>(w: &mut W, config_hash: &str) -> std::io::Result<()> {
    writeln!(w, "# config_hash: {config_hash}")
}

fn csv_writer<W: Write>(mut w: W, config_hash: &str) -> std::io::Result<csv::Writer<W>> {
    write_hash_comment(&mut w, config_hash)?;
    Ok(csv::Writer::from_writer(w))
}

fn finish<W: Write>(w: csv::Writer<W>) -> std::io::Result<()> {
    w.into_inner().map_err(|e| e.into_error())?.flush()
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Reader for files written here: skips the hash comment.
pub fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r)
}

/// Extracts the hash from the first line of a CSV written here.
pub fn read_hash_comment(first_line: &str) -> Option<&str> {
    first_line.trim_end().strip_prefix("# config_hash: ")
}

/// Per-tick records of several runs. Wall-clock columns are optional since
/// they are the only nondeterministic fields.
pub fn write_steps_csv<W: Write>(
    w: W,
    config_hash: &str,
    traces: &[(usize, &[StepRecord])],
    with_times: bool,
) -> std::io::Result<()> {
    let mut out = csv_writer(w, config_hash)?;
    let mut header = vec![
        "run",
        "tick",
        "target_visible",
        "ik_failed",
        "collision",
        "min_obstacle_distance",
        "objective",
        "reachability",
        "plan_degraded",
    ];
    if with_times {
        header.extend(["rasterize_ms", "plan_ms", "ik_ms"]);
    }
    out.write_record(&header)?;
    for (run, records) in traces {
        for r in *records {
            let mut row = vec![
                run.to_string(),
                r.tick.to_string(),
                r.target_visible.to_string(),
                r.ik_failed.to_string(),
                r.collision.to_string(),
                f(r.min_obstacle_distance),
                f(r.objective),
                f(r.reachability),
                r.plan_degraded.to_string(),
            ];
            if with_times {
                row.extend([f(r.times.rasterize_ms), f(r.times.plan_ms), f(r.times.ik_ms)]);
            }
            out.write_record(&row)?;
        }
    }
    finish(out)
}

/// One line per run; obstacle speeds are `;`-separated.
pub fn write_metrics_csv<W: Write>(w: W, config_hash: &str, case: &str, objective: &str, metrics: &[RunMetrics]) -> std::io::Result<()> {
    let mut out = csv_writer(w, config_hash)?;
    out.write_record([
        "case",
        "objective",
        "run",
        "collided",
        "elapsed_ticks",
        "ik_failure_rate",
        "tracking_rate",
        "collision_speed",
        "obstacle_speeds",
    ])?;
    for m in metrics {
        let speeds: Vec<String> = m.obstacle_speeds.iter().map(|s| f(*s)).collect();
        out.write_record([
            case.to_string(),
            objective.to_string(),
            m.run.to_string(),
            m.collided.to_string(),
            m.elapsed_ticks.to_string(),
            f(m.ik_failure_rate),
            f(m.tracking_rate),
            m.collision_speed.map(f).unwrap_or_default(),
            speeds.join(";"),
        ])?;
    }
    finish(out)
}

pub fn write_aggregate_csv<W: Write>(w: W, config_hash: &str, rows: &[AggregateRow]) -> std::io::Result<()> {
    let mut out = csv_writer(w, config_hash)?;
    out.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.case.clone(),
            r.objective.clone(),
            r.collision_failures.to_string(),
            f(r.avg_elapsed_steps),
            f(r.ik_failure_rate),
            f(r.tracking_rate),
        ])?;
    }
    finish(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateDocument {
    pub config_hash: String,
    pub rows: Vec<AggregateRow>,
}

pub fn aggregate_json(config_hash: &str, rows: &[AggregateRow]) -> String {
    let doc = AggregateDocument {
        config_hash: config_hash.to_string(),
        rows: rows.to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("rows serialize")
}

/// Histogram rows, labelled by the case and objective they came from.
pub fn write_histogram_csv<W: Write>(w: W, config_hash: &str, groups: &[(String, String, Vec<SpeedBin>)]) -> std::io::Result<()> {
    let mut out = csv_writer(w, config_hash)?;
    out.write_record(["case", "objective", "speed_lo", "speed_hi", "obstacles", "failures"])?;
    for (case, objective, bins) in groups {
        for b in bins {
            out.write_record([
                case.clone(),
                objective.clone(),
                f(b.lo),
                f(b.hi),
                b.obstacles.to_string(),
                b.failures.to_string(),
            ])?;
        }
    }
    finish(out)
}
