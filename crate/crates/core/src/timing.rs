//! Stage timing on representative states: ticks of full-objective runs in
//! the two-obstacle crossing scenario, executed sequentially.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::planner::TermMask;
use crate::sim::{check_context, simulate_run, ScenarioSpec, SimContext};

pub const STAGES: [&str; 3] = ["plan_step", "ik_solve", "rasterize"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub samples: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub config_hash: String,
    pub stages: Vec<StageStats>,
}

impl TimingReport {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Nearest-rank percentile of an ascending slice, `p` in [0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Median that averages the two middle values for even lengths.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

pub fn stats(stage: &str, mut xs: Vec<f64>) -> StageStats {
    xs.sort_by(f64::total_cmp);
    StageStats {
        stage: stage.to_string(),
        samples: xs.len(),
        median_ms: median(&xs),
        p95_ms: percentile(&xs, 0.95),
        max_ms: xs.last().copied().unwrap_or(f64::NAN),
    }
}

/// Times at least `samples` ticks of each stage.
pub fn measure(ctx: &SimContext, samples: usize, seed: u64, config_hash: &str) -> Result<TimingReport> {
    let terms = if ctx.map.is_some() {
        TermMask::ALL
    } else {
        TermMask { reach: false, ..TermMask::ALL }
    };
    let spec = ScenarioSpec {
        seed,
        ..ScenarioSpec::scenario1(2)
    }
    .with_terms(terms);
    check_context(ctx, &spec)?;
    let (mut plan, mut ik, mut raster) = (Vec::new(), Vec::new(), Vec::new());
    let mut run = 0;
    while plan.len() < samples.max(1) {
        let (_, records) = simulate_run(ctx, &spec, run)?;
        for r in records {
            plan.push(r.times.plan_ms);
            ik.push(r.times.ik_ms);
            raster.push(r.times.rasterize_ms);
        }
        run += 1;
    }
    Ok(TimingReport {
        config_hash: config_hash.to_string(),
        stages: vec![stats(STAGES[0], plan), stats(STAGES[1], ik), stats(STAGES[2], raster)],
    })
}
