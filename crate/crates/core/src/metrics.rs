//! Held-out predictive log likelihood, feature popularity and run traces.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_marginal_likelihood, ClusterId, CountDataset};
use crate::numeric::log_sum_exp;
use crate::state::GlobalState;

pub const TRACE_HEADER: &str = "iteration,wall_seconds,test_pred_ll,k_plus,stage";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Accelerated,
    Exact,
    Serial,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Accelerated => "accelerated",
            Stage::Exact => "exact",
            Stage::Serial => "serial",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "accelerated" => Ok(Stage::Accelerated),
            "exact" => Ok(Stage::Exact),
            "serial" => Ok(Stage::Serial),
            other => Err(format!("unknown stage '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub wall_seconds: f64,
    pub test_pred_ll: f64,
    pub k_plus: usize,
    pub stage: Stage,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<MetricsRecord>,
}

impl MetricsTrace {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    /// Last record taken no later than `seconds`.
    pub fn at_time(&self, seconds: f64) -> Option<&MetricsRecord> {
        self.records
            .iter()
            .take_while(|r| r.wall_seconds <= seconds)
            .last()
    }

    pub fn validate(&self) -> Result<()> {
        validate_records(&self.records)
    }
}

fn validate_records(records: &[MetricsRecord]) -> Result<()> {
    for (j, w) in records.windows(2).enumerate() {
        if !(w[1].wall_seconds >= w[0].wall_seconds) {
            return Err(Error::Invariant(format!(
                "trace record {} goes back in time ({} < {})",
                j + 1,
                w[1].wall_seconds,
                w[0].wall_seconds
            )));
        }
    }
    Ok(())
}

/// Held-out log likelihood under the single-state posterior predictive:
/// each test row is scored against the mixture with weights
/// `n_k / (N + alpha)` over occupied clusters plus `alpha / (N + alpha)` on
/// the prior predictive.
pub fn predictive_log_likelihood(
    test: &CountDataset,
    global: &GlobalState,
    gamma: f64,
) -> Result<f64> {
    let occupied: Vec<_> = global.clusters.iter().filter(|c| c.count > 0).collect();
    if occupied.is_empty() {
        return Err(Error::InvalidParameter(
            "predictive likelihood needs at least one occupied cluster".into(),
        ));
    }
    if let Some(c) = occupied.iter().find(|c| c.theta.dim() != test.dim()) {
        return Err(Error::DimensionMismatch {
            expected: test.dim(),
            found: c.theta.dim(),
        });
    }
    if !(global.alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must be non-negative, got {}",
            global.alpha
        )));
    }
    let n: usize = occupied.iter().map(|c| c.count).sum();
    let ln_denom = (n as f64 + global.alpha).ln();
    let ln_w: Vec<f64> = occupied
        .iter()
        .map(|c| (c.count as f64).ln() - ln_denom)
        .collect();
    let ln_w0 = global.alpha.ln() - ln_denom;
    let zeros = vec![0u64; test.dim()];

    let score = |i: usize| -> f64 {
        let mut terms: Vec<f64> = occupied
            .iter()
            .zip(&ln_w)
            .map(|(c, w)| w + test.ln_likelihood(i, &c.theta))
            .collect();
        if global.alpha > 0.0 {
            let prior = log_marginal_likelihood(test.row(i), &zeros, gamma)
                .expect("dimensions checked");
            terms.push(ln_w0 + prior);
        }
        // sorted so the value does not depend on cluster order
        terms.sort_by(f64::total_cmp);
        log_sum_exp(&terms)
    };

    let per_row: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..test.len()).into_par_iter().map(score).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..test.len()).map(score).collect()
        }
    };
    Ok(per_row.iter().sum())
}

/// Clusters by descending size, ties broken by ascending id.
pub fn feature_popularity(global: &GlobalState) -> Vec<(ClusterId, usize)> {
    let mut v: Vec<(ClusterId, usize)> = global.clusters.iter().map(|c| (c.id, c.count)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Reals are written with 17 significant digits so they parse back exactly.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_trace<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    validate_records(records)?;
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            fmt_real(r.wall_seconds),
            fmt_real(r.test_pred_ll),
            r.k_plus,
            r.stage
        )?;
    }
    Ok(())
}

pub fn emit_trace(records: &[MetricsRecord], path: &Path) -> Result<()> {
    validate_records(records)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<MetricsTrace> {
    let bad = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (j, line) in reader.lines().enumerate() {
        let line = line?;
        if j == 0 {
            if line != TRACE_HEADER {
                return Err(bad(1, format!("unexpected header '{line}'")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(j + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let e = |m: &dyn fmt::Display| bad(j + 1, m.to_string());
        records.push(MetricsRecord {
            iteration: f[0].parse().map_err(|x| e(&x))?,
            wall_seconds: f[1].parse().map_err(|x| e(&x))?,
            test_pred_ll: f[2].parse().map_err(|x| e(&x))?,
            k_plus: f[3].parse().map_err(|x| e(&x))?,
            stage: f[4].parse().map_err(|x: String| e(&x))?,
        });
    }
    let trace = MetricsTrace { records };
    trace.validate()?;
    Ok(trace)
}

/// Time source for traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clock {
    /// Seconds since sampler start, excluding time spent evaluating metrics.
    Wall,
    /// The iteration counter stands in for seconds, making traces
    /// reproducible bit for bit.
    Logical,
}

/// Collects one record per iteration and enforces the time budget.
pub struct MetricsSink<'a> {
    test: Option<&'a CountDataset>,
    gamma: f64,
    clock: Clock,
    max_seconds: Option<f64>,
    started: Option<Instant>,
    paused: Duration,
    trace: MetricsTrace,
}

impl<'a> MetricsSink<'a> {
    pub fn new(test: Option<&'a CountDataset>, gamma: f64, clock: Clock) -> Self {
        Self {
            test,
            gamma,
            clock,
            max_seconds: None,
            started: None,
            paused: Duration::ZERO,
            trace: MetricsTrace::default(),
        }
    }

    pub fn with_time_limit(mut self, seconds: Option<f64>) -> Self {
        self.max_seconds = seconds;
        self
    }

    /// Starts the clock; called by the samplers once setup is done.
    pub fn start(&mut self) {
        self.started = Some(Instant::now());
        self.paused = Duration::ZERO;
    }

    pub fn elapsed(&self, iteration: usize) -> f64 {
        match self.clock {
            Clock::Logical => iteration as f64,
            Clock::Wall => self
                .started
                .map(|t| t.elapsed().saturating_sub(self.paused).as_secs_f64())
                .unwrap_or(0.0),
        }
    }

    pub fn out_of_time(&self, iteration: usize) -> bool {
        self.max_seconds
            .is_some_and(|limit| self.elapsed(iteration) >= limit)
    }

    pub fn record(&mut self, iteration: usize, stage: Stage, global: &GlobalState) -> Result<()> {
        let wall_seconds = self.elapsed(iteration);
        let t0 = Instant::now();
        let test_pred_ll = match self.test {
            Some(test) if !test.is_empty() => predictive_log_likelihood(test, global, self.gamma)?,
            _ => f64::NAN,
        };
        self.paused += t0.elapsed();
        self.trace.records.push(MetricsRecord {
            iteration,
            wall_seconds,
            test_pred_ll,
            k_plus: global.k_plus(),
            stage,
        });
        Ok(())
    }

    pub fn trace(&self) -> &MetricsTrace {
        &self.trace
    }

    pub fn into_trace(self) -> MetricsTrace {
        self.trace
    }
}
