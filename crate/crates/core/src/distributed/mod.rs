//! Two-stage parallel sampler.
//!
//! `P` workers own disjoint shards of the data and sweep them without
//! talking to each other; every `sync_interval` iterations a master gathers
//! their tallies and new features, redraws the global parameters and
//! broadcasts them back. For the first `accel_iters` iterations workers run
//! the approximate accelerated sweep ([`WorkerState::accel_sweep`]), after
//! which they switch to the exact sweep ([`WorkerState::exact_sweep`]).

mod sync;
mod worker;

pub use sync::{resample_concentration, synchronize, SyncPlan};
pub use worker::{local_cluster_id, Assignment, SyncMessage, WorkerState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::{initial_labels, Initialization};
use crate::metrics::{MetricsSink, Stage};
use crate::model::{ClusterId, ClusterState, CountDataset, Theta, SIMPLEX_TOL};
use crate::state::{GlobalState, RunOutput};

/// How worker sweeps are scheduled on this machine. Results do not depend
/// on the choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    /// Workers run on the rayon pool (sequential when built without the
    /// `parallel` feature).
    #[default]
    Parallel,
    Sequential,
}

/// Uniformly random partition of `0..n` into `p` shards whose sizes differ
/// by at most one. Each shard is sorted.
pub fn shard_data<R: rand::Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if p == 0 {
        return Err(Error::InvalidParameter("at least one worker is required".into()));
    }
    if p > n {
        return Err(Error::InvalidParameter(format!(
            "{p} workers for {n} observations"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (base, extra) = (n / p, n % p);
    let mut shards = Vec::with_capacity(p);
    let mut start = 0;
    for s in 0..p {
        let len = base + usize::from(s < extra);
        let mut shard = idx[start..start + len].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        start += len;
    }
    Ok(shards)
}

fn for_each_worker<F>(workers: &mut [WorkerState], execution: Execution, f: F)
where
    F: Fn(&mut WorkerState) + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            workers.par_iter_mut().for_each(f);
        }
        _ => workers.iter_mut().for_each(f),
    }
}

pub struct DistributedSampler<'a> {
    data: &'a CountDataset,
    config: ModelConfig,
    execution: Execution,
    workers: Vec<WorkerState>,
    global: GlobalState,
    master_rng: ChaCha8Rng,
    iteration: usize,
    last_sync: usize,
}

impl<'a> DistributedSampler<'a> {
    pub fn new(
        data: &'a CountDataset,
        config: &ModelConfig,
        init: Initialization,
        execution: Execution,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidParameter("training data is empty".into()));
        }
        let mut master_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shards = shard_data(data.len(), config.n_workers, &mut master_rng)?;
        let labels = initial_labels(data, init, &mut master_rng);
        let k = labels.iter().max().map_or(0, |&l| l + 1);
        let provisional = GlobalState::from_clusters(
            (0..k)
                .map(|j| ClusterState::empty(ClusterId(j as u64), Theta::uniform(data.dim())))
                .collect(),
            config.alpha,
        );
        let workers = shards
            .into_iter()
            .enumerate()
            .map(|(p, rows)| {
                let shard_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
                WorkerState::new(p, data, rows, &shard_labels, provisional.clone(), config)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sampler = Self {
            data,
            config: config.clone(),
            execution,
            workers,
            global: provisional,
            master_rng,
            iteration: 0,
            last_sync: 0,
        };
        sampler.synchronize()?;
        Ok(sampler)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn global(&self) -> &GlobalState {
        &self.global
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn workers_mut(&mut self) -> &mut [WorkerState] {
        &mut self.workers
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stage the next call to [`Self::step`] will run.
    pub fn next_stage(&self) -> Stage {
        if self.iteration < self.config.accel_iters {
            Stage::Accelerated
        } else {
            Stage::Exact
        }
    }

    /// Gathers messages from every worker (barrier), runs the master update
    /// and broadcasts the result.
    pub fn synchronize(&mut self) -> Result<()> {
        let messages: Vec<SyncMessage> = self.workers.iter().map(WorkerState::message).collect();
        let (global, plan) = synchronize(messages, &self.global, &self.config, &mut self.master_rng)?;
        let data = self.data;
        let errors = std::sync::Mutex::new(Vec::new());
        for_each_worker(&mut self.workers, self.execution, |w| {
            if let Err(e) = w.apply_sync(data, global.clone(), &plan) {
                errors.lock().expect("poisoned").push(e);
            }
        });
        if let Some(e) = errors.into_inner().expect("poisoned").pop() {
            return Err(e);
        }
        self.global = global;
        self.last_sync = self.iteration;
        Ok(())
    }

    /// One iteration on every worker, followed by a synchronization when one
    /// is due (every `sync_interval` iterations, at the end of the
    /// accelerated stage and at the last iteration).
    pub fn step(&mut self) -> Result<Stage> {
        let stage = self.next_stage();
        let data = self.data;
        let config = &self.config;
        match stage {
            Stage::Accelerated => {
                for_each_worker(&mut self.workers, self.execution, |w| w.accel_sweep(data, config))
            }
            _ => for_each_worker(&mut self.workers, self.execution, |w| w.exact_sweep(data, config)),
        }
        self.iteration += 1;
        let t = self.iteration;
        if t % self.config.sync_interval == 0
            || t == self.config.accel_iters
            || t == self.config.total_iters
        {
            self.synchronize()?;
        }
        Ok(stage)
    }

    pub fn synced(&self) -> bool {
        self.last_sync == self.iteration
    }

    /// The current model as seen from all workers, without synchronizing:
    /// instantiated features with their summed local counts, followed by
    /// every worker's new features.
    pub fn snapshot(&self) -> GlobalState {
        let mut clusters: Vec<ClusterState> = self
            .global
            .clusters
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut s = vec![0u64; self.data.dim()];
                let mut count = 0;
                for w in &self.workers {
                    count += w.local_counts()[k];
                    for (a, b) in s.iter_mut().zip(&w.local_suffstats()[k]) {
                        *a += b;
                    }
                }
                ClusterState {
                    id: c.id,
                    theta: c.theta.clone(),
                    count,
                    suffstats: s,
                }
            })
            .collect();
        for w in &self.workers {
            clusters.extend(w.new_features().iter().cloned());
        }
        let mut g = GlobalState::from_clusters(clusters, self.global.alpha);
        g.proposer = self.global.proposer;
        g.next_id = self.global.next_id;
        g
    }

    /// Cluster id of every observation. Only meaningful right after a sync.
    pub fn assignments(&self) -> Result<Vec<ClusterId>> {
        let mut out = vec![ClusterId(0); self.data.len()];
        for w in &self.workers {
            for (&i, a) in w.rows().iter().zip(w.assignments()) {
                out[i] = match *a {
                    Assignment::Global(k) => self.global.clusters[k].id,
                    Assignment::Local(l) => w.new_features()[l].id,
                };
            }
        }
        Ok(out)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        let n = self.data.len();
        let mut seen = vec![false; n];
        for w in &self.workers {
            for &i in w.rows() {
                if i >= n || seen[i] {
                    return fail(format!("row {i} is missing or shared between shards"));
                }
                seen[i] = true;
            }
            w.check_invariants(self.data, self.config.m)?;
            if w.view() != &self.global {
                return fail(format!("worker {} holds a stale broadcast", w.id()));
            }
        }
        if seen.iter().any(|s| !s) {
            return fail("shards do not cover the dataset".into());
        }
        let total: usize = self
            .workers
            .iter()
            .map(|w| {
                w.local_counts().iter().sum::<usize>()
                    + w.new_features().iter().map(|c| c.count).sum::<usize>()
            })
            .sum();
        if total != n {
            return fail(format!("counts sum to {total}, expected {n}"));
        }
        let g = &self.global;
        if g.pi.len() != g.clusters.len() + 1 {
            return fail(format!("{} weights for {} features", g.pi.len(), g.clusters.len()));
        }
        let s: f64 = g.pi.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || g.pi.iter().any(|&p| !(p >= 0.0)) {
            return fail(format!("weights sum to {s}"));
        }
        if g.proposer >= self.config.n_workers {
            return fail(format!("proposer {} out of range", g.proposer));
        }
        for c in &g.clusters {
            crate::serial::check_theta(&c.theta)?;
        }
        if self.synced() {
            let agg: usize = g.clusters.iter().map(|c| c.count).sum();
            if agg != n || g.clusters.iter().any(|c| c.count == 0) {
                return fail("master counts disagree with the workers after sync".into());
            }
            let snap = self.snapshot();
            for (a, b) in snap.clusters.iter().zip(&g.clusters) {
                if a.count != b.count || a.suffstats != b.suffstats {
                    return fail(format!("feature {} tallies differ from the master", a.id));
                }
            }
        }
        Ok(())
    }
}

/// Runs the two-stage sampler for `config.total_iters` iterations (or until
/// the time budget runs out), recording metrics after every iteration. The
/// run always ends on a synchronization so the returned state is complete.
pub fn run_distributed(
    data: &CountDataset,
    config: &ModelConfig,
    init: Initialization,
    execution: Execution,
    mut sink: MetricsSink<'_>,
) -> Result<RunOutput> {
    let mut sampler = DistributedSampler::new(data, config, init, execution)?;
    sink.start();
    sink.record(0, sampler.next_stage(), &sampler.snapshot())?;
    let mut stage = sampler.next_stage();
    for t in 1..=config.total_iters {
        if sink.out_of_time(t - 1) {
            log::info!("time budget exhausted after {} iterations", t - 1);
            break;
        }
        stage = sampler.step()?;
        sink.record(t, stage, &sampler.snapshot())?;
    }
    if !sampler.synced() {
        sampler.synchronize()?;
        sink.record(sampler.iteration(), stage, &sampler.snapshot())?;
    }
    Ok(RunOutput {
        global: sampler.global().clone(),
        assignments: sampler.assignments()?,
        iterations: sampler.iteration(),
        trace: sink.into_trace(),
    })
}
