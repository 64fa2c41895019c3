//! Single-process samplers with auxiliary empty features.
//!
//! Each sweep visits observations in index order and reallocates them among
//! the occupied clusters (weight `n_{-i,k} f(x_i | theta_k)`) and `m` empty
//! slots (weight `(alpha / m) f(x_i | theta_j)`). A cluster emptied during
//! the sweep hands its parameter to a uniformly chosen slot, and a slot that
//! receives an observation is refilled from the prior, so the slot pool keeps
//! size `m` throughout and the chain stays exact. After the sweep the occupied
//! parameters are drawn from their conjugate posteriors and the slots are
//! refreshed according to the [`RefreshMode`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::{initial_labels, Initialization};
use crate::metrics::{MetricsSink, Stage};
use crate::model::{sample_posterior_theta, ClusterId, ClusterState, CountDataset, SIMPLEX_TOL};
use crate::numeric::sample_log_categorical;
use crate::proposal::{ProposalContext, ProposalParams};
use crate::slots::{RefreshMode, RefreshStats, SlotPool};
use crate::state::{GlobalState, RunOutput};

/// Unnormalized log allocation weights of one observation: occupied clusters
/// first (`ln n_{-i,k} + ln f`), then empty slots (`ln(alpha / m) + ln f`).
pub fn collapsed_log_weights(
    counts: &[usize],
    ln_f_clusters: &[f64],
    ln_f_slots: &[f64],
    alpha: f64,
    m: usize,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend(
        counts
            .iter()
            .zip(ln_f_clusters)
            .map(|(&n, &lf)| (n as f64).ln() + lf),
    );
    let ln_new = (alpha / m as f64).ln();
    out.extend(ln_f_slots.iter().map(|lf| ln_new + lf));
}

pub struct SerialSampler<'a> {
    data: &'a CountDataset,
    config: ModelConfig,
    mode: RefreshMode,
    rows: Vec<usize>,
    clusters: Vec<ClusterState>,
    assignments: Vec<usize>,
    slots: SlotPool,
    next_id: u64,
    rng: ChaCha8Rng,
    iteration: usize,
    last_refresh: RefreshStats,
    scratch: Vec<f64>,
}

impl<'a> SerialSampler<'a> {
    pub fn new(
        data: &'a CountDataset,
        config: &ModelConfig,
        mode: RefreshMode,
        init: Initialization,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidParameter("training data is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let labels = initial_labels(data, init, &mut rng);
        let k = labels.iter().max().map_or(0, |&l| l + 1);
        let mut clusters = Vec::with_capacity(k);
        for j in 0..k {
            let suffstats = data.suffstats_of((0..data.len()).filter(|&i| labels[i] == j));
            let theta = sample_posterior_theta(&suffstats, config.gamma, &mut rng)?;
            clusters.push(ClusterState {
                id: ClusterId(j as u64),
                theta,
                count: labels.iter().filter(|&&l| l == j).count(),
                suffstats,
            });
        }
        let slots = SlotPool::from_prior(config.m, config.gamma, data.dim(), &mut rng);
        Ok(Self {
            data,
            config: config.clone(),
            mode,
            rows: (0..data.len()).collect(),
            clusters,
            assignments: labels,
            slots,
            next_id: k as u64,
            rng,
            iteration: 0,
            last_refresh: RefreshStats::default(),
            scratch: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn clusters(&self) -> &[ClusterState] {
        &self.clusters
    }

    pub fn slots(&self) -> &SlotPool {
        &self.slots
    }

    pub fn last_refresh(&self) -> RefreshStats {
        self.last_refresh
    }

    /// Index into [`Self::clusters`] of every observation.
    pub fn labels(&self) -> &[usize] {
        &self.assignments
    }

    pub fn assignments(&self) -> Vec<ClusterId> {
        self.assignments
            .iter()
            .map(|&k| self.clusters[k].id)
            .collect()
    }

    pub fn state(&self) -> GlobalState {
        let mut g = GlobalState::from_clusters(self.clusters.clone(), self.config.alpha);
        g.next_id = self.next_id;
        g
    }

    fn unassign(&mut self, i: usize) {
        let k = self.assignments[i];
        self.clusters[k].remove(self.data, i);
        if self.clusters[k].count == 0 {
            let last = self.clusters.len() - 1;
            let emptied = self.clusters.swap_remove(k);
            if k != last {
                for z in self.assignments.iter_mut().filter(|z| **z == last) {
                    *z = k;
                }
            }
            self.slots.absorb(emptied.theta, &mut self.rng);
        }
    }

    fn allocate(&mut self, i: usize) {
        let data = self.data;
        let counts: Vec<usize> = self.clusters.iter().map(|c| c.count).collect();
        let ln_f: Vec<f64> = self
            .clusters
            .iter()
            .map(|c| data.ln_likelihood(i, &c.theta))
            .collect();
        let ln_f_slots: Vec<f64> = self
            .slots
            .thetas()
            .iter()
            .map(|t| data.ln_likelihood(i, t))
            .collect();
        let mut w = std::mem::take(&mut self.scratch);
        collapsed_log_weights(
            &counts,
            &ln_f,
            &ln_f_slots,
            self.config.alpha,
            self.config.m,
            &mut w,
        );
        let choice = sample_log_categorical(&w, &mut self.rng);
        self.scratch = w;
        let k = if choice < self.clusters.len() {
            choice
        } else {
            let theta = self.slots.take(choice - self.clusters.len(), &mut self.rng);
            let id = ClusterId(self.next_id);
            self.next_id += 1;
            self.clusters.push(ClusterState::empty(id, theta));
            self.clusters.len() - 1
        };
        self.clusters[k].add(data, i);
        self.assignments[i] = k;
    }

    /// Reallocates every observation once, in index order.
    pub fn gibbs_sweep(&mut self) {
        for i in 0..self.data.len() {
            self.unassign(i);
            self.allocate(i);
        }
    }

    /// Draws every occupied cluster's parameter from its posterior.
    pub fn resample_thetas(&mut self) {
        for c in self.clusters.iter_mut() {
            c.theta = sample_posterior_theta(&c.suffstats, self.config.gamma, &mut self.rng)
                .expect("gamma validated");
        }
    }

    /// Normalizes the slot pool to `m` entries and gives each a new location.
    pub fn refresh_slots(&mut self, mode: RefreshMode) -> RefreshStats {
        let params = ProposalParams {
            rho: self.config.rho,
            gamma: self.config.gamma,
            smoothing_eps: self.config.smoothing_eps,
        };
        let ln_lik: Vec<f64>;
        let ctx = if mode == RefreshMode::Prior {
            None
        } else {
            ln_lik = self
                .assignments
                .iter()
                .enumerate()
                .map(|(i, &k)| self.data.ln_likelihood(i, &self.clusters[k].theta))
                .collect();
            Some(
                ProposalContext::new(self.data, &self.rows, &ln_lik, params)
                    .expect("rows and likelihoods are aligned"),
            )
        };
        let stats = self
            .slots
            .refresh(self.config.m, mode, ctx.as_ref(), &mut self.rng);
        self.last_refresh = stats;
        stats
    }

    /// One full iteration: allocation sweep, parameter update, slot refresh.
    pub fn sweep(&mut self) {
        self.gibbs_sweep();
        self.resample_thetas();
        self.refresh_slots(self.mode);
        self.iteration += 1;
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        let n = self.data.len();
        let total: usize = self.clusters.iter().map(|c| c.count).sum();
        if total != n {
            return fail(format!("cluster counts sum to {total}, expected {n}"));
        }
        for (k, c) in self.clusters.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| self.assignments[i] == k).collect();
            if c.count == 0 {
                return fail(format!("cluster {} is occupied but empty", c.id));
            }
            if members.len() != c.count {
                return fail(format!("cluster {} count {} != {}", c.id, c.count, members.len()));
            }
            if self.data.suffstats_of(members) != c.suffstats {
                return fail(format!("cluster {} suffstats drifted", c.id));
            }
            check_theta(&c.theta)?;
        }
        if self.slots.len() != self.config.m {
            return fail(format!("{} empty slots, expected {}", self.slots.len(), self.config.m));
        }
        for t in self.slots.thetas() {
            check_theta(t)?;
        }
        Ok(())
    }
}

pub(crate) fn check_theta(t: &crate::model::Theta) -> Result<()> {
    let s: f64 = t.probs().iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL || t.probs().iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Invariant(format!("parameter off the simplex (sum {s})")));
    }
    Ok(())
}

/// Runs `config.total_iters` sweeps (or until the sink's time budget runs
/// out), recording metrics after every sweep.
pub fn run_serial(
    data: &CountDataset,
    config: &ModelConfig,
    mode: RefreshMode,
    init: Initialization,
    mut sink: MetricsSink<'_>,
) -> Result<RunOutput> {
    let mut sampler = SerialSampler::new(data, config, mode, init)?;
    sink.start();
    sink.record(0, Stage::Serial, &sampler.state())?;
    for t in 1..=config.total_iters {
        if sink.out_of_time(t - 1) {
            log::info!("time budget exhausted after {} iterations", t - 1);
            break;
        }
        sampler.sweep();
        sink.record(t, Stage::Serial, &sampler.state())?;
    }
    Ok(RunOutput {
        global: sampler.state(),
        assignments: sampler.assignments(),
        iterations: sampler.iteration(),
        trace: sink.into_trace(),
    })
}
