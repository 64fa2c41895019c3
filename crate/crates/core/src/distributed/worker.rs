use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{sample_posterior_theta, ClusterId, ClusterState, CountDataset};
use crate::numeric::sample_log_categorical;
use crate::proposal::{ProposalContext, ProposalParams};
use crate::slots::{RefreshMode, SlotPool};
use crate::state::GlobalState;

use super::sync::SyncPlan;

/// Where a shard observation currently lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Index into the broadcast list of instantiated features.
    Global(usize),
    /// Index into this worker's features created since the last sync.
    Local(usize),
}

/// Ids of worker-local features carry the worker index in their upper bits
/// until the master renumbers them.
pub fn local_cluster_id(worker: usize, seq: u64) -> ClusterId {
    ClusterId((1 << 63) | ((worker as u64) << 40) | seq)
}

/// What a worker ships to the master at a synchronization step.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncMessage {
    pub worker_id: usize,
    /// Local occupancy of every instantiated feature, in broadcast order.
    pub counts: Vec<usize>,
    pub suffstats: Vec<Vec<u64>>,
    /// Features created on this worker since the last sync.
    pub new_features: Vec<ClusterState>,
}

/// One worker: a shard of the data, local tallies for the instantiated
/// features, its own new features and empty slots, and its copy of the
/// last broadcast.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerState {
    id: usize,
    rows: Vec<usize>,
    z: Vec<Assignment>,
    counts: Vec<usize>,
    suffstats: Vec<Vec<u64>>,
    locals: Vec<ClusterState>,
    next_local: u64,
    slots: SlotPool,
    view: GlobalState,
    rng: ChaCha8Rng,
}

/// Independent generator stream for worker `id` (the master uses stream 0).
pub(crate) fn worker_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

impl WorkerState {
    /// `labels[j]` is the index in `view.clusters` of row `rows[j]`.
    pub fn new(
        id: usize,
        data: &CountDataset,
        rows: Vec<usize>,
        labels: &[usize],
        view: GlobalState,
        config: &ModelConfig,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: labels.len(),
            });
        }
        let k = view.clusters.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} out of range for {k} features"
            )));
        }
        let mut rng = worker_rng(config.seed, id);
        let slots = SlotPool::from_prior(config.m, config.gamma, data.dim(), &mut rng);
        let mut w = Self {
            id,
            z: labels.iter().map(|&l| Assignment::Global(l)).collect(),
            rows,
            counts: Vec::new(),
            suffstats: Vec::new(),
            locals: Vec::new(),
            next_local: 0,
            slots,
            view,
            rng,
        };
        w.rebuild_tallies(data);
        Ok(w)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.z
    }

    pub fn local_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn local_suffstats(&self) -> &[Vec<u64>] {
        &self.suffstats
    }

    pub fn new_features(&self) -> &[ClusterState] {
        &self.locals
    }

    pub fn slots(&self) -> &SlotPool {
        &self.slots
    }

    pub fn view(&self) -> &GlobalState {
        &self.view
    }

    /// Replaces the broadcast copy; for driving a worker by hand.
    pub fn set_view(&mut self, view: GlobalState) -> Result<()> {
        if view.clusters.len() != self.counts.len() {
            return Err(Error::DimensionMismatch {
                expected: self.counts.len(),
                found: view.clusters.len(),
            });
        }
        self.view = view;
        Ok(())
    }

    fn rebuild_tallies(&mut self, data: &CountDataset) {
        let k = self.view.clusters.len();
        self.counts = vec![0; k];
        self.suffstats = vec![vec![0; data.dim()]; k];
        for (&i, &a) in self.rows.iter().zip(&self.z) {
            if let Assignment::Global(g) = a {
                self.counts[g] += 1;
                data.add_row_to(i, &mut self.suffstats[g]);
            }
        }
    }

    fn unassign(&mut self, data: &CountDataset, pos: usize) {
        let i = self.rows[pos];
        match self.z[pos] {
            Assignment::Global(k) => {
                self.counts[k] -= 1;
                data.remove_row_from(i, &mut self.suffstats[k]);
            }
            Assignment::Local(l) => {
                self.locals[l].remove(data, i);
                if self.locals[l].count == 0 {
                    let last = self.locals.len() - 1;
                    let emptied = self.locals.swap_remove(l);
                    if l != last {
                        for a in self.z.iter_mut() {
                            if *a == Assignment::Local(last) {
                                *a = Assignment::Local(l);
                            }
                        }
                    }
                    self.slots.absorb(emptied.theta, &mut self.rng);
                }
            }
        }
    }

    /// Assigns row `pos` to choice `c` of the list [global | local | slots].
    fn assign(&mut self, data: &CountDataset, pos: usize, c: usize) {
        let i = self.rows[pos];
        let k = self.counts.len();
        let l = self.locals.len();
        let a = if c < k {
            self.counts[c] += 1;
            data.add_row_to(i, &mut self.suffstats[c]);
            Assignment::Global(c)
        } else {
            let local = if c < k + l {
                c - k
            } else {
                let theta = self.slots.take(c - k - l, &mut self.rng);
                let id = local_cluster_id(self.id, self.next_local);
                self.next_local += 1;
                self.locals.push(ClusterState::empty(id, theta));
                l
            };
            self.locals[local].add(data, i);
            Assignment::Local(local)
        };
        self.z[pos] = a;
    }

    fn resample_local_thetas(&mut self, gamma: f64) {
        for c in self.locals.iter_mut() {
            c.theta = sample_posterior_theta(&c.suffstats, gamma, &mut self.rng)
                .expect("gamma validated");
        }
    }

    fn assigned_ln_lik(&self, data: &CountDataset) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.z)
            .map(|(&i, a)| match *a {
                Assignment::Global(k) => data.ln_likelihood(i, &self.view.clusters[k].theta),
                Assignment::Local(l) => data.ln_likelihood(i, &self.locals[l].theta),
            })
            .collect()
    }

    /// One pass of the approximate stage over the shard.
    ///
    /// Instantiated features are weighted by this worker's own counts, its new
    /// features by their (exact, worker-only) counts and empty slots by
    /// `alpha / m`. Afterwards new features get posterior draws and every
    /// empty slot takes an unconditionally accepted empirical proposal.
    pub fn accel_sweep(&mut self, data: &CountDataset, config: &ModelConfig) {
        let ln_new = (self.view.alpha / config.m as f64).ln();
        let mut w = Vec::new();
        for pos in 0..self.rows.len() {
            self.unassign(data, pos);
            let i = self.rows[pos];
            w.clear();
            for (c, &n) in self.view.clusters.iter().zip(&self.counts) {
                w.push(if n > 0 {
                    (n as f64).ln() + data.ln_likelihood(i, &c.theta)
                } else {
                    f64::NEG_INFINITY
                });
            }
            for c in &self.locals {
                w.push((c.count as f64).ln() + data.ln_likelihood(i, &c.theta));
            }
            for t in self.slots.thetas() {
                w.push(ln_new + data.ln_likelihood(i, t));
            }
            let c = sample_log_categorical(&w, &mut self.rng);
            self.assign(data, pos, c);
        }
        self.resample_local_thetas(config.gamma);
        let ln_lik = self.assigned_ln_lik(data);
        let params = ProposalParams {
            rho: config.rho,
            gamma: config.gamma,
            smoothing_eps: config.smoothing_eps,
        };
        let ctx = ProposalContext::new(data, &self.rows, &ln_lik, params)
            .expect("rows and likelihoods are aligned");
        self.slots
            .refresh(config.m, RefreshMode::EmpiricalAuto, Some(&ctx), &mut self.rng);
    }

    /// One pass of the exact stage over the shard.
    ///
    /// Every worker allocates to instantiated features with weight
    /// `pi_k f`. Only the elected proposer may also open features: the
    /// remainder mass `pi_0` is split among its new features and slots as a
    /// Chinese restaurant process with concentration `alpha`, i.e.
    /// `pi_0 n_{-i,k} / (n_new + alpha)` and `pi_0 (alpha / m) / (n_new + alpha)`.
    pub fn exact_sweep(&mut self, data: &CountDataset, config: &ModelConfig) {
        let k = self.view.clusters.len();
        let ln_pi: Vec<f64> = self.view.pi[..k].iter().map(|p| p.ln()).collect();
        let ln_rest = self.view.pi[k].ln();
        let alpha = self.view.alpha;
        let proposer = self.view.proposer == self.id;
        let mut w = Vec::new();
        for pos in 0..self.rows.len() {
            self.unassign(data, pos);
            let i = self.rows[pos];
            w.clear();
            w.extend(
                self.view
                    .clusters
                    .iter()
                    .zip(&ln_pi)
                    .map(|(c, lp)| lp + data.ln_likelihood(i, &c.theta)),
            );
            if proposer {
                let n_new: usize = self.locals.iter().map(|c| c.count).sum();
                let ln_scale = ln_rest - (n_new as f64 + alpha).ln();
                for c in &self.locals {
                    w.push(ln_scale + (c.count as f64).ln() + data.ln_likelihood(i, &c.theta));
                }
                let ln_slot = ln_scale + (alpha / config.m as f64).ln();
                for t in self.slots.thetas() {
                    w.push(ln_slot + data.ln_likelihood(i, t));
                }
            }
            let c = sample_log_categorical(&w, &mut self.rng);
            self.assign(data, pos, c);
        }
        if proposer {
            self.resample_local_thetas(config.gamma);
            self.slots
                .refresh(config.m, RefreshMode::Prior, None, &mut self.rng);
        }
    }

    pub fn message(&self) -> SyncMessage {
        SyncMessage {
            worker_id: self.id,
            counts: self.counts.clone(),
            suffstats: self.suffstats.clone(),
            new_features: self.locals.clone(),
        }
    }

    /// Installs a new broadcast and renumbers local assignments accordingly.
    pub fn apply_sync(
        &mut self,
        data: &CountDataset,
        view: GlobalState,
        plan: &SyncPlan,
    ) -> Result<()> {
        let local_map = plan
            .local
            .get(self.id)
            .ok_or_else(|| Error::Sync(format!("no remapping for worker {}", self.id)))?;
        for a in self.z.iter_mut() {
            let target = match *a {
                Assignment::Global(k) => plan.global.get(k).copied().flatten(),
                Assignment::Local(l) => local_map.get(l).copied().flatten(),
            };
            *a = Assignment::Global(target.ok_or_else(|| {
                Error::Sync(format!("worker {} holds an observation in a dropped feature", self.id))
            })?);
        }
        self.locals.clear();
        self.view = view;
        self.rebuild_tallies(data);
        Ok(())
    }

    pub fn check_invariants(&self, data: &CountDataset, m: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(format!("worker {}: {msg}", self.id)));
        let k = self.view.clusters.len();
        if self.counts.len() != k || self.suffstats.len() != k {
            return fail("tallies do not match the broadcast".into());
        }
        let mut counts = vec![0usize; k];
        let mut suff = vec![vec![0u64; data.dim()]; k];
        let mut lcounts = vec![0usize; self.locals.len()];
        let mut lsuff = vec![vec![0u64; data.dim()]; self.locals.len()];
        for (&i, &a) in self.rows.iter().zip(&self.z) {
            match a {
                Assignment::Global(g) if g < k => {
                    counts[g] += 1;
                    data.add_row_to(i, &mut suff[g]);
                }
                Assignment::Local(l) if l < self.locals.len() => {
                    lcounts[l] += 1;
                    data.add_row_to(i, &mut lsuff[l]);
                }
                other => return fail(format!("dangling assignment {other:?}")),
            }
        }
        if counts != self.counts || suff != self.suffstats {
            return fail("local tallies drifted".into());
        }
        for (j, c) in self.locals.iter().enumerate() {
            if c.count == 0 || c.count != lcounts[j] || c.suffstats != lsuff[j] {
                return fail(format!("new feature {} tallies drifted", c.id));
            }
            crate::serial::check_theta(&c.theta)?;
        }
        if self.slots.len() != m {
            return fail(format!("{} empty slots, expected {m}", self.slots.len()));
        }
        for t in self.slots.thetas() {
            crate::serial::check_theta(t)?;
        }
        Ok(())
    }
}
