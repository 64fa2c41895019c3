use crate::model::{ClusterId, ClusterState};

/// The instantiated features and the global parameters broadcast to workers.
///
/// `pi` holds one weight per cluster followed by the remainder mass of all
/// clusters not yet seen.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub clusters: Vec<ClusterState>,
    pub pi: Vec<f64>,
    pub alpha: f64,
    /// Index of the worker allowed to create features in the exact stage.
    pub proposer: usize,
    pub(crate) next_id: u64,
}

impl GlobalState {
    /// A state whose weights are the posterior means `n_k / (N + alpha)` and
    /// `alpha / (N + alpha)`.
    pub fn from_clusters(clusters: Vec<ClusterState>, alpha: f64) -> Self {
        let n: usize = clusters.iter().map(|c| c.count).sum();
        let denom = n as f64 + alpha;
        let mut pi: Vec<f64> = clusters.iter().map(|c| c.count as f64 / denom).collect();
        pi.push(alpha / denom);
        let next_id = clusters.iter().map(|c| c.id.0 + 1).max().unwrap_or(0);
        Self {
            clusters,
            pi,
            alpha,
            proposer: 0,
            next_id,
        }
    }

    pub fn n_observations(&self) -> usize {
        self.clusters.iter().map(|c| c.count).sum()
    }

    /// Number of clusters with at least one member.
    pub fn k_plus(&self) -> usize {
        self.clusters.iter().filter(|c| c.count > 0).count()
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&ClusterState> {
        self.clusters.iter().find(|c| c.id == id)
    }

}

/// Final state of a sampler run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub global: GlobalState,
    /// Cluster of every training observation, in dataset order.
    pub assignments: Vec<ClusterId>,
    pub trace: crate::metrics::MetricsTrace,
    /// Iterations actually performed (fewer than requested if the time
    /// budget ran out).
    pub iterations: usize,
}
