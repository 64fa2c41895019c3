//! Data-driven proposals for the locations of empty features.
//!
//! New locations are drawn from a two-component mixture: with probability
//! `rho` a data point is picked with probability proportional to the inverse
//! likelihood under its current cluster (so badly explained points are
//! favoured) and turned into a point of the simplex; otherwise the location is
//! drawn from the base measure.
//!
//! The mixture has atoms at the smoothed data points, so densities are taken
//! with respect to Lebesgue measure on the simplex plus counting measure on
//! the atom set. Under that measure the base measure puts no mass on an atom,
//! which makes `dH/dQ` equal to `1 / (1 - rho)` off the atoms and `0` on them.
//! The Metropolis-Hastings step uses that ratio directly, which keeps it exact
//! (a prior draw is always accepted, see [`ProposalContext::mh_step`]).

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::model::{log_prior_density, sample_prior, CountDataset, Theta};
use crate::numeric::log_sum_exp;

/// Elementwise tolerance when deciding that a point is one of the atoms.
pub const ATOM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Empirical,
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalParams {
    pub rho: f64,
    pub gamma: f64,
    pub smoothing_eps: f64,
}

/// Result of one Metropolis-Hastings update of an empty feature.
#[derive(Clone, Debug)]
pub struct MhOutcome {
    pub theta: Theta,
    pub accepted: bool,
    pub branch: Branch,
    pub log_beta: f64,
}

/// Smoothed normalization of a count vector: `(x + eps) / (n + eps * D)`.
pub fn datapoint_to_theta(x: &[u32], smoothing_eps: f64) -> Result<Theta> {
    let total: u64 = x.iter().map(|&c| u64::from(c)).sum();
    if total == 0 {
        return Err(Error::InvalidParameter(
            "cannot normalize an all-zero count vector".into(),
        ));
    }
    if !(smoothing_eps >= 0.0 && smoothing_eps.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "smoothing_eps must be non-negative, got {smoothing_eps}"
        )));
    }
    let denom = total as f64 + smoothing_eps * x.len() as f64;
    Theta::new(
        x.iter()
            .map(|&c| (f64::from(c) + smoothing_eps) / denom)
            .collect(),
    )
}

/// Normalized log weights proportional to `-ln_lik`, plus the number of
/// entries that had to be clamped.
///
/// A `-inf` (or NaN) log likelihood is replaced by the largest finite negated
/// value in the shard, so the worst-fitting points keep the largest weight
/// without producing overflow.
pub fn empirical_log_weights(ln_lik: &[f64]) -> (Vec<f64>, usize) {
    let mut neg: Vec<f64> = ln_lik.iter().map(|&l| -l).collect();
    let max_finite = neg
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let fill = if max_finite.is_finite() { max_finite } else { 0.0 };
    let mut clamped = 0;
    for v in neg.iter_mut() {
        if !v.is_finite() {
            *v = fill;
            clamped += 1;
        }
    }
    let lse = log_sum_exp(&neg);
    neg.iter_mut().for_each(|v| *v -= lse);
    (neg, clamped)
}

/// Everything the proposal needs about one shard: the rows, the log
/// likelihood of each row under its current cluster, and the mixture knobs.
pub struct ProposalContext<'a> {
    data: &'a CountDataset,
    rows: &'a [usize],
    log_weights: Vec<f64>,
    picker: Option<WeightedIndex<f64>>,
    clamped: usize,
    params: ProposalParams,
}

impl<'a> ProposalContext<'a> {
    /// `assigned_ln_lik[j]` is the log likelihood of `data.row(rows[j])`
    /// under the parameter of the cluster it is assigned to.
    pub fn new(
        data: &'a CountDataset,
        rows: &'a [usize],
        assigned_ln_lik: &[f64],
        params: ProposalParams,
    ) -> Result<Self> {
        if rows.len() != assigned_ln_lik.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: assigned_ln_lik.len(),
            });
        }
        if !(0.0..=1.0).contains(&params.rho) {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in [0, 1], got {}",
                params.rho
            )));
        }
        let (log_weights, clamped) = empirical_log_weights(assigned_ln_lik);
        if clamped > 0 {
            log::debug!("{clamped} shard rows had a -inf assigned log likelihood");
        }
        let picker = if params.rho > 0.0 && !rows.is_empty() {
            let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
            Some(WeightedIndex::new(&w).expect("weights are finite and not all zero"))
        } else {
            None
        };
        Ok(Self {
            data,
            rows,
            log_weights,
            picker,
            clamped,
            params,
        })
    }

    pub fn params(&self) -> ProposalParams {
        self.params
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    /// Rows whose log likelihood had to be clamped.
    pub fn clamped_rows(&self) -> usize {
        self.clamped
    }

    pub fn empirical_weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn log_empirical_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Feature location proposed by shard row `j`.
    pub fn atom(&self, j: usize) -> Theta {
        datapoint_to_theta(self.data.row(self.rows[j]), self.params.smoothing_eps)
            .expect("dataset rows have positive totals")
    }

    fn matches_atom(&self, j: usize, theta: &[f64]) -> bool {
        let x = self.data.row(self.rows[j]);
        let eps = self.params.smoothing_eps;
        let denom = self.data.total(self.rows[j]) as f64 + eps * x.len() as f64;
        x.iter()
            .zip(theta)
            .all(|(&c, &t)| ((f64::from(c) + eps) / denom - t).abs() <= ATOM_TOL)
    }

    /// Total empirical weight of the atoms located at `theta`; `None` when
    /// `theta` is not an atom of the mixture.
    pub fn atom_mass(&self, theta: &[f64]) -> Option<f64> {
        if self.params.rho == 0.0 || theta.len() != self.dim() {
            return None;
        }
        let logs: Vec<f64> = (0..self.rows.len())
            .filter(|&j| self.matches_atom(j, theta))
            .map(|j| self.log_weights[j])
            .collect();
        if logs.is_empty() {
            None
        } else {
            Some(log_sum_exp(&logs).exp())
        }
    }

    /// Draws a candidate location and reports which mixture component fired.
    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> (Theta, Branch) {
        let p = &self.params;
        if p.rho > 0.0 && rng.random::<f64>() < p.rho {
            if let Some(picker) = &self.picker {
                let j = picker.sample(rng);
                return (self.atom(j), Branch::Empirical);
            }
            log::debug!("empty shard: empirical proposal falls back to the prior");
        }
        let theta = sample_prior(p.gamma, self.dim(), rng).expect("gamma validated");
        (theta, Branch::Prior)
    }

    /// Log density of the proposal mixture at `theta`: `ln(rho * mass)` at an
    /// atom, `ln(1 - rho) + ln H(theta)` elsewhere.
    pub fn log_mixture_density(&self, theta: &Theta) -> f64 {
        let rho = self.params.rho;
        if let Some(mass) = self.atom_mass(theta.probs()) {
            return rho.ln() + mass.ln();
        }
        let ln_h = match log_prior_density(theta.probs(), self.params.gamma) {
            Ok(v) => v,
            Err(Error::BoundaryDensity { .. }) => f64::INFINITY,
            Err(_) => f64::NAN,
        };
        (1.0 - rho).ln() + ln_h
    }

    /// `ln dH/dQ` at `theta`: `-inf` on an atom, `-ln(1 - rho)` elsewhere.
    pub fn log_importance_weight(&self, theta: &Theta) -> f64 {
        if self.atom_mass(theta.probs()).is_some() {
            f64::NEG_INFINITY
        } else {
            -(1.0 - self.params.rho).ln()
        }
    }

    /// One independence Metropolis-Hastings update targeting the base measure.
    pub fn mh_step<R: Rng + ?Sized>(&self, current: &Theta, rng: &mut R) -> MhOutcome {
        let (proposed, branch) = self.propose(rng);
        if proposed.probs() == current.probs() {
            return MhOutcome {
                theta: proposed,
                accepted: true,
                branch,
                log_beta: 0.0,
            };
        }
        let log_beta = mh_log_ratio(
            self.log_importance_weight(current),
            self.log_importance_weight(&proposed),
        );
        let accepted = if log_beta.is_nan() {
            log::debug!("non-finite acceptance ratio, proposal rejected");
            false
        } else {
            log_beta >= 0.0 || rng.random::<f64>() < log_beta.exp()
        };
        MhOutcome {
            theta: if accepted { proposed } else { current.clone() },
            accepted,
            branch,
            log_beta,
        }
    }
}

/// Log acceptance ratio of an independence sampler given the log importance
/// weights (target over proposal) of the current and proposed states. NaN
/// when both weights are the same infinity.
pub fn mh_log_ratio(log_w_current: f64, log_w_proposed: f64) -> f64 {
    if log_w_current == log_w_proposed {
        if log_w_current.is_finite() {
            0.0
        } else {
            f64::NAN
        }
    } else {
        log_w_proposed - log_w_current
    }
}

/// `min(1, beta)`; zero for an undefined ratio.
pub fn acceptance_probability(log_w_current: f64, log_w_proposed: f64) -> f64 {
    let lb = mh_log_ratio(log_w_current, log_w_proposed);
    if lb.is_nan() {
        0.0
    } else {
        lb.min(0.0).exp()
    }
}
