//! Count data, cluster parameters and the Dirichlet-multinomial likelihood
//! shared by all samplers.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Tolerance on `sum(theta) == 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Stable cluster identifier, unique within one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterId(pub u64);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An `N x D` matrix of non-negative integer counts, one row per observation.
///
/// Rows are stored densely; a sparse copy of the non-zero entries and the log
/// multinomial coefficient of every row are cached because each sweep
/// evaluates every row against every cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct CountDataset {
    dim: usize,
    counts: Vec<u32>,
    totals: Vec<u64>,
    ln_coefs: Vec<f64>,
    nz_offsets: Vec<usize>,
    nz: Vec<(u32, u32)>,
}

impl CountDataset {
    pub fn new(dim: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let mut counts = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Input {
                    row: i + 1,
                    message: format!("expected {dim} columns, found {}", row.len()),
                });
            }
            counts.extend_from_slice(row);
        }
        Self::from_flat(dim, counts)
    }

    /// Builds a dataset from row-major counts.
    pub fn from_flat(dim: usize, counts: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        if counts.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} counts do not fill rows of width {dim}",
                counts.len()
            )));
        }
        let n = counts.len() / dim;
        let mut totals = Vec::with_capacity(n);
        let mut ln_coefs = Vec::with_capacity(n);
        let mut nz_offsets = Vec::with_capacity(n + 1);
        let mut nz = Vec::new();
        nz_offsets.push(0);
        for (i, row) in counts.chunks_exact(dim).enumerate() {
            let total: u64 = row.iter().map(|&c| u64::from(c)).sum();
            if total == 0 {
                return Err(Error::Input {
                    row: i + 1,
                    message: "row has zero total count".into(),
                });
            }
            totals.push(total);
            ln_coefs.push(ln_multinomial_coef(row));
            nz.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(d, &c)| (d as u32, c)),
            );
            nz_offsets.push(nz.len());
        }
        Ok(Self {
            dim,
            counts,
            totals,
            ln_coefs,
            nz_offsets,
            nz,
        })
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.counts[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.counts.chunks_exact(self.dim)
    }

    pub fn total(&self, i: usize) -> u64 {
        self.totals[i]
    }

    pub fn ln_coef(&self, i: usize) -> f64 {
        self.ln_coefs[i]
    }

    /// `(dimension, count)` pairs of the non-zero entries of row `i`.
    pub fn nonzeros(&self, i: usize) -> &[(u32, u32)] {
        &self.nz[self.nz_offsets[i]..self.nz_offsets[i + 1]]
    }

    pub fn as_flat(&self) -> &[u32] {
        &self.counts
    }

    /// Log multinomial pmf of row `i` under `theta`.
    pub fn ln_likelihood(&self, i: usize, theta: &Theta) -> f64 {
        let ln_p = theta.ln_probs();
        let dot: f64 = self
            .nonzeros(i)
            .iter()
            .map(|&(d, c)| f64::from(c) * ln_p[d as usize])
            .sum();
        self.ln_coefs[i] + dot
    }

    /// A new dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> CountDataset {
        let mut counts = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            counts.extend_from_slice(self.row(i));
        }
        Self::from_flat(self.dim, counts).expect("rows were already validated")
    }

    pub fn add_row_to(&self, i: usize, suffstats: &mut [u64]) {
        for &(d, c) in self.nonzeros(i) {
            suffstats[d as usize] += u64::from(c);
        }
    }

    pub fn remove_row_from(&self, i: usize, suffstats: &mut [u64]) {
        for &(d, c) in self.nonzeros(i) {
            suffstats[d as usize] -= u64::from(c);
        }
    }

    /// Elementwise sum of the given rows.
    pub fn suffstats_of(&self, indices: impl IntoIterator<Item = usize>) -> Vec<u64> {
        let mut s = vec![0u64; self.dim];
        for i in indices {
            self.add_row_to(i, &mut s);
        }
        s
    }
}

/// A point on the probability simplex together with its elementwise logs.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    probs: Vec<f64>,
    ln_probs: Vec<f64>,
}

impl Theta {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs)?;
        let ln_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { probs, ln_probs })
    }

    /// Normalizes unnormalized log masses. Entries that underflow are clamped
    /// to the smallest positive double so the point stays interior.
    pub(crate) fn from_log_masses(mut logs: Vec<f64>) -> Self {
        let lse = log_sum_exp(&logs);
        logs.iter_mut().for_each(|l| *l -= lse);
        let probs = logs
            .iter()
            .map(|l| l.exp().max(f64::MIN_POSITIVE))
            .collect();
        Self {
            probs,
            ln_probs: logs,
        }
    }

    pub fn uniform(dim: usize) -> Self {
        let p = 1.0 / dim as f64;
        Self {
            probs: vec![p; dim],
            ln_probs: vec![p.ln(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn ln_probs(&self) -> &[f64] {
        &self.ln_probs
    }

    pub fn is_interior(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }
}

fn check_simplex(theta: &[f64]) -> Result<()> {
    if theta.is_empty() {
        return Err(Error::InvalidParameter("empty probability vector".into()));
    }
    if theta.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidParameter(
            "probability vector has a negative or non-finite entry".into(),
        ));
    }
    let sum: f64 = theta.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParameter(format!(
            "probability vector sums to {sum}"
        )));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

/// `ln(n! / prod(x_d!))`.
pub fn ln_multinomial_coef(x: &[u32]) -> f64 {
    let n: u64 = x.iter().map(|&c| u64::from(c)).sum();
    ln_gamma(n as f64 + 1.0) - x.iter().map(|&c| ln_gamma(f64::from(c) + 1.0)).sum::<f64>()
}

/// Log multinomial pmf of `x` under `theta`, coefficient included.
///
/// Returns `-inf` when some `theta_d == 0` while `x_d > 0`.
pub fn log_likelihood(x: &[u32], theta: &[f64]) -> Result<f64> {
    if x.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: theta.len(),
        });
    }
    let mut terms = Vec::with_capacity(x.len());
    for (&c, &p) in x.iter().zip(theta) {
        if c > 0 {
            if p <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            terms.push(f64::from(c) * p.ln() - ln_gamma(f64::from(c) + 1.0));
        }
    }
    // summing in sorted order makes the result independent of coordinate order
    terms.sort_by(f64::total_cmp);
    let n: u64 = x.iter().map(|&c| u64::from(c)).sum();
    Ok(ln_gamma(n as f64 + 1.0) + terms.iter().sum::<f64>())
}

/// Log density of the symmetric `Dirichlet(gamma, ..., gamma)` at `theta`.
pub fn log_prior_density(theta: &[f64], gamma: f64) -> Result<f64> {
    check_positive("gamma", gamma)?;
    check_simplex(theta)?;
    let d = theta.len() as f64;
    if theta.len() == 1 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for &p in theta {
        if p == 0.0 {
            if gamma < 1.0 {
                return Err(Error::BoundaryDensity { gamma });
            }
            if gamma > 1.0 {
                return Ok(f64::NEG_INFINITY);
            }
        } else {
            acc += (gamma - 1.0) * p.ln();
        }
    }
    Ok(ln_gamma(d * gamma) - d * ln_gamma(gamma) + acc)
}

/// Log of a standard gamma variate, computed without underflow for small
/// shapes via `G(a) = G(a + 1) * U^(1/a)`.
fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("shape checked positive");
        g.sample(rng).max(f64::MIN_POSITIVE).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("shape checked positive");
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.sample(rng).max(f64::MIN_POSITIVE).ln() + u.ln() / shape
    }
}

/// Draws from `Dirichlet(concentrations)`.
pub fn sample_dirichlet<R: Rng + ?Sized>(concentrations: &[f64], rng: &mut R) -> Result<Theta> {
    if concentrations.is_empty() {
        return Err(Error::InvalidParameter("empty concentration vector".into()));
    }
    for &a in concentrations {
        check_positive("Dirichlet concentration", a)?;
    }
    if concentrations.len() == 1 {
        return Ok(Theta::uniform(1));
    }
    let logs = concentrations
        .iter()
        .map(|&a| ln_gamma_variate(a, rng))
        .collect();
    Ok(Theta::from_log_masses(logs))
}

/// Draws a cluster parameter from the base measure.
pub fn sample_prior<R: Rng + ?Sized>(gamma: f64, dim: usize, rng: &mut R) -> Result<Theta> {
    check_positive("gamma", gamma)?;
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    sample_dirichlet(&vec![gamma; dim], rng)
}

/// Draws from the conjugate posterior `Dirichlet(gamma + suffstats)`.
pub fn sample_posterior_theta<R: Rng + ?Sized>(
    suffstats: &[u64],
    gamma: f64,
    rng: &mut R,
) -> Result<Theta> {
    check_positive("gamma", gamma)?;
    let conc: Vec<f64> = suffstats.iter().map(|&s| gamma + s as f64).collect();
    sample_dirichlet(&conc, rng)
}

/// Log Dirichlet-multinomial predictive probability of `x` given a cluster
/// that has already absorbed `suffstats` (all zeros for the prior predictive).
pub fn log_marginal_likelihood(x: &[u32], suffstats: &[u64], gamma: f64) -> Result<f64> {
    check_positive("gamma", gamma)?;
    if x.len() != suffstats.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: suffstats.len(),
        });
    }
    let d = x.len() as f64;
    let n: u64 = x.iter().map(|&c| u64::from(c)).sum();
    let s: u64 = suffstats.iter().sum();
    let mut acc = ln_multinomial_coef(x) + ln_gamma(d * gamma + s as f64)
        - ln_gamma(d * gamma + (s + n) as f64);
    for (&c, &sd) in x.iter().zip(suffstats) {
        if c > 0 {
            let base = gamma + sd as f64;
            acc += ln_gamma(base + f64::from(c)) - ln_gamma(base);
        }
    }
    Ok(acc)
}

/// An instantiated cluster: parameter, occupancy and accumulated counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub id: ClusterId,
    pub theta: Theta,
    pub count: usize,
    pub suffstats: Vec<u64>,
}

impl ClusterState {
    pub fn empty(id: ClusterId, theta: Theta) -> Self {
        let dim = theta.dim();
        Self {
            id,
            theta,
            count: 0,
            suffstats: vec![0; dim],
        }
    }

    pub fn add(&mut self, data: &CountDataset, i: usize) {
        self.count += 1;
        data.add_row_to(i, &mut self.suffstats);
    }

    pub fn remove(&mut self, data: &CountDataset, i: usize) {
        debug_assert!(self.count > 0);
        self.count -= 1;
        data.remove_row_from(i, &mut self.suffstats);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn likelihood_examples() {
        let v = log_likelihood(&[1, 0, 0], &[0.5, 0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(v, 0.5f64.ln(), epsilon = 1e-12);
        let v = log_likelihood(&[0, 2, 0], &[1.0 / 3.0; 3]).unwrap();
        assert_abs_diff_eq!(v, (1.0f64 / 9.0).ln(), epsilon = 1e-12);
        let v = log_likelihood(&[2, 1, 0], &[0.5, 0.3, 0.2]).unwrap();
        assert_abs_diff_eq!(v, 0.225f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn likelihood_zero_theta() {
        assert_eq!(
            log_likelihood(&[1, 1], &[1.0, 0.0]).unwrap(),
            f64::NEG_INFINITY
        );
        // zero count on a zero-probability coordinate is fine
        assert_abs_diff_eq!(log_likelihood(&[2, 0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            log_likelihood(&[1, 1], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dataset_likelihood_matches_free_function() {
        let data = CountDataset::new(3, vec![vec![2, 1, 0], vec![0, 0, 7]]).unwrap();
        let theta = Theta::new(vec![0.5, 0.3, 0.2]).unwrap();
        for i in 0..data.len() {
            let a = data.ln_likelihood(i, &theta);
            let b = log_likelihood(data.row(i), theta.probs()).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_density_examples() {
        assert_abs_diff_eq!(log_prior_density(&[0.3, 0.7], 1.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            log_prior_density(&[0.2, 0.3, 0.5], 1.0).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            log_prior_density(&[0.5, 0.5], 2.0).unwrap(),
            1.5f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn prior_density_boundary() {
        assert!(matches!(
            log_prior_density(&[0.0, 1.0], 0.5),
            Err(Error::BoundaryDensity { .. })
        ));
        assert_eq!(log_prior_density(&[0.0, 1.0], 2.0).unwrap(), f64::NEG_INFINITY);
        assert_abs_diff_eq!(log_prior_density(&[0.0, 1.0], 1.0).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn marginal_examples() {
        let v = log_marginal_likelihood(&[1, 0], &[0, 0], 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.5f64.ln(), epsilon = 1e-12);
        let v = log_marginal_likelihood(&[1, 0], &[4, 0], 1.0).unwrap();
        assert_abs_diff_eq!(v, (5.0f64 / 6.0).ln(), epsilon = 1e-12);
        let v = log_marginal_likelihood(&[1, 1], &[0, 0], 1.0).unwrap();
        assert_abs_diff_eq!(v, (1.0f64 / 3.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn prior_draws_degenerate_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_prior(0.3, 1, &mut rng).unwrap().probs(), &[1.0]);
        }
    }

    #[test]
    fn prior_draws_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut mean = [0.0; 10];
        for _ in 0..n {
            let t = sample_prior(1.0, 10, &mut rng).unwrap();
            assert!(t.is_interior());
            assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
            for (m, p) in mean.iter_mut().zip(t.probs()) {
                *m += p / n as f64;
            }
        }
        for m in mean {
            assert!((m - 0.1).abs() < 0.005, "{m}");
        }
    }

    #[test]
    fn prior_draws_concentrate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_prior(100.0, 3, &mut rng).unwrap().probs()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = (1.0 / 3.0) * (2.0 / 3.0) / 301.0;
        assert!((mean - 1.0 / 3.0).abs() < 1e-3);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn tiny_gamma_draws_stay_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let t = sample_prior(1e-3, 50, &mut rng).unwrap();
            assert!(t.is_interior());
            assert!(t.ln_probs().iter().all(|l| l.is_finite()));
            assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
        }
    }

    #[test]
    fn posterior_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let mut m = [0.0; 2];
        for _ in 0..n {
            let t = sample_posterior_theta(&[3, 1], 1.0, &mut rng).unwrap();
            m[0] += t.probs()[0] / n as f64;
            m[1] += t.probs()[1] / n as f64;
        }
        assert!((m[0] - 4.0 / 6.0).abs() < 0.01);
        assert!((m[1] - 2.0 / 6.0).abs() < 0.01);

        let n = 20_000;
        let mean = (0..n)
            .map(|_| sample_posterior_theta(&[1000, 0, 0], 1.0, &mut rng).unwrap().probs()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1001.0 / 1003.0).abs() < 1e-3);
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            CountDataset::new(2, vec![vec![1, 2], vec![1]]),
            Err(Error::Input { row: 2, .. })
        ));
        assert!(matches!(
            CountDataset::new(2, vec![vec![1, 2], vec![0, 0]]),
            Err(Error::Input { row: 2, .. })
        ));
        assert!(CountDataset::new(0, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn likelihood_is_permutation_equivariant(
            x in proptest::collection::vec(0u32..20, 4),
            raw in proptest::collection::vec(0.01f64..1.0, 4),
            perm_seed in any::<u64>(),
        ) {
            let s: f64 = raw.iter().sum();
            let theta: Vec<f64> = raw.iter().map(|r| r / s).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let xp: Vec<u32> = perm.iter().map(|&j| x[j]).collect();
            let tp: Vec<f64> = perm.iter().map(|&j| theta[j]).collect();
            let a = log_likelihood(&x, &theta).unwrap();
            let b = log_likelihood(&xp, &tp).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn incremental_suffstats_match_recompute(
            ops in proptest::collection::vec((0usize..6, any::<bool>()), 1..60),
        ) {
            let rows: Vec<Vec<u32>> = (0..6u32).map(|i| vec![i + 1, 2 * i, 7 - i]).collect();
            let data = CountDataset::new(3, rows).unwrap();
            let mut cluster = ClusterState::empty(ClusterId(0), Theta::uniform(3));
            let mut members: Vec<usize> = Vec::new();
            for (i, add) in ops {
                if add {
                    cluster.add(&data, i);
                    members.push(i);
                } else if let Some(pos) = members.iter().position(|&m| m == i) {
                    cluster.remove(&data, i);
                    members.swap_remove(pos);
                }
                prop_assert_eq!(cluster.count, members.len());
                prop_assert_eq!(&cluster.suffstats, &data.suffstats_of(members.iter().copied()));
            }
        }
    }
}
