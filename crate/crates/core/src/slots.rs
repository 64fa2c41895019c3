//! The pool of empty (uninstantiated) feature slots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{sample_prior, Theta};
use crate::proposal::{Branch, ProposalContext};

/// How empty slots get new locations after an allocation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshMode {
    /// Fresh draws from the base measure.
    Prior,
    /// One Metropolis-Hastings step with the empirical mixture proposal.
    EmpiricalExact,
    /// Take the empirical mixture proposal unconditionally.
    EmpiricalAuto,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefreshStats {
    pub refreshed: usize,
    pub empirical_proposals: usize,
    pub accepted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotPool {
    thetas: Vec<Theta>,
    gamma: f64,
    dim: usize,
}

impl SlotPool {
    pub fn from_prior<R: Rng + ?Sized>(m: usize, gamma: f64, dim: usize, rng: &mut R) -> Self {
        let thetas = (0..m).map(|_| draw(gamma, dim, rng)).collect();
        Self { thetas, gamma, dim }
    }

    pub fn from_thetas(thetas: Vec<Theta>, gamma: f64, dim: usize) -> Self {
        Self { thetas, gamma, dim }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn thetas(&self) -> &[Theta] {
        &self.thetas
    }

    /// Parameter of a cluster that just lost its last member. It replaces a
    /// uniformly chosen slot so the pool size is unchanged.
    pub fn absorb<R: Rng + ?Sized>(&mut self, theta: Theta, rng: &mut R) {
        if self.thetas.is_empty() {
            self.thetas.push(theta);
        } else {
            let j = rng.random_range(0..self.thetas.len());
            self.thetas[j] = theta;
        }
    }

    /// Hands slot `j` over to a new cluster and refills it from the prior.
    pub fn take<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) -> Theta {
        let fresh = draw(self.gamma, self.dim, rng);
        std::mem::replace(&mut self.thetas[j], fresh)
    }

    /// Brings the pool to exactly `m` slots: missing slots are drawn from the
    /// prior, surplus slots are deleted uniformly at random.
    pub fn normalize<R: Rng + ?Sized>(&mut self, m: usize, rng: &mut R) {
        while self.thetas.len() < m {
            self.thetas.push(draw(self.gamma, self.dim, rng));
        }
        while self.thetas.len() > m {
            let j = rng.random_range(0..self.thetas.len());
            self.thetas.swap_remove(j);
        }
    }

    /// Normalizes the pool to `m` slots and gives every slot a new location.
    ///
    /// `ctx` is only consulted by the empirical modes; without one they fall
    /// back to prior draws.
    pub fn refresh<R: Rng + ?Sized>(
        &mut self,
        m: usize,
        mode: RefreshMode,
        ctx: Option<&ProposalContext<'_>>,
        rng: &mut R,
    ) -> RefreshStats {
        self.normalize(m, rng);
        let mut stats = RefreshStats::default();
        for slot in self.thetas.iter_mut() {
            stats.refreshed += 1;
            match (mode, ctx) {
                (RefreshMode::EmpiricalExact, Some(ctx)) => {
                    let out = ctx.mh_step(slot, rng);
                    if out.branch == Branch::Empirical {
                        stats.empirical_proposals += 1;
                    }
                    if out.accepted {
                        stats.accepted += 1;
                    }
                    *slot = out.theta;
                }
                (RefreshMode::EmpiricalAuto, Some(ctx)) => {
                    let (theta, branch) = ctx.propose(rng);
                    if branch == Branch::Empirical {
                        stats.empirical_proposals += 1;
                    }
                    stats.accepted += 1;
                    *slot = theta;
                }
                _ => {
                    stats.accepted += 1;
                    *slot = draw(self.gamma, self.dim, rng);
                }
            }
        }
        stats
    }
}

fn draw<R: Rng + ?Sized>(gamma: f64, dim: usize, rng: &mut R) -> Theta {
    sample_prior(gamma, dim, rng).expect("gamma and dimension validated by the caller")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CountDataset;
    use crate::proposal::{datapoint_to_theta, ProposalParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_grows_and_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = SlotPool::from_prior(1, 1.0, 4, &mut rng);
        pool.normalize(3, &mut rng);
        assert_eq!(pool.len(), 3);
        let extra = (0..4).map(|_| Theta::uniform(4));
        let mut thetas = pool.thetas().to_vec();
        thetas.extend(extra);
        let mut pool = SlotPool::from_thetas(thetas, 1.0, 4);
        pool.normalize(3, &mut rng);
        assert_eq!(pool.len(), 3);
    }

    #[test]
    fn surplus_deletion_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut kept = [0usize; 4];
        let reps = 40_000;
        for _ in 0..reps {
            let thetas = (0..4)
                .map(|j| {
                    let mut p = vec![0.1; 4];
                    p[j] = 0.7;
                    Theta::new(p).unwrap()
                })
                .collect();
            let mut pool = SlotPool::from_thetas(thetas, 1.0, 4);
            pool.normalize(2, &mut rng);
            for t in pool.thetas() {
                let j = t.probs().iter().position(|&p| p == 0.7).unwrap();
                kept[j] += 1;
            }
        }
        for k in kept {
            assert!((k as f64 / reps as f64 - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn take_refills() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pool = SlotPool::from_prior(3, 1.0, 5, &mut rng);
        let before = pool.thetas()[1].clone();
        let got = pool.take(1, &mut rng);
        assert_eq!(got, before);
        assert_eq!(pool.len(), 3);
        assert_ne!(pool.thetas()[1], before);
    }

    #[test]
    fn prior_refresh_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pool = SlotPool::from_prior(3, 1.0, 10, &mut rng);
        let mut mean = vec![0.0; 10];
        let reps = 10_000;
        for _ in 0..reps {
            pool.refresh(3, RefreshMode::Prior, None, &mut rng);
            for t in pool.thetas() {
                for (m, p) in mean.iter_mut().zip(t.probs()) {
                    *m += p / (3 * reps) as f64;
                }
            }
        }
        for m in mean {
            assert!((m - 0.1).abs() < 0.003, "{m}");
        }
    }

    #[test]
    fn empirical_auto_with_rho_one_lands_on_data() {
        let data = CountDataset::new(3, vec![vec![1, 2, 3], vec![4, 0, 1], vec![0, 0, 9]]).unwrap();
        let rows = [0, 1, 2];
        let params = ProposalParams {
            rho: 1.0,
            gamma: 1.0,
            smoothing_eps: 1e-6,
        };
        let ctx = ProposalContext::new(&data, &rows, &[-4.0, -2.0, -7.0], params).unwrap();
        let atoms: Vec<Theta> = (0..3)
            .map(|i| datapoint_to_theta(data.row(i), 1e-6).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pool = SlotPool::from_prior(3, 1.0, 3, &mut rng);
        for _ in 0..100 {
            let stats = pool.refresh(3, RefreshMode::EmpiricalAuto, Some(&ctx), &mut rng);
            assert_eq!(stats.empirical_proposals, 3);
            for t in pool.thetas() {
                assert!(atoms.contains(t));
            }
        }
    }

    #[test]
    fn exact_refresh_with_rho_zero_matches_prior_mode() {
        // With rho = 0 every proposal is a prior draw and is accepted, so both
        // modes consume the generator identically.
        let data = CountDataset::new(2, vec![vec![1, 2]]).unwrap();
        let rows = [0];
        let params = ProposalParams {
            rho: 0.0,
            gamma: 1.0,
            smoothing_eps: 1e-6,
        };
        let ctx = ProposalContext::new(&data, &rows, &[-1.0], params).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let mut a = SlotPool::from_prior(3, 1.0, 2, &mut r1);
        let mut b = SlotPool::from_prior(3, 1.0, 2, &mut r2);
        for _ in 0..50 {
            a.refresh(3, RefreshMode::EmpiricalExact, Some(&ctx), &mut r1);
            b.refresh(3, RefreshMode::Prior, None, &mut r2);
            assert_eq!(a, b);
        }
    }
}
