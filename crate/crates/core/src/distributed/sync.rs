use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{sample_dirichlet, sample_posterior_theta, ClusterId, ClusterState};
use crate::state::GlobalState;

use super::worker::SyncMessage;

/// How workers translate their assignments into the new broadcast.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncPlan {
    /// Old instantiated index to new index; `None` for dropped features.
    pub global: Vec<Option<usize>>,
    /// Per worker: index of each new-local feature in the new broadcast.
    pub local: Vec<Vec<Option<usize>>>,
}

/// Escobar and West's auxiliary-variable update of the DP concentration
/// under a `Gamma(shape, rate)` prior, given `k` clusters over `n` items.
pub fn resample_concentration<R: Rng + ?Sized>(
    alpha: f64,
    k: usize,
    n: usize,
    shape: f64,
    rate: f64,
    rng: &mut R,
) -> f64 {
    debug_assert!(k >= 1 && n >= 1);
    let eta: f64 = Beta::new(alpha + 1.0, n as f64)
        .expect("positive Beta parameters")
        .sample(rng);
    let post_rate = rate - eta.max(f64::MIN_POSITIVE).ln();
    let k = k as f64;
    let odds = (shape + k - 1.0) / (n as f64 * post_rate);
    let post_shape = if rng.random::<f64>() < odds / (1.0 + odds) {
        shape + k
    } else {
        shape + k - 1.0
    };
    let draw: f64 = Gamma::new(post_shape, 1.0 / post_rate)
        .expect("positive Gamma parameters")
        .sample(rng);
    draw.max(f64::MIN_POSITIVE)
}

/// The master's step: merge every worker's new features into the
/// instantiated set (no deduplication), aggregate counts and sufficient
/// statistics, drop features nobody uses, draw parameters, weights and
/// concentration from their conditionals, and elect the next proposer.
pub fn synchronize<R: Rng + ?Sized>(
    mut messages: Vec<SyncMessage>,
    previous: &GlobalState,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<(GlobalState, SyncPlan)> {
    let p = config.n_workers;
    if messages.len() != p {
        return Err(Error::Sync(format!(
            "expected {p} worker messages, received {}",
            messages.len()
        )));
    }
    messages.sort_by_key(|m| m.worker_id);
    for (expect, m) in messages.iter().enumerate() {
        if m.worker_id != expect {
            return Err(Error::Sync(format!("missing message from worker {expect}")));
        }
    }
    let k_old = previous.clusters.len();
    let dim = previous
        .clusters
        .first()
        .map(|c| c.theta.dim())
        .or_else(|| {
            messages
                .iter()
                .find_map(|m| m.new_features.first().map(|c| c.theta.dim()))
        })
        .ok_or_else(|| Error::Sync("no features to synchronize".into()))?;
    for m in &messages {
        if m.counts.len() != k_old || m.suffstats.len() != k_old {
            return Err(Error::Sync(format!(
                "worker {} reports {} features, master has {k_old}",
                m.worker_id,
                m.counts.len()
            )));
        }
    }

    let mut clusters: Vec<ClusterState> = Vec::new();
    let mut global_map = vec![None; k_old];
    for (k, old) in previous.clusters.iter().enumerate() {
        let count: usize = messages.iter().map(|m| m.counts[k]).sum();
        if count == 0 {
            continue;
        }
        let mut suffstats = vec![0u64; dim];
        for m in &messages {
            for (s, v) in suffstats.iter_mut().zip(&m.suffstats[k]) {
                *s += v;
            }
        }
        global_map[k] = Some(clusters.len());
        clusters.push(ClusterState {
            id: old.id,
            theta: old.theta.clone(),
            count,
            suffstats,
        });
    }
    let mut next_id = previous.next_id;
    let mut local_maps = Vec::with_capacity(p);
    for m in messages {
        let mut map = Vec::with_capacity(m.new_features.len());
        for mut c in m.new_features {
            if c.count == 0 {
                map.push(None);
                continue;
            }
            c.id = ClusterId(next_id);
            next_id += 1;
            map.push(Some(clusters.len()));
            clusters.push(c);
        }
        local_maps.push(map);
    }
    if clusters.is_empty() {
        return Err(Error::Sync("no occupied features after merging".into()));
    }

    for c in clusters.iter_mut() {
        c.theta = sample_posterior_theta(&c.suffstats, config.gamma, rng)?;
    }
    let n: usize = clusters.iter().map(|c| c.count).sum();
    let alpha = if config.resample_alpha {
        resample_concentration(
            previous.alpha,
            clusters.len(),
            n,
            config.alpha_prior_shape,
            config.alpha_prior_rate,
            rng,
        )
    } else {
        previous.alpha
    };
    let mut conc: Vec<f64> = clusters.iter().map(|c| c.count as f64).collect();
    conc.push(alpha);
    let pi = sample_dirichlet(&conc, rng)?.probs().to_vec();
    let proposer = rng.random_range(0..p);

    Ok((
        GlobalState {
            clusters,
            pi,
            alpha,
            proposer,
            next_id,
        },
        SyncPlan {
            global: global_map,
            local: local_maps,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Theta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::function::gamma::ln_gamma;

    fn cluster(id: u64, count: usize, suff: Vec<u64>) -> ClusterState {
        ClusterState {
            id: ClusterId(id),
            theta: Theta::uniform(suff.len()),
            count,
            suffstats: suff,
        }
    }

    fn config(p: usize) -> ModelConfig {
        ModelConfig {
            n_workers: p,
            resample_alpha: false,
            ..ModelConfig::default()
        }
    }

    fn prev(counts: &[usize]) -> GlobalState {
        GlobalState::from_clusters(
            counts
                .iter()
                .enumerate()
                .map(|(j, &c)| cluster(j as u64, c, vec![c as u64, 1]))
                .collect(),
            1.0,
        )
    }

    fn msg(worker: usize, counts: Vec<usize>, new: Vec<ClusterState>) -> SyncMessage {
        let suffstats = counts.iter().map(|&c| vec![c as u64, 0]).collect();
        SyncMessage {
            worker_id: worker,
            counts,
            suffstats,
            new_features: new,
        }
    }

    #[test]
    fn unchanged_counts_keep_the_feature_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = prev(&[3, 4]);
        let msgs = vec![msg(0, vec![1, 4], vec![]), msg(1, vec![2, 0], vec![])];
        let (next, plan) = synchronize(msgs, &g, &config(2), &mut rng).unwrap();
        let ids: Vec<_> = next.clusters.iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![ClusterId(0), ClusterId(1)]);
        assert_eq!(next.clusters[0].count, 3);
        assert_eq!(next.clusters[1].count, 4);
        assert_eq!(plan.global, vec![Some(0), Some(1)]);
        assert_eq!(next.pi.len(), 3);
        assert!((next.pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(next.proposer < 2);
    }

    #[test]
    fn new_features_are_appended_without_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = prev(&[5]);
        let msgs = vec![
            msg(1, vec![2], vec![cluster(900, 1, vec![1, 0])]),
            msg(0, vec![1], vec![cluster(901, 1, vec![1, 0])]),
        ];
        let (next, plan) = synchronize(msgs, &g, &config(2), &mut rng).unwrap();
        assert_eq!(next.clusters.len(), 3);
        // worker 0's feature is numbered first regardless of arrival order
        assert_eq!(plan.local, vec![vec![Some(1)], vec![Some(2)]]);
        assert_eq!(next.clusters[1].id, ClusterId(1));
        assert_eq!(next.clusters[2].id, ClusterId(2));
    }

    #[test]
    fn empty_features_are_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = prev(&[2, 2, 2]);
        let msgs = vec![msg(0, vec![3, 0, 1], vec![]), msg(1, vec![1, 0, 1], vec![])];
        let (next, plan) = synchronize(msgs, &g, &config(2), &mut rng).unwrap();
        assert_eq!(plan.global, vec![Some(0), None, Some(1)]);
        assert_eq!(next.clusters.len(), 2);
        assert_eq!(next.clusters[1].id, ClusterId(2));
    }

    #[test]
    fn missing_worker_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = prev(&[2]);
        let r = synchronize(vec![msg(0, vec![2], vec![])], &g, &config(2), &mut rng);
        assert!(matches!(r, Err(Error::Sync(_))));
        let r = synchronize(
            vec![msg(0, vec![1], vec![]), msg(0, vec![1], vec![])],
            &g,
            &config(2),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Sync(_))));
    }

    #[test]
    fn weights_have_dirichlet_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = prev(&[8, 2]);
        let reps = 40_000;
        let mut mean = [0.0; 3];
        for _ in 0..reps {
            let msgs = vec![msg(0, vec![8, 2], vec![])];
            let (next, _) = synchronize(msgs, &g, &config(1), &mut rng).unwrap();
            for (m, p) in mean.iter_mut().zip(&next.pi) {
                *m += p / reps as f64;
            }
        }
        for (m, e) in mean.iter().zip([8.0 / 11.0, 2.0 / 11.0, 1.0 / 11.0]) {
            assert!((m - e).abs() < 0.005, "{m} vs {e}");
        }
    }

    #[test]
    fn concentration_update_targets_its_posterior() {
        // p(alpha | k, n) ∝ Gamma(alpha; 1, 1) alpha^k Gamma(alpha) / Gamma(alpha + n)
        let (k, n, shape, rate) = (4usize, 30usize, 1.0, 1.0);
        let log_post = |a: f64| {
            (shape - 1.0) * a.ln() - rate * a + k as f64 * a.ln() + ln_gamma(a) - ln_gamma(a + n as f64)
        };
        let h = 1e-3;
        let (mut z, mut m1) = (0.0, 0.0);
        let mut a = h / 2.0;
        while a < 40.0 {
            let p = log_post(a).exp();
            z += p * h;
            m1 += a * p * h;
            a += h;
        }
        let expected_mean = m1 / z;

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut alpha = 1.0;
        let steps = 200_000;
        let mut acc = 0.0;
        for _ in 0..steps {
            alpha = resample_concentration(alpha, k, n, shape, rate, &mut rng);
            acc += alpha;
        }
        let mean = acc / steps as f64;
        assert!((mean - expected_mean).abs() < 0.02 * expected_mean, "{mean} vs {expected_mean}");
    }
}
