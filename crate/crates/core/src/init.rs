//! Initial partitions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::CountDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Initialization {
    /// Every observation in one cluster.
    SingleCluster,
    /// Observations spread uniformly at random over `clusters` clusters.
    Random { clusters: usize },
    /// Lloyd's k-means on the normalized count vectors.
    KMeans { clusters: usize },
}

impl Default for Initialization {
    fn default() -> Self {
        Initialization::SingleCluster
    }
}

/// Cluster labels `0..K` for every row, with no empty label.
pub fn initial_labels<R: Rng + ?Sized>(
    data: &CountDataset,
    init: Initialization,
    rng: &mut R,
) -> Vec<usize> {
    let n = data.len();
    let raw = match init {
        Initialization::SingleCluster => vec![0; n],
        Initialization::Random { clusters } => {
            let k = clusters.clamp(1, n.max(1));
            // every label used at least once, the rest uniform
            let mut labels: Vec<usize> = (0..n)
                .map(|i| if i < k { i } else { rng.random_range(0..k) })
                .collect();
            labels.shuffle(rng);
            labels
        }
        Initialization::KMeans { clusters } => kmeans(data, clusters.clamp(1, n.max(1)), rng),
    };
    compact(raw)
}

fn compact(labels: Vec<usize>) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .into_iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans<R: Rng + ?Sized>(data: &CountDataset, k: usize, rng: &mut R) -> Vec<usize> {
    const MAX_ITERS: usize = 25;
    let n = data.len();
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let t = data.total(i) as f64;
            data.row(i).iter().map(|&c| f64::from(c) / t).collect()
        })
        .collect();

    // k-means++ seeding
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        centers
            .iter()
            .enumerate()
            .map(|(j, c)| (j, sq_dist(p, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j)
            .unwrap()
    };
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..MAX_ITERS {
        let dim = data.dim();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sizes[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if sizes[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / sizes[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}
