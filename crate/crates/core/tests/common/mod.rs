#![allow(dead_code)]

use std::collections::HashMap;

use accel_dpmm::data::{generate_synthetic, SyntheticSpec};
use accel_dpmm::CountDataset;
use statrs::function::gamma::ln_gamma;

/// The small dataset used by the partition-posterior checks.
pub fn tiny_dataset() -> CountDataset {
    let spec = SyntheticSpec {
        dim: 3,
        n_train: 5,
        n_test: 0,
        alpha: 1.0,
        gamma: 1.0,
        trials: 4,
        seed: 11,
    };
    generate_synthetic(&spec).unwrap().train
}

/// Relabels in order of first appearance.
pub fn canonical<T: PartialEq + Copy>(labels: &[T]) -> Vec<u8> {
    let mut seen: Vec<T> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(k) => k as u8,
            None => {
                seen.push(*l);
                (seen.len() - 1) as u8
            }
        })
        .collect()
}

/// Every set partition of `0..n` as a restricted growth string.
pub fn set_partitions(n: usize) -> Vec<Vec<u8>> {
    fn rec(prefix: &mut Vec<u8>, n: usize, out: &mut Vec<Vec<u8>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |&m| m + 1);
        for k in 0..=next {
            prefix.push(k);
            rec(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), n, &mut out);
    out
}

/// Joint Dirichlet-multinomial probability of the rows in one block,
/// multinomial coefficients included, written out from Gamma functions.
pub fn ln_block_marginal(data: &CountDataset, block: &[usize], gamma: f64) -> f64 {
    let d = data.dim();
    let mut s = vec![0.0; d];
    let mut total = 0.0;
    let mut coef = 0.0;
    for &i in block {
        let row = data.row(i);
        let n: f64 = row.iter().map(|&c| c as f64).sum();
        coef += ln_gamma(n + 1.0) - row.iter().map(|&c| ln_gamma(c as f64 + 1.0)).sum::<f64>();
        for (a, &c) in s.iter_mut().zip(row) {
            *a += c as f64;
        }
        total += n;
    }
    coef + ln_gamma(d as f64 * gamma) - ln_gamma(d as f64 * gamma + total)
        + s.iter().map(|&x| ln_gamma(gamma + x) - ln_gamma(gamma)).sum::<f64>()
}

/// Exact posterior over partitions: CRP prior times block marginals.
pub fn partition_posterior(data: &CountDataset, alpha: f64, gamma: f64) -> HashMap<Vec<u8>, f64> {
    let n = data.len();
    let parts = set_partitions(n);
    let ln_post: Vec<f64> = parts
        .iter()
        .map(|p| {
            let k = *p.iter().max().unwrap() as usize + 1;
            let mut lp = k as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(alpha + n as f64);
            for b in 0..k {
                let block: Vec<usize> = (0..n).filter(|&i| p[i] as usize == b).collect();
                lp += ln_gamma(block.len() as f64) + ln_block_marginal(data, &block, gamma);
            }
            lp
        })
        .collect();
    let max = ln_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = ln_post.iter().map(|l| (l - max).exp()).sum();
    parts
        .into_iter()
        .zip(ln_post)
        .map(|(p, l)| (p, (l - max).exp() / z))
        .collect()
}

pub struct PartitionCounter {
    counts: HashMap<Vec<u8>, usize>,
    total: usize,
}

impl PartitionCounter {
    pub fn new() -> Self {
        Self { counts: HashMap::new(), total: 0 }
    }

    pub fn add<T: PartialEq + Copy>(&mut self, labels: &[T]) {
        *self.counts.entry(canonical(labels)).or_default() += 1;
        self.total += 1;
    }

    pub fn total_variation(&self, exact: &HashMap<Vec<u8>, f64>) -> f64 {
        let mut tv = 0.0;
        for (p, &q) in exact {
            let e = *self.counts.get(p).unwrap_or(&0) as f64 / self.total as f64;
            tv += (e - q).abs();
        }
        // mass on partitions the oracle does not know about
        for (p, &c) in &self.counts {
            if !exact.contains_key(p) {
                tv += c as f64 / self.total as f64;
            }
        }
        tv / 2.0
    }
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((((i + 1) as f64) / n - f).abs())
        })
        .fold(0.0, f64::max)
}
