#![allow(dead_code)]

use cookscale_core::{Cluster, ClusteredData, CrossSectionData};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Intercept plus `p - 1` standard normal covariates, responses from a
/// unit-coefficient model with standard normal errors.
pub fn random_lm(rng: &mut ChaCha8Rng, n: usize, p: usize) -> CrossSectionData {
    let x = DMatrix::from_fn(n, p, |_, j| {
        if j == 0 {
            1.0
        } else {
            rng.sample(StandardNormal)
        }
    });
    let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = &x * DVector::from_element(p, 1.0) + noise;
    CrossSectionData::new(y, x, None).unwrap()
}

/// Sorted random subset of `0..n` with size in `1..=max`.
pub fn random_subset(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    let k = rng.gen_range(1..=max);
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Random-intercept data with `x_ij = (1, t_j)`.
pub fn random_lmm(
    rng: &mut ChaCha8Rng,
    n: usize,
    beta: [f64; 2],
    sb: f64,
    sy: f64,
) -> ClusteredData {
    let clusters = (0..n)
        .map(|i| {
            let m = rng.gen_range(1..=5);
            let x = DMatrix::from_fn(m, 2, |j, k| if k == 0 { 1.0 } else { j as f64 });
            let b: f64 = sb * rng.sample::<f64, _>(StandardNormal);
            let y = DVector::from_fn(m, |j, _| {
                beta[0] + beta[1] * j as f64 + b + sy * rng.sample::<f64, _>(StandardNormal)
            });
            Cluster::new(format!("c{i}"), x, y)
        })
        .collect();
    ClusteredData::new(clusters).unwrap()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Fraction of `sample` strictly above `t`.
pub fn survival(sample: &[f64], t: f64) -> f64 {
    sample.iter().filter(|&&x| x > t).count() as f64 / sample.len() as f64
}
