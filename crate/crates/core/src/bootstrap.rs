//! Parametric bootstrap calibration of Cook's distance.
//!
//! Replicate responses are simulated from the fitted model with the design
//! (covariates, cluster sizes) held fixed in conditional mode, or resampled
//! in unconditional mode. Each replicate is keyed by its index on a
//! counter-based stream, and results are gathered in index order, so the
//! output is independent of the number of worker threads.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::first_order_distances;
use crate::data::{Cluster, ClusteredData, CrossSectionData, Dataset};
use crate::deletion::{exact_distances, SubsetIndex};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{em_estimate, fit_lmm_em, fit_ols, FitResult, Interest, Theta, ThetaLm};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Refit the model on each replicate and delete by refitting.
    Exact,
    /// First-order distances on each replicate, without deletion refits.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub mode: BootstrapMode,
    pub conditional: bool,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            mode: BootstrapMode::Exact,
            conditional: true,
            seed: 0,
        }
    }
}

/// Location and scale of one subset's replicate distances.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSummary {
    pub subset_id: String,
    pub replicates: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    /// Median absolute deviation from the median (unscaled).
    pub mstd: f64,
    pub replicate_cds: Vec<f64>,
}

impl BootstrapSummary {
    /// Replicates standardised by this subset's own mean and standard deviation.
    pub fn standardized(&self) -> Vec<f64> {
        self.replicate_cds
            .iter()
            .map(|c| (c - self.mean) / self.std)
            .collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean, sample standard deviation, median and MAD of replicate distances.
pub fn summarize(subset_id: impl Into<String>, cds: Vec<f64>) -> Result<BootstrapSummary> {
    let subset_id = subset_id.into();
    let s = cds.len();
    if s < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 replicates, got {s}"
        )));
    }
    if cds.iter().any(|c| !c.is_finite()) {
        return Err(Error::Invalid(format!(
            "non-finite replicate distance for subset {subset_id}"
        )));
    }
    let mean = cds.iter().sum::<f64>() / s as f64;
    let var = cds.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
    let std = var.sqrt();
    if std <= 1e-14 * mean.abs() || std == 0.0 {
        return Err(Error::DegenerateReplicates(subset_id));
    }
    let med = median(&cds);
    let deviations: Vec<f64> = cds.iter().map(|c| (c - med).abs()).collect();
    let mstd = median(&deviations);
    Ok(BootstrapSummary {
        subset_id,
        replicates: s,
        mean,
        std,
        median: med,
        mstd,
        replicate_cds: cds,
    })
}

/// `((cd - mean)/std, (cd - median)/mstd)`.
pub fn scaled_distances(cd: f64, summary: &BootstrapSummary) -> Result<(f64, f64)> {
    if !(summary.std > 0.0) || !(summary.mstd > 0.0) {
        return Err(Error::ZeroSpread);
    }
    Ok((
        (cd - summary.mean) / summary.std,
        (cd - summary.median) / summary.mstd,
    ))
}

/// Draws one synthetic data set from the fitted model.
///
/// Conditional replicates keep the design bit-for-bit; unconditional ones
/// resample rows or clusters with replacement first.
pub fn simulate_replicate(
    data: &Dataset,
    fit: &FitResult,
    conditional: bool,
    seed: u64,
    replicate_index: u64,
) -> Result<Dataset> {
    let mut rng = rng::stream(seed, domain::REPLICATE, replicate_index);
    match (data, &fit.theta_hat) {
        (Dataset::Lm(d), Theta::Lm(t)) => {
            let sd = t.sigma2.sqrt();
            if conditional {
                let mean = d.x() * &t.beta;
                let y = DVector::from_fn(d.n(), |i, _| {
                    mean[i]
                        + sd * <StandardNormal as Distribution<f64>>::sample(
                            &StandardNormal,
                            &mut rng,
                        )
                });
                return d.with_response(y).map(Dataset::Lm);
            }
            for _ in 0..1000 {
                let rows: Vec<usize> = (0..d.n()).map(|_| rng.gen_range(0..d.n())).collect();
                let (_, x) = d.take_rows_unchecked(&rows);
                let mean = &x * &t.beta;
                let y = DVector::from_fn(d.n(), |i, _| {
                    mean[i]
                        + sd * <StandardNormal as Distribution<f64>>::sample(
                            &StandardNormal,
                            &mut rng,
                        )
                });
                match CrossSectionData::new(y, x, None) {
                    Ok(r) => return Ok(Dataset::Lm(r)),
                    Err(Error::RankDeficientDesign { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Invalid(
                "could not resample a full-rank design".into(),
            ))
        }
        (Dataset::Lmm(d), Theta::Lmm(t)) => {
            let b_dist = Normal::new(0.0, t.sigma_b2.sqrt())
                .map_err(|e| Error::Invalid(format!("random-intercept variance: {e}")))?;
            let e_sd = t.sigma_y2.sqrt();
            let draw = |x: &nalgebra::DMatrix<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
                let b = b_dist.sample(rng);
                let mean = x * &t.beta;
                DVector::from_fn(x.nrows(), |j, _| {
                    mean[j]
                        + b
                        + e_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                })
            };
            if conditional {
                let ys = d.clusters().iter().map(|c| draw(&c.x, &mut rng)).collect();
                return d.with_responses(ys).map(Dataset::Lmm);
            }
            for _ in 0..1000 {
                let n = d.n_clusters();
                let clusters: Vec<Cluster> = (0..n)
                    .map(|k| {
                        let src = &d.clusters()[rng.gen_range(0..n)];
                        let y = draw(&src.x, &mut rng);
                        Cluster::new((k + 1).to_string(), src.x.clone(), y)
                    })
                    .collect();
                match ClusteredData::new(clusters) {
                    Ok(r) => return Ok(Dataset::Lmm(r)),
                    Err(Error::RankDeficientDesign { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Invalid(
                "could not resample a full-rank design".into(),
            ))
        }
        _ => Err(Error::DimensionMismatch(
            "fit does not match the data layout".into(),
        )),
    }
}

/// Parameter value at which first-order replicate distances are evaluated.
///
/// Coefficients are re-estimated on the replicate. In the linear model the
/// variance stays at the fitted value, which makes the first-order distance
/// the quadratic form in the replicate residuals. In the mixed model the
/// variance components set the GLS weights of the coefficients, so they are
/// re-estimated too (EM warm-started at the fit); no deletion refits are needed.
pub fn replicate_theta(data: &Dataset, fit: &FitResult) -> Result<Theta> {
    match (data, &fit.theta_hat) {
        (Dataset::Lm(d), Theta::Lm(t)) => {
            let beta = linalg::least_squares(d.x(), d.y())?;
            let mut theta = Theta::Lm(ThetaLm {
                beta,
                sigma2: t.sigma2,
            });
            if fit.interest == Interest::Full {
                let resid = d.y() - d.x() * theta.beta();
                let sigma2 = resid.norm_squared() / d.n() as f64;
                if sigma2 > 0.0 {
                    theta = Theta::Lm(ThetaLm {
                        beta: theta.beta().clone(),
                        sigma2,
                    });
                }
            }
            Ok(theta)
        }
        (Dataset::Lmm(d), Theta::Lmm(t)) => {
            let (theta, ..) = em_estimate(d, &fit.em, Some(t))?;
            Ok(Theta::Lmm(theta))
        }
        _ => Err(Error::DimensionMismatch(
            "fit does not match the data layout".into(),
        )),
    }
}

/// Distances of every subset on one replicate.
pub fn replicate_distances(
    replicate: &Dataset,
    fit: &FitResult,
    subsets: &[SubsetIndex],
    mode: BootstrapMode,
) -> Result<Vec<f64>> {
    match mode {
        BootstrapMode::Exact => {
            let opts = fit.options();
            let refit = match (replicate, &fit.theta_hat) {
                (Dataset::Lm(d), _) => fit_ols(d, &opts)?,
                (Dataset::Lmm(d), Theta::Lmm(t)) => fit_lmm_em(d, &opts, Some(t))?,
                _ => {
                    return Err(Error::DimensionMismatch(
                        "fit does not match the data layout".into(),
                    ))
                }
            };
            exact_distances(replicate, &refit, subsets)
        }
        BootstrapMode::FirstOrder => {
            let theta = replicate_theta(replicate, fit)?;
            first_order_distances(replicate, &theta, fit, subsets)
        }
    }
}

/// Replicate distances for every subset, one row per replicate, in index order.
pub fn replicate_matrix(
    data: &Dataset,
    fit: &FitResult,
    subsets: &[SubsetIndex],
    config: &BootstrapConfig,
) -> Result<Vec<Vec<f64>>> {
    (0..config.replicates as u64)
        .into_par_iter()
        .map(|s| {
            let replicate = simulate_replicate(data, fit, config.conditional, config.seed, s)?;
            replicate_distances(&replicate, fit, subsets, config.mode)
        })
        .collect()
}

/// Empirical mean, standard deviation, median and MAD of the replicate
/// distances for each subset.
pub fn bootstrap_summaries(
    data: &Dataset,
    fit: &FitResult,
    subsets: &[SubsetIndex],
    config: &BootstrapConfig,
) -> Result<Vec<BootstrapSummary>> {
    if config.replicates < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 replicates, got {}",
            config.replicates
        )));
    }
    let rows = replicate_matrix(data, fit, subsets, config)?;
    subsets
        .iter()
        .enumerate()
        .map(|(k, s)| summarize(s.label(data), rows.iter().map(|r| r[k]).collect()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InfluenceProbabilities {
    /// Share of the subset's own standardised replicates at or below its observed value.
    pub p_a: f64,
    /// Same share over the pooled replicates of all subsets.
    pub p_b: f64,
    /// Share of the other subsets whose observed distance is at or below this one.
    pub p_c: Option<f64>,
}

/// Calibration probabilities; ties count as "at or below".
pub fn influence_probabilities(
    observed_scd1: &[f64],
    replicate_scd1: &[Vec<f64>],
    observed_cd: &[f64],
) -> Result<Vec<InfluenceProbabilities>> {
    let k = observed_scd1.len();
    if replicate_scd1.len() != k || observed_cd.len() != k {
        return Err(Error::DimensionMismatch(
            "one entry per subset is required".into(),
        ));
    }
    let mut pooled: Vec<f64> = replicate_scd1.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let at_or_below = |sorted: &[f64], v: f64| sorted.partition_point(|&x| x <= v);
    Ok((0..k)
        .map(|i| {
            let own = &replicate_scd1[i];
            let p_a = if own.is_empty() {
                f64::NAN
            } else {
                own.iter().filter(|&&x| x <= observed_scd1[i]).count() as f64 / own.len() as f64
            };
            let p_b = if pooled.is_empty() {
                f64::NAN
            } else {
                at_or_below(&pooled, observed_scd1[i]) as f64 / pooled.len() as f64
            };
            let p_c = (k > 1).then(|| {
                let count = (0..k)
                    .filter(|&j| j != i && observed_cd[j] <= observed_cd[i])
                    .count();
                count as f64 / (k - 1) as f64
            });
            InfluenceProbabilities { p_a, p_b, p_c }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn summary_statistics() {
        let s = summarize("a", vec![1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        assert_relative_eq!(s.mean, 4.0);
        assert_relative_eq!(s.median, 3.0);
        // |x - 3| = 2, 1, 0, 1, 7 -> median 1.
        assert_relative_eq!(s.mstd, 1.0);
        assert_relative_eq!(s.std, (50.0f64 / 4.0).sqrt());
    }

    #[test]
    fn constant_replicates_are_degenerate() {
        assert!(matches!(
            summarize("z", vec![0.3; 10]),
            Err(Error::DegenerateReplicates(_))
        ));
        assert!(matches!(summarize("z", vec![0.3]), Err(Error::Invalid(_))));
    }

    #[test]
    fn scaled_distance_definitions() {
        let s = summarize("a", vec![1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        assert_eq!(scaled_distances(s.mean, &s).unwrap().0, 0.0);
        assert_relative_eq!(
            scaled_distances(s.mean + 2.0 * s.std, &s).unwrap().0,
            2.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(scaled_distances(5.0, &s).unwrap().1, 2.0, epsilon = 1e-14);
        let flat_mad = summarize("b", vec![1.0, 1.0, 1.0, 5.0]).unwrap();
        assert!(matches!(
            scaled_distances(1.0, &flat_mad),
            Err(Error::ZeroSpread)
        ));
    }

    #[test]
    fn probabilities_and_ties() {
        let reps = vec![vec![0.0, 1.0, 2.0, 3.0], vec![-1.0, 5.0, 6.0, 7.0]];
        let p = influence_probabilities(&[-5.0, 7.0], &reps, &[0.2, 0.9]).unwrap();
        assert_eq!(p[0].p_a, 0.0);
        assert_eq!(p[1].p_a, 1.0);
        assert_eq!(p[0].p_b, 0.0);
        assert_eq!(p[1].p_b, 1.0);
        assert_eq!(p[0].p_c, Some(0.0));
        assert_eq!(p[1].p_c, Some(1.0));
        let p = influence_probabilities(&[3.0], &[vec![0.0, 1.0, 2.0, 3.0]], &[1.0]).unwrap();
        assert_eq!(p[0].p_a, 1.0);
        assert_eq!(p[0].p_c, None);
    }
}
