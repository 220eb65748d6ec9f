//! Degree of perturbation `P(I|M)`: the Kullback-Leibler divergence between
//! the fitted model and the model whose deleted block is frozen at the
//! reference parameter, averaged over a Gaussian prior around that reference.
//!
//! Units (rows for the linear model, clusters for the mixed model) are
//! conditionally independent by construction, so the divergence of a subset
//! is the sum of per-unit divergences.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{ClusteredData, CrossSectionData, Dataset};
use crate::deletion::SubsetIndex;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{information_matrices, FitResult, Interest, Theta};
use crate::rng::{self, domain};

/// Closed-form value for one row with the approximation reported alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmPerturbation {
    pub value: f64,
    pub approx: f64,
}

/// Prior covariance of the coefficients: the coefficient block of `Sigma*`.
pub fn prior_cov_beta(fit: &FitResult) -> DMatrix<f64> {
    let p = fit.theta_hat.beta().len();
    fit.sigma_star.view((0, 0), (p, p)).into_owned()
}

/// Fixed-covariate linear model, one row.
///
/// The coefficient term `x_i^T Sigma*_bb x_i / (2 sigma2)` is exact. Under
/// full-parameter interest the variance term contributes `1/(2n)`.
pub fn perturb_lm_fixed(
    data: &CrossSectionData,
    fit: &FitResult,
    i: usize,
    interest: Interest,
) -> Result<LmPerturbation> {
    let Theta::Lm(t) = &fit.theta_hat else {
        return Err(Error::DimensionMismatch("linear-model fit required".into()));
    };
    if i >= data.n() {
        return Err(Error::Invalid(format!("row {} out of range", i + 1)));
    }
    let cov = prior_cov_beta(fit);
    let x = data.x().row(i).transpose();
    let beta_term = x.dot(&(&cov * &x)) / (2.0 * t.sigma2);
    let xtx = data.x().transpose() * data.x();
    let leverage = x.dot(&linalg::spd_solve_vec(&xtx, &x, "X^T X")?);
    let n = data.n() as f64;
    Ok(match interest {
        Interest::Beta => LmPerturbation {
            value: beta_term,
            approx: 0.5 * leverage,
        },
        Interest::Full => LmPerturbation {
            value: beta_term + 0.5 / n,
            approx: 0.5 / n + 0.5 * leverage,
        },
    })
}

/// Random-covariate linear model, one row: `(1 + p)/(2n)` or `p/(2n)`.
pub fn perturb_lm_random(n: usize, p: usize, interest: Interest) -> Result<f64> {
    if p == 0 || n <= p {
        return Err(Error::Invalid(format!(
            "need n > p >= 1 (n = {n}, p = {p})"
        )));
    }
    let (n, p) = (n as f64, p as f64);
    Ok(match interest {
        Interest::Beta => p / (2.0 * n),
        Interest::Full => (1.0 + p) / (2.0 * n),
    })
}

/// Random-covariate linear model, any subset of `n_subset` rows.
pub fn perturb_lm_random_subset(
    n: usize,
    p: usize,
    n_subset: usize,
    interest: Interest,
) -> Result<f64> {
    Ok(n_subset as f64 * perturb_lm_random(n, p, interest)?)
}

/// Random-intercept model, one cluster, variance components fixed:
/// `0.5 tr(x_i^T R_i^{-1} x_i Sigma*_bb)`.
pub fn perturb_lmm_cluster(data: &ClusteredData, fit: &FitResult, i: usize) -> Result<f64> {
    let Theta::Lmm(t) = &fit.theta_hat else {
        return Err(Error::DimensionMismatch("mixed-model fit required".into()));
    };
    if !(t.sigma_y2 > 0.0) || t.sigma_b2 < 0.0 {
        return Err(Error::SingularCovariance);
    }
    let c = data
        .clusters()
        .get(i)
        .ok_or_else(|| Error::Invalid(format!("cluster position {i} out of range")))?;
    let rinv = crate::model::cluster_precision(c.size(), t.sigma_b2, t.sigma_y2);
    let info = c.x.transpose() * rinv * &c.x;
    Ok(0.5 * (info * prior_cov_beta(fit)).trace())
}

/// Closed-form perturbation of a subset and its approximation, by additivity.
pub fn closed_form(data: &Dataset, fit: &FitResult, units: &[usize]) -> Result<(f64, f64)> {
    match data {
        Dataset::Lm(d) => {
            let mut exact = Vec::with_capacity(units.len());
            let mut approx = Vec::with_capacity(units.len());
            for &i in units {
                let v = perturb_lm_fixed(d, fit, i, fit.interest)?;
                exact.push(v.value);
                approx.push(v.approx);
            }
            Ok((exact.iter().sum(), approx.iter().sum()))
        }
        Dataset::Lmm(d) => {
            let total = units
                .iter()
                .map(|&i| perturb_lmm_cluster(d, fit, i))
                .sum::<Result<f64>>()?;
            Ok((total, total))
        }
    }
}

/// Sum of per-unit values over a subset of conditionally independent units.
pub fn perturb_additive(values: &[f64], units: &[usize]) -> Result<f64> {
    units
        .iter()
        .map(|&i| {
            values
                .get(i)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("unit {i} has no perturbation value")))
        })
        .sum()
}

/// Prior and sampling settings for the Monte Carlo evaluator.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    pub interest: Interest,
    /// Reference parameter `theta*`; nuisance parameters stay fixed at its values.
    pub prior_mean: Theta,
    /// Prior covariance of the active parameters.
    pub prior_cov: DMatrix<f64>,
    pub mc_draws: usize,
}

impl PerturbationSpec {
    pub fn new(
        interest: Interest,
        prior_mean: Theta,
        prior_cov: DMatrix<f64>,
        mc_draws: usize,
    ) -> Result<Self> {
        let q = prior_mean.dim(interest);
        if prior_cov.shape() != (q, q) {
            return Err(Error::DimensionMismatch(format!(
                "prior covariance is {}x{}, expected {q}x{q}",
                prior_cov.nrows(),
                prior_cov.ncols()
            )));
        }
        linalg::check_spd(&prior_cov, "prior covariance")?;
        if mc_draws == 0 {
            return Err(Error::Invalid("mc_draws must be at least 1".into()));
        }
        Ok(Self {
            interest,
            prior_mean,
            prior_cov,
            mc_draws,
        })
    }

    /// Prior centred at the fit with the inverse-information covariance.
    pub fn from_fit(
        data: &Dataset,
        fit: &FitResult,
        interest: Interest,
        mc_draws: usize,
    ) -> Result<Self> {
        let cov = if interest == fit.interest {
            fit.sigma_star.clone()
        } else {
            match interest {
                Interest::Beta => prior_cov_beta(fit),
                Interest::Full => {
                    let info =
                        information_matrices(data, &fit.theta_hat, Interest::Full, fit.info_mode)?;
                    linalg::spd_inverse(&linalg::symmetrize(&info.total), "full information")?
                }
            }
        };
        Self::new(interest, fit.theta_hat.clone(), cov, mc_draws)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `P(I|M)` for a validated subset.
pub fn perturb_mc(
    data: &Dataset,
    subset: &SubsetIndex,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<McEstimate> {
    perturb_mc_units(data, subset.ids(), spec, seed)
}

/// Monte Carlo estimate over arbitrary unit positions (the empty set gives zero).
///
/// Draws come in antithetic pairs `theta* +/- d`. Variance parameters drawn
/// outside the parameter space are rejected, which truncates the prior.
pub fn perturb_mc_units(
    data: &Dataset,
    units: &[usize],
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<McEstimate> {
    if spec.prior_mean.kind() != model_kind(data) {
        return Err(Error::NotGaussianModel(
            "prior does not match the data model".into(),
        ));
    }
    if let Some(&bad) = units.iter().find(|&&u| u >= data.n_units()) {
        return Err(Error::Invalid(format!("unit {bad} out of range")));
    }
    if units.is_empty() {
        return Ok(McEstimate {
            estimate: 0.0,
            std_error: 0.0,
        });
    }
    let chol = linalg::cholesky(&spec.prior_cov, "prior covariance")?;
    let lower = chol.l();
    let centre = spec.prior_mean.active(spec.interest);
    let q = centre.len();
    let pairs = spec.mc_draws.div_ceil(2).max(1);

    let values = (0..pairs as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, domain::PERTURBATION_MC, k);
            for _ in 0..10_000 {
                let z = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
                let d = &lower * z;
                let plus = spec.prior_mean.with_active(spec.interest, &(&centre + &d));
                let minus = spec.prior_mean.with_active(spec.interest, &(&centre - &d));
                if plus.is_admissible() && minus.is_admissible() {
                    let a = block_kl(data, units, &plus, &spec.prior_mean)?;
                    let b = block_kl(data, units, &minus, &spec.prior_mean)?;
                    return Ok(0.5 * (a + b));
                }
            }
            Err(Error::Invalid(
                "prior puts almost no mass on admissible variances".into(),
            ))
        })
        .collect::<Result<Vec<f64>>>()?;

    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: mean,
        std_error,
    })
}

fn model_kind(data: &Dataset) -> crate::model::ModelKind {
    match data {
        Dataset::Lm(_) => crate::model::ModelKind::Lm,
        Dataset::Lmm(_) => crate::model::ModelKind::Lmm,
    }
}

/// `KL(p(Y_I | theta) || p(Y_I | theta*))` summed over independent units.
fn block_kl(data: &Dataset, units: &[usize], theta: &Theta, reference: &Theta) -> Result<f64> {
    let mut total = 0.0;
    match (data, theta, reference) {
        (Dataset::Lm(d), Theta::Lm(t), Theta::Lm(r)) => {
            let ratio = t.sigma2 / r.sigma2;
            let db = &t.beta - &r.beta;
            for &i in units {
                let shift = d.x().row(i).dot(&db.transpose());
                total += 0.5 * (ratio - 1.0 - ratio.ln() + shift * shift / r.sigma2);
            }
        }
        (Dataset::Lmm(d), Theta::Lmm(t), Theta::Lmm(r)) => {
            let db = &t.beta - &r.beta;
            for &i in units {
                let c = &d.clusters()[i];
                let m = c.size() as f64;
                let d_ref = r.sigma_y2 + m * r.sigma_b2;
                let d_new = t.sigma_y2 + m * t.sigma_b2;
                let c_ref = r.sigma_b2 / d_ref;
                // tr(R*^{-1} R) for compound-symmetric R, R*.
                let tr_rinv = (m - m * c_ref) / r.sigma_y2;
                let trace = t.sigma_y2 * tr_rinv + t.sigma_b2 * m / d_ref;
                let delta = &c.x * &db;
                let s = delta.sum();
                let quad = (delta.norm_squared() - c_ref * s * s) / r.sigma_y2;
                let logdet_ref = (m - 1.0) * r.sigma_y2.ln() + d_ref.ln();
                let logdet_new = (m - 1.0) * t.sigma_y2.ln() + d_new.ln();
                total += 0.5 * (trace - m + quad + logdet_ref - logdet_new);
            }
        }
        _ => {
            return Err(Error::NotGaussianModel(
                "parameter type does not match the data".into(),
            ))
        }
    }
    Ok(total)
}
