//! Maximum-likelihood fitting for the linear model and the Gaussian
//! random-intercept linear mixed model, plus per-unit scores and
//! information matrices.
//!
//! Parameters are split into the regression coefficients `beta` and the
//! variance block (`sigma2` for the linear model, `(sigma_b2, sigma_y2)` for
//! the mixed model). [`Interest::Beta`] treats the variance block as a
//! nuisance fixed at its fitted value, so every matrix is `p x p`;
//! [`Interest::Full`] works on the whole vector in the order
//! `(beta, sigma2)` or `(beta, sigma_b2, sigma_y2)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Cluster, ClusteredData, CrossSectionData, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, numerical_rank};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lm,
    Lmm,
}

/// Which parameters the diagnostics are about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interest {
    /// Regression coefficients only; variance parameters fixed at their estimates.
    #[default]
    #[serde(rename = "beta_only")]
    Beta,
    #[serde(rename = "full_theta")]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoMode {
    #[default]
    Observed,
    Expected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLm {
    pub beta: DVector<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLmm {
    pub beta: DVector<f64>,
    pub sigma_b2: f64,
    pub sigma_y2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Theta {
    Lm(ThetaLm),
    Lmm(ThetaLmm),
}

impl Theta {
    pub fn kind(&self) -> ModelKind {
        match self {
            Theta::Lm(_) => ModelKind::Lm,
            Theta::Lmm(_) => ModelKind::Lmm,
        }
    }

    pub fn beta(&self) -> &DVector<f64> {
        match self {
            Theta::Lm(t) => &t.beta,
            Theta::Lmm(t) => &t.beta,
        }
    }

    /// Dimension of the parameter vector the diagnostics operate on.
    pub fn dim(&self, interest: Interest) -> usize {
        let p = self.beta().len();
        match (interest, self) {
            (Interest::Beta, _) => p,
            (Interest::Full, Theta::Lm(_)) => p + 1,
            (Interest::Full, Theta::Lmm(_)) => p + 2,
        }
    }

    pub fn active(&self, interest: Interest) -> DVector<f64> {
        let beta = self.beta();
        match (interest, self) {
            (Interest::Beta, _) => beta.clone(),
            (Interest::Full, Theta::Lm(t)) => {
                DVector::from_iterator(beta.len() + 1, beta.iter().copied().chain([t.sigma2]))
            }
            (Interest::Full, Theta::Lmm(t)) => DVector::from_iterator(
                beta.len() + 2,
                beta.iter().copied().chain([t.sigma_b2, t.sigma_y2]),
            ),
        }
    }

    /// Replaces the active parameters, keeping any nuisance values.
    pub fn with_active(&self, interest: Interest, v: &DVector<f64>) -> Theta {
        let p = self.beta().len();
        let beta = v.rows(0, p).into_owned();
        match (interest, self) {
            (Interest::Beta, Theta::Lm(t)) => Theta::Lm(ThetaLm {
                beta,
                sigma2: t.sigma2,
            }),
            (Interest::Beta, Theta::Lmm(t)) => Theta::Lmm(ThetaLmm {
                beta,
                sigma_b2: t.sigma_b2,
                sigma_y2: t.sigma_y2,
            }),
            (Interest::Full, Theta::Lm(_)) => Theta::Lm(ThetaLm { beta, sigma2: v[p] }),
            (Interest::Full, Theta::Lmm(_)) => Theta::Lmm(ThetaLmm {
                beta,
                sigma_b2: v[p],
                sigma_y2: v[p + 1],
            }),
        }
    }

    /// Whether the variance parameters lie in the parameter space.
    pub fn is_admissible(&self) -> bool {
        match self {
            Theta::Lm(t) => t.sigma2 > 0.0 && t.sigma2.is_finite(),
            Theta::Lmm(t) => t.sigma_y2 > 0.0 && t.sigma_b2 >= 0.0 && t.sigma_y2.is_finite(),
        }
    }

    pub fn param_names(&self, interest: Interest) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.beta().len())
            .map(|j| format!("beta{j}"))
            .collect();
        if interest == Interest::Full {
            match self {
                Theta::Lm(_) => names.push("sigma2".into()),
                Theta::Lmm(_) => names.extend(["sigma_b2".to_string(), "sigma_y2".to_string()]),
            }
        }
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    /// Relative log-likelihood change below which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub interest: Interest,
    pub info_mode: InfoMode,
    pub em: EmOptions,
    /// Overrides the default prior covariance (inverse of `G_n`).
    pub sigma_star: Option<DMatrix<f64>>,
    /// Contrast matrix selecting the parameters of interest (`q x q1`).
    pub interest_selector: Option<DMatrix<f64>>,
}

/// A fitted model together with the weighting matrix used by Cook's distance.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ModelKind,
    pub theta_hat: Theta,
    pub interest: Interest,
    pub info_mode: InfoMode,
    /// Weighting matrix `G_n` over the active parameters.
    pub g_n_theta: DMatrix<f64>,
    /// Prior covariance of the active parameters around `theta_hat`.
    pub sigma_star: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Observed log-likelihood after every EM iteration (starting value first).
    pub loglik_trace: Vec<f64>,
    pub interest_selector: Option<DMatrix<f64>>,
    /// EM settings used for this fit, reused for deletion refits.
    pub em: EmOptions,
}

impl FitResult {
    fn assemble(
        data: &Dataset,
        theta_hat: Theta,
        loglik: f64,
        converged: bool,
        iterations: usize,
        loglik_trace: Vec<f64>,
        opts: &FitOptions,
    ) -> Result<Self> {
        let info = information_matrices(data, &theta_hat, opts.interest, opts.info_mode)?;
        let g = linalg::symmetrize(&info.total);
        let q = g.nrows();
        linalg::check_spd(&g, "weighting matrix G_n")?;
        let sigma_star = match &opts.sigma_star {
            Some(s) => {
                if s.shape() != (q, q) {
                    return Err(Error::DimensionMismatch(format!(
                        "prior covariance is {}x{}, expected {q}x{q}",
                        s.nrows(),
                        s.ncols()
                    )));
                }
                linalg::check_spd(s, "prior covariance")?;
                s.clone()
            }
            None => linalg::spd_inverse(&g, "weighting matrix G_n")?,
        };
        if let Some(l) = &opts.interest_selector {
            if l.nrows() != q || l.ncols() == 0 || l.ncols() > q {
                return Err(Error::DimensionMismatch(format!(
                    "interest selector is {}x{}, expected {q} rows",
                    l.nrows(),
                    l.ncols()
                )));
            }
            if numerical_rank(l) < l.ncols() {
                return Err(Error::Invalid(
                    "interest selector lacks full column rank".into(),
                ));
            }
        }
        Ok(Self {
            model: theta_hat.kind(),
            theta_hat,
            interest: opts.interest,
            info_mode: opts.info_mode,
            g_n_theta: g,
            sigma_star,
            loglik,
            converged,
            iterations,
            loglik_trace,
            interest_selector: opts.interest_selector.clone(),
            em: opts.em,
        })
    }

    pub fn q(&self) -> usize {
        self.g_n_theta.nrows()
    }

    /// Settings that reproduce this fit's interest, weighting and selector.
    pub fn options(&self) -> FitOptions {
        FitOptions {
            interest: self.interest,
            info_mode: self.info_mode,
            em: self.em,
            sigma_star: None,
            interest_selector: self.interest_selector.clone(),
        }
    }

    /// JSON document `{model, theta_hat, g_n_theta, sigma_star, loglik, converged, ...}`.
    pub fn to_json(&self) -> serde_json::Value {
        let theta = match &self.theta_hat {
            Theta::Lm(t) => serde_json::json!({
                "beta": t.beta.iter().collect::<Vec<_>>(),
                "sigma2": t.sigma2,
            }),
            Theta::Lmm(t) => serde_json::json!({
                "beta": t.beta.iter().collect::<Vec<_>>(),
                "sigma_b2": t.sigma_b2,
                "sigma_y2": t.sigma_y2,
            }),
        };
        serde_json::json!({
            "model": self.model,
            "theta_hat": theta,
            "interest": self.interest,
            "parameters": self.theta_hat.param_names(self.interest),
            "info_mode": self.info_mode,
            "g_n_theta": matrix_rows(&self.g_n_theta),
            "sigma_star": matrix_rows(&self.sigma_star),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
        })
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Fits whichever model matches the data layout.
pub fn fit(data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    match data {
        Dataset::Lm(d) => fit_ols(d, opts),
        Dataset::Lmm(d) => fit_lmm_em(d, opts, None),
    }
}

/// Maximum-likelihood estimates for the linear model only (no weighting matrices).
pub fn ols_theta(data: &CrossSectionData) -> Result<ThetaLm> {
    let theta = ols_estimate(data)?;
    let yty = data.y().norm_squared();
    let rss = theta.sigma2 * data.n() as f64;
    if rss <= 1e-20 * yty || rss <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateVariance);
    }
    Ok(theta)
}

/// Least squares without the zero-variance check; deletion refits may
/// legitimately leave an exactly fitted remainder.
pub(crate) fn ols_estimate(data: &CrossSectionData) -> Result<ThetaLm> {
    let rank = numerical_rank(data.x());
    if rank < data.p() {
        return Err(Error::RankDeficientDesign {
            rank,
            cols: data.p(),
        });
    }
    let beta = linalg::least_squares(data.x(), data.y())?;
    let resid = data.y() - data.x() * &beta;
    Ok(ThetaLm {
        beta,
        sigma2: resid.norm_squared() / data.n() as f64,
    })
}

/// Least-squares fit with `sigma2 = RSS / n`.
pub fn fit_ols(data: &CrossSectionData, opts: &FitOptions) -> Result<FitResult> {
    let theta = ols_theta(data)?;
    let n = data.n() as f64;
    let loglik = -0.5 * n * (LN_2PI + theta.sigma2.ln() + 1.0);
    FitResult::assemble(
        &Dataset::Lm(data.clone()),
        Theta::Lm(theta),
        loglik,
        true,
        0,
        vec![loglik],
        opts,
    )
}

/// Per-cluster quantities reused across EM iterations.
struct EmWorkspace {
    x: DMatrix<f64>,
    y: DVector<f64>,
    r: DMatrix<f64>,
    qty: DVector<f64>,
    /// `Q_i^T 1` for each cluster.
    q_ones: Vec<DVector<f64>>,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

impl EmWorkspace {
    fn new(data: &ClusteredData) -> Result<Self> {
        let x = data.stacked_x();
        let y = data.stacked_y();
        let p = data.p();
        let rank = numerical_rank(&x);
        if rank < p {
            return Err(Error::RankDeficientDesign { rank, cols: p });
        }
        let qr = x.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let qty = q.transpose() * &y;
        let sizes = data.sizes();
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut q_ones = Vec::with_capacity(sizes.len());
        let mut row = 0;
        for &m in &sizes {
            offsets.push(row);
            let mut v = DVector::zeros(p);
            for j in row..row + m {
                for k in 0..p {
                    v[k] += q[(j, k)];
                }
            }
            q_ones.push(v);
            row += m;
        }
        Ok(Self {
            x,
            y,
            r,
            qty,
            q_ones,
            offsets,
            sizes,
        })
    }

    fn residual_sums(&self, beta: &DVector<f64>, sums: &mut [f64]) -> f64 {
        let resid = &self.y - &self.x * beta;
        for (i, (&off, &m)) in self.offsets.iter().zip(&self.sizes).enumerate() {
            sums[i] = resid.rows(off, m).sum();
        }
        resid.norm_squared()
    }

    fn loglik(&self, rss: f64, sums: &[f64], sigma_b2: f64, sigma_y2: f64) -> f64 {
        let n_obs = self.y.len() as f64;
        let mut logdet = 0.0;
        let mut shrink = 0.0;
        for (&m, &s) in self.sizes.iter().zip(sums) {
            let m = m as f64;
            let d = sigma_y2 + m * sigma_b2;
            logdet += (m - 1.0) * sigma_y2.ln() + d.ln();
            shrink += sigma_b2 / d * s * s;
        }
        -0.5 * (n_obs * LN_2PI + logdet + (rss - shrink) / sigma_y2)
    }
}

/// ML fit of the random-intercept model by EM.
///
/// The log-likelihood is non-decreasing across iterations. Hitting
/// `max_iter` is not an error: the result carries `converged = false`.
pub fn fit_lmm_em(
    data: &ClusteredData,
    opts: &FitOptions,
    warm_start: Option<&ThetaLmm>,
) -> Result<FitResult> {
    let (theta, loglik, converged, iterations, trace) = em_estimate(data, &opts.em, warm_start)?;
    FitResult::assemble(
        &Dataset::Lmm(data.clone()),
        Theta::Lmm(theta),
        loglik,
        converged,
        iterations,
        trace,
        opts,
    )
}

/// EM estimates without the weighting matrices: `(theta, loglik, converged, iterations, trace)`.
pub fn em_estimate(
    data: &ClusteredData,
    em: &EmOptions,
    warm_start: Option<&ThetaLmm>,
) -> Result<(ThetaLmm, f64, bool, usize, Vec<f64>)> {
    if !(em.tol > 0.0) {
        return Err(Error::Invalid("EM tolerance must be positive".into()));
    }
    let n = data.n_clusters();
    let n_obs = data.total_obs();
    let p = data.p();
    if n < 2 {
        return Err(Error::NonIdentifiable(
            "at least two clusters are required".into(),
        ));
    }
    if data.sizes().iter().all(|&m| m < 2) {
        return Err(Error::NonIdentifiable(
            "every cluster has one observation, so the two variances are confounded".into(),
        ));
    }
    if n_obs <= p + 1 {
        return Err(Error::NonIdentifiable(
            "too few observations for the parameters".into(),
        ));
    }
    let ws = EmWorkspace::new(data)?;
    let mut sums = vec![0.0; n];
    let yty = ws.y.norm_squared();

    let (mut beta, mut sigma_b2, mut sigma_y2) = match warm_start {
        Some(t) if t.beta.len() == p && t.sigma_y2 > 0.0 && t.sigma_b2 >= 0.0 => {
            (t.beta.clone(), t.sigma_b2, t.sigma_y2)
        }
        Some(_) => return Err(Error::DimensionMismatch("EM warm start".into())),
        None => {
            let beta = ws.r.solve_upper_triangular(&ws.qty).ok_or_else(|| {
                Error::NotInvertible("triangular factor of the stacked design".into())
            })?;
            let resid = &ws.y - &ws.x * &beta;
            let mut within = 0.0;
            let mut means = Vec::with_capacity(n);
            for (&off, &m) in ws.offsets.iter().zip(&ws.sizes) {
                let block = resid.rows(off, m);
                let mean = block.sum() / m as f64;
                within += block.iter().map(|r| (r - mean).powi(2)).sum::<f64>();
                means.push(mean);
            }
            let sigma_y2 = within / (n_obs - n) as f64;
            let grand = means.iter().sum::<f64>() / n as f64;
            let between = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / n as f64;
            (beta, between, sigma_y2)
        }
    };
    if !(sigma_y2 > 1e-20 * yty.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateVariance);
    }
    // EM cannot leave the boundary once sigma_b2 is exactly zero.
    sigma_b2 = sigma_b2.max(1e-4 * sigma_y2);

    let mut rss = ws.residual_sums(&beta, &mut sums);
    let mut loglik = ws.loglik(rss, &sums, sigma_b2, sigma_y2);
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    let mut mu = vec![0.0; n];

    while iterations < em.max_iter {
        iterations += 1;
        // E-step: posterior mean and variance of each random intercept.
        let mut sb_next = 0.0;
        let mut post_var_obs = 0.0;
        let mut rhs = ws.qty.clone();
        for i in 0..n {
            let m = ws.sizes[i] as f64;
            let d = sigma_y2 + m * sigma_b2;
            let v = sigma_b2 * sigma_y2 / d;
            mu[i] = sigma_b2 * sums[i] / d;
            sb_next += mu[i] * mu[i] + v;
            post_var_obs += m * v;
            rhs.axpy(-mu[i], &ws.q_ones[i], 1.0);
        }
        // M-step.
        let beta_next = ws.r.solve_upper_triangular(&rhs).ok_or_else(|| {
            Error::NotInvertible("triangular factor of the stacked design".into())
        })?;
        let rss_next = ws.residual_sums(&beta_next, &mut sums);
        let mut centred = rss_next;
        for i in 0..n {
            let m = ws.sizes[i] as f64;
            centred += m * mu[i] * mu[i] - 2.0 * mu[i] * sums[i];
        }
        let sy_next = (centred.max(0.0) + post_var_obs) / n_obs as f64;
        if !(sy_next > 1e-20 * yty.max(f64::MIN_POSITIVE)) {
            return Err(Error::DegenerateVariance);
        }
        beta = beta_next;
        sigma_b2 = (sb_next / n as f64).max(0.0);
        sigma_y2 = sy_next;
        rss = rss_next;
        let next = ws.loglik(rss, &sums, sigma_b2, sigma_y2);
        debug_assert!(
            next >= loglik - 1e-10 * loglik.abs().max(1.0),
            "EM log-likelihood decreased: {loglik} -> {next}"
        );
        let change = (next - loglik).abs() / loglik.abs().max(1.0);
        loglik = next;
        trace.push(loglik);
        if change < em.tol {
            converged = true;
            break;
        }
    }
    Ok((
        ThetaLmm {
            beta,
            sigma_b2,
            sigma_y2,
        },
        loglik,
        converged,
        iterations,
        trace,
    ))
}

/// Log-likelihood of the data at an arbitrary parameter value.
pub fn loglik(data: &Dataset, theta: &Theta) -> Result<f64> {
    let mut total = 0.0;
    for unit in 0..data.n_units() {
        total += unit_loglik(data, theta, unit)?;
    }
    Ok(total)
}

/// Log-likelihood contribution of one independent unit (row or cluster).
pub fn unit_loglik(data: &Dataset, theta: &Theta, unit: usize) -> Result<f64> {
    match (data, theta) {
        (Dataset::Lm(d), Theta::Lm(t)) => {
            if !(t.sigma2 > 0.0) {
                return Err(Error::Invalid("sigma2 must be positive".into()));
            }
            let e = d.y()[unit] - d.x().row(unit).dot(&t.beta.transpose());
            Ok(-0.5 * (LN_2PI + t.sigma2.ln() + e * e / t.sigma2))
        }
        (Dataset::Lmm(d), Theta::Lmm(t)) => {
            let c = &d.clusters()[unit];
            let m = c.size() as f64;
            if !(t.sigma_y2 > 0.0) || t.sigma_b2 < 0.0 {
                return Err(Error::SingularCovariance);
            }
            let r = &c.y - &c.x * &t.beta;
            let s = r.sum();
            let dd = t.sigma_y2 + m * t.sigma_b2;
            let quad = (r.norm_squared() - t.sigma_b2 / dd * s * s) / t.sigma_y2;
            Ok(-0.5 * (m * (2.0 * PI).ln() + (m - 1.0) * t.sigma_y2.ln() + dd.ln() + quad))
        }
        _ => Err(Error::DimensionMismatch(
            "parameter type does not match the data".into(),
        )),
    }
}

/// Total information `F_n` with its per-unit decomposition.
#[derive(Debug, Clone)]
pub struct Information {
    /// `F_n`: sum of the per-unit information matrices.
    pub total: DMatrix<f64>,
    /// Per-unit score vectors (gradient of the unit log-likelihood).
    pub scores: Vec<DVector<f64>>,
    /// Per-unit information: minus the Hessian (observed) or its expectation.
    pub unit_info: Vec<DMatrix<f64>>,
}

impl Information {
    pub fn total_score(&self) -> DVector<f64> {
        let q = self.total.nrows();
        self.scores.iter().fold(DVector::zeros(q), |acc, s| acc + s)
    }
}

/// Scores and information matrices at `theta`, one term per independent unit.
pub fn information_matrices(
    data: &Dataset,
    theta: &Theta,
    interest: Interest,
    mode: InfoMode,
) -> Result<Information> {
    let q = theta.dim(interest);
    if theta.beta().len() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} coefficients, data have {}",
            theta.beta().len(),
            data.p()
        )));
    }
    let mut scores = Vec::with_capacity(data.n_units());
    let mut unit_info = Vec::with_capacity(data.n_units());
    match (data, theta) {
        (Dataset::Lm(d), Theta::Lm(t)) => {
            if !(t.sigma2 > 0.0) {
                return Err(Error::Invalid("sigma2 must be positive".into()));
            }
            for i in 0..d.n() {
                let (s, h) = lm_unit(d, t, i, interest, mode);
                scores.push(s);
                unit_info.push(h);
            }
        }
        (Dataset::Lmm(d), Theta::Lmm(t)) => {
            if !(t.sigma_y2 > 0.0) || t.sigma_b2 < 0.0 {
                return Err(Error::SingularCovariance);
            }
            for c in d.clusters() {
                let (s, h) = lmm_unit(c, t, interest, mode);
                scores.push(s);
                unit_info.push(h);
            }
        }
        _ => {
            return Err(Error::DimensionMismatch(
                "parameter type does not match the data".into(),
            ))
        }
    }
    let total = unit_info
        .iter()
        .fold(DMatrix::zeros(q, q), |acc, h| acc + h);
    Ok(Information {
        total,
        scores,
        unit_info,
    })
}

fn lm_unit(
    d: &CrossSectionData,
    t: &ThetaLm,
    i: usize,
    interest: Interest,
    mode: InfoMode,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = d.p();
    let x = d.x().row(i).transpose();
    let e = d.y()[i] - x.dot(&t.beta);
    let s2 = t.sigma2;
    let xx = &x * x.transpose() / s2;
    match interest {
        Interest::Beta => (&x * (e / s2), xx),
        Interest::Full => {
            let mut score = DVector::zeros(p + 1);
            score.rows_mut(0, p).copy_from(&(&x * (e / s2)));
            score[p] = -0.5 / s2 + 0.5 * e * e / (s2 * s2);
            let mut info = DMatrix::zeros(p + 1, p + 1);
            info.view_mut((0, 0), (p, p)).copy_from(&xx);
            match mode {
                InfoMode::Observed => {
                    let cross = &x * (e / (s2 * s2));
                    info.view_mut((0, p), (p, 1)).copy_from(&cross);
                    info.view_mut((p, 0), (1, p)).copy_from(&cross.transpose());
                    info[(p, p)] = -0.5 / (s2 * s2) + e * e / (s2 * s2 * s2);
                }
                InfoMode::Expected => {
                    info[(p, p)] = 0.5 / (s2 * s2);
                }
            }
            (score, info)
        }
    }
}

/// Inverse of `R = sigma_y2 I + sigma_b2 1 1^T` for a cluster of size `m`.
pub(crate) fn cluster_precision(m: usize, sigma_b2: f64, sigma_y2: f64) -> DMatrix<f64> {
    let c = sigma_b2 / (sigma_y2 + m as f64 * sigma_b2);
    DMatrix::from_fn(m, m, |i, j| {
        ((if i == j { 1.0 } else { 0.0 }) - c) / sigma_y2
    })
}

fn lmm_unit(
    c: &Cluster,
    t: &ThetaLmm,
    interest: Interest,
    mode: InfoMode,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = t.beta.len();
    let m = c.size();
    let rinv = cluster_precision(m, t.sigma_b2, t.sigma_y2);
    let r = &c.y - &c.x * &t.beta;
    let w = &rinv * &r;
    let xt_rinv = c.x.transpose() * &rinv;
    let info_bb = &xt_rinv * &c.x;
    let score_b = c.x.transpose() * &w;
    if interest == Interest::Beta {
        return (score_b, info_bb);
    }
    // R^{-1} 1, and the traces needed for the variance block.
    let u = rinv.column_sum();
    let one_rinv_one = u.sum();
    let one_w = w.sum();
    let tr_rinv = rinv.trace();
    let tr_rinv2 = rinv.norm_squared();
    let uu = u.norm_squared();

    let mut score = DVector::zeros(p + 2);
    score.rows_mut(0, p).copy_from(&score_b);
    score[p] = -0.5 * one_rinv_one + 0.5 * one_w * one_w;
    score[p + 1] = -0.5 * tr_rinv + 0.5 * w.norm_squared();

    let mut info = DMatrix::zeros(p + 2, p + 2);
    info.view_mut((0, 0), (p, p)).copy_from(&info_bb);
    match mode {
        InfoMode::Observed => {
            let x_rinv_one = c.x.transpose() * &u;
            let cross_b = &x_rinv_one * one_w;
            let cross_y = &xt_rinv * &w;
            for k in 0..p {
                info[(k, p)] = cross_b[k];
                info[(p, k)] = cross_b[k];
                info[(k, p + 1)] = cross_y[k];
                info[(p + 1, k)] = cross_y[k];
            }
            let u_w = u.dot(&w);
            let w_rinv_w = w.dot(&(&rinv * &w));
            info[(p, p)] = -0.5 * one_rinv_one * one_rinv_one + one_w * one_w * one_rinv_one;
            let by = -0.5 * uu + one_w * u_w;
            info[(p, p + 1)] = by;
            info[(p + 1, p)] = by;
            info[(p + 1, p + 1)] = -0.5 * tr_rinv2 + w_rinv_w;
        }
        InfoMode::Expected => {
            info[(p, p)] = 0.5 * one_rinv_one * one_rinv_one;
            info[(p, p + 1)] = 0.5 * uu;
            info[(p + 1, p)] = 0.5 * uu;
            info[(p + 1, p + 1)] = 0.5 * tr_rinv2;
        }
    }
    (score, info)
}

/// Standard errors of all parameters from the inverse full information at `theta`.
pub fn standard_errors(data: &Dataset, theta: &Theta, mode: InfoMode) -> Result<DVector<f64>> {
    let info = information_matrices(data, theta, Interest::Full, mode)?;
    let cov = linalg::spd_inverse(&linalg::symmetrize(&info.total), "full information")?;
    Ok(cov.diagonal().map(f64::sqrt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn three_points() -> CrossSectionData {
        CrossSectionData::new(
            DVector::from_vec(vec![0.0, 0.0, 3.0]),
            DMatrix::from_element(3, 1, 1.0),
            None,
        )
        .unwrap()
    }

    fn small_clusters() -> ClusteredData {
        let mk = |id: &str, ys: &[f64], ts: &[f64]| {
            let x = DMatrix::from_fn(ys.len(), 2, |i, j| if j == 0 { 1.0 } else { ts[i] });
            Cluster::new(id, x, DVector::from_column_slice(ys))
        };
        ClusteredData::new(vec![
            mk("a", &[1.0, 2.1, 2.9], &[0.0, 1.0, 2.0]),
            mk("b", &[3.2, 3.9], &[0.0, 1.0]),
            mk("c", &[0.1, 1.4, 1.8, 3.5], &[0.0, 1.0, 2.0, 3.0]),
            mk("d", &[2.2], &[0.0]),
            mk("e", &[-0.5, 0.7, 1.2], &[0.0, 1.0, 2.0]),
        ])
        .unwrap()
    }

    #[test]
    fn ols_three_points() {
        let fit = fit_ols(&three_points(), &FitOptions::default()).unwrap();
        let Theta::Lm(t) = &fit.theta_hat else {
            unreachable!()
        };
        assert_relative_eq!(t.beta[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(t.sigma2, 2.0, epsilon = 1e-14);
        assert_relative_eq!(fit.g_n_theta[(0, 0)], 1.5, epsilon = 1e-14);
        assert_relative_eq!(fit.sigma_star[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn perfect_fit_is_degenerate() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = &x * DVector::from_vec(vec![0.5, -2.0]);
        let d = CrossSectionData::new(y, x, None).unwrap();
        assert!(matches!(
            fit_ols(&d, &FitOptions::default()),
            Err(Error::DegenerateVariance)
        ));
    }

    #[test]
    fn single_cluster_not_identifiable() {
        let c = Cluster::new(
            "only",
            DMatrix::from_element(2, 1, 1.0),
            DVector::from_vec(vec![1.0, 2.0]),
        );
        let d = ClusteredData::new(vec![c]).unwrap();
        assert!(matches!(
            fit_lmm_em(&d, &FitOptions::default(), None),
            Err(Error::NonIdentifiable(_))
        ));
    }

    #[test]
    fn all_singleton_clusters_not_identifiable() {
        let cl: Vec<_> = (0..4)
            .map(|i| {
                Cluster::new(
                    i.to_string(),
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::from_element(1, i as f64),
                )
            })
            .collect();
        let d = ClusteredData::new(cl).unwrap();
        assert!(matches!(
            fit_lmm_em(&d, &FitOptions::default(), None),
            Err(Error::NonIdentifiable(_))
        ));
    }

    #[test]
    fn em_loglik_is_monotone_and_matches_direct_evaluation() {
        let d = small_clusters();
        let opts = FitOptions {
            em: EmOptions {
                tol: 1e-12,
                max_iter: 5000,
            },
            ..Default::default()
        };
        let fit = fit_lmm_em(&d, &opts, None).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0));
        }
        let direct = loglik(&Dataset::Lmm(d), &fit.theta_hat).unwrap();
        assert_relative_eq!(direct, fit.loglik, max_relative = 1e-12);
    }

    #[test]
    fn balanced_intercept_only_gls_is_grand_mean() {
        let ys = [
            [1.0, 2.0, 4.0],
            [0.5, -1.0, 0.0],
            [3.0, 2.5, 2.0],
            [1.0, 1.0, 0.0],
        ];
        let cl: Vec<_> = ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                Cluster::new(
                    i.to_string(),
                    DMatrix::from_element(3, 1, 1.0),
                    DVector::from_column_slice(y),
                )
            })
            .collect();
        let d = ClusteredData::new(cl).unwrap();
        let grand = ys.iter().flatten().sum::<f64>() / 12.0;
        let fit = fit_lmm_em(&d, &FitOptions::default(), None).unwrap();
        assert_relative_eq!(fit.theta_hat.beta()[0], grand, epsilon = 1e-12);
    }

    #[test]
    fn observed_weighting_equals_sum_of_unit_information() {
        let d = Dataset::Lmm(small_clusters());
        let fit = fit(
            &d,
            &FitOptions {
                interest: Interest::Full,
                ..Default::default()
            },
        );
        // A tiny data set may put sigma_b2 at the boundary where the full
        // observed information is indefinite; only compare when it fits.
        if let Ok(fit) = fit {
            let info = information_matrices(&d, &fit.theta_hat, Interest::Full, InfoMode::Observed)
                .unwrap();
            assert_relative_eq!(
                fit.g_n_theta,
                linalg::symmetrize(&info.total),
                epsilon = 1e-12
            );
        }
    }
}
