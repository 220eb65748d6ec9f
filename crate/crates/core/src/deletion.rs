//! Subset deletion: refit-based estimates, Cook's distance, and the
//! closed-form and spectral expressions available for the linear model.

use nalgebra::{DMatrix, DVector};

use crate::data::{CrossSectionData, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, select_entries, sym_eigen_desc};
use crate::model::{em_estimate, ols_estimate, FitResult, Interest, Theta, ThetaLm};

/// Eigenvalues of `H_I` at or above `1 - LEVERAGE_TOL` make the deletion singular.
pub const LEVERAGE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetKind {
    Rows,
    Clusters,
}

/// A nonempty proper subset of rows (linear model) or clusters (mixed model).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetIndex {
    kind: SubsetKind,
    ids: Vec<usize>,
    n_obs: usize,
}

impl SubsetIndex {
    /// Builds a subset of zero-based unit positions; duplicates are merged.
    pub fn new(data: &Dataset, ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut ids: Vec<usize> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Invalid("empty deletion subset".into()));
        }
        let units = data.n_units();
        if let Some(&bad) = ids.iter().find(|&&i| i >= units) {
            return Err(Error::Invalid(format!(
                "subset index {} out of range 1..={units}",
                bad + 1
            )));
        }
        let remaining = units - ids.len();
        let kind = match data {
            Dataset::Lm(d) => {
                if remaining < d.p() + 1 {
                    return Err(Error::SubsetTooLarge(format!(
                        "{remaining} rows would remain, need at least {}",
                        d.p() + 1
                    )));
                }
                SubsetKind::Rows
            }
            Dataset::Lmm(_) => {
                if remaining < 2 {
                    return Err(Error::SubsetTooLarge(format!(
                        "{remaining} clusters would remain, need at least 2"
                    )));
                }
                SubsetKind::Clusters
            }
        };
        let n_obs = ids.iter().map(|&i| data.unit_size(i)).sum();
        Ok(Self { kind, ids, n_obs })
    }

    pub fn kind(&self) -> SubsetKind {
        self.kind
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Total number of observations removed, `n(I)`.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Unit labels joined with `+`, e.g. `3` or `1+2`.
    pub fn label(&self, data: &Dataset) -> String {
        self.ids
            .iter()
            .map(|&i| data.unit_label(i))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Every single row (linear model) or every single cluster (mixed model).
pub fn singletons(data: &Dataset) -> Result<Vec<SubsetIndex>> {
    (0..data.n_units())
        .map(|i| SubsetIndex::new(data, [i]))
        .collect()
}

/// Maximum-likelihood estimate with the subset removed.
///
/// The mixed model refit is warm-started at the full-data estimate.
pub fn refit_without(data: &Dataset, fit: &FitResult, subset: &SubsetIndex) -> Result<Theta> {
    match (data, &fit.theta_hat) {
        (Dataset::Lm(d), Theta::Lm(_)) => {
            let reduced = d.without_rows(subset.ids())?;
            ols_estimate(&reduced).map(Theta::Lm).map_err(|e| match e {
                Error::RankDeficientDesign { .. } => Error::SubsetTooLarge(e.to_string()),
                other => other,
            })
        }
        (Dataset::Lmm(d), Theta::Lmm(t)) => {
            let reduced = d.without_clusters(subset.ids())?;
            let (theta, ..) = em_estimate(&reduced, &fit.em, Some(t)).map_err(|e| match e {
                Error::RankDeficientDesign { .. } => Error::SubsetTooLarge(e.to_string()),
                other => other,
            })?;
            Ok(Theta::Lmm(theta))
        }
        _ => Err(Error::DimensionMismatch(
            "fit does not match the data layout".into(),
        )),
    }
}

/// `(theta_del - theta_hat)^T G_n (theta_del - theta_hat)`, or its partial
/// version `d^T L (L^T G_n^{-1} L)^{-1} L^T d` when the fit carries a selector `L`.
pub fn cook_distance(fit: &FitResult, theta_deleted: &Theta) -> Result<f64> {
    if theta_deleted.kind() != fit.model || theta_deleted.beta().len() != fit.theta_hat.beta().len()
    {
        return Err(Error::DimensionMismatch(
            "deleted estimate does not match the fit".into(),
        ));
    }
    let shift = theta_deleted.active(fit.interest) - fit.theta_hat.active(fit.interest);
    weighted_norm(&fit.g_n_theta, fit.interest_selector.as_ref(), &shift)
}

/// Quadratic form of a parameter shift under `G`, optionally restricted by a selector.
pub fn weighted_norm(
    g: &DMatrix<f64>,
    selector: Option<&DMatrix<f64>>,
    shift: &DVector<f64>,
) -> Result<f64> {
    if shift.len() != g.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "shift has length {}, weighting matrix is {}x{}",
            shift.len(),
            g.nrows(),
            g.ncols()
        )));
    }
    match selector {
        None => Ok(shift.dot(&(g * shift))),
        Some(l) => {
            let g_inv_l = linalg::cholesky(g, "weighting matrix G_n")?.solve(l);
            let middle = linalg::symmetrize(&(l.transpose() * g_inv_l));
            let z = l.transpose() * shift;
            let w = linalg::spd_solve_vec(&middle, &z, "L^T G_n^{-1} L")?;
            Ok(z.dot(&w))
        }
    }
}

/// Spectral pieces of one deletion block in the linear model.
#[derive(Debug, Clone)]
pub struct DeletionGeometry {
    /// `H_I = X_I (X^T X)^{-1} X_I^T`.
    pub h_block: DMatrix<f64>,
    /// Eigenvalues of `H_I`, largest first.
    pub eigvals: DVector<f64>,
    /// Matching eigenvectors as columns.
    pub eigvecs: DMatrix<f64>,
    /// Residual subvector `e_I`.
    pub residuals: DVector<f64>,
    /// `(I - Lambda)^{-1/2} Gamma^T e_I`.
    pub transformed: DVector<f64>,
}

impl DeletionGeometry {
    pub fn from_parts(h_block: DMatrix<f64>, residuals: DVector<f64>) -> Result<Self> {
        if h_block.nrows() != residuals.len() || !h_block.is_square() {
            return Err(Error::DimensionMismatch(
                "leverage block and residuals".into(),
            ));
        }
        let (eigvals, eigvecs) = sym_eigen_desc(&h_block);
        check_leverage(&eigvals)?;
        let rotated = eigvecs.transpose() * &residuals;
        let transformed =
            DVector::from_fn(rotated.len(), |j, _| rotated[j] / (1.0 - eigvals[j]).sqrt());
        Ok(Self {
            h_block,
            eigvals,
            eigvecs,
            residuals,
            transformed,
        })
    }

    pub fn size(&self) -> usize {
        self.residuals.len()
    }
}

fn check_leverage(eigvals: &DVector<f64>) -> Result<()> {
    match eigvals.iter().copied().find(|&l| l >= 1.0 - LEVERAGE_TOL) {
        Some(l) => Err(Error::LeverageOne(l)),
        None => Ok(()),
    }
}

/// `(1 / sigma2) * sum_j lambda_j / (1 - lambda_j) * h_j^2`.
pub fn cd_spectral(geometry: &DeletionGeometry, sigma2_hat: f64) -> Result<f64> {
    check_leverage(&geometry.eigvals)?;
    let total: f64 = geometry
        .eigvals
        .iter()
        .zip(geometry.transformed.iter())
        .map(|(&l, &h)| l.max(0.0) / (1.0 - l) * h * h)
        .sum();
    Ok(total / sigma2_hat)
}

/// Precomputed factorisation of a linear-model fit for repeated deletions.
#[derive(Debug, Clone)]
pub struct LmDeletion {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    beta: DVector<f64>,
    residuals: DVector<f64>,
    sigma2: f64,
}

impl LmDeletion {
    /// Residuals are taken at `theta`, normally the least-squares fit.
    pub fn new(data: &CrossSectionData, theta: &ThetaLm) -> Result<Self> {
        let qr = data.x().clone().qr();
        let q = qr.q();
        let r = qr.r();
        if r.diagonal()
            .iter()
            .any(|d| d.abs() < f64::EPSILON * r.amax())
        {
            return Err(Error::RankDeficientDesign {
                rank: 0,
                cols: data.p(),
            });
        }
        let residuals = data.y() - data.x() * &theta.beta;
        Ok(Self {
            q,
            r,
            beta: theta.beta.clone(),
            residuals,
            sigma2: theta.sigma2,
        })
    }

    pub fn from_fit(data: &CrossSectionData, fit: &FitResult) -> Result<Self> {
        match &fit.theta_hat {
            Theta::Lm(t) => Self::new(data, t),
            Theta::Lmm(_) => Err(Error::DimensionMismatch("linear-model fit required".into())),
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    pub fn leverage(&self, i: usize) -> f64 {
        self.q.row(i).norm_squared()
    }

    pub fn h_block(&self, rows: &[usize]) -> DMatrix<f64> {
        let qi = linalg::select_rows(&self.q, rows);
        &qi * qi.transpose()
    }

    pub fn geometry(&self, rows: &[usize]) -> Result<DeletionGeometry> {
        DeletionGeometry::from_parts(self.h_block(rows), select_entries(&self.residuals, rows))
    }

    /// Closed-form Cook's distance for the coefficients with `sigma2` fixed.
    pub fn cook(&self, rows: &[usize]) -> Result<f64> {
        if let [i] = rows {
            let h = self.leverage(*i);
            if h >= 1.0 - LEVERAGE_TOL {
                return Err(Error::LeverageOne(h));
            }
            let e = self.residuals[*i];
            return Ok(e * e * h / ((1.0 - h) * (1.0 - h) * self.sigma2));
        }
        let h_block = self.h_block(rows);
        let (eigvals, _) = sym_eigen_desc(&h_block);
        check_leverage(&eigvals)?;
        let e_i = select_entries(&self.residuals, rows);
        let complement = DMatrix::identity(rows.len(), rows.len()) - &h_block;
        let v = linalg::spd_solve_vec(&complement, &e_i, "I - H_I")?;
        Ok(v.dot(&(&h_block * &v)) / self.sigma2)
    }

    /// `beta - (X^T X)^{-1} X_I^T (I - H_I)^{-1} e_I`; the identity for an empty set.
    pub fn downdate_beta(&self, rows: &[usize]) -> Result<DVector<f64>> {
        if rows.is_empty() {
            return Ok(self.beta.clone());
        }
        let qi = linalg::select_rows(&self.q, rows);
        let h_block = &qi * qi.transpose();
        let complement = DMatrix::identity(rows.len(), rows.len()) - &h_block;
        let e_i = select_entries(&self.residuals, rows);
        let v = linalg::spd_solve_vec(&complement, &e_i, "I - H_I")?;
        let rhs = qi.transpose() * v;
        let step = self
            .r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::NotInvertible("triangular factor of the design".into()))?;
        Ok(&self.beta - step)
    }
}

/// Closed-form Cook's distance for a linear-model subset, coefficients of interest.
pub fn cook_lm_closed(
    fit: &FitResult,
    data: &CrossSectionData,
    subset: &SubsetIndex,
) -> Result<f64> {
    if fit.interest != Interest::Beta || fit.interest_selector.is_some() {
        return Err(Error::Invalid(
            "closed form applies to coefficient-only interest".into(),
        ));
    }
    LmDeletion::from_fit(data, fit)?.cook(subset.ids())
}

/// Exact Cook's distance for every subset, using the closed form where it applies.
pub fn exact_distances(
    data: &Dataset,
    fit: &FitResult,
    subsets: &[SubsetIndex],
) -> Result<Vec<f64>> {
    match data {
        Dataset::Lm(d) if fit.interest == Interest::Beta && fit.interest_selector.is_none() => {
            let del = LmDeletion::from_fit(d, fit)?;
            subsets.iter().map(|s| del.cook(s.ids())).collect()
        }
        _ => subsets
            .iter()
            .map(|s| {
                let theta = refit_without(data, fit, s)?;
                cook_distance(fit, &theta)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_ols, FitOptions};
    use approx::assert_relative_eq;

    fn three_points() -> (Dataset, FitResult) {
        let d = CrossSectionData::new(
            DVector::from_vec(vec![0.0, 0.0, 3.0]),
            DMatrix::from_element(3, 1, 1.0),
            None,
        )
        .unwrap();
        let fit = fit_ols(&d, &FitOptions::default()).unwrap();
        (Dataset::Lm(d), fit)
    }

    #[test]
    fn refit_without_last_point() {
        let (data, fit) = three_points();
        let s = SubsetIndex::new(&data, [2]).unwrap();
        let t = refit_without(&data, &fit, &s).unwrap();
        assert_relative_eq!(t.beta()[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(cook_distance(&fit, &t).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn identical_estimate_has_zero_distance() {
        let (_, fit) = three_points();
        assert_eq!(cook_distance(&fit, &fit.theta_hat).unwrap(), 0.0);
    }

    #[test]
    fn closed_forms_on_three_points() {
        let (data, fit) = three_points();
        let Dataset::Lm(d) = &data else {
            unreachable!()
        };
        let single = SubsetIndex::new(&data, [2]).unwrap();
        assert_relative_eq!(
            cook_lm_closed(&fit, d, &single).unwrap(),
            1.5,
            epsilon = 1e-12
        );
        let pair = SubsetIndex::new(&data, [0, 1]).unwrap_err();
        // Deleting two of three points leaves fewer than p + 1 rows.
        assert!(matches!(pair, Error::SubsetTooLarge(_)));
        let del = LmDeletion::from_fit(d, &fit).unwrap();
        assert_relative_eq!(del.cook(&[0, 1]).unwrap(), 6.0, epsilon = 1e-12);
        assert_relative_eq!(del.downdate_beta(&[0, 1]).unwrap()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_pair_on_three_points() {
        let (data, fit) = three_points();
        let Dataset::Lm(d) = &data else {
            unreachable!()
        };
        let del = LmDeletion::from_fit(d, &fit).unwrap();
        let g = del.geometry(&[0, 1]).unwrap();
        assert_relative_eq!(g.eigvals[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(g.eigvals[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(g.transformed[0].abs(), 6f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(cd_spectral(&g, del.sigma2()).unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_downdate_is_identity() {
        let (data, fit) = three_points();
        let Dataset::Lm(d) = &data else {
            unreachable!()
        };
        let del = LmDeletion::from_fit(d, &fit).unwrap();
        assert_eq!(del.downdate_beta(&[]).unwrap(), *fit.theta_hat.beta());
    }

    #[test]
    fn zero_leverage_block_gives_zero() {
        let g =
            DeletionGeometry::from_parts(DMatrix::zeros(2, 2), DVector::from_vec(vec![3.0, -4.0]))
                .unwrap();
        assert_eq!(cd_spectral(&g, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn leverage_one_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.2]);
        assert!(matches!(
            DeletionGeometry::from_parts(h, DVector::from_vec(vec![1.0, 1.0])),
            Err(Error::LeverageOne(_))
        ));
    }

    #[test]
    fn zero_residual_row_has_zero_distance() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let d = CrossSectionData::new(y, DMatrix::from_element(3, 1, 1.0), None).unwrap();
        let fit = fit_ols(&d, &FitOptions::default()).unwrap();
        let del = LmDeletion::from_fit(&d, &fit).unwrap();
        assert!(del.residuals()[1].abs() < 1e-15);
        assert!(del.cook(&[1]).unwrap() < 1e-28);
    }

    #[test]
    fn selector_for_full_identity_matches_plain_norm() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let shift = DVector::from_vec(vec![0.3, -1.2]);
        let plain = weighted_norm(&g, None, &shift).unwrap();
        let with_id = weighted_norm(&g, Some(&DMatrix::identity(2, 2)), &shift).unwrap();
        assert_relative_eq!(plain, with_id, epsilon = 1e-12);
    }
}
