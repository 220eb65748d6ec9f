//! First-order (one-step sandwich) approximation of Cook's distance and the
//! closed-form moments of its quadratic-form version in the linear model.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::deletion::{weighted_norm, DeletionGeometry, SubsetIndex, LEVERAGE_TOL};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{information_matrices, FitResult, Information, Theta};

/// Score and information of a deleted block together with the full-data information.
#[derive(Debug, Clone)]
pub struct FirstOrderPieces {
    /// `f_I`: score of the deleted block.
    pub score: DVector<f64>,
    /// `s_I`: information of the deleted block.
    pub block_info: DMatrix<f64>,
    /// `F_n`: full-data information.
    pub total_info: DMatrix<f64>,
}

impl FirstOrderPieces {
    pub fn new(
        score: DVector<f64>,
        block_info: DMatrix<f64>,
        total_info: DMatrix<f64>,
    ) -> Result<Self> {
        let q = score.len();
        if block_info.shape() != (q, q) || total_info.shape() != (q, q) {
            return Err(Error::DimensionMismatch(format!(
                "score of length {q} with {}x{} and {}x{} information",
                block_info.nrows(),
                block_info.ncols(),
                total_info.nrows(),
                total_info.ncols()
            )));
        }
        Ok(Self {
            score,
            block_info,
            total_info,
        })
    }

    /// Sums the per-unit terms of `info` over `units`.
    pub fn from_information(info: &Information, units: &[usize]) -> Result<Self> {
        let q = info.total.nrows();
        let mut score = DVector::zeros(q);
        let mut block = DMatrix::zeros(q, q);
        for &u in units {
            let s = info
                .scores
                .get(u)
                .ok_or_else(|| Error::Invalid(format!("unit {u} out of range")))?;
            score += s;
            block += &info.unit_info[u];
        }
        Self::new(score, block, info.total.clone())
    }

    /// Approximate parameter shift `-(F_n - s_I)^{-1} f_I` caused by deleting the block.
    pub fn shift(&self) -> Result<DVector<f64>> {
        let reduced = linalg::symmetrize(&(&self.total_info - &self.block_info));
        let step = linalg::spd_solve_vec(&reduced, &self.score, "F_n - s_I")?;
        Ok(-step)
    }
}

/// `f_I^T (F_n - s_I)^{-1} F_n (F_n - s_I)^{-1} f_I`.
pub fn first_order_cd(pieces: &FirstOrderPieces) -> Result<f64> {
    let shift = pieces.shift()?;
    Ok(shift.dot(&(&pieces.total_info * &shift)))
}

/// First-order distance with an optional interest selector applied to the shift.
pub fn first_order_cd_selected(
    pieces: &FirstOrderPieces,
    selector: Option<&DMatrix<f64>>,
) -> Result<f64> {
    match selector {
        None => first_order_cd(pieces),
        Some(l) => weighted_norm(
            &linalg::symmetrize(&pieces.total_info),
            Some(l),
            &pieces.shift()?,
        ),
    }
}

/// `tr({E[F_n] - E[s_I]}^{-1} E[s_I])`.
pub fn expected_cd_trace(
    expected_total: &DMatrix<f64>,
    expected_block: &DMatrix<f64>,
) -> Result<f64> {
    if expected_total.shape() != expected_block.shape() || !expected_total.is_square() {
        return Err(Error::DimensionMismatch(
            "expected information matrices".into(),
        ));
    }
    let reduced = linalg::symmetrize(&(expected_total - expected_block));
    let solved = linalg::cholesky(&reduced, "E[F_n] - E[s_I]")?.solve(expected_block);
    Ok(solved.trace())
}

/// Mean `sum l/(1-l)` and variance `2 sum (l/(1-l))^2` of the quadratic-form
/// Cook's distance, from the eigenvalues of `H_I`.
pub fn qf_moments(geometry: &DeletionGeometry) -> Result<(f64, f64)> {
    let mut mean = 0.0;
    let mut var = 0.0;
    for &l in geometry.eigvals.iter() {
        if l >= 1.0 - LEVERAGE_TOL {
            return Err(Error::LeverageOne(l));
        }
        let r = l.max(0.0) / (1.0 - l);
        mean += r;
        var += 2.0 * r * r;
    }
    Ok((mean, var))
}

/// First-order distances for each subset, evaluated at `theta` on `data`.
pub fn first_order_distances(
    data: &Dataset,
    theta: &Theta,
    fit: &FitResult,
    subsets: &[SubsetIndex],
) -> Result<Vec<f64>> {
    let info = information_matrices(data, theta, fit.interest, fit.info_mode)?;
    subsets
        .iter()
        .map(|s| {
            let pieces = FirstOrderPieces::from_information(&info, s.ids())?;
            first_order_cd_selected(&pieces, fit.interest_selector.as_ref())
        })
        .collect()
}

/// Trace approximation of `E[CD(I)]` from the expected information at the fit.
pub fn expected_cd_traces(
    data: &Dataset,
    fit: &FitResult,
    subsets: &[SubsetIndex],
) -> Result<Vec<f64>> {
    let info = information_matrices(
        data,
        &fit.theta_hat,
        fit.interest,
        crate::model::InfoMode::Expected,
    )?;
    subsets
        .iter()
        .map(|s| {
            let pieces = FirstOrderPieces::from_information(&info, s.ids())?;
            expected_cd_trace(&pieces.total_info, &pieces.block_info)
        })
        .collect()
}
