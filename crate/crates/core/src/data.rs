//! Data containers for the two supported models.
//!
//! Both containers validate their invariants on construction, so every
//! downstream computation can assume a full-rank design.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, select_entries, select_rows};

/// Cross-sectional data for the linear regression model `y = X beta + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    row_ids: Option<Vec<String>>,
}

impl CrossSectionData {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, row_ids: Option<Vec<String>>) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "response has {} entries but the design has {n} rows",
                y.len()
            )));
        }
        if p == 0 {
            return Err(Error::Invalid("design has no columns".into()));
        }
        if n <= p {
            return Err(Error::Invalid(format!(
                "need more rows than columns (n = {n}, p = {p})"
            )));
        }
        if let Some(ids) = &row_ids {
            if ids.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} row labels for {n} rows",
                    ids.len()
                )));
            }
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("data contain non-finite values".into()));
        }
        let rank = numerical_rank(&x);
        if rank < p {
            return Err(Error::RankDeficientDesign { rank, cols: p });
        }
        Ok(Self { y, x, row_ids })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn row_ids(&self) -> Option<&[String]> {
        self.row_ids.as_deref()
    }

    /// Label of row `i`: its id when present, otherwise the 1-based row number.
    pub fn row_label(&self, i: usize) -> String {
        match &self.row_ids {
            Some(ids) => ids[i].clone(),
            None => (i + 1).to_string(),
        }
    }

    /// Same design with a different response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch(
                "replacement response length".into(),
            ));
        }
        Ok(Self {
            y,
            x: self.x.clone(),
            row_ids: self.row_ids.clone(),
        })
    }

    /// The data with `rows` (sorted, unique) removed.
    pub fn without_rows(&self, rows: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = complement(self.n(), rows);
        let x = select_rows(&self.x, &keep);
        let y = select_entries(&self.y, &keep);
        let ids = self
            .row_ids
            .as_ref()
            .map(|ids| keep.iter().map(|&i| ids[i].clone()).collect());
        Self::new(y, x, ids).map_err(|e| match e {
            Error::RankDeficientDesign { .. } | Error::Invalid(_) => {
                Error::SubsetTooLarge(format!("{} rows deleted: {e}", rows.len()))
            }
            other => other,
        })
    }

    /// Rows `rows` in the given order, without validation of the result.
    pub(crate) fn take_rows_unchecked(&self, rows: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
        (select_entries(&self.y, rows), select_rows(&self.x, rows))
    }
}

/// One cluster of the random-intercept model.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Cluster {
    pub fn new(id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Self {
        Self {
            id: id.into(),
            x,
            y,
        }
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }
}

/// Clustered (longitudinal) data for the Gaussian random-intercept model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredData {
    clusters: Vec<Cluster>,
    p: usize,
}

impl ClusteredData {
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        let Some(first) = clusters.first() else {
            return Err(Error::Invalid("no clusters".into()));
        };
        let p = first.x.ncols();
        if p == 0 {
            return Err(Error::Invalid("design has no columns".into()));
        }
        let mut seen = HashSet::with_capacity(clusters.len());
        for c in &clusters {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate cluster id {:?}", c.id)));
            }
            if c.size() == 0 {
                return Err(Error::Invalid(format!("cluster {:?} is empty", c.id)));
            }
            if c.x.nrows() != c.size() {
                return Err(Error::DimensionMismatch(format!(
                    "cluster {:?}: {} responses but {} design rows",
                    c.id,
                    c.size(),
                    c.x.nrows()
                )));
            }
            if c.x.ncols() != p {
                return Err(Error::DimensionMismatch(format!(
                    "cluster {:?} has {} covariates, expected {p}",
                    c.id,
                    c.x.ncols()
                )));
            }
            if c.y.iter().chain(c.x.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "cluster {:?} has non-finite values",
                    c.id
                )));
            }
        }
        let data = Self { clusters, p };
        let stacked = data.stacked_x();
        if stacked.nrows() < p {
            return Err(Error::RankDeficientDesign {
                rank: stacked.nrows(),
                cols: p,
            });
        }
        let rank = numerical_rank(&stacked);
        if rank < p {
            return Err(Error::RankDeficientDesign { rank, cols: p });
        }
        Ok(data)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn total_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::size).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.id == id)
    }

    pub fn stacked_x(&self) -> DMatrix<f64> {
        let n = self.total_obs();
        let mut x = DMatrix::zeros(n, self.p);
        let mut row = 0;
        for c in &self.clusters {
            x.rows_mut(row, c.size()).copy_from(&c.x);
            row += c.size();
        }
        x
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.total_obs(),
            self.clusters.iter().flat_map(|c| c.y.iter().copied()),
        )
    }

    /// Same clusters and designs with new responses (one vector per cluster).
    pub fn with_responses(&self, ys: Vec<DVector<f64>>) -> Result<Self> {
        if ys.len() != self.n_clusters() {
            return Err(Error::DimensionMismatch(
                "replacement response count".into(),
            ));
        }
        let clusters = self
            .clusters
            .iter()
            .zip(ys)
            .map(|(c, y)| {
                if y.len() != c.size() {
                    return Err(Error::DimensionMismatch(format!(
                        "cluster {:?} response length",
                        c.id
                    )));
                }
                Ok(Cluster {
                    id: c.id.clone(),
                    x: c.x.clone(),
                    y,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clusters,
            p: self.p,
        })
    }

    /// The data with the clusters at `positions` (sorted, unique) removed.
    pub fn without_clusters(&self, positions: &[usize]) -> Result<Self> {
        let keep = complement(self.n_clusters(), positions);
        if keep.is_empty() {
            return Err(Error::SubsetTooLarge("every cluster deleted".into()));
        }
        let clusters = keep.iter().map(|&i| self.clusters[i].clone()).collect();
        Self::new(clusters).map_err(|e| match e {
            Error::RankDeficientDesign { .. } | Error::Invalid(_) => {
                Error::SubsetTooLarge(format!("{} clusters deleted: {e}", positions.len()))
            }
            other => other,
        })
    }
}

/// Either supported data layout.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Lm(CrossSectionData),
    Lmm(ClusteredData),
}

impl Dataset {
    pub fn p(&self) -> usize {
        match self {
            Dataset::Lm(d) => d.p(),
            Dataset::Lmm(d) => d.p(),
        }
    }

    /// Number of conditionally independent units (rows or clusters).
    pub fn n_units(&self) -> usize {
        match self {
            Dataset::Lm(d) => d.n(),
            Dataset::Lmm(d) => d.n_clusters(),
        }
    }

    pub fn unit_size(&self, unit: usize) -> usize {
        match self {
            Dataset::Lm(_) => 1,
            Dataset::Lmm(d) => d.clusters[unit].size(),
        }
    }

    pub fn unit_label(&self, unit: usize) -> String {
        match self {
            Dataset::Lm(d) => d.row_label(unit),
            Dataset::Lmm(d) => d.clusters[unit].id.clone(),
        }
    }

    pub fn without_units(&self, units: &[usize]) -> Result<Self> {
        match self {
            Dataset::Lm(d) => d.without_rows(units).map(Dataset::Lm),
            Dataset::Lmm(d) => d.without_clusters(units).map(Dataset::Lmm),
        }
    }
}

fn complement(n: usize, removed: &[usize]) -> Vec<usize> {
    let mut drop = vec![false; n];
    for &i in removed {
        if i < n {
            drop[i] = true;
        }
    }
    (0..n).filter(|&i| !drop[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rank_deficient_design() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            CrossSectionData::new(y, x, None),
            Err(Error::RankDeficientDesign { rank: 1, cols: 2 })
        ));
    }

    #[test]
    fn rejects_too_few_rows() {
        let x = DMatrix::from_element(2, 2, 1.0);
        let y = DVector::zeros(2);
        assert!(matches!(
            CrossSectionData::new(y, x, None),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn duplicate_cluster_ids_rejected() {
        let c = Cluster::new(
            "a",
            DMatrix::from_element(2, 1, 1.0),
            DVector::from_vec(vec![1.0, 2.0]),
        );
        assert!(matches!(
            ClusteredData::new(vec![c.clone(), c]),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn deleting_rows_to_rank_deficiency_is_subset_too_large() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 5.0]);
        let d = CrossSectionData::new(y, x, None).unwrap();
        assert!(matches!(
            d.without_rows(&[0, 1]),
            Err(Error::SubsetTooLarge(_))
        ));
        assert_eq!(d.without_rows(&[0]).unwrap().n(), 3);
    }
}
