//! Simulated random-intercept designs.
//!
//! Covariates are `x_ij = (1, u_i, log j)` with `u_i ~ N(0, 1)`. The `u_i`
//! and cluster sizes are drawn once per seed and shared by every data set;
//! responses are redrawn per data set.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Cluster, ClusteredData};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[default]
    Clean,
    Injected,
    Sweep,
}

/// Replaces one cluster's size and fixes its random intercept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    /// 1-based cluster number.
    pub cluster: usize,
    pub m: usize,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m_n: usize,
    pub b_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub beta: [f64; 3],
    pub sigma_b: f64,
    pub sigma_y: f64,
    pub cluster_size_range: (usize, usize),
    pub scenario: ScenarioKind,
    /// Overrides used by the injected scenario; empty means the default pair.
    pub injection: Vec<Injection>,
    /// Size and intercept of the last cluster in the sweep scenario.
    pub sweep: SweepPoint,
    pub n_datasets: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 12,
            beta: [1.0, 1.0, 1.0],
            sigma_b: 1.0,
            sigma_y: 1.0,
            cluster_size_range: (1, 5),
            scenario: ScenarioKind::Clean,
            injection: Vec::new(),
            sweep: SweepPoint { m_n: 1, b_n: 0.6 },
            n_datasets: 100,
            seed: 0,
        }
    }
}

/// `b_n` values `0.6, 1.2, ..., 6.0`.
pub fn sweep_grid() -> Vec<f64> {
    (1..=10).map(|k| (6 * k) as f64 / 10.0).collect()
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.cluster_size_range;
        if self.n < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 clusters, got {}",
                self.n
            )));
        }
        if lo < 1 || hi < lo {
            return Err(Error::Invalid(format!(
                "cluster sizes {lo}..={hi} are invalid"
            )));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_y > 0.0)
            || !self.sigma_b.is_finite()
            || !self.sigma_y.is_finite()
        {
            return Err(Error::Invalid(
                "standard deviations must be finite, sigma_y positive".into(),
            ));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Invalid("beta must be finite".into()));
        }
        for inj in self.overrides() {
            if inj.cluster < 1 || inj.cluster > self.n || inj.m < 1 || !inj.b.is_finite() {
                return Err(Error::Invalid(format!("invalid cluster override {inj:?}")));
            }
        }
        Ok(())
    }

    /// Cluster overrides in effect for the configured scenario.
    pub fn overrides(&self) -> Vec<Injection> {
        match self.scenario {
            ScenarioKind::Clean => Vec::new(),
            ScenarioKind::Injected if self.injection.is_empty() => vec![
                Injection {
                    cluster: 1,
                    m: 1,
                    b: 4.0,
                },
                Injection {
                    cluster: self.n,
                    m: 5,
                    b: 3.0,
                },
            ],
            ScenarioKind::Injected => self.injection.clone(),
            ScenarioKind::Sweep => vec![Injection {
                cluster: self.n,
                m: self.sweep.m_n,
                b: self.sweep.b_n,
            }],
        }
    }
}

/// Shared design: per-cluster `u_i`, sizes, and fixed intercepts (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDesign {
    pub u: Vec<f64>,
    pub sizes: Vec<usize>,
    pub fixed_b: Vec<Option<f64>>,
}

impl ScenarioDesign {
    pub fn draw(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, domain::DESIGN, 0);
        let (lo, hi) = config.cluster_size_range;
        let mut u = Vec::with_capacity(config.n);
        let mut sizes = Vec::with_capacity(config.n);
        for _ in 0..config.n {
            u.push(<StandardNormal as Distribution<f64>>::sample(
                &StandardNormal,
                &mut rng,
            ));
            sizes.push(rng.gen_range(lo..=hi));
        }
        let mut fixed_b = vec![None; config.n];
        for inj in config.overrides() {
            sizes[inj.cluster - 1] = inj.m;
            fixed_b[inj.cluster - 1] = Some(inj.b);
        }
        Ok(Self { u, sizes, fixed_b })
    }

    pub fn design_matrix(&self, cluster: usize) -> DMatrix<f64> {
        let m = self.sizes[cluster];
        DMatrix::from_fn(m, 3, |j, k| match k {
            0 => 1.0,
            1 => self.u[cluster],
            _ => ((j + 1) as f64).ln(),
        })
    }
}

/// Perturbation `0.5 tr(x_i^T R_i^{-1} x_i G^{-1})` of each cluster at the
/// true variance components: a property of the design alone.
pub fn design_perturbations(config: &ScenarioConfig, design: &ScenarioDesign) -> Result<Vec<f64>> {
    let (sb2, sy2) = (config.sigma_b.powi(2), config.sigma_y.powi(2));
    let blocks: Vec<DMatrix<f64>> = (0..config.n)
        .map(|i| {
            let x = design.design_matrix(i);
            let m = x.nrows() as f64;
            // R^{-1} = (I - c 11^T) / sigma_y^2 with c = sigma_b^2 / (sigma_y^2 + m sigma_b^2).
            let c = sb2 / (sy2 + m * sb2);
            let ones = x.row_sum().transpose();
            (x.transpose() * &x - ones.clone() * ones.transpose() * c) / sy2
        })
        .collect();
    let total = blocks.iter().fold(DMatrix::zeros(3, 3), |acc, b| acc + b);
    let inv = crate::linalg::spd_inverse(&crate::linalg::symmetrize(&total), "design information")?;
    Ok(blocks.iter().map(|b| 0.5 * (b * &inv).trace()).collect())
}

/// Data set number `dataset` of the scenario.
pub fn gen_dataset(
    config: &ScenarioConfig,
    design: &ScenarioDesign,
    dataset: usize,
) -> Result<ClusteredData> {
    let beta = DVector::from_row_slice(&config.beta);
    let clusters = (0..config.n)
        .map(|i| {
            let mut rng = rng::stream(
                config.seed,
                domain::RESPONSES,
                ((dataset as u64) << 20) | i as u64,
            );
            let x = design.design_matrix(i);
            let z: f64 = StandardNormal.sample(&mut rng);
            let b = design.fixed_b[i].unwrap_or(config.sigma_b * z);
            let mean = &x * &beta;
            let y = DVector::from_fn(x.nrows(), |j, _| {
                mean[j]
                    + b
                    + config.sigma_y
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            Cluster::new((i + 1).to_string(), x, y)
        })
        .collect();
    ClusteredData::new(clusters)
}

/// All `n_datasets` data sets of the scenario.
pub fn gen_scenario(config: &ScenarioConfig) -> Result<Vec<ClusteredData>> {
    let design = ScenarioDesign::draw(config)?;
    (0..config.n_datasets)
        .map(|d| gen_dataset(config, &design, d))
        .collect()
}
