//! Simulation drivers for the mixed-model experiments: accuracy of the
//! first-order approximations (per-cluster table) and detection of a swept
//! influential cluster (probability curves).

use rayon::prelude::*;
use serde::Serialize;

use crate::approx::first_order_distances;
use crate::bootstrap::{
    bootstrap_summaries, influence_probabilities, BootstrapConfig, BootstrapMode,
};
use crate::data::Dataset;
use crate::deletion::{exact_distances, singletons};
use crate::error::{Error, Result};
use crate::io::format_f64;
use crate::model::{fit_lmm_em, FitOptions};
use crate::perturbation::closed_form;
use crate::rng::{derive_seed, domain};
use crate::scenario::{
    gen_dataset, sweep_grid, ScenarioConfig, ScenarioDesign, ScenarioKind, SweepPoint,
};

/// Per-dataset, per-cluster quantities of the accuracy experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterDraw {
    pub perturbation: f64,
    pub cd: f64,
    pub cd_tilde: f64,
    /// Bootstrap mean and standard deviation from exact refits.
    pub e_cd: f64,
    pub std_cd: f64,
    /// The same from first-order replicates.
    pub m_tilde: f64,
    pub std_tilde: f64,
}

/// Mean and SD of a quantity, and mean and SD of its difference from the approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockStats {
    pub m: f64,
    pub sd: f64,
    pub mdif: f64,
    pub sddif: f64,
    /// Mean absolute difference.
    pub madif: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub cluster: String,
    pub m_i: usize,
    pub perturbation: f64,
    pub cd: BlockStats,
    pub e_cd: BlockStats,
    pub std_cd: BlockStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1 {
    /// Rows sorted by increasing mean perturbation.
    pub rows: Vec<Table1Row>,
    /// `draws[d][i]` for data set `d` and cluster `i` (original order).
    pub draws: Vec<Vec<ClusterDraw>>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn block(values: &[f64], approx: &[f64]) -> BlockStats {
    let (m, sd) = mean_sd(values);
    let diffs: Vec<f64> = values.iter().zip(approx).map(|(a, b)| a - b).collect();
    let (mdif, sddif) = mean_sd(&diffs);
    let madif = diffs.iter().map(|d| d.abs()).sum::<f64>() / diffs.len() as f64;
    BlockStats {
        m,
        sd,
        mdif,
        sddif,
        madif,
    }
}

fn table1_dataset(data: Dataset, replicates: usize, seed: u64) -> Result<Vec<ClusterDraw>> {
    let Dataset::Lmm(d) = &data else {
        return Err(Error::Invalid("clustered data required".into()));
    };
    let fit = fit_lmm_em(d, &FitOptions::default(), None)?;
    let subsets = singletons(&data)?;
    let cd = exact_distances(&data, &fit, &subsets)?;
    let cd_tilde = first_order_distances(&data, &fit.theta_hat, &fit, &subsets)?;
    let mut config = BootstrapConfig {
        replicates,
        mode: BootstrapMode::Exact,
        conditional: true,
        seed,
    };
    let exact = bootstrap_summaries(&data, &fit, &subsets, &config)?;
    config.mode = BootstrapMode::FirstOrder;
    let first = bootstrap_summaries(&data, &fit, &subsets, &config)?;
    subsets
        .iter()
        .enumerate()
        .map(|(k, s)| {
            Ok(ClusterDraw {
                perturbation: closed_form(&data, &fit, s.ids())?.0,
                cd: cd[k],
                cd_tilde: cd_tilde[k],
                e_cd: exact[k].mean,
                std_cd: exact[k].std,
                m_tilde: first[k].mean,
                std_tilde: first[k].std,
            })
        })
        .collect()
}

/// Accuracy of the first-order distance and of the first-order bootstrap
/// moments, aggregated per cluster over the scenario's data sets.
pub fn run_table1(scenario: &ScenarioConfig, replicates: usize) -> Result<Table1> {
    let design = ScenarioDesign::draw(scenario)?;
    let draws = (0..scenario.n_datasets)
        .into_par_iter()
        .map(|k| {
            let data = Dataset::Lmm(gen_dataset(scenario, &design, k)?);
            table1_dataset(
                data,
                replicates,
                derive_seed(scenario.seed, domain::REPLICATE, k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let col =
        |i: usize, f: fn(&ClusterDraw) -> f64| draws.iter().map(|d| f(&d[i])).collect::<Vec<f64>>();
    let mut rows: Vec<Table1Row> = (0..scenario.n)
        .map(|i| Table1Row {
            cluster: (i + 1).to_string(),
            m_i: design.sizes[i],
            perturbation: mean_sd(&col(i, |c| c.perturbation)).0,
            cd: block(&col(i, |c| c.cd), &col(i, |c| c.cd_tilde)),
            e_cd: block(&col(i, |c| c.e_cd), &col(i, |c| c.m_tilde)),
            std_cd: block(&col(i, |c| c.std_cd), &col(i, |c| c.std_tilde)),
        })
        .collect();
    rows.sort_by(|a, b| a.perturbation.total_cmp(&b.perturbation));
    Ok(Table1 { rows, draws })
}

impl Table1 {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster,m_i,perturbation");
        for b in ["cd", "e_cd", "std_cd"] {
            for s in ["m", "sd", "mdif", "sddif", "madif"] {
                out.push_str(&format!(",{b}_{s}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}",
                r.cluster,
                r.m_i,
                format_f64(r.perturbation)
            ));
            for b in [&r.cd, &r.e_cd, &r.std_cd] {
                for v in [b.m, b.sd, b.mdif, b.sddif, b.madif] {
                    out.push(',');
                    out.push_str(&format_f64(v));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Diagnostics of the last cluster in one swept data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepDraw {
    pub cd: f64,
    /// Conditionally scaled distance from exact replicates.
    pub cscd1: f64,
    pub p_a: f64,
    pub p_b: f64,
    /// The same from first-order replicates.
    pub cscd1_tilde: f64,
    pub p_a_tilde: f64,
    pub p_b_tilde: f64,
    pub p_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Point {
    pub m_n: usize,
    pub b_n: f64,
    pub draws: Vec<SweepDraw>,
}

impl Figure1Point {
    /// Mean and standard error of one diagnostic over data sets.
    pub fn summary(&self, f: fn(&SweepDraw) -> f64) -> (f64, f64) {
        let v: Vec<f64> = self.draws.iter().map(f).collect();
        let (m, sd) = mean_sd(&v);
        (m, sd / (v.len() as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1 {
    pub points: Vec<Figure1Point>,
}

/// Observed CSCD_1 of every subset and the calibration probabilities.
fn calibrate(
    data: &Dataset,
    fit: &crate::model::FitResult,
    subsets: &[crate::deletion::SubsetIndex],
    observed: &[f64],
    cd: &[f64],
    config: &BootstrapConfig,
) -> Result<(Vec<f64>, Vec<crate::bootstrap::InfluenceProbabilities>)> {
    let summaries = bootstrap_summaries(data, fit, subsets, config)?;
    let scaled: Vec<f64> = summaries
        .iter()
        .zip(observed)
        .map(|(s, c)| (c - s.mean) / s.std)
        .collect();
    let replicate: Vec<Vec<f64>> = summaries.iter().map(|s| s.standardized()).collect();
    let probs = influence_probabilities(&scaled, &replicate, cd)?;
    Ok((scaled, probs))
}

fn sweep_dataset(data: Dataset, replicates: usize, seed: u64) -> Result<SweepDraw> {
    let Dataset::Lmm(d) = &data else {
        return Err(Error::Invalid("clustered data required".into()));
    };
    let fit = fit_lmm_em(d, &FitOptions::default(), None)?;
    let subsets = singletons(&data)?;
    let cd = exact_distances(&data, &fit, &subsets)?;
    let cd_tilde = first_order_distances(&data, &fit.theta_hat, &fit, &subsets)?;
    let mut config = BootstrapConfig {
        replicates,
        mode: BootstrapMode::Exact,
        conditional: true,
        seed,
    };
    let (scaled, probs) = calibrate(&data, &fit, &subsets, &cd, &cd, &config)?;
    config.mode = BootstrapMode::FirstOrder;
    let (scaled_t, probs_t) = calibrate(&data, &fit, &subsets, &cd_tilde, &cd, &config)?;
    let last = subsets.len() - 1;
    Ok(SweepDraw {
        cd: cd[last],
        cscd1: scaled[last],
        p_a: probs[last].p_a,
        p_b: probs[last].p_b,
        cscd1_tilde: scaled_t[last],
        p_a_tilde: probs_t[last].p_a,
        p_b_tilde: probs_t[last].p_b,
        p_c: probs[last].p_c.unwrap_or(f64::NAN),
    })
}

/// One sweep point: the last cluster gets size `m_n` and intercept `b_n`.
pub fn run_sweep_point(
    base: &ScenarioConfig,
    point: SweepPoint,
    replicates: usize,
) -> Result<Figure1Point> {
    let config = ScenarioConfig {
        scenario: ScenarioKind::Sweep,
        sweep: point,
        ..base.clone()
    };
    let design = ScenarioDesign::draw(&config)?;
    let draws = (0..config.n_datasets)
        .into_par_iter()
        .map(|k| {
            let data = Dataset::Lmm(gen_dataset(&config, &design, k)?);
            sweep_dataset(
                data,
                replicates,
                derive_seed(config.seed, domain::REPLICATE, k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Figure1Point {
        m_n: point.m_n,
        b_n: point.b_n,
        draws,
    })
}

/// Detection curves over the `b_n` grid for each size in `sizes`.
pub fn run_figure1(
    base: &ScenarioConfig,
    sizes: &[usize],
    grid: &[f64],
    replicates: usize,
) -> Result<Figure1> {
    let mut points = Vec::with_capacity(sizes.len() * grid.len());
    for &m_n in sizes {
        for &b_n in grid {
            points.push(run_sweep_point(base, SweepPoint { m_n, b_n }, replicates)?);
        }
    }
    Ok(Figure1 { points })
}

/// The default sweep: sizes 1 and 10 over `b_n = 0.6, ..., 6.0`.
pub fn run_figure1_default(base: &ScenarioConfig, replicates: usize) -> Result<Figure1> {
    run_figure1(base, &[1, 10], &sweep_grid(), replicates)
}

impl Figure1 {
    /// Long format: `b_n,m_n,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("b_n,m_n,metric,value\n");
        let metrics: [(&str, fn(&SweepDraw) -> f64); 8] = [
            ("p_b", |d| d.p_b),
            ("p_c", |d| d.p_c),
            ("p_a", |d| d.p_a),
            ("p_b_tilde", |d| d.p_b_tilde),
            ("p_a_tilde", |d| d.p_a_tilde),
            ("cd", |d| d.cd),
            ("cscd1", |d| d.cscd1),
            ("cscd1_tilde", |d| d.cscd1_tilde),
        ];
        for p in &self.points {
            for (name, f) in metrics {
                let (m, se) = p.summary(f);
                let b = format_f64(p.b_n);
                out.push_str(&format!("{b},{},mean_{name},{}\n", p.m_n, format_f64(m)));
                out.push_str(&format!("{b},{},se_{name},{}\n", p.m_n, format_f64(se)));
            }
        }
        out
    }
}
