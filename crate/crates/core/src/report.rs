//! End-to-end influence report for a fitted model and a list of subsets.

use serde::Serialize;

use crate::approx::{expected_cd_traces, first_order_distances};
use crate::bootstrap::{
    bootstrap_summaries, influence_probabilities, scaled_distances, BootstrapConfig, BootstrapMode,
};
use crate::data::Dataset;
use crate::deletion::{exact_distances, SubsetIndex};
use crate::error::Result;
use crate::io::format_f64;
use crate::model::{FitResult, ModelKind};
use crate::perturbation::{closed_form, perturb_mc, PerturbationSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnoseOptions {
    /// Bootstrap replicates; 0 skips calibration.
    pub replicates: usize,
    pub mode: BootstrapMode,
    pub conditional: bool,
    pub seed: u64,
    /// Monte Carlo draws for the perturbation cross-check; 0 skips it.
    pub mc_draws: usize,
}

impl DiagnoseOptions {
    /// Exact refits for the linear model, first-order replicates for the mixed model.
    pub fn default_for(model: ModelKind) -> Self {
        let mode = match model {
            ModelKind::Lm => BootstrapMode::Exact,
            ModelKind::Lmm => BootstrapMode::FirstOrder,
        };
        Self {
            replicates: 100,
            mode,
            conditional: true,
            seed: 0,
            mc_draws: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub subset_id: String,
    pub n_obs: usize,
    pub perturbation: f64,
    pub perturbation_approx: f64,
    pub p_mc: Option<f64>,
    pub p_mc_se: Option<f64>,
    pub cd: f64,
    pub cd_tilde: f64,
    pub e_cd_trace: f64,
    pub mean_cd: Option<f64>,
    pub std_cd: Option<f64>,
    pub median_cd: Option<f64>,
    pub mstd_cd: Option<f64>,
    /// Mean-scaled distance; conditionally scaled when the report is conditional.
    pub scd1: Option<f64>,
    /// Median-scaled distance.
    pub scd2: Option<f64>,
    pub p_a: Option<f64>,
    pub p_b: Option<f64>,
    pub p_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CookReport {
    pub model: ModelKind,
    pub seed: u64,
    #[serde(rename = "S")]
    pub replicates: usize,
    pub mode: BootstrapMode,
    pub conditional: bool,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 14] = [
    "subset_id",
    "n_obs",
    "perturbation",
    "cd",
    "cd_tilde",
    "mean_cd",
    "std_cd",
    "median_cd",
    "mstd_cd",
    "scd1",
    "scd2",
    "p_a",
    "p_b",
    "p_c",
];

pub const PERTURBATION_COLUMNS: [&str; 5] = [
    "subset_id",
    "p_exact_or_closed",
    "p_approx",
    "p_mc",
    "p_mc_se",
];

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl CookReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let fields = [
                csv_field(&r.subset_id),
                r.n_obs.to_string(),
                format_f64(r.perturbation),
                format_f64(r.cd),
                format_f64(r.cd_tilde),
                opt(r.mean_cd),
                opt(r.std_cd),
                opt(r.median_cd),
                opt(r.mstd_cd),
                opt(r.scd1),
                opt(r.scd2),
                opt(r.p_a),
                opt(r.p_b),
                opt(r.p_c),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn perturbation_csv(&self) -> String {
        let mut out = PERTURBATION_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let fields = [
                csv_field(&r.subset_id),
                format_f64(r.perturbation),
                format_f64(r.perturbation_approx),
                opt(r.p_mc),
                opt(r.p_mc_se),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Perturbation, exact and first-order distances, and (when requested)
/// bootstrap calibration for every subset.
pub fn diagnose(
    data: &Dataset,
    fit: &FitResult,
    subsets: &[SubsetIndex],
    opts: &DiagnoseOptions,
) -> Result<CookReport> {
    let cds = exact_distances(data, fit, subsets)?;
    let cd_tilde = first_order_distances(data, &fit.theta_hat, fit, subsets)?;
    let traces = expected_cd_traces(data, fit, subsets)?;
    let perturbations = subsets
        .iter()
        .map(|s| closed_form(data, fit, s.ids()))
        .collect::<Result<Vec<_>>>()?;
    let mc = if opts.mc_draws > 0 {
        let spec = PerturbationSpec::from_fit(data, fit, fit.interest, opts.mc_draws)?;
        Some(
            subsets
                .iter()
                .map(|s| perturb_mc(data, s, &spec, opts.seed))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let mut rows: Vec<ReportRow> = subsets
        .iter()
        .enumerate()
        .map(|(k, s)| ReportRow {
            subset_id: s.label(data),
            n_obs: s.n_obs(),
            perturbation: perturbations[k].0,
            perturbation_approx: perturbations[k].1,
            p_mc: mc.as_ref().map(|m| m[k].estimate),
            p_mc_se: mc.as_ref().map(|m| m[k].std_error),
            cd: cds[k],
            cd_tilde: cd_tilde[k],
            e_cd_trace: traces[k],
            mean_cd: None,
            std_cd: None,
            median_cd: None,
            mstd_cd: None,
            scd1: None,
            scd2: None,
            p_a: None,
            p_b: None,
            p_c: None,
        })
        .collect();

    if opts.replicates > 0 {
        let config = BootstrapConfig {
            replicates: opts.replicates,
            mode: opts.mode,
            conditional: opts.conditional,
            seed: opts.seed,
        };
        let summaries = bootstrap_summaries(data, fit, subsets, &config)?;
        // The observed statistic matches the replicate statistic.
        let observed = match opts.mode {
            BootstrapMode::Exact => &cds,
            BootstrapMode::FirstOrder => &cd_tilde,
        };
        let mut observed_scd1 = Vec::with_capacity(rows.len());
        for (k, summary) in summaries.iter().enumerate() {
            let (scd1, scd2) = scaled_distances(observed[k], summary)?;
            observed_scd1.push(scd1);
            let row = &mut rows[k];
            row.mean_cd = Some(summary.mean);
            row.std_cd = Some(summary.std);
            row.median_cd = Some(summary.median);
            row.mstd_cd = Some(summary.mstd);
            row.scd1 = Some(scd1);
            row.scd2 = Some(scd2);
        }
        let replicate_scd1: Vec<Vec<f64>> = summaries.iter().map(|s| s.standardized()).collect();
        let probs = influence_probabilities(&observed_scd1, &replicate_scd1, &cds)?;
        for (row, p) in rows.iter_mut().zip(&probs) {
            row.p_a = Some(p.p_a);
            row.p_b = Some(p.p_b);
            row.p_c = p.p_c;
        }
    } else if rows.len() > 1 {
        let probs =
            influence_probabilities(&vec![0.0; rows.len()], &vec![Vec::new(); rows.len()], &cds)?;
        for (row, p) in rows.iter_mut().zip(&probs) {
            row.p_c = p.p_c;
        }
    }

    Ok(CookReport {
        model: fit.model,
        seed: opts.seed,
        replicates: opts.replicates,
        mode: opts.mode,
        conditional: opts.conditional,
        rows,
    })
}
