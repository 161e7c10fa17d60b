//! Calibration helpers shared by `calibrate` and `e2e`.

use anyhow::{Context, Result};
use serde::Serialize;
use wxpipe_core::calibration::{
    final_experiment, ranking_csv, rank_models, raw_metrics, run_experiments, FittedModel, Learner, PipelineConfig, RankRow,
    Split, RAW_KIND,
};
use wxpipe_core::metrics::MetricsReport;
use wxpipe_core::model::{format_ts, PairedDataset, Sensor};

use crate::error::usage;

/// The candidate pool plus the super learner stacked on it.
pub fn learners(forest_trees: usize, folds: usize) -> Vec<Learner> {
    let base = Learner::base_candidates(forest_trees);
    let mut all = base.clone();
    all.push(Learner::Ensemble { candidates: base, folds, metalearner: Default::default() });
    all
}

pub fn learner_named(name: &str, forest_trees: usize, folds: usize) -> Result<Learner> {
    learners(forest_trees, folds)
        .into_iter()
        .find(|l| l.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| usage(format!("unknown model {name:?}")))
}

pub fn experiment_seeds(n: u64) -> Vec<u64> {
    (1..=n).collect()
}

pub struct Ranking {
    pub rows: Vec<RankRow>,
    pub csv: String,
}

impl Ranking {
    /// Top-ranked model kind, ignoring the uncorrected baseline.
    pub fn best(&self) -> Option<&str> {
        self.rows.iter().map(|r| r.model.as_str()).find(|m| *m != RAW_KIND)
    }
}

pub fn rank(data: &PairedDataset, learners: &[Learner], seeds: &[u64]) -> Result<Ranking> {
    let set = run_experiments(data, learners, seeds, &PipelineConfig::default(), true);
    for f in &set.failures {
        log::warn!("{} {} seed {}: {}", data.sensor, f.kind, f.seed, f.error);
    }
    let rows = rank_models(&set).with_context(|| format!("ranking models for {}", data.sensor))?;
    let csv = ranking_csv(&rows);
    Ok(Ranking { rows, csv })
}

/// Best model from a ranking CSV written earlier.
pub fn best_from_ranking_csv(text: &str) -> Option<String> {
    text.lines().skip(1).filter_map(|l| l.split(',').next()).find(|m| !m.is_empty() && *m != RAW_KIND).map(str::to_string)
}

pub struct FinalOutcome {
    pub model: FittedModel,
    pub split: Split,
    pub yhat: Vec<f64>,
    pub raw: MetricsReport,
    pub corrected: MetricsReport,
}

pub fn run_final(data: &PairedDataset, learner: &Learner, train_days: u32, seed: u64) -> Result<FinalOutcome> {
    let out = final_experiment(data, learner, train_days, seed)
        .with_context(|| format!("final {} experiment for {}", learner.name(), data.sensor))?;
    let raw = raw_metrics(data, &out.split)?;
    Ok(FinalOutcome { model: out.model, split: out.split, yhat: out.yhat, raw, corrected: out.metrics })
}

pub const CORRECTED_HEADER: &str = "hour_start,lcaws_value,corrected_value,pws_value";

/// Test-window rows with the model's correction next to both stations.
pub fn corrected_csv(data: &PairedDataset, outcome: &FinalOutcome) -> String {
    let mut out = format!("{CORRECTED_HEADER}\n");
    for (&i, v) in outcome.split.test.iter().zip(&outcome.yhat) {
        let r = &data.rows()[i];
        out.push_str(&format!("{},{:.4},{:.4},{:.4}\n", format_ts(&r.hour_start), r.lcaws, v, r.pws));
    }
    out
}

pub const METRICS_HEADER: &str = "sensor,model,n,r2,mse,rmse,pcc,t,p,signif";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn metrics_line(sensor: Sensor, model: &str, m: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{:.4},{:.4},{},{},{},{}\n",
        sensor,
        model,
        m.n,
        opt(m.r2),
        m.mse,
        m.rmse,
        opt(m.pcc),
        opt(m.t_value),
        m.p_value.map(|p| format!("{p:.4e}")).unwrap_or_default(),
        m.significance()
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalSummary {
    pub sensor: Sensor,
    pub model: String,
    pub train_rows: usize,
    pub test_rows: usize,
    pub raw: MetricsReport,
    pub corrected: MetricsReport,
    pub weights: Vec<(String, f64)>,
}

impl FinalSummary {
    pub fn new(sensor: Sensor, outcome: &FinalOutcome) -> Self {
        FinalSummary {
            sensor,
            model: outcome.model.kind().to_string(),
            train_rows: outcome.split.train.len(),
            test_rows: outcome.split.test.len(),
            raw: outcome.raw.clone(),
            corrected: outcome.corrected.clone(),
            weights: outcome.model.weights(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_resolve_case_insensitively() {
        assert_eq!(learner_named("mlr", 10, 10).unwrap(), Learner::Mlr);
        assert!(matches!(learner_named("ensemble", 10, 5).unwrap(), Learner::Ensemble { folds: 5, .. }));
        assert!(learner_named("svm", 10, 10).is_err());
    }

    #[test]
    fn best_skips_raw() {
        let csv = "model,rank,avg_r2,sd_r2,t,p,signif\nRAW,1,0.99,0.01,,,\nMLR,2,0.98,0.01,1,0.1,\n";
        assert_eq!(best_from_ranking_csv(csv).as_deref(), Some("MLR"));
    }
}
