use chrono::Duration;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::tree_seed;
use super::{fit_learner, linalg, CalibrationError, FeatureSpec, Features, FittedModel, Learner, Metalearner, Params, TrainingMeta};
use crate::metrics::{paired_t_test, significance_code, MetricsError, MetricsReport};
use crate::model::{HourlyRecord, PairedDataset, Sensor};

const NNLS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    Random,
    Chronological,
}

/// Row indices into a paired dataset, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Split into train and test. Random mode shuffles with `seed` and takes the
/// first `round(n·fraction)` rows; chronological mode takes the earliest.
pub fn split_dataset(data: &PairedDataset, train_fraction: f64, mode: SplitMode, seed: u64) -> Result<Split, CalibrationError> {
    let n = data.len();
    if n < 5 {
        return Err(CalibrationError::TooFewRows(n));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CalibrationError::InvalidFraction(train_fraction));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(CalibrationError::EmptyPartition);
    }
    let order = match mode {
        SplitMode::Random => shuffled(n, seed),
        SplitMode::Chronological => (0..n).collect(),
    };
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Chronological split: rows within `train_days` of the first hour train,
/// the rest test.
pub fn split_by_days(data: &PairedDataset, train_days: u32) -> Result<Split, CalibrationError> {
    if data.len() < 5 {
        return Err(CalibrationError::TooFewRows(data.len()));
    }
    let cutoff = data.rows()[0].hour_start + Duration::days(train_days as i64);
    let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.rows()[i].hour_start < cutoff);
    if train.is_empty() || test.is_empty() {
        return Err(CalibrationError::EmptyPartition);
    }
    Ok(Split { train, test })
}

/// `k` validation folds over a seeded permutation of `0..n`; the first
/// `n mod k` folds hold one extra index.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, CalibrationError> {
    if k == 0 || k > n {
        return Err(CalibrationError::KExceedsN { k, n });
    }
    let order = shuffled(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = order[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }
    Ok(folds)
}

fn design(data: &PairedDataset, rows: &[usize]) -> (Vec<Features>, Vec<f64>) {
    rows.iter().map(|&i| (data.rows()[i].covariates, data.rows()[i].pws)).unzip()
}

fn mse(y: &[f64], yhat: impl Iterator<Item = f64>) -> f64 {
    y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

/// Out-of-fold prediction matrix: column `j` holds candidate `j`'s
/// predictions for each row from the fit that excluded that row's fold.
pub fn out_of_fold_matrix(
    x: &[Features],
    y: &[f64],
    sensor: Sensor,
    candidates: &[Learner],
    folds: &[Vec<usize>],
    seed: u64,
) -> Result<DMatrix<f64>, CalibrationError> {
    let n = x.len();
    let mut z = DMatrix::zeros(n, candidates.len());
    let mut in_fold = vec![usize::MAX; n];
    for (f, fold) in folds.iter().enumerate() {
        for &i in fold {
            in_fold[i] = f;
        }
    }
    for (f, fold) in folds.iter().enumerate() {
        let (tx, ty): (Vec<Features>, Vec<f64>) = (0..n).filter(|&i| in_fold[i] != f).map(|i| (x[i], y[i])).unzip();
        let vx: Vec<Features> = fold.iter().map(|&i| x[i]).collect();
        for (j, cand) in candidates.iter().enumerate() {
            let model = fit_learner(cand, &tx, &ty, sensor, tree_seed(seed, f))?;
            for (&i, p) in fold.iter().zip(model.predict(&vx)?) {
                z[(i, j)] = p;
            }
        }
    }
    Ok(z)
}

pub(crate) fn super_learner_xy(
    x: &[Features],
    y: &[f64],
    sensor: Sensor,
    candidates: &[Learner],
    k: usize,
    metalearner: Metalearner,
    seed: u64,
) -> Result<FittedModel, CalibrationError> {
    let learner = Learner::Ensemble { candidates: candidates.to_vec(), folds: k, metalearner };
    learner.validate()?;
    let spec = FeatureSpec { sensor };

    if candidates.len() == 1 {
        let member = fit_learner(&candidates[0], x, y, sensor, seed)?;
        let meta = TrainingMeta { folds: None, cv_mse: None, ..member.training_meta.clone() };
        let params = Params::Ensemble { weights: vec![1.0], candidate_cv_mse: vec![None], members: vec![Some(member)] };
        return Ok(FittedModel { learner, params, feature_spec: spec, training_meta: meta });
    }

    if x.len() < k {
        return Err(CalibrationError::KExceedsN { k, n: x.len() });
    }
    let folds = kfold_indices(x.len(), k, seed)?;
    let z = out_of_fold_matrix(x, y, sensor, candidates, &folds, seed)?;
    let yv = DVector::from_column_slice(y);
    let cv: Vec<f64> = (0..candidates.len()).map(|j| mse(y, z.column(j).iter().copied())).collect();
    let best = (0..cv.len()).min_by(|&a, &b| cv[a].total_cmp(&cv[b])).unwrap();

    let raw = match metalearner {
        Metalearner::Simplex => linalg::simplex_lstsq(&z, &yv, NNLS_TOL),
        Metalearner::NnlsNormalized => linalg::nnls(&z, &yv, NNLS_TOL),
    };
    let total: f64 = raw.sum();
    let weights: Vec<f64> = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        (0..cv.len()).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
    };
    let ensemble_cv = mse(y, (0..x.len()).map(|i| (0..weights.len()).map(|j| weights[j] * z[(i, j)]).sum()));

    let mut members = Vec::with_capacity(candidates.len());
    let mut singular = false;
    for (cand, &w) in candidates.iter().zip(&weights) {
        if w > 0.0 {
            let m = fit_learner(cand, x, y, sensor, seed)?;
            singular |= m.training_meta.singular;
            members.push(Some(m));
        } else {
            members.push(None);
        }
    }
    let meta = TrainingMeta { seed, n_train: x.len(), folds: Some(k), cv_mse: Some(ensemble_cv), singular };
    let params = Params::Ensemble { weights, candidate_cv_mse: cv.into_iter().map(Some).collect(), members };
    Ok(FittedModel { learner, params, feature_spec: spec, training_meta: meta })
}

/// Stack `candidates` with weights chosen to minimise the `k`-fold
/// cross-validated squared error on `train`.
pub fn super_learner(train: &PairedDataset, candidates: &[Learner], k: usize, seed: u64) -> Result<FittedModel, CalibrationError> {
    let rows: Vec<usize> = (0..train.len()).collect();
    let (x, y) = design(train, &rows);
    super_learner_xy(&x, &y, train.sensor, candidates, k, Metalearner::default(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { train_fraction: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub kind: String,
    pub seed: u64,
    pub model: FittedModel,
    pub split: Split,
    pub yhat: Vec<f64>,
    pub metrics: MetricsReport,
}

fn fit_and_test(data: &PairedDataset, learner: &Learner, split: Split, seed: u64) -> Result<ExperimentOutput, CalibrationError> {
    let (tx, ty) = design(data, &split.train);
    let (vx, vy) = design(data, &split.test);
    let model = fit_learner(learner, &tx, &ty, data.sensor, seed)?;
    let yhat = model.predict(&vx)?;
    let metrics = MetricsReport::compute(&vy, &yhat)?;
    Ok(ExperimentOutput { kind: learner.name().to_string(), seed, model, split, yhat, metrics })
}

/// One seeded experiment: random split, fit on train, score on test.
pub fn learning_pipeline(data: &PairedDataset, learner: &Learner, seed: u64, cfg: &PipelineConfig) -> Result<ExperimentOutput, CalibrationError> {
    let split = split_dataset(data, cfg.train_fraction, SplitMode::Random, seed)?;
    fit_and_test(data, learner, split, seed)
}

/// The fixed-interval experiment: train on the first `train_days`, test on
/// the remainder.
pub fn final_experiment(data: &PairedDataset, learner: &Learner, train_days: u32, seed: u64) -> Result<ExperimentOutput, CalibrationError> {
    let split = split_by_days(data, train_days)?;
    fit_and_test(data, learner, split, seed)
}

/// Metrics of the uncorrected low-cost values on the test rows of `split`.
pub fn raw_metrics(data: &PairedDataset, split: &Split) -> Result<MetricsReport, CalibrationError> {
    let x: Vec<f64> = split.test.iter().map(|&i| data.rows()[i].lcaws).collect();
    let y: Vec<f64> = split.test.iter().map(|&i| data.rows()[i].pws).collect();
    Ok(MetricsReport::compute(&y, &x)?)
}

pub const RAW_KIND: &str = "RAW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub kind: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSet {
    pub runs: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: String,
    pub n: usize,
    pub mean_r2: f64,
    pub sd_r2: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

impl ExperimentSet {
    fn r2_by_kind(&self) -> Vec<(String, Vec<(u64, f64)>)> {
        let mut out: Vec<(String, Vec<(u64, f64)>)> = Vec::new();
        for run in &self.runs {
            let Some(r2) = run.metrics.r2 else { continue };
            match out.iter_mut().find(|(k, _)| *k == run.kind) {
                Some((_, v)) => v.push((run.seed, r2)),
                None => out.push((run.kind.clone(), vec![(run.seed, r2)])),
            }
        }
        out
    }

    /// Mean and sample SD of test R² per kind, in first-seen order.
    pub fn summaries(&self) -> Vec<KindSummary> {
        self.r2_by_kind()
            .into_iter()
            .map(|(kind, v)| {
                let vals: Vec<f64> = v.iter().map(|p| p.1).collect();
                let (mean_r2, sd_r2) = mean_sd(&vals);
                KindSummary { kind, n: vals.len(), mean_r2, sd_r2 }
            })
            .collect()
    }
}

/// Every (learner, seed) pipeline run, plus the uncorrected baseline on the
/// same test rows when `include_raw` is set. Failed runs are recorded and
/// the rest continue. Models are dropped once scored.
pub fn run_experiments(
    data: &PairedDataset,
    learners: &[Learner],
    seeds: &[u64],
    cfg: &PipelineConfig,
    include_raw: bool,
) -> ExperimentSet {
    let mut set = ExperimentSet::default();
    let fail = |set: &mut ExperimentSet, kind: &str, seed: u64, e: CalibrationError| {
        set.failures.push(RunFailure { kind: kind.to_string(), seed, error: e.to_string() })
    };
    for &seed in seeds {
        if include_raw {
            match split_dataset(data, cfg.train_fraction, SplitMode::Random, seed).and_then(|s| raw_metrics(data, &s)) {
                Ok(metrics) => set.runs.push(RunSummary { kind: RAW_KIND.to_string(), seed, metrics }),
                Err(e) => fail(&mut set, RAW_KIND, seed, e),
            }
        }
        for learner in learners {
            match learning_pipeline(data, learner, seed, cfg) {
                Ok(out) => set.runs.push(RunSummary { kind: out.kind, seed, metrics: out.metrics }),
                Err(e) => fail(&mut set, learner.name(), seed, e),
            }
        }
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub model: String,
    pub rank: usize,
    pub n: usize,
    pub mean_r2: f64,
    pub sd_r2: f64,
    /// Paired t-test of the top model's per-seed R² against this row's.
    pub t: Option<f64>,
    pub p: Option<f64>,
    /// Set when every per-seed difference is identical (no variance).
    pub tie: bool,
}

/// Rank kinds by mean test R² and test the leader against each other kind,
/// pairing runs on seed.
pub fn rank_models(set: &ExperimentSet) -> Result<Vec<RankRow>, CalibrationError> {
    let mut kinds = set.r2_by_kind();
    kinds.retain(|(_, v)| v.len() >= 2);
    if kinds.len() < 2 {
        return Err(CalibrationError::InsufficientRuns);
    }
    let mut rows: Vec<(String, Vec<(u64, f64)>, f64, f64)> = kinds
        .into_iter()
        .map(|(k, v)| {
            let vals: Vec<f64> = v.iter().map(|p| p.1).collect();
            let (m, sd) = mean_sd(&vals);
            (k, v, m, sd)
        })
        .collect();
    rows.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));

    let top = rows[0].1.clone();
    let mut out = Vec::with_capacity(rows.len());
    for (i, (model, runs, mean_r2, sd_r2)) in rows.into_iter().enumerate() {
        let (mut t, mut p, mut tie) = (None, None, false);
        if i > 0 {
            let (a, b): (Vec<f64>, Vec<f64>) =
                top.iter().filter_map(|(s, r)| runs.iter().find(|(s2, _)| s2 == s).map(|(_, r2)| (*r, *r2))).unzip();
            match paired_t_test(&a, &b) {
                Ok(res) => {
                    t = Some(res.t);
                    p = Some(res.p);
                }
                Err(MetricsError::ZeroVariance) => tie = true,
                Err(MetricsError::TooFew { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        out.push(RankRow { model, rank: i + 1, n: runs.len(), mean_r2, sd_r2, t, p, tie });
    }
    Ok(out)
}

pub const RANKING_HEADER: &str = "model,rank,avg_r2,sd_r2,t,p,signif";

pub fn ranking_csv(rows: &[RankRow]) -> String {
    let mut out = format!("{RANKING_HEADER}\n");
    for r in rows {
        let (t, p, code) = match (r.t, r.p) {
            (Some(t), Some(p)) => (format!("{t:.4}"), format!("{p:.4e}"), significance_code(p).to_string()),
            _ if r.tie => ("tie".to_string(), "tie".to_string(), String::new()),
            _ => (String::new(), String::new(), String::new()),
        };
        out.push_str(&format!("{},{},{:.4},{:.4},{},{},{}\n", r.model, r.rank, r.mean_r2, r.sd_r2, t, p, code));
    }
    out
}

/// Clamp a corrected value into the physical range of its sensor.
pub fn physical_bounds(sensor: Sensor, v: f64) -> f64 {
    match sensor {
        Sensor::Wd => v.rem_euclid(360.0),
        Sensor::Rg | Sensor::Ws => v.max(0.0),
        _ => v,
    }
}

/// Replace `sensor`'s column of each record with the model's prediction.
pub fn correct_dataset(model: &FittedModel, hourly: &[HourlyRecord], sensor: Sensor) -> Result<Vec<HourlyRecord>, CalibrationError> {
    if model.feature_spec.sensor != sensor {
        return Err(CalibrationError::FeatureMismatch(format!(
            "model was trained for {}, asked to correct {}",
            model.feature_spec.sensor, sensor
        )));
    }
    let rows: Vec<Features> = hourly.iter().map(|r| r.values()).collect();
    let pred = model.predict(&rows)?;
    Ok(hourly
        .iter()
        .zip(pred)
        .map(|(r, v)| {
            let mut out = *r;
            out.set_value(sensor, physical_bounds(sensor, v));
            out
        })
        .collect())
}
