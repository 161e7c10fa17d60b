//! Sensor calibration: candidate regression learners, a stacked
//! super-learner chosen by cross-validated MSE, seeded experiments and
//! ranking, and correction of hourly data with a fitted model.

pub mod linalg;
mod pipeline;
pub mod tree;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsError;
use crate::model::Sensor;
use tree::{grow_forest, grow_tree, Tree, TreeParams};

pub use pipeline::*;

/// Number of covariates per row: the six low-cost hourly parameters.
pub const NFEAT: usize = 6;

pub type Features = [f64; NFEAT];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CalibrationError {
    #[error("dataset has {0} rows, need at least 5")]
    TooFewRows(usize),
    #[error("{k} folds requested for {n} rows")]
    KExceedsN { k: usize, n: usize },
    #[error("train fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("learner cannot be fitted: {0}")]
    InvalidLearner(String),
    #[error("need at least {needed} training rows, found {found}")]
    TooFewTrainingRows { needed: usize, found: usize },
    #[error("non-finite feature or target at row {0}")]
    NonFinite(usize),
    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),
    #[error("split left an empty partition")]
    EmptyPartition,
    #[error("ranking needs at least 2 model kinds with 2 seeds each")]
    InsufficientRuns,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How the stacking weights are obtained from the out-of-fold matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Metalearner {
    /// Least squares over the probability simplex (w ≥ 0, Σw = 1).
    #[default]
    Simplex,
    /// Non-negative least squares, then rescaled to sum to one.
    NnlsNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Learner {
    Mean,
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "MLR")]
    Mlr,
    Ridge { lambda: f64 },
    #[serde(rename = "KNN")]
    Knn { k: usize },
    Tree { min_leaf: usize, max_depth: Option<usize> },
    Forest { n_trees: usize, mtry: usize, min_leaf: usize },
    Ensemble { candidates: Vec<Learner>, folds: usize, metalearner: Metalearner },
}

impl Learner {
    pub fn name(&self) -> &'static str {
        match self {
            Learner::Mean => "Mean",
            Learner::Lm => "LM",
            Learner::Mlr => "MLR",
            Learner::Ridge { .. } => "Ridge",
            Learner::Knn { .. } => "KNN",
            Learner::Tree { .. } => "Tree",
            Learner::Forest { .. } => "Forest",
            Learner::Ensemble { .. } => "Ensemble",
        }
    }

    pub fn ridge() -> Self {
        Learner::Ridge { lambda: 1.0 }
    }

    pub fn knn() -> Self {
        Learner::Knn { k: 5 }
    }

    pub fn tree() -> Self {
        Learner::Tree { min_leaf: 5, max_depth: None }
    }

    /// Random forest with `⌈p/3⌉` features tried per split.
    pub fn forest(n_trees: usize) -> Self {
        Learner::Forest { n_trees, mtry: NFEAT.div_ceil(3), min_leaf: 5 }
    }

    /// The seven base candidates with their default hyperparameters.
    pub fn base_candidates(forest_trees: usize) -> Vec<Learner> {
        vec![
            Learner::Mean,
            Learner::Lm,
            Learner::Mlr,
            Learner::ridge(),
            Learner::knn(),
            Learner::tree(),
            Learner::forest(forest_trees),
        ]
    }

    pub fn ensemble(candidates: Vec<Learner>) -> Self {
        Learner::Ensemble { candidates, folds: 10, metalearner: Metalearner::default() }
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: &str| Err(CalibrationError::InvalidLearner(m.to_string()));
        match self {
            Learner::Ridge { lambda } if !(lambda.is_finite() && *lambda >= 0.0) => bad("ridge lambda must be ≥ 0"),
            Learner::Knn { k: 0 } => bad("kNN needs k ≥ 1"),
            Learner::Tree { min_leaf: 0, .. } | Learner::Forest { min_leaf: 0, .. } => bad("min_leaf must be ≥ 1"),
            Learner::Forest { n_trees, mtry, .. } if *n_trees == 0 || *mtry == 0 => bad("forest needs trees and features"),
            Learner::Ensemble { candidates, folds, .. } => {
                if candidates.is_empty() {
                    return bad("ensemble needs at least one candidate");
                }
                if *folds < 2 && candidates.len() > 1 {
                    return bad("ensemble needs at least 2 folds");
                }
                for c in candidates {
                    if matches!(c, Learner::Ensemble { .. }) {
                        return bad("ensembles cannot be nested");
                    }
                    c.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Which covariates a model reads. LM uses only the column of `sensor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub sensor: Sensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    fn fit(x: &[Features]) -> Self {
        let n = x.len() as f64;
        let mut means = vec![0.0; NFEAT];
        let mut sds = vec![0.0; NFEAT];
        for j in 0..NFEAT {
            means[j] = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = x.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
            // Constant columns become all-zero after centering.
            sds[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Standardization { means, sds }
    }

    fn apply(&self, row: &Features) -> [f64; NFEAT] {
        std::array::from_fn(|j| (row[j] - self.means[j]) / self.sds[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Params {
    Constant { value: f64 },
    /// `intercept + Σ coef[i]·x[columns[i]]`.
    Linear { intercept: f64, columns: Vec<usize>, coef: Vec<f64> },
    Ridge { scaling: Standardization, intercept: f64, coef: Vec<f64> },
    Knn { k: usize, scaling: Standardization, rows: Vec<Vec<f64>>, targets: Vec<f64> },
    Tree { tree: Tree },
    Forest { trees: Vec<Tree> },
    Ensemble { weights: Vec<f64>, candidate_cv_mse: Vec<Option<f64>>, members: Vec<Option<FittedModel>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub n_train: usize,
    pub folds: Option<usize>,
    pub cv_mse: Option<f64>,
    /// Set when a least-squares design was rank deficient and the
    /// minimum-norm solution was used.
    pub singular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub learner: Learner,
    pub params: Params,
    pub feature_spec: FeatureSpec,
    pub training_meta: TrainingMeta,
}

fn check_training(x: &[Features], y: &[f64]) -> Result<(), CalibrationError> {
    if x.len() != y.len() {
        return Err(CalibrationError::FeatureMismatch(format!("{} feature rows for {} targets", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(CalibrationError::TooFewTrainingRows { needed: 2, found: x.len() });
    }
    if let Some(i) = (0..x.len()).find(|&i| !y[i].is_finite() || x[i].iter().any(|v| !v.is_finite())) {
        return Err(CalibrationError::NonFinite(i));
    }
    Ok(())
}

fn fit_linear(x: &[Features], y: &[f64], columns: Vec<usize>) -> (Params, bool) {
    let n = x.len();
    let a = DMatrix::from_fn(n, columns.len() + 1, |i, j| if j == 0 { 1.0 } else { x[i][columns[j - 1]] });
    let b = DVector::from_column_slice(y);
    let (beta, singular) = linalg::lstsq_min_norm(&a, &b);
    let params = Params::Linear { intercept: beta[0], columns, coef: beta.iter().skip(1).copied().collect() };
    (params, singular)
}

fn fit_ridge(x: &[Features], y: &[f64], lambda: f64) -> Params {
    let scaling = Standardization::fit(x);
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let z = DMatrix::from_fn(x.len(), NFEAT, |i, j| (x[i][j] - scaling.means[j]) / scaling.sds[j]);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ybar));
    let mut gram = z.transpose() * &z;
    for j in 0..NFEAT {
        gram[(j, j)] += lambda;
    }
    let rhs = z.transpose() * yc;
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => linalg::lstsq_min_norm(&gram, &rhs).0,
    };
    Params::Ridge { scaling, intercept: ybar, coef: coef.iter().copied().collect() }
}

/// Fit one learner on a feature matrix and target. `seed` drives every
/// random choice (bootstraps, feature subsets, fold assignment).
pub fn fit_learner(
    learner: &Learner,
    x: &[Features],
    y: &[f64],
    sensor: Sensor,
    seed: u64,
) -> Result<FittedModel, CalibrationError> {
    learner.validate()?;
    check_training(x, y)?;
    let mut meta = TrainingMeta { seed, n_train: x.len(), folds: None, cv_mse: None, singular: false };
    let params = match learner {
        Learner::Mean => Params::Constant { value: y.iter().sum::<f64>() / y.len() as f64 },
        Learner::Lm => {
            let (p, singular) = fit_linear(x, y, vec![sensor.index()]);
            meta.singular = singular;
            p
        }
        Learner::Mlr => {
            let (p, singular) = fit_linear(x, y, (0..NFEAT).collect());
            meta.singular = singular;
            p
        }
        Learner::Ridge { lambda } => fit_ridge(x, y, *lambda),
        Learner::Knn { k } => {
            let scaling = Standardization::fit(x);
            let rows = x.iter().map(|r| scaling.apply(r).to_vec()).collect();
            Params::Knn { k: (*k).min(x.len()), scaling, rows, targets: y.to_vec() }
        }
        Learner::Tree { min_leaf, max_depth } => {
            let rows: Vec<usize> = (0..x.len()).collect();
            let params = TreeParams { min_leaf: *min_leaf, max_depth: *max_depth, mtry: NFEAT };
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            Params::Tree { tree: grow_tree(x, y, &rows, params, &mut rng) }
        }
        Learner::Forest { n_trees, mtry, min_leaf } => {
            let params = TreeParams { min_leaf: *min_leaf, max_depth: None, mtry: *mtry };
            Params::Forest { trees: grow_forest(x, y, *n_trees, params, seed) }
        }
        Learner::Ensemble { candidates, folds, metalearner } => {
            return pipeline::super_learner_xy(x, y, sensor, candidates, *folds, *metalearner, seed);
        }
    };
    Ok(FittedModel { learner: learner.clone(), params, feature_spec: FeatureSpec { sensor }, training_meta: meta })
}

impl FittedModel {
    pub fn kind(&self) -> &'static str {
        self.learner.name()
    }

    /// Predict one value per row. Rows must be finite.
    pub fn predict(&self, rows: &[Features]) -> Result<Vec<f64>, CalibrationError> {
        if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(CalibrationError::FeatureMismatch(format!("non-finite covariate in row {i}")));
        }
        Ok(rows.iter().map(|r| self.predict_row(r)).collect())
    }

    fn predict_row(&self, x: &Features) -> f64 {
        match &self.params {
            Params::Constant { value } => *value,
            Params::Linear { intercept, columns, coef } => {
                intercept + columns.iter().zip(coef).map(|(&c, b)| b * x[c]).sum::<f64>()
            }
            Params::Ridge { scaling, intercept, coef } => {
                let z = scaling.apply(x);
                intercept + z.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>()
            }
            Params::Knn { k, scaling, rows, targets } => {
                let z = scaling.apply(x);
                let mut dist: Vec<(f64, usize)> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (r.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                    .collect();
                let k = (*k).min(dist.len());
                dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                dist[..k].iter().map(|&(_, i)| targets[i]).sum::<f64>() / k as f64
            }
            Params::Tree { tree } => tree.predict_one(x),
            Params::Forest { trees } => trees.iter().map(|t| t.predict_one(x)).sum::<f64>() / trees.len() as f64,
            Params::Ensemble { weights, members, .. } => weights
                .iter()
                .zip(members)
                .filter_map(|(w, m)| m.as_ref().map(|m| w * m.predict_row(x)))
                .sum(),
        }
    }

    /// Non-zero ensemble weights by candidate name, or `[(kind, 1)]` for a
    /// single model.
    pub fn weights(&self) -> Vec<(String, f64)> {
        match (&self.params, &self.learner) {
            (Params::Ensemble { weights, .. }, Learner::Ensemble { candidates, .. }) => candidates
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(c, &w)| (c.name().to_string(), w))
                .collect(),
            _ => vec![(self.kind().to_string(), 1.0)],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
