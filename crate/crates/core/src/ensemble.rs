//! Ensembles over the configurations' binary predictions: penalized logistic
//! regression evaluated with leave-one-provider-group-out folds.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, MeanSd, SignalTask, SliceKey, VisitMetadata};
use crate::error::{Error, Result};
use crate::inference::PredictionRecord;
use crate::metrics::{balanced_accuracy, Confusion};
use crate::mixedglm::logistic_irls;
use crate::promptkit::Configuration;

pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Feature value for an abstained or missing configuration output.
pub const ABSTAIN_FEATURE: f64 = 0.5;
/// Intercept used when every training label has the same class.
pub const CONSTANT_INTERCEPT: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    #[default]
    L1,
    L2,
}

impl Penalty {
    pub fn label(self) -> &'static str {
        match self {
            Penalty::L1 => "L1",
            Penalty::L2 => "L2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for CdOptions {
    fn default() -> Self {
        CdOptions {
            tolerance: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenalizedFit {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub penalty: Penalty,
    pub sweeps: usize,
    pub converged: bool,
}

impl PenalizedFit {
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let eta = self.intercept + self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>();
        1.0 / (1.0 + (-eta).exp())
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.predict_proba(row) >= 0.5)
    }

    pub fn nonzero(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&j| self.weights[j] != 0.0).collect()
    }
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

fn check_shape(x: &[Vec<f64>], y: &[u8]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::validation(
            "ensemble fit",
            format!("{} feature rows for {} labels", x.len(), y.len()),
        ));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::validation("ensemble fit", "ragged feature matrix"));
    }
    Ok(p)
}

fn constant_fit(y: &[u8], p: usize, lambda: f64, penalty: Penalty) -> Option<PenalizedFit> {
    let first = y[0];
    y.iter().all(|&v| v == first).then(|| PenalizedFit {
        intercept: if first == 1 { CONSTANT_INTERCEPT } else { -CONSTANT_INTERCEPT },
        weights: vec![0.0; p],
        lambda,
        penalty,
        sweeps: 0,
        converged: true,
    })
}

/// Cyclic coordinate descent on mean logistic loss plus the penalty
/// (`lambda * sum |w|` for L1, `lambda / 2 * sum w^2` for L2). Each coordinate
/// takes a majorize-minimize step using the curvature bound `mean(x^2) / 4`.
pub(crate) fn coordinate_descent(
    x: &[Vec<f64>],
    y: &[u8],
    lambda: f64,
    penalty: Penalty,
    opts: CdOptions,
) -> Result<PenalizedFit> {
    let p = check_shape(x, y)?;
    if let Some(fit) = constant_fit(y, p, lambda, penalty) {
        return Ok(fit);
    }
    let n = x.len() as f64;
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let curvature: Vec<f64> = (0..p)
        .map(|j| x.iter().map(|r| r[j] * r[j]).sum::<f64>() / n / 4.0)
        .collect();
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut eta: Vec<f64> = vec![0.0; x.len()];
    let mu = |e: f64| 1.0 / (1.0 + (-e).exp());
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        let g0 = eta.iter().zip(&yf).map(|(&e, &t)| mu(e) - t).sum::<f64>() / n;
        let step0 = -g0 / 0.25;
        b += step0;
        eta.iter_mut().for_each(|e| *e += step0);
        max_step = max_step.max(step0.abs());
        for j in 0..p {
            let h = curvature[j];
            if h == 0.0 {
                continue;
            }
            let g = x
                .iter()
                .zip(&eta)
                .zip(&yf)
                .map(|((r, &e), &t)| (mu(e) - t) * r[j])
                .sum::<f64>()
                / n;
            let new = match penalty {
                Penalty::L1 => soft_threshold(h * w[j] - g, lambda) / h,
                Penalty::L2 => (h * w[j] - g) / (h + lambda),
            };
            let delta = new - w[j];
            if delta != 0.0 {
                for (e, r) in eta.iter_mut().zip(x) {
                    *e += delta * r[j];
                }
                w[j] = new;
            }
            max_step = max_step.max(delta.abs());
        }
        if max_step < opts.tolerance {
            converged = true;
            break;
        }
    }
    Ok(PenalizedFit {
        intercept: b,
        weights: w,
        lambda,
        penalty,
        sweeps,
        converged,
    })
}

/// L1 (or L2) penalized logistic regression with an unpenalized intercept.
/// `lambda = 0` is solved by IRLS and fails on separable data.
pub fn penalized_logistic_fit(
    x: &[Vec<f64>],
    y: &[u8],
    lambda: f64,
    penalty: Penalty,
    opts: CdOptions,
) -> Result<PenalizedFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda > 0.0 {
        return coordinate_descent(x, y, lambda, penalty, opts);
    }
    let p = check_shape(x, y)?;
    if let Some(fit) = constant_fit(y, p, lambda, penalty) {
        return Ok(fit);
    }
    let design = DMatrix::from_fn(x.len(), p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let fit = logistic_irls(&design, &yf, None)?;
    Ok(PenalizedFit {
        intercept: fit.coefficients[0],
        weights: fit.coefficients[1..].to_vec(),
        lambda,
        penalty,
        sweeps: fit.iterations,
        converged: true,
    })
}

pub fn l1_logistic_fit(x: &[Vec<f64>], y: &[u8], lambda: f64, opts: CdOptions) -> Result<PenalizedFit> {
    penalized_logistic_fit(x, y, lambda, Penalty::L1, opts)
}

// ---------------------------------------------------------------------------
// Folds

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleFold {
    pub held_out_group: String,
    pub train_keys: Vec<SliceKey>,
    pub test_keys: Vec<SliceKey>,
}

/// One fold per provider group; the test set holds every slice of that
/// group's visits.
pub fn logo_folds(keys: &[SliceKey], metadata: &BTreeMap<String, VisitMetadata>) -> Result<Vec<EnsembleFold>> {
    let mut by_group: BTreeMap<&str, Vec<SliceKey>> = BTreeMap::new();
    let mut unique: BTreeSet<&SliceKey> = BTreeSet::new();
    for k in keys {
        if !unique.insert(k) {
            continue;
        }
        let meta = metadata
            .get(&k.visit_id)
            .ok_or_else(|| Error::Config(format!("visit `{}` has no metadata", k.visit_id)))?;
        if meta.provider_group.trim().is_empty() {
            return Err(Error::Config(format!("visit `{}` has no provider_group", k.visit_id)));
        }
        by_group.entry(meta.provider_group.as_str()).or_default().push(k.clone());
    }
    if by_group.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-group-out needs at least two provider groups, found {}",
            by_group.len()
        )));
    }
    let folds = by_group
        .iter()
        .map(|(g, test)| EnsembleFold {
            held_out_group: g.to_string(),
            train_keys: by_group
                .iter()
                .filter(|(other, _)| *other != g)
                .flat_map(|(_, ks)| ks.iter().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            test_keys: test.clone(),
        })
        .collect();
    Ok(folds)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Per-task design: one row per labeled slice, one column per configuration.
#[derive(Debug, Clone)]
pub struct TaskMatrix {
    pub signal_id: String,
    pub keys: Vec<SliceKey>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

pub fn task_matrix(
    records: &[PredictionRecord],
    labels: &LabelSet,
    configs: &[Configuration],
    task: &SignalTask,
) -> TaskMatrix {
    let col: BTreeMap<String, usize> = configs.iter().enumerate().map(|(i, c)| (c.config_id(), i)).collect();
    let mut rows: BTreeMap<SliceKey, Vec<f64>> = BTreeMap::new();
    for (k, _) in labels.labels.iter().filter(|(k, _)| k.signal_id == task.signal_id) {
        rows.insert(
            SliceKey {
                visit_id: k.visit_id.clone(),
                slice_index: k.slice_index,
            },
            vec![ABSTAIN_FEATURE; configs.len()],
        );
    }
    for r in records.iter().filter(|r| r.signal_id == task.signal_id) {
        let key = SliceKey {
            visit_id: r.visit_id.clone(),
            slice_index: r.slice_index,
        };
        if let (Some(row), Some(&j), Some(p)) = (rows.get_mut(&key), col.get(&r.config_id), r.prediction) {
            row[j] = f64::from(p);
        }
    }
    let mut out = TaskMatrix {
        signal_id: task.signal_id.to_string(),
        keys: Vec::new(),
        features: Vec::new(),
        labels: Vec::new(),
    };
    for (key, row) in rows {
        let label = labels
            .get(&key.visit_id, key.slice_index, task.signal_id)
            .expect("row built from labels");
        out.keys.push(key);
        out.features.push(row);
        out.labels.push(label.binary);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub held_out_group: String,
    pub n_train: usize,
    pub n_test: usize,
    pub balanced_accuracy: Option<f64>,
    pub degenerate: bool,
    pub model: Option<PenalizedFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEnsemble {
    pub signal_id: String,
    pub folds: Vec<FoldResult>,
    pub summary: Option<MeanSd>,
    /// Folds without test labels for this task.
    pub skipped_groups: Vec<String>,
    /// Configurations with a nonzero weight when fitted on all slices.
    pub nonzero_configs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub lambda: f64,
    pub penalty: Penalty,
    pub configs: Vec<String>,
    pub tasks: Vec<TaskEnsemble>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub lambda: f64,
    pub penalty: Penalty,
    pub cd: CdOptions,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            lambda: DEFAULT_LAMBDA,
            penalty: Penalty::L1,
            cd: CdOptions::default(),
        }
    }
}

/// Fits on the fold's training rows and scores its test rows.
pub fn evaluate_fold(matrix: &TaskMatrix, fold: &EnsembleFold, opts: &EnsembleOptions) -> Result<FoldResult> {
    let train: BTreeSet<&SliceKey> = fold.train_keys.iter().collect();
    let test: BTreeSet<&SliceKey> = fold.test_keys.iter().collect();
    let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((k, x), &y) in matrix.keys.iter().zip(&matrix.features).zip(&matrix.labels) {
        if train.contains(k) {
            xtr.push(x.clone());
            ytr.push(y);
        } else if test.contains(k) {
            xte.push(x.clone());
            yte.push(y);
        }
    }
    let mut result = FoldResult {
        held_out_group: fold.held_out_group.clone(),
        n_train: ytr.len(),
        n_test: yte.len(),
        balanced_accuracy: None,
        degenerate: false,
        model: None,
    };
    if yte.is_empty() || ytr.is_empty() {
        return Ok(result);
    }
    let model = penalized_logistic_fit(&xtr, &ytr, opts.lambda, opts.penalty, opts.cd)?;
    let confusion = Confusion::from_pairs(xte.iter().zip(&yte).map(|(x, &y)| (model.predict(x), y)));
    let ba = balanced_accuracy(&confusion)?;
    result.balanced_accuracy = Some(ba.value);
    result.degenerate = ba.degenerate;
    result.model = Some(model);
    Ok(result)
}

pub fn ensemble_evaluate(
    records: &[PredictionRecord],
    labels: &LabelSet,
    metadata: &BTreeMap<String, VisitMetadata>,
    configs: &[Configuration],
    tasks: &[&'static SignalTask],
    opts: &EnsembleOptions,
) -> Result<EnsembleReport> {
    let mut out = Vec::new();
    for task in tasks {
        let matrix = task_matrix(records, labels, configs, task);
        if matrix.keys.is_empty() {
            continue;
        }
        let folds = logo_folds(&matrix.keys, metadata)?;
        let mut results = Vec::new();
        let mut skipped = Vec::new();
        for fold in &folds {
            let r = evaluate_fold(&matrix, fold, opts)?;
            if r.balanced_accuracy.is_none() {
                skipped.push(r.held_out_group.clone());
            }
            results.push(r);
        }
        let bas: Vec<f64> = results.iter().filter_map(|r| r.balanced_accuracy).collect();
        let full = penalized_logistic_fit(&matrix.features, &matrix.labels, opts.lambda, opts.penalty, opts.cd)?;
        out.push(TaskEnsemble {
            signal_id: task.signal_id.to_string(),
            folds: results,
            summary: MeanSd::of(&bas),
            skipped_groups: skipped,
            nonzero_configs: full.nonzero().into_iter().map(|j| configs[j].config_id()).collect(),
        });
    }
    Ok(EnsembleReport {
        lambda: opts.lambda,
        penalty: opts.penalty,
        configs: configs.iter().map(|c| c.config_id()).collect(),
        tasks: out,
    })
}
