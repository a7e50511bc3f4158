//! Accuracy evaluation, the robustness matrix (models x test conditions)
//! and its CSV/JSON/text reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::SeverityProfile;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::perturb::{
    bim_attack_batch, perturb_batch, AttackSpec, PerturbationKind, PerturbationSpec,
};
use crate::tensor::Tensor;

use super::data::Dataset;

const EVAL_BATCH: usize = 64;

/// Accuracy in percent on a dataset.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    accuracy_on(model, &ds.images, &ds.labels)
}

/// Accuracy in percent on a prepared `[N,C,H,W]` batch.
pub fn accuracy_on(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = images.shape[0];
    if n != labels.len() {
        return Err(Error::Shape(format!("{} images vs {} labels", n, labels.len())));
    }
    let chw: usize = images.shape[1..].iter().product();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let mut shape = images.shape.clone();
        shape[0] = end - start;
        let batch = Tensor::new(shape, images.data[start * chw..end * chw].to_vec())?;
        let preds = model.predict(&batch)?;
        correct += preds
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// Perturb a whole dataset under one spec with per-image derived seeds.
/// For the adversarial kind the attack is generated against `white_box`
/// with the true labels.
pub fn perturbed_dataset(
    ds: &Dataset,
    spec: &PerturbationSpec,
    eval_seed: u64,
    white_box: Option<&Model>,
) -> Result<Tensor> {
    if spec.kind == PerturbationKind::Adversarial {
        let model = white_box.ok_or_else(|| {
            Error::Usage("adversarial evaluation needs the attacked model".into())
        })?;
        let attack = spec.attack_spec();
        let n = ds.len();
        let chw: usize = ds.images.shape[1..].iter().product();
        let mut out = Vec::with_capacity(ds.images.data.len());
        let mut start = 0usize;
        while start < n {
            let end = (start + EVAL_BATCH).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let batch = ds.batch(&idx);
            let labels = &ds.labels[start..end];
            let adv = bim_attack_batch(&batch, labels, model, &attack)?;
            out.extend_from_slice(&adv.data);
            start = end;
        }
        debug_assert_eq!(out.len(), n * chw);
        return Tensor::new(ds.images.shape.clone(), out);
    }
    perturb_batch(&ds.images, spec, eval_seed)
}

/// Accuracy under one perturbation, seeds derived from `eval_seed`.
pub fn perturbed_accuracy(
    model: &Model,
    ds: &Dataset,
    spec: &PerturbationSpec,
    eval_seed: u64,
) -> Result<f64> {
    let images = perturbed_dataset(ds, spec, eval_seed, Some(model))?;
    accuracy_on(model, &images, &ds.labels)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixMeta {
    pub dataset_id: String,
    pub eval_seed: u64,
    pub target_drop: f64,
    pub severities: BTreeMap<String, f64>,
    pub attack: Option<AttackSpec>,
    pub profile_model_id: String,
}

/// Accuracy grid: rows are test conditions (clean, each calibrated natural
/// perturbation, adversarial), columns are model variants. `seen[r][c]`
/// flags the cells where the model's built-in transform matches the test
/// perturbation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RobustnessMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<f64>>,
    pub seen: Vec<Vec<bool>>,
    pub meta: MatrixMeta,
}

impl RobustnessMatrix {
    pub fn cell(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(self.cells[r][c])
    }
}

enum RowJob {
    Clean,
    Natural(PerturbationSpec),
    Adversarial(AttackSpec),
}

/// Evaluate every model on clean data, every calibrated natural perturbation
/// (fixed evaluation seed) and a per-model white-box BIM attack. Model
/// parameters are hash-checked before and after: evaluation never trains.
pub fn evaluate_matrix(
    models: &[(String, Model)],
    ds: &Dataset,
    profile: &SeverityProfile,
    attack: Option<AttackSpec>,
    threads: usize,
) -> Result<RobustnessMatrix> {
    if models.is_empty() {
        return Err(Error::Usage("evaluate_matrix needs at least one model".into()));
    }
    if !models.iter().any(|(_, m)| m.param_hash() == profile.model_id) {
        return Err(Error::Usage(format!(
            "profile was calibrated on model {} which is not among the evaluated models",
            &profile.model_id[..12.min(profile.model_id.len())]
        )));
    }
    let hashes_before: Vec<String> = models.iter().map(|(_, m)| m.param_hash()).collect();

    // Row plan: clean, the natural kinds present in the profile in canonical
    // order, then adversarial (calibrated epsilon unless overridden).
    let mut rows: Vec<(String, RowJob)> = vec![("clean".into(), RowJob::Clean)];
    for kind in PerturbationKind::natural() {
        if let Some(entry) = profile.entries.get(kind.name()) {
            let mut spec = PerturbationSpec::new(kind, entry.severity, profile.eval_seed);
            spec.sigma = profile.elastic_sigma;
            rows.push((kind.name().to_string(), RowJob::Natural(spec)));
        }
    }
    let attack = attack.or_else(|| {
        profile
            .entries
            .get(PerturbationKind::Adversarial.name())
            .map(|e| AttackSpec::new(e.severity))
    });
    if let Some(a) = attack {
        a.validate()?;
        rows.push(("adversarial".into(), RowJob::Adversarial(a)));
    }

    // Natural rows share their perturbed images across models.
    let mut shared: Vec<Option<Tensor>> = Vec::with_capacity(rows.len());
    for (_, job) in &rows {
        shared.push(match job {
            RowJob::Natural(spec) => Some(perturb_batch(&ds.images, spec, profile.eval_seed)?),
            _ => None,
        });
    }

    // One job per cell; threads split the job list, results carry indices.
    let jobs: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..models.len()).map(move |c| (r, c)))
        .collect();
    let threads = threads.max(1).min(jobs.len().max(1));
    let mut cells = vec![vec![0.0; models.len()]; rows.len()];
    let results: Result<Vec<Vec<(usize, usize, f64)>>> = std::thread::scope(|scope| {
        let rows = &rows;
        let shared = &shared;
        let handles: Vec<_> = jobs
            .chunks(jobs.len().div_ceil(threads))
            .map(|chunk| {
                scope.spawn(move || -> Result<Vec<(usize, usize, f64)>> {
                    let mut out = Vec::with_capacity(chunk.len());
                    for &(r, c) in chunk {
                        let model = &models[c].1;
                        let acc = match &rows[r].1 {
                            RowJob::Clean => accuracy(model, ds)?,
                            RowJob::Natural(_) => {
                                accuracy_on(model, shared[r].as_ref().unwrap(), &ds.labels)?
                            }
                            RowJob::Adversarial(a) => {
                                let mut spec = PerturbationSpec::new(
                                    PerturbationKind::Adversarial,
                                    a.epsilon,
                                    profile.eval_seed,
                                );
                                spec.attack_steps = a.steps;
                                let adv =
                                    perturbed_dataset(ds, &spec, profile.eval_seed, Some(model))?;
                                accuracy_on(model, &adv, &ds.labels)?
                            }
                        };
                        out.push((r, c, acc));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    for (r, c, acc) in results?.into_iter().flatten() {
        cells[r][c] = acc;
    }

    for ((_, m), before) in models.iter().zip(&hashes_before) {
        if m.param_hash() != *before {
            return Err(Error::Numerical("model parameters changed during evaluation".into()));
        }
    }

    let seen: Vec<Vec<bool>> = rows
        .iter()
        .map(|(_, job)| {
            models
                .iter()
                .map(|(_, m)| match (job, m.meta.taconv) {
                    (RowJob::Natural(spec), Some(t)) => spec.kind.matches_transform(t),
                    _ => false,
                })
                .collect()
        })
        .collect();

    Ok(RobustnessMatrix {
        rows: rows.into_iter().map(|(n, _)| n).collect(),
        cols: models.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        seen,
        meta: MatrixMeta {
            dataset_id: ds.id.clone(),
            eval_seed: profile.eval_seed,
            target_drop: profile.target_drop,
            severities: profile
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), e.severity))
                .collect(),
            attack,
            profile_model_id: profile.model_id.clone(),
        },
    })
}

/// Write `matrix.csv`, `matrix.json` and a fixed-width `matrix.txt`.
pub fn export_report(matrix: &RobustnessMatrix, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("matrix.json"), crate::util::canonical_json(matrix)?)?;
    std::fs::write(dir.join("matrix.csv"), matrix_csv(matrix))?;
    std::fs::write(dir.join("matrix.txt"), matrix_text(matrix))?;
    Ok(())
}

pub fn matrix_csv(matrix: &RobustnessMatrix) -> String {
    let mut out = String::from("condition");
    for c in &matrix.cols {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (r, row) in matrix.rows.iter().enumerate() {
        out.push_str(row);
        for c in 0..matrix.cols.len() {
            out.push(',');
            out.push_str(&format!("{}", matrix.cells[r][c]));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_text(matrix: &RobustnessMatrix) -> String {
    let col_w = matrix
        .cols
        .iter()
        .map(|c| c.len())
        .chain(std::iter::once(8))
        .max()
        .unwrap()
        + 2;
    let row_w = matrix.rows.iter().map(|r| r.len()).chain(std::iter::once(10)).max().unwrap() + 2;
    let mut out = format!("{:<row_w$}", "condition");
    for c in &matrix.cols {
        out.push_str(&format!("{:>col_w$}", c));
    }
    out.push('\n');
    for (r, row) in matrix.rows.iter().enumerate() {
        out.push_str(&format!("{:<row_w$}", row));
        for c in 0..matrix.cols.len() {
            let mark = if matrix.seen[r][c] { "*" } else { "" };
            out.push_str(&format!("{:>col_w$}", format!("{:.2}{}", matrix.cells[r][c], mark)));
        }
        out.push('\n');
    }
    out.push_str("(* = perturbation seen by the model's built-in transform)\n");
    out
}
