//! Task vectors and their diagnostic analyses.
//!
//! A task vector is the parameter delta between a fine-tuned checkpoint and
//! the shared base. Norm and cosine reports quantify how imbalanced the task
//! vectors are and how strongly the average task vector is biased toward the
//! large-norm tasks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::LayerGrouping;
use crate::tensor::{sub, validate_compat, WeightMap};

/// The delta `finetuned - base` for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub task_id: String,
    pub delta: WeightMap,
}

impl TaskVector {
    pub fn new(task_id: impl Into<String>, delta: WeightMap) -> Result<Self> {
        let task_id = task_id.into();
        if task_id.is_empty() {
            return Err(Error::InvalidInput("empty task id".to_string()));
        }
        Ok(TaskVector { task_id, delta })
    }

    /// Flattened squared l2 norm over all entries, accumulated in f64.
    pub fn squared_norm(&self) -> f64 {
        self.delta
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }
}

/// `finetuned - base`, checked for schema equality.
pub fn compute_task_vector(
    base: &WeightMap,
    finetuned: &WeightMap,
    task_id: impl Into<String>,
) -> Result<TaskVector> {
    validate_compat(&[base, finetuned])?;
    TaskVector::new(task_id, sub(finetuned, base)?)
}

/// Error unless every task id is unique and non-empty and all deltas share
/// one schema.
pub fn validate_task_vectors(tvs: &[TaskVector]) -> Result<()> {
    if tvs.is_empty() {
        return Err(Error::InvalidInput("empty task vector list".to_string()));
    }
    for (i, tv) in tvs.iter().enumerate() {
        if tvs[..i].iter().any(|other| other.task_id == tv.task_id) {
            return Err(Error::InvalidInput(format!(
                "duplicate task id '{}'",
                tv.task_id
            )));
        }
    }
    let maps: Vec<&WeightMap> = tvs.iter().map(|tv| &tv.delta).collect();
    validate_compat(&maps)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope {
    Global,
    PerLayer,
}

/// l2 norms per task, either over the whole delta or per layer group.
/// Global rows use `"ALL"` in the layer column.
#[derive(Debug, Clone, PartialEq)]
pub struct NormReport {
    pub scope: NormScope,
    /// `(task_id, layer, l2_norm)`, tasks in input order, layers sorted.
    pub rows: Vec<(String, String, f64)>,
}

impl NormReport {
    /// CSV with columns `task_id,layer,l2_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,layer,l2_norm\n");
        for (task, layer, norm) in &self.rows {
            let _ = writeln!(out, "{task},{layer},{norm}");
        }
        out
    }
}

/// Compute the norm report for a set of task vectors.
pub fn norms(
    tvs: &[TaskVector],
    scope: NormScope,
    grouping: LayerGrouping,
) -> Result<NormReport> {
    validate_task_vectors(tvs)?;
    let mut rows = Vec::new();
    match scope {
        NormScope::Global => {
            for tv in tvs {
                rows.push((tv.task_id.clone(), "ALL".to_string(), tv.norm()));
            }
        }
        NormScope::PerLayer => {
            let groups = grouping.groups(&tvs[0].delta)?;
            for tv in tvs {
                for (group, names) in &groups {
                    let sq: f64 = names
                        .iter()
                        .flat_map(|n| tv.delta.get(n).expect("validated schema").data())
                        .map(|&v| f64::from(v) * f64::from(v))
                        .sum();
                    rows.push((tv.task_id.clone(), group.clone(), sq.sqrt()));
                }
            }
        }
    }
    Ok(NormReport { scope, rows })
}

/// Pairwise cosine similarities plus the cosine of each task vector with the
/// average task vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineReport {
    pub task_ids: Vec<String>,
    pub pairwise: Vec<Vec<f64>>,
    pub to_average: Vec<f64>,
}

impl CosineReport {
    /// CSV with columns `task_a,task_b,cosine`; rows against the average task
    /// vector use `AVERAGE` as `task_b`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_a,task_b,cosine\n");
        for (i, a) in self.task_ids.iter().enumerate() {
            for (j, b) in self.task_ids.iter().enumerate() {
                let _ = writeln!(out, "{a},{b},{}", self.pairwise[i][j]);
            }
        }
        for (i, a) in self.task_ids.iter().enumerate() {
            let _ = writeln!(out, "{a},AVERAGE,{}", self.to_average[i]);
        }
        out
    }
}

/// Cosine analysis over fully flattened deltas. Requires at least two task
/// vectors, none of them zero.
pub fn cosine_analysis(tvs: &[TaskVector]) -> Result<CosineReport> {
    validate_task_vectors(tvs)?;
    if tvs.len() < 2 {
        return Err(Error::InvalidInput(
            "cosine analysis needs at least two task vectors".to_string(),
        ));
    }
    let flats: Vec<Vec<f64>> = tvs
        .iter()
        .map(|tv| {
            tv.delta
                .iter()
                .flat_map(|(_, t)| t.data())
                .map(|&v| f64::from(v))
                .collect()
        })
        .collect();
    let norms: Vec<f64> = flats
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for (tv, &n) in tvs.iter().zip(&norms) {
        if n == 0.0 {
            return Err(Error::Numerical(format!(
                "task vector '{}' has zero norm; cosine is undefined",
                tv.task_id
            )));
        }
    }

    let t = tvs.len();
    let dim = flats[0].len();
    let mut pairwise = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..t {
            let dot: f64 = flats[i].iter().zip(&flats[j]).map(|(a, b)| a * b).sum();
            pairwise[i][j] = dot / (norms[i] * norms[j]);
        }
    }

    // Average task vector, then its cosine with each task vector.
    let mut avg = vec![0.0f64; dim];
    for flat in &flats {
        for (a, v) in avg.iter_mut().zip(flat) {
            *a += v;
        }
    }
    let t_f = t as f64;
    for a in &mut avg {
        *a /= t_f;
    }
    let avg_norm = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
    if avg_norm == 0.0 {
        return Err(Error::Numerical(
            "average task vector has zero norm; cosine is undefined".to_string(),
        ));
    }
    let to_average: Vec<f64> = flats
        .iter()
        .zip(&norms)
        .map(|(flat, &n)| {
            let dot: f64 = flat.iter().zip(&avg).map(|(a, b)| a * b).sum();
            dot / (n * avg_norm)
        })
        .collect();

    Ok(CosineReport {
        task_ids: tvs.iter().map(|tv| tv.task_id.clone()).collect(),
        pairwise,
        to_average,
    })
}
