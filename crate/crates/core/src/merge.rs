//! Merging methods over task vectors.
//!
//! Every method is a variation of the same weighted sum: the merged weights
//! are the base plus, per task, a coefficient times a transformed task
//! vector. Methods differ in the transform (pruning, sign election, masking,
//! SVD truncation) and in how the coefficients are structured (one scalar,
//! per task, or per task per layer).
//!
//! The user-facing `lambda` always acts as an outer coefficient so that
//! `lambda = 0` reproduces the base checkpoint for every method; with
//! `lambda = 1` the methods that define their own internal coefficients
//! (Avg, Lines, NormAvg) reduce to their textbook formulas.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerGrouping;
use crate::svd::{polar_factor, thin_svd};
use crate::task_vector::{validate_task_vectors, TaskVector};
use crate::tensor::{validate_compat, Tensor, WeightMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Avg,
    Ta,
    Ties,
    Breadcrumbs,
    Consensus,
    Lines,
    Star,
    Tsv,
    NormAvg,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Avg,
        Method::Ta,
        Method::Ties,
        Method::Breadcrumbs,
        Method::Consensus,
        Method::Lines,
        Method::Star,
        Method::Tsv,
        Method::NormAvg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Avg => "avg",
            Method::Ta => "ta",
            Method::Ties => "ties",
            Method::Breadcrumbs => "breadcrumbs",
            Method::Consensus => "consensus",
            Method::Lines => "lines",
            Method::Star => "star",
            Method::Tsv => "tsv",
            Method::NormAvg => "normavg",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown method '{s}'")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Merging coefficients: one scalar, one per task, or one per task per layer
/// group. Serialized as a bare number or nested maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lambda {
    Scalar(f64),
    PerTask(BTreeMap<String, f64>),
    PerTaskPerLayer(BTreeMap<String, BTreeMap<String, f64>>),
}

/// A merge method plus its coefficients and method hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: Method,
    pub lambda: Lambda,
    pub mu: BTreeMap<String, f64>,
}

impl MergeSpec {
    pub fn scalar(method: Method, lambda: f64) -> Self {
        MergeSpec {
            method,
            lambda: Lambda::Scalar(lambda),
            mu: BTreeMap::new(),
        }
    }

    pub fn with_mu(mut self, key: &str, value: f64) -> Self {
        self.mu.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub weights: WeightMap,
    pub spec: MergeSpec,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub task_ids: Vec<String>,
    pub base_digest: u64,
}

/// Rank selection policy for the double-SVD merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankPolicy {
    /// r = max(1, floor(min(m, n) / T)) per matrix.
    #[default]
    PerTaskFloorDivT,
}

// Fraction-to-count helpers. The epsilon absorbs float noise in products
// like 0.7 * 10 so that exact fractions give exact counts.
fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Indices of the `keep` largest-magnitude entries, ties broken by lowest
/// index.
fn top_k_indices(data: &[f32], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| {
        data[b]
            .abs()
            .partial_cmp(&data[a].abs())
            .expect("finite tensor data")
            .then(a.cmp(&b))
    });
    idx.truncate(keep);
    idx
}

/// TIES: per-task magnitude pruning followed by sign election.
///
/// Per tensor, each task keeps its top ceil(k*d) entries by absolute value.
/// Each coordinate elects the sign of the sum of the kept values (a zero sum
/// elects +), and kept values disagreeing with the elected sign are zeroed.
/// Surviving values are not rescaled; the merge coefficient absorbs global
/// scale.
pub fn transform_ties(tvs: &[TaskVector], keep_fraction: f64) -> Result<Vec<TaskVector>> {
    validate_task_vectors(tvs)?;
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "TIES keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let mut out: Vec<TaskVector> = tvs
        .iter()
        .map(|tv| TaskVector::new(tv.task_id.clone(), WeightMap::new()))
        .collect::<Result<_>>()?;

    for (name, first) in tvs[0].delta.iter() {
        let d = first.numel();
        let keep = ceil_count(keep_fraction * d as f64).max(1);

        // Kept values per task (zeroed elsewhere).
        let mut kept: Vec<Vec<f32>> = Vec::with_capacity(tvs.len());
        for tv in tvs {
            let data = tv.delta.get(name).expect("validated schema").data();
            let mut k = vec![0.0f32; d];
            for i in top_k_indices(data, keep) {
                k[i] = data[i];
            }
            kept.push(k);
        }

        // Elected sign per coordinate: sign of the sum of kept values.
        let mut elected = vec![1.0f64; d];
        for i in 0..d {
            let sum: f64 = kept.iter().map(|k| f64::from(k[i])).sum();
            if sum < 0.0 {
                elected[i] = -1.0;
            }
        }

        for (t, k) in kept.iter().enumerate() {
            let data: Vec<f32> = k
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if f64::from(v) * elected[i] >= 0.0 {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            out[t]
                .delta
                .insert(name.clone(), Tensor::new(first.shape().to_vec(), data)?)?;
        }
    }
    Ok(out)
}

/// Breadcrumbs: remove the highest- and lowest-magnitude entries per tensor.
///
/// Exactly ceil((1 - top_cut - bottom_cut) * d) entries survive per tensor:
/// floor(top_cut * d) are zeroed from the top and the remainder of the cut
/// from the bottom. Magnitude ties are broken by lowest flat index, top cut
/// first.
pub fn transform_breadcrumbs(tv: &TaskVector, top_cut: f64, bottom_cut: f64) -> Result<TaskVector> {
    if top_cut < 0.0 || bottom_cut < 0.0 || top_cut + bottom_cut >= 1.0 {
        return Err(Error::InvalidSpec(format!(
            "breadcrumbs cuts must be nonnegative with top_cut + bottom_cut < 1, got ({top_cut}, {bottom_cut})"
        )));
    }
    let mut delta = WeightMap::new();
    for (name, tensor) in tv.delta.iter() {
        let d = tensor.numel();
        let n_keep = ceil_count((1.0 - top_cut - bottom_cut) * d as f64).max(1).min(d);
        let n_zero = d - n_keep;
        let n_top = floor_count(top_cut * d as f64).min(n_zero);
        let n_bottom = n_zero - n_top;

        let mut data = tensor.data().to_vec();
        let mut removed = vec![false; d];
        for &i in top_k_indices(tensor.data(), n_top).iter() {
            removed[i] = true;
            data[i] = 0.0;
        }
        // Bottom cut over the entries that survived the top cut.
        let mut remaining: Vec<usize> = (0..d).filter(|&i| !removed[i]).collect();
        remaining.sort_by(|&a, &b| {
            tensor.data()[a]
                .abs()
                .partial_cmp(&tensor.data()[b].abs())
                .expect("finite tensor data")
                .then(a.cmp(&b))
        });
        for &i in remaining.iter().take(n_bottom) {
            data[i] = 0.0;
        }
        delta.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), data)?)?;
    }
    TaskVector::new(tv.task_id.clone(), delta)
}

/// Consensus: keep only coordinates that appear in at least `agreement`
/// per-task top-k magnitude masks. Returns the 0/1 consensus mask and every
/// task vector with the mask applied.
pub fn transform_consensus(
    tvs: &[TaskVector],
    keep_fraction: f64,
    agreement: usize,
) -> Result<(WeightMap, Vec<TaskVector>)> {
    validate_task_vectors(tvs)?;
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "consensus keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    if agreement < 2 {
        return Err(Error::InvalidSpec(format!(
            "consensus agreement must be >= 2, got {agreement}"
        )));
    }
    if tvs.len() < agreement {
        return Err(Error::InvalidSpec(format!(
            "consensus needs at least {agreement} tasks, got {}",
            tvs.len()
        )));
    }

    let mut mask_map = WeightMap::new();
    let mut pruned: Vec<TaskVector> = tvs
        .iter()
        .map(|tv| TaskVector::new(tv.task_id.clone(), WeightMap::new()))
        .collect::<Result<_>>()?;

    for (name, first) in tvs[0].delta.iter() {
        let d = first.numel();
        let keep = ceil_count(keep_fraction * d as f64).max(1);
        let mut counts = vec![0usize; d];
        for tv in tvs {
            let data = tv.delta.get(name).expect("validated schema").data();
            for i in top_k_indices(data, keep) {
                counts[i] += 1;
            }
        }
        let mask: Vec<f32> = counts
            .iter()
            .map(|&c| if c >= agreement { 1.0 } else { 0.0 })
            .collect();
        for (t, tv) in tvs.iter().enumerate() {
            let data = tv.delta.get(name).expect("validated schema").data();
            let masked: Vec<f32> = data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            pruned[t]
                .delta
                .insert(name.clone(), Tensor::new(first.shape().to_vec(), masked)?)?;
        }
        mask_map.insert(name.clone(), Tensor::new(first.shape().to_vec(), mask)?)?;
    }
    Ok((mask_map, pruned))
}

/// Lines: a per-layer coefficient schedule increasing linearly from
/// `lambda_min` at the first layer to `lambda_max` at the last. A single
/// layer yields `[lambda_min]`.
pub fn lambda_lines(layer_order: &[String], lambda_min: f64, lambda_max: f64) -> Result<Vec<f64>> {
    if layer_order.is_empty() {
        return Err(Error::InvalidSpec("lines: empty layer order".to_string()));
    }
    if lambda_min > lambda_max {
        return Err(Error::InvalidSpec(format!(
            "lines requires lambda_min <= lambda_max, got ({lambda_min}, {lambda_max})"
        )));
    }
    let l = layer_order.len();
    if l == 1 {
        return Ok(vec![lambda_min]);
    }
    Ok((0..l)
        .map(|i| lambda_min + (lambda_max - lambda_min) * i as f64 / (l - 1) as f64)
        .collect())
}

/// STAR: per-matrix SVD truncation to the smallest rank holding
/// `energy_fraction` of the squared singular energy, with the kept spectrum
/// rescaled to restore the original energy. Non-matrix tensors pass through.
pub fn transform_star(tv: &TaskVector, energy_fraction: f64) -> Result<TaskVector> {
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "STAR energy_fraction must be in (0, 1], got {energy_fraction}"
        )));
    }
    let mut delta = WeightMap::new();
    for (name, tensor) in tv.delta.iter() {
        if tensor.shape().len() != 2 {
            delta.insert(name.clone(), tensor.clone())?;
            continue;
        }
        let (m, n) = (tensor.shape()[0], tensor.shape()[1]);
        let mat = to_matrix(tensor, m, n);
        let svd = thin_svd(&mat)?;
        let energies: Vec<f64> = svd.sigma.iter().map(|&s| s * s).collect();
        let total: f64 = energies.iter().sum();
        if total == 0.0 {
            delta.insert(name.clone(), tensor.clone())?;
            continue;
        }
        let target = energy_fraction * total;
        let mut cum = 0.0;
        let mut rank = energies.len();
        for (i, e) in energies.iter().enumerate() {
            cum += e;
            if cum >= target {
                rank = i + 1;
                break;
            }
        }
        let kept: f64 = energies[..rank].iter().sum();
        let rescale = (total / kept).sqrt();
        let sigma_kept = DVector::from_iterator(rank, svd.sigma.iter().take(rank).map(|&s| s * rescale));
        let rec = svd.u.columns(0, rank) * DMatrix::from_diagonal(&sigma_kept) * svd.v_t.rows(0, rank);
        delta.insert(name.clone(), from_matrix(&rec, tensor.shape().to_vec())?)?;
    }
    TaskVector::new(tv.task_id.clone(), delta)
}

/// Orthogonalized stacked factors of the double-SVD merge for one matrix
/// tensor: `u` is m x Tr with orthonormal columns, `v` is n x Tr likewise,
/// and the merged tensor is `u * diag(sigma) * v^T`.
#[derive(Debug, Clone)]
pub struct TsvFactors {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

/// First SVD pass (per-task truncation at rank max(1, floor(min(m,n)/T)))
/// followed by the orthogonalizing second pass, for every rank-2 tensor.
pub fn tsv_decompose(
    tvs: &[TaskVector],
    _policy: RankPolicy,
) -> Result<BTreeMap<String, TsvFactors>> {
    validate_task_vectors(tvs)?;
    let t_count = tvs.len();
    let mut out = BTreeMap::new();
    for (name, first) in tvs[0].delta.iter() {
        if first.shape().len() != 2 {
            continue;
        }
        let (m, n) = (first.shape()[0], first.shape()[1]);
        let rank = (m.min(n) / t_count).max(1);

        let mut u_stack = DMatrix::zeros(m, t_count * rank);
        let mut v_stack = DMatrix::zeros(n, t_count * rank);
        let mut sigma_stack = Vec::with_capacity(t_count * rank);
        for (t, tv) in tvs.iter().enumerate() {
            let tensor = tv.delta.get(name).expect("validated schema");
            let svd = thin_svd(&to_matrix(tensor, m, n))?;
            for j in 0..rank {
                u_stack.set_column(t * rank + j, &svd.u.column(j));
                v_stack.set_column(t * rank + j, &svd.v_t.row(j).transpose());
                sigma_stack.push(svd.sigma[j]);
            }
        }
        let u_orth = polar_factor(&u_stack)?;
        let v_orth = polar_factor(&v_stack)?;
        out.insert(
            name.clone(),
            TsvFactors {
                u: from_matrix(&u_orth, vec![m, t_count * rank])?,
                sigma: sigma_stack,
                v: from_matrix(&v_orth, vec![n, t_count * rank])?,
            },
        );
    }
    Ok(out)
}

/// TSV: truncate each task's matrices independently, stack the factors
/// across tasks, re-orthogonalize the stacked factors (polar factor), and
/// reconstruct one merged delta. Non-matrix tensors fall back to the plain
/// sum of task deltas.
pub fn transform_tsv(tvs: &[TaskVector], policy: RankPolicy) -> Result<WeightMap> {
    validate_task_vectors(tvs)?;
    let factors = tsv_decompose(tvs, policy)?;
    let mut merged = WeightMap::new();

    for (name, first) in tvs[0].delta.iter() {
        if let Some(f) = factors.get(name) {
            let k = f.sigma.len();
            let u = to_matrix(&f.u, first.shape()[0], k);
            let v = to_matrix(&f.v, first.shape()[1], k);
            let sigma = DVector::from_iterator(k, f.sigma.iter().copied());
            let rec = u * DMatrix::from_diagonal(&sigma) * v.transpose();
            merged.insert(name.clone(), from_matrix(&rec, first.shape().to_vec())?)?;
        } else {
            let mut acc = vec![0.0f64; first.numel()];
            for tv in tvs {
                let data = tv.delta.get(name).expect("validated schema").data();
                for (a, &v) in acc.iter_mut().zip(data) {
                    *a += f64::from(v);
                }
            }
            let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
            merged.insert(name.clone(), Tensor::new(first.shape().to_vec(), data)?)?;
        }
    }
    Ok(merged)
}

/// NormAvg coefficients: per layer group, every task vector is rescaled to
/// the smallest per-layer norm. Errors on a zero per-layer norm.
pub fn lambda_normavg(
    tvs: &[TaskVector],
    grouping: LayerGrouping,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    validate_task_vectors(tvs)?;
    let groups = grouping.groups(&tvs[0].delta)?;
    let mut per_task_norms: BTreeMap<&str, BTreeMap<&String, f64>> = BTreeMap::new();
    for tv in tvs {
        let mut norms = BTreeMap::new();
        for (group, names) in &groups {
            let sq: f64 = names
                .iter()
                .flat_map(|n| tv.delta.get(n).expect("validated schema").data())
                .map(|&v| f64::from(v) * f64::from(v))
                .sum();
            let norm = sq.sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical(format!(
                    "normavg: task '{}' has zero norm in layer group '{group}'",
                    tv.task_id
                )));
            }
            norms.insert(group, norm);
        }
        per_task_norms.insert(&tv.task_id, norms);
    }

    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for tv in tvs {
        let mut per_group = BTreeMap::new();
        for group in groups.keys() {
            let min = per_task_norms
                .values()
                .map(|n| n[group])
                .fold(f64::INFINITY, f64::min);
            per_group.insert(group.clone(), min / per_task_norms[tv.task_id.as_str()][group]);
        }
        out.insert(tv.task_id.clone(), per_group);
    }
    Ok(out)
}

/// Merge with the default layer grouping rule.
pub fn merge(base: &WeightMap, tvs: &[TaskVector], spec: &MergeSpec) -> Result<MergedModel> {
    merge_with_grouping(base, tvs, spec, LayerGrouping::default())
}

/// Merge `base + sum_t coeff(t, layer) * phi(tau_t)` per the spec's method.
pub fn merge_with_grouping(
    base: &WeightMap,
    tvs: &[TaskVector],
    spec: &MergeSpec,
    grouping: LayerGrouping,
) -> Result<MergedModel> {
    validate_task_vectors(tvs)?;
    let mut maps: Vec<&WeightMap> = vec![base];
    maps.extend(tvs.iter().map(|tv| &tv.delta));
    let digest = validate_compat(&maps)?;

    let task_ids: Vec<String> = tvs.iter().map(|tv| tv.task_id.clone()).collect();
    let groups = grouping.group_names(base)?;
    validate_lambda(spec, &task_ids, &groups)?;
    let mu = MuReader::new(spec)?;

    // Per-task coefficient per layer group, before method-specific scaling.
    let base_coeff = |task: &str, group: &str| -> f64 {
        match &spec.lambda {
            Lambda::Scalar(s) => *s,
            Lambda::PerTask(m) => m[task],
            Lambda::PerTaskPerLayer(m) => m[task][group],
        }
    };

    let t_count = tvs.len() as f64;
    let weights = match spec.method {
        Method::Avg => {
            mu.finish()?;
            let coeff = |task: &str, group: &str| base_coeff(task, group) / t_count;
            accumulate(base, tvs, grouping, coeff)?
        }
        Method::Ta => {
            mu.finish()?;
            accumulate(base, tvs, grouping, base_coeff)?
        }
        Method::Ties => {
            let keep = mu.take("keep_fraction")?;
            mu.finish()?;
            let transformed = transform_ties(tvs, keep)?;
            accumulate(base, &transformed, grouping, base_coeff)?
        }
        Method::Breadcrumbs => {
            let top = mu.take("top_cut")?;
            let bottom = mu.take("bottom_cut")?;
            mu.finish()?;
            let transformed: Vec<TaskVector> = tvs
                .iter()
                .map(|tv| transform_breadcrumbs(tv, top, bottom))
                .collect::<Result<_>>()?;
            accumulate(base, &transformed, grouping, base_coeff)?
        }
        Method::Consensus => {
            let keep = mu.take("keep_fraction")?;
            let agreement = mu.take_int("agreement")?;
            mu.finish()?;
            let (_, transformed) = transform_consensus(tvs, keep, agreement)?;
            accumulate(base, &transformed, grouping, base_coeff)?
        }
        Method::Lines => {
            let lo = mu.take("lambda_min")?;
            let hi = mu.take("lambda_max")?;
            mu.finish()?;
            let schedule = lambda_lines(&groups, lo, hi)?;
            let by_group: BTreeMap<&str, f64> = groups
                .iter()
                .map(String::as_str)
                .zip(schedule)
                .collect();
            let coeff = |task: &str, group: &str| base_coeff(task, group) * by_group[group];
            accumulate(base, tvs, grouping, coeff)?
        }
        Method::Star => {
            let energy = mu.take("energy_fraction")?;
            mu.finish()?;
            let transformed: Vec<TaskVector> = tvs
                .iter()
                .map(|tv| transform_star(tv, energy))
                .collect::<Result<_>>()?;
            accumulate(base, &transformed, grouping, base_coeff)?
        }
        Method::Tsv => {
            mu.finish()?;
            let delta = transform_tsv(tvs, RankPolicy::default())?;
            let single = TaskVector::new("__tsv_merged__", delta)?;
            let coeff = |_: &str, group: &str| base_coeff(&task_ids[0], group);
            accumulate(base, std::slice::from_ref(&single), grouping, coeff)?
        }
        Method::NormAvg => {
            mu.finish()?;
            let norm_coeffs = lambda_normavg(tvs, grouping)?;
            let coeff = |task: &str, group: &str| base_coeff(task, group) * norm_coeffs[task][group];
            accumulate(base, tvs, grouping, coeff)?
        }
    };

    Ok(MergedModel {
        weights,
        spec: spec.clone(),
        provenance: Provenance {
            task_ids,
            base_digest: digest.hash(),
        },
    })
}

/// base + sum over tasks of coeff * delta, accumulated in f64, tensors in
/// lexicographic order, tasks in input order.
fn accumulate(
    base: &WeightMap,
    tvs: &[TaskVector],
    grouping: LayerGrouping,
    coeff: impl Fn(&str, &str) -> f64,
) -> Result<WeightMap> {
    let mut out = WeightMap::new();
    for (name, tensor) in base.iter() {
        let group = grouping.group_of(name);
        let mut acc: Vec<f64> = tensor.data().iter().map(|&v| f64::from(v)).collect();
        for tv in tvs {
            let c = coeff(&tv.task_id, group);
            if c == 0.0 {
                continue;
            }
            let delta = tv.delta.get(name).expect("validated schema").data();
            for (a, &d) in acc.iter_mut().zip(delta) {
                *a += c * f64::from(d);
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        out.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

fn validate_lambda(spec: &MergeSpec, task_ids: &[String], groups: &[String]) -> Result<()> {
    let scalar_only = matches!(
        spec.method,
        Method::Avg | Method::Lines | Method::Tsv | Method::NormAvg
    );
    if scalar_only && !matches!(spec.lambda, Lambda::Scalar(_)) {
        return Err(Error::InvalidSpec(format!(
            "method '{}' defines its own coefficient structure and takes a scalar lambda",
            spec.method
        )));
    }
    match &spec.lambda {
        Lambda::Scalar(v) => {
            if !v.is_finite() {
                return Err(Error::InvalidSpec("non-finite lambda".to_string()));
            }
        }
        Lambda::PerTask(m) => {
            check_key_coverage("lambda", m.keys(), task_ids)?;
            if m.values().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec("non-finite lambda".to_string()));
            }
        }
        Lambda::PerTaskPerLayer(m) => {
            check_key_coverage("lambda", m.keys(), task_ids)?;
            for (task, per_layer) in m {
                check_key_coverage(&format!("lambda[{task}]"), per_layer.keys(), groups)?;
                if per_layer.values().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec("non-finite lambda".to_string()));
                }
            }
        }
    }
    Ok(())
}

fn check_key_coverage<'a>(
    what: &str,
    keys: impl Iterator<Item = &'a String>,
    expected: &[String],
) -> Result<()> {
    let keys: Vec<&String> = keys.collect();
    for k in &keys {
        if !expected.contains(k) {
            return Err(Error::InvalidSpec(format!("{what} names unknown key '{k}'")));
        }
    }
    for e in expected {
        if !keys.contains(&e) {
            return Err(Error::InvalidSpec(format!("{what} is missing key '{e}'")));
        }
    }
    Ok(())
}

/// Tracks consumption of mu keys so unknown keys are rejected.
struct MuReader<'a> {
    spec: &'a MergeSpec,
    used: std::cell::RefCell<Vec<&'a str>>,
}

impl<'a> MuReader<'a> {
    fn new(spec: &'a MergeSpec) -> Result<Self> {
        Ok(MuReader {
            spec,
            used: std::cell::RefCell::new(Vec::new()),
        })
    }

    fn take(&self, key: &'static str) -> Result<f64> {
        match self.spec.mu.get(key) {
            Some(&v) if v.is_finite() => {
                self.used.borrow_mut().push(key);
                Ok(v)
            }
            Some(_) => Err(Error::InvalidSpec(format!("mu key '{key}' is not finite"))),
            None => Err(Error::InvalidSpec(format!(
                "method '{}' requires mu key '{key}'",
                self.spec.method
            ))),
        }
    }

    fn take_int(&self, key: &'static str) -> Result<usize> {
        let v = self.take(key)?;
        if v.fract() != 0.0 || v < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "mu key '{key}' must be a nonnegative integer, got {v}"
            )));
        }
        Ok(v as usize)
    }

    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for key in self.spec.mu.keys() {
            if !used.iter().any(|u| u == key) {
                return Err(Error::InvalidSpec(format!(
                    "method '{}' does not accept mu key '{key}'",
                    self.spec.method
                )));
            }
        }
        Ok(())
    }
}

fn to_matrix(tensor: &Tensor, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m, n, tensor.data().iter().map(|&v| f64::from(v)))
}

fn from_matrix(mat: &DMatrix<f64>, shape: Vec<usize>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(mat.nrows() * mat.ncols());
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            data.push(mat[(i, j)] as f32);
        }
    }
    Tensor::new(shape, data)
}
