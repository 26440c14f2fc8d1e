//! Gradient-based optimization of merging coefficients.
//!
//! Instead of sweeping a grid, the coefficients are learned directly by
//! minimizing the average alignment loss: for each task, the cosine
//! dissimilarity between the merged encoder's features and that task's
//! fine-tuned ("teacher") features on mini-batches of unlabeled inputs,
//! averaged per task and then across tasks.
//!
//! Features are standardized per dimension with exponential-moving-average
//! statistics kept for the student and each teacher; the statistics are
//! updated online every step and treated as constants inside each step's
//! gradient. The merge uses the identity transform, so the loss is smooth in
//! the coefficients and the full gradient is available analytically.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerGrouping;
use crate::merge::Lambda;
use crate::rng::{stream_rng, streams};
use crate::task_vector::{validate_task_vectors, TaskVector};
use crate::tensor::WeightMap;
use crate::toy::{tensor_to_matrix, DenseNet, ToyEncoderConfig, ToyTask};

/// Variance floor inside the standardization.
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStructure {
    #[default]
    PerTask,
    PerTaskPerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaConfig {
    pub lambda_structure: LambdaStructure,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub ema_decay: f64,
    /// Record a lambda snapshot every this many iterations.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for AdaConfig {
    fn default() -> Self {
        AdaConfig {
            lambda_structure: LambdaStructure::PerTask,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            iterations: 500,
            ema_decay: 0.99,
            snapshot_every: 1,
            seed: 0,
        }
    }
}

impl AdaConfig {
    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidSpec(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be >= 1".to_string()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "ema_decay must be in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.snapshot_every == 0 {
            return Err(Error::InvalidSpec("snapshot_every must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// A flat view of the coefficients being optimized, task-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaValues {
    pub structure: LambdaStructure,
    pub task_ids: Vec<String>,
    /// Layer group names (sorted); empty for per-task structure.
    pub groups: Vec<String>,
    pub values: Vec<f64>,
}

impl LambdaValues {
    /// Uniform 1/T initialization.
    pub fn uniform(structure: LambdaStructure, task_ids: Vec<String>, groups: Vec<String>) -> Self {
        let init = 1.0 / task_ids.len() as f64;
        let len = match structure {
            LambdaStructure::PerTask => task_ids.len(),
            LambdaStructure::PerTaskPerLayer => task_ids.len() * groups.len(),
        };
        LambdaValues {
            structure,
            task_ids,
            groups: match structure {
                LambdaStructure::PerTask => Vec::new(),
                LambdaStructure::PerTaskPerLayer => groups,
            },
            values: vec![init; len],
        }
    }

    pub fn coeff(&self, task_index: usize, group_index: usize) -> f64 {
        match self.structure {
            LambdaStructure::PerTask => self.values[task_index],
            LambdaStructure::PerTaskPerLayer => {
                self.values[task_index * self.groups.len() + group_index]
            }
        }
    }

    /// Column names for trace exports: `lambda_<task>` or
    /// `lambda_<task>.<group>`.
    pub fn names(&self) -> Vec<String> {
        match self.structure {
            LambdaStructure::PerTask => {
                self.task_ids.iter().map(|t| format!("lambda_{t}")).collect()
            }
            LambdaStructure::PerTaskPerLayer => self
                .task_ids
                .iter()
                .flat_map(|t| self.groups.iter().map(move |g| format!("lambda_{t}.{g}")))
                .collect(),
        }
    }

    /// The equivalent coefficient structure for `merge()`.
    pub fn to_merge_lambda(&self) -> Lambda {
        match self.structure {
            LambdaStructure::PerTask => Lambda::PerTask(
                self.task_ids
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (t.clone(), self.values[i]))
                    .collect(),
            ),
            LambdaStructure::PerTaskPerLayer => Lambda::PerTaskPerLayer(
                self.task_ids
                    .iter()
                    .enumerate()
                    .map(|(ti, t)| {
                        let per_layer: BTreeMap<String, f64> = self
                            .groups
                            .iter()
                            .enumerate()
                            .map(|(gi, g)| (g.clone(), self.coeff(ti, gi)))
                            .collect();
                        (t.clone(), per_layer)
                    })
                    .collect(),
            ),
        }
    }
}

/// Per-task mini-batch: row indices into each task's sample pool.
pub type Batch = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub total_loss: f64,
    /// Per-task losses in sorted task order.
    pub per_task: Vec<f64>,
    /// Largest per-dimension EMA statistics change this step.
    pub stats_delta: f64,
}

/// Full optimization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaTrace {
    pub task_ids: Vec<String>,
    pub lambda_names: Vec<String>,
    pub records: Vec<IterRecord>,
    /// (iteration, lambda values after that iteration's update).
    pub snapshots: Vec<(usize, Vec<f64>)>,
    /// Normalization scheme note, recorded for report consumers.
    pub normalization: &'static str,
}

impl AdaTrace {
    /// CSV with columns `iteration,total_loss,loss_<task>...,lambda_*...`.
    /// Lambda columns repeat the most recent snapshot.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("iteration,total_loss");
        for t in &self.task_ids {
            let _ = write!(header, ",loss_{t}");
        }
        for name in &self.lambda_names {
            let _ = write!(header, ",{name}");
        }
        header.push('\n');

        let mut out = header;
        let mut snap_idx = 0usize;
        let mut current: Option<&[f64]> = None;
        for record in &self.records {
            while snap_idx < self.snapshots.len() && self.snapshots[snap_idx].0 <= record.iteration
            {
                current = Some(&self.snapshots[snap_idx].1);
                snap_idx += 1;
            }
            let _ = write!(out, "{},{}", record.iteration, record.total_loss);
            for loss in &record.per_task {
                let _ = write!(out, ",{loss}");
            }
            if let Some(values) = current {
                for v in values {
                    let _ = write!(out, ",{v}");
                }
            } else {
                for _ in &self.lambda_names {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        out
    }
}

struct EmaStats {
    mean: DVector<f64>,
    var: DVector<f64>,
    initialized: bool,
}

impl EmaStats {
    fn new(dim: usize) -> Self {
        EmaStats {
            mean: DVector::zeros(dim),
            var: DVector::from_element(dim, 1.0),
            initialized: false,
        }
    }

    /// Update from a batch, returning the largest per-dimension change.
    fn update(&mut self, batch_mean: &DVector<f64>, batch_var: &DVector<f64>, decay: f64) -> f64 {
        if !self.initialized {
            self.mean = batch_mean.clone();
            self.var = batch_var.clone();
            self.initialized = true;
            return f64::INFINITY;
        }
        let new_mean = &self.mean * decay + batch_mean * (1.0 - decay);
        let new_var = &self.var * decay + batch_var * (1.0 - decay);
        let delta = (&new_mean - &self.mean)
            .amax()
            .max((&new_var - &self.var).amax());
        self.mean = new_mean;
        self.var = new_var;
        delta
    }

    fn sigma(&self) -> DVector<f64> {
        self.var.map(|v| (v + NORM_EPS).sqrt())
    }
}

fn column_mean_var(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let var = DVector::from_iterator(
        m.ncols(),
        m.column_iter()
            .enumerate()
            .map(|(j, c)| c.iter().map(|&v| (v - mean[j]).powi(2)).sum::<f64>() / n),
    );
    (mean, var)
}

/// Optimization state: the merged/teacher networks in f64, per-task sample
/// pools, and the running normalization statistics.
pub struct AdaSession {
    base: Vec<(DMatrix<f64>, DVector<f64>)>,
    /// [task][layer] deltas.
    deltas: Vec<Vec<(DMatrix<f64>, DVector<f64>)>>,
    teachers: Vec<DenseNet>,
    pools: Vec<DMatrix<f64>>,
    task_ids: Vec<String>,
    groups: Vec<String>,
    /// Layer index -> group index.
    layer_group: Vec<usize>,
    student_stats: EmaStats,
    teacher_stats: Vec<EmaStats>,
    ema_decay: f64,
}

impl AdaSession {
    /// Build a session from the base encoder, task vectors, and each task's
    /// unlabeled sample pool. Teachers are reconstructed as base + delta.
    pub fn new(
        cfg: &ToyEncoderConfig,
        base: &WeightMap,
        tvs: &[TaskVector],
        tasks: &[ToyTask],
        ema_decay: f64,
    ) -> Result<Self> {
        validate_task_vectors(tvs)?;
        cfg.check_schema(base)?;
        let mut order: Vec<usize> = (0..tvs.len()).collect();
        order.sort_by(|&a, &b| tvs[a].task_id.cmp(&tvs[b].task_id));

        let grouping = LayerGrouping::default();
        let groups = grouping.group_names(base)?;
        let base_net = DenseNet::from_weight_map(cfg, base)?;
        let n_layers = base_net.layers.len();
        let layer_group: Vec<usize> = (0..n_layers)
            .map(|l| {
                let name = format!("layer{l}.weight");
                let group = grouping.group_of(&name);
                groups.iter().position(|g| g == group).expect("group exists")
            })
            .collect();

        let mut task_ids = Vec::with_capacity(tvs.len());
        let mut deltas = Vec::with_capacity(tvs.len());
        let mut teachers = Vec::with_capacity(tvs.len());
        let mut pools = Vec::with_capacity(tvs.len());
        let dim = cfg.feature_dim();
        for &i in &order {
            let tv = &tvs[i];
            let task = tasks
                .iter()
                .find(|t| t.task_id == tv.task_id)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("no sample pool for task '{}'", tv.task_id))
                })?;
            let delta_net = DenseNet::from_weight_map(cfg, &tv.delta)?;
            let teacher = DenseNet {
                layers: base_net
                    .layers
                    .iter()
                    .zip(&delta_net.layers)
                    .map(|((bw, bb), (dw, db))| (bw + dw, bb + db))
                    .collect(),
            };
            task_ids.push(tv.task_id.clone());
            deltas.push(delta_net.layers);
            teachers.push(teacher);
            pools.push(tensor_to_matrix(&task.x_train));
        }

        let teacher_stats = (0..task_ids.len()).map(|_| EmaStats::new(dim)).collect();
        Ok(AdaSession {
            base: base_net.layers,
            deltas,
            teachers,
            pools,
            task_ids,
            groups,
            layer_group,
            student_stats: EmaStats::new(dim),
            teacher_stats,
            ema_decay,
        })
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn group_names(&self) -> &[String] {
        &self.groups
    }

    pub fn uniform_lambda(&self, structure: LambdaStructure) -> LambdaValues {
        LambdaValues::uniform(structure, self.task_ids.clone(), self.groups.clone())
    }

    /// The merged encoder at the given coefficients, as a checkpoint.
    pub fn merged_weights(&self, lambda: &LambdaValues) -> Result<WeightMap> {
        self.merged_net(lambda).to_weight_map()
    }

    fn merged_net(&self, lambda: &LambdaValues) -> DenseNet {
        let layers = self
            .base
            .iter()
            .enumerate()
            .map(|(l, (bw, bb))| {
                let mut w = bw.clone();
                let mut b = bb.clone();
                for (t, delta) in self.deltas.iter().enumerate() {
                    let c = lambda.coeff(t, self.layer_group[l]);
                    if c != 0.0 {
                        w += &delta[l].0 * c;
                        b += &delta[l].1 * c;
                    }
                }
                (w, b)
            })
            .collect();
        DenseNet { layers }
    }

    fn batch_rows(&self, task: usize, rows: &[usize]) -> DMatrix<f64> {
        let pool = &self.pools[task];
        let mut out = DMatrix::zeros(rows.len(), pool.ncols());
        for (i, &r) in rows.iter().enumerate() {
            out.set_row(i, &pool.row(r));
        }
        out
    }

    /// Draw the per-task mini-batches for one iteration.
    pub fn draw_batch(&self, seed: u64, iteration: usize, batch_size: usize) -> Batch {
        self.pools
            .iter()
            .enumerate()
            .map(|(t, pool)| {
                let mut rng = stream_rng(
                    seed,
                    streams::ADA_BATCH + (iteration as u64) * self.task_ids.len() as u64 + t as u64,
                );
                (0..batch_size).map(|_| rng.random_range(0..pool.nrows())).collect()
            })
            .collect()
    }

    /// Update the EMA statistics from this batch's raw features (student at
    /// the current coefficients, plus every teacher). Returns the largest
    /// per-dimension change.
    pub fn observe(&mut self, lambda: &LambdaValues, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let merged = self.merged_net(lambda);
        let mut student_rows: Vec<DMatrix<f64>> = Vec::with_capacity(batch.len());
        let mut max_delta = 0.0f64;
        for (t, rows) in batch.iter().enumerate() {
            let x = self.batch_rows(t, rows);
            let student = merged.forward(&x).pop().expect("forward output");
            let teacher = self.teachers[t].forward(&x).pop().expect("forward output");
            let (tm, tv) = column_mean_var(&teacher);
            let delta = self.teacher_stats[t].update(&tm, &tv, self.ema_decay);
            if delta.is_finite() {
                max_delta = max_delta.max(delta);
            }
            student_rows.push(student);
        }
        let total_rows: usize = student_rows.iter().map(DMatrix::nrows).sum();
        let dim = student_rows[0].ncols();
        let mut stacked = DMatrix::zeros(total_rows, dim);
        let mut at = 0;
        for block in &student_rows {
            stacked.rows_mut(at, block.nrows()).copy_from(block);
            at += block.nrows();
        }
        let (sm, sv) = column_mean_var(&stacked);
        let delta = self.student_stats.update(&sm, &sv, self.ema_decay);
        if delta.is_finite() {
            max_delta = max_delta.max(delta);
        }
        Ok(max_delta)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len() != self.task_ids.len() || batch.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput(
                "batch must hold a non-empty index list per task".to_string(),
            ));
        }
        for (t, rows) in batch.iter().enumerate() {
            if rows.iter().any(|&r| r >= self.pools[t].nrows()) {
                return Err(Error::InvalidInput(format!(
                    "batch row out of range for task '{}'",
                    self.task_ids[t]
                )));
            }
        }
        Ok(())
    }

    /// The alignment loss at `lambda` on `batch`, with the current
    /// (frozen) normalization statistics.
    pub fn tap_loss(&self, lambda: &LambdaValues, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let (loss, per_task, _) = self.loss_impl(lambda, batch, false)?;
        Ok((loss, per_task))
    }

    /// Loss plus its exact gradient with respect to the coefficients.
    pub fn tap_loss_grad(
        &self,
        lambda: &LambdaValues,
        batch: &Batch,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (loss, per_task, grad) = self.loss_impl(lambda, batch, true)?;
        Ok((loss, per_task, grad.expect("gradient requested")))
    }

    fn loss_impl(
        &self,
        lambda: &LambdaValues,
        batch: &Batch,
        want_grad: bool,
    ) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        self.check_batch(batch)?;
        let t_count = self.task_ids.len();
        let merged = self.merged_net(lambda);
        let s_sigma = self.student_stats.sigma();
        let s_mean = &self.student_stats.mean;

        // Accumulated dL/d(merged weights) across all tasks.
        let mut weight_grads: Option<Vec<(DMatrix<f64>, DVector<f64>)>> = None;
        let mut per_task_losses = Vec::with_capacity(t_count);

        for (t, rows) in batch.iter().enumerate() {
            let x = self.batch_rows(t, rows);
            let acts = merged.forward(&x);
            let student = acts.last().expect("forward output");
            let teacher_feats = self.teachers[t].forward(&x).pop().expect("forward output");
            let t_sigma = self.teacher_stats[t].sigma();
            let t_mean = &self.teacher_stats[t].mean;

            let b_rows = rows.len();
            let mut d_features = want_grad.then(|| DMatrix::zeros(b_rows, student.ncols()));
            let mut loss_sum = 0.0f64;
            for i in 0..b_rows {
                // Standardize with stop-gradient statistics.
                let s_hat = DVector::from_iterator(
                    student.ncols(),
                    (0..student.ncols()).map(|j| (student[(i, j)] - s_mean[j]) / s_sigma[j]),
                );
                let w_hat = DVector::from_iterator(
                    teacher_feats.ncols(),
                    (0..teacher_feats.ncols())
                        .map(|j| (teacher_feats[(i, j)] - t_mean[j]) / t_sigma[j]),
                );
                let ns = s_hat.norm();
                let nw = w_hat.norm();
                if ns == 0.0 || nw == 0.0 {
                    return Err(Error::Numerical(
                        "zero-norm normalized feature row under cosine".to_string(),
                    ));
                }
                let dot = s_hat.dot(&w_hat);
                let sim = (dot / (ns * nw)).clamp(-1.0, 1.0);
                loss_sum += 1.0 - sim;

                if let Some(df) = d_features.as_mut() {
                    // d(1 - cos)/d s_hat, then through the standardization.
                    let scale = 1.0 / (t_count as f64 * b_rows as f64);
                    let d_s_hat = &s_hat * (dot / (ns.powi(3) * nw)) - &w_hat / (ns * nw);
                    for j in 0..student.ncols() {
                        df[(i, j)] = scale * d_s_hat[j] / s_sigma[j];
                    }
                }
            }
            per_task_losses.push(loss_sum / b_rows as f64);

            if let Some(df) = d_features {
                let grads = merged.backward(&acts, &df);
                match weight_grads.as_mut() {
                    None => weight_grads = Some(grads),
                    Some(acc) => {
                        for ((aw, ab), (gw, gb)) in acc.iter_mut().zip(grads) {
                            *aw += gw;
                            *ab += gb;
                        }
                    }
                }
            }
        }

        let total = per_task_losses.iter().sum::<f64>() / t_count as f64;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("alignment loss is not finite ({total})")));
        }

        let lambda_grad = weight_grads.map(|wg| {
            let mut grad = vec![0.0f64; lambda.values.len()];
            for (t, delta) in self.deltas.iter().enumerate() {
                for (l, (dw, db)) in delta.iter().enumerate() {
                    let inner = wg[l].0.dot(dw) + wg[l].1.dot(db);
                    match lambda.structure {
                        LambdaStructure::PerTask => grad[t] += inner,
                        LambdaStructure::PerTaskPerLayer => {
                            grad[t * self.groups.len() + self.layer_group[l]] += inner;
                        }
                    }
                }
            }
            grad
        });

        Ok((total, per_task_losses, lambda_grad))
    }
}

/// Run Adam on the alignment loss for `config.iterations` steps. Coefficients
/// start at 1/T and are unconstrained.
pub fn optimize(
    cfg: &ToyEncoderConfig,
    base: &WeightMap,
    tvs: &[TaskVector],
    tasks: &[ToyTask],
    config: &AdaConfig,
) -> Result<(LambdaValues, AdaTrace)> {
    config.validate()?;
    let mut session = AdaSession::new(cfg, base, tvs, tasks, config.ema_decay)?;
    let mut lambda = session.uniform_lambda(config.lambda_structure);
    let n = lambda.values.len();
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];

    let mut records = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    for iteration in 1..=config.iterations {
        let batch = session.draw_batch(config.seed, iteration, config.batch_size);
        let stats_delta = session.observe(&lambda, &batch)?;
        let (loss, per_task, grad) = session
            .tap_loss_grad(&lambda, &batch)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("iteration {iteration}: {msg}")),
                other => other,
            })?;

        let step = iteration as f64;
        for i in 0..n {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / (1.0 - config.beta1.powf(step));
            let v_hat = v[i] / (1.0 - config.beta2.powf(step));
            lambda.values[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }

        records.push(IterRecord {
            iteration,
            total_loss: loss,
            per_task,
            stats_delta: if stats_delta.is_finite() { stats_delta } else { 0.0 },
        });
        if iteration % config.snapshot_every == 0 || iteration == config.iterations {
            snapshots.push((iteration, lambda.values.clone()));
        }
    }

    let trace = AdaTrace {
        task_ids: session.task_ids().to_vec(),
        lambda_names: lambda.names(),
        records,
        snapshots,
        normalization: "ema_standardize_online",
    };
    Ok((lambda, trace))
}
