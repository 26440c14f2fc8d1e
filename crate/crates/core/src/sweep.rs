//! Hyperparameter sweeps scored with TAP.
//!
//! A sweep expands a grid of candidate merge specs, builds each candidate,
//! scores it against per-task teacher features (computed once per sweep),
//! and selects the candidate with minimal average TAP. Optionally every
//! candidate is also evaluated downstream (probes retrained per task), which
//! is what TAP selection is meant to avoid; the cost counters make the
//! difference visible.
//!
//! Reports serialize deterministically: identical config, seed, and inputs
//! produce byte-identical JSON and CSV regardless of worker count. Wall
//! clock is tracked in memory but never serialized.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{merge, Lambda, MergeSpec, Method};
use crate::rng::{permutation, streams};
use crate::tap::{
    sample_digest, tap_average, tap_task, FeatureOrigin, FeatureSet, Metric, DEFAULT_SAMPLE_COUNT,
};
use crate::task_vector::TaskVector;
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor, WeightMap};
use crate::toy::{encoder_features, evaluate, LoadedBench, ProbeMode, ToyEncoderConfig, ToyTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    TapOnly,
    TapAndEval,
}

fn default_n_samples() -> usize {
    DEFAULT_SAMPLE_COUNT
}

fn default_max_candidates() -> usize {
    4096
}

/// Checkpoint and sample-pool paths for sweeps driven by an external
/// feature provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPaths {
    pub base: PathBuf,
    /// task id -> fine-tuned checkpoint.
    pub tasks: BTreeMap<String, PathBuf>,
    /// task id -> MKT1 file holding the sample pool as tensor "x".
    pub samples: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub method: Method,
    /// Axis name -> values. The "lambda" axis is mandatory; the remaining
    /// axes are method hyperparameters (mu).
    pub grid: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub eval_mode: EvalMode,
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<ModelPaths>,
}

/// Expand the cartesian product of the grid in deterministic order: lambda
/// is the outermost axis, then the mu axes sorted by name, rightmost fastest.
pub fn generate_grid(config: &SweepConfig) -> Result<Vec<MergeSpec>> {
    let lambdas = config
        .grid
        .get("lambda")
        .ok_or_else(|| Error::InvalidSpec("grid is missing the mandatory 'lambda' axis".to_string()))?;
    if config.grid.values().any(|v| v.is_empty()) {
        return Err(Error::InvalidSpec("grid axes must be non-empty".to_string()));
    }
    let mu_axes: Vec<(&String, &Vec<f64>)> =
        config.grid.iter().filter(|(k, _)| *k != "lambda").collect();

    let total: usize = config.grid.values().map(Vec::len).product();
    if total > config.max_candidates {
        return Err(Error::InvalidSpec(format!(
            "grid has {total} candidates, exceeding the limit of {}",
            config.max_candidates
        )));
    }

    let mut specs = Vec::with_capacity(total);
    let mu_sizes: Vec<usize> = mu_axes.iter().map(|(_, v)| v.len()).collect();
    let mu_total: usize = mu_sizes.iter().product();
    for &lambda in lambdas {
        for combo in 0..mu_total {
            let mut mu = BTreeMap::new();
            let mut rem = combo;
            // Rightmost axis varies fastest.
            for (axis, (name, values)) in mu_axes.iter().enumerate().rev() {
                let idx = rem % mu_sizes[axis];
                rem /= mu_sizes[axis];
                mu.insert((*name).clone(), values[idx]);
            }
            specs.push(MergeSpec {
                method: config.method,
                lambda: Lambda::Scalar(lambda),
                mu,
            });
        }
    }
    Ok(specs)
}

/// Produces TAP feature sets for candidate and teacher encoders.
///
/// `encoder_forward_passes` counts one pass per sample row fed through an
/// encoder for TAP scoring; downstream evaluation passes are accounted
/// separately as decoder trainings.
pub trait FeatureProvider: Sync {
    /// Sorted task ids this provider can serve.
    fn task_ids(&self) -> Vec<String>;
    fn features(&self, weights: &WeightMap, task_id: &str) -> Result<FeatureSet>;
    fn teacher_features(&self, task_id: &str) -> Result<FeatureSet>;
    fn encoder_forward_passes(&self) -> u64;
}

/// Downstream evaluation on a trainable benchmark. Scores are
/// higher-is-better.
pub trait Evaluator: Sync {
    /// Retrained-probe test scores per task for the given encoder.
    fn scores(&self, weights: &WeightMap) -> Result<BTreeMap<String, f64>>;
    /// Test scores of each task's own fine-tuned encoder, used as
    /// normalization denominators.
    fn finetuned_scores(&self) -> Result<BTreeMap<String, f64>>;
    fn decoder_trainings(&self) -> u64;
}

/// In-process provider and evaluator backed by the toy benchmark.
pub struct ToyBenchSource {
    cfg: ToyEncoderConfig,
    tasks: Vec<ToyTask>,
    finetuned: Vec<(String, WeightMap)>,
    /// Sampled TAP inputs per task (a seeded-permutation prefix of the
    /// task's train inputs, so smaller N are nested in larger ones).
    samples: BTreeMap<String, Tensor>,
    ridge_penalty: f64,
    forward_passes: AtomicU64,
    decoder_trainings: AtomicU64,
}

impl ToyBenchSource {
    pub fn new(bench: &LoadedBench, n_samples: usize, seed: u64) -> Result<Self> {
        Self::from_parts(
            bench.manifest.encoder.clone(),
            bench.tasks.clone(),
            bench.finetuned.clone(),
            n_samples,
            seed,
            bench.manifest.params.ridge_penalty,
        )
    }

    pub fn from_parts(
        cfg: ToyEncoderConfig,
        mut tasks: Vec<ToyTask>,
        mut finetuned: Vec<(String, WeightMap)>,
        n_samples: usize,
        seed: u64,
        ridge_penalty: f64,
    ) -> Result<Self> {
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        finetuned.sort_by(|a, b| a.0.cmp(&b.0));
        if tasks.len() != finetuned.len()
            || tasks
                .iter()
                .zip(&finetuned)
                .any(|(t, (id, _))| t.task_id != *id)
        {
            return Err(Error::InvalidInput(
                "tasks and fine-tuned checkpoints name different task sets".to_string(),
            ));
        }
        let mut samples = BTreeMap::new();
        for (index, task) in tasks.iter().enumerate() {
            samples.insert(
                task.task_id.clone(),
                sample_rows(&task.x_train, n_samples, seed, index)?,
            );
        }
        Ok(ToyBenchSource {
            cfg,
            tasks,
            finetuned,
            samples,
            ridge_penalty,
            forward_passes: AtomicU64::new(0),
            decoder_trainings: AtomicU64::new(0),
        })
    }

    pub fn encoder_config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }

    /// The sampled TAP inputs for a task (used to hand sample files to
    /// external tooling).
    pub fn samples_for(&self, task_id: &str) -> Result<&Tensor> {
        self.samples
            .get(task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{task_id}'")))
    }

    fn task(&self, task_id: &str) -> Result<&ToyTask> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{task_id}'")))
    }
}

/// A seeded-permutation prefix of the rows of `pool`.
fn sample_rows(pool: &Tensor, n_samples: usize, seed: u64, task_index: usize) -> Result<Tensor> {
    let n_pool = pool.shape()[0];
    let dim = pool.shape()[1];
    if n_samples == 0 || n_samples > n_pool {
        return Err(Error::InvalidInput(format!(
            "cannot draw {n_samples} TAP samples from a pool of {n_pool}"
        )));
    }
    let perm = permutation(seed, streams::TAP_SAMPLES + task_index as u64, n_pool);
    let mut data = Vec::with_capacity(n_samples * dim);
    for &row in perm.iter().take(n_samples) {
        data.extend_from_slice(pool.row(row));
    }
    Tensor::new(vec![n_samples, dim], data)
}

impl FeatureProvider for ToyBenchSource {
    fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    fn features(&self, weights: &WeightMap, task_id: &str) -> Result<FeatureSet> {
        let samples = self.samples_for(task_id)?;
        let features = encoder_features(&self.cfg, weights, samples, task_id)?;
        self.forward_passes
            .fetch_add(samples.shape()[0] as u64, Ordering::Relaxed);
        Ok(features)
    }

    fn teacher_features(&self, task_id: &str) -> Result<FeatureSet> {
        let weights = self
            .finetuned
            .iter()
            .find(|(id, _)| id == task_id)
            .map(|(_, w)| w)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{task_id}'")))?;
        self.features(weights, task_id)
    }

    fn encoder_forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }
}

impl Evaluator for ToyBenchSource {
    fn scores(&self, weights: &WeightMap) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for task in &self.tasks {
            let score = evaluate(&self.cfg, weights, task, ProbeMode::Retrain, self.ridge_penalty)?;
            self.decoder_trainings.fetch_add(1, Ordering::Relaxed);
            out.insert(task.task_id.clone(), score);
        }
        Ok(out)
    }

    fn finetuned_scores(&self) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (task_id, weights) in &self.finetuned {
            let task = self.task(task_id)?;
            let score = evaluate(&self.cfg, weights, task, ProbeMode::Retrain, self.ridge_penalty)?;
            self.decoder_trainings.fetch_add(1, Ordering::Relaxed);
            out.insert(task_id.clone(), score);
        }
        Ok(out)
    }

    fn decoder_trainings(&self) -> u64 {
        self.decoder_trainings.load(Ordering::Relaxed)
    }
}

/// Feature provider that shells out to a configured executable:
///
/// ```text
/// <provider> <checkpoint_path> <samples_path> <output_features_path>
/// ```
///
/// The provider must write an FTS1 feature file; a nonzero exit status
/// aborts the candidate. Sample files are written once per sweep into the
/// scratch directory.
pub struct ExternalProvider {
    exe: PathBuf,
    scratch: PathBuf,
    teacher_checkpoints: BTreeMap<String, PathBuf>,
    sample_files: BTreeMap<String, PathBuf>,
    expected_digests: BTreeMap<String, u64>,
    n_samples: usize,
    forward_passes: AtomicU64,
    unique: AtomicU64,
}

impl ExternalProvider {
    pub fn new(
        exe: impl Into<PathBuf>,
        models: &ModelPaths,
        n_samples: usize,
        seed: u64,
        scratch: impl Into<PathBuf>,
    ) -> Result<Self> {
        let scratch = scratch.into();
        std::fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        if models.tasks.keys().ne(models.samples.keys()) {
            return Err(Error::InvalidInput(
                "provider models and sample pools name different task sets".to_string(),
            ));
        }
        let mut sample_files = BTreeMap::new();
        let mut expected_digests = BTreeMap::new();
        for (index, (task_id, pool_path)) in models.samples.iter().enumerate() {
            let pool_map = load_checkpoint(pool_path)?;
            let pool = pool_map
                .get("x")
                .ok_or_else(|| Error::Format(format!("sample pool {} has no tensor 'x'", pool_path.display())))?;
            let sampled = sample_rows(pool, n_samples, seed, index)?;
            expected_digests.insert(task_id.clone(), sample_digest(&sampled));
            let mut map = WeightMap::new();
            map.insert("x", sampled)?;
            let path = scratch.join(format!("samples_{task_id}.mkt"));
            save_checkpoint(&map, &path)?;
            sample_files.insert(task_id.clone(), path);
        }
        Ok(ExternalProvider {
            exe: exe.into(),
            scratch,
            teacher_checkpoints: models.tasks.clone(),
            sample_files,
            expected_digests,
            n_samples,
            forward_passes: AtomicU64::new(0),
            unique: AtomicU64::new(0),
        })
    }

    fn invoke(&self, checkpoint: &Path, task_id: &str) -> Result<FeatureSet> {
        let samples = self
            .sample_files
            .get(task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{task_id}'")))?;
        let out = self.scratch.join(format!(
            "features_{task_id}_{}.fts",
            self.unique.fetch_add(1, Ordering::Relaxed)
        ));
        let status = Command::new(&self.exe)
            .arg(checkpoint)
            .arg(samples)
            .arg(&out)
            .status()
            .map_err(|e| Error::io(&self.exe, e))?;
        if !status.success() {
            let _ = std::fs::remove_file(&out);
            return Err(Error::InvalidInput(format!(
                "feature provider exited with {status}"
            )));
        }
        let features = FeatureSet::load(&out, task_id, FeatureOrigin::ExternalProvider)?;
        let _ = std::fs::remove_file(&out);
        if features.sample_digest != self.expected_digests[task_id] {
            return Err(Error::Format(format!(
                "provider features for '{task_id}' carry digest {:016x}, expected {:016x}",
                features.sample_digest, self.expected_digests[task_id]
            )));
        }
        if features.n_samples() != self.n_samples {
            return Err(Error::Format(format!(
                "provider returned {} rows, expected {}",
                features.n_samples(),
                self.n_samples
            )));
        }
        self.forward_passes
            .fetch_add(features.n_samples() as u64, Ordering::Relaxed);
        Ok(features)
    }
}

impl FeatureProvider for ExternalProvider {
    fn task_ids(&self) -> Vec<String> {
        self.teacher_checkpoints.keys().cloned().collect()
    }

    fn features(&self, weights: &WeightMap, task_id: &str) -> Result<FeatureSet> {
        let path = self.scratch.join(format!(
            "candidate_{}.mkt",
            self.unique.fetch_add(1, Ordering::Relaxed)
        ));
        save_checkpoint(weights, &path)?;
        let result = self.invoke(&path, task_id);
        let _ = std::fs::remove_file(&path);
        result
    }

    fn teacher_features(&self, task_id: &str) -> Result<FeatureSet> {
        let checkpoint = self
            .teacher_checkpoints
            .get(task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{task_id}'")))?
            .clone();
        self.invoke(&checkpoint, task_id)
    }

    fn encoder_forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub candidate_index: usize,
    pub spec: MergeSpec,
    pub tap_average: f64,
    pub per_task_tap: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_scores: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalized_performance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepCost {
    pub encoder_forward_passes: u64,
    pub decoder_trainings: u64,
    /// In-memory only; excluded from serialized reports so identical runs
    /// stay byte-identical.
    #[serde(skip)]
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
    pub selected_by_tap: MergeSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selected_by_eval: Option<MergeSpec>,
    pub cost: SweepCost,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))
    }

    /// CSV with one row per candidate: index, lambda, the mu axes in sorted
    /// order, tap_average, per-task eval scores (eval mode only), and
    /// normalized performance.
    pub fn to_csv(&self) -> String {
        let mu_keys: Vec<&String> = self.config.grid.keys().filter(|k| *k != "lambda").collect();
        let eval_tasks: Vec<&String> = self
            .rows
            .first()
            .and_then(|r| r.eval_scores.as_ref())
            .map(|m| m.keys().collect())
            .unwrap_or_default();

        let mut header = String::from("candidate_index,lambda");
        for k in &mu_keys {
            let _ = write!(header, ",{k}");
        }
        header.push_str(",tap_average");
        for t in &eval_tasks {
            let _ = write!(header, ",eval_{t}");
        }
        if !eval_tasks.is_empty() {
            header.push_str(",normalized_performance");
        }
        header.push('\n');

        let mut out = header;
        for row in &self.rows {
            let lambda = match row.spec.lambda {
                Lambda::Scalar(v) => v,
                _ => f64::NAN,
            };
            let _ = write!(out, "{},{lambda}", row.candidate_index);
            for k in &mu_keys {
                let _ = write!(out, ",{}", row.spec.mu.get(*k).copied().unwrap_or(f64::NAN));
            }
            let _ = write!(out, ",{}", row.tap_average);
            if let Some(scores) = &row.eval_scores {
                for t in &eval_tasks {
                    let _ = write!(out, ",{}", scores[*t]);
                }
                let _ = write!(out, ",{}", row.normalized_performance.unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }
}

/// Run the sweep. Candidates are distributed over `jobs` workers; rows are
/// ordered by candidate index regardless of completion order, and the first
/// error in index order wins, so results do not depend on the worker count.
pub fn run_sweep(
    base: &WeightMap,
    tvs: &[TaskVector],
    config: &SweepConfig,
    provider: &dyn FeatureProvider,
    evaluator: Option<&dyn Evaluator>,
    jobs: usize,
) -> Result<SweepReport> {
    let start = Instant::now();
    let specs = generate_grid(config)?;
    let jobs = jobs.max(1).min(specs.len().max(1));

    let task_ids = provider.task_ids();
    let mut tv_ids: Vec<&String> = tvs.iter().map(|tv| &tv.task_id).collect();
    tv_ids.sort();
    if !tv_ids.iter().map(|s| s.as_str()).eq(task_ids.iter().map(String::as_str)) {
        return Err(Error::InvalidInput(format!(
            "task vectors name tasks {tv_ids:?} but the feature source serves {task_ids:?}"
        )));
    }

    let evaluator = match config.eval_mode {
        EvalMode::TapOnly => None,
        EvalMode::TapAndEval => Some(evaluator.ok_or_else(|| {
            Error::InvalidInput(
                "eval_mode is tap_and_eval but no trainable benchmark is available".to_string(),
            )
        })?),
    };

    // Teacher features once per sweep; they do not depend on the candidate.
    let mut teachers: BTreeMap<String, FeatureSet> = BTreeMap::new();
    for task_id in &task_ids {
        teachers.insert(task_id.clone(), provider.teacher_features(task_id)?);
    }
    let finetuned_scores = match evaluator {
        Some(e) => Some(e.finetuned_scores()?),
        None => None,
    };

    let score_candidate = |index: usize, spec: &MergeSpec| -> Result<SweepRow> {
        let merged = merge(base, tvs, spec)?;
        let mut per_task_tap = BTreeMap::new();
        for task_id in &task_ids {
            let features = provider
                .features(&merged.weights, task_id)
                .map_err(|e| Error::Provider {
                    candidate: index,
                    message: e.to_string(),
                })?;
            per_task_tap.insert(
                task_id.clone(),
                tap_task(&features, &teachers[task_id], config.metric)?,
            );
        }
        let tap_avg = tap_average(&per_task_tap)?;

        let (eval_scores, normalized) = match (evaluator, &finetuned_scores) {
            (Some(e), Some(denoms)) => {
                let scores = e.scores(&merged.weights)?;
                let ratio_sum: f64 = scores
                    .iter()
                    .map(|(task, &s)| s / denoms[task])
                    .sum();
                let normalized = ratio_sum / scores.len() as f64;
                (Some(scores), Some(normalized))
            }
            _ => (None, None),
        };

        Ok(SweepRow {
            candidate_index: index,
            spec: spec.clone(),
            tap_average: tap_avg,
            per_task_tap,
            eval_scores,
            normalized_performance: normalized,
        })
    };

    let mut slots: Vec<Option<Result<SweepRow>>> = (0..specs.len()).map(|_| None).collect();
    if jobs <= 1 {
        for (i, spec) in specs.iter().enumerate() {
            slots[i] = Some(score_candidate(i, spec));
        }
    } else {
        let results: Vec<Vec<(usize, Result<SweepRow>)>> = std::thread::scope(|scope| {
            let score = &score_candidate;
            let specs = &specs;
            let handles: Vec<_> = (0..jobs)
                .map(|worker| {
                    scope.spawn(move || {
                        specs
                            .iter()
                            .enumerate()
                            .skip(worker)
                            .step_by(jobs)
                            .map(|(i, spec)| (i, score(i, spec)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for chunk in results {
            for (i, row) in chunk {
                slots[i] = Some(row);
            }
        }
    }

    let mut rows = Vec::with_capacity(specs.len());
    for slot in slots {
        rows.push(slot.expect("every candidate scored")?);
    }

    let selected_by_tap = rows
        .iter()
        .min_by(|a, b| {
            a.tap_average
                .partial_cmp(&b.tap_average)
                .expect("finite TAP")
                .then(a.candidate_index.cmp(&b.candidate_index))
        })
        .expect("non-empty grid")
        .spec
        .clone();
    let selected_by_eval = if finetuned_scores.is_some() {
        rows.iter()
            .max_by(|a, b| {
                a.normalized_performance
                    .partial_cmp(&b.normalized_performance)
                    .expect("finite scores")
                    // On ties prefer the earliest candidate.
                    .then(b.candidate_index.cmp(&a.candidate_index))
            })
            .map(|r| r.spec.clone())
    } else {
        None
    };

    Ok(SweepReport {
        config: config.clone(),
        rows,
        selected_by_tap,
        selected_by_eval,
        cost: SweepCost {
            encoder_forward_passes: provider.encoder_forward_passes(),
            decoder_trainings: evaluator.map(|e| e.decoder_trainings()).unwrap_or(0),
            wall_clock_ms: start.elapsed().as_millis() as u64,
        },
    })
}
