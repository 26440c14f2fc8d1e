//! A deterministic desk-scale multi-task benchmark.
//!
//! The encoder is a small tanh MLP; tasks are synthetic scalar regressions
//! whose targets come from distinct random smooth functions; decoders are
//! closed-form ridge probes so downstream evaluation is cheap enough to act
//! as a ground-truth oracle when validating proxy-based selection. All
//! randomness flows from explicit `(seed, stream)` pairs.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{stream_rng, streams};
use crate::tap::{sample_digest, FeatureOrigin, FeatureSet};
use crate::task_vector::{compute_task_vector, TaskVector};
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor, WeightMap};

/// Default ridge penalty for probe training.
pub const DEFAULT_RIDGE_PENALTY: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Architecture of the toy encoder. Layer `i` owns parameters
/// `layer{i}.weight` (out x in) and `layer{i}.bias` (out); every layer
/// applies tanh, and the last layer's activations are the features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ToyEncoderConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        let cfg = ToyEncoderConfig {
            input_dim,
            hidden_dims,
            activation: Activation::Tanh,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("encoder input_dim must be >= 1".to_string()));
        }
        if self.hidden_dims.len() < 2 {
            return Err(Error::InvalidSpec(
                "encoder needs at least 2 layers so per-layer methods are nontrivial".to_string(),
            ));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("encoder layer dims must be >= 1".to_string()));
        }
        if *self.hidden_dims.last().unwrap() < 2 {
            return Err(Error::InvalidSpec("encoder feature dim must be >= 2".to_string()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.hidden_dims.len()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.n_layers());
        let mut fan_in = self.input_dim;
        for &out in &self.hidden_dims {
            dims.push((out, fan_in));
            fan_in = out;
        }
        dims
    }

    /// Random base weights: W ~ N(0, 1/fan_in), biases zero.
    pub fn init_weights(&self, seed: u64) -> Result<WeightMap> {
        let mut rng = stream_rng(seed, streams::BASE_INIT);
        let mut map = WeightMap::new();
        for (i, (out, fan_in)) in self.layer_dims().into_iter().enumerate() {
            let std = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f32> = (0..out * fan_in)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect();
            map.insert(format!("layer{i}.weight"), Tensor::new(vec![out, fan_in], data)?)?;
            map.insert(format!("layer{i}.bias"), Tensor::zeros(vec![out])?)?;
        }
        Ok(map)
    }

    /// An all-zero weight map with this architecture's schema.
    pub fn zero_weights(&self) -> Result<WeightMap> {
        let mut map = WeightMap::new();
        for (i, (out, fan_in)) in self.layer_dims().into_iter().enumerate() {
            map.insert(format!("layer{i}.weight"), Tensor::zeros(vec![out, fan_in])?)?;
            map.insert(format!("layer{i}.bias"), Tensor::zeros(vec![out])?)?;
        }
        Ok(map)
    }

    pub fn check_schema(&self, map: &WeightMap) -> Result<()> {
        let expected = self.zero_weights()?;
        crate::tensor::validate_compat(&[&expected, map]).map(|_| ())
    }

    /// Recover the architecture from a checkpoint's schema.
    pub fn from_schema(map: &WeightMap) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut input_dim = None;
        for i in 0.. {
            let name = format!("layer{i}.weight");
            let Some(w) = map.get(&name) else { break };
            if w.shape().len() != 2 {
                return Err(Error::InvalidInput(format!("'{name}' is not a matrix")));
            }
            if i == 0 {
                input_dim = Some(w.shape()[1]);
            }
            hidden.push(w.shape()[0]);
        }
        let input_dim = input_dim
            .ok_or_else(|| Error::InvalidInput("checkpoint has no layer0.weight".to_string()))?;
        let cfg = ToyEncoderConfig::new(input_dim, hidden)?;
        cfg.check_schema(map)?;
        Ok(cfg)
    }
}

/// A dense tanh MLP over f64, shared by training, feature extraction, and
/// the alignment-loss optimizer.
#[derive(Debug, Clone)]
pub(crate) struct DenseNet {
    /// Per layer: (W out x in, b out).
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl DenseNet {
    pub fn from_weight_map(cfg: &ToyEncoderConfig, map: &WeightMap) -> Result<Self> {
        cfg.check_schema(map)?;
        let mut layers = Vec::with_capacity(cfg.n_layers());
        for (i, (out, fan_in)) in cfg.layer_dims().into_iter().enumerate() {
            let w = map.get(&format!("layer{i}.weight")).expect("schema checked");
            let b = map.get(&format!("layer{i}.bias")).expect("schema checked");
            let wm = DMatrix::from_row_iterator(out, fan_in, w.data().iter().map(|&v| f64::from(v)));
            let bv = DVector::from_iterator(out, b.data().iter().map(|&v| f64::from(v)));
            layers.push((wm, bv));
        }
        Ok(DenseNet { layers })
    }

    pub fn to_weight_map(&self) -> Result<WeightMap> {
        let mut map = WeightMap::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut data = Vec::with_capacity(w.nrows() * w.ncols());
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    data.push(w[(r, c)] as f32);
                }
            }
            map.insert(
                format!("layer{i}.weight"),
                Tensor::new(vec![w.nrows(), w.ncols()], data)?,
            )?;
            let bias: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            map.insert(format!("layer{i}.bias"), Tensor::new(vec![b.len()], bias)?)?;
        }
        Ok(map)
    }

    /// Forward pass keeping every layer's activations. `activations[0]` is
    /// the input; the last entry is the feature matrix.
    pub fn forward(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (w, b) in &self.layers {
            let prev = acts.last().unwrap();
            let mut a = prev * w.transpose();
            for mut row in a.row_iter_mut() {
                row += b.transpose();
            }
            acts.push(a.map(f64::tanh));
        }
        acts
    }

    /// Backprop of `d_features = dL/d activations[last]` through the net.
    /// Returns per-layer (dW, db) in layer order.
    pub fn backward(
        &self,
        acts: &[DMatrix<f64>],
        d_features: &DMatrix<f64>,
    ) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        let n_layers = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n_layers);
        let mut d_z = d_features.clone();
        for i in (0..n_layers).rev() {
            let z = &acts[i + 1];
            let d_a = d_z.zip_map(z, |g, zi| g * (1.0 - zi * zi));
            let d_w = d_a.transpose() * &acts[i];
            let d_b = DVector::from_iterator(
                d_a.ncols(),
                d_a.column_iter().map(|c| c.sum()),
            );
            d_z = &d_a * &self.layers[i].0;
            grads.push((d_w, d_b));
        }
        grads.reverse();
        grads
    }
}

pub(crate) fn tensor_to_matrix(t: &Tensor) -> DMatrix<f64> {
    assert_eq!(t.shape().len(), 2);
    DMatrix::from_row_iterator(
        t.shape()[0],
        t.shape()[1],
        t.data().iter().map(|&v| f64::from(v)),
    )
}

fn matrix_to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)] as f32);
        }
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data)
}

/// Encoder features for the rows of `x` (shape n x input_dim), as an
/// n x feature_dim tensor.
pub fn encoder_forward(cfg: &ToyEncoderConfig, weights: &WeightMap, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[1] != cfg.input_dim {
        return Err(Error::InvalidInput(format!(
            "input shape {:?} does not match encoder input_dim {}",
            x.shape(),
            cfg.input_dim
        )));
    }
    let net = DenseNet::from_weight_map(cfg, weights)?;
    let acts = net.forward(&tensor_to_matrix(x));
    matrix_to_tensor(acts.last().unwrap())
}

/// Features packaged for TAP comparison (origin and sample digest attached).
pub fn encoder_features(
    cfg: &ToyEncoderConfig,
    weights: &WeightMap,
    x: &Tensor,
    task_id: &str,
) -> Result<FeatureSet> {
    let features = encoder_forward(cfg, weights, x)?;
    FeatureSet::new(task_id, features, FeatureOrigin::ToyEncoder, sample_digest(x))
}

/// One synthetic regression task.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub task_id: String,
    pub x_train: Tensor,
    pub y_train: Vec<f32>,
    pub x_test: Tensor,
    pub y_test: Vec<f32>,
    /// Per-task seed, used for fine-tuning and batch sampling.
    pub seed: u64,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over (seed, index) so per-task seeds do not
    // collide across neighbouring master seeds.
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Base weight of the task-specific target component relative to the
/// component all tasks share. Related tasks produce aligned task vectors,
/// which is the regime where weight-space merging is known to work; the
/// per-task increment makes the task-vector norms unequal, mirroring the
/// imbalance observed when fine-tuning protocols differ.
const TASK_SPECIFIC_WEIGHT: f64 = 0.3;
const TASK_SPECIFIC_INCREMENT: f64 = 0.2;

/// Stream offset for the draws shared by all tasks of one benchmark.
const SHARED_TARGET_STREAM: u64 = 999;

/// Generate `t_count` tasks. Targets are distinct random smooth functions: a
/// sinusoid-plus-ridge component shared by every task, plus a smaller
/// task-specific sinusoid. Inputs are uniform on (-1, 1); generation is
/// fully determined by the arguments.
pub fn make_tasks(
    seed: u64,
    t_count: usize,
    input_dim: usize,
    n_train: usize,
    n_test: usize,
) -> Result<Vec<ToyTask>> {
    if t_count < 2 {
        return Err(Error::InvalidInput("make_tasks needs T >= 2".to_string()));
    }
    if input_dim == 0 || n_train == 0 || n_test == 0 {
        return Err(Error::InvalidInput("make_tasks dims must be >= 1".to_string()));
    }
    let uniform = Uniform::new(-1.0f64, 1.0).expect("valid range");

    let mut shared_rng = stream_rng(seed, streams::TASK_DATA + SHARED_TARGET_STREAM);
    let w_shared: Vec<f64> = (0..input_dim)
        .map(|_| StandardNormal.sample(&mut shared_rng))
        .collect();
    let w_ridge: Vec<f64> = (0..input_dim)
        .map(|_| StandardNormal.sample(&mut shared_rng))
        .collect();
    let shared_phase: f64 = uniform.sample(&mut shared_rng) * std::f64::consts::PI;

    let mut tasks = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut rng = stream_rng(seed, streams::TASK_DATA + t as u64);
        let w_task: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let task_phase: f64 = uniform.sample(&mut rng) * std::f64::consts::PI;
        let specific_weight = TASK_SPECIFIC_WEIGHT + TASK_SPECIFIC_INCREMENT * t as f64;

        let w_shared = &w_shared;
        let w_ridge = &w_ridge;
        let target = move |row: &[f64]| -> f64 {
            let dc: f64 = w_shared.iter().zip(row).map(|(a, b)| a * b).sum();
            let dr: f64 = w_ridge.iter().zip(row).map(|(a, b)| a * b).sum();
            let dt: f64 = w_task.iter().zip(row).map(|(a, b)| a * b).sum();
            (1.5 * dc + shared_phase).sin()
                + 0.6 * (2.0 * dr).sin()
                + specific_weight * (1.5 * dt + task_phase).sin()
        };

        let mut draw_split = |n: usize| -> (Tensor, Vec<f32>) {
            let mut data = Vec::with_capacity(n * input_dim);
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n {
                let row: Vec<f64> = (0..input_dim).map(|_| uniform.sample(&mut rng)).collect();
                targets.push(target(&row) as f32);
                data.extend(row.iter().map(|&v| v as f32));
            }
            (
                Tensor::new(vec![n, input_dim], data).expect("consistent dims"),
                targets,
            )
        };

        let (x_train, y_train) = draw_split(n_train);
        let (x_test, y_test) = draw_split(n_test);
        tasks.push(ToyTask {
            task_id: format!("task{t}"),
            x_train,
            y_train,
            x_test,
            y_test,
            seed: mix_seed(seed, t as u64),
        });
    }
    Ok(tasks)
}

/// Full-batch gradient descent on the MSE of the encoder plus a jointly
/// trained linear head. Returns the encoder weights only, along with the
/// loss trace. Divergence (non-finite loss) is an error naming the step.
pub fn finetune(
    cfg: &ToyEncoderConfig,
    base: &WeightMap,
    task: &ToyTask,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(WeightMap, Vec<f64>)> {
    if steps == 0 {
        return Err(Error::InvalidInput("finetune needs steps >= 1".to_string()));
    }
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("bad learning rate {lr}")));
    }
    let mut net = DenseNet::from_weight_map(cfg, base)?;
    let d = cfg.feature_dim();
    let mut rng = stream_rng(seed, streams::FINETUNE);
    let mut head_w = DVector::from_iterator(
        d,
        (0..d).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * 0.1
        }),
    );
    let mut head_b = 0.0f64;

    let x = tensor_to_matrix(&task.x_train);
    let y = DVector::from_iterator(task.y_train.len(), task.y_train.iter().map(|&v| f64::from(v)));
    let n = y.len() as f64;

    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let acts = net.forward(&x);
        let features = acts.last().unwrap();
        let pred = features * &head_w + DVector::from_element(y.len(), head_b);
        let resid = &pred - &y;
        let loss = resid.dot(&resid) / n;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "fine-tuning diverged at step {step} (loss {loss})"
            )));
        }
        trace.push(loss);
        if step == steps {
            break;
        }

        // d loss / d pred = 2 r / n
        let d_pred = resid.map(|r| 2.0 * r / n);
        let d_head_w = features.transpose() * &d_pred;
        let d_head_b = d_pred.sum();
        let d_features = &d_pred * head_w.transpose();
        let grads = net.backward(&acts, &d_features);
        for ((w, b), (dw, db)) in net.layers.iter_mut().zip(&grads) {
            *w -= dw * lr;
            *b -= db * lr;
        }
        head_w -= d_head_w * lr;
        head_b -= d_head_b * lr;
    }
    Ok((net.to_weight_map()?, trace))
}

/// A closed-form ridge regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub ridge_penalty: f64,
}

impl Probe {
    pub fn predict_rows(&self, features: &Tensor) -> Vec<f64> {
        (0..features.shape()[0])
            .map(|i| {
                let row = features.row(i);
                self.weight
                    .iter()
                    .zip(row)
                    .map(|(&w, &f)| w * f64::from(f))
                    .sum::<f64>()
                    + self.bias
            })
            .collect()
    }
}

/// Solve the ridge normal equations exactly (features centered, bias
/// unpenalized).
pub fn train_probe(features: &FeatureSet, targets: &[f32], ridge_penalty: f64) -> Result<Probe> {
    if ridge_penalty <= 0.0 {
        return Err(Error::InvalidInput("ridge penalty must be > 0".to_string()));
    }
    let n = features.n_samples();
    if n < 2 {
        return Err(Error::InvalidInput("probe training needs N >= 2".to_string()));
    }
    if targets.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} feature rows but {} targets",
            targets.len()
        )));
    }
    let d = features.dim();
    let x = tensor_to_matrix(features.matrix());
    let y = DVector::from_iterator(n, targets.iter().map(|&v| f64::from(v)));

    let x_mean = x.row_mean();
    let y_mean = y.mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let yc = y.add_scalar(-y_mean);

    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += ridge_penalty;
    }
    let rhs = xc.transpose() * yc;
    let weight = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Numerical("ridge system is singular".to_string()))?;

    let bias = y_mean - x_mean.transpose().dot(&weight);
    Ok(Probe {
        weight: weight.iter().copied().collect(),
        bias,
        ridge_penalty,
    })
}

/// Coefficient of determination of predictions against actuals.
pub fn r_squared(pred: &[f64], actual: &[f32]) -> f64 {
    let n = actual.len() as f64;
    let mean: f64 = actual.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let ss_res: f64 = pred
        .iter()
        .zip(actual)
        .map(|(&p, &a)| (f64::from(a) - p).powi(2))
        .sum();
    let ss_tot: f64 = actual.iter().map(|&a| (f64::from(a) - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// How the decoder is obtained during evaluation.
#[derive(Debug, Clone)]
pub enum ProbeMode<'a> {
    /// Train a fresh ridge probe on this encoder's train-split features.
    Retrain,
    /// Reuse a probe trained elsewhere (e.g. on the fine-tuned encoder).
    Frozen(&'a Probe),
}

/// Test-split R^2 of the given encoder on a task, with the decoder either
/// retrained or frozen.
pub fn evaluate(
    cfg: &ToyEncoderConfig,
    weights: &WeightMap,
    task: &ToyTask,
    mode: ProbeMode<'_>,
    ridge_penalty: f64,
) -> Result<f64> {
    let test_features = encoder_forward(cfg, weights, &task.x_test)?;
    let probe = match mode {
        ProbeMode::Retrain => {
            let train = encoder_features(cfg, weights, &task.x_train, &task.task_id)?;
            train_probe(&train, &task.y_train, ridge_penalty)?
        }
        ProbeMode::Frozen(p) => p.clone(),
    };
    let pred = probe.predict_rows(&test_features);
    Ok(r_squared(&pred, &task.y_test))
}

// ---------------------------------------------------------------------------
// On-disk benchmark
// ---------------------------------------------------------------------------

/// Everything needed to regenerate and load a benchmark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub seed: u64,
    pub tasks: usize,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub ridge_penalty: f64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            seed: 2,
            tasks: 3,
            input_dim: 5,
            hidden_dims: vec![20, 10],
            n_train: 320,
            n_test: 128,
            finetune_steps: 2400,
            finetune_lr: 0.3,
            ridge_penalty: DEFAULT_RIDGE_PENALTY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub task_id: String,
    pub seed: u64,
    /// Fine-tuned encoder checkpoint, relative to the manifest.
    pub checkpoint: String,
    /// Task data container (x_train/y_train/x_test/y_test), relative.
    pub data: String,
}

/// The manifest binds seeds to artifacts so a bench directory is
/// self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub params: BenchParams,
    pub encoder: ToyEncoderConfig,
    pub base_checkpoint: String,
    pub tasks: Vec<ManifestTask>,
}

fn task_data_map(task: &ToyTask) -> Result<WeightMap> {
    let mut map = WeightMap::new();
    map.insert("x_train", task.x_train.clone())?;
    map.insert("y_train", Tensor::new(vec![task.y_train.len()], task.y_train.clone())?)?;
    map.insert("x_test", task.x_test.clone())?;
    map.insert("y_test", Tensor::new(vec![task.y_test.len()], task.y_test.clone())?)?;
    Ok(map)
}

fn task_from_data_map(task_id: &str, seed: u64, map: &WeightMap) -> Result<ToyTask> {
    let get = |name: &str| -> Result<&Tensor> {
        map.get(name)
            .ok_or_else(|| Error::Format(format!("task data is missing tensor '{name}'")))
    };
    Ok(ToyTask {
        task_id: task_id.to_string(),
        x_train: get("x_train")?.clone(),
        y_train: get("y_train")?.data().to_vec(),
        x_test: get("x_test")?.clone(),
        y_test: get("y_test")?.data().to_vec(),
        seed,
    })
}

/// Generate the benchmark: base checkpoint, per-task fine-tuned checkpoints
/// and data files, plus `manifest.json`, all under `out_dir`.
pub fn generate_bench(params: &BenchParams, out_dir: &Path) -> Result<BenchManifest> {
    let encoder = ToyEncoderConfig::new(params.input_dim, params.hidden_dims.clone())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let base = encoder.init_weights(params.seed)?;
    save_checkpoint(&base, out_dir.join("base.mkt"))?;

    let tasks = make_tasks(
        params.seed,
        params.tasks,
        params.input_dim,
        params.n_train,
        params.n_test,
    )?;
    let mut manifest_tasks = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let (finetuned, _trace) = finetune(
            &encoder,
            &base,
            task,
            params.finetune_steps,
            params.finetune_lr,
            task.seed,
        )?;
        let checkpoint = format!("{}.mkt", task.task_id);
        let data = format!("{}_data.mkt", task.task_id);
        save_checkpoint(&finetuned, out_dir.join(&checkpoint))?;
        save_checkpoint(&task_data_map(task)?, out_dir.join(&data))?;
        manifest_tasks.push(ManifestTask {
            task_id: task.task_id.clone(),
            seed: task.seed,
            checkpoint,
            data,
        });
    }

    let manifest = BenchManifest {
        params: params.clone(),
        encoder,
        base_checkpoint: "base.mkt".to_string(),
        tasks: manifest_tasks,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fsutil::write_atomic(&out_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// A bench loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedBench {
    pub manifest: BenchManifest,
    pub dir: PathBuf,
    pub base: WeightMap,
    /// (task_id, fine-tuned weights), in manifest order.
    pub finetuned: Vec<(String, WeightMap)>,
    pub tasks: Vec<ToyTask>,
}

impl LoadedBench {
    pub fn task_vectors(&self) -> Result<Vec<TaskVector>> {
        self.finetuned
            .iter()
            .map(|(id, weights)| compute_task_vector(&self.base, weights, id.clone()))
            .collect()
    }

    pub fn task(&self, task_id: &str) -> Result<&ToyTask> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{task_id}'")))
    }

    pub fn checkpoint_path(&self, task_id: &str) -> Result<PathBuf> {
        let entry = self
            .manifest
            .tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{task_id}'")))?;
        Ok(self.dir.join(&entry.checkpoint))
    }
}

/// Load a bench from its manifest path.
pub fn load_bench(manifest_path: &Path) -> Result<LoadedBench> {
    let bytes = fsutil::read_bytes(manifest_path)?;
    let manifest: BenchManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("manifest JSON: {e}")))?;
    let dir = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let base = load_checkpoint(dir.join(&manifest.base_checkpoint))?;
    manifest.encoder.check_schema(&base)?;

    let mut finetuned = Vec::with_capacity(manifest.tasks.len());
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let weights = load_checkpoint(dir.join(&entry.checkpoint))?;
        manifest.encoder.check_schema(&weights)?;
        let data = load_checkpoint(dir.join(&entry.data))?;
        tasks.push(task_from_data_map(&entry.task_id, entry.seed, &data)?);
        finetuned.push((entry.task_id.clone(), weights));
    }
    Ok(LoadedBench {
        manifest,
        dir,
        base,
        finetuned,
        tasks,
    })
}
