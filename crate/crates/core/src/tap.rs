//! The task alignment proxy.
//!
//! TAP for a task is the mean feature dissimilarity between a merged encoder
//! and that task's fine-tuned encoder over N unlabeled samples; the overall
//! TAP averages over tasks. Hyperparameter selection picks the candidate
//! with the minimum average TAP.
//!
//! Feature matrices travel in a small binary container:
//!
//! ```text
//! bytes 0..4   magic "FTS1"
//! bytes 4..8   u32 LE sample count N
//! bytes 8..12  u32 LE feature dim D
//! bytes 12..20 u64 LE sample digest
//! payload      N*D row-major little-endian f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::merge::MergeSpec;
use crate::tensor::{Fnv64, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"FTS1";

/// Default dissimilarity metric.
pub const DEFAULT_METRIC: Metric = Metric::L2;
/// Default number of samples per task.
pub const DEFAULT_SAMPLE_COUNT: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    #[default]
    L2,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::L1, Metric::L2, Metric::Cosine];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Metric> {
        Metric::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown metric '{s}'")))
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a feature matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    ToyEncoder,
    ExternalProvider,
}

/// An N x D matrix of encoder output features for one task's sample set.
///
/// Two feature sets are comparable iff task id, sample count, feature
/// dimension, and sample digest all match.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub task_id: String,
    matrix: Tensor,
    pub source: FeatureOrigin,
    pub sample_digest: u64,
}

impl FeatureSet {
    pub fn new(
        task_id: impl Into<String>,
        matrix: Tensor,
        source: FeatureOrigin,
        sample_digest: u64,
    ) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be rank 2, got shape {:?}",
                matrix.shape()
            )));
        }
        if let Some(index) = matrix.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: "features".to_string(),
                index,
            });
        }
        Ok(FeatureSet {
            task_id: task_id.into(),
            matrix,
            source,
            sample_digest,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    fn check_comparable(&self, other: &FeatureSet) -> Result<()> {
        if self.task_id != other.task_id
            || self.n_samples() != other.n_samples()
            || self.dim() != other.dim()
            || self.sample_digest != other.sample_digest
        {
            return Err(Error::InvalidInput(format!(
                "feature sets are not comparable: ('{}', {}x{}, digest {:016x}) vs ('{}', {}x{}, digest {:016x})",
                self.task_id,
                self.n_samples(),
                self.dim(),
                self.sample_digest,
                other.task_id,
                other.n_samples(),
                other.dim(),
                other.sample_digest,
            )));
        }
        Ok(())
    }

    /// Serialize to FTS1 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.matrix.numel() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.n_samples() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.sample_digest.to_le_bytes());
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_atomic(path.as_ref(), &self.to_bytes())
    }

    /// Parse FTS1 bytes. Task id and origin are not stored in the file and
    /// must be supplied by the caller.
    pub fn from_bytes(
        bytes: &[u8],
        task_id: impl Into<String>,
        source: FeatureOrigin,
    ) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Format("feature file shorter than header".to_string()));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::Format(format!(
                "bad feature magic {:?}, expected \"FTS1\"",
                &bytes[0..4]
            )));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let digest = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if n == 0 || d == 0 {
            return Err(Error::Format(format!("feature matrix {n}x{d} is degenerate")));
        }
        let expected = 20 + n * d * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "feature payload is {} bytes, {n}x{d} needs {}",
                bytes.len() - 20,
                expected - 20
            )));
        }
        let data: Vec<f32> = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureSet::new(task_id, Tensor::new(vec![n, d], data)?, source, digest)
    }

    pub fn load(
        path: impl AsRef<Path>,
        task_id: impl Into<String>,
        source: FeatureOrigin,
    ) -> Result<Self> {
        let bytes = fsutil::read_bytes(path.as_ref())?;
        FeatureSet::from_bytes(&bytes, task_id, source)
    }
}

/// Dissimilarity between two feature vectors.
///
/// l1 and l2 are the usual distances; cosine is 1 minus cosine similarity
/// (clamped to [-1, 1]), which errors on a zero vector.
pub fn dissimilarity(f: &[f32], g: &[f32], metric: Metric) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::InvalidInput(format!(
            "dissimilarity on vectors of lengths {} and {}",
            f.len(),
            g.len()
        )));
    }
    // d(x, x) is identically zero for every metric.
    if f == g {
        return Ok(0.0);
    }
    match metric {
        Metric::L1 => Ok(f
            .iter()
            .zip(g)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .sum()),
        Metric::L2 => Ok(f
            .iter()
            .zip(g)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            .sqrt()),
        Metric::Cosine => {
            let mut dot = 0.0f64;
            let mut nf = 0.0f64;
            let mut ng = 0.0f64;
            for (&a, &b) in f.iter().zip(g) {
                let (a, b) = (f64::from(a), f64::from(b));
                dot += a * b;
                nf += a * a;
                ng += b * b;
            }
            if nf == 0.0 || ng == 0.0 {
                return Err(Error::Numerical(
                    "cosine dissimilarity on a zero vector".to_string(),
                ));
            }
            let sim = (dot / (nf.sqrt() * ng.sqrt())).clamp(-1.0, 1.0);
            Ok(1.0 - sim)
        }
    }
}

/// TAP for one task: the mean row-wise dissimilarity between the merged
/// model's features and the fine-tuned teacher's features, rows in order.
pub fn tap_task(merged: &FeatureSet, teacher: &FeatureSet, metric: Metric) -> Result<f64> {
    merged.check_comparable(teacher)?;
    let n = merged.n_samples();
    let mut sum = 0.0f64;
    for i in 0..n {
        sum += dissimilarity(merged.row(i), teacher.row(i), metric)?;
    }
    Ok(sum / n as f64)
}

/// Unweighted mean of per-task TAP values in sorted task order.
pub fn tap_average(per_task: &BTreeMap<String, f64>) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::InvalidInput("tap_average on empty map".to_string()));
    }
    Ok(per_task.values().sum::<f64>() / per_task.len() as f64)
}

/// Per-task and average TAP for one merged model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapReport {
    pub metric: Metric,
    pub n_samples: usize,
    pub per_task: BTreeMap<String, f64>,
    pub average: f64,
}

impl TapReport {
    pub fn new(metric: Metric, n_samples: usize, per_task: BTreeMap<String, f64>) -> Result<Self> {
        let average = tap_average(&per_task)?;
        Ok(TapReport {
            metric,
            n_samples,
            per_task,
            average,
        })
    }
}

/// The candidate with minimal average TAP; ties go to the earliest.
pub fn select(candidates: &[(MergeSpec, TapReport)]) -> Result<&MergeSpec> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, report)) in candidates.iter().enumerate() {
        match best {
            Some((_, b)) if report.average >= b => {}
            _ => best = Some((i, report.average)),
        }
    }
    best.map(|(i, _)| &candidates[i].0)
        .ok_or_else(|| Error::InvalidInput("select on empty candidate list".to_string()))
}

/// Content digest of a rank-2 sample matrix; identifies which samples a
/// feature set was computed on.
pub fn sample_digest(samples: &Tensor) -> u64 {
    let mut h = Fnv64::new();
    h.update(&(samples.shape()[0] as u64).to_le_bytes());
    h.update(&(samples.shape().get(1).copied().unwrap_or(1) as u64).to_le_bytes());
    for v in samples.data() {
        h.update(&v.to_le_bytes());
    }
    h.finish()
}
