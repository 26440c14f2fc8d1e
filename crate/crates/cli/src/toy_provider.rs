//! Reference implementation of the external feature-provider protocol.
//!
//! ```text
//! tapmerge-toy-provider <checkpoint_path> <samples_path> <output_features_path>
//! ```
//!
//! Loads a toy-encoder checkpoint (the architecture is inferred from the
//! parameter shapes), reads the sample matrix from tensor "x" of the samples
//! container, runs the forward pass, and writes an FTS1 feature file whose
//! sample digest is the content hash of the samples. Any failure exits
//! nonzero, which aborts the sweep candidate.

use std::process::ExitCode;

use tapmerge::error::Error;
use tapmerge::tap::{sample_digest, FeatureOrigin, FeatureSet};
use tapmerge::tensor::load_checkpoint;
use tapmerge::toy::{encoder_forward, ToyEncoderConfig};

fn run(checkpoint: &str, samples: &str, out: &str) -> Result<(), Error> {
    let weights = load_checkpoint(checkpoint)?;
    let cfg = ToyEncoderConfig::from_schema(&weights)?;
    let samples_map = load_checkpoint(samples)?;
    let x = samples_map
        .get("x")
        .ok_or_else(|| Error::Format("samples container has no tensor 'x'".to_string()))?;
    let features = encoder_forward(&cfg, &weights, x)?;
    let feature_set = FeatureSet::new(
        "provider",
        features,
        FeatureOrigin::ExternalProvider,
        sample_digest(x),
    )?;
    feature_set.save(out)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 4 {
        eprintln!("usage: tapmerge-toy-provider <checkpoint> <samples> <out_features>");
        return ExitCode::from(1);
    }
    match run(&args[1], &args[2], &args[3]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tapmerge-toy-provider: {e}");
            ExitCode::from(1)
        }
    }
}
