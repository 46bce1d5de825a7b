#![allow(dead_code)]

pub mod fd;
pub mod raster;
pub mod text_oracle;

use std::path::Path;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use report_grounding::grounding::VisionConfig;
use report_grounding::model::EncodedSample;
use report_grounding::phrase_model::PhraseModelConfig;
use report_grounding::synth::{generate_corpus, CorpusConfig};
use report_grounding::trainer::encode_samples;
use report_grounding::vocab::build_vocab;
use report_grounding::{BoundingBox, GroundingModel, GroundingSample, ModelConfig};

pub const TINY_SIZE: usize = 32;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(seed: u64, dtype: DType) -> ModelConfig {
    ModelConfig {
        phrase: PhraseModelConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            max_len: 128,
            prefix_len: 4,
        },
        vision: VisionConfig {
            image_size: TINY_SIZE,
            patch_size: 8,
            dim: 16,
            layers: 1,
            heads: 2,
            decoder_blocks: 1,
            direct_from_embedding: false,
        },
        seed,
        dtype,
    }
}

pub fn tiny_corpus(n: usize, seed: u64, dir: &Path) -> Vec<GroundingSample> {
    let config = CorpusConfig {
        n_patients: n,
        width: TINY_SIZE,
        height: TINY_SIZE,
        seed,
        ..Default::default()
    };
    generate_corpus(&config, dir).unwrap()
}

/// Tiny model plus its encoded corpus.
pub fn tiny_setup(
    n: usize,
    seed: u64,
    dtype: DType,
    dir: &Path,
) -> (GroundingModel, Vec<EncodedSample>) {
    let samples = tiny_corpus(n, seed, dir);
    let vocab = build_vocab(samples.iter().map(|s| s.report.as_str()));
    let model = GroundingModel::new(tiny_config(seed, dtype), vocab).unwrap();
    let encoded = encode_samples(&model, &samples, dir).unwrap();
    (model, encoded)
}

/// Random normalized box with sides in `[min_side, 1)`.
pub fn random_box(rng: &mut impl Rng, min_side: f64) -> BoundingBox {
    let w = rng.random_range(min_side..0.9);
    let h = rng.random_range(min_side..0.9);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BoundingBox::normalized(x, y, w, h).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
