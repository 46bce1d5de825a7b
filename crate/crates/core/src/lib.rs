//! Report grounding: read a free-text radiology report and its image, write
//! out the key finding phrase and a bounding box for it.
//!
//! A small causal language model reads an image prefix and the report, then
//! emits the phrase followed by a special `<BOX>` token. The hidden state at
//! `<BOX>` becomes a query for a patch-transformer decoder that regresses
//! the box. Both halves train jointly on a phrase cross-entropy plus a
//! smooth-L1 and GIoU box loss.
//!
//! ```no_run
//! use report_grounding::{synth, trainer, vocab, model};
//! use std::path::Path;
//!
//! let out = Path::new("corpus");
//! let samples = synth::generate_corpus(&synth::CorpusConfig::default(), out)?;
//! let vocab = vocab::build_vocab(samples.iter().map(|s| s.report.as_str()));
//! let model = model::GroundingModel::new(model::ModelConfig::default(), vocab)?;
//! let encoded = trainer::encode_samples(&model, &samples, out)?;
//! let state = trainer::fit(&model, &encoded, &encoded, &trainer::TrainConfig::default(), &Default::default())?;
//! println!("best validation mIoU {:?}", state.best_val_miou);
//! # Ok::<(), report_grounding::Error>(())
//! ```

pub mod box_math;
pub mod checkpoint;
pub mod domain;
mod error;
pub mod grounding;
pub mod image;
pub mod model;
pub mod nn;
pub mod phrase_model;
pub mod report;
pub mod synth;
pub mod text_metrics;
pub mod trainer;
pub mod vocab;

pub use box_math::{box_loss, giou, iou, BoxLossValue, DetectionScores};
pub use domain::{BoundingBox, CoordSpace, DatasetSplit, GroundingSample, Prediction};
pub use error::{Error, Result};
pub use model::{GroundingModel, ModelConfig};
pub use report::MetricsReport;
pub use text_metrics::PhraseScores;
pub use trainer::{fit, lr_at, TrainConfig, TrainState};
pub use vocab::Vocabulary;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/boxes.md")]
    mod boxes {}
    #[doc = include_str!("../../../book/src/phrase-metrics.md")]
    mod phrase_metrics {}
    #[doc = include_str!("../../../book/src/box-token.md")]
    mod box_token {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
