//! The end-to-end grounding model: vision encoder, image-prefix bridge into
//! the language model, and the `<BOX>`-conditioned box decoder.

use candle_core::{DType, IndexOp, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, Prediction};
use crate::error::{Error, Result};
use crate::grounding::{box_from_raw, raw_to_array, GroundingDecoder, VisionConfig, VisualFeatures};
use crate::image::GrayImage;
use crate::nn::{Linear, ParamStore};
use crate::phrase_model::{phrase_loss, teacher_forced, GenerationOutput, PhraseModel, PhraseModelConfig};
use crate::vocab::Vocabulary;

/// Default cap on generated phrase tokens.
pub const MAX_NEW_TOKENS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub phrase: PhraseModelConfig,
    pub vision: VisionConfig,
    pub seed: u64,
    #[serde(with = "dtype_name")]
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            phrase: PhraseModelConfig::default(),
            vision: VisionConfig::default(),
            seed: 0,
            dtype: DType::F32,
        }
    }
}

mod dtype_name {
    use candle_core::DType;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &DType, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(d.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DType, D::Error> {
        let name = String::deserialize(d)?;
        match name.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(serde::de::Error::custom(format!("unsupported dtype {other}"))),
        }
    }
}

/// Average-pools the patch grid to `prefix_len` cells and projects each to
/// the language model width.
pub struct PrefixAdapter {
    store: ParamStore,
    pool: Tensor,
    proj: Linear,
}

/// Row-stochastic `(side*side, grid*grid)` matrix of adaptive average
/// pooling: output cell `i` covers input rows `floor(i*g/s)..ceil((i+1)*g/s)`.
fn pooling_matrix(grid: usize, side: usize) -> Vec<f64> {
    let bins: Vec<(usize, usize)> = (0..side)
        .map(|i| (i * grid / side, ((i + 1) * grid).div_ceil(side)))
        .collect();
    let mut m = vec![0.0; side * side * grid * grid];
    for (oy, &(y0, y1)) in bins.iter().enumerate() {
        for (ox, &(x0, x1)) in bins.iter().enumerate() {
            let row = oy * side + ox;
            let weight = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    m[row * grid * grid + y * grid + x] = weight;
                }
            }
        }
    }
    m
}

impl PrefixAdapter {
    fn new(vision: &VisionConfig, phrase: &PhraseModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let side = (phrase.prefix_len as f64).sqrt().round() as usize;
        if side * side != phrase.prefix_len || side > vision.grid() {
            return Err(Error::Config(format!(
                "prefix_len {} must be a square no larger than the {}x{} patch grid",
                phrase.prefix_len,
                vision.grid(),
                vision.grid()
            )));
        }
        let mut store = ParamStore::new(seed, dtype);
        let g = vision.grid();
        let pool = Tensor::from_vec(pooling_matrix(g, side), (side * side, g * g), store.device())?.to_dtype(dtype)?;
        let proj = Linear::new(&mut store, "bridge.proj", vision.dim, phrase.hidden, 0.02)?;
        Ok(PrefixAdapter { store, pool, proj })
    }

    pub fn forward(&self, features: &VisualFeatures) -> Result<Tensor> {
        self.proj.forward(&self.pool.matmul(&features.z_enc)?)
    }
}

/// Tensors produced by one teacher-forced pass over a sample.
pub struct TrainingPass {
    /// Scalar phrase loss.
    pub phrase_loss: Tensor,
    /// Raw box head output `(4,)`.
    pub raw_box: Tensor,
    /// Box embedding at the ground-truth `<BOX>` slot.
    pub e_box: Tensor,
}

/// A sample with its decoded image and token ids, ready for the model.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub id: String,
    pub image: GrayImage,
    pub report_ids: Vec<u32>,
    pub phrase_ids: Vec<u32>,
    /// Normalized ground-truth box.
    pub target: BoundingBox,
}

pub struct GroundingModel {
    config: ModelConfig,
    lm: PhraseModel,
    vision: GroundingDecoder,
    bridge: PrefixAdapter,
}

impl GroundingModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        let s = config.seed;
        let vision = GroundingDecoder::new(config.vision, config.phrase.hidden, s.wrapping_mul(3).wrapping_add(1), config.dtype)?;
        let bridge = PrefixAdapter::new(&config.vision, &config.phrase, s.wrapping_mul(3).wrapping_add(2), config.dtype)?;
        let lm = PhraseModel::new(config.phrase, vocab, s.wrapping_mul(3).wrapping_add(3), config.dtype)?;
        Ok(GroundingModel {
            config,
            lm,
            vision,
            bridge,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.lm.vocab()
    }

    pub fn phrase_model(&self) -> &PhraseModel {
        &self.lm
    }

    pub fn decoder(&self) -> &GroundingDecoder {
        &self.vision
    }

    pub fn extend_vocab(&mut self, token: &str) -> Result<u32> {
        self.lm.extend_vocab(token)
    }

    /// Every trainable tensor, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = [self.lm.store(), self.vision.store(), &self.bridge.store]
            .into_iter()
            .flat_map(|s| s.vars().iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub(crate) fn stores(&self) -> [&ParamStore; 3] {
        [self.lm.store(), self.vision.store(), &self.bridge.store]
    }

    pub fn encode(&self, id: &str, image: GrayImage, report: &str, phrase: &str, target: BoundingBox) -> EncodedSample {
        EncodedSample {
            id: id.to_string(),
            image,
            report_ids: self.vocab().encode(report),
            phrase_ids: self.vocab().encode(phrase),
            target,
        }
    }

    pub fn image_prefix(&self, features: &VisualFeatures) -> Result<Tensor> {
        self.bridge.forward(features)
    }

    /// Teacher-forced pass: phrase loss over `phrase <BOX>` and the raw box
    /// from the embedding at the ground-truth `<BOX>` slot.
    pub fn training_pass(&self, sample: &EncodedSample) -> Result<TrainingPass> {
        let features = self.vision.encode_image(&sample.image)?;
        let prefix = self.bridge.forward(&features)?;
        let tf = teacher_forced(self.vocab(), &sample.report_ids, &sample.phrase_ids)?;
        let (logits, hidden) = self.lm.forward(&prefix, &tf.input_ids)?;
        let loss = phrase_loss(&logits, &tf.targets, &tf.loss_mask)?;
        let e_box = hidden.i(tf.box_position)?;
        let raw_box = self.vision.raw_box(Some(&features), &e_box)?;
        Ok(TrainingPass {
            phrase_loss: loss,
            raw_box,
            e_box,
        })
    }

    pub fn generate(&self, image: &GrayImage, report_ids: &[u32], max_new: usize) -> Result<(VisualFeatures, GenerationOutput)> {
        let features = self.vision.encode_image(image)?;
        let prefix = self.bridge.forward(&features)?;
        let out = self.lm.generate(&prefix, report_ids, max_new)?;
        Ok((features, out))
    }

    /// Report and image in, phrase and box out. No box when `<BOX>` was
    /// never generated.
    pub fn predict(&self, sample: &EncodedSample) -> Result<Prediction> {
        let (features, gen) = self.generate(&sample.image, &sample.report_ids, MAX_NEW_TOKENS)?;
        let bbox = match &gen.e_box {
            Some(e_box) => {
                let raw = self.vision.raw_box(Some(&features), e_box)?;
                Some(box_from_raw(&raw_to_array(&raw)?)?)
            }
            None => None,
        };
        Ok(Prediction {
            sample_id: sample.id.clone(),
            phrase: self.vocab().decode(&gen.phrase_tokens),
            bbox,
        })
    }
}
