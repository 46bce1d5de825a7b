//! Vision side of the pipeline: a patch transformer encodes the image, the
//! box embedding from the language model becomes a single query token that
//! cross-attends over the patch features, and a two-layer MLP turns the
//! final query state into a normalized box.
//!
//! The head's four raw outputs map to a box as
//!
//! ```text
//! x = s(a)    y = s(b)    w = (1 - x) s(c)    h = (1 - y) s(d)
//! ```
//!
//! with `s` the logistic function, so every output is a valid normalized
//! box. That map and its gradient live here in `f64`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::BoundingBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{CrossAttentionBlock, LayerNorm, Linear, ParamStore, SelfAttentionBlock};

/// Raw head outputs are clamped to this magnitude before the logistic map so
/// the box can never collapse to zero width in floating point.
pub const RAW_LIMIT: f64 = 30.0;

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    /// Skip the image: predict the box from the adapted box embedding alone.
    pub direct_from_embedding: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 224,
            patch_size: 16,
            dim: 192,
            layers: 4,
            heads: 4,
            decoder_blocks: 2,
            direct_from_embedding: false,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.image_size, self.patch_size, self.dim, self.layers, self.heads].contains(&0) {
            return Err(Error::Config("vision sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Patch features `z_enc`, shape `(patches, dim)`.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub z_enc: Tensor,
}

/// Fused query state `z_dec`, shape `(1, dim)`.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub z_dec: Tensor,
}

pub struct GroundingDecoder {
    config: VisionConfig,
    store: ParamStore,
    patch: Linear,
    pos: Tensor,
    enc_blocks: Vec<SelfAttentionBlock>,
    enc_ln: LayerNorm,
    query_adapter: Linear,
    dec_blocks: Vec<CrossAttentionBlock>,
    dec_ln: LayerNorm,
    head1: Linear,
    head2: Linear,
}

impl GroundingDecoder {
    /// `embed_dim` is the width of the incoming box embedding.
    pub fn new(config: VisionConfig, embed_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let (p, dim) = (config.patch_size, config.dim);
        let patch = Linear::new(&mut store, "vision.patch", p * p, dim, 0.02)?;
        let pos = store.normal("vision.pos", &[config.num_patches(), dim], 0.02)?;
        let enc_blocks = (0..config.layers)
            .map(|i| SelfAttentionBlock::new(&mut store, &format!("vision.enc{i}"), dim, config.heads, config.layers))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(&mut store, "vision.enc_ln", dim)?;
        let query_adapter = Linear::new(&mut store, "vision.query_adapter", embed_dim, dim, 0.02)?;
        let dec_blocks = (0..config.decoder_blocks)
            .map(|i| {
                CrossAttentionBlock::new(&mut store, &format!("vision.dec{i}"), dim, config.heads, config.decoder_blocks.max(1))
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(&mut store, "vision.dec_ln", dim)?;
        let head1 = Linear::new(&mut store, "vision.head1", dim, dim, 0.02)?;
        let head2 = Linear::new(&mut store, "vision.head2", dim, 4, 0.02)?;
        Ok(GroundingDecoder {
            config,
            store,
            patch,
            pos,
            enc_blocks,
            enc_ln,
            query_adapter,
            dec_blocks,
            dec_ln,
            head1,
            head2,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Standardized pixels rearranged into one row per patch, row-major over
    /// the patch grid.
    pub fn patchify(&self, img: &GrayImage) -> Result<Tensor> {
        let size = self.config.image_size;
        if img.width != size || img.height != size {
            return Err(Error::ImageSize {
                got_h: img.height,
                got_w: img.width,
                want_h: size,
                want_w: size,
            });
        }
        let p = self.config.patch_size;
        let g = self.config.grid();
        let mut data = Vec::with_capacity(size * size);
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        let v = img.get(gx * p + dx, gy * p + dy) as f64 / 255.0;
                        data.push((v - PIXEL_MEAN) / PIXEL_STD);
                    }
                }
            }
        }
        let t = Tensor::from_vec(data, (g * g, p * p), self.store.device())?;
        Ok(t.to_dtype(self.store.dtype())?)
    }

    pub fn encode_image(&self, img: &GrayImage) -> Result<VisualFeatures> {
        let patches = self.patchify(img)?;
        let mut x = self.patch.forward(&patches)?.broadcast_add(&self.pos)?;
        for block in &self.enc_blocks {
            x = block.forward(&x, None)?;
        }
        Ok(VisualFeatures {
            z_enc: self.enc_ln.forward(&x)?,
        })
    }

    fn adapt(&self, e_box: &Tensor) -> Result<Tensor> {
        let e = e_box.reshape((1, e_box.elem_count()))?;
        self.query_adapter.forward(&e)
    }

    /// The box embedding, as one query token, attends over the patch
    /// features through every decoder block.
    pub fn decode_box_state(&self, features: &VisualFeatures, e_box: Option<&Tensor>) -> Result<DecoderState> {
        let e_box = e_box.ok_or(Error::MissingBoxEmbedding)?;
        let mut q = self.adapt(e_box)?;
        for block in &self.dec_blocks {
            q = block.forward(&q, &features.z_enc)?;
        }
        Ok(DecoderState {
            z_dec: self.dec_ln.forward(&q)?,
        })
    }

    /// Raw four-vector from the box head, shape `(4,)`.
    pub fn head_raw(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.head1.forward(z)?.gelu()?;
        Ok(self.head2.forward(&h)?.flatten_all()?)
    }

    pub fn predict_box(&self, state: &DecoderState) -> Result<BoundingBox> {
        box_from_raw(&raw_to_array(&self.head_raw(&state.z_dec)?)?)
    }

    /// Raw head output for an image and box embedding, following the
    /// configured path.
    pub fn raw_box(&self, features: Option<&VisualFeatures>, e_box: &Tensor) -> Result<Tensor> {
        if self.config.direct_from_embedding {
            return self.head_raw(&self.adapt(e_box)?);
        }
        let features = features.ok_or_else(|| Error::Config("full grounding path needs image features".into()))?;
        let state = self.decode_box_state(features, Some(e_box))?;
        self.head_raw(&state.z_dec)
    }

    /// Image plus box embedding to a normalized box.
    pub fn ground(&self, img: &GrayImage, e_box: &Tensor) -> Result<BoundingBox> {
        let features = if self.config.direct_from_embedding {
            None
        } else {
            Some(self.encode_image(img)?)
        };
        box_from_raw(&raw_to_array(&self.raw_box(features.as_ref(), e_box)?)?)
    }
}

pub fn raw_to_array(raw: &Tensor) -> Result<[f64; 4]> {
    let v: Vec<f64> = raw.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    v.try_into()
        .map_err(|v: Vec<f64>| Error::Config(format!("box head produced {} values", v.len())))
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Maps raw head outputs to a normalized box; see the module docs.
pub fn box_from_raw(raw: &[f64; 4]) -> Result<BoundingBox> {
    let s = raw.map(|r| logistic(r.clamp(-RAW_LIMIT, RAW_LIMIT)));
    let x = s[0];
    let y = s[1];
    BoundingBox::normalized(x, y, (1.0 - x) * s[2], (1.0 - y) * s[3])
}

/// Chains a gradient with respect to `(x, y, w, h)` back to the raw head
/// outputs.
pub fn raw_gradient(raw: &[f64; 4], d_box: &[f64; 4]) -> [f64; 4] {
    let s = raw.map(|r| logistic(r.clamp(-RAW_LIMIT, RAW_LIMIT)));
    let ds: [f64; 4] = std::array::from_fn(|i| {
        if raw[i].abs() > RAW_LIMIT {
            0.0
        } else {
            s[i] * (1.0 - s[i])
        }
    });
    // w = (1 - x) s2: dw/da = -ds0 s2, dw/dc = (1 - x) ds2; same for h.
    [
        (d_box[0] - d_box[2] * s[2]) * ds[0],
        (d_box[1] - d_box[3] * s[3]) * ds[1],
        d_box[2] * (1.0 - s[0]) * ds[2],
        d_box[3] * (1.0 - s[1]) * ds[3],
    ]
}
