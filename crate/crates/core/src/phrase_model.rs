//! Image-prefixed causal transformer that reads a report and writes the key
//! phrase followed by `<BOX>`. The last-layer hidden state at the `<BOX>`
//! position is the box embedding handed to the vision decoder.

use candle_core::{DType, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, log_softmax_last, LayerNorm, ParamStore, SelfAttentionBlock};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhraseModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Number of image tokens placed before the text.
    pub prefix_len: usize,
}

impl Default for PhraseModelConfig {
    fn default() -> Self {
        PhraseModelConfig {
            hidden: 128,
            layers: 4,
            heads: 4,
            max_len: 256,
            prefix_len: 16,
        }
    }
}

impl PhraseModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.hidden, self.layers, self.heads, self.max_len, self.prefix_len].contains(&0) {
            return Err(Error::Config("phrase model sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.prefix_len >= self.max_len {
            return Err(Error::Config("prefix does not fit in max_len".into()));
        }
        Ok(())
    }
}

/// Result of greedy decoding.
#[derive(Debug, Clone)]
pub struct GenerationOutput {
    /// Tokens emitted before the stop token.
    pub phrase_tokens: Vec<u32>,
    /// Hidden state at the emitted `<BOX>`, shape `(hidden,)`.
    pub e_box: Option<Tensor>,
    /// Index of `<BOX>` in the text sequence (image prefix excluded).
    pub box_token_position: Option<usize>,
}

/// Teacher-forcing layout: `BOS report EOS phrase <BOX>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub input_ids: Vec<u32>,
    /// `targets[i]` is the token expected after position `i`.
    pub targets: Vec<u32>,
    /// True at positions whose target is a phrase token or `<BOX>`.
    pub loss_mask: Vec<bool>,
    pub box_position: usize,
}

pub fn teacher_forced(vocab: &Vocabulary, report_ids: &[u32], phrase_ids: &[u32]) -> Result<TeacherForced> {
    let box_id = vocab.box_id().ok_or(Error::MissingBoxEmbedding)?;
    let mut input_ids = Vec::with_capacity(report_ids.len() + phrase_ids.len() + 3);
    input_ids.push(vocab.bos());
    input_ids.extend_from_slice(report_ids);
    input_ids.push(vocab.eos());
    let answer_start = input_ids.len();
    input_ids.extend_from_slice(phrase_ids);
    input_ids.push(box_id);
    let n = input_ids.len();
    let mut targets: Vec<u32> = input_ids[1..].to_vec();
    targets.push(vocab.pad());
    let loss_mask = (0..n).map(|i| i + 1 >= answer_start && i + 1 < n).collect();
    Ok(TeacherForced {
        input_ids,
        targets,
        loss_mask,
        box_position: n - 1,
    })
}

pub struct PhraseModel {
    config: PhraseModelConfig,
    vocab: Vocabulary,
    store: ParamStore,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<SelfAttentionBlock>,
    ln_f: LayerNorm,
}

impl PhraseModel {
    pub fn new(config: PhraseModelConfig, vocab: Vocabulary, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let d = config.hidden;
        let tok_emb = store.normal("lm.tok_emb", &[vocab.len(), d], 0.02)?;
        let pos_emb = store.normal("lm.pos_emb", &[config.max_len, d], 0.02)?;
        let blocks = (0..config.layers)
            .map(|i| SelfAttentionBlock::new(&mut store, &format!("lm.block{i}"), d, config.heads, config.layers))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "lm.ln_f", d)?;
        Ok(PhraseModel {
            config,
            vocab,
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &PhraseModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Adds a token. Its embedding row starts at the mean of the existing
    /// rows; all other parameters are left untouched.
    pub fn extend_vocab(&mut self, token: &str) -> Result<u32> {
        let id = self.vocab.push(token)?;
        let mean = self.tok_emb.mean_keepdim(0)?;
        let emb = Tensor::cat(&[&self.tok_emb, &mean], 0)?;
        self.tok_emb = self.store.replace("lm.tok_emb", emb)?;
        Ok(id)
    }

    /// Runs the causal stack over `[image prefix ; tokens]`.
    ///
    /// Returns logits `(L, vocab)` and post-norm last-layer hidden states
    /// `(L, hidden)` at the `L` token positions.
    pub fn forward(&self, image_features: &Tensor, token_ids: &[u32]) -> Result<(Tensor, Tensor)> {
        let (p, d) = image_features.dims2()?;
        if d != self.config.hidden {
            return Err(Error::Config(format!(
                "image features have width {d}, model expects {}",
                self.config.hidden
            )));
        }
        let len = p + token_ids.len();
        if len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        if token_ids.is_empty() {
            return Err(Error::Empty("PhraseModel::forward"));
        }
        let device = self.store.device();
        let ids = Tensor::from_vec(token_ids.to_vec(), token_ids.len(), device)?;
        let tokens = self.tok_emb.index_select(&ids, 0)?;
        let mut x = Tensor::cat(&[image_features, &tokens], 0)?;
        x = x.broadcast_add(&self.pos_emb.narrow(0, 0, len)?)?;
        let mask = causal_mask(len, self.store.dtype(), device)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let hidden = self.ln_f.forward(&x.narrow(0, p, token_ids.len())?)?;
        // Output projection shares the token embedding.
        let logits = hidden.matmul(&self.tok_emb.t()?)?;
        Ok((logits, hidden))
    }

    /// Greedy decoding after `BOS report EOS`. Stops at the first `<BOX>`,
    /// at EOS, after `max_new` tokens, or when the context is full.
    pub fn generate(&self, image_features: &Tensor, report_ids: &[u32], max_new: usize) -> Result<GenerationOutput> {
        let box_id = self.vocab.box_id();
        let mut ids = Vec::with_capacity(report_ids.len() + 2 + max_new);
        ids.push(self.vocab.bos());
        ids.extend_from_slice(report_ids);
        ids.push(self.vocab.eos());
        let prefix = image_features.dim(0)?;
        let mut out = GenerationOutput {
            phrase_tokens: Vec::new(),
            e_box: None,
            box_token_position: None,
        };
        for _ in 0..max_new {
            if prefix + ids.len() + 1 > self.config.max_len {
                break;
            }
            let (logits, _) = self.forward(image_features, &ids)?;
            let next = argmax_last_row(&logits)?;
            if Some(next) == box_id {
                ids.push(next);
                let (_, hidden) = self.forward(image_features, &ids)?;
                let pos = ids.len() - 1;
                out.e_box = Some(hidden.i(pos)?);
                out.box_token_position = Some(pos);
                break;
            }
            if next == self.vocab.eos() {
                break;
            }
            ids.push(next);
            out.phrase_tokens.push(next);
        }
        Ok(out)
    }
}

fn argmax_last_row(logits: &Tensor) -> Result<u32> {
    let n = logits.dim(0)?;
    let row: Vec<f64> = logits.i(n - 1)?.to_dtype(DType::F64)?.to_vec1()?;
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Mean cross-entropy over the masked positions.
pub fn phrase_loss(logits: &Tensor, targets: &[u32], loss_mask: &[bool]) -> Result<Tensor> {
    let n = logits.dim(0)?;
    if targets.len() != n || loss_mask.len() != n {
        return Err(Error::Config(format!(
            "phrase_loss: {n} logit rows, {} targets, {} mask entries",
            targets.len(),
            loss_mask.len()
        )));
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Empty("phrase_loss mask"));
    }
    let device = logits.device();
    let logp = log_softmax_last(logits)?;
    let idx = Tensor::from_vec(targets.to_vec(), (n, 1), device)?;
    let picked = logp.gather(&idx, D::Minus1)?.squeeze(1)?;
    let mask: Vec<f64> = loss_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, n, device)?.to_dtype(logits.dtype())?;
    Ok((picked.mul(&mask)?.sum_all()? * (-1.0 / count as f64))?)
}
