//! Decoder-only codec language model.
//!
//! One sequence is `[text prefix | semantic tokens .. S_eos | delayed AT rows]`.
//! Text rows occupy position ids `0..n` (n = valid characters; a nulled
//! prefix keeps the same length); token steps start at position id
//! `text_budget`, so a short text behaves exactly like a padded prefix whose
//! padding keys are masked out. Semantic steps embed one table row, acoustic
//! steps sum their K per-codebook rows.
//!
//! Parameter count, with d = width, f = ffn_width, dt = text width,
//! ft = text ffn width, r = adapter rank, V = embedding rows, C = characters:
//!
//! ```text
//! block(d, f)  = 2d + 4d² + 3df
//! text         = C·dt + Lt·(block(dt, ft) + 4·r·dt) + 2dt
//! projection   = dt·d + d
//! decoder      = V·d + L·block(d, f) + d
//! heads        = (d + 1)(st + 1) + K(d + 1)(at + 1)
//! ```

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_mask, incremental_mask, run_blocks, Block, KvCache, Linear, ParamStore, RmsNorm,
    Rotary,
};
use crate::text::{CharVocab, TextEncoder, TextEncoderConfig};
use crate::vocab::TokenVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub text_budget: usize,
    pub st_at_budget: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            layers: 4,
            width: 256,
            ffn_width: 1024,
            heads: 4,
            max_seq: 576,
            text_budget: 64,
            st_at_budget: 512,
        }
    }

    pub fn reference() -> Self {
        Self {
            layers: 12,
            width: 1024,
            ffn_width: 4096,
            heads: 16,
            max_seq: 2560,
            text_budget: 512,
            st_at_budget: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_seq != self.text_budget + self.st_at_budget {
            return Err(Error::InvalidConfig(format!(
                "max_seq {} != text_budget {} + st_at_budget {}",
                self.max_seq, self.text_budget, self.st_at_budget
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if (self.width / self.heads) % 2 != 0 {
            return Err(Error::InvalidConfig("head dimension must be even".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("at least one layer".into()));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub vocab: TokenVocabulary,
    pub text: TextEncoderConfig,
}

impl Default for ModelConfig {
    /// Desk model over 4 codebooks.
    fn default() -> Self {
        Self::desk(TokenVocabulary {
            num_codebooks: 4,
            ..Default::default()
        })
    }
}

impl ModelConfig {
    /// Desk-scale model; the text encoder shares the decoder width.
    pub fn desk(vocab: TokenVocabulary) -> Self {
        let backbone = BackboneConfig::desk();
        Self {
            backbone,
            vocab,
            text: TextEncoderConfig {
                width: backbone.width,
                layers: 2,
                heads: backbone.heads,
                ffn_width: backbone.ffn_width,
                adapter_rank: Some(16),
                adapter_alpha: 16.0,
            },
        }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn micro(vocab: TokenVocabulary) -> Self {
        let backbone = BackboneConfig {
            layers: 2,
            width: 16,
            ffn_width: 32,
            heads: 2,
            max_seq: 96,
            text_budget: 16,
            st_at_budget: 80,
        };
        Self {
            backbone,
            vocab,
            text: TextEncoderConfig {
                width: 16,
                layers: 2,
                heads: 2,
                ffn_width: 32,
                adapter_rank: Some(4),
                adapter_alpha: 4.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.vocab.check()?;
        if self.text.heads == 0 || self.text.width % self.text.heads != 0 {
            return Err(Error::InvalidConfig("text width not divisible by heads".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count (see the module docs).
    pub fn param_count(&self, chars: usize) -> usize {
        let block = |d: usize, f: usize| 2 * d + 4 * d * d + 3 * d * f;
        let b = &self.backbone;
        let t = &self.text;
        let d = b.width;
        let dt = t.width;
        let adapters = t.adapter_rank.map_or(0, |r| 4 * r * dt);
        let text = chars * dt + t.layers * (block(dt, t.ffn_width) + adapters) + 2 * dt;
        let projection = dt * d + d;
        let decoder = self.vocab.embedding_rows() * d + b.layers * block(d, b.ffn_width) + d;
        let heads = (d + 1) * self.vocab.st_head_size()
            + self.vocab.num_codebooks * (d + 1) * self.vocab.at_head_size();
        text + projection + decoder + heads
    }
}

/// One token step after the text prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenStep {
    /// A semantic-space id (data, `S_eos`, `NULL_COND` or `PAD`).
    St(u32),
    /// One delayed row: K acoustic-space ids.
    At(Vec<u32>),
}

/// Payload for [`CodecLm::embed_step`].
pub enum StepPayload<'a> {
    /// One text-encoding vector, [d_txt].
    Text(&'a Tensor),
    St(u32),
    At(&'a [u32]),
}

/// A full decoder input: text rows [n, d_txt] followed by token steps.
#[derive(Clone)]
pub struct DecoderSequence {
    pub text: Tensor,
    pub steps: Vec<TokenStep>,
}

impl DecoderSequence {
    pub fn text_len(&self) -> usize {
        self.text.dim(0).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.text_len() + self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits {
    pub st_logits: Option<Vec<f32>>,
    pub at_logits: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    St,
    At,
}

pub struct CodecLm {
    cfg: ModelConfig,
    store: ParamStore,
    text: TextEncoder,
    text_proj: Linear,
    embedding: Tensor,
    blocks: Vec<Block>,
    norm: RmsNorm,
    st_head: Linear,
    at_head: Linear,
    rotary: Rotary,
}

impl CodecLm {
    pub fn new(cfg: ModelConfig, chars: CharVocab, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let b = cfg.backbone;
        let text = TextEncoder::new(&mut store, cfg.text, chars, b.text_budget)?;
        let text_proj = Linear::new(&mut store, "text_proj", cfg.text.width, b.width, true)?;
        let embedding = store.normal("embedding", &[cfg.vocab.embedding_rows(), b.width], 1.0)?;
        let blocks = (0..b.layers)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), b.width, b.ffn_width, b.heads, None))
            .collect::<Result<Vec<_>>>()?;
        let norm = RmsNorm::new(&mut store, "norm", b.width)?;
        let st_head = Linear::new(&mut store, "st_head", b.width, cfg.vocab.st_head_size(), true)?;
        let at_head = Linear::new(
            &mut store,
            "at_head",
            b.width,
            cfg.vocab.num_codebooks * cfg.vocab.at_head_size(),
            true,
        )?;
        let rotary = Rotary::new(b.width / b.heads, b.max_seq, dtype, store.device())?;
        Ok(Self {
            cfg,
            store,
            text,
            text_proj,
            embedding,
            blocks,
            norm,
            st_head,
            at_head,
            rotary,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &TokenVocabulary {
        &self.cfg.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn text_encoder_mut(&mut self) -> &mut TextEncoder {
        &mut self.text
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn step_rows(&self, step: &TokenStep) -> Result<Vec<usize>> {
        let vocab = &self.cfg.vocab;
        match step {
            TokenStep::St(id) => Ok(vec![vocab.st_row(*id)?]),
            TokenStep::At(row) => {
                if row.len() != vocab.num_codebooks {
                    return Err(Error::DimensionMismatch(format!(
                        "acoustic step has {} ids, expected {}",
                        row.len(),
                        vocab.num_codebooks
                    )));
                }
                row.iter()
                    .enumerate()
                    .map(|(k, &id)| vocab.at_row(k, id))
                    .collect()
            }
        }
    }

    /// Embeds token steps, [n, width].
    pub fn embed_tokens(&self, steps: &[TokenStep]) -> Result<Tensor> {
        let k = self.cfg.vocab.num_codebooks;
        let width = self.cfg.backbone.width;
        let n = steps.len();
        let mut rows = Vec::with_capacity(n * k);
        let mut weights = Vec::with_capacity(n * k);
        for step in steps {
            let r = self.step_rows(step)?;
            for slot in 0..k {
                match r.get(slot) {
                    Some(&row) => {
                        rows.push(row as u32);
                        weights.push(1f32);
                    }
                    None => {
                        rows.push(0);
                        weights.push(0f32);
                    }
                }
            }
        }
        if n == 0 {
            return Ok(Tensor::zeros((0, width), self.dtype(), self.device())?);
        }
        let idx = Tensor::from_vec(rows, n * k, self.device())?;
        let w = Tensor::from_vec(weights, (n * k, 1), self.device())?.to_dtype(self.dtype())?;
        let gathered = self.embedding.index_select(&idx, 0)?.broadcast_mul(&w)?;
        Ok(gathered.reshape((n, k, width))?.sum(1)?)
    }

    /// Projects text-encoding rows [n, d_txt] to model width.
    pub fn embed_text(&self, rows: &Tensor) -> Result<Tensor> {
        self.text_proj.forward(rows)
    }

    /// Model-width input vector for a single step.
    pub fn embed_step(&self, payload: StepPayload<'_>) -> Result<Tensor> {
        match payload {
            StepPayload::Text(v) => {
                if v.dims() != [self.cfg.text.width] {
                    return Err(Error::DimensionMismatch(format!(
                        "text vector {:?}, expected [{}]",
                        v.dims(),
                        self.cfg.text.width
                    )));
                }
                Ok(self.embed_text(&v.unsqueeze(0)?)?.squeeze(0)?)
            }
            StepPayload::St(id) => Ok(self.embed_tokens(&[TokenStep::St(id)])?.squeeze(0)?),
            StepPayload::At(ids) => Ok(self.embed_tokens(&[TokenStep::At(ids.to_vec())])?.squeeze(0)?),
        }
    }

    /// Runs the decoder stack over already-embedded inputs [B, L, width].
    /// `positions`: [B, L] position ids; `key_valid`: per-item key validity.
    pub fn forward(
        &self,
        embeds: &Tensor,
        positions: &Tensor,
        key_valid: &[Vec<bool>],
        causal: bool,
    ) -> Result<Tensor> {
        let (_, l, _) = embeds.dims3()?;
        if l > self.cfg.backbone.max_seq {
            return Err(Error::SequenceTooLong {
                len: l,
                max: self.cfg.backbone.max_seq,
            });
        }
        let max_pos = positions.flatten_all()?.max(0)?.to_scalar::<u32>()? as usize;
        if max_pos >= self.cfg.backbone.max_seq {
            return Err(Error::SequenceTooLong {
                len: max_pos + 1,
                max: self.cfg.backbone.max_seq,
            });
        }
        let mask = attention_mask(key_valid, causal, self.dtype(), self.device())?;
        let x = run_blocks(&self.blocks, embeds.clone(), positions, &self.rotary, Some(&mask), None)?;
        self.norm.forward(&x)
    }

    /// Position id of token step `j`.
    pub fn step_position(&self, j: usize) -> u32 {
        (self.cfg.backbone.text_budget + j) as u32
    }

    /// Embeds and runs a batch right-padded with `PAD` steps. Returns hidden
    /// states [B, L, width].
    pub fn hidden_states(&self, seqs: &[DecoderSequence]) -> Result<Tensor> {
        let l = seqs.iter().map(DecoderSequence::len).max().unwrap_or(0).max(1);
        let b = seqs.len();
        let mut items = Vec::with_capacity(b);
        let mut positions = Vec::with_capacity(b * l);
        let mut valid = Vec::with_capacity(b);
        for seq in seqs {
            let n_text = seq.text_len();
            if n_text > self.cfg.backbone.text_budget {
                return Err(Error::OverBudget {
                    component: "text",
                    needed: n_text,
                    available: self.cfg.backbone.text_budget,
                });
            }
            let mut parts = vec![self.embed_text(&seq.text)?];
            if !seq.steps.is_empty() {
                parts.push(self.embed_tokens(&seq.steps)?);
            }
            let used = seq.len();
            if used < l {
                let pad = TokenStep::St(self.cfg.vocab.st_pad());
                parts.push(self.embed_tokens(&vec![pad; l - used])?);
            }
            items.push(Tensor::cat(&parts, 0)?);
            positions.extend(0..n_text as u32);
            positions.extend((0..seq.steps.len()).map(|j| self.step_position(j)));
            positions.extend(std::iter::repeat(0).take(l - used));
            valid.push((0..l).map(|i| i < used).collect());
        }
        let embeds = Tensor::stack(&items, 0)?;
        let positions = Tensor::from_vec(positions, (b, l), self.device())?;
        self.forward(&embeds, &positions, &valid, true)
    }

    /// Semantic logits for hidden rows [N, width] -> [N, st + 1].
    pub fn st_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        self.st_head.forward(hidden)
    }

    /// Acoustic logits for hidden rows [N, width] -> [N, K, at + 1].
    pub fn at_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let n = hidden.dim(0)?;
        let v = &self.cfg.vocab;
        Ok(self
            .at_head
            .forward(hidden)?
            .reshape((n, v.num_codebooks, v.at_head_size()))?)
    }

    pub fn project_heads(&self, hidden: &Tensor, region: Region) -> Result<StepLogits> {
        let h = hidden.reshape((1, self.cfg.backbone.width))?;
        match region {
            Region::St => Ok(StepLogits {
                st_logits: Some(
                    self.st_logits(&h)?
                        .squeeze(0)?
                        .to_dtype(DType::F32)?
                        .to_vec1()?,
                ),
                at_logits: Vec::new(),
            }),
            Region::At => Ok(StepLogits {
                st_logits: None,
                at_logits: self.at_logits(&h)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec2()?,
            }),
        }
    }

    /// Starts an incremental decoding session from text rows [n, d_txt].
    pub fn start_session(&self, text: &Tensor) -> Result<DecoderSession> {
        let n = text.dim(0)?;
        let mut session = DecoderSession {
            cache: KvCache::new(self.blocks.len()),
            steps: 0,
            last_hidden: None,
        };
        let embeds = self.embed_text(text)?.unsqueeze(0)?;
        let positions: Vec<u32> = (0..n as u32).collect();
        self.advance(&mut session, embeds, positions)?;
        Ok(session)
    }

    /// Feeds token steps into a session; the hidden state of the last one is
    /// kept for the next prediction.
    pub fn feed(&self, session: &mut DecoderSession, steps: &[TokenStep]) -> Result<()> {
        if steps.is_empty() {
            return Ok(());
        }
        let embeds = self.embed_tokens(steps)?.unsqueeze(0)?;
        let positions: Vec<u32> = (0..steps.len())
            .map(|j| self.step_position(session.steps + j))
            .collect();
        self.advance(session, embeds, positions)?;
        session.steps += steps.len();
        Ok(())
    }

    fn advance(&self, session: &mut DecoderSession, embeds: Tensor, positions: Vec<u32>) -> Result<()> {
        let n = positions.len();
        if n == 0 {
            return Ok(());
        }
        if let Some(&last) = positions.last() {
            if last as usize >= self.cfg.backbone.max_seq {
                return Err(Error::SequenceTooLong {
                    len: last as usize + 1,
                    max: self.cfg.backbone.max_seq,
                });
            }
        }
        let past = session.cache.len();
        let mask = incremental_mask(past, n, self.dtype(), self.device())?;
        let positions = Tensor::from_vec(positions, (1, n), self.device())?;
        let x = run_blocks(
            &self.blocks,
            embeds,
            &positions,
            &self.rotary,
            mask.as_ref(),
            Some(&mut session.cache),
        )?;
        let h = self.norm.forward(&x.narrow(1, n - 1, 1)?)?;
        session.last_hidden = Some(h.reshape((1, self.cfg.backbone.width))?);
        Ok(())
    }
}

/// Decoding state of one sequence: its KV cache and the latest hidden state.
pub struct DecoderSession {
    cache: KvCache,
    steps: usize,
    last_hidden: Option<Tensor>,
}

impl DecoderSession {
    /// Hidden state of the most recently fed position, [1, width].
    pub fn last_hidden(&self) -> Result<&Tensor> {
        self.last_hidden
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("session has no fed positions".into()))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}
