//! Character-level text encoder that produces the conditioning prefix.
//!
//! Text is normalised by trimming and collapsing every whitespace run to a
//! single space, then mapped character by character. Id 0 is padding, id 1
//! is the unknown character, and the alphabet follows in sorted order.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention_mask, run_blocks, AdapterSpec, Block, Linear, ParamStore, RmsNorm, Rotary};

pub const CHAR_PAD: u32 = 0;
pub const CHAR_UNK: u32 = 1;

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    alphabet: Vec<char>,
}

impl CharVocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut alphabet: Vec<char> = chars.into_iter().collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        Self { alphabet }
    }

    /// Alphabet covering every character of `texts` after normalisation.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(texts.into_iter().flat_map(|t| normalize_text(t).chars().collect::<Vec<_>>()))
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.alphabet.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> u32 {
        match self.alphabet.binary_search(&c) {
            Ok(i) => i as u32 + 2,
            Err(_) => CHAR_UNK,
        }
    }

    /// Normalises and maps `text`, enforcing the slot budget.
    pub fn encode(&self, text: &str, budget: usize) -> Result<Vec<u32>> {
        let norm = normalize_text(text);
        if norm.is_empty() {
            return Err(Error::EmptyText);
        }
        let ids: Vec<u32> = norm.chars().map(|c| self.id(c)).collect();
        if ids.len() > budget {
            return Err(Error::TextOverBudget {
                len: ids.len(),
                budget,
            });
        }
        Ok(ids)
    }
}

/// A low-rank additive update `(alpha / rank) * up(down(x))` on a projection.
#[derive(Clone)]
pub struct LowRankAdapter {
    down: Linear,
    up: Linear,
    rank: usize,
    alpha: f64,
}

impl LowRankAdapter {
    /// `up` starts at zero so a fresh adapter leaves its projection unchanged.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        spec: AdapterSpec,
    ) -> Result<Self> {
        if spec.rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be positive".into()));
        }
        Ok(Self {
            down: Linear::new(store, &format!("{name}.down"), in_dim, spec.rank, false)?,
            up: Linear::zeros(store, &format!("{name}.up"), spec.rank, out_dim)?,
            rank: spec.rank,
            alpha: spec.alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.down.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.up.out_dim()
    }

    pub fn apply(&self, base_output: &Tensor, input: &Tensor) -> Result<Tensor> {
        let update = self.up.forward(&self.down.forward(input)?)?;
        Ok((base_output + (update * self.scale())?)?)
    }
}

/// Adds the adapter's update for `input` to `base_output`.
pub fn apply_adapter(base_output: &Tensor, adapter: &LowRankAdapter, input: &Tensor) -> Result<Tensor> {
    let in_dim = input.dims().last().copied().unwrap_or(0);
    let out_dim = base_output.dims().last().copied().unwrap_or(0);
    if in_dim != adapter.in_dim() || out_dim != adapter.out_dim() {
        return Err(Error::DimensionMismatch(format!(
            "adapter maps {} -> {}, got input {in_dim} and base output {out_dim}",
            adapter.in_dim(),
            adapter.out_dim()
        )));
    }
    let lead_in = &input.dims()[..input.rank() - 1];
    let lead_out = &base_output.dims()[..base_output.rank() - 1];
    if lead_in != lead_out {
        return Err(Error::DimensionMismatch(format!(
            "input batch shape {lead_in:?} differs from output batch shape {lead_out:?}"
        )));
    }
    adapter.apply(base_output, input)
}

/// Continuous text conditioning, padded to the slot budget.
#[derive(Clone)]
pub struct TextEncoding {
    vectors: Tensor,
    mask: Vec<bool>,
}

impl TextEncoding {
    pub fn new(vectors: Tensor, mask: Vec<bool>) -> Result<Self> {
        if vectors.dim(0)? != mask.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vectors with a mask of {}",
                vectors.dim(0)?,
                mask.len()
            )));
        }
        Ok(Self { vectors, mask })
    }

    /// [padded_length, d_txt]; padded rows are zero.
    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn padded_length(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The valid rows, [m, d_txt].
    pub fn valid_vectors(&self) -> Result<Tensor> {
        Ok(self.vectors.narrow(0, 0, self.valid_len())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub adapter_rank: Option<usize>,
    pub adapter_alpha: f64,
}

impl TextEncoderConfig {
    fn adapter(&self) -> Option<AdapterSpec> {
        self.adapter_rank.map(|rank| AdapterSpec {
            rank,
            alpha: self.adapter_alpha,
        })
    }
}

pub struct TextEncoder {
    cfg: TextEncoderConfig,
    chars: CharVocab,
    embedding: Tensor,
    blocks: Vec<Block>,
    norm: RmsNorm,
    null: Tensor,
    rotary: Rotary,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: TextEncoderConfig,
        chars: CharVocab,
        max_chars: usize,
    ) -> Result<Self> {
        let embedding = store.normal("text.embedding", &[chars.len(), cfg.width], 1.0)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("text.blocks.{i}"),
                    cfg.width,
                    cfg.ffn_width,
                    cfg.heads,
                    cfg.adapter(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = RmsNorm::new(store, "text.norm", cfg.width)?;
        let null = store.normal("text.null", &[cfg.width], 1.0)?;
        let rotary = Rotary::new(cfg.width / cfg.heads, max_chars.max(1), store.dtype(), store.device())?;
        Ok(Self {
            cfg,
            chars,
            embedding,
            blocks,
            norm,
            null,
            rotary,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn chars(&self) -> &CharVocab {
        &self.chars
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn set_adapters_enabled(&mut self, enabled: bool) {
        for b in &mut self.blocks {
            b.set_adapters_enabled(enabled);
        }
    }

    /// Encodes a batch of character-id sequences. Returns [B, m_max, d_txt];
    /// rows past each sequence's length are meaningless.
    pub fn encode_batch(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let device = self.embedding.device();
        let m_max = ids.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let b = ids.len();
        let mut flat = Vec::with_capacity(b * m_max);
        let mut valid = Vec::with_capacity(b);
        let mut positions = Vec::with_capacity(b * m_max);
        for seq in ids {
            flat.extend(seq.iter().copied());
            flat.extend(std::iter::repeat(CHAR_PAD).take(m_max - seq.len()));
            valid.push((0..m_max).map(|i| i < seq.len()).collect::<Vec<_>>());
            positions.extend(0..m_max as u32);
        }
        let idx = Tensor::from_vec(flat, b * m_max, device)?;
        let x = self
            .embedding
            .index_select(&idx, 0)?
            .reshape((b, m_max, self.cfg.width))?;
        let positions = Tensor::from_vec(positions, (b, m_max), device)?;
        let mask = attention_mask(&valid, false, self.embedding.dtype(), device)?;
        let x = run_blocks(&self.blocks, x, &positions, &self.rotary, Some(&mask), None)?;
        self.norm.forward(&x)
    }

    pub fn encode_text(&self, text: &str, budget: usize) -> Result<TextEncoding> {
        let ids = self.chars.encode(text, budget)?;
        let m = ids.len();
        let enc = self.encode_batch(&[ids])?.squeeze(0)?;
        let vectors = if budget > m {
            let pad = Tensor::zeros((budget - m, self.cfg.width), enc.dtype(), enc.device())?;
            Tensor::cat(&[&enc, &pad], 0)?
        } else {
            enc
        };
        TextEncoding::new(vectors, (0..budget).map(|i| i < m).collect())
    }

    /// The learned unconditional prefix, [budget, d_txt].
    pub fn null_vectors(&self, budget: usize) -> Result<Tensor> {
        Ok(self
            .null
            .unsqueeze(0)?
            .broadcast_as((budget, self.cfg.width))?
            .contiguous()?)
    }

    pub fn null_condition(&self, budget: usize) -> Result<TextEncoding> {
        TextEncoding::new(self.null_vectors(budget)?, vec![true; budget])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::DType;

    fn encoder(seed: u64, adapter: Option<usize>) -> TextEncoder {
        let mut store = ParamStore::new(seed, DType::F64);
        let cfg = TextEncoderConfig {
            width: 16,
            layers: 2,
            heads: 2,
            ffn_width: 32,
            adapter_rank: adapter,
            adapter_alpha: 16.0,
        };
        TextEncoder::new(&mut store, cfg, CharVocab::from_texts(["abcdef xyz"]), 8).unwrap()
    }

    #[test]
    fn normalisation_trims_and_collapses() {
        assert_eq!(normalize_text("  a \t b\n\nc "), "a b c");
    }

    #[test]
    fn length_bookkeeping() {
        let e = encoder(1, None);
        let enc = e.encode_text("abc", 8).unwrap();
        assert_eq!(enc.padded_length(), 8);
        assert_eq!(enc.valid_len(), 3);
        assert_eq!(enc.mask(), &[true, true, true, false, false, false, false, false]);
        assert!(to_vec_f64(enc.vectors()).unwrap().iter().all(|v| v.is_finite()));
        let pad = to_vec_f64(&enc.vectors().narrow(0, 3, 5).unwrap()).unwrap();
        assert!(pad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_and_over_budget_rejected() {
        let e = encoder(1, None);
        assert!(matches!(e.encode_text("   ", 8), Err(Error::EmptyText)));
        assert!(matches!(
            e.encode_text("abcdefxyz", 8),
            Err(Error::TextOverBudget { len: 9, budget: 8 })
        ));
        assert!(e.encode_text("zz", 8).is_ok());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let v = CharVocab::from_texts(["ab"]);
        assert_eq!(v.encode("a?b", 8).unwrap(), vec![2, CHAR_UNK, 3]);
    }

    #[test]
    fn reversal_changes_encoding() {
        let e = encoder(3, None);
        let a = to_vec_f64(e.encode_text("abc", 8).unwrap().vectors()).unwrap();
        let b = to_vec_f64(e.encode_text("cba", 8).unwrap().vectors()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_initialised_adapters_change_nothing() {
        let mut e = encoder(5, Some(4));
        let with = to_vec_f64(e.encode_text("abc xyz", 8).unwrap().vectors()).unwrap();
        e.set_adapters_enabled(false);
        let without = to_vec_f64(e.encode_text("abc xyz", 8).unwrap().vectors()).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn null_condition_is_broadcast_and_stable() {
        let e = encoder(2, None);
        let n1 = e.null_condition(8).unwrap();
        let n2 = e.null_condition(8).unwrap();
        assert_eq!(n1.valid_len(), 8);
        let v1 = to_vec_f64(n1.vectors()).unwrap();
        assert_eq!(v1, to_vec_f64(n2.vectors()).unwrap());
        for row in v1.chunks(16) {
            assert_eq!(row, &v1[..16]);
        }
    }
}
