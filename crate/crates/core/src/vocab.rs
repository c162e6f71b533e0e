//! Token id spaces and the stream containers shared by every stage.
//!
//! Each id space keeps its data tokens at the bottom and reserves the top
//! for special ids, in a fixed order:
//!
//! * semantic space: `[0, st_size)` data, then `S_eos`, `NULL_COND`, `PAD`
//! * acoustic space (one per codebook): `[0, at_size)` data, then `A_fill`, `PAD`
//!
//! The language model uses one combined embedding table. Its rows are laid
//! out as the semantic space followed by the K acoustic spaces, so codebook
//! `k` (0-based) starts at row `semantic_space() + k * acoustic_space()`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub st_size: u32,
    pub at_size: u32,
    pub num_codebooks: usize,
}

impl Default for TokenVocabulary {
    fn default() -> Self {
        Self {
            st_size: 500,
            at_size: 64,
            num_codebooks: 12,
        }
    }
}

impl TokenVocabulary {
    pub fn new(st_size: u32, at_size: u32, num_codebooks: usize) -> Result<Self> {
        let vocab = Self {
            st_size,
            at_size,
            num_codebooks,
        };
        vocab.check()?;
        Ok(vocab)
    }

    pub fn check(&self) -> Result<()> {
        if self.num_codebooks < 1 {
            return Err(Error::InvalidVocabulary("num_codebooks must be >= 1".into()));
        }
        if self.st_size < 2 {
            return Err(Error::InvalidVocabulary("st_size must be >= 2".into()));
        }
        if self.at_size < 2 {
            return Err(Error::InvalidVocabulary("at_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn s_eos(&self) -> u32 {
        self.st_size
    }

    pub fn st_null(&self) -> u32 {
        self.st_size + 1
    }

    pub fn st_pad(&self) -> u32 {
        self.st_size + 2
    }

    pub fn a_fill(&self) -> u32 {
        self.at_size
    }

    pub fn at_pad(&self) -> u32 {
        self.at_size + 1
    }

    /// Number of ids in the semantic space, specials included.
    pub fn semantic_space(&self) -> usize {
        self.st_size as usize + 3
    }

    /// Number of ids in one codebook's acoustic space, specials included.
    pub fn acoustic_space(&self) -> usize {
        self.at_size as usize + 2
    }

    /// Output width of the semantic head: data tokens plus `S_eos`.
    pub fn st_head_size(&self) -> usize {
        self.st_size as usize + 1
    }

    /// Output width of each acoustic head: data tokens plus `A_fill`.
    pub fn at_head_size(&self) -> usize {
        self.at_size as usize + 1
    }

    pub fn embedding_rows(&self) -> usize {
        self.semantic_space() + self.num_codebooks * self.acoustic_space()
    }

    /// Row of a semantic id in the combined embedding table.
    pub fn st_row(&self, id: u32) -> Result<usize> {
        if (id as usize) < self.semantic_space() {
            Ok(id as usize)
        } else {
            Err(Error::InvalidId { kind: "semantic", id })
        }
    }

    /// Row of an acoustic id of codebook `k` (0-based) in the combined table.
    pub fn at_row(&self, k: usize, id: u32) -> Result<usize> {
        if k >= self.num_codebooks || (id as usize) >= self.acoustic_space() {
            return Err(Error::InvalidId { kind: "acoustic", id });
        }
        Ok(self.semantic_space() + k * self.acoustic_space() + id as usize)
    }
}

/// Deduplicated semantic tokens. `S_eos` is not stored in `tokens`; the
/// `terminated` flag records whether the stream ends with it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SemanticStream {
    tokens: Vec<u32>,
    terminated: bool,
}

impl SemanticStream {
    /// Builds a stream from ids that are already free of consecutive duplicates.
    pub fn from_deduped(tokens: Vec<u32>, terminated: bool) -> Result<Self> {
        if let Some(i) = tokens.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::Shape(format!(
                "consecutive duplicate semantic id {} at position {}",
                tokens[i],
                i + 1
            )));
        }
        Ok(Self { tokens, terminated })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    pub fn terminate(mut self) -> Self {
        self.terminated = true;
        self
    }

    /// Ids as the language model sees them, with the trailing `S_eos`.
    pub fn ids_with_eos(&self, vocab: &TokenVocabulary) -> Vec<u32> {
        let mut ids = self.tokens.clone();
        if self.terminated {
            ids.push(vocab.s_eos());
        }
        ids
    }
}

/// Collapses runs of equal semantic ids, keeping the first of each run.
pub fn dedup_consecutive(raw: &[u32], vocab: &TokenVocabulary) -> Result<SemanticStream> {
    let mut tokens: Vec<u32> = Vec::with_capacity(raw.len());
    for (position, &id) in raw.iter().enumerate() {
        if id >= vocab.st_size {
            return Err(Error::SemanticIdOutOfRange {
                position,
                id,
                limit: vocab.st_size,
            });
        }
        if tokens.last() != Some(&id) {
            tokens.push(id);
        }
    }
    Ok(SemanticStream {
        tokens,
        terminated: false,
    })
}

/// T×K acoustic tokens stored time-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcousticGrid {
    frames: usize,
    codebooks: usize,
    data: Vec<u32>,
}

impl AcousticGrid {
    pub fn new(frames: usize, codebooks: usize, data: Vec<u32>) -> Result<Self> {
        if codebooks == 0 {
            return Err(Error::Shape("a grid needs at least one codebook".into()));
        }
        if data.len() != frames * codebooks {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {frames}x{codebooks} grid",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            codebooks,
            data,
        })
    }

    pub fn empty(codebooks: usize) -> Self {
        Self {
            frames: 0,
            codebooks: codebooks.max(1),
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<u32>], codebooks: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * codebooks);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != codebooks {
                return Err(Error::Shape(format!(
                    "row {t} has {} entries, expected {codebooks}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), codebooks, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn get(&self, t: usize, k: usize) -> u32 {
        self.data[t * self.codebooks + k]
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.data[t * self.codebooks..(t + 1) * self.codebooks]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks(self.codebooks)
    }

    pub fn column(&self, k: usize) -> Vec<u32> {
        (0..self.frames).map(|t| self.get(t, k)).collect()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    /// First `frames` rows (clamped to the grid length).
    pub fn prefix(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        Self {
            frames,
            codebooks: self.codebooks,
            data: self.data[..frames * self.codebooks].to_vec(),
        }
    }

    /// Rows from `start` to the end.
    pub fn suffix(&self, start: usize) -> Self {
        let start = start.min(self.frames);
        Self {
            frames: self.frames - start,
            codebooks: self.codebooks,
            data: self.data[start * self.codebooks..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridReport {
    Pass,
    Fail { t: usize, k: usize, id: u32 },
    WrongWidth { found: usize, expected: usize },
}

impl GridReport {
    pub fn is_pass(&self) -> bool {
        matches!(self, GridReport::Pass)
    }
}

/// Checks shape and id ranges, reporting the first bad cell in time-major order.
pub fn validate_grid(grid: &AcousticGrid, vocab: &TokenVocabulary) -> GridReport {
    if grid.codebooks != vocab.num_codebooks && grid.frames > 0 {
        return GridReport::WrongWidth {
            found: grid.codebooks,
            expected: vocab.num_codebooks,
        };
    }
    for t in 0..grid.frames {
        for k in 0..grid.codebooks {
            let id = grid.get(t, k);
            if id >= vocab.at_size {
                return GridReport::Fail { t, k, id };
            }
        }
    }
    GridReport::Pass
}

/// Token frame rate of a codec that downsamples `sample_rate` by `downsample`.
pub fn derive_frame_rate(sample_rate: u32, downsample: u32) -> Result<f64> {
    if downsample == 0 {
        return Err(Error::ZeroDownsample);
    }
    Ok(sample_rate as f64 / downsample as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> TokenVocabulary {
        TokenVocabulary::new(500, 64, 3).unwrap()
    }

    #[test]
    fn dedup_collapses_runs() {
        let v = vocab();
        assert_eq!(dedup_consecutive(&[5, 5, 7, 7, 7, 5], &v).unwrap().tokens(), &[5, 7, 5]);
        assert!(dedup_consecutive(&[], &v).unwrap().is_empty());
        assert_eq!(
            dedup_consecutive(&[3, 1, 4, 1, 5], &v).unwrap().tokens(),
            &[3, 1, 4, 1, 5]
        );
    }

    #[test]
    fn dedup_reports_bad_position() {
        let err = dedup_consecutive(&[1, 2, 500, 3], &vocab()).unwrap_err();
        match err {
            Error::SemanticIdOutOfRange { position, id, .. } => {
                assert_eq!((position, id), (2, 500));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn specials_sit_above_data() {
        let v = vocab();
        let st = [v.s_eos(), v.st_null(), v.st_pad()];
        assert!(st.iter().all(|&id| id >= v.st_size));
        assert_eq!(st, [500, 501, 502]);
        assert_eq!([v.a_fill(), v.at_pad()], [64, 65]);
        assert_eq!(v.at_row(0, 0).unwrap(), 503);
        assert_eq!(v.at_row(2, 65).unwrap(), 503 + 2 * 66 + 65);
        assert_eq!(v.embedding_rows(), 503 + 3 * 66);
        assert!(v.at_row(3, 0).is_err());
        assert!(v.st_row(503).is_err());
    }

    #[test]
    fn vocabulary_rejects_degenerate_sizes() {
        assert!(TokenVocabulary::new(1, 64, 3).is_err());
        assert!(TokenVocabulary::new(500, 1, 3).is_err());
        assert!(TokenVocabulary::new(500, 64, 0).is_err());
    }

    #[test]
    fn validate_grid_cases() {
        let v = vocab();
        let zeros = AcousticGrid::new(2, 3, vec![0; 6]).unwrap();
        assert!(validate_grid(&zeros, &v).is_pass());
        let mut data = vec![0; 6];
        data[4] = 64;
        let bad = AcousticGrid::new(2, 3, data).unwrap();
        assert_eq!(validate_grid(&bad, &v), GridReport::Fail { t: 1, k: 1, id: 64 });
        assert!(validate_grid(&AcousticGrid::empty(3), &v).is_pass());
    }

    #[test]
    fn frame_rates() {
        assert_eq!(derive_frame_rate(16000, 320).unwrap(), 50.0);
        assert_eq!(derive_frame_rate(16000, 16000).unwrap(), 1.0);
        assert_eq!(derive_frame_rate(8000, 320).unwrap(), 25.0);
        assert!(derive_frame_rate(16000, 0).is_err());
    }

    #[test]
    fn stream_rejects_duplicates() {
        assert!(SemanticStream::from_deduped(vec![1, 1], true).is_err());
        let s = SemanticStream::from_deduped(vec![1, 2], true).unwrap();
        assert_eq!(s.ids_with_eos(&vocab()), vec![1, 2, 500]);
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_and_closed(raw in proptest::collection::vec(0u32..6, 0..40)) {
            let v = vocab();
            let once = dedup_consecutive(&raw, &v).unwrap();
            let twice = dedup_consecutive(once.tokens(), &v).unwrap();
            prop_assert_eq!(once.tokens(), twice.tokens());
            prop_assert!(once.len() <= raw.len());
            prop_assert!(once.tokens().iter().all(|id| raw.contains(id)));
            prop_assert!(once.tokens().windows(2).all(|w| w[0] != w[1]));
        }
    }
}
