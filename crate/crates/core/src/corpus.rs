//! Deterministic synthetic corpus standing in for real speech data.
//!
//! Text is drawn from a small alphabet plus two hesitation markers. Every
//! character owns one semantic id and is held for a short run of frames
//! (1-3 for letters, 1-2 for spaces, 3-4 for hesitation markers; the
//! length is a per-speaker habit), so raw
//! semantic streams contain the consecutive duplicates that real 50 Hz
//! tokens show. A synthetic codec turns each frame into K acoustic ids:
//! codebook `k` looks up a fixed table for the frame's semantic id (deeper
//! codebooks also see the position inside the run), then applies the
//! speaker's permutation of that codebook's id space.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::vocab::{AcousticGrid, TokenVocabulary};

pub const LETTERS: &str = "abdegikmnorstu";
pub const HESITATIONS: [char; 2] = ['嗯', '呃'];

/// Root for the fixed codec tables; independent of the corpus seed.
const CODEC_ROOT: u64 = 0x5eed_c0de;

pub fn is_hesitation(c: char) -> bool {
    HESITATIONS.contains(&c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticUtterance {
    pub id: String,
    pub text: String,
    pub st_raw: Vec<u32>,
    pub at: AcousticGrid,
    pub speaker: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub size: usize,
    pub seed: u64,
    pub speakers: u32,
    /// How many consecutive utterances share one text, each read by the
    /// next speaker in turn.
    pub readings_per_text: u32,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a word is preceded by a hesitation marker, in percent.
    pub hesitation_percent: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 32,
            seed: 0,
            speakers: 4,
            readings_per_text: 1,
            min_words: 2,
            max_words: 3,
            hesitation_percent: 35,
        }
    }
}

/// Fixed character-to-semantic and frame-to-acoustic rules.
#[derive(Debug, Clone)]
pub struct SyntheticCodec {
    vocab: TokenVocabulary,
    speakers: u32,
    /// [k][semantic id * 4 + run position] -> base acoustic id
    base: Vec<Vec<u32>>,
    /// [speaker][k][base id] -> acoustic id
    perms: Vec<Vec<Vec<u32>>>,
    /// [speaker][k][acoustic id] -> base id
    inverse: Vec<Vec<Vec<u32>>>,
    char_ids: Vec<(char, u32)>,
}

impl SyntheticCodec {
    pub fn new(vocab: TokenVocabulary, speakers: u32) -> Result<Self> {
        vocab.check()?;
        if speakers == 0 {
            return Err(Error::InvalidConfig("need at least one speaker".into()));
        }
        let alphabet: Vec<char> = LETTERS
            .chars()
            .chain([' '])
            .chain(HESITATIONS)
            .collect();
        if alphabet.len() > vocab.st_size as usize {
            return Err(Error::InvalidConfig(format!(
                "semantic vocabulary of {} cannot cover {} characters",
                vocab.st_size,
                alphabet.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(CODEC_ROOT, "semantic", vocab.st_size as u64));
        let mut ids: Vec<u32> = (0..vocab.st_size).collect();
        ids.shuffle(&mut rng);
        let char_ids = alphabet.iter().copied().zip(ids).collect();

        let at = vocab.at_size;
        let k = vocab.num_codebooks;
        // keyed by (semantic id, run position); the coarse codebook ignores run position
        let base: Vec<Vec<u32>> = (0..k)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(CODEC_ROOT, "base", c as u64));
                let mut table = Vec::with_capacity(vocab.st_size as usize * 4);
                for _ in 0..vocab.st_size {
                    let first = rng.random_range(0..at);
                    table.push(first);
                    for _ in 1..4 {
                        table.push(if c == 0 { first } else { rng.random_range(0..at) });
                    }
                }
                table
            })
            .collect();

        let mut perms = Vec::with_capacity(speakers as usize);
        let mut inverse = Vec::with_capacity(speakers as usize);
        for p in 0..speakers {
            let mut per_k = Vec::with_capacity(k);
            let mut inv_k = Vec::with_capacity(k);
            for c in 0..k {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    CODEC_ROOT,
                    "speaker",
                    (p as u64) << 32 | c as u64,
                ));
                let mut perm: Vec<u32> = (0..at).collect();
                perm.shuffle(&mut rng);
                let mut inv = vec![0u32; at as usize];
                for (b, &a) in perm.iter().enumerate() {
                    inv[a as usize] = b as u32;
                }
                per_k.push(perm);
                inv_k.push(inv);
            }
            perms.push(per_k);
            inverse.push(inv_k);
        }
        Ok(Self {
            vocab,
            speakers,
            base,
            perms,
            inverse,
            char_ids,
        })
    }

    pub fn vocab(&self) -> &TokenVocabulary {
        &self.vocab
    }

    pub fn speakers(&self) -> u32 {
        self.speakers
    }

    pub fn semantic_id(&self, c: char) -> Option<u32> {
        self.char_ids.iter().find(|(ch, _)| *ch == c).map(|&(_, id)| id)
    }

    /// Speaker-independent code of codebook `k` for a frame at run position `j`.
    pub fn base_code(&self, semantic: u32, run_pos: usize, k: usize) -> u32 {
        self.base[k][semantic as usize * 4 + run_pos.min(3)]
    }

    pub fn speaker_code(&self, speaker: u32, k: usize, base: u32) -> u32 {
        self.perms[speaker as usize][k][base as usize]
    }

    /// Undoes a speaker's permutation.
    pub fn unpermute(&self, speaker: u32, k: usize, id: u32) -> u32 {
        self.inverse[speaker as usize][k][id as usize]
    }

    /// Speaker-independent codes for every frame of `st_raw`, time-major.
    pub fn base_frames(&self, st_raw: &[u32]) -> Vec<Vec<u32>> {
        let k = self.vocab.num_codebooks;
        let mut run_pos = 0usize;
        st_raw
            .iter()
            .enumerate()
            .map(|(t, &s)| {
                run_pos = if t > 0 && st_raw[t - 1] == s { run_pos + 1 } else { 0 };
                (0..k).map(|c| self.base_code(s, run_pos, c)).collect()
            })
            .collect()
    }

    /// The acoustic grid of `st_raw` spoken by `speaker`.
    pub fn encode(&self, st_raw: &[u32], speaker: u32) -> Result<AcousticGrid> {
        if speaker >= self.speakers {
            return Err(Error::InvalidConfig(format!("unknown speaker {speaker}")));
        }
        let rows: Vec<Vec<u32>> = self
            .base_frames(st_raw)
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .enumerate()
                    .map(|(c, b)| self.speaker_code(speaker, c, b))
                    .collect()
            })
            .collect();
        AcousticGrid::from_rows(&rows, self.vocab.num_codebooks)
    }

    /// Raw semantic frames for `text`. Each speaker holds a given character
    /// for a fixed number of frames, drawn once per (seed, speaker, character).
    pub fn oracle_st(&self, text: &str, seed: u64, speaker: u32) -> Vec<u32> {
        let mut out = Vec::new();
        for c in text.chars() {
            let Some(id) = self.semantic_id(c) else {
                continue;
            };
            out.extend(std::iter::repeat(id).take(run_length(seed, speaker, c)));
        }
        out
    }
}

fn run_length(seed: u64, speaker: u32, c: char) -> usize {
    let (lo, span) = if is_hesitation(c) {
        (3, 2)
    } else if c == ' ' {
        (1, 2)
    } else {
        (1, 3)
    };
    let h = derive_seed(seed, "duration", ((speaker as u64) << 32) | c as u64);
    lo + (h % span) as usize
}

fn random_text(rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> String {
    let letters: Vec<char> = LETTERS.chars().collect();
    let words = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut parts = Vec::with_capacity(words);
    for _ in 0..words {
        let mut word = String::new();
        if rng.random_range(0..100) < cfg.hesitation_percent {
            word.push(HESITATIONS[rng.random_range(0..HESITATIONS.len())]);
        }
        let len = rng.random_range(2..=3);
        for _ in 0..len {
            word.push(letters[rng.random_range(0..letters.len())]);
        }
        parts.push(word);
    }
    parts.join(" ")
}

/// Generates `cfg.size` utterances. Utterance `i` is spoken by speaker
/// `i % speakers` and has text number `i / readings_per_text`.
pub fn gen_corpus(cfg: &CorpusConfig, vocab: &TokenVocabulary) -> Result<Vec<SyntheticUtterance>> {
    if cfg.size == 0 {
        return Err(Error::InvalidConfig("corpus size must be at least 1".into()));
    }
    if cfg.readings_per_text == 0 {
        return Err(Error::InvalidConfig("readings_per_text must be at least 1".into()));
    }
    if cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::InvalidConfig("invalid word count range".into()));
    }
    let codec = SyntheticCodec::new(*vocab, cfg.speakers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "corpus-text", 0));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(cfg.size);
    let mut text = String::new();
    for i in 0..cfg.size {
        if i as u32 % cfg.readings_per_text == 0 {
            text = loop {
                let t = random_text(&mut rng, cfg);
                if seen.insert(t.clone()) {
                    break t;
                }
            };
        }
        let speaker = i as u32 % cfg.speakers;
        let st_raw = codec.oracle_st(&text, cfg.seed, speaker);
        let at = codec.encode(&st_raw, speaker)?;
        out.push(SyntheticUtterance {
            id: format!("utt{i:05}"),
            text: text.clone(),
            st_raw,
            at,
            speaker,
        });
    }
    Ok(out)
}

/// Expands each frame to `downsample` samples of a tone mixture keyed by its
/// K tokens. Amplitudes sum to at most 1.
pub fn render_pseudo_waveform(at: &AcousticGrid, sample_rate: u32, downsample: usize) -> Vec<f32> {
    let k = at.codebooks();
    let amp: Vec<f64> = (0..k).map(|c| 0.5f64.powi(c as i32 + 1)).collect();
    let mut out = Vec::with_capacity(at.frames() * downsample);
    for row in at.rows() {
        let freqs: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(c, &id)| 80.0 + 40.0 * id as f64 + 7.0 * c as f64)
            .collect();
        for n in 0..downsample {
            let time = n as f64 / sample_rate as f64;
            let v: f64 = freqs
                .iter()
                .zip(&amp)
                .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * time).sin())
                .sum();
            out.push(v as f32);
        }
    }
    out
}
