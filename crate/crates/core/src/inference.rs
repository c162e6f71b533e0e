//! Two-stage generation with classifier-free guidance.
//!
//! Every guidance pass runs in its own decoding session at batch size 1, and
//! passes are blended on log-softmax scores, so strengths of 1 reproduce the
//! conditional-only sampler token for token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{CodecLm, DecoderSession, Region, TokenStep};
use crate::delay::{remove_delay, DelayedGrid};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::vocab::{dedup_consecutive, validate_grid, AcousticGrid, GridReport, SemanticStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub max_st_len: usize,
    /// Cap on generated frames, prompt excluded.
    pub max_at_len: usize,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            alpha: 1.3,
            beta: 1.5,
            temperature: 1.0,
            top_k: 50,
            max_st_len: 256,
            max_at_len: 1024,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided(mut self) -> Self {
        self.gamma = 1.0;
        self.alpha = 1.0;
        self.beta = 1.0;
        self
    }

    pub fn greedy(mut self) -> Self {
        self.top_k = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.gamma, self.alpha, self.beta].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("guidance strengths must be finite".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return x.to_vec();
    }
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("score vectors of length {a} and {b}")));
    }
    Ok(())
}

/// `gamma * cond + (1 - gamma) * uncond`
pub fn blend_stage1(cond: &[f64], uncond: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_lengths(cond.len(), uncond.len())?;
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| gamma * c + (1.0 - gamma) * u)
        .collect())
}

/// `beta * (alpha * cond + (1 - alpha) * text_masked) + (1 - beta) * sem_masked`
pub fn blend_stage2(
    cond: &[f64],
    text_masked: &[f64],
    sem_masked: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_lengths(cond.len(), text_masked.len())?;
    check_lengths(cond.len(), sem_masked.len())?;
    Ok(cond
        .iter()
        .zip(text_masked)
        .zip(sem_masked)
        .map(|((c, t), s)| beta * (alpha * c + (1.0 - alpha) * t) + (1.0 - beta) * s)
        .collect())
}

/// Effective weights of (cond, text_masked, sem_masked) in [`blend_stage2`].
pub fn stage2_coefficients(alpha: f64, beta: f64) -> [f64; 3] {
    [beta * alpha, beta * (1.0 - alpha), 1.0 - beta]
}

/// Temperature + top-k sampling over renormalised scores. `top_k = 1` is
/// greedy with ties going to the lowest id.
pub struct Sampler {
    rng: ChaCha8Rng,
    temperature: f64,
    top_k: usize,
}

impl Sampler {
    pub fn new(seed: u64, temperature: f64, top_k: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            temperature,
            top_k: top_k.max(1),
        }
    }

    /// `allowed[i] = false` removes id `i` from the candidates.
    pub fn sample(&mut self, log_probs: &[f64], allowed: &[bool]) -> Result<usize> {
        let mut cands: Vec<(usize, f64)> = log_probs
            .iter()
            .zip(allowed)
            .enumerate()
            .filter(|(_, (v, ok))| **ok && !v.is_nan() && **v > f64::NEG_INFINITY)
            .map(|(i, (v, _))| (i, v / self.temperature))
            .collect();
        if cands.is_empty() {
            return Err(Error::InvalidConfig("no token can be sampled".into()));
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(self.top_k);
        let u: f64 = self.rng.random();
        let max = cands[0].1;
        let weights: Vec<f64> = cands.iter().map(|(_, v)| (v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        for ((i, _), w) in cands.iter().zip(&weights) {
            acc += w / total;
            if u < acc {
                return Ok(*i);
            }
        }
        Ok(cands[cands.len() - 1].0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    St,
    At,
}

/// Renormalised blended scores of one sampled cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub stage: Stage,
    pub step: usize,
    pub codebook: Option<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Passes {
    /// All guidance passes, blended.
    Guided,
    /// Only the conditional pass; masked passes are never computed.
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StOutput {
    pub stream: SemanticStream,
    pub truncated: bool,
    pub scores: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtOutput {
    /// Generated frames, prompt excluded.
    pub grid: AcousticGrid,
    pub truncated: bool,
    pub scores: Vec<ScoreRecord>,
}

fn pass_scores(model: &CodecLm, session: &DecoderSession, region: Region) -> Result<Vec<Vec<f64>>> {
    let logits = model.project_heads(session.last_hidden()?, region)?;
    let rows = match region {
        Region::St => vec![logits.st_logits.unwrap_or_default()],
        Region::At => logits.at_logits,
    };
    Ok(rows
        .into_iter()
        .map(|r| log_softmax(&r.into_iter().map(f64::from).collect::<Vec<_>>()))
        .collect())
}

struct TextRows {
    cond: candle_core::Tensor,
    null: candle_core::Tensor,
}

fn text_rows(model: &CodecLm, text: &str) -> Result<TextRows> {
    let budget = model.config().backbone.text_budget;
    let enc = model.text_encoder().encode_text(text, budget)?;
    Ok(TextRows {
        cond: enc.valid_vectors()?,
        null: model.text_encoder().null_vectors(enc.valid_len())?,
    })
}

/// Stage 1: text to semantic tokens. Stops at `S_eos`; hitting
/// `max_st_len` (or the token budget) first sets `truncated`.
pub fn generate_st(model: &CodecLm, text: &str, cfg: &GuidanceConfig, passes: Passes) -> Result<StOutput> {
    generate_st_inner(model, text, cfg, passes, false)
}

pub fn generate_st_with_scores(
    model: &CodecLm,
    text: &str,
    cfg: &GuidanceConfig,
    passes: Passes,
) -> Result<StOutput> {
    generate_st_inner(model, text, cfg, passes, true)
}

fn generate_st_inner(
    model: &CodecLm,
    text: &str,
    cfg: &GuidanceConfig,
    passes: Passes,
    dump: bool,
) -> Result<StOutput> {
    cfg.validate()?;
    let vocab = *model.vocab();
    let rows = text_rows(model, text)?;
    let mut cond = model.start_session(&rows.cond)?;
    let mut uncond = match passes {
        Passes::Guided => Some(model.start_session(&rows.null)?),
        Passes::Conditional => None,
    };
    let mut sampler = Sampler::new(derive_seed(cfg.seed, "st", 0), cfg.temperature, cfg.top_k);
    let allowed = vec![true; vocab.st_head_size()];
    let limit = cfg
        .max_st_len
        .min(model.config().backbone.st_at_budget.saturating_sub(1));
    let mut tokens = Vec::new();
    let mut scores = Vec::new();
    let mut terminated = false;
    for step in 0.. {
        let c = pass_scores(model, &cond, Region::St)?.remove(0);
        let blended = match &uncond {
            Some(u) => blend_stage1(&c, &pass_scores(model, u, Region::St)?.remove(0), cfg.gamma)?,
            None => c,
        };
        let blended = log_softmax(&blended);
        let id = sampler.sample(&blended, &allowed)? as u32;
        if dump {
            scores.push(ScoreRecord {
                stage: Stage::St,
                step,
                codebook: None,
                scores: blended,
            });
        }
        if id == vocab.s_eos() {
            terminated = true;
            break;
        }
        tokens.push(id);
        if tokens.len() >= limit {
            break;
        }
        model.feed(&mut cond, &[TokenStep::St(id)])?;
        if let Some(u) = uncond.as_mut() {
            model.feed(u, &[TokenStep::St(id)])?;
        }
    }
    let stream = dedup_consecutive(&tokens, &vocab)?;
    Ok(StOutput {
        stream: if terminated { stream.terminate() } else { stream },
        truncated: !terminated,
        scores,
    })
}

/// Stage 2: acoustic tokens conditioned on text, semantic tokens and a
/// prompt grid that is teacher-forced as the start of the acoustic region.
///
/// Head 0 sampling `A_fill` at a free cell ends the utterance; later cells
/// that fall past the end are forced to `A_fill`, as are the leading delay
/// cells. Other heads never sample `A_fill`.
pub fn generate_at(
    model: &CodecLm,
    text: &str,
    st: &SemanticStream,
    prompt: &AcousticGrid,
    cfg: &GuidanceConfig,
    passes: Passes,
) -> Result<AtOutput> {
    generate_at_inner(model, text, st, prompt, cfg, passes, false)
}

pub fn generate_at_with_scores(
    model: &CodecLm,
    text: &str,
    st: &SemanticStream,
    prompt: &AcousticGrid,
    cfg: &GuidanceConfig,
    passes: Passes,
) -> Result<AtOutput> {
    generate_at_inner(model, text, st, prompt, cfg, passes, true)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Cell {
    Forced(u32),
    Free,
}

fn generate_at_inner(
    model: &CodecLm,
    text: &str,
    st: &SemanticStream,
    prompt: &AcousticGrid,
    cfg: &GuidanceConfig,
    passes: Passes,
    dump: bool,
) -> Result<AtOutput> {
    cfg.validate()?;
    let vocab = *model.vocab();
    let k_books = vocab.num_codebooks;
    if prompt.codebooks() != k_books {
        return Err(Error::DimensionMismatch(format!(
            "prompt has {} codebooks, model has {k_books}",
            prompt.codebooks()
        )));
    }
    if let GridReport::Fail { t, k, id } = validate_grid(prompt, &vocab) {
        return Err(Error::AcousticIdOutOfRange {
            t,
            k,
            id,
            limit: vocab.at_size,
        });
    }
    let st_ids = st.clone().terminate().ids_with_eos(&vocab);
    let budget = model.config().backbone.st_at_budget;
    let p = prompt.frames();
    // (n + 1) semantic slots plus one slot per delayed row
    let row_cap = budget.saturating_sub(st_ids.len());
    let row_cap = row_cap.min(p + cfg.max_at_len + k_books - 1);
    if p + k_books - 1 > row_cap {
        return Err(Error::OverBudget {
            component: "acoustic prompt",
            needed: st_ids.len() + p + k_books - 1,
            available: budget,
        });
    }

    let rows_txt = text_rows(model, text)?;
    let st_steps: Vec<TokenStep> = st_ids.iter().map(|&id| TokenStep::St(id)).collect();
    let null_steps = vec![TokenStep::St(vocab.st_null()); st_ids.len()];
    let mut sessions = vec![model.start_session(&rows_txt.cond)?];
    if passes == Passes::Guided {
        sessions.push(model.start_session(&rows_txt.null)?);
        sessions.push(model.start_session(&rows_txt.cond)?);
    }
    for (i, s) in sessions.iter_mut().enumerate() {
        model.feed(s, if i == 2 { &null_steps } else { &st_steps })?;
    }

    let fill = vocab.a_fill();
    let mut sampler = Sampler::new(derive_seed(cfg.seed, "at", 0), cfg.temperature, cfg.top_k);
    let head = vocab.at_head_size();
    let head0_allowed = vec![true; head];
    let mut data_allowed = vec![true; head];
    data_allowed[fill as usize] = false;

    let mut rows: Vec<Vec<u32>> = Vec::new();
    let mut frames: Option<usize> = None;
    let mut scores = Vec::new();
    let mut pending: Vec<TokenStep> = Vec::new();
    let mut truncated = false;
    loop {
        let r = rows.len();
        if let Some(t) = frames {
            if r >= t + k_books - 1 {
                break;
            }
        }
        if r >= row_cap {
            truncated = true;
            break;
        }
        let cells: Vec<Cell> = (0..k_books)
            .map(|k| {
                if r < k {
                    return Cell::Forced(fill);
                }
                let f = r - k;
                match frames {
                    Some(t) if f >= t => Cell::Forced(fill),
                    _ if f < p => Cell::Forced(prompt.get(f, k)),
                    _ => Cell::Free,
                }
            })
            .collect();
        let mut row = vec![fill; k_books];
        if cells.iter().any(|c| *c == Cell::Free) {
            for s in sessions.iter_mut() {
                model.feed(s, &pending)?;
            }
            pending.clear();
            let mut per_pass = sessions
                .iter()
                .map(|s| pass_scores(model, s, Region::At))
                .collect::<Result<Vec<_>>>()?;
            for (k, cell) in cells.iter().enumerate() {
                row[k] = match *cell {
                    Cell::Forced(id) => id,
                    Cell::Free => {
                        let c = std::mem::take(&mut per_pass[0][k]);
                        let blended = if per_pass.len() == 3 {
                            blend_stage2(&c, &per_pass[1][k], &per_pass[2][k], cfg.alpha, cfg.beta)?
                        } else {
                            c
                        };
                        let blended = log_softmax(&blended);
                        let allowed = if k == 0 { &head0_allowed } else { &data_allowed };
                        let id = sampler.sample(&blended, allowed)? as u32;
                        if dump {
                            scores.push(ScoreRecord {
                                stage: Stage::At,
                                step: r,
                                codebook: Some(k),
                                scores: blended,
                            });
                        }
                        if k == 0 && id == fill {
                            frames = Some(r);
                        }
                        id
                    }
                };
            }
        } else {
            for (k, cell) in cells.iter().enumerate() {
                if let Cell::Forced(id) = cell {
                    row[k] = *id;
                }
            }
        }
        pending.push(TokenStep::At(row.clone()));
        rows.push(row);
    }

    let full = match frames {
        Some(t) if rows.len() >= t + k_books - 1 => {
            rows.truncate(t + k_books - 1);
            remove_delay(&DelayedGrid::from_rows(rows, &vocab)?)?
        }
        // cap reached: keep the frames whose every codebook was generated
        _ => {
            let done = rows.len().saturating_sub(k_books - 1);
            let t = frames.map_or(done, |t| t.min(done));
            let complete: Vec<Vec<u32>> = (0..t)
                .map(|f| (0..k_books).map(|k| rows[f + k][k]).collect())
                .collect();
            AcousticGrid::from_rows(&complete, k_books)?
        }
    };
    Ok(AtOutput {
        grid: full.suffix(p),
        truncated,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub st: StOutput,
    pub at: AtOutput,
}

/// Both stages for one text. Stage seeds are derived from `cfg.seed`.
pub fn synthesize(
    model: &CodecLm,
    text: &str,
    prompt: &AcousticGrid,
    cfg: &GuidanceConfig,
    passes: Passes,
    dump: bool,
) -> Result<Synthesis> {
    let st = generate_st_inner(model, text, cfg, passes, dump)?;
    let at = generate_at_inner(model, text, &st.stream, prompt, cfg, passes, dump)?;
    Ok(Synthesis { st, at })
}

pub const DEFAULT_PUNCTUATION: &[char] = &['，', '。', '！', '？', '；', ',', '.', '!', '?', ';'];

/// Splits `text` at punctuation with [`DEFAULT_PUNCTUATION`].
pub fn segment_text(text: &str, min_len: usize) -> Result<Vec<String>> {
    segment_text_with(text, min_len, DEFAULT_PUNCTUATION)
}

/// Greedy: a segment ends at the first punctuation mark that makes it at
/// least `min_len` characters long. A shorter trailing remainder joins the
/// previous segment.
pub fn segment_text_with(text: &str, min_len: usize, punctuation: &[char]) -> Result<Vec<String>> {
    if min_len == 0 {
        return Err(Error::InvalidConfig("min_len must be at least 1".into()));
    }
    let mut segments: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut len = 0usize;
    for c in text.chars() {
        current.push(c);
        len += 1;
        if len >= min_len && punctuation.contains(&c) {
            segments.push(std::mem::take(&mut current));
            len = 0;
        }
    }
    if !current.is_empty() {
        match segments.last_mut() {
            Some(last) if len < min_len => last.push_str(&current),
            _ => segments.push(current),
        }
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

/// Joins clips with `round(gap_ms / 1000 * sample_rate)` zero samples
/// between neighbours.
pub fn concat_clips(clips: &[Clip], sample_rate: u32, gap_ms: f64) -> Result<Vec<f32>> {
    if let Some(c) = clips.iter().find(|c| c.sample_rate != sample_rate) {
        return Err(Error::MixedSampleRates(sample_rate, c.sample_rate));
    }
    if !(gap_ms.is_finite() && gap_ms >= 0.0) {
        return Err(Error::InvalidConfig("gap must be a non-negative duration".into()));
    }
    let gap = (gap_ms / 1000.0 * sample_rate as f64).round() as usize;
    let total = clips.iter().map(|c| c.samples.len()).sum::<usize>() + gap * clips.len().saturating_sub(1);
    let mut out = Vec::with_capacity(total);
    for (i, c) in clips.iter().enumerate() {
        if i > 0 {
            out.extend(std::iter::repeat(0.0).take(gap));
        }
        out.extend_from_slice(&c.samples);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::text::CharVocab;
    use crate::vocab::TokenVocabulary;
    use candle_core::DType;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn blend_examples() {
        let c = [0.0, 1.0];
        assert_eq!(blend_stage1(&c, &[1.0, 0.0], 1.0).unwrap(), c.to_vec());
        assert!(close(&blend_stage1(&c, &[1.0, 0.0], 1.5).unwrap(), &[-0.5, 1.5]));
        assert!(close(&blend_stage1(&c, &c, 3.7).unwrap(), &c));
        assert!(blend_stage1(&c, &[1.0], 1.5).is_err());

        let out = blend_stage2(&[0.0, -1.0], &[-1.0, 0.0], &[-0.5, -0.5], 1.3, 1.5).unwrap();
        assert!(close(&out, &[0.70, -1.70]), "{out:?}");
        let cond = [-0.3, -2.0, -4.5];
        assert_eq!(blend_stage2(&cond, &[0.1; 3], &[9.0; 3], 1.0, 1.0).unwrap(), cond.to_vec());
        assert!(close(&blend_stage2(&cond, &cond, &cond, -2.0, 4.0).unwrap(), &cond));
        assert!(blend_stage2(&cond, &cond, &cond[..2], 1.3, 1.5).is_err());
        let [a, b, c] = stage2_coefficients(1.3, 1.5);
        assert!((a - 1.95).abs() < 1e-12 && (b + 0.45).abs() < 1e-12 && (c + 0.5).abs() < 1e-12);
    }

    #[test]
    fn renormalised_scores_sum_to_one() {
        let c = log_softmax(&[0.3, -1.0, 2.0, 0.0]);
        let t = log_softmax(&[1.0, 1.0, -3.0, 0.5]);
        let s = log_softmax(&[0.0, 0.0, 0.0, 0.0]);
        let b = log_softmax(&blend_stage2(&c, &t, &s, 1.3, 1.5).unwrap());
        let total: f64 = b.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn greedy_and_masked_sampling() {
        let mut s = Sampler::new(1, 1.0, 1);
        assert_eq!(s.sample(&[0.0, 2.0, 2.0, 1.0], &[true; 4]).unwrap(), 1);
        assert_eq!(s.sample(&[0.0, 2.0, 2.0, 1.0], &[true, false, true, true]).unwrap(), 2);
        assert!(s.sample(&[0.0, 1.0], &[false, false]).is_err());
        let mut s = Sampler::new(2, 1.0, 2);
        for _ in 0..200 {
            let id = s.sample(&[5.0, 4.0, -1.0, 4.5], &[true; 4]).unwrap();
            assert!(id == 0 || id == 3);
        }
    }

    #[test]
    fn invalid_guidance_rejected() {
        let bad = GuidanceConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GuidanceConfig {
            top_k: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GuidanceConfig {
            alpha: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn segmentation_examples() {
        let mut text: Vec<char> = vec!['x'; 100];
        for i in [34, 59, 99] {
            text[i] = ',';
        }
        let text: String = text.into_iter().collect();
        let segs = segment_text(&text, 30).unwrap();
        assert_eq!(segs.iter().map(|s| s.chars().count()).collect::<Vec<_>>(), vec![35, 65]);
        assert_eq!(segs.concat(), text);

        let short = "twenty chars, yes ok";
        assert_eq!(segment_text(short, 30).unwrap(), vec![short.to_string()]);
        let one = "no punctuation until the very end of this sentence.";
        assert_eq!(segment_text(one, 30).unwrap(), vec![one.to_string()]);
        assert!(segment_text("", 30).unwrap().is_empty());
        assert!(segment_text("a", 0).is_err());
        assert_eq!(segment_text("ab。cd。", 1).unwrap(), vec!["ab。", "cd。"]);
    }

    #[test]
    fn concat_examples() {
        let a = Clip {
            sample_rate: 16000,
            samples: vec![1.0; 10],
        };
        let out = concat_clips(&[a.clone(), a.clone()], 16000, 100.0).unwrap();
        assert_eq!(out.len(), 20 + 1600);
        assert!(out[10..1610].iter().all(|v| *v == 0.0));
        assert_eq!(concat_clips(&[a.clone()], 16000, 100.0).unwrap(), a.samples);
        assert!(concat_clips(&[], 16000, 100.0).unwrap().is_empty());
        let b = Clip {
            sample_rate: 8000,
            samples: vec![],
        };
        assert!(matches!(
            concat_clips(&[a, b], 16000, 100.0),
            Err(Error::MixedSampleRates(16000, 8000))
        ));
    }

    fn micro(k: usize) -> CodecLm {
        let vocab = TokenVocabulary::new(20, 8, k).unwrap();
        CodecLm::new(ModelConfig::micro(vocab), CharVocab::from_texts(["abc d"]), 3, DType::F32).unwrap()
    }

    #[test]
    fn strengths_of_one_match_conditional_sampling() {
        let model = micro(3);
        for seed in 0..4 {
            let cfg = GuidanceConfig {
                seed,
                max_st_len: 12,
                max_at_len: 10,
                ..Default::default()
            }
            .unguided();
            let g = synthesize(&model, "ab c", &AcousticGrid::empty(3), &cfg, Passes::Guided, false).unwrap();
            let u = synthesize(&model, "ab c", &AcousticGrid::empty(3), &cfg, Passes::Conditional, false).unwrap();
            assert_eq!(g, u);
            assert!(validate_grid(&g.at.grid, model.vocab()).is_pass());
        }
    }

    #[test]
    fn st_length_one_is_flagged() {
        let model = micro(2);
        let cfg = GuidanceConfig {
            max_st_len: 1,
            ..Default::default()
        };
        for seed in 0..5 {
            let out = generate_st(&model, "abc", &GuidanceConfig { seed, ..cfg }, Passes::Guided).unwrap();
            assert!(out.stream.len() <= 1);
            assert_eq!(out.truncated, !out.stream.terminated());
            assert!(out.truncated || out.stream.is_empty());
        }
    }

    #[test]
    fn at_generation_respects_caps_and_prompt() {
        let model = micro(3);
        let st = SemanticStream::from_deduped(vec![1, 2, 3], true).unwrap();
        let prompt = AcousticGrid::from_rows(&[vec![1, 2, 3], vec![4, 5, 6]], 3).unwrap();
        let cfg = GuidanceConfig {
            max_at_len: 4,
            ..Default::default()
        };
        let out = generate_at_with_scores(&model, "ab", &st, &prompt, &cfg, Passes::Guided).unwrap();
        assert!(out.grid.frames() <= 4);
        assert!(validate_grid(&out.grid, model.vocab()).is_pass());
        for rec in &out.scores {
            let total: f64 = rec.scores.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(rec.step >= 2);
        }
        let k1 = micro(1);
        let out = generate_at(&k1, "ab", &st, &AcousticGrid::empty(1), &cfg, Passes::Guided).unwrap();
        assert!(validate_grid(&out.grid, k1.vocab()).is_pass());
        let wrong = AcousticGrid::from_rows(&[vec![1, 2]], 2).unwrap();
        assert!(generate_at(&model, "ab", &st, &wrong, &cfg, Passes::Guided).is_err());
        let bad = AcousticGrid::from_rows(&[vec![1, 2, 99]], 3).unwrap();
        assert!(generate_at(&model, "ab", &st, &bad, &cfg, Passes::Guided).is_err());
    }

    #[test]
    fn stop_just_before_the_cap_keeps_complete_frames() {
        let model = micro(3);
        let st = SemanticStream::from_deduped(vec![1, 2], true).unwrap();
        for seed in 0..60 {
            let cfg = GuidanceConfig {
                seed,
                max_at_len: 1 + (seed as usize % 3),
                temperature: 3.0,
                ..Default::default()
            };
            let out = generate_at(&model, "ab", &st, &AcousticGrid::empty(3), &cfg, Passes::Guided).unwrap();
            assert!(out.grid.frames() <= cfg.max_at_len);
            assert!(validate_grid(&out.grid, model.vocab()).is_pass());
        }
    }
}
