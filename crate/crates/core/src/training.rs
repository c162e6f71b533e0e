//! Training: sequence assembly, condition dropout, the weighted
//! cross-entropy objective and the optimisation loop.
//!
//! Targets of one example, in decoder order:
//!
//! * semantic targets `s_1 .. s_n, S_eos`, predicted from the last text
//!   position and then from each semantic step;
//! * acoustic target rows, predicted from the `S_eos` step and then from each
//!   fed delayed row. These are the `T + K - 1` delayed rows; with a single
//!   codebook one extra all-fill row is appended.
//!
//! Fill cells carry no loss except one: head 1 at row `T + 1`, whose target
//! is `A_fill`. That cell is how the model learns where acoustic generation
//! stops. The last target row is never fed back as input.

use std::io::Write;

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainState;
use crate::backbone::{CodecLm, DecoderSequence, TokenStep};
use crate::delay::{apply_delay, delayed_frame, DelayedGrid};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::text::CharVocab;
use crate::vocab::{dedup_consecutive, AcousticGrid, SemanticStream, TokenVocabulary};

/// Acoustic loss weights for the first twelve codebooks, coarse to fine.
pub const DEFAULT_AT_WEIGHTS: [f64; 12] = [5.0, 2.0, 1.0, 0.5, 0.5, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be positive and finite, got {alpha:?}"
            )));
        }
        Ok(Self(alpha))
    }

    /// The default list truncated to `k` codebooks.
    pub fn default_for(k: usize) -> Result<Self> {
        if k == 0 || k > DEFAULT_AT_WEIGHTS.len() {
            return Err(Error::InvalidConfig(format!(
                "no default loss weights for {k} codebooks"
            )));
        }
        Self::new(DEFAULT_AT_WEIGHTS[..k].to_vec())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub text_ids: Vec<u32>,
    pub st: SemanticStream,
    pub at_delayed: DelayedGrid,
    /// Semantic ids fed to the model (`S_eos` included); `NULL_COND` when dropped.
    pub st_inputs: Vec<u32>,
    /// Semantic targets (`S_eos` included).
    pub st_targets: Vec<u32>,
    pub st_mask: Vec<bool>,
    /// Acoustic target rows, K ids each.
    pub at_targets: Vec<Vec<u32>>,
    pub at_mask: Vec<Vec<bool>>,
    pub text_dropped: bool,
    pub st_dropped: bool,
}

impl TrainingExample {
    /// Number of ST+AT slots the example occupies: `(n + 1) + (T + K - 1)`.
    pub fn st_at_len(&self) -> usize {
        self.st_targets.len() + self.at_delayed.rows()
    }

    /// Token steps fed after the text prefix.
    pub fn steps(&self) -> Vec<TokenStep> {
        let fed_rows = self.at_targets.len().saturating_sub(1);
        self.st_inputs
            .iter()
            .map(|&id| TokenStep::St(id))
            .chain(self.at_targets[..fed_rows].iter().cloned().map(TokenStep::At))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budgets {
    pub text_budget: usize,
    pub st_at_budget: usize,
}

pub fn assemble_example(
    text: &str,
    st_raw: &[u32],
    at_grid: &AcousticGrid,
    vocab: &TokenVocabulary,
    chars: &CharVocab,
    budgets: Budgets,
) -> Result<TrainingExample> {
    let text_ids = chars.encode(text, budgets.text_budget).map_err(|e| match e {
        Error::TextOverBudget { len, budget } => Error::OverBudget {
            component: "text",
            needed: len,
            available: budget,
        },
        other => other,
    })?;
    let st = dedup_consecutive(st_raw, vocab)?.terminate();
    let at_delayed = apply_delay(at_grid, vocab)?;
    let needed = st.len() + 1 + at_delayed.rows();
    if needed > budgets.st_at_budget {
        let component = if st.len() + 1 > budgets.st_at_budget {
            "semantic tokens"
        } else {
            "acoustic tokens"
        };
        return Err(Error::OverBudget {
            component,
            needed,
            available: budgets.st_at_budget,
        });
    }
    let k = vocab.num_codebooks;
    let frames = at_delayed.source_frames();
    let st_targets = st.ids_with_eos(vocab);
    let mut at_targets: Vec<Vec<u32>> = (0..at_delayed.rows()).map(|r| at_delayed.row(r).to_vec()).collect();
    if k == 1 {
        at_targets.push(vec![vocab.a_fill()]);
    }
    let at_mask = (0..at_targets.len())
        .map(|r| {
            (0..k)
                .map(|c| delayed_frame(r, c, frames).is_some() || (c == 0 && r == frames))
                .collect()
        })
        .collect();
    Ok(TrainingExample {
        text_ids,
        st_inputs: st_targets.clone(),
        st_mask: vec![true; st_targets.len()],
        st_targets,
        st,
        at_delayed,
        at_targets,
        at_mask,
        text_dropped: false,
        st_dropped: false,
    })
}

/// Independently nulls the text prefix and the semantic region, each with
/// probability `p`. Dropped semantic inputs become `NULL_COND`; targets and
/// masks are untouched, so placeholders are never predicted.
pub fn drop_conditions(
    mut example: TrainingExample,
    rng: &mut impl Rng,
    p: f64,
    vocab: &TokenVocabulary,
) -> TrainingExample {
    let text_drop = rng.random::<f64>() < p;
    let st_drop = rng.random::<f64>() < p;
    example.text_dropped = text_drop;
    if st_drop {
        example.st_dropped = true;
        example.st_inputs = vec![vocab.st_null(); example.st_inputs.len()];
    }
    example
}

/// Flattened logits and targets for one batch, aligned row by row.
pub struct LossInputs<'a> {
    /// [N_st, st + 1]
    pub st_logits: &'a Tensor,
    pub st_targets: &'a [u32],
    pub st_mask: &'a [bool],
    /// [N_at, K, at + 1]
    pub at_logits: &'a Tensor,
    /// N_at * K, row-major
    pub at_targets: &'a [u32],
    pub at_mask: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub l_st: f64,
    pub l_at: Vec<f64>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

fn masked_ce(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<Tensor> {
    let dtype = logits.dtype();
    let device = logits.device();
    let safe: Vec<u32> = targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { t } else { 0 })
        .collect();
    let shape = logits.dims()[..logits.rank() - 1].to_vec();
    let idx = Tensor::from_vec(safe, shape.as_slice(), device)?.unsqueeze(logits.rank() - 1)?;
    let logp = candle_nn::ops::log_softmax(logits, logits.rank() - 1)?;
    let picked = logp.gather(&idx, logits.rank() - 1)?.squeeze(logits.rank() - 1)?;
    let m: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_vec(m, shape.as_slice(), device)?.to_dtype(dtype)?;
    Ok((picked * m)?.neg()?)
}

/// `L_ST + Σ_k α_k L_k`, each term a mean over its unmasked targets
/// (an empty region contributes 0).
pub fn compute_loss(inputs: &LossInputs<'_>, weights: &LossWeights) -> Result<LossBreakdown> {
    let n_st = inputs.st_logits.dim(0)?;
    if inputs.st_targets.len() != n_st || inputs.st_mask.len() != n_st {
        return Err(Error::DimensionMismatch(format!(
            "{n_st} semantic logit rows, {} targets, {} mask flags",
            inputs.st_targets.len(),
            inputs.st_mask.len()
        )));
    }
    let (n_at, k, _) = inputs.at_logits.dims3()?;
    if inputs.at_targets.len() != n_at * k || inputs.at_mask.len() != n_at * k {
        return Err(Error::DimensionMismatch(format!(
            "{n_at}x{k} acoustic logits, {} targets, {} mask flags",
            inputs.at_targets.len(),
            inputs.at_mask.len()
        )));
    }
    if weights.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} loss weights for {k} heads",
            weights.len()
        )));
    }
    let dtype = inputs.at_logits.dtype();
    let device = inputs.at_logits.device();

    let st_count = inputs.st_mask.iter().filter(|&&m| m).count();
    let l_st = if st_count == 0 {
        Tensor::zeros((), dtype, device)?
    } else {
        (masked_ce(inputs.st_logits, inputs.st_targets, inputs.st_mask)?.sum_all()? / st_count as f64)?
    };

    let mut counts = vec![0usize; k];
    for (i, &m) in inputs.at_mask.iter().enumerate() {
        if m {
            counts[i % k] += 1;
        }
    }
    let per_head = if n_at == 0 {
        Tensor::zeros(k, dtype, device)?
    } else {
        masked_ce(inputs.at_logits, inputs.at_targets, inputs.at_mask)?.sum(0)?
    };
    let scale: Vec<f64> = counts
        .iter()
        .zip(weights.as_slice())
        .map(|(&c, &w)| if c == 0 { 0.0 } else { w / c as f64 })
        .collect();
    let scale = Tensor::from_vec(scale, k, device)?.to_dtype(dtype)?;
    let inv_count: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    let inv_count = Tensor::from_vec(inv_count, k, device)?.to_dtype(dtype)?;
    let weighted = (&per_head * &scale)?.sum_all()?;
    let total = (&l_st + &weighted)?;
    Ok(LossBreakdown {
        l_st: l_st.to_dtype(DType::F64)?.to_scalar()?,
        l_at: (&per_head * &inv_count)?.to_dtype(DType::F64)?.to_vec1()?,
        total,
    })
}

/// Runs the model over a batch and evaluates the objective.
pub fn batch_loss(model: &CodecLm, batch: &[TrainingExample], weights: &LossWeights) -> Result<LossBreakdown> {
    let width = model.config().backbone.width;
    let k = model.vocab().num_codebooks;
    let encoded = model.text_encoder().encode_batch(
        &batch.iter().map(|e| e.text_ids.clone()).collect::<Vec<_>>(),
    )?;
    let mut seqs = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let text = if ex.text_dropped {
            model.text_encoder().null_vectors(ex.text_ids.len())?
        } else {
            encoded.get(i)?.narrow(0, 0, ex.text_ids.len())?
        };
        seqs.push(DecoderSequence {
            text,
            steps: ex.steps(),
        });
    }
    let hidden = model.hidden_states(&seqs)?;
    let (b, l, _) = hidden.dims3()?;
    let flat = hidden.reshape((b * l, width))?;

    let mut st_idx = Vec::new();
    let mut st_targets = Vec::new();
    let mut st_mask = Vec::new();
    let mut at_idx = Vec::new();
    let mut at_targets = Vec::new();
    let mut at_mask = Vec::new();
    for (i, (ex, seq)) in batch.iter().zip(&seqs).enumerate() {
        let base = i * l;
        let n_text = seq.text_len();
        for (j, (&t, &m)) in ex.st_targets.iter().zip(&ex.st_mask).enumerate() {
            st_idx.push((base + n_text - 1 + j) as u32);
            st_targets.push(t);
            st_mask.push(m);
        }
        let eos_at = n_text + ex.st_inputs.len() - 1;
        for (r, (row, mask)) in ex.at_targets.iter().zip(&ex.at_mask).enumerate() {
            at_idx.push((base + eos_at + r) as u32);
            at_targets.extend_from_slice(row);
            at_mask.extend_from_slice(mask);
        }
    }
    let device = model.device();
    let st_hidden = flat.index_select(&Tensor::from_vec(st_idx.clone(), st_idx.len(), device)?, 0)?;
    let at_hidden = flat.index_select(&Tensor::from_vec(at_idx.clone(), at_idx.len(), device)?, 0)?;
    let st_logits = model.st_logits(&st_hidden)?;
    let at_logits = model.at_logits(&at_hidden)?;
    debug_assert_eq!(at_logits.dim(1)?, k);
    compute_loss(
        &LossInputs {
            st_logits: &st_logits,
            st_targets: &st_targets,
            st_mask: &st_mask,
            at_logits: &at_logits,
            at_targets: &at_targets,
            at_mask: &at_mask,
        },
        weights,
    )
}

/// Linear warm-up from 0 to `peak`, then cosine decay to `peak * min_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total_steps: usize, min_ratio: f64) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_frac * total_steps as f64).round() as usize,
            total_steps,
            min_ratio,
        }
    }

    /// Rate for the 0-based step index; the first step already moves.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let min = self.peak * self.min_ratio;
        min + (self.peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates of one parameter, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Moments are kept in f64 per trainable
/// parameter name so they can be checkpointed exactly.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    pub fn restore(&mut self, step: u64, moments: Vec<Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// `grads[i]` is the flattened gradient of `params[i]`, if it has one.
    pub fn update(&mut self, params: &[(&str, &Var)], grads: &[Option<Vec<f64>>], lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((name, var), g) in params.iter().zip(grads) {
            let Some(g) = g else {
                continue;
            };
            let slot = match self.moments.iter().position(|m| m.name == *name) {
                Some(i) => i,
                None => {
                    self.moments.push(Moments {
                        name: name.to_string(),
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    self.moments.len() - 1
                }
            };
            let mo = &mut self.moments[slot];
            if mo.m.len() != g.len() {
                return Err(Error::DimensionMismatch(format!(
                    "optimizer state for {name} has {} entries, gradient has {}",
                    mo.m.len(),
                    g.len()
                )));
            }
            let t = var.as_tensor();
            let mut p = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for i in 0..p.len() {
                let gi = g[i] * grad_scale;
                mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * gi;
                mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                let mut step = m_hat / (v_hat.sqrt() + c.eps);
                if c.weight_decay > 0.0 {
                    step += c.weight_decay * p[i];
                }
                p[i] -= lr * step;
            }
            let updated = Tensor::from_vec(p, t.shape(), t.device())?.to_dtype(t.dtype())?;
            var.set(&updated)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub drop_prob: f64,
    pub seed: u64,
    /// Acoustic loss weights; defaults to the built-in list truncated to K.
    pub loss_weights: Option<Vec<f64>>,
    pub optimizer: AdamWConfig,
    /// Step at which training switches to the fine-tuning corpus, if any.
    pub finetune_from: Option<usize>,
    /// Only adapter and head weights train during fine-tuning when set.
    pub finetune_adapters_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            peak_lr: 1e-4,
            warmup_frac: 0.05,
            min_lr_ratio: 0.0,
            grad_clip: 1.0,
            drop_prob: 0.1,
            seed: 0,
            loss_weights: None,
            optimizer: AdamWConfig::default(),
            finetune_from: None,
            finetune_adapters_only: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.peak_lr, self.warmup_frac, self.steps, self.min_lr_ratio)
    }

    pub fn weights(&self, k: usize) -> Result<LossWeights> {
        match &self.loss_weights {
            Some(w) if w.len() == k => LossWeights::new(w.clone()),
            Some(w) => Err(Error::InvalidConfig(format!(
                "{} loss weights configured for {k} codebooks",
                w.len()
            ))),
            None => LossWeights::default_for(k),
        }
    }
}

/// One line of the metric log; `step` counts completed steps, so the first
/// line is step 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub l_st: f64,
    pub l_at: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub seed: u64,
    pub text_drops: usize,
    pub st_drops: usize,
}

impl StepMetrics {
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

pub struct Trainer {
    pub model: CodecLm,
    pub optimizer: AdamW,
    cfg: TrainConfig,
    weights: LossWeights,
    schedule: LrSchedule,
    corpus: Vec<TrainingExample>,
    finetune: Vec<TrainingExample>,
    next_step: usize,
}

impl Trainer {
    pub fn new(model: CodecLm, cfg: TrainConfig, corpus: Vec<TrainingExample>) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidConfig("empty training corpus".into()));
        }
        if !(0.0..=1.0).contains(&cfg.drop_prob) {
            return Err(Error::InvalidConfig("drop_prob must lie in [0, 1]".into()));
        }
        let weights = cfg.weights(model.vocab().num_codebooks)?;
        Ok(Self {
            model,
            optimizer: AdamW::new(cfg.optimizer),
            schedule: cfg.schedule(),
            weights,
            cfg,
            corpus,
            finetune: Vec::new(),
            next_step: 0,
        })
    }

    pub fn with_finetune(mut self, corpus: Vec<TrainingExample>) -> Self {
        self.finetune = corpus;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn set_next_step(&mut self, step: usize) {
        self.next_step = step;
    }

    /// Completed steps, optimizer moments and config for a checkpoint.
    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.next_step as u64,
            seed: self.cfg.seed,
            train: Some(self.cfg.clone()),
            optimizer: Some((self.optimizer.step_count(), self.optimizer.moments().to_vec())),
        }
    }

    /// Continues from a checkpoint's state: the next step is `state.step + 1`
    /// in metric-log numbering.
    pub fn resume(&mut self, state: TrainState) {
        self.next_step = state.step as usize;
        if let Some((step, moments)) = state.optimizer {
            self.optimizer.restore(step, moments);
        }
    }

    pub fn is_done(&self) -> bool {
        self.next_step >= self.cfg.steps
    }

    fn in_finetune(&self, step: usize) -> bool {
        !self.finetune.is_empty() && self.cfg.finetune_from.is_some_and(|s| step >= s)
    }

    /// Draws the batch and drop flags of `step`; depends only on (seed, step).
    pub fn batch_for(&self, step: usize) -> Vec<TrainingExample> {
        let pool = if self.in_finetune(step) {
            &self.finetune
        } else {
            &self.corpus
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "batch", step as u64));
        let indices: Vec<usize> = if self.cfg.batch_size <= pool.len() {
            sample(&mut rng, pool.len(), self.cfg.batch_size).into_vec()
        } else {
            (0..self.cfg.batch_size).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "drop", step as u64));
        let vocab = *self.model.vocab();
        indices
            .into_iter()
            .map(|i| drop_conditions(pool[i].clone(), &mut drop_rng, self.cfg.drop_prob, &vocab))
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.next_step;
        if self.in_finetune(step) && self.cfg.finetune_adapters_only {
            self.model
                .store_mut()
                .set_trainable(|name| name.contains(".lora.") || name.contains("_head"));
        }
        let batch = self.batch_for(step);
        let loss = batch_loss(&self.model, &batch, &self.weights)?;
        let value = loss.total_value()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("l_st={} l_at={:?}", loss.l_st, loss.l_at),
            });
        }
        let grads = loss.total.backward()?;
        let params: Vec<(&str, &Var)> = self
            .model
            .store()
            .trainable()
            .map(|p| (p.name.as_str(), &p.var))
            .collect();
        let flat: Vec<Option<Vec<f64>>> = params
            .iter()
            .map(|(_, var)| {
                grads
                    .get(var.as_tensor())
                    .map(|g| g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>())
                    .transpose()
            })
            .collect::<std::result::Result<_, _>>()?;
        let sq: f64 = flat.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "non-finite gradient norm".into(),
            });
        }
        let scale = if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.cfg.grad_clip / grad_norm
        } else {
            1.0
        };
        let lr = self.schedule.lr(step);
        let mut optimizer = std::mem::replace(&mut self.optimizer, AdamW::new(self.cfg.optimizer));
        let result = optimizer.update(&params, &flat, lr, scale);
        self.optimizer = optimizer;
        result?;
        self.next_step += 1;
        Ok(StepMetrics {
            step: self.next_step,
            loss: value,
            l_st: loss.l_st,
            l_at: loss.l_at,
            lr,
            grad_norm,
            seed: self.cfg.seed,
            text_drops: batch.iter().filter(|e| e.text_dropped).count(),
            st_drops: batch.iter().filter(|e| e.st_dropped).count(),
        })
    }
}

/// Mean objective over `examples` with conditions intact, in chunks of `chunk`.
pub fn evaluate(
    model: &CodecLm,
    examples: &[TrainingExample],
    weights: &LossWeights,
    chunk: usize,
) -> Result<EvalReport> {
    let mut total = 0.0;
    let mut l_st = 0.0;
    let mut l_at = vec![0.0; weights.len()];
    let mut n = 0.0;
    for part in examples.chunks(chunk.max(1)) {
        let loss = batch_loss(model, part, weights)?;
        let w = part.len() as f64;
        total += loss.total_value()? * w;
        l_st += loss.l_st * w;
        for (acc, v) in l_at.iter_mut().zip(&loss.l_at) {
            *acc += v * w;
        }
        n += w;
    }
    Ok(EvalReport {
        total: total / n,
        l_st: l_st / n,
        l_at: l_at.into_iter().map(|v| v / n).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: f64,
    pub l_st: f64,
    pub l_at: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::nn::to_vec_f64;
    use candle_core::Device;

    const F: u32 = 8;

    fn vocab(k: usize) -> TokenVocabulary {
        TokenVocabulary::new(20, 8, k).unwrap()
    }

    fn chars() -> CharVocab {
        CharVocab::from_texts(["abcdefgh "])
    }

    fn budgets(st_at: usize) -> Budgets {
        Budgets {
            text_budget: 16,
            st_at_budget: st_at,
        }
    }

    fn grid23() -> AcousticGrid {
        AcousticGrid::from_rows(&[vec![1, 2, 3], vec![4, 5, 6]], 3).unwrap()
    }

    #[test]
    fn assembles_semantic_and_delayed_parts() {
        let v = vocab(3);
        let ex = assemble_example("abc", &[5, 5, 7], &grid23(), &v, &chars(), budgets(80)).unwrap();
        assert_eq!(ex.st_targets, vec![5, 7, 20]);
        assert_eq!(ex.at_targets.len(), 4);
        assert_eq!(ex.at_targets[0], vec![1, F, F]);
        assert_eq!(ex.at_targets[3], vec![F, F, 6]);
        // data cells plus the stop cell (row T, head 1)
        assert_eq!(ex.at_mask[0], vec![true, false, false]);
        assert_eq!(ex.at_mask[2], vec![true, true, true]);
        assert_eq!(ex.at_mask[3], vec![false, false, true]);
        assert_eq!(ex.steps().len(), 3 + 3);
    }

    #[test]
    fn empty_grid_keeps_only_the_stop_cell() {
        let v = vocab(3);
        let ex = assemble_example("abc", &[5], &AcousticGrid::empty(3), &v, &chars(), budgets(80)).unwrap();
        assert_eq!(ex.at_targets, vec![vec![F; 3]; 2]);
        let cells: usize = ex.at_mask.iter().flatten().filter(|&&m| m).count();
        assert_eq!(cells, 1);
        assert!(ex.at_mask[0][0]);
    }

    #[test]
    fn single_codebook_gets_an_explicit_stop_row() {
        let v = vocab(1);
        let g = AcousticGrid::from_rows(&[vec![1], vec![2]], 1).unwrap();
        let ex = assemble_example("ab", &[3], &g, &v, &chars(), budgets(80)).unwrap();
        assert_eq!(ex.at_targets, vec![vec![1], vec![2], vec![F]]);
        assert!(ex.at_mask.iter().all(|m| m[0]));
        assert_eq!(ex.st_at_len(), 2 + 2);
        assert_eq!(ex.steps().len(), 2 + 2);
    }

    #[test]
    fn budget_boundary() {
        let v = vocab(3);
        // (2 + 1) + (2 + 3 - 1) = 7 slots
        assert!(assemble_example("abc", &[5, 7], &grid23(), &v, &chars(), budgets(7)).is_ok());
        match assemble_example("abc", &[5, 7], &grid23(), &v, &chars(), budgets(6)) {
            Err(Error::OverBudget { component, needed, available }) => {
                assert_eq!((component, needed, available), ("acoustic tokens", 7, 6));
            }
            other => panic!("unexpected {other:?}"),
        }
        let long_text = "abcdefgh abcdefgh";
        assert!(matches!(
            assemble_example(long_text, &[5], &grid23(), &v, &chars(), budgets(80)),
            Err(Error::OverBudget { component: "text", .. })
        ));
    }

    #[test]
    fn dropout_extremes() {
        let v = vocab(3);
        let ex = assemble_example("abc", &[5, 7], &grid23(), &v, &chars(), budgets(80)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let kept = drop_conditions(ex.clone(), &mut rng, 0.0, &v);
            assert_eq!(kept, ex);
            let dropped = drop_conditions(ex.clone(), &mut rng, 1.0, &v);
            assert!(dropped.text_dropped && dropped.st_dropped);
            assert_eq!(dropped.st_inputs, vec![v.st_null(); 3]);
            assert_eq!(dropped.st_targets, ex.st_targets);
            assert_eq!(dropped.st_mask, ex.st_mask);
        }
    }

    fn t(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn unit_head_losses_sum_to_weight_total() {
        // Two equal logits per head give CE = ln 2 per cell; scale so each
        // head's CE is exactly 1 by using logits (0, x) with target 0 where
        // ln(1 + e^x) = 1.
        let x = (std::f64::consts::E - 1.0).ln();
        let k = 12;
        let at = t([0.0, x].repeat(3 * k), &[3, k, 2]);
        let st = t(vec![0.0, 0.0], &[1, 2]);
        let w = LossWeights::default_for(12).unwrap();
        let out = compute_loss(
            &LossInputs {
                st_logits: &st,
                st_targets: &[0],
                st_mask: &[false],
                at_logits: &at,
                at_targets: &vec![0; 3 * k],
                at_mask: &vec![true; 3 * k],
            },
            &w,
        )
        .unwrap();
        for l in &out.l_at {
            assert!((l - 1.0).abs() < 1e-12);
        }
        assert!((out.total_value().unwrap() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 7;
        let st = t(vec![0.3; 2 * v], &[2, v]);
        let at = t(vec![0.0; 0], &[0, 1, 3]);
        let out = compute_loss(
            &LossInputs {
                st_logits: &st,
                st_targets: &[1, 6],
                st_mask: &[true, true],
                at_logits: &at,
                at_targets: &[],
                at_mask: &[],
            },
            &LossWeights::uniform(1).unwrap(),
        )
        .unwrap();
        assert!((out.l_st - (v as f64).ln()).abs() < 1e-12);
        assert!((out.total_value().unwrap() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_acoustics_leave_semantic_loss() {
        let st = t(vec![1.0, 0.0, -1.0], &[1, 3]);
        let at = t(vec![0.5, 2.0, 0.1, -3.0], &[1, 2, 2]);
        let out = compute_loss(
            &LossInputs {
                st_logits: &st,
                st_targets: &[2],
                st_mask: &[true],
                at_logits: &at,
                at_targets: &[0, 1],
                at_mask: &[false, false],
            },
            &LossWeights::new(vec![5.0, 2.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(out.total_value().unwrap(), out.l_st);
        assert_eq!(out.l_at, vec![0.0, 0.0]);
    }

    #[test]
    fn merged_uniform_weights_reduce_to_plain_cross_entropy() {
        let logits = vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3, 0.9, 0.4, -2.0];
        let targets = [2u32, 0, 1];
        let at = t(logits.clone(), &[3, 1, 3]);
        let st = t(vec![], &[0, 4]);
        let out = compute_loss(
            &LossInputs {
                st_logits: &st,
                st_targets: &[],
                st_mask: &[],
                at_logits: &at,
                at_targets: &targets,
                at_mask: &[true; 3],
            },
            &LossWeights::uniform(1).unwrap(),
        )
        .unwrap();
        let plain = candle_nn::loss::cross_entropy(
            &t(logits, &[3, 3]),
            &Tensor::new(&targets, &Device::Cpu).unwrap(),
        )
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
        assert!((out.total_value().unwrap() - plain).abs() < 1e-6);
    }

    #[test]
    fn misaligned_inputs_error() {
        let st = t(vec![0.0; 6], &[2, 3]);
        let at = t(vec![0.0; 4], &[1, 2, 2]);
        let r = compute_loss(
            &LossInputs {
                st_logits: &st,
                st_targets: &[0],
                st_mask: &[true],
                at_logits: &at,
                at_targets: &[0, 0],
                at_mask: &[true, true],
            },
            &LossWeights::uniform(2).unwrap(),
        );
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn warmup_then_cosine() {
        let s = LrSchedule::new(1e-4, 0.05, 3000, 0.0);
        assert_eq!(s.warmup_steps, 150);
        assert!((s.lr(0) - 1e-4 / 150.0).abs() < 1e-18);
        assert!((s.lr(149) - 1e-4).abs() < 1e-18);
        assert!((s.lr(150) - 1e-4).abs() < 1e-18);
        assert!((s.lr(74) - 5e-5).abs() < 1e-18);
        assert!(s.lr(3000).abs() < 1e-18);
        assert!(s.lr(1000) > s.lr(2000));
    }

    #[test]
    fn default_weights_truncate() {
        assert_eq!(LossWeights::default_for(4).unwrap().as_slice(), &[5.0, 2.0, 1.0, 0.5]);
        let sum: f64 = LossWeights::default_for(12).unwrap().as_slice().iter().sum();
        assert!((sum - 10.0).abs() < 1e-12);
        assert!(LossWeights::new(vec![1.0, 0.0]).is_err());
        assert!(LossWeights::default_for(13).is_err());
    }

    fn tiny_model(k: usize, seed: u64) -> CodecLm {
        CodecLm::new(ModelConfig::micro(vocab(k)), chars(), seed, DType::F64).unwrap()
    }

    #[test]
    fn pad_content_never_changes_the_loss() {
        let v = vocab(3);
        let m = tiny_model(3, 4);
        let w = LossWeights::default_for(3).unwrap();
        let short = assemble_example("ab", &[5], &grid23(), &v, &chars(), budgets(80)).unwrap();
        let long_grid =
            AcousticGrid::from_rows(&[vec![1, 2, 3], vec![4, 5, 6], vec![7, 0, 1], vec![2, 2, 2]], 3).unwrap();
        let long = assemble_example("abcdef", &[5, 6, 7], &long_grid, &v, &chars(), budgets(80)).unwrap();
        let batch = [short, long];
        let before = batch_loss(&m, &batch, &w).unwrap().total_value().unwrap();
        let scramble = |name: &str, row: usize| {
            let var = &m.store().get(name).unwrap().var;
            let width = var.dim(1).unwrap();
            let mut values = to_vec_f64(var.as_tensor()).unwrap();
            for (i, x) in values[row * width..(row + 1) * width].iter_mut().enumerate() {
                *x = 3.0 * (i as f64).sin() - 1.0;
            }
            var.set(&Tensor::from_vec(values, var.dims(), &Device::Cpu).unwrap()).unwrap();
        };
        scramble("embedding", v.st_pad() as usize);
        scramble("text.embedding", crate::text::CHAR_PAD as usize);
        let after = batch_loss(&m, &batch, &w).unwrap().total_value().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_is_finite_and_positive_at_init() {
        let v = vocab(3);
        let m = tiny_model(3, 1);
        let ex = assemble_example("abc", &[5, 7], &grid23(), &v, &chars(), budgets(80)).unwrap();
        let w = LossWeights::default_for(3).unwrap();
        let loss = batch_loss(&m, &[ex], &w).unwrap();
        let total = loss.total_value().unwrap();
        assert!(total.is_finite() && total > 0.0);
        assert_eq!(loss.l_at.len(), 3);
    }
}
