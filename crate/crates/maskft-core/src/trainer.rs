//! Training stages: full fine-tuning, continued full fine-tuning, and mask
//! fine-tuning.
//!
//! All stages share the same loop skeleton: assemble fixed-length token
//! windows from the corpus once, shuffle their order each epoch with a
//! seeded permutation, accumulate gradients over a batch of per-window
//! tapes, take one optimizer step, and track the best-validation
//! artifact. FFT updates
//! every parameter; MFT updates only mask scores and never touches the
//! model weights.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{subset, Example};
use crate::error::{Error, Result};
use crate::mask::{init_scores, BinaryMask, IndicatorSpec, MaskState, ScoreInit};
use crate::model::{autoregressive_loss_on_tape, MaskOverlay, ModelParams, TokenStream};
use crate::optim::{OptimKind, Optimizer};
use crate::record::{EvalPoint, RunRecord};
use crate::tape::Tape;
use crate::util::short_id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fft,
    ContinuedFft,
    Mft,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Fft => "fft",
            Stage::ContinuedFft => "continued_fft",
            Stage::Mft => "mft",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn as_range(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl std::fmt::Display for LayerRange {
    /// Inclusive form, e.g. layers 0..4 print as "0-3".
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.start, self.end.saturating_sub(1))
    }
}

/// One run's full recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Tokens per training window; clamped to `max_seq_len + 1`.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Fraction of the train split to use (seeded sample of whole
    /// sequences).
    #[serde(default = "default_data_ratio")]
    pub data_ratio: f64,
    /// MFT only: contiguous layer group to mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layers: Option<LayerRange>,
    /// MFT only: indicator configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicator: Option<IndicatorSpec>,
    /// MFT only: score initialization; defaults to weight magnitudes in
    /// ratio mode and zeros in threshold mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_init: Option<ScoreInit>,
    #[serde(default)]
    pub optimizer: OptimKind,
}

fn default_batch_size() -> usize {
    8
}
fn default_eval_every() -> usize {
    10
}
fn default_window() -> usize {
    128
}
fn default_data_ratio() -> f64 {
    1.0
}

impl TrainPlan {
    pub fn fft(epochs: usize, lr: f64, seed: u64) -> Self {
        TrainPlan {
            stage: Stage::Fft,
            epochs,
            batch_size: default_batch_size(),
            lr,
            seed,
            eval_every: default_eval_every(),
            window: default_window(),
            data_ratio: 1.0,
            target_layers: None,
            indicator: None,
            score_init: None,
            optimizer: OptimKind::default(),
        }
    }

    pub fn mft(epochs: usize, lr: f64, seed: u64, layers: LayerRange, indicator: IndicatorSpec) -> Self {
        TrainPlan {
            stage: Stage::Mft,
            target_layers: Some(layers),
            indicator: Some(indicator),
            ..Self::fft(epochs, lr, seed)
        }
    }

    fn validate(&self, expect: &[Stage]) -> Result<()> {
        if !expect.contains(&self.stage) {
            return Err(Error::InvalidConfig(format!(
                "plan stage is {}, expected one of {expect:?}",
                self.stage
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.window < 2 {
            return Err(Error::InvalidConfig(
                "batch_size and eval_every must be >= 1, window >= 2".into(),
            ));
        }
        if !(self.data_ratio > 0.0 && self.data_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "data_ratio must be in (0, 1], got {}",
                self.data_ratio
            )));
        }
        match self.stage {
            Stage::Mft => {
                if self.target_layers.is_none() || self.indicator.is_none() {
                    return Err(Error::InvalidConfig(
                        "mft plan needs target_layers and indicator".into(),
                    ));
                }
            }
            _ => {
                if self.target_layers.is_some() || self.indicator.is_some() {
                    return Err(Error::InvalidConfig(
                        "fft plans must not carry mask settings".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn run_id(&self) -> String {
        let echo = serde_json::to_vec(self).expect("plan serializes");
        short_id(&echo)
    }
}

/// Splits a corpus stream (examples joined by newlines, in `order`) into
/// fixed-length token windows. A trailing window shorter than two tokens
/// cannot produce a prediction and is dropped.
pub fn assemble_windows(examples: &[Example], order: &[usize], window: usize) -> Vec<Vec<u32>> {
    let mut stream: Vec<u32> = Vec::new();
    for &i in order {
        stream.extend(examples[i].text().bytes().map(|b| b as u32));
        stream.push(b'\n' as u32);
    }
    stream
        .chunks(window)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Token-weighted mean autoregressive loss over the evaluation windows.
pub fn eval_loss(
    params: &ModelParams,
    examples: &[Example],
    window: usize,
    overlay: Option<MaskOverlay<'_>>,
) -> Result<f64> {
    let order: Vec<usize> = (0..examples.len()).collect();
    let windows = assemble_windows(examples, &order, window);
    if windows.is_empty() {
        return Err(Error::InvalidConfig("evaluation corpus produced no windows".into()));
    }
    let mut total_nll = 0.0;
    let mut total_positions = 0usize;
    for w in &windows {
        let toks = TokenStream::new(w.clone(), "eval", params.config.vocab_size)?;
        let mut tape = Tape::new();
        let (loss, _) = autoregressive_loss_on_tape(&mut tape, params, &toks, overlay)?;
        total_nll += tape.scalar_value(loss) * (w.len() - 1) as f64;
        total_positions += w.len() - 1;
    }
    Ok(total_nll / total_positions as f64)
}

/// What a step observer sees just before the optimizer update.
pub struct StepObservation<'a> {
    /// 1-based index of the step being taken.
    pub step: usize,
    pub windows: &'a [Vec<u32>],
    pub pre_step_params: &'a ModelParams,
    pub train_loss: f64,
}

pub struct FftOutcome {
    /// Best-validation checkpoint (the upper bound).
    pub best_params: ModelParams,
    /// Parameters after the last step (the overfitting comparison point).
    pub final_params: ModelParams,
    pub record: RunRecord,
}

pub struct MftOutcome {
    /// Scores after the last step.
    pub state: MaskState,
    /// Mask with the lowest validation loss seen during the run.
    pub best_mask: BinaryMask,
    pub record: RunRecord,
}

struct Corpus<'a> {
    train: &'a [Example],
    val: &'a [Example],
}

/// Full fine-tuning from `theta_p`. Every parameter receives updates.
pub fn run_fft(
    theta_p: &ModelParams,
    train: &[Example],
    val: &[Example],
    plan: &TrainPlan,
) -> Result<FftOutcome> {
    plan.validate(&[Stage::Fft])?;
    fft_loop(theta_p, Corpus { train, val }, plan, None)
}

/// Identical loop to [`run_fft`], starting from a fine-tuned checkpoint.
/// Kept separate so records of the overfitting comparison stay distinct.
pub fn run_continued_fft(
    theta_f: &ModelParams,
    train: &[Example],
    val: &[Example],
    plan: &TrainPlan,
) -> Result<FftOutcome> {
    plan.validate(&[Stage::ContinuedFft])?;
    fft_loop(theta_f, Corpus { train, val }, plan, None)
}

/// [`run_fft`] with a step observer, for loss-bookkeeping checks.
pub fn run_fft_observed(
    theta_p: &ModelParams,
    train: &[Example],
    val: &[Example],
    plan: &TrainPlan,
    observer: &mut dyn FnMut(StepObservation<'_>),
) -> Result<FftOutcome> {
    plan.validate(&[Stage::Fft, Stage::ContinuedFft])?;
    fft_loop(theta_p, Corpus { train, val }, plan, Some(observer))
}

fn fft_loop(
    start: &ModelParams,
    corpus: Corpus<'_>,
    plan: &TrainPlan,
    mut observer: Option<&mut dyn FnMut(StepObservation<'_>)>,
) -> Result<FftOutcome> {
    let t0 = Instant::now();
    let window = plan.window.min(start.config.max_seq_len + 1);
    let train_set = subset(corpus.train, plan.data_ratio, plan.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = Optimizer::new(plan.optimizer, plan.lr)?;
    let mut params = start.clone();
    let mut record = new_record(plan);

    let eval_and_track = |params: &ModelParams,
                              step: usize,
                              best: &mut (usize, f64, ModelParams),
                              record: &mut RunRecord|
     -> Result<()> {
        let v = eval_loss(params, corpus.val, window, None)?;
        record.evals.push(EvalPoint { step, val_loss: v });
        if v < best.1 {
            *best = (step, v, params.clone());
        }
        Ok(())
    };

    let mut best = (0usize, f64::INFINITY, params.clone());
    eval_and_track(&params, 0, &mut best, &mut record)?;

    let mut step = 0usize;
    let order: Vec<usize> = (0..train_set.len()).collect();
    let windows = assemble_windows(&train_set, &order, window);
    'train: for _epoch in 0..plan.epochs {
        let mut epoch_windows = windows.clone();
        epoch_windows.shuffle(&mut rng);
        for batch in epoch_windows.chunks(plan.batch_size) {
            let outcome = batch_grads(&params, batch, None);
            let (batch_loss, grads) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    record.failed = true;
                    record.fail_reason = Some(e.to_string());
                    break 'train;
                }
            };
            if let Some(obs) = observer.as_deref_mut() {
                obs(StepObservation {
                    step: step + 1,
                    windows: batch,
                    pre_step_params: &params,
                    train_loss: batch_loss,
                });
            }
            opt.begin_step();
            for (path, grad) in &grads {
                let updated = opt.update(path, params.get(path)?, grad)?;
                params.set(path, updated)?;
            }
            step += 1;
            record.train_loss.push(batch_loss);
            if step % plan.eval_every == 0 {
                eval_and_track(&params, step, &mut best, &mut record)?;
            }
        }
    }
    if !record.failed && record.evals.last().map(|e| e.step) != Some(step) {
        eval_and_track(&params, step, &mut best, &mut record)?;
    }

    record.best_step = best.0;
    record.best_val_loss = best.1;
    record.final_val_loss = record.evals.last().map(|e| e.val_loss).unwrap_or(f64::INFINITY);
    record.wall_clock_secs = t0.elapsed().as_secs_f64();
    Ok(FftOutcome { best_params: best.2, final_params: params, record })
}

/// Mask fine-tuning: freezes `theta_f`, learns scores over the target
/// layers' linear weights, and keeps the best-validation binary mask.
pub fn run_mft(theta_f: &ModelParams, train: &[Example], val: &[Example], plan: &TrainPlan) -> Result<MftOutcome> {
    plan.validate(&[Stage::Mft])?;
    let t0 = Instant::now();
    let layers = plan.target_layers.expect("validated");
    let indicator = plan.indicator.expect("validated");
    let targets = theta_f.maskable_paths(layers.as_range())?;
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let init = plan.score_init.unwrap_or(match indicator {
        IndicatorSpec::Ratio { .. } => ScoreInit::WeightMagnitude,
        IndicatorSpec::Threshold { .. } => ScoreInit::Zeros,
    });
    let mut state = init_scores(theta_f, &targets, indicator, init, plan.seed)?;

    let window = plan.window.min(theta_f.config.max_seq_len + 1);
    let train_set = subset(train, plan.data_ratio, plan.seed)?;
    let frozen = theta_f.frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = Optimizer::new(plan.optimizer, plan.lr)?;
    let mut record = new_record(plan);

    let mut best: (usize, f64, BinaryMask) = (0, f64::INFINITY, state.apply_indicator()?);
    let eval_and_track = |state: &MaskState, step: usize, best: &mut (usize, f64, BinaryMask), record: &mut RunRecord| -> Result<()> {
        let v = eval_loss(&frozen, val, window, Some(MaskOverlay::Scores(state)))?;
        record.evals.push(EvalPoint { step, val_loss: v });
        if v < best.1 {
            *best = (step, v, state.apply_indicator()?);
        }
        Ok(())
    };
    eval_and_track(&state, 0, &mut best, &mut record)?;

    let mut step = 0usize;
    let order: Vec<usize> = (0..train_set.len()).collect();
    let windows = assemble_windows(&train_set, &order, window);
    'train: for _epoch in 0..plan.epochs {
        let mut epoch_windows = windows.clone();
        epoch_windows.shuffle(&mut rng);
        for batch in epoch_windows.chunks(plan.batch_size) {
            let outcome = batch_grads(&frozen, batch, Some(&state));
            let (batch_loss, grads) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    record.failed = true;
                    record.fail_reason = Some(e.to_string());
                    break 'train;
                }
            };
            opt.begin_step();
            for (path, grad) in &grads {
                let updated = opt.update(path, state.scores(path)?, grad)?;
                state.set_scores(path, updated)?;
            }
            step += 1;
            record.train_loss.push(batch_loss);
            if step % plan.eval_every == 0 {
                eval_and_track(&state, step, &mut best, &mut record)?;
            }
        }
    }
    if !record.failed && record.evals.last().map(|e| e.step) != Some(step) {
        eval_and_track(&state, step, &mut best, &mut record)?;
    }

    record.best_step = best.0;
    record.best_val_loss = best.1;
    record.final_val_loss = record.evals.last().map(|e| e.val_loss).unwrap_or(f64::INFINITY);
    record.wall_clock_secs = t0.elapsed().as_secs_f64();
    Ok(MftOutcome { state, best_mask: best.2, record })
}

/// Mean loss and averaged gradients over one batch of windows. With a mask
/// state, gradients flow to the scores; otherwise to the parameters.
fn batch_grads(
    params: &ModelParams,
    batch: &[Vec<u32>],
    mask: Option<&MaskState>,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut batch_loss = 0.0;
    for w in batch {
        let toks = TokenStream::new(w.clone(), "train", params.config.vocab_size)?;
        let mut tape = Tape::new();
        let overlay = mask.map(MaskOverlay::Scores);
        let (loss, bound) = autoregressive_loss_on_tape(&mut tape, params, &toks, overlay)?;
        batch_loss += tape.scalar_value(loss) * inv_b;
        tape.backward(loss)?;
        let vars = if mask.is_some() { &bound.score_vars } else { &bound.param_vars };
        for (path, var) in vars {
            if let Some(g) = tape.grad(*var) {
                let acc = grads
                    .entry(path.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi * inv_b;
                }
            }
        }
    }
    Ok((batch_loss, grads))
}

fn new_record(plan: &TrainPlan) -> RunRecord {
    RunRecord {
        run_id: plan.run_id(),
        stage: plan.stage.to_string(),
        seed: plan.seed,
        plan: serde_json::to_value(plan).expect("plan serializes"),
        train_loss: Vec::new(),
        evals: Vec::new(),
        best_step: 0,
        best_val_loss: f64::INFINITY,
        final_val_loss: f64::INFINITY,
        failed: false,
        fail_reason: None,
        wall_clock_secs: 0.0,
        checkpoint: None,
        mask_file: None,
        base_checkpoint_sha256: None,
    }
}
