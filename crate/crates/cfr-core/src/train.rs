//! Loss, Adam optimizer, the epoch loop, and evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AnswerTarget, SampleBundle};
use crate::error::{CfrError, Result};
use crate::head::predict;
use crate::model::{
    backward, forward_cached, init_params, AblationMode, CfrConfig, CfrParams, TextContext,
};

/// Single-label cross-entropy from pre-softmax logits, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(CfrError::argument(format!(
            "target {} out of range for {} answers",
            target,
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Mean loss and mean parameter gradients over a batch. Samples are
/// reduced in order, so results are deterministic.
pub fn batch_loss_and_grads(
    batch: &[SampleBundle],
    params: &CfrParams,
    ctx: &TextContext,
    config: &CfrConfig,
    mode: AblationMode,
) -> Result<(f64, CfrParams)> {
    if batch.is_empty() {
        return Err(CfrError::argument("empty batch"));
    }
    let mut grads = CfrParams::zeros(config);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let target = match &sample.target {
            AnswerTarget::Ffoe { answer } => *answer,
            AnswerTarget::Mc { candidates, gold } => candidates[*gold],
        };
        let (rho, _, cache) = forward_cached(sample, params, ctx, config, mode)?;
        total += cross_entropy(&cache.head.logits, target)?;
        let mut d_logits = rho;
        d_logits[target] -= 1.0;
        for d in d_logits.iter_mut() {
            *d *= scale;
        }
        backward(sample, params, config, mode, &cache, &d_logits, &mut grads)?;
    }
    Ok((total * scale, grads))
}

/// Optimizer configuration; defaults mirror the training setup the
/// model was tuned with (batch 32, lr 0.001, standard Adam moments).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.001,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(CfrError::argument("batch size must be at least 1"));
        }
        if self.learning_rate < 0.0 {
            return Err(CfrError::argument("learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments, one tensor per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: CfrParams,
    v: CfrParams,
    step: usize,
}

impl AdamState {
    pub fn new(config: &CfrConfig) -> Self {
        AdamState { m: CfrParams::zeros(config), v: CfrParams::zeros(config), step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

pub fn adam_step(
    params: &mut CfrParams,
    grads: &CfrParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);

    let mut p_tensors = params.named_tensors_mut();
    let g_tensors = grads.named_tensors();
    let mut m_tensors = state.m.named_tensors_mut();
    let mut v_tensors = state.v.named_tensors_mut();
    for i in 0..p_tensors.len() {
        let (pname, p) = &mut p_tensors[i];
        let (gname, g) = &g_tensors[i];
        if pname != gname || p.len() != g.len() {
            return Err(CfrError::shape(format!(
                "gradient tensor '{gname}' does not match parameter '{pname}'"
            )));
        }
        let m = m_tensors[i].1.data_mut();
        let v = v_tensors[i].1.data_mut();
        let pd = p.data_mut();
        let gd = g.data();
        for k in 0..pd.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gd[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gd[k] * gd[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            pd[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One line of the metric history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
}

/// Mini-batch training with per-epoch seeded shuffles; returns the
/// parameters with the best validation accuracy and the full history.
pub fn train_loop(
    train: &[SampleBundle],
    val: &[SampleBundle],
    ctx: &TextContext,
    config: &CfrConfig,
    tcfg: &TrainConfig,
    mode: AblationMode,
) -> Result<(CfrParams, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(CfrError::argument("empty training set"));
    }
    tcfg.validate()?;
    let mut params = init_params(config, config.seed);
    let mut state = AdamState::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best_params = params.clone();
    let mut best_acc = f64::NEG_INFINITY;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<SampleBundle> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = batch_loss_and_grads(&batch, &params, ctx, config, mode)?;
            adam_step(&mut params, &grads, &mut state, tcfg)?;
            epoch_loss += loss;
            batches += 1;
        }
        let val_acc = if val.is_empty() {
            0.0
        } else {
            evaluate(val, &params, ctx, config, mode)?
        };
        if val_acc > best_acc {
            best_acc = val_acc;
            best_params = params.clone();
        }
        history.push(EpochStats { epoch, loss: epoch_loss / batches.max(1) as f64, val_acc });
    }

    if history.is_empty() {
        best_params = params;
    }
    Ok((best_params, history))
}

/// Dataset accuracy: exact match for free-form samples, candidate-
/// restricted match for multiple choice.
pub fn evaluate(
    samples: &[SampleBundle],
    params: &CfrParams,
    ctx: &TextContext,
    config: &CfrConfig,
    mode: AblationMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CfrError::argument("empty evaluation set"));
    }
    let mut correct = 0usize;
    for sample in samples {
        let (rho, _, _) = forward_cached(sample, params, ctx, config, mode)?;
        match &sample.target {
            AnswerTarget::Ffoe { answer } => {
                if predict(&rho)? == *answer {
                    correct += 1;
                }
            }
            AnswerTarget::Mc { candidates, gold } => {
                if mc_pick(&rho, candidates)? == *gold {
                    correct += 1;
                }
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Restrict rho to the candidate set, renormalize, return the winning
/// candidate position.
pub fn mc_pick(rho: &[f64], candidates: &[usize]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(CfrError::argument("empty candidate list"));
    }
    let mut restricted = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let v = rho.get(c).ok_or_else(|| {
            CfrError::argument(format!("candidate {} out of range for {} answers", c, rho.len()))
        })?;
        restricted.push(*v);
    }
    let total: f64 = restricted.iter().sum();
    if total > 0.0 {
        for v in restricted.iter_mut() {
            *v /= total;
        }
    }
    predict(&restricted)
}

/// Fraction of exact index matches.
pub fn accuracy_exact(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(CfrError::argument(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(CfrError::argument("empty prediction list"));
    }
    let hits = preds.iter().zip(golds.iter()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Consensus accuracy: per sample min(matching humans / 3, 1), averaged.
pub fn accuracy_soft(preds: &[usize], human_answers: &[Vec<usize>]) -> Result<f64> {
    if preds.len() != human_answers.len() {
        return Err(CfrError::argument(format!(
            "{} predictions vs {} human answer sets",
            preds.len(),
            human_answers.len()
        )));
    }
    let mut total = 0.0;
    for (p, humans) in preds.iter().zip(human_answers.iter()) {
        if humans.is_empty() {
            return Err(CfrError::argument("sample without human answers"));
        }
        let matches = humans.iter().filter(|&&h| h == *p).count();
        total += (matches as f64 / 3.0).min(1.0);
    }
    Ok(total / preds.len() as f64)
}

/// Candidate-restricted accuracy over full distributions.
pub fn accuracy_mc(
    rhos: &[Vec<f64>],
    candidates: &[Vec<usize>],
    gold_positions: &[usize],
) -> Result<f64> {
    if rhos.len() != candidates.len() || rhos.len() != gold_positions.len() {
        return Err(CfrError::argument("mismatched mc accuracy inputs"));
    }
    let mut correct = 0usize;
    for ((rho, cands), &gold) in rhos.iter().zip(candidates.iter()).zip(gold_positions.iter()) {
        if gold >= cands.len() {
            return Err(CfrError::argument(format!(
                "gold position {} out of {} candidates",
                gold,
                cands.len()
            )));
        }
        if mc_pick(rho, cands)? == gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / rhos.len().max(1) as f64)
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,val_acc\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.loss, h.val_acc));
    }
    out
}
