//! Minibatch SGD over the combined loss, with fixed, ramped, or adaptive
//! task weights, plus the two-stage pretrain/finetune protocol.

pub mod rwma;
pub mod weights;

pub use rwma::{clamp_simplex, increase_fraction, pearson_rho, RwmaConfig, RwmaState};
pub use weights::{
    build_total_loss, linear_ramp_weights, BatchLoss, BatchLossValues, LossWeights,
};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedUtterance;
use crate::error::{Error, Result};
use crate::model::{GraphBuilder, Model};
use crate::params::global_grad_norm;
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Schedule {
    /// Constant weights; (1,0,0) is the single-task language model.
    Fixed { weights: LossWeights },
    /// Classification weights fade in linearly over the whole run.
    LinearRamp,
    /// Weights adapt online from step-loss behavior.
    Rwma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub schedule: Schedule,
    pub rwma: RwmaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            batch_size: 8,
            epochs: 12,
            seed: 1,
            clip_norm: 5.0,
            schedule: Schedule::Rwma,
            rwma: RwmaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if let Schedule::Fixed { weights } = &self.schedule {
            weights.validate()?;
        }
        self.rwma.validate()
    }
}

/// Per-epoch summary; loss columns are epoch means of the batch losses and
/// are absent for tasks that never entered the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lm_loss: Option<f64>,
    pub intent_loss: Option<f64>,
    pub slot_loss: Option<f64>,
    /// Weights in effect for the epoch's final step.
    pub weights: LossWeights,
    pub val_ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Adaptive weight updates performed in each epoch (empty for
    /// non-adaptive schedules).
    pub weight_updates: Vec<usize>,
}

const TSV_HEADER: &str = "epoch\tlm_loss\tintent_loss\tslot_loss\talpha_lm\talpha_id\talpha_sf\tval_ppl";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "-".to_string(),
    }
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Parse { line, message: format!("bad number {s:?}: {e}") })
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.epoch,
                cell(r.lm_loss),
                cell(r.intent_loss),
                cell(r.slot_loss),
                r.weights.lm,
                r.weights.intent,
                r.weights.slot,
                cell(r.val_ppl),
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<TrainLog> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, head)) if head == TSV_HEADER => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected training log header, found {:?}", other.map(|p| p.1)),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 8 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 8 columns, found {}", cols.len()),
                });
            }
            let epoch = cols[0].parse::<usize>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad epoch {:?}: {e}", cols[0]),
            })?;
            let req = |s: &str| -> Result<f64> {
                parse_cell(s, lineno)?.ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: "weight columns cannot be blank".into(),
                })
            };
            records.push(EpochRecord {
                epoch,
                lm_loss: parse_cell(cols[1], lineno)?,
                intent_loss: parse_cell(cols[2], lineno)?,
                slot_loss: parse_cell(cols[3], lineno)?,
                weights: LossWeights {
                    lm: req(cols[4])?,
                    intent: req(cols[5])?,
                    slot: req(cols[6])?,
                },
                val_ppl: parse_cell(cols[7], lineno)?,
            });
        }
        Ok(TrainLog { records, weight_updates: Vec::new() })
    }
}

fn alpha_to_weights(alpha: &[f64]) -> LossWeights {
    LossWeights { lm: alpha[0], intent: alpha[1], slot: alpha[2] }
}

/// Steps (1-based) after which an evaluation round runs: `horizon` evenly
/// spaced points, or every step when the epoch is shorter than the horizon.
fn eval_boundaries(steps_per_epoch: usize, horizon: usize) -> BTreeSet<usize> {
    (1..=horizon).map(|k| (k * steps_per_epoch).div_ceil(horizon)).collect()
}

struct MeanAccumulator {
    sum: f64,
    count: usize,
}

impl MeanAccumulator {
    fn new() -> Self {
        MeanAccumulator { sum: 0.0, count: 0 }
    }

    fn push(&mut self, v: Option<f64>) {
        if let Some(x) = v {
            self.sum += x;
            self.count += 1;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    fn reset(&mut self) {
        self.sum = 0.0;
        self.count = 0;
    }
}

/// Train in place. Shuffling, weight adaptation, and updates are all
/// driven by the config seed, so a (model, data, config) triple always
/// produces the same parameters and log.
pub fn train(
    model: &mut Model,
    data: &[EncodedUtterance],
    val: &[EncodedUtterance],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let val_seqs: Vec<TokenSequence> = val.iter().map(|u| u.seq.clone()).collect();

    let mut rwma_state = match cfg.schedule {
        Schedule::Rwma => Some(RwmaState::new(cfg.rwma)?),
        _ => None,
    };
    let mut current = match (&cfg.schedule, &rwma_state) {
        (Schedule::Fixed { weights }, _) => *weights,
        (Schedule::LinearRamp, _) => linear_ramp_weights(0, total_steps),
        (Schedule::Rwma, Some(state)) => alpha_to_weights(&state.alpha()),
        (Schedule::Rwma, None) => unreachable!(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let boundaries = eval_boundaries(steps_per_epoch, cfg.rwma.horizon);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_lm = MeanAccumulator::new();
        let mut epoch_intent = MeanAccumulator::new();
        let mut epoch_slot = MeanAccumulator::new();
        let mut seg_lm = MeanAccumulator::new();
        let mut seg_intent = MeanAccumulator::new();
        let mut seg_slot = MeanAccumulator::new();
        let mut updates = 0usize;

        for (step_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step_no = step_idx + 1;
            if let Schedule::LinearRamp = cfg.schedule {
                current = linear_ramp_weights(global_step, total_steps);
            }
            let batch: Vec<EncodedUtterance> =
                chunk.iter().map(|&i| data[i].clone()).collect();
            let mut gb = GraphBuilder::new(model);
            let loss = build_total_loss(&mut gb, &batch, &current)?;
            let values = loss.component_values(&gb)?;
            if !values.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {} at epoch {epoch} step {step_no}",
                    values.total
                )));
            }
            let grads = gb.backward(loss.total)?;
            let norm = global_grad_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient norm at epoch {epoch} step {step_no}"
                )));
            }
            let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            drop(gb);
            model.params_mut().apply_grads(&grads, cfg.learning_rate * scale)?;
            if !model.params().all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after epoch {epoch} step {step_no}"
                )));
            }
            global_step += 1;

            epoch_lm.push(values.lm);
            epoch_intent.push(values.intent);
            epoch_slot.push(values.slot);
            seg_lm.push(values.lm);
            seg_intent.push(values.intent);
            seg_slot.push(values.slot);

            if let Some(state) = rwma_state.as_mut() {
                if boundaries.contains(&step_no) {
                    let seg = [seg_lm.mean(), seg_intent.mean(), seg_slot.mean()];
                    let losses: Vec<f64> = seg
                        .iter()
                        .map(|m| {
                            m.ok_or_else(|| {
                                Error::Data(
                                    "adaptive weighting needs all three step losses".into(),
                                )
                            })
                        })
                        .collect::<Result<_>>()?;
                    current = alpha_to_weights(&state.step(&losses)?);
                    updates += 1;
                    seg_lm.reset();
                    seg_intent.reset();
                    seg_slot.reset();
                }
            }
        }

        let val_ppl =
            if val_seqs.is_empty() { None } else { Some(model.perplexity(&val_seqs)?) };
        log.records.push(EpochRecord {
            epoch,
            lm_loss: epoch_lm.mean(),
            intent_loss: epoch_intent.mean(),
            slot_loss: epoch_slot.mean(),
            weights: current,
            val_ppl,
        });
        if rwma_state.is_some() {
            log.weight_updates.push(updates);
        }
    }
    Ok(log)
}

/// Two-stage protocol: language-model pretraining on the transcription
/// corpus, then multi-task training on the annotated corpus with freshly
/// initialized classifier heads. The backbone carries over. With zero
/// finetuning epochs the parameters are exactly the pretrained ones.
pub fn pretrain_finetune(
    model: &mut Model,
    trans: &[EncodedUtterance],
    nlu: &[EncodedUtterance],
    val: &[EncodedUtterance],
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
    head_seed: u64,
) -> Result<(TrainLog, TrainLog)> {
    let stage1_cfg = TrainConfig {
        schedule: Schedule::Fixed { weights: LossWeights::lm_only() },
        ..*pretrain_cfg
    };
    let stage1 = train(model, trans, val, &stage1_cfg)?;
    if finetune_cfg.epochs == 0 {
        return Ok((stage1, TrainLog::default()));
    }
    model.reinit_heads(head_seed)?;
    let stage2 = train(model, nlu, val, finetune_cfg)?;
    Ok((stage1, stage2))
}
