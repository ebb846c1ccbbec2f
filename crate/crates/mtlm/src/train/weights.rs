//! Loss weighting: the three-task combination and the linear ramp.

use serde::{Deserialize, Serialize};

use crate::backbone::{build_lm_ce, build_states};
use crate::corpus::EncodedUtterance;
use crate::error::{Error, Result};
use crate::heads::{build_intent_ce, build_slot_ce};
use crate::model::GraphBuilder;
use crate::numeric::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lm: f64,
    pub intent: f64,
    pub slot: f64,
}

impl LossWeights {
    pub fn new(lm: f64, intent: f64, slot: f64) -> Result<Self> {
        let w = LossWeights { lm, intent, slot };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lm", self.lm), ("intent", self.intent), ("slot", self.slot)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} loss weight {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Language modeling only, the single-task baseline.
    pub fn lm_only() -> Self {
        LossWeights { lm: 1.0, intent: 0.0, slot: 0.0 }
    }
}

/// Ramp schedule: the language model trains at full weight from the start
/// while the classification tasks fade in linearly, reaching full weight
/// at `total_steps`.
pub fn linear_ramp_weights(step: usize, total_steps: usize) -> LossWeights {
    let ramp = if total_steps == 0 { 1.0 } else { (step as f64 / total_steps as f64).min(1.0) };
    LossWeights { lm: 1.0, intent: ramp, slot: ramp }
}

/// Loss graph for one minibatch. Component nodes are batch means and exist
/// only for tasks with nonzero weight; `total` is their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: NodeId,
    pub lm: Option<NodeId>,
    pub intent: Option<NodeId>,
    pub slot: Option<NodeId>,
}

impl BatchLoss {
    pub fn component_values(&self, gb: &GraphBuilder) -> Result<BatchLossValues> {
        let read = |id: Option<NodeId>| id.map(|n| gb.scalar(n)).transpose();
        Ok(BatchLossValues {
            total: gb.scalar(self.total)?,
            lm: read(self.lm)?,
            intent: read(self.intent)?,
            slot: read(self.slot)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLossValues {
    pub total: f64,
    pub lm: Option<f64>,
    pub intent: Option<f64>,
    pub slot: Option<f64>,
}

/// Build the combined loss over a batch, sharing each utterance's encoder
/// states across all three heads so backbone gradients accumulate from
/// every task. Each component is the batch mean of its per-utterance loss
/// (summed over tokens for LM and slots).
pub fn build_total_loss(
    gb: &mut GraphBuilder,
    batch: &[EncodedUtterance],
    weights: &LossWeights,
) -> Result<BatchLoss> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let mut lm_terms = Vec::new();
    let mut intent_terms = Vec::new();
    let mut slot_terms = Vec::new();
    for utt in batch {
        let states = build_states(gb, &utt.seq)?;
        if weights.lm > 0.0 {
            lm_terms.push(build_lm_ce(gb, states, &utt.seq)?);
        }
        if weights.intent > 0.0 {
            let intent = utt.intent.ok_or_else(|| {
                Error::Data(format!(
                    "utterance {:?} has no intent label but the intent weight is nonzero",
                    utt.id
                ))
            })?;
            intent_terms.push(build_intent_ce(gb, states, intent)?);
        }
        if weights.slot > 0.0 {
            let slots = utt.slots.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "utterance {:?} has no slot labels but the slot weight is nonzero",
                    utt.id
                ))
            })?;
            slot_terms.push(build_slot_ce(gb, states, slots)?);
        }
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut mean_of = |terms: Vec<NodeId>| -> Result<Option<NodeId>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let sum = gb.tape.add_n(&terms)?;
        Ok(Some(gb.tape.scale(sum, inv_b)))
    };
    let lm = mean_of(lm_terms)?;
    let intent = mean_of(intent_terms)?;
    let slot = mean_of(slot_terms)?;

    let mut weighted = Vec::new();
    if let Some(id) = lm {
        weighted.push(gb.tape.scale(id, weights.lm));
    }
    if let Some(id) = intent {
        weighted.push(gb.tape.scale(id, weights.intent));
    }
    if let Some(id) = slot {
        weighted.push(gb.tape.scale(id, weights.slot));
    }
    if weighted.is_empty() {
        return Err(Error::Config("all loss weights are zero".into()));
    }
    let total = gb.tape.add_n(&weighted)?;
    Ok(BatchLoss { total, lm, intent, slot })
}
