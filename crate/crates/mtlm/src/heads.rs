//! Intent and slot classifiers over the shared recurrent states.
//!
//! Three encoder variants control what the heads read: `NoAttention` takes
//! raw states (last state for intent, per-step states for slots);
//! `WeightedAttention` pools states with learned attention scores for the
//! intent path; `ProjectedAttention` re-encodes all states through two
//! self-attention blocks first. Slots always stay per-token: attention
//! variants may transform the state sequence but never pool it away.

use crate::backbone::{build_states, EncodedStates};
use crate::error::{Error, Result};
use crate::model::{EncoderVariant, GraphBuilder, Model};
use crate::numeric::NodeId;
use crate::vocab::TokenSequence;

/// Attention-weighted convex combination of state columns.
///
/// Scores are v . tanh(W c_t) per column; softmax over t yields the weights.
/// Returns (pooled (hidden,1), weights (steps,1)).
pub fn pool_weighted_attention(
    gb: &mut GraphBuilder,
    states: EncodedStates,
    head: &str,
) -> Result<(NodeId, NodeId)> {
    let w = gb.param(&format!("{head}.pool.score_w"))?;
    let v = gb.param(&format!("{head}.pool.score_v"))?;
    let projected = gb.tape.matmul(w, states.mat)?;
    let activated = gb.tape.tanh(projected);
    let v_row = gb.tape.transpose(v);
    let scores_row = gb.tape.matmul(v_row, activated)?;
    let scores_col = gb.tape.transpose(scores_row);
    let weights = gb.tape.softmax_cols(scores_col)?;
    let pooled = gb.tape.matmul(states.mat, weights)?;
    Ok((pooled, weights))
}

/// The no-attention intent summary: the last state column.
pub fn pool_no_attention(gb: &mut GraphBuilder, states: EncodedStates) -> Result<NodeId> {
    gb.tape.select_col(states.mat, states.steps - 1)
}

/// Two blocks of single-head self-attention, each followed by a residual add
/// and layer normalization. Output has the same (hidden, steps) shape as the
/// input states.
pub fn encode_projected_attention(
    gb: &mut GraphBuilder,
    states: EncodedStates,
    head: &str,
) -> Result<EncodedStates> {
    let scale = 1.0 / (gb.model().config().hidden_dim as f64).sqrt();
    let mut x = states.mat;
    for b in 0..2 {
        let wq = gb.param(&format!("{head}.block{b}.wq"))?;
        let wk = gb.param(&format!("{head}.block{b}.wk"))?;
        let wv = gb.param(&format!("{head}.block{b}.wv"))?;
        let wo = gb.param(&format!("{head}.block{b}.wo"))?;
        let gain = gb.param(&format!("{head}.block{b}.ln_gain"))?;
        let bias = gb.param(&format!("{head}.block{b}.ln_bias"))?;

        let q = gb.tape.matmul(wq, x)?;
        let k = gb.tape.matmul(wk, x)?;
        let v = gb.tape.matmul(wv, x)?;
        // scores[query, key] = q_query . k_key, scaled by 1/sqrt(hidden)
        let q_t = gb.tape.transpose(q);
        let raw_scores = gb.tape.matmul(q_t, k)?;
        let scores = gb.tape.scale(raw_scores, scale);
        // Normalize over keys: transpose so each query is a column.
        let scores_t = gb.tape.transpose(scores);
        let attn = gb.tape.softmax_cols(scores_t)?;
        let mixed = gb.tape.matmul(v, attn)?;
        let projected = gb.tape.matmul(wo, mixed)?;
        let residual = gb.tape.add(x, projected)?;
        x = gb.tape.layer_norm_cols(residual, gain, bias)?;
    }
    Ok(EncodedStates { mat: x, steps: states.steps })
}

/// Intent-path summary vector for the configured encoder variant.
pub fn build_intent_feature(gb: &mut GraphBuilder, states: EncodedStates) -> Result<NodeId> {
    match gb.model().config().encoder {
        EncoderVariant::NoAttention => pool_no_attention(gb, states),
        EncoderVariant::WeightedAttention => {
            Ok(pool_weighted_attention(gb, states, "intent")?.0)
        }
        EncoderVariant::ProjectedAttention => {
            let encoded = encode_projected_attention(gb, states, "intent")?;
            Ok(pool_weighted_attention(gb, encoded, "intent")?.0)
        }
    }
}

/// Intent logits (N_intents, 1).
pub fn build_intent_logits(gb: &mut GraphBuilder, states: EncodedStates) -> Result<NodeId> {
    let feature = build_intent_feature(gb, states)?;
    let w = gb.param("intent.classifier.weight")?;
    let b = gb.param("intent.classifier.bias")?;
    let scores = gb.tape.matmul(w, feature)?;
    gb.tape.add(scores, b)
}

/// Cross-entropy of the gold intent for one utterance.
pub fn build_intent_ce(gb: &mut GraphBuilder, states: EncodedStates, intent: usize) -> Result<NodeId> {
    let n = gb.model().config().intent_count();
    if intent >= n {
        return Err(Error::Label(format!("intent id {intent} with {n} labels")));
    }
    let logits = build_intent_logits(gb, states)?;
    gb.tape.softmax_cross_entropy_cols(logits, &[intent])
}

/// Per-token slot features: state columns 1..=T (column 0 belongs to `<sos>`
/// and has no slot label), re-encoded first under the projected variant.
pub fn build_slot_features(gb: &mut GraphBuilder, states: EncodedStates) -> Result<NodeId> {
    let base = match gb.model().config().encoder {
        EncoderVariant::NoAttention | EncoderVariant::WeightedAttention => states,
        EncoderVariant::ProjectedAttention => encode_projected_attention(gb, states, "slot")?,
    };
    gb.tape.slice_cols(base.mat, 1, base.steps - 1)
}

/// Slot logits, one column per surface token: (N_slots, T).
pub fn build_slot_logits(gb: &mut GraphBuilder, states: EncodedStates) -> Result<NodeId> {
    let features = build_slot_features(gb, states)?;
    let w = gb.param("slot.classifier.weight")?;
    let b = gb.param("slot.classifier.bias")?;
    let scores = gb.tape.matmul(w, features)?;
    gb.tape.add_broadcast_col(scores, b)
}

/// Summed per-token slot cross-entropy for one utterance.
pub fn build_slot_ce(gb: &mut GraphBuilder, states: EncodedStates, slots: &[usize]) -> Result<NodeId> {
    if slots.len() != states.steps - 1 {
        return Err(Error::Alignment(format!(
            "{} slot labels for {} tokens",
            slots.len(),
            states.steps - 1
        )));
    }
    let n = gb.model().config().slot_count();
    for &s in slots {
        if s >= n {
            return Err(Error::Label(format!("slot id {s} with {n} labels")));
        }
    }
    let logits = build_slot_logits(gb, states)?;
    gb.tape.softmax_cross_entropy_cols(logits, slots)
}

impl Model {
    /// Mean over the batch of -ln P(gold intent | utterance).
    pub fn intent_loss(&self, batch: &[(TokenSequence, usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("intent_loss over an empty batch".into()));
        }
        let mut total = 0.0;
        for (seq, intent) in batch {
            let mut gb = GraphBuilder::new(self);
            let states = build_states(&mut gb, seq)?;
            let ce = build_intent_ce(&mut gb, states, *intent)?;
            total += gb.scalar(ce)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean over the batch of summed per-token slot cross-entropy.
    pub fn slot_loss(&self, batch: &[(TokenSequence, Vec<usize>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("slot_loss over an empty batch".into()));
        }
        let mut total = 0.0;
        for (seq, slots) in batch {
            let mut gb = GraphBuilder::new(self);
            let states = build_states(&mut gb, seq)?;
            let ce = build_slot_ce(&mut gb, states, slots)?;
            total += gb.scalar(ce)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Most probable intent id; ties resolve to the lowest id.
    pub fn predict_intent(&self, seq: &TokenSequence) -> Result<usize> {
        let mut gb = GraphBuilder::new(self);
        let states = build_states(&mut gb, seq)?;
        let logits = build_intent_logits(&mut gb, states)?;
        Ok(argmax(gb.value(logits).data()))
    }

    /// Most probable slot id per surface token; ties resolve to the lowest id.
    pub fn predict_slots(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        let mut gb = GraphBuilder::new(self);
        let states = build_states(&mut gb, seq)?;
        let logits = build_slot_logits(&mut gb, states)?;
        let m = gb.value(logits);
        let mut out = Vec::with_capacity(seq.len());
        for c in 0..m.cols() {
            let col: Vec<f64> = (0..m.rows()).map(|r| m.get(r, c)).collect();
            out.push(argmax(&col));
        }
        Ok(out)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
