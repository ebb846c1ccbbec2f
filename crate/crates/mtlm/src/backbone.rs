//! Recurrent language-model backbone: embedding, stacked LSTM layers, and the
//! next-word softmax. Scoring conventions: the input is `<sos> w_1 .. w_T`,
//! the prediction targets are `w_1 .. w_T <eos>`, so every sequence
//! contributes T+1 prediction steps and length normalization divides by T+1.

use crate::error::{Error, Result};
use crate::model::{GraphBuilder, Model};
use crate::numeric::{lstm_step, softmax, Matrix, NodeId};
use crate::vocab::{TokenSequence, EOS, SOS};

/// Top-layer states for one sequence, kept on the tape: a (hidden, T+1)
/// matrix whose column t is the state after consuming input t (input 0 is
/// `<sos>`, input t >= 1 is w_t).
#[derive(Debug, Clone, Copy)]
pub struct EncodedStates {
    pub mat: NodeId,
    /// Number of state columns, always T+1.
    pub steps: usize,
}

/// Run the backbone over `<sos> w_1..w_T`, leaving all ops on the tape so
/// any loss built from the result backpropagates into the shared parameters.
pub fn build_states(gb: &mut GraphBuilder, seq: &TokenSequence) -> Result<EncodedStates> {
    let cfg = gb.model().config().clone();
    let h = cfg.hidden_dim;
    let vocab_len = gb.model().vocab().len();
    for &id in seq.ids() {
        if id >= vocab_len {
            return Err(Error::Vocab(format!(
                "token id {id} outside vocabulary of {vocab_len}"
            )));
        }
    }

    let mut inputs = Vec::with_capacity(seq.len() + 1);
    inputs.push(SOS);
    inputs.extend_from_slice(seq.ids());

    let emb = gb.param("backbone.embedding")?;
    let mut layer_in = gb.tape.gather(emb, &inputs)?;

    for k in 0..cfg.layers {
        let w_input = gb.param(&format!("backbone.lstm{k}.w_input"))?;
        let w_hidden = gb.param(&format!("backbone.lstm{k}.w_hidden"))?;
        let bias = gb.param(&format!("backbone.lstm{k}.bias"))?;
        let mut h_state = gb.tape.leaf(Matrix::zeros(h, 1));
        let mut c_state = gb.tape.leaf(Matrix::zeros(h, 1));
        let mut outputs = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x_t = gb.tape.select_col(layer_in, t)?;
            let (h_next, c_next) =
                lstm_step(&mut gb.tape, x_t, h_state, c_state, w_input, w_hidden, bias)?;
            h_state = h_next;
            c_state = c_next;
            outputs.push(h_state);
        }
        layer_in = gb.tape.concat_cols(&outputs)?;
    }

    Ok(EncodedStates { mat: layer_in, steps: inputs.len() })
}

/// Next-word logits for every state column: a (|V|, T+1) node.
pub fn build_lm_logits(gb: &mut GraphBuilder, states: EncodedStates) -> Result<NodeId> {
    let w_name = gb.model().output_weight_name().to_string();
    let w_out = gb.param(&w_name)?;
    let b_out = gb.param("backbone.output.bias")?;
    let scores = gb.tape.matmul(w_out, states.mat)?;
    gb.tape.add_broadcast_col(scores, b_out)
}

/// Summed next-word cross-entropy for one sequence (T+1 prediction steps,
/// targets w_1..w_T followed by `<eos>`).
pub fn build_lm_ce(gb: &mut GraphBuilder, states: EncodedStates, seq: &TokenSequence) -> Result<NodeId> {
    let logits = build_lm_logits(gb, states)?;
    let mut targets = Vec::with_capacity(seq.len() + 1);
    targets.extend_from_slice(seq.ids());
    targets.push(EOS);
    gb.tape.softmax_cross_entropy_cols(logits, &targets)
}

impl Model {
    /// Top-layer state values for one sequence: a (hidden, T+1) matrix.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Matrix> {
        let mut gb = GraphBuilder::new(self);
        let states = build_states(&mut gb, seq)?;
        Ok(gb.value(states.mat).clone())
    }

    /// Mean over the batch of per-sequence summed cross-entropy (the
    /// next-word training objective).
    pub fn lm_loss(&self, batch: &[TokenSequence]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("lm_loss over an empty batch".into()));
        }
        let mut total = 0.0;
        for seq in batch {
            let mut gb = GraphBuilder::new(self);
            let states = build_states(&mut gb, seq)?;
            let ce = build_lm_ce(&mut gb, states, seq)?;
            total += gb.scalar(ce)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Log probability of the sequence (natural log), including the `<eos>`
    /// step. With `normalize` the sum is divided by T+1.
    pub fn sequence_logprob(&self, seq: &TokenSequence, normalize: bool) -> Result<f64> {
        let mut gb = GraphBuilder::new(self);
        let states = build_states(&mut gb, seq)?;
        let ce = build_lm_ce(&mut gb, states, seq)?;
        let logprob = -gb.scalar(ce)?;
        if normalize {
            Ok(logprob / (seq.len() + 1) as f64)
        } else {
            Ok(logprob)
        }
    }

    /// Distribution over the next word given one state column.
    pub fn next_word_distribution(&self, state: &Matrix) -> Result<Vec<f64>> {
        if state.shape() != (self.config().hidden_dim, 1) {
            return Err(Error::Dimension(format!(
                "state {:?} for hidden size {}",
                state.shape(),
                self.config().hidden_dim
            )));
        }
        let w = self.params().get(self.output_weight_name())?;
        let b = self.params().get("backbone.output.bias")?;
        let mut logits = w.matmul(state)?;
        logits.add_scaled(b, 1.0)?;
        softmax(logits.data())
    }

    /// Corpus perplexity: exp of mean per-token cross-entropy, where each
    /// sequence contributes T+1 tokens.
    pub fn perplexity(&self, corpus: &[TokenSequence]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Domain("perplexity over an empty corpus".into()));
        }
        let mut total_ce = 0.0;
        let mut total_tokens = 0usize;
        for seq in corpus {
            let mut gb = GraphBuilder::new(self);
            let states = build_states(&mut gb, seq)?;
            let ce = build_lm_ce(&mut gb, states, seq)?;
            total_ce += gb.scalar(ce)?;
            total_tokens += seq.len() + 1;
        }
        Ok((total_ce / total_tokens as f64).exp())
    }
}

/// Candidate perplexity relative to a baseline (1.0 means no change,
/// smaller is better).
pub fn normalized_ppl(candidate: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) || !baseline.is_finite() || !candidate.is_finite() {
        return Err(Error::Domain(format!(
            "normalized_ppl needs finite positive inputs, got {candidate} / {baseline}"
        )));
    }
    Ok(candidate / baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderVariant, ModelConfig};
    use crate::vocab::Vocabulary;

    fn vocab_n(n: usize) -> Vocabulary {
        Vocabulary::from_tokens(
            (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().iter().map(String::as_str),
        )
        .unwrap()
    }

    fn config(e: usize, h: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: e,
            hidden_dim: h,
            layers,
            intent_labels: vec!["a".into(), "b".into()],
            slot_labels: vec!["other".into(), "x".into()],
            encoder: EncoderVariant::NoAttention,
            pool_dim: 4,
            tie_embeddings: false,
            init_scale: 0.1,
        }
    }

    fn seq(ids: Vec<usize>) -> TokenSequence {
        TokenSequence::new(ids).unwrap()
    }

    #[test]
    fn encode_shape_is_hidden_by_t_plus_one() {
        let model = Model::new(config(3, 5, 2), vocab_n(6), 1).unwrap();
        let states = model.encode(&seq(vec![4, 5, 6, 7])).unwrap();
        assert_eq!(states.shape(), (5, 5));
    }

    #[test]
    fn encode_is_deterministic() {
        let model = Model::new(config(4, 4, 2), vocab_n(8), 9).unwrap();
        let s = seq(vec![4, 6, 5]);
        let a = model.encode(&s).unwrap();
        let b = model.encode(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_params_give_uniform_predictions() {
        let mut model = Model::new(config(3, 4, 1), vocab_n(4), 1).unwrap();
        let flat = vec![0.0; model.params().total_len()];
        model.params_mut().unflatten(&flat).unwrap();
        let states = model.encode(&seq(vec![4, 5])).unwrap();
        assert!(states.data().iter().all(|&v| v == 0.0));
        let dist = model.next_word_distribution(&states.col_vector(0).unwrap()).unwrap();
        let expect = 1.0 / model.vocab().len() as f64;
        for &p in &dist {
            assert!((p - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_model_lm_loss_is_t_plus_one_log_v() {
        // Zero parameters make every next-word distribution uniform, so a
        // length-T sequence costs exactly (T+1) ln |V|.
        let mut model = Model::new(config(3, 4, 2), vocab_n(4), 1).unwrap();
        let flat = vec![0.0; model.params().total_len()];
        model.params_mut().unflatten(&flat).unwrap();
        let v = model.vocab().len() as f64;
        let loss = model.lm_loss(&[seq(vec![4, 5, 6])]).unwrap();
        assert!((loss - 4.0 * v.ln()).abs() < 1e-10);
    }

    #[test]
    fn lm_loss_mean_is_invariant_to_duplication() {
        let model = Model::new(config(4, 4, 2), vocab_n(8), 3).unwrap();
        let s = seq(vec![5, 7, 9]);
        let once = model.lm_loss(&[s.clone()]).unwrap();
        let four = model.lm_loss(&[s.clone(), s.clone(), s.clone(), s]).unwrap();
        assert!((once - four).abs() < 1e-12);
    }

    #[test]
    fn sequence_logprob_matches_stepwise_distribution_sum() {
        let model = Model::new(config(4, 6, 2), vocab_n(9), 11).unwrap();
        let s = seq(vec![4, 8, 6, 10]);
        let states = model.encode(&s).unwrap();
        let mut targets: Vec<usize> = s.ids().to_vec();
        targets.push(EOS);
        let mut total = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            let dist = model.next_word_distribution(&states.col_vector(t).unwrap()).unwrap();
            total += dist[target].ln();
        }
        let got = model.sequence_logprob(&s, false).unwrap();
        assert!((got - total).abs() < 1e-10, "{got} vs {total}");
        let norm = model.sequence_logprob(&s, true).unwrap();
        assert!((norm - total / 5.0).abs() < 1e-10);
    }

    #[test]
    fn sequence_logprob_matches_explicit_chain_product() {
        // Probability of the sequence as an explicit product of next-word
        // probabilities on a 3-word vocabulary, multiplied out in linear space.
        let model = Model::new(config(3, 4, 1), vocab_n(3), 21).unwrap();
        let s = seq(vec![4, 6, 5]);
        let states = model.encode(&s).unwrap();
        let targets = [4usize, 6, 5, EOS];
        let mut product = 1.0f64;
        for (t, &target) in targets.iter().enumerate() {
            let dist = model.next_word_distribution(&states.col_vector(t).unwrap()).unwrap();
            product *= dist[target];
        }
        let got = model.sequence_logprob(&s, false).unwrap();
        assert!((got - product.ln()).abs() < 1e-10);
    }

    #[test]
    fn uniform_model_perplexity_equals_vocab_size() {
        let mut model = Model::new(config(3, 4, 2), vocab_n(13), 1).unwrap();
        let flat = vec![0.0; model.params().total_len()];
        model.params_mut().unflatten(&flat).unwrap();
        let corpus = vec![seq(vec![4, 5, 6]), seq(vec![7, 8]), seq(vec![9])];
        let ppl = model.perplexity(&corpus).unwrap();
        assert!((ppl - model.vocab().len() as f64).abs() < 1e-9);
    }

    #[test]
    fn perplexity_is_invariant_to_corpus_duplication() {
        let model = Model::new(config(4, 4, 2), vocab_n(10), 5).unwrap();
        let corpus = vec![seq(vec![4, 9]), seq(vec![10, 5, 6])];
        let doubled: Vec<TokenSequence> =
            corpus.iter().chain(corpus.iter()).cloned().collect();
        let a = model.perplexity(&corpus).unwrap();
        let b = model.perplexity(&doubled).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn out_of_vocab_id_is_rejected() {
        let model = Model::new(config(3, 4, 1), vocab_n(3), 1).unwrap();
        let s = seq(vec![4, 99]);
        assert!(matches!(model.encode(&s), Err(Error::Vocab(_))));
    }

    #[test]
    fn normalized_ppl_fixture() {
        assert!((normalized_ppl(47.0, 50.0).unwrap() - 0.94).abs() < 1e-12);
        assert!(normalized_ppl(47.0, 0.0).is_err());
    }
}
