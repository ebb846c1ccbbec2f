//! Second-pass rescoring of n-best hypothesis lists.
//!
//! The combined score interpolates the first-pass acoustic/LM score with the
//! trained language model:
//!
//! ```text
//! combined = first_pass_logprob / |w|  +  lambda * lm_logprob / (|w| + 1)
//! ```
//!
//! where |w| is the hypothesis word count and the language-model term counts
//! the `<eos>` step. Ties resolve toward the better first-pass rank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Model;

/// One recognizer hypothesis with its first-pass log score (natural log,
/// never positive).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    pub first_pass_logprob: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<String>, first_pass_logprob: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Domain("hypothesis with no tokens".into()));
        }
        if !(first_pass_logprob <= 0.0) {
            return Err(Error::Domain(format!(
                "first-pass log probability {first_pass_logprob} must be <= 0"
            )));
        }
        Ok(Hypothesis { tokens, first_pass_logprob })
    }
}

/// Hypotheses for one utterance in first-pass rank order (best first),
/// together with the reference transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub id: String,
    pub reference: Vec<String>,
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn new(id: String, reference: Vec<String>, hypotheses: Vec<Hypothesis>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::Domain(format!("n-best list {id:?} with no hypotheses")));
        }
        if reference.is_empty() {
            return Err(Error::Domain(format!("n-best list {id:?} with an empty reference")));
        }
        Ok(NBestList { id, reference, hypotheses })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RescoreConfig {
    pub lambda: f64,
    /// Length-normalize the language-model term (on by default; the
    /// first-pass term is always per-word).
    pub normalize_lm: bool,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig { lambda: 0.006, normalize_lm: true }
    }
}

/// The interpolation itself, separated out so it can be checked against
/// hand-worked numbers: per-word first-pass score plus lambda times the
/// (already normalized) language-model score.
pub fn combined_score_parts(
    first_pass_logprob: f64,
    word_count: usize,
    lm_score: f64,
    lambda: f64,
) -> f64 {
    first_pass_logprob / word_count as f64 + lambda * lm_score
}

/// Combined score for one hypothesis under the model. Out-of-vocabulary
/// hypothesis words score as `<unk>`.
pub fn combined_score(model: &Model, hyp: &Hypothesis, cfg: &RescoreConfig) -> Result<f64> {
    let seq = model.vocab().encode_words(&hyp.tokens)?;
    let lm = model.sequence_logprob(&seq, cfg.normalize_lm)?;
    Ok(combined_score_parts(hyp.first_pass_logprob, hyp.tokens.len(), lm, cfg.lambda))
}

/// Index of the first-pass 1-best under the per-word score convention,
/// i.e. the hypothesis rescoring picks at lambda = 0. Ties keep the
/// earlier first-pass rank.
pub fn first_pass_choice(list: &NBestList) -> Result<usize> {
    if list.hypotheses.is_empty() {
        return Err(Error::Domain(format!("empty n-best list {:?}", list.id)));
    }
    let per_word = |h: &Hypothesis| h.first_pass_logprob / h.tokens.len() as f64;
    let mut chosen = 0;
    for (i, hyp) in list.hypotheses.iter().enumerate().skip(1) {
        if per_word(hyp) > per_word(&list.hypotheses[chosen]) {
            chosen = i;
        }
    }
    Ok(chosen)
}

/// Rescoring result for one list: every hypothesis score plus the winner.
#[derive(Debug, Clone)]
pub struct Rescored {
    pub id: String,
    /// (combined, lm term) per hypothesis, in first-pass rank order.
    pub scores: Vec<(f64, f64)>,
    pub chosen: usize,
}

/// Score every hypothesis and pick the argmax; ties keep the earlier
/// first-pass rank.
pub fn rescore(model: &Model, list: &NBestList, cfg: &RescoreConfig) -> Result<Rescored> {
    let mut scores = Vec::with_capacity(list.hypotheses.len());
    for hyp in &list.hypotheses {
        let seq = model.vocab().encode_words(&hyp.tokens)?;
        let lm = model.sequence_logprob(&seq, cfg.normalize_lm)?;
        let combined =
            combined_score_parts(hyp.first_pass_logprob, hyp.tokens.len(), lm, cfg.lambda);
        if !combined.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite combined score for list {:?}",
                list.id
            )));
        }
        scores.push((combined, lm));
    }
    let mut chosen = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.0 > scores[chosen].0 {
            chosen = i;
        }
    }
    Ok(Rescored { id: list.id.clone(), scores, chosen })
}

/// Pooled WER of the chosen hypotheses against the references.
pub fn rescored_corpus_wer(
    model: &Model,
    lists: &[NBestList],
    cfg: &RescoreConfig,
) -> Result<metrics::WerBreakdown> {
    if lists.is_empty() {
        return Err(Error::Domain("rescoring an empty corpus".into()));
    }
    let mut total = metrics::WerBreakdown::zero();
    for list in lists {
        let outcome = rescore(model, list, cfg)?;
        let hyp = &list.hypotheses[outcome.chosen].tokens;
        total.accumulate(&metrics::wer(&list.reference, hyp)?);
    }
    Ok(total)
}

/// Grid-search lambda by corpus WER on a development set; ties take the
/// smallest lambda.
pub fn tune_lambda(model: &Model, dev: &[NBestList], grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if dev.is_empty() {
        return Err(Error::Domain("tuning lambda on an empty development set".into()));
    }
    for &l in grid {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::Config(format!("lambda {l} must be finite and non-negative")));
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let cfg = RescoreConfig { lambda, ..RescoreConfig::default() };
        let wer = rescored_corpus_wer(model, dev, &cfg)?.wer();
        let better = match best {
            None => true,
            Some((best_lambda, best_wer)) => {
                wer < best_wer || (wer == best_wer && lambda < best_lambda)
            }
        };
        if better {
            best = Some((lambda, wer));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderVariant, ModelConfig};
    use crate::vocab::Vocabulary;

    fn uniform_model(vocab_words: usize) -> Model {
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: 4,
            layers: 1,
            intent_labels: vec!["a".into(), "b".into()],
            slot_labels: vec!["other".into(), "x".into()],
            encoder: EncoderVariant::NoAttention,
            pool_dim: 2,
            tie_embeddings: false,
            init_scale: 0.1,
        };
        let vocab = Vocabulary::from_tokens(
            (0..vocab_words).map(|i| format!("w{i}")).collect::<Vec<_>>().iter().map(String::as_str),
        )
        .unwrap();
        let mut m = Model::new(cfg, vocab, 1).unwrap();
        let flat = vec![0.0; m.params().total_len()];
        m.params_mut().unflatten(&flat).unwrap();
        m
    }

    fn hyp(text: &str, score: f64) -> Hypothesis {
        Hypothesis::new(text.split_whitespace().map(str::to_string).collect(), score).unwrap()
    }

    #[test]
    fn hand_worked_two_hypothesis_example() {
        // Per-word first-pass scores -2.0 and -2.1, language-model scores
        // -3.0 and -1.0, lambda 0.006: combined -2.018 vs -2.106.
        let a = combined_score_parts(-4.0, 2, -3.0, 0.006);
        let b = combined_score_parts(-4.2, 2, -1.0, 0.006);
        assert!((a - -2.018).abs() < 1e-12);
        assert!((b - -2.106).abs() < 1e-12);
        assert!(a > b);
    }

    #[test]
    fn lambda_zero_ignores_the_model() {
        let s = combined_score_parts(-6.0, 3, -123.0, 0.0);
        assert!((s - -2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_model_score_fixture() {
        // Uniform LM: every prediction step costs ln |V|, so the normalized
        // LM term is exactly -ln |V| and combined = fp/|w| - lambda ln |V|.
        let model = uniform_model(16);
        let v = model.vocab().len() as f64;
        let h = hyp("w0 w1", -4.0);
        let got = combined_score(&model, &h, &RescoreConfig { lambda: 0.5, normalize_lm: true })
            .unwrap();
        let expect = -2.0 + 0.5 * -(v.ln());
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn positive_first_pass_score_rejected() {
        assert!(Hypothesis::new(vec!["a".into()], 0.5).is_err());
        assert!(Hypothesis::new(vec!["a".into()], 0.0).is_ok());
    }

    #[test]
    fn single_hypothesis_always_wins() {
        let model = uniform_model(8);
        let list = NBestList::new("u1".into(), vec!["w0".into()], vec![hyp("w0 w1", -1.0)]).unwrap();
        let out = rescore(&model, &list, &RescoreConfig::default()).unwrap();
        assert_eq!(out.chosen, 0);
    }

    #[test]
    fn lambda_zero_picks_best_per_word_first_pass() {
        let model = uniform_model(8);
        // Per-word: -0.5 vs -0.4 vs -0.9 -> second wins.
        let list = NBestList::new(
            "u1".into(),
            vec!["w0".into()],
            vec![hyp("w0 w1", -1.0), hyp("w0 w1 w2", -1.2), hyp("w0", -0.9)],
        )
        .unwrap();
        let out = rescore(&model, &list, &RescoreConfig { lambda: 0.0, normalize_lm: true }).unwrap();
        assert_eq!(out.chosen, 1);
    }

    #[test]
    fn first_pass_choice_matches_lambda_zero_rescoring() {
        let model = uniform_model(8);
        let cfg = RescoreConfig { lambda: 0.0, normalize_lm: true };
        let lists = [
            vec![hyp("w0 w1", -1.0), hyp("w0 w1 w2", -1.2), hyp("w0", -0.9)],
            vec![hyp("w3", -0.5), hyp("w3", -0.5)],
            vec![hyp("w1 w2 w3 w4", -2.0), hyp("w1 w2", -1.1)],
        ];
        for (i, hyps) in lists.into_iter().enumerate() {
            let list = NBestList::new(format!("u{i}"), vec!["w0".into()], hyps).unwrap();
            let out = rescore(&model, &list, &cfg).unwrap();
            assert_eq!(first_pass_choice(&list).unwrap(), out.chosen);
        }
    }

    #[test]
    fn first_pass_rank_breaks_exact_ties() {
        let model = uniform_model(8);
        // Identical text and identical scores: the earlier rank must win.
        let list = NBestList::new(
            "u1".into(),
            vec!["w0".into()],
            vec![hyp("w0 w1", -1.0), hyp("w0 w1", -1.0), hyp("w0 w1", -1.0)],
        )
        .unwrap();
        let out = rescore(&model, &list, &RescoreConfig::default()).unwrap();
        assert_eq!(out.chosen, 0);
    }

    #[test]
    fn scores_are_affine_in_lambda() {
        // combined(lambda) = fp/|w| + lambda * lm: check collinearity of
        // three lambdas to 1e-12.
        let model = uniform_model(12);
        let h = hyp("w0 w3 w5", -2.4);
        let score_at = |l: f64| {
            combined_score(&model, &h, &RescoreConfig { lambda: l, normalize_lm: true }).unwrap()
        };
        let (s0, s1, s2) = (score_at(0.0), score_at(0.35), score_at(0.7));
        assert!((s2 - 2.0 * s1 + s0).abs() < 1e-12);
    }

    #[test]
    fn oov_words_score_as_unk() {
        let model = uniform_model(6);
        let known = hyp("w0 w1", -2.0);
        let unknown = hyp("zzz qqq", -2.0);
        let cfg = RescoreConfig { lambda: 1.0, normalize_lm: true };
        // Uniform model: unk has the same probability as anything else.
        let a = combined_score(&model, &known, &cfg).unwrap();
        let b = combined_score(&model, &unknown, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tune_lambda_singleton_grid() {
        let model = uniform_model(8);
        let dev = vec![NBestList::new(
            "u1".into(),
            vec!["w0".into(), "w1".into()],
            vec![hyp("w0 w1", -1.0), hyp("w0", -0.4)],
        )
        .unwrap()];
        let (lambda, _) = tune_lambda(&model, &dev, &[0.0]).unwrap();
        assert_eq!(lambda, 0.0);
    }

    #[test]
    fn tune_lambda_ties_take_smallest() {
        // Uniform model: the LM term is identical per length, so if all
        // lambdas give the same WER the smallest must be returned.
        let model = uniform_model(8);
        let dev = vec![NBestList::new(
            "u1".into(),
            vec!["w0".into(), "w1".into()],
            vec![hyp("w0 w1", -1.0), hyp("w0 w2", -1.1)],
        )
        .unwrap()];
        let (lambda, _) = tune_lambda(&model, &dev, &[0.4, 0.2, 0.0, 0.1]).unwrap();
        // Grid order must not matter; value ties collapse to the smallest.
        assert_eq!(lambda, 0.0);
    }

    #[test]
    fn winner_invariant_under_list_permutation() {
        // Random-init model gives distinct LM scores; the chosen surface
        // string must not depend on list order when scores are distinct.
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 5,
            layers: 1,
            intent_labels: vec!["a".into(), "b".into()],
            slot_labels: vec!["other".into(), "x".into()],
            encoder: EncoderVariant::NoAttention,
            pool_dim: 2,
            tie_embeddings: false,
            init_scale: 0.3,
        };
        let vocab =
            Vocabulary::from_tokens(["w0", "w1", "w2", "w3", "w4"].iter().copied()).unwrap();
        let model = Model::new(cfg, vocab, 7).unwrap();
        let hyps = vec![
            hyp("w0 w1 w2", -2.0),
            hyp("w3 w4", -1.5),
            hyp("w1 w1 w4 w0", -3.1),
            hyp("w2", -0.9),
        ];
        let rc = RescoreConfig { lambda: 0.4, normalize_lm: true };
        let pick = |order: Vec<Hypothesis>| {
            let list = NBestList::new("u".into(), vec!["w0".into()], order).unwrap();
            let out = rescore(&model, &list, &rc).unwrap();
            list.hypotheses[out.chosen].tokens.join(" ")
        };
        let baseline = pick(hyps.clone());
        let mut rotated = hyps.clone();
        rotated.rotate_left(2);
        assert_eq!(pick(rotated), baseline);
        let mut reversed = hyps;
        reversed.reverse();
        assert_eq!(pick(reversed), baseline);
    }

    #[test]
    fn growing_lambda_moves_winner_toward_better_lm_scores() {
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 5,
            layers: 1,
            intent_labels: vec!["a".into(), "b".into()],
            slot_labels: vec!["other".into(), "x".into()],
            encoder: EncoderVariant::NoAttention,
            pool_dim: 2,
            tie_embeddings: false,
            init_scale: 0.3,
        };
        let vocab =
            Vocabulary::from_tokens(["w0", "w1", "w2", "w3", "w4"].iter().copied()).unwrap();
        let model = Model::new(cfg, vocab, 11).unwrap();
        let list = NBestList::new(
            "u".into(),
            vec!["w0".into()],
            vec![
                hyp("w0 w1 w2", -2.0),
                hyp("w3 w4", -1.5),
                hyp("w1 w1 w4 w0", -3.1),
                hyp("w2", -0.9),
                hyp("w4 w2 w0", -2.6),
            ],
        )
        .unwrap();
        let mut last_lm = f64::NEG_INFINITY;
        for step in 0..40 {
            let rc = RescoreConfig { lambda: step as f64 * 0.25, normalize_lm: true };
            let out = rescore(&model, &list, &rc).unwrap();
            let lm = out.scores[out.chosen].1;
            assert!(
                lm >= last_lm - 1e-12,
                "winner LM score regressed from {last_lm} to {lm} at lambda {}",
                rc.lambda
            );
            last_lm = lm;
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let model = uniform_model(8);
        let dev = vec![NBestList::new(
            "u1".into(),
            vec!["w0".into()],
            vec![hyp("w0", -1.0)],
        )
        .unwrap()];
        assert!(tune_lambda(&model, &dev, &[-0.5]).is_err());
    }
}
