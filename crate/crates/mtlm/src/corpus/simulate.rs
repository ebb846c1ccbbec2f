//! Simulated first-pass recognizer output.
//!
//! Real decoding is out of scope; hypothesis lists are manufactured by
//! corrupting the reference with token substitutions, deletions and
//! insertions. Rare tokens are corrupted at a multiple of the base rate,
//! standing in for a recognizer that struggles on words it has rarely
//! seen. Scores fall with hypothesis length and edit count plus a uniform
//! noise term, so the 1-best is usually, but not always, the cleanest
//! hypothesis.

use serde::{Deserialize, Serialize};

use crate::corpus::generate::Utterance;
use crate::corpus::grammar::CompiledGrammar;
use crate::corpus::rng::{tag_from_str, StreamRng};
use crate::error::{Error, Result};
use crate::rescore::{Hypothesis, NBestList};

const TAG_SIMULATE: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Hypotheses per list.
    pub n: usize,
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    /// Multiplier applied to substitution and deletion rates on rare
    /// tokens (capped at probability 1).
    pub rare_multiplier: f64,
    /// Probability that the reference itself appears in the list.
    pub oracle_inclusion: f64,
    /// Score = -(len_weight·|hyp| + edit_weight·edits + noise_weight·u).
    pub len_weight: f64,
    pub edit_weight: f64,
    pub noise_weight: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            n: 10,
            sub_rate: 0.12,
            del_rate: 0.03,
            ins_rate: 0.03,
            rare_multiplier: 3.0,
            oracle_inclusion: 0.9,
            len_weight: 0.10,
            edit_weight: 0.70,
            noise_weight: 1.5,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("n-best size must be at least 1".into()));
        }
        for (name, rate) in [
            ("sub_rate", self.sub_rate),
            ("del_rate", self.del_rate),
            ("ins_rate", self.ins_rate),
            ("oracle_inclusion", self.oracle_inclusion),
        ] {
            if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
                return Err(Error::Config(format!("{name} {rate} outside [0,1]")));
            }
        }
        for (name, w) in [
            ("rare_multiplier", self.rare_multiplier),
            ("len_weight", self.len_weight),
            ("edit_weight", self.edit_weight),
            ("noise_weight", self.noise_weight),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn random_surface_token(rng: &mut StreamRng, surface: &[String]) -> String {
    surface[rng.below(surface.len() as u64) as usize].clone()
}

fn random_other_token(rng: &mut StreamRng, surface: &[String], avoid: &str) -> String {
    loop {
        let t = random_surface_token(rng, surface);
        if t != avoid {
            return t;
        }
    }
}

fn corrupt(
    reference: &[String],
    grammar: &CompiledGrammar,
    cfg: &NoiseConfig,
    rng: &mut StreamRng,
) -> (Vec<String>, usize) {
    let surface = grammar.vocab.surface_tokens();
    let mut tokens = Vec::with_capacity(reference.len());
    let mut edits = 0usize;
    for word in reference {
        let mult = if grammar.rare_tokens.contains(word) { cfg.rare_multiplier } else { 1.0 };
        if rng.coin((cfg.del_rate * mult).min(1.0)) {
            edits += 1;
        } else if rng.coin((cfg.sub_rate * mult).min(1.0)) {
            tokens.push(random_other_token(rng, surface, word));
            edits += 1;
        } else {
            tokens.push(word.clone());
        }
        if rng.coin(cfg.ins_rate) {
            tokens.push(random_surface_token(rng, surface));
            edits += 1;
        }
    }
    if tokens.is_empty() {
        tokens.push(random_surface_token(rng, surface));
    }
    (tokens, edits)
}

/// Build one n-best list for the utterance. Pure in (utterance id and
/// tokens, grammar, config, seed); lists for different utterances draw
/// from unrelated streams.
pub fn simulate_first_pass(
    utt: &Utterance,
    grammar: &CompiledGrammar,
    cfg: &NoiseConfig,
    seed: u64,
) -> Result<NBestList> {
    cfg.validate()?;
    if grammar.vocab.surface_tokens().len() < 2 {
        return Err(Error::Config("simulation needs at least 2 surface tokens".into()));
    }
    if utt.tokens.is_empty() {
        return Err(Error::Domain(format!("utterance {:?} has no tokens", utt.id)));
    }
    let base = StreamRng::for_stream(seed, &[TAG_SIMULATE, tag_from_str(&utt.id)]);
    let mut control = base.split(0);
    let include_oracle = control.coin(cfg.oracle_inclusion);
    let oracle_pos = control.below(cfg.n as u64) as usize;

    let mut scored = Vec::with_capacity(cfg.n);
    for k in 0..cfg.n {
        let mut hrng = base.split(1 + k as u64);
        let (tokens, edits) = if include_oracle && k == oracle_pos {
            (utt.tokens.clone(), 0)
        } else {
            corrupt(&utt.tokens, grammar, cfg, &mut hrng)
        };
        let score = -(cfg.len_weight * tokens.len() as f64
            + cfg.edit_weight * edits as f64
            + cfg.noise_weight * hrng.unit_f64());
        scored.push((tokens, score));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));

    let hypotheses = scored
        .into_iter()
        .map(|(tokens, score)| Hypothesis::new(tokens, score))
        .collect::<Result<Vec<_>>>()?;
    NBestList::new(utt.id.clone(), utt.tokens.clone(), hypotheses)
}

/// N-best lists for a whole split.
pub fn simulate_corpus(
    utts: &[Utterance],
    grammar: &CompiledGrammar,
    cfg: &NoiseConfig,
    seed: u64,
) -> Result<Vec<NBestList>> {
    utts.iter().map(|u| simulate_first_pass(u, grammar, cfg, seed)).collect()
}
