//! Template grammar for synthetic utterances.
//!
//! A grammar is a set of intents, each with token templates whose `$slot`
//! placeholders expand to fillers drawn from per-slot Zipf distributions.
//! The least-probable quartile of each filler list (by rank) is the slot's
//! long tail; tokens that appear only inside tail fillers are the grammar's
//! rare tokens. The rare test split and the elevated-corruption rule in the
//! first-pass simulator are both defined over that token set.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::rng::{cumulative_table, StreamRng};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Slot label for tokens outside any placeholder.
pub const OTHER_LABEL: &str = "other";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentTemplates {
    pub intent: String,
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotFillers {
    pub label: String,
    /// Fillers in rank order, most common first. Each may span several
    /// tokens.
    pub fillers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub intents: Vec<IntentTemplates>,
    pub slots: Vec<SlotFillers>,
    #[serde(default = "default_zipf_exponent")]
    pub zipf_exponent: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_zipf_exponent() -> f64 {
    1.2
}

fn default_seed() -> u64 {
    17
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemplatePiece {
    Literal(String),
    Slot(usize),
}

#[derive(Debug, Clone)]
pub struct CompiledSlot {
    pub label: String,
    pub fillers: Vec<Vec<String>>,
    /// Fixed-point Zipf cumulative table over all fillers.
    pub table: Vec<u64>,
    /// First index of the long-tail quartile (== fillers.len() when the
    /// list is too short to have one).
    pub tail_start: usize,
    /// Tail fillers containing at least one rare token.
    pub rare_fillers: Vec<usize>,
    /// Renormalized Zipf table over `rare_fillers`.
    pub rare_table: Vec<u64>,
}

/// A validated grammar with sampling tables and derived inventories.
#[derive(Debug, Clone)]
pub struct CompiledGrammar {
    pub zipf_exponent: f64,
    pub seed: u64,
    pub intent_names: Vec<String>,
    /// templates[intent][template] = parsed pieces.
    pub templates: Vec<Vec<Vec<TemplatePiece>>>,
    pub slots: Vec<CompiledSlot>,
    pub vocab: Vocabulary,
    /// Tokens that occur only inside long-tail fillers.
    pub rare_tokens: BTreeSet<String>,
    /// (intent, template) pairs with at least one placeholder that can be
    /// forced to a rare filler.
    rare_capable: Vec<(usize, usize)>,
}

impl GrammarSpec {
    pub fn compile(&self) -> Result<CompiledGrammar> {
        if self.intents.len() < 2 {
            return Err(Error::Config(format!(
                "a grammar needs at least 2 intents, found {}",
                self.intents.len()
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return Err(Error::Config(format!(
                "zipf exponent {} must be positive and finite",
                self.zipf_exponent
            )));
        }

        let mut slot_index = HashMap::new();
        let mut slots = Vec::new();
        for slot in &self.slots {
            if slot.label.is_empty() || slot.label == OTHER_LABEL {
                return Err(Error::Config(format!("invalid slot label {:?}", slot.label)));
            }
            if slot_index.insert(slot.label.clone(), slots.len()).is_some() {
                return Err(Error::Config(format!("duplicate slot label {:?}", slot.label)));
            }
            if slot.fillers.is_empty() {
                return Err(Error::Config(format!("slot {:?} has no fillers", slot.label)));
            }
            let mut fillers = Vec::with_capacity(slot.fillers.len());
            for filler in &slot.fillers {
                let tokens: Vec<String> =
                    filler.split_whitespace().map(str::to_string).collect();
                if tokens.is_empty() {
                    return Err(Error::Config(format!(
                        "slot {:?} has a blank filler",
                        slot.label
                    )));
                }
                fillers.push(tokens);
            }
            let m = fillers.len();
            let tail_start = m - m / 4;
            let weights: Vec<f64> = (0..m)
                .map(|i| ((i + 1) as f64).powf(-self.zipf_exponent))
                .collect();
            let table = cumulative_table(&weights);
            slots.push(CompiledSlot {
                label: slot.label.clone(),
                fillers,
                table,
                tail_start,
                rare_fillers: Vec::new(),
                rare_table: Vec::new(),
            });
        }

        let mut intent_names = Vec::new();
        let mut templates = Vec::new();
        for entry in &self.intents {
            if entry.intent.is_empty() {
                return Err(Error::Config("empty intent name".into()));
            }
            if intent_names.contains(&entry.intent) {
                return Err(Error::Config(format!("duplicate intent {:?}", entry.intent)));
            }
            if entry.templates.is_empty() {
                return Err(Error::Config(format!(
                    "intent {:?} has no templates",
                    entry.intent
                )));
            }
            let mut parsed_all = Vec::new();
            for template in &entry.templates {
                let mut pieces = Vec::new();
                for token in template.split_whitespace() {
                    if let Some(name) = token.strip_prefix('$') {
                        let idx = *slot_index.get(name).ok_or_else(|| {
                            Error::Config(format!(
                                "template {template:?} references unknown slot {name:?}"
                            ))
                        })?;
                        pieces.push(TemplatePiece::Slot(idx));
                    } else {
                        pieces.push(TemplatePiece::Literal(token.to_string()));
                    }
                }
                if pieces.is_empty() {
                    return Err(Error::Config(format!(
                        "intent {:?} has a blank template",
                        entry.intent
                    )));
                }
                parsed_all.push(pieces);
            }
            intent_names.push(entry.intent.clone());
            templates.push(parsed_all);
        }

        // Rare tokens: present in some tail filler, absent from every
        // template literal and every head filler.
        let mut common: BTreeSet<&str> = BTreeSet::new();
        for per_intent in &templates {
            for pieces in per_intent {
                for piece in pieces {
                    if let TemplatePiece::Literal(word) = piece {
                        common.insert(word);
                    }
                }
            }
        }
        for slot in &slots {
            for filler in &slot.fillers[..slot.tail_start] {
                for token in filler {
                    common.insert(token);
                }
            }
        }
        let mut rare_tokens = BTreeSet::new();
        for slot in &slots {
            for filler in &slot.fillers[slot.tail_start..] {
                for token in filler {
                    if !common.contains(token.as_str()) {
                        rare_tokens.insert(token.clone());
                    }
                }
            }
        }

        for slot in &mut slots {
            slot.rare_fillers = (slot.tail_start..slot.fillers.len())
                .filter(|&i| slot.fillers[i].iter().any(|t| rare_tokens.contains(t)))
                .collect();
            if !slot.rare_fillers.is_empty() {
                let weights: Vec<f64> = slot
                    .rare_fillers
                    .iter()
                    .map(|&i| ((i + 1) as f64).powf(-self.zipf_exponent))
                    .collect();
                slot.rare_table = cumulative_table(&weights);
            }
        }

        let mut rare_capable = Vec::new();
        for (i, per_intent) in templates.iter().enumerate() {
            for (t, pieces) in per_intent.iter().enumerate() {
                let capable = pieces.iter().any(|p| match p {
                    TemplatePiece::Slot(s) => !slots[*s].rare_fillers.is_empty(),
                    TemplatePiece::Literal(_) => false,
                });
                if capable {
                    rare_capable.push((i, t));
                }
            }
        }

        let mut vocab = Vocabulary::new();
        for per_intent in &templates {
            for pieces in per_intent {
                for piece in pieces {
                    if let TemplatePiece::Literal(word) = piece {
                        vocab.insert(word)?;
                    }
                }
            }
        }
        for slot in &slots {
            for filler in &slot.fillers {
                for token in filler {
                    vocab.insert(token)?;
                }
            }
        }

        Ok(CompiledGrammar {
            zipf_exponent: self.zipf_exponent,
            seed: self.seed,
            intent_names,
            templates,
            slots,
            vocab,
            rare_tokens,
            rare_capable,
        })
    }
}

/// One sampled utterance before numbering: surface tokens, intent name,
/// one slot label per token.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledUtterance {
    pub tokens: Vec<String>,
    pub intent: String,
    pub slots: Vec<String>,
}

impl CompiledGrammar {
    pub fn intent_labels(&self) -> Vec<String> {
        self.intent_names.clone()
    }

    /// Slot label inventory with the outside label first.
    pub fn slot_labels(&self) -> Vec<String> {
        let mut labels = vec![OTHER_LABEL.to_string()];
        labels.extend(self.slots.iter().map(|s| s.label.clone()));
        labels
    }

    pub fn can_force_rare(&self) -> bool {
        !self.rare_capable.is_empty()
    }

    /// Sample one utterance. With `force_rare` the template is drawn from
    /// those that can host a rare filler and one eligible placeholder is
    /// pinned to the slot's rare subset, so the result always contains a
    /// rare token.
    pub fn sample(&self, rng: &mut StreamRng, force_rare: bool) -> Result<SampledUtterance> {
        let (intent_idx, template_idx, forced_occurrence) = if force_rare {
            if self.rare_capable.is_empty() {
                return Err(Error::Config(
                    "rare utterance requested but the grammar has no rare fillers".into(),
                ));
            }
            let (i, t) =
                self.rare_capable[rng.below(self.rare_capable.len() as u64) as usize];
            let eligible = self.templates[i][t]
                .iter()
                .filter(|p| match p {
                    TemplatePiece::Slot(s) => !self.slots[*s].rare_fillers.is_empty(),
                    TemplatePiece::Literal(_) => false,
                })
                .count();
            (i, t, Some(rng.below(eligible as u64) as usize))
        } else {
            let i = rng.below(self.intent_names.len() as u64) as usize;
            let t = rng.below(self.templates[i].len() as u64) as usize;
            (i, t, None)
        };

        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        let mut eligible_seen = 0;
        for piece in &self.templates[intent_idx][template_idx] {
            match piece {
                TemplatePiece::Literal(word) => {
                    tokens.push(word.clone());
                    slots.push(OTHER_LABEL.to_string());
                }
                TemplatePiece::Slot(s) => {
                    let slot = &self.slots[*s];
                    let force_here = match forced_occurrence {
                        Some(target) if !slot.rare_fillers.is_empty() => {
                            let hit = eligible_seen == target;
                            eligible_seen += 1;
                            hit
                        }
                        _ => false,
                    };
                    let filler_idx = if force_here {
                        slot.rare_fillers[rng.from_cumulative(&slot.rare_table)]
                    } else {
                        rng.from_cumulative(&slot.table)
                    };
                    for token in &slot.fillers[filler_idx] {
                        tokens.push(token.clone());
                        slots.push(slot.label.clone());
                    }
                }
            }
        }
        Ok(SampledUtterance { tokens, intent: self.intent_names[intent_idx].clone(), slots })
    }

    /// True if any token of the utterance is in the rare set.
    pub fn contains_rare(&self, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.rare_tokens.contains(t))
    }
}

/// The built-in voice-command grammar: five intents over seven slot types,
/// with hand-picked long-tail fillers whose tokens appear nowhere else.
pub fn default_grammar() -> GrammarSpec {
    let intents = vec![
        IntentTemplates {
            intent: "play_music".into(),
            templates: vec![
                "play $song by $artist".into(),
                "play $song".into(),
                "put on $song by $artist".into(),
                "i want to hear $artist".into(),
                "play some music by $artist".into(),
                "play the song $song".into(),
            ],
        },
        IntentTemplates {
            intent: "set_alarm".into(),
            templates: vec![
                "set an alarm for $time".into(),
                "wake me up at $time on $day".into(),
                "set an alarm for $time on $day".into(),
                "alarm at $time".into(),
                "wake me at $time".into(),
            ],
        },
        IntentTemplates {
            intent: "get_weather".into(),
            templates: vec![
                "what is the weather in $city".into(),
                "weather forecast for $city on $day".into(),
                "will it rain in $city on $day".into(),
                "how is the weather in $city".into(),
                "what is the forecast for $city".into(),
            ],
        },
        IntentTemplates {
            intent: "call_contact".into(),
            templates: vec![
                "call $contact".into(),
                "make a call to $contact".into(),
                "dial $contact".into(),
                "call $contact on speaker".into(),
                "start a call with $contact".into(),
            ],
        },
        IntentTemplates {
            intent: "add_reminder".into(),
            templates: vec![
                "remind me to $task on $day".into(),
                "add a reminder to $task".into(),
                "set a reminder for $time to $task".into(),
                "remind me to $task at $time".into(),
                "remind me on $day to $task".into(),
            ],
        },
    ];

    let slots = vec![
        SlotFillers {
            label: "artist".into(),
            fillers: [
                "luna gray",
                "the copper foxes",
                "silver pines",
                "echo river",
                "maple and stone",
                "harbor lights",
                "june atlas",
                "the paper larks",
                "violet harbor",
                "golden prairie",
                "winter sparrows",
                "cedar moon",
                "quiet thunder",
                "opal wren",
                "dusky marmot",
                "zephyr quill",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        },
        SlotFillers {
            label: "song".into(),
            fillers: [
                "amber hour",
                "pewter moon",
                "night drive",
                "summer rain",
                "open roads",
                "blue lanterns",
                "morning glass",
                "city of wires",
                "slow tides",
                "garden static",
                "neon orchard",
                "velvet comet",
                "umber waltz",
                "glacier hymn",
                "sable aurora",
                "quartz lullaby",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        },
        SlotFillers {
            label: "time".into(),
            fillers: [
                "six am",
                "seven thirty",
                "nine pm",
                "noon",
                "midnight",
                "five fifteen",
                "ten am",
                "half past eight",
                "quarter to four",
                "thirteen hundred hours",
                "nineteen fifty",
                "zero six hundred",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        },
        SlotFillers {
            label: "day".into(),
            fillers: [
                "today",
                "tomorrow",
                "monday",
                "tuesday",
                "friday",
                "saturday",
                "sunday",
                "next week",
                "midsummer eve",
                "leap day",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        },
        SlotFillers {
            label: "city".into(),
            fillers: [
                "springfield",
                "riverton",
                "oakville",
                "fairview",
                "lakewood",
                "georgetown",
                "bristol",
                "clayton",
                "madison",
                "ashland",
                "brookfield",
                "hillsboro",
                "windmere falls",
                "port solstice",
                "thornquist",
                "veilport",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        },
        SlotFillers {
            label: "contact".into(),
            fillers: [
                "mom",
                "dad",
                "alice",
                "bob johnson",
                "carol",
                "david lee",
                "emma",
                "frank",
                "grandma rose",
                "uncle thaddeus",
                "doctor okonkwo",
                "professor quigley",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        },
        SlotFillers {
            label: "task".into(),
            fillers: [
                "buy groceries",
                "water the plants",
                "call the bank",
                "take out the trash",
                "pick up the kids",
                "send the report",
                "pay the rent",
                "walk the dog",
                "check the mail",
                "descale the kettle",
                "winterize the sprinklers",
                "notarize the affidavit",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        },
    ];

    GrammarSpec { intents, slots, zipf_exponent: 1.2, seed: 17 }
}
