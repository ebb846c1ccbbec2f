//! File formats: line-delimited JSON for utterances and n-best lists, one
//! JSON document for grammar specs and dataset metadata.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::generate::Utterance;
use crate::corpus::grammar::GrammarSpec;
use crate::error::{Error, Result};
use crate::rescore::{Hypothesis, NBestList, Rescored};
use crate::vocab::Vocabulary;

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slots: Option<String>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// One utterance per line: `{"id", "text", "intent"?, "slots"?}` with
/// space-joined text and space-aligned slot labels.
pub fn save_dataset(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for utt in utts {
        let record = UtteranceRecord {
            id: utt.id.clone(),
            text: utt.tokens.join(" "),
            intent: utt.intent.clone(),
            slots: utt.slots.as_ref().map(|s| s.join(" ")),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Data(format!("cannot serialize utterance {}: {e}", utt.id)))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut utts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            return Err(parse_err(lineno, "blank line in dataset file"));
        }
        let record: UtteranceRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let tokens: Vec<String> = record.text.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(parse_err(lineno, format!("utterance {:?} has empty text", record.id)));
        }
        let slots = match record.slots {
            None => None,
            Some(joined) => {
                let labels: Vec<String> =
                    joined.split_whitespace().map(str::to_string).collect();
                if labels.len() != tokens.len() {
                    return Err(parse_err(
                        lineno,
                        format!(
                            "utterance {:?} has {} slot labels for {} tokens",
                            record.id,
                            labels.len(),
                            tokens.len()
                        ),
                    ));
                }
                Some(labels)
            }
        };
        utts.push(Utterance { id: record.id, tokens, intent: record.intent, slots });
    }
    Ok(utts)
}

/// Load and verify every annotation against the label inventories.
pub fn load_dataset_checked(
    path: &Path,
    intent_labels: &[String],
    slot_labels: &[String],
) -> Result<Vec<Utterance>> {
    let utts = load_dataset(path)?;
    for utt in &utts {
        if let Some(intent) = &utt.intent {
            if !intent_labels.contains(intent) {
                return Err(Error::Label(format!(
                    "unknown intent label {intent:?} in utterance {:?}",
                    utt.id
                )));
            }
        }
        if let Some(slots) = &utt.slots {
            for label in slots {
                if !slot_labels.contains(label) {
                    return Err(Error::Label(format!(
                        "unknown slot label {label:?} in utterance {:?}",
                        utt.id
                    )));
                }
            }
        }
    }
    Ok(utts)
}

/// Inventories shared by every artifact of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub intent_labels: Vec<String>,
    pub slot_labels: Vec<String>,
    /// Surface tokens in id order (reserved markers excluded).
    pub vocab: Vec<String>,
}

impl DatasetMeta {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.vocab.iter().map(String::as_str))
    }
}

pub fn save_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Data(format!("cannot serialize dataset meta: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(1, format!("dataset meta: {e}")))
}

pub fn save_grammar_spec(path: &Path, spec: &GrammarSpec) -> Result<()> {
    let text = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::Data(format!("cannot serialize grammar spec: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_grammar_spec(path: &Path) -> Result<GrammarSpec> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(1, format!("grammar spec: {e}")))
}

#[derive(Serialize, Deserialize)]
struct HypRecord {
    text: String,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    combined: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct NBestRecord {
    id: String,
    #[serde(rename = "ref")]
    reference: String,
    hyps: Vec<HypRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chosen: Option<usize>,
}

/// One n-best list per line: `{"id", "ref", "hyps": [{"text","score"}]}`.
pub fn save_nbest(path: &Path, lists: &[NBestList]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for list in lists {
        let record = NBestRecord {
            id: list.id.clone(),
            reference: list.reference.join(" "),
            hyps: list
                .hypotheses
                .iter()
                .map(|h| HypRecord {
                    text: h.tokens.join(" "),
                    score: h.first_pass_logprob,
                    combined: None,
                })
                .collect(),
            chosen: None,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Data(format!("cannot serialize n-best list {}: {e}", list.id)))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_nbest(path: &Path) -> Result<Vec<NBestList>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lists = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            return Err(parse_err(lineno, "blank line in n-best file"));
        }
        let record: NBestRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if !seen_ids.insert(record.id.clone()) {
            return Err(parse_err(lineno, format!("duplicate utterance id {:?}", record.id)));
        }
        let reference: Vec<String> =
            record.reference.split_whitespace().map(str::to_string).collect();
        let mut hypotheses = Vec::with_capacity(record.hyps.len());
        for hyp in record.hyps {
            let tokens = hyp.text.split_whitespace().map(str::to_string).collect();
            hypotheses.push(
                Hypothesis::new(tokens, hyp.score)
                    .map_err(|e| parse_err(lineno, e.to_string()))?,
            );
        }
        lists.push(
            NBestList::new(record.id, reference, hypotheses)
                .map_err(|e| parse_err(lineno, e.to_string()))?,
        );
    }
    Ok(lists)
}

/// Input records augmented with combined scores and the chosen index.
pub fn save_rescored(path: &Path, lists: &[NBestList], outcomes: &[Rescored]) -> Result<()> {
    if lists.len() != outcomes.len() {
        return Err(Error::Data(format!(
            "{} n-best lists but {} rescoring outcomes",
            lists.len(),
            outcomes.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for (list, outcome) in lists.iter().zip(outcomes) {
        if list.id != outcome.id {
            return Err(Error::Data(format!(
                "outcome id {:?} does not match list id {:?}",
                outcome.id, list.id
            )));
        }
        let record = NBestRecord {
            id: list.id.clone(),
            reference: list.reference.join(" "),
            hyps: list
                .hypotheses
                .iter()
                .zip(&outcome.scores)
                .map(|(h, s)| HypRecord {
                    text: h.tokens.join(" "),
                    score: h.first_pass_logprob,
                    combined: Some(s.0),
                })
                .collect(),
            chosen: Some(outcome.chosen),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Data(format!("cannot serialize n-best list {}: {e}", list.id)))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
