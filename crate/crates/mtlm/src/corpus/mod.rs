//! Synthetic corpus generation, first-pass simulation, and dataset files.

pub mod generate;
pub mod grammar;
pub mod io;
pub mod rng;
pub mod simulate;

use crate::error::{Error, Result};
use crate::vocab::{TokenSequence, Vocabulary};
use generate::Utterance;

/// An utterance mapped onto model inputs: token ids plus optional label
/// ids for the annotated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUtterance {
    pub id: String,
    pub seq: TokenSequence,
    pub intent: Option<usize>,
    pub slots: Option<Vec<usize>>,
}

/// Encode a split against fixed inventories. Out-of-vocabulary words fall
/// back to `<unk>`; unknown labels are errors because silently remapping a
/// label would corrupt supervision.
pub fn encode_dataset(
    utts: &[Utterance],
    vocab: &Vocabulary,
    intent_labels: &[String],
    slot_labels: &[String],
) -> Result<Vec<EncodedUtterance>> {
    let mut out = Vec::with_capacity(utts.len());
    for utt in utts {
        let seq = vocab.encode_words(&utt.tokens)?;
        let intent = match &utt.intent {
            None => None,
            Some(label) => Some(
                intent_labels.iter().position(|l| l == label).ok_or_else(|| {
                    Error::Label(format!(
                        "unknown intent label {label:?} in utterance {:?}",
                        utt.id
                    ))
                })?,
            ),
        };
        let slots = match &utt.slots {
            None => None,
            Some(labels) => {
                if labels.len() != utt.tokens.len() {
                    return Err(Error::Alignment(format!(
                        "utterance {:?} has {} slot labels for {} tokens",
                        utt.id,
                        labels.len(),
                        utt.tokens.len()
                    )));
                }
                let mut ids = Vec::with_capacity(labels.len());
                for label in labels {
                    ids.push(slot_labels.iter().position(|l| l == label).ok_or_else(
                        || {
                            Error::Label(format!(
                                "unknown slot label {label:?} in utterance {:?}",
                                utt.id
                            ))
                        },
                    )?);
                }
                Some(ids)
            }
        };
        out.push(EncodedUtterance { id: utt.id.clone(), seq, intent, slots });
    }
    Ok(out)
}
