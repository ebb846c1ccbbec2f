//! Dataset assembly from a grammar.

use crate::corpus::grammar::GrammarSpec;
use crate::corpus::rng::StreamRng;
use crate::error::{Error, Result};

/// Stream tags for the four splits; each utterance gets its own child
/// stream under its split tag, so splits never share randomness.
const TAG_TRAIN_NLU: u64 = 1;
const TAG_TRAIN_TRANS: u64 = 2;
const TAG_TEST_GEN: u64 = 3;
const TAG_TEST_RARE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSizes {
    pub train_nlu: usize,
    pub train_trans: usize,
    pub test_gen: usize,
    pub test_rare: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        // Transcription-only data is the plentiful split, eight times the
        // annotated set.
        DatasetSizes { train_nlu: 5000, train_trans: 40000, test_gen: 400, test_rare: 200 }
    }
}

/// One data record. Transcription-only records carry no annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    pub intent: Option<String>,
    pub slots: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train_nlu: Vec<Utterance>,
    pub train_trans: Vec<Utterance>,
    pub test_gen: Vec<Utterance>,
    pub test_rare: Vec<Utterance>,
}

/// Generate all four splits. Pure in (spec, sizes): the same inputs give
/// byte-identical bundles.
pub fn generate(spec: &GrammarSpec, sizes: &DatasetSizes) -> Result<DatasetBundle> {
    let grammar = spec.compile()?;
    if sizes.test_rare > 0 && !grammar.can_force_rare() {
        return Err(Error::Config(
            "rare test split requested but the grammar has no long-tail fillers".into(),
        ));
    }
    let sample_split = |tag: u64, prefix: &str, count: usize, annotated: bool, rare: bool| {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = StreamRng::for_stream(spec.seed, &[tag, i as u64]);
            let s = grammar.sample(&mut rng, rare)?;
            out.push(Utterance {
                id: format!("{prefix}-{i:06}"),
                tokens: s.tokens,
                intent: annotated.then_some(s.intent),
                slots: annotated.then_some(s.slots),
            });
        }
        Ok::<_, Error>(out)
    };
    Ok(DatasetBundle {
        train_nlu: sample_split(TAG_TRAIN_NLU, "nlu", sizes.train_nlu, true, false)?,
        train_trans: sample_split(TAG_TRAIN_TRANS, "trans", sizes.train_trans, false, false)?,
        test_gen: sample_split(TAG_TEST_GEN, "gen", sizes.test_gen, true, false)?,
        test_rare: sample_split(TAG_TEST_RARE, "rare", sizes.test_rare, true, true)?,
    })
}
