//! Grid-search the interpolation weight between first-pass and language
//! model scores on a development set of n-best lists.

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::default_grammar;
use mtlm::corpus::simulate::{simulate_corpus, NoiseConfig};
use mtlm::corpus::encode_dataset;
use mtlm::error::Result;
use mtlm::model::{EncoderVariant, Model, ModelConfig};
use mtlm::rescore::{rescore, tune_lambda, RescoreConfig};
use mtlm::metrics::corpus_wer;
use mtlm::train::{train, Schedule, TrainConfig};

fn main() -> Result<()> {
    let spec = default_grammar();
    let grammar = spec.compile()?;
    let sizes = DatasetSizes { train_nlu: 800, train_trans: 0, test_gen: 150, test_rare: 0 };
    let bundle = generate(&spec, &sizes)?;
    let intents = grammar.intent_labels();
    let slots = grammar.slot_labels();
    let data = encode_dataset(&bundle.train_nlu, &grammar.vocab, &intents, &slots)?;

    let config = ModelConfig {
        embed_dim: 32,
        hidden_dim: 32,
        layers: 2,
        intent_labels: intents,
        slot_labels: slots,
        encoder: EncoderVariant::NoAttention,
        pool_dim: 16,
        tie_embeddings: false,
        init_scale: 0.1,
    };
    let mut model = Model::new(config, grammar.vocab.clone(), 1)?;
    let cfg = TrainConfig { epochs: 10, schedule: Schedule::Rwma, ..TrainConfig::default() };
    train(&mut model, &data, &[], &cfg)?;

    let dev = simulate_corpus(&bundle.test_gen, &grammar, &NoiseConfig::default(), spec.seed)?;
    let grid = [0.0, 0.001, 0.002, 0.004, 0.006, 0.01, 0.02, 0.05, 0.1];

    println!("lambda    dev wer");
    for &lambda in &grid {
        let rc = RescoreConfig { lambda, normalize_lm: true };
        let pairs = dev
            .iter()
            .map(|l| {
                let o = rescore(&model, l, &rc)?;
                Ok((l.reference.clone(), l.hypotheses[o.chosen].tokens.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        println!("{:<8}  {:.4}", lambda, corpus_wer(&pairs)?.wer());
    }

    let (best, wer) = tune_lambda(&model, &dev, &grid)?;
    println!("\nselected lambda {best} with dev wer {wer:.4}");
    Ok(())
}
