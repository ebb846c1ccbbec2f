//! Train a single-task LSTM language model and report validation perplexity.

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::default_grammar;
use mtlm::corpus::encode_dataset;
use mtlm::error::Result;
use mtlm::model::{EncoderVariant, Model, ModelConfig};
use mtlm::train::{train, LossWeights, Schedule, TrainConfig};

fn main() -> Result<()> {
    let spec = default_grammar();
    let grammar = spec.compile()?;
    let sizes = DatasetSizes { train_nlu: 600, train_trans: 0, test_gen: 80, test_rare: 0 };
    let bundle = generate(&spec, &sizes)?;
    let intents = grammar.intent_labels();
    let slots = grammar.slot_labels();
    let data = encode_dataset(&bundle.train_nlu, &grammar.vocab, &intents, &slots)?;
    let val = encode_dataset(&bundle.test_gen, &grammar.vocab, &intents, &slots)?;

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

    let cfg = TrainConfig {
        epochs: 8,
        schedule: Schedule::Fixed { weights: LossWeights::lm_only() },
        ..TrainConfig::default()
    };
    let log = train(&mut model, &data, &val, &cfg)?;
    for r in &log.records {
        println!(
            "epoch {:>2}: train ce {:.4}  val ppl {:.3}",
            r.epoch,
            r.lm_loss.unwrap(),
            r.val_ppl.unwrap()
        );
    }

    let seq = data[0].seq.clone();
    let states = model.encode(&seq)?;
    let probs = model.next_word_distribution(&states.col_vector(1)?)?;
    let mut top: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("\nafter {:?}, the most likely continuations:", grammar.vocab.token(seq.ids()[0])?);
    for (id, p) in &top[..4] {
        println!("  {:<12} {:.3}", grammar.vocab.token(*id)?, p);
    }
    Ok(())
}
