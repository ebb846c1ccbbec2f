//! Train the three-task model with adaptive loss weighting and watch the
//! task weights move as the losses evolve.

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::default_grammar;
use mtlm::corpus::encode_dataset;
use mtlm::error::Result;
use mtlm::metrics;
use mtlm::model::{EncoderVariant, Model, ModelConfig};
use mtlm::train::{train, Schedule, TrainConfig};

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
        intent_labels: intents.clone(),
        slot_labels: slots.clone(),
        encoder: EncoderVariant::WeightedAttention,
        pool_dim: 16,
        tie_embeddings: false,
        init_scale: 0.1,
    };
    let mut model = Model::new(config, grammar.vocab.clone(), 1)?;

    let cfg = TrainConfig { epochs: 8, schedule: Schedule::Rwma, ..TrainConfig::default() };
    let log = train(&mut model, &data, &val, &cfg)?;
    println!("epoch   lm-ce  intent-ce  slot-ce   alpha(lm/id/sf)   updates");
    for (r, updates) in log.records.iter().zip(&log.weight_updates) {
        println!(
            "{:>5}  {:>6.3}  {:>9.3}  {:>7.3}   {:.2}/{:.2}/{:.2}    {:>7}",
            r.epoch,
            r.lm_loss.unwrap(),
            r.intent_loss.unwrap(),
            r.slot_loss.unwrap(),
            r.weights.lm,
            r.weights.intent,
            r.weights.slot,
            updates
        );
    }

    let mut gold_intents = Vec::new();
    let mut pred_intents = Vec::new();
    let mut gold_slots = Vec::new();
    let mut pred_slots = Vec::new();
    for utt in &val {
        gold_intents.push(utt.intent.unwrap());
        pred_intents.push(model.predict_intent(&utt.seq)?);
        gold_slots.push(utt.slots.clone().unwrap());
        pred_slots.push(model.predict_slots(&utt.seq)?);
    }
    let other = model.config().slot_id(mtlm::corpus::grammar::OTHER_LABEL)?;
    println!(
        "\nheld-out intent error {:.3}, slot f1 {:.3}",
        metrics::intent_error_rate(&gold_intents, &pred_intents)?,
        metrics::slot_f1(&gold_slots, &pred_slots, other)?
    );
    Ok(())
}
