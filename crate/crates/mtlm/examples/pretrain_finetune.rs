//! Pretrain the backbone on a large transcription-only corpus, then
//! finetune all three tasks on the smaller annotated corpus.

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::default_grammar;
use mtlm::corpus::encode_dataset;
use mtlm::error::Result;
use mtlm::model::{EncoderVariant, Model, ModelConfig};
use mtlm::train::{pretrain_finetune, Schedule, TrainConfig};

fn main() -> Result<()> {
    let spec = default_grammar();
    let grammar = spec.compile()?;
    let sizes =
        DatasetSizes { train_nlu: 400, train_trans: 3200, test_gen: 80, test_rare: 0 };
    let bundle = generate(&spec, &sizes)?;
    let intents = grammar.intent_labels();
    let slots = grammar.slot_labels();
    let trans = encode_dataset(&bundle.train_trans, &grammar.vocab, &intents, &slots)?;
    let nlu = encode_dataset(&bundle.train_nlu, &grammar.vocab, &intents, &slots)?;
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

    let pre_cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let fine_cfg = TrainConfig { epochs: 6, schedule: Schedule::Rwma, ..TrainConfig::default() };
    let (stage1, stage2) = pretrain_finetune(&mut model, &trans, &nlu, &val, &pre_cfg, &fine_cfg, 99)?;

    println!("pretraining on {} transcription-only utterances:", trans.len());
    for r in &stage1.records {
        println!("  epoch {}: val ppl {:.3}", r.epoch, r.val_ppl.unwrap());
    }
    println!("finetuning on {} annotated utterances:", nlu.len());
    for r in &stage2.records {
        println!(
            "  epoch {}: val ppl {:.3}  (alpha {:.2}/{:.2}/{:.2})",
            r.epoch,
            r.val_ppl.unwrap(),
            r.weights.lm,
            r.weights.intent,
            r.weights.slot
        );
    }
    let before = stage1.records.last().unwrap().val_ppl.unwrap();
    let after = stage2.records.last().unwrap().val_ppl.unwrap();
    println!("\npretrain-only ppl {before:.3} -> finetuned ppl {after:.3}");
    Ok(())
}
