//! The whole pipeline in one place: generate a corpus, train the
//! multi-task model, tune the rescoring weight on a dev set, and evaluate
//! perplexity, understanding quality, and WER on both test conditions.

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::{default_grammar, OTHER_LABEL};
use mtlm::corpus::simulate::{simulate_corpus, NoiseConfig};
use mtlm::corpus::{encode_dataset, EncodedUtterance};
use mtlm::error::Result;
use mtlm::metrics::{corpus_wer, intent_error_rate, slot_f1, werr};
use mtlm::model::{EncoderVariant, Model, ModelConfig};
use mtlm::rescore::{rescore, tune_lambda, NBestList, RescoreConfig};
use mtlm::train::{train, Schedule, TrainConfig};

fn wer_at(model: &Model, lists: &[NBestList], rc: &RescoreConfig) -> Result<f64> {
    let pairs = lists
        .iter()
        .map(|l| {
            let o = rescore(model, l, rc)?;
            Ok((l.reference.clone(), l.hypotheses[o.chosen].tokens.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus_wer(&pairs)?.wer())
}

fn report(model: &Model, name: &str, data: &[EncodedUtterance], lists: &[NBestList], lambda: f64) -> Result<()> {
    let seqs: Vec<_> = data.iter().map(|u| u.seq.clone()).collect();
    let ppl = model.perplexity(&seqs)?;
    let mut gi = Vec::new();
    let mut pi = Vec::new();
    let mut gs = Vec::new();
    let mut ps = Vec::new();
    for utt in data {
        gi.push(utt.intent.unwrap());
        pi.push(model.predict_intent(&utt.seq)?);
        gs.push(utt.slots.clone().unwrap());
        ps.push(model.predict_slots(&utt.seq)?);
    }
    let other = model.config().slot_id(OTHER_LABEL)?;
    let baseline = wer_at(model, lists, &RescoreConfig { lambda: 0.0, normalize_lm: true })?;
    let tuned = wer_at(model, lists, &RescoreConfig { lambda, normalize_lm: true })?;
    println!(
        "{name:>10}: ppl {ppl:7.3}  intent-er {:.3}  slot-f1 {:.3}  wer {baseline:.4} -> {tuned:.4} (werr {:+.1}%)",
        intent_error_rate(&gi, &pi)?,
        slot_f1(&gs, &ps, other)?,
        100.0 * werr(baseline, tuned)?
    );
    Ok(())
}

fn main() -> Result<()> {
    let spec = default_grammar();
    let grammar = spec.compile()?;
    let sizes =
        DatasetSizes { train_nlu: 1200, train_trans: 0, test_gen: 150, test_rare: 80 };
    let bundle = generate(&spec, &sizes)?;
    let intents = grammar.intent_labels();
    let slots = grammar.slot_labels();
    let data = encode_dataset(&bundle.train_nlu, &grammar.vocab, &intents, &slots)?;
    let gen = encode_dataset(&bundle.test_gen, &grammar.vocab, &intents, &slots)?;
    let rare = encode_dataset(&bundle.test_rare, &grammar.vocab, &intents, &slots)?;

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
    let cfg = TrainConfig { epochs: 12, schedule: Schedule::Rwma, ..TrainConfig::default() };
    println!("training on {} annotated utterances...", data.len());
    train(&mut model, &data, &[], &cfg)?;

    let noise = NoiseConfig::default();
    let dev_src: Vec<_> = bundle.train_nlu[..150].to_vec();
    let dev = simulate_corpus(&dev_src, &grammar, &noise, spec.seed)?;
    let gen_lists = simulate_corpus(&bundle.test_gen, &grammar, &noise, spec.seed)?;
    let rare_lists = simulate_corpus(&bundle.test_rare, &grammar, &noise, spec.seed)?;

    let grid = [0.0, 0.001, 0.002, 0.004, 0.006, 0.01, 0.02, 0.05, 0.1];
    let (lambda, dev_wer) = tune_lambda(&model, &dev, &grid)?;
    println!("tuned lambda {lambda} (dev wer {dev_wer:.4})\n");

    report(&model, "test_gen", &gen, &gen_lists, lambda)?;
    report(&model, "test_rare", &rare, &rare_lists, lambda)?;
    Ok(())
}
