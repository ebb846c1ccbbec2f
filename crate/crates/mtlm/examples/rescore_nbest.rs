//! Rescore simulated first-pass n-best lists with a trained language model
//! and compare word error rates before and after.

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::default_grammar;
use mtlm::corpus::simulate::{simulate_corpus, NoiseConfig};
use mtlm::corpus::encode_dataset;
use mtlm::error::Result;
use mtlm::metrics::corpus_wer;
use mtlm::model::{EncoderVariant, Model, ModelConfig};
use mtlm::rescore::{first_pass_choice, rescore, RescoreConfig};
use mtlm::train::{train, Schedule, TrainConfig};

fn main() -> Result<()> {
    let spec = default_grammar();
    let grammar = spec.compile()?;
    let sizes = DatasetSizes { train_nlu: 800, train_trans: 0, test_gen: 120, test_rare: 0 };
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

    let lists = simulate_corpus(&bundle.test_gen, &grammar, &NoiseConfig::default(), spec.seed)?;
    let rc = RescoreConfig { lambda: 0.02, normalize_lm: true };

    let one = &lists[1];
    let outcome = rescore(&model, one, &rc)?;
    println!("reference: {}", one.reference.join(" "));
    println!("{:>10} {:>10} {:>10}  hypothesis", "first", "lm", "combined");
    for (i, hyp) in one.hypotheses.iter().enumerate() {
        let (combined, lm) = outcome.scores[i];
        let mark = if i == outcome.chosen { " <- chosen" } else { "" };
        println!(
            "{:>10.3} {:>10.3} {:>10.3}  {}{}",
            hyp.first_pass_logprob / hyp.tokens.len() as f64,
            lm,
            combined,
            hyp.tokens.join(" "),
            mark
        );
    }

    let mut first = Vec::new();
    let mut second = Vec::new();
    for list in &lists {
        let outcome = rescore(&model, list, &rc)?;
        let top = first_pass_choice(list)?;
        first.push((list.reference.clone(), list.hypotheses[top].tokens.clone()));
        second.push((list.reference.clone(), list.hypotheses[outcome.chosen].tokens.clone()));
    }
    let before = corpus_wer(&first)?.wer();
    let after = corpus_wer(&second)?.wer();
    println!(
        "\ncorpus wer: first pass {:.4} -> rescored {:.4} ({:+.1}%)",
        before,
        after,
        100.0 * (after - before) / before
    );
    Ok(())
}
