//! Generate a small synthetic corpus from the built-in grammar and show
//! what the splits and simulated first-pass n-best lists look like.

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::default_grammar;
use mtlm::corpus::simulate::{simulate_first_pass, NoiseConfig};
use mtlm::error::Result;

fn main() -> Result<()> {
    let spec = default_grammar();
    let grammar = spec.compile()?;
    let sizes =
        DatasetSizes { train_nlu: 200, train_trans: 400, test_gen: 40, test_rare: 20 };
    let bundle = generate(&spec, &sizes)?;

    println!(
        "vocab {} tokens ({} rare), {} intents, {} slot labels",
        grammar.vocab.len(),
        grammar.rare_tokens.len(),
        grammar.intent_labels().len(),
        grammar.slot_labels().len()
    );
    println!("\nannotated training utterances:");
    for utt in &bundle.train_nlu[..4] {
        println!("  {:>12}  {}", utt.intent.as_deref().unwrap_or("-"), utt.tokens.join(" "));
        println!("  {:>12}  {}", "", utt.slots.as_ref().unwrap().join(" "));
    }
    println!("\ntranscription-only utterances:");
    for utt in &bundle.train_trans[..3] {
        println!("  {}", utt.tokens.join(" "));
    }
    println!("\nrare-token test utterances:");
    for utt in &bundle.test_rare[..3] {
        let marks: Vec<String> = utt
            .tokens
            .iter()
            .map(|t| {
                if grammar.rare_tokens.contains(t) { format!("[{t}]") } else { t.clone() }
            })
            .collect();
        println!("  {}", marks.join(" "));
    }

    let noise = NoiseConfig::default();
    let list = simulate_first_pass(&bundle.test_rare[0], &grammar, &noise, spec.seed)?;
    println!("\nsimulated {}-best list for {:?}:", list.hypotheses.len(), list.id);
    println!("  reference: {}", list.reference.join(" "));
    for hyp in &list.hypotheses[..5] {
        println!("  {:>9.3}  {}", hyp.first_pass_logprob, hyp.tokens.join(" "));
    }
    Ok(())
}
