//! Verify the analytic gradients of every loss against central finite
//! differences, for each encoder variant.

use std::cell::RefCell;

use mtlm::corpus::generate::{generate, DatasetSizes};
use mtlm::corpus::grammar::default_grammar;
use mtlm::corpus::encode_dataset;
use mtlm::error::Result;
use mtlm::model::{EncoderVariant, GraphBuilder, Model, ModelConfig};
use mtlm::numeric::check_gradients;
use mtlm::params::ParamSet;
use mtlm::train::{build_total_loss, LossWeights};

fn flat_grads(params: &ParamSet, grads: &mtlm::numeric::NamedGrads) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.total_len());
    for (name, m) in params.iter() {
        match grads.get(name) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat(0.0).take(m.len())),
        }
    }
    out
}

fn main() -> Result<()> {
    let spec = default_grammar();
    let grammar = spec.compile()?;
    let sizes = DatasetSizes { train_nlu: 2, train_trans: 0, test_gen: 0, test_rare: 0 };
    let bundle = generate(&spec, &sizes)?;
    let batch = encode_dataset(
        &bundle.train_nlu,
        &grammar.vocab,
        &grammar.intent_labels(),
        &grammar.slot_labels(),
    )?;

    let losses = [
        ("lm", LossWeights::new(1.0, 0.0, 0.0)?),
        ("intent", LossWeights::new(0.0, 1.0, 0.0)?),
        ("slot", LossWeights::new(0.0, 0.0, 1.0)?),
        ("combined", LossWeights::new(0.37, 0.41, 0.22)?),
    ];

    for encoder in [
        EncoderVariant::NoAttention,
        EncoderVariant::WeightedAttention,
        EncoderVariant::ProjectedAttention,
    ] {
        let config = ModelConfig {
            embed_dim: 6,
            hidden_dim: 8,
            layers: 2,
            intent_labels: grammar.intent_labels(),
            slot_labels: grammar.slot_labels(),
            encoder,
            pool_dim: 5,
            tie_embeddings: false,
            init_scale: 0.5,
        };
        let model = Model::new(config, grammar.vocab.clone(), 7)?;
        let theta = model.params().flatten();
        let cell = RefCell::new(model);

        for (name, weights) in &losses {
            let loss = |flat: &[f64]| -> Result<f64> {
                let mut m = cell.borrow_mut();
                m.params_mut().unflatten(flat)?;
                let mut gb = GraphBuilder::new(&m);
                let l = build_total_loss(&mut gb, &batch, weights)?;
                gb.scalar(l.total)
            };
            let grad = |flat: &[f64]| -> Result<Vec<f64>> {
                let mut m = cell.borrow_mut();
                m.params_mut().unflatten(flat)?;
                let mut gb = GraphBuilder::new(&m);
                let l = build_total_loss(&mut gb, &batch, weights)?;
                let grads = gb.backward(l.total)?;
                Ok(flat_grads(m.params(), &grads))
            };
            let max_rel = check_gradients(loss, grad, &theta, 1e-5, 300, 3)?;
            println!(
                "{:>20} / {:<8} max relative error {max_rel:.3e}",
                encoder.name(),
                name
            );
        }
    }
    Ok(())
}
