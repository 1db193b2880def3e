//! End-to-end gradient verification: analytic backward vs central finite
//! differences over every weight tensor, at both precisions.

use neuscrape_core::gradcheck::check_model_gradients;
use neuscrape_core::model::{LabelSet, ModelConfig, ScraperModel};
use neuscrape_core::scalar::Scalar;
use neuscrape_core::tokenizer::{tokenize, TokenIds, TokenizerConfig};

fn fixture<F: Scalar>(seed: u64) -> (ScraperModel<F>, Vec<TokenIds>, Vec<LabelSet>) {
    let tok = TokenizerConfig {
        vocab_size: 512,
        t_max: 12,
    };
    let mcfg = ModelConfig {
        d_node: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        l_max: 8,
        n_labels: 6,
        node_heads: 2,
        node_ff: 32,
        seq_ff: 32,
    };
    let model = ScraperModel::init(mcfg, tok.clone(), seed).unwrap();
    let nodes: Vec<TokenIds> = [
        "river mountain theory",
        "home about contact login",
        "energy crystal harvest signal motion",
        "subscribe newsletter",
    ]
    .iter()
    .map(|t| tokenize(t, &tok))
    .collect();
    let labels = vec![
        LabelSet::from_bits([true, false, false, true, false, false]),
        LabelSet::from_bits([false, false, false, false, false, false]),
        LabelSet::from_bits([true, true, false, false, false, false]),
        LabelSet::from_bits([false, false, true, false, true, true]),
    ];
    (model, nodes, labels)
}

#[test]
fn gradients_match_finite_differences_at_f64() {
    let (mut model, nodes, labels) = fixture::<f64>(21);
    let report = check_model_gradients(&mut model, &nodes, &labels, 120, 7, 1e-6, 1e-9);
    assert!(report.checked >= 120);
    assert!(
        report.failures.is_empty(),
        "f64 failures (max rel {:.3e}): {:?}",
        report.max_rel_err,
        &report.failures[..report.failures.len().min(5)]
    );
}

#[test]
fn gradients_match_finite_differences_at_f32() {
    let (mut model, nodes, labels) = fixture::<f32>(22);
    let report = check_model_gradients(&mut model, &nodes, &labels, 120, 8, 1e-3, 5e-4);
    assert!(report.checked >= 120);
    assert!(
        report.failures.is_empty(),
        "f32 failures (max rel {:.3e}): {:?}",
        report.max_rel_err,
        &report.failures[..report.failures.len().min(5)]
    );
}

#[test]
fn every_tensor_is_probed() {
    let (mut model, nodes, labels) = fixture::<f64>(23);
    let mut n_tensors = 0;
    model.visit_params(&mut |_, _| n_tensors += 1);
    let report = check_model_gradients(&mut model, &nodes, &labels, n_tensors, 9, 1e-6, 1e-9);
    // one probe per tensor minimum
    assert!(report.checked >= n_tensors);
    assert!(report.failures.is_empty());
}
