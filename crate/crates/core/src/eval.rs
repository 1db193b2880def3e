//! Extraction, node-level metrics, containment scoring, and rule-based
//! baseline extractors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dom::{build_annotated_nodes, build_node_sequence, chunk_sequence, parse_html};
use crate::error::{Error, Result};
use crate::model::NodePredictor;
use crate::tokenizer::tokenize;

/// The primary content extracted from one page: the kept node ids in
/// ascending order and their texts joined by newlines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Extraction {
    pub doc_id: String,
    pub text: String,
    pub kept_node_ids: Vec<usize>,
}

/// Node-level confusion counts and derived metrics. All 0/0 ratios are
/// defined as 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms_per_page: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let total = tp + fp + tn + fn_;
        let accuracy = ratio(tp + tn, total);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            tp,
            fp,
            tn,
            fn_,
            accuracy,
            precision,
            recall,
            f1,
            latency_ms_per_page: None,
        }
    }

    fn add_outcome(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    fn finalize(self) -> Self {
        let mut out = EvalReport::from_counts(self.tp, self.fp, self.tn, self.fn_);
        out.latency_ms_per_page = self.latency_ms_per_page;
        out
    }

    /// Merge counts (micro-averaging) and recompute the derived metrics.
    pub fn merged(reports: impl IntoIterator<Item = EvalReport>) -> Self {
        let mut acc = EvalReport::default();
        for r in reports {
            acc.tp += r.tp;
            acc.fp += r.fp;
            acc.tn += r.tn;
            acc.fn_ += r.fn_;
        }
        acc.finalize()
    }
}

/// Run the model over a page and keep every node whose primary-content
/// probability is at least `threshold`. An empty page yields an empty
/// extraction, not an error.
pub fn extract_primary(
    doc_id: &str,
    html: &str,
    model: &dyn NodePredictor,
    threshold: f32,
) -> Result<Extraction> {
    let tree = parse_html(html)?;
    let nodes = build_node_sequence(&tree);
    let tok = model.tokenizer_config().clone();
    let mut kept_ids = Vec::new();
    let mut kept_texts = Vec::new();
    for chunk in chunk_sequence(doc_id, nodes, model.chunk_len()) {
        let tokens: Vec<_> = chunk.nodes.iter().map(|n| tokenize(&n.text, &tok)).collect();
        let probs = model.predict_probs(&tokens)?;
        for (node, p) in chunk.nodes.iter().zip(&probs) {
            if p.primary() >= threshold {
                kept_ids.push(node.node_id);
                kept_texts.push(node.text.clone());
            }
        }
    }
    Ok(Extraction {
        doc_id: doc_id.to_string(),
        text: kept_texts.join("\n"),
        kept_node_ids: kept_ids,
    })
}

/// Exact node-level binary metrics; prediction and gold must cover the same
/// node ids.
pub fn evaluate_node_level(
    pred: &BTreeMap<usize, bool>,
    gold: &BTreeMap<usize, bool>,
) -> Result<EvalReport> {
    if pred.len() != gold.len() || !pred.keys().eq(gold.keys()) {
        return Err(Error::KeyMismatch);
    }
    let mut report = EvalReport::default();
    for (id, &p) in pred {
        report.add_outcome(p, gold[id]);
    }
    Ok(report.finalize())
}

/// Containment scoring for extractors that only return plain text: a node
/// counts as predicted-primary iff its normalized text occurs as a substring
/// of the normalized extracted text. Nodes with empty text are excluded.
pub fn evaluate_by_containment(
    extracted_text: &str,
    gold_nodes: &[(usize, String, bool)],
) -> EvalReport {
    let haystack = crate::dom::normalize_text(extracted_text);
    let mut report = EvalReport::default();
    for (_, text, is_primary) in gold_nodes {
        if text.is_empty() {
            continue;
        }
        let predicted = haystack.contains(text.as_str());
        report.add_outcome(predicted, *is_primary);
    }
    report.finalize()
}

/// Baseline: keep every retained node.
pub fn baseline_keep_all(doc_id: &str, html: &str) -> Result<Extraction> {
    let tree = parse_html(html)?;
    let nodes = build_node_sequence(&tree);
    Ok(Extraction {
        doc_id: doc_id.to_string(),
        text: nodes
            .iter()
            .map(|n| n.text.as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        kept_node_ids: nodes.iter().map(|n| n.node_id).collect(),
    })
}

/// Baseline: text-density and link-density heuristic. Keeps `Text` nodes
/// with at least `min_words` words and an anchor-text fraction of at most
/// `max_link_density`; `Table`/`List` nodes only need the word bound.
pub fn baseline_density(
    doc_id: &str,
    html: &str,
    min_words: usize,
    max_link_density: f64,
) -> Result<Extraction> {
    let tree = parse_html(html)?;
    let mut kept_ids = Vec::new();
    let mut kept_texts = Vec::new();
    for annotated in build_annotated_nodes(&tree) {
        let node = &annotated.node;
        let words = node.text.split_whitespace().count();
        let keep = match node.kind {
            crate::dom::NodeKind::Text => {
                words >= min_words && annotated.link_density() <= max_link_density
            }
            crate::dom::NodeKind::Table | crate::dom::NodeKind::List => words >= min_words,
        };
        if keep {
            kept_ids.push(node.node_id);
            kept_texts.push(node.text.clone());
        }
    }
    Ok(Extraction {
        doc_id: doc_id.to_string(),
        text: kept_texts.join("\n"),
        kept_node_ids: kept_ids,
    })
}

pub const DEFAULT_MIN_WORDS: usize = 10;
pub const DEFAULT_MAX_LINK_DENSITY: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Gold per-node primary flags for one labeled document, aligned with the
/// retained node ids.
pub fn gold_primary_nodes(doc: &crate::corpus::LabeledDocument) -> Result<Vec<(usize, String, bool)>> {
    let tree = parse_html(&doc.html)?;
    Ok(build_node_sequence(&tree)
        .into_iter()
        .map(|n| {
            let primary = doc.label_for(n.node_id).is_primary();
            (n.node_id, n.text, primary)
        })
        .collect())
}

/// Score one extraction against one labeled document at node level.
pub fn node_level_report(
    doc: &crate::corpus::LabeledDocument,
    extraction: &Extraction,
) -> Result<EvalReport> {
    let gold_nodes = gold_primary_nodes(doc)?;
    let kept: std::collections::BTreeSet<usize> =
        extraction.kept_node_ids.iter().copied().collect();
    let mut pred = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for (id, _, primary) in &gold_nodes {
        pred.insert(*id, kept.contains(id));
        gold.insert(*id, *primary);
    }
    evaluate_node_level(&pred, &gold)
}

/// Score one extraction against one labeled document by text containment.
pub fn containment_report(
    doc: &crate::corpus::LabeledDocument,
    extraction: &Extraction,
) -> Result<EvalReport> {
    let gold_nodes = gold_primary_nodes(doc)?;
    Ok(evaluate_by_containment(&extraction.text, &gold_nodes))
}
