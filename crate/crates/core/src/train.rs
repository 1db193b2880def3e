//! Training loop: decoupled-weight-decay adaptive moments (AdamW), cosine
//! learning-rate decay with linear warmup over the first 5% of steps, and
//! best-checkpoint selection by validation primary-label F1.
//!
//! Runs are reproducible: data preparation parallelism is over pure
//! per-document functions, and the optimization path is strictly
//! single-writer, so a fixed seed yields an identical loss trajectory and
//! identical weights at any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledDocument;
use crate::dom::{build_node_sequence, chunk_sequence, parse_html};
use crate::error::{Error, Result};
use crate::model::{LabelSet, ModelConfig, ScraperModel, NUM_LABELS};
use crate::scalar::Scalar;
use crate::tokenizer::{tokenize, TokenIds, TokenizerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batch size in sequences (chunks).
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Warmup fraction of total steps; `warmup_steps = ceil(frac · total)`.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Fraction of documents held out for validation (split by doc_id).
    pub val_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            peak_lr: 6e-4,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_frac: 0.1,
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe (30 epochs, batch 1024); far beyond desk scale.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 1024,
            ..TrainConfig::default()
        }
    }
}

/// Learning rate at 1-based `step` of `total_steps`: linear warmup to
/// `peak` at `warmup_steps`, then cosine decay to zero at the final step.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    assert!(step >= 1 && step <= total_steps);
    if step <= warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return peak;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn warmup_steps(total_steps: usize, frac: f64) -> usize {
    ((total_steps as f64) * frac).ceil() as usize
}

/// AdamW optimizer state, aligned with the model's parameter visitation
/// order.
pub struct AdamW<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: usize,
    beta1: F,
    beta2: F,
    eps: F,
    weight_decay: F,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(model: &ScraperModel<F>, cfg: &TrainConfig) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |_, p| m.push(vec![F::zero(); p.value.len()]));
        let v = m.clone();
        AdamW {
            m,
            v,
            t: 0,
            beta1: F::cast(cfg.beta1),
            beta2: F::cast(cfg.beta2),
            eps: F::cast(cfg.eps),
            weight_decay: F::cast(cfg.weight_decay),
        }
    }

    /// One decoupled-weight-decay update from the gradients currently
    /// accumulated in the model, then zero them.
    pub fn step(&mut self, model: &mut ScraperModel<F>, lr: f64) {
        self.t += 1;
        let lr = F::cast(lr);
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |_, p| {
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            let g = p.grad.data();
            let w = unsafe {
                // w and g are disjoint fields of the same Param
                std::slice::from_raw_parts_mut(
                    p.value.data_mut().as_mut_ptr(),
                    p.value.len(),
                )
            };
            for i in 0..w.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * w[i]);
            }
            idx += 1;
        });
        model.zero_grads();
    }
}

/// A tokenized chunk ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedChunk {
    pub doc_id: String,
    pub tokens: Vec<TokenIds>,
    pub labels: Vec<LabelSet>,
}

/// Parse, sequence, chunk and tokenize a document against its labels.
pub fn prepare_document(
    doc: &LabeledDocument,
    tok: &TokenizerConfig,
    l_max: usize,
) -> Result<Vec<PreparedChunk>> {
    let tree = parse_html(&doc.html)?;
    let nodes = build_node_sequence(&tree);
    Ok(chunk_sequence(&doc.doc_id, nodes, l_max)
        .into_iter()
        .map(|chunk| PreparedChunk {
            doc_id: chunk.doc_id.clone(),
            tokens: chunk.nodes.iter().map(|n| tokenize(&n.text, tok)).collect(),
            labels: chunk.nodes.iter().map(|n| doc.label_for(n.node_id)).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean binary cross-entropy per node-label over the epoch.
    pub train_loss: f64,
    pub val_f1_primary: f64,
    pub lr_last: f64,
}

pub struct TrainOutcome<F> {
    pub model: ScraperModel<F>,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Split documents into train/validation by doc_id, deterministically.
/// The returned id sets are disjoint.
pub fn split_corpus<'a>(
    corpus: &'a [LabeledDocument],
    val_frac: f64,
    seed: u64,
) -> (Vec<&'a LabeledDocument>, Vec<&'a LabeledDocument>) {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0051_u64);
    order.shuffle(&mut rng);
    let n_val = ((corpus.len() as f64) * val_frac).round() as usize;
    let n_val = n_val.min(corpus.len().saturating_sub(1));
    let val: Vec<&LabeledDocument> = order[..n_val].iter().map(|&i| &corpus[i]).collect();
    let train: Vec<&LabeledDocument> = order[n_val..].iter().map(|&i| &corpus[i]).collect();
    (train, val)
}

/// Train on a labeled corpus; returns the best-validation-F1 model.
pub fn train<F: Scalar>(
    corpus: &[LabeledDocument],
    mcfg: ModelConfig,
    tok: TokenizerConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    mcfg.validate()?;
    let (train_docs, val_docs) = split_corpus(corpus, tcfg.val_frac, tcfg.seed);
    {
        let train_ids: std::collections::BTreeSet<&str> =
            train_docs.iter().map(|d| d.doc_id.as_str()).collect();
        for d in &val_docs {
            assert!(
                !train_ids.contains(d.doc_id.as_str()),
                "validation doc {} leaked into the training split",
                d.doc_id
            );
        }
    }

    // pure per-document preparation; parallelism cannot affect results
    let train_chunks: Vec<PreparedChunk> = train_docs
        .par_iter()
        .map(|d| prepare_document(d, &tok, mcfg.l_max))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .filter(|c| !c.tokens.is_empty())
        .collect();
    let val_chunks: Vec<PreparedChunk> = val_docs
        .par_iter()
        .map(|d| prepare_document(d, &tok, mcfg.l_max))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .filter(|c| !c.tokens.is_empty())
        .collect();
    if train_chunks.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut model: ScraperModel<F> = ScraperModel::init(mcfg, tok, tcfg.seed)?;
    let mut opt = AdamW::new(&model, tcfg);

    let steps_per_epoch = train_chunks.len().div_ceil(tcfg.batch_size);
    let total_steps = steps_per_epoch * tcfg.epochs;
    let warmup = warmup_steps(total_steps, tcfg.warmup_frac);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut logs = Vec::with_capacity(tcfg.epochs);
    let mut step = 0usize;
    let mut best: Option<(usize, f64, ScraperModel<F>)> = None;

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train_chunks.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss_sum = 0.0f64;
        let mut epoch_node_labels = 0usize;
        let mut lr_last = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            step += 1;
            let mut batch_loss = 0.0f64;
            let mut batch_node_labels = 0usize;
            model.zero_grads();
            for &ci in batch {
                let chunk = &train_chunks[ci];
                let loss = model.train_step_chunk(&chunk.tokens, &chunk.labels)?;
                let loss = loss.as_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                batch_loss += loss;
                batch_node_labels += chunk.tokens.len() * NUM_LABELS;
            }
            // scale to mean BCE per node-label so the update magnitude does
            // not depend on page sizes
            let scale = F::cast(1.0 / batch_node_labels as f64);
            model.visit_params_mut(&mut |_, p| {
                for g in p.grad.data_mut() {
                    *g = *g * scale;
                }
            });
            lr_last = lr_at(step, total_steps, warmup, tcfg.peak_lr);
            opt.step(&mut model, lr_last);
            epoch_loss_sum += batch_loss;
            epoch_node_labels += batch_node_labels;
        }

        let val_f1 = validation_primary_f1(&model, &val_chunks);
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss_sum / epoch_node_labels.max(1) as f64,
            val_f1_primary: val_f1,
            lr_last,
        });
        let improved = best.as_ref().map_or(true, |(_, f1, _)| val_f1 > *f1);
        if improved {
            best = Some((epoch, val_f1, model.clone()));
        }
    }

    let (best_epoch, best_val_f1, best_model) =
        best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best_model,
        logs,
        best_epoch,
        best_val_f1,
    })
}

/// Micro-averaged F1 of the primary label at threshold 0.5 over prepared
/// chunks. Returns 0 when there is nothing to evaluate.
pub fn validation_primary_f1<F: Scalar>(
    model: &ScraperModel<F>,
    chunks: &[PreparedChunk],
) -> f64 {
    let half = F::cast(0.5);
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for chunk in chunks {
        let Ok(probs) = model.predict_chunk(&chunk.tokens) else {
            continue;
        };
        for (p, y) in probs.iter().zip(&chunk.labels) {
            let pred = p.primary() >= half;
            match (pred, y.is_primary()) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}
