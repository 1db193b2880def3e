//! Sequence model: projection, node-position embeddings, a stack of
//! transformer encoder layers over the nodes of one chunk, and six sigmoid
//! label heads per node, trained with summed multi-label binary
//! cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{NodeEncoder, NodeEncoderCache, NodeVector};
use crate::error::{Error, Result};
use crate::nn::layers::{EncoderLayer, EncoderLayerCache, LayerNorm, LayerNormCache, Linear};
use crate::nn::tensor::{Param, Tensor};
use crate::nn::{gelu, gelu_grad, randn_tensor};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenIds, TokenizerConfig};

/// Number of label categories; fixed by the wire format.
pub const NUM_LABELS: usize = 6;

/// Label indices. The order is part of the wire format and never changes.
pub const LABEL_PRIMARY: usize = 0;
pub const LABEL_HEADING: usize = 1;
pub const LABEL_TITLE: usize = 2;
pub const LABEL_PARAGRAPH: usize = 3;
pub const LABEL_TABLE: usize = 4;
pub const LABEL_LIST: usize = 5;

pub const LABEL_NAMES: [&str; NUM_LABELS] =
    ["primary", "heading", "title", "paragraph", "table", "list"];

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the per-node CLS representation.
    pub d_node: usize,
    /// Width of the sequence transformer.
    pub d_model: usize,
    /// Transformer layers over node positions.
    pub n_layers: usize,
    /// Attention heads of the sequence transformer.
    pub n_heads: usize,
    /// Maximum nodes per chunk.
    pub l_max: usize,
    /// Label categories; always 6.
    pub n_labels: usize,
    /// Attention heads of the per-node encoder layer.
    pub node_heads: usize,
    /// Feed-forward width of the per-node encoder layer.
    pub node_ff: usize,
    /// Feed-forward width of the sequence transformer layers.
    pub seq_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_node: 128,
            d_model: 256,
            n_layers: 3,
            n_heads: 8,
            l_max: 384,
            n_labels: NUM_LABELS,
            node_heads: 8,
            node_ff: 512,
            seq_ff: 1024,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: same architecture shape, sized to train in
    /// minutes on a CPU.
    pub fn desk_scale() -> Self {
        ModelConfig {
            d_node: 128,
            d_model: 128,
            n_layers: 3,
            n_heads: 8,
            l_max: 128,
            n_labels: NUM_LABELS,
            node_heads: 8,
            node_ff: 256,
            seq_ff: 256,
        }
    }

    /// Tiny configuration for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_node: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            l_max: 16,
            n_labels: NUM_LABELS,
            node_heads: 2,
            node_ff: 32,
            seq_ff: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_labels != NUM_LABELS {
            return Err(Error::ShapeMismatch(format!(
                "n_labels must be {NUM_LABELS}, got {}",
                self.n_labels
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_node % self.node_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "d_node {} not divisible by node_heads {}",
                self.d_node, self.node_heads
            )));
        }
        for (name, v) in [
            ("d_node", self.d_node),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("l_max", self.l_max),
            ("node_heads", self.node_heads),
            ("node_ff", self.node_ff),
            ("seq_ff", self.seq_ff),
        ] {
            if v == 0 {
                return Err(Error::ShapeMismatch(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Ground-truth labels for one node. Index order:
/// `[primary, heading, title, paragraph, table, list]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    pub bits: [bool; NUM_LABELS],
}

impl LabelSet {
    pub fn none() -> Self {
        LabelSet::default()
    }

    pub fn from_bits(bits: [bool; NUM_LABELS]) -> Self {
        LabelSet { bits }
    }

    pub fn with(mut self, label: usize) -> Self {
        self.bits[label] = true;
        self
    }

    pub fn is_primary(&self) -> bool {
        self.bits[LABEL_PRIMARY]
    }
}

/// Sigmoid label probabilities for one node; every entry is strictly inside
/// (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probabilities<F> {
    pub p: [F; NUM_LABELS],
}

impl<F: Scalar> Probabilities<F> {
    pub fn primary(&self) -> F {
        self.p[LABEL_PRIMARY]
    }
}

/// A node representation after the sequence transformer (`d_model` wide).
pub type EncodedNode<F> = Vec<F>;

/// Anything that can turn a chunk of tokenized nodes into per-node label
/// probabilities: the float model, or a quantized one.
pub trait NodePredictor: Send + Sync {
    fn tokenizer_config(&self) -> &TokenizerConfig;
    /// Maximum nodes per chunk.
    fn chunk_len(&self) -> usize;
    fn predict_probs(&self, nodes: &[TokenIds]) -> Result<Vec<Probabilities<f32>>>;
}

impl NodePredictor for ScraperModel<f32> {
    fn tokenizer_config(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    fn chunk_len(&self) -> usize {
        self.config.l_max
    }

    fn predict_probs(&self, nodes: &[TokenIds]) -> Result<Vec<Probabilities<f32>>> {
        self.predict_chunk(nodes)
    }
}

const LOGIT_CLAMP: f64 = 30.0;

/// Clamp a logit into `[-30, 30]`.
fn clamp_logit<F: Scalar>(z: F) -> F {
    let c = F::cast(LOGIT_CLAMP);
    z.min(c).max(-c)
}

/// Sigmoid of a clamped logit, kept strictly inside (0, 1) at any precision.
pub fn clamped_sigmoid<F: Scalar>(z: F) -> F {
    let zc = clamp_logit(z);
    let p = (F::one() + (-zc).exp()).recip();
    let lo = (F::one() + F::cast(LOGIT_CLAMP).exp()).recip();
    let hi = F::one() - F::epsilon();
    p.max(lo).min(hi)
}

/// Transformer over the nodes of one chunk (Linear projection + learned
/// chunk-local position embedding + `n_layers` bidirectional encoder layers).
#[derive(Debug, Clone)]
pub struct SequenceEncoder<F> {
    pub proj: Linear<F>,
    /// Learned node-position embedding, `l_max × d_model`; realizes the
    /// visit-order location signal, chunk-local.
    pub pos_emb: Param<F>,
    pub layers: Vec<EncoderLayer<F>>,
    pub final_ln: LayerNorm<F>,
}

#[derive(Debug)]
pub struct SequenceCache<F> {
    h: Tensor<F>,
    x0: Tensor<F>,
    layer_caches: Vec<EncoderLayerCache<F>>,
    ln: LayerNormCache<F>,
}

impl<F: Scalar> SequenceEncoder<F> {
    fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig, std: f64) -> Self {
        SequenceEncoder {
            proj: Linear::init(rng, cfg.d_node, cfg.d_model, std),
            pos_emb: Param::new(randn_tensor(rng, &[cfg.l_max, cfg.d_model], std)),
            layers: (0..cfg.n_layers)
                .map(|_| EncoderLayer::init(rng, cfg.d_model, cfg.n_heads, cfg.seq_ff, std))
                .collect(),
            final_ln: LayerNorm::new(cfg.d_model),
        }
    }

    pub fn l_max(&self) -> usize {
        self.pos_emb.value.dims()[0]
    }

    /// Encode a chunk of node vectors. `h` is `n × d_node` with
    /// `1 ≤ n ≤ l_max`.
    pub fn forward(&self, h: Tensor<F>) -> Result<(Tensor<F>, SequenceCache<F>)> {
        let n = h.rows();
        if n > self.l_max() {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.l_max(),
            });
        }
        if h.cols() != self.proj.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "node vectors have width {}, expected {}",
                h.cols(),
                self.proj.in_dim()
            )));
        }
        let mut x = self.proj.forward(&h);
        for r in 0..n {
            let pos = self.pos_emb.value.row(r);
            for (v, &p) in x.row_mut(r).iter_mut().zip(pos) {
                *v = *v + p;
            }
        }
        let x0 = x.clone();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x);
            layer_caches.push(cache);
            x = y;
        }
        let (out, ln) = self.final_ln.forward(&x);
        Ok((
            out,
            SequenceCache {
                h,
                x0,
                layer_caches,
                ln,
            },
        ))
    }

    /// Backward from a gradient on the encoded nodes; returns the gradient
    /// with respect to the input node vectors (`n × d_node`).
    pub fn backward(&mut self, cache: &SequenceCache<F>, dout: &Tensor<F>) -> Tensor<F> {
        let mut dx = self.final_ln.backward(&cache.ln, dout);
        for (layer, lcache) in self.layers.iter_mut().zip(&cache.layer_caches).rev() {
            dx = layer.backward(lcache, &dx);
        }
        debug_assert_eq!(dx.rows(), cache.x0.rows());
        for r in 0..dx.rows() {
            let g = self.pos_emb.grad.row_mut(r);
            for (gv, &dv) in g.iter_mut().zip(dx.row(r)) {
                *gv = *gv + dv;
            }
        }
        self.proj.backward(&cache.h, &dx)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.proj.visit(&format!("{prefix}.proj"), f);
        f(format!("{prefix}.pos_emb"), &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{i}"), f);
        }
        self.final_ln.visit(&format!("{prefix}.final_ln"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
        f(format!("{prefix}.pos_emb"), &mut self.pos_emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
        self.final_ln.visit_mut(&format!("{prefix}.final_ln"), f);
    }
}

/// Two-layer MLP label head (`d_model → d_model → 6`), applied per node.
#[derive(Debug, Clone)]
pub struct LabelHead<F> {
    pub lin1: Linear<F>,
    pub lin2: Linear<F>,
}

#[derive(Debug)]
pub struct HeadCache<F> {
    e: Tensor<F>,
    pre: Tensor<F>,
    act: Tensor<F>,
}

impl<F: Scalar> LabelHead<F> {
    fn init(rng: &mut ChaCha8Rng, d_model: usize, std: f64) -> Self {
        LabelHead {
            lin1: Linear::init(rng, d_model, d_model, std),
            lin2: Linear::init(rng, d_model, NUM_LABELS, std),
        }
    }

    /// Raw (unclamped) logits for every node, `n × 6`.
    pub fn forward(&self, e: &Tensor<F>) -> (Tensor<F>, HeadCache<F>) {
        let pre = self.lin1.forward(e);
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = gelu(*v);
        }
        let logits = self.lin2.forward(&act);
        (
            logits,
            HeadCache {
                e: e.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &HeadCache<F>, dlogits: &Tensor<F>) -> Tensor<F> {
        let mut dact = self.lin2.backward(&cache.act, dlogits);
        for (d, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d = *d * gelu_grad(p);
        }
        self.lin1.backward(&cache.e, &dact)
    }

    /// Label probabilities for a single encoded node.
    pub fn predict(&self, encoded: &[F]) -> Result<Probabilities<F>> {
        if encoded.len() != self.lin1.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "encoded node has width {}, expected {}",
                encoded.len(),
                self.lin1.in_dim()
            )));
        }
        let e = Tensor::from_vec(&[1, encoded.len()], encoded.to_vec());
        let (logits, _) = self.forward(&e);
        let mut p = [F::zero(); NUM_LABELS];
        for (out, &z) in p.iter_mut().zip(logits.row(0)) {
            *out = clamped_sigmoid(z);
        }
        Ok(Probabilities { p })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.lin1.visit_mut(&format!("{prefix}.lin1"), f);
        self.lin2.visit_mut(&format!("{prefix}.lin2"), f);
    }
}

/// The full hierarchical node-labeling model:
/// per-node encoder → sequence transformer → per-node label heads.
#[derive(Debug, Clone)]
pub struct ScraperModel<F> {
    pub config: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub node_encoder: NodeEncoder<F>,
    pub seq: SequenceEncoder<F>,
    pub head: LabelHead<F>,
}

#[derive(Debug)]
pub struct ChunkCache<F> {
    node_caches: Vec<NodeEncoderCache<F>>,
    seq: SequenceCache<F>,
    head: HeadCache<F>,
    raw_logits: Tensor<F>,
}

impl<F: Scalar> ScraperModel<F> {
    /// Initialize a fresh model with seeded Gaussian weights.
    pub fn init(config: ModelConfig, tokenizer: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        tokenizer.validate();
        let std = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node_encoder = NodeEncoder::init(
            &mut rng,
            tokenizer.vocab_size as usize,
            tokenizer.t_max,
            config.d_node,
            config.node_heads,
            config.node_ff,
            std,
        );
        let seq = SequenceEncoder::init(&mut rng, &config, std);
        let head = LabelHead::init(&mut rng, config.d_model, std);
        Ok(ScraperModel {
            config,
            tokenizer,
            node_encoder,
            seq,
            head,
        })
    }

    /// Forward pass over one chunk, keeping every cache needed for backward.
    pub fn forward_chunk(
        &self,
        nodes: &[TokenIds],
    ) -> Result<(Vec<Probabilities<F>>, ChunkCache<F>)> {
        if nodes.is_empty() {
            return Err(Error::LengthMismatch("chunk has no nodes".into()));
        }
        if nodes.len() > self.config.l_max {
            return Err(Error::SequenceTooLong {
                len: nodes.len(),
                max: self.config.l_max,
            });
        }
        let d_node = self.config.d_node;
        let mut h = Tensor::zeros(&[nodes.len(), d_node]);
        let mut node_caches = Vec::with_capacity(nodes.len());
        for (i, toks) in nodes.iter().enumerate() {
            let (cls, cache) = self.node_encoder.forward(toks);
            h.row_mut(i).copy_from_slice(&cls);
            node_caches.push(cache);
        }
        let (encoded, seq_cache) = self.seq.forward(h)?;
        let (raw_logits, head_cache) = self.head.forward(&encoded);
        let probs = (0..nodes.len())
            .map(|i| {
                let mut p = [F::zero(); NUM_LABELS];
                for (out, &z) in p.iter_mut().zip(raw_logits.row(i)) {
                    *out = clamped_sigmoid(z);
                }
                Probabilities { p }
            })
            .collect();
        Ok((
            probs,
            ChunkCache {
                node_caches,
                seq: seq_cache,
                head: head_cache,
                raw_logits,
            },
        ))
    }

    /// Probabilities only (inference path).
    pub fn predict_chunk(&self, nodes: &[TokenIds]) -> Result<Vec<Probabilities<F>>> {
        Ok(self.forward_chunk(nodes)?.0)
    }

    /// Batched inference. Chunks are processed padding-free, one at a time,
    /// so batched and one-at-a-time evaluation are bitwise identical.
    pub fn predict_batch(&self, chunks: &[Vec<TokenIds>]) -> Result<Vec<Vec<Probabilities<F>>>> {
        chunks.iter().map(|c| self.predict_chunk(c)).collect()
    }

    /// The spec's Eq. 2 surface: encode node vectors into per-node
    /// `d_model`-wide representations.
    pub fn encode_sequence(&self, h: &[NodeVector<F>]) -> Result<Vec<EncodedNode<F>>> {
        if h.is_empty() {
            return Err(Error::LengthMismatch("empty node-vector list".into()));
        }
        let d_node = self.config.d_node;
        for (i, v) in h.iter().enumerate() {
            if v.len() != d_node {
                return Err(Error::ShapeMismatch(format!(
                    "node vector {i} has width {}, expected {d_node}",
                    v.len()
                )));
            }
        }
        let mut stacked = Tensor::zeros(&[h.len(), d_node]);
        for (i, v) in h.iter().enumerate() {
            stacked.row_mut(i).copy_from_slice(v);
        }
        let (encoded, _) = self.seq.forward(stacked)?;
        Ok((0..h.len()).map(|i| encoded.row(i).to_vec()).collect())
    }

    /// Forward + summed BCE loss + full backward. Gradients accumulate into
    /// every parameter's `grad` buffer; returns the loss.
    pub fn train_step_chunk(&mut self, nodes: &[TokenIds], labels: &[LabelSet]) -> Result<F> {
        if nodes.len() != labels.len() {
            return Err(Error::LengthMismatch(format!(
                "{} nodes vs {} label sets",
                nodes.len(),
                labels.len()
            )));
        }
        let (_, cache) = self.forward_chunk(nodes)?;
        if cache.raw_logits.iter().any(|z| !z.is_finite()) {
            // diverged weights would otherwise be hidden by the logit clamp
            return Ok(F::nan());
        }
        let loss = bce_with_logits_sum(&cache.raw_logits, labels);

        // dL/dz = sigmoid(clamp(z)) - y, zero outside the clamp range
        let n = nodes.len();
        let mut dlogits = Tensor::zeros(&[n, NUM_LABELS]);
        for i in 0..n {
            let zrow = cache.raw_logits.row(i);
            let drow = dlogits.row_mut(i);
            for k in 0..NUM_LABELS {
                let z = zrow[k];
                if z.abs() <= F::cast(LOGIT_CLAMP) {
                    let p = (F::one() + (-z).exp()).recip();
                    let y = if labels[i].bits[k] { F::one() } else { F::zero() };
                    drow[k] = p - y;
                }
            }
        }
        let de = self.head.backward(&cache.head, &dlogits);
        let dh = self.seq.backward(&cache.seq, &de);
        for (i, node_cache) in cache.node_caches.iter().enumerate() {
            self.node_encoder.backward(node_cache, dh.row(i));
        }
        Ok(loss)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Param<F>)) {
        self.node_encoder.visit("node", f);
        self.seq.visit("seq", f);
        self.head.visit("head", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.node_encoder.visit_mut("node", f);
        self.seq.visit_mut("seq", f);
        self.head.visit_mut("head", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }
}

/// Summed multi-label binary cross-entropy from probabilities (Eq. 4 form).
///
/// The canonical reduction is the sum over all nodes and all six labels;
/// [`compute_loss_mean`] divides by `6·n`.
pub fn compute_loss<F: Scalar>(probs: &[Probabilities<F>], labels: &[LabelSet]) -> Result<F> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} probability sets vs {} label sets",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::LengthMismatch("empty inputs".into()));
    }
    let mut sum = F::zero();
    for (p, y) in probs.iter().zip(labels) {
        for k in 0..NUM_LABELS {
            let pk = p.p[k];
            let term = if y.bits[k] { pk.ln() } else { (F::one() - pk).ln() };
            sum = sum - term;
        }
    }
    Ok(sum)
}

/// Mean-reduced form of [`compute_loss`]: sum divided by `6·n`.
pub fn compute_loss_mean<F: Scalar>(probs: &[Probabilities<F>], labels: &[LabelSet]) -> Result<F> {
    let sum = compute_loss(probs, labels)?;
    Ok(sum / F::cast((NUM_LABELS * probs.len()) as f64))
}

/// Numerically stable summed BCE directly from raw logits (clamped to
/// ±30 first). Equal to [`compute_loss`] over the clamped sigmoids.
pub fn bce_with_logits_sum<F: Scalar>(raw_logits: &Tensor<F>, labels: &[LabelSet]) -> F {
    debug_assert_eq!(raw_logits.rows(), labels.len());
    let mut sum = F::zero();
    for (i, y) in labels.iter().enumerate() {
        let zrow = raw_logits.row(i);
        for k in 0..NUM_LABELS {
            let z = clamp_logit(zrow[k]);
            let yk = if y.bits[k] { F::one() } else { F::zero() };
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            sum = sum + z.max(F::zero()) - z * yk + (-z.abs()).exp().ln_1p();
        }
    }
    sum
}
