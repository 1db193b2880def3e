//! Per-node text encoder.
//!
//! Token ids are embedded, given learned positions, passed through one
//! pre-norm transformer encoder layer, and the position-0 (CLS) output is
//! the node's fixed-width representation. No cross-node information is used.

use rand::Rng;

use crate::nn::layers::{Embedding, EncoderLayer, LayerNorm};
use crate::nn::tensor::{Param, Tensor};
use crate::nn::randn_tensor;
use crate::scalar::Scalar;
use crate::tokenizer::TokenIds;

/// Fixed-width representation of one node (`d_node` entries).
pub type NodeVector<F> = Vec<F>;

#[derive(Debug, Clone)]
pub struct NodeEncoder<F> {
    pub token_emb: Embedding<F>,
    /// Learned positional embedding, `t_max × d_node`.
    pub pos_emb: Param<F>,
    pub layer: EncoderLayer<F>,
    pub final_ln: LayerNorm<F>,
}

#[derive(Debug)]
pub struct NodeEncoderCache<F> {
    ids: Vec<u32>,
    layer: crate::nn::layers::EncoderLayerCache<F>,
    ln: crate::nn::layers::LayerNormCache<F>,
    t: usize,
}

impl<F: Scalar> NodeEncoder<F> {
    pub fn init<R: Rng>(
        rng: &mut R,
        vocab: usize,
        t_max: usize,
        d_node: usize,
        n_heads: usize,
        d_ff: usize,
        std: f64,
    ) -> Self {
        NodeEncoder {
            token_emb: Embedding::init(rng, vocab, d_node, std),
            pos_emb: Param::new(randn_tensor(rng, &[t_max, d_node], std)),
            layer: EncoderLayer::init(rng, d_node, n_heads, d_ff, std),
            final_ln: LayerNorm::new(d_node),
        }
    }

    pub fn d_node(&self) -> usize {
        self.token_emb.table.value.cols()
    }

    pub fn t_max(&self) -> usize {
        self.pos_emb.value.dims()[0]
    }

    /// Encode one node's tokens into its CLS vector, keeping the caches
    /// needed for a later backward pass.
    pub fn forward(&self, tokens: &TokenIds) -> (NodeVector<F>, NodeEncoderCache<F>) {
        let ids = &tokens.ids;
        debug_assert!(!ids.is_empty(), "tokenizer always emits CLS");
        debug_assert!(ids.len() <= self.t_max());
        let mut x = self.token_emb.forward(ids);
        for (r, _) in ids.iter().enumerate() {
            let pos = self.pos_emb.value.row(r);
            let xr = x.row_mut(r);
            for (v, &p) in xr.iter_mut().zip(pos) {
                *v = *v + p;
            }
        }
        let (y, layer_cache) = self.layer.forward(&x);
        let (normed, ln_cache) = self.final_ln.forward(&y);
        let cls = normed.row(0).to_vec();
        (
            cls,
            NodeEncoderCache {
                ids: ids.clone(),
                layer: layer_cache,
                ln: ln_cache,
                t: ids.len(),
            },
        )
    }

    /// Encode without retaining backward state.
    pub fn encode(&self, tokens: &TokenIds) -> NodeVector<F> {
        self.forward(tokens).0
    }

    /// Backpropagate a gradient on the CLS vector into all encoder weights.
    pub fn backward(&mut self, cache: &NodeEncoderCache<F>, d_cls: &[F]) {
        let d = self.d_node();
        let mut dnorm = Tensor::zeros(&[cache.t, d]);
        dnorm.row_mut(0).copy_from_slice(d_cls);
        let dy = self.final_ln.backward(&cache.ln, &dnorm);
        let dx = self.layer.backward(&cache.layer, &dy);
        for r in 0..cache.t {
            let g = self.pos_emb.grad.row_mut(r);
            for (gv, &dv) in g.iter_mut().zip(dx.row(r)) {
                *gv = *gv + dv;
            }
        }
        self.token_emb.backward(&cache.ids, &dx);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.token_emb.visit(&format!("{prefix}.token_emb"), f);
        f(format!("{prefix}.pos_emb"), &self.pos_emb);
        self.layer.visit(&format!("{prefix}.layer"), f);
        self.final_ln.visit(&format!("{prefix}.final_ln"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.token_emb.visit_mut(&format!("{prefix}.token_emb"), f);
        f(format!("{prefix}.pos_emb"), &mut self.pos_emb);
        self.layer.visit_mut(&format!("{prefix}.layer"), f);
        self.final_ln.visit_mut(&format!("{prefix}.final_ln"), f);
    }
}
