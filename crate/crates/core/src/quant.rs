//! 8-bit post-training quantization and integer inference.
//!
//! Every weight matrix of the model is quantized per-tensor with an affine
//! scale/zero-point (`scale = (max - min) / 255`), to signed or unsigned
//! 8-bit integers. Embeddings, layer norms and biases stay at full
//! precision. At inference time the linear layers run an integer GEMM:
//! activations are quantized dynamically per row, multiplied against the
//! stored 8-bit weights with 32-bit accumulation, and the result is rescaled
//! back to real values, so model outputs remain real-valued throughout.
//!
//! The GEMM dispatches at runtime to an AVX-512 VNNI kernel, an AVX2
//! `pmaddwd` kernel, or a portable fallback; all three produce identical
//! integer results.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::MetricsSnapshot;
use crate::error::{Error, Result};
use crate::model::{
    clamped_sigmoid, ModelConfig, NodePredictor, Probabilities, ScraperModel, NUM_LABELS,
};
use crate::nn::layers::{softmax_rows, Embedding, LayerNorm, Linear, SelfAttention};
use crate::nn::tensor::{matmul, matmul_nt};
use crate::nn::tensor::Tensor;
use crate::tokenizer::{TokenIds, TokenizerConfig};

/// Quantization target type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Signed8,
    Unsigned8,
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantMode::Signed8 => write!(f, "signed8"),
            QuantMode::Unsigned8 => write!(f, "unsigned8"),
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "signed8" => Ok(QuantMode::Signed8),
            "unsigned8" => Ok(QuantMode::Unsigned8),
            other => Err(format!("unknown quantization mode '{other}'")),
        }
    }
}

/// Per-tensor affine storage of one quantized weight matrix.
#[derive(Debug, Clone)]
pub enum QuantStorage {
    /// Fallback for degenerate (constant) tensors: scale would be zero, so
    /// the constant is stored directly and dequantizes exactly.
    Constant { value: f32 },
    Signed {
        q: Vec<i8>,
        scale: f32,
        zero_point: i32,
    },
    Unsigned {
        q: Vec<u8>,
        scale: f32,
        zero_point: i32,
    },
}

/// Quantize one weight tensor per-tensor:
/// `scale = (max - min) / 255`, zero point chosen so the representable range
/// covers `[min, max]` (signed8 maps onto [-128, 127], unsigned8 onto
/// [0, 255]). Every dequantized value is within `scale / 2` of the original.
pub fn quantize_tensor(data: &[f32], mode: QuantMode) -> QuantStorage {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in data {
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        return QuantStorage::Constant { value: min };
    }
    let scale = (max - min) / 255.0;
    match mode {
        QuantMode::Signed8 => {
            let zp = -128 - (min / scale).round() as i32;
            let q = data
                .iter()
                .map(|&v| ((v / scale).round() as i32 + zp).clamp(-128, 127) as i8)
                .collect();
            QuantStorage::Signed {
                q,
                scale,
                zero_point: zp,
            }
        }
        QuantMode::Unsigned8 => {
            let zp = -(min / scale).round() as i32;
            let q = data
                .iter()
                .map(|&v| ((v / scale).round() as i32 + zp).clamp(0, 255) as u8)
                .collect();
            QuantStorage::Unsigned {
                q,
                scale,
                zero_point: zp,
            }
        }
    }
}

impl QuantStorage {
    /// Dequantize back to reals (element `i` of the original tensor).
    pub fn dequantize(&self, len: usize) -> Vec<f32> {
        match self {
            QuantStorage::Constant { value } => vec![*value; len],
            QuantStorage::Signed {
                q,
                scale,
                zero_point,
            } => q
                .iter()
                .map(|&v| (v as i32 - zero_point) as f32 * scale)
                .collect(),
            QuantStorage::Unsigned {
                q,
                scale,
                zero_point,
            } => q
                .iter()
                .map(|&v| (v as i32 - zero_point) as f32 * scale)
                .collect(),
        }
    }
}

/// Padded kernel form of a quantized weight matrix: transposed to
/// `out_dim × k_padded` signed rows so the GEMM reads contiguous dots.
#[derive(Debug, Clone)]
struct PackedWeights {
    /// Signed weight rows, one per output column, padded with the zero point.
    wt: Vec<i8>,
    kp: usize,
    /// Per output column: sum of raw quantized values over the padded row.
    col_sums: Vec<i32>,
    zero_point: i32,
    scale: f32,
}

const K_PAD: usize = 64;

fn pack_storage(storage: &QuantStorage, in_dim: usize, out_dim: usize) -> Option<PackedWeights> {
    // unify both storages to signed rows; an unsigned value u with zero
    // point z equals signed (u - 128) with zero point (z - 128)
    let (vals, zp, scale): (Vec<i8>, i32, f32) = match storage {
        QuantStorage::Constant { .. } => return None,
        QuantStorage::Signed {
            q,
            scale,
            zero_point,
        } => (q.clone(), *zero_point, *scale),
        QuantStorage::Unsigned {
            q,
            scale,
            zero_point,
        } => (
            q.iter().map(|&v| (v as i32 - 128) as i8).collect(),
            zero_point - 128,
            *scale,
        ),
    };
    let kp = in_dim.div_ceil(K_PAD) * K_PAD;
    let pad = zp.clamp(-128, 127) as i8;
    let mut wt = vec![pad; out_dim * kp];
    for j in 0..out_dim {
        for k in 0..in_dim {
            wt[j * kp + k] = vals[k * out_dim + j];
        }
    }
    let col_sums = (0..out_dim)
        .map(|j| wt[j * kp..(j + 1) * kp].iter().map(|&v| v as i32).sum())
        .collect();
    Some(PackedWeights {
        wt,
        kp,
        col_sums,
        zero_point: zp,
        scale,
    })
}

/// A linear layer with 8-bit weights and a full-precision bias.
#[derive(Debug, Clone)]
pub struct QuantizedLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub storage: QuantStorage,
    pub bias: Vec<f32>,
    packed: Option<PackedWeights>,
}

impl QuantizedLinear {
    pub fn from_linear(lin: &Linear<f32>, mode: QuantMode) -> Self {
        let in_dim = lin.in_dim();
        let out_dim = lin.out_dim();
        let storage = quantize_tensor(lin.w.value.data(), mode);
        let packed = pack_storage(&storage, in_dim, out_dim);
        QuantizedLinear {
            in_dim,
            out_dim,
            storage,
            bias: lin.b.value.data().to_vec(),
            packed,
        }
    }

    fn from_parts(in_dim: usize, out_dim: usize, storage: QuantStorage, bias: Vec<f32>) -> Self {
        let packed = pack_storage(&storage, in_dim, out_dim);
        QuantizedLinear {
            in_dim,
            out_dim,
            storage,
            bias,
            packed,
        }
    }

    /// `x · dequant(W) + b` with dynamically quantized activations and an
    /// integer GEMM inside.
    pub fn forward(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let m = x.rows();
        debug_assert_eq!(x.cols(), self.in_dim);
        let mut out = Tensor::zeros(&[m, self.out_dim]);
        let Some(packed) = &self.packed else {
            // constant weight matrix: out[i][j] = c * sum(x_i) + b[j]
            let QuantStorage::Constant { value } = self.storage else {
                unreachable!()
            };
            for i in 0..m {
                let s: f32 = x.row(i).iter().sum();
                for (o, &b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                    *o = value * s + b;
                }
            }
            return out;
        };

        let kp = packed.kp;
        let mut xq = vec![0u8; m * kp];
        let mut row_scale = vec![0f32; m];
        let mut row_zp = vec![0i32; m];
        let mut row_sum = vec![0i32; m];
        for i in 0..m {
            let (s, z, sum) = quantize_activation_row(x.row(i), &mut xq[i * kp..(i + 1) * kp]);
            row_scale[i] = s;
            row_zp[i] = z;
            row_sum[i] = sum;
        }

        let mut raw = vec![0i32; m * self.out_dim];
        qgemm_u8i8(&xq, &packed.wt, &mut raw, m, kp, self.out_dim);

        let n = self.out_dim;
        for i in 0..m {
            let sxw = row_scale[i] * packed.scale;
            let zx = row_zp[i] as i64;
            let zw = packed.zero_point as i64;
            let sum_x = row_sum[i] as i64;
            let orow = out.row_mut(i);
            for j in 0..n {
                let acc = raw[i * n + j] as i64 - zw * sum_x - zx * packed.col_sums[j] as i64
                    + kp as i64 * zx * zw;
                orow[j] = sxw * acc as f32 + self.bias[j];
            }
        }
        out
    }
}

/// Quantize one activation row to u8 (range always includes zero), filling
/// the padded tail with the zero point. Returns (scale, zero_point, sum).
fn quantize_activation_row(x: &[f32], out: &mut [u8]) -> (f32, i32, i32) {
    let mut lo = 0f32;
    let mut hi = 0f32;
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        out.iter_mut().for_each(|o| *o = 0);
        return (1.0, 0, 0);
    }
    let scale = (hi - lo) / 255.0;
    let zp = (-(lo / scale).round() as i32).clamp(0, 255);
    let mut sum = 0i32;
    for (o, &v) in out.iter_mut().zip(x) {
        let q = ((v / scale).round() as i32 + zp).clamp(0, 255);
        *o = q as u8;
        sum += q;
    }
    for o in out.iter_mut().skip(x.len()) {
        *o = zp as u8;
        sum += zp;
    }
    (scale, zp, sum)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum GemmKernel {
    Vnni,
    Avx2,
    Portable,
}

fn detect_kernel() -> GemmKernel {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f")
            && is_x86_feature_detected!("avx512bw")
            && is_x86_feature_detected!("avx512vnni")
        {
            return GemmKernel::Vnni;
        }
        if is_x86_feature_detected!("avx2") {
            return GemmKernel::Avx2;
        }
    }
    GemmKernel::Portable
}

fn kernel() -> GemmKernel {
    use std::sync::OnceLock;
    static KERNEL: OnceLock<GemmKernel> = OnceLock::new();
    *KERNEL.get_or_init(detect_kernel)
}

/// Raw integer GEMM: `out[i][j] = Σ_k a[i][k] · bt[j][k]` with u8 × i8
/// inputs and i32 accumulation. `kp` must be a multiple of 64.
fn qgemm_u8i8(a: &[u8], bt: &[i8], out: &mut [i32], m: usize, kp: usize, n: usize) {
    debug_assert_eq!(kp % K_PAD, 0);
    match kernel() {
        #[cfg(target_arch = "x86_64")]
        GemmKernel::Vnni => unsafe { qgemm_vnni(a, bt, out, m, kp, n) },
        #[cfg(target_arch = "x86_64")]
        GemmKernel::Avx2 => unsafe { qgemm_avx2(a, bt, out, m, kp, n) },
        _ => qgemm_portable(a, bt, out, m, kp, n),
    }
}

/// Portable kernel. The i16 pair-sum phrasing lets LLVM use widening
/// multiply-add instructions where available.
fn qgemm_portable(a: &[u8], bt: &[i8], out: &mut [i32], m: usize, kp: usize, n: usize) {
    let mut arow16 = vec![0i16; kp];
    for i in 0..m {
        for (w, &v) in arow16.iter_mut().zip(&a[i * kp..(i + 1) * kp]) {
            *w = v as i16;
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bt[j * kp..(j + 1) * kp];
            let mut acc = 0i32;
            for (xp, wp) in arow16.chunks_exact(2).zip(brow.chunks_exact(2)) {
                acc += xp[0] as i32 * wp[0] as i32 + xp[1] as i32 * wp[1] as i32;
            }
            *o = acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn qgemm_avx2(a: &[u8], bt: &[i8], out: &mut [i32], m: usize, kp: usize, n: usize) {
    use core::arch::x86_64::*;
    unsafe fn reduce(acc: core::arch::x86_64::__m256i) -> i32 {
        use core::arch::x86_64::*;
        let lo = _mm256_castsi256_si128(acc);
        let hi = _mm256_extracti128_si256(acc, 1);
        let s = _mm_add_epi32(lo, hi);
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b01001110));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b10110001));
        _mm_cvtsi128_si32(s)
    }
    for i in 0..m {
        let ar = a.as_ptr().add(i * kp);
        let mut j = 0;
        while j + 4 <= n {
            let b0 = bt.as_ptr().add(j * kp);
            let b1 = bt.as_ptr().add((j + 1) * kp);
            let b2 = bt.as_ptr().add((j + 2) * kp);
            let b3 = bt.as_ptr().add((j + 3) * kp);
            let mut acc0 = _mm256_setzero_si256();
            let mut acc1 = _mm256_setzero_si256();
            let mut acc2 = _mm256_setzero_si256();
            let mut acc3 = _mm256_setzero_si256();
            let mut kk = 0;
            while kk < kp {
                let va = _mm256_cvtepu8_epi16(_mm_loadu_si128(ar.add(kk) as *const __m128i));
                let v0 = _mm256_cvtepi8_epi16(_mm_loadu_si128(b0.add(kk) as *const __m128i));
                let v1 = _mm256_cvtepi8_epi16(_mm_loadu_si128(b1.add(kk) as *const __m128i));
                let v2 = _mm256_cvtepi8_epi16(_mm_loadu_si128(b2.add(kk) as *const __m128i));
                let v3 = _mm256_cvtepi8_epi16(_mm_loadu_si128(b3.add(kk) as *const __m128i));
                acc0 = _mm256_add_epi32(acc0, _mm256_madd_epi16(va, v0));
                acc1 = _mm256_add_epi32(acc1, _mm256_madd_epi16(va, v1));
                acc2 = _mm256_add_epi32(acc2, _mm256_madd_epi16(va, v2));
                acc3 = _mm256_add_epi32(acc3, _mm256_madd_epi16(va, v3));
                kk += 16;
            }
            out[i * n + j] = reduce(acc0);
            out[i * n + j + 1] = reduce(acc1);
            out[i * n + j + 2] = reduce(acc2);
            out[i * n + j + 3] = reduce(acc3);
            j += 4;
        }
        while j < n {
            let brow = &bt[j * kp..(j + 1) * kp];
            let mut acc = 0i32;
            for (kk, &w) in brow.iter().enumerate() {
                acc += *a.get_unchecked(i * kp + kk) as i32 * w as i32;
            }
            out[i * n + j] = acc;
            j += 1;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
unsafe fn qgemm_vnni(a: &[u8], bt: &[i8], out: &mut [i32], m: usize, kp: usize, n: usize) {
    use core::arch::x86_64::*;
    for i in 0..m {
        let ar = a.as_ptr().add(i * kp);
        let mut j = 0;
        while j + 4 <= n {
            let b0 = bt.as_ptr().add(j * kp);
            let b1 = bt.as_ptr().add((j + 1) * kp);
            let b2 = bt.as_ptr().add((j + 2) * kp);
            let b3 = bt.as_ptr().add((j + 3) * kp);
            let mut acc0 = _mm512_setzero_si512();
            let mut acc1 = _mm512_setzero_si512();
            let mut acc2 = _mm512_setzero_si512();
            let mut acc3 = _mm512_setzero_si512();
            let mut kk = 0;
            while kk < kp {
                let va = _mm512_loadu_si512(ar.add(kk) as *const _);
                acc0 = _mm512_dpbusd_epi32(acc0, va, _mm512_loadu_si512(b0.add(kk) as *const _));
                acc1 = _mm512_dpbusd_epi32(acc1, va, _mm512_loadu_si512(b1.add(kk) as *const _));
                acc2 = _mm512_dpbusd_epi32(acc2, va, _mm512_loadu_si512(b2.add(kk) as *const _));
                acc3 = _mm512_dpbusd_epi32(acc3, va, _mm512_loadu_si512(b3.add(kk) as *const _));
                kk += 64;
            }
            out[i * n + j] = _mm512_reduce_add_epi32(acc0);
            out[i * n + j + 1] = _mm512_reduce_add_epi32(acc1);
            out[i * n + j + 2] = _mm512_reduce_add_epi32(acc2);
            out[i * n + j + 3] = _mm512_reduce_add_epi32(acc3);
            j += 4;
        }
        while j < n {
            let brow = &bt[j * kp..(j + 1) * kp];
            let mut acc = 0i32;
            for (kk, &w) in brow.iter().enumerate() {
                acc += *a.get_unchecked(i * kp + kk) as i32 * w as i32;
            }
            out[i * n + j] = acc;
            j += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Quantized model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct QAttention {
    wq: QuantizedLinear,
    wk: QuantizedLinear,
    wv: QuantizedLinear,
    wo: QuantizedLinear,
    n_heads: usize,
}

impl QAttention {
    fn from_float(attn: &SelfAttention<f32>, n_heads: usize, mode: QuantMode) -> Self {
        QAttention {
            wq: QuantizedLinear::from_linear(&attn.wq, mode),
            wk: QuantizedLinear::from_linear(&attn.wk, mode),
            wv: QuantizedLinear::from_linear(&attn.wv, mode),
            wo: QuantizedLinear::from_linear(&attn.wo, mode),
            n_heads,
        }
    }

    fn forward(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let t = x.rows();
        let d = x.cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut ctx = Tensor::zeros(&[t, d]);
        let gather = |src: &Tensor<f32>, h: usize| -> Tensor<f32> {
            let mut out = Tensor::zeros(&[t, dh]);
            for r in 0..t {
                out.row_mut(r).copy_from_slice(&src.row(r)[h * dh..(h + 1) * dh]);
            }
            out
        };
        for h in 0..self.n_heads {
            let qh = gather(&q, h);
            let kh = gather(&k, h);
            let vh = gather(&v, h);
            let mut scores = Tensor::zeros(&[t, t]);
            matmul_nt(qh.data(), kh.data(), scores.data_mut(), t, dh, t);
            for s in scores.data_mut() {
                *s *= scale;
            }
            softmax_rows(&mut scores);
            let mut ch = Tensor::zeros(&[t, dh]);
            matmul(scores.data(), vh.data(), ch.data_mut(), t, t, dh);
            for r in 0..t {
                ctx.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(ch.row(r));
            }
        }
        self.wo.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
struct QEncoderLayer {
    ln1: LayerNorm<f32>,
    attn: QAttention,
    ln2: LayerNorm<f32>,
    ffn1: QuantizedLinear,
    ffn2: QuantizedLinear,
}

impl QEncoderLayer {
    fn from_float(
        layer: &crate::nn::layers::EncoderLayer<f32>,
        n_heads: usize,
        mode: QuantMode,
    ) -> Self {
        QEncoderLayer {
            ln1: layer.ln1.clone(),
            attn: QAttention::from_float(&layer.attn, n_heads, mode),
            ln2: layer.ln2.clone(),
            ffn1: QuantizedLinear::from_linear(&layer.ffn.lin1, mode),
            ffn2: QuantizedLinear::from_linear(&layer.ffn.lin2, mode),
        }
    }

    fn forward(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let (n1, _) = self.ln1.forward(x);
        let a = self.attn.forward(&n1);
        let mut y1 = x.clone();
        for (y, &v) in y1.data_mut().iter_mut().zip(a.data()) {
            *y += v;
        }
        let (n2, _) = self.ln2.forward(&y1);
        let mut act = self.ffn1.forward(&n2);
        for v in act.data_mut() {
            *v = crate::nn::gelu(*v);
        }
        let f = self.ffn2.forward(&act);
        let mut y = y1;
        for (o, &v) in y.data_mut().iter_mut().zip(f.data()) {
            *o += v;
        }
        y
    }
}

/// Inference-only model with 8-bit weight matrices.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub mode: QuantMode,
    node_token_emb: Embedding<f32>,
    node_pos_emb: Tensor<f32>,
    node_layer: QEncoderLayer,
    node_final_ln: LayerNorm<f32>,
    seq_proj: QuantizedLinear,
    seq_pos_emb: Tensor<f32>,
    seq_layers: Vec<QEncoderLayer>,
    seq_final_ln: LayerNorm<f32>,
    head_lin1: QuantizedLinear,
    head_lin2: QuantizedLinear,
}

/// Post-training quantization of a trained model.
pub fn quantize_model(model: &ScraperModel<f32>, mode: QuantMode) -> QuantizedModel {
    QuantizedModel {
        config: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
        mode,
        node_token_emb: model.node_encoder.token_emb.clone(),
        node_pos_emb: model.node_encoder.pos_emb.value.clone(),
        node_layer: QEncoderLayer::from_float(
            &model.node_encoder.layer,
            model.config.node_heads,
            mode,
        ),
        node_final_ln: model.node_encoder.final_ln.clone(),
        seq_proj: QuantizedLinear::from_linear(&model.seq.proj, mode),
        seq_pos_emb: model.seq.pos_emb.value.clone(),
        seq_layers: model
            .seq
            .layers
            .iter()
            .map(|l| QEncoderLayer::from_float(l, model.config.n_heads, mode))
            .collect(),
        seq_final_ln: model.seq.final_ln.clone(),
        head_lin1: QuantizedLinear::from_linear(&model.head.lin1, mode),
        head_lin2: QuantizedLinear::from_linear(&model.head.lin2, mode),
    }
}

impl QuantizedModel {
    fn encode_node(&self, toks: &TokenIds) -> Vec<f32> {
        let mut x = self.node_token_emb.forward(&toks.ids);
        for r in 0..toks.ids.len() {
            let pos = self.node_pos_emb.row(r);
            for (v, &p) in x.row_mut(r).iter_mut().zip(pos) {
                *v += p;
            }
        }
        let y = self.node_layer.forward(&x);
        let (normed, _) = self.node_final_ln.forward(&y);
        normed.row(0).to_vec()
    }

    pub fn predict_chunk(&self, nodes: &[TokenIds]) -> Result<Vec<Probabilities<f32>>> {
        if nodes.is_empty() {
            return Err(Error::LengthMismatch("chunk has no nodes".into()));
        }
        if nodes.len() > self.config.l_max {
            return Err(Error::SequenceTooLong {
                len: nodes.len(),
                max: self.config.l_max,
            });
        }
        let mut h = Tensor::zeros(&[nodes.len(), self.config.d_node]);
        for (i, toks) in nodes.iter().enumerate() {
            let cls = self.encode_node(toks);
            h.row_mut(i).copy_from_slice(&cls);
        }
        let mut x = self.seq_proj.forward(&h);
        for r in 0..nodes.len() {
            let pos = self.seq_pos_emb.row(r);
            for (v, &p) in x.row_mut(r).iter_mut().zip(pos) {
                *v += p;
            }
        }
        for layer in &self.seq_layers {
            x = layer.forward(&x);
        }
        let (e, _) = self.seq_final_ln.forward(&x);
        let mut act = self.head_lin1.forward(&e);
        for v in act.data_mut() {
            *v = crate::nn::gelu(*v);
        }
        let logits = self.head_lin2.forward(&act);
        Ok((0..nodes.len())
            .map(|i| {
                let mut p = [0f32; NUM_LABELS];
                for (out, &z) in p.iter_mut().zip(logits.row(i)) {
                    *out = clamped_sigmoid(z);
                }
                Probabilities { p }
            })
            .collect())
    }
}

impl NodePredictor for QuantizedModel {
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

// ---------------------------------------------------------------------------
// Quantized model file format ("NSQ8")
// ---------------------------------------------------------------------------

pub const QMAGIC: &[u8; 4] = b"NSQ8";
pub const QFORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QHeader {
    format_version: u32,
    model: ModelConfig,
    tokenizer: TokenizerConfig,
    mode: QuantMode,
    #[serde(default)]
    metrics: MetricsSnapshot,
}

enum QEntry {
    Float(Vec<f32>),
    Quant(QuantStorage),
}

fn write_entry(w: &mut impl Write, name: &str, dims: &[usize], entry: &QEntry) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match entry {
        QEntry::Float(data) => {
            w.write_all(&[0u8])?;
            w.write_all(&((data.len() * 4) as u64).to_le_bytes())?;
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        QEntry::Quant(QuantStorage::Constant { value }) => {
            w.write_all(&[1u8])?;
            w.write_all(&value.to_le_bytes())?;
        }
        QEntry::Quant(QuantStorage::Signed {
            q,
            scale,
            zero_point,
        }) => {
            w.write_all(&[2u8])?;
            w.write_all(&scale.to_le_bytes())?;
            w.write_all(&zero_point.to_le_bytes())?;
            w.write_all(&(q.len() as u64).to_le_bytes())?;
            w.write_all(unsafe { std::slice::from_raw_parts(q.as_ptr() as *const u8, q.len()) })?;
        }
        QEntry::Quant(QuantStorage::Unsigned {
            q,
            scale,
            zero_point,
        }) => {
            w.write_all(&[3u8])?;
            w.write_all(&scale.to_le_bytes())?;
            w.write_all(&zero_point.to_le_bytes())?;
            w.write_all(&(q.len() as u64).to_le_bytes())?;
            w.write_all(q)?;
        }
    }
    Ok(())
}

fn read_entry(r: &mut impl Read) -> Result<(String, Vec<usize>, QEntry)> {
    let fail = |what: &str| Error::CorruptCheckpoint(format!("truncated while reading {what}"));
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| fail("entry name length"))?;
    let name_len = u32::from_le_bytes(b4) as usize;
    if name_len > 4096 {
        return Err(Error::CorruptCheckpoint("implausible name length".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|_| fail("entry name"))?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::CorruptCheckpoint("entry name is not UTF-8".into()))?;
    r.read_exact(&mut b4).map_err(|_| fail("rank"))?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::CorruptCheckpoint("implausible rank".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(|_| fail("dims"))?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(|_| fail("entry kind"))?;
    let entry = match kind[0] {
        0 => {
            r.read_exact(&mut b8).map_err(|_| fail("payload length"))?;
            let bytes = u64::from_le_bytes(b8) as usize;
            let mut raw = vec![0u8; bytes];
            r.read_exact(&mut raw).map_err(|_| fail("f32 payload"))?;
            QEntry::Float(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        1 => {
            r.read_exact(&mut b4).map_err(|_| fail("constant"))?;
            QEntry::Quant(QuantStorage::Constant {
                value: f32::from_le_bytes(b4),
            })
        }
        2 | 3 => {
            r.read_exact(&mut b4).map_err(|_| fail("scale"))?;
            let scale = f32::from_le_bytes(b4);
            r.read_exact(&mut b4).map_err(|_| fail("zero point"))?;
            let zero_point = i32::from_le_bytes(b4);
            r.read_exact(&mut b8).map_err(|_| fail("q payload length"))?;
            let len = u64::from_le_bytes(b8) as usize;
            let mut raw = vec![0u8; len];
            r.read_exact(&mut raw).map_err(|_| fail("q payload"))?;
            if kind[0] == 2 {
                QEntry::Quant(QuantStorage::Signed {
                    q: raw.into_iter().map(|v| v as i8).collect(),
                    scale,
                    zero_point,
                })
            } else {
                QEntry::Quant(QuantStorage::Unsigned {
                    q: raw,
                    scale,
                    zero_point,
                })
            }
        }
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "unknown entry kind {other}"
            )))
        }
    };
    Ok((name, dims, entry))
}

/// Persist a quantized model.
pub fn save_quantized(model: &QuantizedModel, path: &Path) -> Result<()> {
    let header = QHeader {
        format_version: QFORMAT_VERSION,
        model: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
        mode: model.mode,
        metrics: MetricsSnapshot::default(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(QMAGIC)?;
    w.write_all(&QFORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;

    type Entries = Vec<(String, Vec<usize>, QEntry)>;
    fn push_float(entries: &mut Entries, name: &str, t: &Tensor<f32>) {
        entries.push((name.to_string(), t.dims().to_vec(), QEntry::Float(t.data().to_vec())));
    }
    fn push_ln(entries: &mut Entries, name: &str, ln: &LayerNorm<f32>) {
        push_float(entries, &format!("{name}.gamma"), &ln.gamma.value);
        push_float(entries, &format!("{name}.beta"), &ln.beta.value);
    }
    fn push_qlin(entries: &mut Entries, name: &str, lin: &QuantizedLinear) {
        entries.push((
            format!("{name}.weight"),
            vec![lin.in_dim, lin.out_dim],
            QEntry::Quant(lin.storage.clone()),
        ));
        entries.push((
            format!("{name}.bias"),
            vec![lin.out_dim],
            QEntry::Float(lin.bias.clone()),
        ));
    }
    fn push_layer(entries: &mut Entries, name: &str, layer: &QEncoderLayer) {
        push_ln(entries, &format!("{name}.ln1"), &layer.ln1);
        push_qlin(entries, &format!("{name}.attn.wq"), &layer.attn.wq);
        push_qlin(entries, &format!("{name}.attn.wk"), &layer.attn.wk);
        push_qlin(entries, &format!("{name}.attn.wv"), &layer.attn.wv);
        push_qlin(entries, &format!("{name}.attn.wo"), &layer.attn.wo);
        push_ln(entries, &format!("{name}.ln2"), &layer.ln2);
        push_qlin(entries, &format!("{name}.ffn.lin1"), &layer.ffn1);
        push_qlin(entries, &format!("{name}.ffn.lin2"), &layer.ffn2);
    }

    let mut entries: Entries = Vec::new();
    push_float(&mut entries, "node.token_emb", &model.node_token_emb.table.value);
    push_float(&mut entries, "node.pos_emb", &model.node_pos_emb);
    push_float(&mut entries, "seq.pos_emb", &model.seq_pos_emb);
    push_layer(&mut entries, "node.layer", &model.node_layer);
    push_ln(&mut entries, "node.final_ln", &model.node_final_ln);
    push_qlin(&mut entries, "seq.proj", &model.seq_proj);
    for (i, layer) in model.seq_layers.iter().enumerate() {
        push_layer(&mut entries, &format!("seq.layer{i}"), layer);
    }
    push_ln(&mut entries, "seq.final_ln", &model.seq_final_ln);
    push_qlin(&mut entries, "head.lin1", &model.head_lin1);
    push_qlin(&mut entries, "head.lin2", &model.head_lin2);

    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, dims, entry) in &entries {
        write_entry(&mut w, name, dims, entry)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a quantized model.
pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    let mut r = BufReader::new(File::open(path)?);
    let fail = |what: &str| Error::CorruptCheckpoint(format!("truncated while reading {what}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fail("magic"))?;
    if &magic != QMAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "bad magic bytes {magic:02x?}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| fail("version"))?;
    let version = u32::from_le_bytes(b4);
    if version != QFORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: QFORMAT_VERSION,
        });
    }
    r.read_exact(&mut b4).map_err(|_| fail("header length"))?;
    let header_len = u32::from_le_bytes(b4) as usize;
    if header_len > 16 * 1024 * 1024 {
        return Err(Error::CorruptCheckpoint("implausible header length".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| fail("header"))?;
    let header: QHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CorruptCheckpoint(format!("header json: {e}")))?;

    r.read_exact(&mut b4).map_err(|_| fail("entry count"))?;
    let n_entries = u32::from_le_bytes(b4) as usize;
    let mut entries = std::collections::HashMap::new();
    for _ in 0..n_entries {
        let (name, dims, entry) = read_entry(&mut r)?;
        entries.insert(name, (dims, entry));
    }

    type EntryMap = std::collections::HashMap<String, (Vec<usize>, QEntry)>;
    fn take_float(entries: &mut EntryMap, name: &str) -> Result<Tensor<f32>> {
        match entries.remove(name) {
            Some((dims, QEntry::Float(data))) => Ok(Tensor::from_vec(&dims, data)),
            Some(_) => Err(Error::CorruptCheckpoint(format!(
                "{name}: expected f32 tensor"
            ))),
            None => Err(Error::CorruptCheckpoint(format!("{name}: absent"))),
        }
    }
    fn load_ln(entries: &mut EntryMap, name: &str, dim: usize) -> Result<LayerNorm<f32>> {
        let gamma = take_float(entries, &format!("{name}.gamma"))?;
        let beta = take_float(entries, &format!("{name}.beta"))?;
        if gamma.len() != dim || beta.len() != dim {
            return Err(Error::ShapeMismatch(format!("{name}: wrong layernorm width")));
        }
        let mut ln = LayerNorm::new(dim);
        ln.gamma.value = gamma;
        ln.beta.value = beta;
        Ok(ln)
    }
    let cfg = header.model.clone();

    // closures can't both borrow `entries`; use a small macro-free helper
    fn take_qlin(
        entries: &mut EntryMap,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<QuantizedLinear> {
        let storage = match entries.remove(&format!("{name}.weight")) {
            Some((dims, QEntry::Quant(s))) => {
                if dims != vec![in_dim, out_dim] {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}.weight: dims {dims:?}, expected [{in_dim}, {out_dim}]"
                    )));
                }
                let expect = in_dim * out_dim;
                let ok = match &s {
                    QuantStorage::Constant { .. } => true,
                    QuantStorage::Signed { q, .. } => q.len() == expect,
                    QuantStorage::Unsigned { q, .. } => q.len() == expect,
                };
                if !ok {
                    return Err(Error::CorruptCheckpoint(format!(
                        "{name}.weight: payload does not match dims"
                    )));
                }
                s
            }
            Some(_) => {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name}.weight: expected quantized tensor"
                )))
            }
            None => return Err(Error::CorruptCheckpoint(format!("{name}.weight: absent"))),
        };
        let bias = match entries.remove(&format!("{name}.bias")) {
            Some((_, QEntry::Float(b))) if b.len() == out_dim => b,
            _ => {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name}.bias: absent or wrong width"
                )))
            }
        };
        Ok(QuantizedLinear::from_parts(in_dim, out_dim, storage, bias))
    }

    fn take_layer(
        entries: &mut EntryMap,
        name: &str,
        d: usize,
        n_heads: usize,
        d_ff: usize,
    ) -> Result<QEncoderLayer> {
        let ln1 = load_ln(entries, &format!("{name}.ln1"), d)?;
        let ln2 = load_ln(entries, &format!("{name}.ln2"), d)?;
        Ok(QEncoderLayer {
            ln1,
            attn: QAttention {
                wq: take_qlin(entries, &format!("{name}.attn.wq"), d, d)?,
                wk: take_qlin(entries, &format!("{name}.attn.wk"), d, d)?,
                wv: take_qlin(entries, &format!("{name}.attn.wv"), d, d)?,
                wo: take_qlin(entries, &format!("{name}.attn.wo"), d, d)?,
                n_heads,
            },
            ln2,
            ffn1: take_qlin(entries, &format!("{name}.ffn.lin1"), d, d_ff)?,
            ffn2: take_qlin(entries, &format!("{name}.ffn.lin2"), d_ff, d)?,
        })
    }

    let node_token_emb = Embedding {
        table: crate::nn::tensor::Param::new(take_float(&mut entries, "node.token_emb")?),
    };
    let node_pos_emb = take_float(&mut entries, "node.pos_emb")?;
    let seq_pos_emb = take_float(&mut entries, "seq.pos_emb")?;
    let node_final_ln = load_ln(&mut entries, "node.final_ln", cfg.d_node)?;
    let seq_final_ln = load_ln(&mut entries, "seq.final_ln", cfg.d_model)?;
    let node_layer = take_layer(
        &mut entries,
        "node.layer",
        cfg.d_node,
        cfg.node_heads,
        cfg.node_ff,
    )?;
    let seq_proj = take_qlin(&mut entries, "seq.proj", cfg.d_node, cfg.d_model)?;
    let mut seq_layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        seq_layers.push(take_layer(
            &mut entries,
            &format!("seq.layer{i}"),
            cfg.d_model,
            cfg.n_heads,
            cfg.seq_ff,
        )?);
    }
    let head_lin1 = take_qlin(&mut entries, "head.lin1", cfg.d_model, cfg.d_model)?;
    let head_lin2 = take_qlin(&mut entries, "head.lin2", cfg.d_model, NUM_LABELS)?;
    if !entries.is_empty() {
        let extra: Vec<String> = entries.keys().cloned().collect();
        return Err(Error::CorruptCheckpoint(format!(
            "unknown entries: {}",
            extra.join(", ")
        )));
    }

    Ok(QuantizedModel {
        config: header.model,
        tokenizer: header.tokenizer,
        mode: header.mode,
        node_token_emb,
        node_pos_emb,
        node_layer,
        node_final_ln,
        seq_proj,
        seq_pos_emb,
        seq_layers,
        seq_final_ln,
        head_lin1,
        head_lin2,
    })
}
