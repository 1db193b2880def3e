//! Dense row-major tensors and the matmul kernels used by all layers.

use crate::scalar::Scalar;

/// Dense row-major tensor. Rank is 1 or 2 everywhere in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<F>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims/data mismatch");
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (1 for rank-1).
    pub fn rows(&self) -> usize {
        if self.dims.len() == 2 {
            self.dims[0]
        } else {
            1
        }
    }

    /// Columns of a rank-2 tensor (length for rank-1).
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }
}

/// A weight tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.dims());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Reinterpret a generic scalar slice as `f32` when `F` is exactly `f32`.
fn as_f32_slices<'a, F: Scalar>(
    a: &'a [F],
    b: &'a [F],
    out: &'a mut [F],
) -> Option<(&'a [f32], &'a [f32], &'a mut [f32])> {
    if std::any::TypeId::of::<F>() != std::any::TypeId::of::<f32>() {
        return None;
    }
    // same type, same layout
    unsafe {
        Some((
            std::slice::from_raw_parts(a.as_ptr() as *const f32, a.len()),
            std::slice::from_raw_parts(b.as_ptr() as *const f32, b.len()),
            std::slice::from_raw_parts_mut(out.as_mut_ptr() as *mut f32, out.len()),
        ))
    }
}

#[cfg(target_arch = "x86_64")]
fn have_avx2_fma() -> bool {
    use std::sync::OnceLock;
    static HAVE: OnceLock<bool> = OnceLock::new();
    *HAVE.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

#[cfg(not(target_arch = "x86_64"))]
fn have_avx2_fma() -> bool {
    false
}

macro_rules! f32_fast_path {
    ($fn_name:ident, $a:ident, $b:ident, $out:ident, $m:ident, $k:ident, $n:ident) => {
        #[cfg(target_arch = "x86_64")]
        if have_avx2_fma() {
            if let Some((af, bf, of)) = as_f32_slices($a, $b, $out) {
                unsafe { $fn_name(af, bf, of, $m, $k, $n) };
                return;
            }
        }
    };
}

/// `out = a · b` for row-major `a: m×k`, `b: k×n`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    f32_fast_path!(matmul_f32_avx2, a, b, out, m, k, n);
    out.iter_mut().for_each(|v| *v = F::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// The same loop bodies recompiled with AVX2+FMA enabled; LLVM vectorizes
/// them 8-wide with fused multiply-adds. Dispatched once per process, so
/// results are identical across runs on the same machine.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_f32_avx2(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

/// `out = a · bᵀ` for `a: m×k`, `b: n×k` (both row-major, contiguous dots).
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    f32_fast_path!(matmul_nt_f32_avx2, a, b, out, m, k, n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_nt_f32_avx2(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut lanes = [0.0f32; 8];
            let mut cx = arow.chunks_exact(8);
            let mut cy = brow.chunks_exact(8);
            for (xc, yc) in (&mut cx).zip(&mut cy) {
                for l in 0..8 {
                    lanes[l] = xc[l].mul_add(yc[l], lanes[l]);
                }
            }
            let mut acc = lanes.iter().sum::<f32>();
            for (&x, &y) in cx.remainder().iter().zip(cy.remainder()) {
                acc = x.mul_add(y, acc);
            }
            *o = acc;
        }
    }
}

/// `out = aᵀ · b` for `a: m×k`, `b: m×n`; `out: k×n`.
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    f32_fast_path!(matmul_tn_f32_avx2, a, b, out, m, k, n);
    out.iter_mut().for_each(|v| *v = F::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_tn_f32_avx2(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

/// `da += dc · bᵀ` where `dc: m×n`, `b: k×n`, `da: m×k`.
pub fn matmul_grad_a<F: Scalar>(dc: &[F], b: &[F], da: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(da.len(), m * k);
    f32_fast_path!(matmul_grad_a_f32_avx2, dc, b, da, m, k, n);
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (kk, d) in darow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in dcrow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *d = *d + acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_grad_a_f32_avx2(
    dc: &[f32],
    b: &[f32],
    da: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (kk, d) in darow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            // eight independent lanes: breaks the FMA dependence chain and
            // lets the dot product vectorize
            let mut lanes = [0.0f32; 8];
            let mut chunks_x = dcrow.chunks_exact(8);
            let mut chunks_y = brow.chunks_exact(8);
            for (xc, yc) in (&mut chunks_x).zip(&mut chunks_y) {
                for l in 0..8 {
                    lanes[l] = xc[l].mul_add(yc[l], lanes[l]);
                }
            }
            let mut acc = lanes.iter().sum::<f32>();
            for (&x, &y) in chunks_x.remainder().iter().zip(chunks_y.remainder()) {
                acc = x.mul_add(y, acc);
            }
            *d += acc;
        }
    }
}

/// `db += aᵀ · dc` where `a: m×k`, `dc: m×n`, `db: k×n`.
pub fn matmul_grad_b<F: Scalar>(a: &[F], dc: &[F], db: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    f32_fast_path!(matmul_grad_b_f32_avx2, a, dc, db, m, k, n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for (d, &x) in dbrow.iter_mut().zip(dcrow) {
                *d = *d + av * x;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_grad_b_f32_avx2(
    a: &[f32],
    dc: &[f32],
    db: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for (d, &x) in dbrow.iter_mut().zip(dcrow) {
                *d = av.mul_add(x, *d);
            }
        }
    }
}
