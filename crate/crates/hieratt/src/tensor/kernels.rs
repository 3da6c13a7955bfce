//! Raw f64 kernels shared by the tape's forward and backward passes.
//!
//! All matrices are dense row-major. Loop orders are chosen so the inner
//! loop runs over contiguous memory and auto-vectorizes; they are fixed,
//! which keeps results bit-reproducible for a given platform.

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    matmul_nn_into(&mut c, a, b, m, k, n);
    c
}

pub fn matmul_nn_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,n] = A[m,k] @ B[n,k]^T — rows of A dotted with rows of B.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// C[m,n] = A[p,m]^T @ B[p,n]
pub fn matmul_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    let mut c = vec![0.0; m * n];
    for q in 0..p {
        let arow = &a[q * m..(q + 1) * m];
        let brow = &b[q * n..(q + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Dot product with four independent accumulators so LLVM can vectorize
/// without reassociating a single serial sum.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose_2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// ── Broadcasting ─────────────────────────────────────────────────────

/// NumPy-style broadcast of two shapes; `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn pad_shape(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut p = vec![1usize; nd];
    p[nd - shape.len()..].copy_from_slice(shape);
    p
}

/// Elementwise binary op with broadcasting. Fast paths for the common
/// cases (equal shapes, rhs a suffix, rhs scalar); coordinate walk otherwise.
pub fn broadcast_apply(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    if a_shape == b_shape {
        for i in 0..numel {
            out[i] = f(a[i], b[i]);
        }
        return out;
    }
    if b.len() == 1 && a_shape == out_shape {
        let bv = b[0];
        for i in 0..numel {
            out[i] = f(a[i], bv);
        }
        return out;
    }
    if a_shape == out_shape && is_suffix(b_shape, a_shape) {
        let bl = b.len();
        for (chunk, orow) in a.chunks_exact(bl).zip(out.chunks_exact_mut(bl)) {
            for j in 0..bl {
                orow[j] = f(chunk[j], b[j]);
            }
        }
        return out;
    }
    // General path: walk output coordinates, fold into source indices.
    let nd = out_shape.len();
    let ap = pad_shape(a_shape, nd);
    let bp = pad_shape(b_shape, nd);
    let mut coords = vec![0usize; nd];
    for (i, o) in out.iter_mut().enumerate() {
        let mut rem = i;
        for d in (0..nd).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let (mut af, mut asr) = (0usize, 1usize);
        let (mut bf, mut bsr) = (0usize, 1usize);
        for d in (0..nd).rev() {
            af += if ap[d] == 1 { 0 } else { coords[d] } * asr;
            asr *= ap[d];
            bf += if bp[d] == 1 { 0 } else { coords[d] } * bsr;
            bsr *= bp[d];
        }
        *o = f(a[af], b[bf]);
    }
    out
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

/// Sum a gradient of `grad_shape` down to `target_shape` (undoing broadcast).
pub fn reduce_grad_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    if target_numel == 1 {
        return vec![grad.iter().sum()];
    }
    if is_suffix(target_shape, grad_shape) {
        let mut out = vec![0.0; target_numel];
        for chunk in grad.chunks_exact(target_numel) {
            for j in 0..target_numel {
                out[j] += chunk[j];
            }
        }
        return out;
    }
    let nd = grad_shape.len();
    let tp = pad_shape(target_shape, nd);
    let mut out = vec![0.0; target_numel];
    let mut coords = vec![0usize; nd];
    for (i, &g) in grad.iter().enumerate() {
        let mut rem = i;
        for d in (0..nd).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let (mut tf, mut ts) = (0usize, 1usize);
        for d in (0..nd).rev() {
            tf += if tp[d] == 1 { 0 } else { coords[d] } * ts;
            ts *= tp[d];
        }
        out[tf] += g;
    }
    out
}

pub fn accumulate(target: &mut [f64], src: &[f64]) {
    debug_assert_eq!(target.len(), src.len());
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}
