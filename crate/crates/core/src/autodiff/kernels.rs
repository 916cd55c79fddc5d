use crate::tensor::Tensor;

use super::split_axis;

/// `c[m x n] += a[m x k] * b[k x n]`
pub(super) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x p] += a[m x n] * b[p x n]^T`
pub(super) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            c[i * p + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
pub(super) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in c[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(super) fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src_strides = t.strides();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel = t.numel();
    let mut data = Vec::with_capacity(numel);
    let mut counter = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        data.push(t.data()[off]);
        for ax in (0..shape.len()).rev() {
            counter[ax] += 1;
            off += strides[ax];
            if counter[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Tensor::from_parts(shape, data)
}

/// Numerically stable softmax along `axis` (per-slice max subtracted first).
pub(super) fn softmax(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len)
                .map(|l| x[idx(l)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[idx(l)] - max).exp();
                out[idx(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[idx(l)] /= total;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
