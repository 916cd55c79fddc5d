//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thsgr::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop convolution for 1, 2 or 3 spatial axes with zero padding.
pub fn conv_reference(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: &[usize],
    groups: usize,
) -> Tensor {
    let sr = x.rank() - 2;
    let lift = |v: &[usize], fill: usize| -> [usize; 3] {
        let mut o = [fill; 3];
        o[3 - sr..].copy_from_slice(v);
        o
    };
    let (bn, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let ins = lift(&x.shape()[2..], 1);
    let ks = lift(&w.shape()[2..], 1);
    let ps = lift(pad, 0);
    let outs: Vec<usize> = (0..3)
        .map(|a| (ins[a] + 2 * ps[a] - ks[a]) / stride + 1)
        .collect();
    let mut out_shape = vec![bn, cout];
    out_shape.extend_from_slice(&outs[3 - sr..]);
    let xs = x.data();
    let ws = w.data();
    let mut out = Vec::new();
    for n in 0..bn {
        for co in 0..cout {
            let grp = co / cout_g;
            for od in 0..outs[0] {
                for oh in 0..outs[1] {
                    for ow in 0..outs[2] {
                        let mut acc = b.data()[co];
                        for cil in 0..cin_g {
                            let ci = grp * cin_g + cil;
                            for kd in 0..ks[0] {
                                for kh in 0..ks[1] {
                                    for kw in 0..ks[2] {
                                        let id = (od * stride + kd) as isize - ps[0] as isize;
                                        let ih = (oh * stride + kh) as isize - ps[1] as isize;
                                        let iw = (ow * stride + kw) as isize - ps[2] as isize;
                                        if id < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                        if id >= ins[0] || ih >= ins[1] || iw >= ins[2] {
                                            continue;
                                        }
                                        let xv = xs[(((n * cin + ci) * ins[0] + id) * ins[1] + ih)
                                            * ins[2]
                                            + iw];
                                        let wv = ws[(((co * cin_g + cil) * ks[0] + kd) * ks[1]
                                            + kh)
                                            * ks[2]
                                            + kw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape, out).unwrap()
}

/// `1 / (1 + e^-x)` written independently of the library.
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax of a dense row-major matrix.
pub fn softmax_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

/// Dense `a[m,k] * b[k,n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Synthetic scene -> normalized PCA cube -> train/test samples, the same chain the CLI uses.
pub fn scene_samples(
    spec: &thsgr::synth::SynthSpec,
    pcs: usize,
    k: usize,
    per_class: usize,
    split_seed: u64,
) -> (
    Vec<thsgr::preprocess::ModalSample>,
    Vec<thsgr::preprocess::ModalSample>,
) {
    use thsgr::preprocess::*;
    let scene = thsgr::synth::generate(spec).unwrap();
    let hsi = normalize(&pca_reduce(&normalize(&scene.hsi), pcs).unwrap());
    let aux = normalize(&scene.aux);
    let split = make_split(
        &scene.labels,
        &SplitSpec {
            mode: SplitMode::Random { per_class },
            seed: split_seed,
        },
    )
    .unwrap();
    (
        extract_samples(&hsi, &aux, &split.train, k).unwrap(),
        extract_samples(&hsi, &aux, &split.test, k).unwrap(),
    )
}
