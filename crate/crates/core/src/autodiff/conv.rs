//! Direct grouped convolution over up to three spatial axes.
//!
//! 1-D and 2-D convolutions are lifted to 3-D by inserting unit axes, so a
//! single kernel (and a single backward) serves all three ranks.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Resolved geometry of one convolution call, always expressed in 3-D.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// Number of spatial axes of the original call (1, 2 or 3).
    pub spatial_rank: usize,
}

impl ConvGeom {
    /// Validates shapes for `x: [B, Cin, *spatial]`, `w: [Cout, Cin/groups, *kernel]`.
    pub fn resolve(
        x: &[usize],
        w: &[usize],
        stride: &[usize],
        pad: &[usize],
        groups: usize,
    ) -> Result<Self> {
        let rank = x.len();
        if !(3..=5).contains(&rank) || w.len() != rank {
            return Err(Error::shape("conv", x, w));
        }
        let sr = rank - 2;
        if stride.len() != sr || pad.len() != sr {
            return Err(Error::Param(format!(
                "conv with {sr} spatial axes needs {sr} strides and paddings, got {stride:?} / {pad:?}"
            )));
        }
        if groups == 0
            || !x[1].is_multiple_of(groups)
            || !w[0].is_multiple_of(groups)
            || w[1] * groups != x[1]
        {
            return Err(Error::shape("conv", x, w));
        }
        if stride.contains(&0) {
            return Err(Error::Param("conv stride must be positive".into()));
        }
        let lift = |v: &[usize], fill: usize| {
            let mut out = [fill; 3];
            out[3 - sr..].copy_from_slice(v);
            out
        };
        let input = lift(&x[2..], 1);
        let kernel = lift(&w[2..], 1);
        let stride3 = lift(stride, 1);
        let pad3 = lift(pad, 0);
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad3[a];
            if kernel[a] > padded {
                return Err(Error::shape("conv", x, w));
            }
            output[a] = (padded - kernel[a]) / stride3[a] + 1;
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            groups,
            input,
            kernel,
            output,
            stride: stride3,
            pad: pad3,
            spatial_rank: sr,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cout];
        s.extend_from_slice(&self.output[3 - self.spatial_rank..]);
        s
    }

    pub fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Output positions `o` along `axis` for which `o*stride + k - pad` lands inside the input.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis] as isize;
        let off = k as isize - self.pad[axis] as isize;
        let n_in = self.input[axis] as isize;
        let n_out = self.output[axis] as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // largest o with o*s + off <= n_in - 1
        let hi = if n_in - 1 - off < 0 {
            -1
        } else {
            (n_in - 1 - off) / s
        };
        let lo = lo.min(n_out);
        let hi = (hi + 1).clamp(lo, n_out);
        (lo as usize, hi as usize)
    }

    /// Calls `f(out_offset, in_offset, len)` for each contiguous run along the last axis
    /// that kernel tap `(kd, kh, kw)` connects (stride along the last axis handled by caller).
    #[inline]
    fn for_each_row(
        &self,
        kd: usize,
        kh: usize,
        kw: usize,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let [_, ih_n, iw_n] = self.input;
        let [_, oh_n, ow_n] = self.output;
        let (d_lo, d_hi) = self.valid_range(0, kd);
        let (h_lo, h_hi) = self.valid_range(1, kh);
        let (w_lo, w_hi) = self.valid_range(2, kw);
        if w_lo >= w_hi {
            return;
        }
        for od in d_lo..d_hi {
            let id = od * self.stride[0] + kd - self.pad[0];
            for oh in h_lo..h_hi {
                let ih = oh * self.stride[1] + kh - self.pad[1];
                let out_row = (od * oh_n + oh) * ow_n;
                let iw0 = w_lo * self.stride[2] + kw - self.pad[2];
                let in_row = (id * ih_n + ih) * iw_n;
                f(out_row + w_lo, in_row + iw0, w_hi - w_lo);
            }
        }
    }
}

pub fn forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ip = g.in_plane();
    let op = g.out_plane();
    let kv = g.kernel_volume();
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let [kd_n, kh_n, kw_n] = g.kernel;
    let sw = g.stride[2];
    let mut out = vec![0.0; g.batch * g.cout * op];
    out.par_chunks_mut(op).enumerate().for_each(|(idx, plane)| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        if let Some(bias) = bias {
            plane.fill(bias[co]);
        }
        let grp = co / cout_g;
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let src = &x[(b * g.cin + ci) * ip..][..ip];
            let wk = &w[(co * cin_g + cil) * kv..][..kv];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        g.for_each_row(kd, kh, kw, |o, i, len| {
                            let dst = &mut plane[o..o + len];
                            if sw == 1 {
                                for (d, s) in dst.iter_mut().zip(&src[i..i + len]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[i + j * sw];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the input.
pub fn backward_input(g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let ip = g.in_plane();
    let op = g.out_plane();
    let kv = g.kernel_volume();
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let [kd_n, kh_n, kw_n] = g.kernel;
    let sw = g.stride[2];
    let mut dx = vec![0.0; g.batch * g.cin * ip];
    dx.par_chunks_mut(ip).enumerate().for_each(|(idx, plane)| {
        let (b, ci) = (idx / g.cin, idx % g.cin);
        let grp = ci / cin_g;
        let cil = ci % cin_g;
        for co in grp * cout_g..(grp + 1) * cout_g {
            let grad = &dy[(b * g.cout + co) * op..][..op];
            let wk = &w[(co * cin_g + cil) * kv..][..kv];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        g.for_each_row(kd, kh, kw, |o, i, len| {
                            for j in 0..len {
                                plane[i + j * sw] += wv * grad[o + j];
                            }
                        });
                    }
                }
            }
        }
    });
    dx
}

/// Gradient with respect to the weights.
pub fn backward_weight(g: &ConvGeom, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let ip = g.in_plane();
    let op = g.out_plane();
    let kv = g.kernel_volume();
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let [kd_n, kh_n, kw_n] = g.kernel;
    let sw = g.stride[2];
    let mut dw = vec![0.0; g.cout * cin_g * kv];
    dw.par_chunks_mut(cin_g * kv)
        .enumerate()
        .for_each(|(co, wgrad)| {
            let grp = co / cout_g;
            for b in 0..g.batch {
                let grad = &dy[(b * g.cout + co) * op..][..op];
                for cil in 0..cin_g {
                    let ci = grp * cin_g + cil;
                    let src = &x[(b * g.cin + ci) * ip..][..ip];
                    for kd in 0..kd_n {
                        for kh in 0..kh_n {
                            for kw in 0..kw_n {
                                let mut acc = 0.0;
                                g.for_each_row(kd, kh, kw, |o, i, len| {
                                    for j in 0..len {
                                        acc += grad[o + j] * src[i + j * sw];
                                    }
                                });
                                wgrad[cil * kv + (kd * kh_n + kh) * kw_n + kw] += acc;
                            }
                        }
                    }
                }
            }
        });
    dw
}

pub fn backward_bias(g: &ConvGeom, dy: &[f64]) -> Vec<f64> {
    let op = g.out_plane();
    let mut db = vec![0.0; g.cout];
    for b in 0..g.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dy[(b * g.cout + co) * op..][..op].iter().sum::<f64>();
        }
    }
    db
}
