//! Convolution, per-channel normalization: forward/backward kernels used by
//! the tape. Batches here are small (patch stacks), so clarity wins over
//! blocking tricks; the decoder matmuls in `linalg` are the hot path, not
//! these.

use std::sync::Arc;

use super::linalg;
use super::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NchwDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Normalization statistics source. `Train` computes batch statistics;
/// `Frozen` uses stored running statistics (inference / attack gradients).
#[derive(Clone)]
pub enum NormMode<F: Real> {
    Train { eps: F },
    Frozen {
        mean: Arc<Vec<F>>,
        var: Arc<Vec<F>>,
        eps: F,
    },
}

/// Zero-padded im2col for one sample: `col[p, ci*kh*kw + ky*kw + kx]`.
fn im2col<F: Real>(x: &[F], d: &ConvDims, col: &mut [F]) {
    let (oh, ow) = d.out_hw();
    let k = d.k();
    debug_assert_eq!(col.len(), oh * ow * k);
    col.fill(F::ZERO);
    for oy in 0..oh {
        for ox in 0..ow {
            let p = oy * ow + ox;
            let dst = &mut col[p * k..(p + 1) * k];
            for ci in 0..d.c_in {
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dst[ci * d.kh * d.kw + ky * d.kw + kx] =
                            x[ci * d.h * d.w + iy as usize * d.w + ix as usize];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Real>(x: &[F], w: &[F], d: &ConvDims) -> Vec<F> {
    let (oh, ow) = d.out_hw();
    let (k, ohw) = (d.k(), oh * ow);
    let mut col = vec![F::ZERO; ohw * k];
    let mut y = vec![F::ZERO; d.n * d.c_out * ohw];
    for n in 0..d.n {
        im2col(&x[n * d.c_in * d.h * d.w..], d, &mut col);
        let yk = &mut y[n * d.c_out * ohw..(n + 1) * d.c_out * ohw];
        for co in 0..d.c_out {
            let wrow = &w[co * k..(co + 1) * k];
            for p in 0..ohw {
                yk[co * ohw + p] = linalg::dot(wrow, &col[p * k..(p + 1) * k]);
            }
        }
    }
    y
}

pub fn conv2d_backward_x<F: Real>(g: &[F], w: &[F], d: &ConvDims, gx: &mut [F]) {
    let (oh, ow) = d.out_hw();
    let (k, ohw) = (d.k(), oh * ow);
    let mut gcol = vec![F::ZERO; ohw * k];
    for n in 0..d.n {
        gcol.fill(F::ZERO);
        let gn = &g[n * d.c_out * ohw..(n + 1) * d.c_out * ohw];
        for co in 0..d.c_out {
            let wrow = &w[co * k..(co + 1) * k];
            for p in 0..ohw {
                linalg::axpy(gn[co * ohw + p], wrow, &mut gcol[p * k..(p + 1) * k]);
            }
        }
        // col2im: scatter-add, the transpose of im2col's gather.
        let gxn = &mut gx[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                let src = &gcol[p * k..(p + 1) * k];
                for ci in 0..d.c_in {
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            gxn[ci * d.h * d.w + iy as usize * d.w + ix as usize] +=
                                src[ci * d.kh * d.kw + ky * d.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_w<F: Real>(g: &[F], x: &[F], d: &ConvDims, gw: &mut [F]) {
    let (oh, ow) = d.out_hw();
    let (k, ohw) = (d.k(), oh * ow);
    let mut col = vec![F::ZERO; ohw * k];
    for n in 0..d.n {
        im2col(&x[n * d.c_in * d.h * d.w..], d, &mut col);
        let gn = &g[n * d.c_out * ohw..(n + 1) * d.c_out * ohw];
        for co in 0..d.c_out {
            let grow = &gn[co * ohw..(co + 1) * ohw];
            let gwrow = &mut gw[co * k..(co + 1) * k];
            for (p, &gv) in grow.iter().enumerate() {
                if gv == F::ZERO {
                    continue;
                }
                linalg::axpy(gv, &col[p * k..(p + 1) * k], gwrow);
            }
        }
    }
}

/// Returns the normalized output plus, in train mode, the batch (mean, var)
/// used — the trainer folds those into running statistics.
pub fn channel_norm_forward<F: Real>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    d: &NchwDims,
    mode: &NormMode<F>,
) -> (Vec<F>, Option<Arc<(Vec<F>, Vec<F>)>>) {
    let hw = d.h * d.w;
    let cols = d.c * hw;
    let (mean, var, eps, saved) = match mode {
        NormMode::Train { eps } => {
            let count = F::from_usize(d.n * hw);
            let mut mean = vec![F::ZERO; d.c];
            let mut var = vec![F::ZERO; d.c];
            for n in 0..d.n {
                for c in 0..d.c {
                    let plane = &x[n * cols + c * hw..n * cols + (c + 1) * hw];
                    mean[c] += plane.iter().copied().sum::<F>();
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            for n in 0..d.n {
                for c in 0..d.c {
                    let plane = &x[n * cols + c * hw..n * cols + (c + 1) * hw];
                    var[c] += plane.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<F>();
                }
            }
            for v in var.iter_mut() {
                *v /= count;
            }
            let saved = Arc::new((mean.clone(), var.clone()));
            (mean, var, *eps, Some(saved))
        }
        NormMode::Frozen { mean, var, eps } => (mean.to_vec(), var.to_vec(), *eps, None),
    };

    let mut y = vec![F::ZERO; x.len()];
    for c in 0..d.c {
        let inv = F::ONE / (var[c] + eps).sqrt();
        let (scale, shift) = (gamma[c] * inv, beta[c] - gamma[c] * inv * mean[c]);
        for n in 0..d.n {
            let src = &x[n * cols + c * hw..n * cols + (c + 1) * hw];
            let dst = &mut y[n * cols + c * hw..n * cols + (c + 1) * hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = scale * v + shift;
            }
        }
    }
    (y, saved)
}

#[allow(clippy::too_many_arguments)]
pub fn channel_norm_backward<F: Real>(
    g: &[F],
    x: &[F],
    gamma: &[F],
    d: &NchwDims,
    mode: &NormMode<F>,
    saved: Option<&(Vec<F>, Vec<F>)>,
    mut gx: Option<&mut [F]>,
    mut ggamma: Option<&mut [F]>,
    mut gbeta: Option<&mut [F]>,
) {
    let hw = d.h * d.w;
    let cols = d.c * hw;
    match mode {
        NormMode::Frozen { mean, var, eps } => {
            for c in 0..d.c {
                let inv = F::ONE / (var[c] + *eps).sqrt();
                let mut sg = F::ZERO;
                let mut sgx = F::ZERO;
                for n in 0..d.n {
                    let base = n * cols + c * hw;
                    for p in 0..hw {
                        let gv = g[base + p];
                        sg += gv;
                        sgx += gv * (x[base + p] - mean[c]) * inv;
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[base + p] += gv * gamma[c] * inv;
                        }
                    }
                }
                if let Some(gg) = ggamma.as_deref_mut() {
                    gg[c] += sgx;
                }
                if let Some(gb) = gbeta.as_deref_mut() {
                    gb[c] += sg;
                }
            }
        }
        NormMode::Train { eps } => {
            let (mean, var) = saved.expect("train-mode norm must have saved stats");
            let count = F::from_usize(d.n * hw);
            for c in 0..d.c {
                let inv = F::ONE / (var[c] + *eps).sqrt();
                // First pass: adjoint sums against xhat.
                let mut sg = F::ZERO;
                let mut sgx = F::ZERO;
                for n in 0..d.n {
                    let base = n * cols + c * hw;
                    for p in 0..hw {
                        let gv = g[base + p];
                        sg += gv;
                        sgx += gv * (x[base + p] - mean[c]) * inv;
                    }
                }
                if let Some(gg) = ggamma.as_deref_mut() {
                    gg[c] += sgx;
                }
                if let Some(gb) = gbeta.as_deref_mut() {
                    gb[c] += sg;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    // dx = gamma*inv/N * (N*g - sum_g - xhat * sum(g*xhat))
                    let k = gamma[c] * inv / count;
                    for n in 0..d.n {
                        let base = n * cols + c * hw;
                        for p in 0..hw {
                            let xhat = (x[base + p] - mean[c]) * inv;
                            gx[base + p] += k * (count * g[base + p] - sg - xhat * sgx);
                        }
                    }
                }
            }
        }
    }
}
