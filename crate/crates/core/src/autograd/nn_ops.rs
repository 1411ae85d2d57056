//! Fused operations with hand-written gradients: matrix products, softmax,
//! layer normalisation, cross-entropy, 2-D FFT and complex helpers.

use std::rc::Rc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::ops::ZERO_INDEX;
use super::{Tensor, Var};

/// `c = alpha * a @ b + beta * c` for strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!((max_a as usize) < a.len() && (max_b as usize) < b.len());
    // SAFETY: the asserts above bound every strided access within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Var {
    /// Matrix product over the last two axes.
    ///
    /// `rhs` is either a 2-D matrix shared by every leading batch index of
    /// `self`, or carries exactly the same leading batch axes.
    pub fn matmul(&self, rhs: &Var) -> Var {
        let ashape = self.shape().to_vec();
        let bshape = rhs.shape().to_vec();
        assert!(ashape.len() >= 2 && bshape.len() >= 2);
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (k2, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {ashape:?} x {bshape:?}");
        let shared = bshape.len() == 2;
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        if !shared {
            assert_eq!(
                &ashape[..ashape.len() - 2],
                &bshape[..bshape.len() - 2],
                "matmul batch dims"
            );
        }
        let mut oshape = ashape[..ashape.len() - 2].to_vec();
        oshape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(), rhs.data());
        if shared {
            gemm(batch * m, k, n, ad, (k as isize, 1), bd, (n as isize, 1), 0.0, &mut out);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bd[i * k * n..(i + 1) * k * n],
                    (n as isize, 1),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Var::from_op(
            Tensor::new(oshape, out),
            vec![self.clone(), rhs.clone()],
            move |g, parents, _| {
                let (a, b) = (&parents[0], &parents[1]);
                let (ad, bd) = (a.data(), b.data());
                let ga = a.requires_grad().then(|| {
                    // dA = dC @ B^T
                    let mut ga = vec![0.0; batch * m * k];
                    if shared {
                        gemm(batch * m, n, k, g, (n as isize, 1), bd, (1, n as isize), 0.0, &mut ga);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                (n as isize, 1),
                                &bd[i * k * n..(i + 1) * k * n],
                                (1, n as isize),
                                0.0,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    // dB = A^T @ dC
                    if shared {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, batch * m, n, ad, (1, k as isize), g, (n as isize, 1), 0.0, &mut gb);
                        gb
                    } else {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..(i + 1) * m * k],
                                (1, k as isize),
                                &g[i * m * n..(i + 1) * m * n],
                                (n as isize, 1),
                                0.0,
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                        gb
                    }
                });
                vec![ga, gb]
            },
        )
    }

    /// Softmax over the last axis. Where `allowed` is given (one flag per
    /// element), disallowed entries get probability zero; a row with no
    /// allowed entry becomes all zeros.
    pub fn softmax_last(&self, allowed: Option<Rc<Vec<bool>>>) -> Var {
        let shape = self.shape().to_vec();
        let k = *shape.last().unwrap();
        let x = self.data();
        if let Some(a) = &allowed {
            assert_eq!(a.len(), x.len());
        }
        let mut out = vec![0.0; x.len()];
        for (r, (xr, yr)) in x.chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let ok = |j: usize| allowed.as_ref().is_none_or(|a| a[r * k + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
                if ok(j) {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            for y in yr.iter_mut() {
                *y /= sum;
            }
        }
        Var::from_op(Tensor::new(shape, out), vec![self.clone()], move |g, _, y| {
            let y = y.data();
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), gxr) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let shape = self.shape().to_vec();
        let c = *shape.last().unwrap();
        assert_eq!(gamma.numel(), c);
        assert_eq!(beta.numel(), c);
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let rows = x.len() / c;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        Var::from_op(
            Tensor::new(shape, out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, parents, _| {
                let gd = parents[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gd[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gd[j];
                        gx[r * c + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            },
        )
    }

    /// Mean cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var {
        let shape = self.shape();
        assert_eq!(shape.len(), 2);
        let (n, k) = (shape[0], shape[1]);
        assert_eq!(labels.len(), n);
        let x = self.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let labels = labels.to_vec();
        Var::from_op(
            Tensor::scalar(loss / n as f64),
            vec![self.clone()],
            move |g, _, _| {
                let s = g[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * k + l] -= s;
                }
                vec![Some(gx)]
            },
        )
    }

    /// 2-D discrete Fourier transform over axes `[-3, -2]` of a tensor whose
    /// last axis holds `(re, im)` pairs. The inverse transform is normalised
    /// by `1 / (h * w)`.
    pub fn fft2(&self, inverse: bool) -> Var {
        let shape = self.shape().to_vec();
        let nd = shape.len();
        assert!(nd >= 3 && shape[nd - 1] == 2, "fft2 expects [..., h, w, 2]");
        let (h, w) = (shape[nd - 3], shape[nd - 2]);
        let out = fft2_raw(self.data(), h, w, inverse, if inverse { 1.0 / (h * w) as f64 } else { 1.0 });
        Var::from_op(Tensor::new(shape, out), vec![self.clone()], move |g, _, _| {
            // The adjoint of the DFT is the unnormalised inverse, and vice versa.
            let gx = if inverse {
                fft2_raw(g, h, w, false, 1.0 / (h * w) as f64)
            } else {
                fft2_raw(g, h, w, true, 1.0)
            };
            vec![Some(gx)]
        })
    }

    /// `|z|` of a `[..., 2]` complex tensor.
    pub fn complex_abs(&self) -> Var {
        let shape = self.shape();
        assert_eq!(*shape.last().unwrap(), 2);
        let oshape = shape[..shape.len() - 1].to_vec();
        let out: Vec<f64> = self.data().chunks(2).map(|z| z[0].hypot(z[1])).collect();
        Var::from_op(Tensor::new(oshape, out), vec![self.clone()], |g, parents, y| {
            let z = parents[0].data();
            let y = y.data();
            let mut gx = vec![0.0; z.len()];
            for i in 0..y.len() {
                if y[i] > 0.0 {
                    gx[2 * i] = g[i] * z[2 * i] / y[i];
                    gx[2 * i + 1] = g[i] * z[2 * i + 1] / y[i];
                }
            }
            vec![Some(gx)]
        })
    }

    /// `arg z` in `(-pi, pi]` of a `[..., 2]` complex tensor.
    pub fn complex_angle(&self) -> Var {
        let shape = self.shape();
        assert_eq!(*shape.last().unwrap(), 2);
        let oshape = shape[..shape.len() - 1].to_vec();
        let out: Vec<f64> = self.data().chunks(2).map(|z| z[1].atan2(z[0])).collect();
        Var::from_op(Tensor::new(oshape, out), vec![self.clone()], |g, parents, _| {
            let z = parents[0].data();
            let mut gx = vec![0.0; z.len()];
            for i in 0..g.len() {
                let (re, im) = (z[2 * i], z[2 * i + 1]);
                let r2 = re * re + im * im;
                if r2 > 0.0 {
                    gx[2 * i] = -g[i] * im / r2;
                    gx[2 * i + 1] = g[i] * re / r2;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Builds `amp * e^{i phase}` as a `[..., 2]` complex tensor.
    pub fn polar(amp: &Var, phase: &Var) -> Var {
        assert_eq!(amp.shape(), phase.shape());
        let mut oshape = amp.shape().to_vec();
        oshape.push(2);
        let mut out = Vec::with_capacity(amp.numel() * 2);
        for (&a, &p) in amp.data().iter().zip(phase.data()) {
            out.push(a * p.cos());
            out.push(a * p.sin());
        }
        Var::from_op(
            Tensor::new(oshape, out),
            vec![amp.clone(), phase.clone()],
            |g, parents, _| {
                let (a, p) = (parents[0].data(), parents[1].data());
                let mut ga = vec![0.0; a.len()];
                let mut gp = vec![0.0; a.len()];
                for i in 0..a.len() {
                    let (c, s) = (p[i].cos(), p[i].sin());
                    let (gr, gi) = (g[2 * i], g[2 * i + 1]);
                    ga[i] = gr * c + gi * s;
                    gp[i] = a[i] * (-gr * s + gi * c);
                }
                vec![Some(ga), Some(gp)]
            },
        )
    }

    /// Unfolds `[b, h, w, c]` into `[b, ho, wo, kh * kw * c]` patches,
    /// zero padded. The patch vector is ordered `(ky, kx, c)`.
    pub fn im2col(&self, kh: usize, kw: usize, stride: usize, pad: usize) -> Var {
        let geo = ConvGeometry::new(self.shape(), kh, kw, stride, pad);
        let idx = geo.im2col_index();
        let shape = vec![geo.b, geo.ho, geo.wo, kh * kw * geo.c];
        self.gather(Rc::new(idx), shape)
    }
}

/// Output geometry of a 2-D convolution over an NHWC tensor.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(shape: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(shape.len(), 4, "expected [b, h, w, c]");
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeometry { b, h, w, c, kh, kw, stride, pad, ho, wo }
    }

    /// Input row/column under kernel tap `(ky, kx)` at output `(oy, ox)`,
    /// or `None` inside the padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    fn im2col_index(&self) -> Vec<u32> {
        let kc = self.kh * self.kw * self.c;
        let mut idx = Vec::with_capacity(self.b * self.ho * self.wo * kc);
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => {
                                    let base = ((bi * self.h + y) * self.w + x) * self.c;
                                    idx.extend((base..base + self.c).map(|i| i as u32));
                                }
                                None => idx.extend(std::iter::repeat_n(ZERO_INDEX, self.c)),
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

fn fft2_raw(data: &[f64], h: usize, w: usize, inverse: bool, scale: f64) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let plane = h * w;
    let mut out = vec![0.0; data.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for (src, dst) in data.chunks(plane * 2).zip(out.chunks_mut(plane * 2)) {
        for (z, p) in buf.iter_mut().zip(src.chunks(2)) {
            *z = Complex64::new(p[0], p[1]);
        }
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for (z, p) in buf.iter().zip(dst.chunks_mut(2)) {
            p[0] = z.re * scale;
            p[1] = z.im * scale;
        }
    }
    out
}
