//! Elementwise, reduction and data-movement operations.

use std::rc::Rc;

use super::{Tensor, Var};

/// Marker index for gathers that produce an implicit zero.
pub const ZERO_INDEX: u32 = u32::MAX;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

/// For every element of `out`, the flat index of the element of `src` it reads.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<u32> {
    let n = out.len();
    let offset = n - src.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur as u32);
        for d in (0..n).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

enum Operand {
    Same,
    Indexed(Vec<u32>),
}

impl Operand {
    fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            Operand::Same
        } else {
            Operand::Indexed(broadcast_index(src, out))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Operand::Same => i,
            Operand::Indexed(v) => v[i] as usize,
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Var, b: &Var, op: BinOp) -> Var {
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let ia = Rc::new(Operand::new(a.shape(), &out_shape));
    let ib = Rc::new(Operand::new(b.shape(), &out_shape));
    let (ad, bd) = (a.data(), b.data());
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    macro_rules! fill {
        ($f:expr) => {
            match (&*ia, &*ib) {
                (Operand::Same, Operand::Same) => {
                    out.extend(ad.iter().zip(bd).map(|(&x, &y)| $f(x, y)))
                }
                _ => {
                    for i in 0..total {
                        out.push($f(ad[ia.at(i)], bd[ib.at(i)]));
                    }
                }
            }
        };
    }
    match op {
        BinOp::Add => fill!(|x: f64, y: f64| x + y),
        BinOp::Sub => fill!(|x: f64, y: f64| x - y),
        BinOp::Mul => fill!(|x: f64, y: f64| x * y),
        BinOp::Div => fill!(|x: f64, y: f64| x / y),
    }
    let value = Tensor::new(out_shape, out);
    Var::from_op(value, vec![a.clone(), b.clone()], move |g, parents, _| {
        let (a, b) = (&parents[0], &parents[1]);
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![0.0; a.numel()];
            let bd = b.data();
            for (i, &gi) in g.iter().enumerate() {
                let (j, k) = (ia.at(i), ib.at(i));
                ga[j] += match op {
                    BinOp::Add | BinOp::Sub => gi,
                    BinOp::Mul => gi * bd[k],
                    BinOp::Div => gi / bd[k],
                };
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![0.0; b.numel()];
            let ad = a.data();
            let bd = b.data();
            for (i, &gi) in g.iter().enumerate() {
                let (j, k) = (ia.at(i), ib.at(i));
                gb[k] += match op {
                    BinOp::Add => gi,
                    BinOp::Sub => -gi,
                    BinOp::Mul => gi * ad[j],
                    BinOp::Div => -gi * ad[j] / (bd[k] * bd[k]),
                };
            }
            gb
        });
        vec![ga, gb]
    })
}

impl Var {
    pub fn add(&self, rhs: &Var) -> Var {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        binary(self, rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        binary(self, rhs, BinOp::Mul)
    }

    pub fn div(&self, rhs: &Var) -> Var {
        binary(self, rhs, BinOp::Div)
    }

    /// Multiplies by a constant tensor (broadcast), without tracking it.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        self.mul(&Var::constant(c.clone()))
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape().to_vec(), out);
        Var::from_op(value, vec![self.clone()], move |g, parents, y| {
            let x = parents[0].data();
            let y = y.data();
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        })
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn sum_all(&self) -> Var {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Var::from_op(Tensor::scalar(s), vec![self.clone()], move |g, _, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = 1;
        Var::from_op(Tensor::new(oshape, out), vec![self.clone()], move |g, _, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "cannot reshape {:?} to {shape:?}",
            self.shape()
        );
        let value = Tensor::new(shape.to_vec(), self.data().to_vec());
        Var::from_op(value, vec![self.clone()], |g, _, _| vec![Some(g.to_vec())])
    }

    /// Reads `self.data()[idx[i]]` into output element `i`; [`ZERO_INDEX`]
    /// yields zero.
    pub fn gather(&self, idx: Rc<Vec<u32>>, shape: Vec<usize>) -> Var {
        assert_eq!(idx.len(), shape.iter().product::<usize>());
        let x = self.data();
        let out: Vec<f64> = idx
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { x[i as usize] })
            .collect();
        let n = self.numel();
        Var::from_op(Tensor::new(shape, out), vec![self.clone()], move |g, _, _| {
            let mut gx = vec![0.0; n];
            for (&i, &gi) in idx.iter().zip(g) {
                if i != ZERO_INDEX {
                    gx[i as usize] += gi;
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        let (idx, shape) = permute_index(self.shape(), perm);
        self.gather(Rc::new(idx), shape)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape();
        assert!(start + len <= shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            idx.extend((base..base + len * inner).map(|i| i as u32));
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        self.gather(Rc::new(idx), oshape)
    }

    /// Cyclic shift along the given axes: `out[i] = x[i - shift]`.
    pub fn roll(&self, shifts: &[(usize, isize)]) -> Var {
        let shape = self.shape().to_vec();
        let n = shape.len();
        let mut strides = vec![1usize; n];
        for d in (0..n.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        let mut shift = vec![0isize; n];
        for &(axis, s) in shifts {
            shift[axis] = s;
        }
        let total = self.numel();
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; n];
        for _ in 0..total {
            let mut src = 0usize;
            for d in 0..n {
                let len = shape[d] as isize;
                let s = (counter[d] as isize - shift[d]).rem_euclid(len) as usize;
                src += s * strides[d];
            }
            idx.push(src as u32);
            for d in (0..n).rev() {
                counter[d] += 1;
                if counter[d] < shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(Rc::new(idx), shape)
    }

    /// Concatenates along `axis`.
    pub fn concat(vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty());
        let first = vars[0].shape().to_vec();
        for v in vars {
            let s = v.shape();
            assert_eq!(s.len(), first.len());
            for d in 0..s.len() {
                if d != axis {
                    assert_eq!(s[d], first[d], "concat shape mismatch");
                }
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (v, &l) in vars.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total_len;
        Var::from_op(Tensor::new(oshape, out), vars.to_vec(), move |g, parents, _| {
            let mut grads: Vec<Vec<f64>> =
                parents.iter().map(|p| Vec::with_capacity(p.numel())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gv, &l) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&g[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            parents
                .iter()
                .zip(grads)
                .map(|(p, gv)| p.requires_grad().then_some(gv))
                .collect()
        })
    }
}

pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<u32>, Vec<usize>) {
    let n = shape.len();
    assert_eq!(perm.len(), n);
    let mut strides = vec![1usize; n];
    for d in (0..n.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ostrides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur as u32);
        for d in (0..n).rev() {
            counter[d] += 1;
            cur += ostrides[d];
            if counter[d] < oshape[d] {
                break;
            }
            cur -= ostrides[d] * oshape[d];
            counter[d] = 0;
        }
    }
    (idx, oshape)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
