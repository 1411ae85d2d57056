use std::rc::Rc;

use crate::autograd::{Graph, Init, ParamId, Tensor, Var};
use crate::error::{Error, Result};

use super::{LayerNorm, Linear, TokenGrid};

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> MultiHeadAttention {
        assert!(heads > 0 && dim % heads == 0, "{dim} channels cannot split into {heads} heads");
        MultiHeadAttention {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim, true),
            heads,
            dim,
        }
    }

    fn split_heads(&self, x: &Var) -> Var {
        let s = x.shape();
        let (b, n) = (s[0], s[1]);
        x.reshape(&[b, n, self.heads, self.dim / self.heads])
            .permute(&[0, 2, 1, 3])
    }

    /// `queries` is `[b, nq, c]`, `context` is `[b, nk, c]`; `allowed`, if
    /// given, flags permitted `(b, head, query, key)` pairs. Returns the
    /// projected output `[b, nq, c]` and the attention weights
    /// `[b, heads, nq, nk]`.
    pub fn forward(
        &self,
        g: &Graph,
        queries: &Var,
        context: &Var,
        allowed: Option<Rc<Vec<bool>>>,
    ) -> (Var, Var) {
        self.forward_biased(g, queries, context, allowed, None)
    }

    /// As `forward`, with an additive score bias `[heads, nq, nk]` shared
    /// across the batch.
    pub fn forward_biased(
        &self,
        g: &Graph,
        queries: &Var,
        context: &Var,
        allowed: Option<Rc<Vec<bool>>>,
        bias: Option<&Var>,
    ) -> (Var, Var) {
        let (b, nq) = (queries.shape()[0], queries.shape()[1]);
        let d = self.dim / self.heads;
        let q = self.split_heads(&self.q.forward(g, queries));
        let k = self.split_heads(&self.k.forward(g, context));
        let v = self.split_heads(&self.v.forward(g, context));
        let scores = q
            .matmul(&k.permute(&[0, 1, 3, 2]))
            .scale(1.0 / (d as f64).sqrt());
        let scores = match bias {
            Some(bias) => {
                let s = bias.shape();
                scores.add(&bias.reshape(&[1, s[0], s[1], s[2]]))
            }
            None => scores,
        };
        let probs = scores.softmax_last(allowed);
        let ctx = probs
            .matmul(&v)
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, nq, self.dim]);
        (self.proj.forward(g, &ctx), probs)
    }
}

/// Window partition of a `[b, h, w, c]` grid, optionally cyclically
/// shifted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub shift_h: usize,
    pub shift_w: usize,
}

impl WindowLayout {
    pub fn num_windows(&self) -> usize {
        (self.h / self.win_h) * (self.w / self.win_w)
    }

    pub fn tokens(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Grid position `(y, x)` of token `n` of window `wi` (within a sample).
    fn source(&self, wi: usize, n: usize) -> (usize, usize) {
        let per_row = self.w / self.win_w;
        let (wy, wx) = (wi / per_row, wi % per_row);
        let (ny, nx) = (n / self.win_w, n % self.win_w);
        (
            (wy * self.win_h + ny + self.shift_h) % self.h,
            (wx * self.win_w + nx + self.shift_w) % self.w,
        )
    }

    /// Shift region of token `n` of window `wi`; tokens from different
    /// regions were not adjacent before the cyclic shift.
    fn region(&self, wi: usize, n: usize) -> usize {
        let per_row = self.w / self.win_w;
        let y = (wi / per_row) * self.win_h + n / self.win_w;
        let x = (wi % per_row) * self.win_w + n % self.win_w;
        let band = |p: usize, size: usize, win: usize, shift: usize| {
            if shift == 0 || p < size - win {
                0
            } else if p < size - shift {
                1
            } else {
                2
            }
        };
        band(y, self.h, self.win_h, self.shift_h) * 3 + band(x, self.w, self.win_w, self.shift_w)
    }

    /// Gather index from a `[(2 * span - 1)^2, heads]` relative-position
    /// table to `[heads, tokens, tokens]`.
    fn relative_index(&self, span: usize, heads: usize) -> Vec<u32> {
        let nt = self.tokens();
        let side = 2 * span - 1;
        let mut idx = Vec::with_capacity(heads * nt * nt);
        for h in 0..heads {
            for i in 0..nt {
                let (yi, xi) = (i / self.win_w, i % self.win_w);
                for j in 0..nt {
                    let (yj, xj) = (j / self.win_w, j % self.win_w);
                    let dy = yi + span - 1 - yj;
                    let dx = xi + span - 1 - xj;
                    idx.push(((dy * side + dx) * heads + h) as u32);
                }
            }
        }
        idx
    }

    /// Gather index from the grid to `[b * windows, tokens, c]`.
    fn partition_index(&self) -> Vec<u32> {
        let (nw, nt) = (self.num_windows(), self.tokens());
        let mut idx = Vec::with_capacity(self.b * nw * nt * self.c);
        for bi in 0..self.b {
            for wi in 0..nw {
                for n in 0..nt {
                    let (y, x) = self.source(wi, n);
                    let base = ((bi * self.h + y) * self.w + x) * self.c;
                    idx.extend((0..self.c).map(|ch| (base + ch) as u32));
                }
            }
        }
        idx
    }

    /// Gather index from `[b * windows, tokens, c]` back to the grid.
    fn reverse_index(&self) -> Vec<u32> {
        let (nw, nt) = (self.num_windows(), self.tokens());
        let mut idx = vec![0u32; self.b * self.h * self.w * self.c];
        for bi in 0..self.b {
            for wi in 0..nw {
                for n in 0..nt {
                    let (y, x) = self.source(wi, n);
                    let dst = ((bi * self.h + y) * self.w + x) * self.c;
                    let src = ((bi * nw + wi) * nt + n) * self.c;
                    for ch in 0..self.c {
                        idx[dst + ch] = (src + ch) as u32;
                    }
                }
            }
        }
        idx
    }

    /// Attention permission per `(window, head, query, key)`: the key must
    /// be valid and lie in the query's shift region.
    fn allowed(&self, mask: &Tensor, heads: usize) -> Vec<bool> {
        let (nw, nt) = (self.num_windows(), self.tokens());
        let m = mask.data();
        let mut out = Vec::with_capacity(self.b * nw * heads * nt * nt);
        for bi in 0..self.b {
            for wi in 0..nw {
                let valid: Vec<bool> = (0..nt)
                    .map(|n| {
                        let (y, x) = self.source(wi, n);
                        m[(bi * self.h + y) * self.w + x] > 0.5
                    })
                    .collect();
                let region: Vec<usize> = (0..nt).map(|n| self.region(wi, n)).collect();
                let start = out.len();
                for i in 0..nt {
                    for j in 0..nt {
                        out.push(valid[j] && region[i] == region[j]);
                    }
                }
                for _ in 1..heads {
                    out.extend_from_within(start..start + nt * nt);
                }
            }
        }
        out
    }
}

/// Pre-norm transformer block with (shifted) window self-attention and a
/// GELU MLP. Invalid tokens are never attended to and stay zero.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Learned bias per head and in-window offset, `[(2 * window - 1)^2, heads]`.
    pub rel_bias: ParamId,
    pub window: usize,
    pub shifted: bool,
}

impl SwinBlock {
    pub const MLP_RATIO: usize = 4;

    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, window: usize, shifted: bool) -> SwinBlock {
        let hidden = Self::MLP_RATIO * dim;
        SwinBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim, true),
            rel_bias: init.normal(&format!("{name}.rel_bias"), &[(2 * window - 1).pow(2), heads], 0.02),
            window,
            shifted,
        }
    }

    /// Window size is capped at the grid size; the shift (half a window)
    /// only applies when the grid holds more than one window.
    pub fn layout(&self, b: usize, h: usize, w: usize, c: usize) -> Result<WindowLayout> {
        let (win_h, win_w) = (self.window.min(h), self.window.min(w));
        if h % win_h != 0 || w % win_w != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} grid is not divisible by window {}",
                self.window
            )));
        }
        let shift = |size: usize, win: usize| if self.shifted && size > win { win / 2 } else { 0 };
        Ok(WindowLayout {
            b,
            h,
            w,
            c,
            win_h,
            win_w,
            shift_h: shift(h, win_h),
            shift_w: shift(w, win_w),
        })
    }

    /// Output grid and the attention weights `[b * windows, heads, n, n]`.
    pub fn forward_with_attention(&self, g: &Graph, x: &TokenGrid) -> Result<(TokenGrid, Var)> {
        let (b, h, w, c) = x.dims();
        let lay = self.layout(b, h, w, c)?;
        let (nw, nt) = (lay.num_windows(), lay.tokens());
        let shortcut = x.masked_feat();
        let normed = self.norm1.forward(g, &shortcut);
        let windows = normed.gather(Rc::new(lay.partition_index()), vec![b * nw, nt, c]);
        let allowed = Rc::new(lay.allowed(&x.mask, self.attn.heads));
        let heads = self.attn.heads;
        let bias = g
            .param(self.rel_bias)
            .gather(Rc::new(lay.relative_index(self.window, heads)), vec![heads, nt, nt]);
        let (attended, probs) = self.attn.forward_biased(g, &windows, &windows, Some(allowed), Some(&bias));
        let attended = attended.gather(Rc::new(lay.reverse_index()), vec![b, h, w, c]);
        let y = shortcut.add(&attended);
        let hidden = self.fc1.forward(g, &self.norm2.forward(g, &y)).gelu();
        let y = y.add(&self.fc2.forward(g, &hidden));
        Ok((
            TokenGrid {
                feat: y.mul_const(&x.mask),
                mask: x.mask.clone(),
            },
            probs,
        ))
    }

    pub fn forward(&self, g: &Graph, x: &TokenGrid) -> Result<TokenGrid> {
        Ok(self.forward_with_attention(g, x)?.0)
    }
}
