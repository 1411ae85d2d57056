//! Mask-aware building blocks: partial convolution, patch embedding,
//! merging and expansion, and (shifted) window attention blocks.

mod attention;
mod conv;

pub use attention::{MultiHeadAttention, SwinBlock};
pub use conv::{PatchEmbed, PatchExpand, PatchMerge, PartialConv};

use crate::autograd::{Graph, Init, ParamId, Tensor, Var};
use crate::error::{Error, Result};

/// Feature map `[b, h, w, c]` paired with its validity mask `[b, h, w, 1]`
/// (1 = valid). Features at invalid positions are kept at zero.
#[derive(Clone)]
pub struct TokenGrid {
    pub feat: Var,
    pub mask: Tensor,
}

impl TokenGrid {
    pub fn new(feat: Var, mask: Tensor) -> Result<TokenGrid> {
        let fs = feat.shape();
        if fs.len() != 4 || mask.shape() != [fs[0], fs[1], fs[2], 1] {
            return Err(Error::Shape(format!(
                "features {:?} do not match mask {:?}",
                fs,
                mask.shape()
            )));
        }
        Ok(TokenGrid { feat, mask })
    }

    /// `(batch, height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.feat.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Features with invalid positions forced to zero.
    pub fn masked_feat(&self) -> Var {
        self.feat.mul_const(&self.mask)
    }

    pub fn full_mask(b: usize, h: usize, w: usize) -> Tensor {
        Tensor::full(&[b, h, w, 1], 1.0)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Elementwise union of binary masks.
pub fn mask_union(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x.max(y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Dense layer over the last axis; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        let weight = init.uniform(&format!("{name}.weight"), &[in_dim, out_dim], in_dim);
        let bias = bias.then(|| init.uniform(&format!("{name}.bias"), &[out_dim], in_dim));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let y = x.matmul(&g.param(self.weight));
        match self.bias {
            Some(b) => y.add(&g.param(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        x.layer_norm(&g.param(self.gamma), &g.param(self.beta), Self::EPS)
    }
}
