use crate::autograd::{ConvGeometry, Graph, Init, ParamId, Tensor, Var};
use crate::error::{Error, Result};

use super::{Linear, TokenGrid};

/// Convolution that only sees valid inputs.
///
/// Each output is rescaled by `(taps inside the image) / (valid taps)` so a
/// partially observed receptive field keeps the magnitude of a fully
/// observed one. Outputs with no valid tap are zero (bias included) and
/// become invalid; the others become valid.
#[derive(Debug, Clone)]
pub struct PartialConv {
    /// `[kh * kw * c_in, c_out]`, rows ordered `(ky, kx, c_in)`.
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl PartialConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> PartialConv {
        let fan_in = kernel * kernel * c_in;
        PartialConv {
            weight: init.uniform(&format!("{name}.weight"), &[fan_in, c_out], fan_in),
            bias: bias.then(|| init.uniform(&format!("{name}.bias"), &[c_out], fan_in)),
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        }
    }

    fn geometry(&self, shape: &[usize]) -> ConvGeometry {
        ConvGeometry::new(shape, self.kernel, self.kernel, self.stride, self.pad)
    }

    /// Rescaling factor and updated mask, both `[b, ho, wo, 1]`.
    pub fn mask_update(&self, mask: &Tensor) -> (Tensor, Tensor) {
        let geo = self.geometry(mask.shape());
        let m = mask.data();
        let n = geo.b * geo.ho * geo.wo;
        let mut ratio = Vec::with_capacity(n);
        let mut updated = Vec::with_capacity(n);
        for bi in 0..geo.b {
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let (mut inside, mut valid) = (0.0, 0.0);
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            if let Some((y, x)) = geo.source(oy, ox, ky, kx) {
                                inside += 1.0;
                                valid += m[(bi * geo.h + y) * geo.w + x];
                            }
                        }
                    }
                    if valid > 0.0 {
                        ratio.push(inside / valid);
                        updated.push(1.0);
                    } else {
                        ratio.push(0.0);
                        updated.push(0.0);
                    }
                }
            }
        }
        let shape = [geo.b, geo.ho, geo.wo, 1];
        (Tensor::new(shape.to_vec(), ratio), Tensor::new(shape.to_vec(), updated))
    }

    /// Weight times unfolded input, without bias or rescaling.
    fn linear_part(&self, g: &Graph, x: &Var) -> Var {
        assert_eq!(x.shape()[3], self.c_in, "conv input channels");
        x.im2col(self.kernel, self.kernel, self.stride, self.pad)
            .matmul(&g.param(self.weight))
    }

    pub fn forward(&self, g: &Graph, x: &TokenGrid) -> TokenGrid {
        let (ratio, updated) = self.mask_update(&x.mask);
        let mut y = self.linear_part(g, &x.masked_feat()).mul_const(&ratio);
        if let Some(b) = self.bias {
            y = y.add(&g.param(b).mul_const(&updated));
        }
        TokenGrid { feat: y, mask: updated }
    }

    /// Ordinary zero-padded convolution (equivalent to a fully valid mask).
    pub fn forward_dense(&self, g: &Graph, x: &Var) -> Var {
        let y = self.linear_part(g, x);
        match self.bias {
            Some(b) => y.add(&g.param(b)),
            None => y,
        }
    }
}

/// Non-overlapping `patch x patch` partial convolution from one input
/// channel to `dim` channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv: PartialConv,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init, name: &str, patch: usize, dim: usize) -> PatchEmbed {
        PatchEmbed {
            conv: PartialConv::new(init, name, 1, dim, patch, patch, 0, true),
            patch,
        }
    }

    /// `x` is `[b, s, s, 1]`.
    pub fn forward(&self, g: &Graph, x: &TokenGrid) -> Result<TokenGrid> {
        let (_, h, w, _) = x.dims();
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} input is not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        Ok(self.conv.forward(g, x))
    }
}

/// 2x2 stride-2 partial convolution doubling the channel count.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub conv: PartialConv,
}

impl PatchMerge {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> PatchMerge {
        PatchMerge {
            conv: PartialConv::new(init, name, dim, 2 * dim, 2, 2, 0, true),
        }
    }

    pub fn forward(&self, g: &Graph, x: &TokenGrid) -> Result<TokenGrid> {
        let (_, h, w, _) = x.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot merge an odd {h}x{w} grid")));
        }
        Ok(self.conv.forward(g, x))
    }
}

/// Linear channel expansion followed by a pixel rearrangement to `factor`
/// times the resolution, then a 3x3 partial-convolution smoothing layer.
/// The mask is upsampled by nearest neighbour.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub expand: Linear,
    pub smooth: PartialConv,
    pub factor: usize,
    pub c_out: usize,
}

impl PatchExpand {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, factor: usize) -> PatchExpand {
        PatchExpand {
            expand: Linear::new(init, &format!("{name}.expand"), c_in, factor * factor * c_out, false),
            smooth: PartialConv::new(init, &format!("{name}.smooth"), c_out, c_out, 3, 1, 1, true),
            factor,
            c_out,
        }
    }

    pub fn forward(&self, g: &Graph, x: &TokenGrid) -> TokenGrid {
        let (b, h, w, _) = x.dims();
        let f = self.factor;
        let y = self
            .expand
            .forward(g, &x.masked_feat())
            .reshape(&[b, h, w, f, f, self.c_out])
            .permute(&[0, 1, 3, 2, 4, 5])
            .reshape(&[b, h * f, w * f, self.c_out]);
        let mask = upsample_nearest(&x.mask, f);
        let smoothed = self.smooth.forward(g, &TokenGrid { feat: y, mask: mask.clone() });
        TokenGrid {
            feat: smoothed.feat.mul_const(&mask),
            mask,
        }
    }
}

/// Nearest-neighbour upsampling of a `[b, h, w, 1]` mask.
pub fn upsample_nearest(mask: &Tensor, factor: usize) -> Tensor {
    let s = mask.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let (ho, wo) = (h * factor, w * factor);
    let m = mask.data();
    let mut out = Vec::with_capacity(b * ho * wo);
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                out.push(m[(bi * h + y / factor) * w + x / factor]);
            }
        }
    }
    Tensor::new(vec![b, ho, wo, 1], out)
}
