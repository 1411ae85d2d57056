//! Shared decoder: frequency-domain skip fusion with channel and spatial
//! attention, patch expansion back to the input grid, and the classifier
//! head.

use crate::autograd::{Graph, Init, Tensor, Var};
use crate::encoder::{masked_mean_pool, run_blocks, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{mask_union, Linear, PartialConv, PatchExpand, SwinBlock, TokenGrid};

/// Splits two feature maps into amplitude and phase spectra, fuses each
/// spectrum with a 1x1 convolution over the concatenated channels, and
/// returns the real part of the inverse transform of the recombined
/// spectrum.
#[derive(Debug, Clone)]
pub struct FrequencyFusion {
    pub conv_spatial: PartialConv,
    pub conv_freq: PartialConv,
    pub fuse_amp: PartialConv,
    pub fuse_phase: PartialConv,
    pub dim: usize,
}

/// `[b, h, w, c]` real features to `[b, c, h, w, 2]` complex spectra.
fn spectrum(x: &Var) -> Var {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let planes = x.permute(&[0, 3, 1, 2]).reshape(&[b, c, h, w, 1]);
    let zeros = Var::constant(Tensor::zeros(&[b, c, h, w, 1]));
    Var::concat(&[planes, zeros], 4).fft2(false)
}

/// `[b, c, h, w]` to `[b, h, w, c]`.
fn to_nhwc(x: &Var) -> Var {
    x.permute(&[0, 2, 3, 1])
}

fn to_nchw(x: &Var) -> Var {
    x.permute(&[0, 3, 1, 2])
}

/// 1x1 weights `[2c, c]` that average channel `i` of both halves.
fn averaging_weights(c: usize) -> Tensor {
    let mut w = Tensor::zeros(&[2 * c, c]);
    for i in 0..c {
        w.data_mut()[i * c + i] = 0.5;
        w.data_mut()[(c + i) * c + i] = 0.5;
    }
    w
}

/// Inverse of [`spectrum`] restricted to the real part.
pub fn real_inverse(amp: &Var, phase: &Var) -> Var {
    let s = amp.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let back = Var::polar(amp, phase).fft2(true);
    to_nhwc(&back.narrow(4, 0, 1).reshape(&[b, c, h, w]))
}

/// Amplitude and phase `[b, c, h, w]` of a real `[b, h, w, c]` map.
pub fn amplitude_phase(x: &Var) -> (Var, Var) {
    let z = spectrum(x);
    (z.complex_abs(), z.complex_angle())
}

impl FrequencyFusion {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> FrequencyFusion {
        let fuse_amp = PartialConv::new(init, &format!("{name}.fuse_amp"), 2 * dim, dim, 1, 1, 0, false);
        let fuse_phase = PartialConv::new(init, &format!("{name}.fuse_phase"), 2 * dim, dim, 1, 1, 0, false);
        init.store.set_value(fuse_amp.weight, averaging_weights(dim));
        init.store.set_value(fuse_phase.weight, averaging_weights(dim));
        FrequencyFusion {
            conv_spatial: PartialConv::new(init, &format!("{name}.conv_spatial"), dim, dim, 3, 1, 1, false),
            conv_freq: PartialConv::new(init, &format!("{name}.conv_freq"), dim, dim, 3, 1, 1, false),
            fuse_amp,
            fuse_phase,
            dim,
        }
    }

    pub fn forward(&self, g: &Graph, spatial: &TokenGrid, freq: &TokenGrid) -> Result<TokenGrid> {
        if spatial.dims() != freq.dims() {
            return Err(Error::Shape(format!(
                "fusion inputs {:?} and {:?} differ",
                spatial.dims(),
                freq.dims()
            )));
        }
        let s = self.conv_spatial.forward(g, spatial);
        let f = self.conv_freq.forward(g, freq);
        let (amp_s, phase_s) = amplitude_phase(&s.feat);
        let (amp_f, phase_f) = amplitude_phase(&f.feat);
        let fuse = |conv: &PartialConv, a: &Var, b: &Var| {
            let both = Var::concat(&[to_nhwc(a), to_nhwc(b)], 3);
            to_nchw(&conv.forward_dense(g, &both))
        };
        let amp = fuse(&self.fuse_amp, &amp_s, &amp_f);
        let phase = fuse(&self.fuse_phase, &phase_s, &phase_f);
        let mask = mask_union(&spatial.mask, &freq.mask);
        Ok(TokenGrid {
            feat: real_inverse(&amp, &phase).mul_const(&mask),
            mask,
        })
    }
}

/// Squeeze-and-excitation style channel weights in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub reduce: Linear,
    pub expand: Linear,
}

impl ChannelAttention {
    pub const REDUCTION: usize = 4;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> ChannelAttention {
        let hidden = (dim / Self::REDUCTION).max(1);
        ChannelAttention {
            reduce: Linear::new(init, &format!("{name}.reduce"), dim, hidden, true),
            expand: Linear::new(init, &format!("{name}.expand"), hidden, dim, true),
        }
    }

    /// Weights `[b, 1, 1, c]`.
    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let s = x.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let pooled = x.reshape(&[b, h * w, c]).mean_axis(1).reshape(&[b, c]);
        let hidden = self.reduce.forward(g, &pooled).gelu();
        self.expand
            .forward(g, &hidden)
            .sigmoid()
            .reshape(&[b, 1, 1, c])
    }
}

/// Per-position weights in `(0, 1)` from a 7x7 convolution over both
/// streams.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: PartialConv,
}

impl SpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> SpatialAttention {
        SpatialAttention {
            conv: PartialConv::new(init, &format!("{name}.conv"), 2 * dim, 1, Self::KERNEL, 1, Self::KERNEL / 2, true),
        }
    }

    /// Map `[b, h, w, 1]`.
    pub fn forward(&self, g: &Graph, spatial: &Var, freq: &Var) -> Var {
        let both = Var::concat(&[spatial.clone(), freq.clone()], 3);
        self.conv.forward_dense(g, &both).sigmoid()
    }
}

/// Fuses one level's skip features into the decoder state.
#[derive(Debug, Clone)]
pub struct SkipFusion {
    pub freq: FrequencyFusion,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub reduce: Linear,
    pub dim: usize,
}

impl SkipFusion {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> SkipFusion {
        SkipFusion {
            freq: FrequencyFusion::new(init, &format!("{name}.freq"), dim),
            channel: ChannelAttention::new(init, &format!("{name}.channel"), dim),
            spatial: SpatialAttention::new(init, &format!("{name}.spatial"), dim),
            reduce: Linear::new(init, &format!("{name}.reduce"), 2 * dim, dim, true),
            dim,
        }
    }

    /// `spatial` carries the time-domain skip (plus the magnitude skip),
    /// `freq` the frequency-path skip, `decoder` the current decoder state.
    pub fn forward(&self, g: &Graph, spatial: &TokenGrid, freq: &TokenGrid, decoder: &TokenGrid) -> Result<TokenGrid> {
        if decoder.dims() != spatial.dims() {
            return Err(Error::Shape(format!(
                "decoder state {:?} does not match skip {:?}",
                decoder.dims(),
                spatial.dims()
            )));
        }
        let fused = self.freq.forward(g, spatial, freq)?;
        let weights = self.channel.forward(g, &fused.feat);
        let s = spatial.masked_feat().mul(&weights);
        let f = freq.masked_feat().mul(&weights);
        let map = self.spatial.forward(g, &s, &f);
        let combined = fused.feat.add(&map.mul(&s.add(&f)));
        let mask = mask_union(&fused.mask, &decoder.mask);
        let out = self
            .reduce
            .forward(g, &Var::concat(&[combined, decoder.masked_feat()], 3))
            .mul_const(&mask);
        Ok(TokenGrid { feat: out, mask })
    }
}

/// Skip features of one level as seen by the decoder.
#[derive(Clone)]
pub struct LevelSkips {
    /// Time skip plus magnitude skip.
    pub spatial: TokenGrid,
    pub freq: TokenGrid,
}

impl LevelSkips {
    /// Combines the per-path skips; `mag` may be absent (Stage 1).
    pub fn new(time: &TokenGrid, freq: &TokenGrid, mag: Option<&TokenGrid>) -> LevelSkips {
        let spatial = match mag {
            Some(m) => TokenGrid {
                feat: time.masked_feat().add(&m.masked_feat()),
                mask: mask_union(&time.mask, &m.mask),
            },
            None => time.clone(),
        };
        LevelSkips {
            spatial,
            freq: freq.clone(),
        }
    }

    /// Zero features with an all-invalid mask, standing in for a path that
    /// is not active.
    pub fn empty_like(x: &TokenGrid) -> TokenGrid {
        let (b, h, w, c) = x.dims();
        TokenGrid {
            feat: Var::constant(Tensor::zeros(&[b, h, w, c])),
            mask: Tensor::zeros(&[b, h, w, 1]),
        }
    }
}

/// Decoder from the bottleneck back to the input grid.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub fusions: Vec<SkipFusion>,
    pub levels: Vec<Vec<SwinBlock>>,
    pub expands: Vec<PatchExpand>,
    pub final_expand: PatchExpand,
    pub head: Linear,
}

impl Decoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Decoder {
        let dims = cfg.level_dims();
        let mut levels = Vec::new();
        for l in 0..3 {
            levels.push(
                (0..cfg.depths[l])
                    .map(|i| {
                        SwinBlock::new(init, &format!("decoder.level{l}.{i}"), dims[l], cfg.heads[l], cfg.window, i % 2 == 1)
                    })
                    .collect(),
            );
        }
        Decoder {
            fusions: (0..3)
                .map(|l| SkipFusion::new(init, &format!("decoder.fuse{l}"), dims[l]))
                .collect(),
            levels,
            // expands[l] goes from level l + 1 to level l
            expands: (0..2)
                .map(|l| PatchExpand::new(init, &format!("decoder.expand{l}"), dims[l + 1], dims[l], 2))
                .collect(),
            final_expand: PatchExpand::new(init, "decoder.expand_final", dims[0], dims[0], cfg.patch),
            head: Linear::new(init, "decoder.head", dims[0], 1, true),
        }
    }

    /// Reconstruction `[b, s, s]` from the (conditioned) bottleneck and the
    /// skips of levels 0-2. The decoder state is treated as fully valid so
    /// masked regions are filled in.
    pub fn forward(&self, g: &Graph, bottleneck: &Var, skips: &[LevelSkips]) -> Result<Var> {
        if skips.len() != 3 {
            return Err(Error::Shape(format!("expected 3 skip levels, got {}", skips.len())));
        }
        let s = bottleneck.shape();
        let mut state = TokenGrid {
            feat: bottleneck.clone(),
            mask: TokenGrid::full_mask(s[0], s[1], s[2]),
        };
        for l in (0..3).rev() {
            if l < 2 {
                state = self.expands[l].forward(g, &state);
            }
            state = self.fusions[l].forward(g, &skips[l].spatial, &skips[l].freq, &state)?;
            state = run_blocks(g, &self.levels[l], state)?;
        }
        let up = self.final_expand.forward(g, &state);
        let (b, h, w, _) = up.dims();
        Ok(self.head.forward(g, &up.feat).reshape(&[b, h, w]))
    }
}

/// Classifier over the two fused latents.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> ClassifierHead {
        let d = cfg.bottleneck_dim();
        ClassifierHead {
            hidden: Linear::new(init, "head.hidden", 2 * d, d, true),
            out: Linear::new(init, "head.out", d, cfg.num_classes, true),
            dropout: cfg.dropout,
        }
    }

    /// Logits `[b, classes]`.
    pub fn forward(&self, g: &Graph, a: &TokenGrid, b: &TokenGrid) -> Var {
        let pooled = Var::concat(&[masked_mean_pool(a), masked_mean_pool(b)], 1);
        let h = self.hidden.forward(g, &pooled).gelu();
        self.out.forward(g, &g.dropout(&h, self.dropout))
    }
}

#[cfg(test)]
mod tests;
