//! Per-path input transforms, the hierarchical path encoder and the
//! sigmoid-gated cross-modality attention that fuses two paths.

use std::rc::Rc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, Tensor, Var};
use crate::dataio::zscore_rows;
use crate::error::{Error, Result};
use crate::nn::{mask_union, Linear, MultiHeadAttention, PatchEmbed, PatchMerge, SwinBlock, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathKind {
    Time,
    Frequency,
    Magnitude,
}

impl PathKind {
    pub const ALL: [PathKind; 3] = [PathKind::Time, PathKind::Frequency, PathKind::Magnitude];

    pub fn prefix(self) -> &'static str {
        match self {
            PathKind::Time => "time",
            PathKind::Frequency => "freq",
            PathKind::Magnitude => "mag",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square input grid (sensors x time samples).
    pub input_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    /// Blocks at levels 0, 1, 2 and in the bottleneck.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            patch: 4,
            embed_dim: 48,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            window: 8,
            num_classes: 8,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and the synthetic pipeline.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            embed_dim: 16,
            depths: vec![1, 1, 1, 1],
            heads: vec![2, 4, 8, 8],
            ..ModelConfig::default()
        }
    }

    /// Channels at levels 0, 1, 2 (the bottleneck keeps level-2 width).
    pub fn level_dims(&self) -> [usize; 3] {
        let c = self.embed_dim;
        [c, 2 * c, 4 * c]
    }

    pub fn bottleneck_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Grid side at levels 0, 1, 2.
    pub fn level_sides(&self) -> [usize; 3] {
        let s = self.input_size / self.patch;
        [s, s / 2, s / 4]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.len() != 4 || self.heads.len() != 4 {
            return bad("depths and heads need four entries (three levels and the bottleneck)".into());
        }
        if self.patch == 0 || self.input_size % (4 * self.patch) != 0 {
            return bad(format!(
                "input size {} must be divisible by 4 x patch ({})",
                self.input_size, self.patch
            ));
        }
        if self.input_size > 128 || 128 % self.input_size != 0 {
            return bad(format!("input size {} must divide 128", self.input_size));
        }
        let dims = self.level_dims();
        for (i, &h) in self.heads.iter().enumerate() {
            let d = dims[i.min(2)];
            if h == 0 || d % h != 0 {
                return bad(format!("{d} channels at level {i} cannot split into {h} heads"));
            }
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        for side in self.level_sides() {
            let w = self.window.min(side);
            if side % w != 0 {
                return bad(format!("grid side {side} is not divisible by window {}", self.window));
            }
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Path-specific transform of a `rows x cols` window, before Z-scoring.
/// Masked cells (mask 0) are zero-filled first.
pub fn transform_raw(data: &[f64], cols: usize, kind: PathKind) -> Vec<f64> {
    match kind {
        PathKind::Time => data.to_vec(),
        PathKind::Magnitude => data.iter().map(|v| v.abs()).collect(),
        PathKind::Frequency => {
            let fft = FftPlanner::new().plan_fft_forward(cols);
            let mut out = Vec::with_capacity(data.len());
            let mut buf = vec![Complex64::new(0.0, 0.0); cols];
            for row in data.chunks(cols) {
                for (b, &v) in buf.iter_mut().zip(row) {
                    *b = Complex64::new(v, 0.0);
                }
                fft.process(&mut buf);
                out.extend(buf.iter().map(|z| z.norm().ln_1p()));
            }
            out
        }
    }
}

/// Validity of the transformed cells. A frequency row is valid when at
/// least half of its time samples are.
pub fn transform_mask(mask: &[f64], cols: usize, kind: PathKind) -> Vec<f64> {
    match kind {
        PathKind::Time | PathKind::Magnitude => mask.to_vec(),
        PathKind::Frequency => mask
            .chunks(cols)
            .flat_map(|row| {
                let valid = row.iter().filter(|&&m| m > 0.5).count();
                let keep = if 2 * valid >= cols { 1.0 } else { 0.0 };
                std::iter::repeat_n(keep, cols)
            })
            .collect(),
    }
}

/// Masked input, path transform and per-sensor Z-score. Returns the path
/// input and its mask; invalid cells are zero.
pub fn path_transform(data: &[f64], mask: &[f64], cols: usize, kind: PathKind) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(data.len(), mask.len());
    let masked: Vec<f64> = data.iter().zip(mask).map(|(&v, &m)| if m > 0.5 { v } else { 0.0 }).collect();
    let mut out = transform_raw(&masked, cols, kind);
    let path_mask = transform_mask(mask, cols, kind);
    zscore_rows(&mut out, cols, Some(&path_mask));
    (out, path_mask)
}

/// Skip features at levels 0-2 plus the bottleneck.
#[derive(Clone)]
pub struct EncoderOutput {
    pub skips: Vec<TokenGrid>,
    pub bottleneck: TokenGrid,
}

/// One path of the encoder: patch embedding, three levels of window
/// attention blocks joined by two patch merges, and bottleneck blocks.
#[derive(Debug, Clone)]
pub struct PathEncoder {
    pub kind: PathKind,
    pub embed: PatchEmbed,
    pub levels: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerge>,
    pub bottleneck: Vec<SwinBlock>,
}

fn blocks(init: &mut Init, name: &str, depth: usize, dim: usize, heads: usize, window: usize) -> Vec<SwinBlock> {
    (0..depth)
        .map(|i| SwinBlock::new(init, &format!("{name}.{i}"), dim, heads, window, i % 2 == 1))
        .collect()
}

pub(crate) fn run_blocks(g: &Graph, blocks: &[SwinBlock], x: TokenGrid) -> Result<TokenGrid> {
    blocks.iter().try_fold(x, |acc, b| b.forward(g, &acc))
}

impl PathEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig, kind: PathKind) -> PathEncoder {
        let p = kind.prefix();
        let dims = cfg.level_dims();
        PathEncoder {
            kind,
            embed: PatchEmbed::new(init, &format!("{p}.embed"), cfg.patch, dims[0]),
            levels: (0..3)
                .map(|l| blocks(init, &format!("{p}.level{l}"), cfg.depths[l], dims[l], cfg.heads[l], cfg.window))
                .collect(),
            merges: (0..2)
                .map(|l| PatchMerge::new(init, &format!("{p}.merge{l}"), dims[l]))
                .collect(),
            bottleneck: blocks(
                init,
                &format!("{p}.bottleneck"),
                cfg.depths[3],
                cfg.bottleneck_dim(),
                cfg.heads[3],
                cfg.window,
            ),
        }
    }

    /// `x` is the transformed path input `[b, s, s, 1]` with its mask.
    pub fn forward(&self, g: &Graph, x: &TokenGrid) -> Result<EncoderOutput> {
        let mut h = self.embed.forward(g, x)?;
        let mut skips = Vec::with_capacity(3);
        for (l, level) in self.levels.iter().enumerate() {
            if l > 0 {
                h = self.merges[l - 1].forward(g, &h)?;
            }
            h = run_blocks(g, level, h)?;
            skips.push(h.clone());
        }
        let bottleneck = run_blocks(g, &self.bottleneck, h)?;
        Ok(EncoderOutput { skips, bottleneck })
    }
}

/// Builds the `[b, s, s, 1]` input grid of one path from a batch of
/// `s x s` windows and masks.
pub fn path_input_grid(windows: &[Vec<f64>], masks: &[Vec<f64>], side: usize, kind: PathKind) -> TokenGrid {
    let b = windows.len();
    let mut feat = Vec::with_capacity(b * side * side);
    let mut mask = Vec::with_capacity(b * side * side);
    for (w, m) in windows.iter().zip(masks) {
        let (f, pm) = path_transform(w, m, side, kind);
        feat.extend(f);
        mask.extend(pm);
    }
    TokenGrid {
        feat: Var::constant(Tensor::new(vec![b, side, side, 1], feat)),
        mask: Tensor::new(vec![b, side, side, 1], mask),
    }
}

/// Sigmoid-gated cross-modality attention: queries from one path attend to
/// another path's tokens; a per-token, per-channel gate blends the result
/// with the query features.
#[derive(Debug, Clone)]
pub struct SgCma {
    pub attn: MultiHeadAttention,
    pub gate: Linear,
}

impl SgCma {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> SgCma {
        SgCma {
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, heads),
            gate: Linear::new(init, &format!("{name}.gate"), 2 * dim, dim, true),
        }
    }

    /// Fused grid, attention weights `[b, heads, n, n]` and gate values.
    pub fn forward_detailed(&self, g: &Graph, q: &TokenGrid, kv: &TokenGrid) -> Result<(TokenGrid, Var, Var)> {
        let (b, h, w, c) = q.dims();
        if kv.dims() != (b, h, w, c) {
            return Err(Error::Shape(format!(
                "query grid {:?} and key grid {:?} differ",
                q.dims(),
                kv.dims()
            )));
        }
        let n = h * w;
        let heads = self.attn.heads;
        let qf = q.masked_feat().reshape(&[b, n, c]);
        let kf = kv.masked_feat().reshape(&[b, n, c]);
        let km = kv.mask.data();
        let mut allowed = Vec::with_capacity(b * heads * n * n);
        for bi in 0..b {
            let row: Vec<bool> = (0..n).map(|j| km[bi * n + j] > 0.5).collect();
            for _ in 0..heads * n {
                allowed.extend_from_slice(&row);
            }
        }
        let (attended, probs) = self.attn.forward(g, &qf, &kf, Some(Rc::new(allowed)));
        let gate = self.gate.forward(g, &Var::concat(&[qf.clone(), attended.clone()], 2)).sigmoid();
        let out = qf.add(&gate.mul(&attended.sub(&qf)));
        let mask = mask_union(&q.mask, &kv.mask);
        let out = out.reshape(&[b, h, w, c]).mul_const(&mask);
        Ok((TokenGrid { feat: out, mask }, probs, gate))
    }

    pub fn forward(&self, g: &Graph, q: &TokenGrid, kv: &TokenGrid) -> Result<TokenGrid> {
        Ok(self.forward_detailed(g, q, kv)?.0)
    }
}

/// Mean of the valid tokens of each sample: `[b, c]`. Samples without a
/// valid token pool to zero.
pub fn masked_mean_pool(x: &TokenGrid) -> Var {
    let (b, h, w, c) = x.dims();
    let m = x.mask.data();
    let weights: Vec<f64> = (0..b)
        .flat_map(|bi| {
            let row = &m[bi * h * w..(bi + 1) * h * w];
            let count = row.iter().sum::<f64>();
            row.iter().map(move |&v| if count > 0.0 { v / count } else { 0.0 })
        })
        .collect();
    x.feat
        .reshape(&[b, h * w, c])
        .mul_const(&Tensor::new(vec![b, h * w, 1], weights))
        .sum_axis(1)
        .reshape(&[b, c])
}
