//! The full network: three path encoders, two cross-modality fusions, the
//! VAE bottleneck heads, the shared decoder and the classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Init, ParamStore, Tensor, Var};
use crate::dataio::zscore_rows;
use crate::decoder::{ClassifierHead, Decoder, LevelSkips};
use crate::encoder::{masked_mean_pool, path_input_grid, EncoderOutput, ModelConfig, PathEncoder, PathKind, SgCma};
use crate::error::Result;
use crate::nn::{Linear, TokenGrid};

/// Per-token linear heads for the latent mean and log-variance.
#[derive(Debug, Clone)]
pub struct VaeHeads {
    pub mu: Linear,
    pub logvar: Linear,
}

/// Output of the VAE bottleneck, all `[b, h, w, d]`.
pub struct VaeOutput {
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
}

impl VaeHeads {
    pub fn new(init: &mut Init, dim: usize) -> VaeHeads {
        VaeHeads {
            mu: Linear::new(init, "vae.mu", dim, dim, true),
            logvar: Linear::new(init, "vae.logvar", dim, dim, true),
        }
    }

    /// `z = mu + exp(logvar / 2) * eps` while training, `z = mu` otherwise.
    pub fn forward(&self, g: &Graph, x: &Var) -> VaeOutput {
        let mu = self.mu.forward(g, x);
        let logvar = self.logvar.forward(g, x);
        let z = if g.is_train() {
            let eps = g.randn(mu.shape());
            mu.add(&logvar.scale(0.5).exp().mul_const(&eps))
        } else {
            mu.clone()
        };
        VaeOutput { z, mu, logvar }
    }
}

/// A batch of `side x side` windows prepared for the network.
#[derive(Debug, Clone)]
pub struct Batch {
    pub side: usize,
    /// Amplitude-normalised windows, unmasked.
    pub windows: Vec<Vec<f64>>,
    /// Validity masks (1 = observed).
    pub masks: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Identity of the source window; masked variants share it.
    pub sample_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Reconstruction target: each unmasked window Z-scored per sensor,
    /// `[b, side, side]`.
    pub fn target(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.side * self.side);
        for w in &self.windows {
            let mut z = w.clone();
            zscore_rows(&mut z, self.side, None);
            data.extend(z);
        }
        Tensor::new(vec![self.len(), self.side, self.side], data)
    }

    /// Masks as a `[b, side, side]` tensor.
    pub fn mask_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.side, self.side], self.masks.concat())
    }

    pub fn input(&self, kind: PathKind) -> TokenGrid {
        path_input_grid(&self.windows, &self.masks, self.side, kind)
    }
}

/// Reconstruction pass output.
pub struct ReconOutput {
    pub recon: Var,
    pub vae: VaeOutput,
    /// Pooled bottleneck latents per path (Stage 2 only), each `[b, d]`.
    pub pooled: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MastModel {
    pub cfg: ModelConfig,
    pub time: PathEncoder,
    pub freq: PathEncoder,
    pub mag: PathEncoder,
    pub cma_freq: SgCma,
    pub cma_mag: SgCma,
    pub vae: VaeHeads,
    pub decoder: Decoder,
    pub head: ClassifierHead,
}

impl MastModel {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(MastModel, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let d = cfg.bottleneck_dim();
        let model = MastModel {
            cfg: cfg.clone(),
            time: PathEncoder::new(&mut init, cfg, PathKind::Time),
            freq: PathEncoder::new(&mut init, cfg, PathKind::Frequency),
            mag: PathEncoder::new(&mut init, cfg, PathKind::Magnitude),
            cma_freq: SgCma::new(&mut init, "cma_freq", d, cfg.heads[3]),
            cma_mag: SgCma::new(&mut init, "cma_mag", d, cfg.heads[3]),
            vae: VaeHeads::new(&mut init, d),
            decoder: Decoder::new(&mut init, cfg),
            head: ClassifierHead::new(&mut init, cfg),
        };
        Ok((model, store))
    }

    pub fn encoder(&self, kind: PathKind) -> &PathEncoder {
        match kind {
            PathKind::Time => &self.time,
            PathKind::Frequency => &self.freq,
            PathKind::Magnitude => &self.mag,
        }
    }

    pub fn encode(&self, g: &Graph, batch: &Batch, kind: PathKind) -> Result<EncoderOutput> {
        self.encoder(kind).forward(g, &batch.input(kind))
    }

    /// The two fused latents: time attending to frequency, and time
    /// attending to magnitude.
    pub fn fused_latents(&self, g: &Graph, outs: &[EncoderOutput; 3]) -> Result<(TokenGrid, TokenGrid)> {
        let [t, f, m] = outs;
        Ok((
            self.cma_freq.forward(g, &t.bottleneck, &f.bottleneck)?,
            self.cma_mag.forward(g, &t.bottleneck, &m.bottleneck)?,
        ))
    }

    fn encode_all(&self, g: &Graph, batch: &Batch) -> Result<[EncoderOutput; 3]> {
        Ok([
            self.encode(g, batch, PathKind::Time)?,
            self.encode(g, batch, PathKind::Frequency)?,
            self.encode(g, batch, PathKind::Magnitude)?,
        ])
    }

    /// Stage 1: the time path alone feeds the VAE and the decoder; the
    /// other skip inputs are empty.
    pub fn reconstruct_time_only(&self, g: &Graph, batch: &Batch) -> Result<ReconOutput> {
        let t = self.encode(g, batch, PathKind::Time)?;
        let skips: Vec<LevelSkips> = t
            .skips
            .iter()
            .map(|s| LevelSkips::new(s, &LevelSkips::empty_like(s), None))
            .collect();
        let vae = self.vae.forward(g, &t.bottleneck.masked_feat());
        let recon = self.decoder.forward(g, &vae.z, &skips)?;
        Ok(ReconOutput {
            recon,
            vae,
            pooled: Vec::new(),
        })
    }

    /// Stage 2: all paths; the VAE sees the mean of the two fused latents
    /// and the decoder input is conditioned on `aggregate(pooled)`.
    pub fn reconstruct_all_paths(
        &self,
        g: &Graph,
        batch: &Batch,
        aggregate: impl Fn(&[Var]) -> Var,
    ) -> Result<ReconOutput> {
        let outs = self.encode_all(g, batch)?;
        let (a, b) = self.fused_latents(g, &outs)?;
        let joint = a.masked_feat().add(&b.masked_feat()).scale(0.5);
        let vae = self.vae.forward(g, &joint);
        let pooled: Vec<Var> = outs.iter().map(|o| masked_mean_pool(&o.bottleneck)).collect();
        let agg = aggregate(&pooled);
        let (bs, d) = (agg.shape()[0], agg.shape()[1]);
        let cond = vae.z.add(&agg.reshape(&[bs, 1, 1, d]));
        let [t, f, m] = &outs;
        let skips: Vec<LevelSkips> = (0..3)
            .map(|l| LevelSkips::new(&t.skips[l], &f.skips[l], Some(&m.skips[l])))
            .collect();
        let recon = self.decoder.forward(g, &cond, &skips)?;
        Ok(ReconOutput { recon, vae, pooled })
    }

    /// Class logits `[b, classes]`.
    pub fn classify(&self, g: &Graph, batch: &Batch) -> Result<Var> {
        let outs = self.encode_all(g, batch)?;
        let (a, b) = self.fused_latents(g, &outs)?;
        Ok(self.head.forward(g, &a, &b))
    }
}
