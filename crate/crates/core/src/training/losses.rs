use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};

/// `0.5 * mean(mu^2 + exp(logvar) - logvar - 1)` over every element.
pub fn kl_divergence(mu: &Var, logvar: &Var) -> Var {
    mu.square()
        .add(&logvar.exp())
        .sub(logvar)
        .add_scalar(-1.0)
        .mean_all()
        .scale(0.5)
}

/// Mean squared error over masked cells (mask 0), plus `unmasked_weight`
/// times the mean squared error over observed cells.
pub fn masked_mse(recon: &Var, target: &Tensor, mask: &Tensor, unmasked_weight: f64) -> Var {
    assert_eq!(recon.shape(), target.shape());
    assert_eq!(mask.numel(), target.numel());
    let hidden = mask.data().iter().filter(|&&m| m < 0.5).count();
    let shown = mask.numel() - hidden;
    if hidden == 0 {
        log::warn!("reconstruction batch has no masked cells; masked error term is zero");
    }
    let weights: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| {
            if m < 0.5 {
                1.0 / hidden as f64
            } else if unmasked_weight > 0.0 {
                unmasked_weight / shown as f64
            } else {
                0.0
            }
        })
        .collect();
    recon
        .sub(&Var::constant(target.clone()))
        .square()
        .mul_const(&Tensor::new(target.shape().to_vec(), weights))
        .sum_all()
}

/// Terms of the reconstruction objective.
pub struct ReconLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

pub fn stage1_loss(
    recon: &Var,
    target: &Tensor,
    mask: &Tensor,
    mu: &Var,
    logvar: &Var,
    beta: f64,
    unmasked_weight: f64,
) -> ReconLoss {
    let r = masked_mse(recon, target, mask, unmasked_weight);
    let kl = kl_divergence(mu, logvar);
    ReconLoss {
        total: r.add(&kl.scale(beta)),
        recon: r,
        kl,
    }
}

/// Rows scaled to unit Euclidean norm.
fn l2_normalize(x: &Var) -> Var {
    let norm = x.square().sum_axis(1).add_scalar(1e-12).sqrt();
    x.div(&norm)
}

/// NT-Xent over per-path pooled latents.
///
/// `latents` holds one `[b, d]` tensor per path. Positives are pairs of
/// different paths of the same batch row; negatives of an anchor are all
/// latents whose `sample_ids` differ from the anchor's (so masked variants
/// of the same window are neither). The loss is averaged over all ordered
/// positive pairs.
pub fn contrastive_loss(latents: &[Var], sample_ids: &[usize], tau: f64) -> Result<Var> {
    let b = sample_ids.len();
    if b < 2 {
        return Err(Error::Config(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if latents.len() < 2 || latents.iter().any(|l| l.shape()[0] != b) {
        return Err(Error::Shape("need at least two [b, d] latent sets".into()));
    }
    let n = latents.len() * b;
    let z = l2_normalize(&Var::concat(latents, 0));
    let sim = z.matmul(&z.permute(&[1, 0])).scale(1.0 / tau);
    let mut positive = vec![0.0; n * n];
    let mut negative = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            if r != c && r % b == c % b {
                positive[r * n + c] = 1.0;
            }
            if sample_ids[r % b] != sample_ids[c % b] {
                negative[r * n + c] = 1.0;
            }
        }
    }
    let pairs: f64 = positive.iter().sum();
    let e = sim.exp();
    let neg_sum = e.mul_const(&Tensor::new(vec![n, n], negative)).sum_axis(1);
    Ok(e
        .add(&neg_sum)
        .ln()
        .sub(&sim)
        .mul_const(&Tensor::new(vec![n, n], positive))
        .sum_all()
        .scale(1.0 / pairs))
}

/// Similarity-weighted combination of per-path latents.
///
/// Each `[b, d]` latent is weighted by the softmax over paths of its
/// cosine similarity to the mean latent divided by `tau`. Returns the fused
/// `[b, d]` latent and the weights `[b, paths]`.
pub fn aggregate_latents(latents: &[Var], tau: f64) -> (Var, Var) {
    let k = latents.len();
    let (b, d) = (latents[0].shape()[0], latents[0].shape()[1]);
    let parts: Vec<Var> = latents.iter().map(|l| l.reshape(&[b, 1, d])).collect();
    let stack = Var::concat(&parts, 1);
    let mean = stack.mean_axis(1);
    let dot = stack.mul(&mean).sum_axis(2);
    let norm = |x: &Var| x.square().sum_axis(2).add_scalar(1e-12).sqrt();
    let cos = dot.div(&norm(&stack).mul(&norm(&mean)));
    let weights = cos.scale(1.0 / tau).reshape(&[b, k]).softmax_last(None);
    let fused = stack
        .mul(&weights.reshape(&[b, k, 1]))
        .sum_axis(1)
        .reshape(&[b, d]);
    (fused, weights)
}
