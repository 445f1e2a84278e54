//! Loss combinators for cross-modal feature learning and the tumor guided
//! channel attention block.
//!
//! Discriminators are not modelled; their outputs are supplied as
//! [`DiscriminatorScore`]s. Expectations are means over the supplied entries.

use alloc::vec::Vec;

use crate::math;
use crate::rng::{self, SeededRng};
use crate::tensor::{sigmoid, Tensor};

pub const SCORE_FLOOR: f64 = 1e-12;
/// Weight of the L1 reconstruction term.
pub const DEFAULT_LAMBDA_L1: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CflError {
    #[error("discriminator score is NaN")]
    NanScore,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected a [C, H, W] feature map, got {0:?}")]
    NotFeatureMap(Vec<usize>),
    #[error("weights expect {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// A discriminator's probability that its input pair is real, clamped to
/// `[SCORE_FLOOR, 1 - SCORE_FLOOR]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DiscriminatorScore(f64);

impl DiscriminatorScore {
    pub fn new(d: f64) -> Result<Self, CflError> {
        if d.is_nan() {
            return Err(CflError::NanScore);
        }
        Ok(Self(d.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `-ln d_real - ln(1 - d_fake)`.
pub fn adv_loss(d_real: DiscriminatorScore, d_fake: DiscriminatorScore) -> f64 {
    -math::ln(d_real.0) - math::ln_1p(-d_fake.0)
}

/// [`adv_loss`] with both expectations taken as batch means.
pub fn adv_loss_batch(real: &[DiscriminatorScore], fake: &[DiscriminatorScore]) -> Result<f64, CflError> {
    if real.is_empty() || fake.is_empty() {
        return Err(CflError::EmptyBatch);
    }
    let r = real.iter().map(|d| -math::ln(d.0)).sum::<f64>() / real.len() as f64;
    let f = fake.iter().map(|d| -math::ln_1p(-d.0)).sum::<f64>() / fake.len() as f64;
    Ok(r + f)
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64, CflError> {
    if a.shape() != b.shape() {
        return Err(CflError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    if a.numel() == 0 {
        return Err(CflError::EmptyBatch);
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.numel() as f64)
}

/// Mean absolute error of the modality pair plus that of the mask pair.
pub fn l1_pair(a: &Tensor, a_hat: &Tensor, y: &Tensor, y_hat: &Tensor) -> Result<f64, CflError> {
    Ok(mean_abs_diff(a, a_hat)? + mean_abs_diff(y, y_hat)?)
}

/// Loss components of one translation branch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BranchParts {
    /// adversarial term of the modality discriminator
    pub adv_modality: f64,
    /// adversarial term of the tumor-mask discriminator
    pub adv_tumor: f64,
    pub l1: f64,
}

impl BranchParts {
    pub fn weighted(&self, lambda_l1: f64) -> f64 {
        self.adv_modality + self.adv_tumor + lambda_l1 * self.l1
    }
}

/// Sum of both branches' `adv_m + adv_t + λ1·L1`.
pub fn cfl_total(ct: &BranchParts, pet: &BranchParts, lambda_l1: f64) -> f64 {
    ct.weighted(lambda_l1) + pet.weighted(lambda_l1)
}

/// Channel gate MLP: GAP over the tumor features, a ReLU hidden layer of
/// width `ceil(Ct / 2)`, then a sigmoid per modality channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TGAWeights {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TGAWeights {
    pub fn hidden_width(tumor_channels: usize) -> usize {
        tumor_channels.div_ceil(2)
    }

    /// `w1: [hidden, Ct]`, `b1: [hidden]`, `w2: [Cm, hidden]`, `b2: [Cm]`.
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self, CflError> {
        let [hidden, _] = *w1.shape() else {
            return Err(CflError::ShapeMismatch(w1.shape().to_vec(), alloc::vec![0, 0]));
        };
        let [cm, h2] = *w2.shape() else {
            return Err(CflError::ShapeMismatch(w2.shape().to_vec(), alloc::vec![0, hidden]));
        };
        if h2 != hidden {
            return Err(CflError::ChannelMismatch { expected: hidden, got: h2 });
        }
        if b1.shape() != [hidden] {
            return Err(CflError::ShapeMismatch(b1.shape().to_vec(), alloc::vec![hidden]));
        }
        if b2.shape() != [cm] {
            return Err(CflError::ShapeMismatch(b2.shape().to_vec(), alloc::vec![cm]));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Uniform initialisation in `±1/sqrt(fan_in)`.
    pub fn seeded(tumor_channels: usize, modality_channels: usize, seed: u64) -> Self {
        let hidden = Self::hidden_width(tumor_channels);
        let mut rng: SeededRng = rng::seeded(seed);
        let k1 = 1.0 / math::sqrt(tumor_channels as f64);
        let k2 = 1.0 / math::sqrt(hidden as f64);
        Self {
            w1: rng::uniform_tensor(&mut rng, &[hidden, tumor_channels], k1),
            b1: rng::uniform_tensor(&mut rng, &[hidden], k1),
            w2: rng::uniform_tensor(&mut rng, &[modality_channels, hidden], k2),
            b2: rng::uniform_tensor(&mut rng, &[modality_channels], k2),
        }
    }

    pub fn tumor_channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn modality_channels(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        self.b2.data_mut()
    }

    /// Channel gates in `[0, 1]` for tumor features `[Ct, H, W]`.
    pub fn gates(&self, f_t: &Tensor) -> Result<Vec<f64>, CflError> {
        let [ct, h, w] = *f_t.shape() else {
            return Err(CflError::NotFeatureMap(f_t.shape().to_vec()));
        };
        if ct != self.tumor_channels() {
            return Err(CflError::ChannelMismatch { expected: self.tumor_channels(), got: ct });
        }
        let plane = h * w;
        let pooled: Vec<f64> = f_t
            .data()
            .chunks(plane.max(1))
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let hidden = self.w1.shape()[0];
        let mid: Vec<f64> = (0..hidden)
            .map(|j| {
                let row = &self.w1.data()[j * ct..(j + 1) * ct];
                let z = self.b1.data()[j] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        Ok((0..self.modality_channels())
            .map(|c| {
                let row = &self.w2.data()[c * hidden..(c + 1) * hidden];
                sigmoid(self.b2.data()[c] + row.iter().zip(&mid).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect())
    }
}

/// `out[c] = gate(c) · F_m[c]` with gates computed from the tumor features.
pub fn tga_forward(f_t: &Tensor, f_m: &Tensor, w: &TGAWeights) -> Result<Tensor, CflError> {
    let [cm, h, wd] = *f_m.shape() else {
        return Err(CflError::NotFeatureMap(f_m.shape().to_vec()));
    };
    if cm != w.modality_channels() {
        return Err(CflError::ChannelMismatch { expected: w.modality_channels(), got: cm });
    }
    let gates = w.gates(f_t)?;
    let plane = h * wd;
    let mut out = f_m.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate().take(cm) {
        for v in chunk {
            *v *= gates[c];
        }
    }
    Ok(out)
}
