//! Evidential segmentation losses on the autodiff tape.
//!
//! Everything works on class-first `[C, N]` tensors where `N` counts pixels
//! (a single sample is `N = 1`). Per-pixel losses are averaged over `N`.
//! From Dirichlet parameters `α`:
//!
//! ```text
//! S = Σ_c α_c     u = C / S     b = (α - 1) / S     p = b + u
//! ```
//!
//! * adjusted cross-entropy: `Σ_c y_c (ψ(S) - ψ(α_c))`
//! * KL term: `KL(Dir(α̃) || Dir(1))` with `α̃ = y + (1 - y) α`
//! * soft Dice over the spatial domain, per class, summed over classes
//! * uncertainty-perceptual: `-u Σ_c y_c ln p_c`
//! * total: `(1 - β) ace + β up + kl + dice` with an annealed `β`

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::math;
use crate::special::log_gamma_unchecked;
use crate::tensor::{Tensor, TensorError};

/// Dice smoothing constant.
pub const DEFAULT_SMOOTH: f64 = 1e-5;
/// Floor applied to probabilities inside the logarithm of the UP loss.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
pub const DEFAULT_BETA0: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("label field must be a [C, N] tensor, got shape {0:?}")]
    LabelShape(Vec<usize>),
    #[error("label column {0} is not one-hot")]
    NotOneHot(usize),
    #[error("label class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("annealing schedule: {0}")]
    Schedule(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One-hot labels, `[C, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField(Tensor);

impl LabelField {
    pub fn new(one_hot: Tensor) -> Result<Self, LossError> {
        let [c, n] = *one_hot.shape() else {
            return Err(LossError::LabelShape(one_hot.shape().to_vec()));
        };
        for i in 0..n {
            let mut ones = 0;
            for k in 0..c {
                match one_hot.data()[k * n + i] {
                    v if v == 1.0 => ones += 1,
                    v if v == 0.0 => {}
                    _ => return Err(LossError::NotOneHot(i)),
                }
            }
            if ones != 1 {
                return Err(LossError::NotOneHot(i));
            }
        }
        Ok(Self(one_hot))
    }

    /// One-hot encoding of per-pixel class indices.
    pub fn from_classes(classes: usize, labels: &[usize]) -> Result<Self, LossError> {
        let n = labels.len();
        let mut data = alloc::vec![0.0; classes * n];
        for (i, &k) in labels.iter().enumerate() {
            if k >= classes {
                return Err(LossError::ClassOutOfRange { class: k, classes });
            }
            data[k * n + i] = 1.0;
        }
        Ok(Self(Tensor::new(alloc::vec![classes, n], data)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.0.shape()[1]
    }
}

/// `β_t = β0 · exp(-(ln β0 / T) · t)`, rising from `β0` at `t = 0` to 1 at `t = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    beta0: f64,
    total_epochs: u32,
    epoch: u32,
}

impl AnnealSchedule {
    pub fn new(beta0: f64, total_epochs: u32, epoch: u32) -> Result<Self, LossError> {
        if !(beta0 > 0.0 && beta0 < 1.0) {
            return Err(LossError::Schedule("beta0 must lie in (0, 1)"));
        }
        if epoch > total_epochs {
            return Err(LossError::Schedule("epoch exceeds total epochs"));
        }
        Ok(Self {
            beta0,
            total_epochs,
            epoch,
        })
    }

    pub fn at_epoch(self, epoch: u32) -> Result<Self, LossError> {
        Self::new(self.beta0, self.total_epochs, epoch)
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn total_epochs(&self) -> u32 {
        self.total_epochs
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// Current weight of the UP term. A zero-length schedule is already finished.
    pub fn beta(&self) -> f64 {
        if self.total_epochs == 0 || self.epoch == self.total_epochs {
            return 1.0;
        }
        if self.epoch == 0 {
            return self.beta0;
        }
        let t = self.epoch as f64 / self.total_epochs as f64;
        self.beta0 * math::exp(-math::ln(self.beta0) * t)
    }
}

/// `S`, `u`, `b + u` derived from `α` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct SegVars<'t> {
    pub alpha: Var<'t>,
    /// `[1, N]`
    pub strength: Var<'t>,
    /// `[1, N]`
    pub uncertainty: Var<'t>,
    /// `[C, N]`, projected probability `b + u`
    pub probability: Var<'t>,
}

impl<'t> SegVars<'t> {
    pub fn from_alpha(alpha: Var<'t>) -> Self {
        let classes = alpha.shape()[0] as f64;
        let tape = alpha.tape();
        let strength = alpha.sum_axis(0);
        let uncertainty = tape.constant(Tensor::scalar(classes)) / strength;
        let probability = alpha.offset(classes - 1.0) / strength;
        Self {
            alpha,
            strength,
            uncertainty,
            probability,
        }
    }
}

/// A segmentation result: Dirichlet parameters with the derived probability
/// and uncertainty, all over `N` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegResult {
    /// `[C, N]`
    pub alpha: Tensor,
    /// `[C, N]`
    pub probability: Tensor,
    /// `[1, N]`
    pub uncertainty: Tensor,
}

impl SegResult {
    pub fn from_alpha(alpha: Tensor) -> Self {
        let tape = Tape::new();
        let v = SegVars::from_alpha(tape.leaf(alpha));
        Self {
            alpha: v.alpha.value(),
            probability: v.probability.value(),
            uncertainty: v.uncertainty.value(),
        }
    }
}

fn labels<'t>(tape: &'t Tape, y: &LabelField) -> Var<'t> {
    tape.constant(y.tensor().clone())
}

fn pixel_mean(v: Var<'_>) -> Var<'_> {
    v.mean()
}

/// Adjusted cross-entropy, mean over pixels.
pub fn ace<'t>(alpha: Var<'t>, y: &LabelField) -> Var<'t> {
    let tape = alpha.tape();
    let y = labels(tape, y);
    let s = alpha.sum_axis(0);
    let per_class = y * (s.digamma() - alpha.digamma());
    pixel_mean(per_class.sum_axis(0))
}

/// `KL(Dir(α̃) || Dir(1, …, 1))`, mean over pixels.
pub fn kl<'t>(alpha: Var<'t>, y: &LabelField) -> Var<'t> {
    let tape = alpha.tape();
    let classes = y.classes() as f64;
    let yv = labels(tape, y);
    let not_y = tape.constant(y.tensor().map(|v| 1.0 - v));
    let adj = yv + not_y * alpha;
    let s = adj.sum_axis(0);
    let per_pixel = s.log_gamma() - adj.log_gamma().sum_axis(0)
        + ((adj.offset(-1.0)) * (adj.digamma() - s.digamma())).sum_axis(0);
    pixel_mean(per_pixel).offset(-log_gamma_unchecked(classes))
}

/// Soft Dice summed over classes, spatial sums inside each ratio.
/// `y` is a `[C, N]` target of the same shape as `p`; it need not be one-hot.
pub fn dice<'t>(p: Var<'t>, y: &Tensor, smooth: f64) -> Var<'t> {
    assert_eq!(p.shape(), y.shape(), "contract violation: dice shapes differ");
    let tape = p.tape();
    let yv = tape.constant(y.clone());
    let inter = (yv * p).sum_axis(1).scale(2.0).offset(smooth);
    let denom = (yv.sum_axis(1) + p.sum_axis(1)).offset(smooth);
    let classes = y.shape()[0] as f64;
    (inter / denom).sum().scale(-1.0).offset(classes)
}

/// Uncertainty-weighted cross-entropy, mean over pixels. Probabilities are
/// floored at [`PROBABILITY_FLOOR`] inside the logarithm.
pub fn up<'t>(p: Var<'t>, u: Var<'t>, y: &LabelField) -> Var<'t> {
    let tape = p.tape();
    let yv = labels(tape, y);
    let ce = (yv * p.clamp_min(PROBABILITY_FLOOR).ln()).sum_axis(0);
    pixel_mean(u * ce).scale(-1.0)
}

/// Number of labelled entries whose probability was floored by [`up`].
pub fn floored_count(p: &Tensor, y: &LabelField) -> usize {
    p.data()
        .iter()
        .zip(y.tensor().data())
        .filter(|(&pv, &yv)| yv == 1.0 && pv < PROBABILITY_FLOOR)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub smooth: f64,
    /// Treat `u` in the UP term as a constant weight.
    pub detach_uncertainty: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth: DEFAULT_SMOOTH,
            detach_uncertainty: false,
        }
    }
}

/// The combined loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct SegLoss<'t> {
    pub total: Var<'t>,
    pub beta: f64,
    pub ace: f64,
    pub kl: f64,
    pub dice: f64,
    pub up: f64,
    pub floored: usize,
}

/// `(1 - β) ace + β up + kl + dice` for the result parameterised by `alpha`.
pub fn seg<'t>(alpha: Var<'t>, y: &LabelField, schedule: &AnnealSchedule, cfg: &LossConfig) -> SegLoss<'t> {
    let v = SegVars::from_alpha(alpha);
    let beta = schedule.beta();
    let u = if cfg.detach_uncertainty {
        v.uncertainty.detach()
    } else {
        v.uncertainty
    };
    let l_ace = ace(alpha, y);
    let l_kl = kl(alpha, y);
    let l_dice = dice(v.probability, y.tensor(), cfg.smooth);
    let l_up = up(v.probability, u, y);
    let total = l_ace.scale(1.0 - beta) + l_up.scale(beta) + l_kl + l_dice;
    SegLoss {
        total,
        beta,
        ace: l_ace.item(),
        kl: l_kl.item(),
        dice: l_dice.item(),
        up: l_up.item(),
        floored: v.probability.with_value(|p| floored_count(p, y)),
    }
}

/// The individual loss terms and their combination, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ace,
    Kl,
    Dice,
    Up,
    Seg,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Ace, LossKind::Kl, LossKind::Dice, LossKind::Up, LossKind::Seg];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ace => "ace",
            LossKind::Kl => "kl",
            LossKind::Dice => "dice",
            LossKind::Up => "up",
            LossKind::Seg => "seg",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// The loss of `α = e + 1` for raw evidence `e`.
    pub fn of_evidence<'t>(self, e: Var<'t>, y: &LabelField, schedule: &AnnealSchedule, cfg: &LossConfig) -> Var<'t> {
        let alpha = e.offset(1.0);
        let v = SegVars::from_alpha(alpha);
        match self {
            LossKind::Ace => ace(alpha, y),
            LossKind::Kl => kl(alpha, y),
            LossKind::Dice => dice(v.probability, y.tensor(), cfg.smooth),
            LossKind::Up => up(v.probability, v.uncertainty, y),
            LossKind::Seg => seg(alpha, y, schedule, cfg).total,
        }
    }
}

/// Evaluates a loss closure on a fresh tape and returns its value.
pub fn evaluate<F>(alpha: &Tensor, f: F) -> f64
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    f(tape.leaf(alpha.clone())).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use alloc::vec;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn first_class() -> LabelField {
        LabelField::from_classes(2, &[0]).unwrap()
    }

    #[test]
    fn ace_examples() {
        let y = first_class();
        assert!((evaluate(&col(&[1.0, 1.0]), |a| ace(a, &y)) - 1.0).abs() < 1e-12);
        let v = evaluate(&col(&[3.0, 2.0]), |a| ace(a, &y));
        assert!((v - (1.0 / 3.0 + 1.0 / 4.0)).abs() < 1e-12);
        assert!(evaluate(&col(&[1e6, 1.0]), |a| ace(a, &y)) < 1e-5);
    }

    #[test]
    fn kl_examples() {
        let y = first_class();
        for a in [1.0, 2.5, 40.0] {
            assert!(evaluate(&col(&[a, 1.0]), |v| kl(v, &y)).abs() < 1e-12);
        }
        let v = evaluate(&col(&[2.0, 3.0]), |a| kl(a, &y));
        assert!((v - (math::ln(3.0) - 2.0 / 3.0)).abs() < 1e-12, "{v}");
        let y1 = LabelField::from_classes(2, &[1]).unwrap();
        assert!(evaluate(&col(&[1.0, 5.0]), |a| kl(a, &y1)).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let y = Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let v = dice(tape.leaf(p), &y, DEFAULT_SMOOTH).item();
        let expected = 1.0 - (2.0 + 1e-5) / (3.0 + 1e-5);
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.333_332_222_225_926).abs() < 1e-12, "{v}");

        let y = LabelField::from_classes(2, &[0, 1, 1, 0]).unwrap();
        let tape = Tape::new();
        let exact = dice(tape.leaf(y.tensor().clone()), y.tensor(), DEFAULT_SMOOTH).item();
        assert!(exact.abs() <= 1e-4);
        let miss = dice(tape.leaf(y.tensor().map(|v| 1.0 - v)), y.tensor(), DEFAULT_SMOOTH).item();
        assert!((miss - 2.0).abs() < 1e-4);
    }

    #[test]
    fn up_examples() {
        let y = first_class();
        let tape = Tape::new();
        let p = tape.leaf(col(&[0.5, 0.5]));
        let zero = tape.leaf(Tensor::zeros(&[1, 1]));
        assert_eq!(up(p, zero, &y).item(), 0.0);
        let one = tape.leaf(Tensor::full(&[1, 1], 1.0));
        assert!((up(p, one, &y).item() - core::f64::consts::LN_2).abs() < 1e-15);
        let p1 = tape.leaf(col(&[1.0, 0.0]));
        let half = tape.leaf(Tensor::full(&[1, 1], 0.5));
        assert_eq!(up(p1, half, &y).item(), 0.0);
        let p0 = col(&[0.0, 1.0]);
        assert_eq!(floored_count(&p0, &y), 1);
        assert!(up(tape.leaf(p0), one, &y).item().is_finite());
    }

    #[test]
    fn anneal_examples() {
        let s = AnnealSchedule::new(0.01, 100, 0).unwrap();
        assert_eq!(s.beta(), 0.01);
        assert_eq!(s.at_epoch(100).unwrap().beta(), 1.0);
        assert!((s.at_epoch(50).unwrap().beta() - 0.1).abs() < 1e-12);
        assert_eq!(AnnealSchedule::new(0.3, 0, 0).unwrap().beta(), 1.0);
        assert!(AnnealSchedule::new(1.0, 10, 0).is_err());
        assert!(AnnealSchedule::new(0.5, 10, 11).is_err());
    }

    #[test]
    fn seg_composes_terms() {
        let y = first_class();
        let alpha = col(&[3.0, 2.0]);
        // β = 0.5 at the midpoint of a schedule starting at 0.25
        let sched = AnnealSchedule::new(0.25, 2, 1).unwrap();
        assert!((sched.beta() - 0.5).abs() < 1e-15);
        let tape = Tape::new();
        let a = tape.leaf(alpha.clone());
        let l = seg(a, &y, &sched, &LossConfig::default());
        let ace_v = 1.0 / 3.0 + 1.0 / 4.0;
        // α̃ = (1, 2): ln Γ(3) - ln Γ(2) - ln Γ(1) - ln Γ(2) + (ψ(2) - ψ(3)) = ln 2 - 1/2
        let kl_v = math::ln(2.0) - 0.5;
        // p = (α - 1 + C) / S = (4/5, 3/5), u = 2/5
        let up_v = -0.4 * math::ln(0.8);
        let dice_v = (1.0 - (1.6 + 1e-5) / (1.8 + 1e-5)) + (1.0 - 1e-5 / (0.6 + 1e-5));
        assert!((l.ace - ace_v).abs() < 1e-12);
        assert!((l.kl - kl_v).abs() < 1e-12);
        assert!((l.up - up_v).abs() < 1e-12);
        assert!((l.dice - dice_v).abs() < 1e-12);
        let expected = 0.5 * ace_v + 0.5 * up_v + kl_v + dice_v;
        assert!((l.total.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn seg_endpoints() {
        let y = LabelField::from_classes(2, &[0, 1, 1]).unwrap();
        let alpha = Tensor::new(vec![2, 3], vec![4.0, 1.5, 2.0, 1.2, 3.0, 7.0]).unwrap();
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let a = tape.leaf(alpha);
        let end = seg(a, &y, &AnnealSchedule::new(0.01, 10, 10).unwrap(), &cfg);
        assert!((end.total.item() - (end.up + end.kl + end.dice)).abs() < 1e-12);
        let start = seg(a, &y, &AnnealSchedule::new(1e-300, 10, 0).unwrap(), &cfg);
        assert!((start.total.item() - (start.ace + start.kl + start.dice)).abs() < 1e-12);
    }

    #[test]
    fn seg_gradient_matches_differences() {
        let y = LabelField::from_classes(3, &[0, 2, 1, 1]).unwrap();
        let e = Tensor::from_fn(&[3, 4], |i| 0.2 + 0.37 * ((i * 7) % 5) as f64);
        let sched = AnnealSchedule::new(0.01, 10, 4).unwrap();
        let r = grad_check(
            |e| seg(e.offset(1.0), &y, &sched, &LossConfig::default()).total,
            &e,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn label_validation() {
        assert!(LabelField::from_classes(2, &[2]).is_err());
        let bad = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(LabelField::new(bad), Err(LossError::NotOneHot(0)));
        assert!(LabelField::new(Tensor::zeros(&[4])).is_err());
    }
}
