//! A small per-pixel evidential segmenter with decision-level fusion.
//!
//! Each pixel is described by a fixed bank of local image features. Three
//! heads (CT, PET and a fused branch F) map features to class evidence with a
//! two-layer perceptron and a softplus output. F sees both modalities'
//! features, each scaled by `1 + u` of that modality's own head. The three
//! opinions are combined pixelwise with Dempster's rule. Training minimises
//! the evidential segmentation loss of all three heads plus that of the
//! combined result.
//!
//! Class 0 is background and class 1 is tumor.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::fusion::{fuse_maps, MapFusion, OpinionVars, DEFAULT_EPS_CONFLICT};
use crate::losses::{seg, AnnealSchedule, LabelField, LossConfig, LossError, SegResult, SegVars};
use crate::math;
use crate::metrics::{confusion, overlap_metrics, BinaryMask};
use crate::opinion::{OpinionMap, PixelError};
use crate::rng::{self, SeededRng};
use crate::synth::{perturb_case, Case, Modalities, PerturbSpec, SynthError};
use crate::tensor::{softplus, Tensor, TensorError};
use crate::FusionError;

pub const CLASSES: usize = 2;
pub const FEATURES_PER_MODALITY: usize = 9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: u32, batch: usize, detail: String },
    #[error("case {0} has shape {1:?}, expected {2:?}")]
    CaseShape(usize, (usize, usize), (usize, usize)),
    #[error("head expects {expected} inputs, got {got}")]
    HeadShape { expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pixel(#[from] PixelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Ct,
    Pet,
}

impl Modality {
    // (threshold, width) pairs in the modality's normalised units.
    fn thresholds(self) -> [(f64, f64); 3] {
        match self {
            Modality::Ct => [(0.0, 0.03), (0.06, 0.03), (0.2, 0.05)],
            Modality::Pet => [(1.0, 0.5), (2.5, 0.5), (4.0, 0.5)],
        }
    }
}

// Sum over the window of half-width r around each pixel divided by the
// number of in-image pixels in it.
fn box_mean(img: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Fixed per-pixel features of one image, `[FEATURES_PER_MODALITY, H·W]`:
/// 3×3, 5×5, 7×7 and 15×15 means, 5×5 minus 15×15 mean, gradient magnitude
/// of the 5×5 mean, and three soft threshold indicators of the 5×5 mean.
pub fn modality_features(img: &Tensor, modality: Modality) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let n = h * w;
    let d = img.data();
    let m3 = box_mean(d, h, w, 1);
    let m5 = box_mean(d, h, w, 2);
    let m7 = box_mean(d, h, w, 3);
    let m15 = box_mean(d, h, w, 7);
    let mut out = Vec::with_capacity(FEATURES_PER_MODALITY * n);
    out.extend_from_slice(&m3);
    out.extend_from_slice(&m5);
    out.extend_from_slice(&m7);
    out.extend_from_slice(&m15);
    out.extend(m5.iter().zip(&m15).map(|(a, b)| a - b));
    out.extend((0..n).map(|i| {
        let (x, y) = (i % w, i / w);
        let gx = m5[y * w + (x + 1).min(w - 1)] - m5[y * w + x.saturating_sub(1)];
        let gy = m5[(y + 1).min(h - 1) * w + x] - m5[y.saturating_sub(1) * w + x];
        0.5 * math::sqrt(gx * gx + gy * gy)
    }));
    for (t, width) in modality.thresholds() {
        out.extend(m5.iter().map(|v| math::tanh((v - t) / width)));
    }
    Tensor::from_parts(vec![FEATURES_PER_MODALITY, n], out)
}

/// Per-feature standardisation fitted on training pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn fit(features: &[Tensor]) -> Self {
        let f = features[0].shape()[0];
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut count = 0usize;
        for t in features {
            let n = t.shape()[1];
            count += n;
            for (k, row) in t.data().chunks(n).enumerate() {
                sum[k] += row.iter().sum::<f64>();
                sq[k] += row.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = math::sqrt((s / c - m * m).max(0.0));
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(f: usize) -> Self {
        Self { mean: vec![0.0; f], std: vec![1.0; f] }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let n = t.shape()[1];
        let mut out = t.clone();
        for (k, row) in out.data_mut().chunks_mut(n).enumerate() {
            for v in row {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        out
    }
}

/// Two-layer perceptron with a tanh hidden layer and softplus evidence.
/// Works on feature-first `[F, N]` inputs and returns `[C, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceHead {
    /// `[hidden, F]`
    pub w1: Tensor,
    /// `[hidden, 1]`
    pub b1: Tensor,
    /// `[C, hidden]`
    pub w2: Tensor,
    /// `[C, 1]`
    pub b2: Tensor,
}

impl EvidenceHead {
    /// Uniform initialisation in `±1/sqrt(fan_in)`.
    pub fn seeded(rng: &mut SeededRng, inputs: usize, hidden: usize) -> Self {
        let k1 = 1.0 / math::sqrt(inputs as f64);
        let k2 = 1.0 / math::sqrt(hidden as f64);
        Self {
            w1: rng::uniform_tensor(rng, &[hidden, inputs], k1),
            b1: rng::uniform_tensor(rng, &[hidden, 1], k1),
            w2: rng::uniform_tensor(rng, &[CLASSES, hidden], k2),
            b2: rng::uniform_tensor(rng, &[CLASSES, 1], k2),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check(&self, x: &Tensor) -> Result<(), PipelineError> {
        if x.shape()[0] != self.inputs() {
            return Err(PipelineError::HeadShape { expected: self.inputs(), got: x.shape()[0] });
        }
        Ok(())
    }

    /// Evidence `[C, N]` without a tape.
    pub fn evidence(&self, x: &Tensor) -> Result<Tensor, PipelineError> {
        self.check(x)?;
        let n = x.shape()[1];
        let (hd, f) = (self.hidden(), self.inputs());
        let (w1, b1, w2, b2) = (self.w1.data(), self.b1.data(), self.w2.data(), self.b2.data());
        let xd = x.data();
        let mut hidden = vec![0.0; hd * n];
        for j in 0..hd {
            let row = &mut hidden[j * n..(j + 1) * n];
            row.fill(b1[j]);
            for k in 0..f {
                let wk = w1[j * f + k];
                for (r, xv) in row.iter_mut().zip(&xd[k * n..(k + 1) * n]) {
                    *r += wk * xv;
                }
            }
            for r in row.iter_mut() {
                *r = math::tanh(*r);
            }
        }
        let mut out = vec![0.0; CLASSES * n];
        for c in 0..CLASSES {
            let row = &mut out[c * n..(c + 1) * n];
            row.fill(b2[c]);
            for j in 0..hd {
                let wj = w2[c * hd + j];
                for (r, hv) in row.iter_mut().zip(&hidden[j * n..(j + 1) * n]) {
                    *r += wj * hv;
                }
            }
            for r in row.iter_mut() {
                *r = softplus(*r);
            }
        }
        Ok(Tensor::from_parts(vec![CLASSES, n], out))
    }

    /// `α = e + 1` without a tape.
    pub fn alpha(&self, x: &Tensor) -> Result<Tensor, PipelineError> {
        Ok(self.evidence(x)?.map(|e| e + 1.0))
    }

    fn forward<'t>(params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let hidden = (params[0].matmul(x) + params[1]).tanh();
        (params[2].matmul(hidden) + params[3]).softplus().offset(1.0)
    }
}

/// Scales each modality's features by `1 + u` of that modality and stacks
/// them, CT first. `u_*` are `[1, N]` or `[N]`.
pub fn fused_branch_features(ct: &Tensor, pet: &Tensor, u_ct: &Tensor, u_pet: &Tensor) -> Tensor {
    let n = ct.shape()[1];
    let mut out = Vec::with_capacity(ct.numel() + pet.numel());
    for (x, u) in [(ct, u_ct), (pet, u_pet)] {
        let ud = u.data();
        for row in x.data().chunks(n) {
            out.extend(row.iter().zip(ud).map(|(v, u)| v * (1.0 + u)));
        }
    }
    Tensor::from_parts(vec![ct.shape()[0] + pet.shape()[0], n], out)
}

fn fused_features_var<'t>(ct: Var<'t>, pet: Var<'t>, u_ct: Var<'t>, u_pet: Var<'t>) -> Var<'t> {
    let tape = ct.tape();
    let a = ct * u_ct.offset(1.0);
    let b = pet * u_pet.offset(1.0);
    // stack rows via constant selection matrices
    let (fc, fp) = (ct.shape()[0], pet.shape()[0]);
    let sel = |rows: usize, offset: usize| {
        tape.constant(Tensor::from_fn(&[fc + fp, rows], |i| {
            let (r, c) = (i / rows, i % rows);
            if r == c + offset {
                1.0
            } else {
                0.0
            }
        }))
    };
    sel(fc, 0).matmul(a) + sel(fp, fc).matmul(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// First-moment decay of Adam.
    pub beta1: f64,
    /// Second-moment decay of Adam.
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: u32,
    pub beta0: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Stop gradients at the fusion rule in the fused-result loss.
    pub detach_fusion: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.99,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            beta0: crate::losses::DEFAULT_BETA0,
            batch_size: 16,
            hidden: 16,
            seed: 0,
            detach_fusion: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short schedule for the desk-scale synthetic set: learning rate 1e-2,
    /// 15 epochs, everything else default.
    pub fn toy() -> Self {
        Self { learning_rate: 1e-2, epochs: 15, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::Config("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(PipelineError::Config("moment decays must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(PipelineError::Config("adam epsilon must be positive"));
        }
        if self.epochs == 0 {
            return Err(PipelineError::Config("epochs must be at least 1"));
        }
        if !(self.beta0 > 0.0 && self.beta0 < 1.0) {
            return Err(PipelineError::Config("beta0 must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(PipelineError::Config("batch size and hidden width must be positive"));
        }
        Ok(())
    }
}

/// The three trained heads and the feature standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub ct: EvidenceHead,
    pub pet: EvidenceHead,
    pub fused: EvidenceHead,
    pub norm_ct: FeatureNorm,
    pub norm_pet: FeatureNorm,
}

impl Heads {
    pub fn seeded(seed: u64, hidden: usize) -> Self {
        let mut rng = rng::seeded(seed);
        let f = FEATURES_PER_MODALITY;
        Self {
            ct: EvidenceHead::seeded(&mut rng, f, hidden),
            pet: EvidenceHead::seeded(&mut rng, f, hidden),
            fused: EvidenceHead::seeded(&mut rng, 2 * f, hidden),
            norm_ct: FeatureNorm::identity(f),
            norm_pet: FeatureNorm::identity(f),
        }
    }

    fn heads(&self) -> [&EvidenceHead; 3] {
        [&self.ct, &self.pet, &self.fused]
    }

    fn heads_mut(&mut self) -> [&mut EvidenceHead; 3] {
        [&mut self.ct, &mut self.pet, &mut self.fused]
    }

    /// Standardised features of a case, `[F, H·W]` per modality.
    pub fn features(&self, case: &Case) -> (Tensor, Tensor) {
        (
            self.norm_ct.apply(&modality_features(&case.ct, Modality::Ct)),
            self.norm_pet.apply(&modality_features(&case.pet, Modality::Pet)),
        )
    }
}

/// Per-branch results and the fused opinion map of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub height: usize,
    pub width: usize,
    pub ct: SegResult,
    pub pet: SegResult,
    pub fused_branch: SegResult,
    /// Combination of the three branch opinions.
    pub joint: MapFusion,
}

fn argmax_mask(p: &Tensor, h: usize, w: usize) -> BinaryMask {
    let n = h * w;
    let d = p.data();
    BinaryMask::from_fn(h, w, |x, y| {
        let i = y * w + x;
        d[n + i] > d[i]
    })
}

impl BranchOutputs {
    pub fn ct_mask(&self) -> BinaryMask {
        argmax_mask(&self.ct.probability, self.height, self.width)
    }

    pub fn pet_mask(&self) -> BinaryMask {
        argmax_mask(&self.pet.probability, self.height, self.width)
    }

    pub fn fused_branch_mask(&self) -> BinaryMask {
        argmax_mask(&self.fused_branch.probability, self.height, self.width)
    }

    /// Argmax of the combined projected probability.
    pub fn joint_mask(&self) -> BinaryMask {
        let p = self.joint.map.projected_probability();
        argmax_mask(&p, self.height, self.width)
    }

    pub fn mean_joint_uncertainty(&self) -> f64 {
        self.joint.map.mean_uncertainty()
    }
}

fn opinion_map(alpha: &Tensor, h: usize, w: usize) -> Result<OpinionMap, PipelineError> {
    Ok(OpinionMap::from_alpha(&alpha.reshape(&[CLASSES, h, w])?)?)
}

pub fn infer(heads: &Heads, case: &Case) -> Result<BranchOutputs, PipelineError> {
    let (x_ct, x_pet) = heads.features(case);
    let [a_ct, a_pet, a_f] = branch_alphas(heads, &x_ct, &x_pet)?;
    outputs(case.height(), case.width(), a_ct, a_pet, a_f)
}

/// [`infer`] over several equally sized cases with one forward pass per head.
pub fn infer_batch(heads: &Heads, cases: &[Case]) -> Result<Vec<BranchOutputs>, PipelineError> {
    let (h, w) = check_shapes(cases)?;
    let feats: Vec<(Tensor, Tensor)> = cases.iter().map(|c| heads.features(c)).collect();
    let x_ct = concat_columns(&feats.iter().map(|f| &f.0).collect::<Vec<_>>());
    let x_pet = concat_columns(&feats.iter().map(|f| &f.1).collect::<Vec<_>>());
    let alphas = branch_alphas(heads, &x_ct, &x_pet)?;
    let n = h * w;
    (0..cases.len())
        .map(|i| {
            let [a_ct, a_pet, a_f] = alphas.each_ref().map(|a| columns(a, i * n, n));
            outputs(h, w, a_ct, a_pet, a_f)
        })
        .collect()
}

fn branch_alphas(heads: &Heads, x_ct: &Tensor, x_pet: &Tensor) -> Result<[Tensor; 3], PipelineError> {
    let a_ct = heads.ct.alpha(x_ct)?;
    let a_pet = heads.pet.alpha(x_pet)?;
    let u_ct = SegResult::from_alpha(a_ct.clone()).uncertainty;
    let u_pet = SegResult::from_alpha(a_pet.clone()).uncertainty;
    let a_f = heads.fused.alpha(&fused_branch_features(x_ct, x_pet, &u_ct, &u_pet))?;
    Ok([a_ct, a_pet, a_f])
}

fn columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (rows, n) = (t.shape()[0], t.shape()[1]);
    let data = (0..rows).flat_map(|r| t.data()[r * n + start..r * n + start + len].iter().copied()).collect();
    Tensor::from_parts(vec![rows, len], data)
}

fn outputs(h: usize, w: usize, a_ct: Tensor, a_pet: Tensor, a_f: Tensor) -> Result<BranchOutputs, PipelineError> {
    let maps = [opinion_map(&a_ct, h, w)?, opinion_map(&a_pet, h, w)?, opinion_map(&a_f, h, w)?];
    let joint = fuse_maps(&maps, DEFAULT_EPS_CONFLICT)?;
    Ok(BranchOutputs {
        height: h,
        width: w,
        ct: SegResult::from_alpha(a_ct),
        pet: SegResult::from_alpha(a_pet),
        fused_branch: SegResult::from_alpha(a_f),
        joint,
    })
}

/// Loss values of one epoch, averaged over batches weighted by pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochRecord {
    pub epoch: u32,
    pub beta: f64,
    pub total: f64,
    pub ct: f64,
    pub pet: f64,
    pub fused_branch: f64,
    pub joint: f64,
    /// Mean DSC of the combined prediction on the validation cases.
    pub val_dsc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub heads: Heads,
    pub history: Vec<EpochRecord>,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(heads: &Heads) -> Self {
        let zeros: Vec<Tensor> = heads.heads().iter().flat_map(|h| h.params()).map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, heads: &mut Heads, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        let params = heads.heads_mut().into_iter().flat_map(|h| h.params_mut());
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                *pv -= cfg.learning_rate * (*mv / c1) / (math::sqrt(*vv / c2) + cfg.adam_eps);
            }
        }
    }
}

struct Prepared {
    ct: Tensor,
    pet: Tensor,
    labels: Vec<usize>,
}

fn concat_columns(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].shape()[0];
    let total: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for t in parts {
            let n = t.shape()[1];
            out.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
        }
    }
    Tensor::from_parts(vec![rows, total], out)
}

/// Deep-supervision loss of a set of branches and their fused result.
#[derive(Debug, Clone)]
pub struct DeepSupervision<'t> {
    pub total: Var<'t>,
    /// Segmentation loss of each branch, in input order.
    pub branches: Vec<f64>,
    pub joint: f64,
}

/// Sum of the segmentation losses of every branch and of their Dempster
/// combination. With `detach_fusion` the combined result passes no gradient
/// back to the branches.
pub fn deep_supervision<'t>(branches: &[Var<'t>], y: &LabelField, schedule: &AnnealSchedule, cfg: &LossConfig, detach_fusion: bool) -> DeepSupervision<'t> {
    assert!(!branches.is_empty(), "contract violation: no branches");
    let joint_in = |a: Var<'t>| OpinionVars::from_alpha(if detach_fusion { a.detach() } else { a });
    let a_joint = branches[1..].iter().fold(joint_in(branches[0]), |acc, &a| acc.combine(joint_in(a))).to_alpha();
    let parts: Vec<_> = branches.iter().map(|&a| seg(a, y, schedule, cfg)).collect();
    let joint = seg(a_joint, y, schedule, cfg);
    let total = parts.iter().fold(joint.total, |acc, l| acc + l.total);
    DeepSupervision {
        total,
        branches: parts.iter().map(|l| l.total.item()).collect(),
        joint: joint.total.item(),
    }
}

/// Loss values of one batch and the gradients of every head parameter.
struct BatchStep {
    parts: [f64; 4],
    total: f64,
    grads: Vec<Tensor>,
}

fn batch_step(heads: &Heads, batch: &[&Prepared], schedule: &AnnealSchedule, cfg: &TrainConfig) -> Result<BatchStep, PipelineError> {
    let tape = Tape::new();
    batch_step_on(&tape, heads, batch, schedule, cfg)
}

fn batch_step_on<'t>(tape: &'t Tape, heads: &Heads, batch: &[&Prepared], schedule: &AnnealSchedule, cfg: &TrainConfig) -> Result<BatchStep, PipelineError> {
    let x_ct = concat_columns(&batch.iter().map(|p| &p.ct).collect::<Vec<_>>());
    let x_pet = concat_columns(&batch.iter().map(|p| &p.pet).collect::<Vec<_>>());
    let labels: Vec<usize> = batch.iter().flat_map(|p| p.labels.iter().copied()).collect();
    let y = LabelField::from_classes(CLASSES, &labels)?;

    let params: Vec<Var<'t>> = heads.heads().iter().flat_map(|h| h.params()).map(|p| tape.leaf(p.clone())).collect();
    let xc = tape.constant(x_ct);
    let xp = tape.constant(x_pet);
    let a_ct = EvidenceHead::forward(&params[0..4], xc);
    let a_pet = EvidenceHead::forward(&params[4..8], xp);
    let u_ct = SegVars::from_alpha(a_ct).uncertainty.detach();
    let u_pet = SegVars::from_alpha(a_pet).uncertainty.detach();
    let a_f = EvidenceHead::forward(&params[8..12], fused_features_var(xc, xp, u_ct, u_pet));
    let ds = deep_supervision(&[a_ct, a_pet, a_f], &y, schedule, &cfg.loss, cfg.detach_fusion);
    let total = ds.total;
    let grads = tape.backward(total)?;
    Ok(BatchStep {
        parts: [ds.branches[0], ds.branches[1], ds.branches[2], ds.joint],
        total: total.item(),
        grads: params.iter().map(|&p| grads.wrt(p)).collect(),
    })
}

/// Mean per-case DSC of `mask_of` against the ground truth.
pub fn mean_dsc<F>(outputs: &[(BranchOutputs, &Case)], mask_of: F) -> f64
where
    F: Fn(&BranchOutputs) -> BinaryMask,
{
    let s: f64 = outputs
        .iter()
        .map(|(o, c)| overlap_metrics(&confusion(&mask_of(o), &c.mask).expect("grid matches case")).dsc)
        .sum();
    s / outputs.len() as f64
}

fn check_shapes(cases: &[Case]) -> Result<(usize, usize), PipelineError> {
    let first = cases.first().ok_or(PipelineError::EmptyDataset)?;
    let dims = (first.height(), first.width());
    for (i, c) in cases.iter().enumerate() {
        if (c.height(), c.width()) != dims {
            return Err(PipelineError::CaseShape(i, (c.height(), c.width()), dims));
        }
    }
    Ok(dims)
}

/// Trains the three heads on `train`; `validation` may be empty.
pub fn train_toy(cfg: &TrainConfig, train: &[Case], validation: &[Case]) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    check_shapes(train)?;
    let raw: Vec<(Tensor, Tensor)> = train
        .iter()
        .map(|c| (modality_features(&c.ct, Modality::Ct), modality_features(&c.pet, Modality::Pet)))
        .collect();
    let mut heads = Heads::seeded(cfg.seed, cfg.hidden);
    heads.norm_ct = FeatureNorm::fit(&raw.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
    heads.norm_pet = FeatureNorm::fit(&raw.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
    let prepared: Vec<Prepared> = raw
        .iter()
        .zip(train)
        .map(|((ct, pet), case)| Prepared {
            ct: heads.norm_ct.apply(ct),
            pet: heads.norm_pet.apply(pet),
            labels: case.mask.data().iter().map(|&m| m as usize).collect(),
        })
        .collect();
    drop(raw);

    let mut adam = Adam::new(&heads);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = rng::seeded(!cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 1..=cfg.epochs {
        let sched = AnnealSchedule::new(cfg.beta0, cfg.epochs, epoch - 1)?;
        order.shuffle(&mut shuffle_rng);
        let mut rec = EpochRecord { epoch, beta: sched.beta(), ..EpochRecord::default() };
        let mut weight = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let step = batch_step(&heads, &batch, &sched, cfg)?;
            if !step.total.is_finite() || step.grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(PipelineError::Diverged {
                    epoch,
                    batch: b,
                    detail: alloc::format!("branch losses ct={} pet={} fused={} joint={}", step.parts[0], step.parts[1], step.parts[2], step.parts[3]),
                });
            }
            adam.step(&mut heads, &step.grads, cfg);
            let k = chunk.len() as f64;
            weight += k;
            rec.total += k * step.total;
            rec.ct += k * step.parts[0];
            rec.pet += k * step.parts[1];
            rec.fused_branch += k * step.parts[2];
            rec.joint += k * step.parts[3];
        }
        rec.total /= weight;
        rec.ct /= weight;
        rec.pet /= weight;
        rec.fused_branch /= weight;
        rec.joint /= weight;
        if !validation.is_empty() {
            let outs = validation.iter().map(|c| Ok((infer(&heads, c)?, c))).collect::<Result<Vec<_>, PipelineError>>()?;
            rec.val_dsc = Some(mean_dsc(&outs, BranchOutputs::joint_mask));
        }
        history.push(rec);
    }
    Ok(TrainOutcome { heads, history })
}

/// Spearman correlation of `ys` with their index, `None` for fewer than two
/// points or constant `ys`. Ties share their average rank.
pub fn rank_correlation_with_index(ys: &[f64]) -> Option<f64> {
    let n = ys.len();
    if n < 2 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && ys[idx[j + 1]] == ys[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let mean = 0.5 * (n - 1) as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (k, r) in ranks.iter().enumerate() {
        let (dx, dy) = (k as f64 - mean, r - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if syy == 0.0 {
        return None;
    }
    Some(sxy / math::sqrt(sxx * syy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepLevel {
    pub spec: PerturbSpec,
    pub mean_dsc: f64,
    pub mean_u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub levels: Vec<SweepLevel>,
    /// Rank correlation of level index with mean combined uncertainty;
    /// `None` when undefined.
    pub rank_corr: Option<f64>,
}

impl SweepReport {
    pub fn u_strictly_increasing(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].mean_u > w[0].mean_u)
    }

    pub fn dsc_non_increasing(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].mean_dsc <= w[0].mean_dsc)
    }
}

/// Evaluates the combined prediction on perturbed copies of `cases` at each
/// level. Case `i` is perturbed with seed `seed + i` at every level, so
/// levels of one kind share their random draws.
pub fn perturb_sweep(heads: &Heads, cases: &[Case], specs: &[PerturbSpec], which: Modalities, seed: u64) -> Result<SweepReport, PipelineError> {
    if cases.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut levels = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut dsc = 0.0;
        let mut u = 0.0;
        for (i, case) in cases.iter().enumerate() {
            let perturbed = perturb_case(case, spec, seed.wrapping_add(i as u64), which)?;
            let out = infer(heads, &perturbed)?;
            dsc += overlap_metrics(&confusion(&out.joint_mask(), &case.mask).expect("grid matches case")).dsc;
            u += out.mean_joint_uncertainty();
        }
        let n = cases.len() as f64;
        levels.push(SweepLevel { spec: *spec, mean_dsc: dsc / n, mean_u: u / n });
    }
    let us: Vec<f64> = levels.iter().map(|l| l.mean_u).collect();
    Ok(SweepReport { rank_corr: rank_correlation_with_index(&us), levels })
}
