//! Dempster's rule of combination for multinomial opinions on the frame of
//! singleton classes plus the whole frame (which carries the uncertainty).
//!
//! ```text
//! b_c = (b1_c b2_c + b1_c u2 + b2_c u1) / (1 - K)
//! u   = u1 u2 / (1 - K)
//! K   = Σ_{i≠j} b1_i b2_j
//! ```
//!
//! `K` here is the mass the two opinions place on disjoint singletons. With
//! this `K` the combined masses sum to one again, because
//! `Σ_c (b1_c b2_c + b1_c u2 + b2_c u1) + u1 u2 = 1 - K`.
//!
//! Adding the cross terms `b1_i u2 + b2_j u1` and `u1 u2` into `K` gives a
//! normaliser under which `Σb + u = 1` no longer holds. That variant is
//! [`ConflictRule::CrossTermsAndUncertainty`], kept to demonstrate the
//! failure.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::ops::Range;

use crate::tensor::Tensor;

use crate::autodiff::Var;
use crate::opinion::{DirichletParams, Evidence, Opinion, OpinionError, OpinionMap};

/// Normalisers at or below this are treated as total conflict.
pub const DEFAULT_EPS_CONFLICT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("cannot fuse an empty list of opinions")]
    Empty,
    #[error("class counts differ: {0} vs {1}")]
    ClassMismatch(usize, usize),
    #[error("total conflict at fold step {step}: normaliser {normalizer:e} between {left:?} and {right:?}")]
    TotalConflict {
        step: usize,
        normalizer: f64,
        left: Box<Opinion>,
        right: Box<Opinion>,
    },
    #[error(transparent)]
    Opinion(#[from] OpinionError),
    #[error("maps differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
}

/// Which conflict coefficient normalises the combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConflictRule {
    /// `Σ_{i≠j} b1_i b2_j`; preserves `Σb + u = 1`.
    #[default]
    Pairwise,
    /// Adds the cross-uncertainty terms to `K`. Breaks the
    /// mass invariant; exists for demonstrating that.
    CrossTermsAndUncertainty,
}

fn same_classes(m1: &Opinion, m2: &Opinion) -> Result<usize, FusionError> {
    if m1.classes() != m2.classes() {
        return Err(FusionError::ClassMismatch(m1.classes(), m2.classes()));
    }
    Ok(m1.classes())
}

/// Mass the two opinions assign to incompatible singleton classes.
pub fn conflict(m1: &Opinion, m2: &Opinion) -> Result<f64, FusionError> {
    conflict_with(m1, m2, ConflictRule::Pairwise)
}

pub fn conflict_with(m1: &Opinion, m2: &Opinion, rule: ConflictRule) -> Result<f64, FusionError> {
    let c = same_classes(m1, m2)?;
    let (b1, b2) = (m1.belief(), m2.belief());
    let (u1, u2) = (m1.uncertainty(), m2.uncertainty());
    let mut k = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            k += b1[i] * b2[j];
            if rule == ConflictRule::CrossTermsAndUncertainty {
                k += b1[i] * u2 + b2[j] * u1;
            }
        }
    }
    if rule == ConflictRule::CrossTermsAndUncertainty {
        k += u1 * u2;
    }
    Ok(k)
}

/// `m1 ⊕ m2` with the default conflict threshold.
pub fn combine(m1: &Opinion, m2: &Opinion) -> Result<Opinion, FusionError> {
    combine_with(m1, m2, DEFAULT_EPS_CONFLICT, ConflictRule::Pairwise)
}

pub fn combine_with(m1: &Opinion, m2: &Opinion, eps_conflict: f64, rule: ConflictRule) -> Result<Opinion, FusionError> {
    combine_step(m1, m2, eps_conflict, rule, 1).map(|(m, _)| m)
}

// Returns the combined opinion and the conflict coefficient used.
fn combine_step(m1: &Opinion, m2: &Opinion, eps: f64, rule: ConflictRule, step: usize) -> Result<(Opinion, f64), FusionError> {
    let k = conflict_with(m1, m2, rule)?;
    let normalizer = 1.0 - k;
    if !(normalizer > eps) {
        return Err(FusionError::TotalConflict {
            step,
            normalizer,
            left: Box::new(m1.clone()),
            right: Box::new(m2.clone()),
        });
    }
    let (u1, u2) = (m1.uncertainty(), m2.uncertainty());
    // Each term is written so that swapping the operands gives the same
    // floating-point expression.
    let belief = m1
        .belief()
        .iter()
        .zip(m2.belief())
        .map(|(&x, &y)| (x * y + (x * u2 + y * u1)) / normalizer)
        .collect();
    Ok((Opinion::from_parts(belief, u1 * u2 / normalizer), k))
}

/// Left fold of [`combine`] over `opinions`.
pub fn fuse_all(opinions: &[Opinion]) -> Result<Opinion, FusionError> {
    fuse_all_with(opinions, DEFAULT_EPS_CONFLICT).map(|(m, _)| m)
}

/// Left fold returning the fused opinion and the conflict coefficient of each step.
pub fn fuse_all_with(opinions: &[Opinion], eps_conflict: f64) -> Result<(Opinion, Vec<f64>), FusionError> {
    let (first, rest) = opinions.split_first().ok_or(FusionError::Empty)?;
    let mut acc = first.clone();
    let mut trace = Vec::with_capacity(rest.len());
    for (i, m) in rest.iter().enumerate() {
        let (next, k) = combine_step(&acc, m, eps_conflict, ConflictRule::Pairwise, i + 1)?;
        acc = next;
        trace.push(k);
    }
    Ok((acc, trace))
}

/// A fused opinion together with the Dirichlet quantities recovered from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub opinion: Opinion,
    /// `S_L = C / u_L`
    pub strength: f64,
    pub evidence: Evidence,
    pub alpha: DirichletParams,
    /// `p_L = b_L + u_L`
    pub probability: Vec<f64>,
    pub conflict_trace: Vec<f64>,
}

/// Recovers joint evidence, Dirichlet parameters and projected probability
/// from a fused opinion.
pub fn joint_result(m: &Opinion) -> Result<FusionResult, FusionError> {
    let alpha = m.to_dirichlet()?;
    Ok(FusionResult {
        opinion: m.clone(),
        strength: m.classes() as f64 / m.uncertainty(),
        evidence: Evidence::new(m.belief().iter().map(|b| b * (m.classes() as f64 / m.uncertainty())).collect())?,
        alpha,
        probability: m.projected_probability(),
        conflict_trace: Vec::new(),
    })
}

/// Fuses `opinions` and recovers the joint quantities, keeping the conflict trace.
pub fn fuse_joint(opinions: &[Opinion], eps_conflict: f64) -> Result<FusionResult, FusionError> {
    let (m, trace) = fuse_all_with(opinions, eps_conflict)?;
    let mut r = joint_result(&m)?;
    r.conflict_trace = trace;
    Ok(r)
}

/// A pixel whose fusion hit total conflict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictRecord {
    pub x: usize,
    pub y: usize,
    pub normalizer: f64,
}

/// Pixelwise fusion output.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFusion {
    pub map: OpinionMap,
    /// Degenerate pixels in row-major order; they are vacuous in `map`.
    pub conflicts: Vec<ConflictRecord>,
}

impl MapFusion {
    /// Report lines `x,y,normalizer`.
    pub fn conflict_report(&self) -> alloc::string::String {
        use core::fmt::Write;
        let mut s = alloc::string::String::new();
        for r in &self.conflicts {
            let _ = writeln!(s, "{},{},{:e}", r.x, r.y, r.normalizer);
        }
        s
    }
}

fn map_dims(m: &OpinionMap) -> (usize, usize, usize) {
    (m.classes(), m.height(), m.width())
}

fn check_maps(maps: &[OpinionMap]) -> Result<(usize, usize, usize), FusionError> {
    let first = maps.first().ok_or(FusionError::Empty)?;
    let dims = map_dims(first);
    for m in &maps[1..] {
        if map_dims(m) != dims {
            return Err(FusionError::ShapeMismatch(dims, map_dims(m)));
        }
    }
    Ok(dims)
}

/// Fuses the pixels with row-major indices in `range`. Partitions of the
/// pixel range can be processed independently and concatenated in order;
/// the result does not depend on the partitioning.
pub fn fuse_pixel_range(
    maps: &[OpinionMap],
    range: Range<usize>,
    eps_conflict: f64,
) -> Result<(Vec<Opinion>, Vec<ConflictRecord>), FusionError> {
    let (c, _, w) = check_maps(maps)?;
    let mut out = Vec::with_capacity(range.len());
    let mut conflicts = Vec::new();
    let mut stack = Vec::with_capacity(maps.len());
    for i in range {
        let (x, y) = (i % w, i / w);
        stack.clear();
        stack.extend(maps.iter().map(|m| m.pixel(x, y)));
        match fuse_all_with(&stack, eps_conflict) {
            Ok((m, _)) => out.push(m),
            Err(FusionError::TotalConflict { normalizer, .. }) => {
                conflicts.push(ConflictRecord { x, y, normalizer });
                out.push(Opinion::vacuous(c));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, conflicts))
}

/// Pixelwise [`fuse_all`] over maps of identical shape. Totally conflicting
/// pixels become vacuous and are listed in the conflict report.
pub fn fuse_maps(maps: &[OpinionMap], eps_conflict: f64) -> Result<MapFusion, FusionError> {
    let (c, h, w) = check_maps(maps)?;
    let (pixels, conflicts) = fuse_pixel_range(maps, 0..h * w, eps_conflict)?;
    Ok(MapFusion {
        map: OpinionMap::from_opinions(c, h, w, &pixels),
        conflicts,
    })
}

/// Belief planes `[C, N]` and uncertainty row `[1, N]` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct OpinionVars<'t> {
    pub belief: Var<'t>,
    pub uncertainty: Var<'t>,
}

impl<'t> OpinionVars<'t> {
    /// `b = (α - 1) / S`, `u = C / S`.
    pub fn from_alpha(alpha: Var<'t>) -> Self {
        let classes = alpha.shape()[0] as f64;
        let s = alpha.sum_axis(0);
        Self {
            belief: alpha.offset(-1.0) / s,
            uncertainty: alpha.tape().constant(Tensor::scalar(classes)) / s,
        }
    }

    /// `α = b · C/u + 1`.
    pub fn to_alpha(self) -> Var<'t> {
        let classes = self.belief.shape()[0] as f64;
        let strength = self.uncertainty.tape().constant(Tensor::scalar(classes)) / self.uncertainty;
        (self.belief * strength).offset(1.0)
    }

    /// Pixelwise `self ⊕ other`, differentiable in both operands. The caller
    /// guarantees that no pixel is in total conflict.
    pub fn combine(self, other: OpinionVars<'t>) -> OpinionVars<'t> {
        let (b1, u1, b2, u2) = (self.belief, self.uncertainty, other.belief, other.uncertainty);
        let k = b1.sum_axis(0) * b2.sum_axis(0) - (b1 * b2).sum_axis(0);
        let one = b1.tape().constant(Tensor::scalar(1.0));
        let norm = one - k;
        OpinionVars {
            belief: (b1 * b2 + (b1 * u2 + b2 * u1)) / norm,
            uncertainty: (u1 * u2) / norm,
        }
    }

    pub fn detach(self) -> Self {
        Self {
            belief: self.belief.detach(),
            uncertainty: self.uncertainty.detach(),
        }
    }
}
