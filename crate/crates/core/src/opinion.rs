//! Evidence, Dirichlet parameters and subjective-logic opinions.
//!
//! For `C` classes with evidence `e`:
//!
//! ```text
//! α_c = e_c + 1      S = Σ α_c      b_c = (α_c - 1) / S      u = C / S
//! ```
//!
//! so that `Σ b_c + u = 1`. The inverse map goes through `S = C / u`.
//!
//! Two different "probabilities" are exposed. [`Opinion::projected_probability`]
//! is `b_c + u`, which does not sum to one across classes (it sums to
//! `1 + (C - 1) u`). [`DirichletParams::mean`] is the Dirichlet expectation
//! `α_c / S`, which does.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Tolerance on `Σb + u = 1` accepted when constructing an [`Opinion`].
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OpinionError {
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {class}: evidence {value} is negative or not finite")]
    InvalidEvidence { class: usize, value: f64 },
    #[error("class {class}: Dirichlet parameter {value} is below 1 or not finite")]
    InvalidAlpha { class: usize, value: f64 },
    #[error("class {class}: belief {value} is negative or not finite")]
    InvalidBelief { class: usize, value: f64 },
    #[error("uncertainty {0} outside [0, 1]")]
    InvalidUncertainty(f64),
    #[error("belief plus uncertainty sums to {0}, not 1")]
    MassNotNormalized(f64),
    #[error("opinion with zero uncertainty has infinite Dirichlet strength")]
    DegenerateOpinion,
    #[error("class counts differ: {0} vs {1}")]
    ClassMismatch(usize, usize),
}

/// Non-negative per-class evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence(Vec<f64>);

impl Evidence {
    pub fn new(values: Vec<f64>) -> Result<Self, OpinionError> {
        if values.len() < 2 {
            return Err(OpinionError::TooFewClasses(values.len()));
        }
        if let Some((class, &value)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(OpinionError::InvalidEvidence { class, value });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// `α = e + 1`.
    pub fn to_dirichlet(&self) -> DirichletParams {
        let alpha: Vec<f64> = self.0.iter().map(|e| e + 1.0).collect();
        let strength = alpha.iter().sum();
        DirichletParams { alpha, strength }
    }
}

/// Dirichlet concentration parameters with every `α_c >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    strength: f64,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self, OpinionError> {
        if alpha.len() < 2 {
            return Err(OpinionError::TooFewClasses(alpha.len()));
        }
        if let Some((class, &value)) = alpha.iter().enumerate().find(|(_, a)| !(**a >= 1.0 && a.is_finite())) {
            return Err(OpinionError::InvalidAlpha { class, value });
        }
        let strength = alpha.iter().sum();
        Ok(Self { alpha, strength })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Dirichlet strength `S = Σα`.
    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn evidence(&self) -> Evidence {
        Evidence(self.alpha.iter().map(|a| a - 1.0).collect())
    }

    /// `b_c = (α_c - 1) / S`, `u = C / S`.
    pub fn to_opinion(&self) -> Opinion {
        let s = self.strength;
        Opinion {
            belief: self.alpha.iter().map(|a| (a - 1.0) / s).collect(),
            uncertainty: self.classes() as f64 / s,
        }
    }

    /// Dirichlet expectation `α_c / S`; sums to one.
    pub fn mean(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a / self.strength).collect()
    }
}

/// A multinomial opinion: per-class belief plus one uncertainty mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Opinion {
    belief: Vec<f64>,
    uncertainty: f64,
}

impl Opinion {
    pub fn new(belief: Vec<f64>, uncertainty: f64) -> Result<Self, OpinionError> {
        if belief.len() < 2 {
            return Err(OpinionError::TooFewClasses(belief.len()));
        }
        if let Some((class, &value)) = belief.iter().enumerate().find(|(_, b)| !(**b >= 0.0 && b.is_finite())) {
            return Err(OpinionError::InvalidBelief { class, value });
        }
        if !(0.0..=1.0).contains(&uncertainty) {
            return Err(OpinionError::InvalidUncertainty(uncertainty));
        }
        let total = belief.iter().sum::<f64>() + uncertainty;
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(OpinionError::MassNotNormalized(total));
        }
        Ok(Self { belief, uncertainty })
    }

    /// The opinion with no belief at all: `b = 0`, `u = 1`.
    pub fn vacuous(classes: usize) -> Self {
        Self {
            belief: alloc::vec![0.0; classes],
            uncertainty: 1.0,
        }
    }

    pub(crate) fn from_parts(belief: Vec<f64>, uncertainty: f64) -> Self {
        Self { belief, uncertainty }
    }

    pub fn belief(&self) -> &[f64] {
        &self.belief
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    pub fn classes(&self) -> usize {
        self.belief.len()
    }

    /// `|Σb + u - 1|`.
    pub fn mass_defect(&self) -> f64 {
        (self.belief.iter().sum::<f64>() + self.uncertainty - 1.0).abs()
    }

    /// Inverse of [`DirichletParams::to_opinion`]: `S = C/u`, `e = b S`, `α = e + 1`.
    pub fn to_dirichlet(&self) -> Result<DirichletParams, OpinionError> {
        if self.uncertainty <= 0.0 {
            return Err(OpinionError::DegenerateOpinion);
        }
        let s = self.classes() as f64 / self.uncertainty;
        let alpha: Vec<f64> = self.belief.iter().map(|b| b * s + 1.0).collect();
        let strength = alpha.iter().sum();
        Ok(DirichletParams { alpha, strength })
    }

    /// `p_c = b_c + u`, equivalently `1 - Σ_{i≠c} b_i`.
    pub fn projected_probability(&self) -> Vec<f64> {
        self.belief.iter().map(|b| b + self.uncertainty).collect()
    }

    /// Index of the largest belief, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.belief)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// An error from a per-pixel operation, tagged with the pixel it came from.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("pixel (x={x}, y={y}): {source}")]
pub struct PixelError {
    pub x: usize,
    pub y: usize,
    pub source: OpinionError,
}

/// Applies `f` to the class vector of every pixel of a class-first `[C, H, W]`
/// grid, returning results in row-major pixel order.
pub fn map_lift<T, F>(classes: usize, height: usize, width: usize, grid: &[f64], mut f: F) -> Result<Vec<T>, PixelError>
where
    F: FnMut(&[f64]) -> Result<T, OpinionError>,
{
    assert_eq!(grid.len(), classes * height * width, "grid length does not match [C, H, W]");
    let plane = height * width;
    let mut pixel = alloc::vec![0.0; classes];
    let mut out = Vec::with_capacity(plane);
    for i in 0..plane {
        for (c, slot) in pixel.iter_mut().enumerate() {
            *slot = grid[c * plane + i];
        }
        out.push(f(&pixel).map_err(|source| PixelError {
            x: i % width,
            y: i / width,
            source,
        })?);
    }
    Ok(out)
}

/// Per-pixel opinions on an `H x W` grid: beliefs `[C, H, W]` plus an
/// uncertainty plane `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionMap {
    classes: usize,
    height: usize,
    width: usize,
    belief: Vec<f64>,
    uncertainty: Vec<f64>,
}

impl OpinionMap {
    pub fn from_opinions(classes: usize, height: usize, width: usize, pixels: &[Opinion]) -> Self {
        assert_eq!(pixels.len(), height * width);
        let plane = height * width;
        let mut belief = alloc::vec![0.0; classes * plane];
        let mut uncertainty = Vec::with_capacity(plane);
        for (i, op) in pixels.iter().enumerate() {
            assert_eq!(op.classes(), classes);
            for c in 0..classes {
                belief[c * plane + i] = op.belief[c];
            }
            uncertainty.push(op.uncertainty);
        }
        Self {
            classes,
            height,
            width,
            belief,
            uncertainty,
        }
    }

    /// Opinion map of a `[C, H, W]` evidence tensor.
    pub fn from_evidence(evidence: &Tensor) -> Result<Self, PixelError> {
        let (c, h, w) = chw(evidence);
        let pixels = map_lift(c, h, w, evidence.data(), |e| {
            Ok(Evidence::new(e.to_vec())?.to_dirichlet().to_opinion())
        })?;
        Ok(Self::from_opinions(c, h, w, &pixels))
    }

    /// Opinion map of a `[C, H, W]` Dirichlet-parameter tensor.
    pub fn from_alpha(alpha: &Tensor) -> Result<Self, PixelError> {
        let (c, h, w) = chw(alpha);
        let pixels = map_lift(c, h, w, alpha.data(), |a| Ok(DirichletParams::new(a.to_vec())?.to_opinion()))?;
        Ok(Self::from_opinions(c, h, w, &pixels))
    }

    /// Reads the `[C + 1, H, W]` layout written by [`OpinionMap::to_tensor`].
    pub fn from_tensor(t: &Tensor) -> Result<Self, PixelError> {
        let (c1, h, w) = chw(t);
        let classes = c1 - 1;
        let pixels = map_lift(c1, h, w, t.data(), |v| Opinion::new(v[..classes].to_vec(), v[classes]))?;
        Ok(Self::from_opinions(classes, h, w, &pixels))
    }

    /// Belief planes followed by the uncertainty plane, `[C + 1, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.belief.clone();
        data.extend_from_slice(&self.uncertainty);
        Tensor::from_parts(alloc::vec![self.classes + 1, self.height, self.width], data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn belief(&self) -> &[f64] {
        &self.belief
    }

    /// Uncertainty plane, row-major `[H, W]`.
    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    pub fn pixel(&self, x: usize, y: usize) -> Opinion {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        Opinion {
            belief: (0..self.classes).map(|c| self.belief[c * plane + i]).collect(),
            uncertainty: self.uncertainty[i],
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = Opinion> + '_ {
        (0..self.height * self.width).map(move |i| self.pixel(i % self.width, i / self.width))
    }

    /// `b + u` per class, `[C, H, W]`.
    pub fn projected_probability(&self) -> Tensor {
        let plane = self.height * self.width;
        let data = self
            .belief
            .iter()
            .enumerate()
            .map(|(k, b)| b + self.uncertainty[k % plane])
            .collect();
        Tensor::from_parts(alloc::vec![self.classes, self.height, self.width], data)
    }

    /// Per-pixel argmax class, row-major.
    pub fn argmax(&self) -> Vec<usize> {
        self.pixels().map(|p| p.argmax()).collect()
    }

    pub fn mean_uncertainty(&self) -> f64 {
        self.uncertainty.iter().sum::<f64>() / self.uncertainty.len() as f64
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [c, h, w] => (c, h, w),
        ref s => panic!("contract violation: expected a [C, H, W] grid, got {s:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn evidence_to_alpha_examples() {
        let d = Evidence::new(vec![0.0, 0.0]).unwrap().to_dirichlet();
        assert_eq!((d.alpha(), d.strength()), (&[1.0, 1.0][..], 2.0));
        let d = Evidence::new(vec![8.0, 0.0]).unwrap().to_dirichlet();
        assert_eq!((d.alpha(), d.strength()), (&[9.0, 1.0][..], 10.0));
        let d = Evidence::new(vec![1.0, 2.0, 3.0]).unwrap().to_dirichlet();
        assert_eq!((d.alpha(), d.strength()), (&[2.0, 3.0, 4.0][..], 9.0));
    }

    #[test]
    fn evidence_rejects_bad_values() {
        assert!(Evidence::new(vec![-0.1, 1.0]).is_err());
        assert!(Evidence::new(vec![f64::INFINITY, 1.0]).is_err());
        assert!(Evidence::new(vec![1.0]).is_err());
        assert!(DirichletParams::new(vec![0.5, 2.0]).is_err());
    }

    #[test]
    fn alpha_to_opinion_examples() {
        let o = DirichletParams::new(vec![1.0, 1.0]).unwrap().to_opinion();
        assert_eq!((o.belief(), o.uncertainty()), (&[0.0, 0.0][..], 1.0));
        let o = DirichletParams::new(vec![9.0, 1.0]).unwrap().to_opinion();
        assert!(close(o.belief(), &[0.8, 0.0], 1e-15) && (o.uncertainty() - 0.2).abs() < 1e-15);
        let o = DirichletParams::new(vec![2.0, 3.0, 4.0]).unwrap().to_opinion();
        assert!(close(o.belief(), &[1.0 / 9.0, 2.0 / 9.0, 3.0 / 9.0], 1e-15));
        assert!((o.uncertainty() - 3.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn opinion_to_alpha_examples() {
        let d = Opinion::vacuous(2).to_dirichlet().unwrap();
        assert_eq!(d.alpha(), &[1.0, 1.0]);
        let o = Opinion::new(vec![0.8, 0.0], 0.2).unwrap();
        let d = o.to_dirichlet().unwrap();
        assert!((d.strength() - 10.0).abs() < 1e-12);
        assert!(close(d.evidence().values(), &[8.0, 0.0], 1e-12));
        assert!(close(d.alpha(), &[9.0, 1.0], 1e-12));
        let d = Opinion::new(vec![0.5625, 0.375], 0.0625).unwrap().to_dirichlet().unwrap();
        assert_eq!(d.strength(), 32.0);
        assert_eq!(d.alpha(), &[19.0, 13.0]);
    }

    #[test]
    fn zero_uncertainty_is_degenerate() {
        let o = Opinion::new(vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(o.to_dirichlet(), Err(OpinionError::DegenerateOpinion));
    }

    #[test]
    fn opinion_constructor_checks_mass() {
        assert!(matches!(
            Opinion::new(vec![0.5, 0.5], 0.5),
            Err(OpinionError::MassNotNormalized(_))
        ));
        assert!(Opinion::new(vec![-0.1, 0.6], 0.5).is_err());
        assert!(Opinion::new(vec![0.0, 0.0], 1.1).is_err());
    }

    #[test]
    fn projected_probability_examples() {
        assert_eq!(Opinion::vacuous(2).projected_probability(), vec![1.0, 1.0]);
        let p = Opinion::new(vec![0.8, 0.0], 0.2).unwrap().projected_probability();
        assert!(close(&p, &[1.0, 0.2], 1e-15));
        let o = DirichletParams::new(vec![2.0, 3.0, 4.0]).unwrap().to_opinion();
        assert!(close(&o.projected_probability(), &[4.0 / 9.0, 5.0 / 9.0, 6.0 / 9.0], 1e-15));
    }

    #[test]
    fn dirichlet_mean_examples() {
        assert_eq!(DirichletParams::new(vec![1.0, 1.0]).unwrap().mean(), vec![0.5, 0.5]);
        assert!(close(&DirichletParams::new(vec![9.0, 1.0]).unwrap().mean(), &[0.9, 0.1], 1e-15));
        let m = DirichletParams::new(vec![2.0, 3.0, 4.0]).unwrap().mean();
        assert!(close(&m, &[2.0 / 9.0, 3.0 / 9.0, 4.0 / 9.0], 1e-15));
    }

    #[test]
    fn uniform_evidence_grid_gives_uniform_plane() {
        let t = Tensor::full(&[3, 4, 5], 2.5);
        let m = OpinionMap::from_evidence(&t).unwrap();
        let u0 = m.uncertainty()[0];
        assert!(m.uncertainty().iter().all(|&u| u == u0));
        assert!((u0 - 3.0 / 10.5).abs() < 1e-15);
    }

    #[test]
    fn singleton_grid_matches_scalar() {
        let t = Tensor::new(vec![2, 1, 1], vec![8.0, 0.0]).unwrap();
        let m = OpinionMap::from_evidence(&t).unwrap();
        let scalar = Evidence::new(vec![8.0, 0.0]).unwrap().to_dirichlet().to_opinion();
        assert_eq!(m.pixel(0, 0), scalar);
    }

    #[test]
    fn pixel_errors_carry_coordinates() {
        let mut data = vec![1.0; 2 * 2 * 3];
        data[2 * 3 + 4] = -1.0; // class 1, row 1, col 1
        let t = Tensor::new(vec![2, 2, 3], data).unwrap();
        let err = OpinionMap::from_evidence(&t).unwrap_err();
        assert_eq!((err.x, err.y), (1, 1));
    }

    #[test]
    fn tensor_layout_round_trip() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.7);
        let m = OpinionMap::from_evidence(&t).unwrap();
        let back = OpinionMap::from_tensor(&m.to_tensor()).unwrap();
        assert_eq!(back, m);
    }
}
