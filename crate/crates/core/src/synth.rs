//! Seeded bimodal phantoms, the intensity normalisations and the test-time
//! perturbations.
//!
//! A case is a body ellipse with a few high-contrast organs. The tumor is a
//! small ellipse that is only faintly brighter than soft tissue in CT and
//! strongly avid in PET. Each modality also carries lookalikes that the other
//! one does not: faint CT lesions with no uptake, and one PET hot spot with
//! no CT correlate whose uptake is drawn from the tumor's distribution. Only
//! the conjunction of both modalities isolates the tumor.
//!
//! All randomness is ChaCha8 (see [`crate::rng`]); Gaussian draws use the
//! ziggurat sampler of `rand_distr` on `libm`, so cases are bit-identical
//! across platforms.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::math;
use crate::metrics::BinaryMask;
use crate::rng::{self, SeededRng};
use crate::tensor::{sigmoid, Tensor};

pub const MIN_SIDE: usize = 32;
pub const HU_CLIP: f64 = 1024.0;
pub const DEFAULT_BOX: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("image side must be at least {MIN_SIDE}, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("invalid generator parameters: {0}")]
    Params(&'static str),
    #[error("could not place all structures after {0} attempts")]
    Placement(usize),
    #[error("image has zero variance")]
    ZeroVariance,
    #[error("image contains non-finite values")]
    NonFinite,
    #[error("expected an [H, W] image, got {0:?}")]
    NotImage(Vec<usize>),
    #[error("invalid perturbation: {0}")]
    Perturb(&'static str),
}

/// Generator parameters. Radii are fractions of the shorter image side.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub tumor_radius: (f64, f64),
    /// CT excess of tumor and CT lookalikes over soft tissue, in HU.
    pub tumor_contrast_hu: f64,
    /// PET uptake range of the tumor and the PET lookalike.
    pub tumor_uptake: (f64, f64),
    pub organs: usize,
    pub ct_decoys: usize,
    pub pet_decoy: bool,
    pub negative_ratio: f64,
    /// CT noise standard deviation in HU.
    pub ct_noise_hu: f64,
    /// PET noise standard deviation relative to local uptake.
    pub pet_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            tumor_radius: (0.06, 0.11),
            tumor_contrast_hu: 60.0,
            tumor_uptake: (4.0, 8.0),
            organs: 2,
            ct_decoys: 2,
            pet_decoy: true,
            negative_ratio: 0.25,
            ct_noise_hu: 12.0,
            pet_noise: 0.05,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.tumor_radius;
        if !(lo > 0.0 && hi >= lo && hi < 0.25) {
            return Err(SynthError::Params("tumor radius range must satisfy 0 < lo <= hi < 0.25"));
        }
        if !(self.tumor_uptake.0 > 1.0 && self.tumor_uptake.1 >= self.tumor_uptake.0) {
            return Err(SynthError::Params("tumor uptake range must exceed tissue uptake 1"));
        }
        if !(0.0..=1.0).contains(&self.negative_ratio) {
            return Err(SynthError::Params("negative ratio must be in [0, 1]"));
        }
        if !(self.tumor_contrast_hu.is_finite() && self.ct_noise_hu >= 0.0 && self.pet_noise >= 0.0) {
            return Err(SynthError::Params("contrast and noise levels must be finite and nonnegative"));
        }
        if self.organs > 4 || self.ct_decoys > 4 {
            return Err(SynthError::Params("at most 4 organs and 4 CT decoys fit"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalised radius; `<= 1` inside.
    pub fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = (math::sin(self.angle), math::cos(self.angle));
        let a = (dx * c + dy * s) / self.rx;
        let b = (-dx * s + dy * c) / self.ry;
        math::sqrt(a * a + b * b)
    }

    fn mean_radius(&self) -> f64 {
        0.5 * (self.rx + self.ry)
    }

    fn mask(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| self.rho(x as f64, y as f64) <= 1.0)
    }

    // Smooth indicator, 1/2 on the outline.
    fn soft(&self, x: f64, y: f64, edge: f64) -> f64 {
        sigmoid((1.0 - self.rho(x, y)) * self.mean_radius() / edge)
    }
}

/// Generator ground truth beyond the tumor mask. Empty for cases read back
/// from images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    pub body: Ellipse,
    pub organs: Vec<(Ellipse, Organ)>,
    pub tumor: Option<Ellipse>,
    pub ct_decoys: Vec<Ellipse>,
    pub pet_decoy: Option<Ellipse>,
    pub tumor_uptake: f64,
    pub decoy_uptake: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Organ {
    /// Air-filled, low uptake.
    Lung,
    /// Dense, mild uptake.
    Bone,
}

impl Organ {
    fn hu(self) -> f64 {
        match self {
            Organ::Lung => -750.0,
            Organ::Bone => 400.0,
        }
    }

    fn uptake(self) -> f64 {
        match self {
            Organ::Lung => 0.3,
            Organ::Bone => 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub seed: u64,
    pub params: SynthParams,
    /// Normalised CT in `[-1, 1]`, `[H, W]`.
    pub ct: Tensor,
    /// Z-scored PET, `[H, W]`.
    pub pet: Tensor,
    pub mask: BinaryMask,
    pub layout: Layout,
}

impl Case {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// A case from stored images: normalised CT and PET of the mask's shape.
    pub fn from_images(seed: u64, params: SynthParams, ct: Tensor, pet: Tensor, mask: BinaryMask) -> Result<Self, SynthError> {
        for img in [&ct, &pet] {
            if img.shape() != [mask.height(), mask.width()] {
                return Err(SynthError::NotImage(img.shape().to_vec()));
            }
            if img.data().iter().any(|v| !v.is_finite()) {
                return Err(SynthError::NonFinite);
            }
        }
        Ok(Self { seed, params, ct, pet, mask, layout: Layout::default() })
    }

    pub fn is_positive(&self) -> bool {
        !self.mask.is_empty()
    }

    /// Best segmentation from CT alone: every CT lesion, tumor or not.
    pub fn ct_oracle(&self) -> BinaryMask {
        self.union_with(&self.layout.ct_decoys)
    }

    /// Best segmentation from PET alone: every hot spot.
    pub fn pet_oracle(&self) -> BinaryMask {
        self.union_with(self.layout.pet_decoy.as_slice())
    }

    /// Both modalities together isolate the tumor.
    pub fn joint_oracle(&self) -> BinaryMask {
        self.mask.clone()
    }

    fn union_with(&self, extra: &[Ellipse]) -> BinaryMask {
        let (h, w) = (self.height(), self.width());
        BinaryMask::from_fn(h, w, |x, y| self.mask.get(x, y) || extra.iter().any(|e| e.rho(x as f64, y as f64) <= 1.0))
    }
}

fn uniform(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

// Rejection-samples an ellipse inside `body` clear of `taken` by `margin` px.
fn place(rng: &mut SeededRng, body: &Ellipse, taken: &[Ellipse], radius: (f64, f64), margin: f64) -> Result<Ellipse, SynthError> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let rx = uniform(rng, radius);
        let ry = rx * rng.random_range(0.75..1.0);
        let angle = rng.random_range(0.0..PI);
        let t = rng.random_range(0.0..2.0 * PI);
        let r = math::sqrt(rng.random_range(0.0..1.0)) * 0.8;
        let cx = body.cx + r * (body.rx - rx) * math::cos(t);
        let cy = body.cy + r * (body.ry - rx) * math::sin(t);
        let e = Ellipse { cx, cy, rx, ry, angle };
        let clear = taken.iter().all(|o| {
            let d = math::sqrt((o.cx - cx) * (o.cx - cx) + (o.cy - cy) * (o.cy - cy));
            d >= o.rx.max(o.ry) + rx + margin
        });
        if clear {
            return Ok(e);
        }
    }
    Err(SynthError::Placement(PLACEMENT_ATTEMPTS))
}

const LAYOUT_ATTEMPTS: usize = 64;

// Packing can paint itself into a corner on small images; start over then.
fn layout(rng: &mut SeededRng, h: usize, w: usize, p: &SynthParams) -> Result<Layout, SynthError> {
    let positive = rng.random::<f64>() >= p.negative_ratio;
    for _ in 0..LAYOUT_ATTEMPTS {
        match try_layout(rng, h, w, p, positive) {
            Err(SynthError::Placement(_)) => continue,
            other => return other,
        }
    }
    Err(SynthError::Placement(LAYOUT_ATTEMPTS * PLACEMENT_ATTEMPTS))
}

fn try_layout(rng: &mut SeededRng, h: usize, w: usize, p: &SynthParams, positive: bool) -> Result<Layout, SynthError> {
    let side = h.min(w) as f64;
    let (wf, hf) = (w as f64, h as f64);
    let body = Ellipse {
        cx: 0.5 * wf + rng.random_range(-0.02..0.02) * side,
        cy: 0.5 * hf + rng.random_range(-0.02..0.02) * side,
        rx: rng.random_range(0.42..0.47) * wf,
        ry: rng.random_range(0.40..0.46) * hf,
        angle: 0.0,
    };
    let radius = (p.tumor_radius.0 * side, p.tumor_radius.1 * side);
    let margin = 0.06 * side;
    let mut taken = Vec::new();

    let mut organs = Vec::with_capacity(p.organs);
    for i in 0..p.organs {
        let e = place(rng, &body, &taken, (0.09 * side, 0.13 * side), margin)?;
        taken.push(e);
        organs.push((e, if i % 2 == 0 { Organ::Lung } else { Organ::Bone }));
    }
    let tumor = if positive {
        let e = place(rng, &body, &taken, radius, margin)?;
        taken.push(e);
        Some(e)
    } else {
        None
    };
    let mut ct_decoys = Vec::with_capacity(p.ct_decoys);
    for _ in 0..p.ct_decoys {
        let e = place(rng, &body, &taken, radius, margin)?;
        taken.push(e);
        ct_decoys.push(e);
    }
    let pet_decoy = if p.pet_decoy {
        let e = place(rng, &body, &taken, radius, margin)?;
        taken.push(e);
        Some(e)
    } else {
        None
    };
    Ok(Layout {
        body,
        organs,
        tumor,
        ct_decoys,
        pet_decoy,
        tumor_uptake: uniform(rng, p.tumor_uptake),
        decoy_uptake: uniform(rng, p.tumor_uptake),
    })
}

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const AIR_UPTAKE: f64 = 0.05;
const CT_EDGE: f64 = 0.8;
const PET_EDGE: f64 = 1.2;

/// Raw CT in HU and raw PET uptake for a layout, noise included.
fn render(rng: &mut SeededRng, h: usize, w: usize, lay: &Layout, p: &SynthParams) -> (Tensor, Tensor) {
    let mut ct = Vec::with_capacity(h * w);
    let mut pet = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let inside = lay.body.soft(xf, yf, CT_EDGE);
            let mut hu = AIR_HU + (TISSUE_HU - AIR_HU) * inside;
            let mut up = AIR_UPTAKE + (1.0 - AIR_UPTAKE) * lay.body.soft(xf, yf, PET_EDGE);
            for (e, organ) in &lay.organs {
                hu += (organ.hu() - TISSUE_HU) * e.soft(xf, yf, CT_EDGE);
                up += (organ.uptake() - 1.0) * e.soft(xf, yf, PET_EDGE);
            }
            for e in lay.tumor.iter().chain(&lay.ct_decoys) {
                hu += p.tumor_contrast_hu * e.soft(xf, yf, CT_EDGE);
            }
            if let Some(e) = &lay.tumor {
                up += (lay.tumor_uptake - 1.0) * e.soft(xf, yf, PET_EDGE);
            }
            if let Some(e) = &lay.pet_decoy {
                up += (lay.decoy_uptake - 1.0) * e.soft(xf, yf, PET_EDGE);
            }
            ct.push(hu);
            pet.push(up);
        }
    }
    for v in ct.iter_mut() {
        *v += p.ct_noise_hu * rng.sample::<f64, _>(StandardNormal);
    }
    for v in pet.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + p.pet_noise * (*v + AIR_UPTAKE) * z).max(0.0);
    }
    (Tensor::from_parts(alloc::vec![h, w], ct), Tensor::from_parts(alloc::vec![h, w], pet))
}

/// Raw (unnormalised) images plus layout; used by [`generate_case`].
pub fn generate_raw(seed: u64, h: usize, w: usize, params: &SynthParams) -> Result<(Tensor, Tensor, Layout), SynthError> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(SynthError::TooSmall(h, w));
    }
    params.validate()?;
    let mut rng = rng::seeded(seed);
    let lay = layout(&mut rng, h, w, params)?;
    let (ct, pet) = render(&mut rng, h, w, &lay, params);
    Ok((ct, pet, lay))
}

pub fn generate_case(seed: u64, h: usize, w: usize, params: &SynthParams) -> Result<Case, SynthError> {
    let (ct, pet, layout) = generate_raw(seed, h, w, params)?;
    let mask = match &layout.tumor {
        Some(e) => e.mask(h, w),
        None => BinaryMask::empty(h, w),
    };
    Ok(Case {
        seed,
        params: params.clone(),
        ct: normalize_ct(&ct),
        pet: normalize_pet(&pet)?,
        mask,
        layout,
    })
}

/// Per-case seeds of a dataset drawn from one master seed.
pub fn case_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = rng::seeded(seed);
    (0..n).map(|_| rng.random()).collect()
}

pub fn generate_dataset(seed: u64, n: usize, h: usize, w: usize, params: &SynthParams) -> Result<Vec<Case>, SynthError> {
    case_seeds(seed, n).into_iter().map(|s| generate_case(s, h, w, params)).collect()
}

/// Train and test cases from one seed: the first `n_train` seeds train.
pub fn train_test_split(seed: u64, n_train: usize, n_test: usize, h: usize, w: usize, params: &SynthParams) -> Result<(Vec<Case>, Vec<Case>), SynthError> {
    let mut all = generate_dataset(seed, n_train + n_test, h, w, params)?;
    let test = all.split_off(n_train);
    Ok((all, test))
}

/// Clip to `[-1024, 1024]` HU and map linearly onto `[-1, 1]`.
pub fn normalize_ct(raw: &Tensor) -> Tensor {
    raw.map(|v| v.clamp(-HU_CLIP, HU_CLIP) / HU_CLIP)
}

/// Z-score with the population standard deviation.
pub fn normalize_pet(raw: &Tensor) -> Result<Tensor, SynthError> {
    let n = raw.numel() as f64;
    if raw.data().iter().any(|v| !v.is_finite()) {
        return Err(SynthError::NonFinite);
    }
    let mean = raw.sum() / n;
    let var = raw.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(SynthError::ZeroVariance);
    }
    let sd = math::sqrt(var);
    Ok(raw.map(|v| (v - mean) / sd))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbSpec {
    /// Additive i.i.d. Gaussian noise of the given variance.
    Noise { variance: f64 },
    /// Square boxes at the image minimum until `ratio` of pixels is covered.
    Mask { ratio: f64, side: usize },
}

impl PerturbSpec {
    pub fn noise(variance: f64) -> Self {
        PerturbSpec::Noise { variance }
    }

    pub fn mask(ratio: f64) -> Self {
        PerturbSpec::Mask { ratio, side: DEFAULT_BOX }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        match *self {
            PerturbSpec::Noise { variance } if !(variance >= 0.0 && variance.is_finite()) => Err(SynthError::Perturb("noise variance must be finite and >= 0")),
            PerturbSpec::Mask { ratio, .. } if !(0.0..1.0).contains(&ratio) => Err(SynthError::Perturb("mask ratio must be in [0, 1)")),
            PerturbSpec::Mask { side: 0, .. } => Err(SynthError::Perturb("box side must be >= 1")),
            _ => Ok(()),
        }
    }

    /// The perturbation level: variance or mask ratio.
    pub fn level(&self) -> f64 {
        match *self {
            PerturbSpec::Noise { variance } => variance,
            PerturbSpec::Mask { ratio, .. } => ratio,
        }
    }
}

pub fn perturb(img: &Tensor, spec: &PerturbSpec, seed: u64) -> Result<Tensor, SynthError> {
    spec.validate()?;
    let [h, w] = *img.shape() else {
        return Err(SynthError::NotImage(img.shape().to_vec()));
    };
    let mut rng = rng::seeded(seed);
    match *spec {
        PerturbSpec::Noise { variance } => {
            if variance == 0.0 {
                return Ok(img.clone());
            }
            let sd = math::sqrt(variance);
            Ok(img.map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)))
        }
        PerturbSpec::Mask { ratio, side } => {
            if side > h || side > w {
                return Err(SynthError::Perturb("box larger than image"));
            }
            let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
            let mut out = img.clone();
            let mut covered = alloc::vec![false; h * w];
            let target = ratio * (h * w) as f64;
            let mut count = 0usize;
            while (count as f64) < target {
                let y0 = rng.random_range(0..=h - side);
                let x0 = rng.random_range(0..=w - side);
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        let i = y * w + x;
                        out.data_mut()[i] = lo;
                        if !covered[i] {
                            covered[i] = true;
                            count += 1;
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Which modalities a perturbation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modalities {
    pub ct: bool,
    pub pet: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self { ct: true, pet: true }
    }
}

/// Perturbs a case's images; CT and PET use independent streams of `seed`.
pub fn perturb_case(case: &Case, spec: &PerturbSpec, seed: u64, which: Modalities) -> Result<Case, SynthError> {
    let mut out = case.clone();
    let [s_ct, s_pet]: [u64; 2] = {
        let mut r = rng::seeded(seed);
        [r.random(), r.random()]
    };
    if which.ct {
        out.ct = perturb(&case.ct, spec, s_ct)?;
    }
    if which.pet {
        out.pet = perturb(&case.pet, spec, s_pet)?;
    }
    Ok(out)
}
