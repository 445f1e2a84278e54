//! Forward passes of the two feature-calibration blocks: cross modality
//! attention over encoder features and the uncertainty calibrator over
//! decoder features. Weights are fixed; nothing here is trained.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DfcError {
    #[error("expected a [C, H, W] feature map, got {0:?}")]
    NotFeatureMap(Vec<usize>),
    #[error("expected a [H, W] plane, got {0:?}")]
    NotPlane(Vec<usize>),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("{from:?} does not split into integer blocks of {to:?}")]
    NonIntegerRatio { from: (usize, usize), to: (usize, usize) },
    #[error("convolution kernel must be [out, in, k, k] with odd k, got {0:?}")]
    BadKernel(Vec<usize>),
    #[error("convolution bias length {got} does not match {expected} outputs")]
    BadBias { expected: usize, got: usize },
    #[error("layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

fn feature_dims(t: &Tensor) -> Result<(usize, usize, usize), DfcError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(DfcError::NotFeatureMap(t.shape().to_vec())),
    }
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize), DfcError> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(DfcError::NotPlane(t.shape().to_vec())),
    }
}

/// Stride-1 convolution with zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    weight: Tensor,
    bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self, DfcError> {
        let [out, _, k, k2] = *weight.shape() else {
            return Err(DfcError::BadKernel(weight.shape().to_vec()));
        };
        if k != k2 || k % 2 == 0 {
            return Err(DfcError::BadKernel(weight.shape().to_vec()));
        }
        if bias.len() != out {
            return Err(DfcError::BadBias { expected: out, got: bias.len() });
        }
        Ok(Self { weight, bias })
    }

    /// 1×1 identity on `c` channels.
    pub fn identity(c: usize) -> Self {
        let weight = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        Self { weight, bias: vec![0.0; c] }
    }

    pub fn seeded(rng: &mut SeededRng, out: usize, inp: usize, k: usize) -> Self {
        let bound = 1.0 / math::sqrt((inp * k * k) as f64);
        let weight = rng::uniform_tensor(rng, &[out, inp, k, k], bound);
        let bias = rng::uniform_tensor(rng, &[out], bound).into_data();
        Self { weight, bias }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, DfcError> {
        let (c, h, w) = feature_dims(x)?;
        if c != self.in_channels() {
            return Err(DfcError::ChannelMismatch { expected: self.in_channels(), got: c });
        }
        let (out_c, k) = (self.out_channels(), self.kernel());
        let pad = (k / 2) as isize;
        let wt = self.weight.data();
        let xs = x.data();
        let mut out = vec![0.0; out_c * h * w];
        for o in 0..out_c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..c {
                        for dy in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let sx = xx as isize + dx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * c + i) * k + dy) * k + dx] * xs[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        Ok(Tensor::from_parts(vec![out_c, h, w], out))
    }
}

/// Per-modality pair of layers, CT first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPair {
    pub ct: Conv2d,
    pub pet: Conv2d,
}

/// Weights of both blocks for `C` feature channels. The 3×3 `restore`
/// convolution maps the `2C` concatenated channels back to `C` and is used by
/// both blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub query: ModalityPair,
    pub key: ModalityPair,
    pub value: ModalityPair,
    pub restore: Conv2d,
    pub calibrate: ModalityPair,
}

impl ConvWeights {
    pub fn new(query: ModalityPair, key: ModalityPair, value: ModalityPair, restore: Conv2d, calibrate: ModalityPair) -> Result<Self, DfcError> {
        let c = restore.out_channels();
        if restore.in_channels() != 2 * c || restore.kernel() != 3 {
            return Err(DfcError::BadKernel(restore.weight.shape().to_vec()));
        }
        for pair in [&query, &key, &value, &calibrate] {
            for conv in [&pair.ct, &pair.pet] {
                if conv.kernel() != 1 || conv.in_channels() != c || conv.out_channels() != c {
                    return Err(DfcError::BadKernel(conv.weight.shape().to_vec()));
                }
            }
        }
        Ok(Self { query, key, value, restore, calibrate })
    }

    /// Identity projections; `restore` adds the two halves at the kernel centre.
    pub fn identity(c: usize) -> Self {
        let id = || ModalityPair { ct: Conv2d::identity(c), pet: Conv2d::identity(c) };
        let restore = Tensor::from_fn(&[c, 2 * c, 3, 3], |idx| {
            let (o, rest) = (idx / (2 * c * 9), idx % (2 * c * 9));
            let (i, tap) = (rest / 9, rest % 9);
            if tap == 4 && i % c == o {
                1.0
            } else {
                0.0
            }
        });
        Self {
            query: id(),
            key: id(),
            value: id(),
            restore: Conv2d { weight: restore, bias: vec![0.0; c] },
            calibrate: id(),
        }
    }

    pub fn seeded(c: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let pair = |rng: &mut SeededRng| ModalityPair {
            ct: Conv2d::seeded(rng, c, c, 1),
            pet: Conv2d::seeded(rng, c, c, 1),
        };
        let query = pair(&mut rng);
        let key = pair(&mut rng);
        let value = pair(&mut rng);
        let calibrate = pair(&mut rng);
        let restore = Conv2d::seeded(&mut rng, c, 2 * c, 3);
        Self { query, key, value, restore, calibrate }
    }

    pub fn channels(&self) -> usize {
        self.restore.out_channels()
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut data = Vec::with_capacity(2 * a.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_parts(vec![2 * c, h, w], data)
}

fn matched(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), DfcError> {
    let dims = feature_dims(a)?;
    feature_dims(b)?;
    if a.shape() != b.shape() {
        return Err(DfcError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(dims)
}

/// Row-softmax of `q^T k / sqrt(C)` with tokens as columns of `[C, N]`.
pub fn attention(q: &Tensor, k: &Tensor) -> Tensor {
    let (c, n) = (q.shape()[0], q.numel() / q.shape()[0]);
    let scale = 1.0 / math::sqrt(c as f64);
    let (qd, kd) = (q.data(), k.data());
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        for (j, r) in row.iter_mut().enumerate() {
            *r = (0..c).map(|ch| qd[ch * n + i] * kd[ch * n + j]).sum::<f64>() * scale;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = math::exp(*r - m);
            z += *r;
        }
        for r in row.iter_mut() {
            *r /= z;
        }
    }
    Tensor::from_parts(vec![n, n], a)
}

// out[c, i] = Σ_j a[i, j] v[c, j]
fn attend(a: &Tensor, v: &Tensor) -> Tensor {
    let (c, n) = (v.shape()[0], a.shape()[0]);
    let (ad, vd) = (a.data(), v.data());
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for i in 0..n {
            out[ch * n + i] = (0..n).map(|j| ad[i * n + j] * vd[ch * n + j]).sum();
        }
    }
    Tensor::from_parts(v.shape().to_vec(), out)
}

/// Full cross attention output with both attention matrices `[N, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaOutput {
    pub output: Tensor,
    /// CT queries over PET keys.
    pub ct_to_pet: Tensor,
    /// PET queries over CT keys.
    pub pet_to_ct: Tensor,
}

/// Symmetric cross modality attention: CT queries attend over PET tokens and
/// PET queries over CT tokens; the two results are concatenated and
/// restored to `C` channels.
pub fn cma_forward_detailed(e_ct: &Tensor, e_pet: &Tensor, w: &ConvWeights) -> Result<CmaOutput, DfcError> {
    matched(e_ct, e_pet)?;
    let q_ct = w.query.ct.forward(e_ct)?;
    let k_ct = w.key.ct.forward(e_ct)?;
    let v_ct = w.value.ct.forward(e_ct)?;
    let q_pet = w.query.pet.forward(e_pet)?;
    let k_pet = w.key.pet.forward(e_pet)?;
    let v_pet = w.value.pet.forward(e_pet)?;
    let ct_to_pet = attention(&q_ct, &k_pet);
    let pet_to_ct = attention(&q_pet, &k_ct);
    let z_ct = attend(&ct_to_pet, &v_pet);
    let z_pet = attend(&pet_to_ct, &v_ct);
    let output = w.restore.forward(&concat_channels(&z_ct, &z_pet))?;
    Ok(CmaOutput { output, ct_to_pet, pet_to_ct })
}

pub fn cma_forward(e_ct: &Tensor, e_pet: &Tensor, w: &ConvWeights) -> Result<Tensor, DfcError> {
    cma_forward_detailed(e_ct, e_pet, w).map(|o| o.output)
}

/// Block-mean pooling of a `[H0, W0]` plane to `[h, w]`.
pub fn downsample_area(u: &Tensor, h: usize, w: usize) -> Result<Tensor, DfcError> {
    let (h0, w0) = plane_dims(u)?;
    if h == 0 || w == 0 || h0 % h != 0 || w0 % w != 0 {
        return Err(DfcError::NonIntegerRatio { from: (h0, w0), to: (h, w) });
    }
    let (ry, rx) = (h0 / h, w0 / w);
    if ry == 1 && rx == 1 {
        return Ok(u.clone());
    }
    let count = (ry * rx) as f64;
    let d = u.data();
    Ok(Tensor::from_fn(&[h, w], |idx| {
        let (y, x) = (idx / w, idx % w);
        let mut s = 0.0;
        for yy in y * ry..(y + 1) * ry {
            s += d[yy * w0 + x * rx..yy * w0 + (x + 1) * rx].iter().sum::<f64>();
        }
        s / count
    }))
}

/// `D + down(u) ⊙ conv(D)` with `u` broadcast over channels.
pub fn calibrate(d: &Tensor, u: &Tensor, conv: &Conv2d) -> Result<Tensor, DfcError> {
    let (c, h, w) = feature_dims(d)?;
    let u = downsample_area(u, h, w)?;
    let proj = conv.forward(d)?;
    let plane = h * w;
    let mut out = d.clone();
    let (ud, pd) = (u.data(), proj.data());
    for (i, v) in out.data_mut().iter_mut().enumerate().take(c * plane) {
        *v += ud[i % plane] * pd[i];
    }
    Ok(out)
}

/// Both calibrated modality features before concatenation.
pub fn uc_calibrate(d_ct: &Tensor, d_pet: &Tensor, u_ct: &Tensor, u_pet: &Tensor, w: &ConvWeights) -> Result<(Tensor, Tensor), DfcError> {
    matched(d_ct, d_pet)?;
    if u_ct.shape() != u_pet.shape() {
        return Err(DfcError::ShapeMismatch(u_ct.shape().to_vec(), u_pet.shape().to_vec()));
    }
    Ok((calibrate(d_ct, u_ct, &w.calibrate.ct)?, calibrate(d_pet, u_pet, &w.calibrate.pet)?))
}

/// Uncertainty calibrator: calibrate each modality, concatenate, restore.
pub fn uc_forward(d_ct: &Tensor, d_pet: &Tensor, u_ct: &Tensor, u_pet: &Tensor, w: &ConvWeights) -> Result<Tensor, DfcError> {
    let (a, b) = uc_calibrate(d_ct, d_pet, u_ct, u_pet, w)?;
    w.restore.forward(&concat_channels(&a, &b))
}
