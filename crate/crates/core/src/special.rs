//! Digamma, trigamma and log-gamma on the positive reals.
//!
//! All three shift the argument up to `x >= 6` with the exact recurrences and
//! then sum seven terms of the Bernoulli asymptotic series. Two regions where
//! that route loses relative accuracy get dedicated expansions:
//!
//! * `log_gamma` near its zeros at 1 and 2 uses the `zeta(k) - 1` Taylor
//!   series of `ln Γ(1 + z)`.
//! * `digamma` near its positive root uses a Taylor series about the root.

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("{function} is undefined at {x} (argument must be finite and positive)")]
pub struct DomainError {
    pub function: &'static str,
    pub x: f64,
}

const ASYMPTOTIC_CUTOFF: f64 = 6.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

// B_{2k} / (2k), k = 1..=7
const DIGAMMA_TAIL: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

// B_{2k} / (2k (2k - 1)), k = 1..=7
const STIRLING_TAIL: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
];

// B_{2k}, k = 1..=7
const TRIGAMMA_TAIL: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

// zeta(k) - 1 for k = 2..=41
const ZETA_MINUS_ONE: [f64; 40] = [
    0.644_934_066_848_226_4,
    0.202_056_903_159_594_3,
    0.082_323_233_711_138_19,
    0.036_927_755_143_369_93,
    0.017_343_061_984_449_14,
    0.008_349_277_381_922_827,
    0.004_077_356_197_944_34,
    0.002_008_392_826_082_214_3,
    0.000_994_575_127_818_085_3,
    0.000_494_188_604_119_464_5,
    0.000_246_086_553_308_048_3,
    0.000_122_713_347_578_489_15,
    6.124_813_505_870_483e-5,
    3.058_823_630_702_049e-5,
    1.528_225_940_865_187e-5,
    7.637_197_637_899_763e-6,
    3.817_293_264_999_84e-6,
    1.908_212_716_553_939e-6,
    9.539_620_338_727_962e-7,
    4.769_329_867_878_064e-7,
    2.384_505_027_277_33e-7,
    1.192_199_259_653_110_6e-7,
    5.960_818_905_125_948e-8,
    2.980_350_351_465_228e-8,
    1.490_155_482_836_504_3e-8,
    7.450_711_789_835_43e-9,
    3.725_334_024_788_457e-9,
    1.862_659_723_513_049e-9,
    9.313_274_324_196_682e-10,
    4.656_629_065_033_784e-10,
    2.328_311_833_676_505_3e-10,
    1.164_155_017_270_052e-10,
    5.820_772_087_902_701e-11,
    2.910_385_044_497_1e-11,
    1.455_192_189_104_198_5e-11,
    7.275_959_835_057_482e-12,
    3.637_979_547_378_651e-12,
    1.818_989_650_307_066e-12,
    9.094_947_840_263_888e-13,
    4.547_473_783_042_154e-13,
];

// Positive root of digamma, split into a double and its residual.
const DIGAMMA_ROOT_HI: f64 = 1.461_632_144_968_362_2;
const DIGAMMA_ROOT_LO: f64 = 9.549_995_429_965_697e-17;
const DIGAMMA_ROOT_RADIUS: f64 = 0.2;

// psi^{(k)}(root) / k!, k = 1..=25
const DIGAMMA_ROOT_SERIES: [f64; 25] = [
    0.967_672_245_447_621_2,
    -0.442_763_168_983_592_1,
    0.258_499_760_955_651,
    -0.163_942_705_442_406_52,
    0.107_824_050_691_262_37,
    -0.072_199_561_256_454_71,
    0.048_804_288_164_143_11,
    -0.033_161_126_474_847_36,
    0.022_597_648_232_218_104,
    -0.015_424_765_904_948_96,
    0.010_538_791_616_612_175,
    -0.007_204_534_386_356_869,
    0.004_926_781_395_729_853,
    -0.003_369_801_655_439_328,
    0.002_305_126_326_734_928,
    -0.001_576_936_771_430_197_2,
    0.001_078_825_201_916_296_7,
    -0.000_738_070_938_996_005_2,
    0.000_504_953_265_834_602,
    -0.000_345_468_025_106_307_7,
    0.000_236_356_015_640_270_53,
    -0.000_161_706_220_919_748_03,
    0.000_110_633_727_687_474_1,
    -7.569_179_582_195_066e-5,
    5.178_575_795_222_081e-5,
];

fn check(function: &'static str, x: f64) -> Result<(), DomainError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(DomainError { function, x })
    }
}

// Horner evaluation of sum_k c[k] * t^k for k = 0..
fn poly(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// The digamma function ψ(x) = d/dx ln Γ(x).
pub fn digamma(x: f64) -> Result<f64, DomainError> {
    check("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let dx = (x - DIGAMMA_ROOT_HI) - DIGAMMA_ROOT_LO;
    if dx.abs() < DIGAMMA_ROOT_RADIUS {
        return dx * poly(&DIGAMMA_ROOT_SERIES, dx);
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_CUTOFF {
        shift += 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    math::ln(x) - 0.5 / x - inv2 * poly(&DIGAMMA_TAIL, inv2) - shift
}

/// The trigamma function ψ'(x).
pub fn trigamma(x: f64) -> Result<f64, DomainError> {
    check("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_CUTOFF {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    shift + inv + 0.5 * inv2 + inv * inv2 * poly(&TRIGAMMA_TAIL, inv2)
}

/// ln Γ(x) for positive `x`.
pub fn log_gamma(x: f64) -> Result<f64, DomainError> {
    check("log_gamma", x)?;
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // ln Γ(x) = ln Γ(x + 1) - ln x, with x + 1 in [1, 1.5)
        return log_gamma_near_one(x) - math::ln(x);
    }
    if x <= 1.5 {
        return log_gamma_near_one(x - 1.0);
    }
    if x <= 2.5 {
        return log_gamma_near_two(x - 2.0);
    }
    if x < ASYMPTOTIC_CUTOFF {
        // Shift down into (1.5, 2.5]; every term added is positive.
        let mut x = x;
        let mut prod = 1.0;
        while x > 2.5 {
            x -= 1.0;
            prod *= x;
        }
        return log_gamma_near_two(x - 2.0) + math::ln(prod);
    }
    let inv = 1.0 / x;
    (x - 0.5) * math::ln(x) - x + HALF_LN_2PI + inv * poly(&STIRLING_TAIL, inv * inv)
}

// Sum_{k>=2} (-1)^k (zeta(k) - 1) z^k / k, valid for |z| <= 1/2.
fn zeta_tail(z: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &c) in ZETA_MINUS_ONE.iter().enumerate().rev() {
        let k = (i + 2) as f64;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc = acc * z + sign * c / k;
    }
    acc * z * z
}

// ln Γ(1 + z) = -ln(1 + z) + z (1 - γ) + zeta_tail(z)
fn log_gamma_near_one(z: f64) -> f64 {
    -math::ln_1p(z) + z * (1.0 - EULER_GAMMA) + zeta_tail(z)
}

// ln Γ(2 + z) = z (1 - γ) + zeta_tail(z)
fn log_gamma_near_two(z: f64) -> f64 {
    z * (1.0 - EULER_GAMMA) + zeta_tail(z)
}
