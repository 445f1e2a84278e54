//! Overlap and boundary-distance metrics for binary segmentations.
//!
//! Percentages are in `[0, 100]`. HD95 is in pixel units: boundary pixels are
//! foreground pixels with a background 4-neighbour or on the image edge; the
//! directed distance of each boundary pixel is its Euclidean distance to the
//! nearest boundary pixel of the other mask; HD95 is the larger of the two
//! directed 95th percentiles. Percentiles interpolate linearly between order
//! statistics: with sorted `d` of length `n`, `r = 0.95 (n - 1)`,
//! `lo = floor(r)`, the value is `d[lo] + (d[lo + 1] - d[lo]) (r - lo)`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("mask data has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("mask entry {index} is {value}, not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.height, self.width)?;
        for row in self.data.chunks(self.width.max(1)) {
            for &v in row {
                f.write_str(if v { "#" } else { "." })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl BinaryMask {
    /// Row-major 0/1 bytes.
    pub fn new(height: usize, width: usize, data: &[u8]) -> Result<Self, MetricsError> {
        if data.len() != height * width {
            return Err(MetricsError::Length { expected: height * width, got: data.len() });
        }
        let data = data
            .iter()
            .enumerate()
            .map(|(index, &value)| match value {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(MetricsError::NotBinary { index, value }),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { height, width, data })
    }

    pub fn from_bools(height: usize, width: usize, data: Vec<bool>) -> Result<Self, MetricsError> {
        if data.len() != height * width {
            return Err(MetricsError::Length { expected: height * width, got: data.len() });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i % width, i / width)).collect();
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: alloc::vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }

    /// Foreground pixels touching background or the image edge, as `(x, y)`.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                if edge || !self.get(x - 1, y) || !self.get(x + 1, y) || !self.get(x, y - 1) || !self.get(x, y + 1) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::ShapeMismatch(pred.dims(), gt.dims()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Degenerate-case markers, combined as a bit set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Flags(u8);

impl Flags {
    pub const NONE: Flags = Flags(0);
    /// Both masks empty; overlap metrics are 100 by convention.
    pub const BOTH_EMPTY: Flags = Flags(1);
    /// Ground truth empty; sensitivity undefined.
    pub const SENS_UNDEFINED: Flags = Flags(2);
    /// Prediction empty; precision undefined.
    pub const PRE_UNDEFINED: Flags = Flags(4);
    /// Exactly one mask empty; HD95 undefined.
    pub const HD95_UNDEFINED: Flags = Flags(8);
    /// Both masks empty; HD95 is 0 by convention.
    pub const HD95_BOTH_EMPTY: Flags = Flags(16);

    const NAMES: [(Flags, &'static str); 5] = [
        (Flags::BOTH_EMPTY, "both_empty"),
        (Flags::SENS_UNDEFINED, "sens_undefined"),
        (Flags::PRE_UNDEFINED, "pre_undefined"),
        (Flags::HD95_UNDEFINED, "hd95_undefined"),
        (Flags::HD95_BOTH_EMPTY, "hd95_both_empty"),
    ];

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl core::ops::BitOr for Flags {
    type Output = Flags;
    fn bitor(self, rhs: Flags) -> Flags {
        Flags(self.0 | rhs.0)
    }
}

impl core::ops::BitOrAssign for Flags {
    fn bitor_assign(&mut self, rhs: Flags) {
        self.0 |= rhs.0;
    }
}

impl fmt::Display for Flags {
    /// `|`-separated names, empty when no flag is set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (flag, name) in Flags::NAMES {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dsc: f64,
    pub jaccard: f64,
    pub sens: Option<f64>,
    pub pre: Option<f64>,
    pub flags: Flags,
}

pub fn overlap_metrics(c: &Confusion) -> Overlap {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if c.tp + c.fp + c.fn_ == 0 {
        return Overlap {
            dsc: 100.0,
            jaccard: 100.0,
            sens: Some(100.0),
            pre: Some(100.0),
            flags: Flags::BOTH_EMPTY,
        };
    }
    let mut flags = Flags::NONE;
    let sens = if c.tp + c.fn_ == 0 {
        flags |= Flags::SENS_UNDEFINED;
        None
    } else {
        Some(100.0 * tp / (tp + fn_))
    };
    let pre = if c.tp + c.fp == 0 {
        flags |= Flags::PRE_UNDEFINED;
        None
    } else {
        Some(100.0 * tp / (tp + fp))
    };
    Overlap {
        dsc: 100.0 * 2.0 * tp / (2.0 * tp + fp + fn_),
        jaccard: 100.0 * tp / (tp + fp + fn_),
        sens,
        pre,
        flags,
    }
}

/// Linear-interpolated percentile `q ∈ [0, 100]` of sorted, nonempty data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let r = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = math::floor(r) as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (sorted[lo + 1] - sorted[lo]) * (r - lo as f64)
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(x, y)| {
            let best = to
                .iter()
                .map(|&(u, v)| {
                    let (dx, dy) = (x.abs_diff(u) as u64, y.abs_diff(v) as u64);
                    dx * dx + dy * dy
                })
                .min()
                .unwrap_or(0);
            math::sqrt(best as f64)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// HD95 in pixels. `None` with [`Flags::HD95_UNDEFINED`] when exactly one
/// mask is empty; `Some(0)` with [`Flags::HD95_BOTH_EMPTY`] when both are.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<(Option<f64>, Flags), MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::ShapeMismatch(pred.dims(), gt.dims()));
    }
    let (a, b) = (pred.boundary(), gt.boundary());
    Ok(match (a.is_empty(), b.is_empty()) {
        (true, true) => (Some(0.0), Flags::HD95_BOTH_EMPTY),
        (true, false) | (false, true) => (None, Flags::HD95_UNDEFINED),
        _ => {
            let ab = percentile_sorted(&directed(&a, &b), 95.0);
            let ba = percentile_sorted(&directed(&b, &a), 95.0);
            (Some(ab.max(ba)), Flags::NONE)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub sens: Option<f64>,
    pub pre: Option<f64>,
    pub flags: Flags,
}

pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricsReport, MetricsError> {
    let o = overlap_metrics(&confusion(pred, gt)?);
    let (hd, hd_flags) = hd95(pred, gt)?;
    Ok(MetricsReport {
        dsc: o.dsc,
        jaccard: o.jaccard,
        hd95: hd,
        sens: o.sens,
        pre: o.pre,
        flags: o.flags | hd_flags,
    })
}

pub const CSV_HEADER: &str = "case,dsc,jaccard,hd95,sens,pre,flags";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => alloc::format!("{v:.4}"),
        None => String::from("nan"),
    }
}

impl MetricsReport {
    /// One CSV line (no newline); undefined values print as `nan`.
    pub fn csv_row(&self, case: &str) -> String {
        alloc::format!(
            "{case},{:.4},{:.4},{},{},{},{}",
            self.dsc,
            self.jaccard,
            cell(self.hd95),
            cell(self.sens),
            cell(self.pre),
            self.flags
        )
    }
}

/// Full CSV document with rows sorted by case id.
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut sorted: Vec<&(String, MetricsReport)> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (case, r) in sorted {
        out.push_str(&r.csv_row(case));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| on.contains(&(x, y)))
    }

    #[test]
    fn confusion_examples() {
        let gt = mask(3, 3, &[(0, 0), (1, 2), (2, 1)]);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = BinaryMask::from_fn(3, 3, |x, y| !gt.get(x, y));
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        // (row, col) pairs from the hand case, stored as (x, y)
        let pred = mask(2, 2, &[(0, 0), (1, 0)]);
        let gt = mask(2, 2, &[(1, 0), (1, 1)]);
        assert_eq!(confusion(&pred, &gt).unwrap(), Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let o = overlap_metrics(&confusion(&pred, &gt).unwrap());
        assert_eq!(o.dsc, 50.0);
        assert_eq!(o.jaccard, 100.0 / 3.0);
        assert_eq!((o.sens, o.pre), (Some(50.0), Some(50.0)));
    }

    #[test]
    fn overlap_conventions() {
        let a = mask(4, 4, &[(1, 1), (2, 1)]);
        let o = overlap_metrics(&confusion(&a, &a).unwrap());
        assert_eq!((o.dsc, o.jaccard, o.sens, o.pre), (100.0, 100.0, Some(100.0), Some(100.0)));
        let b = mask(4, 4, &[(3, 3)]);
        let o = overlap_metrics(&confusion(&a, &b).unwrap());
        assert_eq!((o.dsc, o.jaccard, o.sens, o.pre), (0.0, 0.0, Some(0.0), Some(0.0)));
        let e = BinaryMask::empty(4, 4);
        let o = overlap_metrics(&confusion(&e, &e).unwrap());
        assert_eq!(o.dsc, 100.0);
        assert!(o.flags.contains(Flags::BOTH_EMPTY));
        let o = overlap_metrics(&confusion(&a, &e).unwrap());
        assert_eq!(o.sens, None);
        assert!(o.flags.contains(Flags::SENS_UNDEFINED));
        assert_eq!((o.dsc, o.pre), (0.0, Some(0.0)));
    }

    #[test]
    fn hd95_examples() {
        let a = mask(8, 8, &[(2, 2), (3, 2), (2, 3)]);
        assert_eq!(hd95(&a, &a).unwrap(), (Some(0.0), Flags::NONE));
        let p = mask(6, 6, &[(0, 0)]);
        let g = mask(6, 6, &[(4, 3)]);
        assert_eq!(hd95(&p, &g).unwrap().0, Some(5.0));
        let e = BinaryMask::empty(6, 6);
        assert_eq!(hd95(&e, &e).unwrap(), (Some(0.0), Flags::HD95_BOTH_EMPTY));
        assert_eq!(hd95(&p, &e).unwrap(), (None, Flags::HD95_UNDEFINED));
    }

    #[test]
    fn percentile_interpolates() {
        let d = [0.0, 1.0, 2.0, 3.0, 10.0];
        // r = 3.8
        assert!((percentile_sorted(&d, 95.0) - 8.6).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[4.0], 95.0), 4.0);
    }

    #[test]
    fn boundary_uses_image_edge() {
        let full = BinaryMask::from_fn(3, 3, |_, _| true);
        let b = full.boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(1, 1)));
    }

    #[test]
    fn csv_format() {
        let a = mask(4, 4, &[(1, 1)]);
        let e = BinaryMask::empty(4, 4);
        let rows = alloc::vec![
            (String::from("b"), evaluate(&a, &e).unwrap()),
            (String::from("a"), evaluate(&a, &a).unwrap()),
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "a,100.0000,100.0000,0.0000,100.0000,100.0000,");
        assert_eq!(lines[2], "b,0.0000,0.0000,nan,nan,0.0000,sens_undefined|hd95_undefined");
    }

    #[test]
    fn mask_validation() {
        assert!(matches!(BinaryMask::new(2, 2, &[0, 1, 2, 0]), Err(MetricsError::NotBinary { index: 2, value: 2 })));
        assert!(matches!(BinaryMask::new(2, 2, &[0, 1]), Err(MetricsError::Length { .. })));
        assert!(confusion(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 3)).is_err());
    }
}
