//! On-disk dataset layout: one directory per case holding `ct.pgm`,
//! `pet.pgm` (16-bit, linear over `[lo, hi]`), `mask.pgm` (0/255) and
//! `meta.txt`.

use std::collections::BTreeMap;
use std::path::Path;

use evfuse_core::synth::{Case, SynthParams};

use crate::error::{CliError, Result};
use crate::fsio;
use crate::pgm::{self, Greymap};

pub fn case_dir_name(index: usize) -> String {
    format!("case_{index:04}")
}

pub fn write_case(dir: &Path, case: &Case) -> Result<()> {
    fsio::create_dir(dir)?;
    let (ct, ct_lo, ct_hi) = pgm::quantize16(&case.ct);
    let (pet, pet_lo, pet_hi) = pgm::quantize16(&case.pet);
    ct.write(&dir.join("ct.pgm"))?;
    pet.write(&dir.join("pet.pgm"))?;
    pgm::mask8(&case.mask).write(&dir.join("mask.pgm"))?;
    let meta = format!(
        "seed={}\nheight={}\nwidth={}\nct.lo={ct_lo:e}\nct.hi={ct_hi:e}\npet.lo={pet_lo:e}\npet.hi={pet_hi:e}\n",
        case.seed,
        case.height(),
        case.width()
    );
    fsio::write_atomic(&dir.join("meta.txt"), meta.as_bytes())
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fsio::read_text(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::format(path, format!("bad line {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::format(path, format!("missing or bad {key}")))
}

/// Reads a case back. Images come back quantised to 16 bits, and the
/// generator layout is not stored, so `layout` is empty.
pub fn read_case(dir: &Path, params: &SynthParams) -> Result<Case> {
    let meta_path = dir.join("meta.txt");
    let meta = parse_meta(&meta_path)?;
    let seed: u64 = field(&meta, "seed", &meta_path)?;
    let image = |name: &str, lo: &str, hi: &str| -> Result<_> {
        let g = Greymap::read(&dir.join(name))?;
        Ok(pgm::dequantize(&g, field(&meta, lo, &meta_path)?, field(&meta, hi, &meta_path)?))
    };
    let ct = image("ct.pgm", "ct.lo", "ct.hi")?;
    let pet = image("pet.pgm", "pet.lo", "pet.hi")?;
    let mask_path = dir.join("mask.pgm");
    let mask = pgm::to_mask(&Greymap::read(&mask_path)?);
    Case::from_images(seed, params.clone(), ct, pet, mask).map_err(|e| CliError::format(dir, e))
}

/// Every `case_*` directory under `root`, in name order.
pub fn read_dataset(root: &Path, params: &SynthParams) -> Result<Vec<(String, Case)>> {
    let names: Vec<String> = fsio::subdirs(root)?.into_iter().filter(|n| n.starts_with("case_")).collect();
    if names.is_empty() {
        return Err(CliError::format(root, "no case_* directories"));
    }
    names
        .into_iter()
        .map(|n| {
            let c = read_case(&root.join(&n), params)?;
            Ok((n, c))
        })
        .collect()
}
