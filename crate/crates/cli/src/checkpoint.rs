//! Trained heads on disk: `manifest.txt` plus one `.evf` tensor per
//! parameter and per normalisation vector.

use std::path::Path;

use evfuse_core::pipeline::{EvidenceHead, FeatureNorm, Heads};
use evfuse_core::tensor::Tensor;

use crate::error::{CliError, Result};
use crate::{fsio, tensorfile};

const HEADS: [&str; 3] = ["ct", "pet", "fused"];
const PARAMS: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn head<'a>(heads: &'a Heads, name: &str) -> &'a EvidenceHead {
    match name {
        "ct" => &heads.ct,
        "pet" => &heads.pet,
        _ => &heads.fused,
    }
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("norm vectors are finite and nonempty")
}

/// `manifest` is written verbatim after the file list.
pub fn save(dir: &Path, heads: &Heads, manifest: &str) -> Result<()> {
    fsio::create_dir(dir)?;
    let mut files = Vec::new();
    for h in HEADS {
        for (p, t) in PARAMS.iter().zip(head(heads, h).params()) {
            let name = format!("{h}_{p}.evf");
            tensorfile::write(&dir.join(&name), t)?;
            files.push(name);
        }
    }
    for (m, norm) in [("ct", &heads.norm_ct), ("pet", &heads.norm_pet)] {
        for (part, v) in [("mean", &norm.mean), ("std", &norm.std)] {
            let name = format!("norm_{m}_{part}.evf");
            tensorfile::write(&dir.join(&name), &row(v))?;
            files.push(name);
        }
    }
    let text = format!("files={}\n{manifest}", files.join(","));
    fsio::write_atomic(&dir.join("manifest.txt"), text.as_bytes())
}

pub fn load(dir: &Path) -> Result<Heads> {
    fsio::read_text(&dir.join("manifest.txt"))?;
    let read_head = |h: &str| -> Result<EvidenceHead> {
        let [w1, b1, w2, b2] = PARAMS.map(|p| tensorfile::read(&dir.join(format!("{h}_{p}.evf"))));
        let head = EvidenceHead { w1: w1?, b1: b1?, w2: w2?, b2: b2? };
        let (hd, f) = (head.hidden(), head.inputs());
        let ok = head.w1.rank() == 2
            && head.b1.shape() == [hd, 1]
            && head.w2.rank() == 2
            && head.w2.shape()[1] == hd
            && head.b2.shape() == [head.w2.shape()[0], 1];
        if !ok || f == 0 {
            return Err(CliError::format(dir, format!("inconsistent shapes in head {h}")));
        }
        Ok(head)
    };
    let read_norm = |m: &str| -> Result<FeatureNorm> {
        let mean = tensorfile::read(&dir.join(format!("norm_{m}_mean.evf")))?.into_data();
        let std = tensorfile::read(&dir.join(format!("norm_{m}_std.evf")))?.into_data();
        if mean.len() != std.len() || std.iter().any(|&s| s <= 0.0) {
            return Err(CliError::format(dir, format!("bad normalisation for {m}")));
        }
        Ok(FeatureNorm { mean, std })
    };
    let heads = Heads {
        ct: read_head("ct")?,
        pet: read_head("pet")?,
        fused: read_head("fused")?,
        norm_ct: read_norm("ct")?,
        norm_pet: read_norm("pet")?,
    };
    let f = heads.norm_ct.mean.len();
    if heads.ct.inputs() != f || heads.pet.inputs() != heads.norm_pet.mean.len() || heads.fused.inputs() != f + heads.norm_pet.mean.len() {
        return Err(CliError::format(dir, "head inputs do not match the feature bank"));
    }
    Ok(heads)
}
