use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use evfuse_core::fusion::fuse_maps;
use evfuse_core::gradcheck::grad_check;
use evfuse_core::losses::{AnnealSchedule, LabelField, LossConfig, LossKind};
use evfuse_core::metrics::{evaluate, metrics_csv, MetricsReport};
use evfuse_core::opinion::OpinionMap;
use evfuse_core::pipeline::{self, infer, TrainOutcome};
use evfuse_core::rng::{self, SeededRng};
use evfuse_core::synth::{generate_dataset, Modalities};
use evfuse_core::tensor::Tensor;

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::pgm::{self, Greymap};
use crate::{checkpoint, dataset, fsio, provenance, tensorfile, EvalArgs, FuseArgs, GradcheckArgs, SweepArgs, SynthArgs, TrainArgs};

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn override_key(cfg: &mut Config, key: &str, value: &Option<String>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, v),
        None => Ok(()),
    }
}

fn paths(ps: &[PathBuf]) -> String {
    ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

pub fn fuse(cfg: &Config, a: &FuseArgs) -> Result<()> {
    let eps: f64 = cfg.get("fuse.eps_conflict")?;
    let mut maps = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let t = tensorfile::read(p)?;
        if t.rank() != 3 {
            return Err(CliError::usage(format!("{}: expected a [C, H, W] evidence map, got shape {:?}", p.display(), t.shape())));
        }
        maps.push((p, OpinionMap::from_evidence(&t).map_err(|e| CliError::format(p, e))?));
    }
    let (first_path, first) = &maps[0];
    for (p, m) in &maps[1..] {
        let (da, db) = ((first.classes(), first.height(), first.width()), (m.classes(), m.height(), m.width()));
        if da != db {
            return Err(CliError::usage(format!(
                "shape mismatch: {} is {da:?} but {} is {db:?}",
                first_path.display(),
                p.display()
            )));
        }
    }
    let maps: Vec<OpinionMap> = maps.into_iter().map(|(_, m)| m).collect();
    let fused = fuse_maps(&maps, eps).map_err(CliError::usage)?;
    let (c, h, w) = (fused.map.classes(), fused.map.height(), fused.map.width());

    let evf = with_suffix(&a.out, ".evf");
    tensorfile::write(&evf, &fused.map.to_tensor())?;
    pgm::unit8(fused.map.uncertainty(), h, w).write(&with_suffix(&a.out, "_u.pgm"))?;
    pgm::labels8(&fused.map.argmax(), c, h, w).write(&with_suffix(&a.out, "_mask.pgm"))?;
    let report = format!("x,y,normalizer\n{}", fused.conflict_report());
    fsio::write_atomic(&with_suffix(&a.out, "_conflicts.csv"), report.as_bytes())?;
    let text = provenance::render("fuse", cfg, &[("inputs", paths(&a.inputs)), ("conflicts", fused.conflicts.len().to_string())]);
    provenance::emit(&text, &provenance::sidecar(&evf))
}

struct Trial {
    evidence: Tensor,
    labels: Vec<usize>,
}

// Evidence in [0.1, 20], 2 to 4 classes, 3 to 8 pixels.
fn trial(rng: &mut SeededRng) -> Trial {
    let pick = |rng: &mut SeededRng, lo: usize, hi: usize| {
        let u = rng::uniform_tensor(rng, &[1], 1.0).item();
        (lo + ((u + 1.0) / 2.0 * (hi - lo + 1) as f64) as usize).min(hi)
    };
    let c = pick(rng, 2, 4);
    let n = pick(rng, 3, 8);
    let evidence = rng::uniform_tensor(rng, &[c, n], 1.0).map(|v| 0.1 + (v + 1.0) / 2.0 * 19.9);
    let labels = (0..n).map(|_| pick(rng, 0, c - 1)).collect();
    Trial { evidence, labels }
}

pub fn gradcheck(mut cfg: Config, a: &GradcheckArgs) -> Result<()> {
    override_key(&mut cfg, "gradcheck.loss", &a.loss)?;
    override_key(&mut cfg, "gradcheck.trials", &a.trials)?;
    override_key(&mut cfg, "gradcheck.seed", &a.seed)?;
    let losses = match cfg.raw("gradcheck.loss") {
        "all" => LossKind::ALL.to_vec(),
        name => vec![LossKind::from_name(name).ok_or_else(|| CliError::usage(format!("unknown loss {name:?}; expected ace, kl, dice, up, seg or all")))?],
    };
    let trials: usize = cfg.get("gradcheck.trials")?;
    if trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let seed: u64 = cfg.get("gradcheck.seed")?;
    let step: f64 = cfg.get("gradcheck.step")?;
    let tol: f64 = cfg.get("gradcheck.tolerance")?;
    let schedule = AnnealSchedule::new(cfg.get("anneal.beta0")?, 10, 4).map_err(CliError::usage)?;
    let loss_cfg = LossConfig { smooth: cfg.get("loss.smooth")?, detach_uncertainty: cfg.get("loss.detach_uncertainty")? };
    print!("{}", provenance::render("gradcheck", &cfg, &[]));

    let mut failures = String::new();
    for loss in losses {
        let mut rng = rng::seeded(seed);
        let mut worst: Option<(f64, Trial, usize)> = None;
        for _ in 0..trials {
            let t = trial(&mut rng);
            let y = LabelField::from_classes(t.evidence.shape()[0], &t.labels).expect("labels are below the class count");
            let (err, idx) = match grad_check(|e| loss.of_evidence(e, &y, &schedule, &loss_cfg), &t.evidence, step) {
                Ok(r) => (r.max_rel_error, r.worst_index),
                Err(_) => (f64::INFINITY, 0),
            };
            if worst.as_ref().is_none_or(|w| err > w.0) {
                worst = Some((err, t, idx));
            }
        }
        let (err, t, idx) = worst.expect("at least one trial");
        let ok = err <= tol;
        println!("loss={} trials={trials} max_rel_error={err:.3e} {}", loss.name(), if ok { "ok" } else { "FAIL" });
        if !ok {
            let _ = writeln!(
                failures,
                "{}: error {err:.3e} at coordinate {idx}; evidence shape {:?} = {:?}; labels = {:?}",
                loss.name(),
                t.evidence.shape(),
                t.evidence.data(),
                t.labels
            );
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        eprint!("{failures}");
        Err(CliError::Check(format!("gradient error above {tol:e}")))
    }
}

pub fn synth(mut cfg: Config, a: &SynthArgs) -> Result<()> {
    override_key(&mut cfg, "synth.seed", &a.seed)?;
    override_key(&mut cfg, "synth.count", &a.count)?;
    let params = cfg.synth()?;
    let (seed, count, h, w): (u64, usize, usize, usize) = (cfg.get("synth.seed")?, cfg.get("synth.count")?, cfg.get("synth.height")?, cfg.get("synth.width")?);
    if count == 0 {
        return Err(CliError::usage("synth.count must be at least 1"));
    }
    let cases = generate_dataset(seed, count, h, w, &params).map_err(CliError::usage)?;
    for (i, c) in cases.iter().enumerate() {
        dataset::write_case(&a.out.join(dataset::case_dir_name(i)), c)?;
    }
    let positive = cases.iter().filter(|c| c.is_positive()).count();
    let text = provenance::render("synth", &cfg, &[("cases", count.to_string()), ("positive", positive.to_string())]);
    provenance::emit(&text, &a.out.join("provenance.txt"))
}

fn losses_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch,beta,total,ct,pet,fused_branch,joint,val_dsc\n");
    for r in &outcome.history {
        let val = r.val_dsc.map_or("nan".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{val}", r.epoch, r.beta, r.total, r.ct, r.pet, r.fused_branch, r.joint);
    }
    s
}

pub fn train_toy(mut cfg: Config, a: &TrainArgs) -> Result<()> {
    override_key(&mut cfg, "train.seed", &a.seed)?;
    override_key(&mut cfg, "train.epochs", &a.epochs)?;
    let tc = cfg.train()?;
    let params = cfg.synth()?;
    let train_set: Vec<_> = dataset::read_dataset(&a.data, &params)?.into_iter().map(|(_, c)| c).collect();
    let val_set: Vec<_> = match &a.val {
        Some(p) => dataset::read_dataset(p, &params)?.into_iter().map(|(_, c)| c).collect(),
        None => Vec::new(),
    };
    let outcome = pipeline::train_toy(&tc, &train_set, &val_set).map_err(CliError::usage)?;
    let mut extra = vec![("data", a.data.display().to_string()), ("seed", tc.seed.to_string()), ("epoch", tc.epochs.to_string())];
    if let Some(v) = &a.val {
        extra.push(("val", v.display().to_string()));
    }
    let text = provenance::render("train-toy", &cfg, &extra);
    checkpoint::save(&a.out, &outcome.heads, &text)?;
    fsio::write_atomic(&a.out.join("losses.csv"), losses_csv(&outcome).as_bytes())?;
    provenance::emit(&text, &a.out.join("provenance.txt"))
}

pub fn eval(cfg: &Config, a: &EvalArgs) -> Result<()> {
    let params = cfg.synth()?;
    let cases = dataset::read_dataset(&a.data, &params)?;
    let mut rows: Vec<(String, MetricsReport)> = Vec::with_capacity(cases.len());
    let mut extra = vec![("data", a.data.display().to_string())];
    if let Some(dir) = &a.checkpoint {
        extra.push(("checkpoint", dir.display().to_string()));
        let heads = checkpoint::load(dir)?;
        for (name, case) in &cases {
            let out = infer(&heads, case).map_err(CliError::usage)?;
            let pred = out.joint_mask();
            if let Some(save) = &a.save {
                pgm::mask8(&pred).write(&save.join(format!("{name}.pgm")))?;
                pgm::unit8(out.joint.map.uncertainty(), case.height(), case.width()).write(&save.join(format!("{name}_u.pgm")))?;
            }
            rows.push((name.clone(), evaluate(&pred, &case.mask).map_err(CliError::usage)?));
        }
    } else {
        let dir = a.pred.as_ref().expect("clap requires --pred without --checkpoint");
        extra.push(("pred", dir.display().to_string()));
        for (name, case) in &cases {
            let path = dir.join(format!("{name}.pgm"));
            let pred = pgm::to_mask(&Greymap::read(&path)?);
            let report = evaluate(&pred, &case.mask).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            rows.push((name.clone(), report));
        }
    }
    fsio::write_atomic(&a.out, metrics_csv(&rows).as_bytes())?;
    let mean = rows.iter().map(|r| r.1.dsc).sum::<f64>() / rows.len() as f64;
    extra.push(("mean_dsc", format!("{mean:.4}")));
    let text = provenance::render("eval", cfg, &extra);
    provenance::emit(&text, &provenance::sidecar(&a.out))
}

pub fn perturb_sweep(mut cfg: Config, a: &SweepArgs) -> Result<()> {
    override_key(&mut cfg, "sweep.kind", &a.kind)?;
    override_key(&mut cfg, "sweep.levels", &a.levels)?;
    override_key(&mut cfg, "sweep.seed", &a.seed)?;
    let specs = cfg.sweep_specs()?;
    let which = Modalities { ct: cfg.get("sweep.ct")?, pet: cfg.get("sweep.pet")? };
    let seed: u64 = cfg.get("sweep.seed")?;
    let params = cfg.synth()?;
    let cases: Vec<_> = dataset::read_dataset(&a.data, &params)?.into_iter().map(|(_, c)| c).collect();
    let heads = checkpoint::load(&a.checkpoint)?;
    let report = pipeline::perturb_sweep(&heads, &cases, &specs, which, seed).map_err(CliError::usage)?;
    let rank = report.rank_corr.map_or("nan".to_string(), |r| format!("{r:.4}"));
    let mut csv = String::from("level,mean_dsc,mean_u,rank_corr\n");
    for l in &report.levels {
        let _ = writeln!(csv, "{},{:.4},{:.6},{rank}", l.spec.level(), l.mean_dsc, l.mean_u);
    }
    fsio::write_atomic(&a.out, csv.as_bytes())?;
    let extra = [("data", a.data.display().to_string()), ("checkpoint", a.checkpoint.display().to_string()), ("rank_corr", rank)];
    let text = provenance::render("perturb-sweep", &cfg, &extra);
    provenance::emit(&text, &provenance::sidecar(&a.out))
}
