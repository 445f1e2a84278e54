use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evfuse::pgm::Greymap;
use evfuse::tensorfile;
use evfuse_core::opinion::OpinionMap;
use evfuse_core::tensor::Tensor;
use tempfile::TempDir;

fn evfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evfuse")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

// [C=2, H=3, W=4] evidence with a left/right split and a few strong pixels.
fn confident_map() -> Tensor {
    Tensor::from_fn(&[2, 3, 4], |i| {
        let (c, p) = (i / 12, i % 12);
        let x = p % 4;
        let fg = x >= 2;
        if (c == 1) == fg { 5.0 + p as f64 } else { 0.5 }
    })
}

fn write_tensor(dir: &Path, name: &str, t: &Tensor) -> PathBuf {
    let p = dir.join(name);
    tensorfile::write(&p, t).unwrap();
    p
}

#[test]
fn fuse_with_vacuous_map_returns_the_other_map() {
    let d = TempDir::new().unwrap();
    let m = confident_map();
    let a = write_tensor(d.path(), "m.evf", &m);
    let v = write_tensor(d.path(), "v.evf", &Tensor::zeros(&[2, 3, 4]));
    let out = d.path().join("f");
    let o = evfuse(&["fuse", s(&v), s(&a), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fused = OpinionMap::from_tensor(&tensorfile::read(&d.path().join("f.evf")).unwrap()).unwrap();
    let want = OpinionMap::from_evidence(&m).unwrap();
    for (p, q) in fused.pixels().zip(want.pixels()) {
        assert_eq!(p.uncertainty(), q.uncertainty());
        assert_eq!(p.belief(), q.belief());
    }
    let conflicts = fs::read_to_string(d.path().join("f_conflicts.csv")).unwrap();
    assert_eq!(conflicts, "x,y,normalizer\n");
    let prov = fs::read_to_string(d.path().join("f.evf.provenance")).unwrap();
    assert!(prov.contains("command=fuse") && prov.contains("fuse.eps_conflict=") && prov.contains("train.seed="));
    assert_eq!(stdout(&o), prov);
}

#[test]
fn fusing_a_map_with_itself_lowers_uncertainty_everywhere() {
    let d = TempDir::new().unwrap();
    let a = write_tensor(d.path(), "a.evf", &confident_map());
    let b = write_tensor(d.path(), "b.evf", &confident_map());
    let out = d.path().join("f");
    assert_eq!(code(&evfuse(&["fuse", s(&a), s(&b), "--out", s(&out)])), 0);
    let fused = OpinionMap::from_tensor(&tensorfile::read(&d.path().join("f.evf")).unwrap()).unwrap();
    let input = OpinionMap::from_evidence(&confident_map()).unwrap();
    for (f, i) in fused.uncertainty().iter().zip(input.uncertainty()) {
        assert!(f < i, "{f} !< {i}");
    }
    let u = Greymap::read(&d.path().join("f_u.pgm")).unwrap();
    assert_eq!((u.width, u.height, u.maxval), (4, 3, 255));
    for (code, v) in u.pixels.iter().zip(fused.uncertainty()) {
        assert_eq!(*code, (v * 255.0 + 0.5).floor() as u16);
    }
    let mask = Greymap::read(&d.path().join("f_mask.pgm")).unwrap();
    let want: Vec<u16> = (0..12).map(|p| if p % 4 >= 2 { 255 } else { 0 }).collect();
    assert_eq!(mask.pixels, want);
}

#[test]
fn opposed_one_hot_maps_are_reported_as_conflicts() {
    let d = TempDir::new().unwrap();
    let big = 1e14;
    let a = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { big } else { 0.0 });
    let b = Tensor::from_fn(&[2, 2, 2], |i| if i >= 4 { big } else { 0.0 });
    let (pa, pb) = (write_tensor(d.path(), "a.evf", &a), write_tensor(d.path(), "b.evf", &b));
    let out = d.path().join("f");
    assert_eq!(code(&evfuse(&["fuse", s(&pa), s(&pb), "--out", s(&out)])), 0);
    let report = fs::read_to_string(d.path().join("f_conflicts.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "x,y,normalizer");
    assert_eq!(lines.len(), 5, "{report}");
    assert!(lines[1].starts_with("0,0,"));
    let fused = OpinionMap::from_tensor(&tensorfile::read(&d.path().join("f.evf")).unwrap()).unwrap();
    assert!(fused.uncertainty().iter().all(|&u| u == 1.0));
}

#[test]
fn fuse_errors_map_to_exit_codes() {
    let d = TempDir::new().unwrap();
    let a = write_tensor(d.path(), "a.evf", &confident_map());
    let small = write_tensor(d.path(), "s.evf", &Tensor::zeros(&[2, 2, 4]));
    let flat = write_tensor(d.path(), "flat.evf", &Tensor::zeros(&[2, 12]));
    let junk = d.path().join("junk.evf");
    fs::write(&junk, b"not a tensor").unwrap();
    let neg = write_tensor(d.path(), "neg.evf", &Tensor::full(&[2, 3, 4], -1.0));
    let out = d.path().join("f");
    assert_eq!(code(&evfuse(&["fuse", s(&a), s(&small), "--out", s(&out)])), 2);
    assert_eq!(code(&evfuse(&["fuse", s(&a), s(&flat), "--out", s(&out)])), 2);
    assert_eq!(code(&evfuse(&["fuse", s(&a), "--out", s(&out)])), 2);
    assert_eq!(code(&evfuse(&["fuse", s(&a), s(&junk), "--out", s(&out)])), 3);
    assert_eq!(code(&evfuse(&["fuse", s(&a), s(&neg), "--out", s(&out)])), 3);
    assert_eq!(code(&evfuse(&["fuse", s(&a), s(&d.path().join("missing.evf")), "--out", s(&out)])), 3);
    assert!(!d.path().join("f.evf").exists());
}

#[test]
fn gradcheck_passes_for_each_loss() {
    for loss in ["dice", "ace", "kl", "up", "seg"] {
        let o = evfuse(&["gradcheck", "--loss", loss, "--trials", "100"]);
        assert_eq!(code(&o), 0, "{loss}: {}", stdout(&o));
        let line = stdout(&o).lines().find(|l| l.starts_with("loss=")).unwrap().to_string();
        assert!(line.starts_with(&format!("loss={loss} trials=100 max_rel_error=")) && line.ends_with(" ok"), "{line}");
    }
    let o = evfuse(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("loss=")).count(), 5);
}

#[test]
fn gradcheck_usage_and_failure_codes() {
    assert_eq!(code(&evfuse(&["gradcheck", "--trials", "0"])), 2);
    assert_eq!(code(&evfuse(&["gradcheck", "--trials", "x"])), 2);
    assert_eq!(code(&evfuse(&["gradcheck", "--loss", "mse"])), 2);
    let o = evfuse(&["gradcheck", "--loss", "kl", "--trials", "5", "--set", "gradcheck.tolerance=0"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("kl: error") && err.contains("evidence shape") && err.contains("labels"), "{err}");
}

#[test]
fn gradcheck_is_seeded() {
    let a = evfuse(&["gradcheck", "--loss", "seg", "--trials", "20", "--seed", "3"]);
    let b = evfuse(&["gradcheck", "--loss", "seg", "--trials", "20", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("gradcheck.seed=3"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&evfuse(&["--set", "train.learning_rate=1", "gradcheck"])), 2);
    let cfg = d.path().join("bad.cfg");
    fs::write(&cfg, "train.lr=0.1\nfuse.eps=1\n").unwrap();
    assert_eq!(code(&evfuse(&["--config", s(&cfg), "gradcheck"])), 2);
    assert_eq!(code(&evfuse(&["--config", s(&d.path().join("none.cfg")), "gradcheck"])), 3);
    assert_eq!(code(&evfuse(&["no-such-command"])), 2);
    assert_eq!(code(&evfuse(&["--help"])), 0);
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, seed: &str, count: &str) {
    let o = evfuse(&["synth", "--out", s(dir), "--seed", seed, "--count", count, "--set", "synth.height=32", "--set", "synth.width=32"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let d = TempDir::new().unwrap();
    synth(&d.path().join("a"), "7", "6");
    synth(&d.path().join("b"), "7", "6");
    synth(&d.path().join("c"), "8", "6");
    let (a, b, c) = (tree(&d.path().join("a")), tree(&d.path().join("b")), tree(&d.path().join("c")));
    assert_eq!(a.len(), 6 * 4 + 1);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let prov = fs::read_to_string(d.path().join("a/provenance.txt")).unwrap();
    assert!(prov.contains("synth.seed=7") && prov.contains("synth.height=32"));
}

#[test]
fn eval_on_identical_masks_scores_100() {
    let d = TempDir::new().unwrap();
    let data = d.path().join("data");
    synth(&data, "7", "5");
    let pred = d.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for i in 0..5 {
        let name = format!("case_{i:04}");
        fs::copy(data.join(&name).join("mask.pgm"), pred.join(format!("{name}.pgm"))).unwrap();
    }
    let out = d.path().join("m.csv");
    let o = evfuse(&["eval", "--data", s(&data), "--pred", s(&pred), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("case,dsc,jaccard,hd95,sens,pre,flags"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!((f[1], f[2], f[3]), ("100.0000", "100.0000", "0.0000"), "{r}");
    }
    assert!(fs::read_to_string(d.path().join("m.csv.provenance")).unwrap().contains("mean_dsc=100.0000"));
}

#[test]
fn missing_paths_exit_3() {
    let d = TempDir::new().unwrap();
    let nowhere = d.path().join("nowhere");
    let out = d.path().join("o.csv");
    assert_eq!(code(&evfuse(&["eval", "--data", s(&nowhere), "--pred", s(&nowhere), "--out", s(&out)])), 3);
    assert_eq!(code(&evfuse(&["train-toy", "--data", s(&nowhere), "--out", s(&out)])), 3);
    let data = d.path().join("data");
    synth(&data, "1", "2");
    assert_eq!(code(&evfuse(&["eval", "--data", s(&data), "--pred", s(&nowhere), "--out", s(&out)])), 3);
    assert_eq!(code(&evfuse(&["perturb-sweep", "--data", s(&data), "--checkpoint", s(&nowhere), "--out", s(&out)])), 3);
}

#[test]
fn train_eval_and_sweep_round_trip() {
    let d = TempDir::new().unwrap();
    let (data, val) = (d.path().join("train"), d.path().join("val"));
    synth(&data, "7", "8");
    synth(&val, "9", "4");
    let train = |out: &Path| {
        let o = evfuse(&["train-toy", "--data", s(&data), "--val", s(&val), "--out", s(out), "--epochs", "3", "--set", "train.batch_size=4"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (ck, ck2) = (d.path().join("ck"), d.path().join("ck2"));
    train(&ck);
    train(&ck2);
    assert_eq!(tree(&ck), tree(&ck2));
    let losses = fs::read_to_string(ck.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);
    assert!(losses.starts_with("epoch,beta,total,ct,pet,fused_branch,joint,val_dsc\n1,0.010000,"));
    let manifest = fs::read_to_string(ck.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\nseed=0\n") && manifest.contains("\nepoch=3\n") && manifest.contains("train.epochs=3"));

    let (m1, saved) = (d.path().join("m1.csv"), d.path().join("saved"));
    let o = evfuse(&["eval", "--data", s(&val), "--checkpoint", s(&ck), "--save", s(&saved), "--out", s(&m1)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m2 = d.path().join("m2.csv");
    assert_eq!(code(&evfuse(&["eval", "--data", s(&val), "--pred", s(&saved), "--out", s(&m2)])), 0);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert!(saved.join("case_0000_u.pgm").exists());

    let sweep = d.path().join("sweep.csv");
    let o = evfuse(&["perturb-sweep", "--data", s(&val), "--checkpoint", s(&ck), "--out", s(&sweep)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&sweep).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(csv.lines().next(), Some("level,mean_dsc,mean_u,rank_corr"));
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["0", "0.1", "0.2", "0.3"]);
    assert!(rows.iter().all(|r| r[3] == rows[0][3]));
    let again = d.path().join("sweep2.csv");
    evfuse(&["perturb-sweep", "--data", s(&val), "--checkpoint", s(&ck), "--out", s(&again)]);
    assert_eq!(fs::read(&sweep).unwrap(), fs::read(&again).unwrap());

    let masked = d.path().join("mask.csv");
    let o = evfuse(&["perturb-sweep", "--data", s(&val), "--checkpoint", s(&ck), "--out", s(&masked), "--kind", "mask", "--levels", "0,0.04,0.08"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&masked).unwrap().lines().count(), 4);
    assert_eq!(code(&evfuse(&["perturb-sweep", "--data", s(&val), "--checkpoint", s(&ck), "--out", s(&masked), "--kind", "blur"])), 2);
}
