use std::path::Path;
use std::process::{Command, Output};

use ribsup_core::impipe::read_pgm;

fn ribsup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ribsup")).args(args).output().expect("spawn ribsup")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn phantoms(dir: &Path, count: &str) {
    let o = ribsup(&["phantom-gen", "--out", p(dir), "--count", count, "--size", "64", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_subcommands_and_flags() {
    let o = ribsup(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for cmd in ["phantom-gen", "train", "suppress", "evaluate", "ablate", "theory-check"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    let flags: [(&str, &[&str]); 5] = [
        ("phantom-gen", &["--out", "--count", "--size", "--seed"]),
        ("train", &["--config", "--data", "--out"]),
        ("suppress", &["--ckpt", "--in", "--out", "--match-histogram"]),
        ("evaluate", &["--pred", "--gt", "--mask", "--out"]),
        ("ablate", &["--data", "--out", "--config"]),
    ];
    for (cmd, want) in flags {
        let text = stdout(&ribsup(&[cmd, "--help"]));
        for f in want {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&ribsup(&["--bogus"])), 1);
    assert_eq!(code(&ribsup(&["train", "--out", "x"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = ribsup(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ribsup(&["phantom-gen", "--out", p(&dir.path().join("d")), "--size", "63"])), 2);
    let missing = dir.path().join("missing");
    assert_eq!(code(&ribsup(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))])), 2);
}

#[test]
fn phantom_gen_split_and_rerun_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    phantoms(&a, "10");
    phantoms(&b, "10");
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    let count = |s: &str| manifest.lines().filter(|l| l.split(',').nth(1) == Some(s)).count();
    assert_eq!((count("train"), count("val"), count("test")), (8, 1, 1));
    assert_eq!(manifest, std::fs::read_to_string(b.join("manifest.csv")).unwrap());
    for split in ["train", "val", "test"] {
        for e in std::fs::read_dir(a.join(split)).unwrap() {
            let name = e.unwrap().file_name();
            assert_eq!(std::fs::read(a.join(split).join(&name)).unwrap(), std::fs::read(b.join(split).join(&name)).unwrap());
        }
    }
}

#[test]
fn theory_check_reports_equilibrium_value() {
    let o = ribsup(&["theory-check"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("equilibrium value -1.386294"));
}

#[test]
fn train_suppress_evaluate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, "10");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "steps = 4\neval_every = 2\ngan_on = false\n").unwrap();
    let out = dir.path().join("model");
    let o = ribsup(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "loss.csv", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    // With the discriminator off its loss column stays constant.
    let log = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let jd: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(jd.len(), 5);
    assert!(jd.iter().all(|v| *v == jd[0]));

    let input = data.join("test").join(
        std::fs::read_dir(data.join("test"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .find(|n| n.ends_with("_composite.pgm"))
            .unwrap(),
    );
    let ckpt = out.join("best.ckpt");
    let (s1, s2) = (dir.path().join("s1.pgm"), dir.path().join("s2.pgm"));
    for s in [&s1, &s2] {
        assert_eq!(code(&ribsup(&["suppress", "--ckpt", p(&ckpt), "--in", p(&input), "--out", p(s), "--match-histogram"])), 0);
    }
    assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
    let (src, res) = (read_pgm(&input).unwrap(), read_pgm(&s1).unwrap());
    assert_eq!((res.width, res.height), (src.width, src.height));

    // Predictions equal to ground truth score infinite PSNR and unit SSIM.
    let gt = data.join("train");
    let pred = dir.path().join("pred");
    std::fs::create_dir(&pred).unwrap();
    for e in std::fs::read_dir(&gt).unwrap() {
        let name = e.unwrap().file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_clean.pgm") {
            std::fs::copy(gt.join(&name), pred.join(format!("{id}_pred.pgm"))).unwrap();
        }
    }
    let csv = dir.path().join("scores.csv");
    let o = ribsup(&["evaluate", "--pred", p(&pred), "--gt", p(&gt), "--mask", p(&gt), "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "image,psnr,psnr_roi,ssim_roi");
    assert_eq!(rows.len(), 1 + 8);
    for r in &rows[1..] {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(&cols[1..], ["inf", "inf", "1"], "{r}");
    }
    assert!(dir.path().join("scores_nps.csv").exists());
}

#[test]
fn zero_steps_saves_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, "10");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "steps = 0\n").unwrap();
    let out = dir.path().join("model");
    assert_eq!(code(&ribsup(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)])), 0);
    assert!(out.join("best.ckpt").exists());
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 2);
}
