//! End-to-end runs of the `lpnas` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn lpnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpnas"))
        .args(args)
        .env("LPNAS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = lpnas(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path -> bytes of every file under `dir`.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &[&str] = &[
    "--image-size", "16", "--n-train", "12", "--n-eval", "6", "--e-fp32", "1", "--e-lp", "1",
    "--set", "warmup_epochs=1", "--set", "batch_size=6",
];

fn search_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec!["search", "--out", out, "--set", "k_best=1", "--set", "n_random=1"];
    a.extend_from_slice(TINY);
    a.extend_from_slice(extra);
    a
}

#[test]
fn gen_data_is_reproducible_and_complete() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen-data", "--seed", "7", "--out", p(&a)]);
    ok(&["gen-data", "--seed", "7", "--out", p(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    let count = |sub: &str| ta.iter().filter(|(r, _)| r.starts_with(sub)).count();
    // image + mask per sample, plus the index.
    assert_eq!(count("train/images"), 200);
    assert_eq!(count("train/masks"), 200);
    assert_eq!(count("eval/images"), 50);
    assert_eq!(count("eval/masks"), 50);
}

#[test]
fn bad_image_size_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = lpnas(&["gen-data", "--image-size", "48", "--out", p(t.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("48"));
    let o = lpnas(&["gen-data", "--set", "nonsense=1", "--out", p(t.path())]);
    assert_eq!(code(&o), 1);
    let o = lpnas(&["frobnicate"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_file_and_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, "image_size=64\nn_train=3\nn_eval=2\n").unwrap();
    let out = t.path().join("d");
    ok(&["gen-data", "--config", p(&cfg), "--image-size", "16", "--out", p(&out)]);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\nimage_size=16\n"));
    assert!(manifest.contains("\nn_train=3\n"));
    std::fs::write(&cfg, "image_size=sixteen\n").unwrap();
    assert_eq!(code(&lpnas(&["gen-data", "--config", p(&cfg), "--out", p(&out)])), 2);
}

#[test]
fn smoke_search_is_fast_and_complete() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("run");
    let start = Instant::now();
    ok(&search_args(p(&out), &["--generations", "1", "--population", "2", "--branch", "ptq"]));
    assert!(start.elapsed().as_secs() < 120);
    for f in ["manifest.txt", "ptq/history.csv", "ptq/best.lpck", "ptq/best_genotype.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join("aligned").exists());
    assert!(!out.join(".lock").exists());
    let hist = std::fs::read_to_string(out.join("ptq/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3);
    let g = ok(&["export-genotype", p(&out)]);
    let best = std::fs::read_to_string(out.join("ptq/best_genotype.txt")).unwrap();
    assert_eq!(g, best);
    assert_eq!(ok(&["export-genotype", p(&out.join("ptq/best.lpck"))]), best);
}

fn seeds(csv: &str) -> Vec<String> {
    // Genotypes may be quoted but never contain quotes, so the seed is the
    // last field.
    csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().to_string()).collect()
}

#[test]
fn paired_search_rerun_resume_and_report() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    let g2 = ["--generations", "2", "--population", "4", "--seed", "5"];
    ok(&search_args(p(&a), &g2));
    ok(&search_args(p(&b), &g2));
    let ta = tree(&a);
    assert_eq!(ta, tree(&b), "same manifest, same bytes");

    let ptq = std::fs::read_to_string(a.join("ptq/history.csv")).unwrap();
    let aligned = std::fs::read_to_string(a.join("aligned/history.csv")).unwrap();
    assert_eq!(seeds(&ptq), seeds(&aligned));
    assert!(ptq.lines().skip(1).all(|l| l.contains(",ptq,")));

    // Running one generation and then extending to two resumes from disk.
    ok(&search_args(p(&c), &["--generations", "1", "--population", "4", "--seed", "5"]));
    let out = ok(&search_args(p(&c), &g2));
    assert!(out.contains("(1 resumed)"), "{out}");
    assert_eq!(
        std::fs::read(c.join("ptq/history.csv")).unwrap(),
        ptq.as_bytes(),
        "resumed history matches the uninterrupted one"
    );
    assert_eq!(std::fs::read(c.join("aligned/history.csv")).unwrap(), aligned.as_bytes());

    // A different configuration may not reuse the directory.
    let o = lpnas(&search_args(p(&a), &["--generations", "2", "--population", "4", "--seed", "6"]));
    assert_eq!(code(&o), 2);

    let (ra, rb) = (t.path().join("ra"), t.path().join("rb"));
    ok(&["report", p(&a), "--out", p(&ra)]);
    ok(&["report", p(&b), "--out", p(&rb)]);
    let files = tree(&ra);
    assert_eq!(files, tree(&rb));
    let names: Vec<_> = files.iter().map(|(n, _)| n.to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["fitness.svg", "gap.csv", "iou_fps.svg", "progression.svg", "summary.csv"]);

    // Reporting a single branch gives three plots and one CSV.
    let single = t.path().join("single");
    std::fs::create_dir_all(single.join("ptq")).unwrap();
    std::fs::copy(a.join("ptq/history.csv"), single.join("ptq/history.csv")).unwrap();
    let rs = t.path().join("rs");
    ok(&["report", p(&single), "--out", p(&rs)]);
    let n: Vec<_> = tree(&rs).into_iter().map(|(n, _)| n).collect();
    assert_eq!(n.len(), 4);
    assert_eq!(n.iter().filter(|x| x.extension().unwrap() == "svg").count(), 3);

    // Two ptq histories cannot be reported together.
    let o = lpnas(&["report", p(&a), p(&single), "--out", p(&t.path().join("bad"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn lock_file_blocks_concurrent_writers() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "").unwrap();
    let o = lpnas(&search_args(p(&out), &["--generations", "1", "--population", "2"]));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn train_single_candidate() {
    let t = tempfile::tempdir().unwrap();
    let ck = t.path().join("net.lpck");
    let mut args = vec!["train", "--genotype", "B:CA,k3,c8,aR;H", "--checkpoint", p(&ck)];
    args.extend_from_slice(TINY);
    let out = ok(&args);
    let lines: Vec<_> = out.lines().collect();
    assert!(lines[0].starts_with("ptq params=242 "), "{out}");
    for key in ["fps=", "gpu_miou=", "device_miou="] {
        assert!(lines[0].contains(key));
    }
    assert_eq!(lines.len(), 2);

    args.push("--finetune");
    let out = ok(&args);
    assert!(out.lines().nth(1).unwrap().starts_with("aligned params=242 "), "{out}");

    let mut eval = vec!["eval", "--checkpoint", p(&ck)];
    eval.extend_from_slice(TINY);
    assert!(ok(&eval).contains("genotype=B:CA,k3,c8,aR;H"));
}

#[test]
fn malformed_genotype_reports_position() {
    let o = lpnas(&["train", "--genotype", "B:CA,k3,c8,aR;Q:1;H"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("at byte 14"), "{err}");
    assert!(err.contains("              ^"), "{err}");
}
