use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfm")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out, "--dims", "4,4,4"];
    args.extend_from_slice(extra);
    dfm(&args)
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_counts_segments() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let flags = ["--teachers", "30", "--segments-per-teacher", "4", "--seed", "7"];
    let oa = synth(&a, &flags);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    let text = stdout(&oa);
    assert!(text.contains("segments: 120"), "{text}");
    let hist: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("label histogram")).skip(1).collect();
    assert!(hist.len() >= 7, "{text}");
    for r in ["1.0", "1.5", "2.0", "2.5", "3.0", "3.5", "4.0"] {
        assert!(hist.iter().any(|l| l.split_whitespace().next() == Some(r)), "no histogram row {r}: {text}");
    }
    assert!(synth(&b, &flags).status.success());
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 120 + 2);
    assert!(fa == fb, "reruns differ");
}

#[test]
fn malformed_manifest_fails_with_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, &["--teachers", "5", "--segments-per-teacher", "2"]).status.success());
    let manifest = data.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, &text[..text.len() / 2]).unwrap();
    let o = dfm(&["irr", "--data", data.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("manifest.json"), "{err}");

    let o = dfm(&["cv", "--data", tmp.path().join("missing").to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(dfm(&["cv", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn cv_correlate_and_ablate_write_reports() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, &["--teachers", "10", "--segments-per-teacher", "2", "--seed", "3"]).status.success());
    let d = data.to_str().unwrap();
    let quick = |epochs: &'static str| ["--heads", "2", "--max-epochs", epochs, "--lr", "1e-3", "--batch-size", "8", "--modules", "1"];

    let cv = tmp.path().join("cv");
    let mut args = vec!["cv", "--data", d, "--out", cv.to_str().unwrap()];
    args.extend_from_slice(&quick("2"));
    let o = dfm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(cv.join("report.txt")).unwrap();
    for name in ["Nature of Discourse", "Questioning", "Explanations"] {
        let line = report.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{report}"));
        // mean followed by its standard error in parentheses
        assert!(line.contains('(') && line.contains(')'), "{line}");
    }
    let tsv = fs::read_to_string(cv.join("predictions.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 20 * 3);

    let o = dfm(&["correlate", "--data", d, "--predictions", cv.join("predictions.tsv").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.contains("***"), "{table}");
    assert!(table.to_lowercase().contains("model"), "{table}");

    let ab = tmp.path().join("ab");
    let mut args = vec!["ablate", "--data", d, "--out", ab.to_str().unwrap(), "--n-outer", "2", "--n-inner", "2"];
    args.extend_from_slice(&quick("1"));
    let o = dfm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<String> = fs::read_to_string(ab.join("ablation.txt"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect();
    assert_eq!(rows, ["T", "A", "V", "T+A", "T+A+V"]);
}

#[test]
fn gradcheck_and_irr_commands() {
    let o = dfm(&["gradcheck", "--only", "tanh,linear", "--points", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("tanh") && text.contains("linear") && text.contains("0 failed"), "{text}");
    let o = dfm(&["gradcheck", "--only", "tanh", "--points", "2", "--inject-fault", "tanh"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let o = dfm(&["gradcheck", "--list"]);
    assert!(stdout(&o).lines().count() >= 40);

    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, &["--teachers", "6", "--segments-per-teacher", "2"]).status.success());
    let o = dfm(&["irr", "--data", data.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("Questioning"));
}
