use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_MODEL: &[&str] = &[
    "--image-size",
    "32",
    "--embedding-dim",
    "8",
    "--encoder-channels",
    "4,6,8",
    "--decoder-channels",
    "8,6,4",
];

fn fabnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fabnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let o = fabnet(&[
        "gen-data",
        "--out",
        s(&out),
        "--identities",
        "10",
        "--frames",
        "4",
        "--size",
        "32",
        "--seed",
        seed,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn train(data: &Path, out: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--max-steps",
        steps,
        "--val-every",
        "2",
        "--val-pairs",
        "8",
    ];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(extra);
    fabnet(&args)
}

/// Every file under `root` with its bytes, sorted by path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_output_matches_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    for cmd in ["gen-data", "train", "probe", "retrieve", "verify"] {
        let got = stdout(&fabnet(&[cmd, "--help"]));
        let path = dir.join(format!("{cmd}_help.txt"));
        if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &got).unwrap();
        }
        let want = fs::read_to_string(&path)
            .unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
        assert_eq!(
            got, want,
            "{cmd} --help changed; rerun with UPDATE_SNAPSHOTS=1 if intended"
        );
    }
}

#[test]
fn every_optional_flag_documents_its_default() {
    for cmd in ["gen-data", "train", "probe", "retrieve", "verify"] {
        let help = stdout(&fabnet(&[cmd, "--help"]));
        let usage = help
            .lines()
            .find(|l| l.starts_with("Usage:"))
            .unwrap()
            .to_string();
        let lines: Vec<&str> = help.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            let t = line.trim_start();
            if !t.starts_with("--") || t.starts_with("--help") {
                continue;
            }
            let flag = t.split_whitespace().next().unwrap();
            let takes_value = t.contains('<');
            let required = usage.contains(&format!("{flag} <"));
            let text = format!("{} {}", line, lines.get(i + 1).copied().unwrap_or(""));
            let optional_path = flag == "--resume";
            assert!(
                !takes_value || required || optional_path || text.contains("[default:"),
                "{cmd} {flag} has no documented default"
            );
        }
    }
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(fabnet(&["gen-data"]).status.code(), Some(2));
    assert_eq!(fabnet(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        fabnet(&[
            "probe",
            "--task",
            "age",
            "--data",
            "d",
            "--checkpoint",
            "c",
            "--out",
            "o"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(fabnet(&[]).status.code(), Some(2));
    assert_eq!(fabnet(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = train(&missing, &dir.path().join("run"), "4", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn gen_data_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = fabnet(&[
        "gen-data",
        "--identities",
        "20",
        "--frames",
        "3",
        "--size",
        "32",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("15 train, 3 val, 2 test"));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    for (split, n) in [("train", 15), ("val", 3), ("test", 2)] {
        assert_eq!(
            manifest
                .lines()
                .filter(|l| l.ends_with(&format!(",{split}")))
                .count(),
            n
        );
    }
    let a = gen(dir.path(), "4");
    let a_tree = tree(&a);
    fs::remove_dir_all(&a).unwrap();
    assert_eq!(a_tree, tree(&gen(dir.path(), "4")));
}

#[test]
fn train_writes_monotone_log_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = train(&data, &a, "4", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("batch 8,"));
    assert!(train(&data, &b, "4", &[]).status.success());
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next()?.parse().ok())
        .collect();
    assert_eq!(steps, vec![0, 2, 4]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn curriculum_and_sources_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "2");
    let o = train(&data, &dir.path().join("c"), "4", &["--curriculum"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("batch 32,"));
    let o = train(
        &data,
        &dir.path().join("m"),
        "4",
        &["--sources", "3", "--optimizer", "adam"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("m/final.ckpt");
    let model: fabnet_core::model::FabNet<f32> =
        fabnet_core::model::load_model(&ckpt, None).unwrap();
    assert!(model.config().multi_source);
    assert_eq!(model.config().n_sources, 3);
}

#[test]
fn resume_continues_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "3");
    let full = dir.path().join("full");
    assert!(train(&data, &full, "4", &[]).status.success());
    let half = dir.path().join("half");
    assert!(train(&data, &half, "2", &[]).status.success());
    let ckpt = half.join("final.ckpt");
    let o = train(&data, &half, "4", &["--resume", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(full.join("final.ckpt")).unwrap(),
        fs::read(half.join("final.ckpt")).unwrap()
    );
}

#[test]
fn probe_and_retrieve_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "5");
    let run = dir.path().join("run");
    assert!(train(&data, &run, "4", &[]).status.success());
    let ckpt = run.join("final.ckpt");
    let out = dir.path().join("eval");

    let o = fabnet(&[
        "probe",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--task",
        "landmarks",
        "--out",
        s(&out),
        "--epochs",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("landmark_error_pct"));
    let csv = fs::read_to_string(out.join("probe_landmarks.csv")).unwrap();
    assert!(csv.starts_with("task,metric,value\n"));

    let o = fabnet(&[
        "retrieve",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
        "--split",
        "train",
        "--k",
        "5",
        "--queries",
        "7",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("retrieval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7 * 5);
    let mut per_query = std::collections::BTreeMap::new();
    for r in rows {
        *per_query
            .entry(r.split(',').next().unwrap().to_string())
            .or_insert(0) += 1;
    }
    assert!(per_query.values().all(|&n| n == 5));
    assert!(fs::read_to_string(out.join("retrieval_summary.txt"))
        .unwrap()
        .contains("seed=0"));
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let o = fabnet(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn thread_flag_is_accepted() {
    let o = fabnet(&["--threads", "1", "verify"]);
    assert!(o.status.success());
}
