use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossloc_core::retrieval::read_evdb;

fn crossloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = crossloc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    crossloc(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Small world plus a briefly trained checkpoint.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
}

impl Fixture {
    fn new(paradigm: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let world = root.join("world");
        ok(&[
            "gen-world",
            "--seed",
            "5",
            "--places",
            "12",
            "--runs",
            "2",
            "--out",
            s(&world),
        ]);
        let ckpt = root.join("m.ckpt");
        ok(&[
            "train",
            "--profile",
            "synthbench",
            "--paradigm",
            paradigm,
            "--epochs",
            "2",
            "--runs-dir",
            s(&world.join("runs")),
            "--out-checkpoint",
            s(&ckpt),
        ]);
        Self {
            _dir: dir,
            root,
            ckpt,
        }
    }

    fn run_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("world/runs/run_{i:02}"))
    }
}

#[test]
fn gen_world_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "gen-world",
            "--seed",
            "3",
            "--places",
            "10",
            "--runs",
            "3",
            "--out",
            s(out),
        ]);
    }
    let runs: Vec<_> = fs::read_dir(a.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 3);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(
        code(&[
            "gen-world",
            "--places",
            "4",
            "--out",
            s(&dir.path().join("c"))
        ]),
        1
    );
}

#[test]
fn train_writes_checkpoint_and_log() {
    for paradigm in ["combined", "teacher-student"] {
        let f = Fixture::new(paradigm);
        assert!(f.ckpt.is_file());
        let log = fs::read_to_string(f.root.join("m.ckpt.log.jsonl")).unwrap();
        let stages: Vec<String> = log
            .lines()
            .map(|l| l.split('"').nth(3).unwrap().to_string())
            .collect();
        let want: &[&str] = if paradigm == "combined" {
            &["combined", "combined"]
        } else {
            // teacher first, then the student
            &["teacher", "teacher", "student", "student"]
        };
        assert_eq!(stages, want);
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(
        code(&["train", "--paradigm", "siamese", "--out-checkpoint", "x"]),
        1
    );
    assert_eq!(code(&["no-such-command"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nmargin = 0.0\n").unwrap();
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&cfg),
            "--runs-dir",
            "x",
            "--out-checkpoint",
            "y"
        ]),
        1
    );
}

#[test]
fn embed_query_and_eval() {
    let f = Fixture::new("combined");
    let evdb = f.root.join("db.evdb");
    ok(&[
        "embed",
        "--checkpoint",
        s(&f.ckpt),
        "--run",
        s(&f.run_dir(0)),
        "--modality",
        "3D",
        "--out-evdb",
        s(&evdb),
    ]);
    assert_eq!(read_evdb(&evdb).unwrap().len(), 12);

    // a database member queried with its own media comes first; k > N
    // returns the whole ranking, sorted by distance
    let out = ok(&[
        "query",
        "--evdb",
        s(&evdb),
        "--checkpoint",
        s(&f.ckpt),
        "--query-run",
        s(&f.run_dir(0)),
        "--query-sample",
        "4",
        "--modality",
        "3D",
        "--k",
        "50",
    ]);
    let rows: Vec<Vec<&str>> = out
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0][1], "4");
    assert_eq!(rows[0][3], "true");
    let d: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    let q = |k: &str| {
        code(&[
            "query",
            "--evdb",
            s(&evdb),
            "--checkpoint",
            s(&f.ckpt),
            "--query-run",
            s(&f.run_dir(0)),
            "--query-sample",
            "4",
            "--modality",
            "2D",
            "--k",
            k,
        ])
    };
    assert_eq!(q("0"), 1);

    // corrupt magic: data error naming the file
    let bad = f.root.join("bad.evdb");
    let mut bytes = fs::read(&evdb).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&bad, bytes).unwrap();
    let out = crossloc(&[
        "query",
        "--evdb",
        s(&bad),
        "--checkpoint",
        s(&f.ckpt),
        "--query-run",
        s(&f.run_dir(0)),
        "--query-sample",
        "4",
        "--modality",
        "3D",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.evdb"));

    let runs = f.root.join("world/runs");
    for (protocol, header) in [
        ("standard", "db_spacing=5 m query_spacing=all"),
        ("sparse", "db_spacing=20 m query_spacing=10 m"),
    ] {
        let rep = f.root.join(protocol);
        let table = ok(&[
            "eval",
            "--runs-dir",
            s(&runs),
            "--checkpoint",
            s(&f.ckpt),
            "--protocol",
            protocol,
            "--report",
            s(&rep),
        ]);
        assert!(table.lines().next().unwrap().contains(header), "{table}");
        assert!(table.contains("recall@1%  recall@1  recall@5"));
        for p in ["2D-to-2D", "2D-to-3D", "3D-to-2D", "3D-to-3D"] {
            assert!(table.contains(p));
        }
        assert_eq!(fs::read_to_string(rep.join("summary.txt")).unwrap(), table);
        assert!(rep.join("records.txt").is_file() && rep.join("curves.csv").is_file());
    }
    // one run is not enough to evaluate
    let lone = f.root.join("lone");
    fs::create_dir_all(&lone).unwrap();
    let dst = lone.join("run_00");
    fs::create_dir_all(&dst).unwrap();
    for e in fs::read_dir(f.run_dir(0)).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, dst.join(p.file_name().unwrap())).unwrap();
    }
    let regions = f.root.join("world/regions.csv");
    assert_eq!(
        code(&[
            "eval",
            "--runs-dir",
            s(&lone),
            "--regions",
            s(&regions),
            "--checkpoint",
            s(&f.ckpt),
            "--report",
            s(&f.root.join("r")),
        ]),
        2
    );
}
