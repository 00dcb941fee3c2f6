use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spheregate"))
}

fn run(work: &Path, args: &[&str]) -> Output {
    bin().arg("--work-dir").arg(work).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set", "synth.n_families=5",
    "--set", "synth.dim=8",
    "--set", "synth.samples_per_family=40",
    "--set", "synth.n_ood_families=1",
    "--set", "synth.n_proxy_families=1",
    "--set", "stage1.hidden=16,8",
    "--set", "stage1.epochs=5",
    "--set", "fusion.epochs=5",
];

fn with_small(cmd: &str) -> Vec<&str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn synth_writes_every_row_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for w in [&a, &b] {
        let o = run(w, &["synth", "--set", "synth.n_families=5", "--set", "synth.samples_per_family=200"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let features = std::fs::read_to_string(a.join("data/features.tsv")).unwrap();
    let rows = features.lines().filter(|l| !l.starts_with('#') && !l.starts_with("dim=")).count();
    assert_eq!(rows, 1000);
    for f in ["data/features.tsv", "data/manifest.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = run(&a, &["synth", "--seed", "8", "--set", "synth.n_families=5", "--set", "synth.samples_per_family=200"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read_to_string(a.join("data/features.tsv")).unwrap(), features);
}

#[test]
fn stages_chain_and_score_reports_each_sample() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for stage in ["synth", "train", "fit-boundaries", "train-fusion", "evaluate"] {
        let o = run(w, &with_small(stage));
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for f in ["stage1.ckpt", "boundaries.txt", "diagnostics.txt", "fusion.ckpt", "report/metrics.txt", "report/confusion.tsv", "report/predictions.tsv", "report/roc.tsv"] {
        assert!(w.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(w.join("report/metrics.txt")).unwrap();
    assert!(metrics.contains("\nauroc="));
    assert!(metrics.contains("\nar_ood="));

    let input = w.join("in.tsv");
    std::fs::write(&input, "dim=8 scheme=synthetic\na\t0,0,0,0,0,0,0,0\nb\t1,1,1,1,1,1,1,1\n").unwrap();
    let o = run(w, &["score", "--input", input.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("id=a\t") && lines[1].starts_with("id=b\t"));
    for key in ["gate=", "ood_score=", "final=", "z="] {
        assert!(lines[0].contains(key), "{key} in {}", lines[0]);
    }

    let o = run(w, &["score", "--policy", "gate_priority", "--line", "x\t0.9,0.9,0.9,0.9,0.9,0.9,0.9,0.9"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_feature_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.tsv");
    let o = run(dir.path(), &["score", "--input", missing.to_str().unwrap()]);
    // no checkpoints either; the stack is loaded first
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage1.ckpt"));

    let o = run(
        dir.path(),
        &[
            "pipeline",
            "--set", "data.source=features",
            "--set", &format!("data.features={}", missing.display()),
            "--set", &format!("data.manifest={}", dir.path().join("m.tsv").display()),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("m.tsv") || stderr(&o).contains("nowhere.tsv"), "{}", stderr(&o));
}

#[test]
fn malformed_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for stage in ["synth", "train", "fit-boundaries", "train-fusion"] {
        assert!(run(w, &with_small(stage)).status.success());
    }
    let bad = w.join("bad.tsv");
    std::fs::write(&bad, "dim=8 scheme=synthetic\na\t0,0,zero,0,0,0,0,0\n").unwrap();
    let o = run(w, &["score", "--input", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("bad.tsv") && msg.contains(":2"), "{msg}");

    let o = run(w, &["score", "--line", "1,2,3"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = w.join("absent.tsv");
    let o = run(w, &["score", "--input", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.tsv"), "{}", stderr(&o));
}

#[test]
fn featurize_reads_family_directories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus");
    for (f, n) in [("alpha", 12), ("beta", 12), ("gamma", 12), ("empty", 0)] {
        std::fs::create_dir_all(data.join(f)).unwrap();
        for i in 0..n {
            let bytes: Vec<u8> = (0..300u32).map(|j| (j * (i + 1) + f.len() as u32 * 40) as u8).collect();
            std::fs::write(data.join(f).join(format!("s{i}.bin")), bytes).unwrap();
        }
    }
    std::fs::write(data.join("beta").join("blank.bin"), b"").unwrap();
    let w = dir.path().join("work");
    let o = run(
        &w,
        &["featurize", "--dir", data.to_str().unwrap(), "--scheme", "byte_histogram_256", "--set", "data.ood_families=gamma"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("skipped"), "{out}");
    assert!(out.contains("gamma (ood)"), "{out}");
    let features = std::fs::read_to_string(w.join("data/features.tsv")).unwrap();
    assert!(features.starts_with("dim=256 scheme=byte_histogram_256"), "{}", &features[..40]);
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["synth", "--set", "synth.n_families=1"],
        vec!["synth", "--set", "no.such.key=1"],
        vec!["synth", "--band", "-1"],
        vec!["synth", "--policy", "whatever"],
        vec!["synth", "--set", "synth.n_ood_families=9"],
    ] {
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error: "));
    }
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\nstage1.dropout = 2\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).arg("synth").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
