use std::path::Path;
use std::process::{Command, Output};

fn tagcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A config small enough to train in a second or two.
const SMALL: &str = "\
nodes=40
p_in=0.3
p_out=0.03
tokens_per_node=6
vocab_per_community=10
dim=8
max_seq_len=8
max_epochs=2
batch_size=16
negatives_per_query=10
probe_epochs=20
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let o = tagcl(
        &[
            "--config",
            "small.cfg",
            "--seed",
            "3",
            "gen",
            "--out",
            "g.tag",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    dir
}

#[test]
fn gen_is_deterministic_and_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args = [
        "gen",
        "--nodes",
        "200",
        "--communities",
        "2",
        "--seed",
        "7",
        "--out",
    ];
    for out in ["a.tag", "b.tag"] {
        let mut a = args.to_vec();
        a.push(out);
        assert_eq!(code(&tagcl(&a, p)), 0);
    }
    let read = |f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read("a.tag"), read("b.tag"));
    let meta = String::from_utf8(read("a.tag.meta")).unwrap();
    assert!(
        meta.contains("nodes=200\n") && meta.contains("seed=7\n"),
        "{meta}"
    );
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = tagcl(&["gen", "--communities", "0", "--out", "x.tag"], p);
    assert_eq!(code(&o), 1);
    assert!(!p.join("x.tag").exists());
    assert_eq!(
        code(&tagcl(&["--set", "nonsense=1", "gen", "--out", "x.tag"], p)),
        1
    );
    assert_eq!(code(&tagcl(&["frobnicate"], p)), 1);
    assert_eq!(code(&tagcl(&["verify", "--suite", "nope"], p)), 1);
    assert_eq!(code(&tagcl(&["--help"], p)), 0);
}

#[test]
fn train_eval_round_trip() {
    let dir = setup();
    let p = dir.path();
    let o = tagcl(
        &[
            "--config",
            "small.cfg",
            "train",
            "--graph",
            "g.tag",
            "--out",
            "run",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ablation=none"));
    let run = p.join("run");
    for f in [
        "config.txt",
        "graph.tag",
        "splits.csv",
        "checkpoint.bin",
        "history.csv",
        "run.txt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    // The graph copy is byte-identical to the input.
    assert_eq!(
        std::fs::read(run.join("graph.tag")).unwrap(),
        std::fs::read(p.join("g.tag")).unwrap()
    );

    let link = tagcl(&["eval", "--run", "run", "--task", "link"], p);
    assert_eq!(code(&link), 0);
    let text = stdout(&link);
    for key in ["p_at_1=", "ndcg=", "mrr="] {
        assert!(text.contains(key), "{text}");
    }
    let node = tagcl(
        &[
            "eval",
            "--run",
            "run",
            "--task",
            "node",
            "--mode",
            "inductive",
        ],
        p,
    );
    assert_eq!(code(&node), 0, "{}", String::from_utf8_lossy(&node.stderr));
    assert!(stdout(&node).contains("mode=inductive"));
    assert!(run.join("checkpoint_inductive.bin").exists());

    // Append-only: retraining into the same directory is refused.
    let again = tagcl(
        &[
            "--config",
            "small.cfg",
            "train",
            "--graph",
            "g.tag",
            "--out",
            "run",
        ],
        p,
    );
    assert_ne!(code(&again), 0);
}

#[test]
fn ablation_flag_zeroes_lambda() {
    let dir = setup();
    let p = dir.path();
    let o = tagcl(
        &[
            "--config",
            "small.cfg",
            "train",
            "--graph",
            "g.tag",
            "--ablate",
            "nc",
            "--out",
            "r",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    let cfg = std::fs::read_to_string(p.join("r/config.txt")).unwrap();
    assert!(cfg.contains("lambda_nc=0\n"), "{cfg}");
    assert_ne!(
        code(&tagcl(
            &["train", "--graph", "g.tag", "--ablate", "zz", "--out", "z"],
            p
        )),
        0
    );
}

#[test]
fn missing_inputs_fail_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = tagcl(&["train", "--graph", "absent.tag", "--out", "run"], p);
    assert_ne!(code(&o), 0);
    assert!(!p.join("run").exists());
    std::fs::create_dir(p.join("empty")).unwrap();
    assert_ne!(
        code(&tagcl(&["eval", "--run", "empty", "--task", "link"], p)),
        0
    );
}

#[test]
fn verify_reports_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = tagcl(
        &[
            "verify", "--suite", "lemma1", "--alpha", "0.5", "--k", "3", "--out", "v.txt",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(p.join("v.txt")).unwrap();
    assert!(text.contains("lemma1.max_residual_ratio="), "{text}");
    assert!(text.contains("lemma1.max_principal_angle="), "{text}");
    assert!(text.ends_with("passed=true\n"));
    let m = tagcl(&["--quiet", "verify", "--suite", "metrics"], p);
    assert_eq!(code(&m), 0);
    assert!(m.stdout.is_empty());
}

#[test]
fn sweep_writes_one_row_per_value_and_seed() {
    let dir = setup();
    let p = dir.path();
    let o = tagcl(
        &[
            "--config",
            "small.cfg",
            "--quiet",
            "sweep",
            "--param",
            "neighbor_cap",
            "--values",
            "1,2",
            "--seeds",
            "2",
            "--graph",
            "g.tag",
            "--out",
            "sw",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("param,value,seed"));
    assert!(p.join("sw/config.txt").exists());
}
