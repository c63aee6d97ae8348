use std::path::Path;
use std::process::{Command, Output};

fn rwkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwkv"))
        .args(args)
        .env_remove("RWKV_SPEC_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_corpus(dir: &Path) -> String {
    let p = dir.join("corpus.txt");
    std::fs::write(&p, b"the quick brown fox jumps over the lazy dog. ".repeat(40)).unwrap();
    p.display().to_string()
}

fn train_small(dir: &Path, corpus: &str, seed: &str, tag: &str) -> Output {
    let out = dir.join(tag);
    let log = dir.join(format!("{tag}.jsonl"));
    rwkv(&[
        "train",
        "--corpus",
        corpus,
        "--dim",
        "8",
        "--layers",
        "1",
        "--ctx",
        "16",
        "--steps",
        "10",
        "--seed",
        seed,
        "--log",
        log.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--no-wall-time",
        "--quiet",
    ])
}

#[test]
fn inspect_presets() {
    let o = rwkv(&["inspect", "--preset", "169m"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("169342464"), "{s}");
    assert!(s.contains("261250560"), "{s}");

    let o = rwkv(&["inspect", "--preset", "14b", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let p = v["parameters"].as_u64().unwrap() as f64;
    assert!((p / 1e10 - 1.415).abs() <= 0.0005);
}

#[test]
fn inspect_custom_matches_formula() {
    let o = rwkv(&["inspect", "--dim", "8", "--layers", "1", "--vocab", "16", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let (vv, d, l) = (16u64, 8u64, 1u64);
    assert_eq!(v["parameters"].as_u64().unwrap(), 2 * vv * d + 13 * d * d * l + d * (11 * l + 4));
    assert_eq!(v["flops_per_token"].as_u64().unwrap(), 2 * (vv * d + 13 * d * d * l));
}

#[test]
fn inspect_rejects_corrupt_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.rwkv");
    std::fs::write(&p, b"not a weight file").unwrap();
    let o = rwkv(&["inspect", "--weights", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rwkv(&["train", "--corpus", "/no/such/file"]).status.code(), Some(2));
    assert_eq!(rwkv(&["train"]).status.code(), Some(2));
    assert_eq!(rwkv(&["inspect", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(rwkv(&[]).status.code(), Some(2));
}

#[test]
fn help_lists_flags() {
    let o = rwkv(&["train", "--help"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for flag in ["--corpus", "--steps", "--seed", "--ctx", "--log", "--out-dir", "--resume", "--no-wall-time"] {
        assert!(s.contains(flag), "missing {flag}");
    }
    let s = stdout(&rwkv(&["generate", "--help"]));
    for flag in ["--weights", "--prompt", "--n", "--temperature", "--top-p", "--seed"] {
        assert!(s.contains(flag), "missing {flag}");
    }
    let s = stdout(&rwkv(&["bench", "--help"]));
    for flag in ["--n", "--warmup", "--out", "--baseline", "--plot", "--threads"] {
        assert!(s.contains(flag), "missing {flag}");
    }
}

#[test]
fn train_generate_bench() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let a = train_small(dir.path(), &corpus, "7", "a");
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = train_small(dir.path(), &corpus, "7", "b");
    assert!(b.status.success());
    let log_a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(log_a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 10);

    let weights = dir.path().join("a").join("final.rwkv");
    let w = weights.to_str().unwrap();
    let o = rwkv(&["inspect", "--weights", w]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("dim              8"));

    let gen = |seed: &str| rwkv(&["generate", "--weights", w, "--prompt", "the ", "--n", "32", "--temperature", "0", "--seed", seed]);
    let g1 = gen("1");
    assert!(g1.status.success());
    assert_eq!(g1.stdout.len(), 32);
    assert_eq!(g1.stdout, gen("2").stdout);

    let csv = dir.path().join("bench.csv");
    let plot = dir.path().join("bench.gp");
    let o = rwkv(&["bench", "--weights", w, "--n", "150", "--out", csv.to_str().unwrap(), "--plot", plot.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 151);
    assert_eq!(lines[0], "token_index,cumulative_ms,per_token_ms,state_scalars");
    assert!(lines[1..].iter().all(|l| l.ends_with(",40")));
    assert!(std::fs::read_to_string(&plot).unwrap().contains("bench.csv"));
}

#[test]
fn bench_baseline_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("base.csv");
    let o = rwkv(&["bench", "--baseline", "--dim", "16", "--layers", "1", "--n", "100", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.ends_with(&format!(",{}", 2 * 100 * 16)), "{last}");
}

#[test]
fn selftest_passes() {
    let o = rwkv(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}
