use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use kvp_core::cli::{dispatch, run, Cli};
use kvp_core::eval::CSV_HEADER;
use tempfile::tempdir;

fn kvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvp")).args(args).env("KVP_LOG", "warn").output().unwrap()
}

/// Runs a subcommand in-process and returns its stdout.
fn capture(args: &[&str]) -> String {
    let cli = Cli::try_parse_from(std::iter::once("kvp").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    dispatch(cli.command, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args =
        vec!["gen-synthetic", "--out", out, "--seed", "7", "--count", "5", "--seq-len", "24", "--head-dim", "4"];
    args.extend_from_slice(extra);
    capture(&args);
}

#[test]
fn generate_train_and_evaluate_end_to_end() {
    let dir = tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = kvp(&["gen-synthetic", "--archetype", "content", "--count", "10", "--out", d, "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = kvp(&["train", "--traces", d, "--steps", "200", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("layer 0 head 0: done, final mean reward"), "{stdout}");
    assert!(dir.path().join("agents").is_dir());

    let o = kvp(&["eval", "--traces", d, "--strategies", "kvp,random,streaming_llm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(dir.path().join("eval.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let mut strategies: Vec<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert!(strategies.iter().all(|s| s != "NA"));
    strategies.dedup();
    assert_eq!(strategies, ["kvp", "random", "streaming_llm"]);
}

#[test]
fn rank_prints_the_streaming_keep_set() {
    let dir = tempdir().unwrap();
    gen(dir.path(), &[]);
    let trace = dir.path().join("trace_0000.kvtr");
    let out = capture(&[
        "rank",
        "--trace",
        trace.to_str().unwrap(),
        "--strategy",
        "streaming_llm",
        "--n",
        "10",
        "--budget",
        "6",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "strategy streaming_llm layer 0 head 0 n 10");
    assert_eq!(lines[1], "ranking: 0 1 2 3 9 8 7 6 5 4");
    assert_eq!(lines[2], "keep[6]: {0,1,2,3,9,8}");
    assert_eq!(lines.len(), 3);
}

#[test]
fn rank_lists_every_budget_by_default() {
    let dir = tempdir().unwrap();
    gen(dir.path(), &[]);
    let trace = dir.path().join("trace_0001.kvtr");
    let out = capture(&["rank", "--trace", trace.to_str().unwrap(), "--strategy", "oracle", "--n", "12"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("keep[")).count(), 11);
}

#[test]
fn inspect_echoes_the_header() {
    let dir = tempdir().unwrap();
    gen(dir.path(), &["--n-layers", "2", "--n-q-heads", "6", "--n-kv-heads", "2"]);
    let trace = dir.path().join("trace_0002.kvtr");
    let out = capture(&["inspect", "--trace", trace.to_str().unwrap()]);
    for line in [
        "magic KVTR",
        "version 1",
        "n_layers 2",
        "n_q_heads 6",
        "n_kv_heads 2",
        "head_dim 4",
        "seq_len 24",
        "group_size 3",
        "token_ids absent",
    ] {
        assert!(out.lines().any(|l| l == line), "missing {line:?} in\n{out}");
    }
    let bytes = fs::metadata(&trace).unwrap().len();
    assert!(out.lines().any(|l| l == format!("file_bytes {bytes}")));
}

#[test]
fn bench_writes_timing_rows() {
    let dir = tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    let out = capture(&[
        "bench",
        "--strategies",
        "knorm,kvp",
        "--n",
        "64,128",
        "--repeat",
        "2",
        "--head-dim",
        "8",
        "--group",
        "2",
        "--hidden",
        "8",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(out.lines().count(), 5);
    let rows = csv::Reader::from_path(&csv_path).unwrap().records().count();
    assert_eq!(rows, 4);
}

#[test]
fn exit_codes_follow_the_error_class() {
    assert_eq!(run(["kvp", "--help"]), 0);
    assert_eq!(run(["kvp", "train", "--help"]), 0);
    assert_eq!(run(["kvp", "train", "--no-such-flag"]), 1);
    assert_eq!(run(["kvp", "frobnicate"]), 1);
    // gen-synthetic has no wall-clock default for the seed
    assert_eq!(run(["kvp", "gen-synthetic", "--out", "unused"]), 1);
    assert_eq!(run(["kvp", "eval", "--traces", "/nonexistent/dir", "--strategies", "h2o"]), 1);
    assert_eq!(run(["kvp", "inspect", "--trace", "/nonexistent/trace.kvtr"]), 2);
}

#[test]
fn binary_reports_failures_on_stderr() {
    let dir = tempdir().unwrap();
    gen(dir.path(), &[]);
    let trace = dir.path().join("trace_0000.kvtr");
    let o = kvp(&["rank", "--trace", trace.to_str().unwrap(), "--strategy", "knorm", "--n", "10", "--budget", "11"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = kvp(&[
        "rank",
        "--trace",
        trace.to_str().unwrap(),
        "--strategy",
        "kvp",
        "--agents",
        dir.path().join("none").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
