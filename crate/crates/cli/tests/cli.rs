use std::path::Path;
use std::process::{Command, Output};

fn mfaas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfaas"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn deployment() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&mfaas(tmp.path(), &["init", "--dir", "d", "--seed", "4"])), 0);
    tmp
}

#[test]
fn receipt_round_trip_and_tamper() {
    let tmp = deployment();
    let p = tmp.path();
    let run = mfaas(
        p,
        &["run", "--dir", "d", "--builtin", "fib", "--input", "10", "--receipt", "--save", "r"],
    );
    assert_eq!(code(&run), 0, "{}", stdout(&run));
    assert!(stdout(&run).contains("output: 55 "));
    let verify = [
        "verify", "receipt", "--dir", "d", "--receipt", "r.receipt.hex", "--input", "r.input.bin",
        "--output", "r.output.bin", "--builtin", "fib",
    ];
    assert_eq!(code(&mfaas(p, &verify)), 0);
    std::fs::write(p.join("r.output.bin"), 56u64.to_le_bytes()).unwrap();
    let bad = mfaas(p, &verify);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("output digest"));
    std::fs::write(p.join("r.receipt.hex"), "zz").unwrap();
    assert_eq!(code(&mfaas(p, &verify)), 2);
}

#[test]
fn retired_key_set_measurement_is_accepted_with_epoch_note() {
    let tmp = deployment();
    let p = tmp.path();
    let run = ["run", "--dir", "d", "--builtin", "empty", "--log", "m.log"];
    assert_eq!(code(&mfaas(p, &run)), 0);
    assert_eq!(code(&mfaas(p, &["rotate", "--dir", "d", "--seed", "8"])), 0);
    assert_eq!(code(&mfaas(p, &run)), 0);
    let v = mfaas(p, &["verify", "measurement", "--dir", "d", "m.log"]);
    assert_eq!(code(&v), 0);
    let out = stdout(&v);
    assert!(out.contains("retired key set, epoch 0"), "{out}");
    assert!(out.contains("(epoch 1)"));
}

#[test]
fn substituted_key_set_fails_quote_verification() {
    let tmp = deployment();
    let p = tmp.path();
    let other = p.join("other");
    assert_eq!(code(&mfaas(p, &["init", "--dir", "other", "--seed", "5"])), 0);
    assert_eq!(code(&mfaas(p, &["verify", "quote", "--dir", "d"])), 0);
    let forged = other.join("keys-0.hex");
    let v = mfaas(p, &["verify", "quote", "--dir", "d", forged.to_str().unwrap()]);
    assert_eq!(code(&v), 1);
}

#[test]
fn billing_excludes_spurious_tags() {
    let tmp = deployment();
    let p = tmp.path();
    for token in ["alice", "mallory"] {
        let r = mfaas(p, &["run", "--dir", "d", "--builtin", "fib", "--input", "30", "--token", token, "--log", "m.log"]);
        assert_eq!(code(&r), 0);
    }
    std::fs::write(p.join("p.conf"), "per_invocation = 7\n").unwrap();
    let b = mfaas(p, &["bill", "--dir", "d", "--policy", "p.conf", "--tags", "alice", "m.log"]);
    assert_eq!(code(&b), 1);
    assert!(stdout(&b).contains("total (micro-units) 7"));
    std::fs::write(p.join("bad.conf"), "per_widget = 7\n").unwrap();
    assert_eq!(code(&mfaas(p, &["bill", "--dir", "d", "--policy", "bad.conf", "m.log"])), 2);
}

#[test]
fn experiments_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    for out in ["a.csv", "b.csv"] {
        let o = mfaas(p, &["experiment", "fib_timing", "--ns", "100,200,300", "--noise", "2", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(std::fs::read(p.join("a.csv")).unwrap(), std::fs::read(p.join("b.csv")).unwrap());
    assert_eq!(code(&mfaas(p, &["experiment", "fib_speed"])), 2);
}

#[test]
fn fuzz_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let f = mfaas(p, &["fuzz", "--cases", "200", "--seed", "3"]);
    assert_eq!(code(&f), 0);
    assert!(stdout(&f).contains("0 violations"));
    std::fs::write(p.join("s.sched"), "worker,400,900\ntimer0,1200,1300\n").unwrap();
    let r = mfaas(p, &["replay", "s.sched", "--builtin", "fib", "--input", "200", "--tau", "20"]);
    assert_eq!(code(&r), 0);
    std::fs::write(p.join("bad.sched"), "worker,400\n").unwrap();
    assert_eq!(code(&mfaas(p, &["replay", "bad.sched", "--builtin", "fib"])), 2);
}

#[test]
fn assembles_and_runs_custom_source() {
    let tmp = deployment();
    let p = tmp.path();
    std::fs::write(p.join("add.txt"), "    ARG 0\n    ARG 1\n    ADD\n    OUT\n    HALT\n").unwrap();
    assert_eq!(code(&mfaas(p, &["asm", "add.txt", "-o", "add.mfvm"])), 0);
    let r = mfaas(p, &["run", "--dir", "d", "--function", "add.mfvm", "--input", "2,40"]);
    assert_eq!(code(&r), 0);
    assert!(stdout(&r).contains("output: 42 "));
    std::fs::write(p.join("broken.txt"), "    FROB\n").unwrap();
    assert_eq!(code(&mfaas(p, &["asm", "broken.txt", "-o", "x"])), 2);
}

#[test]
fn scenario_file_drives_a_run() {
    let tmp = deployment();
    let p = tmp.path();
    std::fs::write(
        p.join("s.conf"),
        "tau = 10\nepsilon = 0\nfunction = fib\ninput = 50\nfuzz_seed = 2\nfuzz_interrupts = 3\n",
    )
    .unwrap();
    let a = mfaas(p, &["run", "--dir", "d", "--config", "s.conf"]);
    let b = mfaas(p, &["run", "--dir", "d", "--config", "s.conf"]);
    assert_eq!(code(&a), 0);
    assert!(stdout(&a).contains("tau=10"));
    assert_eq!(stdout(&a), stdout(&b));
}
