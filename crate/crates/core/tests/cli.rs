use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn pkscope(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pkscope"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const POLICY: &str = r#"
[policy]
compartments = [{ name = "a" }, { name = "b" }]
address-spaces = [{ asid = 0, members = ["a", "b"] }]
transitions = [{ from = "a", to = "b" }]
gates = [{ name = "ab", from = "a", to = "b" }]

[[thread]]
name = "t"
home = "a"
"#;

#[test]
fn scan_exit_code_reflects_findings() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("dirty.bin"), [0xB8, 0x0F, 0x30, 0x00, 0x00]).unwrap();
    std::fs::write(d.path().join("clean.bin"), [0x90, 0xC3]).unwrap();

    let o = pkscope(&["scan", "dirty.bin"], d.path());
    assert_eq!(code(&o), 1);
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 1);
    let cols: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(cols, ["1", "0f30", "in_immediate"]);

    let o = pkscope(&["scan", "clean.bin"], d.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).is_empty());
}

#[test]
fn rewrite_then_verify_round_trip() {
    let d = TempDir::new().unwrap();
    // mov ecx, 0x6e1; mov eax, 0x1234; mov edx, 0; wrmsr
    let prog = [
        0xB9, 0xE1, 0x06, 0x00, 0x00, 0xB8, 0x34, 0x12, 0x00, 0x00, 0xBA, 0x00, 0x00, 0x00, 0x00, 0x0F, 0x30,
    ];
    std::fs::write(d.path().join("in.bin"), prog).unwrap();
    let o = pkscope(&["rewrite", "in.bin", "out.bin", "--stub", "0x8000"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("out.bin.stubs").exists());

    let o = pkscope(&["scan", "out.bin"], d.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = pkscope(&["verify", "in.bin", "out.bin", "--runs", "50", "--seed", "3"], d.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("pass  runs=50"));
}

#[test]
fn verify_reports_a_counterexample() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("a.bin"), [0xB8, 0x01, 0x00, 0x00, 0x00]).unwrap();
    std::fs::write(d.path().join("b.bin"), [0xB8, 0x02, 0x00, 0x00, 0x00]).unwrap();
    let o = pkscope(&["verify", "a.bin", "b.bin"], d.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("counterexample"));
}

#[test]
fn pentest_is_clean_and_lists_every_scenario() {
    let d = TempDir::new().unwrap();
    let o = pkscope(&["pentest"], d.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for id in ["P1", "P2", "P3", "P4", "P5", "P6"] {
        assert!(out.contains(id), "{} missing:\n{}", id, out);
    }
}

#[test]
fn bench_csv_has_fixed_header() {
    let d = TempDir::new().unwrap();
    let o = pkscope(&["bench", "cross-ring", "--population", "20", "--rounds", "2", "--csv"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let mut lines = out.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("workload,population,rounds,"));
    let row = lines.next().unwrap();
    assert_eq!(row.split(',').count(), header.split(',').count());
    assert!(row.starts_with("cross-ring,20,2,"));
}

#[test]
fn partition_prints_spaces() {
    let d = TempDir::new().unwrap();
    std::fs::write(
        d.path().join("g.toml"),
        "capacity = 2\n[modules]\nnet = [\"buf\"]\nfs = [\"buf\", \"blk\"]\n",
    )
    .unwrap();
    let o = pkscope(&["partition", "g.toml"], d.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.starts_with("spaces 2\ncrossings 1\n"), "{}", out);
}

#[test]
fn run_checks_expectations() {
    let d = TempDir::new().unwrap();
    let good = format!(
        "{}\n[[step]]\nkind = \"gate\"\nthread = \"t\"\ngate = \"ab\"\nexpect = \"done\"\n",
        POLICY
    );
    let bad = format!(
        "{}\n[[step]]\nkind = \"write\"\nthread = \"t\"\ntarget = \"heap:b\"\nexpect = \"ok\"\n",
        POLICY
    );
    std::fs::write(d.path().join("good.toml"), good).unwrap();
    std::fs::write(d.path().join("bad.toml"), bad).unwrap();

    let o = pkscope(&["run", "good.toml", "--csv", "steps.csv", "--audit", "audit.log"], d.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = std::fs::read_to_string(d.path().join("steps.csv")).unwrap();
    assert!(csv.starts_with("step,kind,observed,expected,status\n"));
    assert!(!std::fs::read_to_string(d.path().join("audit.log")).unwrap().is_empty());

    let o = pkscope(&["run", "bad.toml"], d.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("MISMATCH"));
}

#[test]
fn errors_exit_with_two() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("broken.toml"), "this is = = not toml").unwrap();
    for args in [
        &["scan", "missing.bin"][..],
        &["run", "broken.toml"],
        &["bench", "intra-ring", "--population", "1"],
        &["bench", "no-such-workload"],
        &["frobnicate"],
    ] {
        assert_eq!(code(&pkscope(args, d.path())), 2, "{:?}", args);
    }
}
