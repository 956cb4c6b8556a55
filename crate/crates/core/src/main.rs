use clap::{Parser, Subcommand};
use pkscope::deprivilege::{rewrite, scan, verify_equivalence, RewriteOptions, StubTable, Verdict, VerifySetup};
use pkscope::harness::{bench, pentest, run_scenario, BenchSpec, Workload};
use pkscope::isa::Reg;
use pkscope::machine::Defenses;
use pkscope::policy::{partition, DependencyGraph, SPACE_CAPACITY};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Protection-key compartment simulator.
#[derive(Parser)]
#[command(name = "pkscope", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script and compare verdicts with its expectations.
    Run {
        scenario: PathBuf,
        /// Also write the step table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the audit log.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Run the built-in attack scenarios.
    Pentest {
        #[arg(long)]
        csv: bool,
    },
    /// Run a generated workload and print its counters.
    Bench {
        /// intra-ring, cross-ring or monitor-heavy
        workload: Workload,
        #[arg(long, default_value_t = 20)]
        population: usize,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Place the modules of a dependency graph into address spaces.
    Partition {
        graph: PathBuf,
        #[arg(long)]
        capacity: Option<usize>,
    },
    /// List privileged byte sequences in a code buffer.
    Scan { file: PathBuf },
    /// Remove privileged byte sequences from a code buffer.
    Rewrite {
        input: PathBuf,
        output: PathBuf,
        /// Base address of the stub table, e.g. 0x8000.
        #[arg(long, value_parser = parse_addr)]
        stub: u32,
        /// Base address the code runs at.
        #[arg(long, value_parser = parse_addr, default_value = "0x1000")]
        base: u32,
        /// Allow swapping adjacent independent instructions.
        #[arg(long)]
        reorder: bool,
    },
    /// Differential test of two code buffers on random initial states.
    Verify {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stub manifest for `b` (defaults to `<b>.stubs` if present).
        #[arg(long)]
        stubs: Option<PathBuf>,
    },
}

fn parse_addr(s: &str) -> Result<u32, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("bad address `{}`: {}", s, e))
}

/// Written next to a rewritten buffer: the stub table plus the registers
/// the rewrite used as scratch.
#[derive(Serialize, Deserialize)]
struct Manifest {
    stubs: StubTable,
    scratch: Vec<String>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".stubs");
    PathBuf::from(s)
}

fn reg_named(n: &str) -> Option<Reg> {
    Reg::ALL.into_iter().find(|r| r.name64() == n)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {}", path.display(), e))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<(), String> {
    std::fs::write(path, data).map_err(|e| format!("{}: {}", path.display(), e))
}

/// `Ok(true)` = clean, `Ok(false)` = findings.
fn exec(cmd: Cmd) -> Result<bool, String> {
    match cmd {
        Cmd::Run { scenario, csv, audit } => {
            let r = run_scenario(&scenario).map_err(|e| e.to_string())?;
            print!("{}", r.render());
            if let Some(p) = csv {
                write(&p, r.csv())?;
            }
            if let Some(p) = audit {
                write(&p, &r.audit)?;
            }
            if let Err(e) = r.check() {
                eprintln!("{}", e);
                return Ok(false);
            }
            Ok(true)
        }
        Cmd::Pentest { csv } => {
            let results = pkscope::harness::pentest_suite(Defenses::default()).map_err(|e| e.to_string())?;
            if csv {
                print!("{}", pentest::csv(&results));
            } else {
                print!("{}", pentest::render(&results));
            }
            Ok(results.iter().all(|r| !r.breached))
        }
        Cmd::Bench {
            workload,
            population,
            rounds,
            csv,
        } => {
            if population < 2 {
                return Err("population must be at least 2".into());
            }
            let r = bench(BenchSpec {
                workload,
                population,
                rounds,
            })
            .map_err(|e| e.to_string())?;
            if csv {
                print!("{}", r.csv());
            } else {
                print!("{}", r.render());
            }
            let v = r.shape_violations();
            for s in &v {
                eprintln!("shape: {}", s);
            }
            Ok(v.is_empty())
        }
        Cmd::Partition { graph, capacity } => {
            let text = std::fs::read_to_string(&graph).map_err(|e| format!("{}: {}", graph.display(), e))?;
            let (g, file_cap) = DependencyGraph::from_toml(&text).map_err(|e| e.to_string())?;
            let cap = capacity.or(file_cap).unwrap_or(SPACE_CAPACITY);
            if cap == 0 {
                return Err("capacity must be positive".into());
            }
            let p = partition(&g, cap);
            print!("{}", p.report(&g));
            Ok(true)
        }
        Cmd::Scan { file } => {
            let bytes = read(&file)?;
            let occ = scan(&bytes).map_err(|e| e.to_string())?;
            for o in &occ {
                println!("{}", o);
            }
            Ok(occ.is_empty())
        }
        Cmd::Rewrite {
            input,
            output,
            stub,
            base,
            reorder,
        } => {
            let bytes = read(&input)?;
            let out = rewrite(&bytes, StubTable::new(stub), RewriteOptions { base, reorder }).map_err(|e| e.to_string())?;
            write(&output, &out.bytes)?;
            let m = Manifest {
                stubs: out.stubs.clone(),
                scratch: out.plan.scratch.iter().map(|r| r.name64().to_string()).collect(),
            };
            write(&manifest_path(&output), toml::to_string(&m).map_err(|e| e.to_string())?)?;
            print!("{}", out.plan.render());
            Ok(true)
        }
        Cmd::Verify { a, b, runs, seed, stubs } => {
            let (orig, new) = (read(&a)?, read(&b)?);
            let mpath = stubs.unwrap_or_else(|| manifest_path(&b));
            let (table, scratch) = if mpath.exists() {
                let text = std::fs::read_to_string(&mpath).map_err(|e| format!("{}: {}", mpath.display(), e))?;
                let m: Manifest = toml::from_str(&text).map_err(|e| format!("{}: {}", mpath.display(), e))?;
                let scratch = m
                    .scratch
                    .iter()
                    .map(|n| reg_named(n).ok_or_else(|| format!("unknown register `{}`", n)))
                    .collect::<Result<BTreeSet<Reg>, String>>()?;
                (m.stubs, scratch)
            } else {
                (StubTable::new(0), BTreeSet::new())
            };
            let v = verify_equivalence(&orig, &new, &table, &scratch, runs, seed, &VerifySetup::default())
                .map_err(|e| e.to_string())?;
            match v {
                Verdict::Pass { runs } => {
                    println!("pass  runs={} seed={}", runs, seed);
                    Ok(true)
                }
                Verdict::Counterexample { state, divergence } => {
                    println!("counterexample  seed={}\n{}\n{:?}", seed, divergence, state);
                    Ok(false)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}
