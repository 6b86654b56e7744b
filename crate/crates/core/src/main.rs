use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gleamsim::harness::{self, HarnessError, Scenario};

#[derive(Parser)]
#[command(name = "gleamsim", version, about = "Packet-level simulator for switch-assisted RDMA multicast")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write metrics.csv, metrics.json and events.jsonl.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-packet link events to trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Run a scenario over loss rates and seeds; writes sweep.csv and sweep.json.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1e-8,1e-6,1e-4,1e-3")]
        loss: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLEAMSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn exec(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            trace,
        } => {
            let mut sc = Scenario::from_file(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            sc.sim.trace |= trace;
            let res = harness::run_detailed(&sc)?;
            harness::write_reports(&out, "metrics", std::slice::from_ref(&res.report))?;
            write_jsonl(&out.join("events.jsonl"), &res.switch_log)?;
            if sc.sim.trace {
                write_jsonl(&out.join("trace.jsonl"), &res.trace)?;
            }
            for (k, v) in &res.report.metrics {
                println!("{k}\t{v}");
            }
        }
        Cmd::Sweep {
            scenario,
            loss,
            seeds,
            out,
        } => {
            let sc = Scenario::from_file(&scenario)?;
            let reports = harness::sweep(&sc, &loss, seeds)?;
            harness::write_reports(&out, "sweep", &reports)?;
            for &rate in &loss {
                let g = harness::mean_at(&reports, rate, "normalized_goodput").unwrap_or(f64::NAN);
                println!("{rate:e}\t{g:.4}");
            }
        }
        Cmd::Validate { scenario } => {
            let sc = Scenario::from_file(&scenario)?;
            let topo = sc.validate()?;
            println!(
                "ok: {} ({}, {} hosts, {} switches)",
                sc.name,
                sc.workload.kind(),
                topo.hosts().len(),
                topo.switches().count()
            );
        }
    }
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| HarnessError::Output(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
