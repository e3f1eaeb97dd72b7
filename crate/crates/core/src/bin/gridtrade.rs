use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gridtrade::ledger::Ledger;
use gridtrade::sim::artifacts::{self, RunArtifacts};
use gridtrade::sim::check::check_dir;
use gridtrade::sim::config::ScenarioConfig;
use gridtrade::sim::experiments::{self, LinkSetting};
use gridtrade::types::ProsumerId;

// Stdout may be a closed pipe (`| head`); stop quietly then.
macro_rules! out {
    ($($t:tt)*) => {
        if writeln!(std::io::stdout(), $($t)*).is_err() {
            std::process::exit(0);
        }
    };
}

#[derive(Parser)]
#[command(name = "gridtrade", version, about = "Microgrid energy-trading simulator and ledger tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory (default: runs/<config name>).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check a run directory; writes report.json and exits 1 on any failure.
    Check { dir: PathBuf },
    /// Replay a ledger snapshot and list its entries.
    Inspect {
        ledger: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print one prosumer's bill lines as CSV.
    Bill {
        dir: PathBuf,
        #[arg(long)]
        prosumer: u32,
    },
    /// Dump the order board left at the end of a run.
    Orders {
        dir: PathBuf,
        /// Only open orders.
        #[arg(long)]
        open: bool,
    },
    /// Run one of the stand-alone experiments and print its result as JSON.
    Experiment {
        #[arg(value_enum)]
        name: Experiment,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Linker,
    Races,
    Footprint,
    PriceActivation,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.cmd {
        Cmd::Run { config, out } => {
            let cfg = ScenarioConfig::load(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let out = out.unwrap_or_else(|| {
                Path::new("runs").join(config.file_stem().unwrap_or_default())
            });
            let art = gridtrade::sim::run(cfg);
            art.write(&out).map_err(|e| e.to_string())?;
            out!("{}", serde_json::to_string_pretty(&art.summary).expect("serializable"));
            eprintln!("artifacts written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { dir } => {
            let report = check_dir(&dir).map_err(|e| e.to_string())?;
            artifacts::write_json(&dir.join(artifacts::REPORT), &report).map_err(|e| e.to_string())?;
            for c in &report.checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                match &c.first {
                    Some(first) if !c.passed => out!("{verdict} {:<22} {}/{} {}", c.name, c.violations, c.checked, first),
                    _ => out!("{verdict} {:<22} {}/{}", c.name, c.violations, c.checked),
                }
            }
            let p = &report.privacy;
            if let (Some(acc), Some(base)) = (p.mix_accuracy, p.mix_baseline) {
                out!("privacy mix rounds={} accuracy={acc:.3} baseline={base:.3}", p.mix_rounds);
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Inspect { ledger, json } => {
            let bytes = std::fs::read(&ledger).map_err(|e| format!("{}: {e}", ledger.display()))?;
            let l = match Ledger::replay(&bytes) {
                Ok(l) => l,
                Err(e) => {
                    out!("{e}");
                    return Ok(ExitCode::FAILURE);
                }
            };
            if json {
                for e in l.entries() {
                    out!("{}", serde_json::to_string(e).expect("serializable"));
                }
            } else {
                out!("state {} entries {}", hex::encode(l.state_hash()), l.len());
                out!("{}", experiments::ledger_listing(&l).trim_end());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bill { dir, prosumer } => {
            let art = RunArtifacts::read(&dir).map_err(|e| e.to_string())?;
            let id = ProsumerId(prosumer);
            let lines: Vec<_> = art.bills.iter().filter(|b| b.prosumer == id).collect();
            if lines.is_empty() {
                return Err(format!("no bill lines for {id}"));
            }
            out!("t,e_w,b");
            for b in &lines {
                out!("{},{},{}", b.t.0, b.e, b.b);
            }
            let total: gridtrade::fixed::Money = lines.iter().map(|b| b.b).sum();
            out!("total,,{total}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Orders { dir, open } => {
            let orders: Vec<gridtrade::board::Order> =
                artifacts::read_json(&dir.join(artifacts::ORDERS)).map_err(|e| e.to_string())?;
            for o in orders.iter().filter(|o| !open || o.status == gridtrade::board::OrderStatus::Open) {
                out!("{}", serde_json::to_string(o).expect("serializable"));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Experiment { name, seed } => {
            let v = match name {
                Experiment::Linker => serde_json::to_value(
                    [LinkSetting::EqualDenominations, LinkSetting::UnequalDenominations, LinkSetting::Disabled]
                        .map(|s| experiments::linkability(s, 8, 200, seed)),
                ),
                Experiment::Races => serde_json::to_value(experiments::double_spend_races(100, 4, seed)),
                Experiment::Footprint => serde_json::to_value(
                    [true, false].map(|d| experiments::footprint_classifier(50, d, seed)),
                ),
                Experiment::PriceActivation => serde_json::to_value(experiments::price_activation(15, 30, seed)),
            };
            out!("{}", serde_json::to_string_pretty(&v.expect("serializable")).expect("serializable"));
            Ok(ExitCode::SUCCESS)
        }
    }
}
