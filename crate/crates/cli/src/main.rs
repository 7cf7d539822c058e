use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use emuctl_cli::{
    cmd_daemon, cmd_enumerate, cmd_replay, cmd_report, cmd_simulate, cmd_simulate_suite, load_config, load_scenario,
    write_report, DaemonOptions, SUITE_HEADER,
};
use emuctl_core::config::default_config_text;
use emuctl_core::cpulist::parse_cpulist;
use emuctl_core::simkvm::RunSummary;
use emuctl_core::CoreSet;

#[derive(Parser)]
#[command(name = "emuctl", version, about = "Adaptive emulator-thread affinity controller")]
struct Cli {
    /// More log output (repeat for trace level); also lists signatures in `enumerate`.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the controller against the live host.
    Daemon {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Log decisions without touching cgroups or affinities.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        procroot: Option<PathBuf>,
        #[arg(long)]
        cgroup_root: Option<PathBuf>,
        /// Small cores as a cpulist, e.g. 0-3.
        #[arg(long, value_parser = cpulist)]
        small: Option<CoreSet>,
        /// Decision log path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every snapshot as CSV, for later replay.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
    },
    /// Run a scenario in the simulator with the controller and the baseline binding.
    Simulate {
        /// Scenario file; the built-in reference scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Run this many seeded reference variants instead of one scenario.
        #[arg(long, conflicts_with = "scenario")]
        suite: Option<usize>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Count the distinct static emulator bindings.
    Enumerate {
        #[arg(long)]
        small: usize,
        #[arg(long)]
        big: usize,
        #[arg(long)]
        vms: usize,
        /// Allowed per-VM core counts, e.g. 1,2,4,8.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Feed a recorded snapshot CSV through the controller.
    Replay {
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = cpulist)]
        small: Option<CoreSet>,
        /// Assume the recording starts after convergence.
        #[arg(long)]
        start_stable: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trimmed P95, mean, max and peak count of a per-second trace.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "latency_proxy")]
        column: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration file.
    DefaultConfig,
}

fn cpulist(s: &str) -> Result<CoreSet, String> {
    parse_cpulist(s).map_err(|e| e.to_string())
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let handler = on_signal as extern "C" fn(libc::c_int) as libc::sighandler_t;
    // SAFETY: the handler only stores to an atomic, which is async-signal-safe.
    unsafe {
        libc::signal(libc::SIGTERM, handler);
        libc::signal(libc::SIGINT, handler);
    }
}

fn out_stream(path: Option<&PathBuf>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Daemon {
            config,
            dry_run,
            procroot,
            cgroup_root,
            small,
            out,
            record,
            ticks,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = procroot {
                cfg.procroot = p;
            }
            if let Some(p) = cgroup_root {
                cfg.cgroup_root = p;
            }
            if small.is_some() {
                cfg.small_cores = small;
            }
            let log = out.or_else(|| cfg.decision_log.clone());
            install_signal_handlers();
            let opts = DaemonOptions {
                config: cfg,
                dry_run,
                ticks,
                log,
                record,
            };
            cmd_daemon(&opts, &STOP)?;
        }
        Cmd::Simulate {
            scenario,
            config,
            out,
            suite,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?.controller;
            if let Some(count) = suite {
                let rows = cmd_simulate_suite(seed, count, &cfg, &out)?;
                println!("{SUITE_HEADER}");
                for (i, s) in rows {
                    println!("{i},{}", s.to_csv());
                }
            } else {
                let sc = load_scenario(scenario.as_deref())?;
                println!("{}", RunSummary::HEADER);
                for s in cmd_simulate(&sc, &cfg, &out)? {
                    println!("{}", s.to_csv());
                }
            }
        }
        Cmd::Enumerate { small, big, vms, sizes } => {
            let (count, sigs) = cmd_enumerate(small, big, vms, sizes.as_deref())?;
            println!("{count}");
            if cli.verbose > 0 {
                for s in sigs {
                    println!("{s}");
                }
            }
        }
        Cmd::Replay {
            trace,
            config,
            small,
            start_stable,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let small = small
                .or(cfg.small_cores)
                .context("small cores unknown: set [topology] small or pass --small")?;
            let outcome = cmd_replay(&trace, &cfg.controller, &small, start_stable)?;
            outcome.write_log(out_stream(out.as_ref())?)?;
        }
        Cmd::Report { input, column, out } => {
            let rows = cmd_report(&input, &column)?;
            write_report(&mut out_stream(out.as_ref())?, &rows)?;
        }
        Cmd::DefaultConfig => print!("{}", default_config_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
