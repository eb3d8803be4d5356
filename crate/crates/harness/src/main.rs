use std::io;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lts_harness::bench::{bench_gemm, BenchSpec, BENCH_HEADER};
use lts_harness::compare::{analyze_ticket, collect, render};
use lts_harness::metrics::{write_csv, TICKET_CSV, TICKET_HEADER};
use lts_harness::{train, RunConfig};

#[derive(Parser)]
#[command(name = "lts", version, about = "Quantization-aware training with lottery-ticket weight freezing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Time the skip weight-gradient GEMM against the dense one; CSV on stdout.
    BenchGemm {
        /// Output-gradient rows (weight rows).
        #[arg(long)]
        m: usize,
        /// Weight columns (fan-in).
        #[arg(long)]
        n: usize,
        /// Reduction length (batch × output positions).
        #[arg(long)]
        k: usize,
        /// Frozen fractions, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        density: Vec<f64>,
        #[arg(long, default_value_t = 15)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute a run's ticket-ratio curve and rewrite its ticket_ratio.csv.
    AnalyzeTicket {
        #[arg(long)]
        run: PathBuf,
    },
    /// Tabulate the summaries of finished runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    lts_harness::alloc::retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            deterministic,
        } => {
            let mut cfg = RunConfig::from_file(&config).with_context(|| format!("loading {}", config.display()))?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            cfg.deterministic |= deterministic;
            let report = train(&cfg)?;
            let s = &report.summary;
            println!(
                "best top1 {:.4} at epoch {}, avg wgs {:.4}, flops reduction {:.4} (mac-weighted {:.4}), {:.1}s -> {}",
                s.best_top1,
                s.best_epoch,
                s.avg_wgs,
                s.flops_reduction,
                s.mac_flops_reduction,
                s.elapsed_s,
                report.out_dir.display()
            );
        }
        Command::BenchGemm {
            m,
            n,
            k,
            density,
            reps,
            seed,
        } => {
            let (_, rows) = bench_gemm(&BenchSpec {
                m,
                n,
                k,
                densities: density,
                reps,
                seed,
            })?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(io::stdout());
            w.write_record(BENCH_HEADER)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Command::AnalyzeTicket { run } => {
            let curve = analyze_ticket(&run)?;
            write_csv(&run.join(TICKET_CSV), &TICKET_HEADER, &curve)?;
            println!("{}", TICKET_HEADER.join(","));
            for r in curve {
                println!("{},{},{}", r.epoch, r.layer, r.ratio);
            }
        }
        Command::Compare { runs } => print!("{}", render(&collect(&runs)?)),
    }
    Ok(())
}
