use clap::ValueEnum;
use cs2net::gradient_suite::{run_suite, Precision, SuiteConfig, BLOCKS};

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Bits {
    /// 64-bit analytic gradients, tolerance 1e-5.
    #[value(name = "64")]
    B64,
    /// 32-bit analytic gradients, tolerance 1e-3.
    #[value(name = "32")]
    B32,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// First seed; seeds `seed..seed + seeds` are checked.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of seeds per block.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    #[arg(long, value_enum, default_value_t = Bits::B64)]
    pub precision: Bits,
    /// Check only these blocks (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub blocks: Vec<String>,
    /// Corrupt the analytic gradient of one block to exercise the failure path.
    #[arg(long, value_name = "BLOCK")]
    pub inject_fault: Option<String>,
    /// List the block names and exit.
    #[arg(long)]
    pub list: bool,
}

pub fn run(args: &Args) -> Result<(), Failure> {
    if args.list {
        for b in BLOCKS {
            println!("{b}");
        }
        return Ok(());
    }
    let precision = match args.precision {
        Bits::B64 => Precision::F64,
        Bits::B32 => Precision::F32,
    };
    let cfg = SuiteConfig {
        only: args.blocks.clone(),
        inject_fault: args.inject_fault.clone(),
        ..SuiteConfig::new(args.seed, args.seeds, precision)
    };
    let report = run_suite(&cfg)?;
    for b in &report.blocks {
        let status = if b.worst < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<18} worst {:.3e} (seed {}) {status}", b.name, b.worst, b.worst_seed);
    }
    let failed: Vec<&str> = report.failures().iter().map(|b| b.name).collect();
    if failed.is_empty() {
        println!("all {} blocks below {:e}", report.blocks.len(), report.tolerance);
        Ok(())
    } else {
        Err(Failure::check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
