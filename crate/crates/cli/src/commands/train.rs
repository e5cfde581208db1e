use std::path::PathBuf;

use clap::ValueEnum;
use cs2net::data::{load_dataset, synthesize, Sample};
use cs2net::train::{evaluate, run_fold_experiment, train, IterRecord};

use crate::config::{DataSource, TrainSetup};
use crate::Failure;

/// Attention variants of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Encoder-decoder without attention.
    Backbone,
    /// Backbone plus spatial attention.
    #[value(name = "+sab")]
    Sab,
    /// Backbone plus channel attention.
    #[value(name = "+cab")]
    Cab,
    /// Both attention blocks.
    Full,
}

impl Ablation {
    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::Backbone => (false, false),
            Ablation::Sab => (true, false),
            Ablation::Cab => (false, true),
            Ablation::Full => (true, true),
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Training config (`key = value` lines under [data]/[synth], [model],
    /// [train], [loss] and [augment] headers).
    pub config: PathBuf,
    /// Run k-fold cross-validation with k folds. Without it the model trains
    /// on every sample and is scored on the training set.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub fold: Option<u64>,
    /// Output directory for checkpoints, run logs and reports.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Override the attention blocks set in the config.
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
}

fn progress(r: &IterRecord) {
    println!("{r}");
}

pub fn run(args: &Args) -> Result<(), Failure> {
    let setup = TrainSetup::from_file(&args.config)?;
    let mut cfg = setup.train;
    if let Some(a) = args.ablation {
        (cfg.model.sab, cfg.model.cab) = a.flags();
    }
    let dataset: Vec<Sample> = match &setup.data {
        DataSource::Manifest(p) => load_dataset(p)?,
        DataSource::Synth { config, count } => (0..*count as u64)
            .map(|i| synthesize(&config.clone().with_seed(config.seed.wrapping_add(i))))
            .collect::<cs2net::Result<_>>()?,
    };
    if dataset.is_empty() {
        return Err(Failure::usage("dataset is empty"));
    }
    std::fs::create_dir_all(&args.out)?;
    match args.fold {
        Some(k) => {
            let k = k as usize;
            if k > dataset.len() {
                return Err(Failure::usage(format!("--fold {k} exceeds the {} available samples", dataset.len())));
            }
            let exp = run_fold_experiment(&cfg, &dataset, k, Some(&args.out), &mut |_, r| progress(r))?;
            let agg = exp.summary.aggregate();
            println!("cross-validated dice {}", agg.get("dice").expect("dice column"));
        }
        None => {
            let out = train(&cfg, &dataset, &[], &mut progress)?;
            out.write(&args.out)?;
            let mut model = out.model;
            let indexed: Vec<(usize, &Sample)> = dataset.iter().enumerate().collect();
            let report = evaluate(&mut model, &indexed, cfg.window.as_deref())?;
            report.write_csv(&args.out.join("metrics.csv"))?;
            println!("training-set dice {}", report.aggregate().get("dice").expect("dice column"));
        }
    }
    Ok(())
}
