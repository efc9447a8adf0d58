//! Command-line surface: one subcommand per pipeline step.

mod ablation;
mod config;
mod recipe;
mod report;
mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use ablation::{ablate, AblationRow, AblationScore, AblationTable, ReferenceRow, REFERENCE_TABLE};
pub use config::{
    AblationSection, AblationVariant, AugmentSection, BackboneEntry, EnsembleSection, RunConfig, SamplingSection,
    Stage1Section, Stage2Section,
};
pub use recipe::{
    augment_offline, ensemble, eval, partition, run_recipe, synth, train, train_one, write_resolved_config, Corpus,
    Layout, ModelRun, RecipeOutcome,
};
pub use report::{metrics_table, report, ModelSummary, Summary};
pub use selftest::{run_selftest, Check};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dfdetect", version, about = "Real-vs-fake image detection pipeline on synthetic data")]
pub struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for image generation (output does not depend on it).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus.
    Synth,
    /// Add offline-augmented copies of real training images.
    AugmentOffline,
    /// Split the fake training images across the ensemble members.
    Partition,
    /// Train both stages of every ensemble member.
    Train,
    /// Re-score the saved classifiers on the validation split.
    Eval,
    /// Combine the members' predictions by majority vote.
    Ensemble,
    /// Train one backbone under each ablation variant and seed.
    Ablate,
    /// Summarize metrics and embedding diagnostics.
    Report,
    /// Run the built-in oracle and gradient checks.
    Selftest,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if self.threads == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_metrics(name: &str, m: &crate::metrics::MetricsReport) {
    print!("{}", metrics_table(&[(name.to_string(), m)]));
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Command::Selftest = cli.command {
        let checks = run_selftest()?;
        for c in &checks {
            println!("{} {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        let failed = checks.iter().filter(|c| !c.passed).count();
        if failed > 0 {
            return Err(Error::InvalidInput(format!("{failed} selftest checks failed")));
        }
        return Ok(());
    }
    let cfg = cli.resolve_config()?;
    write_resolved_config(&cfg)?;
    match cli.command {
        Command::Synth => {
            let m = synth(&cfg, cli.threads)?;
            println!("wrote {} records", m.records.len());
        }
        Command::AugmentOffline => {
            let m = augment_offline(&cfg)?;
            println!("manifest now holds {} records", m.records.len());
        }
        Command::Partition => {
            let plan = partition(&cfg)?;
            let sizes: Vec<usize> = plan.subsets.iter().map(Vec::len).collect();
            println!("fake subset sizes {sizes:?}");
        }
        Command::Train => {
            for (i, run) in train(&cfg)?.iter().enumerate() {
                print_metrics(&cfg.model_dir_name(i), &run.metrics);
            }
        }
        Command::Eval => {
            for (i, m) in eval(&cfg)?.iter().enumerate() {
                print_metrics(&cfg.model_dir_name(i), m);
            }
        }
        Command::Ensemble => {
            let (_, m) = ensemble(&cfg)?;
            print_metrics("ensemble", &m);
        }
        Command::Ablate => print!("{}", ablate(&cfg, cli.threads)?.to_text()),
        Command::Report => {
            report(&cfg)?;
            let text = std::fs::read_to_string(Layout::new(&cfg.out_dir).report_dir().join("summary.txt"))
                .map_err(|e| Error::io("summary.txt", e))?;
            print!("{text}");
        }
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(())
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
