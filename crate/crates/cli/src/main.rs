//! `vocab-prune`: shrink a multilingual SentencePiece checkpoint to a
//! fixed-size single-language vocabulary.
//!
//! Exit status: 0 success, 1 a stage failed, 2 verification found
//! mismatches, 3 bad configuration.

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use vocab_prune::pipeline::{Pipeline, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "vocab-prune", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count piece frequencies over the target and secondary corpora.
    Analyze(Common),
    /// Choose the kept vocabulary from the frequency tables.
    Select(Common),
    /// Write the pruned tokenizer model.
    PruneTokenizer(Common),
    /// Write the pruned checkpoint.
    PruneModel(Common),
    /// Check the pruned artifacts against the originals.
    Verify(Common),
    /// Write report.json and print a summary.
    Report(Common),
    /// Run every stage in order.
    #[command(alias = "run")]
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON config; relative paths in it resolve against its directory.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    target_corpus: Option<PathBuf>,
    #[arg(long)]
    secondary_corpus: Option<PathBuf>,
    #[arg(long)]
    sample_corpus: Option<PathBuf>,
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    n_total: Option<usize>,
    #[arg(long)]
    n_top_original: Option<usize>,
    #[arg(long)]
    n_secondary: Option<usize>,
    #[arg(long)]
    unk_penalty: Option<f32>,
    /// Worker threads for counting (0 = one per core).
    #[arg(short, long)]
    jobs: Option<usize>,
    /// Keep vocabulary tensors whose row count exceeds the tokenizer size.
    #[arg(long)]
    allow_extra_rows: bool,
    /// Re-run stages even when their stamps are current.
    #[arg(short, long)]
    force: bool,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        let p = &mut c.paths;
        let set = |dst: &mut PathBuf, src: &Option<PathBuf>| {
            if let Some(s) = src {
                *dst = s.clone();
            }
        };
        set(&mut p.tokenizer, &self.tokenizer);
        set(&mut p.checkpoint, &self.checkpoint);
        set(&mut p.target_corpus, &self.target_corpus);
        set(&mut p.secondary_corpus, &self.secondary_corpus);
        set(&mut p.output_dir, &self.out_dir);
        if self.sample_corpus.is_some() {
            p.sample_corpus.clone_from(&self.sample_corpus);
        }
        let s = &mut c.selection;
        s.n_total = self.n_total.unwrap_or(s.n_total);
        s.n_top_original = self.n_top_original.unwrap_or(s.n_top_original);
        s.n_secondary = self.n_secondary.unwrap_or(s.n_secondary);
        c.unk_penalty = self.unk_penalty.unwrap_or(c.unk_penalty);
        c.jobs = self.jobs.unwrap_or(c.jobs);
        c.surgery.allow_extra_rows |= self.allow_extra_rows;
        Ok(c)
    }
}

enum Failure {
    Pipeline(PipelineError),
    Verification,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, command) = match &cli.command {
        Command::Analyze(c)
        | Command::Select(c)
        | Command::PruneTokenizer(c)
        | Command::PruneModel(c)
        | Command::Verify(c)
        | Command::Report(c)
        | Command::Pipeline(c) => (c, &cli.command),
    };
    let pipeline = Pipeline::new(common.config()?, common.force)?;
    let mut stdout = io::stdout().lock();
    match command {
        Command::Analyze(_) => pipeline.analyze()?,
        Command::Select(_) => {
            let plan = pipeline.select()?;
            println!("selected {} of {} pieces", plan.len(), plan.v_old);
        }
        Command::PruneTokenizer(_) => pipeline.prune_tokenizer()?,
        Command::PruneModel(_) => pipeline.prune_model()?,
        Command::Verify(_) => {
            let v = pipeline.verify()?;
            println!(
                "verification {}: {} tokenizer, {} checkpoint mismatches",
                if v.ok { "ok" } else { "FAILED" },
                v.tokenizer.len(),
                v.checkpoint.mismatches.len()
            );
            if !v.ok {
                return Err(Failure::Verification);
            }
        }
        Command::Report(_) => {
            let report = pipeline.report(&mut stdout)?;
            if !report.verification.ok {
                return Err(Failure::Verification);
            }
        }
        Command::Pipeline(_) => {
            let outcome = pipeline.run_all(&mut stdout)?;
            if !outcome.verification.ok {
                return Err(Failure::Verification);
            }
        }
    }
    if !matches!(command, Command::Pipeline(_)) {
        if let Err(e) = pipeline.write_timings() {
            error!("cannot write timings: {e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => {
            error!("verification failed; see verify.json");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg.push_str(": ");
                    msg.push_str(&text);
                }
                source = s.source();
            }
            error!("{msg}");
            ExitCode::from(match e {
                PipelineError::Config(_) => 3,
                PipelineError::Stage { .. } => 1,
            })
        }
    }
}
