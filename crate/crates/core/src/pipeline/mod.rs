//! End-to-end driver: analyze, select, prune the tokenizer, prune the
//! checkpoint, verify, report.
//!
//! Every stage writes its artifacts into the output directory and a stamp
//! under `.stamps/` holding the digest of its inputs and settings. A stage
//! whose stamp matches and whose artifacts exist is skipped unless forced.

mod check;
mod config;
mod report;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{count_corpus, overlap, FrequencyTable};
use crate::select::{predict_param_reduction, select_vocabulary, ModelDims, VocabPlan};
use crate::sp_model::{parse_sp_model, serialize_sp_model, SpModel};
use crate::surgery::{prune_checkpoint, read_tensor_index, verify_checkpoint, TensorIndex};
use crate::tokenizer::{Tokenizer, TokenizerOptions};

pub use check::{verify_tokenizer, SampleCheck, TokenizerMismatch, Verification};
pub use config::{ConfigError, DimsOverride, Paths, PipelineConfig};
pub use report::{
    emit_report, summary, ActualSizes, Analysis, CorpusAnalysis, CoveragePoint, Estimate, InputDigests, OverlapStats,
    PruneReport, VerificationSummary, VocabularySummary, COVERAGE_POINTS,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const FREQ_TARGET: &str = "freq_target.tsv";
pub const FREQ_SECONDARY: &str = "freq_secondary.tsv";
pub const ANALYSIS: &str = "analysis.json";
pub const PLAN: &str = "plan.json";
pub const TOKENIZER: &str = "spiece.model";
pub const CHECKPOINT: &str = "model.safetensors";
pub const SURGERY: &str = "surgery.json";
pub const VERIFY: &str = "verify.json";
pub const REPORT: &str = "report.json";
pub const TIMINGS: &str = "timings.json";
const STAMPS: &str = ".stamps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Analyze,
    Select,
    PruneTokenizer,
    PruneModel,
    Verify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Analyze,
        Stage::Select,
        Stage::PruneTokenizer,
        Stage::PruneModel,
        Stage::Verify,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Analyze => "analyze",
            Stage::Select => "select",
            Stage::PruneTokenizer => "prune-tokenizer",
            Stage::PruneModel => "prune-model",
            Stage::Verify => "verify",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed on {}: {source}", artifact.display())]
    Stage {
        stage: Stage,
        artifact: PathBuf,
        source: BoxError,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Stage { stage, .. } => Some(*stage),
        }
    }
}

fn fail<E: Into<BoxError>>(stage: Stage, artifact: &Path) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        stage,
        artifact: artifact.to_owned(),
        source: e.into(),
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, BoxError> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
    pub skipped: bool,
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: PruneReport,
    pub verification: Verification,
}

pub struct Pipeline {
    config: PipelineConfig,
    force: bool,
    digests: RefCell<HashMap<PathBuf, String>>,
    timings: RefCell<Vec<StageTiming>>,
}

impl Pipeline {
    /// Validates `config` and creates the output directory. Nothing is
    /// written when validation fails.
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        fs::create_dir_all(config.paths.output_dir.join(STAMPS)).map_err(|e| {
            ConfigError::Invalid(format!(
                "cannot create output directory {}: {e}",
                config.paths.output_dir.display()
            ))
        })?;
        Ok(Pipeline {
            config,
            force,
            digests: RefCell::default(),
            timings: RefCell::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.config.paths.output_dir.join(name)
    }

    pub fn timings(&self) -> Vec<StageTiming> {
        self.timings.borrow().clone()
    }

    pub fn write_timings(&self) -> io::Result<()> {
        write_json(&self.artifact(TIMINGS), &*self.timings.borrow())
    }

    fn digest_of(&self, path: &Path) -> io::Result<String> {
        if let Some(d) = self.digests.borrow().get(path) {
            return Ok(d.clone());
        }
        let d = file_sha256(path)?;
        self.digests.borrow_mut().insert(path.to_owned(), d.clone());
        Ok(d)
    }

    fn stage_digest(&self, stage: Stage, inputs: &[&Path]) -> Result<String, PipelineError> {
        let mut h = Sha256::new();
        h.update(TOOL_VERSION.as_bytes());
        h.update([0]);
        h.update(stage.name().as_bytes());
        h.update([0]);
        h.update(self.config.settings_digest().as_bytes());
        for path in inputs {
            let d = self.digest_of(path).map_err(fail(stage, path))?;
            h.update(d.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Runs `body` unless the stage's stamp matches its current inputs and
    /// all of `outputs` exist.
    fn run_stage(
        &self,
        stage: Stage,
        inputs: &[&Path],
        outputs: &[&str],
        body: impl FnOnce() -> Result<(), PipelineError>,
    ) -> Result<(), PipelineError> {
        let start = Instant::now();
        let digest = self.stage_digest(stage, inputs)?;
        let stamp = self.config.paths.output_dir.join(STAMPS).join(stage.name());
        let fresh = !self.force
            && outputs.iter().all(|o| self.artifact(o).is_file())
            && fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == digest);
        if fresh {
            info!("{stage}: up to date");
        } else {
            info!("{stage}: running");
            let _ = fs::remove_file(&stamp);
            body()?;
            write_atomic(&stamp, format!("{digest}\n").as_bytes()).map_err(fail(stage, &stamp))?;
        }
        let seconds = start.elapsed().as_secs_f64();
        info!("{stage}: {seconds:.3}s");
        self.timings.borrow_mut().push(StageTiming {
            stage,
            seconds,
            skipped: fresh,
        });
        Ok(())
    }

    fn load_model(&self, stage: Stage, path: &Path) -> Result<SpModel, PipelineError> {
        let bytes = fs::read(path).map_err(fail(stage, path))?;
        let model = parse_sp_model(&bytes).map_err(fail(stage, path))?;
        model.validate().map_err(fail(stage, path))?;
        Ok(model)
    }

    fn tokenizer(&self, stage: Stage, model: &SpModel, path: &Path) -> Result<Tokenizer, PipelineError> {
        Tokenizer::new(
            model,
            TokenizerOptions {
                unk_penalty: self.config.unk_penalty,
            },
        )
        .map_err(fail(stage, path))
    }

    fn load_plan(&self, stage: Stage) -> Result<VocabPlan, PipelineError> {
        let path = self.artifact(PLAN);
        read_json(&path).map_err(fail(stage, &path))
    }

    pub fn analyze(&self) -> Result<(), PipelineError> {
        const S: Stage = Stage::Analyze;
        let p = &self.config.paths;
        self.run_stage(
            S,
            &[&p.tokenizer, &p.target_corpus, &p.secondary_corpus],
            &[FREQ_TARGET, FREQ_SECONDARY, ANALYSIS],
            || {
                let model = self.load_model(S, &p.tokenizer)?;
                let tok = self.tokenizer(S, &model, &p.tokenizer)?;
                let jobs = self.config.worker_threads();
                let count =
                    |path: &Path| count_corpus(&tok, path, jobs, self.config.shard_lines).map_err(fail(S, path));
                let (target, target_summary) = count(&p.target_corpus)?;
                let (secondary, secondary_summary) = count(&p.secondary_corpus)?;

                let text_of = |id| model.pieces[id as usize].text.clone();
                for (name, table) in [(FREQ_TARGET, &target), (FREQ_SECONDARY, &secondary)] {
                    let path = self.artifact(name);
                    let mut buf = Vec::new();
                    table.write_tsv(&mut buf, text_of).map_err(fail(S, &path))?;
                    write_atomic(&path, &buf).map_err(fail(S, &path))?;
                }

                let unk = tok.unk_id();
                let mut points = COVERAGE_POINTS.to_vec();
                points.push(self.config.selection.n_total);
                points.sort_unstable();
                points.dedup();
                let analysis = Analysis {
                    vocab_size: model.len(),
                    target: CorpusAnalysis::new(&target, &target_summary, unk, &points),
                    secondary: CorpusAnalysis::new(&secondary, &secondary_summary, unk, &points),
                    overlap: OverlapStats {
                        target_in_secondary: overlap(&target, &secondary).ok(),
                        secondary_in_target: overlap(&secondary, &target).ok(),
                    },
                };
                let path = self.artifact(ANALYSIS);
                write_json(&path, &analysis).map_err(fail(S, &path))
            },
        )
    }

    pub fn select(&self) -> Result<VocabPlan, PipelineError> {
        const S: Stage = Stage::Select;
        let p = &self.config.paths;
        let (ft, fs_) = (self.artifact(FREQ_TARGET), self.artifact(FREQ_SECONDARY));
        for path in [&ft, &fs_] {
            if !path.is_file() {
                return Err(fail(S, path)("missing; run analyze first"));
            }
        }
        self.run_stage(S, &[&p.tokenizer, &ft, &fs_], &[PLAN], || {
            let model = self.load_model(S, &p.tokenizer)?;
            let target = FrequencyTable::load_tsv(&ft).map_err(fail(S, &ft))?;
            let secondary = FrequencyTable::load_tsv(&fs_).map_err(fail(S, &fs_))?;
            let plan = select_vocabulary(&self.config.selection, &target, &secondary, &model)
                .map_err(fail(S, &p.tokenizer))?;
            if !plan.budget_met {
                warn!("plan holds {} pieces, short of the {} budget", plan.len(), plan.n_total);
            }
            let path = self.artifact(PLAN);
            write_json(&path, &plan).map_err(fail(S, &path))
        })?;
        self.load_plan(S)
    }

    fn require(&self, stage: Stage, name: &str) -> Result<PathBuf, PipelineError> {
        let path = self.artifact(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(fail(stage, &path)("missing; run the earlier stages first"))
        }
    }

    pub fn prune_tokenizer(&self) -> Result<(), PipelineError> {
        const S: Stage = Stage::PruneTokenizer;
        let p = &self.config.paths;
        let plan_path = self.require(S, PLAN)?;
        self.run_stage(S, &[&p.tokenizer, &plan_path], &[TOKENIZER], || {
            let model = self.load_model(S, &p.tokenizer)?;
            let plan = self.load_plan(S)?;
            let pruned = model.prune_pieces(&plan.new_to_old).map_err(fail(S, &plan_path))?;
            let path = self.artifact(TOKENIZER);
            write_atomic(&path, &serialize_sp_model(&pruned)).map_err(fail(S, &path))
        })
    }

    pub fn prune_model(&self) -> Result<(), PipelineError> {
        const S: Stage = Stage::PruneModel;
        let p = &self.config.paths;
        let plan_path = self.require(S, PLAN)?;
        self.run_stage(S, &[&p.checkpoint, &plan_path], &[CHECKPOINT, SURGERY], || {
            let plan = self.load_plan(S)?;
            let dst = self.artifact(CHECKPOINT);
            let report = prune_checkpoint(
                &p.checkpoint,
                &dst,
                &plan,
                &self.config.vocab_tensor_names,
                &self.config.surgery,
            )
            .map_err(fail(S, &p.checkpoint))?;
            if !report.size_law_holds() {
                warn!("size accounting does not balance for {}", dst.display());
            }
            let path = self.artifact(SURGERY);
            write_json(&path, &report).map_err(fail(S, &path))
        })
    }

    /// Checks the pruned tokenizer and checkpoint against the originals and
    /// the plan, and encodes the sample corpus with both tokenizers.
    pub fn verify(&self) -> Result<Verification, PipelineError> {
        const S: Stage = Stage::Verify;
        let p = &self.config.paths;
        let plan_path = self.require(S, PLAN)?;
        let tok_path = self.require(S, TOKENIZER)?;
        let ckpt_path = self.require(S, CHECKPOINT)?;
        let sample = self.config.sample_corpus();
        self.run_stage(
            S,
            &[&p.tokenizer, &p.checkpoint, &plan_path, &tok_path, &ckpt_path, sample],
            &[VERIFY],
            || {
                let plan = self.load_plan(S)?;
                let original = self.load_model(S, &p.tokenizer)?;
                let bytes = fs::read(&tok_path).map_err(fail(S, &tok_path))?;
                let pruned = parse_sp_model(&bytes).map_err(fail(S, &tok_path))?;
                let tokenizer = verify_tokenizer(&original, &pruned, &plan);

                let jobs = self.config.worker_threads();
                let shard = self.config.shard_lines;
                let pruned_tok = self.tokenizer(S, &pruned, &tok_path)?;
                let original_tok = self.tokenizer(S, &original, &p.tokenizer)?;
                let (after, summary) = count_corpus(&pruned_tok, sample, jobs, shard).map_err(fail(S, sample))?;
                let (before, _) = count_corpus(&original_tok, sample, jobs, shard).map_err(fail(S, sample))?;
                let sample_check = SampleCheck {
                    sentences: summary.sentences,
                    tokens: after.total(),
                    unk_tokens: after.count(pruned_tok.unk_id()),
                    tokens_original: before.total(),
                    unk_tokens_original: before.count(original_tok.unk_id()),
                };

                let checkpoint = verify_checkpoint(&p.checkpoint, &ckpt_path, &plan, &self.config.vocab_tensor_names)
                    .map_err(fail(S, &ckpt_path))?;
                let v = Verification::new(tokenizer, sample_check, checkpoint);
                let path = self.artifact(VERIFY);
                write_json(&path, &v).map_err(fail(S, &path))
            },
        )?;
        let path = self.artifact(VERIFY);
        read_json(&path).map_err(fail(S, &path))
    }

    /// Model dimensions read from the source checkpoint, with config
    /// overrides applied.
    pub fn dims(&self, index: &TensorIndex, v_old_fallback: u64) -> ModelDims {
        let names = &self.config.vocab_tensor_names;
        let first = names.iter().find_map(|n| index.get(n));
        let base = ModelDims {
            v_old: first.and_then(|m| m.shape.first().copied()).unwrap_or(v_old_fallback),
            d_model: first.map_or(0, |m| m.shape.iter().skip(1).product()),
            n_vocab_matrices: names.iter().filter(|n| index.get(n).is_some()).count() as u64,
            total_params_old: index.total_params(),
            bytes_per_param: first.map_or(4, |m| m.dtype.width()),
        };
        self.config.dims.apply(base)
    }

    /// Assembles the report from the persisted artifacts, writes it and
    /// prints its summary to `out`. Always runs.
    pub fn report(&self, out: &mut dyn Write) -> Result<PruneReport, PipelineError> {
        const S: Stage = Stage::Report;
        let start = Instant::now();
        let p = &self.config.paths;
        let analysis_path = self.require(S, ANALYSIS)?;
        let plan_path = self.require(S, PLAN)?;
        let ckpt_path = self.require(S, CHECKPOINT)?;
        let verify_path = self.require(S, VERIFY)?;

        let analysis: Analysis = read_json(&analysis_path).map_err(fail(S, &analysis_path))?;
        let plan = self.load_plan(S)?;
        let verification: Verification = read_json(&verify_path).map_err(fail(S, &verify_path))?;
        let src = read_tensor_index(&p.checkpoint).map_err(fail(S, &p.checkpoint))?;
        let dst = read_tensor_index(&ckpt_path).map_err(fail(S, &ckpt_path))?;

        let dims = self.dims(&src, plan.v_old as u64);
        let predicted = predict_param_reduction(&dims, plan.len() as u64).map_err(fail(S, &plan_path))?;
        let digest = |path: &Path| self.digest_of(path).map_err(fail(S, path));
        let report = PruneReport {
            tool_version: TOOL_VERSION.to_owned(),
            settings_sha256: self.config.settings_digest(),
            inputs: InputDigests {
                tokenizer_sha256: digest(&p.tokenizer)?,
                checkpoint_sha256: digest(&p.checkpoint)?,
                target_corpus_sha256: digest(&p.target_corpus)?,
                secondary_corpus_sha256: digest(&p.secondary_corpus)?,
            },
            vocabulary: VocabularySummary {
                v_old: plan.v_old,
                v_new: plan.len(),
                n_total: plan.n_total,
                budget_met: plan.budget_met,
                groups: plan.group_counts(),
            },
            target: analysis.target,
            secondary: analysis.secondary,
            overlap: analysis.overlap,
            actual: ActualSizes::measure(&src, &dst, &self.config.vocab_tensor_names, &predicted),
            estimate: Estimate { dims, predicted },
            verification: VerificationSummary::from(&verification),
        };
        let path = self.artifact(REPORT);
        emit_report(&report, &path, out).map_err(fail(S, &path))?;
        self.timings.borrow_mut().push(StageTiming {
            stage: S,
            seconds: start.elapsed().as_secs_f64(),
            skipped: false,
        });
        Ok(report)
    }

    /// Runs every stage in order. A failing stage stops the run; a failed
    /// verification does not, and is reported in the outcome.
    pub fn run_all(&self, out: &mut dyn Write) -> Result<Outcome, PipelineError> {
        self.analyze()?;
        self.select()?;
        self.prune_tokenizer()?;
        self.prune_model()?;
        let verification = self.verify()?;
        let report = self.report(out)?;
        let path = self.artifact(TIMINGS);
        self.write_timings().map_err(fail(Stage::Report, &path))?;
        Ok(Outcome { report, verification })
    }
}
