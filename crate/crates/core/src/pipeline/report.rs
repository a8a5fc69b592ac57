use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{coverage_at, coverage_curve, used_fraction, CountSummary, FrequencyTable};
use crate::select::{Group, ModelDims, ReductionEstimate};
use crate::sp_model::PieceId;
use crate::surgery::{TensorIndex, TensorMeta};

use super::check::Verification;

pub const COVERAGE_POINTS: [usize; 4] = [1000, 10_000, 20_000, 30_000];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub k: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusAnalysis {
    pub sentences: u64,
    pub skipped_invalid_lines: u64,
    pub tokens: u64,
    pub unk_tokens: u64,
    pub used_pieces: usize,
    pub used_fraction: f64,
    pub coverage: Vec<CoveragePoint>,
}

impl CorpusAnalysis {
    pub fn new(table: &FrequencyTable, summary: &CountSummary, unk: PieceId, points: &[usize]) -> Self {
        let curve = coverage_curve(table).unwrap_or_default();
        CorpusAnalysis {
            sentences: summary.sentences,
            skipped_invalid_lines: summary.skipped_invalid,
            tokens: table.total(),
            unk_tokens: table.count(unk),
            used_pieces: table.used_count(),
            used_fraction: used_fraction(table),
            coverage: points
                .iter()
                .map(|&k| CoveragePoint {
                    k,
                    coverage: if curve.is_empty() { 0.0 } else { coverage_at(&curve, k) },
                })
                .collect(),
        }
    }
}

/// Share of one corpus's used pieces that the other corpus also uses.
/// `None` when the first corpus uses no pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub target_in_secondary: Option<f64>,
    pub secondary_in_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub vocab_size: usize,
    pub target: CorpusAnalysis,
    pub secondary: CorpusAnalysis,
    pub overlap: OverlapStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigests {
    pub tokenizer_sha256: String,
    pub checkpoint_sha256: String,
    pub target_corpus_sha256: String,
    pub secondary_corpus_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularySummary {
    pub v_old: usize,
    pub v_new: usize,
    pub n_total: usize,
    pub budget_met: bool,
    pub groups: BTreeMap<Group, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub dims: ModelDims,
    pub predicted: ReductionEstimate,
}

/// Sizes measured on the two checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActualSizes {
    pub params_old: u64,
    pub params_new: u64,
    pub file_bytes_old: u64,
    pub file_bytes_new: u64,
    pub header_bytes_old: u64,
    pub header_bytes_new: u64,
    pub payload_bytes_old: u64,
    pub payload_bytes_new: u64,
    pub gap_bytes_old: u64,
    pub removed_row_bytes: u64,
    pub reduction_fraction: f64,
    /// File size difference equals removed rows plus header delta plus gaps.
    pub size_law_holds: bool,
    /// Payload sizes equal the estimator's byte predictions.
    pub matches_estimate: bool,
}

impl ActualSizes {
    pub fn measure(
        src: &TensorIndex,
        dst: &TensorIndex,
        vocab_tensors: &[String],
        predicted: &ReductionEstimate,
    ) -> Self {
        let payload = |i: &TensorIndex| i.metas.iter().map(TensorMeta::byte_len).sum::<u64>();
        let removed_row_bytes = vocab_tensors
            .iter()
            .filter_map(|n| Some(src.get(n)?.byte_len().saturating_sub(dst.get(n)?.byte_len())))
            .sum::<u64>();
        let (file_old, file_new) = (src.file_len(), dst.file_len());
        let lhs = file_old as i128 - file_new as i128;
        let rhs =
            removed_row_bytes as i128 + src.data_start() as i128 - dst.data_start() as i128 + src.gap_bytes() as i128;
        let (payload_old, payload_new) = (payload(src), payload(dst));
        ActualSizes {
            params_old: src.total_params(),
            params_new: dst.total_params(),
            file_bytes_old: file_old,
            file_bytes_new: file_new,
            header_bytes_old: src.data_start(),
            header_bytes_new: dst.data_start(),
            payload_bytes_old: payload_old,
            payload_bytes_new: payload_new,
            gap_bytes_old: src.gap_bytes(),
            removed_row_bytes,
            reduction_fraction: if file_old == 0 {
                0.0
            } else {
                1.0 - file_new as f64 / file_old as f64
            },
            size_law_holds: lhs == rhs,
            matches_estimate: payload_old == predicted.bytes_old && payload_new == predicted.bytes_new,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub ok: bool,
    pub tokenizer_mismatches: usize,
    pub checkpoint_mismatches: usize,
    pub sample_sentences: u64,
    pub sample_tokens: u64,
    pub sample_unk_tokens: u64,
    pub sample_unk_tokens_original: u64,
}

impl From<&Verification> for VerificationSummary {
    fn from(v: &Verification) -> Self {
        VerificationSummary {
            ok: v.ok,
            tokenizer_mismatches: v.tokenizer.len(),
            checkpoint_mismatches: v.checkpoint.mismatches.len(),
            sample_sentences: v.sample.sentences,
            sample_tokens: v.sample.tokens,
            sample_unk_tokens: v.sample.unk_tokens,
            sample_unk_tokens_original: v.sample.unk_tokens_original,
        }
    }
}

/// Everything needed to judge a pruning run. Contains no timings or paths,
/// so identical inputs and settings give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub tool_version: String,
    pub settings_sha256: String,
    pub inputs: InputDigests,
    pub vocabulary: VocabularySummary,
    pub target: CorpusAnalysis,
    pub secondary: CorpusAnalysis,
    pub overlap: OverlapStats,
    pub estimate: Estimate,
    pub actual: ActualSizes,
    pub verification: VerificationSummary,
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn params(n: u64) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else {
        n.to_string()
    }
}

fn bytes(n: u64) -> String {
    if n >= 1_000_000 {
        format!("{:.1} MB", n as f64 / 1e6)
    } else {
        format!("{n} bytes")
    }
}

fn opt_pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_owned(), pct)
}

fn corpus_line(name: &str, c: &CorpusAnalysis) -> String {
    let cov = c
        .coverage
        .iter()
        .map(|p| format!("top-{} {}", p.k, pct(p.coverage)))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "{name}: {} sentences, {} tokens, {} pieces used ({} of vocabulary); coverage {cov}",
        c.sentences,
        c.tokens,
        c.used_pieces,
        pct(c.used_fraction)
    )
}

/// Human-readable summary of a report.
pub fn summary(r: &PruneReport) -> String {
    let v = &r.vocabulary;
    let groups = v
        .groups
        .iter()
        .map(|(g, n)| format!("{} {n}", g.as_str()))
        .collect::<Vec<_>>()
        .join(", ");
    let p = &r.estimate.predicted;
    let a = &r.actual;
    let mut lines = vec![
        format!(
            "vocabulary: {} of {} pieces kept (budget {}{})",
            v.v_new,
            v.v_old,
            v.n_total,
            if v.budget_met { "" } else { ", NOT met" }
        ),
        format!("  groups: {groups}"),
        corpus_line("target", &r.target),
        corpus_line("secondary", &r.secondary),
        format!(
            "overlap: target in secondary {}, secondary in target {}",
            opt_pct(r.overlap.target_in_secondary),
            opt_pct(r.overlap.secondary_in_target)
        ),
        format!(
            "estimate: {} -> {} parameters, {} -> {}, {:.0}% reduction",
            params(p.params_old),
            params(p.params_new),
            bytes(p.bytes_old),
            bytes(p.bytes_new),
            p.reduction_fraction * 100.0
        ),
        format!(
            "actual: {} -> {} parameters, {} -> {} on disk, {:.0}% reduction{}",
            params(a.params_old),
            params(a.params_new),
            bytes(a.file_bytes_old),
            bytes(a.file_bytes_new),
            a.reduction_fraction * 100.0,
            if a.size_law_holds {
                ""
            } else {
                " (size accounting MISMATCH)"
            }
        ),
    ];
    let ver = &r.verification;
    lines.push(if ver.ok {
        format!(
            "verification: ok; sample of {} sentences gave {} unknown tokens ({} with the original tokenizer)",
            ver.sample_sentences, ver.sample_unk_tokens, ver.sample_unk_tokens_original
        )
    } else {
        format!(
            "verification: FAILED ({} tokenizer, {} checkpoint mismatches)",
            ver.tokenizer_mismatches, ver.checkpoint_mismatches
        )
    });
    lines.join("\n") + "\n"
}

/// Writes `report` as JSON to `path` and its summary to `out`.
pub fn emit_report(report: &PruneReport, path: &std::path::Path, out: &mut dyn Write) -> io::Result<()> {
    super::write_json(path, report)?;
    out.write_all(summary(report).as_bytes())
}
