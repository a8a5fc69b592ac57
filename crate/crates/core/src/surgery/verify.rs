//! Independent check of a pruned checkpoint.
//!
//! Both files are opened through the `safetensors` crate rather than this
//! module's own header parser, so a bug in the pruning path cannot hide
//! itself here.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use memmap2::Mmap;
use rayon::prelude::*;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::prune::RowMap;
use super::SurgeryError;
use crate::select::VocabPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    /// A source tensor is missing from the output.
    AbsentTensor { name: String },
    /// The output holds a tensor the source does not.
    UnexpectedTensor { name: String },
    /// A vocabulary tensor named in the plan is missing from the source.
    MissingVocabTensor { name: String },
    DtypeMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    /// Output row `row` differs from source row `source_row`.
    RowMismatch {
        name: String,
        row: usize,
        source_row: usize,
    },
    /// The plan references a row the source tensor does not have.
    SourceRowOutOfRange {
        name: String,
        source_row: usize,
        rows: usize,
    },
    /// A copied tensor's bytes differ; `offset` is the first differing byte.
    PayloadMismatch { name: String, offset: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub mismatches: Vec<Mismatch>,
}

impl VerifyResult {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub fn verify_checkpoint(
    src: &Path,
    dst: &Path,
    plan: &VocabPlan,
    vocab_tensors: &[String],
) -> Result<VerifyResult, SurgeryError> {
    verify_checkpoint_rows(src, dst, RowMap::from(plan), vocab_tensors)
}

fn map(path: &Path) -> Result<Mmap, SurgeryError> {
    let file = File::open(path).map_err(SurgeryError::io(path))?;
    // SAFETY: the mapping is read-only and lives only for this check; the
    // files are artifacts this tool owns and does not modify concurrently.
    unsafe { Mmap::map(&file) }.map_err(SurgeryError::io(path))
}

fn open<'a>(path: &Path, bytes: &'a [u8]) -> Result<SafeTensors<'a>, SurgeryError> {
    SafeTensors::deserialize(bytes).map_err(|e| SurgeryError::Unparseable {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

/// Compares every tensor of `dst` against `src` under `rows`, collecting
/// all mismatches.
pub fn verify_checkpoint_rows(
    src: &Path,
    dst: &Path,
    rows: RowMap<'_>,
    vocab_tensors: &[String],
) -> Result<VerifyResult, SurgeryError> {
    let src_map = map(src)?;
    let dst_map = map(dst)?;
    let src_st = open(src, &src_map)?;
    let dst_st = open(dst, &dst_map)?;

    let vocab: HashSet<&str> = vocab_tensors.iter().map(String::as_str).collect();
    let mut src_names: Vec<&str> = src_st.names().into_iter().collect();
    src_names.sort_unstable();
    let dst_names: HashSet<&str> = dst_st.names().into_iter().collect();
    let src_set: HashSet<&str> = src_names.iter().copied().collect();

    let mut mismatches: Vec<Mismatch> = vocab_tensors
        .iter()
        .filter(|n| !src_set.contains(n.as_str()))
        .map(|n| Mismatch::MissingVocabTensor { name: n.clone() })
        .collect();

    let per_tensor: Vec<Vec<Mismatch>> = src_names
        .par_iter()
        .map(|&name| {
            if !dst_names.contains(name) {
                return vec![Mismatch::AbsentTensor { name: name.into() }];
            }
            let a = src_st.tensor(name).expect("listed tensor");
            let b = dst_st.tensor(name).expect("listed tensor");
            if a.dtype() != b.dtype() {
                return vec![Mismatch::DtypeMismatch {
                    name: name.into(),
                    expected: format!("{:?}", a.dtype()),
                    actual: format!("{:?}", b.dtype()),
                }];
            }
            if vocab.contains(name) {
                compare_rows(name, a.shape(), a.data(), b.shape(), b.data(), rows)
            } else if a.shape() != b.shape() {
                vec![Mismatch::ShapeMismatch {
                    name: name.into(),
                    expected: a.shape().to_vec(),
                    actual: b.shape().to_vec(),
                }]
            } else {
                match a.data().iter().zip(b.data()).position(|(x, y)| x != y) {
                    Some(offset) => vec![Mismatch::PayloadMismatch {
                        name: name.into(),
                        offset,
                    }],
                    None => vec![],
                }
            }
        })
        .collect();
    mismatches.extend(per_tensor.into_iter().flatten());

    let mut extra: Vec<&str> = dst_names.difference(&src_set).copied().collect();
    extra.sort_unstable();
    mismatches.extend(extra.into_iter().map(|n| Mismatch::UnexpectedTensor { name: n.into() }));
    Ok(VerifyResult { mismatches })
}

fn compare_rows(
    name: &str,
    src_shape: &[usize],
    src: &[u8],
    dst_shape: &[usize],
    dst: &[u8],
    rows: RowMap<'_>,
) -> Vec<Mismatch> {
    let Some((&src_rows, tail)) = src_shape.split_first() else {
        return vec![Mismatch::ShapeMismatch {
            name: name.into(),
            expected: vec![rows.new_to_old.len()],
            actual: dst_shape.to_vec(),
        }];
    };
    let mut expected = vec![rows.new_to_old.len()];
    expected.extend_from_slice(tail);
    if dst_shape != expected.as_slice() {
        return vec![Mismatch::ShapeMismatch {
            name: name.into(),
            expected,
            actual: dst_shape.to_vec(),
        }];
    }
    let rb = src.len().checked_div(src_rows).unwrap_or(0);
    let mut out = Vec::new();
    for (row, &old) in rows.new_to_old.iter().enumerate() {
        let old = old as usize;
        if old >= src_rows {
            out.push(Mismatch::SourceRowOutOfRange {
                name: name.into(),
                source_row: old,
                rows: src_rows,
            });
            continue;
        }
        if src[old * rb..(old + 1) * rb] != dst[row * rb..(row + 1) * rb] {
            out.push(Mismatch::RowMismatch {
                name: name.into(),
                row,
                source_row: old,
            });
        }
    }
    out
}
