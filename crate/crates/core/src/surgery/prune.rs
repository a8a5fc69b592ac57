use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::header::{read_tensor_index, write_header, TensorMeta};
use super::SurgeryError;
use crate::select::VocabPlan;
use crate::sp_model::PieceId;

pub const SOURCE_DIGEST_KEY: &str = "vocab_prune.source_sha256";
pub const PLAN_DIGEST_KEY: &str = "vocab_prune.plan_sha256";
pub const TOOL_VERSION_KEY: &str = "vocab_prune.version";

const COPY_CHUNK: usize = 1 << 20;

/// Rows to keep from every vocabulary-axis tensor.
#[derive(Debug, Clone, Copy)]
pub struct RowMap<'a> {
    /// Expected length of the vocabulary axis in the source.
    pub v_old: u64,
    /// Source row of each output row.
    pub new_to_old: &'a [PieceId],
}

impl<'a> From<&'a VocabPlan> for RowMap<'a> {
    fn from(plan: &'a VocabPlan) -> Self {
        RowMap {
            v_old: plan.v_old as u64,
            new_to_old: &plan.new_to_old,
        }
    }
}

impl RowMap<'_> {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.v_old.to_le_bytes());
        for id in self.new_to_old {
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn is_strictly_increasing(&self) -> bool {
        self.new_to_old.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurgeryOptions {
    /// Accept vocabulary tensors with more rows than the plan's `v_old`
    /// (padding rows past the tokenizer's vocabulary are dropped).
    pub allow_extra_rows: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicedTensor {
    pub name: String,
    pub rows_old: u64,
    pub rows_new: u64,
    pub row_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub sliced: Vec<SlicedTensor>,
    pub copied: Vec<String>,
    /// Whole-file sizes.
    pub bytes_old: u64,
    pub bytes_new: u64,
    /// Length prefix plus JSON header.
    pub header_bytes_old: u64,
    pub header_bytes_new: u64,
    pub payload_bytes_old: u64,
    pub payload_bytes_new: u64,
    /// Source data-region bytes outside every tensor.
    pub gap_bytes_old: u64,
    pub params_old: u64,
    pub params_new: u64,
    pub source_sha256: String,
    pub plan_sha256: String,
}

impl SurgeryReport {
    pub fn header_delta(&self) -> i64 {
        self.header_bytes_old as i64 - self.header_bytes_new as i64
    }

    pub fn removed_row_bytes(&self) -> u64 {
        self.sliced
            .iter()
            .map(|s| (s.rows_old - s.rows_new) * s.row_bytes)
            .sum()
    }

    /// `bytes_old - bytes_new` equals removed row bytes plus the header
    /// delta plus dropped gap bytes.
    pub fn size_law_holds(&self) -> bool {
        let lhs = self.bytes_old as i128 - self.bytes_new as i128;
        let rhs = self.removed_row_bytes() as i128 + self.header_delta() as i128 + self.gap_bytes_old as i128;
        lhs == rhs
    }
}

/// Rewrites `src` into `dst` keeping only `plan`'s rows of every tensor in
/// `vocab_tensors`.
pub fn prune_checkpoint(
    src: &Path,
    dst: &Path,
    plan: &VocabPlan,
    vocab_tensors: &[String],
    options: &SurgeryOptions,
) -> Result<SurgeryReport, SurgeryError> {
    prune_checkpoint_rows(src, dst, RowMap::from(plan), vocab_tensors, options)
}

/// Gathers rows of an axis-0-major tensor. Output row `i` is input row
/// `new_to_old[i]`.
pub fn slice_rows(
    data: &[u8],
    meta: &TensorMeta,
    new_to_old: &[PieceId],
) -> Result<(Vec<u8>, TensorMeta), SurgeryError> {
    let rows = *meta
        .shape
        .first()
        .ok_or_else(|| SurgeryError::Scalar(meta.name.clone()))?;
    let rb = meta.row_bytes() as usize;
    let mut out = Vec::with_capacity(new_to_old.len() * rb);
    for &id in new_to_old {
        if u64::from(id) >= rows {
            return Err(SurgeryError::RowOutOfRange { id: id.into(), rows });
        }
        let start = id as usize * rb;
        out.extend_from_slice(&data[start..start + rb]);
    }
    let mut shape = meta.shape.clone();
    shape[0] = new_to_old.len() as u64;
    let out_meta = TensorMeta {
        name: meta.name.clone(),
        dtype: meta.dtype,
        shape,
        data_offsets: (0, out.len() as u64),
    };
    Ok((out, out_meta))
}

pub fn prune_checkpoint_rows(
    src: &Path,
    dst: &Path,
    rows: RowMap<'_>,
    vocab_tensors: &[String],
    options: &SurgeryOptions,
) -> Result<SurgeryReport, SurgeryError> {
    let index = read_tensor_index(src)?;

    let mut names = HashSet::new();
    for name in vocab_tensors {
        if !names.insert(name.as_str()) {
            return Err(SurgeryError::DuplicateName(name.clone()));
        }
        let meta = index
            .get(name)
            .ok_or_else(|| SurgeryError::MissingTensor(name.clone()))?;
        let axis = *meta.shape.first().ok_or_else(|| SurgeryError::Scalar(name.clone()))?;
        let fits = if options.allow_extra_rows {
            axis >= rows.v_old
        } else {
            axis == rows.v_old
        };
        if !fits {
            return Err(SurgeryError::VocabAxisMismatch {
                name: name.clone(),
                rows: axis,
                v_old: rows.v_old,
            });
        }
    }
    if let Some(&bad) = rows.new_to_old.iter().find(|&&id| u64::from(id) >= rows.v_old) {
        return Err(SurgeryError::RowOutOfRange {
            id: bad.into(),
            rows: rows.v_old,
        });
    }

    let mut out_metas = Vec::with_capacity(index.metas.len());
    let mut offset = 0u64;
    for meta in &index.metas {
        let mut shape = meta.shape.clone();
        if names.contains(meta.name.as_str()) {
            shape[0] = rows.new_to_old.len() as u64;
        }
        let len = shape.iter().product::<u64>() * meta.dtype.width();
        out_metas.push(TensorMeta {
            name: meta.name.clone(),
            dtype: meta.dtype,
            shape,
            data_offsets: (offset, offset + len),
        });
        offset += len;
    }

    let plan_sha256 = rows.digest();
    let mut metadata = index.metadata.clone().unwrap_or_default();
    metadata.insert(PLAN_DIGEST_KEY.to_owned(), plan_sha256.clone());
    metadata.insert(TOOL_VERSION_KEY.to_owned(), env!("CARGO_PKG_VERSION").to_owned());
    metadata.insert(SOURCE_DIGEST_KEY.to_owned(), "0".repeat(64));
    let header = write_header(&out_metas, Some(&metadata));

    let dir = match dst.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let written = tempfile::NamedTempFile::new_in(dir)
        .map_err(SurgeryError::io(dir))
        .and_then(|mut tmp| {
            let digest = stream(src, tmp.as_file_mut(), &index.metas, &out_metas, &names, rows, &header).map_err(
                |e| match e {
                    StreamError::Src(err) => SurgeryError::io(src)(err),
                    StreamError::Dst(err) => SurgeryError::io(dst)(err),
                },
            )?;
            metadata.insert(SOURCE_DIGEST_KEY.to_owned(), digest.clone());
            let patched = write_header(&out_metas, Some(&metadata));
            debug_assert_eq!(patched.len(), header.len());
            let file = tmp.as_file_mut();
            file.seek(SeekFrom::Start(8))
                .and_then(|_| file.write_all(&patched))
                .and_then(|_| file.sync_all())
                .map_err(SurgeryError::io(dst))?;
            tmp.persist(dst).map_err(|e| SurgeryError::io(dst)(e.error))?;
            Ok(digest)
        });
    let source_sha256 = match written {
        Ok(d) => d,
        Err(e) => {
            let _ = fs::remove_file(dst);
            return Err(e);
        }
    };

    let sliced = index
        .metas
        .iter()
        .filter(|m| names.contains(m.name.as_str()))
        .map(|m| SlicedTensor {
            name: m.name.clone(),
            rows_old: m.shape[0],
            rows_new: rows.new_to_old.len() as u64,
            row_bytes: m.row_bytes(),
        })
        .collect();
    let copied = index
        .metas
        .iter()
        .filter(|m| !names.contains(m.name.as_str()))
        .map(|m| m.name.clone())
        .collect();
    let header_bytes_new = 8 + header.len() as u64;
    Ok(SurgeryReport {
        sliced,
        copied,
        bytes_old: index.file_len(),
        bytes_new: header_bytes_new + offset,
        header_bytes_old: index.data_start(),
        header_bytes_new,
        payload_bytes_old: index.metas.iter().map(TensorMeta::byte_len).sum(),
        payload_bytes_new: offset,
        gap_bytes_old: index.gap_bytes(),
        params_old: index.total_params(),
        params_new: out_metas.iter().filter_map(TensorMeta::numel).sum(),
        source_sha256,
        plan_sha256,
    })
}

enum StreamError {
    Src(io::Error),
    Dst(io::Error),
}

/// Single sequential pass over `src`: every byte is hashed, tensors are
/// copied or row-gathered into `out`. Returns the hex SHA-256 of `src`.
fn stream(
    src: &Path,
    out: &mut File,
    metas: &[TensorMeta],
    out_metas: &[TensorMeta],
    sliced: &HashSet<&str>,
    rows: RowMap<'_>,
    header: &[u8],
) -> Result<String, StreamError> {
    let file = File::open(src).map_err(StreamError::Src)?;
    let mut input = Hashing {
        inner: BufReader::with_capacity(COPY_CHUNK, file),
        hasher: Sha256::new(),
    };
    let mut output = BufWriter::with_capacity(COPY_CHUNK, out);
    let w = |r: io::Result<()>| r.map_err(StreamError::Dst);

    let mut prefix = [0u8; 8];
    input.read_exact(&mut prefix).map_err(StreamError::Src)?;
    let header_len = u64::from_le_bytes(prefix);
    input.skip(header_len).map_err(StreamError::Src)?;

    w(output.write_all(&(header.len() as u64).to_le_bytes()))?;
    w(output.write_all(header))?;

    let mut pos = 0u64;
    let mut buf = vec![0u8; COPY_CHUNK];
    for (meta, out_meta) in metas.iter().zip(out_metas) {
        input.skip(meta.data_offsets.0 - pos).map_err(StreamError::Src)?;
        if sliced.contains(meta.name.as_str()) {
            gather_rows(&mut input, &mut output, meta, out_meta, rows)?;
        } else {
            let mut left = meta.byte_len();
            while left > 0 {
                let n = left.min(buf.len() as u64) as usize;
                input.read_exact(&mut buf[..n]).map_err(StreamError::Src)?;
                w(output.write_all(&buf[..n]))?;
                left -= n as u64;
            }
        }
        pos = meta.data_offsets.1;
    }
    io::copy(&mut input, &mut io::sink()).map_err(StreamError::Src)?;
    w(output.flush())?;
    Ok(hex::encode(input.hasher.finalize()))
}

fn gather_rows<R: Read, W: Write>(
    input: &mut R,
    output: &mut W,
    meta: &TensorMeta,
    out_meta: &TensorMeta,
    rows: RowMap<'_>,
) -> Result<(), StreamError> {
    let rb = meta.row_bytes() as usize;
    let mut row = vec![0u8; rb];
    if rows.is_strictly_increasing() {
        let mut wanted = rows.new_to_old.iter().peekable();
        for r in 0..meta.shape[0] {
            input.read_exact(&mut row).map_err(StreamError::Src)?;
            if wanted.next_if(|&&id| u64::from(id) == r).is_some() {
                output.write_all(&row).map_err(StreamError::Dst)?;
            }
        }
        return Ok(());
    }
    // Arbitrary order: hold the output tensor, fill it in one pass.
    let mut targets: Vec<(PieceId, usize)> = rows
        .new_to_old
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    targets.sort_unstable();
    let mut gathered = vec![0u8; out_meta.byte_len() as usize];
    let mut t = 0;
    for r in 0..meta.shape[0] {
        input.read_exact(&mut row).map_err(StreamError::Src)?;
        while t < targets.len() && u64::from(targets[t].0) == r {
            let at = targets[t].1 * rb;
            gathered[at..at + rb].copy_from_slice(&row);
            t += 1;
        }
    }
    output.write_all(&gathered).map_err(StreamError::Dst)
}

/// Reader that hashes everything read through it.
struct Hashing<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Hashing<R> {
    fn skip(&mut self, n: u64) -> io::Result<()> {
        let copied = io::copy(&mut self.by_ref().take(n), &mut io::sink())?;
        if copied != n {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "source ended early"));
        }
        Ok(())
    }
}

impl<R: Read> Read for Hashing<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}
