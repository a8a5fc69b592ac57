//! Corpus reading and per-piece frequency statistics.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::sp_model::PieceId;
use crate::tokenizer::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("frequency tables have different vocabulary sizes ({left} vs {right})")]
    VocabMismatch { left: usize, right: usize },
    #[error("frequency table is empty")]
    EmptyTable,
    #[error("table has no used pieces")]
    NoUsedPieces,
    #[error("malformed frequency table at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Streams sentences from a line-oriented corpus file.
///
/// Lines of the form `id<TAB>sentence` (Leipzig sentence files) yield the
/// text after the first tab. Empty lines are skipped, as are lines that are
/// not valid UTF-8; the latter are counted in [`CorpusReader::skipped_invalid`].
pub struct CorpusReader<R> {
    reader: R,
    path: PathBuf,
    buf: Vec<u8>,
    line: usize,
    skipped_invalid: usize,
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<CorpusReader<BufReader<File>>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(CorpusReader::new(BufReader::with_capacity(1 << 20, file), path))
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        CorpusReader {
            reader,
            path: path.into(),
            buf: Vec::new(),
            line: 0,
            skipped_invalid: 0,
        }
    }

    pub fn skipped_invalid(&self) -> usize {
        self.skipped_invalid
    }

    /// Reads up to `max` sentences.
    pub fn next_chunk(&mut self, max: usize) -> Result<Vec<String>, CorpusError> {
        let mut out = Vec::with_capacity(max);
        while out.len() < max {
            match self.next() {
                Some(s) => out.push(s?),
                None => break,
            }
        }
        Ok(out)
    }
}

/// Extracts the sentence from one raw line, if there is one.
pub fn sentence_of(line: &str) -> Option<&str> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let text = match line.split_once('\t') {
        Some((_, text)) => text,
        None => line,
    };
    (!text.is_empty()).then_some(text)
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<String, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => self.line += 1,
                Err(source) => {
                    return Some(Err(CorpusError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            }
            let Ok(line) = std::str::from_utf8(&self.buf) else {
                self.skipped_invalid += 1;
                log::warn!(
                    "{}:{}: skipping line that is not valid UTF-8",
                    self.path.display(),
                    self.line
                );
                continue;
            };
            if let Some(text) = sentence_of(line) {
                return Some(Ok(text.to_owned()));
            }
        }
    }
}

/// Occurrence counts per piece id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn new(vocab_size: usize) -> Self {
        FrequencyTable {
            counts: vec![0; vocab_size],
            total: 0,
        }
    }

    /// Builds a table from `(id, count)` pairs. Panics if an id is out of
    /// range.
    pub fn from_counts(vocab_size: usize, pairs: impl IntoIterator<Item = (PieceId, u64)>) -> Self {
        let mut t = FrequencyTable::new(vocab_size);
        for (id, n) in pairs {
            t.counts[id as usize] += n;
            t.total += n;
        }
        t
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, id: PieceId) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn add(&mut self, id: PieceId) {
        self.counts[id as usize] += 1;
        self.total += 1;
    }

    pub fn add_all(&mut self, ids: &[PieceId]) {
        for &id in ids {
            self.add(id);
        }
    }

    /// Ids with a nonzero count, ascending.
    pub fn used_ids(&self) -> impl Iterator<Item = PieceId> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(id, _)| id as PieceId)
    }

    pub fn used_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Used ids ordered by descending count, ties by ascending id.
    pub fn ranked(&self) -> Vec<PieceId> {
        let mut ids: Vec<PieceId> = self.used_ids().collect();
        ids.sort_by_key(|&id| (std::cmp::Reverse(self.counts[id as usize]), id));
        ids
    }

    pub fn merge(&self, other: &FrequencyTable) -> Result<FrequencyTable, CorpusError> {
        if self.vocab_size() != other.vocab_size() {
            return Err(CorpusError::VocabMismatch {
                left: self.vocab_size(),
                right: other.vocab_size(),
            });
        }
        Ok(FrequencyTable {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            total: self.total + other.total,
        })
    }

    /// Writes the table as TSV: a `#` header with vocab_size and total, then
    /// `id<TAB>text<TAB>count` rows for used pieces in ranked order. Tabs,
    /// newlines and backslashes in piece text are backslash-escaped.
    pub fn write_tsv<W: Write>(&self, mut out: W, text_of: impl Fn(PieceId) -> String) -> io::Result<()> {
        writeln!(out, "# vocab_size={}\ttotal={}", self.vocab_size(), self.total)?;
        for id in self.ranked() {
            writeln!(out, "{}\t{}\t{}", id, escape(&text_of(id)), self.counts[id as usize])?;
        }
        out.flush()
    }

    pub fn save_tsv(&self, path: &Path, text_of: impl Fn(PieceId) -> String) -> io::Result<()> {
        self.write_tsv(BufWriter::new(File::create(path)?), text_of)
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<FrequencyTable, CorpusError> {
        let malformed = |line: usize, reason: &str| CorpusError::Malformed {
            line,
            reason: reason.to_owned(),
        };
        let mut lines = input.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(h))) => h,
            _ => return Err(malformed(1, "missing header")),
        };
        let field = |key: &str| -> Option<u64> {
            header
                .trim_start_matches('#')
                .split('\t')
                .find_map(|kv| kv.trim().strip_prefix(key)?.strip_prefix('=')?.parse().ok())
        };
        let (Some(vocab), Some(total)) = (field("vocab_size"), field("total")) else {
            return Err(malformed(1, "header must carry vocab_size and total"));
        };
        let mut table = FrequencyTable::new(vocab as usize);
        for (i, line) in lines {
            let line = line.map_err(|e| malformed(i + 1, &e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let id = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
            let count = line.rsplit('\t').next().and_then(|s| s.parse::<u64>().ok());
            let (Some(id), Some(count)) = (id, count) else {
                return Err(malformed(i + 1, "expected id<TAB>text<TAB>count"));
            };
            if id >= vocab {
                return Err(malformed(i + 1, "piece id exceeds vocab_size"));
            }
            table.counts[id as usize] += count;
            table.total += count;
        }
        if table.total != total {
            return Err(malformed(1, "row counts do not sum to the header total"));
        }
        Ok(table)
    }

    pub fn load_tsv(path: &Path) -> Result<FrequencyTable, CorpusError> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        FrequencyTable::read_tsv(BufReader::new(file))
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn count_frequencies<I>(tok: &Tokenizer, sentences: I) -> FrequencyTable
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    let mut table = FrequencyTable::new(tok.vocab_size());
    for s in sentences {
        table.add_all(&tok.encode(s.as_ref()));
    }
    table
}

/// Summary of one counting pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountSummary {
    pub sentences: u64,
    pub skipped_invalid: u64,
}

/// Counts a corpus file in shards of `shard_lines` sentences, encoding each
/// shard's sentences across `jobs` worker threads.
pub fn count_corpus(
    tok: &Tokenizer,
    path: &Path,
    jobs: usize,
    shard_lines: usize,
) -> Result<(FrequencyTable, CountSummary), CorpusError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    let mut reader = read_corpus(path)?;
    let mut table = FrequencyTable::new(tok.vocab_size());
    let mut sentences = 0u64;
    let per_task = shard_lines.div_ceil(jobs.max(1) * 4).max(64);
    loop {
        let chunk = reader.next_chunk(shard_lines.max(1))?;
        if chunk.is_empty() {
            break;
        }
        sentences += chunk.len() as u64;
        let shard = pool.install(|| {
            chunk
                .par_chunks(per_task)
                .map(|part| count_frequencies(tok, part))
                .reduce(
                    || FrequencyTable::new(tok.vocab_size()),
                    |a, b| a.merge(&b).expect("same tokenizer"),
                )
        });
        table = table.merge(&shard)?;
    }
    Ok((
        table,
        CountSummary {
            sentences,
            skipped_invalid: reader.skipped_invalid() as u64,
        },
    ))
}

/// Fraction of the vocabulary with a nonzero count.
pub fn used_fraction(t: &FrequencyTable) -> f64 {
    if t.vocab_size() == 0 {
        return 0.0;
    }
    t.used_count() as f64 / t.vocab_size() as f64
}

/// Cumulative share of all occurrences covered by the top-k pieces, for
/// k = 1..=used pieces.
pub fn coverage_curve(t: &FrequencyTable) -> Result<Vec<(usize, f64)>, CorpusError> {
    if t.total == 0 {
        return Err(CorpusError::EmptyTable);
    }
    let mut cumulative = 0u64;
    Ok(t.ranked()
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            cumulative += t.counts[id as usize];
            (i + 1, cumulative as f64 / t.total as f64)
        })
        .collect())
}

/// Coverage of the top-`k` pieces; 1.0 once `k` reaches the used count.
pub fn coverage_at(curve: &[(usize, f64)], k: usize) -> f64 {
    match k {
        0 => 0.0,
        k if k >= curve.len() => 1.0,
        k => curve[k - 1].1,
    }
}

/// Share of `a`'s used pieces that are also used in `b`.
pub fn overlap(a: &FrequencyTable, b: &FrequencyTable) -> Result<f64, CorpusError> {
    if a.vocab_size() != b.vocab_size() {
        return Err(CorpusError::VocabMismatch {
            left: a.vocab_size(),
            right: b.vocab_size(),
        });
    }
    let used_a = a.used_count();
    if used_a == 0 {
        return Err(CorpusError::NoUsedPieces);
    }
    let shared = a.used_ids().filter(|&id| b.count(id) > 0).count();
    Ok(shared as f64 / used_a as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sp_model::{Piece, PieceKind, SpModel};
    use crate::tokenizer::build_tokenizer;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn sentences(text: &str) -> (Vec<String>, usize) {
        let mut r = CorpusReader::new(Cursor::new(text.as_bytes().to_vec()), "mem");
        let out = r.by_ref().map(Result::unwrap).collect();
        (out, r.skipped_invalid())
    }

    #[test]
    fn leipzig_lines_drop_the_id() {
        assert_eq!(sentences("17\tSaya makan nasi.\n").0, vec!["Saya makan nasi."]);
        assert_eq!(sentences("plain sentence").0, vec!["plain sentence"]);
        assert!(sentences("").0.is_empty());
        assert_eq!(sentences("a\r\n\n\nb\n").0, vec!["a", "b"]);
    }

    #[test]
    fn invalid_utf8_lines_are_counted() {
        let mut r = CorpusReader::new(Cursor::new(b"ok\n\xff\xfe\nfine\n".to_vec()), "mem");
        let got: Vec<_> = r.by_ref().map(Result::unwrap).collect();
        assert_eq!(got, vec!["ok", "fine"]);
        assert_eq!(r.skipped_invalid(), 1);
    }

    fn toy_tokenizer() -> Tokenizer {
        build_tokenizer(&SpModel::from_pieces(vec![
            Piece::new("<unk>", 0.0, PieceKind::Unknown),
            Piece::new("\u{2581}ab", -1.0, PieceKind::Normal),
            Piece::new("\u{2581}", -2.0, PieceKind::Normal),
            Piece::new("c", -2.0, PieceKind::Normal),
        ]))
        .unwrap()
    }

    #[test]
    fn counting() {
        let tok = toy_tokenizer();
        assert_eq!(count_frequencies(&tok, Vec::<String>::new()).total(), 0);
        let t = count_frequencies(&tok, ["ab c", "ab c"]);
        assert_eq!(t, FrequencyTable::from_counts(4, [(1, 2), (2, 2), (3, 2)]));
        // "▁qqq" -> ▁ plus three unknowns
        let t = count_frequencies(&tok, ["qqq"]);
        assert_eq!(t.count(0), 3);
    }

    #[test]
    fn merge_and_stats() {
        let a = FrequencyTable::from_counts(8, [(1, 2)]);
        let b = FrequencyTable::from_counts(8, [(1, 3), (4, 1)]);
        let m = a.merge(&b).unwrap();
        assert_eq!(m, FrequencyTable::from_counts(8, [(1, 5), (4, 1)]));
        assert_eq!(m.total(), 6);
        assert_eq!(a.merge(&FrequencyTable::new(8)).unwrap(), a);
        assert!(matches!(
            a.merge(&FrequencyTable::new(9)),
            Err(CorpusError::VocabMismatch { left: 8, right: 9 })
        ));

        assert_eq!(used_fraction(&FrequencyTable::new(100)), 0.0);
        assert_eq!(used_fraction(&FrequencyTable::from_counts(4, [(0, 1), (1, 7)])), 0.5);
    }

    #[test]
    fn coverage() {
        assert_eq!(
            coverage_curve(&FrequencyTable::from_counts(3, [(2, 9)])).unwrap(),
            vec![(1, 1.0)]
        );
        let curve = coverage_curve(&FrequencyTable::from_counts(3, [(0, 1), (2, 3)])).unwrap();
        assert_eq!(curve, vec![(1, 0.75), (2, 1.0)]);
        assert_eq!(coverage_at(&curve, 20_000), 1.0);
        assert!(matches!(
            coverage_curve(&FrequencyTable::new(3)),
            Err(CorpusError::EmptyTable)
        ));
    }

    #[test]
    fn overlap_is_asymmetric() {
        let a = FrequencyTable::from_counts(8, [(1, 1), (2, 1), (3, 1), (4, 1)]);
        let b = FrequencyTable::from_counts(8, [(2, 5), (3, 1)]);
        assert_eq!(overlap(&a, &b).unwrap(), 0.5);
        assert_eq!(overlap(&b, &a).unwrap(), 1.0);
        assert_eq!(overlap(&a, &a).unwrap(), 1.0);
        assert!(matches!(
            overlap(&FrequencyTable::new(8), &a),
            Err(CorpusError::NoUsedPieces)
        ));
    }

    #[test]
    fn tsv_round_trip_and_escaping() {
        let t = FrequencyTable::from_counts(5, [(1, 4), (3, 4), (2, 9)]);
        let mut buf = Vec::new();
        t.write_tsv(&mut buf, |id| if id == 3 { "a\tb".into() } else { format!("p{id}") })
            .unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "# vocab_size=5\ttotal=17\n2\tp2\t9\n1\tp1\t4\n3\ta\\tb\t4\n");
        assert_eq!(FrequencyTable::read_tsv(Cursor::new(buf)).unwrap(), t);
    }

    fn arb_table(vocab: usize) -> impl Strategy<Value = FrequencyTable> {
        proptest::collection::vec((0..vocab as PieceId, 0u64..50), 0..20)
            .prop_map(move |pairs| FrequencyTable::from_counts(vocab, pairs))
    }

    proptest! {
        #[test]
        fn merge_commutes_and_associates(a in arb_table(16), b in arb_table(16), c in arb_table(16)) {
            prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
            prop_assert_eq!(
                a.merge(&b).unwrap().merge(&c).unwrap(),
                a.merge(&b.merge(&c).unwrap()).unwrap()
            );
            let m = a.merge(&b).unwrap();
            prop_assert!(used_fraction(&m) >= used_fraction(&a).max(used_fraction(&b)));
        }

        #[test]
        fn coverage_is_monotone_and_ends_at_one(t in arb_table(32)) {
            prop_assume!(t.total() > 0);
            let curve = coverage_curve(&t).unwrap();
            prop_assert_eq!(curve.len(), t.used_count());
            prop_assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert_eq!(curve.last().unwrap().1, 1.0);
        }

        #[test]
        fn sharding_does_not_change_counts(
            lines in proptest::collection::vec("[abcq ]{0,12}", 0..30),
            cut in any::<proptest::sample::Index>(),
        ) {
            let tok = toy_tokenizer();
            let whole = count_frequencies(&tok, &lines);
            let k = if lines.is_empty() { 0 } else { cut.index(lines.len() + 1) };
            let left = count_frequencies(&tok, &lines[..k]);
            let right = count_frequencies(&tok, &lines[k..]);
            prop_assert_eq!(whole, left.merge(&right).unwrap());
        }
    }
}
