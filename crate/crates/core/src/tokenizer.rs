//! Unigram-LM tokenizer over the pieces of an [`SpModel`].
//!
//! Segmentation is the Viterbi path maximizing the sum of piece scores. A
//! character with no single-character piece may be covered by the unknown
//! piece, scored `min_score - unk_penalty`. Exact score ties go to the path
//! with fewer pieces, then to the lexicographically smallest list of
//! interior boundaries.

use std::collections::HashMap;

use crate::sp_model::{PieceId, PieceKind, SpModel, SpModelError};

/// Word-boundary marker substituted for spaces.
pub const WORD_BOUNDARY: char = '\u{2581}';

pub const DEFAULT_UNK_PENALTY: f32 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot build tokenizer: {0}")]
    Model(#[from] SpModelError),
    #[error("piece id {id} out of range for a vocabulary of {len}")]
    IdOutOfRange { id: PieceId, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerOptions {
    pub unk_penalty: f32,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions {
            unk_penalty: DEFAULT_UNK_PENALTY,
        }
    }
}

/// Character trie mapping piece text to piece id.
#[derive(Debug, Clone)]
struct Trie {
    edges: HashMap<(u32, char), u32>,
    values: Vec<Option<PieceId>>,
}

impl Trie {
    fn new() -> Self {
        Trie {
            edges: HashMap::new(),
            values: vec![None],
        }
    }

    /// Inserts `text`; an existing entry for the same text wins.
    fn insert(&mut self, text: &str, id: PieceId) {
        let mut node = 0u32;
        for c in text.chars() {
            let next = self.values.len() as u32;
            node = *self.edges.entry((node, c)).or_insert_with(|| next);
            if node == next {
                self.values.push(None);
            }
        }
        self.values[node as usize].get_or_insert(id);
    }

    fn get(&self, text: &str) -> Option<PieceId> {
        let mut node = 0u32;
        for c in text.chars() {
            node = *self.edges.get(&(node, c))?;
        }
        self.values[node as usize]
    }

    /// All `(length_in_chars, id)` entries that are prefixes of `chars`.
    fn prefixes<'a>(&'a self, chars: &'a [char]) -> impl Iterator<Item = (usize, PieceId)> + 'a {
        let mut node = Some(0u32);
        chars
            .iter()
            .enumerate()
            .map_while(move |(i, c)| {
                let next = *self.edges.get(&(node?, *c))?;
                node = Some(next);
                Some(self.values[next as usize].map(|id| (i + 1, id)))
            })
            .flatten()
    }
}

/// Text normalization applied before segmentation: runs of spaces collapse,
/// leading and trailing spaces are dropped, and every word is prefixed with
/// [`WORD_BOUNDARY`].
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    for word in text.split(' ').filter(|w| !w.is_empty()) {
        out.push(WORD_BOUNDARY);
        out.push_str(word);
    }
    out
}

/// A segmentation and its total score.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub ids: Vec<PieceId>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    trie: Trie,
    texts: Vec<String>,
    scores: Vec<f32>,
    unk_id: PieceId,
    unk_score: f32,
    unk_penalty: f32,
}

pub fn build_tokenizer(model: &SpModel) -> Result<Tokenizer, TokenizerError> {
    Tokenizer::new(model, TokenizerOptions::default())
}

#[derive(Debug, Clone, Copy)]
struct Best {
    score: f64,
    pieces: u32,
    start: usize,
    id: PieceId,
}

const UNREACHED: Best = Best {
    score: f64::NEG_INFINITY,
    pieces: u32::MAX,
    start: usize::MAX,
    id: 0,
};

impl Tokenizer {
    pub fn new(model: &SpModel, options: TokenizerOptions) -> Result<Self, TokenizerError> {
        let unk_id = model.unk_id()?;
        let mut trie = Trie::new();
        let mut min_score = f32::INFINITY;
        for (id, piece) in model.pieces.iter().enumerate() {
            let matchable = matches!(piece.kind, PieceKind::Normal | PieceKind::UserDefined | PieceKind::Byte);
            if matchable && !piece.text.is_empty() {
                trie.insert(&piece.text, id as PieceId);
            }
            if piece.kind == PieceKind::Normal {
                min_score = min_score.min(piece.score.value());
            }
        }
        if !min_score.is_finite() {
            min_score = 0.0;
        }
        Ok(Tokenizer {
            trie,
            texts: model.pieces.iter().map(|p| p.text.clone()).collect(),
            scores: model.pieces.iter().map(|p| p.score.value()).collect(),
            unk_id,
            unk_score: min_score - options.unk_penalty,
            unk_penalty: options.unk_penalty,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.texts.len()
    }

    pub fn unk_id(&self) -> PieceId {
        self.unk_id
    }

    /// Score charged for one unknown character.
    pub fn unk_score(&self) -> f32 {
        self.unk_score
    }

    pub fn unk_penalty(&self) -> f32 {
        self.unk_penalty
    }

    pub fn piece_text(&self, id: PieceId) -> Option<&str> {
        self.texts.get(id as usize).map(String::as_str)
    }

    /// Exact-text lookup of a matchable piece.
    pub fn lookup(&self, text: &str) -> Option<(PieceId, f32)> {
        self.trie.get(text).map(|id| (id, self.scores[id as usize]))
    }

    /// Normalizes `text` and returns the piece ids of its best segmentation.
    pub fn encode(&self, text: &str) -> Vec<PieceId> {
        self.encode_scored(text).ids
    }

    pub fn encode_scored(&self, text: &str) -> Segmentation {
        let chars: Vec<char> = normalize(text).chars().collect();
        self.segment(&chars)
    }

    /// Viterbi over already-normalized characters.
    pub fn segment(&self, chars: &[char]) -> Segmentation {
        let n = chars.len();
        let mut best = vec![UNREACHED; n + 1];
        best[0] = Best {
            score: 0.0,
            pieces: 0,
            start: 0,
            id: 0,
        };
        for start in 0..n {
            let mut single = false;
            for (len, id) in self.trie.prefixes(&chars[start..]) {
                single |= len == 1;
                relax(&mut best, start, start + len, id, f64::from(self.scores[id as usize]));
            }
            if !single {
                relax(&mut best, start, start + 1, self.unk_id, f64::from(self.unk_score));
            }
        }

        let mut ids = Vec::with_capacity(best[n].pieces as usize);
        let mut pos = n;
        while pos > 0 {
            ids.push(best[pos].id);
            pos = best[pos].start;
        }
        ids.reverse();
        Segmentation {
            ids,
            score: best[n].score,
        }
    }

    /// Concatenates piece texts, turns boundary markers back into spaces and
    /// drops the single leading space.
    pub fn decode(&self, ids: &[PieceId]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let text = self.piece_text(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                len: self.texts.len(),
            })?;
            out.extend(text.chars().map(|c| if c == WORD_BOUNDARY { ' ' } else { c }));
        }
        Ok(match out.strip_prefix(' ') {
            Some(rest) => rest.to_owned(),
            None => out,
        })
    }
}

fn relax(best: &mut [Best], start: usize, end: usize, id: PieceId, score: f64) {
    let from = best[start];
    let cand = Best {
        score: from.score + score,
        pieces: from.pieces + 1,
        start,
        id,
    };
    let cur = best[end];
    let take = if cur.start == usize::MAX {
        true
    } else if cand.score != cur.score {
        cand.score > cur.score
    } else if cand.pieces != cur.pieces {
        cand.pieces < cur.pieces
    } else {
        boundaries(best, start) < boundaries(best, cur.start)
    };
    if take {
        best[end] = cand;
    }
}

/// Interior boundaries of the best path ending at `pos`, plus `pos` itself.
fn boundaries(best: &[Best], mut pos: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while pos > 0 {
        out.push(pos);
        pos = best[pos].start;
    }
    out.reverse();
    out
}
