//! Codec for SentencePiece `ModelProto` files.
//!
//! Only the repeated `pieces` field (field 1) is decoded. Every other
//! top-level field (trainer spec, normalizer spec, denormalizer spec, ...) is
//! kept as its raw record bytes and written back untouched, so
//! `serialize(parse(bytes)) == bytes` for any input this module accepts.
//!
//! Pieces whose wire encoding is not the canonical one produced by
//! [`serialize_sp_model`] (reordered sub-fields, overlong varints, repeated fields)
//! remember their original bytes and re-emit them as long as their decoded
//! content is left unchanged.

use std::fmt;

use crate::wire::{self, Records, Value, WireError, WireType};

/// Dense piece id: the position of a piece in the model.
pub type PieceId = u32;

const PIECES_FIELD: u32 = 1;
const PIECE_TEXT: u32 = 1;
const PIECE_SCORE: u32 = 2;
const PIECE_KIND: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PieceKind {
    Normal = 1,
    Unknown = 2,
    Control = 3,
    UserDefined = 4,
    Unused = 5,
    Byte = 6,
}

impl PieceKind {
    pub fn from_wire(value: u64) -> Option<Self> {
        Some(match value {
            1 => PieceKind::Normal,
            2 => PieceKind::Unknown,
            3 => PieceKind::Control,
            4 => PieceKind::UserDefined,
            5 => PieceKind::Unused,
            6 => PieceKind::Byte,
            _ => return None,
        })
    }
}

/// A piece score, held as the raw IEEE-754 bits read from the file.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Score(u32);

impl Score {
    pub fn new(value: f32) -> Self {
        Score(value.to_bits())
    }

    pub fn from_le_bytes(bytes: [u8; 4]) -> Self {
        Score(u32::from_le_bytes(bytes))
    }

    pub fn to_le_bytes(self) -> [u8; 4] {
        self.0.to_le_bytes()
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f32 {
        f32::from_bits(self.0)
    }
}

impl fmt::Debug for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.value())
    }
}

impl From<f32> for Score {
    fn from(value: f32) -> Self {
        Score::new(value)
    }
}

/// One vocabulary entry.
#[derive(Clone)]
pub struct Piece {
    pub text: String,
    pub score: Score,
    pub kind: PieceKind,
    wire: PieceWire,
}

#[derive(Clone, Default)]
struct PieceWire {
    text_present: bool,
    score_present: bool,
    kind_present: bool,
    /// Raw records of sub-fields other than text/score/kind.
    extra: Vec<u8>,
    verbatim: Option<Box<Verbatim>>,
}

/// Original record bytes plus the content they decoded to.
#[derive(Clone)]
struct Verbatim {
    text: String,
    score: Score,
    kind: PieceKind,
    bytes: Vec<u8>,
}

impl Piece {
    pub fn new(text: impl Into<String>, score: impl Into<Score>, kind: PieceKind) -> Self {
        Piece {
            text: text.into(),
            score: score.into(),
            kind,
            wire: PieceWire {
                text_present: true,
                score_present: true,
                kind_present: kind != PieceKind::Normal,
                ..Default::default()
            },
        }
    }

    fn encode_canonical(&self, out: &mut Vec<u8>) {
        let mut body = Vec::with_capacity(self.text.len() + 16 + self.wire.extra.len());
        if self.wire.text_present || !self.text.is_empty() {
            wire::write_bytes_field(PIECE_TEXT, self.text.as_bytes(), &mut body);
        }
        if self.wire.score_present || self.score.bits() != 0 {
            wire::write_key(PIECE_SCORE, WireType::Fixed32, &mut body);
            body.extend_from_slice(&self.score.to_le_bytes());
        }
        if self.wire.kind_present || self.kind != PieceKind::Normal {
            wire::write_key(PIECE_KIND, WireType::Varint, &mut body);
            wire::write_varint(self.kind as u64, &mut body);
        }
        body.extend_from_slice(&self.wire.extra);
        wire::write_bytes_field(PIECES_FIELD, &body, out);
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match &self.wire.verbatim {
            Some(v) if v.text == self.text && v.score == self.score && v.kind == self.kind => {
                out.extend_from_slice(&v.bytes)
            }
            _ => self.encode_canonical(out),
        }
    }
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
            && self.score == other.score
            && self.kind == other.kind
            && self.wire.extra == other.wire.extra
    }
}

impl fmt::Debug for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Piece")
            .field("text", &self.text)
            .field("score", &self.score)
            .field("kind", &self.kind)
            .finish()
    }
}

/// A top-level record other than a piece, kept byte-for-byte.
#[derive(Debug, Clone)]
pub struct OpaqueField {
    field: u32,
    offset: usize,
    bytes: Vec<u8>,
    /// Number of pieces that precede this record in the file.
    pieces_before: usize,
}

impl OpaqueField {
    pub fn field_number(&self) -> u32 {
        self.field
    }

    /// Byte offset of the record in the file it was parsed from.
    pub fn offset(&self) -> usize {
        self.offset
    }

    /// The complete record: key, length prefix (if any) and payload.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl PartialEq for OpaqueField {
    fn eq(&self, other: &Self) -> bool {
        self.field == other.field && self.bytes == other.bytes && self.pieces_before == other.pieces_before
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpModelError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("piece field {field} at byte offset {offset} has wire type {found}, expected {expected}")]
    WireTypeMismatch {
        offset: usize,
        field: u32,
        found: u8,
        expected: u8,
    },
    #[error("piece text at byte offset {offset} is not valid UTF-8")]
    InvalidUtf8 { offset: usize },
    #[error("unknown piece kind {value} at byte offset {offset}")]
    InvalidKind { offset: usize, value: u64 },
    #[error("model must contain exactly one UNKNOWN piece, found {count}")]
    UnknownCount { count: usize },
    #[error("piece {id} ({kind:?}) has empty text")]
    EmptyText { id: PieceId, kind: PieceKind },
    #[error("piece id {id} listed twice in keep list")]
    DuplicateId { id: PieceId },
    #[error("piece id {id} out of range for a model of {len} pieces")]
    IdOutOfRange { id: PieceId, len: usize },
    #[error("keep list omits the UNKNOWN piece (id {id})")]
    MissingUnknown { id: PieceId },
}

/// A parsed tokenizer model.
#[derive(Debug, Clone, Default)]
pub struct SpModel {
    /// Pieces in id order.
    pub pieces: Vec<Piece>,
    opaque: Vec<OpaqueField>,
    source_length: usize,
}

impl PartialEq for SpModel {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.opaque == other.opaque
    }
}

impl SpModel {
    /// Builds a model from pieces alone, with no other top-level fields.
    pub fn from_pieces(pieces: Vec<Piece>) -> Self {
        SpModel {
            pieces,
            opaque: Vec::new(),
            source_length: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn opaque_fields(&self) -> &[OpaqueField] {
        &self.opaque
    }

    /// Byte length of the file this model was parsed from.
    pub fn source_length(&self) -> usize {
        self.source_length
    }

    pub fn piece(&self, id: PieceId) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    /// Id of the first piece whose text equals `text`.
    pub fn id_of(&self, text: &str) -> Option<PieceId> {
        self.pieces.iter().position(|p| p.text == text).map(|i| i as PieceId)
    }

    /// Id of the single UNKNOWN piece.
    pub fn unk_id(&self) -> Result<PieceId, SpModelError> {
        let mut unks = self
            .pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == PieceKind::Unknown);
        match (unks.next(), unks.count()) {
            (Some((id, _)), 0) => Ok(id as PieceId),
            (first, rest) => Err(SpModelError::UnknownCount {
                count: first.map_or(0, |_| 1 + rest),
            }),
        }
    }

    /// Checks the model-level invariants: one UNKNOWN piece, and non-empty
    /// text on NORMAL / USER_DEFINED pieces.
    pub fn validate(&self) -> Result<(), SpModelError> {
        self.unk_id()?;
        for (id, p) in self.pieces.iter().enumerate() {
            if p.text.is_empty() && matches!(p.kind, PieceKind::Normal | PieceKind::UserDefined) {
                return Err(SpModelError::EmptyText {
                    id: id as PieceId,
                    kind: p.kind,
                });
            }
        }
        Ok(())
    }

    /// Returns a model holding `self.pieces[keep[i]]` at position `i`.
    ///
    /// Non-piece fields are copied unchanged.
    pub fn prune_pieces(&self, keep: &[PieceId]) -> Result<SpModel, SpModelError> {
        let unk = self.unk_id()?;
        let mut seen = vec![false; self.pieces.len()];
        for &id in keep {
            let slot = seen.get_mut(id as usize).ok_or(SpModelError::IdOutOfRange {
                id,
                len: self.pieces.len(),
            })?;
            if std::mem::replace(slot, true) {
                return Err(SpModelError::DuplicateId { id });
            }
        }
        if !seen[unk as usize] {
            return Err(SpModelError::MissingUnknown { id: unk });
        }

        let pieces = keep.iter().map(|&id| self.pieces[id as usize].clone()).collect();
        let opaque = self
            .opaque
            .iter()
            .map(|f| OpaqueField {
                pieces_before: keep.iter().filter(|&&id| (id as usize) < f.pieces_before).count(),
                ..f.clone()
            })
            .collect();
        Ok(SpModel {
            pieces,
            opaque,
            source_length: self.source_length,
        })
    }
}

/// Parses a serialized `ModelProto`.
pub fn parse_sp_model(bytes: &[u8]) -> Result<SpModel, SpModelError> {
    let mut pieces = Vec::new();
    let mut opaque = Vec::new();
    for rec in Records::new(bytes, 0) {
        let rec = rec?;
        match (rec.field, rec.value) {
            (PIECES_FIELD, Value::Bytes { start, end }) => {
                let mut piece = parse_piece(&bytes[start..end], start)?;
                let original = &bytes[rec.span.clone()];
                let mut canonical = Vec::with_capacity(original.len());
                piece.encode_canonical(&mut canonical);
                if canonical != original {
                    piece.wire.verbatim = Some(Box::new(Verbatim {
                        text: piece.text.clone(),
                        score: piece.score,
                        kind: piece.kind,
                        bytes: original.to_vec(),
                    }));
                }
                pieces.push(piece);
            }
            (PIECES_FIELD, _) => {
                return Err(SpModelError::WireTypeMismatch {
                    offset: rec.span.start,
                    field: PIECES_FIELD,
                    found: rec.wire_type.code(),
                    expected: WireType::LengthDelimited.code(),
                })
            }
            (field, _) => opaque.push(OpaqueField {
                field,
                offset: rec.span.start,
                bytes: bytes[rec.span].to_vec(),
                pieces_before: pieces.len(),
            }),
        }
    }
    Ok(SpModel {
        pieces,
        opaque,
        source_length: bytes.len(),
    })
}

fn parse_piece(buf: &[u8], base: usize) -> Result<Piece, SpModelError> {
    let mut piece = Piece {
        text: String::new(),
        score: Score::default(),
        kind: PieceKind::Normal,
        wire: PieceWire::default(),
    };
    for rec in Records::new(buf, base) {
        let rec = rec?;
        let mismatch = |expected: WireType| SpModelError::WireTypeMismatch {
            offset: base + rec.span.start,
            field: rec.field,
            found: rec.wire_type.code(),
            expected: expected.code(),
        };
        match rec.field {
            PIECE_TEXT => {
                let Value::Bytes { start, end } = rec.value else {
                    return Err(mismatch(WireType::LengthDelimited));
                };
                piece.text = std::str::from_utf8(&buf[start..end])
                    .map_err(|_| SpModelError::InvalidUtf8 { offset: base + start })?
                    .to_owned();
                piece.wire.text_present = true;
            }
            PIECE_SCORE => {
                let Value::Fixed32(raw) = rec.value else {
                    return Err(mismatch(WireType::Fixed32));
                };
                piece.score = Score::from_le_bytes(raw);
                piece.wire.score_present = true;
            }
            PIECE_KIND => {
                let Value::Varint(v) = rec.value else {
                    return Err(mismatch(WireType::Varint));
                };
                piece.kind = PieceKind::from_wire(v).ok_or(SpModelError::InvalidKind {
                    offset: base + rec.span.start,
                    value: v,
                })?;
                piece.wire.kind_present = true;
            }
            _ => piece.wire.extra.extend_from_slice(&buf[rec.span]),
        }
    }
    Ok(piece)
}

/// Serializes a model. Non-piece fields keep their original relative order
/// and position with respect to the piece list.
pub fn serialize_sp_model(model: &SpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.source_length.max(64));
    let mut next = 0;
    for field in &model.opaque {
        let upto = field.pieces_before.min(model.pieces.len());
        for piece in &model.pieces[next.min(upto)..upto] {
            piece.encode(&mut out);
        }
        next = next.max(upto);
        out.extend_from_slice(&field.bytes);
    }
    for piece in &model.pieces[next..] {
        piece.encode(&mut out);
    }
    out
}
