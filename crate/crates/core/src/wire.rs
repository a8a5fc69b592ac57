//! Minimal protobuf wire-format reader and writer.
//!
//! Only the subset needed to walk a `ModelProto` is implemented: varint,
//! 64-bit, length-delimited and 32-bit records. Groups (wire types 3/4) are
//! rejected.

use std::ops::Range;

/// Longest legal varint encoding of a `u64`.
const MAX_VARINT_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireType {
    Varint,
    Fixed64,
    LengthDelimited,
    Fixed32,
}

impl WireType {
    pub fn code(self) -> u8 {
        match self {
            WireType::Varint => 0,
            WireType::Fixed64 => 1,
            WireType::LengthDelimited => 2,
            WireType::Fixed32 => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("truncated varint at byte offset {offset}")]
    TruncatedVarint { offset: usize },
    #[error("varint longer than 10 bytes at byte offset {offset}")]
    VarintOverflow { offset: usize },
    #[error("length-delimited field at byte offset {offset} declares {declared} bytes but only {available} remain")]
    Overrun {
        offset: usize,
        declared: u64,
        available: usize,
    },
    #[error("truncated {width}-byte fixed field at byte offset {offset}")]
    TruncatedFixed { offset: usize, width: usize },
    #[error("unsupported wire type {wire_type} at byte offset {offset}")]
    UnsupportedWireType { offset: usize, wire_type: u8 },
    #[error("invalid field number {field} at byte offset {offset}")]
    InvalidFieldNumber { offset: usize, field: u64 },
}

/// Decodes a varint starting at `pos`. Returns the value and the position
/// just past it. `base` is added to reported offsets.
pub fn read_varint(buf: &[u8], pos: usize, base: usize) -> Result<(u64, usize), WireError> {
    let mut value = 0u64;
    for i in 0..MAX_VARINT_LEN {
        let Some(&byte) = buf.get(pos + i) else {
            return Err(WireError::TruncatedVarint { offset: base + pos });
        };
        value |= u64::from(byte & 0x7f) << (7 * i);
        if byte & 0x80 == 0 {
            return Ok((value, pos + i + 1));
        }
    }
    Err(WireError::VarintOverflow { offset: base + pos })
}

pub fn write_varint(mut value: u64, out: &mut Vec<u8>) {
    while value >= 0x80 {
        out.push((value as u8) | 0x80);
        value >>= 7;
    }
    out.push(value as u8);
}

pub fn write_key(field: u32, wire_type: WireType, out: &mut Vec<u8>) {
    write_varint((u64::from(field) << 3) | u64::from(wire_type.code()), out);
}

pub fn write_bytes_field(field: u32, payload: &[u8], out: &mut Vec<u8>) {
    write_key(field, WireType::LengthDelimited, out);
    write_varint(payload.len() as u64, out);
    out.extend_from_slice(payload);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Varint(u64),
    Fixed64([u8; 8]),
    /// Payload byte range within the buffer being walked.
    Bytes {
        start: usize,
        end: usize,
    },
    Fixed32([u8; 4]),
}

/// One top-level record of a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub field: u32,
    pub wire_type: WireType,
    pub value: Value,
    /// Byte range of the whole record (key through payload).
    pub span: Range<usize>,
}

/// Iterates over the records of one message held in `buf`.
///
/// Offsets in errors are reported relative to `base`, so nested messages can
/// report positions in the enclosing file.
pub struct Records<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
    failed: bool,
}

impl<'a> Records<'a> {
    pub fn new(buf: &'a [u8], base: usize) -> Self {
        Records {
            buf,
            pos: 0,
            base,
            failed: false,
        }
    }

    fn next_record(&mut self) -> Result<Record, WireError> {
        let start = self.pos;
        let (key, pos) = read_varint(self.buf, start, self.base)?;
        let field = key >> 3;
        if field == 0 || field > u64::from(u32::MAX >> 3) {
            return Err(WireError::InvalidFieldNumber {
                offset: self.base + start,
                field,
            });
        }
        let (wire_type, value, end) = match key & 7 {
            0 => {
                let (v, end) = read_varint(self.buf, pos, self.base)?;
                (WireType::Varint, Value::Varint(v), end)
            }
            1 => {
                let bytes = self.fixed::<8>(pos)?;
                (WireType::Fixed64, Value::Fixed64(bytes), pos + 8)
            }
            2 => {
                let (len, body) = read_varint(self.buf, pos, self.base)?;
                let available = self.buf.len() - body;
                if len > available as u64 {
                    return Err(WireError::Overrun {
                        offset: self.base + start,
                        declared: len,
                        available,
                    });
                }
                let end = body + len as usize;
                (WireType::LengthDelimited, Value::Bytes { start: body, end }, end)
            }
            5 => {
                let bytes = self.fixed::<4>(pos)?;
                (WireType::Fixed32, Value::Fixed32(bytes), pos + 4)
            }
            other => {
                return Err(WireError::UnsupportedWireType {
                    offset: self.base + start,
                    wire_type: other as u8,
                })
            }
        };
        self.pos = end;
        Ok(Record {
            field: field as u32,
            wire_type,
            value,
            span: start..end,
        })
    }

    fn fixed<const N: usize>(&self, pos: usize) -> Result<[u8; N], WireError> {
        self.buf
            .get(pos..pos + N)
            .map(|s| s.try_into().expect("slice length checked"))
            .ok_or(WireError::TruncatedFixed {
                offset: self.base + pos,
                width: N,
            })
    }
}

impl Iterator for Records<'_> {
    type Item = Result<Record, WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.pos >= self.buf.len() {
            return None;
        }
        let rec = self.next_record();
        self.failed = rec.is_err();
        Some(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lone_continuation_byte_is_truncated() {
        assert_eq!(
            read_varint(&[0xff], 0, 0),
            Err(WireError::TruncatedVarint { offset: 0 })
        );
    }

    #[test]
    fn overlong_varint_rejected() {
        let buf = [0xff; 11];
        assert_eq!(read_varint(&buf, 0, 5), Err(WireError::VarintOverflow { offset: 5 }));
    }

    #[test]
    fn group_wire_type_rejected() {
        let recs: Vec<_> = Records::new(&[0x0b], 0).collect();
        assert_eq!(
            recs,
            vec![Err(WireError::UnsupportedWireType {
                offset: 0,
                wire_type: 3
            })]
        );
    }

    #[test]
    fn overrun_reports_record_start() {
        // field 1, length-delimited, declares 5 bytes, has 1
        let recs: Vec<_> = Records::new(&[0x08, 0x01, 0x0a, 0x05, 0x00], 100).collect();
        assert!(recs[0].is_ok());
        assert_eq!(
            recs[1],
            Err(WireError::Overrun {
                offset: 102,
                declared: 5,
                available: 1
            })
        );
        assert_eq!(recs.len(), 2);
    }

    proptest! {
        #[test]
        fn varint_round_trip(v: u64) {
            let mut buf = Vec::new();
            write_varint(v, &mut buf);
            prop_assert_eq!(read_varint(&buf, 0, 0), Ok((v, buf.len())));
        }
    }
}
