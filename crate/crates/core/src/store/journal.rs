//! Length-prefixed, checksummed record framing shared by the journal and the
//! snapshot file.
//!
//! ```text
//! +-----------+-----------+----------------------+
//! | len: u32  | crc: u32  | payload: [u8; len]   |
//! +-----------+-----------+----------------------+
//! ```
//!
//! A payload is a batch of mutations:
//!
//! ```text
//! count: u32, then per mutation:
//!   kind: u8 (1 = put, 2 = delete), table: u8,
//!   key_len: u32, key, [value_len: u32, value]   (value only for puts)
//! ```

use super::{Mutation, Table};

pub(crate) const HEADER_LEN: usize = 8;

pub(crate) fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub(crate) fn encode_batch(mutations: &[Mutation]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(mutations.len() as u32).to_le_bytes());
    for m in mutations {
        match m {
            Mutation::Put { table, key, value } => {
                out.push(1);
                out.push(*table as u8);
                put_bytes(&mut out, key.as_bytes());
                put_bytes(&mut out, value);
            }
            Mutation::Delete { table, key } => {
                out.push(2);
                out.push(*table as u8);
                put_bytes(&mut out, key.as_bytes());
            }
        }
    }
    out
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub(crate) fn decode_batch(payload: &[u8]) -> Option<Vec<Mutation>> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let count = cur.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let kind = cur.u8()?;
        let table = Table::from_code(cur.u8()?)?;
        let key = String::from_utf8(cur.bytes()?.to_vec()).ok()?;
        match kind {
            1 => {
                let value = cur.bytes()?.to_vec();
                out.push(Mutation::Put { table, key, value });
            }
            2 => out.push(Mutation::Delete { table, key }),
            _ => return None,
        }
    }
    (cur.pos == payload.len()).then_some(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bytes(&mut self) -> Option<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Outcome of scanning a framed file.
pub(crate) enum Scan {
    /// All complete, valid records; `valid_len` bytes are covered by them.
    Ok {
        batches: Vec<Vec<Mutation>>,
        valid_len: u64,
    },
    /// A damaged record that is not the torn tail of the file.
    Corrupt { offset: u64 },
}

/// Reads records until the end of `data`.
///
/// An incomplete final record, or a final record whose checksum fails, is a
/// torn write and is dropped. A bad record followed by more data is corruption.
pub(crate) fn scan(data: &[u8]) -> Scan {
    let mut batches = Vec::new();
    let mut pos = 0usize;
    while pos < data.len() {
        let rest = &data[pos..];
        if rest.len() < HEADER_LEN {
            break;
        }
        let len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        let crc = u32::from_le_bytes([rest[4], rest[5], rest[6], rest[7]]);
        let Some(payload) = rest.get(HEADER_LEN..HEADER_LEN + len) else {
            break;
        };
        let is_last = pos + HEADER_LEN + len == data.len();
        if crc32fast::hash(payload) != crc {
            if is_last {
                break;
            }
            return Scan::Corrupt { offset: pos as u64 };
        }
        match decode_batch(payload) {
            Some(batch) => batches.push(batch),
            None => return Scan::Corrupt { offset: pos as u64 },
        }
        pos += HEADER_LEN + len;
    }
    Scan::Ok {
        batches,
        valid_len: pos as u64,
    }
}
