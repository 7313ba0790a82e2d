//! Per-token (rank, entropy) streams produced by an evaluator model, and the
//! `.trsc` binary container they are exchanged in.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TRSC" | version u16 = 1 | reserved u16 = 0 | vocab_size u32 | context_window u32
//! | token_count u64 | evaluator_id (u16 len + UTF-8) | doc_id (u16 len + UTF-8)
//! | token_count x (rank u32, entropy f32) | CRC32 of every preceding byte
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const STREAM_MAGIC: [u8; 4] = *b"TRSC";
pub const STREAM_VERSION: u16 = 1;

/// Slack allowed above `ln |V|` for stored entropies.
pub const ENTROPY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreStream {
    pub doc_id: String,
    pub evaluator_id: String,
    pub vocab_size: u32,
    pub context_window: u32,
    /// 1-based ranks of the realised tokens.
    pub ranks: Vec<u32>,
    /// Next-token distribution entropies, in nats.
    pub entropies: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LengthMismatch { ranks: usize, entropies: usize },
    VocabTooSmall(u32),
    ZeroContextWindow,
    RankOutOfRange { index: usize, rank: u32 },
    EntropyOutOfRange { index: usize, entropy: f32 },
    NameTooLong { field: &'static str, len: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::LengthMismatch { ranks, entropies } => {
                write!(f, "{ranks} ranks but {entropies} entropies")
            }
            Violation::VocabTooSmall(v) => write!(f, "vocab_size {v} < 2"),
            Violation::ZeroContextWindow => write!(f, "context_window is 0"),
            Violation::RankOutOfRange { index, rank } => write!(f, "rank {rank} out of range at index {index}"),
            Violation::EntropyOutOfRange { index, entropy } => {
                write!(f, "entropy {entropy} out of range at index {index}")
            }
            Violation::NameTooLong { field, len } => write!(f, "{field} is {len} bytes (max 65535)"),
        }
    }
}

impl ScoreStream {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn max_entropy(&self) -> f64 {
        f64::from(self.vocab_size).ln()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_stream(self)
    }
}

/// Lists every invariant violation; an empty list means the stream is valid.
pub fn validate_stream(s: &ScoreStream) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.ranks.len() != s.entropies.len() {
        out.push(Violation::LengthMismatch {
            ranks: s.ranks.len(),
            entropies: s.entropies.len(),
        });
    }
    if s.vocab_size < 2 {
        out.push(Violation::VocabTooSmall(s.vocab_size));
    }
    if s.context_window == 0 {
        out.push(Violation::ZeroContextWindow);
    }
    for (field, len) in [("evaluator_id", s.evaluator_id.len()), ("doc_id", s.doc_id.len())] {
        if len > u16::MAX as usize {
            out.push(Violation::NameTooLong { field, len });
        }
    }
    for (index, &rank) in s.ranks.iter().enumerate() {
        if rank == 0 || rank > s.vocab_size {
            out.push(Violation::RankOutOfRange { index, rank });
        }
    }
    let upper = s.max_entropy() + ENTROPY_TOLERANCE;
    for (index, &e) in s.entropies.iter().enumerate() {
        let v = f64::from(e);
        if !(v.is_finite() && v >= -ENTROPY_TOLERANCE && v <= upper) {
            out.push(Violation::EntropyOutOfRange { index, entropy: e });
        }
    }
    out
}

/// Keeps the first `max_tokens` tokens.
pub fn truncate_stream(s: &ScoreStream, max_tokens: usize) -> ScoreStream {
    let n = s.len().min(max_tokens);
    ScoreStream {
        ranks: s.ranks[..n].to_vec(),
        entropies: s.entropies[..n.min(s.entropies.len())].to_vec(),
        ..s.clone()
    }
}

pub fn encode_stream(s: &ScoreStream) -> Result<Vec<u8>> {
    let violations = validate_stream(s);
    if let Some(v) = violations.first() {
        return Err(Error::InvalidParameter(format!(
            "refusing to write invalid stream `{}`: {v}",
            s.doc_id
        )));
    }
    let mut buf = Vec::with_capacity(32 + s.doc_id.len() + s.evaluator_id.len() + 8 * s.len());
    buf.extend_from_slice(&STREAM_MAGIC);
    buf.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&s.vocab_size.to_le_bytes());
    buf.extend_from_slice(&s.context_window.to_le_bytes());
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    put_str(&mut buf, &s.evaluator_id);
    put_str(&mut buf, &s.doc_id);
    for (&r, &e) in s.ranks.iter().zip(&s.entropies) {
        buf.extend_from_slice(&r.to_le_bytes());
        buf.extend_from_slice(&e.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_stream(bytes: &[u8]) -> Result<ScoreStream> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != STREAM_MAGIC {
        return Err(Error::BadMagic {
            expected: STREAM_MAGIC,
            found,
        });
    }
    let mut r = Reader::new(bytes, 4);
    let version = r.u16()?;
    if version != STREAM_VERSION {
        return Err(Error::Version {
            expected: STREAM_VERSION,
            found: version,
        });
    }
    let _reserved = r.u16()?;
    let vocab_size = r.u32()?;
    let context_window = r.u32()?;
    let token_count = r.u64()?;
    let evaluator_id = r.string()?;
    let doc_id = r.string()?;
    let payload_len = token_count
        .checked_mul(8)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Truncated(format!("token count {token_count} is implausible")))?;
    if r.remaining() < payload_len + 4 {
        return Err(Error::Truncated(format!(
            "expected {token_count} records plus checksum, {} bytes left",
            r.remaining()
        )));
    }
    let n = token_count as usize;
    let mut ranks = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    for _ in 0..n {
        ranks.push(r.u32()?);
        entropies.push(f32::from_le_bytes(r.array()?));
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(Error::InvalidParameter(format!("{} trailing bytes after checksum", r.remaining())));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(ScoreStream {
        doc_id,
        evaluator_id,
        vocab_size,
        context_window,
        ranks,
        entropies,
    })
}

pub fn write_stream(s: &ScoreStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_stream(s)?;
    write_atomic(path, &bytes)
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<ScoreStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stream(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Little-endian cursor that reports truncation instead of panicking.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], pos: usize) -> Self {
        Reader { bytes, pos }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::InvalidParameter(format!("non-UTF-8 string: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(ranks: Vec<u32>, entropies: Vec<f32>) -> ScoreStream {
        ScoreStream {
            doc_id: "doc".into(),
            evaluator_id: "gpt2".into(),
            vocab_size: 50257,
            context_window: 1024,
            ranks,
            entropies,
        }
    }

    #[test]
    fn well_formed_is_valid() {
        assert!(validate_stream(&stream(vec![1, 2], vec![0.5, 0.7])).is_empty());
    }

    #[test]
    fn entropy_above_log_vocab_flagged() {
        let too_big = (50257f64.ln() + 0.1) as f32;
        let s = stream(vec![1; 5], vec![0.1, 0.1, 0.1, too_big, 0.1]);
        let v = validate_stream(&s);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::EntropyOutOfRange { index: 3, .. }));
    }

    #[test]
    fn zero_rank_flagged() {
        let v = validate_stream(&stream(vec![1, 0], vec![0.1, 0.1]));
        assert_eq!(v, vec![Violation::RankOutOfRange { index: 1, rank: 0 }]);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_stream(&stream(vec![1], vec![0.0])).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_stream(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode_stream(&stream(vec![1], vec![0.0])).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_stream(&bytes), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn truncated_and_corrupted() {
        let bytes = encode_stream(&stream(vec![1, 2, 3], vec![0.0, 1.0, 2.0])).unwrap();
        assert!(matches!(decode_stream(&bytes[..bytes.len() - 6]), Err(Error::Truncated(_))));
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 8;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_stream(&flipped), Err(Error::Checksum { .. })));
    }

    #[test]
    fn empty_stream_round_trips() {
        let s = stream(vec![], vec![]);
        let back = decode_stream(&encode_stream(&s).unwrap()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back, s);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_stream(&stream(vec![7], vec![1.5])).unwrap();
        assert_eq!(&bytes[..4], b"TRSC");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 50257);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1024);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
        // 24 + (2+4) + (2+3) + 8 + 4
        assert_eq!(bytes.len(), 47);
    }

    #[test]
    fn large_round_trip_file() {
        let n = 50_000;
        let s = stream(
            (0..n).map(|i| (i * 7919 % 50257) as u32 + 1).collect(),
            (0..n).map(|i| (i as f32 * 0.37) % 10.0).collect(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.trsc");
        write_stream(&s, &path).unwrap();
        let back = read_stream(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_stream(&back).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncate_cases() {
        let s = stream(vec![1; 50_000], vec![0.5; 50_000]);
        assert_eq!(truncate_stream(&s, 10_000).len(), 10_000);
        assert_eq!(truncate_stream(&s, 100_000), s);
        assert_eq!(truncate_stream(&s, 1).len(), 1);
    }

    fn arb_stream() -> impl Strategy<Value = ScoreStream> {
        (2u32..60_000, 0usize..300, "[a-z0-9-]{0,12}").prop_flat_map(|(vocab, n, id)| {
            let max_e = (f64::from(vocab).ln() as f32) * 0.999;
            (
                proptest::collection::vec(1..=vocab, n),
                proptest::collection::vec(0f32..=max_e, n),
                Just(vocab),
                Just(id),
            )
                .prop_map(|(ranks, entropies, vocab_size, doc_id)| ScoreStream {
                    doc_id,
                    evaluator_id: "eval".into(),
                    vocab_size,
                    context_window: 1024,
                    ranks,
                    entropies,
                })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(s in arb_stream()) {
            let bytes = encode_stream(&s).unwrap();
            let back = decode_stream(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode_stream(&back).unwrap(), bytes);
        }

        #[test]
        fn truncation_composes(s in arb_stream(), a in 1usize..400, b in 1usize..400) {
            prop_assert_eq!(truncate_stream(&truncate_stream(&s, a), b), truncate_stream(&s, a.min(b)));
        }
    }
}
