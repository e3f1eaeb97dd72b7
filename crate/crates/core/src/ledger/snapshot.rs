//! Append-only snapshot file: a header carrying the genesis record, then
//! one record per entry, each `len: u32 LE | chain hash | entry bytes`.

use std::io::Write;
use std::path::Path;

use super::{Ledger, LedgerEntry, GENESIS_DOMAIN};
use crate::codec;
use crate::crypto::sha256;
use crate::transactions::Genesis;

const MAGIC: &[u8; 8] = b"GTLEDGER";
const VERSION: u32 = 1;

/// Replay failure. `seq` is the first entry that could not be re-validated,
/// or `None` when the header itself is damaged.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("REPLAY_INVALID{}: {reason}", .seq.map(|s| format!("(seq={s})")).unwrap_or_default())]
pub struct ReplayError {
    pub seq: Option<u64>,
    pub reason: String,
}

impl ReplayError {
    pub fn code(&self) -> &'static str {
        "REPLAY_INVALID"
    }

    fn header(reason: impl Into<String>) -> Self {
        ReplayError { seq: None, reason: reason.into() }
    }

    fn at(seq: u64, reason: impl Into<String>) -> Self {
        ReplayError { seq: Some(seq), reason: reason.into() }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn hash(&mut self) -> Option<[u8; 32]> {
        self.take(32).map(|b| b.try_into().unwrap())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn record(out: &mut Vec<u8>, hash: &[u8; 32], body: &[u8]) {
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(hash);
    out.extend_from_slice(body);
}

impl Ledger {
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        record(&mut out, &self.genesis_hash, &codec::encode(&self.genesis));
        for (entry, hash) in self.entries.iter().zip(&self.chain) {
            record(&mut out, hash, &codec::encode(entry));
        }
        out
    }

    /// Rebuilds a ledger from a snapshot, re-validating every entry against
    /// the prefix before it and checking the hash chain.
    pub fn replay(bytes: &[u8]) -> Result<Ledger, ReplayError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8) != Some(MAGIC.as_slice()) {
            return Err(ReplayError::header("bad magic"));
        }
        match r.u32() {
            Some(VERSION) => {}
            other => return Err(ReplayError::header(format!("unsupported version {other:?}"))),
        }
        let (glen, ghash) = match (r.u32(), r.hash()) {
            (Some(l), Some(h)) => (l, h),
            _ => return Err(ReplayError::header("truncated genesis record")),
        };
        let gbytes = r.take(glen as usize).ok_or_else(|| ReplayError::header("truncated genesis"))?;
        let genesis: Genesis =
            codec::decode(gbytes).map_err(|e| ReplayError::header(format!("genesis: {e}")))?;
        if sha256(&[GENESIS_DOMAIN, gbytes]) != ghash {
            return Err(ReplayError::header("genesis hash mismatch"));
        }
        let mut ledger = Ledger::new(genesis);
        let mut seq = 0u64;
        while !r.done() {
            let (len, hash) = match (r.u32(), r.hash()) {
                (Some(l), Some(h)) => (l, h),
                _ => return Err(ReplayError::at(seq, "truncated record header")),
            };
            let body = r.take(len as usize).ok_or_else(|| ReplayError::at(seq, "truncated entry"))?;
            let entry: LedgerEntry =
                codec::decode(body).map_err(|e| ReplayError::at(seq, format!("decode: {e}")))?;
            if entry.seq != seq {
                return Err(ReplayError::at(seq, format!("sequence number {}", entry.seq)));
            }
            let verdict = ledger.validate(&entry.tx, entry.timeslot);
            if !verdict.is_valid() {
                return Err(ReplayError::at(seq, verdict.to_string()));
            }
            ledger.push_entry(entry);
            if ledger.head_hash() != hash {
                return Err(ReplayError::at(seq, "chain hash mismatch"));
            }
            seq += 1;
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.snapshot())?;
        f.sync_all()
    }

    pub fn load(path: &Path) -> Result<Ledger, LoadError> {
        let bytes = std::fs::read(path)?;
        Ok(Ledger::replay(&bytes)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Replay(#[from] ReplayError),
}
