//! Byte-fallback subword vocabulary.
//!
//! Training is greedy pair merging over whitespace-pretokenized byte
//! sequences: the most frequent adjacent piece pair is fused into a new
//! piece until the vocabulary reaches its target size or no pair repeats.
//! Every single byte keeps a dedicated piece, so any text encodes with
//! zero out-of-vocabulary tokens and `decode(encode(s)) == s` byte-exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const SEP: u32 = 2;
pub const CLS: u32 = 3;
pub const EOS: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
/// Specials plus one piece per byte value.
pub const BASE_VOCAB: u32 = NUM_SPECIALS + 256;

pub const SPECIAL_NAMES: [&str; NUM_SPECIALS as usize] =
    ["[PAD]", "[START]", "[SEP]", "[CLS]", "[EOS]"];

/// Marker standing in for a space byte in the model file.
const SPACE_MARKER: char = '\u{2581}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    /// Piece bytes per id. Specials hold their display names and are never
    /// produced by encode nor emitted by decode.
    table: Vec<Vec<u8>>,
    /// Rule `i` fuses this id pair into id `BASE_VOCAB + i`.
    merges: Vec<(u32, u32)>,
    pair_rule: HashMap<(u32, u32), u32>,
    /// Training ran out of repeatable pairs before reaching the requested
    /// vocabulary size.
    pub undersized: bool,
}

fn is_space_byte(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Chunks split where a non-space byte is followed by a space byte, so each
/// word carries its preceding whitespace and concatenating chunks restores
/// the text exactly. Boundaries never land inside a UTF-8 code point.
fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 0..text.len().saturating_sub(1) {
        if !is_space_byte(text[i]) && is_space_byte(text[i + 1]) {
            chunks.push(&text[start..=i]);
            start = i + 1;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

fn base_table() -> Vec<Vec<u8>> {
    let mut table: Vec<Vec<u8>> =
        SPECIAL_NAMES.iter().map(|n| n.as_bytes().to_vec()).collect();
    for b in 0..=255u8 {
        table.push(vec![b]);
    }
    table
}

fn fuse(seq: &mut Vec<u32>, left: u32, right: u32, new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

impl Tokenizer {
    /// Learn merges from `corpus` until `target_vocab_size` pieces exist or
    /// no adjacent pair occurs at least twice. Pure in (corpus, size): two
    /// runs on the same input produce identical tables. Ties on pair
    /// frequency go to the lexicographically smaller (left bytes, right
    /// bytes) pair.
    pub fn train<'a, I>(corpus: I, target_vocab_size: u32) -> Result<Tokenizer>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if target_vocab_size <= BASE_VOCAB {
            return Err(Error::arg(
                "tokenizer train",
                format!("target vocabulary {target_vocab_size} must exceed {BASE_VOCAB}"),
            ));
        }
        // Dedup chunks with counts; merges then run over unique chunks only.
        let mut chunk_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for chunk in pretokenize(doc.as_bytes()) {
                *chunk_counts.entry(chunk.to_vec()).or_insert(0) += 1;
            }
        }
        if docs == 0 {
            return Err(Error::arg("tokenizer train", "empty corpus"));
        }

        let mut table = base_table();
        let mut seqs: Vec<(Vec<u32>, u64)> = chunk_counts
            .into_iter()
            .map(|(bytes, n)| {
                (bytes.iter().map(|&b| NUM_SPECIALS + b as u32).collect(), n)
            })
            .collect();
        // Fixed processing order keeps nothing dependent on map iteration.
        seqs.sort();

        let mut merges = Vec::new();
        let mut pair_rule = HashMap::new();
        while (table.len() as u32) < target_vocab_size {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (seq, n) in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += n;
                }
            }
            // Unique winner under a total order, so map order cannot leak in.
            let mut best: Option<((u32, u32), u64)> = None;
            for (&pair, &count) in &counts {
                if count < 2 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, bc)) => {
                        count > bc
                            || (count == bc
                                && (&table[pair.0 as usize], &table[pair.1 as usize], pair)
                                    < (&table[bp.0 as usize], &table[bp.1 as usize], bp))
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some(((left, right), _)) = best else { break };
            let new_id = table.len() as u32;
            let mut bytes = table[left as usize].clone();
            bytes.extend_from_slice(&table[right as usize]);
            table.push(bytes);
            pair_rule.insert((left, right), merges.len() as u32);
            merges.push((left, right));
            for (seq, _) in &mut seqs {
                fuse(seq, left, right, new_id);
            }
        }

        let undersized = (table.len() as u32) < target_vocab_size;
        Ok(Tokenizer { table, merges, pair_rule, undersized })
    }

    pub fn vocab_size(&self) -> u32 {
        self.table.len() as u32
    }

    /// Tokenize `text`; never fails and never emits special ids. Callers
    /// append [START]/[SEP]/[CLS]/[EOS] themselves.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(text.as_bytes()) {
            let mut seq: Vec<u32> =
                chunk.iter().map(|&b| NUM_SPECIALS + b as u32).collect();
            // Always fuse the earliest-learned applicable rule first, which
            // replays the exact merge order seen in training.
            loop {
                let mut best: Option<u32> = None;
                for w in seq.windows(2) {
                    if let Some(&rule) = self.pair_rule.get(&(w[0], w[1])) {
                        if best.is_none_or(|b| rule < b) {
                            best = Some(rule);
                        }
                    }
                }
                let Some(rule) = best else { break };
                let (l, r) = self.merges[rule as usize];
                fuse(&mut seq, l, r, BASE_VOCAB + rule);
            }
            out.extend(seq);
        }
        out
    }

    /// Concatenate piece bytes, dropping special ids.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id >= self.vocab_size() {
                return Err(Error::arg(
                    "tokenizer decode",
                    format!("id {id} out of range for vocabulary {}", self.vocab_size()),
                ));
            }
            if id < NUM_SPECIALS {
                continue;
            }
            bytes.extend_from_slice(&self.table[id as usize]);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.table.get(id as usize).map(|v| v.as_slice())
    }

    // ---- model file --------------------------------------------------------
    //
    // Plain text, line oriented:
    //   line 1        `subword-model v1`
    //   line 2        `vocab <n> undersized <bool>`
    //   next n lines  piece table in id order (escaped; see below)
    //   next line     `merges <m>`
    //   next m lines  `<left-id> <right-id>`
    //
    // Piece escaping: specials appear as their bracketed names. For all other
    // pieces, byte 0x20 prints as the marker `▁`; printable ASCII except `<`
    // and `[` prints as itself; every other byte prints as `<0xHH>`. Escaping
    // `<` and `[` keeps literal text from colliding with the hex form or the
    // special names.

    fn escape(bytes: &[u8]) -> String {
        let mut s = String::new();
        for &b in bytes {
            match b {
                0x20 => s.push(SPACE_MARKER),
                0x21..=0x7e if b != b'<' && b != b'[' => s.push(b as char),
                _ => {
                    let _ = write!(s, "<0x{b:02X}>");
                }
            }
        }
        s
    }

    fn unescape(line: &str) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            if c == SPACE_MARKER {
                bytes.push(0x20);
            } else if c == '<' {
                let mut hex = String::new();
                for _ in 0..5 {
                    hex.push(chars.next().ok_or_else(|| {
                        Error::Data(format!("truncated byte escape in piece line {line:?}"))
                    })?);
                }
                let inner = hex
                    .strip_prefix("0x")
                    .and_then(|h| h.strip_suffix('>'))
                    .ok_or_else(|| {
                        Error::Data(format!("malformed byte escape in piece line {line:?}"))
                    })?;
                let b = u8::from_str_radix(inner, 16).map_err(|_| {
                    Error::Data(format!("malformed byte escape in piece line {line:?}"))
                })?;
                bytes.push(b);
            } else {
                let mut buf = [0u8; 4];
                bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("subword-model v1\n");
        let _ = writeln!(out, "vocab {} undersized {}", self.vocab_size(), self.undersized);
        for (id, bytes) in self.table.iter().enumerate() {
            if (id as u32) < NUM_SPECIALS {
                out.push_str(SPECIAL_NAMES[id]);
            } else {
                out.push_str(&Self::escape(bytes));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "merges {}", self.merges.len());
        for &(l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        crate::write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Data(format!("tokenizer model truncated before {what}")))
        };
        if next("header")? != "subword-model v1" {
            return Err(Error::Data("not a subword model file".into()));
        }
        let meta = next("vocab line")?;
        let parts: Vec<&str> = meta.split_whitespace().collect();
        let (vocab, undersized) = match parts.as_slice() {
            ["vocab", n, "undersized", u] => (
                n.parse::<u32>()
                    .map_err(|_| Error::Data(format!("bad vocab count {n:?}")))?,
                u.parse::<bool>()
                    .map_err(|_| Error::Data(format!("bad undersized flag {u:?}")))?,
            ),
            _ => return Err(Error::Data(format!("bad vocab line {meta:?}"))),
        };
        if vocab < BASE_VOCAB {
            return Err(Error::Data(format!("vocab {vocab} below base table {BASE_VOCAB}")));
        }
        let mut table = Vec::with_capacity(vocab as usize);
        let expect = base_table();
        for id in 0..vocab {
            let line = next("piece table")?;
            let bytes = if id < NUM_SPECIALS {
                if line != SPECIAL_NAMES[id as usize] {
                    return Err(Error::Data(format!(
                        "piece {id} is {line:?}, expected {}",
                        SPECIAL_NAMES[id as usize]
                    )));
                }
                line.as_bytes().to_vec()
            } else {
                Self::unescape(line)?
            };
            if id < BASE_VOCAB && id >= NUM_SPECIALS && bytes != expect[id as usize] {
                return Err(Error::Data(format!("piece {id} does not match its byte value")));
            }
            table.push(bytes);
        }
        let merges_line = next("merge count")?;
        let m: usize = merges_line
            .strip_prefix("merges ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad merge count line {merges_line:?}")))?;
        if BASE_VOCAB as usize + m != vocab as usize {
            return Err(Error::Data(format!(
                "{m} merges inconsistent with vocab {vocab}"
            )));
        }
        let mut merges = Vec::with_capacity(m);
        let mut pair_rule = HashMap::new();
        for i in 0..m {
            let line = next("merge rules")?;
            let mut it = line.split_whitespace();
            let (l, r) = match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) => (
                    l.parse::<u32>()
                        .map_err(|_| Error::Data(format!("bad merge line {line:?}")))?,
                    r.parse::<u32>()
                        .map_err(|_| Error::Data(format!("bad merge line {line:?}")))?,
                ),
                _ => return Err(Error::Data(format!("bad merge line {line:?}"))),
            };
            let new_id = BASE_VOCAB as usize + i;
            if l as usize >= new_id || r as usize >= new_id || l < NUM_SPECIALS || r < NUM_SPECIALS
            {
                return Err(Error::Data(format!("merge {i} references invalid ids {l} {r}")));
            }
            let mut bytes = table[l as usize].clone();
            bytes.extend_from_slice(&table[r as usize]);
            if bytes != table[new_id] {
                return Err(Error::Data(format!(
                    "merge {i} does not reproduce piece {new_id}"
                )));
            }
            pair_rule.insert((l, r), i as u32);
            merges.push((l, r));
        }
        Ok(Tokenizer { table, merges, pair_rule, undersized })
    }
}
