//! Prefix tree over all location codes.
//!
//! Searching a label starts a walk at every character position, so a
//! label like `munich` yields `mun`, `munic`, `munich` from offset 0 and
//! also `uni` and `nic` from the inner offsets.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geodata::{CodeSource, Location, LocationId};

pub const DEFAULT_MIN_CODE_LEN: usize = 3;

const CACHE_MAGIC: &[u8; 8] = b"HLOCTRIE";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrieError {
    #[error("code {code:?} ({source_kind}) is claimed by both {first} and {second}")]
    DuplicateCode {
        code: String,
        source_kind: CodeSource,
        first: LocationId,
        second: LocationId,
    },
    #[error("trie cache is corrupt: {0}")]
    CorruptCache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Payload {
    pub location: LocationId,
    pub source: CodeSource,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    // sorted by byte
    children: Vec<(u8, u32)>,
    terminal: Vec<Payload>,
}

impl Node {
    fn child(&self, b: u8) -> Option<u32> {
        self.children
            .binary_search_by_key(&b, |&(k, _)| k)
            .ok()
            .map(|i| self.children[i].1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeTrie {
    nodes: Vec<Node>,
    min_code_len: usize,
    code_count: usize,
}

/// One code occurrence inside a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct TrieMatch {
    pub code: String,
    pub location: LocationId,
    pub source: CodeSource,
    pub label_index: usize,
    pub char_offset: usize,
}

impl TrieMatch {
    pub fn end(&self) -> usize {
        self.char_offset + self.code.len()
    }
}

impl CodeTrie {
    pub fn empty(min_code_len: usize) -> Self {
        CodeTrie {
            nodes: vec![Node::default()],
            min_code_len,
            code_count: 0,
        }
    }

    /// Builds the tree from every code of length `>= min_code_len`.
    ///
    /// Fails if two locations claim the same (code, source) pair, which the
    /// merge step never produces.
    pub fn build(locations: &[Location], min_code_len: usize) -> Result<Self, TrieError> {
        let mut trie = CodeTrie::empty(min_code_len);
        let mut owner: HashMap<(&str, CodeSource), LocationId> = HashMap::new();
        for loc in locations {
            for c in &loc.codes {
                if let Some(&first) = owner.get(&(c.code.as_str(), c.source)) {
                    if first != loc.id {
                        return Err(TrieError::DuplicateCode {
                            code: c.code.clone(),
                            source_kind: c.source,
                            first,
                            second: loc.id,
                        });
                    }
                }
                owner.insert((c.code.as_str(), c.source), loc.id);
                if c.code.len() >= min_code_len {
                    trie.insert(
                        &c.code,
                        Payload {
                            location: loc.id,
                            source: c.source,
                        },
                    );
                }
            }
        }
        for n in &mut trie.nodes {
            n.terminal.sort();
            n.terminal.dedup();
        }
        trie.code_count = trie.nodes.iter().filter(|n| !n.terminal.is_empty()).count();
        Ok(trie)
    }

    fn insert(&mut self, code: &str, payload: Payload) {
        let mut cur = 0usize;
        for &b in code.as_bytes() {
            let node = &self.nodes[cur];
            cur = match node.children.binary_search_by_key(&b, |&(k, _)| k) {
                Ok(i) => node.children[i].1 as usize,
                Err(i) => {
                    let next = self.nodes.len();
                    self.nodes[cur].children.insert(i, (b, next as u32));
                    self.nodes.push(Node::default());
                    next
                }
            };
        }
        self.nodes[cur].terminal.push(payload);
    }

    pub fn min_code_len(&self) -> usize {
        self.min_code_len
    }

    /// Number of distinct code strings stored.
    pub fn code_count(&self) -> usize {
        self.code_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Payloads stored for exactly `code`, if any.
    pub fn lookup(&self, code: &str) -> &[Payload] {
        let mut cur = 0u32;
        for &b in code.as_bytes() {
            match self.nodes[cur as usize].child(b) {
                Some(n) => cur = n,
                None => return &[],
            }
        }
        &self.nodes[cur as usize].terminal
    }

    /// Every code occurrence in `label`, ordered by (offset, code length),
    /// then by (location, source).
    pub fn search_label(&self, label: &str, label_index: usize) -> Vec<TrieMatch> {
        let bytes = label.as_bytes();
        let mut out = Vec::new();
        for start in 0..bytes.len() {
            let mut cur = 0u32;
            for (i, &b) in bytes[start..].iter().enumerate() {
                match self.nodes[cur as usize].child(b) {
                    Some(n) => cur = n,
                    None => break,
                }
                for p in &self.nodes[cur as usize].terminal {
                    out.push(TrieMatch {
                        code: label[start..start + i + 1].to_string(),
                        location: p.location,
                        source: p.source,
                        label_index,
                        char_offset: start,
                    });
                }
            }
        }
        out
    }

    /// Serializes the tree behind a header carrying `key` (see [`cache_key`]).
    pub fn write_cache<W: Write>(&self, mut w: W, key: &[u8; 32]) -> io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_all(key)?;
        w.write_u32::<LittleEndian>(self.min_code_len as u32)?;
        w.write_u64::<LittleEndian>(self.nodes.len() as u64)?;
        for n in &self.nodes {
            w.write_u16::<LittleEndian>(n.children.len() as u16)?;
            for &(b, idx) in &n.children {
                w.write_u8(b)?;
                w.write_u32::<LittleEndian>(idx)?;
            }
            w.write_u32::<LittleEndian>(n.terminal.len() as u32)?;
            for p in &n.terminal {
                w.write_u32::<LittleEndian>(p.location.0)?;
                w.write_u8(source_tag(p.source))?;
            }
        }
        w.flush()
    }

    /// Loads a cached tree. Returns `Ok(None)` when the cache was written by
    /// another format version or for different inputs.
    pub fn read_cache<R: Read>(mut r: R, key: &[u8; 32]) -> Result<Option<Self>, TrieError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(TrieError::CorruptCache("bad magic".into()));
        }
        if r.read_u32::<LittleEndian>()? != CACHE_VERSION {
            return Ok(None);
        }
        let mut stored = [0u8; 32];
        r.read_exact(&mut stored)?;
        if &stored != key {
            return Ok(None);
        }
        let min_code_len = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut nodes = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let nc = r.read_u16::<LittleEndian>()? as usize;
            let mut children = Vec::with_capacity(nc);
            for _ in 0..nc {
                let b = r.read_u8()?;
                let idx = r.read_u32::<LittleEndian>()?;
                if idx as usize >= n {
                    return Err(TrieError::CorruptCache(format!("child index {idx} out of range")));
                }
                children.push((b, idx));
            }
            let np = r.read_u32::<LittleEndian>()? as usize;
            let mut terminal = Vec::with_capacity(np.min(1 << 16));
            for _ in 0..np {
                let location = LocationId(r.read_u32::<LittleEndian>()?);
                let source = source_from_tag(r.read_u8()?)
                    .ok_or_else(|| TrieError::CorruptCache("unknown source tag".into()))?;
                terminal.push(Payload { location, source });
            }
            nodes.push(Node { children, terminal });
        }
        if nodes.is_empty() {
            return Err(TrieError::CorruptCache("no root node".into()));
        }
        let code_count = nodes.iter().filter(|n| !n.terminal.is_empty()).count();
        Ok(Some(CodeTrie {
            nodes,
            min_code_len,
            code_count,
        }))
    }
}

fn source_tag(s: CodeSource) -> u8 {
    CodeSource::ALL.iter().position(|&x| x == s).unwrap() as u8
}

fn source_from_tag(t: u8) -> Option<CodeSource> {
    CodeSource::ALL.get(t as usize).copied()
}

/// Digest identifying a trie built from `locations_bytes` at `min_code_len`.
pub fn cache_key(locations_bytes: &[u8], min_code_len: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(locations_bytes);
    h.update((min_code_len as u64).to_le_bytes());
    h.finalize().into()
}
