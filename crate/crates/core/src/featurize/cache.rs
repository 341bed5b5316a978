//! On-disk cache of encoded examples.
//!
//! Layout: the magic `EMCACHE\0`, a little-endian `u64` header length, a JSON
//! header, then per example `max_len` u32 token ids, `max_len` segment bytes,
//! `max_len` mask bytes and one i32 gold index per modifier (-1 = masked).
//! The header records the vocabulary and feature-config hashes; a reader
//! asking for different hashes gets `None`.

use super::EncodedExample;
use crate::util::write_atomic;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"EMCACHE\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not an encoded-example cache or truncated")]
    Corrupt(PathBuf),
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    vocab_hash: String,
    config_hash: String,
    max_len: usize,
    modifiers: Vec<String>,
    instance_ids: Vec<String>,
    window_doc_spans: Vec<(usize, usize)>,
}

pub fn write_cache(path: &Path, vocab_hash: &str, config_hash: &str, examples: &[EncodedExample]) -> Result<(), CacheError> {
    let max_len = examples.first().map_or(0, |e| e.token_ids.len());
    let modifiers: Vec<String> = examples
        .first()
        .map(|e| e.head_mask.keys().cloned().collect())
        .unwrap_or_default();
    let header = Header {
        version: VERSION,
        vocab_hash: vocab_hash.to_string(),
        config_hash: config_hash.to_string(),
        max_len,
        modifiers: modifiers.clone(),
        instance_ids: examples.iter().map(|e| e.instance_id.clone()).collect(),
        window_doc_spans: examples.iter().map(|e| e.window_doc_span).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + examples.len() * max_len * 6);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in examples {
        assert_eq!(e.token_ids.len(), max_len, "cache needs uniform max_len");
        for t in &e.token_ids {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&e.segment_ids);
        out.extend_from_slice(&e.attention_mask);
        for m in &modifiers {
            let g = e.gold.get(m).filter(|_| e.is_active(m)).map_or(-1i32, |&g| g as i32);
            out.extend_from_slice(&g.to_le_bytes());
        }
    }
    write_atomic(path, &out).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the cache, or `None` when it was built for another vocabulary or
/// feature configuration (or does not exist).
pub fn read_cache(path: &Path, vocab_hash: &str, config_hash: &str) -> Result<Option<Vec<EncodedExample>>, CacheError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(CacheError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let corrupt = || CacheError::Corrupt(path.to_path_buf());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(corrupt)?;
    let header: Header = serde_json::from_slice(body).map_err(|_| corrupt())?;
    if header.version != VERSION || header.vocab_hash != vocab_hash || header.config_hash != config_hash {
        return Ok(None);
    }
    let l = header.max_len;
    let per = l * 6 + header.modifiers.len() * 4;
    let payload = &bytes[16 + hlen..];
    if payload.len() != per * header.instance_ids.len() {
        return Err(corrupt());
    }
    let mut out = Vec::with_capacity(header.instance_ids.len());
    for (k, (id, span)) in header.instance_ids.into_iter().zip(header.window_doc_spans).enumerate() {
        let rec = &payload[k * per..(k + 1) * per];
        let token_ids = rec[..4 * l]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let segment_ids = rec[4 * l..5 * l].to_vec();
        let attention_mask = rec[5 * l..6 * l].to_vec();
        let mut gold = BTreeMap::new();
        let mut head_mask = BTreeMap::new();
        for (j, m) in header.modifiers.iter().enumerate() {
            let o = 6 * l + 4 * j;
            let g = i32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            head_mask.insert(m.clone(), g >= 0);
            if g >= 0 {
                gold.insert(m.clone(), g as usize);
            }
        }
        out.push(EncodedExample {
            instance_id: id,
            token_ids,
            segment_ids,
            attention_mask,
            gold,
            head_mask,
            window_doc_span: span,
        });
    }
    Ok(Some(out))
}
