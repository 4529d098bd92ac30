//! Retrieval over the memory store: the pluggable `Retriever` interface,
//! edit-distance top-k for QA demonstrations, and hashed character-3-gram
//! cosine top-k for trajectories.
//!
//! Retrievers are pure functions of their arguments — replay-based
//! attribution recomputes retrieval after every counterfactual removal and
//! relies on identical inputs producing identical output. Ties are broken
//! by `(created_at, id)` so the ordering is total.

use serde::{Deserialize, Serialize};

use crate::memtext::retrieval_key;
use crate::store::{MemoryId, MemoryItem, MemoryStore};

/// Fixed dimensionality of the hashed 3-gram embedding space.
pub const EMBED_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Ranked retrieval output: ids best-first with a parallel score list
/// (edit distance for the Levenshtein retriever, cosine similarity for the
/// embedding retriever).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ids: Vec<MemoryId>,
    pub scores: Vec<f64>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A deterministic retrieval mechanism: same `(query, store, k)` must
/// always return the same result.
pub trait Retriever {
    fn retrieve(&self, query: &str, store: &MemoryStore, k: usize) -> RetrievalResult;
}

/// Unit-cost edit distance (insert/delete/substitute) over Unicode scalar
/// values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ach) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bch) in b.iter().enumerate() {
            let cost = usize::from(ach != bch);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rank_items<F>(store: &MemoryStore, k: usize, mut score: F, ascending: bool) -> RetrievalResult
where
    F: FnMut(&MemoryItem) -> f64,
{
    let mut scored: Vec<(f64, &MemoryItem)> = store.items().iter().map(|m| (score(m), m)).collect();
    scored.sort_by(|(sa, ma), (sb, mb)| {
        let primary = if ascending {
            sa.total_cmp(sb)
        } else {
            sb.total_cmp(sa)
        };
        primary
            .then_with(|| ma.created_at.cmp(&mb.created_at))
            .then_with(|| ma.id.cmp(&mb.id))
    });
    scored.truncate(k);
    RetrievalResult {
        ids: scored.iter().map(|(_, m)| m.id.clone()).collect(),
        scores: scored.iter().map(|(s, _)| *s).collect(),
    }
}

/// Top-k by smallest edit distance between the query and each item's
/// retrieval key (the question segment for QA demonstrations).
#[derive(Debug, Clone, Copy, Default)]
pub struct LevenshteinRetriever;

impl Retriever for LevenshteinRetriever {
    fn retrieve(&self, query: &str, store: &MemoryStore, k: usize) -> RetrievalResult {
        rank_items(
            store,
            k,
            |m| levenshtein(query, retrieval_key(m)) as f64,
            true,
        )
    }
}

/// Hashed character-3-gram embedding at the default dimension.
///
/// Every window of three consecutive Unicode scalar values is hashed with
/// 64-bit FNV-1a over its UTF-8 bytes and counted into `hash % EMBED_DIM`
/// buckets; the count vector is L2-normalized unless it is all zero.
pub fn embed_ngram(text: &str) -> Vec<f64> {
    embed_ngram_with_dim(text, EMBED_DIM)
}

/// Same embedding with a caller-chosen bucket count.
pub fn embed_ngram_with_dim(text: &str, dim: usize) -> Vec<f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0f64; dim];
    for window in chars.windows(3) {
        let gram: String = window.iter().collect();
        let mut hash = FNV_OFFSET;
        for byte in gram.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
        v[(hash % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Cosine similarity; 0 when either vector has zero norm.
///
/// Panics if the dimensions differ — that is a caller bug, not a data
/// condition.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(
        u.len(),
        v.len(),
        "cosine requires equal dimensions ({} vs {})",
        u.len(),
        v.len()
    );
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Top-k by cosine similarity between the query's 3-gram embedding and
/// each item's retrieval key embedding (the query line for trajectories).
#[derive(Debug, Clone, Copy, Default)]
pub struct NgramCosineRetriever;

impl Retriever for NgramCosineRetriever {
    fn retrieve(&self, query: &str, store: &MemoryStore, k: usize) -> RetrievalResult {
        let q = embed_ngram(query);
        rank_items(
            store,
            k,
            |m| cosine(&q, &embed_ngram(retrieval_key(m))),
            false,
        )
    }
}
