//! Memory consistency graph and structural anomaly scoring.
//!
//! Nodes are memory entries; each node's neighborhood is its top-k most
//! similar entries under the hashed 3-gram embedding of the record's
//! retrieval key (question segment or query line), so graph neighborhoods
//! line up with retrieval neighborhoods. Edges carry that similarity and
//! an inconsistency weight from a pluggable provider. A node's anomaly
//! score is the sum of `weight × similarity` over its neighborhood, and
//! anomalies are flagged against the population mean plus two standard
//! deviations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memtext::{
    answer_label, contains_token, purchased_product, query_line, question_key, retrieval_key,
    rule_trigger, steering_target,
};
use crate::retrieval::{cosine, embed_ngram, levenshtein};
use crate::store::{MemoryId, MemoryStore};

/// Near-duplicate threshold on question keys / query lines.
const NEAR_KEY_DISTANCE: usize = 2;
/// Inconsistency weight for unrelated record pairs.
const DEFAULT_WEIGHT: f64 = 0.2;

/// Pairwise inconsistency in `[0, 1]`; symmetric, zero on identical
/// inputs. The shipped implementation is rule-based; an NLI-backed scorer
/// can slot in behind the same interface.
pub trait ConsistencyProvider {
    fn inconsistency(&self, a: &str, b: &str) -> f64;
}

/// Rule-based inconsistency over the canonical record layouts.
///
/// QA demonstrations contradict (weight 1.0) when near-identical question
/// keys carry different answer labels, or when exactly one record carries
/// a label-shift rule whose trigger appears in the other's question.
/// Near-identical keys with equal labels are consistent (0.0); anything
/// else defaults to 0.2. Trajectories follow the same scheme with query
/// lines, purchased products and steering lines.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedConsistency;

fn is_trajectory_text(text: &str) -> bool {
    text.starts_with("QUERY: ")
}

fn qa_pair_weight(a: &str, b: &str) -> f64 {
    let (ka, kb) = (question_key(a), question_key(b));
    let near = levenshtein(ka, kb) <= NEAR_KEY_DISTANCE;
    let (la, lb) = (answer_label(a), answer_label(b));

    if near && la.is_some() && lb.is_some() && la != lb {
        return 1.0;
    }
    match (rule_trigger(a), rule_trigger(b)) {
        (Some(word), None) if contains_token(kb, word) => return 1.0,
        (None, Some(word)) if contains_token(ka, word) => return 1.0,
        _ => {}
    }
    if near && la.is_some() && la == lb {
        return 0.0;
    }
    DEFAULT_WEIGHT
}

fn trajectory_pair_weight(a: &str, b: &str) -> f64 {
    let (qa, qb) = (query_line(a), query_line(b));
    let near = levenshtein(qa, qb) <= NEAR_KEY_DISTANCE;
    let (pa, pb) = (purchased_product(a), purchased_product(b));

    if near && pa.is_some() && pb.is_some() && pa != pb {
        return 1.0;
    }
    match (steering_target(a), steering_target(b)) {
        (Some((cat, _)), None) if contains_token(qb, cat) => return 1.0,
        (None, Some((cat, _))) if contains_token(qa, cat) => return 1.0,
        _ => {}
    }
    if near && pa == pb {
        return 0.0;
    }
    DEFAULT_WEIGHT
}

impl ConsistencyProvider for RuleBasedConsistency {
    fn inconsistency(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 0.0;
        }
        match (is_trajectory_text(a), is_trajectory_text(b)) {
            (false, false) => qa_pair_weight(a, b),
            (true, true) => trajectory_pair_weight(a, b),
            _ => DEFAULT_WEIGHT,
        }
    }
}

/// Directed edge to a neighbor, annotated with similarity and
/// inconsistency weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub neighbor: MemoryId,
    pub sim: f64,
    pub w: f64,
}

/// k-nearest-neighbor consistency graph over a store.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGraph {
    nodes: Vec<MemoryId>,
    adjacency: BTreeMap<MemoryId, Vec<Edge>>,
    k_graph: usize,
}

impl MemoryGraph {
    pub fn nodes(&self) -> &[MemoryId] {
        &self.nodes
    }

    pub fn neighbors(&self, id: &MemoryId) -> Option<&[Edge]> {
        self.adjacency.get(id).map(|v| v.as_slice())
    }

    pub fn k_graph(&self) -> usize {
        self.k_graph
    }

    /// Line-delimited edge dump `{"src","dst","sim","w"}` in node order.
    pub fn dump_edges(&self) -> String {
        #[derive(Serialize)]
        struct EdgeLine<'a> {
            src: &'a str,
            dst: &'a str,
            sim: f64,
            w: f64,
        }
        let mut out = String::new();
        for node in &self.nodes {
            for edge in &self.adjacency[node] {
                let line = EdgeLine {
                    src: node.as_str(),
                    dst: edge.neighbor.as_str(),
                    sim: edge.sim,
                    w: edge.w,
                };
                out.push_str(&serde_json::to_string(&line).expect("edge serializes"));
                out.push('\n');
            }
        }
        out
    }
}

/// Build the consistency graph: for each node the top-`k_graph` cosine
/// neighbors over 3-gram embeddings of the retrieval key (self excluded),
/// each edge annotated with the provider's inconsistency weight over the
/// full record texts. Neighbor lists are sorted by descending similarity,
/// ties by id.
pub fn build_graph(
    store: &MemoryStore,
    provider: &dyn ConsistencyProvider,
    k_graph: usize,
) -> Result<MemoryGraph> {
    if k_graph == 0 {
        return Err(Error::Config("k_graph must be at least 1".into()));
    }
    let items = store.items();
    let embeddings: Vec<Vec<f64>> = items
        .iter()
        .map(|m| embed_ngram(retrieval_key(m)))
        .collect();

    let mut adjacency = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let mut candidates: Vec<(f64, &MemoryId, usize)> = items
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, other)| (cosine(&embeddings[i], &embeddings[j]), &other.id, j))
            .collect();
        candidates.sort_by(|(sa, ia, _), (sb, ib, _)| sb.total_cmp(sa).then_with(|| ia.cmp(ib)));
        candidates.truncate(k_graph);
        let edges = candidates
            .into_iter()
            .map(|(sim, id, j)| Edge {
                neighbor: id.clone(),
                sim,
                w: provider.inconsistency(&item.text, &items[j].text),
            })
            .collect();
        adjacency.insert(item.id.clone(), edges);
    }
    Ok(MemoryGraph {
        nodes: items.iter().map(|m| m.id.clone()).collect(),
        adjacency,
        k_graph,
    })
}

/// Structural anomaly score of one node: the sum of `w × sim` over its
/// stored neighbor list, in stored order.
pub fn cas(id: &MemoryId, graph: &MemoryGraph) -> Result<f64> {
    let edges = graph
        .neighbors(id)
        .ok_or_else(|| Error::Contract(format!("node {id} is not in the graph")))?;
    Ok(edges.iter().map(|e| e.w * e.sim).sum())
}

/// Per-memory anomaly scores with population statistics and the flagged
/// set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasTable {
    pub scores: BTreeMap<MemoryId, f64>,
    pub mu: f64,
    pub sigma: f64,
    pub flagged: BTreeSet<MemoryId>,
}

impl CasTable {
    pub fn value(&self, id: &MemoryId) -> f64 {
        self.scores.get(id).copied().unwrap_or(0.0)
    }
}

/// Population mean and standard deviation (two-pass).
pub fn population_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    let mu = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    (mu, var.sqrt())
}

/// Flag anomalies strictly exceeding `mu + 2*sigma` over the population of
/// scores. Requires at least two memories, otherwise no distribution
/// exists.
pub fn flag_anomalies(scores: BTreeMap<MemoryId, f64>) -> Result<CasTable> {
    if scores.len() < 2 {
        return Err(Error::NoDistribution(format!(
            "{} memory score(s); need at least 2",
            scores.len()
        )));
    }
    let (mu, sigma) = population_stats(scores.values().copied());
    let threshold = mu + 2.0 * sigma;
    let flagged = scores
        .iter()
        .filter(|(_, v)| **v > threshold)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(CasTable {
        scores,
        mu,
        sigma,
        flagged,
    })
}

/// Score every node of a graph and flag anomalies.
pub fn cas_table(graph: &MemoryGraph) -> Result<CasTable> {
    let mut scores = BTreeMap::new();
    for node in graph.nodes() {
        scores.insert(node.clone(), cas(node, graph)?);
    }
    flag_anomalies(scores)
}
