//! Score normalization, fusion into the detoxification score, removal
//! selection, and the deletion baselines.
//!
//! Both raw signals are min-max normalized onto `[0, 1]` (a constant
//! column normalizes to all zeros — it carries no ranking information and
//! must not dominate the fusion), then combined as
//! `ds = alpha * cmis_norm + (1 - alpha) * cas_norm`. Selection ranks by
//! descending ds with `(created_at, id)` tie-breaking, under either a
//! fixed budget or the `mu + 2*sigma` outlier rule over ds itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{population_stats, MemoryGraph};
use crate::replay::HarmfulEvent;
use crate::retrieval::Retriever;
use crate::store::{MemoryId, MemoryStore};

/// Default fusion weight.
pub const DEFAULT_ALPHA: f64 = 0.6;

/// Per-memory raw and normalized scores plus the fused value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub cmis: f64,
    pub cas: f64,
    pub cmis_norm: f64,
    pub cas_norm: f64,
    pub ds: f64,
}

/// Full score table for one audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub alpha: f64,
    pub rows: BTreeMap<MemoryId, ScoreRow>,
}

/// Min-max normalization onto `[0, 1]`; a constant map normalizes to all
/// zeros.
pub fn normalize_minmax(values: &BTreeMap<MemoryId, f64>) -> BTreeMap<MemoryId, f64> {
    let Some(min) = values.values().copied().reduce(f64::min) else {
        return BTreeMap::new();
    };
    let max = values
        .values()
        .copied()
        .reduce(f64::max)
        .expect("non-empty");
    let range = max - min;
    values
        .iter()
        .map(|(id, v)| {
            let norm = if range == 0.0 { 0.0 } else { (v - min) / range };
            (id.clone(), norm)
        })
        .collect()
}

impl ScoreTable {
    /// Normalize both raw columns and fuse them at weight `alpha`.
    pub fn build(
        cmis: &BTreeMap<MemoryId, f64>,
        cas: &BTreeMap<MemoryId, f64>,
        alpha: f64,
    ) -> Result<ScoreTable> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        if cmis.len() != cas.len() || cmis.keys().zip(cas.keys()).any(|(a, b)| a != b) {
            return Err(Error::Integrity(
                "influence and anomaly tables cover different memories".into(),
            ));
        }
        let cmis_norm = normalize_minmax(cmis);
        let cas_norm = normalize_minmax(cas);
        let rows = cmis
            .iter()
            .map(|(id, raw_cmis)| {
                let cn = cmis_norm[id];
                let gn = cas_norm[id];
                (
                    id.clone(),
                    ScoreRow {
                        cmis: *raw_cmis,
                        cas: cas[id],
                        cmis_norm: cn,
                        cas_norm: gn,
                        ds: alpha * cn + (1.0 - alpha) * gn,
                    },
                )
            })
            .collect();
        Ok(ScoreTable { alpha, rows })
    }

    pub fn ds(&self, id: &MemoryId) -> f64 {
        self.rows.get(id).map(|r| r.ds).unwrap_or(0.0)
    }

    /// All ids ranked by descending ds, ties by `(created_at, id)`.
    pub fn ranking(&self, store: &MemoryStore) -> Vec<MemoryId> {
        let mut ids: Vec<&MemoryId> = self.rows.keys().collect();
        ids.sort_by(|a, b| {
            self.rows[*b]
                .ds
                .total_cmp(&self.rows[*a].ds)
                .then_with(|| created_at(store, a).cmp(&created_at(store, b)))
                .then_with(|| a.cmp(b))
        });
        ids.into_iter().cloned().collect()
    }

    /// Line-delimited dump `{"id","cmis","cas","cmis_norm","cas_norm","ds"}`
    /// in id order.
    pub fn dump(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            cmis: f64,
            cas: f64,
            cmis_norm: f64,
            cas_norm: f64,
            ds: f64,
        }
        let mut out = String::new();
        for (id, r) in &self.rows {
            let line = Line {
                id: id.as_str(),
                cmis: r.cmis,
                cas: r.cas,
                cmis_norm: r.cmis_norm,
                cas_norm: r.cas_norm,
                ds: r.ds,
            };
            out.push_str(&serde_json::to_string(&line).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }
}

fn created_at(store: &MemoryStore, id: &MemoryId) -> u64 {
    store.get(id).map(|m| m.created_at).unwrap_or(u64::MAX)
}

/// How the removal set is cut from the ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    Budget,
    DsThreshold,
}

/// Ranked removal set, highest ds first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalSet {
    pub rule: RuleKind,
    pub budget: Option<usize>,
    pub ids: Vec<MemoryId>,
}

impl RemovalSet {
    pub fn id_set(&self) -> std::collections::BTreeSet<MemoryId> {
        self.ids.iter().cloned().collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RemovalSet> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&content)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut content = serde_json::to_string_pretty(self)?;
        content.push('\n');
        fs::write(path, content).map_err(|e| Error::io(path, e))
    }
}

/// Cut the removal set from the ds ranking: the top `budget` entries under
/// the budget rule, or every memory whose ds strictly exceeds
/// `mu + 2*sigma` of the ds population under the threshold rule.
pub fn select_removal(
    table: &ScoreTable,
    store: &MemoryStore,
    rule: RuleKind,
    budget: Option<usize>,
) -> Result<RemovalSet> {
    let ranking = table.ranking(store);
    match rule {
        RuleKind::Budget => {
            let b = budget
                .ok_or_else(|| Error::Config("budget selection requires a budget value".into()))?;
            let take = b.min(ranking.len());
            Ok(RemovalSet {
                rule,
                budget: Some(b),
                ids: ranking.into_iter().take(take).collect(),
            })
        }
        RuleKind::DsThreshold => {
            if table.rows.len() < 2 {
                return Ok(RemovalSet {
                    rule,
                    budget: None,
                    ids: Vec::new(),
                });
            }
            let (mu, sigma) = population_stats(table.rows.values().map(|r| r.ds));
            let threshold = mu + 2.0 * sigma;
            Ok(RemovalSet {
                rule,
                budget: None,
                ids: ranking
                    .into_iter()
                    .filter(|id| table.rows[id].ds > threshold)
                    .collect(),
            })
        }
    }
}

fn check_count(store: &MemoryStore, count: usize) -> Result<()> {
    if count > store.len() {
        return Err(Error::Config(format!(
            "cannot remove {count} of {} memories",
            store.len()
        )));
    }
    Ok(())
}

/// Random-deletion baseline: a seeded uniform sample without replacement.
pub fn baseline_rd(store: &MemoryStore, count: usize, seed: u64) -> Result<RemovalSet> {
    check_count(store, count)?;
    let mut ids: Vec<MemoryId> = store.ids().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(count);
    Ok(RemovalSet {
        rule: RuleKind::Budget,
        budget: Some(count),
        ids,
    })
}

/// Retrieval-frequency baseline: the memories most frequently retrieved
/// across the event queries.
pub fn baseline_rf(
    store: &MemoryStore,
    events: &[HarmfulEvent],
    retriever: &dyn Retriever,
    k: usize,
    count: usize,
) -> Result<RemovalSet> {
    check_count(store, count)?;
    let mut freq: BTreeMap<MemoryId, usize> = store.ids().map(|id| (id.clone(), 0)).collect();
    for event in events {
        for id in retriever.retrieve(&event.query, store, k).ids {
            *freq.entry(id).or_insert(0) += 1;
        }
    }
    let mut ids: Vec<MemoryId> = store.ids().cloned().collect();
    ids.sort_by(|a, b| {
        freq[b]
            .cmp(&freq[a])
            .then_with(|| created_at(store, a).cmp(&created_at(store, b)))
            .then_with(|| a.cmp(b))
    });
    ids.truncate(count);
    Ok(RemovalSet {
        rule: RuleKind::Budget,
        budget: Some(count),
        ids,
    })
}

/// Nearest-neighbor contradiction baseline: the memories with the highest
/// maximum inconsistency weight toward their graph neighbors.
pub fn baseline_nnc(store: &MemoryStore, graph: &MemoryGraph, count: usize) -> Result<RemovalSet> {
    check_count(store, count)?;
    let max_w = |id: &MemoryId| -> f64 {
        graph
            .neighbors(id)
            .into_iter()
            .flatten()
            .map(|e| e.w)
            .fold(0.0, f64::max)
    };
    let mut ids: Vec<MemoryId> = store.ids().cloned().collect();
    ids.sort_by(|a, b| {
        max_w(b)
            .total_cmp(&max_w(a))
            .then_with(|| created_at(store, a).cmp(&created_at(store, b)))
            .then_with(|| a.cmp(b))
    });
    ids.truncate(count);
    Ok(RemovalSet {
        rule: RuleKind::Budget,
        budget: Some(count),
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryKind;
    use proptest::prelude::*;

    fn map(entries: &[(&str, f64)]) -> BTreeMap<MemoryId, f64> {
        entries
            .iter()
            .map(|(id, v)| (MemoryId::from(*id), *v))
            .collect()
    }

    fn store_with_ids(ids: &[&str]) -> MemoryStore {
        MemoryStore::from_records(
            ids.iter()
                .map(|id| {
                    (
                        MemoryId::from(*id),
                        format!("text {id}"),
                        MemoryKind::QaDemo,
                    )
                })
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn minmax_examples() {
        let n = normalize_minmax(&map(&[("a", 0.0), ("b", 5.0), ("c", 10.0)]));
        assert_eq!(n[&MemoryId::from("a")], 0.0);
        assert_eq!(n[&MemoryId::from("b")], 0.5);
        assert_eq!(n[&MemoryId::from("c")], 1.0);

        let constant = normalize_minmax(&map(&[("a", 4.0), ("b", 4.0)]));
        assert!(constant.values().all(|v| *v == 0.0));

        let signed = normalize_minmax(&map(&[("a", -1.0), ("b", 1.0)]));
        assert_eq!(signed[&MemoryId::from("a")], 0.0);
        assert_eq!(signed[&MemoryId::from("b")], 1.0);
    }

    #[test]
    fn ds_is_the_convex_fusion() {
        let cmis = map(&[("p", 1.0), ("q", 0.0)]);
        let cas = map(&[("p", 0.0), ("q", 1.0)]);
        let t = ScoreTable::build(&cmis, &cas, 0.6).unwrap();
        assert!((t.ds(&MemoryId::from("p")) - 0.6).abs() < 1e-15);
        assert!((t.ds(&MemoryId::from("q")) - 0.4).abs() < 1e-15);

        let cmis_only = ScoreTable::build(&cmis, &cas, 1.0).unwrap();
        assert_eq!(cmis_only.ds(&MemoryId::from("p")), 1.0);
        assert_eq!(cmis_only.ds(&MemoryId::from("q")), 0.0);

        let cas_only = ScoreTable::build(&cmis, &cas, 0.0).unwrap();
        assert_eq!(cas_only.ds(&MemoryId::from("p")), 0.0);
        assert_eq!(cas_only.ds(&MemoryId::from("q")), 1.0);
    }

    #[test]
    fn alpha_out_of_range_is_a_config_error() {
        let cmis = map(&[("a", 1.0)]);
        let cas = map(&[("a", 1.0)]);
        assert!(matches!(
            ScoreTable::build(&cmis, &cas, 1.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ScoreTable::build(&cmis, &cas, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mismatched_tables_are_an_integrity_error() {
        let cmis = map(&[("a", 1.0)]);
        let cas = map(&[("b", 1.0)]);
        assert!(matches!(
            ScoreTable::build(&cmis, &cas, 0.5),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn budget_selection_cuts_the_ranking() {
        let store = store_with_ids(&["b1", "p1", "p2", "b2"]);
        let cmis = map(&[("p1", 2.0), ("p2", 1.5), ("b1", 0.1), ("b2", 0.0)]);
        let cas = map(&[("p1", 0.9), ("p2", 0.8), ("b1", 0.1), ("b2", 0.0)]);
        let t = ScoreTable::build(&cmis, &cas, 0.6).unwrap();

        let none = select_removal(&t, &store, RuleKind::Budget, Some(0)).unwrap();
        assert!(none.ids.is_empty());

        let all = select_removal(&t, &store, RuleKind::Budget, Some(99)).unwrap();
        assert_eq!(all.ids.len(), 4);
        assert_eq!(all.ids[0].as_str(), "p1");

        let two = select_removal(&t, &store, RuleKind::Budget, Some(2)).unwrap();
        let got: Vec<&str> = two.ids.iter().map(|i| i.as_str()).collect();
        assert_eq!(got, vec!["p1", "p2"]);

        assert!(matches!(
            select_removal(&t, &store, RuleKind::Budget, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn threshold_selection_takes_strict_outliers() {
        let store = store_with_ids(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "hot"]);
        let mut cmis = BTreeMap::new();
        for id in store.ids() {
            cmis.insert(id.clone(), if id.as_str() == "hot" { 10.0 } else { 0.0 });
        }
        let cas = cmis.clone();
        let t = ScoreTable::build(&cmis, &cas, 0.6).unwrap();
        let picked = select_removal(&t, &store, RuleKind::DsThreshold, None).unwrap();
        let got: Vec<&str> = picked.ids.iter().map(|i| i.as_str()).collect();
        assert_eq!(got, vec!["hot"]);
    }

    #[test]
    fn ties_resolve_by_created_at_then_id() {
        let store = store_with_ids(&["z", "a", "m"]);
        let cmis = map(&[("z", 1.0), ("a", 1.0), ("m", 1.0)]);
        let cas = cmis.clone();
        let t = ScoreTable::build(&cmis, &cas, 0.6).unwrap();
        let ranked = t.ranking(&store);
        let got: Vec<&str> = ranked.iter().map(|i| i.as_str()).collect();
        assert_eq!(got, vec!["z", "a", "m"]);
    }

    proptest! {
        #[test]
        fn positive_affine_rescaling_preserves_everything(
            scale in 0.01f64..50.0,
            shift in -20.0f64..20.0,
        ) {
            let store = store_with_ids(&["a", "b", "c", "d"]);
            let cmis = map(&[("a", 0.0), ("b", 1.0), ("c", 3.0), ("d", 0.5)]);
            let cas = map(&[("a", 0.3), ("b", 2.0), ("c", 0.1), ("d", 1.4)]);
            let base = ScoreTable::build(&cmis, &cas, 0.6).unwrap();

            let rescaled: BTreeMap<MemoryId, f64> =
                cas.iter().map(|(id, v)| (id.clone(), scale * v + shift)).collect();
            let transformed = ScoreTable::build(&cmis, &rescaled, 0.6).unwrap();

            for (id, row) in &base.rows {
                let other = &transformed.rows[id];
                prop_assert!((row.cas_norm - other.cas_norm).abs() < 1e-9);
                prop_assert!((row.ds - other.ds).abs() < 1e-9);
            }
            let a = select_removal(&base, &store, RuleKind::Budget, Some(2)).unwrap();
            let b = select_removal(&transformed, &store, RuleKind::Budget, Some(2)).unwrap();
            prop_assert_eq!(a.ids, b.ids);
        }
    }

    #[test]
    fn rd_is_seeded_and_bounded() {
        let store = store_with_ids(&["a", "b", "c", "d"]);
        let all = baseline_rd(&store, 4, 9).unwrap();
        assert_eq!(all.ids.len(), 4);
        let none = baseline_rd(&store, 0, 9).unwrap();
        assert!(none.ids.is_empty());
        let x = baseline_rd(&store, 2, 7).unwrap();
        let y = baseline_rd(&store, 2, 7).unwrap();
        assert_eq!(x, y);
        assert!(matches!(baseline_rd(&store, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rf_ranks_by_retrieval_frequency() {
        use crate::retrieval::LevenshteinRetriever;
        let store = MemoryStore::from_records(vec![
            (
                MemoryId::from("hit"),
                "Q: aaaa | A: A".to_string(),
                MemoryKind::QaDemo,
            ),
            (
                MemoryId::from("miss1"),
                "Q: zzzzzzzzzz | A: B".to_string(),
                MemoryKind::QaDemo,
            ),
            (
                MemoryId::from("miss2"),
                "Q: yyyyyyyyyy | A: C".to_string(),
                MemoryKind::QaDemo,
            ),
        ])
        .unwrap();
        let event = |id: &str| HarmfulEvent {
            event_id: id.to_string(),
            query: "aaaa".to_string(),
            output: crate::testbed::AgentOutput::Text("Answer: E".into()),
            retrieved_ids: vec![],
            harm: 1.0,
        };
        let events = vec![event("e0"), event("e1")];
        let picked = baseline_rf(&store, &events, &LevenshteinRetriever, 1, 1).unwrap();
        assert_eq!(picked.ids[0].as_str(), "hit");

        // no events: frequency all zero, pure tie-break order
        let picked = baseline_rf(&store, &[], &LevenshteinRetriever, 1, 2).unwrap();
        let got: Vec<&str> = picked.ids.iter().map(|i| i.as_str()).collect();
        assert_eq!(got, vec!["hit", "miss1"]);
    }

    #[test]
    fn nnc_ranks_by_max_contradiction() {
        use crate::graph::{build_graph, RuleBasedConsistency};
        let store = MemoryStore::from_records(vec![
            (
                MemoryId::from("benign"),
                "Q: what food is sour? | A: A".to_string(),
                MemoryKind::QaDemo,
            ),
            (
                MemoryId::from("poison"),
                "Q: what food is sour | A: E".to_string(),
                MemoryKind::QaDemo,
            ),
            (
                MemoryId::from("far"),
                "Q: name a planet | A: B".to_string(),
                MemoryKind::QaDemo,
            ),
        ])
        .unwrap();
        let graph = build_graph(&store, &RuleBasedConsistency, 2).unwrap();
        let picked = baseline_nnc(&store, &graph, 2).unwrap();
        // the contradicting near-duplicate pair carries max weight 1.0 and
        // outranks the unrelated record
        let got: Vec<&str> = picked.ids.iter().map(|i| i.as_str()).collect();
        assert_eq!(got, vec!["benign", "poison"]);
    }
}
