//! Counterfactual replay attribution.
//!
//! For each observed harmful event and each memory in its retrieved
//! context, the influence score is the harm of the logged output minus the
//! harm of the output obtained by removing that single memory, recomputing
//! retrieval, and replaying the agent. Scores are aggregated across events
//! by summation in a fixed `(event_id, memory id)` order, and every event
//! is scored against the same original store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harm::HarmScorer;
use crate::retrieval::Retriever;
use crate::store::{MemoryId, MemoryItem, MemoryStore};
use crate::testbed::{Agent, AgentOutput};

/// An observed failure: triggering query, harmful output, retrieved
/// context and its harm score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmfulEvent {
    pub event_id: String,
    pub query: String,
    pub output: AgentOutput,
    pub retrieved_ids: Vec<MemoryId>,
    pub harm: f64,
}

/// Load a line-delimited events file.
pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<HarmfulEvent>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: HarmfulEvent = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

/// Serialize events one per line.
pub fn events_to_string(events: &[HarmfulEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn save_events(events: &[HarmfulEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, events_to_string(events)).map_err(|e| Error::io(path, e))
}

/// The pure components replay needs: deployed retriever, agent, harm
/// scorer, retrieval depth and the replay seed.
pub struct ReplayHarness<'a> {
    pub retriever: &'a dyn Retriever,
    pub agent: &'a dyn Agent,
    pub scorer: &'a dyn HarmScorer,
    pub k: usize,
    pub seed: u64,
}

impl ReplayHarness<'_> {
    /// Run one retrieve → act → score pass against a store.
    pub fn run(
        &self,
        query: &str,
        store: &MemoryStore,
    ) -> Result<(Vec<MemoryId>, AgentOutput, f64)> {
        let retrieved = self.retriever.retrieve(query, store, self.k);
        let items: Vec<&MemoryItem> = retrieved
            .ids
            .iter()
            .map(|id| {
                store
                    .get(id)
                    .ok_or_else(|| Error::Integrity(format!("retriever returned unknown id {id}")))
            })
            .collect::<Result<_>>()?;
        let output = self.agent.act(query, &items, self.seed)?;
        let harm = self.scorer.score(query, &output);
        Ok((retrieved.ids, output, harm))
    }
}

/// Fill in an event's retrieved context by re-running the deployed
/// retrieval mechanism.
pub fn reconstruct_retrieval(
    mut event: HarmfulEvent,
    store: &MemoryStore,
    retriever: &dyn Retriever,
    k: usize,
) -> HarmfulEvent {
    event.retrieved_ids = retriever.retrieve(&event.query, store, k).ids;
    event
}

/// Event-level influence of one retrieved memory: logged harm minus the
/// harm of the counterfactual output produced on `store \ {memory}` with
/// retrieval recomputed.
///
/// `store` must be the original audited store, never a partially purified
/// one, and `memory` must appear in the event's retrieved context.
pub fn cmis_event(
    event: &HarmfulEvent,
    memory: &MemoryId,
    store: &MemoryStore,
    harness: &ReplayHarness<'_>,
) -> Result<f64> {
    if !event.retrieved_ids.contains(memory) {
        return Err(Error::Contract(format!(
            "memory {memory} is not in the retrieved context of event {}",
            event.event_id
        )));
    }
    let counterfactual = store.remove_one(memory);
    let (_, _, harm_after) = harness.run(&event.query, &counterfactual)?;
    Ok(event.harm - harm_after)
}

/// Aggregated influence per memory (sum over events), plus the event-level
/// values behind it. Memories never retrieved by any event hold 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmisTable {
    pub aggregated: BTreeMap<MemoryId, f64>,
    pub per_event: BTreeMap<String, BTreeMap<MemoryId, f64>>,
}

impl CmisTable {
    pub fn value(&self, id: &MemoryId) -> f64 {
        self.aggregated.get(id).copied().unwrap_or(0.0)
    }

    /// Ids with strictly positive aggregated influence.
    pub fn positive_ids(&self) -> Vec<MemoryId> {
        self.aggregated
            .iter()
            .filter(|(_, v)| **v > 0.0)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Score every `(event, retrieved memory)` pair and aggregate.
///
/// Candidates per event are exactly its retrieved context. Summation runs
/// in `(event_id, memory id)` order so the result is bit-identical
/// regardless of input event order.
pub fn cmis_aggregate(
    events: &[HarmfulEvent],
    store: &MemoryStore,
    harness: &ReplayHarness<'_>,
) -> Result<CmisTable> {
    let known: BTreeSet<&MemoryId> = store.ids().collect();
    for event in events {
        for id in &event.retrieved_ids {
            if !known.contains(id) {
                return Err(Error::Integrity(format!(
                    "event {} references unknown memory {id}",
                    event.event_id
                )));
            }
        }
    }

    let mut per_event: BTreeMap<String, BTreeMap<MemoryId, f64>> = BTreeMap::new();
    for event in events {
        let mut row = BTreeMap::new();
        for id in &event.retrieved_ids {
            row.insert(id.clone(), cmis_event(event, id, store, harness)?);
        }
        per_event.insert(event.event_id.clone(), row);
    }

    let mut aggregated: BTreeMap<MemoryId, f64> = store.ids().map(|id| (id.clone(), 0.0)).collect();
    for row in per_event.values() {
        for (id, value) in row {
            *aggregated.get_mut(id).expect("id checked above") += value;
        }
    }
    Ok(CmisTable {
        aggregated,
        per_event,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harm::make_scorer;
    use crate::retrieval::LevenshteinRetriever;
    use crate::testbed::{coordinated_qa_scenario, make_agent, World};

    struct Scenario {
        store: MemoryStore,
        world: World,
    }

    fn scenario() -> Scenario {
        let (world, store, _) = coordinated_qa_scenario();
        Scenario { store, world }
    }

    fn harness<'a>(
        retriever: &'a LevenshteinRetriever,
        agent: &'a dyn Agent,
        scorer: &'a dyn HarmScorer,
    ) -> ReplayHarness<'a> {
        ReplayHarness {
            retriever,
            agent,
            scorer,
            k: 5,
            seed: 0,
        }
    }

    fn event_for(query: &str, id: &str, s: &Scenario, h: &ReplayHarness<'_>) -> HarmfulEvent {
        let (retrieved_ids, output, harm) = h.run(query, &s.store).unwrap();
        HarmfulEvent {
            event_id: id.to_string(),
            query: query.to_string(),
            output,
            retrieved_ids,
            harm,
        }
    }

    #[test]
    fn pivotal_poison_scores_one_and_coordinated_pair_scores_zero() {
        let s = scenario();
        let retriever = LevenshteinRetriever;
        let agent = make_agent(&s.world);
        let scorer = make_scorer(&s.world);
        let h = harness(&retriever, agent.as_ref(), scorer.as_ref());

        let pair_event = event_for("what food is sour?", "e000", &s, &h);
        assert_eq!(pair_event.harm, 1.0);
        // removing either coordinated poison alone leaves the other
        // retrieved, so single-removal influence vanishes
        for id in ["p1a", "p1b"] {
            let v = cmis_event(&pair_event, &MemoryId::from(id), &s.store, &h).unwrap();
            assert_eq!(v, 0.0, "coordinated poison {id}");
        }
        // a benign member of the context is not pivotal either
        let v = cmis_event(&pair_event, &MemoryId::from("b0"), &s.store, &h).unwrap();
        assert_eq!(v, 0.0);

        let pivotal_event = event_for("name one food rich in iron please", "e001", &s, &h);
        let v = cmis_event(&pivotal_event, &MemoryId::from("pA"), &s.store, &h).unwrap();
        assert_eq!(v, 1.0, "removing the only supporting poison flips harm");
    }

    #[test]
    fn candidate_outside_retrieved_context_is_a_contract_error() {
        let s = scenario();
        let retriever = LevenshteinRetriever;
        let agent = make_agent(&s.world);
        let scorer = make_scorer(&s.world);
        let h = harness(&retriever, agent.as_ref(), scorer.as_ref());

        let event = event_for("what food is sour?", "e000", &s, &h);
        let err = cmis_event(&event, &MemoryId::from("b7"), &s.store, &h).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn aggregate_sums_per_event_values_and_zeroes_the_rest() {
        let s = scenario();
        let retriever = LevenshteinRetriever;
        let agent = make_agent(&s.world);
        let scorer = make_scorer(&s.world);
        let h = harness(&retriever, agent.as_ref(), scorer.as_ref());

        // empty event list → all-zero table
        let table = cmis_aggregate(&[], &s.store, &h).unwrap();
        assert!(table.aggregated.values().all(|v| *v == 0.0));
        assert_eq!(table.aggregated.len(), s.store.len());

        // the same pivotal event three times sums to 3
        let e = event_for("name one food rich in iron please", "e0", &s, &h);
        let mut e1 = e.clone();
        e1.event_id = "e1".into();
        let mut e2 = e.clone();
        e2.event_id = "e2".into();
        let table = cmis_aggregate(&[e.clone(), e1, e2], &s.store, &h).unwrap();
        assert_eq!(table.value(&MemoryId::from("pA")), 3.0);
        assert_eq!(table.value(&MemoryId::from("p1a")), 0.0);
    }

    #[test]
    fn aggregate_is_event_order_invariant_and_leaves_the_store_intact() {
        let s = scenario();
        let retriever = LevenshteinRetriever;
        let agent = make_agent(&s.world);
        let scorer = make_scorer(&s.world);
        let h = harness(&retriever, agent.as_ref(), scorer.as_ref());

        let a = event_for("what food is sour?", "e000", &s, &h);
        let b = event_for("name one food rich in iron please", "e001", &s, &h);

        let before = s.store.to_canonical_string();
        let t1 = cmis_aggregate(&[a.clone(), b.clone()], &s.store, &h).unwrap();
        let t2 = cmis_aggregate(&[b, a], &s.store, &h).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s.store.to_canonical_string(), before);
    }

    #[test]
    fn unknown_memory_reference_is_an_integrity_error() {
        let s = scenario();
        let retriever = LevenshteinRetriever;
        let agent = make_agent(&s.world);
        let scorer = make_scorer(&s.world);
        let h = harness(&retriever, agent.as_ref(), scorer.as_ref());

        let mut event = event_for("what food is sour?", "e000", &s, &h);
        event.retrieved_ids.push(MemoryId::from("ghost"));
        let err = cmis_aggregate(&[event], &s.store, &h).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn reconstruction_matches_direct_retrieval() {
        let s = scenario();
        let retriever = LevenshteinRetriever;
        let agent = make_agent(&s.world);
        let scorer = make_scorer(&s.world);
        let h = harness(&retriever, agent.as_ref(), scorer.as_ref());

        let full = event_for("what food is sour?", "e000", &s, &h);
        let stripped = HarmfulEvent {
            retrieved_ids: Vec::new(),
            ..full.clone()
        };
        let rebuilt = reconstruct_retrieval(stripped, &s.store, &retriever, 5);
        assert_eq!(rebuilt.retrieved_ids, full.retrieved_ids);

        let empty = MemoryStore::from_records(Vec::new()).unwrap();
        let none = reconstruct_retrieval(full, &empty, &retriever, 5);
        assert!(none.retrieved_ids.is_empty());
    }

    #[test]
    fn events_file_round_trip() {
        let s = scenario();
        let retriever = LevenshteinRetriever;
        let agent = make_agent(&s.world);
        let scorer = make_scorer(&s.world);
        let h = harness(&retriever, agent.as_ref(), scorer.as_ref());
        let events = vec![
            event_for("what food is sour?", "e000", &s, &h),
            event_for("name one food rich in iron please", "e001", &s, &h),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        save_events(&events, &path).unwrap();
        let loaded = load_events(&path).unwrap();
        assert_eq!(events, loaded);
    }
}
