//! Post-hoc memory auditing for retrieval-augmented agents.
//!
//! Given a memory store and a set of observed harmful events, the toolkit
//! ranks suspicious memories by fusing two signals — per-memory harm
//! reduction under counterfactual replay, and structural anomaly within a
//! consistency graph over the store — then removes the top-ranked set and
//! re-evaluates. A deterministic simulated-agent testbed reproduces the
//! label-shift QA attack and the purchase-redirect shop attack at desk
//! scale, with ground-truth labels kept in an evaluation-only sidecar the
//! auditor never reads.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod harm;
pub mod memtext;
pub mod pipeline;
pub mod replay;
pub mod retrieval;
pub mod store;
pub mod testbed;

pub use error::{Error, Result};
pub use eval::{GroundTruthSidecar, Provenance};
pub use fusion::{
    baseline_nnc, baseline_rd, baseline_rf, normalize_minmax, select_removal, RemovalSet, RuleKind,
    ScoreTable, DEFAULT_ALPHA,
};
pub use graph::{
    build_graph, cas, cas_table, flag_anomalies, CasTable, ConsistencyProvider, MemoryGraph,
    RuleBasedConsistency,
};
pub use harm::{make_scorer, HarmScorer, QaHarmScorer, RapHarmScorer};
pub use pipeline::{
    annotate_rho, asr, run_audit_on, stage1_replay, stage2_audit, stage3_purify_eval, sweep,
    AuditConfig, AuditContext, AuditReport, SweepDim, SweepOutcome, SweepSummaryRow,
};
pub use replay::{
    cmis_aggregate, cmis_event, load_events, reconstruct_retrieval, save_events, CmisTable,
    HarmfulEvent, ReplayHarness,
};
pub use retrieval::{
    cosine, embed_ngram, levenshtein, LevenshteinRetriever, NgramCosineRetriever, RetrievalResult,
    Retriever, EMBED_DIM,
};
pub use store::{MemoryId, MemoryItem, MemoryKind, MemoryStore};
pub use testbed::{
    coordinated_qa_scenario, default_qa_world, default_shop_world, gen_store, make_agent, Agent,
    AgentOutput, QaAgent, QaWorld, RapAgent, ShopWorld, Track, Trajectory, World,
};
