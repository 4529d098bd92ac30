//! The three-stage audit protocol and the sweep runner.
//!
//! Stage 1 replays every evaluation query against the attacked store and
//! collects the harmful episodes as events. Stage 2 scores the original,
//! untouched store — replay attribution, graph anomaly, normalization,
//! fusion, selection. Stage 3 removes the selected set and re-evaluates
//! the same episodes on the purified store. Attack success is the harmful
//! fraction of attacked episodes, measured before and after.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruthSidecar;
use crate::fusion::{select_removal, RemovalSet, RuleKind, ScoreTable, DEFAULT_ALPHA};
use crate::graph::{build_graph, cas, RuleBasedConsistency};
use crate::harm::{make_scorer, parse_answer_label};
use crate::replay::{cmis_aggregate, HarmfulEvent, ReplayHarness};
use crate::retrieval::{LevenshteinRetriever, NgramCosineRetriever, Retriever};
use crate::store::{MemoryId, MemoryStore};
use crate::testbed::{gen_store, make_agent, Track, World};

/// Retrieval depth matching the deployed QA setting.
pub const DEFAULT_K: usize = 5;
/// Graph neighborhood size; mirrors the retrieval depth.
pub const DEFAULT_K_GRAPH: usize = 5;

/// Full configuration of an audit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub track: Track,
    pub alpha: f64,
    pub k: usize,
    pub k_graph: usize,
    pub rule: RuleKind,
    pub budget: Option<usize>,
    pub seeds: Vec<u64>,
    pub n_benign: usize,
    pub n_poison: usize,
    #[serde(default)]
    pub world: Option<PathBuf>,
    #[serde(default)]
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub sidecar: Option<PathBuf>,
}

impl AuditConfig {
    /// Track defaults: the standard sparse attack composition, fusion at
    /// 0.6, depth-5 retrieval and graph neighborhoods, ten seeds.
    pub fn default_for(track: Track) -> Self {
        let (n_benign, n_poison) = match track {
            Track::Qa => (8, 2),
            Track::Rap => (17, 3),
        };
        AuditConfig {
            track,
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
            k_graph: DEFAULT_K_GRAPH,
            rule: RuleKind::DsThreshold,
            budget: None,
            seeds: (0..10).collect(),
            n_benign,
            n_poison,
            world: None,
            store: None,
            sidecar: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k_graph == 0 {
            return Err(Error::Config("k_graph must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.rule == RuleKind::Budget && self.budget.is_none() {
            return Err(Error::Config("budget rule requires --budget".into()));
        }
        Ok(())
    }

    /// The world this configuration runs against: the referenced world
    /// file, or the track default.
    pub fn resolve_world(&self) -> Result<World> {
        match &self.world {
            Some(path) => World::load(path),
            None => Ok(match self.track {
                Track::Qa => World::Qa(crate::testbed::default_qa_world()),
                Track::Rap => World::Rap(crate::testbed::default_shop_world()),
            }),
        }
    }
}

/// The deployed components of one track, bundled for replay.
pub struct AuditContext {
    pub world: World,
    retriever: Box<dyn Retriever>,
    agent: Box<dyn crate::testbed::Agent>,
    scorer: Box<dyn crate::harm::HarmScorer>,
    pub k: usize,
    pub seed: u64,
}

/// The deployed retriever for a track: edit distance for QA, embedding
/// cosine for trajectories.
pub fn make_retriever(track: Track) -> Box<dyn Retriever> {
    match track {
        Track::Qa => Box::new(LevenshteinRetriever),
        Track::Rap => Box::new(NgramCosineRetriever),
    }
}

impl AuditContext {
    pub fn new(world: World, k: usize, seed: u64) -> Self {
        let retriever = make_retriever(world.track());
        let agent = make_agent(&world);
        let scorer = make_scorer(&world);
        AuditContext {
            world,
            retriever,
            agent,
            scorer,
            k,
            seed,
        }
    }

    pub fn harness(&self) -> ReplayHarness<'_> {
        ReplayHarness {
            retriever: self.retriever.as_ref(),
            agent: self.agent.as_ref(),
            scorer: self.scorer.as_ref(),
            k: self.k,
            seed: self.seed,
        }
    }
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub query: String,
    pub attacked: bool,
    pub harm: f64,
}

/// Stage 1 output: the admitted harmful events plus the full episode log
/// the attack success rate is computed from.
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub events: Vec<HarmfulEvent>,
    pub episodes: Vec<Episode>,
    pub warnings: Vec<String>,
}

/// Mean of binary outcomes. Errors on an empty list.
pub fn asr(outcomes: &[f64]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::UndefinedMetric(
            "attack success rate over zero episodes".into(),
        ));
    }
    Ok(outcomes.iter().sum::<f64>() / outcomes.len() as f64)
}

fn attacked_outcomes(episodes: &[Episode]) -> Vec<f64> {
    episodes
        .iter()
        .filter(|e| e.attacked)
        .map(|e| e.harm)
        .collect()
}

/// Stage 1: replay every evaluation query, log all episodes, and admit
/// exactly the harmful ones as events with their retrieved context.
pub fn stage1_replay(ctx: &AuditContext, store: &MemoryStore) -> Result<ReplayOutcome> {
    let harness = ctx.harness();
    let mut events = Vec::new();
    let mut episodes = Vec::new();
    let mut warnings = Vec::new();
    for (idx, query) in ctx.world.queries().iter().enumerate() {
        let (retrieved_ids, output, harm) = harness.run(query, store)?;
        if ctx.world.track() == Track::Qa {
            if let Some(text) = output.as_text() {
                if parse_answer_label(text).is_none() {
                    warnings.push(format!("unparseable answer for query {query:?}"));
                }
            }
        }
        episodes.push(Episode {
            query: query.to_string(),
            attacked: ctx.world.is_attacked(query),
            harm,
        });
        if harm == 1.0 {
            events.push(HarmfulEvent {
                event_id: format!("e{idx:03}"),
                query: query.to_string(),
                output,
                retrieved_ids,
                harm,
            });
        }
    }
    Ok(ReplayOutcome {
        events,
        episodes,
        warnings,
    })
}

/// Stage 2: score the original store against the events and select the
/// removal set. The store value is never modified.
pub fn stage2_audit(
    ctx: &AuditContext,
    store: &MemoryStore,
    events: &[HarmfulEvent],
    alpha: f64,
    k_graph: usize,
    rule: RuleKind,
    budget: Option<usize>,
) -> Result<(ScoreTable, RemovalSet)> {
    let harness = ctx.harness();
    let cmis = cmis_aggregate(events, store, &harness)?;
    let graph = build_graph(store, &RuleBasedConsistency, k_graph)?;
    let mut cas_scores: BTreeMap<MemoryId, f64> = BTreeMap::new();
    for node in graph.nodes() {
        cas_scores.insert(node.clone(), cas(node, &graph)?);
    }
    let table = ScoreTable::build(&cmis.aggregated, &cas_scores, alpha)?;
    let removal = select_removal(&table, store, rule, budget)?;
    Ok((table, removal))
}

/// Stage 3 output: the purified store and the re-evaluated episode log.
#[derive(Debug, Clone)]
pub struct PurifyOutcome {
    pub purified: MemoryStore,
    pub episodes: Vec<Episode>,
}

/// Stage 3: remove the selected set and re-run the same evaluation on the
/// purified store.
pub fn stage3_purify_eval(
    ctx: &AuditContext,
    store: &MemoryStore,
    removal: &RemovalSet,
) -> Result<PurifyOutcome> {
    let purified = store.remove(&removal.id_set());
    let harness = ctx.harness();
    let mut episodes = Vec::new();
    for query in ctx.world.queries() {
        let (_, _, harm) = harness.run(query, &purified)?;
        episodes.push(Episode {
            query: query.to_string(),
            attacked: ctx.world.is_attacked(query),
            harm,
        });
    }
    Ok(PurifyOutcome { purified, episodes })
}

/// Per-event trace kept in the report: the retrieved context and the
/// event-level influence values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub event_id: String,
    pub query: String,
    pub retrieved_ids: Vec<MemoryId>,
    pub harm: f64,
    pub cmis: BTreeMap<MemoryId, f64>,
}

/// Complete record of one audit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub seed: u64,
    /// Ground-truth contamination ratio; present only when an evaluation
    /// sidecar was supplied. Auditing never reads it.
    pub rho: Option<f64>,
    pub asr_before: f64,
    pub asr_after: f64,
    pub removal: RemovalSet,
    pub scores: ScoreTable,
    pub events: Vec<EventTrace>,
    /// Diagnostic union across events of positively-attributed memories.
    pub union_positive_cmis: Vec<MemoryId>,
    pub episodes_before: Vec<Episode>,
    pub episodes_after: Vec<Episode>,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn summary_line(&self) -> String {
        format!(
            "asr_before={:.3} asr_after={:.3} removed={}",
            self.asr_before,
            self.asr_after,
            self.removal.ids.len()
        )
    }
}

/// Run the full three-stage protocol for one seed against a given world
/// and store.
pub fn run_audit_on(
    world: &World,
    store: &MemoryStore,
    config: &AuditConfig,
    seed: u64,
) -> Result<AuditReport> {
    config.validate()?;
    let ctx = AuditContext::new(world.clone(), config.k, seed);

    let replayed = stage1_replay(&ctx, store)?;
    let asr_before = asr(&attacked_outcomes(&replayed.episodes))?;

    let (scores, removal) = stage2_audit(
        &ctx,
        store,
        &replayed.events,
        config.alpha,
        config.k_graph,
        config.rule,
        config.budget,
    )?;

    let purify = stage3_purify_eval(&ctx, store, &removal)?;
    let asr_after = asr(&attacked_outcomes(&purify.episodes))?;

    let harness = ctx.harness();
    let cmis = cmis_aggregate(&replayed.events, store, &harness)?;
    let traces: Vec<EventTrace> = replayed
        .events
        .iter()
        .map(|e| EventTrace {
            event_id: e.event_id.clone(),
            query: e.query.clone(),
            retrieved_ids: e.retrieved_ids.clone(),
            harm: e.harm,
            cmis: cmis.per_event.get(&e.event_id).cloned().unwrap_or_default(),
        })
        .collect();
    let mut union_positive: Vec<MemoryId> = traces
        .iter()
        .flat_map(|t| {
            t.cmis
                .iter()
                .filter(|(_, v)| **v > 0.0)
                .map(|(id, _)| id.clone())
        })
        .collect();
    union_positive.sort();
    union_positive.dedup();

    Ok(AuditReport {
        config: config.clone(),
        seed,
        rho: None,
        asr_before,
        asr_after,
        removal,
        scores,
        events: traces,
        union_positive_cmis: union_positive,
        episodes_before: replayed.episodes,
        episodes_after: purify.episodes,
        warnings: replayed.warnings,
    })
}

/// Sweepable dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepDim {
    Alpha,
    Rho,
    Component,
}

impl std::str::FromStr for SweepDim {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepDim::Alpha),
            "rho" => Ok(SweepDim::Rho),
            "component" => Ok(SweepDim::Component),
            other => Err(Error::Config(format!("unknown sweep dimension {other:?}"))),
        }
    }
}

/// One row of the sweep summary: seed-averaged attack success per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub dim: SweepDim,
    pub value: String,
    pub mean_asr_before: f64,
    pub mean_asr_after: f64,
}

/// All reports of a sweep plus the per-value summary.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// `(value, seed)` cells in canonical order.
    pub reports: Vec<(String, u64, AuditReport)>,
    pub summary: Vec<SweepSummaryRow>,
}

fn parse_value_f64(value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("cannot parse sweep value {value:?} as a number")))
}

fn cell_setup(config: &AuditConfig, dim: SweepDim, value: &str) -> Result<AuditConfig> {
    let mut cell = config.clone();
    match dim {
        SweepDim::Alpha => cell.alpha = parse_value_f64(value)?,
        SweepDim::Rho => {
            let rho = parse_value_f64(value)?;
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
            }
            let total = config.n_benign + config.n_poison;
            let poison = (rho * total as f64).round() as usize;
            cell.n_poison = poison;
            cell.n_benign = total - poison;
        }
        SweepDim::Component => {
            cell.alpha = match value {
                "full" => config.alpha,
                "cmis_only" => 1.0,
                "mcg_only" => 0.0,
                other => {
                    return Err(Error::Config(format!(
                        "unknown component {other:?}; expected full, cmis_only or mcg_only"
                    )))
                }
            };
        }
    }
    Ok(cell)
}

/// Run one full stage-1..3 pass per `(value, seed)` cell on freshly
/// generated stores, and average attack success per value across seeds.
pub fn sweep(config: &AuditConfig, dim: SweepDim, values: &[String]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::Config("sweep requires at least one value".into()));
    }
    config.validate()?;
    let world = config.resolve_world()?;

    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for value in values {
        let cell_config = cell_setup(config, dim, value)?;
        let mut befores = Vec::new();
        let mut afters = Vec::new();
        for &seed in &cell_config.seeds {
            let (store, sidecar) =
                gen_store(&world, cell_config.n_benign, cell_config.n_poison, seed)?;
            let mut report = run_audit_on(&world, &store, &cell_config, seed)?;
            report.rho = Some(sidecar.contamination_ratio()?);
            befores.push(report.asr_before);
            afters.push(report.asr_after);
            reports.push((value.clone(), seed, report));
        }
        summary.push(SweepSummaryRow {
            dim,
            value: value.clone(),
            mean_asr_before: asr(&befores)?,
            mean_asr_after: asr(&afters)?,
        });
    }
    Ok(SweepOutcome { reports, summary })
}

/// Attach the evaluation-side contamination ratio to a finished report.
pub fn annotate_rho(report: &mut AuditReport, sidecar: &GroundTruthSidecar) -> Result<()> {
    report.rho = Some(sidecar.contamination_ratio()?);
    Ok(())
}
