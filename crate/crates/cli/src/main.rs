//! memaudit — post-hoc memory auditing over line-delimited store files.
//!
//! Subcommands mirror the audit protocol so every intermediate artifact is
//! an inspectable file:
//!
//! - `gen`      build an attacked store + evaluation sidecar + world file
//! - `replay`   stage 1: collect harmful events from the attacked store
//! - `audit`    stage 2: score the store and select a removal set
//! - `purify`   stage 3a: apply a removal set to a store
//! - `eval`     full protocol: replay, audit, purify, re-evaluate, report
//! - `baseline` removal sets for the rd / rf / nnc baselines
//! - `sweep`    alpha / rho / component grids averaged over seeds
//!
//! Flag precedence: command-line flags override the config file
//! (`--config` or `MEMAUDIT_CONFIG`), which overrides built-in defaults.
//! Exit codes: 0 success, 1 usage error, 2 data/integrity error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use memaudit_core::error::Error;
use memaudit_core::eval::GroundTruthSidecar;
use memaudit_core::fusion::{baseline_nnc, baseline_rd, baseline_rf, RemovalSet, RuleKind};
use memaudit_core::graph::{build_graph, RuleBasedConsistency};
use memaudit_core::pipeline::{
    annotate_rho, asr, make_retriever, run_audit_on, stage1_replay, stage2_audit,
    stage3_purify_eval, AuditConfig, AuditContext, SweepDim,
};
use memaudit_core::replay::{load_events, save_events};
use memaudit_core::store::{MemoryId, MemoryStore};
use memaudit_core::testbed::{gen_store, Track, World};

#[derive(Parser)]
#[command(name = "memaudit", version, about = "Post-hoc memory auditing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackArg {
    Qa,
    Rap,
}

impl From<TrackArg> for Track {
    fn from(t: TrackArg) -> Track {
        match t {
            TrackArg::Qa => Track::Qa,
            TrackArg::Rap => Track::Rap,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Budget,
    DsThreshold,
}

impl From<RuleArg> for RuleKind {
    fn from(r: RuleArg) -> RuleKind {
        match r {
            RuleArg::Budget => RuleKind::Budget,
            RuleArg::DsThreshold => RuleKind::DsThreshold,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Rd,
    Rf,
    Nnc,
}

/// Flags shared by every subcommand, mapped onto the audit configuration.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Config file; defaults to $MEMAUDIT_CONFIG when set
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    track: Option<TrackArg>,
    /// Fusion weight on the replay-attribution signal
    #[arg(long)]
    alpha: Option<f64>,
    /// Retrieval depth
    #[arg(long)]
    k: Option<usize>,
    /// Graph neighborhood size
    #[arg(long = "k-graph")]
    k_graph: Option<usize>,
    /// Removal selection rule
    #[arg(long)]
    rule: Option<RuleArg>,
    /// Removal budget (implies --rule budget)
    #[arg(long)]
    budget: Option<usize>,
    /// Single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Seed list "0,1,2" or a count "10" meaning seeds 0..10
    #[arg(long)]
    seeds: Option<String>,
    /// World definition file
    #[arg(long)]
    world: Option<PathBuf>,
    /// Memory store file
    #[arg(long)]
    store: Option<PathBuf>,
    /// Evaluation-only ground-truth sidecar
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an attacked store, its sidecar and the world file
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of benign records
        #[arg(long)]
        benign: Option<usize>,
        /// Number of poisoned records
        #[arg(long)]
        poison: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay the evaluation set and collect harmful events
    Replay {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output events file
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the store against events and select a removal set
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Events file from replay
        #[arg(long)]
        events: PathBuf,
        /// Output directory for scores.jsonl and removal.json
        #[arg(long)]
        out: PathBuf,
        /// Also write the consistency graph edges to graph.jsonl
        #[arg(long = "dump-graph")]
        dump_graph: bool,
    },
    /// Apply a removal set, writing the purified store
    Purify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Removal set file
        #[arg(long)]
        removal: PathBuf,
        /// Output store file
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full protocol and write the audit report
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use this removal set for purification instead of the audit's own
        #[arg(long)]
        removal: Option<PathBuf>,
        /// Output report file
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a baseline removal set
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        baseline: BaselineArg,
        /// Number of memories to remove
        #[arg(long)]
        count: usize,
        /// Events file (computed by replay when omitted; used by rf)
        #[arg(long)]
        events: Option<PathBuf>,
        /// Output removal file
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one dimension over a value grid, averaged across seeds
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dimension: alpha, rho or component
        #[arg(long)]
        dim: String,
        /// Comma-separated values
        #[arg(long)]
        values: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

/// Optional mirror of `AuditConfig` for the config file.
#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    track: Option<Track>,
    alpha: Option<f64>,
    k: Option<usize>,
    k_graph: Option<usize>,
    rule: Option<RuleKind>,
    budget: Option<usize>,
    seeds: Option<Vec<u64>>,
    n_benign: Option<usize>,
    n_poison: Option<usize>,
    world: Option<PathBuf>,
    store: Option<PathBuf>,
    sidecar: Option<PathBuf>,
}

fn load_file_config(explicit: Option<&Path>) -> Result<FileConfig, Error> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os("MEMAUDIT_CONFIG").map(PathBuf::from),
    };
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let content = fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
            Ok(serde_json::from_str(&content)?)
        }
    }
}

fn parse_seed_list(spec: &str) -> Result<Vec<u64>, Error> {
    let bad = |s: &str| Error::Config(format!("cannot parse seed value {s:?}"));
    if spec.contains(',') {
        spec.split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| bad(s)))
            .collect()
    } else {
        let n: u64 = spec.trim().parse().map_err(|_| bad(spec))?;
        Ok((0..n).collect())
    }
}

/// Merge defaults ← config file ← flags into a validated configuration.
fn resolve_config(args: &ConfigArgs) -> Result<AuditConfig, Error> {
    let file = load_file_config(args.config.as_deref())?;

    let world_path = args.world.clone().or(file.world);
    let track = match (args.track, file.track, &world_path) {
        (Some(t), _, _) => Track::from(t),
        (None, Some(t), _) => t,
        (None, None, Some(path)) => World::load(path)?.track(),
        (None, None, None) => Track::Qa,
    };

    let mut config = AuditConfig::default_for(track);
    config.world = world_path;

    if let Some(v) = file.alpha {
        config.alpha = v;
    }
    if let Some(v) = file.k {
        config.k = v;
    }
    if let Some(v) = file.k_graph {
        config.k_graph = v;
    }
    if let Some(v) = file.budget {
        config.budget = Some(v);
    }
    // a budget anywhere implies the budget rule unless a rule is named at
    // the same or a higher-precedence layer
    config.rule = match (args.rule, args.budget, file.rule, file.budget) {
        (Some(r), _, _, _) => RuleKind::from(r),
        (None, Some(_), _, _) => RuleKind::Budget,
        (None, None, Some(r), _) => r,
        (None, None, None, Some(_)) => RuleKind::Budget,
        (None, None, None, None) => config.rule,
    };
    if let Some(v) = file.seeds {
        config.seeds = v;
    }
    if let Some(v) = file.n_benign {
        config.n_benign = v;
    }
    if let Some(v) = file.n_poison {
        config.n_poison = v;
    }
    if file.store.is_some() {
        config.store = file.store;
    }
    if file.sidecar.is_some() {
        config.sidecar = file.sidecar;
    }

    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.k {
        config.k = v;
    }
    if let Some(v) = args.k_graph {
        config.k_graph = v;
    }
    if let Some(v) = args.budget {
        config.budget = Some(v);
    }
    if let Some(spec) = &args.seeds {
        config.seeds = parse_seed_list(spec)?;
    }
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if args.store.is_some() {
        config.store = args.store.clone();
    }
    if args.sidecar.is_some() {
        config.sidecar = args.sidecar.clone();
    }

    config.validate()?;
    Ok(config)
}

fn first_seed(config: &AuditConfig) -> u64 {
    config.seeds.first().copied().unwrap_or(0)
}

fn require_store(config: &AuditConfig) -> Result<MemoryStore, Error> {
    let path = config
        .store
        .as_ref()
        .ok_or_else(|| Error::Config("--store is required".into()))?;
    MemoryStore::load(path)
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Gen {
            cfg,
            benign,
            poison,
            out,
        } => {
            let config = resolve_config(&cfg)?;
            let world = config.resolve_world()?;
            let n_benign = benign.unwrap_or(config.n_benign);
            let n_poison = poison.unwrap_or(config.n_poison);
            let seed = first_seed(&config);
            let (store, sidecar) = gen_store(&world, n_benign, n_poison, seed)?;
            create_dir(&out)?;
            store.save(out.join("store.jsonl"))?;
            sidecar.save(out.join("sidecar.json"))?;
            world.save(out.join("world.json"))?;
            println!(
                "generated items={} rho={:.3} out={}",
                store.len(),
                sidecar.contamination_ratio()?,
                out.display()
            );
            Ok(())
        }
        Command::Replay { cfg, out } => {
            let config = resolve_config(&cfg)?;
            let world = config.resolve_world()?;
            let store = require_store(&config)?;
            let ctx = AuditContext::new(world, config.k, first_seed(&config));
            let replayed = stage1_replay(&ctx, &store)?;
            for w in &replayed.warnings {
                eprintln!("warning: {w}");
            }
            save_events(&replayed.events, &out)?;
            let attacked: Vec<f64> = replayed
                .episodes
                .iter()
                .filter(|e| e.attacked)
                .map(|e| e.harm)
                .collect();
            println!(
                "episodes={} events={} asr_before={:.3}",
                replayed.episodes.len(),
                replayed.events.len(),
                asr(&attacked)?
            );
            Ok(())
        }
        Command::Audit {
            cfg,
            events,
            out,
            dump_graph,
        } => {
            let config = resolve_config(&cfg)?;
            let world = config.resolve_world()?;
            let store = require_store(&config)?;
            let events = load_events(&events)?;
            let ctx = AuditContext::new(world, config.k, first_seed(&config));
            let (scores, removal) = stage2_audit(
                &ctx,
                &store,
                &events,
                config.alpha,
                config.k_graph,
                config.rule,
                config.budget,
            )?;
            create_dir(&out)?;
            scores.save_dump(out.join("scores.jsonl"))?;
            removal.save(out.join("removal.json"))?;
            if dump_graph {
                let graph = build_graph(&store, &RuleBasedConsistency, config.k_graph)?;
                let path = out.join("graph.jsonl");
                fs::write(&path, graph.dump_edges()).map_err(|e| Error::Io { path, source: e })?;
            }
            println!("scored={} removed={}", scores.rows.len(), removal.ids.len());
            Ok(())
        }
        Command::Purify { cfg, removal, out } => {
            let config = resolve_config(&cfg)?;
            let store = require_store(&config)?;
            let removal = RemovalSet::load(&removal)?;
            let ids: BTreeSet<MemoryId> = removal.id_set();
            for missing in store.missing(&ids) {
                eprintln!("warning: removal id not in store: {missing}");
            }
            let purified = store.remove(&ids);
            purified.save(&out)?;
            println!(
                "removed={} remaining={}",
                store.len() - purified.len(),
                purified.len()
            );
            Ok(())
        }
        Command::Eval { cfg, removal, out } => {
            let config = resolve_config(&cfg)?;
            let world = config.resolve_world()?;
            let store = require_store(&config)?;
            let seed = first_seed(&config);
            let mut report = run_audit_on(&world, &store, &config, seed)?;
            if let Some(path) = removal {
                let supplied = RemovalSet::load(&path)?;
                let ctx = AuditContext::new(world.clone(), config.k, seed);
                let purified = stage3_purify_eval(&ctx, &store, &supplied)?;
                let attacked: Vec<f64> = purified
                    .episodes
                    .iter()
                    .filter(|e| e.attacked)
                    .map(|e| e.harm)
                    .collect();
                report.asr_after = asr(&attacked)?;
                report.episodes_after = purified.episodes;
                report.removal = supplied;
            }
            if let Some(path) = &config.sidecar {
                let sidecar = GroundTruthSidecar::load(path)?;
                annotate_rho(&mut report, &sidecar)?;
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            report.save(&out)?;
            println!("{}", report.summary_line());
            Ok(())
        }
        Command::Baseline {
            cfg,
            baseline,
            count,
            events,
            out,
        } => {
            let config = resolve_config(&cfg)?;
            let world = config.resolve_world()?;
            let store = require_store(&config)?;
            let seed = first_seed(&config);
            let removal = match baseline {
                BaselineArg::Rd => baseline_rd(&store, count, seed)?,
                BaselineArg::Rf => {
                    let events = match events {
                        Some(path) => load_events(&path)?,
                        None => {
                            let ctx = AuditContext::new(world.clone(), config.k, seed);
                            stage1_replay(&ctx, &store)?.events
                        }
                    };
                    let retriever = make_retriever(world.track());
                    baseline_rf(&store, &events, retriever.as_ref(), config.k, count)?
                }
                BaselineArg::Nnc => {
                    let graph = build_graph(&store, &RuleBasedConsistency, config.k_graph)?;
                    baseline_nnc(&store, &graph, count)?
                }
            };
            removal.save(&out)?;
            let name = match baseline {
                BaselineArg::Rd => "rd",
                BaselineArg::Rf => "rf",
                BaselineArg::Nnc => "nnc",
            };
            println!("baseline={name} removed={}", removal.ids.len());
            Ok(())
        }
        Command::Sweep {
            cfg,
            dim,
            values,
            out,
        } => {
            let config = resolve_config(&cfg)?;
            let dim: SweepDim = dim.parse()?;
            let values: Vec<String> = values
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            let outcome = memaudit_core::pipeline::sweep(&config, dim, &values)?;
            create_dir(&out)?;
            let dim_name = match dim {
                SweepDim::Alpha => "alpha",
                SweepDim::Rho => "rho",
                SweepDim::Component => "component",
            };
            for (value, seed, report) in &outcome.reports {
                let name = format!("report_{dim_name}={value}_seed={seed}.json");
                report.save(out.join(name))?;
            }
            let mut summary = String::new();
            for row in &outcome.summary {
                summary.push_str(&serde_json::to_string(row)?);
                summary.push('\n');
                println!(
                    "{dim_name}={} mean_asr_before={:.3} mean_asr_after={:.3}",
                    row.value, row.mean_asr_before, row.mean_asr_after
                );
            }
            let summary_path = out.join("summary.jsonl");
            fs::write(&summary_path, summary).map_err(|e| Error::Io {
                path: summary_path,
                source: e,
            })?;
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs_parse_as_count_or_list() {
        assert_eq!(parse_seed_list("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seed_list("5,9").unwrap(), vec![5, 9]);
        assert_eq!(parse_seed_list(" 7 ").unwrap(), (0..7).collect::<Vec<_>>());
        assert!(parse_seed_list("x").is_err());
    }

    #[test]
    fn flags_override_defaults() {
        let args = ConfigArgs {
            alpha: Some(0.8),
            budget: Some(4),
            seed: Some(11),
            ..Default::default()
        };
        let config = resolve_config(&args).unwrap();
        assert_eq!(config.alpha, 0.8);
        assert_eq!(config.budget, Some(4));
        assert_eq!(config.rule, RuleKind::Budget);
        assert_eq!(config.seeds, vec![11]);
        assert_eq!(config.track, Track::Qa);
    }
}
