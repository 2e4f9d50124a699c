use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use toolforge::config::RunConfig;
use toolforge::io::{read_jsonl, write_atomic, write_json, write_jsonl};
use toolforge::pipeline::{self, AdvantageRow, RewardRow, World};
use toolforge::service::{self, RetrieveRequest, ServiceState};
use toolforge_core::curation::{
    compose_mix, rejection_filter, sample_pool, stratify_all, MixConfig,
};
use toolforge_core::environment::{Observation, INVALID_CALL, NOT_AVAILABLE, TOOL_NOT_FOUND};
use toolforge_core::eval::{noise_sweep, BenchConfig, NoiseRow, NOISE_LEVELS};
use toolforge_core::grammar::{ExecutionEvent, ToolCallBody, TrajectoryRecord};
use toolforge_core::retrieval::VectorIndex;
use toolforge_core::synthetic::generate_catalog;
use toolforge_core::{
    load_catalog, parse_execution, parse_retrieval, AnnotatedQuery, ConvMode, Difficulty, Episode,
    GateMode, MetricReport, Phase, ReplayStore, RewardWeights, ScoreConfig,
};

#[derive(Parser)]
#[command(
    name = "toolforge",
    version,
    about = "Two-phase tool agent pipelines and retrieval service"
)]
struct Cli {
    /// TOML run configuration; TOOLFORGE_* variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log at info level (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or generate tool catalogs.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Build, query or serve the tool index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Roll out groups of episodes.
    #[command(subcommand)]
    Rollout(RolloutCmd),
    /// Reward every episode.
    Score(ScoreArgs),
    /// Group-relative advantages from rewards.
    Advantage(AdvantageArgs),
    /// Ordered surrogate objective values.
    Objective(ObjectiveArgs),
    /// Build training pools.
    #[command(subcommand)]
    Curate(CurateCmd),
    /// Benchmarks.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Serve /retrieve, /healthz and /version.
    Serve(ServeArgs),
    /// Rollout, rewards, advantages, objectives and report in one run.
    Pipeline(PipelineArgs),
    /// Parse or validate transcripts.
    #[command(subcommand)]
    Traj(TrajCmd),
    /// Replay store maintenance.
    #[command(subcommand)]
    Env(EnvCmd),
}

#[derive(Subcommand)]
enum CatalogCmd {
    Validate {
        path: PathBuf,
    },
    Stats {
        path: PathBuf,
    },
    /// Deterministic synthetic catalog.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct CatalogOpt {
    /// Overrides `catalog` from the config.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Embed the catalog and write `{api_id, vector}` lines.
    Build {
        #[command(flatten)]
        catalog: CatalogOpt,
        #[arg(long)]
        out: PathBuf,
    },
    Query {
        text: String,
        #[command(flatten)]
        catalog: CatalogOpt,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    catalog: CatalogOpt,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Prebuilt vectors from `index build`.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RolloutOpts {
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long = "G", alias = "group-size")]
    group_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gate: Option<GateMode>,
    #[arg(long)]
    scripts: Option<PathBuf>,
    #[arg(long)]
    replay: Option<PathBuf>,
    #[command(flatten)]
    catalog: CatalogOpt,
}

#[derive(Subcommand)]
enum RolloutCmd {
    Run {
        #[command(flatten)]
        opts: RolloutOpts,
        #[arg(long, default_value = "episodes.jsonl")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    episodes: PathBuf,
    /// `alpha1,alpha2,beta1,beta2`.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    conv: Option<ConvMode>,
    /// Judge URL or verdict fixture.
    #[arg(long)]
    judge: Option<String>,
    #[command(flatten)]
    catalog: CatalogOpt,
    #[arg(long, default_value = "rewards.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct AdvantageArgs {
    #[arg(long)]
    rewards: PathBuf,
    /// Expected group size; groups of any other size are rejected.
    #[arg(long = "G", alias = "group-size")]
    group_size: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value = "advantages.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct ObjectiveArgs {
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    advantages: PathBuf,
    #[arg(long)]
    clip: Option<f64>,
    /// `{query_id, rollout_index, task, log_ratios}` lines.
    #[arg(long)]
    ratios: Option<PathBuf>,
    #[command(flatten)]
    catalog: CatalogOpt,
    #[arg(long, default_value = "objectives.jsonl")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CurateCmd {
    /// Label queries Easy or Hard by single-shot retrieval.
    Stratify {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        catalog: CatalogOpt,
        #[arg(long)]
        out: PathBuf,
    },
    Sample {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        hard: usize,
        #[arg(long)]
        easy: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep full-recall, well-formed episodes.
    Filter {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejected: Option<PathBuf>,
    },
    Mix {
        #[arg(long)]
        positives: PathBuf,
        #[arg(long)]
        negatives: PathBuf,
        /// Labeled queries supplying each record's difficulty.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 0.7)]
        pos: f64,
        #[arg(long, default_value_t = 1.0)]
        negative_weight: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Retrieval {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Exec {
        #[arg(long)]
        episodes: PathBuf,
        /// Judge URL or verdict fixture.
        #[arg(long)]
        judge: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pass rate with distractor tools added to the execution context.
    Noise {
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        #[arg(long)]
        judge: Option<String>,
        #[command(flatten)]
        opts: RolloutOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    opts: RolloutOpts,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    verdicts: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrajCmd {
    /// Print the canonical record for a raw transcript (`-` reads stdin).
    Parse {
        #[arg(long)]
        phase: Phase,
        input: PathBuf,
        #[arg(long, default_value = "-")]
        query_id: String,
    },
    /// Fail unless the transcript is format-valid.
    Validate {
        #[arg(long)]
        phase: Phase,
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum EnvCmd {
    /// Record observed tool responses from episodes into a replay store.
    ReplayImport {
        #[arg(long)]
        episodes: PathBuf,
        #[command(flatten)]
        catalog: CatalogOpt,
        /// Existing store to extend.
        #[arg(long)]
        into: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Stats {
        path: PathBuf,
    },
}

// ----- helpers --------------------------------------------------------------

struct Ctx {
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn config(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config_path.as_deref())?)
    }
}

fn apply_catalog(c: &mut RunConfig, opt: &CatalogOpt) {
    if let Some(p) = &opt.catalog {
        c.catalog = p.clone();
    }
}

fn apply_rollout(c: &mut RunConfig, o: &RolloutOpts) {
    apply_catalog(c, &o.catalog);
    if let Some(p) = &o.queries {
        c.queries = p.clone();
    }
    if let Some(g) = o.group_size {
        c.rollout.group_size = g;
    }
    if let Some(k) = o.k {
        c.index.k = k;
    }
    if let Some(s) = o.seed {
        c.rollout.seed = s;
    }
    if let Some(g) = o.gate {
        c.rollout.gate = g;
    }
    if let Some(p) = &o.scripts {
        c.fixtures.scripts = Some(p.clone());
    }
    if let Some(p) = &o.replay {
        c.fixtures.replay = Some(p.clone());
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

#[derive(Serialize, Deserialize)]
struct VectorRow {
    api_id: u64,
    vector: Vec<f64>,
}

fn service_state(config: &RunConfig, vectors: Option<&Path>) -> Result<ServiceState> {
    let catalog = pipeline::load_catalog_arc(config)?;
    let embedder = pipeline::build_embedder(config);
    let index = match vectors {
        Some(path) => {
            let rows: Vec<VectorRow> = read_jsonl(path)?;
            let dims = rows.first().map_or(config.index.dims, |r| r.vector.len());
            VectorIndex::from_vectors(
                catalog,
                dims,
                rows.into_iter().map(|r| (r.api_id, r.vector)).collect(),
            )?
        }
        None => pipeline::build_index(catalog, &embedder)?,
    };
    Ok(ServiceState {
        index: Arc::new(index),
        embedder: Arc::new(embedder),
    })
}

fn serve(ctx: &Ctx, args: &ServeArgs) -> Result<()> {
    let mut config = ctx.config()?;
    apply_catalog(&mut config, &args.catalog);
    let state = service_state(&config, args.vectors.as_deref())?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .with_context(|| format!("bad bind address {}:{}", args.host, args.port))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(state, addr))?;
    Ok(())
}

fn emit_report(report: &MetricReport, out: Option<&Path>) -> Result<()> {
    print!("{}", report.render_table());
    if let Some(out) = out {
        write_json(out, report)?;
    }
    Ok(())
}

/// An episode plus its query's difficulty, as stored in training mixes.
#[derive(Clone, Serialize)]
struct DatasetEpisode {
    difficulty: Difficulty,
    #[serde(flatten)]
    episode: Episode,
}

// ----- commands -------------------------------------------------------------

fn dispatch(ctx: &Ctx, command: Command) -> Result<()> {
    match command {
        Command::Catalog(cmd) => match cmd {
            CatalogCmd::Validate { path } => {
                let catalog = load_catalog(&path)?;
                println!("{}: {} records ok", path.display(), catalog.len());
            }
            CatalogCmd::Stats { path } => print_json(&load_catalog(&path)?.stats())?,
            CatalogCmd::Synth { n, seed, out } => {
                let catalog = generate_catalog(n, seed);
                write_atomic(&out, |w| catalog.write_jsonl(w))?;
            }
        },
        Command::Index(cmd) => match cmd {
            IndexCmd::Build { catalog, out } => {
                let mut config = ctx.config()?;
                apply_catalog(&mut config, &catalog);
                let state = service_state(&config, None)?;
                let rows: Vec<VectorRow> = state
                    .index
                    .entries()
                    .map(|(api_id, v)| VectorRow {
                        api_id,
                        vector: v.to_vec(),
                    })
                    .collect();
                write_jsonl(&out, &rows)?;
            }
            IndexCmd::Query {
                text,
                catalog,
                k,
                domain,
                vectors,
            } => {
                let mut config = ctx.config()?;
                apply_catalog(&mut config, &catalog);
                let state = service_state(&config, vectors.as_deref())?;
                let request = RetrieveRequest {
                    query: text,
                    k: k.unwrap_or(config.index.k),
                    domain,
                };
                print_json(&service::answer(&state, &request)?.hits)?;
            }
            IndexCmd::Serve(args) => serve(ctx, &args)?,
        },
        Command::Serve(args) => serve(ctx, &args)?,
        Command::Rollout(RolloutCmd::Run { opts, out }) => {
            let mut config = ctx.config()?;
            apply_rollout(&mut config, &opts);
            config.validate()?;
            let world = World::build(&config)?;
            let queries = pipeline::load_queries(&config.queries)?;
            let groups = pipeline::rollout(&world, &queries, &config.rollout_config())?;
            write_jsonl(&out, &pipeline::flatten(&groups))?;
        }
        Command::Score(args) => {
            let mut config = ctx.config()?;
            apply_catalog(&mut config, &args.catalog);
            if let Some(w) = &args.weights {
                config.train.weights = RewardWeights::parse(w)?;
            }
            if let Some(c) = args.conv {
                config.train.conv = c;
            }
            config.validate()?;
            let catalog = pipeline::load_catalog_arc(&config)?;
            let episodes: Vec<Episode> = read_jsonl(&args.episodes)?;
            let judge = pipeline::build_judge(&config, args.judge.as_deref())?;
            let verdicts = pipeline::verdicts(judge.as_deref(), &episodes)?;
            let cfg = ScoreConfig {
                weights: config.train.weights,
                conv: config.train.conv,
            };
            write_jsonl(
                &args.out,
                &pipeline::score(&episodes, &verdicts, &cfg, &catalog)?,
            )?;
        }
        Command::Advantage(args) => {
            let mut config = ctx.config()?;
            if let Some(e) = args.eps {
                config.train.advantage_eps = e;
            }
            config.validate()?;
            let rewards: Vec<RewardRow> = read_jsonl(&args.rewards)?;
            let rows = pipeline::advantages(&rewards, config.train.advantage_eps)?;
            if let Some(g) = args.group_size {
                if let Some(bad) = rows.iter().find(|r| r.ret_group != g) {
                    bail!(
                        "query {} has {} rollouts, expected G = {g}",
                        bad.query_id,
                        bad.ret_group
                    );
                }
            }
            write_jsonl(&args.out, &rows)?;
        }
        Command::Objective(args) => {
            let mut config = ctx.config()?;
            apply_catalog(&mut config, &args.catalog);
            if let Some(c) = args.clip {
                config.train.clip_eps = c;
            }
            config.validate()?;
            let catalog = pipeline::load_catalog_arc(&config)?;
            let episodes: Vec<Episode> = read_jsonl(&args.episodes)?;
            let adv: Vec<AdvantageRow> = read_jsonl(&args.advantages)?;
            let book = match &args.ratios {
                Some(p) => Some(pipeline::ratio_book(read_jsonl(p)?)),
                None => None,
            };
            let rows = pipeline::objectives(
                &episodes,
                &adv,
                &catalog,
                config.train.clip_eps,
                book.as_ref(),
            )?;
            write_jsonl(&args.out, &rows)?;
        }
        Command::Curate(cmd) => curate(ctx, cmd)?,
        Command::Eval(cmd) => eval(ctx, cmd)?,
        Command::Pipeline(args) => {
            let mut config = ctx.config()?;
            apply_rollout(&mut config, &args.opts);
            if let Some(d) = args.out_dir {
                config.out_dir = d;
            }
            if let Some(v) = args.verdicts {
                config.fixtures.verdicts = Some(v);
            }
            let (output, paths) = pipeline::run_to_disk(&config)?;
            print!("{}", output.report.render_table());
            log::info!("artifacts in {}", config.out_dir.display());
            print_json(&paths)?;
        }
        Command::Traj(cmd) => match cmd {
            TrajCmd::Parse {
                phase,
                input,
                query_id,
            } => {
                let text = read_input(&input)?;
                let record = match phase {
                    Phase::Retrieval => TrajectoryRecord::new(query_id, &parse_retrieval(&text)),
                    Phase::Execution => TrajectoryRecord::new(query_id, &parse_execution(&text)),
                };
                println!("{}", serde_json::to_string(&record)?);
            }
            TrajCmd::Validate { phase, input } => {
                let text = read_input(&input)?;
                let verdict = match phase {
                    Phase::Retrieval => parse_retrieval(&text).check_format(),
                    Phase::Execution => parse_execution(&text).check_format(None),
                };
                for v in &verdict.violations {
                    eprintln!("{}", serde_json::to_string(v)?);
                }
                if !verdict.passed() {
                    bail!(
                        "{} violation(s); transcript is not format-valid",
                        verdict.violations.len()
                    );
                }
                println!("ok");
            }
        },
        Command::Env(cmd) => match cmd {
            EnvCmd::ReplayImport {
                episodes,
                catalog,
                into,
                out,
            } => {
                let mut config = ctx.config()?;
                apply_catalog(&mut config, &catalog);
                let catalog = pipeline::load_catalog_arc(&config)?;
                let mut store = match into {
                    Some(p) => ReplayStore::load(p)?,
                    None => ReplayStore::new(),
                };
                let episodes: Vec<Episode> = read_jsonl(&episodes)?;
                let mut added = 0usize;
                for e in &episodes {
                    let Some(exec) = &e.execution else { continue };
                    for pair in exec.events.windows(2) {
                        let (
                            ExecutionEvent::ToolCall {
                                body: ToolCallBody::Parsed(call),
                            },
                            ExecutionEvent::Information { observation },
                        ) = (&pair[0], &pair[1])
                        else {
                            continue;
                        };
                        let Ok(obs) = serde_json::from_str::<Observation>(observation) else {
                            continue;
                        };
                        // Errors produced by the runtime itself are not tool behavior.
                        if [NOT_AVAILABLE, INVALID_CALL, TOOL_NOT_FOUND]
                            .contains(&obs.error.as_str())
                        {
                            continue;
                        }
                        if store.record_call(call, obs, &catalog).is_some() {
                            added += 1;
                        }
                    }
                }
                write_atomic(&out, |w| store.write_to(w))?;
                println!(
                    "{added} observations recorded, {} entries total",
                    store.len()
                );
            }
            EnvCmd::Stats { path } => print_json(&ReplayStore::load(path)?.stats())?,
        },
    }
    Ok(())
}

fn curate(ctx: &Ctx, cmd: CurateCmd) -> Result<()> {
    match cmd {
        CurateCmd::Stratify {
            queries,
            k,
            catalog,
            out,
        } => {
            let mut config = ctx.config()?;
            apply_catalog(&mut config, &catalog);
            let queries = queries.unwrap_or_else(|| config.queries.clone());
            let k = k.unwrap_or(config.index.k);
            let catalog = pipeline::load_catalog_arc(&config)?;
            let search = pipeline::build_search(&config, catalog)?;
            let report = stratify_all(&pipeline::load_queries(&queries)?, &search, k);
            for (id, e) in &report.rejected {
                log::warn!("query {id} skipped: {e}");
            }
            write_jsonl(&out, &report.labeled)?;
        }
        CurateCmd::Sample {
            queries,
            hard,
            easy,
            seed,
            out,
        } => {
            let labeled = pipeline::load_queries(&queries)?;
            write_jsonl(&out, &sample_pool(&labeled, hard, easy, seed)?)?;
        }
        CurateCmd::Filter {
            episodes,
            out,
            rejected,
        } => {
            let all: Vec<Episode> = read_jsonl(&episodes)?;
            let kept = rejection_filter(&all);
            write_jsonl(&out, &kept)?;
            if let Some(path) = rejected {
                let kept_keys: std::collections::HashSet<(&str, usize)> = kept
                    .iter()
                    .map(|e| (e.query_id.as_str(), e.rollout_index))
                    .collect();
                let rest: Vec<&Episode> = all
                    .iter()
                    .filter(|e| !kept_keys.contains(&(e.query_id.as_str(), e.rollout_index)))
                    .collect();
                write_jsonl(&path, &rest)?;
            }
        }
        CurateCmd::Mix {
            positives,
            negatives,
            queries,
            total,
            pos,
            negative_weight,
            seed,
            out,
        } => {
            let difficulty: std::collections::HashMap<String, Difficulty> = match queries {
                Some(p) => pipeline::load_queries(&p)?
                    .into_iter()
                    .map(|q| (q.query_id, q.difficulty))
                    .collect(),
                None => Default::default(),
            };
            let wrap = |eps: Vec<Episode>| -> Vec<DatasetEpisode> {
                eps.into_iter()
                    .map(|episode| DatasetEpisode {
                        difficulty: difficulty
                            .get(&episode.query_id)
                            .copied()
                            .unwrap_or_default(),
                        episode,
                    })
                    .collect()
            };
            let p = wrap(read_jsonl(&positives)?);
            let n = wrap(read_jsonl(&negatives)?);
            let cfg = MixConfig {
                pos_fraction: pos,
                negative_weight,
            };
            write_jsonl(&out, &compose_mix(&p, &n, total, cfg, seed)?)?;
        }
    }
    Ok(())
}

fn eval(ctx: &Ctx, cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Retrieval { episodes, k, out } => {
            let config = ctx.config()?;
            let episodes: Vec<Episode> = read_jsonl(&episodes)?;
            let bench = BenchConfig {
                ndcg_ks: k,
                recall_k: config.index.k,
                ..BenchConfig::default()
            };
            emit_report(&pipeline::report(&episodes, None, &bench)?, out.as_deref())?;
        }
        EvalCmd::Exec {
            episodes,
            judge,
            k,
            out,
        } => {
            let config = ctx.config()?;
            let episodes: Vec<Episode> = read_jsonl(&episodes)?;
            let Some(judge) = pipeline::build_judge(&config, judge.as_deref())? else {
                bail!("eval exec needs --judge or a configured judge");
            };
            let verdicts = pipeline::verdicts(Some(judge.as_ref()), &episodes)?;
            let bench = BenchConfig {
                ndcg_ks: k,
                recall_k: config.index.k,
                ..BenchConfig::default()
            };
            emit_report(
                &pipeline::report(&episodes, Some(&verdicts), &bench)?,
                out.as_deref(),
            )?;
        }
        EvalCmd::Noise {
            levels,
            judge,
            opts,
            out,
        } => {
            let mut config = ctx.config()?;
            apply_rollout(&mut config, &opts);
            config.validate()?;
            let world = World::build(&config)?;
            let judge = match judge {
                Some(spec) => pipeline::build_judge(&config, Some(&spec))?,
                None => world.judge,
            };
            let Some(judge) = judge else {
                bail!("eval noise needs --judge or a configured judge");
            };
            let queries: Vec<AnnotatedQuery> = pipeline::load_queries(&config.queries)?;
            let levels = levels.unwrap_or_else(|| NOISE_LEVELS.to_vec());
            let policy = &world.policy;
            let (rows, _) = noise_sweep(
                &|q: &AnnotatedQuery| policy.for_query(&q.query_id),
                &queries,
                &world.catalog,
                &world.search,
                &world.env,
                judge.as_ref(),
                &config.rollout_config(),
                &levels,
            )?;
            println!("{:>6} {:>8} {:>9}", "level", "queries", "pass_rate");
            for r in &rows {
                println!("{:>6} {:>8} {:>9.4}", r.level, r.queries, r.pass_rate);
            }
            if let Some(out) = out {
                write_jsonl::<NoiseRow>(&out, &rows)?;
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let default_level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .init();
    let ctx = Ctx {
        config_path: cli.config.clone(),
    };
    if let Err(err) = dispatch(&ctx, cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(toolforge::exit_code(err.as_ref()));
    }
}
