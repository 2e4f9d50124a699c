//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use toolforge::pipeline::{self, World};
use toolforge::{run, run_to_disk, Artifacts, RunConfig};
use toolforge_core::curation::{compose_mix, rejection_filter, stratify, MixConfig};
use toolforge_core::environment::{
    invoke, ErrorKind, HybridEnvironment, ReplayStore, SimProfile, TemplatedSimulator,
    MISSING_PARAMS,
};
use toolforge_core::eval::{
    judge_all, ndcg_at_k, noise_sweep, pass_rate, EvalError, JudgeRequest, NoiseRow,
};
use toolforge_core::grammar::{parse_execution, parse_retrieval, render_events, Tag};
use toolforge_core::retrieval::{
    normalize, Embedder, LocalSearch, RetrievalError, SearchOutcome, ToolSearch, TrigramEmbedder,
    VectorIndex, TRIGRAM_DIMS,
};
use toolforge_core::rl::{
    build_token_mask, clipped_term, decoupled_advantages, execution_reward, filter_group,
    group_advantages, retrieval_reward, score_episode, step_schedule, surrogate_gradient,
    surrogate_objective, EpisodeTerms, GroupRewards, RewardWeights, ScoreConfig, Task,
};
use toolforge_core::runtime::{
    run_episode, run_group, GenerateRequest, Generation, PolicyError, Script, ScriptedPolicy,
    RETRIEVAL_STOPS,
};
use toolforge_core::synthetic::{execution_events, generate_catalog, query_for, retrieval_events};
use toolforge_core::{
    AnnotatedQuery, Catalog, Difficulty, Episode, FixtureJudge, GateMode, Judge, Observation,
    PolicyOracle, RolloutConfig, ToolCall, ToolEnvironment, Verdict,
};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Check {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:?}, limit {limit:?}");
    Ok(())
}

// ----- fixtures -------------------------------------------------------------

struct Sandbox {
    catalog: Arc<Catalog>,
    search: LocalSearch<f64, TrigramEmbedder>,
    env: HybridEnvironment,
}

fn sandbox(n: usize, seed: u64) -> Sandbox {
    let catalog = Arc::new(generate_catalog(n, seed));
    let embedder = TrigramEmbedder::new(TRIGRAM_DIMS);
    let index = VectorIndex::build(catalog.clone(), &embedder).expect("index");
    let simulator = TemplatedSimulator::new(SimProfile::new(seed, 0.0)).expect("profile");
    Sandbox {
        env: HybridEnvironment::new(ReplayStore::new(), catalog.clone(), simulator),
        search: LocalSearch::new(index, embedder),
        catalog,
    }
}

impl Sandbox {
    fn doc(&self, id: u64) -> String {
        self.catalog.get(id).expect("id").document_text()
    }

    fn call(&self, id: u64) -> String {
        let r = self.catalog.get(id).expect("id");
        let input: Map<String, Value> = r
            .input_schema
            .iter()
            .map(|p| (p.name.clone(), json!("x")))
            .collect();
        json!({"tool_name": r.tool_name, "api_name": r.api_name, "tool_input": input}).to_string()
    }
}

fn config(seed: u64) -> RolloutConfig {
    RolloutConfig {
        base_seed: seed,
        ..RolloutConfig::default()
    }
}

/// Scripts with a mix of good and bad retrieval behavior: missing searches,
/// broken tags, decoy selections.
fn varied_script(s: &Sandbox, rng: &mut ChaCha8Rng, gold: u64) -> Script {
    let n = s.catalog.len() as u64;
    let mut retrieval = Vec::new();
    for _ in 0..rng.random_range(0..=3) {
        let q = if rng.random_bool(0.6) {
            s.doc(gold)
        } else {
            format!("tool {}", rng.random_range(0..1000))
        };
        if rng.random_bool(0.1) {
            retrieval.push(format!("<search>{q}"));
        } else {
            retrieval.push(format!("<search>{q}</search>"));
        }
    }
    let pick = match rng.random_range(0..3) {
        0 => vec![gold],
        1 => vec![gold, rng.random_range(0..n)],
        _ => vec![rng.random_range(0..n)],
    };
    retrieval.push(format!(
        "<final_tools>{}</final_tools>",
        serde_json::to_string(&pick).unwrap()
    ));
    let mut execution: Vec<String> = (0..rng.random_range(0..=2))
        .map(|_| {
            format!(
                "<reasoning>try</reasoning><tool_call>{}</tool_call>",
                s.call(gold)
            )
        })
        .collect();
    let answer = if rng.random_bool(0.5) { "ok" } else { "no" };
    execution.push(format!(
        "<reasoning>done</reasoning><answer>{answer}</answer>"
    ));
    Script {
        retrieval,
        execution,
    }
}

fn varied_episodes(s: &Sandbox, count: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let gold = rng.random_range(0..s.catalog.len() as u64);
            let policy = ScriptedPolicy::single(varied_script(s, &mut rng, gold));
            let q = AnnotatedQuery::new(format!("q{i}"), s.doc(gold), vec![gold]);
            run_episode(&policy, &q, &s.catalog, &s.search, &s.env, &config(seed), i)
                .expect("episode")
        })
        .collect()
}

/// Full scan: score every entry, sort by (score desc, id asc), take k.
fn brute_topk(index: &VectorIndex<f64>, query: &[f64], k: usize) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = (0..index.len())
        .map(|pos| {
            let v = index.vector(pos);
            let mut s = 0.0;
            for i in 0..v.len() {
                s += query[i] * v[i];
            }
            (s, index.ids()[pos])
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

fn embed_query(s: &Sandbox, text: &str) -> Vec<f64> {
    let mut v: Vec<f64> = Embedder::<f64>::embed(&s.search.embedder, text).expect("embed");
    normalize(&mut v);
    v
}

fn population_std(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn golden_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::layered(Some(&common::golden_config()), std::iter::empty())
        .expect("golden config");
    cfg.out_dir = out.to_path_buf();
    cfg
}

// ----- criteria -------------------------------------------------------------

fn reward_arithmetic() -> Check {
    let start = Instant::now();
    let w = RewardWeights::<f64>::default();
    let cases = [
        (
            retrieval_reward(1.0, 0.5, 1.0, &w).map_err(|e| e.to_string())?,
            0.6,
            "R_ret(1, 0.5, 1)",
        ),
        (
            execution_reward(1.0, 0.0, &w).map_err(|e| e.to_string())?,
            0.2,
            "R_exec(1, 0)",
        ),
        (
            execution_reward(0.0, 1.0, &w).map_err(|e| e.to_string())?,
            0.8,
            "R_exec(0, 1)",
        ),
    ];
    for (got, want, what) in cases {
        ensure!(
            (got - want).abs() <= 1e-12,
            "{what} = {got}, expected {want}"
        );
    }
    within(start, Duration::from_secs(1), "reward arithmetic")
}

fn advantage_normalization() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-4;
    let mut degenerate = 0;
    for g in 0..1000 {
        let rewards: Vec<f64> = if g % 10 == 0 {
            vec![rng.random::<f64>(); 5]
        } else {
            (0..5).map(|_| rng.random::<f64>()).collect()
        };
        let set = group_advantages(&rewards, eps, Task::Ret).map_err(|e| e.to_string())?;
        let sigma = population_std(&rewards);
        if rewards.iter().all(|r| *r == rewards[0]) {
            degenerate += 1;
            ensure!(
                set.advantages.iter().all(|a| *a == 0.0),
                "degenerate group {g} gave {:?}",
                set.advantages
            );
            continue;
        }
        let mean = set.advantages.iter().sum::<f64>() / 5.0;
        ensure!(mean.abs() < 1e-9, "group {g}: mean {mean}");
        let std = population_std(&set.advantages);
        ensure!(
            (std - sigma / (sigma + eps)).abs() < 1e-9,
            "group {g}: std {std} vs {}",
            sigma / (sigma + eps)
        );
        let m = rewards.iter().sum::<f64>() / 5.0;
        for (a, r) in set.advantages.iter().zip(&rewards) {
            ensure!(
                (a - (r - m) / (sigma + eps)).abs() < 1e-9,
                "group {g}: advantage {a} off closed form"
            );
        }
    }
    ensure!(
        degenerate == 100,
        "expected 100 degenerate groups, saw {degenerate}"
    );
    within(start, Duration::from_secs(1), "advantage normalization")
}

fn decoupling_isolation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for b in 0..100 {
        let size = rng.random_range(1..=8);
        let batch: Vec<GroupRewards<f64>> = (0..size)
            .map(|_| {
                let kept = rng.random_range(0..=5);
                GroupRewards {
                    ret: (0..5).map(|_| rng.random()).collect(),
                    exec: (0..kept).map(|_| rng.random()).collect(),
                }
            })
            .collect();
        let adv = |groups: &[GroupRewards<f64>]| -> Result<Vec<_>, String> {
            groups
                .iter()
                .map(|g| decoupled_advantages(g, 1e-4).map_err(|e| e.to_string()))
                .collect()
        };
        let base = adv(&batch)?;
        let exec_shuffled: Vec<_> = batch
            .iter()
            .map(|g| GroupRewards {
                ret: g.ret.clone(),
                exec: g.exec.iter().map(|_| rng.random_range(-3.0..3.0)).collect(),
            })
            .collect();
        let ret_shuffled: Vec<_> = batch
            .iter()
            .map(|g| GroupRewards {
                ret: g.ret.iter().map(|_| rng.random_range(-3.0..3.0)).collect(),
                exec: g.exec.clone(),
            })
            .collect();
        for (q, (x, y)) in base.iter().zip(adv(&exec_shuffled)?).enumerate() {
            ensure!(
                bits(&x.ret.advantages) == bits(&y.ret.advantages),
                "batch {b} query {q}: retrieval moved"
            );
        }
        for (q, (x, y)) in base.iter().zip(adv(&ret_shuffled)?).enumerate() {
            let e =
                |a: &Option<toolforge_core::AdvantageSet>| a.as_ref().map(|s| bits(&s.advantages));
            ensure!(
                e(&x.exec) == e(&y.exec),
                "batch {b} query {q}: execution moved"
            );
        }
    }
    Ok(())
}

fn masking() -> Check {
    let s = sandbox(300, 4);
    let episodes = varied_episodes(&s, 400, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for ep in &episodes {
        if checked == 200 {
            break;
        }
        let transcript = if checked % 2 == 1 {
            match ep
                .execution_sequence(&s.catalog)
                .map_err(|e| e.to_string())?
            {
                Some(t) => t,
                None => continue,
            }
        } else {
            ep.retrieval_sequence().map_err(|e| e.to_string())?
        };
        let mask = build_token_mask(&transcript, None).map_err(|e| e.to_string())?;
        ensure!(
            mask.active() > 0 && mask.active() < mask.len(),
            "mask has no masked or no active tokens"
        );
        let lr: Vec<f64> = (0..mask.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let perturbed: Vec<f64> = lr
            .iter()
            .zip(&mask.bits)
            .map(|(l, on)| if *on { *l } else { rng.random_range(-8.0..8.0) })
            .collect();
        let advantage = rng.random_range(-2.0..2.0);
        let j = |lr: &[f64]| {
            surrogate_objective(
                &[EpisodeTerms {
                    log_ratios: lr,
                    mask: &mask.bits,
                    advantage,
                }],
                0.2,
            )
            .map_err(|e| e.to_string())
        };
        ensure!(
            j(&lr)?.to_bits() == j(&perturbed)?.to_bits(),
            "objective moved for {}",
            ep.query_id
        );
        checked += 1;
    }
    ensure!(checked == 200, "only {checked} trajectories available");
    Ok(())
}

fn clipping() -> Check {
    let eps = 0.2;
    for step in 0..=60 {
        let rho = step as f64 * 0.05;
        for adv in [-2.0, -1.0, 1.0, 2.0] {
            let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
            let want = f64::min(rho * adv, clipped * adv);
            let got = clipped_term(rho, adv, eps);
            ensure!(got == want, "rho {rho} adv {adv}: {got} vs {want}");
        }
    }
    Ok(())
}

fn gradient_check() -> Check {
    // ρ_t(θ) = exp(θ·c_t), so dJ/dθ = Σ_t ∂J/∂log_ratio_t · c_t.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-6;
    let mut points = 0;
    for case in 0..60 {
        let n = rng.random_range(1..12);
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let advantage = rng.random_range(-2.0..2.0);
        let theta = rng.random_range(-0.6..0.6);
        let lr_at = |t: f64| c.iter().map(|ct| t * ct).collect::<Vec<f64>>();
        let lr = lr_at(theta);
        if lr
            .iter()
            .any(|l| (l.exp() - 0.8).abs() < 1e-3 || (l.exp() - 1.2).abs() < 1e-3)
        {
            continue;
        }
        let j = |t: f64| {
            let lr = lr_at(t);
            surrogate_objective(
                &[EpisodeTerms {
                    log_ratios: &lr,
                    mask: &mask,
                    advantage,
                }],
                0.2,
            )
            .unwrap()
        };
        let grad = surrogate_gradient(
            &[EpisodeTerms {
                log_ratios: &lr,
                mask: &mask,
                advantage,
            }],
            0.2,
        )
        .map_err(|e| e.to_string())?;
        let analytic: f64 = grad[0].iter().zip(&c).map(|(g, ct)| g * ct).sum();
        let numeric = (j(theta + h) - j(theta - h)) / (2.0 * h);
        ensure!(
            (analytic - numeric).abs() < 1e-6,
            "case {case}: analytic {analytic} numeric {numeric}"
        );
        points += 1;
    }
    ensure!(points >= 40, "only {points} points away from kinks");
    Ok(())
}

fn retrieval_exactness() -> Check {
    let start = Instant::now();
    let s = sandbox(1000, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..200 {
        let q = if i % 2 == 0 {
            let len = rng.random_range(0..40);
            (0..len)
                .map(|_| *b"abcdefghijklmnopqrstuvwxyz    ".choose(&mut rng).unwrap() as char)
                .collect()
        } else {
            let id = rng.random_range(0..1000u64);
            query_for(&[s.catalog.get(id).unwrap()], i)
        };
        let k = rng.random_range(1..=9);
        let hits: Vec<u64> = s
            .search
            .index
            .retrieve_topk(&q, k, &s.search.embedder)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|h| h.api_id)
            .collect();
        let want = brute_topk(&s.search.index, &embed_query(&s, &q), k);
        ensure!(hits == want, "query {q:?} k {k}: {hits:?} vs {want:?}");
    }
    within(start, Duration::from_secs(5), "retrieval exactness")
}

/// DCG/IDCG written term by term.
fn brute_ndcg(ranked: &[u64], gold: &[u64], k: usize) -> f64 {
    let gold: HashSet<u64> = gold.iter().copied().collect();
    if gold.is_empty() {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let mut dcg = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if seen.insert(*id) && gold.contains(id) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..gold.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    dcg / idcg
}

fn ndcg_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in 0..1000 {
        let ranked: Vec<u64> = (0..rng.random_range(0..12))
            .map(|_| rng.random_range(0..20))
            .collect();
        let gold: Vec<u64> = (0..rng.random_range(0..6))
            .map(|_| rng.random_range(0..20))
            .collect();
        let k = rng.random_range(1..10);
        let got: f64 = ndcg_at_k(&ranked, &gold, k).map_err(|e| e.to_string())?;
        let want = brute_ndcg(&ranked, &gold, k);
        ensure!((got - want).abs() <= 1e-12, "triple {t}: {got} vs {want}");
    }
    let one: f64 = ndcg_at_k(&[2, 7], &[7], 3).map_err(|e| e.to_string())?;
    ensure!(
        (one - 1.0 / 3f64.log2()).abs() <= 1e-12,
        "single gold at rank 2: {one}"
    );
    let two: f64 = ndcg_at_k(&[1, 9, 2], &[1, 2], 3).map_err(|e| e.to_string())?;
    // The denominator is quoted to five decimals, hence the looser bound.
    ensure!(
        (two - 1.5 / 1.63093).abs() <= 1e-5,
        "two gold at ranks 1 and 3: {two}"
    );
    ensure!(
        (two - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() <= 1e-12,
        "two gold exact form: {two}"
    );
    Ok(())
}

const TAGS: [Tag; 6] = [
    Tag::Search,
    Tag::Information,
    Tag::FinalTools,
    Tag::Reasoning,
    Tag::ToolCall,
    Tag::Answer,
];

fn tag_positions(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for tag in TAGS {
        for lit in [tag.open(), tag.close()] {
            out.extend(text.match_indices(lit).map(|(i, m)| (i, i + m.len())));
        }
    }
    out.sort_unstable();
    out
}

fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 24] = [
        "<search>",
        "</search>",
        "<information>",
        "</information>",
        "<final_tools>",
        "</final_tools>",
        "<reasoning>",
        "</reasoning>",
        "<tool_call>",
        "</tool_call>",
        "<answer>",
        "</answer>",
        "<",
        ">",
        "/",
        "[",
        "]",
        "{",
        "}",
        "\"",
        ",",
        ":",
        "7",
        " ",
    ];
    let n = rng.random_range(0..60);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                rng.random::<char>().to_string()
            } else {
                PIECES.choose(rng).unwrap().to_string()
            }
        })
        .collect()
}

fn grammar() -> Check {
    let catalog = generate_catalog(30, 9);
    for seed in 0..500u64 {
        let events = retrieval_events(catalog.records(), seed);
        let text = render_events(&events);
        let parsed = parse_retrieval(&text);
        ensure!(parsed.events == events, "retrieval {seed}: events differ");
        ensure!(
            parsed.serialize().ok().as_deref() == Some(text.as_str()),
            "retrieval {seed}: serialize differs"
        );
        ensure!(
            parsed.check_format().value == 1,
            "retrieval {seed}: not format-valid"
        );

        let events = execution_events(catalog.records(), seed);
        let text = render_events(&events);
        let parsed = parse_execution(&text);
        ensure!(parsed.events == events, "execution {seed}: events differ");
        ensure!(
            parsed.serialize().ok().as_deref() == Some(text.as_str()),
            "execution {seed}: serialize differs"
        );
        ensure!(
            parsed.check_format(Some(catalog.records())).value == 1,
            "execution {seed}: not format-valid"
        );
    }
    for seed in 0..100u64 {
        let text = render_events(&retrieval_events(catalog.records(), seed));
        for (a, b) in tag_positions(&text) {
            let cut = format!("{}{}", &text[..a], &text[b..]);
            ensure!(
                parse_retrieval(&cut).check_format().value == 0,
                "retrieval {seed}: deleting {} kept r_fmt",
                &text[a..b]
            );
        }
        let text = render_events(&execution_events(catalog.records(), seed));
        for (a, b) in tag_positions(&text) {
            let cut = format!("{}{}", &text[..a], &text[b..]);
            ensure!(
                parse_execution(&cut).check_format(None).value == 0,
                "execution {seed}: deleting {} kept r_fmt",
                &text[a..b]
            );
        }
    }
    let ids = parse_retrieval("<final_tools>[2,0,1]</final_tools>")
        .final_tools()
        .map(<[u64]>::to_vec);
    ensure!(
        ids == Some(vec![2, 0, 1]),
        "final_tools example parsed to {ids:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..10_000 {
        let text = fuzz_string(&mut rng);
        let ok = catch_unwind(|| {
            let r = parse_retrieval(&text);
            let e = parse_execution(&text);
            r.violations
                .iter()
                .chain(&e.violations)
                .all(|v| v.span.start <= v.span.end && v.span.end <= text.len())
        });
        ensure!(
            matches!(ok, Ok(true)),
            "fuzz input {i} {text:?} crashed or produced an out-of-range span"
        );
    }
    Ok(())
}

fn gate_soundness() -> Check {
    let s = sandbox(60, 5);
    let gold = 9u64;
    let q = s.doc(gold);
    let hits = s.search.search(&q, 5).map_err(|e| e.to_string())?.ids;
    let decoy = *hits
        .iter()
        .find(|id| **id != gold)
        .ok_or("no decoy in top 5")?;
    let query = AnnotatedQuery::new("q", "x", vec![gold]);
    let search_turn = format!("<search>{q}</search>");
    let good = Script {
        retrieval: vec![
            search_turn.clone(),
            format!("<final_tools>[{gold}]</final_tools>"),
        ],
        execution: vec!["<reasoning>r</reasoning><answer>ok</answer>".into()],
    };
    let bad = Script {
        retrieval: vec![search_turn, format!("<final_tools>[{decoy}]</final_tools>")],
        execution: vec![],
    };
    let cfg = config(7);
    let score = ScoreConfig::default();
    let advantages =
        |group: &toolforge_core::RolloutGroup| -> Result<toolforge_core::QueryAdvantages, String> {
            let rewards =
                |eps: &[&Episode]| -> Result<Vec<toolforge_core::RewardBreakdown>, String> {
                    eps.iter()
                        .map(|e| {
                            score_episode(e, Some(true), &score, Some(&s.catalog))
                                .map_err(|e| e.to_string())
                        })
                        .collect()
                };
            let all: Vec<&Episode> = group.episodes.iter().collect();
            let kept = filter_group(group, GateMode::Subset);
            decoupled_advantages(
                &GroupRewards {
                    ret: rewards(&all)?.iter().map(|r| r.total_ret).collect(),
                    exec: rewards(&kept)?
                        .iter()
                        .filter_map(|r| r.total_exec)
                        .collect(),
                },
                1e-4,
            )
            .map_err(|e| e.to_string())
        };

    // Rollout i uses variant (7 + i) mod 5.
    let mixed = ScriptedPolicy::new(vec![
        bad.clone(),
        bad.clone(),
        good.clone(),
        good,
        bad.clone(),
    ]);
    let group = run_group(&mixed, &query, &s.catalog, &s.search, &s.env, &cfg)
        .map_err(|e| e.to_string())?;
    let full_recall: Vec<usize> = group
        .episodes
        .iter()
        .filter(|e| e.gold.iter().all(|g| e.selected.contains(g)))
        .map(|e| e.rollout_index)
        .collect();
    let with_exec: Vec<usize> = group
        .episodes
        .iter()
        .filter(|e| e.execution.is_some())
        .map(|e| e.rollout_index)
        .collect();
    ensure!(
        full_recall.len() == 2,
        "expected 2 full-recall rollouts, got {full_recall:?}"
    );
    ensure!(
        with_exec == full_recall,
        "execution ran for {with_exec:?}, full recall {full_recall:?}"
    );
    let mixed_adv = advantages(&group)?;
    let exec_size = mixed_adv.exec.as_ref().map(|a| a.advantages.len());
    ensure!(
        exec_size == Some(2),
        "execution advantage group size {exec_size:?}"
    );

    let failing = ScriptedPolicy::single(bad);
    let group = run_group(&failing, &query, &s.catalog, &s.search, &s.env, &cfg)
        .map_err(|e| e.to_string())?;
    ensure!(
        group.episodes.iter().all(|e| e.execution.is_none()),
        "all-fail group ran execution"
    );
    let fail_adv = advantages(&group)?;
    let plan = step_schedule(std::slice::from_ref(&fail_adv));
    ensure!(
        plan.tasks() == vec![Task::Ret],
        "all-fail schedule {:?}",
        plan.tasks()
    );
    let plan = step_schedule(&[fail_adv, mixed_adv]);
    ensure!(
        plan.tasks() == vec![Task::Ret, Task::Exec],
        "mixed schedule {:?}",
        plan.tasks()
    );
    ensure!(
        plan.steps[1].groups == vec![1],
        "execution step groups {:?}",
        plan.steps[1].groups
    );
    Ok(())
}

struct CountingSearch<'a> {
    inner: &'a dyn ToolSearch,
    calls: AtomicUsize,
}

impl ToolSearch for CountingSearch<'_> {
    fn search(&self, query: &str, k: usize) -> Result<SearchOutcome, RetrievalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.search(query, k)
    }
}

struct CountingEnv<'a> {
    inner: &'a dyn ToolEnvironment,
    calls: AtomicUsize,
}

impl ToolEnvironment for CountingEnv<'_> {
    fn invoke(&self, call: &ToolCall) -> Observation {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.invoke(call)
    }
}

fn budget_safety() -> Check {
    let s = sandbox(80, 12);
    let mut max_search = 0;
    let mut max_calls = 0;
    for case in 0..200u64 {
        let gold = case % 80;
        let doc = s.doc(gold);
        let call = s.call(gold);
        let policy = move |req: &GenerateRequest<'_>| -> Result<Generation, PolicyError> {
            let mut rng = ChaCha8Rng::seed_from_u64(
                req.seed ^ (req.history.len() as u64).wrapping_mul(0x9e37),
            );
            let retrieval = req.stop == RETRIEVAL_STOPS;
            let reps = rng.random_range(1..6);
            let text = if retrieval {
                match rng.random_range(0..10) {
                    0 => format!("<final_tools>[{gold}]</final_tools>"),
                    1..=6 => format!("<search>{doc}</search>").repeat(reps),
                    7 => format!("<search>{doc}</search><final_tools>[{gold}]</final_tools>"),
                    8 => "<search>unterminated".to_string(),
                    _ => "no tags at all".to_string(),
                }
            } else {
                match rng.random_range(0..12) {
                    0 => "<reasoning>r</reasoning><answer>a</answer>".to_string(),
                    1 => "<tool_call>{broken".to_string(),
                    _ => format!("<reasoning>r</reasoning><tool_call>{call}</tool_call>")
                        .repeat(reps),
                }
            };
            Ok(Generation::text(text))
        };
        let query = AnnotatedQuery::new(format!("q{case}"), "x", vec![gold]);
        let cfg = config(case);
        for rollout in 0..3 {
            let search = CountingSearch {
                inner: &s.search,
                calls: AtomicUsize::new(0),
            };
            let env = CountingEnv {
                inner: &s.env,
                calls: AtomicUsize::new(0),
            };
            let ep = run_episode(&policy, &query, &s.catalog, &search, &env, &cfg, rollout)
                .map_err(|e| e.to_string())?;
            let searched = search.calls.load(Ordering::SeqCst);
            let dispatched = env.calls.load(Ordering::SeqCst);
            ensure!(
                searched <= 4,
                "case {case}: {searched} searches reached the server"
            );
            ensure!(
                dispatched <= 6,
                "case {case}: {dispatched} calls reached the environment"
            );
            ensure!(
                ep.counters.search_count == searched,
                "case {case}: search counter disagrees"
            );
            ensure!(
                ep.counters.tool_call_count == dispatched,
                "case {case}: call counter disagrees"
            );
            max_search = max_search.max(searched);
            max_calls = max_calls.max(dispatched);
        }
    }
    ensure!(
        max_search == 4 && max_calls == 6,
        "policies never reached the caps ({max_search}, {max_calls})"
    );
    Ok(())
}

fn golden_end_to_end() -> Check {
    let (a, b) = (
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    );
    let start = Instant::now();
    let (out, _) = run_to_disk(&golden_config(a.path())).map_err(|e| format!("{e:#}"))?;
    within(start, Duration::from_secs(2), "golden pipeline")?;
    run_to_disk(&golden_config(b.path())).map_err(|e| format!("{e:#}"))?;
    ensure!(
        out.report.macro_avg.recall == 1.0,
        "recall {}",
        out.report.macro_avg.recall
    );
    for r in &out.rewards {
        ensure!(
            r.rewards.total_ret == 1.0,
            "{} #{}: R_ret {}",
            r.query_id,
            r.rollout_index,
            r.rewards.total_ret
        );
        ensure!(
            r.rewards.total_exec == Some(1.0),
            "{} #{}: R_exec {:?}",
            r.query_id,
            r.rollout_index,
            r.rewards.total_exec
        );
    }
    for e in &out.episodes {
        let c = (e.counters.search_count, e.counters.tool_call_count);
        ensure!(
            c == (1, 1),
            "{} #{}: counters {c:?}",
            e.query_id,
            e.rollout_index
        );
    }
    let (pa, pb) = (Artifacts::in_dir(a.path()), Artifacts::in_dir(b.path()));
    for (x, y) in [
        (&pa.episodes, &pb.episodes),
        (&pa.rewards, &pb.rewards),
        (&pa.advantages, &pb.advantages),
        (&pa.objectives, &pb.objectives),
        (&pa.report, &pb.report),
    ] {
        let (bx, by) = (
            std::fs::read(x).map_err(|e| e.to_string())?,
            std::fs::read(y).map_err(|e| e.to_string())?,
        );
        ensure!(bx == by, "{} differs between runs", x.display());
    }
    Ok(())
}

fn environment_fidelity() -> Check {
    let golden = toolforge_core::load_catalog(common::golden().join("catalog.jsonl"))
        .map_err(|e| e.to_string())?;
    let weather = golden.get(0).ok_or("golden tool 0 missing")?.clone();
    let call = ToolCall::new(
        Some(&weather.category),
        &weather.tool_name,
        Some(&weather.api_name),
        Map::new(),
    );
    let obs = invoke(
        &call,
        &ReplayStore::new(),
        &SimProfile::new(0, 0.0),
        &golden,
    )
    .map_err(|e| e.to_string())?;
    let box1 = r#"{"error":"Missing input parameters.","response":""}"#;
    ensure!(
        obs.to_json() == box1,
        "missing parameter rendered as {}",
        obs.to_json()
    );
    ensure!(obs.error == MISSING_PARAMS, "error text {:?}", obs.error);

    let catalog = Arc::new(golden);
    let messages = [
        ErrorKind::MissingParams,
        ErrorKind::AuthError,
        ErrorKind::Timeout,
    ]
    .map(ErrorKind::message);
    for p in [0.0, 0.1, 0.25, 0.5, 1.0] {
        let env = HybridEnvironment::new(
            ReplayStore::new(),
            catalog.clone(),
            TemplatedSimulator::new(SimProfile::new(13, p)).map_err(|e| e.to_string())?,
        );
        let n = 10_000;
        let mut errors = 0usize;
        for i in 0..n {
            let mut input = Map::new();
            input.insert("city".into(), json!(format!("city-{i}")));
            let obs = env.invoke(&ToolCall::new(
                Some(&weather.category),
                &weather.tool_name,
                Some(&weather.api_name),
                input,
            ));
            if obs.is_error() {
                ensure!(
                    messages.contains(&obs.error.as_str()),
                    "unexpected error {:?}",
                    obs.error
                );
                errors += 1;
            }
        }
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        ensure!(
            (errors as f64 - mean).abs() <= 3.0 * sigma,
            "p={p}: {errors} errors vs {mean} ± {}",
            3.0 * sigma
        );
    }
    Ok(())
}

struct AnswerJudge;

impl Judge for AnswerJudge {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<Verdict, EvalError> {
        Ok(Verdict {
            solved: request.answer == "ok",
            vs_reference: None,
        })
    }
}

fn noise_protocol() -> Check {
    let levels = [0usize, 5, 10, 15];

    // Synthetic fixture with a mixed pass rate.
    let s = sandbox(400, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut scripts = Vec::new();
    let queries: Vec<AnnotatedQuery> = (0..30)
        .map(|i| {
            let gold = rng.random_range(0..400u64);
            scripts.push(varied_script(&s, &mut rng, gold));
            AnnotatedQuery::new(format!("n{i}"), s.doc(gold), vec![gold])
        })
        .collect();
    let cfg = config(21);
    let policy_for = |q: &AnnotatedQuery| -> Option<Box<dyn PolicyOracle>> {
        let i: usize = q.query_id[1..].parse().ok()?;
        Some(Box::new(ScriptedPolicy::single(scripts[i].clone())))
    };
    let baseline: Vec<Episode> = queries
        .iter()
        .map(|q| {
            run_episode(
                policy_for(q).unwrap().as_ref(),
                q,
                &s.catalog,
                &s.search,
                &s.env,
                &cfg,
                0,
            )
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let solved: Vec<bool> = judge_all(&AnswerJudge, &baseline)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|v| v.solved)
        .collect();
    let base_rate: f64 = pass_rate(&solved).map_err(|e| e.to_string())?;
    let (rows, episodes) = noise_sweep(
        &policy_for,
        &queries,
        &s.catalog,
        &s.search,
        &s.env,
        &AnswerJudge,
        &cfg,
        &levels,
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        rows.iter().map(|r| r.level).collect::<Vec<_>>() == levels,
        "rows {rows:?}"
    );
    ensure!(
        rows[0].pass_rate == base_rate,
        "N=0 pass rate {} vs baseline {base_rate}",
        rows[0].pass_rate
    );
    ensure!(
        episodes[0] == baseline,
        "N=0 episodes differ from the baseline run"
    );
    for (level, eps) in levels.iter().zip(&episodes) {
        for e in eps {
            let want = if e.gate_passed { *level } else { 0 };
            ensure!(
                e.injected.len() == want,
                "level {level}: {} injected",
                e.injected.len()
            );
            ensure!(
                e.injected.iter().all(|id| !e.gold.contains(id)),
                "level {level}: gold injected"
            );
        }
    }

    // The command on the golden fixtures.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("noise.jsonl");
    let config = common::golden_config();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_toolforge"))
        .args([
            "--config",
            config.to_str().unwrap(),
            "eval",
            "noise",
            "--levels",
            "0,5,10,15",
            "--out",
        ])
        .arg(&out)
        .env_remove("TOOLFORGE_ENDPOINTS__POLICY")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "eval noise failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let rows: Vec<NoiseRow> = toolforge::io::read_jsonl(&out).map_err(|e| e.to_string())?;
    ensure!(
        rows.iter().map(|r| r.level).collect::<Vec<_>>() == levels,
        "command rows {rows:?}"
    );
    let golden = run(&golden_config(dir.path())).map_err(|e| format!("{e:#}"))?;
    let first: Vec<Episode> = golden
        .episodes
        .into_iter()
        .filter(|e| e.rollout_index == 0)
        .collect();
    let judge =
        FixtureJudge::load(common::golden().join("verdicts.jsonl")).map_err(|e| e.to_string())?;
    let solved: Vec<bool> = judge_all(&judge, &first)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|v| v.solved)
        .collect();
    let base: f64 = pass_rate(&solved).map_err(|e| e.to_string())?;
    ensure!(
        rows[0].pass_rate == base,
        "golden N=0 {} vs baseline {base}",
        rows[0].pass_rate
    );
    Ok(())
}

fn curation() -> Check {
    // Stratification against a brute-force top-5 scan.
    let s = sandbox(300, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut labels = HashSet::new();
    for i in 0..200u64 {
        let gold: Vec<u64> = (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(0..300))
            .collect();
        let records: Vec<_> = gold.iter().map(|g| s.catalog.get(*g).unwrap()).collect();
        let question = if i % 3 == 0 {
            format!("random words {i}")
        } else {
            query_for(&records, i)
        };
        let q = AnnotatedQuery::new(format!("s{i}"), question.clone(), gold.clone());
        let top = brute_topk(&s.search.index, &embed_query(&s, &question), 5);
        let want = if gold.iter().all(|g| top.contains(g)) {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        let got = stratify(&q, &s.search, 5).map_err(|e| e.to_string())?;
        ensure!(got == want, "query {i}: {got:?} vs {want:?}");
        labels.insert(format!("{got:?}"));
    }
    ensure!(labels.len() == 2, "only saw {labels:?}");

    // The golden queries.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = golden_config(dir.path());
    let world = World::build(&cfg).map_err(|e| format!("{e:#}"))?;
    for q in pipeline::load_queries(&cfg.queries).map_err(|e| e.to_string())? {
        let top = world
            .search
            .search(&q.question, 5)
            .map_err(|e| e.to_string())?
            .ids;
        let want = if q.gold.iter().all(|g| top.contains(g)) {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        let got = stratify(&q, &world.search, 5).map_err(|e| e.to_string())?;
        ensure!(got == want, "golden {}: {got:?} vs {want:?}", q.query_id);
    }

    // Mix proportions.
    let pos: Vec<u32> = (0..500).collect();
    let neg: Vec<u32> = (1000..1500).collect();
    for total in (1..=300).step_by(7) {
        let mix = compose_mix(&pos, &neg, total, MixConfig::default(), total as u64)
            .map_err(|e| e.to_string())?;
        ensure!(mix.len() == total, "total {total}: got {}", mix.len());
        let n_pos = mix.iter().filter(|r| r.record < 1000).count();
        let target = 0.7 * total as f64;
        ensure!(
            (n_pos as f64 - target).abs() <= 1.0,
            "total {total}: {n_pos} positives, target {target}"
        );
        ensure!(
            mix.iter().map(|r| r.record).collect::<HashSet<_>>().len() == total,
            "total {total}: duplicates"
        );
    }

    // Rejection filter against set inclusion and a fresh parse.
    let episodes = varied_episodes(&s, 300, 16);
    let kept: Vec<String> = rejection_filter(&episodes)
        .iter()
        .map(|e| e.query_id.clone())
        .collect();
    let want: Vec<String> = episodes
        .iter()
        .filter(|e| {
            e.gold.iter().all(|g| e.cumulative_retrieved.contains(g))
                && parse_retrieval(&e.retrieval.raw_text).check_format().value == 1
        })
        .map(|e| e.query_id.clone())
        .collect();
    ensure!(
        kept == want,
        "filter kept {} episodes, oracle {}",
        kept.len(),
        want.len()
    );
    ensure!(
        !kept.is_empty() && kept.len() < episodes.len(),
        "filter was trivial ({} of {})",
        kept.len(),
        episodes.len()
    );
    Ok(())
}

fn main() {
    let criteria: [Criterion; 15] = [
        ("reward arithmetic", reward_arithmetic),
        ("advantage normalization", advantage_normalization),
        ("decoupling isolation", decoupling_isolation),
        ("masking", masking),
        ("clipping", clipping),
        ("objective gradient", gradient_check),
        ("retrieval exactness", retrieval_exactness),
        ("ndcg oracle", ndcg_oracle),
        ("grammar", grammar),
        ("gate soundness", gate_soundness),
        ("budget safety", budget_safety),
        ("golden end-to-end", golden_end_to_end),
        ("environment fidelity", environment_fidelity),
        ("noise protocol", noise_protocol),
        ("curation", curation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("PASS {:>2} {name} ({took:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({took:.2}s): {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
