//! Seeded generators for desk-scale fixtures: tool catalogs shaped like the
//! ToolBench repository and annotated queries over them.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{Catalog, ParamSpec, ToolRecord};
use crate::environment::Observation;
use crate::grammar::{ExecutionEvent, InformationBlock, RetrievalEvent, ToolCall, ToolCallBody};
use crate::retrieval::InfoRecord;

/// Number of APIs in the full ToolBench tool repository.
pub const TOOLBENCH_API_COUNT: usize = 16_464;

const CATEGORIES: &[&str] = &[
    "Advertising",
    "Artificial_Intelligence_Machine_Learning",
    "Business",
    "Business_Software",
    "Commerce",
    "Communication",
    "Cryptography",
    "Cybersecurity",
    "Data",
    "Database",
    "Devices",
    "eCommerce",
    "Education",
    "Email",
    "Energy",
    "Entertainment",
    "Events",
    "Finance",
    "Financial",
    "Food",
    "Gaming",
    "Health_and_Fitness",
    "Jobs",
    "Location",
    "Logistics",
    "Mapping",
    "Media",
    "Medical",
    "Monitoring",
    "Movies",
    "Music",
    "News_Media",
    "Other",
    "Payments",
    "Reward",
    "Science",
    "Search",
    "SMS",
    "Social",
    "Sports",
    "Storage",
    "Text_Analysis",
    "Tools",
    "Transportation",
    "Translation",
    "Travel",
    "Video_Images",
    "Visual_Recognition",
    "Weather",
];

const NOUNS: &[&str] = &[
    "weather",
    "forecast",
    "movie",
    "title",
    "cast",
    "crew",
    "stock",
    "quote",
    "currency",
    "exchange",
    "recipe",
    "nutrition",
    "flight",
    "hotel",
    "airport",
    "song",
    "lyrics",
    "artist",
    "album",
    "news",
    "headline",
    "article",
    "user",
    "profile",
    "email",
    "address",
    "phone",
    "location",
    "route",
    "distance",
    "image",
    "video",
    "caption",
    "translation",
    "language",
    "sentiment",
    "keyword",
    "domain",
    "ip",
    "certificate",
    "crypto",
    "wallet",
    "token",
    "game",
    "player",
    "team",
    "match",
    "score",
    "job",
    "salary",
    "company",
    "invoice",
    "payment",
    "product",
    "review",
    "order",
    "shipment",
    "package",
    "event",
    "ticket",
    "venue",
    "gender",
    "name",
    "age",
    "country",
    "city",
    "holiday",
    "calendar",
    "timezone",
    "planet",
    "star",
];

const VERBS: &[&str] = &[
    "get",
    "search",
    "list",
    "fetch",
    "lookup",
    "find",
    "predict",
    "convert",
    "analyze",
    "validate",
    "generate",
    "translate",
    "detect",
    "track",
    "compare",
    "summarize",
    "rank",
];

const ADJECTIVES: &[&str] = &[
    "basic",
    "detailed",
    "latest",
    "historical",
    "realtime",
    "daily",
    "global",
    "local",
    "popular",
    "trending",
    "random",
    "advanced",
    "premium",
    "free",
    "quick",
    "bulk",
];

const TYPES: &[&str] = &["string", "integer", "number", "boolean", "date"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [&'a str]) -> &'a str {
    words.choose(rng).copied().unwrap_or("tool")
}

/// Generates a valid catalog of exactly `n` records with ids `0..n`.
pub fn generate_catalog(n: usize, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let tool_index = i / 4;
        let category = CATEGORIES[tool_index % CATEGORIES.len()];
        let tool_name = format!(
            "{} {} {}",
            capitalize(pick(&mut rng, ADJECTIVES)),
            capitalize(pick(&mut rng, NOUNS)),
            tool_index
        );
        let verb = pick(&mut rng, VERBS);
        let object = pick(&mut rng, NOUNS);
        let api_name = format!("{} {} {}", capitalize(verb), capitalize(object), i % 4);
        let extra: Vec<&str> = (0..rng.random_range(3..8))
            .map(|_| pick(&mut rng, NOUNS))
            .collect();
        let description = format!(
            "{} {} {} data by {} for the given {}. Related: {}.",
            capitalize(verb),
            pick(&mut rng, ADJECTIVES),
            object,
            pick(&mut rng, NOUNS),
            pick(&mut rng, NOUNS),
            extra.join(", ")
        );
        let input_schema = (0..rng.random_range(0..4))
            .map(|p| {
                ParamSpec::new(
                    format!("{}_{p}", pick(&mut rng, NOUNS)),
                    pick(&mut rng, TYPES),
                    rng.random_bool(0.5),
                )
            })
            .collect();
        records.push(ToolRecord {
            api_id: i as u64,
            category: category.to_string(),
            tool_name,
            api_name,
            description,
            input_schema,
        });
    }
    Catalog::from_records(records).expect("generator emits unique identities")
}

/// A natural-language request that paraphrases the chosen records, for
/// retrieval-quality fixtures.
pub fn query_for(records: &[&ToolRecord], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<String> = records
        .iter()
        .map(|r| {
            let words: Vec<&str> = r.description.split_whitespace().take(4).collect();
            format!("{} using {} ({})", words.join(" "), r.tool_name, r.api_name)
        })
        .collect();
    let lead = ["Please", "Can you", "I need to", "Help me"]
        .choose(&mut rng)
        .copied()
        .unwrap_or("Please");
    format!("{lead} {}", parts.join(" and also "))
}

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| pick(rng, NOUNS))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A well-formed retrieval event sequence over `records`: one to four
/// searches, each answered by an information block, then a final selection
/// drawn from what was shown.
pub fn retrieval_events(records: &[ToolRecord], seed: u64) -> Vec<RetrievalEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut shown: Vec<u64> = Vec::new();
    for _ in 0..rng.random_range(1..=4) {
        events.push(RetrievalEvent::Search {
            query: sentence(&mut rng, 1, 6),
        });
        let hits: Vec<InfoRecord> = (0..rng.random_range(0..=5))
            .filter_map(|_| records.choose(&mut rng))
            .map(|r| InfoRecord {
                api_id: r.api_id,
                category: r.category.clone(),
                tool_name: r.tool_name.clone(),
                api_name: r.api_name.clone(),
                api_description: r.description.clone(),
            })
            .collect();
        shown.extend(hits.iter().map(|h| h.api_id));
        events.push(RetrievalEvent::Information {
            block: InformationBlock::Records(hits),
        });
    }
    shown.sort_unstable();
    shown.dedup();
    shown.shuffle(&mut rng);
    shown.truncate(rng.random_range(0..=shown.len()));
    events.push(RetrievalEvent::FinalTools { ids: shown });
    events
}

/// A well-formed execution event sequence calling tools from `records`.
pub fn execution_events(records: &[ToolRecord], seed: u64) -> Vec<ExecutionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let calls = if records.is_empty() {
        0
    } else {
        rng.random_range(0..=6)
    };
    for _ in 0..calls {
        let r = records.choose(&mut rng).expect("non-empty");
        events.push(ExecutionEvent::Reasoning {
            text: sentence(&mut rng, 1, 12),
        });
        let mut tool_input = serde_json::Map::new();
        for p in &r.input_schema {
            if p.required || rng.random_bool(0.5) {
                tool_input.insert(
                    p.name.clone(),
                    serde_json::Value::String(pick(&mut rng, NOUNS).to_string()),
                );
            }
        }
        let call = ToolCall::new(
            rng.random_bool(0.5).then_some(r.category.as_str()),
            &r.tool_name,
            rng.random_bool(0.8).then_some(r.api_name.as_str()),
            tool_input,
        );
        events.push(ExecutionEvent::ToolCall {
            body: ToolCallBody::Parsed(call),
        });
        let obs = if rng.random_bool(0.2) {
            Observation::failure("Missing input parameters.")
        } else {
            Observation::success(sentence(&mut rng, 0, 8))
        };
        events.push(ExecutionEvent::Information {
            observation: obs.to_json(),
        });
    }
    events.push(ExecutionEvent::Reasoning {
        text: sentence(&mut rng, 1, 12),
    });
    events.push(ExecutionEvent::Answer {
        text: sentence(&mut rng, 1, 10),
    });
    events
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
