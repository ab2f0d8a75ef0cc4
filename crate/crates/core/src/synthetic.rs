//! A small separable world for demos and end-to-end tests: pseudo-word
//! entities, each with its own topic vocabulary, a templated corpus and
//! several gold mention sets.
//!
//! Gold sets:
//! - `heldout`: names and abbreviations in topical context, from documents
//!   outside the corpus.
//! - `shared_alias`: pairs of entities share one alias; every mention uses
//!   it, so only context can tell the two apart.
//! - `hard`: each entity has a rare alias that never occurs in the corpus,
//!   shown here in the context of the next entity.
//! - `hard_prototypes`: one more rare-alias mention per entity, for use as
//!   gold prototypes.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::mention_gen::{extract_context, Document, MentionExample, MentionSource, DEFAULT_WINDOW};
use crate::ontology::{Entity, EntityCatalog};
use crate::pipeline::{EvalSection, LinkSection, Paths, PipelineConfig};
use crate::reranker::RerankConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub documents: usize,
    /// Entity pairs sharing an alias.
    pub shared_pairs: usize,
    pub topic_words: usize,
    pub heldout_per_entity: usize,
    pub shared_per_entity: usize,
    pub hard_per_entity: usize,
    /// Chance that a document gets an extra sentence about a random entity.
    pub mix_rate: f64,
    pub window: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 50,
            documents: 5000,
            shared_pairs: 5,
            topic_words: 10,
            heldout_per_entity: 10,
            shared_per_entity: 10,
            hard_per_entity: 4,
            mix_rate: 0.0,
            window: DEFAULT_WINDOW,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub catalog: EntityCatalog,
    pub corpus: Vec<Document>,
    pub heldout: Vec<MentionExample>,
    pub shared_alias: Vec<MentionExample>,
    pub hard: Vec<MentionExample>,
    pub hard_prototypes: Vec<MentionExample>,
}

pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const DOMAIN_FILE: &str = "domain_entities.txt";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const SHARED_FILE: &str = "shared_alias.jsonl";
pub const HARD_FILE: &str = "hard.jsonl";
pub const HARD_PROTOTYPES_FILE: &str = "hard_prototypes.jsonl";

const FILLER: &[&str] = &[
    "the", "a", "of", "in", "with", "and", "was", "were", "is", "for", "on", "by", "after",
    "during", "between", "from", "this", "these", "study", "results", "reported", "observed",
    "patients", "samples", "analysis", "effect", "level", "levels", "cases", "group", "data",
    "shown", "found", "also", "both", "including", "within", "using", "measured", "evidence",
];

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kl",
    "pr", "st", "tr", "zh", "ch", "sk",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "x", "m"];

struct WordMaker {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordMaker {
    fn syllable(&mut self) -> String {
        let r = &mut self.rng;
        format!(
            "{}{}{}",
            ONSETS.choose(r).unwrap(),
            VOWELS.choose(r).unwrap(),
            CODAS.choose(r).unwrap()
        )
    }

    fn word(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables).map(|_| self.syllable()).collect();
            if !FILLER.contains(&w.as_str()) && self.used.insert(w.to_lowercase()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Plan {
    entity: Entity,
    topics: Vec<String>,
    abbreviation: String,
    shared: Option<String>,
    rare: String,
}

impl SyntheticWorld {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        if config.entities < 2 * config.shared_pairs || config.entities == 0 {
            return Err(Error::Config(
                "need at least two entities per shared-alias pair".into(),
            ));
        }
        if config.topic_words < 2 {
            return Err(Error::Config("topic_words must be at least 2".into()));
        }
        let mut words = WordMaker {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            used: BTreeSet::new(),
        };
        let shared: Vec<String> = (0..config.shared_pairs)
            .map(|_| words.word(2).to_uppercase())
            .collect();
        let mut plans = Vec::with_capacity(config.entities);
        for i in 0..config.entities {
            let name = if i % 4 == 3 {
                format!("{} {}", capitalize(&words.word(2)), words.word(2))
            } else {
                capitalize(&words.word(3))
            };
            let abbreviation = format!("{}-{}", words.word(1).to_uppercase(), i % 9 + 1);
            let rare = format!("{}-{}", words.word(2), ["b", "k", "q"][i % 3]);
            let topics: Vec<String> = (0..config.topic_words).map(|_| words.word(2)).collect();
            let pair = (i < 2 * config.shared_pairs).then(|| shared[i / 2].clone());
            let mut aliases = vec![abbreviation.clone()];
            aliases.extend(pair.clone());
            aliases.push(rare.clone());
            let group = i / 5;
            let entity = Entity::new(format!("SYN{:04}", i + 1), name)
                .with_aliases(aliases)
                .with_stn(format!("B{}.{}.{}", group % 3 + 1, group + 1, i % 5 + 1))
                .with_semtype(format!("Group{}", group + 1))
                .with_description(format!("associated with {} {} {}", topics[0], topics[1], topics[2]));
            plans.push(Plan {
                entity,
                topics,
                abbreviation,
                shared: pair,
                rare,
            });
        }
        let catalog = EntityCatalog::from_entities(plans.iter().map(|p| p.entity.clone()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD0C5);

        let mut corpus = Vec::with_capacity(config.documents);
        for d in 0..config.documents {
            let first = d % plans.len();
            let mut sentences = Vec::new();
            for _ in 0..rng.gen_range(1..=2) {
                let p = &plans[first];
                let surface = corpus_surface(p, &mut rng);
                sentences.push(topical_sentence(p, &surface, &mut rng).0);
            }
            if rng.gen_bool(config.mix_rate) {
                let p = &plans[rng.gen_range(0..plans.len())];
                let surface = corpus_surface(p, &mut rng);
                sentences.push(topical_sentence(p, &surface, &mut rng).0);
            }
            corpus.push(Document::new(format!("doc{d:05}"), sentences.join(" ")));
        }

        let mut heldout = Vec::new();
        let mut shared_alias = Vec::new();
        let mut hard = Vec::new();
        let mut hard_prototypes = Vec::new();
        for (i, p) in plans.iter().enumerate() {
            let decoy = &plans[(i + 1) % plans.len()];
            for k in 0..config.heldout_per_entity {
                let surface = if rng.gen_bool(0.8) {
                    p.entity.name.clone()
                } else {
                    p.abbreviation.clone()
                };
                let doc_id = format!("heldout-{}-{k:02}", p.entity.id);
                heldout.push(gold_example(p, p, &surface, doc_id, config.window, &mut rng)?);
            }
            if let Some(alias) = &p.shared {
                for k in 0..config.shared_per_entity {
                    let doc_id = format!("shared-{}-{k:02}", p.entity.id);
                    shared_alias.push(gold_example(p, p, alias, doc_id, config.window, &mut rng)?);
                }
            }
            for k in 0..config.hard_per_entity {
                let doc_id = format!("hard-{}-{k:02}", p.entity.id);
                hard.push(gold_example(p, decoy, &p.rare, doc_id, config.window, &mut rng)?);
            }
            let doc_id = format!("hardproto-{}", p.entity.id);
            hard_prototypes.push(gold_example(p, decoy, &p.rare, doc_id, config.window, &mut rng)?);
        }
        Ok(SyntheticWorld {
            catalog,
            corpus,
            heldout,
            shared_alias,
            hard,
            hard_prototypes,
        })
    }

    /// Writes the catalog, corpus, domain list and gold sets into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.catalog.save(&dir.join(ENTITIES_FILE))?;
        jsonl::write(&dir.join(CORPUS_FILE), &self.corpus)?;
        let domain: String = self.catalog.ids().map(|id| format!("{id}\n")).collect();
        let domain_path = dir.join(DOMAIN_FILE);
        std::fs::write(&domain_path, domain).map_err(|e| Error::io(&domain_path, e))?;
        jsonl::write(&dir.join(HELDOUT_FILE), &self.heldout)?;
        jsonl::write(&dir.join(SHARED_FILE), &self.shared_alias)?;
        jsonl::write(&dir.join(HARD_FILE), &self.hard)?;
        jsonl::write(&dir.join(HARD_PROTOTYPES_FILE), &self.hard_prototypes)
    }
}

/// Pipeline over a world written to `data`, with every artifact under
/// `out`, scored on the held-out set. Link, rerank and eval seeds follow
/// `train.seed`.
pub fn pipeline_config(out: &Path, data: &Path, train: TrainConfig) -> PipelineConfig {
    let mut paths = Paths::under(out);
    paths.entities = data.join(ENTITIES_FILE);
    paths.corpus = data.join(CORPUS_FILE);
    paths.gold = Some(data.join(HELDOUT_FILE));
    paths.domain = Some(data.join(DOMAIN_FILE));
    PipelineConfig {
        paths,
        train,
        generate: Default::default(),
        link: LinkSection {
            seed: train.seed,
            ..LinkSection::default()
        },
        rerank: RerankConfig {
            seed: train.seed,
            ..RerankConfig::default()
        },
        eval: EvalSection {
            ks: vec![1, 5, 10, 50],
            seed: train.seed,
            ..EvalSection::default()
        },
    }
}

fn corpus_surface(p: &Plan, rng: &mut ChaCha8Rng) -> String {
    let r: f64 = rng.gen();
    match &p.shared {
        Some(s) if r < 0.05 => s.clone(),
        _ if r < 0.8 => p.entity.name.clone(),
        _ => p.abbreviation.clone(),
    }
}

fn filler(rng: &mut ChaCha8Rng) -> &'static str {
    FILLER.choose(rng).unwrap()
}

/// Returns the sentence and the mention's char offset within it.
fn topical_sentence(p: &Plan, surface: &str, rng: &mut ChaCha8Rng) -> (String, usize) {
    let mut left = Vec::new();
    for _ in 0..rng.gen_range(2..=4) {
        if rng.gen_bool(0.4) {
            left.push(filler(rng).to_string());
        }
        left.push(p.topics.choose(rng).unwrap().clone());
    }
    let mut right = Vec::new();
    for _ in 0..rng.gen_range(2..=4) {
        right.push(p.topics.choose(rng).unwrap().clone());
        if rng.gen_bool(0.4) {
            right.push(filler(rng).to_string());
        }
    }
    assemble(left, surface, right)
}

fn assemble(left: Vec<String>, surface: &str, right: Vec<String>) -> (String, usize) {
    let prefix = left.join(" ");
    let start = prefix.chars().count() + 1;
    (format!("{prefix} {surface} {} .", right.join(" ")), start)
}

/// `topic` supplies the context words; for the hard sets it is another
/// entity, so the context points the wrong way.
fn gold_example(
    p: &Plan,
    topic: &Plan,
    surface: &str,
    doc_id: String,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MentionExample> {
    let (text, start) = topical_sentence(topic, surface, rng);
    let end = start + surface.chars().count();
    let doc = Document::new(doc_id, text);
    let (ctx_l, ctx_r) = extract_context(&doc, start, end, window)?;
    Ok(MentionExample {
        doc_id: doc.doc_id,
        entity_id: p.entity.id.clone(),
        mention: surface.to_string(),
        start_char: start,
        end_char: end,
        ctx_l,
        ctx_r,
        source: MentionSource::Gold,
    })
}
