//! Stage runner shared by the CLI: generate, train, index, link, rerank,
//! eval. Each stage records its input and output hashes in a manifest.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::BiEncoder;
use crate::error::{Error, Result};
use crate::evaluation::{self, GoldDataset, Metric, MetricReport};
use crate::jsonl;
use crate::mention_gen::{self, MentionExample, MentionStore, DEFAULT_WINDOW};
use crate::ontology::{build_surface_index, EntityCatalog};
use crate::prototype_index::{
    build_index, sample_prototypes, LinkResult, Linker, SearchOptions, DEFAULT_PROTOTYPES,
    DEFAULT_TOP_K,
};
use crate::reranker::{self, RerankConfig, RerankModel};
use crate::trainer::{self, loss_log_tsv, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Train,
    Index,
    Link,
    Rerank,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::Train,
        Stage::Index,
        Stage::Link,
        Stage::Rerank,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Index => "index",
            Stage::Link => "link",
            Stage::Rerank => "rerank",
            Stage::Eval => "eval",
        }
    }

    pub fn parse_list(list: &str) -> Result<BTreeSet<Stage>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "all" => Ok(Stage::ALL.to_vec()),
                _ => Stage::ALL
                    .into_iter()
                    .find(|st| st.name() == s)
                    .map(|st| vec![st])
                    .ok_or_else(|| Error::Config(format!("unknown stage `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub entities: PathBuf,
    pub corpus: PathBuf,
    pub mentions: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub results: PathBuf,
    /// Gold queries to link and score.
    #[serde(default)]
    pub gold: Option<PathBuf>,
    /// Domain entity ids restricting linking candidates.
    #[serde(default)]
    pub domain: Option<PathBuf>,
    /// Gold mentions added to the index as prototypes.
    #[serde(default)]
    pub gold_prototypes: Option<PathBuf>,
    #[serde(default)]
    pub reranker: Option<PathBuf>,
    #[serde(default)]
    pub reranked: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub window: usize,
    pub aliases: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            window: DEFAULT_WINDOW,
            aliases: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    pub top_k: usize,
    pub fusion: bool,
    pub k_proto: usize,
    pub seed: u64,
    pub cosine: bool,
}

impl Default for LinkSection {
    fn default() -> Self {
        LinkSection {
            top_k: DEFAULT_TOP_K,
            fusion: false,
            k_proto: DEFAULT_PROTOTYPES,
            seed: crate::encoder::model::DEFAULT_SEED,
            cosine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: Vec<String>,
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Score the re-ranked results instead of the linker's.
    pub reranked: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metrics: ["strict", "lenient", "asis", "ambiguity", "topk"]
                .map(String::from)
                .to_vec(),
            ks: vec![1, 5, 10, 50, 100],
            seed: crate::encoder::model::DEFAULT_SEED,
            reranked: false,
        }
    }
}

impl EvalSection {
    pub fn metric_set(&self) -> Result<BTreeSet<Metric>> {
        self.metrics.iter().map(|m| m.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub link: LinkSection,
    #[serde(default)]
    pub rerank: RerankConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.train.validate()?;
        config.eval.metric_set()?;
        Ok(config)
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            config.paths.rebase(base);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

impl Paths {
    /// Rooted at `dir`, with every optional path filled in.
    pub fn under(dir: &Path) -> Self {
        Paths {
            entities: dir.join("entities.jsonl"),
            corpus: dir.join("corpus.jsonl"),
            mentions: dir.join("mentions.jsonl"),
            checkpoint: dir.join("model.krsm"),
            index: dir.join("index"),
            results: dir.join("results.jsonl"),
            gold: None,
            domain: None,
            gold_prototypes: None,
            reranker: Some(dir.join("reranker.krsm")),
            reranked: Some(dir.join("reranked.jsonl")),
            report: Some(dir.join("report.json")),
            manifest: Some(dir.join("manifest.tsv")),
        }
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.entities,
            &mut self.corpus,
            &mut self.mentions,
            &mut self.checkpoint,
            &mut self.index,
            &mut self.results,
        ] {
            fix(p);
        }
        for p in [
            &mut self.gold,
            &mut self.domain,
            &mut self.gold_prototypes,
            &mut self.reranker,
            &mut self.reranked,
            &mut self.report,
            &mut self.manifest,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

/// SHA-256 of a file, or of a directory's `(relative name, file hash)` list.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for (rel, full) in files {
            h.update(rel.as_bytes());
            h.update(b"\0");
            h.update(hash_path(&full)?.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub inputs: Vec<(String, String)>,
    pub output: String,
    pub wall_ms: u128,
}

impl StageRecord {
    pub fn manifest_line(&self) -> String {
        let inputs = self
            .inputs
            .iter()
            .map(|(name, h)| format!("{name}={h}"))
            .collect::<Vec<_>>()
            .join(",");
        format!("{}\t{}\t{}\t{}", self.stage.name(), inputs, self.output, self.wall_ms)
    }
}

pub fn require(stage: Stage, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency {
            stage: stage.name().into(),
            artifact: path.to_path_buf(),
        })
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Self-supervised mentions from exact matches of unambiguous surfaces.
pub fn run_generate(
    entities: &Path,
    corpus: &Path,
    out: &Path,
    window: usize,
    aliases: bool,
) -> Result<mention_gen::GenerationReport> {
    let catalog = EntityCatalog::load(entities)?;
    let surfaces = build_surface_index(&catalog, aliases).unambiguous_surfaces();
    let matcher = mention_gen::build_matcher(&surfaces)?;
    let docs = mention_gen::load_corpus(corpus)?;
    let mut store = MentionStore::new();
    let report = mention_gen::generate_corpus(&matcher, docs.into_iter().map(Ok), window, &mut store)?;
    create_parent(out)?;
    store.save(out)?;
    Ok(report)
}

/// Loss log lives next to the checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.tsv")
}

pub fn run_train(entities: &Path, mentions: &Path, checkpoint: &Path, config: &TrainConfig) -> Result<BiEncoder> {
    let catalog = EntityCatalog::load(entities)?;
    let store = MentionStore::load(mentions)?;
    let mut outcome = trainer::train_loop(&store, &catalog, config)?;
    outcome.model.round_to_f32();
    create_parent(checkpoint)?;
    outcome.model.save(checkpoint)?;
    let log = loss_log_path(checkpoint);
    std::fs::write(&log, loss_log_tsv(&outcome.log)).map_err(|e| Error::io(&log, e))?;
    Ok(outcome.model)
}

pub fn run_index(
    entities: &Path,
    mentions: &Path,
    checkpoint: &Path,
    index_dir: &Path,
    gold_prototypes: Option<&Path>,
    link: &LinkSection,
) -> Result<Linker> {
    let catalog = EntityCatalog::load(entities)?;
    let store = MentionStore::load(mentions)?;
    let model = BiEncoder::load(checkpoint)?;
    let protos = sample_prototypes(&store, &catalog, link.k_proto, link.seed);
    let index = build_index(&protos, &model, &catalog, link.fusion, link.cosine)?;
    let mut linker = Linker::new(model, index)?;
    if let Some(path) = gold_prototypes {
        let gold: Vec<MentionExample> = jsonl::read(path)?;
        linker = linker.add_gold(&gold)?;
    }
    linker.save(index_dir)?;
    Ok(linker)
}

pub fn link_all(
    linker: &Linker,
    queries: &[MentionExample],
    top_k: usize,
    fusion: bool,
    domain: Option<&BTreeSet<String>>,
) -> Result<Vec<LinkResult>> {
    let opts = SearchOptions {
        top_k,
        fusion,
        domain,
        exclude_doc: None,
    };
    queries.iter().map(|q| linker.link_with(q, &opts)).collect()
}

pub fn run_link(
    index_dir: &Path,
    queries: &Path,
    domain: Option<&Path>,
    out: &Path,
    top_k: usize,
    fusion: bool,
) -> Result<Vec<LinkResult>> {
    let linker = Linker::load(index_dir)?;
    let queries: Vec<MentionExample> = jsonl::read(queries)?;
    let domain = domain.map(evaluation::read_id_list).transpose()?;
    let results = link_all(&linker, &queries, top_k, fusion, domain.as_ref())?;
    create_parent(out)?;
    jsonl::write(out, &results)?;
    Ok(results)
}

pub fn run_rerank_train(
    mentions: &Path,
    index_dir: &Path,
    out: &Path,
    config: &RerankConfig,
    fusion: bool,
) -> Result<RerankModel> {
    let linker = Linker::load(index_dir)?;
    let store = MentionStore::load(mentions)?;
    let mut outcome = reranker::train_reranker(&store, &linker, config, fusion)?;
    outcome.model.round_to_f32();
    create_parent(out)?;
    outcome.model.save(out)?;
    Ok(outcome.model)
}

pub fn run_rerank(model: &Path, index_dir: &Path, results: &Path, out: &Path) -> Result<Vec<LinkResult>> {
    let model = RerankModel::load(model)?;
    let linker = Linker::load(index_dir)?;
    let results: Vec<LinkResult> = jsonl::read(results)?;
    let reranked = results
        .iter()
        .map(|r| reranker::rerank(r, &model, &linker.index))
        .collect::<Result<Vec<_>>>()?;
    create_parent(out)?;
    jsonl::write(out, &reranked)?;
    Ok(reranked)
}

pub fn run_eval(
    results: &Path,
    gold: &Path,
    domain: Option<&Path>,
    entities: &Path,
    eval: &EvalSection,
) -> Result<MetricReport> {
    let catalog = EntityCatalog::load(entities)?;
    let gold = GoldDataset::load(gold, domain)?;
    let predictions: Vec<LinkResult> = jsonl::read(results)?;
    evaluation::evaluate(&predictions, &gold, &catalog, &eval.metric_set()?, &eval.ks, eval.seed)
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub records: Vec<StageRecord>,
    pub report: Option<MetricReport>,
}

fn input_hashes(items: &[(&str, Option<&Path>)]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (name, path) in items {
        if let Some(p) = path {
            out.push((name.to_string(), hash_path(p)?));
        }
    }
    Ok(out)
}

fn need<'a>(stage: Stage, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| {
        Error::Config(format!("stage `{}` needs paths.{what}", stage.name()))
    })
}

/// Runs the requested stages in canonical order, writing one manifest line
/// per stage. An empty stage set does nothing.
pub fn run_pipeline(config: &PipelineConfig, stages: &BTreeSet<Stage>) -> Result<PipelineOutcome> {
    let p = &config.paths;
    let mut outcome = PipelineOutcome::default();
    if stages.is_empty() {
        return Ok(outcome);
    }
    if let Some(m) = &p.manifest {
        create_parent(m)?;
        std::fs::write(m, "stage\tinputs\toutput\twall_ms\n").map_err(|e| Error::io(m, e))?;
    }
    for &stage in stages {
        let started = Instant::now();
        let (inputs, output): (Vec<(&str, Option<&Path>)>, PathBuf) = match stage {
            Stage::Generate => {
                require(stage, &p.entities)?;
                require(stage, &p.corpus)?;
                let report = run_generate(
                    &p.entities,
                    &p.corpus,
                    &p.mentions,
                    config.generate.window,
                    config.generate.aliases,
                )?;
                log::info!(
                    "generate: {} mentions of {} entities from {} documents",
                    report.mentions,
                    report.entities,
                    report.documents
                );
                (
                    vec![("entities", Some(&p.entities)), ("corpus", Some(&p.corpus))],
                    p.mentions.clone(),
                )
            }
            Stage::Train => {
                require(stage, &p.entities)?;
                require(stage, &p.mentions)?;
                run_train(&p.entities, &p.mentions, &p.checkpoint, &config.train)?;
                (
                    vec![("entities", Some(&p.entities)), ("mentions", Some(&p.mentions))],
                    p.checkpoint.clone(),
                )
            }
            Stage::Index => {
                require(stage, &p.mentions)?;
                require(stage, &p.checkpoint)?;
                if let Some(g) = &p.gold_prototypes {
                    require(stage, g)?;
                }
                run_index(
                    &p.entities,
                    &p.mentions,
                    &p.checkpoint,
                    &p.index,
                    p.gold_prototypes.as_deref(),
                    &config.link,
                )?;
                (
                    vec![
                        ("entities", Some(&p.entities)),
                        ("mentions", Some(&p.mentions)),
                        ("checkpoint", Some(&p.checkpoint)),
                        ("gold_prototypes", p.gold_prototypes.as_deref()),
                    ],
                    p.index.clone(),
                )
            }
            Stage::Link => {
                let gold = need(stage, &p.gold, "gold")?;
                require(stage, &p.index)?;
                require(stage, gold)?;
                run_link(
                    &p.index,
                    gold,
                    p.domain.as_deref(),
                    &p.results,
                    config.link.top_k,
                    config.link.fusion,
                )?;
                (
                    vec![
                        ("index", Some(&p.index)),
                        ("gold", Some(gold)),
                        ("domain", p.domain.as_deref()),
                    ],
                    p.results.clone(),
                )
            }
            Stage::Rerank => {
                let model = need(stage, &p.reranker, "reranker")?;
                let out = need(stage, &p.reranked, "reranked")?;
                require(stage, &p.index)?;
                require(stage, &p.mentions)?;
                require(stage, &p.results)?;
                run_rerank_train(&p.mentions, &p.index, model, &config.rerank, config.link.fusion)?;
                run_rerank(model, &p.index, &p.results, out)?;
                (
                    vec![
                        ("mentions", Some(&p.mentions)),
                        ("index", Some(&p.index)),
                        ("results", Some(&p.results)),
                    ],
                    out.to_path_buf(),
                )
            }
            Stage::Eval => {
                let gold = need(stage, &p.gold, "gold")?;
                let results = if config.eval.reranked {
                    need(stage, &p.reranked, "reranked")?
                } else {
                    &p.results
                };
                require(stage, results)?;
                let report = run_eval(results, gold, p.domain.as_deref(), &p.entities, &config.eval)?;
                let out = match &p.report {
                    Some(r) => {
                        create_parent(r)?;
                        std::fs::write(r, report.to_json()).map_err(|e| Error::io(r, e))?;
                        r.clone()
                    }
                    None => results.to_path_buf(),
                };
                outcome.report = Some(report);
                (
                    vec![("results", Some(results)), ("gold", Some(gold))],
                    out,
                )
            }
        };
        let record = StageRecord {
            stage,
            inputs: input_hashes(&inputs)?,
            output: hash_path(&output)?,
            wall_ms: started.elapsed().as_millis(),
        };
        if let Some(m) = &p.manifest {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(m)
                .map_err(|e| Error::io(m, e))?;
            writeln!(f, "{}", record.manifest_line()).map_err(|e| Error::io(m, e))?;
        }
        outcome.records.push(record);
    }
    Ok(outcome)
}

/// Human-readable one-line summary per stage.
pub fn summary(outcome: &PipelineOutcome) -> String {
    let mut s = String::new();
    for r in &outcome.records {
        let _ = writeln!(s, "{:<9} {}  {} ms", r.stage.name(), &r.output[..12], r.wall_ms);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stage_set_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            paths: Paths::under(dir.path()),
            train: TrainConfig::default(),
            generate: GenerateSection::default(),
            link: LinkSection::default(),
            rerank: RerankConfig::default(),
            eval: EvalSection::default(),
        };
        let out = run_pipeline(&config, &BTreeSet::new()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn missing_dependency_names_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            paths: Paths::under(dir.path()),
            train: TrainConfig::default(),
            generate: GenerateSection::default(),
            link: LinkSection::default(),
            rerank: RerankConfig::default(),
            eval: EvalSection::default(),
        };
        let err = run_pipeline(&config, &BTreeSet::from([Stage::Train])).unwrap_err();
        match err {
            Error::MissingDependency { stage, artifact } => {
                assert_eq!(stage, "train");
                assert!(artifact.ends_with("entities.jsonl"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn config_parsing() {
        let text = r#"
[paths]
entities = "e.jsonl"
corpus = "c.jsonl"
mentions = "m.jsonl"
checkpoint = "model.krsm"
index = "idx"
results = "r.jsonl"

[train]
steps = 10
n = 4

[link]
fusion = true
"#;
        let c = PipelineConfig::parse(text).unwrap();
        assert_eq!(c.train.steps, 10);
        assert!(c.link.fusion);
        assert_eq!(c.link.k_proto, 16);
        assert_eq!(PipelineConfig::parse(&c.to_toml()).unwrap(), c);
        assert!(PipelineConfig::parse(&text.replace("fusion", "fuzion")).is_err());
        assert!(PipelineConfig::parse(&format!("{text}\n[extra]\nx = 1\n")).is_err());
    }

    #[test]
    fn stage_lists() {
        assert_eq!(Stage::parse_list("eval,generate").unwrap().into_iter().collect::<Vec<_>>(), [Stage::Generate, Stage::Eval]);
        assert_eq!(Stage::parse_list("all").unwrap().len(), 6);
        assert!(Stage::parse_list("bogus").is_err());
    }

    #[test]
    fn directory_hash_depends_on_names_and_content() {
        let a = tempfile::tempdir().unwrap();
        std::fs::write(a.path().join("x"), "1").unwrap();
        let h1 = hash_path(a.path()).unwrap();
        std::fs::write(a.path().join("x"), "2").unwrap();
        let h2 = hash_path(a.path()).unwrap();
        assert_ne!(h1, h2);
        std::fs::write(a.path().join("x"), "1").unwrap();
        assert_eq!(hash_path(a.path()).unwrap(), h1);
    }
}
