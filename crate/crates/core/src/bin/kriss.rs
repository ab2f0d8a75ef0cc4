use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kriss::encoder::model::DEFAULT_SEED;
use kriss::encoder::BiEncoder;
use kriss::error::{Error, Result};
use kriss::evaluation::{self, parse_ks, parse_metrics};
use kriss::mention_gen::{MentionExample, DEFAULT_WINDOW};
use kriss::ontology::{build_surface_index, EntityCatalog};
use kriss::pipeline::{self, EvalSection, LinkSection, PipelineConfig, Stage};
use kriss::prototype_index::{self, Linker, DEFAULT_PROTOTYPES, DEFAULT_TOP_K};
use kriss::reranker::RerankConfig;
use kriss::synthetic::{self, SyntheticConfig, SyntheticWorld};
use kriss::trainer::TrainConfig;
use kriss::jsonl;

#[derive(Parser)]
#[command(name = "kriss", version, about = "Self-supervised entity linking toolkit")]
struct Cli {
    /// Seed for every random choice; the default is fixed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entity catalog checks.
    #[command(subcommand)]
    Ontology(OntologyCommand),
    /// Extract self-supervised mentions from a corpus.
    Generate(GenerateArgs),
    /// Train the mention and reference encoders.
    Train(TrainArgs),
    /// Encode mentions into a vector file.
    Encode(EncodeArgs),
    /// Build or extend a prototype index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Link query mentions against an index.
    Link(LinkArgs),
    /// Train a cross-encoder re-ranker.
    RerankTrain(RerankTrainArgs),
    /// Re-rank linking results.
    Rerank(RerankArgs),
    /// Score linking results.
    Eval(EvalArgs),
    /// Run pipeline stages from a config file.
    Pipeline(PipelineArgs),
    /// Build the bundled synthetic world and run the full pipeline on it.
    Demo(DemoArgs),
}

#[derive(Subcommand)]
enum OntologyCommand {
    Validate {
        #[arg(long)]
        entities: PathBuf,
    },
    AmbiguityReport {
        #[arg(long)]
        entities: PathBuf,
        /// Use preferred names only.
        #[arg(long)]
        no_aliases: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    entities: PathBuf,
    /// JSONL of {doc_id, text} or a directory of .txt files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long)]
    no_aliases: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    entities: PathBuf,
    #[arg(long)]
    mentions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key = value training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mentions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Subcommand)]
enum IndexCommand {
    Build {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        mentions: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PROTOTYPES)]
        k_proto: usize,
        #[arg(long, value_enum, default_value = "off")]
        fusion: Switch,
        /// Score by cosine similarity instead of raw inner product.
        #[arg(long)]
        cosine: bool,
    },
    AddGold {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Defaults to updating the index in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "off")]
    fusion: Switch,
    #[arg(long)]
    domain: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerankTrainArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    mentions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value = "off")]
    fusion: Switch,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    model: PathBuf,
    /// Index the results were linked against.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    #[arg(long)]
    domain: Option<PathBuf>,
    #[arg(long, default_value = "strict,lenient,asis,ambiguity,topk")]
    metrics: String,
    #[arg(long, default_value = "1,5,10,50,100")]
    topk: String,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset of generate,train,index,link,rerank,eval, or `all`.
    #[arg(long, default_value = "all")]
    stages: String,
}

#[derive(Args)]
struct DemoArgs {
    /// Working directory for every artifact.
    #[arg(long, default_value = "kriss-demo")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    documents: Option<usize>,
    #[arg(long)]
    mix_rate: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Ontology(OntologyCommand::Validate { entities }) => {
            let catalog = EntityCatalog::load(&entities)?;
            let index = build_surface_index(&catalog, true);
            println!(
                "{} entities, {} surfaces, {} ambiguous",
                catalog.len(),
                index.len(),
                index.ambiguity_report().len()
            );
        }
        Command::Ontology(OntologyCommand::AmbiguityReport {
            entities,
            no_aliases,
            out,
        }) => {
            let catalog = EntityCatalog::load(&entities)?;
            let mut text = String::from("surface\tcount\tentity_ids\n");
            for (surface, count, ids) in build_surface_index(&catalog, !no_aliases).ambiguity_report() {
                text.push_str(&format!("{surface}\t{count}\t{}\n", ids.join(",")));
            }
            write_text(out.as_deref(), &text)?;
        }
        Command::Generate(a) => {
            let r = pipeline::run_generate(&a.entities, &a.corpus, &a.out, a.window, !a.no_aliases)?;
            println!(
                "{} mentions of {} entities from {} documents",
                r.mentions, r.entities, r.documents
            );
        }
        Command::Train(a) => {
            let mut config = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if let Some(steps) = a.steps {
                config.steps = steps;
            }
            config.validate()?;
            pipeline::run_train(&a.entities, &a.mentions, &a.out, &config)?;
            println!("wrote {}", a.out.display());
        }
        Command::Encode(a) => {
            let model = BiEncoder::load(&a.checkpoint)?;
            let mentions: Vec<MentionExample> = jsonl::read(&a.mentions)?;
            let mut flat = Vec::with_capacity(mentions.len() * model.dim());
            for m in &mentions {
                flat.extend(model.encode_mention(m)?);
            }
            prototype_index::vectors::write(&a.out, model.dim(), &flat)?;
            jsonl::write(&a.out.with_extension("jsonl"), &mentions)?;
            println!("encoded {} mentions", mentions.len());
        }
        Command::Index(IndexCommand::Build {
            entities,
            mentions,
            checkpoint,
            out,
            k_proto,
            fusion,
            cosine,
        }) => {
            let link = LinkSection {
                k_proto,
                fusion: fusion.on(),
                cosine,
                seed,
                ..LinkSection::default()
            };
            let linker = pipeline::run_index(&entities, &mentions, &checkpoint, &out, None, &link)?;
            println!("indexed {} prototypes", linker.index.len());
        }
        Command::Index(IndexCommand::AddGold { index, gold, out }) => {
            let linker = Linker::load(&index)?;
            let gold: Vec<MentionExample> = jsonl::read(&gold)?;
            let before = linker.index.len();
            let updated = linker.add_gold(&gold)?;
            updated.save(out.as_deref().unwrap_or(&index))?;
            println!("{} prototypes ({} gold added)", updated.index.len(), updated.index.len() - before);
        }
        Command::Link(a) => {
            let results = pipeline::run_link(
                &a.index,
                &a.queries,
                a.domain.as_deref(),
                &a.out,
                a.top_k,
                a.fusion.on(),
            )?;
            println!("linked {} queries", results.len());
        }
        Command::RerankTrain(a) => {
            let mut config = RerankConfig {
                seed,
                ..RerankConfig::default()
            };
            if let Some(k) = a.k {
                config.k = k;
            }
            if let Some(s) = a.steps {
                config.steps = s;
            }
            pipeline::run_rerank_train(&a.mentions, &a.index, &a.out, &config, a.fusion.on())?;
            println!("wrote {}", a.out.display());
        }
        Command::Rerank(a) => {
            let out = pipeline::run_rerank(&a.model, &a.index, &a.results, &a.out)?;
            println!("re-ranked {} results", out.len());
        }
        Command::Eval(a) => {
            let eval = EvalSection {
                metrics: parse_metrics(&a.metrics)?
                    .into_iter()
                    .map(|m| format!("{m:?}").to_lowercase())
                    .collect(),
                ks: parse_ks(&a.topk)?,
                seed,
                reranked: false,
            };
            let report = pipeline::run_eval(&a.results, &a.gold, a.domain.as_deref(), &a.entities, &eval)?;
            let text = match a.format {
                Format::Json => report.to_json(),
                Format::Tsv => report.to_tsv(),
            };
            write_text(a.out.as_deref(), &text)?;
        }
        Command::Pipeline(a) => {
            let config = PipelineConfig::load(&a.config)?;
            let stages = Stage::parse_list(&a.stages)?;
            let outcome = pipeline::run_pipeline(&config, &stages)?;
            print!("{}", pipeline::summary(&outcome));
            if let Some(r) = outcome.report {
                print!("{}", r.to_tsv());
            }
        }
        Command::Demo(a) => demo(&a, cli.seed)?,
    }
    Ok(())
}

fn demo(a: &DemoArgs, seed: Option<u64>) -> Result<()> {
    let mut world_config = SyntheticConfig::default();
    if let Some(d) = a.documents {
        world_config.documents = d;
    }
    if let Some(s) = seed {
        world_config.seed = s;
    }
    if let Some(m) = a.mix_rate {
        world_config.mix_rate = m;
    }
    let world = SyntheticWorld::generate(&world_config)?;
    let data = a.out.join("data");
    world.write(&data)?;

    let mut train = TrainConfig::default();
    if let Some(s) = seed {
        train.seed = s;
    }
    if let Some(steps) = a.steps {
        train.steps = steps;
    }
    let config = synthetic::pipeline_config(&a.out, &data, train);
    let config_path = a.out.join("pipeline.toml");
    std::fs::write(&config_path, config.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let stages: BTreeSet<Stage> = Stage::ALL.into_iter().collect();
    let outcome = pipeline::run_pipeline(&config, &stages)?;
    print!("{}", pipeline::summary(&outcome));
    if let Some(r) = &outcome.report {
        println!("held-out queries:");
        print!("{}", r.to_tsv());
    }

    let linker = Linker::load(&config.paths.index)?;
    let shared = pipeline::link_all(&linker, &world.shared_alias, 50, false, None)?;
    let as_is = evaluation::as_is_baseline(&world.shared_alias, &world.catalog, train.seed)?;
    println!(
        "shared-alias queries: linker strict {:.3}, mention-as-is strict {:.3} / lenient {:.3}",
        evaluation::strict_accuracy(&shared, &world.shared_alias)?,
        as_is.strict_accuracy,
        as_is.lenient_accuracy
    );
    let hard = pipeline::link_all(&linker, &world.hard, 50, false, None)?;
    let lazy = linker.add_gold(&world.hard_prototypes)?;
    let hard_lazy = pipeline::link_all(&lazy, &world.hard, 50, false, None)?;
    println!(
        "rare-alias queries: strict {:.3}, with one gold prototype per entity {:.3}",
        evaluation::strict_accuracy(&hard, &world.hard)?,
        evaluation::strict_accuracy(&hard_lazy, &world.hard)?
    );
    println!("config written to {}", config_path.display());
    Ok(())
}
