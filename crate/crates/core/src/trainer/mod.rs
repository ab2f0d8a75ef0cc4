//! Contrastive training of the mention and reference encoders.

pub mod adam;
pub mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use loss::{
    info_nce_pair_loss, info_nce_reference_loss, joint_loss, joint_loss_with_grad,
    mention_pair_loss, mention_reference_loss, LossBreakdown, VectorGrads,
};

use crate::encoder::model::DEFAULT_SEED;
use crate::encoder::{
    apply_mask_augmentation, apply_replacement_augmentation, BiEncoder, Encoder, EncoderConfig,
    ForwardCache, Vocabulary,
};
use crate::error::{Error, Result};
use crate::mention_gen::{MentionExample, MentionStore};
use crate::ontology::{entity_reference_tokens, EntityCatalog};

/// Training hyperparameters plus the encoder shape, parsed from a flat
/// `key = value` file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Entities per minibatch; each contributes two mentions.
    pub n: usize,
    pub tau: f64,
    pub pi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub p_mask: f64,
    pub p_replace: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Training mentions kept per entity.
    pub mention_cap: usize,
    pub min_freq: usize,
    pub log_every: usize,
    pub descriptions: bool,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        TrainConfig {
            n: 16,
            tau: 1.0,
            pi: 1.0,
            alpha: 0.5,
            beta: 0.5,
            p_mask: 0.2,
            p_replace: 0.2,
            lr: 1e-3,
            steps: 2000,
            seed: DEFAULT_SEED,
            mention_cap: 3,
            min_freq: crate::encoder::vocab::MIN_FREQ,
            log_every: 50,
            descriptions: false,
            dim: enc.dim,
            layers: enc.layers,
            heads: enc.heads,
            max_len: enc.max_len,
        }
    }
}

impl TrainConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !(self.tau > 0.0 && self.pi > 0.0) {
            return bad("temperatures tau and pi must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        for (name, p) in [("p_mask", self.p_mask), ("p_replace", self.p_replace)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.mention_cap < 2 {
            return bad("mention_cap must allow at least two mentions per entity");
        }
        self.encoder_config().validate()
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = toml::Table::new();
        let mut config = TrainConfig::default();
        let mut seed = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "seed" {
                seed = Some(value.parse().map_err(|_| {
                    Error::Config(format!("line {}: `seed` needs an integer, got `{value}`", no + 1))
                })?);
                continue;
            }
            let parsed = match key {
                "descriptions" => toml::Value::Boolean(parse_flag(value).ok_or_else(|| {
                    Error::Config(format!("line {}: `{value}` is not a boolean", no + 1))
                })?),
                "tau" | "pi" | "alpha" | "beta" | "p_mask" | "p_replace" | "lr" => {
                    toml::Value::Float(value.parse().map_err(|_| {
                        Error::Config(format!("line {}: `{value}` is not a number", no + 1))
                    })?)
                }
                _ => toml::Value::Integer(value.parse().map_err(|_| {
                    Error::Config(format!("line {}: `{key}` needs an integer, got `{value}`", no + 1))
                })?),
            };
            table.insert(key.to_string(), parsed);
        }
        if !table.is_empty() {
            config = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        }
        if let Some(seed) = seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        for (k, v) in [
            ("tau", self.tau),
            ("pi", self.pi),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("p_mask", self.p_mask),
            ("p_replace", self.p_replace),
            ("lr", self.lr),
        ] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        for (k, v) in [
            ("steps", self.steps as u64),
            ("seed", self.seed),
            ("mention_cap", self.mention_cap as u64),
            ("min_freq", self.min_freq as u64),
            ("log_every", self.log_every as u64),
            ("dim", self.dim as u64),
            ("layers", self.layers as u64),
            ("heads", self.heads as u64),
            ("max_len", self.max_len as u64),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "descriptions = {}", self.descriptions);
        s
    }
}

pub(crate) fn parse_flag(value: &str) -> Option<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Capped training mentions for every entity with at least two of them,
/// plus the pre-tokenized reference text of every catalog entity.
pub struct TrainingSet<'a> {
    catalog: &'a EntityCatalog,
    eligible: Vec<(String, Vec<MentionExample>)>,
    references: BTreeMap<String, Vec<u32>>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(
        store: &MentionStore,
        catalog: &'a EntityCatalog,
        model: &BiEncoder,
        mention_cap: usize,
    ) -> Result<Self> {
        let capped = store.capped(mention_cap);
        let mut eligible = Vec::new();
        for (id, group) in capped.by_entity() {
            catalog.get(id)?;
            if group.len() >= 2 {
                eligible.push((id.to_string(), group.into_iter().cloned().collect()));
            }
        }
        let references = catalog
            .iter()
            .map(|e| (e.id.clone(), model.reference_sequence(e)))
            .collect();
        Ok(TrainingSet {
            catalog,
            eligible,
            references,
        })
    }

    pub fn eligible_entities(&self) -> impl Iterator<Item = &str> {
        self.eligible.iter().map(|(id, _)| id.as_str())
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.len()
    }
}

/// Token sequences for one step: `mentions[2k]`, `mentions[2k + 1]` and
/// `references[k]` all belong to `entity_ids[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMinibatch {
    pub entity_ids: Vec<String>,
    pub mentions: Vec<Vec<u32>>,
    pub references: Vec<Vec<u32>>,
}

/// Draws `n` distinct eligible entities uniformly, two of each entity's
/// mentions without replacement, then applies replacement and masking to
/// every mention independently.
pub fn sample_minibatch<R: Rng + ?Sized>(
    data: &TrainingSet<'_>,
    model: &BiEncoder,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<RawMinibatch> {
    if data.eligible.len() < config.n {
        return Err(Error::InsufficientEntities {
            needed: config.n,
            found: data.eligible.len(),
        });
    }
    let slots = index::sample(rng, data.eligible.len(), config.n);
    let mut batch = RawMinibatch {
        entity_ids: Vec::with_capacity(config.n),
        mentions: Vec::with_capacity(2 * config.n),
        references: Vec::with_capacity(config.n),
    };
    for slot in slots.iter() {
        let (id, examples) = &data.eligible[slot];
        let pair = index::sample(rng, examples.len(), 2);
        for m in pair.iter() {
            let replaced =
                apply_replacement_augmentation(&examples[m], data.catalog, config.p_replace, rng)?;
            let seq = model.mention_sequence(&replaced)?;
            batch.mentions.push(apply_mask_augmentation(seq, config.p_mask, rng));
        }
        batch.entity_ids.push(id.clone());
        batch.references.push(data.references[id].clone());
    }
    Ok(batch)
}

fn forward_all(encoder: &Encoder, seqs: &[Vec<u32>]) -> Result<(Vec<Vec<f64>>, Vec<ForwardCache>)> {
    let mut outs = Vec::with_capacity(seqs.len());
    let mut caches = Vec::with_capacity(seqs.len());
    for s in seqs {
        let (o, c) = encoder.forward(s)?;
        outs.push(o);
        caches.push(c);
    }
    Ok((outs, caches))
}

fn backward_all(encoder: &Encoder, caches: &[ForwardCache], grads: &[Vec<f64>]) -> Vec<f64> {
    let mut total = vec![0.0; encoder.params().len()];
    for (c, g) in caches.iter().zip(grads) {
        encoder.backward(c, g, &mut total);
    }
    total
}

/// Loss of a batch under the current parameters.
pub fn evaluate_batch(model: &BiEncoder, batch: &RawMinibatch, config: &TrainConfig) -> Result<LossBreakdown> {
    let c = batch
        .mentions
        .iter()
        .map(|s| model.mention.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let r = batch
        .references
        .iter()
        .map(|s| model.reference.encode(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(joint_loss(&c, &r, config.tau, config.pi, config.alpha, config.beta))
}

/// Gradient of the joint loss with respect to both encoders' parameters.
pub fn batch_gradients(
    model: &BiEncoder,
    batch: &RawMinibatch,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let (c, c_caches) = forward_all(&model.mention, &batch.mentions)?;
    let (r, r_caches) = forward_all(&model.reference, &batch.references)?;
    let (breakdown, grads) =
        joint_loss_with_grad(&c, &r, config.tau, config.pi, config.alpha, config.beta);
    let g_mention = backward_all(&model.mention, &c_caches, &grads.mentions);
    let g_reference = backward_all(&model.reference, &r_caches, &grads.references);
    Ok((breakdown, g_mention, g_reference))
}

fn check_finite(encoder: &Encoder, grad: &[f64], prefix: &str) -> Result<()> {
    for block in encoder.blocks() {
        if grad[block.offset..block.offset + block.len]
            .iter()
            .any(|g| !g.is_finite())
        {
            return Err(Error::NonFiniteGradient(format!("{prefix}.{}", block.name)));
        }
    }
    Ok(())
}

/// Optimizer state for both encoders.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub mention: Adam,
    pub reference: Adam,
}

impl TrainerState {
    pub fn new(model: &BiEncoder, lr: f64) -> Self {
        TrainerState {
            mention: Adam::new(model.mention.params().len(), lr),
            reference: Adam::new(model.reference.params().len(), lr),
        }
    }
}

/// One Adam update on the joint objective. The returned losses come from
/// the forward pass before the update. A non-finite gradient aborts the
/// step with parameters untouched.
pub fn train_step(
    model: &mut BiEncoder,
    state: &mut TrainerState,
    batch: &RawMinibatch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let (breakdown, g_mention, g_reference) = batch_gradients(model, batch, config)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }
    check_finite(&model.mention, &g_mention, "mention")?;
    check_finite(&model.reference, &g_reference, "reference")?;
    state.mention.step(model.mention.params_mut(), &g_mention);
    state.reference.step(model.reference.params_mut(), &g_reference);
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub fn loss_log_tsv(rows: &[LossLogRow]) -> String {
    let mut s = String::from("step\tL\tLprime\tjoint\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.9}\t{:.9}\t{:.9}",
            r.step, r.loss.mention_pair_loss, r.loss.reference_loss, r.loss.joint
        );
    }
    s
}

/// Builds the vocabulary: corpus tokens above the frequency cutoff plus
/// every token of every entity surface and reference text.
pub fn build_vocabulary(
    store: &MentionStore,
    catalog: &EntityCatalog,
    min_freq: usize,
    descriptions: bool,
) -> Vocabulary {
    let mut always: Vec<String> = Vec::new();
    for e in catalog.iter() {
        always.extend(entity_reference_tokens(e, descriptions));
        always.extend(e.surfaces().flat_map(|s| s.split_whitespace().map(str::to_string)));
    }
    Vocabulary::build(store.examples(), min_freq, always)
}

pub struct TrainOutcome {
    pub model: BiEncoder,
    pub log: Vec<LossLogRow>,
}

/// Initializes from `config.seed`, then runs `config.steps` updates.
/// Loss rows are logged at step 0, every `log_every` steps and at the end.
pub fn train_loop(
    store: &MentionStore,
    catalog: &EntityCatalog,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = build_vocabulary(store, catalog, config.min_freq, config.descriptions);
    let mut model = BiEncoder::new(config.encoder_config(), vocab, config.descriptions)?;
    let log = train_model(&mut model, store, catalog, config)?;
    Ok(TrainOutcome { model, log })
}

/// Continues training an existing model.
pub fn train_model(
    model: &mut BiEncoder,
    store: &MentionStore,
    catalog: &EntityCatalog,
    config: &TrainConfig,
) -> Result<Vec<LossLogRow>> {
    let data = TrainingSet::new(store, catalog, model, config.mention_cap)?;
    if config.steps > 0 && data.eligible_count() < config.n {
        return Err(Error::InsufficientEntities {
            needed: config.n,
            found: data.eligible_count(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainerState::new(model, config.lr);
    let mut log = Vec::new();
    for step in 0..config.steps {
        let batch = sample_minibatch(&data, model, config, &mut rng)?;
        let loss = train_step(model, &mut state, &batch, config)?;
        let last = step + 1 == config.steps;
        if step == 0 || last || (config.log_every > 0 && step % config.log_every == 0) {
            log::debug!("step {step}: joint {:.5}", loss.joint);
            log.push(LossLogRow { step, loss });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mention_gen::MentionSource;
    use crate::ontology::Entity;

    fn mention(entity: &str, doc: usize, ctx: &[&str], surface: &str) -> MentionExample {
        MentionExample {
            doc_id: format!("d{doc}"),
            entity_id: entity.into(),
            mention: surface.into(),
            start_char: 0,
            end_char: surface.len(),
            ctx_l: ctx.iter().map(|s| s.to_string()).collect(),
            ctx_r: ctx.iter().rev().map(|s| s.to_string()).collect(),
            source: MentionSource::SelfSupervised,
        }
    }

    fn toy(entities: usize, per_entity: usize) -> (EntityCatalog, MentionStore) {
        let catalog = EntityCatalog::from_entities((0..entities).map(|i| {
            Entity::new(format!("E{i:02}"), format!("name{i}"))
                .with_aliases([format!("alias{i}")])
                .with_stn(format!("A{i}"))
        }))
        .unwrap();
        let mut store = MentionStore::new();
        let mut doc = 0;
        for i in 0..entities {
            for _ in 0..per_entity {
                let w1 = format!("topic{i}a");
                let w2 = format!("topic{i}b");
                store.push(mention(&format!("E{i:02}"), doc, &[&w1, &w2], &format!("name{i}")));
                doc += 1;
            }
        }
        (catalog, store)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            n: 4,
            dim: 16,
            layers: 1,
            heads: 2,
            max_len: 16,
            steps: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_parse_and_defaults() {
        let c = TrainConfig::parse("# comment\nn = 8\ntau=0.5\nlr = 0.01\ndescriptions = on\n").unwrap();
        assert_eq!(c.n, 8);
        assert_eq!(c.tau, 0.5);
        assert_eq!(c.lr, 0.01);
        assert!(c.descriptions);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.p_mask, 0.2);
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("tau = 0").is_err());
        assert!(TrainConfig::parse("p_mask = 1.5").is_err());
        assert!(TrainConfig::parse("n = 2.5").is_err());
        assert!(TrainConfig::parse("just words").is_err());
    }

    #[test]
    fn exact_eligible_count_uses_every_entity() {
        let (catalog, store) = toy(4, 2);
        let config = small_config();
        let model = BiEncoder::new(config.encoder_config(), build_vocabulary(&store, &catalog, 1, false), false).unwrap();
        let data = TrainingSet::new(&store, &catalog, &model, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_minibatch(&data, &model, &config, &mut rng).unwrap();
        let mut ids = batch.entity_ids.clone();
        ids.sort();
        assert_eq!(ids, ["E00", "E01", "E02", "E03"]);
        assert_eq!(batch.mentions.len(), 8);
        assert_eq!(batch.references.len(), 4);
    }

    #[test]
    fn insufficient_entities() {
        let (catalog, mut store) = toy(3, 2);
        store.push(mention("E00", 99, &[], "name0"));
        let mut config = small_config();
        config.n = 4;
        let model = BiEncoder::new(config.encoder_config(), build_vocabulary(&store, &catalog, 1, false), false).unwrap();
        let data = TrainingSet::new(&store, &catalog, &model, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_minibatch(&data, &model, &config, &mut rng),
            Err(Error::InsufficientEntities { needed: 4, found: 3 })
        ));
    }

    #[test]
    fn single_mention_entities_excluded() {
        let (catalog, mut store) = toy(3, 2);
        let catalog = EntityCatalog::from_entities(
            catalog.iter().cloned().chain([Entity::new("E99", "lonely")]),
        )
        .unwrap();
        store.push(mention("E99", 500, &[], "lonely"));
        let config = small_config();
        let model = BiEncoder::new(config.encoder_config(), build_vocabulary(&store, &catalog, 1, false), false).unwrap();
        let data = TrainingSet::new(&store, &catalog, &model, 3).unwrap();
        assert_eq!(data.eligible_count(), 3);
        assert!(data.eligible_entities().all(|id| id != "E99"));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (catalog, store) = toy(6, 3);
        let mut config = small_config();
        config.lr = 0.0;
        let mut model = BiEncoder::new(config.encoder_config(), build_vocabulary(&store, &catalog, 1, false), false).unwrap();
        let before = model.clone();
        let data = TrainingSet::new(&store, &catalog, &model, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = TrainerState::new(&model, 0.0);
        for _ in 0..3 {
            let batch = sample_minibatch(&data, &model, &config, &mut rng).unwrap();
            train_step(&mut model, &mut state, &batch, &config).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn repeated_batch_loss_decreases() {
        let (catalog, store) = toy(4, 2);
        let mut config = small_config();
        config.p_mask = 0.0;
        config.p_replace = 0.0;
        config.lr = 1e-3;
        let mut model = BiEncoder::new(config.encoder_config(), build_vocabulary(&store, &catalog, 1, false), false).unwrap();
        let data = TrainingSet::new(&store, &catalog, &model, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_minibatch(&data, &model, &config, &mut rng).unwrap();
        let mut state = TrainerState::new(&model, config.lr);
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(train_step(&mut model, &mut state, &batch, &config).unwrap().joint);
        }
        for w in losses[..10].windows(2) {
            assert!(w[1] < w[0], "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(losses[199] < 0.5 * losses[0], "{} -> {}", losses[0], losses[199]);
    }

    #[test]
    fn loop_is_reproducible() {
        let (catalog, store) = toy(6, 3);
        let mut config = small_config();
        config.steps = 20;
        config.log_every = 5;
        let a = train_loop(&store, &catalog, &config).unwrap();
        let b = train_loop(&store, &catalog, &config).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(loss_log_tsv(&a.log).lines().count(), 1 + 5);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (catalog, store) = toy(6, 3);
        let config = small_config();
        let out = train_loop(&store, &catalog, &config).unwrap();
        let fresh = BiEncoder::new(
            config.encoder_config(),
            build_vocabulary(&store, &catalog, config.min_freq, false),
            false,
        )
        .unwrap();
        assert_eq!(out.model, fresh);
        assert!(out.log.is_empty());
    }
}
