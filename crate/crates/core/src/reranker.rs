//! Cross-encoder re-ranking of linking candidates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::checkpoint::{self, Header, ModelKind};
use crate::encoder::linalg::dot;
use crate::encoder::{build_cross_input, Encoder, EncoderConfig, ForwardCache, Vocabulary};
use crate::error::{Error, Result};
use crate::mention_gen::{MentionExample, MentionStore};
use crate::prototype_index::{Candidate, LinkResult, Linker, SearchOptions, VectorIndex};
use crate::trainer::Adam;

/// Cross encoder plus a linear scoring head over its `[CLS]` state.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankModel {
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

impl RerankModel {
    /// Fresh cross encoder with a zero head, so every score starts at 0.
    pub fn new(config: EncoderConfig, vocab: Vocabulary) -> Result<Self> {
        let encoder = Encoder::new(config, vocab.len())?;
        Ok(Self::from_encoder(encoder, vocab))
    }

    pub fn from_encoder(encoder: Encoder, vocab: Vocabulary) -> Self {
        let dim = encoder.dim();
        RerankModel {
            vocab,
            encoder,
            head_weight: vec![0.0; dim],
            head_bias: 0.0,
        }
    }

    pub fn max_len(&self) -> usize {
        self.encoder.config().max_len
    }

    pub fn cross_input(&self, query: &MentionExample, candidate: &MentionExample) -> Result<Vec<u32>> {
        build_cross_input(query, candidate, &self.vocab, self.max_len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: ModelKind::Reranker,
            config: *self.encoder.config(),
            vocab_size: self.vocab.len(),
            flags: 0,
        };
        checkpoint::write(
            path,
            &header,
            &[self.encoder.params(), &self.head_weight, &[self.head_bias]],
        )?;
        self.vocab.save(&checkpoint::vocab_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values) = checkpoint::read(path)?;
        if header.kind != ModelKind::Reranker {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "checkpoint holds an encoder pair, not a re-ranker".into(),
            });
        }
        let vocab = Vocabulary::load(&checkpoint::vocab_path(path))?;
        if vocab.len() != header.vocab_size {
            return Err(Error::DimMismatch {
                expected: header.vocab_size,
                found: vocab.len(),
            });
        }
        let dim = header.config.dim;
        let (mut encoders, mut tail) = checkpoint::split_encoders(&header, values, 1, dim + 1, path)?;
        let head_bias = tail.pop().expect("bias present");
        Ok(RerankModel {
            vocab,
            encoder: encoders.pop().expect("one encoder"),
            head_weight: tail,
            head_bias,
        })
    }

    /// Rounds every parameter to `f32`, matching what a save/load cycle yields.
    pub fn round_to_f32(&mut self) {
        for p in self
            .encoder
            .params_mut()
            .iter_mut()
            .chain(self.head_weight.iter_mut())
            .chain(std::iter::once(&mut self.head_bias))
        {
            *p = *p as f32 as f64;
        }
    }
}

/// Head output on the cross encoder's `[CLS]` state.
pub fn rerank_score(sequence: &[u32], model: &RerankModel) -> Result<f64> {
    let h = model.encoder.encode(sequence)?;
    Ok(dot(&model.head_weight, &h) + model.head_bias)
}

/// Reorders candidates by `score` (descending, stable for ties). Candidates
/// the scorer cannot pair (`Ok(None)`) keep their relative order after all
/// scored ones. The candidate set itself never changes.
pub fn rerank_with<F>(result: &LinkResult, mut score: F) -> Result<LinkResult>
where
    F: FnMut(&Candidate) -> Result<Option<f64>>,
{
    let mut scored = Vec::with_capacity(result.candidates.len());
    let mut unpaired = Vec::new();
    for c in &result.candidates {
        match score(c)? {
            Some(s) => scored.push((s, c.clone())),
            None => unpaired.push(c.clone()),
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let candidates = scored
        .into_iter()
        .map(|(s, c)| Candidate { score: s, ..c })
        .chain(unpaired)
        .collect();
    Ok(LinkResult {
        query: result.query.clone(),
        candidates,
    })
}

/// Re-scores each candidate by pairing the query with the candidate's best
/// prototype from `index`. Reference-only candidates have no text to pair
/// and stay at the bottom in their original order.
pub fn rerank(result: &LinkResult, model: &RerankModel, index: &VectorIndex) -> Result<LinkResult> {
    rerank_with(result, |c| match c.prototype {
        Some(row) if row < index.len() => {
            let seq = model.cross_input(&result.query, index.row(row))?;
            rerank_score(&seq, model).map(Some)
        }
        Some(row) => Err(Error::Format {
            path: "<index>".into(),
            message: format!("candidate prototype row {row} is outside the index"),
        }),
        None => Ok(None),
    })
}

/// A query paired with its retrieved candidates' prototype texts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RerankExample {
    pub query: MentionExample,
    pub candidates: Vec<(String, MentionExample)>,
    pub gold_position: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    /// Candidates per query.
    pub k: usize,
    pub steps: usize,
    /// Queries per update.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training queries drawn from the mention store.
    pub queries: usize,
    /// Start the cross encoder from the trained mention encoder.
    pub init_from_mention: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            k: 8,
            steps: 200,
            batch: 4,
            lr: 1e-3,
            seed: crate::encoder::model::DEFAULT_SEED,
            queries: 1000,
            init_from_mention: true,
        }
    }
}

/// Retrieves `k` candidates per query, ignoring prototypes from the query's
/// own document. Queries whose gold entity is not retrieved, and candidates
/// without a prototype, are dropped.
pub fn build_rerank_examples<'a>(
    linker: &Linker,
    queries: impl IntoIterator<Item = &'a MentionExample>,
    k: usize,
    fusion: bool,
) -> Result<Vec<RerankExample>> {
    let mut out = Vec::new();
    for q in queries {
        let opts = SearchOptions {
            top_k: k,
            fusion,
            domain: None,
            exclude_doc: Some(&q.doc_id),
        };
        let result = linker.link_with(q, &opts)?;
        let candidates: Vec<(String, MentionExample)> = result
            .candidates
            .iter()
            .filter_map(|c| c.prototype.map(|row| (c.entity_id.clone(), linker.index.row(row).clone())))
            .collect();
        let gold_position = candidates.iter().position(|(id, _)| *id == q.entity_id);
        if gold_position.is_some() {
            out.push(RerankExample {
                query: q.clone(),
                candidates,
                gold_position,
            });
        }
    }
    Ok(out)
}

/// Softmax cross-entropy of `scores` against `gold` and its gradient.
pub fn cross_entropy_with_grad(scores: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = scores
        .iter()
        .enumerate()
        .map(|(k, s)| (s - lse).exp() - if k == gold { 1.0 } else { 0.0 })
        .collect();
    (lse - scores[gold], grad)
}

/// Mean cross-entropy over a batch under the current parameters.
pub fn batch_loss(model: &RerankModel, batch: &[&RerankExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let scores = ex
            .candidates
            .iter()
            .map(|(_, c)| rerank_score(&model.cross_input(&ex.query, c)?, model))
            .collect::<Result<Vec<_>>>()?;
        total += cross_entropy_with_grad(&scores, ex.gold_position.expect("trainable")).0;
    }
    Ok(total / batch.len() as f64)
}

struct RerankState {
    encoder: Adam,
    head: Adam,
}

/// One Adam update; returns the batch loss before the update.
fn rerank_step(model: &mut RerankModel, state: &mut RerankState, batch: &[&RerankExample]) -> Result<f64> {
    let dim = model.encoder.dim();
    let mut g_enc = vec![0.0; model.encoder.params().len()];
    let mut g_head = vec![0.0; dim + 1];
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut outs: Vec<(Vec<f64>, ForwardCache)> = Vec::with_capacity(ex.candidates.len());
        for (_, c) in &ex.candidates {
            outs.push(model.encoder.forward(&model.cross_input(&ex.query, c)?)?);
        }
        let scores: Vec<f64> = outs
            .iter()
            .map(|(h, _)| dot(&model.head_weight, h) + model.head_bias)
            .collect();
        let (loss, d_scores) = cross_entropy_with_grad(&scores, ex.gold_position.expect("trainable"));
        total += loss;
        for ((h, cache), ds) in outs.iter().zip(&d_scores) {
            let ds = ds * inv;
            for d in 0..dim {
                g_head[d] += ds * h[d];
            }
            g_head[dim] += ds;
            let d_h: Vec<f64> = model.head_weight.iter().map(|w| ds * w).collect();
            model.encoder.backward(cache, &d_h, &mut g_enc);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("re-ranker loss {total}")));
    }
    if g_enc.iter().chain(&g_head).any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("reranker".into()));
    }
    state.encoder.step(model.encoder.params_mut(), &g_enc);
    let mut head: Vec<f64> = model.head_weight.clone();
    head.push(model.head_bias);
    state.head.step(&mut head, &g_head);
    model.head_bias = head.pop().expect("bias");
    model.head_weight = head;
    Ok(total * inv)
}

pub struct RerankOutcome {
    pub model: RerankModel,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    pub examples: usize,
}

/// Trains a re-ranker on self-supervised mentions paired with their top-K
/// retrieved candidates.
pub fn train_reranker(
    mentions: &MentionStore,
    linker: &Linker,
    config: &RerankConfig,
    fusion: bool,
) -> Result<RerankOutcome> {
    if config.k == 0 || config.batch == 0 {
        return Err(Error::Config("k and batch must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all = mentions.examples();
    let picks = rand::seq::index::sample(&mut rng, all.len(), config.queries.min(all.len())).into_vec();
    let mut picks = picks;
    picks.sort_unstable();
    let examples = build_rerank_examples(linker, picks.iter().map(|&i| &all[i]), config.k, fusion)?;
    if examples.is_empty() {
        return Err(Error::NoTrainableExamples(config.k));
    }
    let mut model = if config.init_from_mention {
        RerankModel::from_encoder(linker.model.mention.clone(), linker.model.vocab.clone())
    } else {
        let enc_config = EncoderConfig {
            seed: config.seed,
            ..*linker.model.config()
        };
        RerankModel::new(enc_config, linker.model.vocab.clone())?
    };
    let mut state = RerankState {
        encoder: Adam::new(model.encoder.params().len(), config.lr),
        head: Adam::new(model.encoder.dim() + 1, config.lr),
    };
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<&RerankExample> = (0..config.batch)
            .map(|_| &examples[rng.gen_range(0..examples.len())])
            .collect();
        losses.push(rerank_step(&mut model, &mut state, &batch)?);
    }
    Ok(RerankOutcome {
        model,
        losses,
        examples: examples.len(),
    })
}
