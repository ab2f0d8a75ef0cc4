//! Contextual mention encoder and entity-reference encoder.

pub mod checkpoint;
pub mod linalg;
pub mod model;
pub mod tokenize;
pub mod vocab;

use std::path::Path;

pub use model::{Encoder, EncoderConfig, ForwardCache, ParamBlock};
pub use tokenize::{
    apply_mask_augmentation, apply_replacement_augmentation, build_cross_input, tokenize_mention,
    tokenize_reference,
};
pub use vocab::Vocabulary;

use checkpoint::{Header, ModelKind, FLAG_REFERENCE_DESCRIPTIONS};

use crate::error::{Error, Result};
use crate::mention_gen::MentionExample;
use crate::ontology::Entity;

/// Seed offset separating the reference encoder's initialization from the
/// mention encoder's.
const REFERENCE_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Mention encoder and reference encoder over one shared vocabulary.
/// The two encoders share architecture but no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoder {
    pub vocab: Vocabulary,
    pub mention: Encoder,
    pub reference: Encoder,
    pub reference_descriptions: bool,
}

impl BiEncoder {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, reference_descriptions: bool) -> Result<Self> {
        let mention = Encoder::with_seed(config, vocab.len(), config.seed)?;
        let reference =
            Encoder::with_seed(config, vocab.len(), config.seed ^ REFERENCE_SEED_MIX)?;
        Ok(BiEncoder {
            vocab,
            mention,
            reference,
            reference_descriptions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.mention.config()
    }

    pub fn dim(&self) -> usize {
        self.mention.dim()
    }

    pub fn mention_sequence(&self, example: &MentionExample) -> Result<Vec<u32>> {
        tokenize_mention(example, &self.vocab, self.config().max_len)
    }

    pub fn reference_sequence(&self, entity: &Entity) -> Vec<u32> {
        tokenize_reference(
            entity,
            &self.vocab,
            self.config().max_len,
            self.reference_descriptions,
        )
    }

    pub fn encode_mention(&self, example: &MentionExample) -> Result<Vec<f64>> {
        self.mention.encode(&self.mention_sequence(example)?)
    }

    pub fn encode_reference(&self, entity: &Entity) -> Result<Vec<f64>> {
        self.reference.encode(&self.reference_sequence(entity))
    }

    /// Writes the checkpoint and its adjacent vocabulary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: ModelKind::BiEncoder,
            config: *self.config(),
            vocab_size: self.vocab.len(),
            flags: if self.reference_descriptions {
                FLAG_REFERENCE_DESCRIPTIONS
            } else {
                0
            },
        };
        checkpoint::write(path, &header, &[self.mention.params(), self.reference.params()])?;
        self.vocab.save(&checkpoint::vocab_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values) = checkpoint::read(path)?;
        if header.kind != ModelKind::BiEncoder {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "checkpoint holds a re-ranker, not an encoder pair".into(),
            });
        }
        let vocab = Vocabulary::load(&checkpoint::vocab_path(path))?;
        if vocab.len() != header.vocab_size {
            return Err(Error::DimMismatch {
                expected: header.vocab_size,
                found: vocab.len(),
            });
        }
        let (mut encoders, _) = checkpoint::split_encoders(&header, values, 2, 0, path)?;
        let reference = encoders.pop().expect("two encoders");
        let mention = encoders.pop().expect("two encoders");
        Ok(BiEncoder {
            vocab,
            mention,
            reference,
            reference_descriptions: header.flags & FLAG_REFERENCE_DESCRIPTIONS != 0,
        })
    }

    /// Rounds every parameter to `f32`, matching what a save/load cycle yields.
    pub fn round_to_f32(&mut self) {
        for enc in [&mut self.mention, &mut self.reference] {
            for p in enc.params_mut() {
                *p = *p as f32 as f64;
            }
        }
    }
}

pub fn encode_mention(sequence: &[u32], params: &Encoder) -> Result<Vec<f64>> {
    params.encode(sequence)
}

pub fn encode_reference(entity: &Entity, vocab: &Vocabulary, params_ref: &Encoder) -> Result<Vec<f64>> {
    params_ref.encode(&tokenize_reference(
        entity,
        vocab,
        params_ref.config().max_len,
        false,
    ))
}
