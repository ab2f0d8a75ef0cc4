use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::mention_gen::MentionExample;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const M_START: &str = "[M_s]";
pub const M_END: &str = "[M_e]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const M_START_ID: u32 = 2;
pub const M_END_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const UNK_ID: u32 = 5;
pub const PAD_ID: u32 = 6;

pub const RESERVED: [&str; 7] = [CLS, SEP, M_START, M_END, MASK, UNK, PAD];

/// Default frequency cutoff for corpus tokens.
pub const MIN_FREQ: usize = 2;

/// Token ↔ id bijection with the reserved tokens pinned at ids 0–6.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    id: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|t| t.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Reserved tokens, then every mention/context token seen at least
    /// `min_freq` times, then every token of `always_include` (e.g. entity
    /// reference texts). New tokens are assigned in lexicographic order.
    pub fn build<'a, I, J>(examples: I, min_freq: usize, always_include: J) -> Self
    where
        I: IntoIterator<Item = &'a MentionExample>,
        J: IntoIterator<Item = String>,
    {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in examples {
            for t in ex
                .ctx_l
                .iter()
                .map(String::as_str)
                .chain(ex.mention_tokens())
                .chain(ex.ctx_r.iter().map(String::as_str))
            {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut new_tokens: BTreeSet<String> = freq
            .into_iter()
            .filter(|&(_, n)| n >= min_freq)
            .map(|(t, _)| t.to_string())
            .collect();
        new_tokens.extend(always_include);

        let mut vocab = Self::reserved_only();
        for t in new_tokens {
            vocab.add(&t);
        }
        vocab
    }

    fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Out-of-vocabulary tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<VocabEntry> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| VocabEntry {
                token: t.clone(),
                id: i as u32,
            })
            .collect();
        jsonl::write(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<VocabEntry> = jsonl::read(path)?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut tokens = Vec::with_capacity(entries.len());
        let mut ids = HashMap::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            if e.id as usize != i {
                return Err(bad(format!("vocabulary id {} at position {i}", e.id)));
            }
            if i < RESERVED.len() && e.token != RESERVED[i] {
                return Err(bad(format!("reserved id {i} holds `{}`", e.token)));
            }
            if ids.insert(e.token.clone(), e.id).is_some() {
                return Err(bad(format!("duplicate token `{}`", e.token)));
            }
            tokens.push(e.token);
        }
        if tokens.len() < RESERVED.len() {
            return Err(bad("vocabulary lacks reserved tokens".into()));
        }
        Ok(Vocabulary { tokens, ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mention_gen::MentionSource;

    fn ex(ctx: &[&str], mention: &str) -> MentionExample {
        MentionExample {
            doc_id: "d".into(),
            entity_id: "e".into(),
            mention: mention.into(),
            start_char: 0,
            end_char: mention.chars().count(),
            ctx_l: ctx.iter().map(|s| s.to_string()).collect(),
            ctx_r: vec![],
            source: MentionSource::SelfSupervised,
        }
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocabulary::build(&[ex(&["[CLS]", "a", "a"], "b")], 1, vec![]);
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(t), i as u32);
        }
        assert_eq!(v.len(), 9);
    }

    #[test]
    fn frequency_cutoff() {
        let exs = [ex(&["a", "b"], "m"), ex(&["a"], "m")];
        let v = Vocabulary::build(&exs, 2, vec!["z".to_string()]);
        assert!(v.contains("a"));
        assert!(v.contains("m"));
        assert!(!v.contains("b"));
        assert!(v.contains("z"));
        assert_eq!(v.id("b"), UNK_ID);
    }
}
