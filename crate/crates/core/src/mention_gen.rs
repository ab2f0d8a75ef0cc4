//! Self-supervised mention generation: exact dictionary matching of
//! unambiguous surfaces over raw text, with fixed-size context windows.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use aho_corasick::{AhoCorasick, MatchKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;

/// Default context budget in whitespace tokens.
pub const DEFAULT_WINDOW: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionSource {
    SelfSupervised,
    Gold,
}

/// One occurrence of an entity surface form with its context.
///
/// `start_char`/`end_char` are offsets in Unicode scalar values, so slicing
/// the document's characters by them reproduces `mention`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionExample {
    pub doc_id: String,
    pub entity_id: String,
    pub mention: String,
    pub start_char: usize,
    pub end_char: usize,
    pub ctx_l: Vec<String>,
    pub ctx_r: Vec<String>,
    pub source: MentionSource,
}

impl MentionExample {
    pub fn mention_tokens(&self) -> impl Iterator<Item = &str> {
        self.mention.split_whitespace()
    }
}

/// A raw automaton hit in byte offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RawMatch {
    pub pattern: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanMatch {
    pub surface: String,
    pub entity_id: String,
    pub start_char: usize,
    pub end_char: usize,
}

/// Multi-pattern exact matcher over unambiguous surfaces. Case preserved.
#[derive(Debug, Clone)]
pub struct Matcher {
    automaton: AhoCorasick,
    surfaces: Vec<String>,
    entity_ids: Vec<String>,
}

impl Matcher {
    pub fn new(surfaces: &BTreeMap<String, String>) -> Result<Self> {
        if surfaces.keys().any(String::is_empty) {
            return Err(Error::EmptySurface);
        }
        let (surfaces, entity_ids): (Vec<String>, Vec<String>) =
            surfaces.iter().map(|(s, e)| (s.clone(), e.clone())).unzip();
        let automaton = AhoCorasick::builder()
            .match_kind(MatchKind::Standard)
            .build(&surfaces)
            .map_err(|e| Error::Config(format!("matcher construction failed: {e}")))?;
        Ok(Matcher {
            automaton,
            surfaces,
            entity_ids,
        })
    }

    pub fn pattern_count(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surface(&self, pattern: usize) -> &str {
        &self.surfaces[pattern]
    }

    pub fn entity_id(&self, pattern: usize) -> &str {
        &self.entity_ids[pattern]
    }

    /// Every occurrence of every pattern, overlaps included, before any
    /// boundary filtering or overlap resolution. Sorted by (start, end, pattern).
    pub fn raw_matches(&self, text: &str) -> Vec<RawMatch> {
        let mut out: Vec<RawMatch> = self
            .automaton
            .find_overlapping_iter(text)
            .map(|m| RawMatch {
                pattern: m.pattern().as_usize(),
                start: m.start(),
                end: m.end(),
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Non-overlapping, word-bounded matches chosen leftmost-longest.
    pub fn scan(&self, text: &str) -> Vec<ScanMatch> {
        let candidates: Vec<RawMatch> = self
            .raw_matches(text)
            .into_iter()
            .filter(|m| at_word_boundary(text, m.start, m.end))
            .collect();
        let selected = resolve_leftmost_longest(candidates);

        let mut out = Vec::with_capacity(selected.len());
        let mut chars_before = 0usize;
        let mut byte_cursor = 0usize;
        for m in selected {
            chars_before += text[byte_cursor..m.start].chars().count();
            let len_chars = text[m.start..m.end].chars().count();
            out.push(ScanMatch {
                surface: self.surfaces[m.pattern].clone(),
                entity_id: self.entity_ids[m.pattern].clone(),
                start_char: chars_before,
                end_char: chars_before + len_chars,
            });
            chars_before += len_chars;
            byte_cursor = m.end;
        }
        out
    }
}

pub fn build_matcher(surfaces: &BTreeMap<String, String>) -> Result<Matcher> {
    Matcher::new(surfaces)
}

pub fn scan_document(matcher: &Matcher, doc: &Document) -> Vec<ScanMatch> {
    matcher.scan(&doc.text)
}

/// True when the characters adjacent to `start..end` (if any) are not alphanumeric.
pub fn at_word_boundary(text: &str, start: usize, end: usize) -> bool {
    let before_ok = text[..start]
        .chars()
        .next_back()
        .is_none_or(|c| !c.is_alphanumeric());
    let after_ok = text[end..]
        .chars()
        .next()
        .is_none_or(|c| !c.is_alphanumeric());
    before_ok && after_ok
}

/// Greedy leftmost-longest selection over candidate spans.
pub fn resolve_leftmost_longest(mut candidates: Vec<RawMatch>) -> Vec<RawMatch> {
    candidates.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then(b.end.cmp(&a.end))
            .then(a.pattern.cmp(&b.pattern))
    });
    let mut out = Vec::new();
    let mut next_free = 0usize;
    for m in candidates {
        if m.start >= next_free {
            next_free = m.end;
            out.push(m);
        }
    }
    out
}

/// Whitespace-token context around a character span: up to `window / 2`
/// tokens on each side, the mention itself excluded. A side truncated by
/// the document boundary does not lend its budget to the other side.
pub fn extract_context(
    doc: &Document,
    start_char: usize,
    end_char: usize,
    window: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    let len = doc.text.chars().count();
    if start_char > end_char || end_char > len {
        return Err(Error::InvalidSpan {
            start: start_char,
            end: end_char,
            len,
        });
    }
    let start_byte = char_to_byte(&doc.text, start_char);
    let end_byte = char_to_byte(&doc.text, end_char);
    let half = window / 2;

    let left: Vec<&str> = doc.text[..start_byte].split_whitespace().collect();
    let ctx_l = left[left.len().saturating_sub(half)..]
        .iter()
        .map(|t| t.to_string())
        .collect();
    let ctx_r = doc.text[end_byte..]
        .split_whitespace()
        .take(half)
        .map(str::to_string)
        .collect();
    Ok((ctx_l, ctx_r))
}

fn char_to_byte(text: &str, char_idx: usize) -> usize {
    text.char_indices()
        .nth(char_idx)
        .map_or(text.len(), |(b, _)| b)
}

/// Slices `text` by character offsets.
pub fn slice_chars(text: &str, start_char: usize, end_char: usize) -> &str {
    let s = char_to_byte(text, start_char);
    let e = char_to_byte(text, end_char);
    &text[s..e]
}

/// Append-only mention collection with per-entity counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MentionStore {
    examples: Vec<MentionExample>,
    counts: BTreeMap<String, usize>,
}

impl MentionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, example: MentionExample) {
        *self.counts.entry(example.entity_id.clone()).or_default() += 1;
        self.examples.push(example);
    }

    pub fn extend(&mut self, examples: impl IntoIterator<Item = MentionExample>) {
        for e in examples {
            self.push(e);
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[MentionExample] {
        &self.examples
    }

    pub fn count(&self, entity_id: &str) -> usize {
        self.counts.get(entity_id).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }

    /// Examples grouped by entity, entities in id order, examples in store order.
    pub fn by_entity(&self) -> BTreeMap<&str, Vec<&MentionExample>> {
        let mut map: BTreeMap<&str, Vec<&MentionExample>> = BTreeMap::new();
        for e in &self.examples {
            map.entry(e.entity_id.as_str()).or_default().push(e);
        }
        map
    }

    /// Orders examples by (doc_id, start_char, end_char, entity_id).
    pub fn canonicalize(&mut self) {
        self.examples.sort_by(|a, b| {
            (&a.doc_id, a.start_char, a.end_char, &a.entity_id).cmp(&(
                &b.doc_id,
                b.start_char,
                b.end_char,
                &b.entity_id,
            ))
        });
    }

    /// Keeps at most `cap` examples per entity, choosing by ascending
    /// SHA-256 of `doc_id \t start_char \t end_char`. Order is canonical.
    pub fn capped(&self, cap: usize) -> MentionStore {
        let mut out = MentionStore::new();
        for (_, mut group) in self.by_entity() {
            group.sort_by_cached_key(|e| example_hash(e));
            out.extend(group.into_iter().take(cap).cloned());
        }
        out.canonicalize();
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = MentionStore::new();
        store.extend(jsonl::read::<MentionExample>(path)?);
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.examples)
    }
}

impl FromIterator<MentionExample> for MentionStore {
    fn from_iter<T: IntoIterator<Item = MentionExample>>(iter: T) -> Self {
        let mut store = MentionStore::new();
        store.extend(iter);
        store
    }
}

fn example_hash(e: &MentionExample) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(e.doc_id.as_bytes());
    h.update(b"\t");
    h.update(e.start_char.to_le_bytes());
    h.update(b"\t");
    h.update(e.end_char.to_le_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub documents: usize,
    pub mentions: usize,
    pub entities: usize,
}

/// Scans every document, appends one self-supervised example per match and
/// leaves the store in canonical order.
pub fn generate_corpus<I>(
    matcher: &Matcher,
    corpus: I,
    window: usize,
    store: &mut MentionStore,
) -> Result<GenerationReport>
where
    I: IntoIterator<Item = Result<Document>>,
{
    let mut report = GenerationReport::default();
    let mut covered = HashSet::new();
    for doc in corpus {
        let doc = doc?;
        report.documents += 1;
        for m in matcher.scan(&doc.text) {
            let (ctx_l, ctx_r) =
                extract_context(&doc, m.start_char, m.end_char, window).map_err(|e| {
                    Error::Document {
                        doc_id: doc.doc_id.clone(),
                        message: e.to_string(),
                    }
                })?;
            covered.insert(m.entity_id.clone());
            report.mentions += 1;
            store.push(MentionExample {
                doc_id: doc.doc_id.clone(),
                entity_id: m.entity_id,
                mention: m.surface,
                start_char: m.start_char,
                end_char: m.end_char,
                ctx_l,
                ctx_r,
                source: MentionSource::SelfSupervised,
            });
        }
    }
    report.entities = covered.len();
    store.canonicalize();
    Ok(report)
}

/// Loads a corpus from a JSONL file of `{"doc_id","text"}` or from a
/// directory of `.txt` files (doc_id = file stem, sorted by file name).
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let docs = if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|p| {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let doc_id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(Document { doc_id, text })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        jsonl::read::<Document>(path)?
    };
    let mut seen = HashSet::new();
    for d in &docs {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::Document {
                doc_id: d.doc_id.clone(),
                message: "duplicate doc_id in corpus".into(),
            });
        }
    }
    Ok(docs)
}
