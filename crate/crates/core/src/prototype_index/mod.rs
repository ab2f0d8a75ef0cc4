//! Per-entity mention prototypes and exact maximum-inner-product linking.

pub mod vectors;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::linalg::dot;
use crate::encoder::BiEncoder;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::mention_gen::{MentionExample, MentionSource, MentionStore};
use crate::ontology::EntityCatalog;

pub const DEFAULT_PROTOTYPES: usize = 16;
pub const DEFAULT_TOP_K: usize = 100;

/// Unencoded prototype choice: every catalog entity maps to at most
/// `k_proto` of its self-supervised mentions, possibly none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrototypeStore {
    pub k_proto: usize,
    pub entities: BTreeMap<String, Vec<MentionExample>>,
}

impl PrototypeStore {
    pub fn prototype_count(&self) -> usize {
        self.entities.values().map(Vec::len).sum()
    }
}

/// Draws `min(k, available)` mentions per entity uniformly without
/// replacement. Entities are visited in id order from one seeded stream;
/// the chosen mentions keep store order.
pub fn sample_prototypes(
    store: &MentionStore,
    catalog: &EntityCatalog,
    k: usize,
    seed: u64,
) -> PrototypeStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = store.by_entity();
    let mut ids: BTreeSet<&str> = catalog.ids().collect();
    ids.extend(groups.keys().copied());
    let mut entities = BTreeMap::new();
    for id in ids {
        let chosen = match groups.get(id) {
            Some(group) => {
                let mut picks = index::sample(&mut rng, group.len(), k.min(group.len())).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| group[i].clone()).collect()
            }
            None => Vec::new(),
        };
        entities.insert(id.to_string(), chosen);
    }
    PrototypeStore {
        k_proto: k,
        entities,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    pub score: f64,
    /// Index row of the best prototype; absent for reference-only scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub query: MentionExample,
    pub candidates: Vec<Candidate>,
}

impl LinkResult {
    pub fn top(&self) -> Option<&str> {
        self.candidates.first().map(|c| c.entity_id.as_str())
    }

    pub fn rank_of(&self, entity_id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.entity_id == entity_id)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions<'a> {
    pub top_k: usize,
    pub fusion: bool,
    /// Only these entities may be returned.
    pub domain: Option<&'a BTreeSet<String>>,
    /// Prototypes drawn from this document are ignored.
    pub exclude_doc: Option<&'a str>,
}

impl Default for SearchOptions<'_> {
    fn default() -> Self {
        SearchOptions {
            top_k: DEFAULT_TOP_K,
            fusion: false,
            domain: None,
            exclude_doc: None,
        }
    }
}

/// Flat store of prototype vectors with their mention metadata, plus an
/// optional table of entity reference vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    cosine: bool,
    rows: Vec<MentionExample>,
    vectors: Vec<f64>,
    entities: Vec<String>,
    references: Option<Vec<f64>>,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    v
}

/// Values are held at f32 precision so an index behaves the same before
/// and after a save/load cycle.
fn to_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl VectorIndex {
    pub fn new(dim: usize, entities: impl IntoIterator<Item = String>, cosine: bool) -> Self {
        let mut entities: Vec<String> = entities.into_iter().collect();
        entities.sort();
        entities.dedup();
        VectorIndex {
            dim,
            cosine,
            rows: Vec::new(),
            vectors: Vec::new(),
            entities,
            references: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cosine(&self) -> bool {
        self.cosine
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn row(&self, i: usize) -> &MentionExample {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[MentionExample] {
        &self.rows
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn has_references(&self) -> bool {
        self.references.is_some()
    }

    pub fn reference(&self, entity_id: &str) -> Option<&[f64]> {
        let refs = self.references.as_ref()?;
        let i = self.entities.binary_search_by(|e| e.as_str().cmp(entity_id)).ok()?;
        Some(&refs[i * self.dim..(i + 1) * self.dim])
    }

    fn prepare(&self, v: Vec<f64>) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        let mut v = if self.cosine { normalized(v) } else { v };
        to_f32(&mut v);
        Ok(v)
    }

    /// Appends one prototype vector. The entity must be known to the index.
    pub fn push(&mut self, example: MentionExample, vector: Vec<f64>) -> Result<()> {
        if self.entities.binary_search(&example.entity_id).is_err() {
            return Err(Error::UnknownEntity(example.entity_id));
        }
        let v = self.prepare(vector)?;
        self.vectors.extend_from_slice(&v);
        self.rows.push(example);
        Ok(())
    }

    /// Installs reference vectors, one per index entity in id order.
    pub fn set_references(&mut self, by_entity: BTreeMap<String, Vec<f64>>) -> Result<()> {
        let mut flat = Vec::with_capacity(self.entities.len() * self.dim);
        for id in &self.entities {
            let v = by_entity
                .get(id)
                .ok_or_else(|| Error::MissingReference(format!("entity `{id}`")))?;
            flat.extend(self.prepare(v.clone())?);
        }
        self.references = Some(flat);
        Ok(())
    }

    /// Ranks entities for a query vector. Without fusion an entity scores
    /// the best `q·c_p` over its prototypes; with fusion each prototype
    /// scores `q·c_p + q·r_e`, and entities without prototypes fall back to
    /// `q·r_e`. Ties go to the smaller entity id.
    pub fn search(&self, query: &[f64], opts: &SearchOptions<'_>) -> Result<Vec<Candidate>> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let refs = match (opts.fusion, &self.references) {
            (true, None) => return Err(Error::MissingReference("index has no reference vectors".into())),
            (true, Some(r)) => Some(r),
            (false, _) => None,
        };
        let q = if self.cosine {
            normalized(query.to_vec())
        } else {
            query.to_vec()
        };
        let allowed = |id: &str| opts.domain.map_or(true, |d| d.contains(id));
        let ref_score: Vec<f64> = match refs {
            Some(r) => r.chunks_exact(self.dim).map(|re| dot(&q, re)).collect(),
            None => Vec::new(),
        };
        let entity_slot = |id: &str| {
            self.entities
                .binary_search_by(|e| e.as_str().cmp(id))
                .expect("rows only hold index entities")
        };

        let mut best: BTreeMap<usize, (f64, Option<usize>)> = BTreeMap::new();
        for (row, example) in self.rows.iter().enumerate() {
            if !allowed(&example.entity_id) || opts.exclude_doc == Some(example.doc_id.as_str()) {
                continue;
            }
            let slot = entity_slot(&example.entity_id);
            let mut s = dot(&q, self.vector(row));
            if refs.is_some() {
                s += ref_score[slot];
            }
            match best.get(&slot) {
                Some(&(b, _)) if !(s > b) => {}
                _ => {
                    best.insert(slot, (s, Some(row)));
                }
            }
        }
        if refs.is_some() {
            for (slot, id) in self.entities.iter().enumerate() {
                if allowed(id) {
                    best.entry(slot).or_insert((ref_score[slot], None));
                }
            }
        }
        let mut out: Vec<Candidate> = best
            .into_iter()
            .map(|(slot, (score, prototype))| Candidate {
                entity_id: self.entities[slot].clone(),
                score,
                prototype,
            })
            .collect();
        out.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.entity_id.cmp(&b.entity_id))
        });
        out.truncate(opts.top_k);
        Ok(out)
    }

    /// Writes `vectors.bin`, `vectors.jsonl`, `entities.txt`, `index.json`
    /// and, when present, `references.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        vectors::write(&dir.join(VECTORS_FILE), self.dim, &self.vectors)?;
        jsonl::write(&dir.join(ROWS_FILE), &self.rows)?;
        let entities_path = dir.join(ENTITIES_FILE);
        let mut listing = String::new();
        for id in &self.entities {
            listing.push_str(id);
            listing.push('\n');
        }
        std::fs::write(&entities_path, listing).map_err(|e| Error::io(&entities_path, e))?;
        let refs_path = dir.join(REFERENCES_FILE);
        match &self.references {
            Some(r) => vectors::write(&refs_path, self.dim, r)?,
            None if refs_path.exists() => {
                std::fs::remove_file(&refs_path).map_err(|e| Error::io(&refs_path, e))?
            }
            None => {}
        }
        let meta = IndexMeta {
            version: 1,
            dim: self.dim,
            cosine: self.cosine,
            prototypes: self.rows.len(),
        };
        let meta_path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("plain struct");
        std::fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: IndexMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let vec_path = dir.join(VECTORS_FILE);
        let (dim, vectors) = vectors::read(&vec_path)?;
        let rows: Vec<MentionExample> = jsonl::read(&dir.join(ROWS_FILE))?;
        if dim != meta.dim {
            return Err(Error::DimMismatch {
                expected: meta.dim,
                found: dim,
            });
        }
        if rows.len() * dim != vectors.len() || rows.len() != meta.prototypes {
            return Err(Error::Format {
                path: vec_path,
                message: format!("{} vectors for {} metadata rows", vectors.len() / dim, rows.len()),
            });
        }
        let entities_path = dir.join(ENTITIES_FILE);
        let listing =
            std::fs::read_to_string(&entities_path).map_err(|e| Error::io(&entities_path, e))?;
        let entities: Vec<String> = listing.lines().map(str::to_string).collect();
        let mut index = VectorIndex::new(dim, entities.iter().cloned(), meta.cosine);
        if index.entities != entities {
            return Err(Error::Format {
                path: entities_path,
                message: "entity list must be sorted and distinct".into(),
            });
        }
        for r in &rows {
            if index.entities.binary_search(&r.entity_id).is_err() {
                return Err(Error::UnknownEntity(r.entity_id.clone()));
            }
        }
        index.rows = rows;
        index.vectors = vectors;
        let refs_path = dir.join(REFERENCES_FILE);
        if refs_path.exists() {
            let (rdim, refs) = vectors::read(&refs_path)?;
            if rdim != dim || refs.len() != entities.len() * dim {
                return Err(Error::Format {
                    path: refs_path,
                    message: "reference table does not match the entity list".into(),
                });
            }
            index.references = Some(refs);
        }
        Ok(index)
    }
}

pub const VECTORS_FILE: &str = "vectors.bin";
pub const ROWS_FILE: &str = "vectors.jsonl";
pub const ENTITIES_FILE: &str = "entities.txt";
pub const REFERENCES_FILE: &str = "references.bin";
pub const META_FILE: &str = "index.json";
pub const MODEL_FILE: &str = "encoder.krsm";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexMeta {
    version: u32,
    dim: usize,
    cosine: bool,
    prototypes: usize,
}

/// Encodes every sampled prototype and, when `fusion` is set, every
/// catalog entity's reference text.
pub fn build_index(
    protos: &PrototypeStore,
    model: &BiEncoder,
    catalog: &EntityCatalog,
    fusion: bool,
    cosine: bool,
) -> Result<VectorIndex> {
    let mut index = VectorIndex::new(model.dim(), protos.entities.keys().cloned(), cosine);
    for examples in protos.entities.values() {
        for e in examples {
            index.push(e.clone(), model.encode_mention(e)?)?;
        }
    }
    if fusion {
        let mut refs = BTreeMap::new();
        for id in index.entities() {
            let entity = catalog.get(id)?;
            refs.insert(id.clone(), model.encode_reference(entity)?);
        }
        index.set_references(refs)?;
    }
    Ok(index)
}

/// Returns a copy of `index` with the gold examples appended as prototypes.
/// No parameters change.
pub fn add_gold_prototypes<'a>(
    index: &VectorIndex,
    gold: impl IntoIterator<Item = &'a MentionExample>,
    model: &BiEncoder,
) -> Result<VectorIndex> {
    if model.dim() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            found: model.dim(),
        });
    }
    let mut out = index.clone();
    for g in gold {
        let mut g = g.clone();
        g.source = MentionSource::Gold;
        let v = model.encode_mention(&g)?;
        out.push(g, v)?;
    }
    Ok(out)
}

/// An index together with the encoder that produced it.
#[derive(Debug, Clone)]
pub struct Linker {
    pub model: BiEncoder,
    pub index: VectorIndex,
}

impl Linker {
    pub fn new(model: BiEncoder, index: VectorIndex) -> Result<Self> {
        if model.dim() != index.dim() {
            return Err(Error::DimMismatch {
                expected: index.dim(),
                found: model.dim(),
            });
        }
        Ok(Linker { model, index })
    }

    pub fn link_with(&self, query: &MentionExample, opts: &SearchOptions<'_>) -> Result<LinkResult> {
        if opts.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.index.is_empty() && !(opts.fusion && self.index.has_references()) {
            return Err(Error::EmptyIndex);
        }
        let q = self.model.encode_mention(query)?;
        Ok(LinkResult {
            query: query.clone(),
            candidates: self.index.search(&q, opts)?,
        })
    }

    pub fn link(&self, query: &MentionExample, top_k: usize) -> Result<LinkResult> {
        self.link_with(
            query,
            &SearchOptions {
                top_k,
                ..Default::default()
            },
        )
    }

    pub fn link_with_references(&self, query: &MentionExample, top_k: usize) -> Result<LinkResult> {
        self.link_with(
            query,
            &SearchOptions {
                top_k,
                fusion: true,
                ..Default::default()
            },
        )
    }

    pub fn add_gold<'a>(&self, gold: impl IntoIterator<Item = &'a MentionExample>) -> Result<Linker> {
        Ok(Linker {
            model: self.model.clone(),
            index: add_gold_prototypes(&self.index, gold, &self.model)?,
        })
    }

    /// Saves the index and a copy of the encoder into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.index.save(dir)?;
        self.model.save(&dir.join(MODEL_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = VectorIndex::load(dir)?;
        let model = BiEncoder::load(&dir.join(MODEL_FILE))?;
        Linker::new(model, index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::Entity;

    fn ex(entity: &str, doc: usize) -> MentionExample {
        MentionExample {
            doc_id: format!("d{doc}"),
            entity_id: entity.into(),
            mention: "m".into(),
            start_char: 0,
            end_char: 1,
            ctx_l: vec![],
            ctx_r: vec![],
            source: MentionSource::SelfSupervised,
        }
    }

    fn index_of(protos: &[(&str, Vec<f64>)], entities: &[&str]) -> VectorIndex {
        let mut idx = VectorIndex::new(2, entities.iter().map(|s| s.to_string()), false);
        for (i, (id, v)) in protos.iter().enumerate() {
            idx.push(ex(id, i), v.clone()).unwrap();
        }
        idx
    }

    fn ranking(c: &[Candidate]) -> Vec<&str> {
        c.iter().map(|c| c.entity_id.as_str()).collect()
    }

    #[test]
    fn sampling_caps_and_keeps_empty_entities() {
        let catalog = EntityCatalog::from_entities(
            ["A", "B", "C"].map(|id| Entity::new(id, format!("n{id}"))),
        )
        .unwrap();
        let mut store = MentionStore::new();
        for d in 0..3 {
            store.push(ex("A", d));
        }
        for d in 0..100 {
            store.push(ex("B", 100 + d));
        }
        let p = sample_prototypes(&store, &catalog, 16, 7);
        assert_eq!(p.entities["A"].len(), 3);
        assert_eq!(p.entities["B"].len(), 16);
        assert!(p.entities["C"].is_empty());
        assert_eq!(p, sample_prototypes(&store, &catalog, 16, 7));
        assert_ne!(p, sample_prototypes(&store, &catalog, 16, 8));
    }

    #[test]
    fn single_prototype_wins_regardless_of_score() {
        let idx = index_of(&[("A", vec![-5.0, -5.0])], &["A"]);
        let got = idx.search(&[1.0, 1.0], &SearchOptions::default()).unwrap();
        assert_eq!(ranking(&got), ["A"]);
        assert_eq!(got[0].score, -10.0);
    }

    #[test]
    fn hand_fixed_ranking_and_ties() {
        let idx = index_of(
            &[
                ("C", vec![1.0, 0.0]),
                ("A", vec![0.0, 1.0]),
                ("B", vec![1.0, 0.0]),
                ("A", vec![0.5, 0.5]),
            ],
            &["A", "B", "C"],
        );
        let got = idx.search(&[2.0, 1.0], &SearchOptions::default()).unwrap();
        // B and C tie at 2.0; A's best prototype scores 1.5
        assert_eq!(ranking(&got), ["B", "C", "A"]);
        assert_eq!(got[2].prototype, Some(3));
        let top1 = idx
            .search(&[2.0, 1.0], &SearchOptions { top_k: 1, ..Default::default() })
            .unwrap();
        assert_eq!(ranking(&top1), ["B"]);
    }

    #[test]
    fn fusion_scores_and_fallback() {
        let mut idx = index_of(&[("A", vec![1.0, 2.0])], &["A", "B"]);
        let refs = BTreeMap::from([
            ("A".to_string(), vec![0.5, -1.0]),
            ("B".to_string(), vec![3.0, 0.25]),
        ]);
        idx.set_references(refs).unwrap();
        let q = [0.75, -0.5];
        let opts = SearchOptions { fusion: true, ..Default::default() };
        let got = idx.search(&q, &opts).unwrap();
        let a = got.iter().find(|c| c.entity_id == "A").unwrap();
        assert_eq!(a.score, (0.75 * 1.0 - 0.5 * 2.0) + (0.75 * 0.5 + 0.5 * 1.0));
        let b = got.iter().find(|c| c.entity_id == "B").unwrap();
        assert_eq!(b.prototype, None);
        assert_eq!(b.score, 0.75 * 3.0 - 0.5 * 0.25);
    }

    #[test]
    fn fusion_requires_references() {
        let idx = index_of(&[("A", vec![1.0, 2.0])], &["A"]);
        let opts = SearchOptions { fusion: true, ..Default::default() };
        assert!(matches!(idx.search(&[1.0, 0.0], &opts), Err(Error::MissingReference(_))));
    }

    #[test]
    fn zero_references_match_plain_search() {
        let mut idx = index_of(
            &[("A", vec![1.0, -2.0]), ("B", vec![0.3, 0.1]), ("C", vec![-1.0, 0.0])],
            &["A", "B", "C"],
        );
        let plain = idx.search(&[0.2, -0.7], &SearchOptions::default()).unwrap();
        idx.set_references(["A", "B", "C"].iter().map(|id| (id.to_string(), vec![0.0, 0.0])).collect())
            .unwrap();
        let fused = idx
            .search(&[0.2, -0.7], &SearchOptions { fusion: true, ..Default::default() })
            .unwrap();
        assert_eq!(plain, fused);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = VectorIndex::new(2, Vec::<String>::new(), false);
        assert!(idx.search(&[1.0, 0.0], &SearchOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn domain_filter() {
        let idx = index_of(&[("A", vec![1.0, 0.0]), ("B", vec![0.0, 1.0])], &["A", "B"]);
        let domain = BTreeSet::from(["B".to_string()]);
        let got = idx
            .search(&[1.0, 0.0], &SearchOptions { domain: Some(&domain), ..Default::default() })
            .unwrap();
        assert_eq!(ranking(&got), ["B"]);
    }

    #[test]
    fn unknown_entity_and_dim_checks() {
        let mut idx = index_of(&[], &["A"]);
        assert!(matches!(idx.push(ex("Z", 0), vec![1.0, 0.0]), Err(Error::UnknownEntity(_))));
        assert!(matches!(idx.push(ex("A", 0), vec![1.0]), Err(Error::DimMismatch { .. })));
        assert!(matches!(idx.search(&[1.0], &SearchOptions::default()), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = index_of(&[("A", vec![0.1, 2.0]), ("B", vec![-1.5, 0.3])], &["A", "B", "C"]);
        idx.set_references(
            ["A", "B", "C"].iter().map(|id| (id.to_string(), vec![0.2, 0.4])).collect(),
        )
        .unwrap();
        idx.save(dir.path()).unwrap();
        let back = VectorIndex::load(dir.path()).unwrap();
        assert_eq!(back, idx);
        let bytes = std::fs::read(dir.path().join(VECTORS_FILE)).unwrap();
        idx.save(dir.path()).unwrap();
        assert_eq!(bytes, std::fs::read(dir.path().join(VECTORS_FILE)).unwrap());
    }

    #[test]
    fn cosine_ignores_length() {
        let mut idx = VectorIndex::new(2, ["A".to_string(), "B".to_string()], true);
        idx.push(ex("A", 0), vec![10.0, 0.0]).unwrap();
        idx.push(ex("B", 1), vec![0.5, 0.5]).unwrap();
        let got = idx.search(&[0.6, 0.8], &SearchOptions::default()).unwrap();
        assert_eq!(ranking(&got), ["B", "A"]);
    }
}
