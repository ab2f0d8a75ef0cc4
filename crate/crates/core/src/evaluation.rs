//! Strict and lenient linking metrics, ambiguity partition, top-K oracle
//! accuracy and the mention-as-is baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::mention_gen::MentionExample;
use crate::ontology::{EntityCatalog, SurfaceIndex};
use crate::prototype_index::LinkResult;

/// Gold mentions plus the entity ids linking may choose from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldDataset {
    pub mentions: Vec<MentionExample>,
    pub domain: Option<BTreeSet<String>>,
}

impl GoldDataset {
    pub fn new(mentions: Vec<MentionExample>, domain: Option<BTreeSet<String>>) -> Result<Self> {
        if let Some(d) = &domain {
            if let Some(m) = mentions.iter().find(|m| !d.contains(&m.entity_id)) {
                return Err(Error::InvalidEntity {
                    id: m.entity_id.clone(),
                    reason: "gold entity is outside the domain entity set".into(),
                });
            }
        }
        Ok(GoldDataset { mentions, domain })
    }

    /// `mentions.jsonl` and an optional file of domain ids, one per line.
    pub fn load(mentions: &Path, domain: Option<&Path>) -> Result<Self> {
        let examples = jsonl::read(mentions)?;
        let domain = domain.map(read_id_list).transpose()?;
        Self::new(examples, domain)
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }
}

pub fn read_id_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Lower-cased with runs of whitespace collapsed to one space.
pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn check_aligned(predictions: usize, gold: usize) -> Result<()> {
    if predictions != gold {
        return Err(Error::Alignment { predictions, gold });
    }
    Ok(())
}

/// Fraction of mentions whose rank-1 entity is the gold entity.
pub fn strict_accuracy(predictions: &[LinkResult], gold: &[MentionExample]) -> Result<f64> {
    check_aligned(predictions.len(), gold.len())?;
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.top() == Some(g.entity_id.as_str()))
        .count();
    Ok(fraction(hits, gold.len()))
}

fn strict_hits(predictions: &[LinkResult], gold: &[MentionExample], subset: &[usize]) -> usize {
    subset
        .iter()
        .filter(|&&i| predictions[i].top() == Some(gold[i].entity_id.as_str()))
        .count()
}

/// A predicted surface counts when it matches, after normalization, the
/// gold entity's name or any alias, whatever else it could refer to.
pub fn lenient_surface_accuracy(
    surfaces: &[Option<String>],
    gold: &[MentionExample],
    catalog: &EntityCatalog,
) -> Result<f64> {
    check_aligned(surfaces.len(), gold.len())?;
    let mut hits = 0;
    for (s, g) in surfaces.iter().zip(gold) {
        let Some(s) = s else { continue };
        let entity = catalog.get(&g.entity_id)?;
        let s = normalize_surface(s);
        if entity.surfaces().any(|t| normalize_surface(t) == s) {
            hits += 1;
        }
    }
    Ok(fraction(hits, gold.len()))
}

/// Name of each prediction's rank-1 entity, the surface a linker returns.
pub fn predicted_surfaces(predictions: &[LinkResult], catalog: &EntityCatalog) -> Result<Vec<Option<String>>> {
    predictions
        .iter()
        .map(|p| match p.top() {
            Some(id) => Ok(Some(catalog.get(id)?.name.clone())),
            None => Ok(None),
        })
        .collect()
}

/// Case-insensitive index over names and aliases.
pub fn lenient_index(catalog: &EntityCatalog) -> SurfaceIndex {
    SurfaceIndex::build_with(catalog, true, normalize_surface)
}

/// Indices of gold mentions whose surface does not resolve to exactly one
/// entity, then those that do. Zero matches counts as ambiguous.
pub fn ambiguity_partition(gold: &[MentionExample], catalog: &EntityCatalog) -> (Vec<usize>, Vec<usize>) {
    let index = lenient_index(catalog);
    let mut ambiguous = Vec::new();
    let mut unambiguous = Vec::new();
    for (i, g) in gold.iter().enumerate() {
        match index.get(&normalize_surface(&g.mention)) {
            Some(ids) if ids.len() == 1 => unambiguous.push(i),
            _ => ambiguous.push(i),
        }
    }
    (ambiguous, unambiguous)
}

/// Fraction of mentions whose gold entity appears in the top K, for each K.
pub fn topk_oracle_accuracy(
    predictions: &[LinkResult],
    gold: &[MentionExample],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_aligned(predictions.len(), gold.len())?;
    let max_k = ks.iter().copied().max().unwrap_or(0);
    for (position, p) in predictions.iter().enumerate() {
        if p.candidates.len() < max_k {
            return Err(Error::InsufficientCandidates {
                position,
                available: p.candidates.len(),
                needed: max_k,
            });
        }
    }
    let ranks: Vec<Option<usize>> = predictions
        .iter()
        .zip(gold)
        .map(|(p, g)| p.rank_of(&g.entity_id))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, fraction(hits, gold.len()))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsIsResult {
    pub strict_accuracy: f64,
    pub lenient_accuracy: f64,
    /// Entity chosen for each mention; `None` when the surface matches nothing.
    pub resolved: Vec<Option<String>>,
}

/// The "system" returns each mention string unchanged. Strict scoring
/// resolves it through the case-insensitive surface index, picking
/// uniformly under `seed` when several entities share it.
pub fn as_is_baseline(gold: &[MentionExample], catalog: &EntityCatalog, seed: u64) -> Result<AsIsResult> {
    let index = lenient_index(catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resolved = Vec::with_capacity(gold.len());
    let mut hits = 0;
    for g in gold {
        let pick = index.get(&normalize_surface(&g.mention)).and_then(|ids| {
            let i = if ids.len() > 1 { rng.gen_range(0..ids.len()) } else { 0 };
            ids.iter().nth(i).cloned()
        });
        if pick.as_deref() == Some(g.entity_id.as_str()) {
            hits += 1;
        }
        resolved.push(pick);
    }
    let surfaces: Vec<Option<String>> = gold.iter().map(|g| Some(g.mention.clone())).collect();
    Ok(AsIsResult {
        strict_accuracy: fraction(hits, gold.len()),
        lenient_accuracy: lenient_surface_accuracy(&surfaces, gold, catalog)?,
        resolved,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Strict,
    Lenient,
    AsIs,
    Ambiguity,
    TopK,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "strict" => Ok(Metric::Strict),
            "lenient" => Ok(Metric::Lenient),
            "asis" | "as_is" => Ok(Metric::AsIs),
            "ambiguity" => Ok(Metric::Ambiguity),
            "topk" => Ok(Metric::TopK),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<BTreeSet<Metric>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

pub fn parse_ks(list: &str) -> Result<Vec<usize>> {
    let mut ks = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| match s.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(Error::Config(format!("bad K value `{s}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

pub const ALL_METRICS: [Metric; 5] = [
    Metric::Strict,
    Metric::Lenient,
    Metric::AsIs,
    Metric::Ambiguity,
    Metric::TopK,
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mentions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lenient_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub as_is_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub as_is_lenient_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ambiguous_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict_on_ambiguous: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict_on_unambiguous: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub topk_oracle: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct") + "\n"
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        let _ = writeln!(s, "mentions\t{}", self.mentions);
        for (name, v) in [
            ("strict_accuracy", self.strict_accuracy),
            ("lenient_accuracy", self.lenient_accuracy),
            ("as_is_accuracy", self.as_is_accuracy),
            ("as_is_lenient_accuracy", self.as_is_lenient_accuracy),
            ("ambiguous_fraction", self.ambiguous_fraction),
            ("strict_on_ambiguous", self.strict_on_ambiguous),
            ("strict_on_unambiguous", self.strict_on_unambiguous),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{name}\t{v:.6}");
            }
        }
        for (k, v) in &self.topk_oracle {
            let _ = writeln!(s, "top{k}\t{v:.6}");
        }
        s
    }
}

/// Computes the requested metrics for one system's predictions.
pub fn evaluate(
    predictions: &[LinkResult],
    gold: &GoldDataset,
    catalog: &EntityCatalog,
    metrics: &BTreeSet<Metric>,
    ks: &[usize],
    seed: u64,
) -> Result<MetricReport> {
    let g = &gold.mentions;
    check_aligned(predictions.len(), g.len())?;
    let mut report = MetricReport {
        mentions: g.len(),
        ..Default::default()
    };
    if metrics.contains(&Metric::Strict) {
        report.strict_accuracy = Some(strict_accuracy(predictions, g)?);
    }
    if metrics.contains(&Metric::Lenient) {
        let surfaces = predicted_surfaces(predictions, catalog)?;
        report.lenient_accuracy = Some(lenient_surface_accuracy(&surfaces, g, catalog)?);
    }
    if metrics.contains(&Metric::AsIs) {
        let a = as_is_baseline(g, catalog, seed)?;
        report.as_is_accuracy = Some(a.strict_accuracy);
        report.as_is_lenient_accuracy = Some(a.lenient_accuracy);
    }
    if metrics.contains(&Metric::Ambiguity) {
        let (amb, unamb) = ambiguity_partition(g, catalog);
        report.ambiguous_fraction = Some(fraction(amb.len(), g.len()));
        if !amb.is_empty() {
            report.strict_on_ambiguous = Some(fraction(strict_hits(predictions, g, &amb), amb.len()));
        }
        if !unamb.is_empty() {
            report.strict_on_unambiguous =
                Some(fraction(strict_hits(predictions, g, &unamb), unamb.len()));
        }
    }
    if metrics.contains(&Metric::TopK) {
        report.topk_oracle = topk_oracle_accuracy(predictions, g, ks)?;
    }
    Ok(report)
}
