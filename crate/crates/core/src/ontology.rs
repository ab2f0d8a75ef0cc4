//! Entity catalog loading, surface-form indexing and entity-centric reference rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Joins aliases inside a rendered reference text.
pub const ALIAS_DELIMITER: &str = " ; ";

/// One ontology record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stn: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Entity {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Entity {
            id: id.into(),
            name: name.into(),
            aliases: Vec::new(),
            stn: None,
            semtype: None,
            description: None,
        }
    }

    pub fn with_aliases<I, S>(mut self, aliases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.aliases = aliases.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_stn(mut self, stn: impl Into<String>) -> Self {
        self.stn = Some(stn.into());
        self
    }

    pub fn with_semtype(mut self, semtype: impl Into<String>) -> Self {
        self.semtype = Some(semtype.into());
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    /// Name followed by aliases.
    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.name.as_str()).chain(self.aliases.iter().map(String::as_str))
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidEntity {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(Error::MissingField {
                field: "id",
                context: Some("empty string".into()),
            });
        }
        if self.name.is_empty() {
            return Err(invalid("empty name"));
        }
        let mut seen = HashSet::new();
        for alias in &self.aliases {
            if alias == &self.name {
                return Err(invalid("alias repeats the canonical name"));
            }
            if !seen.insert(alias.as_str()) {
                return Err(invalid(&format!("duplicate alias `{alias}`")));
            }
        }
        Ok(())
    }
}

/// Wire shape used while loading, so that absent required keys are
/// reported as such rather than as generic decode failures.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntity {
    id: Option<String>,
    name: Option<String>,
    #[serde(default)]
    aliases: Vec<String>,
    stn: Option<String>,
    semtype: Option<String>,
    description: Option<String>,
}

/// The linking target space: every entity keyed by id, in load order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityCatalog {
    entities: Vec<Entity>,
    by_id: HashMap<String, usize>,
}

impl EntityCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entities(entities: impl IntoIterator<Item = Entity>) -> Result<Self> {
        let mut catalog = Self::new();
        for entity in entities {
            catalog.insert(entity)?;
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, entity: Entity) -> Result<()> {
        entity.validate()?;
        if self.by_id.contains_key(&entity.id) {
            return Err(Error::DuplicateId(entity.id));
        }
        self.by_id.insert(entity.id.clone(), self.entities.len());
        self.entities.push(entity);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Entity> {
        self.by_id
            .get(id)
            .map(|&i| &self.entities[i])
            .ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|e| e.id.as_str())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::load_from(BufReader::new(file), path)
    }

    pub fn load_from<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut catalog = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawEntity = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
            let location = || Some(format!("{}:{line_no}", path.display()));
            let id = raw.id.ok_or_else(|| Error::MissingField {
                field: "id",
                context: location(),
            })?;
            let name = raw.name.ok_or_else(|| Error::MissingField {
                field: "name",
                context: location(),
            })?;
            catalog.insert(Entity {
                id,
                name,
                aliases: raw.aliases,
                stn: raw.stn,
                semtype: raw.semtype,
                description: raw.description,
            })?;
        }
        Ok(catalog)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        self.save_to(&mut writer).map_err(|e| Error::io(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_to<W: Write>(&self, writer: &mut W) -> std::io::Result<()> {
        for entity in &self.entities {
            serde_json::to_writer(&mut *writer, entity)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Surface form to entity-id set. Keys are exact strings unless the index
/// was built with a normalizing key function.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SurfaceIndex {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl SurfaceIndex {
    /// Case-preserving index over names, plus aliases when `include_aliases`.
    /// Names and aliases share one pool.
    pub fn build(catalog: &EntityCatalog, include_aliases: bool) -> Self {
        Self::build_with(catalog, include_aliases, |s| s.to_string())
    }

    pub fn build_with<F>(catalog: &EntityCatalog, include_aliases: bool, key: F) -> Self
    where
        F: Fn(&str) -> String,
    {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for entity in catalog.iter() {
            let surfaces: Box<dyn Iterator<Item = &str>> = if include_aliases {
                Box::new(entity.surfaces())
            } else {
                Box::new(std::iter::once(entity.name.as_str()))
            };
            for surface in surfaces {
                map.entry(key(surface))
                    .or_default()
                    .insert(entity.id.clone());
            }
        }
        SurfaceIndex { map }
    }

    pub fn get(&self, surface: &str) -> Option<&BTreeSet<String>> {
        self.map.get(surface)
    }

    pub fn is_ambiguous(&self, surface: &str) -> bool {
        self.map.get(surface).is_some_and(|ids| ids.len() >= 2)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.map.iter().map(|(s, ids)| (s.as_str(), ids))
    }

    /// Surfaces resolving to exactly one entity.
    pub fn unambiguous_surfaces(&self) -> BTreeMap<String, String> {
        self.map
            .iter()
            .filter(|(_, ids)| ids.len() == 1)
            .map(|(s, ids)| (s.clone(), ids.iter().next().cloned().unwrap_or_default()))
            .collect()
    }

    /// Ambiguous surfaces as `(surface, count, ids)` rows, sorted by surface.
    pub fn ambiguity_report(&self) -> Vec<(String, usize, Vec<String>)> {
        self.map
            .iter()
            .filter(|(_, ids)| ids.len() >= 2)
            .map(|(s, ids)| (s.clone(), ids.len(), ids.iter().cloned().collect()))
            .collect()
    }
}

pub fn build_surface_index(catalog: &EntityCatalog, include_aliases: bool) -> SurfaceIndex {
    SurfaceIndex::build(catalog, include_aliases)
}

pub fn unambiguous_surfaces(index: &SurfaceIndex) -> BTreeMap<String, String> {
    index.unambiguous_surfaces()
}

/// Renders `[CLS] stn [SEP] semtype [SEP] aliases [SEP]`, optionally
/// followed by `description [SEP]`. Absent fields leave an empty segment.
pub fn entity_reference_text(entity: &Entity, include_description: bool) -> String {
    let aliases = entity.aliases.join(ALIAS_DELIMITER);
    let mut parts: Vec<&str> = vec![
        CLS,
        entity.stn.as_deref().unwrap_or(""),
        SEP,
        entity.semtype.as_deref().unwrap_or(""),
        SEP,
        &aliases,
        SEP,
    ];
    if include_description {
        if let Some(description) = entity.description.as_deref() {
            parts.push(description);
            parts.push(SEP);
        }
    }
    parts
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace tokens of [`entity_reference_text`].
pub fn entity_reference_tokens(entity: &Entity, include_description: bool) -> Vec<String> {
    entity_reference_text(entity, include_description)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn er_gene() -> Entity {
        Entity::new("C_ER", "ER gene")
            .with_aliases(["ER", "estrogen receptor"])
            .with_stn("A1.2.3.5")
            .with_semtype("Gene or Genome")
    }

    #[test]
    fn load_single_record() {
        let data = r#"{"id":"C0037813","name":"Mass Spectrometry"}"#;
        let catalog = EntityCatalog::load_from(data.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(catalog.len(), 1);
        assert_eq!(catalog.get("C0037813").unwrap().name, "Mass Spectrometry");
    }

    #[test]
    fn load_empty() {
        let catalog = EntityCatalog::load_from("".as_bytes(), Path::new("mem")).unwrap();
        assert!(catalog.is_empty());
    }

    #[test]
    fn duplicate_id_rejected() {
        let data = "{\"id\":\"X1\",\"name\":\"a\"}\n{\"id\":\"X1\",\"name\":\"b\"}\n";
        let err = EntityCatalog::load_from(data.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "X1"), "{err}");
    }

    #[test]
    fn parse_error_carries_line() {
        let data = "{\"id\":\"X1\",\"name\":\"a\"}\n{not json\n";
        match EntityCatalog::load_from(data.as_bytes(), Path::new("mem")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_name_reported() {
        let data = "{\"id\":\"X1\"}\n";
        let err = EntityCatalog::load_from(data.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::MissingField { field: "name", .. }), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let data = "{\"id\":\"X1\",\"name\":\"a\",\"cui\":\"c\"}\n";
        assert!(matches!(
            EntityCatalog::load_from(data.as_bytes(), Path::new("mem")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn alias_equal_to_name_rejected() {
        let e = Entity::new("A", "x").with_aliases(["x"]);
        assert!(EntityCatalog::from_entities([e]).is_err());
    }

    #[test]
    fn unknown_id_is_error() {
        let catalog = EntityCatalog::from_entities([Entity::new("A", "a")]).unwrap();
        assert!(matches!(catalog.get("B"), Err(Error::UnknownEntity(_))));
    }

    #[test]
    fn shared_alias_is_ambiguous() {
        let catalog = EntityCatalog::from_entities([
            Entity::new("A", "ER gene").with_aliases(["ER"]),
            Entity::new("B", "Emergency Room").with_aliases(["ER"]),
        ])
        .unwrap();
        let index = build_surface_index(&catalog, true);
        let ids: Vec<_> = index.get("ER").unwrap().iter().cloned().collect();
        assert_eq!(ids, ["A", "B"]);
        assert!(index.is_ambiguous("ER"));

        let names_only = build_surface_index(&catalog, false);
        assert!(names_only.get("ER").is_none());
        assert_eq!(names_only.len(), 2);
    }

    #[test]
    fn single_entity_index() {
        let catalog = EntityCatalog::from_entities([Entity::new("A", "asthma")]).unwrap();
        let index = build_surface_index(&catalog, false);
        assert_eq!(index.len(), 1);
        assert_eq!(index.get("asthma").unwrap().len(), 1);
    }

    #[test]
    fn case_is_preserved() {
        let catalog =
            EntityCatalog::from_entities([Entity::new("A", "PDF"), Entity::new("B", "pdf")])
                .unwrap();
        let index = build_surface_index(&catalog, true);
        // naive construction: one key per distinct exact string
        let mut naive: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in catalog.iter() {
            naive.entry(e.name.as_str()).or_default().push(e.id.as_str());
        }
        assert_eq!(index.len(), naive.len());
        assert_eq!(index.len(), 2);
        assert!(!index.is_ambiguous("PDF"));
    }

    #[test]
    fn unambiguous_filter() {
        let catalog = EntityCatalog::from_entities([
            Entity::new("e1", "Mass Spectrometry").with_aliases(["MS"]),
            Entity::new("e2", "Millisecond").with_aliases(["MS"]),
        ])
        .unwrap();
        let index = build_surface_index(&catalog, true);
        let unamb = unambiguous_surfaces(&index);
        assert_eq!(unamb.get("Mass Spectrometry").map(String::as_str), Some("e1"));
        assert!(!unamb.contains_key("MS"));
        assert_eq!(unamb.len(), 2);
    }

    #[test]
    fn all_ambiguous_gives_empty() {
        let catalog = EntityCatalog::from_entities([
            Entity::new("e1", "x"),
            Entity::new("e2", "y").with_aliases(["x"]),
            Entity::new("e3", "z").with_aliases(["x", "y"]),
        ])
        .unwrap();
        let index = build_surface_index(&catalog, true);
        // x: e1,e2,e3; y: e2,e3; z: e3 only
        let unamb = unambiguous_surfaces(&index);
        assert_eq!(unamb.len(), 1);
        assert_eq!(unamb["z"], "e3");

        let catalog = EntityCatalog::from_entities([
            Entity::new("e1", "a").with_aliases(["b"]),
            Entity::new("e2", "b").with_aliases(["a"]),
        ])
        .unwrap();
        assert!(unambiguous_surfaces(&build_surface_index(&catalog, true)).is_empty());
    }

    #[test]
    fn reference_text_full() {
        assert_eq!(
            entity_reference_text(&er_gene(), false),
            "[CLS] A1.2.3.5 [SEP] Gene or Genome [SEP] ER ; estrogen receptor [SEP]"
        );
    }

    #[test]
    fn reference_text_empty_fields() {
        assert_eq!(
            entity_reference_text(&Entity::new("X", "x"), true),
            "[CLS] [SEP] [SEP] [SEP]"
        );
    }

    #[test]
    fn reference_text_description() {
        let e = er_gene().with_description("Nuclear hormone receptor for estrogen.");
        let base = entity_reference_text(&e, false);
        let full = entity_reference_text(&e, true);
        assert_eq!(
            full,
            format!("{base} Nuclear hormone receptor for estrogen. [SEP]")
        );
        let after_third_sep = full.split(SEP).nth(3).unwrap();
        assert_eq!(after_third_sep, " Nuclear hormone receptor for estrogen. ");
        assert_eq!(full.matches(SEP).count(), 4);
    }
}
