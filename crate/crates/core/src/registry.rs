//! Static data model of an audit: entities, label schemas and template corpora.
//!
//! Every file is line-delimited JSON, one record per line. Registries are
//! immutable once loaded and carry a content digest computed over their
//! canonical serialization, so identical inputs always hash identically.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::ContentDigest;
use crate::error::{AuditError, Result};

/// Literal entity placeholder used in templates.
pub const PLACEHOLDER: char = 'X';

/// Label ratio above which a corpus is reported as unbalanced.
pub const BALANCE_WARN_RATIO: f64 = 1.2;

pub const UNKNOWN_GROUP: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    Politician,
    Country,
    Company,
    Custom,
}

impl EntityClass {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityClass::Politician => "politician",
            EntityClass::Country => "country",
            EntityClass::Company => "company",
            EntityClass::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub names: BTreeMap<String, String>,
    pub entity_class: EntityClass,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Entity {
    pub fn name(&self, language: &str) -> Option<&str> {
        self.names.get(language).map(String::as_str)
    }

    /// Metadata lookup that also resolves the built-in `entity_class` key.
    pub fn tag(&self, key: &str) -> Option<&str> {
        if key == "entity_class" {
            return Some(self.entity_class.as_str());
        }
        self.metadata.get(key).map(String::as_str)
    }
}

/// Declared metadata keys and, optionally, their admissible values.
/// An empty value list admits any value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub keys: BTreeMap<String, Vec<String>>,
}

impl Taxonomy {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AuditError::Parse { line: e.line(), message: e.to_string() })
    }

    pub fn has_key(&self, key: &str) -> bool {
        key == "entity_class" || self.keys.contains_key(key)
    }

    fn check(&self, entity: &Entity) -> Result<()> {
        for (key, value) in &entity.metadata {
            let allowed = self.keys.get(key).ok_or_else(|| AuditError::UnknownMetadataKey {
                entity: entity.id.clone(),
                key: key.clone(),
            })?;
            if !allowed.is_empty() && !allowed.iter().any(|v| v == value) {
                return Err(AuditError::UnknownMetadataValue {
                    entity: entity.id.clone(),
                    key: key.clone(),
                    value: value.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EntityRegistry {
    entities: Vec<Entity>,
    index: HashMap<String, usize>,
    digest: String,
}

impl EntityRegistry {
    pub fn new(entities: Vec<Entity>) -> Result<Self> {
        if entities.is_empty() {
            return Err(AuditError::EmptyRegistry);
        }
        let mut index = HashMap::with_capacity(entities.len());
        let mut digest = ContentDigest::new();
        for (i, e) in entities.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(AuditError::DuplicateId(e.id.clone()));
            }
            digest.part(serde_json::to_vec(e).expect("entity serializes"));
        }
        Ok(Self { entities, index, digest: digest.finish() })
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn of_class(&self, class: EntityClass) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(move |e| e.entity_class == class)
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AuditError::Parse { line: i + 1, message: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record = serde_json::from_str(trimmed)
            .map_err(|e| AuditError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| AuditError::io(path, e))?;
    Ok(std::io::BufReader::new(f))
}

/// Loads an entity registry, rejecting on the first hard error.
///
/// Every entity must have a surface form for each of `languages`; metadata
/// keys must be declared in `taxonomy`. Missing metadata tags are allowed.
pub fn load_entities(reader: impl BufRead, taxonomy: &Taxonomy, languages: &[String]) -> Result<EntityRegistry> {
    let entities: Vec<Entity> = parse_lines(reader)?;
    let mut seen = BTreeSet::new();
    for e in &entities {
        if !seen.insert(e.id.as_str()) {
            return Err(AuditError::DuplicateId(e.id.clone()));
        }
        for lang in languages {
            if e.name(lang).map_or(true, |n| n.trim().is_empty()) {
                return Err(AuditError::MissingSurfaceForm { entity: e.id.clone(), language: lang.clone() });
            }
        }
        taxonomy.check(e)?;
    }
    EntityRegistry::new(entities)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub label_id: String,
    pub display: BTreeMap<String, String>,
    pub weight: f64,
    /// 1-based position in display order; assigned at load.
    #[serde(default)]
    pub numeric_alias: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task_id: String,
    /// Entity class the task applies to, when scoped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_class: Option<EntityClass>,
    pub role_instruction: BTreeMap<String, String>,
    pub labels: Vec<Label>,
}

impl LabelSchema {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.weight).collect()
    }

    pub fn label_index(&self, label_id: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.label_id == label_id)
    }

    pub fn display(&self, index: usize, language: &str) -> Option<&str> {
        self.labels.get(index)?.display.get(language).map(String::as_str)
    }

    fn validate(&mut self) -> Result<()> {
        let invalid = |message: String| AuditError::InvalidSchema { task: self.task_id.clone(), message };
        if self.labels.len() < 2 {
            return Err(invalid(format!("needs at least 2 labels, got {}", self.labels.len())));
        }
        if self.labels.len() > 9 {
            return Err(invalid("numeric aliases support at most 9 labels".into()));
        }
        let mut ids = BTreeSet::new();
        for l in &self.labels {
            if !ids.insert(l.label_id.as_str()) {
                return Err(invalid(format!("duplicate label_id \"{}\"", l.label_id)));
            }
            if !l.weight.is_finite() {
                return Err(invalid(format!("label \"{}\" has a non-finite weight", l.label_id)));
            }
        }
        // Scoring reads one decoded token, so first tokens must be unique per language.
        let languages: BTreeSet<&String> = self.labels.iter().flat_map(|l| l.display.keys()).collect();
        for lang in languages {
            let mut firsts = BTreeMap::new();
            for l in &self.labels {
                let Some(display) = l.display.get(lang) else { continue };
                let first = first_token(display);
                if let Some(prev) = firsts.insert(first.clone(), &l.label_id) {
                    return Err(invalid(format!(
                        "labels \"{prev}\" and \"{}\" share first token \"{first}\" in language \"{lang}\"",
                        l.label_id
                    )));
                }
            }
        }
        for (i, l) in self.labels.iter_mut().enumerate() {
            l.numeric_alias = (i + 1) as u8;
        }
        Ok(())
    }
}

/// Lower-cased first whitespace-delimited token of an answer string.
pub fn first_token(s: &str) -> String {
    s.split_whitespace().next().unwrap_or("").to_lowercase()
}

pub fn load_label_schema(record: &str) -> Result<LabelSchema> {
    let mut schema: LabelSchema =
        serde_json::from_str(record).map_err(|e| AuditError::Parse { line: e.line(), message: e.to_string() })?;
    schema.validate()?;
    Ok(schema)
}

#[derive(Debug, Clone, Default)]
pub struct SchemaSet {
    schemas: BTreeMap<String, LabelSchema>,
}

impl SchemaSet {
    pub fn load(reader: impl BufRead) -> Result<Self> {
        let raw: Vec<LabelSchema> = parse_lines(reader)?;
        let mut set = SchemaSet::default();
        for mut s in raw {
            s.validate()?;
            set.insert(s)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, schema: LabelSchema) -> Result<()> {
        if self.schemas.contains_key(&schema.task_id) {
            return Err(AuditError::DuplicateId(schema.task_id));
        }
        self.schemas.insert(schema.task_id.clone(), schema);
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Result<&LabelSchema> {
        self.schemas.get(task_id).ok_or_else(|| AuditError::UnknownTask(task_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabelSchema> {
        self.schemas.values()
    }

    pub fn digest(&self) -> String {
        let mut d = ContentDigest::new();
        for s in self.schemas.values() {
            d.part(serde_json::to_vec(s).expect("schema serializes"));
        }
        d.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Synthetic,
    RealBenchmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub task_id: String,
    pub language: String,
    pub text: String,
    pub intended_label: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub origin: Origin,
}

impl Template {
    pub fn placeholder_count(&self) -> usize {
        placeholder_positions(&self.text).len()
    }

    pub fn fill(&self, surface: &str) -> String {
        substitute(&self.text, surface)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Byte offsets of every standalone `X` token.
///
/// Boundaries are ASCII word boundaries so that `X` glued to CJK text
/// (e.g. `X的`) still counts as a placeholder.
pub fn placeholder_positions(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<char> = None;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c == PLACEHOLDER {
            let next = iter.peek().map(|&(_, n)| n);
            if !prev.is_some_and(is_word_char) && !next.is_some_and(is_word_char) {
                out.push(i);
            }
        }
        prev = Some(c);
    }
    out
}

/// Replaces every placeholder occurrence with `surface`.
pub fn substitute(text: &str, surface: &str) -> String {
    let positions = placeholder_positions(text);
    let mut out = String::with_capacity(text.len() + positions.len() * surface.len());
    let mut last = 0;
    for p in positions {
        out.push_str(&text[last..p]);
        out.push_str(surface);
        last = p + PLACEHOLDER.len_utf8();
    }
    out.push_str(&text[last..]);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceGroup {
    pub task_id: String,
    pub language: String,
    pub counts: BTreeMap<String, usize>,
    /// max/min label count; infinite when some label has no template.
    pub ratio: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub groups: Vec<BalanceGroup>,
    /// Templates carrying more than one placeholder (tolerated, reported).
    pub multi_placeholder: Vec<String>,
}

impl BalanceReport {
    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().filter_map(|g| g.warning.as_deref())
    }
}

#[derive(Debug, Clone)]
pub struct TemplateCorpus {
    templates: Vec<Template>,
    index: HashMap<String, usize>,
    digest: String,
}

impl TemplateCorpus {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        let mut index = HashMap::with_capacity(templates.len());
        let mut digest = ContentDigest::new();
        for (i, t) in templates.iter().enumerate() {
            if index.insert(t.id.clone(), i).is_some() {
                return Err(AuditError::DuplicateId(t.id.clone()));
            }
            digest.part(serde_json::to_vec(t).expect("template serializes"));
        }
        Ok(Self { templates, index, digest: digest.finish() })
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.index.get(id).map(|&i| &self.templates[i])
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Templates of one task in one language, in corpus order.
    pub fn for_task<'a>(&'a self, task_id: &'a str, language: &'a str) -> impl Iterator<Item = &'a Template> + 'a {
        self.templates.iter().filter(move |t| t.task_id == task_id && t.language == language)
    }

    pub fn balance(&self, schemas: &SchemaSet) -> BalanceReport {
        let mut groups: BTreeMap<(String, String), BTreeMap<String, usize>> = BTreeMap::new();
        let mut multi = Vec::new();
        for t in &self.templates {
            let counts = groups.entry((t.task_id.clone(), t.language.clone())).or_insert_with(|| {
                schemas
                    .get(&t.task_id)
                    .map(|s| s.labels.iter().map(|l| (l.label_id.clone(), 0)).collect())
                    .unwrap_or_default()
            });
            *counts.entry(t.intended_label.clone()).or_default() += 1;
            if t.placeholder_count() > 1 {
                multi.push(t.id.clone());
            }
        }
        let groups = groups
            .into_iter()
            .map(|((task_id, language), counts)| {
                let max = counts.values().copied().max().unwrap_or(0);
                let min = counts.values().copied().min().unwrap_or(0);
                let ratio = if min == 0 { f64::INFINITY } else { max as f64 / min as f64 };
                let warning = (ratio > BALANCE_WARN_RATIO).then(|| {
                    format!("task {task_id} ({language}): label ratio {ratio:.3} exceeds {BALANCE_WARN_RATIO}")
                });
                BalanceGroup { task_id, language, counts, ratio, warning }
            })
            .collect();
        BalanceReport { groups, multi_placeholder: multi }
    }
}

/// Loads a template corpus and reports label balance per (task, language).
pub fn load_templates(
    reader: impl BufRead,
    schemas: &SchemaSet,
    languages: &[String],
) -> Result<(TemplateCorpus, BalanceReport)> {
    let templates: Vec<Template> = parse_lines(reader)?;
    for t in &templates {
        validate_template(t, schemas, languages)?;
    }
    let corpus = TemplateCorpus::new(templates)?;
    let report = corpus.balance(schemas);
    for w in report.warnings() {
        tracing::warn!("{w}");
    }
    Ok((corpus, report))
}

pub fn validate_template(t: &Template, schemas: &SchemaSet, languages: &[String]) -> Result<()> {
    let schema = schemas.get(&t.task_id)?;
    if t.placeholder_count() == 0 {
        return Err(AuditError::MissingPlaceholder(t.id.clone()));
    }
    if schema.label_index(&t.intended_label).is_none() {
        return Err(AuditError::UnknownLabel {
            template: t.id.clone(),
            task: t.task_id.clone(),
            label: t.intended_label.clone(),
        });
    }
    if !languages.is_empty() && !languages.contains(&t.language) {
        return Err(AuditError::UndeclaredLanguage { template: t.id.clone(), language: t.language.clone() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegistrySummary {
    pub key: String,
    pub counts: BTreeMap<String, usize>,
}

impl RegistrySummary {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Exhaustive per-value counts of one metadata key; untagged entities land
/// in the `unknown` bucket.
pub fn summarize(registry: &EntityRegistry, key: &str, taxonomy: &Taxonomy) -> Result<RegistrySummary> {
    if !taxonomy.has_key(key) {
        return Err(AuditError::UnknownGroupingKey(key.to_string()));
    }
    let mut counts = BTreeMap::new();
    for e in registry.entities() {
        let value = e.tag(key).unwrap_or(UNKNOWN_GROUP);
        *counts.entry(value.to_string()).or_default() += 1;
    }
    Ok(RegistrySummary { key: key.to_string(), counts })
}
