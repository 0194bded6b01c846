//! Synthetic audit inputs for mock runs, benchmarks and tests.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::registry::{
    load_label_schema, Entity, EntityClass, EntityRegistry, LabelSchema, Origin, SchemaSet, Template, TemplateCorpus,
};
use crate::runner::plan::AuditData;

const SUBJECTS: &[&str] = &["the board", "analysts", "regulators", "voters", "critics", "partners", "investors"];
const VERBS: &[&str] = &["praised", "questioned", "reviewed", "discussed", "welcomed", "criticized", "examined"];
const OBJECTS: &[&str] = &["latest plan", "annual report", "new policy", "recent deal", "budget", "strategy"];

/// Three-label sentiment schema with weights -1, 0, +1.
pub fn sentiment_schema(task_id: &str, languages: &[String]) -> LabelSchema {
    let display = |en: &str| -> serde_json::Value {
        languages.iter().map(|l| (l.clone(), serde_json::Value::String(en.to_string()))).collect()
    };
    let roles: serde_json::Value = languages
        .iter()
        .map(|l| (l.clone(), serde_json::Value::String(format!("Classify the sentiment towards the target ({task_id})."))))
        .collect();
    let record = serde_json::json!({
        "task_id": task_id,
        "role_instruction": roles,
        "labels": [
            {"label_id": "negative", "display": display("Negative"), "weight": -1.0},
            {"label_id": "neutral", "display": display("Neutral"), "weight": 0.0},
            {"label_id": "positive", "display": display("Positive"), "weight": 1.0},
        ]
    });
    load_label_schema(&record.to_string()).expect("fixture schema is valid")
}

pub fn entities(n: usize, class: EntityClass, languages: &[String]) -> Vec<Entity> {
    (0..n)
        .map(|i| Entity {
            id: format!("e{i:03}"),
            names: languages.iter().map(|l| (l.clone(), format!("Entity{i:03}"))).collect(),
            entity_class: class,
            metadata: BTreeMap::new(),
        })
        .collect()
}

/// `n` templates for one task with intended labels cycling through the
/// schema, so label counts differ by at most one.
pub fn templates(schema: &LabelSchema, language: &str, n: usize, prefix: &str, seed: u64) -> Vec<Template> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = &schema.labels[i % schema.len()];
            let text = format!(
                "{} {} the {} of X ({prefix} {i}).",
                SUBJECTS.choose(&mut rng).unwrap(),
                VERBS.choose(&mut rng).unwrap(),
                OBJECTS.choose(&mut rng).unwrap(),
            );
            Template {
                id: format!("{prefix}-{}-{language}-{i:04}", schema.task_id),
                task_id: schema.task_id.clone(),
                language: language.to_string(),
                text,
                intended_label: label.label_id.clone(),
                keywords: Vec::new(),
                origin: Origin::Synthetic,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub entities: usize,
    pub tasks: usize,
    pub templates_per_task: usize,
    pub languages: Vec<String>,
    /// Distinguishes independently generated corpora.
    pub corpus_prefix: String,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            entities: 10,
            tasks: 1,
            templates_per_task: 20,
            languages: vec!["en".into()],
            corpus_prefix: "syn".into(),
            seed: 0,
        }
    }
}

pub fn task_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("task{i}")).collect()
}

/// Entities, one sentiment schema per task and a balanced corpus.
pub fn audit_data(spec: &FixtureSpec) -> Result<AuditData> {
    let mut schemas = SchemaSet::default();
    let mut all = Vec::new();
    for (t, task) in task_ids(spec.tasks).iter().enumerate() {
        let schema = sentiment_schema(task, &spec.languages);
        for (l, lang) in spec.languages.iter().enumerate() {
            let seed = spec.seed ^ ((t as u64) << 32) ^ ((l as u64) << 16);
            all.extend(templates(&schema, lang, spec.templates_per_task, &spec.corpus_prefix, seed));
        }
        schemas.insert(schema)?;
    }
    Ok(AuditData {
        entities: EntityRegistry::new(entities(spec.entities, EntityClass::Custom, &spec.languages))?,
        schemas,
        corpus: TemplateCorpus::new(all)?,
    })
}
