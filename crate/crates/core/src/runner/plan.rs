use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::digest::ContentDigest;
use crate::error::{AuditError, Result};
use crate::gateway::{PromptVariant, RunConfig};
use crate::registry::{EntityRegistry, SchemaSet, TemplateCorpus};

/// Audit inputs shared by planning, execution and scoring.
#[derive(Debug, Clone)]
pub struct AuditData {
    pub entities: EntityRegistry,
    pub schemas: SchemaSet,
    pub corpus: TemplateCorpus,
}

/// Axes of the run: every task runs under every model × language × variant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigMatrix {
    /// Tasks to run; empty means every loaded schema.
    #[serde(default)]
    pub tasks: Vec<String>,
    pub models: Vec<String>,
    pub languages: Vec<String>,
    pub variants: Vec<PromptVariant>,
}

impl ConfigMatrix {
    pub fn is_empty(&self) -> bool {
        self.models.is_empty() || self.languages.is_empty() || self.variants.is_empty()
    }

    pub fn configs_for(&self, task_id: &str) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for model in &self.models {
            for language in &self.languages {
                for &variant in &self.variants {
                    out.push(RunConfig {
                        task_id: task_id.to_string(),
                        model_id: model.clone(),
                        language: language.clone(),
                        variant,
                    });
                }
            }
        }
        out
    }
}

/// Size factors of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub task_id: String,
    /// Entity domain the task is scoped to (e.g. "politician").
    pub domain: String,
    pub entity_count: u64,
    /// Templates per language.
    pub templates: BTreeMap<String, u64>,
}

impl TaskPlan {
    /// Same template count in every language.
    pub fn uniform(task_id: &str, domain: &str, entity_count: u64, languages: &[String], templates: u64) -> Self {
        Self {
            task_id: task_id.into(),
            domain: domain.into(),
            entity_count,
            templates: languages.iter().map(|l| (l.clone(), templates)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTotal {
    pub task_id: String,
    pub domain: String,
    /// Templates in one language (the first declared language).
    pub templates: u64,
    pub points: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSubtotal {
    pub domain: String,
    pub entity_count: u64,
    pub templates: u64,
    pub points: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Digest over every input digest and the config list.
    pub manifest_id: String,
    pub entity_digest: String,
    pub template_digest: String,
    pub schema_digest: String,
    pub configs: Vec<RunConfig>,
    pub tasks: Vec<TaskTotal>,
    pub domains: Vec<DomainSubtotal>,
    pub planned_total: u64,
    /// Unix seconds; not part of the manifest id.
    pub created_at: u64,
}

impl RunManifest {
    /// Seed for every random choice made during the run.
    pub fn seed(&self) -> u64 {
        u64::from_str_radix(&self.manifest_id[..16], 16).expect("hex digest")
    }
}

/// Plans a run from size factors alone:
/// `N = Σ_T Σ_config |E_T| · |S^T(language)|`.
pub fn plan_counts(tasks: &[TaskPlan], matrix: &ConfigMatrix) -> Result<(Vec<RunConfig>, Vec<TaskTotal>, Vec<DomainSubtotal>, u64)> {
    if matrix.is_empty() || tasks.is_empty() {
        return Err(AuditError::EmptyConfigMatrix);
    }
    let mut configs = Vec::new();
    let mut totals = Vec::new();
    let mut domains: BTreeMap<&str, DomainSubtotal> = BTreeMap::new();
    let mut grand = 0u64;
    for t in tasks {
        let task_configs = matrix.configs_for(&t.task_id);
        let mut points = 0u64;
        for c in &task_configs {
            let templates = t.templates.get(&c.language).copied().unwrap_or(0);
            points = points
                .checked_add(t.entity_count * templates)
                .ok_or_else(|| AuditError::Invalid("planned total overflows u64".into()))?;
        }
        configs.extend(task_configs);
        let templates = matrix.languages.first().and_then(|l| t.templates.get(l)).copied().unwrap_or(0);
        let d = domains.entry(&t.domain).or_insert_with(|| DomainSubtotal {
            domain: t.domain.clone(),
            entity_count: t.entity_count,
            templates: 0,
            points: 0,
        });
        d.entity_count = d.entity_count.max(t.entity_count);
        d.templates += templates;
        d.points += points;
        grand += points;
        totals.push(TaskTotal { task_id: t.task_id.clone(), domain: t.domain.clone(), templates, points });
    }
    configs.sort();
    Ok((configs, totals, domains.into_values().collect(), grand))
}

/// Size factors of the loaded data under `matrix`.
pub fn task_plans(data: &AuditData, matrix: &ConfigMatrix) -> Result<Vec<TaskPlan>> {
    let task_ids: Vec<String> = if matrix.tasks.is_empty() {
        data.schemas.iter().map(|s| s.task_id.clone()).collect()
    } else {
        matrix.tasks.clone()
    };
    let mut plans = Vec::with_capacity(task_ids.len());
    for task_id in task_ids {
        let schema = data.schemas.get(&task_id)?;
        let (domain, entity_count) = match schema.entity_class {
            Some(class) => (class.as_str().to_string(), data.entities.of_class(class).count() as u64),
            None => ("all".to_string(), data.entities.len() as u64),
        };
        let templates = matrix
            .languages
            .iter()
            .map(|l| (l.clone(), data.corpus.for_task(&task_id, l).count() as u64))
            .collect();
        plans.push(TaskPlan { task_id, domain, entity_count, templates });
    }
    Ok(plans)
}

pub fn plan_run(data: &AuditData, matrix: &ConfigMatrix) -> Result<RunManifest> {
    let plans = task_plans(data, matrix)?;
    let (configs, tasks, domains, planned_total) = plan_counts(&plans, matrix)?;
    let schema_digest = data.schemas.digest();
    let mut id = ContentDigest::new();
    id.part(data.entities.digest()).part(data.corpus.digest()).part(&schema_digest);
    for c in &configs {
        id.part(serde_json::to_vec(c).expect("config serializes"));
    }
    Ok(RunManifest {
        manifest_id: id.finish(),
        entity_digest: data.entities.digest().to_string(),
        template_digest: data.corpus.digest().to_string(),
        schema_digest,
        configs,
        tasks,
        domains,
        planned_total,
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn single_point() {
        let m = ConfigMatrix {
            tasks: vec![],
            models: vec!["m".into()],
            languages: langs(1),
            variants: vec![PromptVariant::ZS_TEXT],
        };
        let (_, _, _, n) = plan_counts(&[TaskPlan::uniform("t", "d", 1, &langs(1), 1)], &m).unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn two_tasks_shared_entities() {
        let m = ConfigMatrix {
            tasks: vec![],
            models: vec!["m1".into(), "m2".into()],
            languages: langs(1),
            variants: vec![PromptVariant::ZS_TEXT],
        };
        let tasks = [TaskPlan::uniform("a", "d", 10, &langs(1), 100), TaskPlan::uniform("b", "d", 10, &langs(1), 100)];
        let (configs, _, domains, n) = plan_counts(&tasks, &m).unwrap();
        assert_eq!(n, 4_000);
        assert_eq!(configs.len(), 4);
        assert_eq!(domains[0].templates, 200);
    }

    #[test]
    fn empty_matrix() {
        let m = ConfigMatrix::default();
        assert!(matches!(plan_counts(&[TaskPlan::uniform("t", "d", 1, &[], 1)], &m), Err(AuditError::EmptyConfigMatrix)));
    }
}
