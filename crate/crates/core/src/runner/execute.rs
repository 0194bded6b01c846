use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::exec::{with_pool, Exec};
use crate::gateway::{assemble_prompt, Backend, FewShotBank, QueryRequest, QueryStatus, RunConfig};
use crate::registry::{Entity, Template};
use crate::runner::plan::{AuditData, RunManifest};
use crate::runner::store::ObservationStore;
use crate::scoring::{Observation, ObservationKey};

#[derive(Debug, Clone)]
pub struct ExecuteOptions {
    /// Maximum in-flight backend calls.
    pub concurrency: usize,
    /// Keys dispatched per commit batch.
    pub chunk_size: usize,
    /// Stop after this many records have been appended (simulated kill).
    pub stop_after: Option<u64>,
    pub exec: Exec,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        Self { concurrency: 8, chunk_size: 256, stop_after: None, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigCoverage {
    pub config: RunConfig,
    pub planned: u64,
    pub ok: u64,
    pub failed: u64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedKey {
    pub key: ObservationKey,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub manifest_id: String,
    pub planned: u64,
    /// Keys sent to the backend in this invocation.
    pub attempted: u64,
    pub ok: u64,
    pub failed: u64,
    pub per_config: Vec<ConfigCoverage>,
    pub failures: Vec<FailedKey>,
    /// False when stopped early.
    pub finished: bool,
}

impl CompletionReport {
    pub fn coverage(&self) -> f64 {
        if self.planned == 0 {
            0.0
        } else {
            self.ok as f64 / self.planned as f64
        }
    }
}

/// One (entity, template, config) unit of work.
#[derive(Debug, Clone, Copy)]
pub struct WorkItem<'a> {
    pub config: &'a RunConfig,
    pub template: &'a Template,
    pub entity: &'a Entity,
}

impl WorkItem<'_> {
    pub fn key(&self) -> ObservationKey {
        ObservationKey {
            entity_id: self.entity.id.clone(),
            template_id: self.template.id.clone(),
            model_id: self.config.model_id.clone(),
            language: self.config.language.clone(),
            variant: self.config.variant,
        }
    }
}

/// Every key of the manifest, in config, template, entity order.
pub fn enumerate_keys<'a>(manifest: &'a RunManifest, data: &'a AuditData) -> Result<Vec<WorkItem<'a>>> {
    let mut out = Vec::new();
    for config in &manifest.configs {
        let schema = data.schemas.get(&config.task_id)?;
        let entities: Vec<&Entity> = match schema.entity_class {
            Some(class) => data.entities.of_class(class).collect(),
            None => data.entities.entities().iter().collect(),
        };
        for template in data.corpus.for_task(&config.task_id, &config.language) {
            for &entity in &entities {
                out.push(WorkItem { config, template, entity });
            }
        }
    }
    Ok(out)
}

pub fn verify_digests(manifest: &RunManifest, data: &AuditData) -> Result<()> {
    let checks = [
        ("entities", manifest.entity_digest.as_str(), data.entities.digest().to_string()),
        ("templates", manifest.template_digest.as_str(), data.corpus.digest().to_string()),
        ("schemas", manifest.schema_digest.as_str(), data.schemas.digest()),
    ];
    for (what, planned, actual) in checks {
        if planned != actual {
            return Err(AuditError::DigestMismatch(what.to_string()));
        }
    }
    Ok(())
}

fn run_one(item: &WorkItem<'_>, data: &AuditData, bank: &FewShotBank, backend: &dyn Backend) -> Observation {
    let key = item.key();
    let task_id = item.config.task_id.clone();
    let failed = |reason: String| Observation {
        key: key.clone(),
        task_id: task_id.clone(),
        posterior: Vec::new(),
        predicted: None,
        status: QueryStatus::Failed(reason),
    };
    let schema = match data.schemas.get(&task_id) {
        Ok(s) => s,
        Err(e) => return failed(e.to_string()),
    };
    let prompt = match assemble_prompt(item.template, item.entity, schema, item.config, Some(bank)) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let request = QueryRequest {
        prompt: &prompt.text,
        model_id: &item.config.model_id,
        entity: item.entity,
        template: item.template,
        schema,
        variant: item.config.variant,
        expected_answers: &prompt.expected_answers,
    };
    let logprobs = backend.query(&request);
    Observation::from_logprobs(key, task_id, &logprobs, &prompt.expected_answers)
}

/// Runs every key not yet ok in the store. Backend calls run concurrently;
/// results are committed by the single writer in key order, so the store
/// content does not depend on the concurrency budget.
pub fn execute(
    manifest: &RunManifest,
    data: &AuditData,
    backend: &dyn Backend,
    store: &mut ObservationStore,
    options: &ExecuteOptions,
) -> Result<CompletionReport> {
    verify_digests(manifest, data)?;
    let items = enumerate_keys(manifest, data)?;
    let bank = FewShotBank::from_corpus(&data.corpus, manifest.seed());
    let pending: Vec<&WorkItem<'_>> = items.iter().filter(|w| !store.index().is_done(&w.key())).collect();
    let budget = options.stop_after.unwrap_or(u64::MAX);
    let chunk = options.chunk_size.max(1);
    let exec = options.exec;

    let (attempted, stopped) = with_pool(exec, options.concurrency, || -> Result<(u64, bool)> {
        let mut attempted = 0u64;
        for batch in pending.chunks(chunk) {
            let remaining = budget.saturating_sub(store.appended());
            if remaining == 0 {
                return Ok((attempted, true));
            }
            let batch = &batch[..batch.len().min(remaining.min(usize::MAX as u64) as usize)];
            let results = exec.map(batch, |w| run_one(w, data, &bank, backend));
            attempted += results.len() as u64;
            for obs in results {
                store.append(obs)?;
            }
            store.flush()?;
        }
        Ok((attempted, store.appended() >= budget && attempted < pending.len() as u64))
    })?;

    let mut per_config: BTreeMap<&RunConfig, ConfigCoverage> = BTreeMap::new();
    let mut failures = Vec::new();
    for w in &items {
        let c = per_config.entry(w.config).or_insert_with(|| ConfigCoverage {
            config: w.config.clone(),
            planned: 0,
            ok: 0,
            failed: 0,
            coverage: 0.0,
        });
        c.planned += 1;
        let key = w.key();
        match store.index().get(&key).map(|o| &o.status) {
            Some(QueryStatus::Ok) => c.ok += 1,
            Some(QueryStatus::Failed(reason)) => {
                c.failed += 1;
                failures.push(FailedKey { reason: reason.clone(), key });
            }
            None => {}
        }
    }
    let per_config: Vec<ConfigCoverage> = per_config
        .into_values()
        .map(|mut c| {
            c.coverage = if c.planned == 0 { 0.0 } else { c.ok as f64 / c.planned as f64 };
            c
        })
        .collect();
    let ok = per_config.iter().map(|c| c.ok).sum();
    let failed = per_config.iter().map(|c| c.failed).sum();
    Ok(CompletionReport {
        manifest_id: manifest.manifest_id.clone(),
        planned: items.len() as u64,
        attempted,
        ok,
        failed,
        per_config,
        failures,
        finished: !stopped,
    })
}
