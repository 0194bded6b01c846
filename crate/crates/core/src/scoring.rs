//! Label posteriors and the entity-bias score stack.
//!
//! raw score `s(e, t)` is the posterior expectation of label weights; within
//! one context (template × run config) scores are z-normalized across
//! entities into `δ`; `Δ(e, T)` averages `δ` over a task's templates and the
//! global `Δ(e)` averages task scores with equal weight per task.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::exec::Exec;
use crate::gateway::{PromptVariant, QueryStatus, RunConfig, TokenLogprobs};
use crate::registry::{first_token, EntityRegistry, SchemaSet, Taxonomy, TemplateCorpus, UNKNOWN_GROUP};

/// Standard deviations below this are treated as zero.
pub const SIGMA_EPS: f64 = 1e-12;

/// Contexts with fewer ok entities than this fraction of the population are dropped.
pub const MIN_CONTEXT_COVERAGE: f64 = 0.5;

/// Store dedup key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObservationKey {
    pub entity_id: String,
    pub template_id: String,
    pub model_id: String,
    pub language: String,
    pub variant: PromptVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(flatten)]
    pub key: ObservationKey,
    pub task_id: String,
    /// Posterior over the schema's labels; empty when failed.
    pub posterior: Vec<f64>,
    pub predicted: Option<usize>,
    pub status: QueryStatus,
}

impl Observation {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            task_id: self.task_id.clone(),
            model_id: self.key.model_id.clone(),
            language: self.key.language.clone(),
            variant: self.key.variant,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status.is_ok()
    }

    /// Builds an observation from raw logprobs; extraction failures become
    /// failed observations rather than errors.
    pub fn from_logprobs(key: ObservationKey, task_id: String, logprobs: &TokenLogprobs, answers: &[String]) -> Self {
        let (posterior, status) = match &logprobs.status {
            QueryStatus::Failed(r) => (Vec::new(), QueryStatus::Failed(r.clone())),
            QueryStatus::Ok => match extract_posterior(logprobs, answers) {
                Ok(p) => (p, QueryStatus::Ok),
                Err(_) => (Vec::new(), QueryStatus::Failed("no_label_token".into())),
            },
        };
        let predicted = status.is_ok().then(|| argmax(&posterior));
        Self { key, task_id, posterior, predicted, status }
    }
}

/// Matches candidates to labels by first answer token (case-insensitive,
/// trimmed) and renormalizes over the label set. Unmatched labels get 0.
pub fn extract_posterior(logprobs: &TokenLogprobs, answers: &[String]) -> Result<Vec<f64>> {
    if !logprobs.status.is_ok() {
        return Err(AuditError::NoLabelToken);
    }
    let firsts: Vec<String> = answers.iter().map(|a| first_token(a)).collect();
    let mut matched = vec![f64::NEG_INFINITY; answers.len()];
    for c in &logprobs.candidates {
        let tok = c.token.trim().to_lowercase();
        if let Some(i) = firsts.iter().position(|f| *f == tok) {
            if c.logprob > matched[i] {
                matched[i] = c.logprob;
            }
        }
    }
    let max = matched.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(AuditError::NoLabelToken);
    }
    let exp: Vec<f64> = matched.iter().map(|lp| (lp - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|p| p / z).collect())
}

/// First index of the maximum; ties resolve to schema order.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn raw_score(posterior: &[f64], weights: &[f64]) -> f64 {
    posterior.iter().zip(weights).map(|(p, w)| p * w).sum()
}

/// Population z-score across entities of one context.
pub fn normalize_context(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(AuditError::InsufficientData { needed: 2, got: scores.len() });
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < SIGMA_EPS {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| (s - mean) / sd).collect())
}

fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(AuditError::InsufficientData { needed: 1, got: 0 });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean of one entity's context scores within a task.
pub fn task_bias(deltas: &[f64]) -> Result<f64> {
    mean(deltas)
}

/// Unweighted mean over tasks.
pub fn global_bias(task_biases: &[f64]) -> Result<f64> {
    mean(task_biases)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Context,
    Task,
    Global,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Context => "context",
            Scope::Task => "task",
            Scope::Global => "global",
        }
    }
}

/// Wildcard used in record keys for dimensions that were aggregated over.
pub const ALL: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub entity_id: String,
    pub scope: Scope,
    /// `per_config` or `pooled`.
    pub aggregation: String,
    pub task_id: String,
    pub model_id: String,
    pub language: String,
    pub variant: String,
    pub template_id: String,
    pub value: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOptions {
    pub keep_context_records: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreReport {
    pub records: Vec<BiasRecord>,
    /// Raw scores per context: (template, config) → entity → s.
    pub raw: BTreeMap<(String, RunConfig), BTreeMap<String, f64>>,
    pub dropped_contexts: Vec<(String, RunConfig)>,
    pub warnings: Vec<String>,
}

impl ScoreReport {
    pub fn of_scope(&self, scope: Scope) -> impl Iterator<Item = &BiasRecord> {
        self.records.iter().filter(move |r| r.scope == scope)
    }

    /// Per-config task scores for one config as entity → value.
    pub fn task_scores(&self, config: &RunConfig) -> BTreeMap<String, (f64, usize)> {
        let variant = config.variant.name();
        self.records
            .iter()
            .filter(|r| {
                r.scope == Scope::Task
                    && r.aggregation == "per_config"
                    && r.task_id == config.task_id
                    && r.model_id == config.model_id
                    && r.language == config.language
                    && r.variant == variant
            })
            .map(|r| (r.entity_id.clone(), (r.value, r.support)))
            .collect()
    }
}

type ContextKey = (String, RunConfig);

/// Full score stack over an observation set. Contexts are independent and
/// are normalized in parallel; aggregation runs over sorted maps so the
/// result does not depend on observation order.
pub fn score_observations(
    observations: &[Observation],
    schemas: &SchemaSet,
    options: &ScoreOptions,
    exec: Exec,
) -> Result<ScoreReport> {
    let mut contexts: BTreeMap<ContextKey, BTreeMap<String, f64>> = BTreeMap::new();
    let mut population: BTreeMap<RunConfig, BTreeSet<&str>> = BTreeMap::new();
    let mut weights_cache: HashMap<&str, Vec<f64>> = HashMap::new();
    for o in observations {
        let config = o.config();
        population.entry(config.clone()).or_default().insert(&o.key.entity_id);
        let ctx = contexts.entry((o.key.template_id.clone(), config)).or_default();
        if o.is_ok() {
            let weights = match weights_cache.get(o.task_id.as_str()) {
                Some(w) => w,
                None => weights_cache.entry(&o.task_id).or_insert(schemas.get(&o.task_id)?.weights()),
            };
            if o.posterior.len() != weights.len() {
                return Err(AuditError::LengthMismatch(o.posterior.len(), weights.len()));
            }
            ctx.insert(o.key.entity_id.clone(), raw_score(&o.posterior, weights));
        }
    }

    let mut report = ScoreReport::default();
    let mut kept: Vec<(ContextKey, BTreeMap<String, f64>)> = Vec::with_capacity(contexts.len());
    for (key, scores) in contexts {
        let pop = population[&key.1].len();
        let coverage = scores.len() as f64 / pop as f64;
        if scores.len() < 2 || coverage < MIN_CONTEXT_COVERAGE {
            report.warnings.push(format!(
                "dropped context {} {}: {} of {} entities ok",
                key.0,
                key.1,
                scores.len(),
                pop
            ));
            report.dropped_contexts.push(key);
            continue;
        }
        kept.push((key, scores));
    }
    for w in &report.warnings {
        tracing::warn!("{w}");
    }

    let deltas: Vec<Vec<(String, f64)>> = exec.map(&kept, |(_, scores)| {
        let values: Vec<f64> = scores.values().copied().collect();
        let d = normalize_context(&values).expect("at least two entities");
        scores.keys().cloned().zip(d).collect()
    });

    // entity → config → context deltas
    let mut per_task: BTreeMap<(RunConfig, String), Vec<f64>> = BTreeMap::new();
    for ((key, _), ds) in kept.iter().zip(&deltas) {
        for (entity, d) in ds {
            per_task.entry((key.1.clone(), entity.clone())).or_default().push(*d);
            if options.keep_context_records {
                report.records.push(record(entity, Scope::Context, "per_config", &key.1, &key.0, *d, 1));
            }
        }
    }
    for (key, scores) in kept {
        report.raw.insert(key, scores);
    }

    // (model, language, variant) → entity → per-task values
    let mut per_global: BTreeMap<(String, String, PromptVariant, String), Vec<(f64, usize)>> = BTreeMap::new();
    // task → entity → per-config values, for the pooled variant
    let mut pooled: BTreeMap<(String, String), Vec<(f64, usize)>> = BTreeMap::new();
    let mut configs_per_task: BTreeMap<String, BTreeSet<RunConfig>> = BTreeMap::new();
    for ((config, entity), ds) in &per_task {
        let value = task_bias(ds)?;
        report.records.push(record(entity, Scope::Task, "per_config", config, ALL, value, ds.len()));
        per_global
            .entry((config.model_id.clone(), config.language.clone(), config.variant, entity.clone()))
            .or_default()
            .push((value, ds.len()));
        pooled.entry((config.task_id.clone(), entity.clone())).or_default().push((value, ds.len()));
        configs_per_task.entry(config.task_id.clone()).or_default().insert(config.clone());
    }
    for ((model, language, variant, entity), values) in &per_global {
        let v: Vec<f64> = values.iter().map(|x| x.0).collect();
        let support = values.iter().map(|x| x.1).sum();
        report.records.push(BiasRecord {
            entity_id: entity.clone(),
            scope: Scope::Global,
            aggregation: "per_config".into(),
            task_id: ALL.into(),
            model_id: model.clone(),
            language: language.clone(),
            variant: variant.name().into(),
            template_id: ALL.into(),
            value: global_bias(&v)?,
            support,
        });
    }

    // Pooled rows only add information when some task ran under several configs.
    if configs_per_task.values().any(|c| c.len() > 1) {
        let mut pooled_global: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
        for ((task, entity), values) in &pooled {
            let v: Vec<f64> = values.iter().map(|x| x.0).collect();
            let support = values.iter().map(|x| x.1).sum();
            let value = mean(&v)?;
            report.records.push(pooled_record(entity, Scope::Task, task, value, support));
            pooled_global.entry(entity.clone()).or_default().push((value, support));
        }
        for (entity, values) in pooled_global {
            let v: Vec<f64> = values.iter().map(|x| x.0).collect();
            let support = values.iter().map(|x| x.1).sum();
            report.records.push(pooled_record(&entity, Scope::Global, ALL, global_bias(&v)?, support));
        }
    }
    sort_records(&mut report.records);
    Ok(report)
}

fn record(entity: &str, scope: Scope, aggregation: &str, c: &RunConfig, template: &str, value: f64, support: usize) -> BiasRecord {
    BiasRecord {
        entity_id: entity.into(),
        scope,
        aggregation: aggregation.into(),
        task_id: c.task_id.clone(),
        model_id: c.model_id.clone(),
        language: c.language.clone(),
        variant: c.variant.name().into(),
        template_id: template.into(),
        value,
        support,
    }
}

fn pooled_record(entity: &str, scope: Scope, task: &str, value: f64, support: usize) -> BiasRecord {
    BiasRecord {
        entity_id: entity.into(),
        scope,
        aggregation: "pooled".into(),
        task_id: task.into(),
        model_id: ALL.into(),
        language: ALL.into(),
        variant: ALL.into(),
        template_id: ALL.into(),
        value,
        support,
    }
}

pub fn sort_records(records: &mut [BiasRecord]) {
    records.sort_by(|a, b| {
        (a.scope, &a.aggregation, &a.task_id, &a.model_id, &a.language, &a.variant, &a.template_id, &a.entity_id).cmp(&(
            b.scope,
            &b.aggregation,
            &b.task_id,
            &b.model_id,
            &b.language,
            &b.variant,
            &b.template_id,
            &b.entity_id,
        ))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatistic {
    Mean,
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupValue {
    pub group: String,
    pub value: f64,
    pub n: usize,
}

/// Mean (signed) or magnitude (mean of absolute values) per metadata group.
pub fn group_aggregate<'a>(
    records: impl IntoIterator<Item = &'a BiasRecord>,
    registry: &EntityRegistry,
    taxonomy: &Taxonomy,
    key: &str,
    statistic: GroupStatistic,
) -> Result<Vec<GroupValue>> {
    if !taxonomy.has_key(key) {
        return Err(AuditError::UnknownGroupingKey(key.to_string()));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        let group = registry.get(&r.entity_id).and_then(|e| e.tag(key)).unwrap_or(UNKNOWN_GROUP);
        let v = match statistic {
            GroupStatistic::Mean => r.value,
            GroupStatistic::Magnitude => r.value.abs(),
        };
        groups.entry(group.to_string()).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(group, values)| Ok(GroupValue { value: mean(&values)?, n: values.len(), group }))
        .collect()
}

/// Macro-F1 over the classes present in the references.
pub fn macro_f1(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AuditError::EmptyGroup("no observations".into()));
    }
    let classes: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let mut total = 0.0;
    for &c in &classes {
        let tp = pairs.iter().filter(|&&(r, p)| r == c && p == c).count() as f64;
        let pred = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
        let actual = pairs.iter().filter(|&&(r, _)| r == c).count() as f64;
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        total += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    }
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Grouping {
    Task,
    Language,
    Variant,
    Model,
    Entity,
    Config,
    /// Entity within one config; feeds the bias/performance association.
    EntityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub grouping: String,
    pub group: String,
    pub macro_f1: f64,
    pub support: usize,
}

fn group_key(o: &Observation, g: F1Grouping) -> String {
    match g {
        F1Grouping::Task => o.task_id.clone(),
        F1Grouping::Language => o.key.language.clone(),
        F1Grouping::Variant => o.key.variant.name().into(),
        F1Grouping::Model => o.key.model_id.clone(),
        F1Grouping::Entity => o.key.entity_id.clone(),
        F1Grouping::Config => o.config().to_string(),
        F1Grouping::EntityConfig => format!("{}|{}", o.key.entity_id, o.config()),
    }
}

pub fn macro_f1_grouped(
    observations: &[Observation],
    corpus: &TemplateCorpus,
    schemas: &SchemaSet,
    grouping: F1Grouping,
) -> Result<Vec<PerformanceRecord>> {
    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for o in observations.iter().filter(|o| o.is_ok()) {
        let Some(pred) = o.predicted else { continue };
        let template = corpus
            .get(&o.key.template_id)
            .ok_or_else(|| AuditError::Invalid(format!("unknown template \"{}\"", o.key.template_id)))?;
        let schema = schemas.get(&o.task_id)?;
        let reference = schema.label_index(&template.intended_label).ok_or_else(|| AuditError::UnknownLabel {
            template: template.id.clone(),
            task: o.task_id.clone(),
            label: template.intended_label.clone(),
        })?;
        groups.entry(group_key(o, grouping)).or_default().push((reference, pred));
    }
    let name = serde_json::to_value(grouping).expect("serializes").as_str().unwrap_or_default().to_string();
    groups
        .into_iter()
        .map(|(group, pairs)| {
            Ok(PerformanceRecord { grouping: name.clone(), macro_f1: macro_f1(&pairs)?, support: pairs.len(), group })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssociationRow {
    pub entity_id: String,
    pub bias: f64,
    pub mean_f1: f64,
    pub f1_deviation: f64,
    /// Fraction of groupings in which the entity sits in the bottom F1 quartile.
    pub bottom_quartile_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssociationReport {
    pub population_mean_f1: f64,
    /// Sorted by F1 deviation ascending, ties by entity id.
    pub rows: Vec<AssociationRow>,
}

impl AssociationReport {
    pub fn bottom_quartile_members(&self, min_rate: f64) -> BTreeSet<String> {
        self.rows.iter().filter(|r| r.bottom_quartile_rate >= min_rate).map(|r| r.entity_id.clone()).collect()
    }
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Relates per-entity bias to per-entity F1 measured under several groupings.
pub fn bias_performance_association(
    bias: &BTreeMap<String, f64>,
    f1_by_grouping: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<AssociationReport> {
    let mut per_entity: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for scores in f1_by_grouping.values() {
        for (e, f) in scores {
            if bias.contains_key(e) {
                per_entity.entry(e).or_default().push(*f);
            }
        }
    }
    if per_entity.is_empty() {
        return Err(AuditError::DisjointKeys);
    }
    if per_entity.len() < 2 {
        return Err(AuditError::InsufficientData { needed: 2, got: per_entity.len() });
    }
    let mut bottom: BTreeMap<&str, usize> = BTreeMap::new();
    let mut groupings: BTreeMap<&str, usize> = BTreeMap::new();
    for scores in f1_by_grouping.values() {
        let shared: Vec<(&str, f64)> =
            scores.iter().filter(|(e, _)| bias.contains_key(*e)).map(|(e, f)| (e.as_str(), *f)).collect();
        if shared.len() < 2 {
            continue;
        }
        let mut sorted: Vec<f64> = shared.iter().map(|x| x.1).collect();
        sorted.sort_by(f64::total_cmp);
        let q25 = quantile(&sorted, 0.25);
        for (e, f) in shared {
            *groupings.entry(e).or_default() += 1;
            if f <= q25 + 1e-12 {
                *bottom.entry(e).or_default() += 1;
            }
        }
    }
    let means: BTreeMap<&str, f64> =
        per_entity.iter().map(|(e, fs)| (*e, fs.iter().sum::<f64>() / fs.len() as f64)).collect();
    let population = means.values().sum::<f64>() / means.len() as f64;
    let mut rows: Vec<AssociationRow> = means
        .iter()
        .map(|(e, m)| {
            let seen = groupings.get(e).copied().unwrap_or(0);
            AssociationRow {
                entity_id: e.to_string(),
                bias: bias[*e],
                mean_f1: *m,
                f1_deviation: m - population,
                bottom_quartile_rate: if seen == 0 { 0.0 } else { bottom.get(e).copied().unwrap_or(0) as f64 / seen as f64 },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.f1_deviation.total_cmp(&b.f1_deviation).then_with(|| a.entity_id.cmp(&b.entity_id)));
    Ok(AssociationReport { population_mean_f1: population, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Candidate;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn answers(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn posterior_with_missing_label() {
        let lp = TokenLogprobs::ok(vec![
            Candidate { token: "Positive".into(), logprob: -0.2 },
            Candidate { token: " negative ".into(), logprob: -1.8 },
            Candidate { token: "banana".into(), logprob: -0.1 },
        ]);
        let p = extract_posterior(&lp, &answers(&["Positive", "Neutral", "Negative"])).unwrap();
        let z = (-0.2f64).exp() + (-1.8f64).exp();
        assert!(close(p[0], (-0.2f64).exp() / z, 1e-15));
        assert_eq!(p[1], 0.0);
        assert!(close(p[2], (-1.8f64).exp() / z, 1e-15));
        assert!(close(p[0], 0.8320, 5e-5) && close(p[2], 0.1680, 5e-5));
    }

    #[test]
    fn posterior_errors_and_one_hot() {
        let lp = TokenLogprobs::ok(vec![Candidate { token: "maybe".into(), logprob: -0.1 }]);
        assert!(matches!(extract_posterior(&lp, &answers(&["Yes", "No"])), Err(AuditError::NoLabelToken)));
        let lp = TokenLogprobs::ok(vec![Candidate { token: "Not".into(), logprob: -3.0 }]);
        assert_eq!(extract_posterior(&lp, &answers(&["Credible", "Not Credible"])).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn raw_score_cases() {
        assert!(close(raw_score(&[0.5, 0.3, 0.2], &[3.0, 2.0, 1.0]), 2.3, 1e-12));
        assert!(close(raw_score(&[1.0 / 3.0; 3], &[3.0, 2.0, 1.0]), 2.0, 1e-12));
        assert_eq!(raw_score(&[0.0, 1.0, 0.0], &[3.0, 2.0, 1.0]), 2.0);
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize_context(&[2.0, 4.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(normalize_context(&[3.0; 4]).unwrap(), vec![0.0; 4]);
        let d = normalize_context(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s2 = 2f64.sqrt();
        for (a, b) in d.iter().zip([-2.0 / s2, -1.0 / s2, 0.0, 1.0 / s2, 2.0 / s2]) {
            assert!(close(*a, b, 1e-12));
        }
        assert!(normalize_context(&[1.0]).is_err());
    }

    #[test]
    fn task_and_global() {
        assert_eq!(task_bias(&[0.5, -0.5]).unwrap(), 0.0);
        assert_eq!(task_bias(&[0.3]).unwrap(), 0.3);
        assert!(task_bias(&[]).is_err());
        assert!(close(global_bias(&[0.2, -0.2, 0.0, 0.4]).unwrap(), 0.1, 1e-12));
        assert!(global_bias(&[]).is_err());
    }

    #[test]
    fn macro_f1_cases() {
        let perfect = [(0, 0), (1, 1), (2, 2), (1, 1)];
        assert_eq!(macro_f1(&perfect).unwrap(), 1.0);
        // Degenerate predictor on a balanced binary task.
        let degenerate = [(0, 0), (0, 0), (1, 0), (1, 0)];
        assert!(close(macro_f1(&degenerate).unwrap(), 1.0 / 3.0, 1e-12));
        assert!(matches!(macro_f1(&[]), Err(AuditError::EmptyGroup(_))));
    }

    #[test]
    fn association_edges() {
        let bias: BTreeMap<String, f64> = [("a".to_string(), 0.1)].into();
        let mut f1 = BTreeMap::new();
        f1.insert("g".to_string(), BTreeMap::from([("a".to_string(), 0.9)]));
        assert!(matches!(bias_performance_association(&bias, &f1), Err(AuditError::InsufficientData { .. })));
        let f1_other = BTreeMap::from([("g".to_string(), BTreeMap::from([("z".to_string(), 0.9)]))]);
        assert!(matches!(bias_performance_association(&bias, &f1_other), Err(AuditError::DisjointKeys)));

        let bias: BTreeMap<String, f64> = (0..4).map(|i| (format!("e{i}"), 0.0)).collect();
        let f1 = BTreeMap::from([("g".to_string(), (0..4).map(|i| (format!("e{i}"), 0.7)).collect())]);
        let r = bias_performance_association(&bias, &f1).unwrap();
        assert!(r.rows.iter().all(|row| row.f1_deviation == 0.0));
    }
}
