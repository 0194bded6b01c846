//! Entity similarity from full output patterns.
//!
//! Each entity gets one output vector per run config (its raw scores over the
//! config's templates in canonical order). Pairwise cosine similarities are
//! computed per config, averaged across configs into `S`, and `D = 1 − S`
//! is exported for 2D projection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::exec::Exec;
use crate::gateway::RunConfig;
use crate::registry::{EntityRegistry, SchemaSet, UNKNOWN_GROUP};
use crate::scoring::{normalize_context, raw_score, Observation};

/// Minimum fraction of a config's templates an entity needs to be vectorized.
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.8;

/// Largest entity set handled with dense matrices.
pub const MAX_DENSE_ENTITIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputVector {
    pub entity_id: String,
    /// One slot per template in canonical order; `None` where the
    /// observation failed. Missing slots are never imputed.
    pub values: Vec<Option<f64>>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    pub config: RunConfig,
    pub template_order: Vec<String>,
    pub vectors: Vec<OutputVector>,
    /// Entities below the coverage threshold, with their coverage.
    pub excluded: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorValues {
    /// Raw posterior-expected scores.
    #[default]
    Raw,
    /// Context-normalized scores; sensitivity analysis only.
    Delta,
}

pub fn build_vectors(
    observations: &[Observation],
    schemas: &SchemaSet,
    config: &RunConfig,
    threshold: f64,
    values: VectorValues,
) -> Result<VectorSet> {
    let weights = schemas.get(&config.task_id)?.weights();
    let mut templates = BTreeSet::new();
    let mut cells: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut seen = false;
    for o in observations {
        if o.task_id != config.task_id
            || o.key.model_id != config.model_id
            || o.key.language != config.language
            || o.key.variant != config.variant
        {
            continue;
        }
        seen = true;
        templates.insert(o.key.template_id.as_str());
        let row = cells.entry(&o.key.entity_id).or_default();
        if o.is_ok() {
            row.insert(&o.key.template_id, raw_score(&o.posterior, &weights));
        }
    }
    if !seen {
        return Err(AuditError::ConfigAbsent(config.to_string()));
    }
    let order: Vec<&str> = templates.into_iter().collect();

    if values == VectorValues::Delta {
        for t in &order {
            let present: Vec<(&str, f64)> =
                cells.iter().filter_map(|(e, row)| row.get(t).map(|s| (*e, *s))).collect();
            if present.len() < 2 {
                continue;
            }
            let scores: Vec<f64> = present.iter().map(|x| x.1).collect();
            let deltas = normalize_context(&scores)?;
            for ((e, _), d) in present.iter().zip(deltas) {
                cells.get_mut(e).expect("entity row").insert(t, d);
            }
        }
    }

    let mut vectors = Vec::new();
    let mut excluded = Vec::new();
    for (entity, row) in &cells {
        let coverage = row.len() as f64 / order.len() as f64;
        if coverage < threshold || row.is_empty() {
            excluded.push((entity.to_string(), coverage));
            continue;
        }
        vectors.push(OutputVector {
            entity_id: entity.to_string(),
            values: order.iter().map(|t| row.get(t).copied()).collect(),
            coverage,
        });
    }
    Ok(VectorSet {
        config: config.clone(),
        template_order: order.into_iter().map(str::to_string).collect(),
        vectors,
        excluded,
    })
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AuditError::LengthMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 {
        return Err(AuditError::ZeroVector("left".into()));
    }
    if nb == 0.0 {
        return Err(AuditError::ZeroVector("right".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine over the slots both vectors observed.
fn masked_cosine(a: &OutputVector, b: &OutputVector) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        if let (Some(x), Some(y)) = (x, y) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if na == 0.0 {
        return Err(AuditError::ZeroVector(a.entity_id.clone()));
    }
    if nb == 0.0 {
        return Err(AuditError::ZeroVector(b.entity_id.clone()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    PerConfig,
    Aggregated,
    Distance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub kind: MatrixKind,
    pub config: Option<RunConfig>,
    pub entities: Vec<String>,
    /// Row-major, `entities.len()²` entries.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.entities.len()
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.n() + k]
    }

    pub fn index_of(&self, entity: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == entity)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..i).all(|k| (self.get(i, k) - self.get(k, i)).abs() <= tol))
    }
}

/// Pairwise cosine matrix for one config. Rows are computed in parallel;
/// each entry is evaluated in a fixed operand order so the matrix is
/// bitwise symmetric regardless of partitioning.
pub fn similarity_matrix(set: &VectorSet, exec: Exec) -> Result<SimilarityMatrix> {
    let n = set.vectors.len();
    if n > MAX_DENSE_ENTITIES {
        return Err(AuditError::Invalid(format!(
            "{n} entities exceed the dense limit of {MAX_DENSE_ENTITIES}; select a subset"
        )));
    }
    let rows: Vec<Result<Vec<f64>>> = exec.map_range(n, |i| {
        (0..n)
            .map(|k| match i.cmp(&k) {
                std::cmp::Ordering::Equal => Ok(1.0),
                std::cmp::Ordering::Less => masked_cosine(&set.vectors[i], &set.vectors[k]),
                std::cmp::Ordering::Greater => masked_cosine(&set.vectors[k], &set.vectors[i]),
            })
            .collect()
    });
    let mut values = Vec::with_capacity(n * n);
    for r in rows {
        values.extend(r?);
    }
    Ok(SimilarityMatrix {
        kind: MatrixKind::PerConfig,
        config: Some(set.config.clone()),
        entities: set.vectors.iter().map(|v| v.entity_id.clone()).collect(),
        values,
    })
}

/// Config predicate; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFilter {
    pub task_id: Option<String>,
    pub model_id: Option<String>,
    pub language: Option<String>,
    pub variant: Option<String>,
}

impl ConfigFilter {
    pub fn matches(&self, c: &RunConfig) -> bool {
        let eq = |want: &Option<String>, have: &str| want.as_deref().map_or(true, |w| w == have);
        eq(&self.task_id, &c.task_id)
            && eq(&self.model_id, &c.model_id)
            && eq(&self.language, &c.language)
            && eq(&self.variant, c.variant.name())
    }
}

/// Entrywise mean over the matrices that pass `filter`, on the intersection
/// of their entity sets. Values are summed in sorted order, so the result
/// does not depend on the order of `matrices`.
pub fn aggregate_similarity(matrices: &[SimilarityMatrix], filter: &ConfigFilter) -> Result<SimilarityMatrix> {
    let chosen: Vec<&SimilarityMatrix> =
        matrices.iter().filter(|m| m.config.as_ref().map_or(true, |c| filter.matches(c))).collect();
    if chosen.is_empty() {
        return Err(AuditError::EmptyFilter);
    }
    let mut shared: BTreeSet<&str> = chosen[0].entities.iter().map(String::as_str).collect();
    for m in &chosen[1..] {
        let these: BTreeSet<&str> = m.entities.iter().map(String::as_str).collect();
        shared = shared.intersection(&these).copied().collect();
    }
    let dropped: usize = chosen.iter().map(|m| m.n() - shared.len()).max().unwrap_or(0);
    if dropped > 0 {
        tracing::info!(shared = shared.len(), dropped, "aggregating on the shared entity index");
    }
    let entities: Vec<String> = shared.into_iter().map(str::to_string).collect();
    let indices: Vec<Vec<usize>> = chosen
        .iter()
        .map(|m| entities.iter().map(|e| m.index_of(e).expect("shared entity")).collect())
        .collect();
    let n = entities.len();
    let mut values = Vec::with_capacity(n * n);
    let mut buf = Vec::with_capacity(chosen.len());
    for i in 0..n {
        for k in 0..n {
            buf.clear();
            buf.extend(chosen.iter().zip(&indices).map(|(m, idx)| m.get(idx[i], idx[k])));
            buf.sort_by(f64::total_cmp);
            values.push(buf.iter().sum::<f64>() / buf.len() as f64);
        }
    }
    Ok(SimilarityMatrix { kind: MatrixKind::Aggregated, config: None, entities, values })
}

pub fn distance(s: &SimilarityMatrix) -> SimilarityMatrix {
    let n = s.n();
    let values = (0..n * n).map(|idx| if idx / n == idx % n { 0.0 } else { 1.0 - s.values[idx] }).collect();
    SimilarityMatrix { kind: MatrixKind::Distance, config: s.config.clone(), entities: s.entities.clone(), values }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub rank: usize,
    pub entity_a: String,
    pub entity_b: String,
    pub similarity: f64,
    pub group_a: Option<String>,
    pub group_b: Option<String>,
}

/// The `k` most similar off-diagonal pairs, each pair once, ties ordered by ids.
pub fn top_pairs(
    s: &SimilarityMatrix,
    k: usize,
    registry: Option<&EntityRegistry>,
    grouping_key: Option<&str>,
) -> Result<Vec<PairRow>> {
    let n = s.n();
    let available = n * n.saturating_sub(1) / 2;
    if k == 0 || k > available {
        return Err(AuditError::TooManyPairs { requested: k, available });
    }
    let mut pairs: Vec<(f64, &str, &str)> = Vec::with_capacity(available);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = if s.entities[i] <= s.entities[j] { (i, j) } else { (j, i) };
            pairs.push((s.get(i, j), &s.entities[a], &s.entities[b]));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| (x.1, x.2).cmp(&(y.1, y.2))));
    let group = |id: &str| {
        grouping_key.map(|key| {
            registry.and_then(|r| r.get(id)).and_then(|e| e.tag(key)).unwrap_or(UNKNOWN_GROUP).to_string()
        })
    };
    Ok(pairs
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (sim, a, b))| PairRow {
            rank: i + 1,
            entity_a: a.to_string(),
            entity_b: b.to_string(),
            similarity: sim,
            group_a: group(a),
            group_b: group(b),
        })
        .collect())
}

/// Square CSV: header `entity_id,<id…>`, then one row per entity.
pub fn write_matrix(m: &SimilarityMatrix, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["entity_id".to_string()];
    header.extend(m.entities.iter().cloned());
    w.write_record(&header)?;
    let n = m.n();
    for (i, e) in m.entities.iter().enumerate() {
        let mut row = Vec::with_capacity(n + 1);
        row.push(e.clone());
        row.extend(m.values[i * n..(i + 1) * n].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| AuditError::io("matrix", e))?;
    Ok(())
}

pub fn read_matrix(input: impl BufRead, kind: MatrixKind) -> Result<SimilarityMatrix> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let entities: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = entities.len();
    let mut values = Vec::with_capacity(n * n);
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != n + 1 || rec.get(0) != Some(entities.get(i).map(String::as_str).unwrap_or_default()) {
            return Err(AuditError::Parse { line: i + 2, message: "row does not match header".into() });
        }
        for v in rec.iter().skip(1) {
            values.push(v.parse::<f64>().map_err(|e| AuditError::Parse { line: i + 2, message: e.to_string() })?);
        }
    }
    if values.len() != n * n {
        return Err(AuditError::Parse { line: 0, message: "matrix is not square".into() });
    }
    Ok(SimilarityMatrix { kind, config: None, entities, values })
}
