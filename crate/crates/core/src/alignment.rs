//! Synthetic-vs-real validation: real benchmark items are masked into
//! templates, both corpora are scored identically, and per-entity task bias
//! scores are correlated.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::exec::Exec;
use crate::gateway::RunConfig;
use crate::registry::{Origin, SchemaSet, Template, PLACEHOLDER};
use crate::scoring::{score_observations, Observation, ScoreOptions, ScoreReport};
use crate::stats::pearson;

/// Entities need at least this many contributing contexts in each corpus.
pub const MIN_SUPPORT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub benchmark_id: String,
    pub task_id: String,
    pub language: String,
    /// Audited entity this item refers to (benchmark-config data).
    pub entity_id: String,
    pub text: String,
    /// Byte ranges `[start, end)` of entity mentions.
    pub spans: Vec<(usize, usize)>,
    pub gold_label: String,
    /// Set when the text was rewritten upstream to strip confounders.
    #[serde(default)]
    pub rewritten: bool,
}

/// Replaces every entity span with the placeholder.
pub fn mask_item(item: &BenchmarkItem) -> Result<Template> {
    if item.spans.is_empty() {
        return Err(AuditError::InvalidSpan(item.id.clone()));
    }
    let mut spans = item.spans.clone();
    spans.sort_unstable();
    for &(s, e) in &spans {
        if s >= e || e > item.text.len() || !item.text.is_char_boundary(s) || !item.text.is_char_boundary(e) {
            return Err(AuditError::InvalidSpan(item.id.clone()));
        }
    }
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(AuditError::OverlappingSpans(item.id.clone()));
    }
    let mut text = String::with_capacity(item.text.len());
    let mut last = 0;
    for (s, e) in spans {
        text.push_str(&item.text[last..s]);
        text.push(PLACEHOLDER);
        last = e;
    }
    text.push_str(&item.text[last..]);
    Ok(Template {
        id: item.id.clone(),
        task_id: item.task_id.clone(),
        language: item.language.clone(),
        text,
        intended_label: item.gold_label.clone(),
        keywords: Vec::new(),
        origin: Origin::RealBenchmark,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPair {
    pub entity_id: String,
    pub real: f64,
    pub synthetic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub benchmark_id: String,
    pub model_id: String,
    pub language: String,
    pub r: f64,
    pub n: usize,
    pub pairs: Vec<EntityPair>,
    /// Entities present in both corpora but under the support floor.
    pub excluded: Vec<String>,
}

/// Correlates task scores of two already-scored corpora.
pub fn align_reports(
    benchmark_id: &str,
    real: (&ScoreReport, &RunConfig),
    synthetic: (&ScoreReport, &RunConfig),
    min_support: usize,
) -> Result<AlignmentReport> {
    let a = real.0.task_scores(real.1);
    let b = synthetic.0.task_scores(synthetic.1);
    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for (entity, (ra, sa)) in &a {
        let Some((rb, sb)) = b.get(entity) else { continue };
        if *sa < min_support || *sb < min_support {
            excluded.push(entity.clone());
            continue;
        }
        pairs.push(EntityPair { entity_id: entity.clone(), real: *ra, synthetic: *rb });
    }
    if pairs.len() < 3 {
        return Err(AuditError::InsufficientData { needed: 3, got: pairs.len() });
    }
    let x: Vec<f64> = pairs.iter().map(|p| p.real).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.synthetic).collect();
    Ok(AlignmentReport {
        benchmark_id: benchmark_id.to_string(),
        model_id: real.1.model_id.clone(),
        language: real.1.language.clone(),
        r: pearson(&x, &y)?,
        n: pairs.len(),
        pairs,
        excluded,
    })
}

/// Scores both observation sets independently and correlates them.
pub fn align(
    benchmark_id: &str,
    real: (&[Observation], &RunConfig),
    synthetic: (&[Observation], &RunConfig),
    schemas: &SchemaSet,
    min_support: usize,
    exec: Exec,
) -> Result<AlignmentReport> {
    let opts = ScoreOptions::default();
    let ra = score_observations(real.0, schemas, &opts, exec)?;
    let sa = score_observations(synthetic.0, schemas, &opts, exec)?;
    align_reports(benchmark_id, (&ra, real.1), (&sa, synthetic.1), min_support)
}

/// Model × language rows, one column per benchmark.
pub fn write_alignment_grid(reports: &[AlignmentReport], out: impl Write) -> Result<()> {
    let mut benchmarks: Vec<&str> = reports.iter().map(|r| r.benchmark_id.as_str()).collect();
    benchmarks.sort_unstable();
    benchmarks.dedup();
    let mut rows: BTreeMap<(&str, &str), BTreeMap<&str, f64>> = BTreeMap::new();
    for r in reports {
        rows.entry((&r.model_id, &r.language)).or_default().insert(&r.benchmark_id, r.r);
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model_id", "language"];
    header.extend(&benchmarks);
    w.write_record(&header)?;
    for ((model, lang), cells) in rows {
        let mut rec = vec![model.to_string(), lang.to_string()];
        rec.extend(benchmarks.iter().map(|b| cells.get(b).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| AuditError::io("alignment", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(text: &str, spans: Vec<(usize, usize)>) -> BenchmarkItem {
        BenchmarkItem {
            id: "i1".into(),
            benchmark_id: "finentity".into(),
            task_id: "fin_sentiment".into(),
            language: "en".into(),
            entity_id: "acme".into(),
            text: text.into(),
            spans,
            gold_label: "positive".into(),
            rewritten: false,
        }
    }

    #[test]
    fn mask_single_and_multiple() {
        let t = mask_item(&item("Acme shares gained 0.20% after results.", vec![(0, 4)])).unwrap();
        assert_eq!(t.text, "X shares gained 0.20% after results.");
        assert_eq!(t.intended_label, "positive");
        assert_eq!(t.origin, Origin::RealBenchmark);

        let text = "Acme beat Globex while Acme rallied.";
        let t = mask_item(&item(text, vec![(23, 27), (0, 4)])).unwrap();
        assert_eq!(t.text, "X beat Globex while X rallied.");
        assert_eq!(t.placeholder_count(), 2);
        assert_eq!(t.language, "en");
    }

    #[test]
    fn mask_rejects_bad_spans() {
        assert!(matches!(mask_item(&item("Acme Corp rose", vec![(0, 9), (5, 9)])), Err(AuditError::OverlappingSpans(_))));
        assert!(matches!(mask_item(&item("Acme", vec![(0, 10)])), Err(AuditError::InvalidSpan(_))));
        assert!(matches!(mask_item(&item("Acme", vec![])), Err(AuditError::InvalidSpan(_))));
    }
}
