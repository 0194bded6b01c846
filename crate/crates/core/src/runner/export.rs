//! Columnar exports. Every file has a fixed header and rows in sorted key
//! order, so equal content always produces identical bytes.
//!
//! | kind           | header |
//! |----------------|--------|
//! | `observations` | `entity_id,template_id,task_id,model_id,language,variant,status,reason,predicted,posterior` |
//! | `bias`         | `entity_id,scope,aggregation,task_id,model_id,language,variant,template_id,value,support` |
//! | `performance`  | `grouping,group,macro_f1,support` |
//! | `similarity`   | `entity_id,<entity ids...>` (square matrix) |
//! | `alignment`    | `model_id,language,<benchmark ids...>` |
//! | `summary`      | `section,key,group,value,n` |
//!
//! `posterior` is `;`-separated in schema label order. Planned totals follow
//! the product formula; the prose figure of 1,906,780,800 quoted alongside
//! the published factor table does not match its own factors
//! (1,905,984,000).

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::gateway::QueryStatus;
use crate::registry::RegistrySummary;
use crate::scoring::{BiasRecord, GroupValue, Observation, PerformanceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Observations,
    Bias,
    Performance,
    Similarity,
    Alignment,
    Summary,
}

impl ExportKind {
    pub const ALL: [ExportKind; 6] = [
        ExportKind::Observations,
        ExportKind::Bias,
        ExportKind::Performance,
        ExportKind::Similarity,
        ExportKind::Alignment,
        ExportKind::Summary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExportKind::Observations => "observations",
            ExportKind::Bias => "bias",
            ExportKind::Performance => "performance",
            ExportKind::Similarity => "similarity",
            ExportKind::Alignment => "alignment",
            ExportKind::Summary => "summary",
        }
    }
}

impl FromStr for ExportKind {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        ExportKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AuditError::UnknownExportKind(s.to_string()))
    }
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| AuditError::io("export", e))
}

pub fn write_observations<'a>(observations: impl IntoIterator<Item = &'a Observation>, out: impl Write) -> Result<()> {
    let mut sorted: Vec<&Observation> = observations.into_iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "entity_id", "template_id", "task_id", "model_id", "language", "variant", "status", "reason", "predicted", "posterior",
    ])?;
    for o in sorted {
        let (status, reason) = match &o.status {
            QueryStatus::Ok => ("ok", ""),
            QueryStatus::Failed(r) => ("failed", r.as_str()),
        };
        let posterior: Vec<String> = o.posterior.iter().map(f64::to_string).collect();
        w.write_record([
            o.key.entity_id.as_str(),
            &o.key.template_id,
            &o.task_id,
            &o.key.model_id,
            &o.key.language,
            o.key.variant.name(),
            status,
            reason,
            &o.predicted.map(|p| p.to_string()).unwrap_or_default(),
            &posterior.join(";"),
        ])?;
    }
    finish(w)
}

/// Records are written in the order given; scoring already sorts them.
pub fn write_bias(records: &[BiasRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "entity_id", "scope", "aggregation", "task_id", "model_id", "language", "variant", "template_id", "value", "support",
    ])?;
    for r in records {
        w.write_record([
            r.entity_id.as_str(),
            r.scope.as_str(),
            &r.aggregation,
            &r.task_id,
            &r.model_id,
            &r.language,
            &r.variant,
            &r.template_id,
            &r.value.to_string(),
            &r.support.to_string(),
        ])?;
    }
    finish(w)
}

pub fn read_bias(input: impl std::io::Read) -> Result<Vec<BiasRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let field = |j: usize| row.get(j).unwrap_or_default().to_string();
        let parse_err = |m: String| AuditError::Parse { line: i + 2, message: m };
        let scope = serde_json::from_value(serde_json::Value::String(field(1))).map_err(|e| parse_err(e.to_string()))?;
        out.push(BiasRecord {
            entity_id: field(0),
            scope,
            aggregation: field(2),
            task_id: field(3),
            model_id: field(4),
            language: field(5),
            variant: field(6),
            template_id: field(7),
            value: field(8).parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?,
            support: field(9).parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
        });
    }
    Ok(out)
}

pub fn write_performance(records: &[PerformanceRecord], out: impl Write) -> Result<()> {
    let mut sorted: Vec<&PerformanceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.grouping, &a.group).cmp(&(&b.grouping, &b.group)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["grouping", "group", "macro_f1", "support"])?;
    for r in sorted {
        w.write_record([r.grouping.as_str(), &r.group, &r.macro_f1.to_string(), &r.support.to_string()])?;
    }
    finish(w)
}

/// Registry counts (`section = registry`) and group aggregates
/// (`section = group_<statistic>`), one row per group.
pub fn write_summary(
    summaries: &[RegistrySummary],
    aggregates: &[(String, String, Vec<GroupValue>)],
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["section", "key", "group", "value", "n"])?;
    for s in summaries {
        for (group, n) in &s.counts {
            w.write_record(["registry", s.key.as_str(), group, &n.to_string(), &n.to_string()])?;
        }
    }
    for (section, key, values) in aggregates {
        for v in values {
            w.write_record([section.as_str(), key, &v.group, &v.value.to_string(), &v.n.to_string()])?;
        }
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        assert_eq!("bias".parse::<ExportKind>().unwrap(), ExportKind::Bias);
        assert!(matches!("plots".parse::<ExportKind>(), Err(AuditError::UnknownExportKind(_))));
    }
}
