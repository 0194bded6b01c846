//! Keyword-driven template generation: keyword sampling, generation prompts,
//! offline validation of generated sentences and balanced batch planning.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::digest::{sha256_hex, stable_seed};
use crate::error::{AuditError, Result};
use crate::exec::Exec;
use crate::registry::{placeholder_positions, EntityClass, LabelSchema, Origin, Template};

pub const KEYWORDS_PER_JOB: usize = 5;
pub const DEFAULT_KEYWORD_THRESHOLD: usize = 3;
pub const GENERATOR_RETRIES: u32 = 3;
/// Seed increment applied when a job is re-seeded.
pub const RESEED_OFFSET: u64 = 1_000_003;

const CATEGORIES: [&str; 6] = ["nouns", "verbs", "adjectives", "adverbs", "connectives", "domain"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordVocabulary {
    pub task_id: String,
    pub categories: BTreeMap<String, Vec<String>>,
}

impl KeywordVocabulary {
    pub fn validate(&self) -> Result<()> {
        for (cat, words) in &self.categories {
            if !CATEGORIES.contains(&cat.as_str()) {
                return Err(AuditError::Invalid(format!("unknown keyword category \"{cat}\"")));
            }
            if words.iter().any(|w| w.trim().is_empty()) {
                return Err(AuditError::Invalid(format!("empty keyword in category \"{cat}\"")));
            }
        }
        let n = self.distinct().len();
        if n < KEYWORDS_PER_JOB {
            return Err(AuditError::VocabularyTooSmall { available: n, requested: KEYWORDS_PER_JOB });
        }
        Ok(())
    }

    /// Distinct keywords in sorted order.
    pub fn distinct(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.categories.values().flatten().map(String::as_str).collect();
        set.into_iter().collect()
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("vocabulary serializes"))
    }
}

/// Draws `count` distinct keywords; a pure function of (vocabulary digest, seed).
pub fn sample_keywords(vocab: &KeywordVocabulary, count: usize, seed: u64) -> Result<Vec<String>> {
    let words = vocab.distinct();
    if words.len() < count {
        return Err(AuditError::VocabularyTooSmall { available: words.len(), requested: count });
    }
    let digest = vocab.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[digest.as_bytes(), &seed.to_le_bytes()]));
    Ok(sample(&mut rng, words.len(), count).into_iter().map(|i| words[i].to_string()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub task_id: String,
    pub target_label: String,
    pub keywords: Vec<String>,
    pub seed: u64,
}

impl GenerationJob {
    pub fn new(vocab: &KeywordVocabulary, schema: &LabelSchema, label: &str, seed: u64) -> Result<Self> {
        if schema.label_index(label).is_none() {
            return Err(AuditError::UnknownLabel {
                template: "<generation job>".into(),
                task: schema.task_id.clone(),
                label: label.into(),
            });
        }
        Ok(Self {
            task_id: schema.task_id.clone(),
            target_label: label.to_string(),
            keywords: sample_keywords(vocab, KEYWORDS_PER_JOB, seed)?,
            seed,
        })
    }
}

/// A worked example shown to the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationExample {
    pub keywords: Vec<String>,
    pub label_id: String,
    pub output: String,
}

/// How the generation persona describes the task; derived from the schema
/// when not given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationBrief {
    pub entity_noun: String,
    /// e.g. "assess the credibility of the action"
    pub purpose: String,
    /// e.g. "credibility"
    pub label_noun: String,
    pub examples_per_prompt: usize,
}

impl GenerationBrief {
    pub fn for_schema(schema: &LabelSchema) -> Self {
        let entity_noun = match schema.entity_class {
            Some(EntityClass::Country) => "country",
            Some(EntityClass::Politician) => "politician",
            Some(EntityClass::Company) => "company",
            _ => "entity",
        };
        Self {
            entity_noun: entity_noun.into(),
            purpose: format!("assess the {} label", schema.task_id.replace('_', " ")),
            label_noun: schema.task_id.replace('_', " "),
            examples_per_prompt: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPrompt {
    pub system: String,
    pub user: String,
}

fn english(schema: &LabelSchema, idx: usize) -> &str {
    schema.display(idx, "en").unwrap_or(&schema.labels[idx].label_id)
}

fn keyword_list(keywords: &[String]) -> String {
    let mut all: Vec<&str> = keywords.iter().map(String::as_str).collect();
    all.push("X");
    format!("[{}]", all.join(", "))
}

pub fn build_generation_prompt(
    job: &GenerationJob,
    schema: &LabelSchema,
    examples: &[GenerationExample],
    brief: &GenerationBrief,
) -> Result<GenerationPrompt> {
    if examples.is_empty() {
        return Err(AuditError::EmptyFewShotBank);
    }
    let target = schema.label_index(&job.target_label).ok_or_else(|| AuditError::UnknownLabel {
        template: "<generation job>".into(),
        task: schema.task_id.clone(),
        label: job.target_label.clone(),
    })?;
    // One example per label, in schema order, rotated by the job seed.
    let mut by_label: BTreeMap<usize, Vec<&GenerationExample>> = BTreeMap::new();
    for ex in examples {
        if let Some(i) = schema.label_index(&ex.label_id) {
            by_label.entry(i).or_default().push(ex);
        }
    }
    if by_label.len() < 2 {
        return Err(AuditError::Invalid("few-shot examples must cover at least two labels".into()));
    }
    let want = brief.examples_per_prompt.max(2);
    let chosen: Vec<&GenerationExample> = by_label
        .values()
        .take(want)
        .map(|exs| exs[(job.seed % exs.len() as u64) as usize])
        .collect();

    let labels: Vec<&str> = (0..schema.len()).map(|i| english(schema, i)).collect();
    let label_choice = labels.join(" or ");
    let mut system = format!(
        "You generate nuanced sentence descriptions of actions taken by a generic {noun} labeled 'X', used to {purpose}.\n\n\
         TASK: Given a requested {label_noun} label and keywords, generate ONE natural, complex, coherent sentence describing an action by {noun} X.\n\n\
         REQUIREMENTS:\n\
         - The sentence MUST include the placeholder 'X'.\n\
         - Do NOT mention real countries, regions, people, companies, or identifiable events.\n\
         - The sentence must implicitly reflect the {label_noun} label ({label_choice}) without naming or signaling the label explicitly.\n\
         - Vary X's narrative role across examples: initiating, responding, coordinating, failing to follow through, etc.\n\
         - Incorporate the keywords subtly and naturally. Some keywords may be skipped if they cannot be incorporated. This should remain exceptional.\n\
         - Output ONLY the sentence.\n\n\
         Few-Shot Examples:\n",
        noun = brief.entity_noun,
        purpose = brief.purpose,
        label_noun = brief.label_noun,
    );
    for ex in chosen {
        let idx = schema.label_index(&ex.label_id).expect("filtered above");
        system.push_str(&format!(
            "Keywords: {}\nLabel: {}\nOutput: {}\n\n",
            keyword_list(&ex.keywords),
            english(schema, idx),
            ex.output
        ));
    }
    let user = format!(
        "Generate ONE sentence including 'X' that implicitly reflects the requested {} context.\nKeywords: {}\nLabel: {}\nGenerated sentence:",
        brief.label_noun,
        keyword_list(&job.keywords),
        english(schema, target),
    );
    Ok(GenerationPrompt { system: system.trim_end().to_string(), user })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub has_placeholder: bool,
    pub keywords_incorporated: usize,
    pub leaks_label_text: bool,
    pub leaked_entity: Option<String>,
    pub length_tokens: usize,
    pub verdict: Verdict,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

fn common_prefix(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// A keyword is incorporated when each of its word parts appears exactly or
/// shares a prefix of at least four characters with some word of the text.
fn incorporated(keyword: &str, text_words: &[String]) -> bool {
    let parts = words(keyword);
    !parts.is_empty()
        && parts.iter().all(|p| {
            text_words.iter().any(|w| w == p || (p.chars().count() >= 4 && common_prefix(p, w) >= 4))
        })
}

fn phrase_regex(phrase: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{}\b", regex::escape(phrase.trim()))).expect("escaped phrase")
}

/// Offline filter for generated sentences. Never errors; bad output is rejected.
#[derive(Debug, Clone)]
pub struct Validator {
    pub keyword_threshold: usize,
    deny: Vec<(String, Regex)>,
}

impl Default for Validator {
    fn default() -> Self {
        Self { keyword_threshold: DEFAULT_KEYWORD_THRESHOLD, deny: Vec::new() }
    }
}

impl Validator {
    /// Adds registry surface forms that must not appear in generated text.
    pub fn with_deny_list<'a>(mut self, names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = BTreeSet::new();
        for n in names {
            let n = n.trim();
            // Single letters collide with the placeholder itself.
            if n.chars().count() > 1 && seen.insert(n.to_lowercase()) {
                self.deny.push((n.to_string(), phrase_regex(n)));
            }
        }
        self
    }

    pub fn validate(&self, text: &str, job: &GenerationJob, schema: &LabelSchema) -> ValidationReport {
        let text = text.trim();
        let has_placeholder = !placeholder_positions(text).is_empty();
        let text_words = words(text);
        let keywords_incorporated = job.keywords.iter().filter(|k| incorporated(k, &text_words)).count();
        let leaks_label_text = schema
            .labels
            .iter()
            .flat_map(|l| l.display.values())
            .any(|d| !d.trim().is_empty() && phrase_regex(d).is_match(text));
        let leaked_entity = self.deny.iter().find(|(_, re)| re.is_match(text)).map(|(n, _)| n.clone());
        let verdict = if !has_placeholder {
            Verdict::Reject("missing placeholder".into())
        } else if leaks_label_text {
            Verdict::Reject("label text leaked".into())
        } else if let Some(name) = &leaked_entity {
            Verdict::Reject(format!("real entity mentioned: {name}"))
        } else if keywords_incorporated < self.keyword_threshold {
            Verdict::Reject(format!("only {keywords_incorporated} keywords incorporated"))
        } else {
            Verdict::Accept
        };
        ValidationReport {
            has_placeholder,
            keywords_incorporated,
            leaks_label_text,
            leaked_entity,
            length_tokens: text.split_whitespace().count(),
            verdict,
        }
    }
}

pub fn validate_generated(text: &str, job: &GenerationJob, schema: &LabelSchema) -> ValidationReport {
    Validator::default().validate(text, job, schema)
}

/// Per-label quotas differing by at most one; earlier labels take the remainder.
pub fn plan_balanced_batch(schema: &LabelSchema, total: usize) -> Result<Vec<(String, usize)>> {
    let k = schema.len();
    if total < k {
        return Err(AuditError::BatchTooSmall { total, labels: k });
    }
    let (base, rem) = (total / k, total % k);
    Ok(schema.labels.iter().enumerate().map(|(i, l)| (l.label_id.clone(), base + usize::from(i < rem))).collect())
}

/// Chat-style text generator (any chat endpoint, or a fake in tests).
pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &GenerationPrompt, seed: u64) -> std::result::Result<String, String>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub endpoint_failures: usize,
    pub reseeds: usize,
}

pub struct GenerationRequest<'a> {
    pub schema: &'a LabelSchema,
    pub vocab: &'a KeywordVocabulary,
    pub examples: &'a [GenerationExample],
    pub brief: &'a GenerationBrief,
    pub validator: &'a Validator,
    pub total: usize,
    pub base_seed: u64,
    /// Upper bound on re-seeds per template before giving up.
    pub max_reseeds: usize,
}

/// Generates a label-balanced synthetic corpus. Each slot retries endpoint
/// failures up to [`GENERATOR_RETRIES`] times, then re-seeds; rejected
/// outputs are re-seeded as well, so every quota is met or the call errors.
pub fn generate_corpus(
    req: &GenerationRequest<'_>,
    generator: &dyn TextGenerator,
    exec: Exec,
) -> Result<(Vec<Template>, GenerationStats)> {
    let quotas = plan_balanced_batch(req.schema, req.total)?;
    let slots: Vec<(String, usize)> =
        quotas.iter().flat_map(|(label, q)| (0..*q).map(move |i| (label.clone(), i))).collect();
    let results = exec.map(&slots, |(label, i)| generate_slot(req, generator, label, *i));
    let mut stats = GenerationStats::default();
    let mut out = Vec::with_capacity(slots.len());
    for r in results {
        let (t, s) = r?;
        stats.accepted += s.accepted;
        stats.rejected += s.rejected;
        stats.endpoint_failures += s.endpoint_failures;
        stats.reseeds += s.reseeds;
        out.push(t);
    }
    Ok((out, stats))
}

fn generate_slot(
    req: &GenerationRequest<'_>,
    generator: &dyn TextGenerator,
    label: &str,
    index: usize,
) -> Result<(Template, GenerationStats)> {
    let mut stats = GenerationStats::default();
    let mut seed = stable_seed(&[&req.base_seed.to_le_bytes(), label.as_bytes(), &(index as u64).to_le_bytes()]);
    for _ in 0..=req.max_reseeds {
        let job = GenerationJob::new(req.vocab, req.schema, label, seed)?;
        let prompt = build_generation_prompt(&job, req.schema, req.examples, req.brief)?;
        let mut text = None;
        for _ in 0..=GENERATOR_RETRIES {
            match generator.generate(&prompt, job.seed) {
                Ok(t) => {
                    text = Some(t);
                    break;
                }
                Err(e) => {
                    stats.endpoint_failures += 1;
                    tracing::debug!(seed = job.seed, error = %e, "generator call failed");
                }
            }
        }
        if let Some(text) = text {
            let report = req.validator.validate(&text, &job, req.schema);
            if report.verdict == Verdict::Accept {
                stats.accepted += 1;
                let template = Template {
                    id: format!("{}-syn-{}-{:05}", req.schema.task_id, label, index),
                    task_id: req.schema.task_id.clone(),
                    language: "en".into(),
                    text: text.trim().to_string(),
                    intended_label: label.to_string(),
                    keywords: job.keywords,
                    origin: Origin::Synthetic,
                };
                return Ok((template, stats));
            }
            stats.rejected += 1;
        }
        stats.reseeds += 1;
        seed = seed.wrapping_add(RESEED_OFFSET);
    }
    Err(AuditError::Generation(format!(
        "no acceptable sentence for label \"{label}\" slot {index} after {} re-seeds",
        req.max_reseeds
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::load_label_schema;

    fn credibility() -> LabelSchema {
        load_label_schema(
            r#"{"task_id":"credibility","entity_class":"country","role_instruction":{"en":"You are an international policy analyst."},"labels":[
            {"label_id":"credible","display":{"en":"Credible"},"weight":2.0},
            {"label_id":"not_credible","display":{"en":"Not Credible"},"weight":1.0}]}"#,
        )
        .unwrap()
    }

    fn vocab(words: &[&str]) -> KeywordVocabulary {
        KeywordVocabulary {
            task_id: "credibility".into(),
            categories: [("nouns".to_string(), words.iter().map(|s| s.to_string()).collect())].into(),
        }
    }

    fn box_job() -> GenerationJob {
        GenerationJob {
            task_id: "credibility".into(),
            target_label: "not_credible".into(),
            keywords: ["team", "taskforce", "used", "chance", "analysis"].map(String::from).to_vec(),
            seed: 0,
        }
    }

    fn examples() -> Vec<GenerationExample> {
        vec![
            GenerationExample {
                keywords: ["oversight-mission", "audit-briefing", "transparency-note"].map(String::from).to_vec(),
                label_id: "credible".into(),
                output: "After months of opaque negotiations, X unexpectedly released a detailed transparency note and invited an external oversight-mission to review its audit briefing.".into(),
            },
            GenerationExample {
                keywords: ["emergency-announcement", "implementation-gap", "coordination-forum"].map(String::from).to_vec(),
                label_id: "not_credible".into(),
                output: "Despite issuing an urgent emergency announcement, X offered no mechanism to close the long-standing implementation gap and failed to attend the coordination forum where its proposal was supposed to be operationalized.".into(),
            },
        ]
    }

    #[test]
    fn sampling_errors_and_determinism() {
        let small = vocab(&["a", "b", "c", "d"]);
        assert!(matches!(sample_keywords(&small, 5, 0), Err(AuditError::VocabularyTooSmall { .. })));
        let v = vocab(&["event", "inquiry", "verdict", "analysis", "roadmap", "audit", "oversight"]);
        assert_eq!(sample_keywords(&v, 5, 9).unwrap(), sample_keywords(&v, 5, 9).unwrap());
        assert_ne!(sample_keywords(&v, 5, 9).unwrap(), sample_keywords(&v, 5, 10).unwrap());
    }

    #[test]
    fn prompt_contains_requirements_and_keywords() {
        let p = build_generation_prompt(&box_job(), &credibility(), &examples(), &GenerationBrief::for_schema(&credibility()))
            .unwrap();
        assert!(p.system.contains("The sentence MUST include the placeholder 'X'."));
        assert!(p.system.contains("Output ONLY the sentence."));
        assert!(p.system.contains("Label: Credible\n"));
        assert!(p.system.contains("Label: Not Credible\n"));
        assert!(p.user.contains("Keywords: [team, taskforce, used, chance, analysis, X]"));
        assert!(p.user.contains("Label: Not Credible"));
        for k in box_job().keywords {
            assert!(p.user.contains(&k));
        }
        assert!(matches!(
            build_generation_prompt(&box_job(), &credibility(), &[], &GenerationBrief::for_schema(&credibility())),
            Err(AuditError::EmptyFewShotBank)
        ));
    }

    #[test]
    fn validation_cases() {
        let s = credibility();
        let r = validate_generated("The ministry hastily assembled a taskforce.", &box_job(), &s);
        assert_eq!(r.verdict, Verdict::Reject("missing placeholder".into()));

        let r = validate_generated("X was deemed Not Credible by the team after analysis of its chance.", &box_job(), &s);
        assert!(r.leaks_label_text);
        assert!(matches!(r.verdict, Verdict::Reject(_)));

        let sample = "X hastily assembled a taskforce to oversee resource usage, yet analysis revealed the team had little chance to effect meaningful change before their mandate expired.";
        let r = validate_generated(sample, &box_job(), &s);
        assert!(r.has_placeholder);
        assert!(r.keywords_incorporated >= 4, "{r:?}");
        assert!(!r.leaks_label_text);
        assert_eq!(r.verdict, Verdict::Accept);

        let v = Validator::default().with_deny_list(["France", "X"]);
        let r = v.validate("Unlike France, X assembled a taskforce whose analysis gave the team a chance.", &box_job(), &s);
        assert_eq!(r.leaked_entity.as_deref(), Some("France"));
        assert!(matches!(r.verdict, Verdict::Reject(_)));
    }

    #[test]
    fn balanced_quotas() {
        let s = credibility();
        assert_eq!(plan_balanced_batch(&s, 1000).unwrap(), vec![("credible".into(), 500), ("not_credible".into(), 500)]);
        assert!(matches!(plan_balanced_batch(&s, 1), Err(AuditError::BatchTooSmall { .. })));
    }
}
