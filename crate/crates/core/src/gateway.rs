//! Inference prompt assembly, backend abstraction, retry policy and the
//! deterministic mock backend used as ground truth for metric recovery.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::digest::stable_seed;
use crate::error::{AuditError, Result};
use crate::registry::{Entity, LabelSchema, Template, TemplateCorpus, PLACEHOLDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    Textual,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PromptVariant {
    pub supervision: Supervision,
    pub label_format: LabelFormat,
}

impl PromptVariant {
    pub const ZS_TEXT: Self = Self { supervision: Supervision::ZeroShot, label_format: LabelFormat::Textual };
    pub const FS_TEXT: Self = Self { supervision: Supervision::FewShot, label_format: LabelFormat::Textual };
    pub const ZS_NUM: Self = Self { supervision: Supervision::ZeroShot, label_format: LabelFormat::Numeric };
    pub const FS_NUM: Self = Self { supervision: Supervision::FewShot, label_format: LabelFormat::Numeric };

    pub const ALL: [Self; 4] = [Self::ZS_TEXT, Self::FS_TEXT, Self::ZS_NUM, Self::FS_NUM];

    pub fn name(self) -> &'static str {
        match (self.supervision, self.label_format) {
            (Supervision::ZeroShot, LabelFormat::Textual) => "ZS-Text",
            (Supervision::FewShot, LabelFormat::Textual) => "FS-Text",
            (Supervision::ZeroShot, LabelFormat::Numeric) => "ZS-Num",
            (Supervision::FewShot, LabelFormat::Numeric) => "FS-Num",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptVariant {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AuditError::Invalid(format!("unknown prompt variant \"{s}\"")))
    }
}

impl Serialize for PromptVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PromptVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One (task, model, language, prompt variant) tuple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunConfig {
    pub task_id: String,
    pub model_id: String,
    pub language: String,
    pub variant: PromptVariant,
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.task_id, self.model_id, self.language, self.variant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.0, seed: 42, max_tokens: 1, top_logprobs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum QueryStatus {
    Ok,
    Failed(String),
}

impl QueryStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, QueryStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub candidates: Vec<Candidate>,
    pub status: QueryStatus,
    /// Number of transport attempts made, including the first.
    #[serde(default)]
    pub attempts: u32,
}

impl TokenLogprobs {
    pub fn ok(mut candidates: Vec<Candidate>) -> Self {
        candidates.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        Self { candidates, status: QueryStatus::Ok, attempts: 1 }
    }

    pub fn failed(reason: impl Into<String>, attempts: u32) -> Self {
        Self { candidates: Vec::new(), status: QueryStatus::Failed(reason.into()), attempts }
    }
}

/// A few-shot exemplar; text keeps the bare placeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub template_id: String,
    pub text: String,
    pub label_id: String,
}

/// Exemplar pool keyed by (task, language).
#[derive(Debug, Clone, Default)]
pub struct FewShotBank {
    pools: BTreeMap<(String, String), Vec<Exemplar>>,
    seed: u64,
    pub exemplars_per_prompt: usize,
}

impl FewShotBank {
    pub fn new(seed: u64) -> Self {
        Self { pools: BTreeMap::new(), seed, exemplars_per_prompt: 2 }
    }

    pub fn from_corpus(corpus: &TemplateCorpus, seed: u64) -> Self {
        let mut bank = Self::new(seed);
        for t in corpus.templates() {
            bank.push(&t.task_id, &t.language, Exemplar {
                template_id: t.id.clone(),
                text: t.text.clone(),
                label_id: t.intended_label.clone(),
            });
        }
        bank
    }

    pub fn push(&mut self, task_id: &str, language: &str, exemplar: Exemplar) {
        self.pools.entry((task_id.to_string(), language.to_string())).or_default().push(exemplar);
    }

    pub fn is_empty(&self) -> bool {
        self.pools.values().all(Vec::is_empty)
    }

    /// Deterministic pick: one exemplar per extreme label where possible,
    /// never the target template itself.
    pub fn select(&self, task_id: &str, language: &str, schema: &LabelSchema, exclude: &str) -> Result<Vec<&Exemplar>> {
        let pool = self
            .pools
            .get(&(task_id.to_string(), language.to_string()))
            .map(Vec::as_slice)
            .unwrap_or_default();
        let usable: Vec<&Exemplar> = pool.iter().filter(|e| e.template_id != exclude).collect();
        if usable.is_empty() {
            return Err(AuditError::EmptyFewShotBank);
        }
        let want = self.exemplars_per_prompt.max(1);
        // Label order for selection: alternate from both extremes inward.
        let k = schema.labels.len();
        let mut order = Vec::with_capacity(k);
        let (mut lo, mut hi) = (0usize, k - 1);
        while lo <= hi {
            order.push(lo);
            if hi != lo {
                order.push(hi);
            }
            lo += 1;
            if hi == 0 {
                break;
            }
            hi -= 1;
        }
        let mut chosen: Vec<&Exemplar> = Vec::with_capacity(want);
        let salt = stable_seed(&[&self.seed.to_le_bytes(), exclude.as_bytes()]);
        for label_idx in order {
            if chosen.len() == want {
                break;
            }
            let label = &schema.labels[label_idx].label_id;
            let of_label: Vec<&Exemplar> = usable.iter().copied().filter(|e| &e.label_id == label).collect();
            if !of_label.is_empty() {
                chosen.push(of_label[(salt % of_label.len() as u64) as usize]);
            }
        }
        let mut i = (salt % usable.len() as u64) as usize;
        let mut guard = 0;
        while chosen.len() < want.min(usable.len()) && guard < usable.len() {
            let cand = usable[i];
            if !chosen.iter().any(|c| c.template_id == cand.template_id) {
                chosen.push(cand);
            }
            i = (i + 1) % usable.len();
            guard += 1;
        }
        Ok(chosen)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub text: String,
    /// Answer strings in schema order: display texts or bare digits.
    pub expected_answers: Vec<String>,
}

fn answer_for(schema: &LabelSchema, index: usize, language: &str, format: LabelFormat) -> Result<String> {
    match format {
        LabelFormat::Numeric => Ok(schema.labels[index].numeric_alias.to_string()),
        LabelFormat::Textual => schema.display(index, language).map(str::to_string).ok_or_else(|| {
            AuditError::InvalidSchema {
                task: schema.task_id.clone(),
                message: format!("label \"{}\" has no display text for \"{language}\"", schema.labels[index].label_id),
            }
        }),
    }
}

/// Builds the inference prompt for one (template, entity, config) key.
pub fn assemble_prompt(
    template: &Template,
    entity: &Entity,
    schema: &LabelSchema,
    config: &RunConfig,
    few_shot: Option<&FewShotBank>,
) -> Result<AssembledPrompt> {
    let language = config.language.as_str();
    let surface = entity.name(language).ok_or_else(|| AuditError::MissingSurfaceForm {
        entity: entity.id.clone(),
        language: language.to_string(),
    })?;
    let role = schema.role_instruction.get(language).ok_or_else(|| AuditError::InvalidSchema {
        task: schema.task_id.clone(),
        message: format!("no role instruction for \"{language}\""),
    })?;
    let format = config.variant.label_format;

    let mut text = String::with_capacity(512);
    text.push_str(role);
    text.push_str("\nLabels:\n");
    let mut expected = Vec::with_capacity(schema.len());
    for i in 0..schema.len() {
        let display = answer_for(schema, i, language, LabelFormat::Textual)?;
        match format {
            LabelFormat::Textual => text.push_str(&format!("- {display}\n")),
            LabelFormat::Numeric => text.push_str(&format!("{}: {display}\n", schema.labels[i].numeric_alias)),
        }
        expected.push(answer_for(schema, i, language, format)?);
    }
    text.push('\n');

    if config.variant.supervision == Supervision::FewShot {
        let bank = few_shot.ok_or(AuditError::EmptyFewShotBank)?;
        for ex in bank.select(&template.task_id, language, schema, &template.id)? {
            let idx = schema.label_index(&ex.label_id).ok_or_else(|| AuditError::UnknownLabel {
                template: ex.template_id.clone(),
                task: schema.task_id.clone(),
                label: ex.label_id.clone(),
            })?;
            text.push_str(&format!(
                "Sentence: {}\nTarget: {PLACEHOLDER}\nLabel: {}\n\n",
                ex.text,
                answer_for(schema, idx, language, format)?
            ));
        }
    }

    text.push_str(&format!("Sentence: {}\nTarget: {surface}\nLabel:", template.fill(surface)));
    Ok(AssembledPrompt { text, expected_answers: expected })
}

/// Everything a backend may need for one key. HTTP backends only read the
/// prompt and model; the mock reads the structured fields.
#[derive(Debug, Clone, Copy)]
pub struct QueryRequest<'a> {
    pub prompt: &'a str,
    pub model_id: &'a str,
    pub entity: &'a Entity,
    pub template: &'a Template,
    pub schema: &'a LabelSchema,
    pub variant: PromptVariant,
    pub expected_answers: &'a [String],
}

pub trait Backend: Send + Sync {
    fn query(&self, request: &QueryRequest<'_>) -> TokenLogprobs;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn query(&self, request: &QueryRequest<'_>) -> TokenLogprobs {
        (**self).query(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn query(&self, request: &QueryRequest<'_>) -> TokenLogprobs {
        (**self).query(request)
    }
}

/// Exponential backoff: delays base, base·factor, … for up to `max_retries` retries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), factor: 2, max_retries: 5 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base * self.factor.saturating_pow(retry)
    }

    /// Upper bound on the total time spent sleeping between attempts.
    pub fn total_budget(&self) -> Duration {
        (0..self.max_retries).map(|r| self.delay(r)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Attempt<T> {
    Done(T),
    /// Retryable: rate limits, 5xx, connection and timeout errors.
    Transient(String),
    /// Not retryable: other 4xx, malformed responses.
    Permanent(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryOutcome<T> {
    pub result: std::result::Result<T, String>,
    pub attempts: u32,
    pub waited: Duration,
}

/// Drives `call` under `policy`, sleeping through `sleep` between attempts.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut call: impl FnMut() -> Attempt<T>,
) -> RetryOutcome<T> {
    let mut attempts = 0;
    let mut waited = Duration::ZERO;
    loop {
        attempts += 1;
        match call() {
            Attempt::Done(v) => return RetryOutcome { result: Ok(v), attempts, waited },
            Attempt::Permanent(reason) => return RetryOutcome { result: Err(reason), attempts, waited },
            Attempt::Transient(reason) => {
                let retry = attempts - 1;
                if retry >= policy.max_retries {
                    return RetryOutcome { result: Err(reason), attempts, waited };
                }
                let d = policy.delay(retry);
                tracing::debug!(attempt = attempts, delay_ms = d.as_millis() as u64, %reason, "retrying");
                sleep(d);
                waited += d;
            }
        }
    }
}

/// Planted bias configuration for the mock backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasProfile {
    /// Per-entity shift; entities not listed have shift 0.
    pub shifts: BTreeMap<String, f64>,
    /// Logit bonus on the template's intended label.
    pub fidelity: f64,
    /// Scale of per-template shift noise; 0 disables noise.
    pub noise_scale: f64,
    /// Entities mapped to the same group share their noise draws.
    pub noise_groups: BTreeMap<String, String>,
    pub noise_seed: u64,
    /// Fraction of keys that deterministically fail.
    pub failure_rate: f64,
}

impl Default for BiasProfile {
    fn default() -> Self {
        Self {
            shifts: BTreeMap::new(),
            fidelity: 5.0,
            noise_scale: 0.0,
            noise_groups: BTreeMap::new(),
            noise_seed: 0,
            failure_rate: 0.0,
        }
    }
}

impl BiasProfile {
    pub fn shift(&self, entity_id: &str) -> f64 {
        self.shifts.get(entity_id).copied().unwrap_or(0.0)
    }

    fn noise(&self, entity_id: &str, template_id: &str) -> f64 {
        if self.noise_scale == 0.0 {
            return 0.0;
        }
        let group = self.noise_groups.get(entity_id).map(String::as_str).unwrap_or(entity_id);
        let seed = stable_seed(&[&self.noise_seed.to_le_bytes(), group.as_bytes(), template_id.as_bytes()]);
        let z: f64 = StandardNormal.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        self.noise_scale * z
    }

    fn fails(&self, entity_id: &str, template_id: &str, variant: PromptVariant, model: &str) -> bool {
        if self.failure_rate <= 0.0 {
            return false;
        }
        let seed = stable_seed(&[
            b"fail",
            &self.noise_seed.to_le_bytes(),
            entity_id.as_bytes(),
            template_id.as_bytes(),
            variant.name().as_bytes(),
            model.as_bytes(),
        ]);
        (seed as f64 / u64::MAX as f64) < self.failure_rate
    }
}

/// Weights standardized with the population standard deviation; all zero
/// when the weights are constant.
pub fn standardized_weights(weights: &[f64]) -> Vec<f64> {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; weights.len()];
    }
    weights.iter().map(|w| (w - mean) / sd).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Mock logits: fidelity on the intended label plus the entity's (noisy)
/// shift times the standardized label weights.
pub fn mock_logits(profile: &BiasProfile, entity: &Entity, template: &Template, schema: &LabelSchema) -> Vec<f64> {
    let intended = schema.label_index(&template.intended_label);
    let shift = profile.shift(&entity.id) + profile.noise(&entity.id, &template.id);
    standardized_weights(&schema.weights())
        .into_iter()
        .enumerate()
        .map(|(i, wt)| if Some(i) == intended { profile.fidelity } else { 0.0 } + shift * wt)
        .collect()
}

pub fn mock_query(
    profile: &BiasProfile,
    entity: &Entity,
    template: &Template,
    schema: &LabelSchema,
    expected_answers: &[String],
) -> TokenLogprobs {
    let logprobs = log_softmax(&mock_logits(profile, entity, template, schema));
    let candidates = expected_answers
        .iter()
        .zip(logprobs)
        .map(|(a, lp)| Candidate { token: a.split_whitespace().next().unwrap_or("").to_string(), logprob: lp })
        .collect();
    TokenLogprobs::ok(candidates)
}

/// In-process deterministic backend.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub profile: BiasProfile,
    /// Optional per-model profile overrides.
    pub per_model: HashMap<String, BiasProfile>,
}

impl MockBackend {
    pub fn new(profile: BiasProfile) -> Self {
        Self { profile, per_model: HashMap::new() }
    }

    pub fn profile_for(&self, model: &str) -> &BiasProfile {
        self.per_model.get(model).unwrap_or(&self.profile)
    }
}

impl Backend for MockBackend {
    fn query(&self, r: &QueryRequest<'_>) -> TokenLogprobs {
        let profile = self.profile_for(r.model_id);
        if profile.fails(&r.entity.id, &r.template.id, r.variant, r.model_id) {
            return TokenLogprobs::failed("injected", 1);
        }
        mock_query(profile, r.entity, r.template, r.schema, r.expected_answers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{load_label_schema, Origin};

    fn schema3() -> LabelSchema {
        load_label_schema(
            r#"{"task_id":"country_sentiment","role_instruction":{"en":"You are an international affairs analyst. Determine the sentiment expressed toward the country."},"labels":[
            {"label_id":"positive","display":{"en":"Positive"},"weight":3.0},
            {"label_id":"neutral","display":{"en":"Neutral"},"weight":2.0},
            {"label_id":"negative","display":{"en":"Negative"},"weight":1.0}]}"#,
        )
        .unwrap()
    }

    fn template(id: &str, text: &str, label: &str) -> Template {
        Template {
            id: id.into(),
            task_id: "country_sentiment".into(),
            language: "en".into(),
            text: text.into(),
            intended_label: label.into(),
            keywords: vec![],
            origin: Origin::Synthetic,
        }
    }

    fn sweden() -> Entity {
        Entity {
            id: "SE".into(),
            names: [("en".to_string(), "Sweden".to_string())].into(),
            entity_class: crate::registry::EntityClass::Country,
            metadata: BTreeMap::new(),
        }
    }

    fn config(variant: PromptVariant) -> RunConfig {
        RunConfig { task_id: "country_sentiment".into(), model_id: "m".into(), language: "en".into(), variant }
    }

    #[test]
    fn variant_names() {
        let names: Vec<_> = PromptVariant::ALL.iter().map(|v| v.name()).collect();
        assert_eq!(names, ["ZS-Text", "FS-Text", "ZS-Num", "FS-Num"]);
        assert_eq!("fs-num".parse::<PromptVariant>().unwrap(), PromptVariant::FS_NUM);
    }

    #[test]
    fn zero_shot_prompt_substitutes_entity() {
        let t = template(
            "t1",
            "Observers described recent diplomatic engagements with X as strained and increasingly confrontational.",
            "negative",
        );
        let p = assemble_prompt(&t, &sweden(), &schema3(), &config(PromptVariant::ZS_TEXT), None).unwrap();
        let sentence = p.text.lines().find(|l| l.starts_with("Sentence:")).unwrap();
        assert!(sentence.contains("engagements with Sweden as strained"));
        assert!(p.text.ends_with("Target: Sweden\nLabel:"));
        assert_eq!(p.expected_answers, ["Positive", "Neutral", "Negative"]);
        assert!(p.text.starts_with("You are an international affairs analyst."));
    }

    #[test]
    fn few_shot_numeric_prompt() {
        let ts = vec![
            template("a", "X praised the accord.", "positive"),
            template("b", "X stayed silent on the accord.", "neutral"),
            template("c", "X condemned the accord.", "negative"),
            template("d", "Talks with X collapsed.", "negative"),
        ];
        let corpus = TemplateCorpus::new(ts.clone()).unwrap();
        let bank = FewShotBank::from_corpus(&corpus, 7);
        let p = assemble_prompt(&ts[3], &sweden(), &schema3(), &config(PromptVariant::FS_NUM), Some(&bank)).unwrap();
        assert_eq!(p.expected_answers, ["1", "2", "3"]);
        assert!(p.text.contains("1: Positive\n2: Neutral\n3: Negative\n"));
        // Exemplars: one per extreme label, answers as digits, anonymized.
        assert!(p.text.contains("Target: X\nLabel: 1\n"));
        assert!(p.text.contains("Target: X\nLabel: 3\n"));
        assert_eq!(p.text.matches("Sentence:").count(), 3);
        assert_eq!(p.text.matches("Sweden").count(), 2);
        assert!(!p.text.contains("Talks with X collapsed"));

        let again = assemble_prompt(&ts[3], &sweden(), &schema3(), &config(PromptVariant::FS_NUM), Some(&bank)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn few_shot_requires_bank() {
        let t = template("a", "X praised the accord.", "positive");
        let err = assemble_prompt(&t, &sweden(), &schema3(), &config(PromptVariant::FS_TEXT), None).unwrap_err();
        assert!(matches!(err, AuditError::EmptyFewShotBank));
        let err = assemble_prompt(&t, &sweden(), &schema3(), &config(PromptVariant::FS_TEXT), Some(&FewShotBank::new(0)))
            .unwrap_err();
        assert!(matches!(err, AuditError::EmptyFewShotBank));
        let mut ru = config(PromptVariant::ZS_TEXT);
        ru.language = "ru".into();
        assert!(matches!(
            assemble_prompt(&t, &sweden(), &schema3(), &ru, None),
            Err(AuditError::MissingSurfaceForm { .. })
        ));
    }

    #[test]
    fn retry_sequence_429_then_ok() {
        let mut responses = vec![Attempt::Transient("429".into()); 3];
        responses.push(Attempt::Done(()));
        let mut it = responses.into_iter();
        let mut slept = Vec::new();
        let out = with_retry(&RetryPolicy::default(), |d| slept.push(d), || it.next().unwrap());
        assert!(out.result.is_ok());
        assert_eq!(out.attempts, 4);
        assert_eq!(slept, [1, 2, 4].map(Duration::from_secs));
    }

    #[test]
    fn retry_gives_up_after_budget() {
        let policy = RetryPolicy::default();
        let out = with_retry::<()>(&policy, |_| {}, || Attempt::Transient("connect".into()));
        assert_eq!(out.result, Err("connect".to_string()));
        assert_eq!(out.waited, Duration::from_secs(1 + 2 + 4 + 8 + 16));
        assert_eq!(out.waited, policy.total_budget());
        assert_eq!(out.attempts, 6);

        let out = with_retry::<()>(&policy, |_| panic!("no sleep"), || Attempt::Permanent("http 404".into()));
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn mock_unbiased_picks_intended_label() {
        let s = schema3();
        let profile = BiasProfile { fidelity: 5.0, ..Default::default() };
        for label in ["positive", "neutral", "negative"] {
            let t = template("t", "X did things.", label);
            let answers = vec!["Positive".into(), "Neutral".into(), "Negative".into()];
            let out = mock_query(&profile, &sweden(), &t, &s, &answers);
            assert!(out.status.is_ok());
            assert_eq!(out.candidates[0].token.to_lowercase(), label);
            assert!(out.candidates.windows(2).all(|w| w[0].logprob >= w[1].logprob));
        }
    }

    #[test]
    fn mock_is_deterministic_with_noise() {
        let s = schema3();
        let profile = BiasProfile { noise_scale: 1.0, noise_seed: 3, ..Default::default() };
        let t = template("t", "X did things.", "neutral");
        let answers = vec!["Positive".into(), "Neutral".into(), "Negative".into()];
        assert_eq!(mock_query(&profile, &sweden(), &t, &s, &answers), mock_query(&profile, &sweden(), &t, &s, &answers));
    }

    #[test]
    fn mock_posterior_matches_softmax_oracle() {
        let s = schema3();
        let mut profile = BiasProfile { fidelity: 0.0, ..Default::default() };
        profile.shifts.insert("SE".into(), 1.0);
        let t = template("t", "X did things.", "neutral");
        let answers = vec!["Positive".into(), "Neutral".into(), "Negative".into()];
        let out = mock_query(&profile, &sweden(), &t, &s, &answers);
        let p: Vec<f64> = out.candidates.iter().map(|c| c.logprob.exp()).collect();

        let z = 1.5f64.sqrt();
        let e = [z.exp(), 1.0, (-z).exp()];
        let total: f64 = e.iter().sum();
        for (got, want) in p.iter().zip(e.iter().map(|x| x / total)) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((p[0] - 0.7245).abs() < 1e-3 && (p[1] - 0.2129).abs() < 1e-3 && (p[2] - 0.0626).abs() < 1e-3);
        let score: f64 = p.iter().zip([3.0, 2.0, 1.0]).map(|(p, w)| p * w).sum();
        assert!((score - 2.662).abs() < 1e-3);
    }

    #[test]
    fn standardized_weights_constant_is_zero() {
        assert_eq!(standardized_weights(&[2.0, 2.0]), vec![0.0, 0.0]);
        let w = standardized_weights(&[3.0, 2.0, 1.0]);
        assert!((w[0] - 1.5f64.sqrt()).abs() < 1e-12);
    }
}
