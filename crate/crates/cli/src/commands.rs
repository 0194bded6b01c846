use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use entaudit_core::alignment::{align, mask_item, write_alignment_grid, AlignmentReport, BenchmarkItem};
use entaudit_core::gateway::{Backend, MockBackend, PromptVariant, RunConfig};
use entaudit_core::registry::{self, summarize, RegistrySummary};
use entaudit_core::runner::{
    execute, load_observations, plan_run, read_bias, write_bias, write_observations, write_performance,
    write_summary, ExecuteOptions, ExportKind, ObservationStore, RunManifest,
};
use entaudit_core::scoring::{
    group_aggregate, macro_f1_grouped, score_observations, BiasRecord, F1Grouping, GroupStatistic, Observation,
    PerformanceRecord, Scope, ScoreOptions,
};
use entaudit_core::similarity::{
    aggregate_similarity, build_vectors, distance, similarity_matrix, top_pairs, write_matrix, ConfigFilter,
    SimilarityMatrix, VectorValues,
};
use entaudit_core::stats::{compare, ComparisonSpec};
use entaudit_core::synthgen::{
    generate_corpus, GenerationBrief, GenerationExample, GenerationRequest, KeywordVocabulary, Validator,
};
use entaudit_core::Exec;
use entaudit_http::{ChatGenerator, CompletionsBackend, Faults, MockServer};

use crate::config::Config;
use crate::{
    AlignCmd, BackendKind, Cli, Command, ExportArgs, RegistryCmd, RunArgs, ScoreArgs, SimilarityArgs, StatsCmd,
    StoreCmd, SynthCmd, Values,
};

const F1_GROUPINGS: [F1Grouping; 6] = [
    F1Grouping::Task,
    F1Grouping::Language,
    F1Grouping::Variant,
    F1Grouping::Model,
    F1Grouping::Entity,
    F1Grouping::Config,
];

pub fn dispatch(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let cfg = || Config::load(&cli.config);
    match cli.command {
        Command::Registry(RegistryCmd::Validate) => registry_validate(&cfg()?),
        Command::Synth(SynthCmd::Generate { task, total, seed, max_reseeds, out }) => {
            synth_generate(&cfg()?, &task, total, seed, max_reseeds, &out, exec)
        }
        Command::Plan { out } => plan(&cfg()?, &out),
        Command::Run(args) => run(&cfg()?, &args, exec),
        Command::Score(args) => score(&cfg()?, &args, exec),
        Command::Stats(StatsCmd::Compare { spec, bias }) => stats_compare(&cfg()?, &spec, &bias),
        Command::Similarity(args) => similarity(&cfg()?, &args, exec),
        Command::Align(AlignCmd::Mask { items, out }) => align_mask(&items, &out),
        Command::Align(AlignCmd::Correlate { benchmark, real, synthetic, variant, min_support, reports }) => {
            align_correlate(&cfg()?, &benchmark, &real, &synthetic, &variant, min_support, &reports, exec)
        }
        Command::Export(args) => export(&cfg()?, &args, exec),
        Command::Store(StoreCmd::Snapshot { store, out }) => {
            let cfg = cfg()?;
            let store = ObservationStore::open(cfg.store_path(store.as_deref()))?;
            store.write_snapshot(create(&out)?)?;
            Ok(())
        }
        Command::Store(StoreCmd::Compact { store }) => {
            let cfg = cfg()?;
            ObservationStore::open(cfg.store_path(store.as_deref()))?.compact()?;
            Ok(())
        }
        Command::MockServer { bind } => {
            let cfg = cfg()?;
            let (data, _, _) = cfg.audit_data()?;
            let server = MockServer::start(data, MockBackend::new(cfg.mock.clone()), Faults::default(), &bind)?;
            eprintln!("mock server listening on {}", server.base_url());
            server.join()?;
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn summary_keys(taxonomy: &registry::Taxonomy, explicit: &[String]) -> Vec<String> {
    if !explicit.is_empty() {
        return explicit.to_vec();
    }
    std::iter::once("entity_class".to_string()).chain(taxonomy.keys.keys().cloned()).collect()
}

fn registry_validate(cfg: &Config) -> Result<()> {
    let (data, balance, taxonomy) = cfg.audit_data()?;
    let summaries = summary_keys(&taxonomy, &[])
        .iter()
        .map(|k| summarize(&data.entities, k, &taxonomy))
        .collect::<entaudit_core::Result<Vec<_>>>()?;
    print_json(&json!({
        "entities": data.entities.len(),
        "templates": data.corpus.len(),
        "tasks": data.schemas.iter().map(|s| s.task_id.as_str()).collect::<Vec<_>>(),
        "entity_digest": data.entities.digest(),
        "template_digest": data.corpus.digest(),
        "balance": balance,
        "summaries": summaries,
    }))
}

fn synth_generate(
    cfg: &Config,
    task: &str,
    total: usize,
    seed: u64,
    max_reseeds: usize,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let schemas = cfg.schemas()?;
    let schema = schemas.get(task)?;
    let vocab_path = cfg.resolve(cfg.synth.vocabulary.as_deref().context("config key synth.vocabulary is not set")?);
    let vocab: KeywordVocabulary = serde_json::from_str(&std::fs::read_to_string(&vocab_path)?)
        .with_context(|| format!("parsing {}", vocab_path.display()))?;
    vocab.validate()?;
    let examples: Vec<GenerationExample> = match &cfg.synth.examples {
        Some(p) => read_jsonl(&cfg.resolve(p))?,
        None => Vec::new(),
    };
    let mut validator = Validator::default();
    if cfg.data.entities.is_some() {
        let registry = cfg.entities(&cfg.taxonomy()?)?;
        validator = validator.with_deny_list(registry.entities().iter().flat_map(|e| e.names.values().map(String::as_str)));
    }
    let model = cfg.synth.model.as_deref().context("config key synth.model is not set")?;
    let generator = ChatGenerator::new(cfg.endpoint.clone(), model)?;
    let brief = GenerationBrief::for_schema(schema);
    let req = GenerationRequest {
        schema,
        vocab: &vocab,
        examples: &examples,
        brief: &brief,
        validator: &validator,
        total,
        base_seed: seed,
        max_reseeds,
    };
    let (templates, stats) = generate_corpus(&req, &generator, exec)?;
    let mut w = create(out)?;
    for t in &templates {
        serde_json::to_writer(&mut w, t)?;
        writeln!(w)?;
    }
    w.flush()?;
    print_json(&stats)
}

fn plan(cfg: &Config, out: &Path) -> Result<()> {
    let (data, _, _) = cfg.audit_data()?;
    let manifest = plan_run(&data, &cfg.matrix)?;
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    print_json(&json!({
        "manifest_id": manifest.manifest_id,
        "planned_total": manifest.planned_total,
        "domains": manifest.domains,
    }))
}

fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cfg: &Config, args: &RunArgs, exec: Exec) -> Result<()> {
    let (data, _, _) = cfg.audit_data()?;
    let manifest = read_manifest(&args.manifest)?;
    let backend: Box<dyn Backend> = match args.backend {
        BackendKind::Mock => Box::new(MockBackend::new(cfg.mock.clone())),
        BackendKind::Http => Box::new(CompletionsBackend::new(cfg.endpoint.clone())?),
    };
    let path = cfg.store_path(args.store.as_deref());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut store = ObservationStore::open(&path)?;
    let opts = ExecuteOptions {
        concurrency: args.concurrency.unwrap_or(cfg.run.concurrency),
        chunk_size: cfg.run.chunk_size,
        stop_after: args.stop_after,
        exec,
    };
    let report = execute(&manifest, &data, backend.as_ref(), &mut store, &opts)?;
    if report.finished {
        store.compact()?;
    }
    tracing::info!(ok = report.ok, failed = report.failed, coverage = report.coverage(), "run finished");
    if let Some(p) = &args.report {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
    }
    print_json(&report)
}

fn observations(cfg: &Config, store: Option<&Path>) -> Result<Vec<Observation>> {
    let path = cfg.store_path(store);
    load_observations(&path).with_context(|| format!("loading {}", path.display()))
}

fn performance(obs: &[Observation], cfg: &Config) -> Result<Vec<PerformanceRecord>> {
    let (data, _, _) = cfg.audit_data()?;
    let mut records = Vec::new();
    for g in F1_GROUPINGS {
        records.extend(macro_f1_grouped(obs, &data.corpus, &data.schemas, g)?);
    }
    Ok(records)
}

fn score(cfg: &Config, args: &ScoreArgs, exec: Exec) -> Result<()> {
    let obs = observations(cfg, args.store.as_deref())?;
    let schemas = cfg.schemas()?;
    let report = score_observations(&obs, &schemas, &ScoreOptions { keep_context_records: args.keep_contexts }, exec)?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    write_bias(&report.records, create(&args.bias_out)?)?;
    if let Some(p) = &args.performance_out {
        write_performance(&performance(&obs, cfg)?, create(p)?)?;
    }
    print_json(&json!({
        "observations": obs.len(),
        "records": report.records.len(),
        "dropped_contexts": report.dropped_contexts.len(),
    }))
}

fn stats_compare(cfg: &Config, spec: &Path, bias: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let specs: Vec<ComparisonSpec> = match serde_json::from_str::<serde_json::Value>(&text)? {
        v @ serde_json::Value::Array(_) => serde_json::from_value(v)?,
        v => vec![serde_json::from_value(v)?],
    };
    let records = read_bias(File::open(bias).with_context(|| format!("opening {}", bias.display()))?)?;
    let registry = if specs.iter().any(|s| !s.left.entity_tags.is_empty() || !s.right.entity_tags.is_empty()) {
        Some(cfg.entities(&cfg.taxonomy()?)?)
    } else {
        None
    };
    tracing::info!(comparisons = specs.len(), "p-values are uncorrected for multiple comparisons");
    let mut out = std::io::stdout().lock();
    for s in &specs {
        let result = compare(&records, s, registry.as_ref())?;
        serde_json::to_writer(&mut out, &result)?;
        writeln!(out)?;
    }
    Ok(())
}

fn configs_in(obs: &[Observation]) -> Vec<RunConfig> {
    let mut configs: Vec<RunConfig> = obs.iter().map(Observation::config).collect();
    configs.sort();
    configs.dedup();
    configs
}

fn matrices(
    obs: &[Observation],
    cfg: &Config,
    filter: &ConfigFilter,
    values: VectorValues,
    coverage: f64,
    exec: Exec,
) -> Result<Vec<SimilarityMatrix>> {
    let schemas = cfg.schemas()?;
    let mut out = Vec::new();
    for c in configs_in(obs).iter().filter(|c| filter.matches(c)) {
        let set = build_vectors(obs, &schemas, c, coverage, values)?;
        for (e, cov) in &set.excluded {
            tracing::warn!(config = %c, entity = %e, coverage = cov, "entity below coverage threshold");
        }
        out.push(similarity_matrix(&set, exec)?);
    }
    Ok(out)
}

fn similarity(cfg: &Config, args: &SimilarityArgs, exec: Exec) -> Result<()> {
    let obs = observations(cfg, args.store.as_deref())?;
    let filter = ConfigFilter {
        task_id: args.task.clone(),
        model_id: args.model.clone(),
        language: args.language.clone(),
        variant: args.variant.clone(),
    };
    let values = match args.values {
        Values::Raw => VectorValues::Raw,
        Values::Delta => VectorValues::Delta,
    };
    let ms = matrices(&obs, cfg, &filter, values, args.coverage, exec)?;
    let s = aggregate_similarity(&ms, &filter)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_matrix(&s, create(&args.out_dir.join("similarity.csv"))?)?;
    write_matrix(&distance(&s), create(&args.out_dir.join("distance.csv"))?)?;
    let registry = match &args.group_key {
        Some(_) => Some(cfg.entities(&cfg.taxonomy()?)?),
        None => None,
    };
    let k = args.top.min(s.n() * s.n().saturating_sub(1) / 2);
    let pairs = if k > 0 { top_pairs(&s, k, registry.as_ref(), args.group_key.as_deref())? } else { Vec::new() };
    let mut w = csv::Writer::from_writer(create(&args.out_dir.join("top_pairs.csv"))?);
    w.write_record(["rank", "entity_a", "entity_b", "similarity", "group_a", "group_b"])?;
    for p in &pairs {
        w.write_record([
            p.rank.to_string(),
            p.entity_a.clone(),
            p.entity_b.clone(),
            p.similarity.to_string(),
            p.group_a.clone().unwrap_or_default(),
            p.group_b.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    print_json(&json!({"configs": ms.len(), "entities": s.n(), "pairs": pairs.len()}))
}

fn align_mask(items: &Path, out: &Path) -> Result<()> {
    let items: Vec<BenchmarkItem> = read_jsonl(items)?;
    let mut w = create(out)?;
    for item in &items {
        serde_json::to_writer(&mut w, &mask_item(item)?)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn align_correlate(
    cfg: &Config,
    benchmark: &str,
    real: &Path,
    synthetic: &Path,
    variant: &str,
    min_support: usize,
    reports_path: &Path,
    exec: Exec,
) -> Result<()> {
    let variant: PromptVariant = variant.parse()?;
    let schemas = cfg.schemas()?;
    let real_obs = load_observations(real)?;
    let syn_obs = load_observations(synthetic)?;
    let syn_configs = configs_in(&syn_obs);
    let mut reports: Vec<AlignmentReport> = if reports_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(reports_path)?)?
    } else {
        Vec::new()
    };
    reports.retain(|r| r.benchmark_id != benchmark);
    for c in configs_in(&real_obs).into_iter().filter(|c| c.variant == variant) {
        if !syn_configs.contains(&c) {
            tracing::warn!(config = %c, "config missing from the synthetic store");
            continue;
        }
        let slice = |obs: &[Observation]| obs.iter().filter(|o| o.config() == c).cloned().collect::<Vec<_>>();
        let (r, s) = (slice(&real_obs), slice(&syn_obs));
        match align(benchmark, (&r, &c), (&s, &c), &schemas, min_support, exec) {
            Ok(report) => reports.push(report),
            Err(e) => tracing::warn!(config = %c, error = %e, "alignment skipped"),
        }
    }
    reports.sort_by(|a, b| (&a.benchmark_id, &a.model_id, &a.language).cmp(&(&b.benchmark_id, &b.model_id, &b.language)));
    let mut w = create(reports_path)?;
    serde_json::to_writer_pretty(&mut w, &reports)?;
    w.flush()?;
    let rows: Vec<_> = reports
        .iter()
        .filter(|r| r.benchmark_id == benchmark)
        .map(|r| json!({"model_id": r.model_id, "language": r.language, "r": r.r, "n": r.n}))
        .collect();
    if rows.is_empty() {
        bail!("no (model, language) pair had enough shared entities");
    }
    print_json(&rows)
}

fn summary_aggregates(
    records: &[BiasRecord],
    cfg: &Config,
    keys: &[String],
) -> Result<(Vec<RegistrySummary>, Vec<(String, String, Vec<entaudit_core::scoring::GroupValue>)>)> {
    let taxonomy = cfg.taxonomy()?;
    let registry = cfg.entities(&taxonomy)?;
    let summaries =
        keys.iter().map(|k| summarize(&registry, k, &taxonomy)).collect::<entaudit_core::Result<Vec<_>>>()?;
    let mut by_config: BTreeMap<String, Vec<&BiasRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.scope == Scope::Global) {
        let label = if r.aggregation == "pooled" {
            "pooled".to_string()
        } else {
            format!("{}/{}/{}", r.model_id, r.language, r.variant)
        };
        by_config.entry(label).or_default().push(r);
    }
    let mut aggregates = Vec::new();
    for key in keys {
        for (label, rs) in &by_config {
            for (section, stat) in [("group_mean", GroupStatistic::Mean), ("group_magnitude", GroupStatistic::Magnitude)] {
                let values = group_aggregate(rs.iter().copied(), &registry, &taxonomy, key, stat)?;
                aggregates.push((section.to_string(), format!("{key}@{label}"), values));
            }
        }
    }
    Ok((summaries, aggregates))
}

fn export(cfg: &Config, args: &ExportArgs, exec: Exec) -> Result<()> {
    let kind: ExportKind = args.kind.parse()?;
    match kind {
        ExportKind::Alignment => {
            let path: PathBuf = args.reports.clone().context("--reports is required for the alignment export")?;
            let reports: Vec<AlignmentReport> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            write_alignment_grid(&reports, create(&args.out)?)?;
            return Ok(());
        }
        ExportKind::Summary if args.store.is_none() && !cfg.resolve(&cfg.run.store).exists() => {
            let taxonomy = cfg.taxonomy()?;
            let keys = summary_keys(&taxonomy, &args.group_keys);
            let registry = cfg.entities(&taxonomy)?;
            let summaries =
                keys.iter().map(|k| summarize(&registry, k, &taxonomy)).collect::<entaudit_core::Result<Vec<_>>>()?;
            write_summary(&summaries, &[], create(&args.out)?)?;
            return Ok(());
        }
        _ => {}
    }
    let obs = observations(cfg, args.store.as_deref())?;
    match kind {
        ExportKind::Observations => write_observations(&obs, create(&args.out)?)?,
        ExportKind::Bias => {
            let report = score_observations(&obs, &cfg.schemas()?, &ScoreOptions::default(), exec)?;
            write_bias(&report.records, create(&args.out)?)?;
        }
        ExportKind::Performance => write_performance(&performance(&obs, cfg)?, create(&args.out)?)?,
        ExportKind::Similarity => {
            let filter = ConfigFilter::default();
            let ms = matrices(
                &obs,
                cfg,
                &filter,
                VectorValues::Raw,
                entaudit_core::similarity::DEFAULT_COVERAGE_THRESHOLD,
                exec,
            )?;
            write_matrix(&aggregate_similarity(&ms, &filter)?, create(&args.out)?)?;
        }
        ExportKind::Summary => {
            let report = score_observations(&obs, &cfg.schemas()?, &ScoreOptions::default(), exec)?;
            let keys = summary_keys(&cfg.taxonomy()?, &args.group_keys);
            let (summaries, aggregates) = summary_aggregates(&report.records, cfg, &keys)?;
            write_summary(&summaries, &aggregates, create(&args.out)?)?;
        }
        ExportKind::Alignment => unreachable!("handled above"),
    }
    Ok(())
}
