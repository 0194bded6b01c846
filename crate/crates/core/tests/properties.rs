use proptest::prelude::*;

use entaudit_core::fixture::{self, FixtureSpec};
use entaudit_core::gateway::{mock_query, BiasProfile, PromptVariant, QueryStatus};
use entaudit_core::registry::EntityClass;
use entaudit_core::runner::{enumerate_keys, plan_run, replay, ConfigMatrix, ObservationStore};
use entaudit_core::scoring::{normalize_context, raw_score, score_observations, Observation, ObservationKey, ScoreOptions};
use entaudit_core::similarity::{build_vectors, similarity_matrix, VectorValues};
use entaudit_core::synthgen::plan_balanced_batch;
use entaudit_core::Exec;

fn spec(entities: usize, tasks: usize, templates: usize, langs: usize) -> FixtureSpec {
    FixtureSpec {
        entities,
        tasks,
        templates_per_task: templates,
        languages: (0..langs).map(|i| format!("l{i}")).collect(),
        ..Default::default()
    }
}

fn observation(entity: usize, template: usize, variant: PromptVariant, p: [f64; 3], ok: bool) -> Observation {
    let total: f64 = p.iter().sum();
    let posterior: Vec<f64> = p.iter().map(|x| x / total).collect();
    Observation {
        key: ObservationKey {
            entity_id: format!("e{entity:03}"),
            template_id: format!("syn-task0-en-{template:04}"),
            model_id: "m".into(),
            language: "en".into(),
            variant,
        },
        task_id: "task0".into(),
        predicted: ok.then(|| entaudit_core::scoring::argmax(&posterior)),
        posterior: if ok { posterior } else { Vec::new() },
        status: if ok { QueryStatus::Ok } else { QueryStatus::Failed("x".into()) },
    }
}

fn posterior() -> impl Strategy<Value = [f64; 3]> {
    [0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planned_total_matches_enumeration(
        e in 1usize..6, t in 1usize..3, n in 1usize..6, langs in 1usize..3,
        models in 1usize..3, variants in 1usize..5,
    ) {
        let data = fixture::audit_data(&spec(e, t, n, langs)).unwrap();
        let matrix = ConfigMatrix {
            tasks: vec![],
            models: (0..models).map(|i| format!("m{i}")).collect(),
            languages: (0..langs).map(|i| format!("l{i}")).collect(),
            variants: PromptVariant::ALL[..variants].to_vec(),
        };
        let manifest = plan_run(&data, &matrix).unwrap();
        let keys = enumerate_keys(&manifest, &data).unwrap();
        prop_assert_eq!(manifest.planned_total, keys.len() as u64);
        prop_assert_eq!(manifest.planned_total, (e * t * n * langs * models * variants) as u64);
    }

    #[test]
    fn balanced_quotas_differ_by_at_most_one(total in 3usize..500) {
        let schema = fixture::sentiment_schema("t", &["en".to_string()]);
        let quotas = plan_balanced_batch(&schema, total).unwrap();
        let counts: Vec<usize> = quotas.iter().map(|q| q.1).collect();
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn normalization_is_affine_invariant(
        scores in prop::collection::vec(-1.0f64..1.0, 2..40),
        a in 0.01f64..100.0,
        b in -50.0f64..50.0,
    ) {
        let base = normalize_context(&scores).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let other = normalize_context(&moved).unwrap();
        let spread = scores.iter().cloned().fold(f64::MIN, f64::max) - scores.iter().cloned().fold(f64::MAX, f64::min);
        for (x, y) in base.iter().zip(&other) {
            if spread > 1e-6 {
                prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            }
        }
        let mean: f64 = base.iter().sum::<f64>() / base.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn normalization_preserves_rank(scores in prop::collection::vec(-1.0f64..1.0, 2..40)) {
        let d = normalize_context(&scores).unwrap();
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(d[i] <= d[j]);
                }
            }
        }
    }

    #[test]
    fn mock_score_is_monotone_in_shift(lo in -3.0f64..3.0, gap in 0.01f64..3.0, template in 0usize..12) {
        let data = fixture::audit_data(&spec(1, 1, 12, 1)).unwrap();
        let entity = &data.entities.entities()[0];
        let t = &data.corpus.templates()[template];
        let schema = data.schemas.get(&t.task_id).unwrap();
        let answers: Vec<String> = ["Negative", "Neutral", "Positive"].map(String::from).to_vec();
        let score = |shift: f64| {
            let profile = BiasProfile { shifts: [(entity.id.clone(), shift)].into(), ..Default::default() };
            let lp = mock_query(&profile, entity, t, schema, &answers);
            let p = entaudit_core::scoring::extract_posterior(&lp, &answers).unwrap();
            raw_score(&p, &schema.weights())
        };
        prop_assert!(score(lo + gap) > score(lo));
    }

    #[test]
    fn scoring_ignores_observation_order(
        cells in prop::collection::vec((posterior(), prop::bool::weighted(0.9)), 4 * 6),
        seed in any::<u64>(),
    ) {
        let obs: Vec<Observation> = cells
            .iter()
            .enumerate()
            .map(|(i, (p, ok))| observation(i % 4, i / 4, PromptVariant::ZS_TEXT, *p, *ok))
            .collect();
        let schemas = fixture::audit_data(&spec(4, 1, 6, 1)).unwrap().schemas;
        let a = score_observations(&obs, &schemas, &ScoreOptions { keep_context_records: true }, Exec::Parallel);
        let mut shuffled = obs.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let b = score_observations(&shuffled, &schemas, &ScoreOptions { keep_context_records: true }, Exec::Sequential);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.records, b.records),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(
        cells in prop::collection::vec((posterior(), prop::bool::weighted(0.95)), 5 * 8),
    ) {
        let obs: Vec<Observation> = cells
            .iter()
            .enumerate()
            .map(|(i, (p, ok))| observation(i % 5, i / 5, PromptVariant::ZS_TEXT, *p, *ok))
            .collect();
        let schemas = fixture::audit_data(&spec(5, 1, 8, 1)).unwrap().schemas;
        let config = obs[0].config();
        let set = build_vectors(&obs, &schemas, &config, 0.0, VectorValues::Raw).unwrap();
        let Ok(m) = similarity_matrix(&set, Exec::Parallel) else { return Ok(()) };
        prop_assert!(m.is_symmetric(0.0));
        prop_assert!(m.values.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn store_replay_rebuilds_index(
        writes in prop::collection::vec((0usize..4, 0usize..4, posterior(), prop::bool::ANY), 1..40),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.log");
        let mut store = ObservationStore::open(&path).unwrap();
        for (e, t, p, ok) in &writes {
            store.append(observation(*e, *t, PromptVariant::FS_NUM, *p, *ok)).unwrap();
        }
        store.flush().unwrap();
        let live = store.snapshot_string();
        let replayed = replay(&path).unwrap();
        let mut text = Vec::new();
        entaudit_core::runner::store::write_snapshot(&replayed, &mut text).unwrap();
        prop_assert_eq!(&live, &String::from_utf8(text).unwrap());
        store.compact().unwrap();
        prop_assert_eq!(&live, &store.snapshot_string());
        for (e, t, _, ok) in &writes {
            if *ok {
                let key = observation(*e, *t, PromptVariant::FS_NUM, [1.0; 3], true).key;
                prop_assert!(replayed.is_done(&key));
            }
        }
    }
}

#[test]
fn mixed_class_plan_matches_enumeration() {
    let mut data = fixture::audit_data(&spec(3, 1, 2, 1)).unwrap();
    let mut entities = data.entities.entities().to_vec();
    entities.extend(fixture::entities(2, EntityClass::Country, &["l0".to_string()]).into_iter().map(|mut e| {
        e.id = format!("c{}", e.id);
        e
    }));
    data.entities = entaudit_core::registry::EntityRegistry::new(entities).unwrap();
    let matrix = ConfigMatrix {
        tasks: vec![],
        models: vec!["m".into()],
        languages: vec!["l0".into()],
        variants: vec![PromptVariant::ZS_TEXT],
    };
    let manifest = plan_run(&data, &matrix).unwrap();
    assert_eq!(manifest.planned_total, enumerate_keys(&manifest, &data).unwrap().len() as u64);
}
