use proptest::prelude::*;

use prix_core::classifier::Variant;
use prix_core::evaluation::{
    confusion_matrix, load_results, loo_documents, loo_pages, vote, vote_documents, write_report,
    EvalError, Granularity, LooConfig, LooResult, Prediction,
};
use prix_core::expectation::{build_expectation_table, ExpectationTable};
use prix_core::features::default_n_grid;
use prix_core::ingest::validate_collection;
use prix_core::synth::{generate, SynthConfig};

fn small_table(seed: u64, docs: usize) -> ExpectationTable {
    let corpus = generate(&SynthConfig {
        docs_per_class: vec![docs; 3],
        pages_per_doc: (1, 3),
        seed,
        ..Default::default()
    })
    .unwrap();
    build_expectation_table(&validate_collection(corpus.pages, &corpus.manifest, true).unwrap().0)
}

fn quick(archs: &[Variant], n_grid: &[usize]) -> LooConfig {
    LooConfig {
        n_grid: n_grid.to_vec(),
        archs: archs.to_vec(),
        epochs: 10,
        hidden_width: 16,
        seed: 1,
        ..Default::default()
    }
}

fn pred(id: usize, t: usize, p: usize, post: Vec<f64>) -> Prediction {
    Prediction {
        unit_id: format!("u{id:03}"),
        true_class: t,
        predicted_class: p,
        posterior: post,
    }
}

proptest! {
    #[test]
    fn unanimous_pages_decide_the_document(class in 0usize..4, n in 1usize..6, noise in prop::collection::vec(0.0f64..1.0, 24)) {
        let preds: Vec<Prediction> = (0..n)
            .map(|i| {
                let mut post: Vec<f64> = noise[i * 4..i * 4 + 4].to_vec();
                let total: f64 = post.iter().sum::<f64>() + 1e-9;
                post.iter_mut().for_each(|p| *p /= total);
                pred(i, 0, class, post)
            })
            .collect();
        let refs: Vec<&Prediction> = preds.iter().collect();
        prop_assert_eq!(vote(&refs, 4).0, class);
    }

    #[test]
    fn error_rate_is_off_diagonal_share(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let preds: Vec<Prediction> = pairs.iter().enumerate().map(|(i, &(t, p))| pred(i, t, p, vec![])).collect();
        let m = confusion_matrix(&preds, 5);
        let off: usize = (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| m.counts[i][j]).sum();
        prop_assert_eq!(m.total(), preds.len());
        prop_assert_eq!(m.error_rate(), off as f64 / preds.len() as f64);
        let r = LooResult::from_predictions(Granularity::Document, Variant::Mlp0, 8, 8, preds, 5);
        prop_assert_eq!(r.error_rate, off as f64 / pairs.len() as f64);
    }
}

fn fake_results() -> Vec<LooResult> {
    let mut out = Vec::new();
    // deliberately unsorted
    for arch in [Variant::Mlp2, Variant::Mlp0, Variant::Mlp1] {
        for n in default_n_grid().into_iter().rev() {
            let preds = (0..10)
                .map(|i| pred(i, i % 2, (i + n) % 2, vec![0.5, 0.5]))
                .collect();
            out.push(LooResult::from_predictions(Granularity::Document, arch, n, n, preds, 2));
        }
    }
    out
}

#[test]
fn report_has_one_sorted_record_per_experiment_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let classes = vec!["a".to_string(), "b".to_string()];
    let results = fake_results();
    write_report(&results, &classes, &dir.path().join("r1")).unwrap();
    write_report(&results, &classes, &dir.path().join("r2")).unwrap();

    let text = std::fs::read_to_string(dir.path().join("r1/results.json")).unwrap();
    let records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert_eq!(records.len(), 36);
    let keys: Vec<(String, usize)> = records
        .iter()
        .map(|r| (r["arch"].as_str().unwrap().to_string(), r["n"].as_u64().unwrap() as usize))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);

    for name in ["results.json", "curve_document.tsv", "confusion_document_mlp1_2048.json", "loo_results.json"] {
        let a = std::fs::read(dir.path().join("r1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let curve = std::fs::read_to_string(dir.path().join("r1/curve_document.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 37);
    assert!(curve.lines().nth(1).unwrap().starts_with("mlp0\t8\t3.0000\t"));

    let bundle = load_results(&dir.path().join("r1/loo_results.json")).unwrap();
    assert_eq!(bundle.classes, classes);
    assert_eq!(bundle.results.len(), 36);
    assert!(write_report(&[], &classes, dir.path()).is_err());
}

#[test]
fn too_few_documents_is_an_error() {
    let corpus = generate(&SynthConfig {
        num_classes: 2,
        docs_per_class: vec![1, 1],
        ..Default::default()
    })
    .unwrap();
    let table = build_expectation_table(&validate_collection(corpus.pages, &corpus.manifest, true).unwrap().0);
    let err = loo_documents(&table, &quick(&[Variant::Mlp0], &[8])).unwrap_err();
    assert!(matches!(err, EvalError::Empty(_)));
}

#[test]
fn page_folds_vote_into_documents() {
    let table = small_table(11, 4);
    let config = quick(&[Variant::Mlp0], &[8, 16]);
    let pages = loo_pages(&table, &config).unwrap();
    let num_pages: usize = table.docs().iter().map(|d| d.pages.len()).sum();
    assert_eq!(pages.len(), 2);
    for r in &pages {
        assert_eq!(r.granularity, Granularity::Page);
        assert_eq!(r.predictions.len(), num_pages);
        let before = r.clone();
        let voted = vote_documents(r, &table).unwrap();
        assert_eq!(r, &before);
        assert_eq!(voted.granularity, Granularity::PageVoted);
        assert_eq!(voted.predictions.len(), table.num_docs());
        for p in &voted.predictions {
            assert!((p.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let strict = LooConfig {
        fold_by_document: true,
        ..config
    };
    let strict_pages = loo_pages(&table, &strict).unwrap();
    assert_eq!(strict_pages[0].predictions.len(), num_pages);
}

#[test]
fn document_loo_is_deterministic_and_covers_the_grid() {
    let table = small_table(12, 4);
    let config = quick(&[Variant::Mlp0, Variant::Mlp1], &[8, 100_000]);
    let a = loo_documents(&table, &config).unwrap();
    let b = loo_documents(&table, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    let clamped = a.iter().find(|r| r.n == 100_000).unwrap();
    assert!(clamped.n_effective < 100_000);
    for r in &a {
        assert_eq!(r.predictions.len(), 12);
        assert!((0.0..=1.0).contains(&r.error_rate));
    }
}
