use prix_core::classifier::Variant;
use prix_core::evaluation::{loo_documents, LooConfig};
use prix_core::expectation::build_expectation_table;
use prix_core::ingest::validate_collection;
use prix_core::pipeline::ingest_stage;
use prix_core::synth::{generate, load_texts, PlainTextOracle, RpDistribution, RpModel, SynthConfig};

fn mlp0(n: usize, seed: u64) -> LooConfig {
    LooConfig {
        n_grid: vec![n],
        archs: vec![Variant::Mlp0],
        seed,
        ..Default::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn written_corpus_passes_strict_ingest_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        seed: 77,
        ..SynthConfig::table1_like()
    };
    let corpus = generate(&config).unwrap();
    let files = corpus.write(&dir.path().join("a")).unwrap();
    generate(&config).unwrap().write(&dir.path().join("b")).unwrap();
    for name in ["index.tsv", "manifest.tsv", "texts.tsv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let collection = ingest_stage(&[files.index.to_string_lossy().into_owned()], &files.manifest, true).unwrap();
    assert_eq!(collection.num_documents(), 557);
    assert_eq!(collection.num_classes(), 14);
    let sizes: Vec<usize> = (0..14)
        .map(|c| collection.documents().iter().filter(|d| d.class == c).count())
        .collect();
    assert_eq!(sizes, vec![240, 73, 44, 32, 29, 21, 17, 12, 10, 10, 6, 6, 1, 56]);
    let pages: Vec<usize> = collection.documents().iter().map(|d| d.pages.len()).collect();
    assert!(pages.iter().all(|&p| (2..=122).contains(&p)));
    assert_eq!(load_texts(&files.texts).unwrap(), corpus.texts);
}

#[test]
fn plain_text_oracle_separates_a_clean_corpus() {
    let config = SynthConfig {
        docs_per_class: vec![8; 3],
        pages_per_doc: (2, 4),
        vocab_size: 30,
        signature_prob: 0.9,
        rp_model: RpModel::noise_free(),
        seed: 21,
        ..Default::default()
    };
    let corpus = generate(&config).unwrap();
    let oracle = PlainTextOracle::new(&corpus.texts, &corpus.manifest);
    let results = oracle.loo_documents(&mlp0(16, 2)).unwrap();
    assert_eq!(results[0].error_rate, 0.0);
}

#[test]
fn no_class_signal_behaves_like_majority_guessing() {
    // balanced classes: majority guessing errs with p0 = 2/3
    let config = SynthConfig {
        docs_per_class: vec![12; 3],
        signatures_per_class: 0,
        seed: 31,
        ..Default::default()
    };
    let corpus = generate(&config).unwrap();
    let table = build_expectation_table(&validate_collection(corpus.pages, &corpus.manifest, true).unwrap().0);
    let r = &loo_documents(&table, &mlp0(32, 3)).unwrap()[0];
    let n = r.predictions.len() as f64;
    let p0 = 2.0 / 3.0;
    let half = 2.576 * (p0 * (1.0 - p0) / n).sqrt();
    assert!(
        (r.error_rate - p0).abs() <= half,
        "error {} outside {p0:.3} +/- {half:.3}",
        r.error_rate
    );
}

#[test]
fn more_false_spots_never_lower_the_median_error() {
    let rates = [0.0, 0.5, 1.0];
    let mut medians = Vec::new();
    for rate in rates {
        let errors: Vec<f64> = (0..5)
            .map(|s| {
                let config = SynthConfig {
                    docs_per_class: vec![8; 3],
                    pages_per_doc: (1, 2),
                    words_per_page: (10, 20),
                    vocab_size: 60,
                    signatures_per_class: 3,
                    signature_prob: 0.4,
                    noise_words_per_page: (40, 60),
                    rp_model: RpModel {
                        true_hit: RpDistribution::Beta { a: 8.0, b: 2.0 },
                        false_spot_rate: rate,
                        false_spot: RpDistribution::Beta { a: 8.0, b: 2.0 },
                    },
                    seed: 400 + s,
                    ..Default::default()
                };
                let corpus = generate(&config).unwrap();
                let table = build_expectation_table(&validate_collection(corpus.pages, &corpus.manifest, true).unwrap().0);
                loo_documents(&table, &mlp0(16, s)).unwrap()[0].error_rate
            })
            .collect();
        medians.push(median(errors));
    }
    assert!(
        medians.windows(2).all(|w| w[0] <= w[1]),
        "median error over false-spot rates {rates:?}: {medians:?}"
    );
    assert!(medians[2] > medians[0], "noise had no effect: {medians:?}");
}
