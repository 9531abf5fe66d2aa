use super::*;
use crate::corpus::synthetic::Domain;
use crate::corpus::Sentence;
use crate::trainer::AdamConfig;

fn tiny_spec(methods: Vec<Method>) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(
        DatasetSpec::synthetic("mv", SyntheticSpec::new(Domain::Movies, 120, 3)),
        methods,
    );
    spec.folds = 3;
    spec.seeds = vec![11, 12];
    spec.model = ModelTemplate {
        embed_dim: 8,
        filter_widths: vec![2, 3],
        filters_per_width: 4,
        ..ModelTemplate::default()
    };
    spec.train = TrainConfig {
        batch_size: 20,
        max_epochs: 2,
        adam: AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    spec
}

#[test]
fn row_count_is_folds_times_seeds() {
    let mut spec = tiny_spec(vec![Method::Baseline]);
    spec.alphas = vec![0.0];
    let t = run_noise_sweep(&spec).unwrap();
    assert!(t.is_complete());
    assert_eq!(t.rows.len(), 3 * 2);
    assert!(t.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn sweep_is_deterministic_and_cells_are_independent() {
    let methods = vec![Method::Baseline, Method::Robust { lambda: 0.01 }];
    let mut spec = tiny_spec(methods);
    spec.max_folds = Some(2);
    let a = run_noise_sweep(&spec).unwrap();
    let b = run_noise_sweep(&spec).unwrap();
    assert_eq!(a.rows.len(), 2 * 2 * 2 * 4);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.accuracy.to_bits(), y.accuracy.to_bits());
    }

    spec.methods = vec![Method::Robust { lambda: 0.01 }];
    let c = run_noise_sweep(&spec).unwrap();
    let robust: Vec<&ResultRow> = a.rows.iter().filter(|r| r.method == "robust").collect();
    assert_eq!(robust.len(), c.rows.len());
    for (x, y) in robust.iter().zip(&c.rows) {
        assert_eq!((x.fold, x.seed, x.alpha), (y.fold, y.seed, y.alpha));
        assert_eq!(x.accuracy.to_bits(), y.accuracy.to_bits());
    }
}

#[test]
fn clean_sweep_matches_plain_evaluation() {
    let mut spec = tiny_spec(vec![Method::Dropout { beta: 0.5 }]);
    spec.alphas = vec![0.0];
    spec.seeds = vec![5];
    spec.max_folds = Some(1);
    let t = run_noise_sweep(&spec).unwrap();

    let corpus = spec.dataset.load_whole().unwrap();
    let plan = make_folds(&corpus, 3, fold_seed(5, "mv")).unwrap();
    let (tr, te) = (corpus.subset(&plan.train_indices(0)), corpus.subset(&plan.test_indices(0)));
    let method = spec.methods[0];
    let s = cell_seeds(5, "mv", &method, 0);
    let f = fit::<f64>(&tr, method, &spec.model, &spec.train, s.init, s.train).unwrap();
    let (_, _, test) = encode_split(&tr, &te).unwrap();
    let plain = evaluate(&f.params, &f.config, &test, NoiseSpec::default(), 0).unwrap();
    assert_eq!(t.rows[0].accuracy, plain);
}

#[test]
fn summary_means_raw_rows() {
    let spec = tiny_spec(vec![Method::Baseline]);
    let t = run_noise_sweep(&spec).unwrap();
    for s in t.summary() {
        let raw: Vec<f64> = t
            .rows
            .iter()
            .filter(|r| r.alpha == s.alpha && r.method == s.method)
            .map(|r| r.accuracy)
            .collect();
        assert_eq!(raw.len(), 6);
        assert!((s.accuracy - raw.iter().sum::<f64>() / 6.0).abs() < 1e-12);
    }
}

#[test]
fn divergent_cells_are_recorded() {
    let mut spec = tiny_spec(vec![Method::Baseline]);
    spec.train.adam.lr = f64::MAX;
    spec.seeds = vec![1];
    let t = run_noise_sweep(&spec).unwrap();
    assert!(t.rows.is_empty());
    assert_eq!(t.failures.len(), 3);
    assert!(t.failures[0].error.contains("diverged"));
    assert!(!t.is_complete());
}

#[test]
fn spec_validation() {
    let mut spec = tiny_spec(vec![]);
    assert!(spec.validate().is_err());
    spec.methods = vec![Method::Combined { beta: 0.5, lambda: 0.0 }];
    assert!(spec.validate().is_err());
    spec.methods = vec![Method::Baseline];
    spec.noise_draws = 1;
    assert!(spec.validate().is_err());
    assert!(Method::from_parts("robust", 0.0, 0.01).is_ok());
    assert!(Method::from_parts("robust", 0.5, 0.01).is_err());
    assert!(Method::from_parts("nope", 0.0, 0.0).is_err());
}

#[test]
fn crossdomain_both_directions() {
    let methods = vec![Method::Baseline, Method::Robust { lambda: 0.1 }];
    let mv = tiny_spec(methods.clone());
    let pr_data = DatasetSpec::synthetic("pr", SyntheticSpec::new(Domain::Products, 120, 4));
    let mut pr = tiny_spec(methods);
    pr.dataset = pr_data.clone();
    let ab = run_crossdomain(&mv, &pr_data).unwrap();
    let ba = run_crossdomain(&pr, &mv.dataset).unwrap();
    assert_eq!(ab.rows.len(), 4);
    assert_eq!(ba.rows.len(), 4);
    assert!(ab.rows.iter().all(|r| r.dataset == "mv->pr" && r.alpha == 0.0));
    assert!(ba.rows.iter().all(|r| r.dataset == "pr->mv"));
}

#[test]
fn crossdomain_onto_itself_is_in_domain_evaluation() {
    let spec = tiny_spec(vec![Method::Robust { lambda: 0.1 }]);
    let t = run_crossdomain(&spec, &spec.dataset).unwrap();
    let corpus = spec.dataset.load_whole().unwrap();
    for r in &t.rows {
        let s = cell_seeds(r.seed, "mv", &spec.methods[0], 0);
        let f = fit::<f64>(&corpus, spec.methods[0], &spec.model, &spec.train, s.init, s.train).unwrap();
        let (_, train_ex, _) = encode_split(&corpus, &corpus).unwrap();
        let direct = evaluate(&f.params, &f.config, &train_ex, NoiseSpec::default(), 0).unwrap();
        assert_eq!(r.accuracy, direct);
    }
}

fn toy(dir: &std::path::Path, name: &str, words: &[&str], labels: &[&str]) -> DatasetSpec {
    let corpus = Corpus {
        examples: words
            .iter()
            .enumerate()
            .map(|(i, w)| Sentence {
                tokens: vec![w.to_string(), w.to_string()],
                label: i % 2,
            })
            .collect(),
        label_names: labels.iter().map(|s| s.to_string()).collect(),
        provenance: crate::corpus::Provenance {
            paths: vec![],
            format: CorpusFormat::Tsv,
        },
    };
    let path = dir.join(format!("{name}.tsv"));
    let text: String = corpus
        .examples
        .iter()
        .map(|s| format!("{}\t{}\n", corpus.label_names[s.label], s.tokens.join(" ")))
        .collect();
    std::fs::write(&path, text).unwrap();
    DatasetSpec::files(name, vec![path], CorpusFormat::Tsv)
}

#[test]
fn unseen_vocabulary_predicts_like_unk() {
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let unseen: Vec<String> = (0..10).map(|i| format!("zz{i}")).collect();
    let w: Vec<&str> = words.iter().map(String::as_str).collect();
    let u: Vec<&str> = unseen.iter().map(String::as_str).collect();
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(vec![Method::Baseline]);
    spec.dataset = toy(dir.path(), "a", &w, &["pos", "neg"]);
    spec.seeds = vec![3];
    let test = toy(dir.path(), "b", &u, &["pos", "neg"]);
    let t = run_crossdomain(&spec, &test).unwrap();

    let corpus = spec.dataset.load_whole().unwrap();
    let s = cell_seeds(3, "a", &Method::Baseline, 0);
    let f = fit::<f64>(&corpus, Method::Baseline, &spec.model, &spec.train, s.init, s.train).unwrap();
    let unk = crate::trainer::classify(&f.params, &f.config, &[crate::corpus::UNK, crate::corpus::UNK]).unwrap();
    let want = test.load_whole().unwrap().examples.iter().filter(|e| e.label == unk).count() as f64 / 10.0;
    assert_eq!(t.rows[0].accuracy, want);

    let mismatched = toy(dir.path(), "c", &u, &["yes", "no"]);
    assert!(matches!(run_crossdomain(&spec, &mismatched), Err(Error::LabelMismatch { .. })));
}

#[test]
fn timing_series_are_monotone() {
    let mut spec = tiny_spec(vec![Method::Baseline, Method::Robust { lambda: 0.01 }]);
    spec.train.max_epochs = 3;
    spec.train.patience = 10;
    let series = run_timing(&spec).unwrap();
    assert_eq!(series.len(), 2);
    for s in &series {
        assert_eq!(s.points.len(), 3);
        for w in s.points.windows(2) {
            assert!(w[1].cumulative_seconds > w[0].cumulative_seconds);
        }
        assert!(s.points.iter().all(|p| (0.0..=1.0).contains(&p.test_accuracy)));
    }
}

#[test]
fn saved_model_round_trip() {
    let spec = tiny_spec(vec![Method::Robust { lambda: 0.1 }]);
    let corpus = spec.dataset.load_whole().unwrap();
    let f = fit::<f64>(&corpus, spec.methods[0], &spec.model, &spec.train, 1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    SavedModel::from_fitted(&f).save(&path).unwrap();
    let back: Fitted<f64> = SavedModel::load(&path).unwrap().into_fitted().unwrap();
    assert_eq!(back.params, f.params);
    assert_eq!(back.vocab, f.vocab);
    let noise = NoiseSpec::new(0.2, 0.0).unwrap();
    assert_eq!(back.accuracy(&corpus, noise, 4).unwrap(), f.accuracy(&corpus, noise, 4).unwrap());
    let single: Fitted<f32> = SavedModel::load(&path).unwrap().into_fitted().unwrap();
    assert!((single.accuracy(&corpus, NoiseSpec::default(), 0).unwrap() - f.accuracy(&corpus, NoiseSpec::default(), 0).unwrap()).abs() < 0.05);
}
