use rand::Rng;
use rand::seq::SliceRandom;

use super::*;
use crate::coco::AnnotationIndex;
use crate::seed;
use crate::store::synthetic::{generate_synthetic, random_layout, synthetic_annotations, SyntheticConfig};
use crate::tasks::{build_paired_set, GlobalSample, GlobalTask, Split, TaskSet};

/// Straight-line one-vs-rest perceptron written from the update rule alone.
fn reference_perceptron(x: &[Vec<f64>], y: &[usize], cfg: &ProbeConfig) -> (Vec<Vec<f64>>, Vec<f64>, usize) {
    let mut classes = y.to_vec();
    classes.sort();
    classes.dedup();
    let d = x[0].len();
    let mut w = vec![vec![0.0; d]; classes.len()];
    let mut b = vec![0.0; classes.len()];
    let mut best = vec![f64::INFINITY; classes.len()];
    let mut bad = vec![0; classes.len()];
    let mut done = vec![false; classes.len()];
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut epochs = 0;
    while epochs < cfg.max_epochs && done.contains(&false) {
        epochs += 1;
        order.shuffle(&mut rng);
        for c in 0..classes.len() {
            if done[c] {
                continue;
            }
            let mut loss = 0.0;
            for &i in &order {
                let t = if y[i] == classes[c] { 1.0 } else { -1.0 };
                let mut s = 0.0;
                for k in 0..d {
                    s += w[c][k] * x[i][k];
                }
                s += b[c];
                if t * s <= 0.0 {
                    loss += -(t * s);
                    for k in 0..d {
                        w[c][k] += cfg.learning_rate * t * x[i][k];
                    }
                    b[c] += cfg.learning_rate * t;
                }
            }
            if loss > best[c] - cfg.tol {
                bad[c] += 1;
            } else {
                bad[c] = 0;
            }
            best[c] = best[c].min(loss);
            if bad[c] >= cfg.no_change_epochs {
                done[c] = true;
            }
        }
    }
    (w, b, epochs)
}

#[test]
fn perceptron_matches_reference() {
    let mut rng = seed::rng(5);
    for case in 0..10 {
        let n = rng.random_range(8..50);
        let d = rng.random_range(1..6);
        let k = rng.random_range(2..5);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let mut y: Vec<usize> = (0..n).map(|i| i % k).collect();
        y.shuffle(&mut rng);
        let cfg = ProbeConfig {
            seed: case,
            ..Default::default()
        };
        let probe = train_perceptron(&x, &y, &cfg).unwrap();
        let (w, b, epochs) = reference_perceptron(&x, &y, &cfg);
        assert_eq!(probe.weights, w, "case {case}");
        assert_eq!(probe.biases, b, "case {case}");
        assert_eq!(probe.epochs_run, epochs, "case {case}");
    }
}

struct Synthetic {
    _dir: tempfile::TempDir,
    reader: crate::store::LayerReader,
    index: AnnotationIndex,
    task: TaskSet,
}

fn synthetic(leakage: f64, noise: f64) -> Synthetic {
    let cfg = SyntheticConfig {
        leakage,
        noise,
        seed: 3,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer.bin");
    let layout = random_layout(&cfg);
    let labels = generate_synthetic(&cfg, &layout, &path).unwrap();
    let doc = synthetic_annotations(&cfg, &layout, &labels, 4);
    let index = AnnotationIndex::from_instances_str(&doc.to_string()).unwrap();
    let task = build_paired_set(&index, &cfg.task_spec("synthetic")).unwrap();
    Synthetic {
        reader: crate::store::LayerReader::open(&path).unwrap(),
        _dir: dir,
        index,
        task,
    }
}

fn run(s: &Synthetic, task: &TaskSet, strategies: &[Strategy]) -> AccuracyTable {
    let layers = [LayerInput {
        layer: 0,
        source: &s.reader,
    }];
    run_paired_suite(task, &s.index, &layers, strategies, &SuiteConfig::default()).unwrap()
}

#[test]
fn paired_suite_on_clean_synthetic() {
    let s = synthetic(0.0, 0.05);
    let table = run(&s, &s.task, &Strategy::ALL);
    assert_eq!(table.rows.len(), 6 * 3);
    let a = |src, t| table.accuracy(0, src, t).unwrap();
    assert!(a(TokenSource::AvgObjP, Target::Primary) >= 0.95);
    assert!(a(TokenSource::AvgObjS, Target::Secondary) >= 0.95);
    assert!((a(TokenSource::AvgObjS, Target::Primary) - 0.5).abs() <= 0.1);
    // secondary tokens know nothing about the primary object
    let comb = a(TokenSource::AvgObjS, Target::Combination);
    let expected = a(TokenSource::AvgObjS, Target::Secondary) * 0.5;
    assert!((comb - expected).abs() <= 0.1, "{comb} vs {expected}");
    let row = table.get(0, TokenSource::AvgObjP, Target::Primary).unwrap();
    assert_eq!(row.n_train + row.n_val + row.n_test, s.task.samples.len());
    assert!(row.val_accuracy.is_some());
}

#[test]
fn paired_suite_ignores_sample_order() {
    let s = synthetic(0.5, 0.1);
    let strategies = [Strategy::AvgObj, Strategy::RandomObj];
    let base = run(&s, &s.task, &strategies);
    let mut shuffled = s.task.clone();
    shuffled.samples.shuffle(&mut seed::rng(9));
    assert_eq!(base, run(&s, &shuffled, &strategies));
}

#[test]
fn paired_suite_errors() {
    let s = synthetic(0.0, 0.1);
    let mut no_test = s.task.clone();
    no_test.samples.retain(|x| x.split != Split::Test);
    let layers = [LayerInput {
        layer: 0,
        source: &s.reader,
    }];
    let cfg = SuiteConfig::default();
    assert!(matches!(
        run_paired_suite(&no_test, &s.index, &layers, &[Strategy::Cls], &cfg),
        Err(ProbeError::EmptySplit(_))
    ));
    let mut missing = s.task.clone();
    missing.samples[0].image_id = 10_000;
    assert!(run_paired_suite(&missing, &s.index, &layers, &[Strategy::Cls], &cfg).is_err());
    assert!(matches!(
        run_paired_suite(&s.task, &s.index, &[], &[Strategy::Cls], &cfg),
        Err(ProbeError::Config(_))
    ));
}

#[test]
fn accuracy_table_round_trips() {
    let s = synthetic(0.0, 0.1);
    let table = run(&s, &s.task, &[Strategy::AvgObj, Strategy::Cls]);
    let mut tsv = Vec::new();
    table.write_tsv(&mut tsv).unwrap();
    assert_eq!(AccuracyTable::read_tsv(tsv.as_slice()).unwrap(), table);
    assert_eq!(AccuracyTable::from_json(&table.to_json()).unwrap(), table);

    let dir = tempfile::tempdir().unwrap();
    for name in ["t.tsv", "t.json"] {
        let p = dir.path().join(name);
        table.save(&p).unwrap();
        assert_eq!(AccuracyTable::load(&p).unwrap(), table);
    }
    assert!(matches!(
        AccuracyTable::read_tsv("#nope\n".as_bytes()),
        Err(ProbeError::Parse { line: 1, .. })
    ));
}

fn global_task(s: &Synthetic, mentioned: impl Fn(u64) -> bool) -> GlobalTask {
    let spec = &s.task.spec;
    let categories: Vec<String> = spec
        .primary_categories
        .iter()
        .chain(&spec.secondary_categories)
        .cloned()
        .collect();
    let k_p = spec.primary_categories.len();
    let mut samples = Vec::new();
    for p in &s.task.samples {
        let split = if p.image_id <= 600 { Split::Train } else { Split::Test };
        for label in [p.primary, k_p + p.secondary] {
            samples.push(GlobalSample {
                image_id: p.image_id,
                label,
                split,
                mentioned: mentioned(p.image_id),
            });
        }
    }
    GlobalTask {
        categories,
        train_image_limit: 600,
        samples,
    }
}

#[test]
fn global_suite_noiseless() {
    let s = synthetic(0.0, 0.0);
    let task = global_task(&s, |id| id % 2 == 0);
    let layers = [LayerInput {
        layer: 0,
        source: &s.reader,
    }];
    let table = run_global_suite(
        &task,
        &s.index,
        &layers,
        &[Strategy::AvgObj, Strategy::RandomObj],
        &SuiteConfig::default(),
    )
    .unwrap();
    assert_eq!(table.rows.len(), 2);
    for row in &table.rows {
        assert_eq!(row.overall.accuracy, 1.0);
        assert_eq!(row.in_caption.unwrap().accuracy, 1.0);
        assert_eq!(row.not_in_caption.unwrap().accuracy, 1.0);
        assert_eq!(row.in_caption.unwrap().n + row.not_in_caption.unwrap().n, row.overall.n);
    }
    let mut tsv = Vec::new();
    table.write_tsv(&mut tsv).unwrap();
    assert_eq!(GlobalTable::read_tsv(tsv.as_slice()).unwrap(), table);
}

#[test]
fn global_suite_absent_subsets() {
    let s = synthetic(0.0, 0.1);
    let task = global_task(&s, |_| false);
    let layers = [LayerInput {
        layer: 0,
        source: &s.reader,
    }];
    let table = run_global_suite(&task, &s.index, &layers, &[Strategy::AvgObj], &SuiteConfig::default()).unwrap();
    let row = &table.rows[0];
    assert!(row.in_caption.is_none());
    assert!(row.not_in_caption.is_some());

    let strict = SuiteConfig {
        min_subset: 100_000,
        ..Default::default()
    };
    let table = run_global_suite(&task, &s.index, &layers, &[Strategy::AvgObj], &strict).unwrap();
    assert!(table.rows[0].not_in_caption.is_none());

    let mut tsv = Vec::new();
    table.write_tsv(&mut tsv).unwrap();
    assert!(String::from_utf8(tsv).unwrap().contains("\tNA\t0\tNA\t0\t"));

    assert!(matches!(
        run_global_suite(&task, &s.index, &layers, &[Strategy::Cls], &SuiteConfig::default()),
        Err(ProbeError::Config(_))
    ));
}
