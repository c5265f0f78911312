use super::*;
use crate::coco::{ImageInfo, InstanceAnnotation, Segmentation};

/// Index whose images each hold one small square instance per listed category.
fn index_with(images: &[(u64, &[u64])], categories: &[(u64, &str)]) -> AnnotationIndex {
    let mut idx = AnnotationIndex::default();
    for &(id, name) in categories {
        idx.categories.insert(id, name.to_string());
    }
    let mut ann_id = 0;
    for &(image_id, cats) in images {
        idx.images.insert(
            image_id,
            ImageInfo {
                height: 16,
                width: 16,
                file_name: format!("{image_id}.jpg"),
            },
        );
        for (k, &cat) in cats.iter().enumerate() {
            ann_id += 1;
            let x = (k * 4) as f64;
            idx.instances.entry(image_id).or_default().push(InstanceAnnotation {
                id: ann_id,
                image_id,
                category_id: cat,
                segmentation: Segmentation::Polygons(vec![vec![
                    x,
                    0.0,
                    x + 3.0,
                    0.0,
                    x + 3.0,
                    3.0,
                    x,
                    3.0,
                ]]),
                area: 9.0,
                bbox: [x, 0.0, 3.0, 3.0],
                iscrowd: false,
            });
        }
    }
    idx
}

const CATS: &[(u64, &str)] = &[
    (1, "cat"),
    (2, "dog"),
    (3, "bench"),
    (4, "chair"),
    (5, "couch"),
    (6, "bed"),
    (7, "horse"),
];

fn set1() -> TaskSpec {
    TaskSpec {
        name: "set1".into(),
        primary_categories: vec!["cat".into(), "dog".into()],
        secondary_categories: vec!["bench".into(), "chair".into(), "couch".into(), "bed".into()],
        seed: 3,
    }
}

#[test]
fn split_size_examples() {
    assert_eq!(split_sizes(10, DEFAULT_RATIOS), [8, 1, 1]);
    assert_eq!(split_sizes(9, DEFAULT_RATIOS), [7, 1, 1]);
    assert_eq!(split_sizes(0, DEFAULT_RATIOS), [0, 0, 0]);
    assert_eq!(split_sizes(1, DEFAULT_RATIOS), [1, 0, 0]);
    assert_eq!(split_sizes(30, DEFAULT_RATIOS), [24, 3, 3]);
}

/// Straight largest-remainder reference with exact integer arithmetic on
/// ratios expressed in tenths.
fn reference_sizes(n: usize, tenths: [usize; 3]) -> [usize; 3] {
    let scaled: Vec<usize> = tenths.iter().map(|t| t * n).collect();
    let mut sizes: [usize; 3] = std::array::from_fn(|i| scaled[i] / 10);
    let mut rem: Vec<(usize, usize)> = (0..3).map(|i| (scaled[i] % 10, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = n - sizes.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

#[test]
fn split_sizes_match_integer_reference() {
    for n in 0..500 {
        assert_eq!(split_sizes(n, DEFAULT_RATIOS), reference_sizes(n, [8, 1, 1]), "n={n}");
        assert_eq!(split_sizes(n, [0.7, 0.2, 0.1]), reference_sizes(n, [7, 2, 1]), "n={n}");
    }
}

#[test]
fn assign_splits_deterministic_partition() {
    let ids: Vec<u64> = (100..110).collect();
    let a = assign_splits(&ids, DEFAULT_RATIOS, 9).unwrap();
    let b = assign_splits(&ids, DEFAULT_RATIOS, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.sizes(), [8, 1, 1]);
    assert_eq!(a.0.len(), 10);
    assert!(ids.iter().all(|id| a.get(*id).is_some()));
}

#[test]
fn assign_splits_rejects_duplicates_and_bad_ratios() {
    assert!(matches!(
        assign_splits(&[1, 2, 2], DEFAULT_RATIOS, 0),
        Err(TaskError::Validation(_))
    ));
    assert!(assign_splits(&[1, 2], [0.5, 0.5, 0.5], 0).is_err());
}

#[test]
fn balance_min_rule() {
    let mut samples = Vec::new();
    for (cell, n) in [(0, 4), (1, 7), (2, 9), (3, 4)] {
        for i in 0..n {
            samples.push((cell, i));
        }
    }
    let out = balance_cooccurrence(samples, |s| s.0, 5);
    let mut counts = [0; 4];
    for s in &out {
        counts[s.0] += 1;
    }
    assert_eq!(counts, [4, 4, 4, 4]);
    // input order preserved
    assert!(out.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn balance_fixed_point_and_empty() {
    let samples: Vec<(u8, u8)> = (0..3).flat_map(|c| (0..5).map(move |i| (c, i))).collect();
    assert_eq!(balance_cooccurrence(samples.clone(), |s| s.0, 1), samples);
    let empty: Vec<(u8, u8)> = Vec::new();
    assert!(balance_cooccurrence(empty, |s| s.0, 1).is_empty());
}

#[test]
fn balance_is_seed_deterministic() {
    let samples: Vec<(u8, u32)> = (0..10).map(|i| (0, i)).chain((0..3).map(|i| (1, i))).collect();
    let a = balance_cooccurrence(samples.clone(), |s| s.0, 42);
    let b = balance_cooccurrence(samples.clone(), |s| s.0, 42);
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|s| s.0 == 0).count(), 3);
    let others: Vec<_> = (0..20)
        .map(|seed| balance_cooccurrence(samples.clone(), |s| s.0, seed))
        .collect();
    assert!(others.iter().any(|o| *o != a), "seed has no effect");
}

#[test]
fn paired_set_already_balanced() {
    let mut images: Vec<(u64, Vec<u64>)> = Vec::new();
    let mut id = 1;
    for p in [1, 2] {
        for s in [3, 4, 5, 6] {
            for _ in 0..2 {
                images.push((id, vec![p, s]));
                id += 1;
            }
        }
    }
    // distractors: two primaries, no secondary, unrelated category
    images.push((100, vec![1, 2, 3]));
    images.push((101, vec![1]));
    images.push((102, vec![1, 3, 4]));
    images.push((103, vec![2, 5, 7]));
    let refs: Vec<(u64, &[u64])> = images.iter().map(|(i, c)| (*i, c.as_slice())).collect();
    let idx = index_with(&refs, CATS);
    let task = build_paired_set(&idx, &set1()).unwrap();
    // image 103 has one primary, one secondary plus an unrelated category: kept,
    // which makes cell (dog, couch) hold 3 and forces down-sampling to 2.
    assert_eq!(task.samples.len(), 16);
    assert!(task.cell_counts().values().all(|&c| c == 2));
    assert!(task.samples.iter().all(|s| ![100, 101, 102].contains(&s.image_id)));
}

#[test]
fn paired_set_empty_cell_is_infeasible() {
    let images: Vec<(u64, &[u64])> = vec![(1, &[1, 3]), (2, &[2, 3]), (3, &[1, 4]), (4, &[2, 4])];
    let idx = index_with(&images, CATS);
    let err = build_paired_set(&idx, &set1()).unwrap_err();
    match err {
        TaskError::Infeasible { primary, secondary, .. } => {
            assert_eq!((primary.as_str(), secondary.as_str()), ("cat", "couch"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn paired_set_unknown_category() {
    let idx = index_with(&[(1, &[1, 3])], &CATS[..3]);
    assert!(matches!(
        build_paired_set(&idx, &set1()),
        Err(TaskError::UnknownCategory(_))
    ));
}

#[test]
fn spec_validation() {
    let mut bad = set1();
    bad.secondary_categories.push("cat".into());
    assert!(bad.validate().is_err());
    let mut short = set1();
    short.primary_categories.truncate(1);
    assert!(short.validate().is_err());
}

#[test]
fn global_set_sampling() {
    let train: Vec<(u64, &[u64])> = vec![(5, &[7]), (2, &[7, 1]), (9, &[3])];
    let train_idx = index_with(&train, CATS);
    let val_idx = index_with(&[(50, &[1, 7])], CATS)
        .with_captions_str(r#"{"annotations":[{"id":1,"image_id":50,"caption":"A horse near a cat."}]}"#)
        .unwrap();
    let cats: Vec<String> = vec!["horse".into(), "cat".into()];
    let g = build_global_set(&train_idx, &val_idx, &cats, 40_000, None).unwrap();
    let horses = g.train_samples().filter(|s| s.label == 0).count();
    assert_eq!(horses, 2);
    // image 2 carries two of the categories
    assert_eq!(g.train_samples().filter(|s| s.image_id == 2).count(), 2);
    assert_eq!(g.test_samples().count(), 2);
    assert!(g.test_samples().all(|s| s.mentioned));
    assert!(g.train_samples().all(|s| !s.mentioned));

    // the limit keeps the lowest ids
    let g = build_global_set(&train_idx, &val_idx, &cats, 2, None).unwrap();
    let ids: BTreeSet<u64> = g.train_samples().map(|s| s.image_id).collect();
    assert_eq!(ids, BTreeSet::from([2, 5]));
}

#[test]
fn global_set_unknown_category() {
    let idx = index_with(&[(1, &[1])], CATS);
    let cats: Vec<String> = vec!["horse".into(), "zebra".into()];
    assert!(matches!(
        build_global_set(&idx, &idx, &cats, 10, None),
        Err(TaskError::Config(_))
    ));
}

#[test]
fn overlap_report() {
    let global = vec!["handbag".to_string(), "sheep".to_string()];
    let mut spec = set1();
    spec.secondary_categories.push("handbag".into());
    assert_eq!(overlapping_categories(&global, &[spec]), vec!["handbag".to_string()]);
}

#[test]
fn taskset_file_roundtrip() {
    let mut images: Vec<(u64, Vec<u64>)> = Vec::new();
    let mut id = 10;
    for p in [1, 2] {
        for s in [3, 4, 5, 6] {
            for _ in 0..3 {
                images.push((id, vec![p, s]));
                id += 7;
            }
        }
    }
    let refs: Vec<(u64, &[u64])> = images.iter().map(|(i, c)| (*i, c.as_slice())).collect();
    let task = build_paired_set(&index_with(&refs, CATS), &set1()).unwrap();
    let mut buf = Vec::new();
    task.write_to(&mut buf).unwrap();
    let back = TaskSet::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, task);
}

#[test]
fn taskset_file_errors_name_lines() {
    let text = "#tokprobe-taskset\t1\n#name\tx\n#seed\t0\n#primary\ta\tb\n#secondary\tc\td\nimage_id\tprimary\tsecondary\tsplit\n1\t0\t1\tTRAIN\n2\t5\t0\tTEST\n";
    let err = TaskSet::read_from(text.as_bytes()).unwrap_err();
    assert!(matches!(err, TaskError::Parse { line: 8, .. }), "{err}");
}

#[test]
fn global_file_roundtrip() {
    let g = GlobalTask {
        categories: vec!["potted plant".into(), "sheep".into()],
        train_image_limit: 40_000,
        samples: vec![
            GlobalSample { image_id: 1, label: 0, split: Split::Train, mentioned: true },
            GlobalSample { image_id: 9, label: 1, split: Split::Test, mentioned: false },
        ],
    };
    let mut buf = Vec::new();
    g.write_to(&mut buf).unwrap();
    assert_eq!(GlobalTask::read_from(buf.as_slice()).unwrap(), g);
}

#[test]
fn task_config_parsing() {
    let cfg = TaskConfig::from_toml(
        r#"
        seed = 11
        [[set]]
        name = "a"
        primary = ["cat", "dog"]
        secondary = ["bench", "chair"]
        [[set]]
        name = "b"
        primary = ["bus", "train"]
        secondary = ["bench", "handbag"]
        seed = 4
        [global]
        categories = ["sheep", "bear"]
        "#,
    )
    .unwrap();
    assert_eq!(cfg.sets[0].seed, 11);
    assert_eq!(cfg.sets[1].seed, 4);
    assert_eq!(cfg.global.unwrap().train_image_limit, DEFAULT_TRAIN_IMAGE_LIMIT);
}

#[test]
fn bundled_preset_parses() {
    let text = include_str!("../../../../presets/object_sets.toml");
    let cfg = TaskConfig::from_toml(text).unwrap();
    assert_eq!(cfg.sets.len(), 6);
    assert!(cfg.sets.iter().all(|s| s.primary_categories.len() == 2 && s.secondary_categories.len() == 4));
    assert_eq!(cfg.global.unwrap().categories.len(), 20);
}
