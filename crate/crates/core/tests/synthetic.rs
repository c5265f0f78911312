use tokprobe::coco::AnnotationIndex;
use tokprobe::measures::measure_records;
use tokprobe::probe::{run_paired_suite, AccuracyTable, LayerInput, SuiteConfig, Target, TokenSource};
use tokprobe::select::Strategy;
use tokprobe::store::synthetic::{generate_synthetic, random_layout, synthetic_annotations, SyntheticConfig};
use tokprobe::store::LayerReader;
use tokprobe::tasks::build_paired_set;

fn probe(cfg: &SyntheticConfig) -> AccuracyTable {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer.bin");
    let layout = random_layout(cfg);
    let labels = generate_synthetic(cfg, &layout, &path).unwrap();
    let doc = synthetic_annotations(cfg, &layout, &labels, 4).to_string();
    let index = AnnotationIndex::from_instances_str(&doc).unwrap();
    let task = build_paired_set(&index, &cfg.task_spec("synthetic")).unwrap();
    let reader = LayerReader::open(&path).unwrap();
    let layers = [LayerInput {
        layer: 0,
        source: &reader,
    }];
    run_paired_suite(&task, &index, &layers, &[Strategy::AvgObj], &SuiteConfig::default()).unwrap()
}

#[test]
fn half_leakage_cross_decoding_between_chance_and_own() {
    for seed in 1..=4 {
        let cfg = SyntheticConfig {
            n_images: 400,
            signal: 0.25,
            leakage: 0.5,
            seed,
            ..Default::default()
        };
        let table = probe(&cfg);
        let pp = table.accuracy(0, TokenSource::AvgObjP, Target::Primary).unwrap();
        let sp = table.accuracy(0, TokenSource::AvgObjS, Target::Primary).unwrap();
        assert!(sp > 0.5 && sp < pp, "seed {seed}: A_sp {sp}, A_pp {pp}");
    }
}

#[test]
fn m2_grows_with_leakage() {
    let mut m2 = Vec::new();
    for leakage in [0.0, 0.5, 1.0] {
        let cfg = SyntheticConfig {
            n_images: 400,
            leakage,
            seed: 21,
            ..Default::default()
        };
        m2.push(measure_records(&[probe(&cfg)], Strategy::AvgObj).unwrap()[0].m2);
    }
    assert!(m2[0] < 0.7, "{m2:?}");
    assert!(m2.windows(2).all(|w| w[1] >= w[0] - 0.05), "{m2:?}");
}
