use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tokprobe::coco::AnnotationIndex;
use tokprobe::measures::{
    accuracy_curves, cosine_map, emit_report, load_measures, measure_records, pearson, recommend_record,
    save_measures, similarity_tsv, CorrelationRecord, MeasureFile, MeasureRecord, Recommendation, Report,
    ReportFormat,
};
use tokprobe::probe::{
    run_global_suite, run_paired_suite, AccuracyTable, GlobalTable, LayerInput, ProbeConfig, SuiteConfig,
};
use tokprobe::select::Strategy;
use tokprobe::store::synthetic::{generate_synthetic, random_layout, synthetic_annotations, SyntheticConfig};
use tokprobe::store::{validate_layer_file, LayerReaderSet, LayerStore, ManifestLayer, StoreManifest};
use tokprobe::tasks::{build_global_set, build_paired_set, load_synonyms, overlapping_categories, GlobalTask, TaskConfig, TaskSet};

use crate::run_manifest::{sidecar_path, RunManifest};
use crate::{
    BuildTasksArgs, Cli, Command, MeasuresArgs, ProbeArgs, ProbeGlobalArgs, ProbePairedArgs, RecommendArgs,
    ReportArgs, SimmapArgs, SynthArgs, UsageError, ValidateStoreArgs,
};

struct Ctx {
    data_dir: Option<PathBuf>,
}

impl Ctx {
    /// Relative input paths are taken from the data directory when one is set.
    fn input(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { data_dir: cli.data_dir };
    match cli.command {
        Command::BuildTasks(a) => build_tasks(&ctx, a),
        Command::Synth(a) => synth(a),
        Command::ProbePaired(a) => probe_paired(&ctx, a),
        Command::ProbeGlobal(a) => probe_global(&ctx, a),
        Command::Measures(a) => measures(&ctx, a),
        Command::Recommend(a) => recommend(&ctx, a),
        Command::Simmap(a) => simmap(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::ValidateStore(a) => validate_store(&ctx, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn load_index(path: &Path, captions: Option<&Path>, man: &mut RunManifest) -> Result<AnnotationIndex> {
    man.input(path)?;
    let mut index =
        AnnotationIndex::load_instances(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(c) = captions {
        man.input(c)?;
        index = index
            .load_captions(c)
            .with_context(|| format!("loading {}", c.display()))?;
    }
    for w in &index.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(index)
}

fn build_tasks(ctx: &Ctx, a: BuildTasksArgs) -> Result<()> {
    let mut man = RunManifest::new("build-tasks");
    let config_path = ctx.input(&a.config);
    man.input(&config_path)?;
    let mut cfg = TaskConfig::load(&config_path).with_context(|| format!("loading {}", config_path.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        for set in &mut cfg.sets {
            set.seed = seed;
        }
    }
    man.setting("seed", cfg.seed);
    let synonyms = match &a.synonyms {
        Some(p) => {
            let p = ctx.input(p);
            man.input(&p)?;
            Some(load_synonyms(&p)?)
        }
        None => None,
    };
    let captions = a.captions.as_deref().map(|p| ctx.input(p));
    let train = load_index(&ctx.input(&a.instances), captions.as_deref(), &mut man)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    for spec in &cfg.sets {
        let set = build_paired_set(&train, spec).with_context(|| format!("task set {:?}", spec.name))?;
        let path = a.out.join(format!("{}.task.tsv", spec.name));
        set.save(&path)?;
        let per_cell = set.cell_counts().values().next().copied().unwrap_or(0);
        eprintln!("{}: {} samples, {per_cell} per cell", path.display(), set.samples.len());
    }
    if let Some(global) = &cfg.global {
        for name in overlapping_categories(&global.categories, &cfg.sets) {
            eprintln!("warning: global category {name:?} also appears in a paired set");
        }
        match &a.val_instances {
            Some(val) => {
                let val_captions = a.val_captions.as_deref().map(|p| ctx.input(p));
                let val = load_index(&ctx.input(val), val_captions.as_deref(), &mut man)?;
                man.setting("train_image_limit", global.train_image_limit);
                let task = build_global_set(
                    &train,
                    &val,
                    &global.categories,
                    global.train_image_limit,
                    synonyms.as_ref(),
                )?;
                let path = a.out.join("global.task.tsv");
                task.save(&path)?;
                eprintln!("{}: {} samples", path.display(), task.samples.len());
            }
            None => eprintln!("note: no --val-instances given, global task skipped"),
        }
    }
    man.write_sidecar(&sidecar_path(&a.out))
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.leakage.is_empty() {
        return Err(usage("--leakage needs at least one value"));
    }
    let base = SyntheticConfig {
        model_name: a.model.clone(),
        layer_index: 0,
        grid_h: a.grid_h,
        grid_w: a.grid_w,
        embed_dim: a.dim,
        n_primary: a.primary,
        n_secondary: a.secondary,
        signal: a.signal,
        leakage: a.leakage[0],
        noise: a.noise,
        has_cls: !a.no_cls,
        n_images: a.images,
        seed: a.seed,
        ..Default::default()
    };
    if a.patch_px == 0 {
        return Err(usage("--patch-px must be positive"));
    }
    for &eps in &a.leakage {
        SyntheticConfig { leakage: eps, ..base.clone() }
            .validate()
            .map_err(|e| usage(e.to_string()))?;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let layout = random_layout(&base);
    let mut labels = Vec::new();
    let mut layers = Vec::new();
    for (i, &eps) in a.leakage.iter().enumerate() {
        let cfg = SyntheticConfig {
            layer_index: i as u32,
            leakage: eps,
            ..base.clone()
        };
        let file = format!("layer_{i:02}.bin");
        labels = generate_synthetic(&cfg, &layout, a.out.join(&file))?;
        layers.push(ManifestLayer {
            layer: i as u32,
            file,
            grid_h: a.grid_h as u32,
            grid_w: a.grid_w as u32,
            embed_dim: a.dim as u32,
            has_cls: !a.no_cls,
        });
    }
    StoreManifest {
        model: a.model.clone(),
        preprocessing: format!("synthetic patch_px={}", a.patch_px),
        hook_point: None,
        layers,
        missing_images: Vec::new(),
    }
    .save(&a.out)?;

    let doc = synthetic_annotations(&base, &layout, &labels, a.patch_px).to_string();
    std::fs::write(a.out.join("instances.json"), &doc)?;
    let index = AnnotationIndex::from_instances_str(&doc)?;
    let task = build_paired_set(&index, &base.task_spec("synthetic"))?;
    task.save(a.out.join("task.tsv"))?;

    let mut man = RunManifest::new("synth");
    man.setting("seed", a.seed)
        .setting("model", &a.model)
        .setting("images", a.images)
        .setting("grid", format!("{}x{}", a.grid_h, a.grid_w))
        .setting("dim", a.dim)
        .setting("classes", format!("{}x{}", a.primary, a.secondary))
        .setting("signal", a.signal)
        .setting("noise", a.noise)
        .setting("leakage", join(&a.leakage))
        .setting("has_cls", !a.no_cls)
        .setting("patch_px", a.patch_px);
    man.write_sidecar(&sidecar_path(&a.out))?;
    eprintln!(
        "{}: {} layers, {} images, task of {} samples",
        a.out.display(),
        a.leakage.len(),
        a.images,
        task.samples.len()
    );
    Ok(())
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    if workers == Some(0) {
        return Err(usage("--workers must be positive"));
    }
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()?)
}

/// Stores, their layer readers and mask sources shared by both probe commands.
struct ProbeInputs {
    layers: Vec<u32>,
    readers: Vec<LayerReaderSet>,
    indices: Vec<AnnotationIndex>,
    config: SuiteConfig,
}

impl ProbeInputs {
    fn open(ctx: &Ctx, stores: &[PathBuf], instances: &[PathBuf], p: &ProbeArgs, man: &mut RunManifest) -> Result<Self> {
        if !(0.0..=1.0).contains(&p.threshold) {
            return Err(usage(format!("--threshold must be in [0, 1], got {}", p.threshold)));
        }
        let stores: Vec<LayerStore> = stores
            .iter()
            .map(|s| {
                let dir = ctx.input(s);
                LayerStore::open(&dir).with_context(|| format!("opening store {}", dir.display()))
            })
            .collect::<Result<_>>()?;
        let layers = if p.layers.is_empty() {
            stores[0].layers()
        } else {
            p.layers.clone()
        };
        let mut readers = Vec::new();
        for &layer in &layers {
            readers.push(LayerReaderSet::open(&stores, layer).with_context(|| format!("layer {layer}"))?);
        }
        for store in &stores {
            let base = store
                .dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            man.input_as(format!("{base}/manifest.json"), &store.dir.join("manifest.json"))?;
            for &layer in &layers {
                if let Some(entry) = store.manifest.layer(layer) {
                    man.input_as(format!("{base}/{}", entry.file), &store.dir.join(&entry.file))?;
                }
            }
        }
        let indices = instances
            .iter()
            .map(|i| load_index(&ctx.input(i), None, man))
            .collect::<Result<_>>()?;
        man.setting("layers", join(&layers))
            .setting("seed", p.seed)
            .setting("threshold", p.threshold);
        let config = SuiteConfig {
            probe: ProbeConfig {
                seed: p.seed,
                ..Default::default()
            },
            threshold: p.threshold,
            seed: p.seed,
            ..Default::default()
        };
        Ok(Self {
            layers,
            readers,
            indices,
            config,
        })
    }

    fn layer_inputs(&self) -> Vec<LayerInput<'_>> {
        self.layers
            .iter()
            .zip(&self.readers)
            .map(|(&layer, r)| LayerInput { layer, source: r })
            .collect()
    }
}

fn probe_paired(ctx: &Ctx, a: ProbePairedArgs) -> Result<()> {
    let mut man = RunManifest::new("probe-paired");
    let task_path = ctx.input(&a.task);
    man.input(&task_path)?;
    let task = TaskSet::load(&task_path).with_context(|| format!("loading {}", task_path.display()))?;
    let inputs = ProbeInputs::open(ctx, &a.store, &a.instances, &a.probe, &mut man)?;
    man.setting("strategies", join(&a.strategies));
    let mut table = pool(a.probe.workers)?.install(|| {
        run_paired_suite(
            &task,
            inputs.indices.as_slice(),
            &inputs.layer_inputs(),
            &a.strategies,
            &inputs.config,
        )
    })?;
    table.meta.insert("manifest_digest".into(), man.digest());
    table.save(&a.out)?;
    man.write_sidecar(&sidecar_path(&a.out))?;
    eprintln!("{}: {} rows", a.out.display(), table.rows.len());
    Ok(())
}

fn probe_global(ctx: &Ctx, a: ProbeGlobalArgs) -> Result<()> {
    if let Some(s) = a.strategies.iter().find(|s| !s.needs_mask()) {
        return Err(usage(format!("probe-global takes AVG_OBJ and RANDOM_OBJ only, got {s}")));
    }
    let mut man = RunManifest::new("probe-global");
    let task_path = ctx.input(&a.task);
    man.input(&task_path)?;
    let task = GlobalTask::load(&task_path).with_context(|| format!("loading {}", task_path.display()))?;
    let mut inputs = ProbeInputs::open(ctx, &a.store, &a.instances, &a.probe, &mut man)?;
    inputs.config.min_subset = a.min_subset;
    man.setting("strategies", join(&a.strategies))
        .setting("min_subset", a.min_subset);
    let mut table = pool(a.probe.workers)?.install(|| {
        run_global_suite(
            &task,
            inputs.indices.as_slice(),
            &inputs.layer_inputs(),
            &a.strategies,
            &inputs.config,
        )
    })?;
    table.meta.insert("manifest_digest".into(), man.digest());
    table.save(&a.out)?;
    man.write_sidecar(&sidecar_path(&a.out))?;
    eprintln!("{}: {} rows", a.out.display(), table.rows.len());
    Ok(())
}

fn load_tables(ctx: &Ctx, paths: &[PathBuf], man: &mut RunManifest) -> Result<Vec<AccuracyTable>> {
    paths
        .iter()
        .map(|p| {
            let p = ctx.input(p);
            man.input(&p)?;
            AccuracyTable::load(&p).with_context(|| format!("loading {}", p.display()))
        })
        .collect()
}

fn measures(ctx: &Ctx, a: MeasuresArgs) -> Result<()> {
    let mut man = RunManifest::new("measures");
    man.setting("strategy", a.strategy);
    let tables = load_tables(ctx, &a.tables, &mut man)?;
    let records = measure_records(&tables, a.strategy)?;
    let file = MeasureFile {
        meta: [
            ("manifest_digest".to_string(), man.digest()),
            ("strategy".to_string(), a.strategy.to_string()),
        ]
        .into(),
        records,
    };
    save_measures(&file, &a.out)?;
    man.write_sidecar(&sidecar_path(&a.out))?;
    eprintln!("{}: {} records", a.out.display(), file.records.len());
    Ok(())
}

/// Recommended record per (model, strategy).
fn recommendations(records: &[MeasureRecord], tie_window: f64) -> Result<Vec<MeasureRecord>> {
    let mut groups: BTreeMap<(&str, Strategy), Vec<MeasureRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.model.as_str(), r.strategy)).or_default().push(r.clone());
    }
    groups
        .values()
        .map(|rs| Ok(recommend_record(rs, tie_window)?.clone()))
        .collect()
}

fn check_window(w: f64) -> Result<()> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(usage(format!("--tie-window must be >= 0, got {w}")));
    }
    Ok(())
}

fn recommend(ctx: &Ctx, a: RecommendArgs) -> Result<()> {
    check_window(a.tie_window)?;
    let path = ctx.input(&a.measures);
    let file = load_measures(&path).with_context(|| format!("loading {}", path.display()))?;
    if file.records.is_empty() {
        bail!("{} holds no measures", path.display());
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "model\tstrategy\tlayer\tm1\tm2")?;
    for r in recommendations(&file.records, a.tie_window)? {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.model, r.strategy, r.layer, r.m1, r.m2)?;
    }
    Ok(())
}

fn simmap(ctx: &Ctx, a: SimmapArgs) -> Result<()> {
    if a.anchor.len() != 2 {
        return Err(usage("--anchor takes row,col"));
    }
    let store = LayerStore::open(ctx.input(&a.store))?;
    let reader = store.open_layer(a.layer)?;
    let emb = reader.fetch(a.image)?;
    let grid = cosine_map(&emb, (a.anchor[0], a.anchor[1]))?;
    let text = similarity_tsv(&grid);
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Correlate each model's recommended M1 and M2 with its global-task
/// accuracy at the same layer.
fn correlations(recs: &[MeasureRecord], global: &[GlobalTable], strategy: Strategy) -> Vec<CorrelationRecord> {
    let mut m1 = Vec::new();
    let mut m2 = Vec::new();
    let mut overall = Vec::new();
    let mut unmentioned = Vec::new();
    for r in recs {
        let Some(row) = global
            .iter()
            .filter(|g| g.model == r.model)
            .find_map(|g| g.get(r.layer, strategy))
        else {
            continue;
        };
        m1.push(r.m1);
        m2.push(r.m2);
        overall.push(row.overall.accuracy);
        unmentioned.push(row.not_in_caption.map(|s| s.accuracy));
    }
    let mut out = Vec::new();
    let unmentioned: Option<Vec<f64>> = unmentioned.into_iter().collect();
    let mut pairs: Vec<(&str, &[f64], &[f64])> = vec![
        ("m1_vs_global", &m1, &overall),
        ("m2_vs_global", &m2, &overall),
    ];
    if let Some(u) = &unmentioned {
        pairs.push(("m1_vs_global_not_in_caption", &m1, u));
        pairs.push(("m2_vs_global_not_in_caption", &m2, u));
    }
    for (name, xs, ys) in pairs {
        if xs.len() < 3 {
            continue;
        }
        match pearson(xs, ys) {
            Ok(c) => out.push(CorrelationRecord {
                name: name.to_string(),
                n: c.n,
                r: c.r,
                p: c.p,
            }),
            Err(e) => eprintln!("note: {name} skipped: {e}"),
        }
    }
    out
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    check_window(a.tie_window)?;
    let mut man = RunManifest::new("report");
    man.setting("strategy", a.strategy)
        .setting("tie_window", a.tie_window);
    let tables = load_tables(ctx, &a.tables, &mut man)?;
    let measures = match &a.measures {
        Some(p) => {
            let p = ctx.input(p);
            man.input(&p)?;
            load_measures(&p)?.records
        }
        None if tables.is_empty() => Vec::new(),
        None => measure_records(&tables, a.strategy)?,
    };
    let global = a
        .global
        .iter()
        .map(|p| {
            let p = ctx.input(p);
            man.input(&p)?;
            GlobalTable::load(&p).with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let selected: Vec<MeasureRecord> = measures.iter().filter(|r| r.strategy == a.strategy).cloned().collect();
    let recs = recommendations(&selected, a.tie_window)?;
    let report = Report {
        manifest_digest: Some(man.digest()),
        settings: man.settings.clone(),
        recommendations: recs
            .iter()
            .map(|r| Recommendation {
                model: r.model.clone(),
                layer: r.layer,
                m1: r.m1,
                m2: r.m2,
            })
            .collect(),
        correlations: correlations(&recs, &global, a.strategy),
        measures,
        tables,
        global,
    };
    emit_report(&report, ReportFormat::from_path(&a.out), &a.out)?;
    if let Some(c) = &a.curves {
        std::fs::write(c, accuracy_curves(&report.tables)).with_context(|| format!("writing {}", c.display()))?;
    }
    man.write_sidecar(&sidecar_path(&a.out))?;
    eprintln!("{}: {} measures", a.out.display(), report.measures.len());
    Ok(())
}

fn validate_store(ctx: &Ctx, a: ValidateStoreArgs) -> Result<()> {
    for path in &a.paths {
        let path = ctx.input(path);
        if path.is_dir() {
            let store = LayerStore::open(&path)?;
            for layer in store.layers() {
                let file = store.layer_path(layer)?;
                store.open_layer(layer)?;
                let r = validate_layer_file(&file)?;
                println!(
                    "ok\t{}\tlayer {layer}\t{} records\t{}x{}x{}",
                    file.display(),
                    r.header.record_count,
                    r.header.grid_h,
                    r.header.grid_w,
                    r.header.embed_dim
                );
            }
        } else {
            let r = validate_layer_file(&path)?;
            println!(
                "ok\t{}\tlayer {}\t{} records\t{}x{}x{}",
                path.display(),
                r.header.layer_index,
                r.header.record_count,
                r.header.grid_h,
                r.header.grid_w,
                r.header.embed_dim
            );
        }
    }
    Ok(())
}
