use std::path::Path;
use std::process::{Command, Output};

fn tokprobe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokprobe"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TOKPROBE_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = tokprobe(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(
        &["synth", "--out", "store", "--images", "200", "--leakage", "0,1", "--seed", "2"],
        dir,
    );
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tokprobe(&["synth", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(tokprobe(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(
        tokprobe(&["synth", "--out", "s", "--leakage", "1.5"], dir.path()).status.code(),
        Some(1)
    );
    synth(dir.path());
    let out = tokprobe(
        &[
            "probe-paired", "--task", "store/task.tsv", "--store", "store", "--instances",
            "store/instances.json", "--threshold", "2", "--out", "t.tsv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--threshold"));
    assert_eq!(tokprobe(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn truncated_store_exits_2_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let full = std::fs::read(dir.path().join("store/layer_00.bin")).unwrap();
    std::fs::write(dir.path().join("cut.bin"), &full[..full.len() - 100]).unwrap();

    let out = ok(&["validate-store", "store"], dir.path());
    assert_eq!(out.lines().filter(|l| l.starts_with("ok\t")).count(), 2);

    let out = tokprobe(&["validate-store", "cut.bin"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("byte {}", full.len() - 100)), "{err}");

    let out = tokprobe(&["validate-store", "missing.bin"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn recommend_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let text = "#tokprobe-measures\t1\n\
        model\tlayer\tstrategy\tm1\tm2\ta_pp\ta_sp\ta_ss\tn_sets\n\
        fixture\t0\tAVG_OBJ\t0.70\t0.90\t1\t0.90\t0.70\t1\n\
        fixture\t1\tAVG_OBJ\t0.80\t0.95\t1\t0.95\t0.80\t1\n\
        fixture\t2\tAVG_OBJ\t0.795\t0.80\t1\t0.80\t0.795\t1\n";
    std::fs::write(dir.path().join("m.tsv"), text).unwrap();
    let out = ok(&["recommend", "--measures", "m.tsv"], dir.path());
    let row = out.lines().nth(1).unwrap();
    assert_eq!(row.split('\t').nth(2), Some("2"), "{out}");
    let out = ok(&["recommend", "--measures", "m.tsv", "--tie-window", "0"], dir.path());
    assert_eq!(out.lines().nth(1).unwrap().split('\t').nth(2), Some("1"));
}

#[test]
fn pipeline_is_deterministic_and_located_by_data_dir() {
    let run = |dir: &Path| {
        synth(dir);
        ok(
            &[
                "probe-paired", "--task", "store/task.tsv", "--store", "store", "--instances",
                "store/instances.json", "--layers", "0,1", "--workers", "2", "--out", "t.json",
            ],
            dir,
        );
        ok(&["measures", "--tables", "t.json", "--out", "m.tsv"], dir);
        ok(&["report", "--tables", "t.json", "--out", "r.tsv", "--curves", "c.tsv"], dir);
        std::fs::read(dir.join("r.tsv")).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run(a.path());
    assert_eq!(first, run(b.path()));
    let report = String::from_utf8(first).unwrap();
    assert!(report.starts_with("#tokprobe-report\t1\n#manifest_digest\t"));
    assert!(a.path().join("r.tsv.manifest.json").exists());
    assert!(a.path().join("store/run_manifest.json").exists());

    // relative inputs resolved against the data directory, outputs against the cwd
    let out = Command::new(env!("CARGO_BIN_EXE_tokprobe"))
        .args(["simmap", "--store", "store", "--layer", "1", "--image", "1", "--anchor", "0,0"])
        .env("TOKPROBE_DATA_DIR", a.path())
        .current_dir(b.path().join("store"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("#image_id\t1\n#anchor\t0\t0\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 8);
}

#[test]
fn build_tasks_and_global_probe() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(
        dir.path().join("sets.toml"),
        "seed = 4\n\
         [[set]]\nname = \"s\"\nprimary = [\"primary_0\", \"primary_1\"]\n\
         secondary = [\"secondary_0\", \"secondary_1\", \"secondary_2\", \"secondary_3\"]\n\
         [global]\ncategories = [\"primary_0\", \"primary_1\"]\ntrain_image_limit = 100\n",
    )
    .unwrap();
    let args = [
        "build-tasks", "--instances", "store/instances.json", "--val-instances", "store/instances.json",
        "--config", "sets.toml", "--out", "tasks",
    ];
    ok(&args, dir.path());
    let first = std::fs::read(dir.path().join("tasks/s.task.tsv")).unwrap();
    ok(&args, dir.path());
    assert_eq!(first, std::fs::read(dir.path().join("tasks/s.task.tsv")).unwrap());
    assert!(dir.path().join("tasks/global.task.tsv").exists());

    ok(
        &[
            "probe-global", "--task", "tasks/global.task.tsv", "--store", "store", "--instances",
            "store/instances.json", "--min-subset", "1", "--out", "g.tsv",
        ],
        dir.path(),
    );
    let g = std::fs::read_to_string(dir.path().join("g.tsv")).unwrap();
    let rows: Vec<&str> = g.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4, "{g}");

    let out = tokprobe(
        &[
            "probe-global", "--task", "tasks/global.task.tsv", "--store", "store", "--instances",
            "store/instances.json", "--strategies", "CLS", "--out", "g2.tsv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}
