use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &[&str] = &[
    "--override",
    "n=90",
    "--override",
    "splits.train=45",
    "--override",
    "splits.val=24",
    "--override",
    "splits.test=21",
];

fn f2c(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_f2c"))
        .args(args)
        .env_remove("F2C_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = f2c(args);
    assert_eq!(code(&out), 0, "f2c {args:?} failed: {}", stderr(&out));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn gen_tiny(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data_{seed}"));
    let mut args = vec!["gen", "--seed", seed, "--out", s(&out)];
    args.extend_from_slice(TINY);
    ok(&args);
    out
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--steps", "12", "--override", "eval_interval=6", "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn artifacts(dir: &Path) -> Value {
    read_json(&dir.join("manifest.json"))["artifacts"].clone()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn assert_valid(schema: &str, docs: &[Value]) {
    let schema_value = read_json(&schema_dir().join(format!("{schema}.schema.json")));
    let compiled = jsonschema::JSONSchema::compile(&schema_value).expect("schema compiles");
    for doc in docs {
        if let Err(errors) = compiled.validate(doc) {
            let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
            panic!("{schema}: {msgs:?}");
        }
    }
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn gen_writes_dataset_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = gen_tiny(tmp.path(), "3");
    for f in ["dataset.jsonl", "formats.json", "dedup.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    assert!(!a.join(".lock").exists());
    let b = tmp.path().join("again");
    let mut args = vec!["gen", "--seed", "3", "--out", s(&b)];
    args.extend_from_slice(TINY);
    ok(&args);
    assert_eq!(artifacts(&a), artifacts(&b));
    for f in ["dataset.jsonl", "formats.json", "dedup.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_checksums_match_files() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let arts = artifacts(&data);
    let arts = arts.as_object().unwrap();
    assert_eq!(arts.len(), 3);
    for (rel, digest) in arts {
        use sha2::Digest;
        let bytes = fs::read(data.join(rel)).unwrap();
        assert_eq!(hex::encode(sha2::Sha256::digest(&bytes)), digest.as_str().unwrap(), "{rel}");
    }
}

#[test]
fn malformed_config_exits_2_and_names_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    write(&cfg, "n = \"lots\"\n");
    let out = f2c(&["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("`n`"), "{}", stderr(&out));

    write(&cfg, "labls = 3\n");
    let out = f2c(&["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("labls"), "{}", stderr(&out));

    write(&cfg, "labels = 1\n");
    let out = f2c(&["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("labels"), "{}", stderr(&out));
}

#[test]
fn unwritable_output_fails_with_message() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    write(&blocker, "x");
    let mut args = vec!["gen", "--out", s(&blocker)];
    args.extend_from_slice(TINY);
    let out = f2c(&args);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("file"), "{}", stderr(&out));
}

#[test]
fn out_root_env_sets_default_directory() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["gen"];
    args.extend_from_slice(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_f2c"))
        .args(&args)
        .env("F2C_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("gen/manifest.json").exists());
}

#[test]
fn base_train_is_evaluation_only() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let run = tmp.path().join("base");
    train_tiny(&data, &run, &["--method", "base"]);
    let ckpts: Vec<_> = fs::read_dir(run.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(ckpts, vec![std::ffi::OsString::from("step_000000.json")]);
    let report = read_json(&run.join("report.json"));
    assert_eq!(report["selected_step"], 0);
    assert_eq!(report["gold_reads_in_training"], 0);
    assert!(read_jsonl(&run.join("diagnostics.jsonl")).is_empty());
}

#[test]
fn overrides_are_recorded_in_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let run = tmp.path().join("f2c");
    train_tiny(&data, &run, &["--method", "f2c", "--f-min", "0", "--f-max", "1"]);
    let manifest = read_json(&run.join("manifest.json"));
    let overrides: Vec<&str> = manifest["overrides"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(overrides.contains(&"hp.f_min=0"), "{overrides:?}");
    assert!(overrides.contains(&"hp.f_max=1"), "{overrides:?}");
    let config = read_json(&run.join("config.json"));
    assert_eq!(config["config"]["hp"]["f_min"], 0.0);
    assert_eq!(config["effective_hp"]["f_max"], 1.0);
    assert_eq!(manifest["command"], "train");
}

#[test]
fn unknown_method_lists_valid_ones() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let out = f2c(&["train", "--data", s(&data), "--method", "sgd", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for m in ["base", "swarm", "cce", "f2c"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn unknown_method_in_config_file_exits_2() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let cfg = tmp.path().join("t.toml");
    write(&cfg, "method = \"sgd\"\n");
    let out = f2c(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("f2c"), "{}", stderr(&out));
}

#[test]
fn missing_dataset_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = f2c(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let out = f2c(&["train", "--data", s(&data), "--method", "cce", "--lr", "1.7976931348623157e308", "--steps", "3", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(!tmp.path().join("r/manifest.json").exists());
}

#[test]
fn train_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "1");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train_tiny(&data, &a, &["--method", "f2c", "--seed", "4"]);
    train_tiny(&data, &b, &["--method", "f2c", "--seed", "4"]);
    assert_eq!(artifacts(&a), artifacts(&b));
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
}

#[test]
fn eval_slices_recombine_to_full_eval() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let run = tmp.path().join("run");
    train_tiny(&data, &run, &["--method", "cce"]);
    let ckpt = run.join("checkpoint.json");
    let eval = |range: Option<&str>, name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out)];
        if let Some(r) = range {
            args.extend(["--formats", r]);
        }
        ok(&args);
        read_json(&out.join("report.json"))
    };
    let full = eval(None, "full");
    let head = eval(Some("0..5"), "head");
    let tail = eval(Some("5..8"), "tail");
    assert_eq!(tail["formats"], serde_json::json!([5, 6, 7]));

    let per_format = |r: &Value| -> Vec<f64> { r["per_format_f1"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
    let mut joined = per_format(&head);
    joined.extend(per_format(&tail));
    assert_eq!(joined, per_format(&full));
    let mean = joined.iter().sum::<f64>() / joined.len() as f64;
    assert!((mean - full["f1_mean"].as_f64().unwrap()).abs() < 1e-12);
    let std = (joined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / joined.len() as f64).sqrt();
    assert!((std - full["f1_std"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(full["instances"], tail["instances"]);
}

#[test]
fn eval_rejects_bad_format_subsets_and_shapes() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let run = tmp.path().join("run");
    train_tiny(&data, &run, &["--method", "base"]);
    let ckpt = run.join("checkpoint.json");
    for range in ["3..3", "5..9"] {
        let out = f2c(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--formats", range, "--out", s(&tmp.path().join("e"))]);
        assert_eq!(code(&out), 2, "{range}");
    }
    let wide = tmp.path().join("wide");
    let mut args = vec!["gen", "--override", "dim=6", "--out", s(&wide)];
    args.extend_from_slice(TINY);
    ok(&args);
    let out = f2c(&["eval", "--checkpoint", s(&ckpt), "--data", s(&wide), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dimension"), "{}", stderr(&out));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("busy");
    fs::create_dir_all(&out_dir).unwrap();
    write(&out_dir.join(".lock"), "");
    let mut args = vec!["gen", "--out", s(&out_dir)];
    args.extend_from_slice(TINY);
    let out = f2c(&args);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("locked"), "{}", stderr(&out));
    assert!(!out_dir.join("manifest.json").exists());
}

const TINY_STUDY: &str = "[task]\nn = 90\n[task.splits]\ntrain = 45\nval = 24\ntest = 21\n[train]\nsteps = 6\neval_interval = 3\n";

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn compare_with_only_base_is_one_row() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("compare.toml");
    write(&spec, &format!("seeds = [0]\nmethods = [\"base\"]\n{TINY_STUDY}"));
    let out = tmp.path().join("cmp");
    ok(&["study", "compare", "--config", s(&spec), "--out", s(&out)]);
    let rows = csv_rows(&out.join("compare.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][1], "base");
    let report = read_json(&out.join("compare.json"));
    assert_eq!(report["rows"][0]["delta"]["f1_mean"], 0.0);
}

#[test]
fn heldout_csv_has_three_rows_per_seed_per_metric() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("heldout.toml");
    write(&spec, &format!("seeds = [0, 1]\nks = [2, 4, 6]\n{TINY_STUDY}"));
    let out = tmp.path().join("ho");
    ok(&["study", "heldout", "--config", s(&spec), "--out", s(&out)]);
    let rows = csv_rows(&out.join("heldout.csv"));
    for seed in ["0", "1"] {
        for metric in ["f1_mean", "f1_std", "p_o"] {
            let n = rows.iter().filter(|r| &r[0] == seed && &r[2] == metric).count();
            assert_eq!(n, 3, "seed {seed} metric {metric}");
        }
    }
    // K = V-1 is valid and leaves a single held-out format.
    write(&spec, &format!("seeds = [0]\nks = [7]\n{TINY_STUDY}"));
    let out7 = tmp.path().join("ho7");
    ok(&["study", "heldout", "--config", s(&spec), "--out", s(&out7)]);
    let point = &read_json(&out7.join("heldout.json"))["points"][1];
    assert_eq!(point["f1_std"], 0.0);
    assert!(point["p_o"].is_null());

    write(&spec, &format!("seeds = [0]\nks = [8]\n{TINY_STUDY}"));
    let bad = f2c(&["study", "heldout", "--config", s(&spec), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn ood_matrix_covers_every_task_pair() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("ood.toml");
    write(&spec, &format!("seeds = [0]\n{TINY_STUDY}"));
    let out = tmp.path().join("ood");
    ok(&["study", "ood", "--config", s(&spec), "--out", s(&out)]);
    let rows = csv_rows(&out.join("ood.csv"));
    assert_eq!(rows.len(), 9);
    assert_eq!(rows.iter().filter(|r| &r[3] == "true").count(), 3);
    let report = read_json(&out.join("ood.json"));
    assert_eq!(report["mean_delta_f1_mean"].as_array().unwrap().len(), 3);
    let tally = &report["f1_mean_tally"];
    assert!(tally["positive"].as_u64().unwrap() + tally["negative"].as_u64().unwrap() <= 6);
}

#[test]
fn study_names_missing_datasets() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("ood.toml");
    write(&spec, "datasets = [\"absent_a\", \"absent_b\"]\n");
    let out = f2c(&["study", "ood", "--config", s(&spec), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent_a"), "{}", stderr(&out));
}

#[test]
fn study_reads_task_from_dataset_directory() {
    let tmp = TempDir::new().unwrap();
    gen_tiny(tmp.path(), "0");
    let spec = tmp.path().join("compare.toml");
    write(&spec, "seeds = [0]\nmethods = [\"base\"]\ndataset = \"data_0\"\n");
    let out = tmp.path().join("cmp");
    ok(&["study", "compare", "--config", s(&spec), "--out", s(&out)]);
    let report = read_json(&out.join("compare.json"));
    assert_eq!(report["rows"][0]["test"]["instances"], 21);
}

#[test]
fn every_output_matches_its_schema() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "2");
    let run = tmp.path().join("run");
    train_tiny(&data, &run, &["--method", "f2c"]);
    let ev = tmp.path().join("ev");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data), "--formats", "2..8", "--out", s(&ev)]);
    let spec = tmp.path().join("study.toml");
    write(&spec, &format!("seeds = [0]\nmethods = [\"swarm\", \"f2c\"]\nks = [3]\n{TINY_STUDY}"));
    let mut studies = Vec::new();
    for kind in ["compare", "heldout", "ood"] {
        let out = tmp.path().join(kind);
        ok(&["study", kind, "--config", s(&spec), "--out", s(&out)]);
        assert_valid(kind, &[read_json(&out.join(format!("{kind}.json")))]);
        studies.push(out);
    }
    let methods = &read_json(&studies[0].join("compare.json"))["methods"];
    assert_eq!(methods, &serde_json::json!(["base", "swarm", "f2c"]));

    assert_valid("dataset_record", &read_jsonl(&data.join("dataset.jsonl")));
    assert_valid("formats", &[read_json(&data.join("formats.json"))]);
    assert_valid("dedup", &[read_json(&data.join("dedup.json"))]);
    assert_valid("train_config", &[read_json(&run.join("config.json"))]);
    assert_valid("diagnostics", &read_jsonl(&run.join("diagnostics.jsonl")));
    assert_valid("instance", &read_jsonl(&run.join("instances.jsonl")));
    assert_valid("train_report", &[read_json(&run.join("report.json"))]);
    let ckpts: Vec<Value> = fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| read_json(&e.unwrap().path()))
        .chain([read_json(&run.join("checkpoint.json"))])
        .collect();
    assert_valid("checkpoint", &ckpts);
    assert_valid("metrics_report", &[read_json(&ev.join("report.json"))]);
    let manifests: Vec<Value> = [&data, &run, &ev]
        .into_iter()
        .chain(&studies)
        .map(|d| read_json(&d.join("manifest.json")))
        .collect();
    assert_valid("manifest", &manifests);
}

#[test]
fn diagnostics_skip_counts_match_case_tallies() {
    let tmp = TempDir::new().unwrap();
    let data = gen_tiny(tmp.path(), "0");
    let run = tmp.path().join("run");
    train_tiny(&data, &run, &["--method", "f2c"]);
    for row in read_jsonl(&run.join("diagnostics.jsonl")) {
        let cases = &row["cases"];
        let skipped = cases["no_majority"].as_u64().unwrap() + cases["degenerate"].as_u64().unwrap();
        assert_eq!(row["skipped"].as_u64().unwrap(), skipped);
        let total: u64 = cases.as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total, row["instances"].as_u64().unwrap());
    }
    let instances = read_jsonl(&run.join("instances.jsonl"));
    assert_eq!(instances.len(), 45);
    for row in instances {
        let case = row["outcome"]["case"].as_str().unwrap();
        if case == "no_majority" || case == "degenerate" {
            assert_eq!(row["loss"]["total"], 0.0);
        }
        if case != "split" {
            assert_eq!(row["loss"]["flip"], 0.0);
        }
    }
}
