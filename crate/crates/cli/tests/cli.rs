use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
data_seed = 5
methods = ["ccn", "end-to-end"]
seeds = 2

[scenario]
kind = "cube_toss"
steps_per_toss = 30

[train]
seed = 1
epochs = 1
batch_size = 16
max_batches_per_epoch = 2
max_val_samples = 20
train_size = 2
val_size = 1
test_size = 2

[sweep]
kind = "train_size"
values = [1, 2]

[volume]
samples = 20000
seed = 1
"#;

fn sysid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sysid"))
        .args(args)
        .env("SYSID_OUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn cfg(dir: &Path) -> String {
    dir.join("run.toml").display().to_string()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup();
    let o = sysid(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("--config"));
    let o = sysid(
        dir.path(),
        &["train", "--config", "x", "--data", "y", "--method", "ccnr"],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = sysid(dir.path(), &["inspect"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = setup();
    let o = sysid(dir.path(), &["gen-data", "--config", "does/not/exist.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("{CONFIG}\nunknown_key = 1\n")).unwrap();
    let o = sysid(dir.path(), &["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible_and_respects_the_output_dir() {
    let dir = setup();
    let o = sysid(
        dir.path(),
        &[
            "gen-data",
            "--config",
            &cfg(dir.path()),
            "--out",
            "a.jsonl",
            "--seed",
            "7",
            "--tosses",
            "3",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("tosses        3"));
    let o = sysid(
        dir.path(),
        &[
            "gen-data",
            "--config",
            &cfg(dir.path()),
            "--out",
            "b.jsonl",
            "--seed",
            "7",
            "--tosses",
            "3",
        ],
    );
    assert!(o.status.success());
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    let o = sysid(
        dir.path(),
        &["inspect", "--data", dir.path().join("a.jsonl").to_str().unwrap()],
    );
    assert!(o.status.success());
    assert!(text(&o).contains("cube_toss"));
}

#[test]
fn train_eval_and_inspect_round_trip() {
    let dir = setup();
    let c = cfg(dir.path());
    assert!(sysid(dir.path(), &["gen-data", "--config", &c]).status.success());
    let data = dir.path().join("dataset.jsonl");
    let data = data.to_str().unwrap();
    let before = fs::read(data).unwrap();

    let o = sysid(
        dir.path(),
        &[
            "train",
            "--config",
            &c,
            "--data",
            data,
            "--method",
            "ccn-r",
            "--out",
            "ccnr.json",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let ck = fs::read_to_string(dir.path().join("ccnr.json")).unwrap();
    assert!(ck.contains("\"ccn-r\"") && ck.contains("config_hash"));
    let hist = fs::read_to_string(dir.path().join("ccnr.history.csv")).unwrap();
    assert!(hist.starts_with("epoch,train_loss,val_loss,skipped,wall_time_s,config_hash"));
    assert_eq!(hist.lines().count(), 3);

    let o = sysid(
        dir.path(),
        &["inspect", "--config", &c, "--truth-checkpoint", "truth.json"],
    );
    assert!(o.status.success(), "{}", text(&o));
    let truth = dir.path().join("truth.json");
    let o = sysid(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            truth.to_str().unwrap(),
            "--data",
            data,
            "--config",
            &c,
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        header,
        [
            "checkpoint",
            "method",
            "e_volume",
            "e_friction",
            "e_inertia",
            "traj_pos_error",
            "traj_rot_error",
            "n_test",
            "n_failed",
            "config_hash"
        ]
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    for v in &row[2..7] {
        assert!(v.parse::<f64>().unwrap().abs() < 1e-9, "{row:?}");
    }

    let o = sysid(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            dir.path().join("ccnr.json").to_str().unwrap(),
            "--data",
            data,
            "--config",
            &c,
            "--format",
            "json",
            "--out",
            "eval.json",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let json = fs::read_to_string(dir.path().join("eval.json")).unwrap();
    assert!(json.contains("\"traj_pos_error\""));
    assert_eq!(fs::read(data).unwrap(), before);

    let o = sysid(
        dir.path(),
        &[
            "inspect",
            "--checkpoint",
            dir.path().join("ccnr.json").to_str().unwrap(),
            "--model",
            "cube",
        ],
    );
    assert!(o.status.success());
    assert!(text(&o).contains("residual      yes"));
}

#[test]
fn train_rejects_a_mismatched_dataset() {
    let dir = setup();
    let c = cfg(dir.path());
    assert!(sysid(dir.path(), &["gen-data", "--config", &c]).status.success());
    let other = dir.path().join("other.toml");
    fs::write(&other, CONFIG.replace("cube_toss", "vortex_asymmetric")).unwrap();
    let data = dir.path().join("dataset.jsonl");
    let o = sysid(
        dir.path(),
        &[
            "train",
            "--config",
            other.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--method",
            "ccn",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("does not match"));
}

#[test]
fn sweep_writes_tables_and_resumes_from_cache() {
    let dir = setup();
    let c = cfg(dir.path());
    let o = sysid(dir.path(), &["sweep", "--config", &c, "--workers", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let sweep = dir.path().join("sweep");
    let results = fs::read_to_string(sweep.join("results.csv")).unwrap();
    // 2 sizes × 2 methods × 2 seeds
    assert_eq!(results.lines().count(), 1 + 8);
    let summary = fs::read_to_string(sweep.join("summary_traj_pos_error.csv")).unwrap();
    assert!(summary.starts_with("method,sweep_value,n,mean,ci_half_width,ci_low,ci_high,config_hash"));
    assert_eq!(summary.lines().count(), 1 + 4);

    let o = sysid(dir.path(), &["sweep", "--config", &c]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(sweep.join("results.csv")).unwrap(), results);
    let timings = fs::read_to_string(sweep.join("timings.csv")).unwrap();
    assert!(timings.lines().skip(1).all(|l| l.contains(",true,")), "{timings}");
}

fn toml_blocks(markdown: &str) -> Vec<String> {
    markdown
        .split("```toml\n")
        .skip(1)
        .map(|b| b.split("```").next().unwrap().to_string())
        .collect()
}

#[test]
fn readme_configs_are_accepted() {
    let readme = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let blocks = toml_blocks(&readme);
    assert_eq!(blocks.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cube.toml"), &blocks[1]).unwrap();
    let run = blocks[0].replace("# model_file", "model_file");
    fs::write(dir.path().join("run.toml"), run).unwrap();
    let o = sysid(
        dir.path(),
        &[
            "inspect",
            "--config",
            &cfg(dir.path()),
            "--truth-checkpoint",
            "truth.json",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let truth = fs::read_to_string(dir.path().join("truth.json")).unwrap();
    assert!(truth.contains("\"cube\""), "{truth}");
}
