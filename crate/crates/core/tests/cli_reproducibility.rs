use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use recourse_core::harness::cli;

const SMALL: &str = r#"
scenario = "small"
seed = 7
generator = "ours"
goal_policy = "trained"

[dataset]
num_examples = 400

[scorer]
epochs = 50

[env]
episode_length = 8

[recommender]
warmup_episodes = 15
full_episodes = 15

[recommender.sac]
batch_size = 16
warmup_steps = 40
hidden = [8, 8]

[predictor]
episodes = 3

[predictor.sac]
batch_size = 8
warmup_steps = 10
hidden = [8, 8]

[evaluation]
episodes = 2
comparison_candidates = 5

[sweep]
grid = [[1.0, 5.0], [10.0, 1.0]]
horizons = [1, 2]
threads = 2
"#;

const COMMANDS: [&str; 8] =
    ["gen-data", "train-scorer", "train-recommender", "train-predictor", "evaluate", "sweep", "horizon-study", "report"];

fn run_all(config: &Path, out: &Path) {
    for cmd in COMMANDS {
        let code = cli::run(["recourse", cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{cmd} failed");
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn every_command_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all(&config, &a);
    run_all(&config, &b);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    for name in [
        "dataset.csv",
        "scorer.bin",
        "recommender.bin",
        "recommender_training.csv",
        "predictor.bin",
        "eval_steps.csv",
        "eval_summary.csv",
        "eval_generators.csv",
        "sweep/points.csv",
        "sweep/point_01/predictor.bin",
        "horizon/horizon.csv",
        "horizon/T2/points.csv",
        "report/pareto.svg",
        "report/convergence.svg",
        "report/horizon.svg",
        "report/report.md",
    ] {
        assert!(sa.contains_key(name), "missing artifact {name}");
    }
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between identical runs");
    }
}

#[test]
fn different_seed_changes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let c = config.to_str().unwrap();
    assert_eq!(cli::run(["recourse", "gen-data", "--config", c, "--out", a.to_str().unwrap()]), 0);
    assert_eq!(cli::run(["recourse", "gen-data", "--config", c, "--seed", "8", "--out", b.to_str().unwrap()]), 0);
    assert_ne!(std::fs::read(a.join("dataset.csv")).unwrap(), std::fs::read(b.join("dataset.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_recourse");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let missing = Command::new(bin).args(["train-scorer", "--out", out.to_str().unwrap()]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("dataset.csv"));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "horizon = 0\n").unwrap();
    let cfg = Command::new(bin).args(["gen-data", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]).output().unwrap();
    assert_eq!(cfg.status.code(), Some(2));

    let ok = Command::new(bin).args(["gen-data", "--out", out.to_str().unwrap()]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(out.join("marginals.json").exists());
}
