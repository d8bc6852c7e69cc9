//! End-to-end checks of the training loop and the CLI contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use floornav::config::RunConfig;
use floornav::episodes::{compute_stats, load_dataset, sample_episode, EpisodeParams};
use floornav::floorgrid::{synth_scene, SceneParams, SizeClass};
use floornav::policy::{load_checkpoint, train, Normalizer, Policy, TrainConfig, TrainData, Variant};
use floornav::seeds::derive_seed;

fn floornav(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floornav"))
        .env("RUST_LOG", "warn")
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

const SMALL: [&str; 6] = [
    "--set",
    "scenes.small=2",
    "--set",
    "episodes.per_scene=5",
    "--set",
    "eval.pairs_per_scene=1",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn training_loss_halves_on_a_small_set() {
    let scene = synth_scene(11, SizeClass::Small, 0.15, &SceneParams::default()).unwrap();
    let eps: Vec<_> = (0..10)
        .map(|i| sample_episode(&scene, derive_seed(11, "episode", i), &EpisodeParams::default()).unwrap())
        .collect();
    let run = RunConfig::default();
    let data = TrainData::new(&eps, std::slice::from_ref(&scene), &run.sim, run.policy.plan_side).unwrap();
    let tcfg = TrainConfig {
        lr: 1e-3,
        epochs: 8,
        steps_per_epoch: 25,
        batch: 32,
        ..TrainConfig::default()
    };
    let norm = Normalizer::from_episodes(&eps).unwrap();
    for variant in [Variant::Loc, Variant::Naive] {
        let (_, log) = train(&data, variant, &run.policy, &tcfg, norm).unwrap();
        let (first, last) = (log.epochs[0], *log.epochs.last().unwrap());
        assert!(last <= 0.5 * first, "{variant}: {first} -> {last}");
    }
}

#[test]
fn zero_epoch_training_saves_the_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [&["synth-scenes"][..], &["gen-episodes"], &["train", "--epochs", "0"]] {
        let out = floornav(dir.path(), &with_small(cmd));
        assert!(
            out.status.success(),
            "{cmd:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let (loaded, tcfg) = load_checkpoint(&dir.path().join("checkpoints/loc.json")).unwrap();
    assert_eq!(tcfg.unwrap().epochs, 0);
    let run = RunConfig::default();
    let fresh = Policy::new(
        Variant::Loc,
        run.policy.clone(),
        loaded.norm,
        derive_seed(run.seed, "policy-init", 0),
    )
    .unwrap();
    assert_eq!(loaded.store.flat(), fresh.store.flat());
}

#[test]
fn stats_prints_the_computed_summary() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [&["synth-scenes"][..], &["gen-episodes"]] {
        assert!(floornav(dir.path(), &with_small(cmd)).status.success());
    }
    let out = floornav(dir.path(), &["stats"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["split", "count", "metric", "min", "max", "mean", "median"]);
    let eps = load_dataset(&dir.path().join("datasets/episodes.jsonl")).unwrap();
    let st = compute_stats(&eps).unwrap();
    let row = |split: &str, metric: &str| -> Vec<String> {
        text.lines()
            .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
            .find(|c| c[0] == split && c[2] == metric)
            .unwrap()
    };
    for (metric, s) in [("straight_line", st.straight_line), ("travel", st.travel)] {
        let r = row("all", metric);
        assert_eq!(r[1], st.count.to_string());
        let want: Vec<String> = [s.min, s.max, s.mean, s.median]
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect();
        assert_eq!(r[3..], want[..]);
        assert_eq!(row("small", metric)[3..], want[..]);
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    for cmd in [&["synth-scenes", "--seed", "5"][..], &["gen-episodes", "--seed", "5"]] {
        assert!(floornav(a.path(), &with_small(cmd)).status.success());
    }
    let echo = a.path().join("datasets/config.toml");
    let b = tempfile::tempdir().unwrap();
    let cfg = echo.to_str().unwrap();
    for cmd in [
        &["synth-scenes", "--config", cfg][..],
        &["gen-episodes", "--config", cfg],
    ] {
        assert!(floornav(b.path(), cmd).status.success());
    }
    for f in [
        "datasets/episodes.jsonl",
        "datasets/stats.json",
        "datasets/config.toml",
        "scenes/index.txt",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| floornav(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--set", "train.nope=1"]), 1);
    assert_eq!(code(&["train", "--set", "policy.rays=7"]), 1);
    assert_eq!(code(&["eval", "--config", "/nonexistent.toml"]), 1);
    assert_eq!(code(&["gen-episodes"]), 2);
    assert_eq!(code(&["stats"]), 2);
    let help = floornav(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    for cmd in ["synth-scenes", "gen-episodes", "train", "eval", "render", "stats"] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
    }
    let err = floornav(dir.path(), &["gen-episodes"]);
    let stderr = String::from_utf8(err.stderr).unwrap();
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
}

#[test]
fn eval_requires_the_checkpoints_its_methods_need() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [&["synth-scenes"][..], &["gen-episodes"]] {
        assert!(floornav(dir.path(), &with_small(cmd)).status.success());
    }
    let out = floornav(dir.path(), &with_small(&["eval"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoints/loc.json"));
    let astar_only = r#"eval.methods=[{name = "a", kind = "loc_astar"}]"#;
    let out = floornav(dir.path(), &with_small(&["eval", "--set", astar_only]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("results/results.csv")).unwrap();
    assert!(csv.starts_with("method,tau_d,tau_c,sr,spl,mean_collisions,n_episodes\n"));
    assert_eq!(csv.lines().count(), 1 + 12);
}
