use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mafqi::game::GameDocument;
use mafqi::oracle::{discretize, QTable};
use mafqi::GameKind;
use mafqi_cli::manifest::{read_manifest, sha256_hex};
use mafqi_cli::{BoundSuite, ExperimentConfig, GameSection};
use tempfile::TempDir;

const SMALL: &str = r#"
schema_version = 1
seed = 5

[game]
kind = "decomposable"
agents = 2
state_dim = 1
actions = 2
gamma = 0.5
r_max = 1.0

[oracle]
resolution = 8

[fqi]
iterations = 3
samples = 256
width = 8

[fqi.fit]
epochs = 5
"#;

fn mafqi(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mafqi"));
    cmd.args(args).env_remove("MAFQI_SEED").env_remove("MAFQI_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_cmd(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mafqi(&args, &[])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_game_decomposable_has_decomposition_and_provenance() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = run_cmd("gen-game", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = GameDocument::from_json(&fs::read_to_string(out.join("game.json")).unwrap()).unwrap();
    assert!(doc.game.decomposition().is_some());
    assert_eq!(doc.game.spec.kind, GameKind::Decomposable);
    assert_eq!(doc.provenance["seed"], 5);
    assert_eq!(doc.provenance["config_schema_version"], 1);
    assert_eq!(doc.provenance["checks"]["reward_bound"]["passed"], true);
    assert!(doc.provenance["checks"]["reward_bound"]["max_abs"].as_f64().unwrap() <= 1.0);
}

#[test]
fn gen_game_reverse_engineered_records_bellman_residual() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace("kind = \"decomposable\"", "kind = \"reverse_engineered\"");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("out");
    let o = run_cmd("gen-game", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = GameDocument::from_json(&fs::read_to_string(out.join("game.json")).unwrap()).unwrap();
    assert_eq!(doc.game.spec.kind, GameKind::ReverseEngineered);
    let recorded = doc.provenance["checks"]["bellman_residual"].as_f64().unwrap();
    assert!(recorded.is_finite() && recorded < 1e-2, "residual {recorded}");

    // With the reward's own midpoint rule the oracle at the same resolution
    // has Q* as its exact fixed point.
    let tg = discretize::<f64>(&doc.game, 8).unwrap();
    let mafqi::game::RewardModel::FromOptimalQ { qstar, .. } = &doc.game.reward else {
        panic!("reward not derived from Q*");
    };
    let q: QTable<f64> = tg.tabulate(|s, a| qstar.eval(&doc.game.spec, s, a));
    let tq = tg.bellman_apply(&q).unwrap();
    assert!(tq.sup_diff(&q) < 1e-10, "{}", tq.sup_diff(&q));
}

#[test]
fn gen_game_is_byte_identical_across_reruns() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_cmd("gen-game", &cfg, &a, &[]).status.success());
    assert!(run_cmd("gen-game", &cfg, &b, &[]).status.success());
    assert_eq!(fs::read(a.join("game.json")).unwrap(), fs::read(b.join("game.json")).unwrap());
    let c = dir.path().join("c");
    assert!(run_cmd("gen-game", &cfg, &c, &["--seed", "6"]).status.success());
    assert_ne!(fs::read(a.join("game.json")).unwrap(), fs::read(c.join("game.json")).unwrap());
}

#[test]
fn game_file_section_loads_generated_game() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let gen = dir.path().join("gen");
    assert!(run_cmd("gen-game", &cfg, &gen, &[]).status.success());
    let text = SMALL.replace(
        "kind = \"decomposable\"\nagents = 2\nstate_dim = 1\nactions = 2\ngamma = 0.5\nr_max = 1.0",
        "kind = \"file\"\npath = \"gen/game.json\"",
    );
    let file_cfg = write_config(dir.path(), "f.toml", &text);
    let solved = dir.path().join("solved");
    let o = run_cmd("solve", &file_cfg, &solved, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q = QTable::<f64>::read_binary(fs::File::open(solved.join("qstar.bin")).unwrap()).unwrap();
    assert_eq!((q.nodes, q.actions), (64, 4));

    let missing = write_config(dir.path(), "m.toml", &text.replace("gen/game.json", "nowhere.json"));
    let o = run_cmd("solve", &missing, &dir.path().join("m"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("game stage"));
}

#[test]
fn solve_matches_library_value_iteration() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = run_cmd("solve", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let game = mafqi::Game::from_json(&fs::read_to_string(out.join("game.json")).unwrap()).unwrap();
    let tg = discretize::<f64>(&game, 8).unwrap();
    let q = QTable::<f64>::read_binary(fs::File::open(out.join("qstar.bin")).unwrap()).unwrap();
    let tq = tg.bellman_apply(&q).unwrap();
    assert!(tq.sup_diff(&q) < 1e-9);
    let csv = fs::read_to_string(out.join("qstar.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 64 * 4);
}

#[test]
fn zero_iterations_gives_header_only_csv_and_tie_policy() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("iterations = 3", "iterations = 0"));
    let out = dir.path().join("out");
    let o = run_cmd("run", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv, "k,train_loss,eps_k,sup_err,l1_mu_err,path_norm_max,wall_seconds\n");
    let policy = fs::read_to_string(out.join("policy.csv")).unwrap();
    assert!(policy.lines().skip(1).all(|l| l.ends_with(",0,0")));
}

#[test]
fn run_is_reproducible_and_jobs_match_single_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_cmd("run", &cfg, &a, &[]).status.success());
    assert!(run_cmd("run", &cfg, &b, &[]).status.success());
    assert_eq!(read_manifest(&a).unwrap(), read_manifest(&b).unwrap());
    let csv = fs::read(a.join("convergence.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("convergence.csv")).unwrap());

    let fan = dir.path().join("fan");
    let o = run_cmd("run", &cfg, &fan, &["--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_manifest(&fan.join("seed-5")).unwrap(), read_manifest(&a).unwrap());
    let single6 = dir.path().join("s6");
    assert!(run_cmd("run", &cfg, &single6, &["--seed", "6"]).status.success());
    assert_eq!(read_manifest(&fan.join("seed-6")).unwrap(), read_manifest(&single6).unwrap());
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    assert!(run_cmd("run", &cfg, &out, &[]).status.success());
    let rows = read_manifest(&out).unwrap();
    let names: Vec<&str> = rows.iter().map(|(p, _)| p.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    for f in ["bounds.jsonl", "convergence.csv", "critic.ckpt", "game.json", "policy.csv", "report.json", "solve.json"] {
        assert!(names.contains(&f), "{f} missing from manifest");
    }
    for (p, d) in &rows {
        assert_eq!(&sha256_hex(&fs::read(out.join(p)).unwrap()), d);
    }
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#[test]
fn flag_beats_env_beats_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let cfg = cfg.to_str().unwrap();
    let env_out = dir.path().join("env");
    let o = mafqi(
        &["gen-game", "--config", cfg],
        &[("MAFQI_SEED", "9"), ("MAFQI_OUT", env_out.to_str().unwrap())],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = GameDocument::from_json(&fs::read_to_string(env_out.join("game.json")).unwrap()).unwrap();
    assert_eq!(doc.provenance["seed"], 9);

    let flag_out = dir.path().join("flag");
    let o = mafqi(
        &["gen-game", "--config", cfg, "--seed", "11", "--out", flag_out.to_str().unwrap()],
        &[("MAFQI_SEED", "9"), ("MAFQI_OUT", env_out.to_str().unwrap())],
    );
    assert!(o.status.success());
    let doc = GameDocument::from_json(&fs::read_to_string(flag_out.join("game.json")).unwrap()).unwrap();
    assert_eq!(doc.provenance["seed"], 11);
}

#[test]
fn schema_violations_exit_2_with_field_path() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cases = [
        (SMALL.replace("width = 8", "width = 8\nwidht = 9"), "fqi.widht"),
        (SMALL.replace("epochs = 5", "epochs = \"five\""), "fqi.fit.epochs"),
        (SMALL.replace("schema_version = 1", "schema_version = 7"), "schema_version"),
        (SMALL.replace("r_max = 1.0", "r_max = 1.0\ncolour = 1"), "game"),
        (SMALL.replace("gamma = 0.5", "gamma = 1.5"), "gamma"),
    ];
    for (text, needle) in cases {
        let cfg = write_config(dir.path(), "bad.toml", &text);
        let o = run_cmd("gen-game", &cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{needle}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{needle} not in {}", stderr(&o));
    }
    let cfg = write_config(dir.path(), "nofqi.toml", &SMALL.replace("[fqi]\niterations = 3\nsamples = 256\nwidth = 8\n\n[fqi.fit]\nepochs = 5\n", ""));
    let o = run_cmd("run", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("[fqi]"));
}

#[test]
fn divergence_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("epochs = 5", "epochs = 5\nlearning_rate = 1e9"));
    let o = run_cmd("run", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("fqi stage"));
}

#[test]
fn bounds_without_run_report_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let o = run_cmd("bounds", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("report.json"));
}

#[test]
fn empty_bound_list_gives_header_only_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{SMALL}\n[analysis]\nbounds = []\n"));
    let out = dir.path().join("out");
    let o = run_cmd("bounds", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("bounds_summary.csv")).unwrap(), "bound,count,hold_rate,worst_margin\n");
    assert_eq!(fs::read_to_string(out.join("bounds_suite.jsonl")).unwrap(), "");
}

#[test]
fn bounds_after_run_summarizes_run_checks() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    assert!(run_cmd("run", &cfg, &out, &[]).status.success());
    let o = run_cmd("bounds", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("bounds_summary.csv")).unwrap();
    let policy = summary.lines().find(|l| l.starts_with("policy_gap,")).expect("policy gap row");
    let cols: Vec<&str> = policy.split(',').collect();
    assert_eq!(cols[1], "3");
    assert_eq!(cols[2], "1");
}

#[test]
fn default_rademacher_suite_holds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "schema_version = 1\n[analysis]\nbounds = [\"rademacher\"]\n");
    let out = dir.path().join("out");
    let o = run_cmd("bounds", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = fs::read_to_string(out.join("bounds_suite.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["name"], "rademacher");
    assert_eq!(v["holds"], true);
    let expected = 2.0 * 4.0 * (2.0 * (6.0f64).ln() / 256.0).sqrt();
    assert!((v["rhs"].as_f64().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn config_parses_sections_and_defaults() {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    assert_eq!(cfg.seed, Some(5));
    assert!(matches!(cfg.game, Some(GameSection::Decomposable { bumps: 2, .. })));
    let fqi = cfg.fqi.unwrap();
    assert_eq!(fqi.fit.epochs, 5);
    assert_eq!(fqi.fit.batch_size, mafqi::approx::FitConfig::default().batch_size);
    let per_agent = ExperimentConfig::parse(&SMALL.replace("actions = 2", "actions = [2, 3]")).unwrap();
    let spec = per_agent.game.unwrap().spec().unwrap().unwrap();
    assert_eq!(spec.actions, vec![2, 3]);
    let a = ExperimentConfig::parse("schema_version = 1\n[analysis]\n").unwrap().analysis.unwrap();
    assert_eq!(
        a.bounds,
        vec![BoundSuite::PolicyGap, BoundSuite::CumulativeRecursion, BoundSuite::ErrorPropagation]
    );
    assert_eq!(a.delta, 0.1);
}
