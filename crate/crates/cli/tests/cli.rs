use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use telab::demand::{DemandMatrix, DemandSequence};
use telab::lp::solve_optimal_umax;
use telab_cli::{RunConfig, CONFIG_FILE, VERSION_FILE};

const TWO_PATH: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<graphml xmlns="http://graphml.graphdrawing.org/xmlns">
  <graph edgedefault="undirected">
    <node id="s"/><node id="m"/><node id="t"/>
    <edge source="s" target="t"/>
    <edge source="s" target="m"/>
    <edge source="m" target="t"/>
  </graph>
</graphml>
"#;

/// Small data settings so every command runs in a few seconds.
const SMALL: [&str; 5] = [
    "env.memory_length=2",
    "env.sequence_length=8",
    "env.cycle_length=2",
    "env.train_sequences=2",
    "env.test_sequences=1",
];

fn telab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_telab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_args<'a>(base: &[&'a str]) -> Vec<&'a str> {
    let mut args = base.to_vec();
    for o in SMALL {
        args.extend(["--override", o]);
    }
    args
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_two_path(dir: &Path) -> PathBuf {
    let path = dir.join("twopath.graphml");
    fs::write(&path, TWO_PATH).unwrap();
    path
}

fn write_sequence(dir: &Path, matrices: Vec<DemandMatrix<f64>>) -> PathBuf {
    let path = dir.join("seq.json");
    let seq = DemandSequence::new(matrices, 1).unwrap();
    fs::write(&path, seq.to_json().unwrap()).unwrap();
    path
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn gen_demands_writes_seven_three_split_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&telab(&[
            "gen-demands",
            "--seed",
            "3",
            "--override",
            "demand_seed=9",
            "--out",
            s(dir),
        ]));
    }
    let index: serde_json::Value = serde_json::from_str(&read(a.join("index.json"))).unwrap();
    assert_eq!(index["train"].as_array().unwrap().len(), 7);
    assert_eq!(index["test"].as_array().unwrap().len(), 3);
    let files: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("seq_"))
        .collect();
    assert_eq!(files.len(), 10);
    for f in files.iter().chain([&"index.json".to_string()]) {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let seq = DemandSequence::<f64>::from_json(&read(a.join("seq_00.json"))).unwrap();
    assert_eq!((seq.len(), seq.cycle_length, seq.v_count()), (60, 10, 11));
    assert!(read(a.join(VERSION_FILE)).starts_with("telab "));
    let resolved = RunConfig::from_toml(&read(a.join(CONFIG_FILE))).unwrap();
    assert_eq!((resolved.seed, resolved.demand_seed), (3, 9));
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let short = telab(&[
        "train",
        "--out",
        s(&out),
        "--override",
        "env.memory_length=5",
        "--override",
        "env.sequence_length=4",
    ]);
    assert_eq!(short.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&short.stderr).contains("sequence_length"));
    assert!(
        !out.exists(),
        "validation must fail before any output is written"
    );

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[ppo]\nlearning_rte = 0.1\n").unwrap();
    let unknown = telab(&["gen-demands", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("learning_rte"));

    let policy = telab(&["gen-demands", "--policy", "transformer", "--out", s(&out)]);
    assert_eq!(policy.status.code(), Some(2));
}

#[test]
fn solve_matches_the_oracle_and_known_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let topo = write_two_path(tmp.path());
    let flow =
        |d: f64| DemandMatrix::from_fn(3, |i, j| if (i, j) == (0, 2) { d } else { 0.0 }).unwrap();
    let matrices = vec![flow(1.0), DemandMatrix::zeros(3), flow(0.25)];
    let seq = write_sequence(tmp.path(), matrices.clone());
    let out = tmp.path().join("solve");
    ok(&telab(&[
        "solve",
        "--topology",
        s(&topo),
        "--demands",
        s(&seq),
        "--lp-dump",
        "--out",
        s(&out),
    ]));
    let mut reader = csv::Reader::from_path(out.join("solve.csv")).unwrap();
    let rows: Vec<(usize, f64)> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!((rows[0].1 - 0.5).abs() < 1e-9);
    assert_eq!(rows[1].1, 0.0);

    let cfg = RunConfig {
        topology: telab_cli::TopologyConfig {
            source: s(&topo).into(),
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let (_, net) = cfg.network().unwrap();
    for ((_, u), dm) in rows.iter().zip(&matrices) {
        assert_eq!(*u, solve_optimal_umax(&net, dm).unwrap().u_max_optimal);
    }
    assert!(read(out.join("lp").join("matrix_000.lp")).contains("Minimize"));
}

#[test]
fn route_reports_loads_for_fixed_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let topo = write_two_path(tmp.path());
    let dm = DemandMatrix::from_fn(3, |i, j| if (i, j) == (0, 2) { 1.0 } else { 0.0 }).unwrap();
    let seq = write_sequence(tmp.path(), vec![dm]);
    // edges sorted by (tail, head): 0->1, 0->2, 1->0, 1->2, 2->0, 2->1
    let weights = tmp.path().join("w.json");
    fs::write(&weights, "[1.0, 2.0, 1.0, 1.0, 1.0, 1.0]").unwrap();
    let out = tmp.path().join("route");
    ok(&telab(&[
        "route",
        "--topology",
        s(&topo),
        "--weights",
        s(&weights),
        "--demands",
        s(&seq),
        "--gamma",
        "3",
        "--out",
        s(&out),
    ]));
    let summary = read(out.join("route_summary.csv"));
    let line: Vec<f64> = summary
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    // equal path costs split evenly, which is optimal
    assert!((line[1] - 0.5).abs() < 1e-12);
    assert!((line[3] - 1.0).abs() < 1e-9);
    assert_eq!(read(out.join("route.csv")).lines().count(), 7);

    fs::write(&weights, "[1.0, 2.0]").unwrap();
    let bad = telab(&[
        "route",
        "--topology",
        s(&topo),
        "--weights",
        s(&weights),
        "--demands",
        s(&seq),
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_eval_compare_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let eval = tmp.path().join("eval");
    ok(&telab(&small_args(&["gen-demands", "--out", s(&data)])));
    let mut train = small_args(&[
        "train",
        "--demands",
        s(&data),
        "--out",
        s(&run),
        "--seed",
        "4",
    ]);
    train.extend([
        "--override",
        "ppo.steps_total=24",
        "--override",
        "ppo.rollout_length=12",
        "--override",
        "ppo.minibatch_size=6",
        "--override",
        "model.gnn.latent=4",
        "--override",
        "model.gnn.core_hidden=[4]",
        "--override",
        "checkpoint_every=1",
    ]);
    ok(&telab(&train));
    let metrics = read(run.join("metrics.csv"));
    assert!(metrics.starts_with("update,step,mean_episode_reward,mean_ratio,"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(run
        .join("checkpoints/update_00002/policy.params.bin")
        .exists());
    assert!(run.join("policy/policy.policy.json").exists());

    let policy_dir = run.join("policy");
    ok(&telab(&small_args(&[
        "eval",
        "--checkpoint",
        s(&policy_dir),
        "--demands",
        s(&data),
        "--out",
        s(&eval),
    ])));
    let csv = read(eval.join("eval.csv"));
    assert_eq!(
        csv.lines().next().unwrap(),
        "policy,topology,sequence_id,mean_ratio,shortest_path_ratio"
    );
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("gnn,Abilene,2,"));

    let other = tmp.path().join("other.csv");
    fs::write(&other, "policy,topology,sequence_id,mean_ratio,shortest_path_ratio\nmlp,Abilene,2,1.5,1.25\nmlp,Abilene,3,1.0,1.25\n").unwrap();
    let inputs = [eval.join("eval.csv"), other.clone()];
    let (c1, c2) = (tmp.path().join("c1"), tmp.path().join("c2"));
    for out in [&c1, &c2] {
        ok(&telab(&[
            "compare",
            s(&inputs[0]),
            s(&inputs[1]),
            "--out",
            s(out),
        ]));
    }
    let merged = read(c1.join("compare.csv"));
    assert_eq!(merged, read(c2.join("compare.csv")));
    let lines: Vec<&str> = merged.lines().collect();
    assert_eq!(
        lines[0],
        "policy,topology,sequences,mean_ratio,shortest_path_ratio"
    );
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2], "mlp,Abilene,2,1.25,1.25");

    let broken = tmp.path().join("broken.csv");
    fs::write(
        &broken,
        "policy,topology,sequence_id,shortest_path_ratio\ngnn,A,0,1.0\n",
    )
    .unwrap();
    let err = telab(&["compare", s(&other), s(&broken), "--out", s(&c1)]);
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).contains("\"mean_ratio\""));
}

#[test]
fn overrides_reach_nested_keys_and_reject_unknown_ones() {
    let mut cfg = RunConfig::default();
    cfg.apply_override("ppo.learning_rate=1e-4").unwrap();
    cfg.apply_override("model.gnn.core_hidden=[8, 8]").unwrap();
    cfg.apply_override("policy=gnn-iter").unwrap();
    cfg.apply_override("topology.perturb.add_edges=2").unwrap();
    assert_eq!(cfg.ppo.learning_rate, 1e-4);
    assert_eq!(cfg.model.gnn.core_hidden, vec![8, 8]);
    assert_eq!(cfg.policy, telab::policy::PolicyKind::Iterative);
    assert_eq!(cfg.topology.perturb.unwrap().add_edges, 2);
    assert!(cfg.apply_override("ppo.nonsense=1").is_err());
    assert!(cfg.apply_override("seed").is_err());
    let round = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(round, cfg);
}
