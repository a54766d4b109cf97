use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfgflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_run(out: &Path) -> Output {
    mfgflow(&[
        "mfg",
        "--preset",
        "ot8gauss",
        "--dim",
        "2",
        "--seed",
        "7",
        "--iterations",
        "12",
        "--set",
        "train.eval_interval=4",
        "--set",
        "flow.hidden=8",
        "--trajectories",
        "5",
        "--no-timing",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn mfg_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let o = tiny_run(d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let run = "ot8gauss-seed7";
    for f in ["cost.csv", "trajectory.csv", "density.csv", "config.txt", "manifest.json", "checkpoint.json"] {
        let x = fs::read(a.path().join(run).join(f)).unwrap();
        let y = fs::read(b.path().join(run).join(f)).unwrap();
        assert_eq!(x, y, "{} differs between identical runs", f);
    }

    let cost = fs::read_to_string(a.path().join(run).join("cost.csv")).unwrap();
    assert!(cost.starts_with("iteration,L,I,M,total,wall_ms\n"));
    let traj = fs::read_to_string(a.path().join(run).join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("sample_id,step,x1,x2\n"));
    // 5 samples x (K + 1) states.
    assert_eq!(traj.lines().count(), 1 + 5 * 11);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join(run).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["iterations_completed"], 12);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["config"].as_array().unwrap().iter().any(|l| l == "flow.hidden=8"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny\nrun.preset=ot8gauss\ntrain.iterations=3\nflow.hidden=4\ntrain.seed=3\n").unwrap();
    let o = mfgflow(&[
        "mfg",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--no-timing",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = fs::read_to_string(dir.path().join("ot8gauss-seed5/config.txt")).unwrap();
    assert!(echoed.contains("train.seed=5"));
    assert!(echoed.contains("train.iterations=3"));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mfgflow"))
        .args(["mfg", "--preset", "crowd", "--iterations", "2", "--set", "flow.hidden=4", "--no-timing"])
        .env("MFGFLOW_OUT_DIR", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("crowd-seed0/manifest.json").exists());
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_run(dir.path());
    assert!(o.status.success());
    let ck = dir.path().join("ot8gauss-seed7/checkpoint.json");
    let moved = dir.path().join("start.json");
    fs::rename(&ck, &moved).unwrap();
    let o = mfgflow(&[
        "mfg",
        "--preset",
        "ot8gauss",
        "--seed",
        "7",
        "--iterations",
        "16",
        "--set",
        "flow.hidden=8",
        "--no-timing",
        "--resume",
        moved.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(dir.path().join("ot8gauss-seed7/manifest.json")).unwrap();
    assert!(manifest.contains("\"iterations_completed\": 16"));
}

#[test]
fn lipschitz_and_plot_from_a_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(tiny_run(dir.path()).status.success());
    let run = dir.path().join("ot8gauss-seed7");
    let o = mfgflow(&["lipschitz", "--checkpoint", run.join("checkpoint.json").to_str().unwrap(), "--points", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lip = fs::read_to_string(run.join("lipschitz.csv")).unwrap();
    assert!(lip.starts_with("epoch,layer,bound,product\n"));
    // couplings, folded permutations and linear layers each get a row
    assert!(lip.lines().count() > 1 + 10);

    let svg = dir.path().join("t.svg");
    let (traj, dens) = (run.join("trajectory.csv"), run.join("density.csv"));
    let args = [
        "plot",
        traj.to_str().unwrap(),
        dens.to_str().unwrap(),
        "-o",
        svg.to_str().unwrap(),
    ];
    assert!(mfgflow(&args).status.success());
    let first = fs::read(&svg).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with("<svg"));
    assert!(mfgflow(&args).status.success());
    assert_eq!(first, fs::read(&svg).unwrap(), "plot is not deterministic");
}

#[test]
fn oracle_kkt_prints_equal_spacing() {
    let o = mfgflow(&["oracle", "--mode", "kkt", "--k", "3", "--z", "0,0", "--endpoint", "3,0"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "row,k,x1,x2\n0,1,1,0\n0,2,2,0\n");
}

#[test]
fn oracle_exact_on_csv_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("s.csv"), dir.path().join("t.csv"));
    fs::write(&s, "x1,x2\n0,0\n10,0\n").unwrap();
    fs::write(&t, "x1,x2\n10,1\n0,1\n").unwrap();
    let o = mfgflow(&["oracle", "--mode", "exact", "--source", s.to_str().unwrap(), "--target", t.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "source,target,sqdist\n0,1,1\n1,0,1\n");
}

#[test]
fn oracle_infeasible_input_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("s.csv"), dir.path().join("t.csv"));
    fs::write(&s, "x1,x2\n0,0\n1,0\n").unwrap();
    fs::write(&t, "x1,x2\n0,0\n").unwrap();
    let o = mfgflow(&["oracle", "--mode", "exact", "--source", s.to_str().unwrap(), "--target", t.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(mfgflow(&["mfg", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(mfgflow(&["mfg", "--preset", "ot8gauss", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(mfgflow(&["mfg", "--preset", "ot8gauss", "--set", "train.lr=abc"]).status.code(), Some(2));
    assert_eq!(mfgflow(&["nf", "--preset", "ot8gauss"]).status.code(), Some(2));
    assert_eq!(mfgflow(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfgflow(&[
        "mfg",
        "--preset",
        "ot8gauss",
        "--iterations",
        "40",
        "--set",
        "train.lr=1e6",
        "--set",
        "train.clip_norm=none",
        "--set",
        "flow.coupling=affine",
        "--set",
        "flow.hidden=4",
        "--no-timing",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes() {
    let o = mfgflow(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("gradient checks passed"));
}

#[test]
fn probe_reports_orders() {
    let o = mfgflow(&["probe", "--probe", "quadratic", "--ks", "4,8,16"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "probe,K,discrete,continuous,error,order");
    assert_eq!(rows.len(), 4);
}

#[test]
fn nf_tiny_run_writes_lipschitz_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfgflow(&[
        "nf",
        "--preset",
        "nf-synthetic",
        "--dataset",
        "two-gauss",
        "--set",
        "nf.rows=300",
        "--set",
        "nf.epochs=2",
        "--set",
        "nf.lipschitz_points=16",
        "--set",
        "flow.hidden=8",
        "--no-timing",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let cost = fs::read_to_string(run.join("cost.csv")).unwrap();
    assert!(cost.starts_with("epoch,iteration,train_loss,train_nll,transport,val_nll,test_nll,wall_ms\n"));
    assert!(run.join("lipschitz.csv").exists());
    assert!(run.join("manifest.json").exists());
}
