use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adann_cli::report::{load_rows, FNO_PLACEHOLDER};
use adann_cli::CliConfig;
use adann_core::base_model::from_lirk_params;
use adann_core::dataset_io::split_dataset;
use adann_core::lirk::rollout;
use adann_core::training::{full_model_eval, mean_seminorm_sq};
use adann_core::{Checkpoint, Dataset, LirkParams, OdeSystem, Preset};

fn adann(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adann"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = adann(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, problem: &str, n: usize) -> PathBuf {
    let path = dir.join(format!("{problem}_{n}.adann"));
    ok(&["--seed", "7", "gen-data", "--problem", problem, "--n", &n.to_string(), "--out", s(&path)]);
    path
}

fn quick(dir: &Path) -> PathBuf {
    let p = dir.join("quick.toml");
    std::fs::write(
        &p,
        "[scale]\nstep_divisor = 1600\n[sweep.base]\neval_interval = 5\n\
         [sweep.difference]\neval_interval = 5\n[baseline.ann]\neval_interval = 5\n",
    )
    .unwrap();
    p
}

#[test]
fn gen_data_shapes() {
    let dir = tempfile::tempdir().unwrap();
    for (problem, n, fine, coarse) in [("rd1d", 16, 287, 35), ("sg1d", 16, 420, 30), ("heat2d", 4, 6400, 1600)] {
        let path = gen(dir.path(), problem, n);
        let d = Dataset::load(&path).unwrap();
        assert_eq!((d.inputs.ncols(), d.inputs.nrows()), (n, fine), "{problem}");
        assert_eq!((d.targets.ncols(), d.targets.nrows()), (n, coarse), "{problem}");
        assert!(path.with_extension("config.toml").exists());
    }
}

#[test]
fn command_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!adann(&["gen-data", "--problem", "heat3d", "--n", "4", "--out", s(&d.join("x"))]).status.success());
    assert!(!adann(&["gen-data", "--problem", "rd1d", "--n", "4", "--out", "/proc/adann/x.adann"]).status.success());
    let missing = d.join("missing.adann");
    let out = adann(&["sweep", "--problem", "rd1d", "--data", s(&missing), "--out", s(&d.join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.adann"));
    let data = gen(d, "rd1d", 32);
    assert!(!adann(&["baseline", "--problem", "rd1d", "--method", "fno", "--data", s(&data), "--out", s(&d.join("b"))]).status.success());
    // A dataset of another preset is rejected.
    assert!(!adann(&["baseline", "--problem", "sg1d", "--method", "cn", "--data", s(&data), "--out", s(&d.join("b"))]).status.success());
    std::fs::write(d.join("bad.toml"), "[sweep]\nmodes = \"grid\"\n").unwrap();
    let out = adann(&["--config", s(&d.join("bad.toml")), "baseline", "--method", "cn", "--data", s(&data), "--out", s(&d.join("b"))]);
    assert!(!out.status.success());
}

#[test]
fn report_merging() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let good = d.join("good.csv");
    std::fs::write(&good, "method;L1_error;L2_error;trainable_params;training_time;eval_time\nadann grid full;1e-4;2e-4;100;3.0;0.1\n").unwrap();
    let bad = d.join("bad.csv");
    std::fs::write(&bad, "method;L1;L2;trainable_params;training_time;eval_time\ncn M=15;1;1;0;0;0\n").unwrap();
    let out = d.join("report.csv");
    ok(&["report", "--runs", s(&good), "--out", s(&out)]);
    let rows = load_rows(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, "adann grid full");
    assert!(!adann(&["report", "--runs", s(&good), "--baselines", s(&bad), "--out", s(&out)]).status.success());
}

#[test]
fn cn_baseline_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "rd1d", 256);
    let (a, b) = (d.join("a"), d.join("b"));
    ok(&["baseline", "--problem", "rd1d", "--method", "cn", "--data", s(&data), "--out", s(&a)]);
    ok(&["baseline", "--problem", "rd1d", "--method", "cn", "--steps", "15..20", "--data", s(&data), "--out", s(&b)]);
    let ra = load_rows(&a.join("report.csv")).unwrap();
    let rb = load_rows(&b.join("report.csv")).unwrap();
    assert_eq!(ra.len(), 6);
    let names: Vec<_> = ra.iter().map(|r| r.method.clone()).collect();
    assert_eq!(names, (15..=20).map(|m| format!("cn M={m}")).collect::<Vec<_>>());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!((x.l1, x.l2, x.trainable_params), (y.l1, y.l2, y.trainable_params));
        assert_eq!(x.trainable_params, Some(0));
        assert!(x.l1.unwrap() <= x.l2.unwrap());
    }
    assert!(a.join("config.toml").exists());

    // Errors plateau at the spatial floor while the time-stepping part shrinks.
    let l2: Vec<f64> = ra.iter().map(|r| r.l2.unwrap()).collect();
    let (lo, hi) = l2.iter().fold((f64::MAX, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    assert!(hi / lo < 1.05, "{l2:?}");
    let ds = Dataset::load(&data).unwrap();
    let test = split_dataset(&ds, adann_core::dataset_io::DEFAULT_SPLIT).unwrap().test;
    let problem = Preset::Rd1d.problem();
    let op = problem.grid.laplacian().unwrap();
    let sys = OdeSystem {
        linear: &op,
        nonlinearity: problem.nonlinearity,
    };
    let fine_time = rollout(LirkParams::CRANK_NICOLSON, &sys, 1.0, 640, &test.inputs).unwrap();
    let temporal: Vec<f64> = (15..=20)
        .map(|m| {
            let u = rollout(LirkParams::CRANK_NICOLSON, &sys, 1.0, m, &test.inputs).unwrap();
            mean_seminorm_sq(&(u - &fine_time)).sqrt()
        })
        .collect();
    assert!(temporal.windows(2).all(|w| w[1] < w[0]), "{temporal:?}");
}

#[test]
fn sweep_outputs_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = quick(d);
    let data = gen(d, "rd1d", 256);
    let out = d.join("grid");
    ok(&["--config", s(&cfg), "sweep", "--problem", "rd1d", "--mode", "grid", "--data", s(&data), "--out", s(&out)]);
    for f in ["runs.csv", "actions.csv", "selection.csv", "heatmap.csv", "heatmap_init.csv", "heatmap_base.csv", "heatmap_full.csv", "checkpoint.adann", "report.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let heat = std::fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 63);
    let runs = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().next().unwrap(), "run,p1,p2,init_L2,base_L2,full_L2,epsilon,status");

    let rows = load_rows(&out.join("report.csv")).unwrap();
    assert_eq!(rows[0].method, "adann grid base-only");
    assert_eq!(rows[0].trainable_params, Some(30625));
    assert_eq!(rows[1].trainable_params, Some(30625 + 35 * 50 + 50 + 50 * 150 + 150 + 150 * 35 + 35));

    // The checkpoint reproduces the reported full-model error exactly.
    let ck = Checkpoint::load(&out.join("checkpoint.adann")).unwrap();
    let ds = Dataset::load(&data).unwrap();
    let test = split_dataset(&ds, adann_core::dataset_io::DEFAULT_SPLIT).unwrap().test;
    let f = Preset::Rd1d.problem().nonlinearity;
    let pred = full_model_eval(&ck.base, f, ck.difference.as_ref().unwrap(), ck.error_scale, &test.inputs).unwrap();
    let l2 = mean_seminorm_sq(&(pred - &test.targets)).sqrt();
    assert_eq!(Some(l2), rows[1].l2);

    // The echoed configuration loads back to the one that was used.
    let echoed = CliConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(echoed, CliConfig::load(&cfg).unwrap());

    let ad = d.join("adaptive");
    ok(&["--config", s(&cfg), "sweep", "--problem", "rd1d", "--mode", "adaptive", "--runs", "4", "--data", s(&data), "--out", s(&ad)]);
    let runs = std::fs::read_to_string(ad.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    assert!(!ad.join("heatmap.csv").exists());
    let rows = load_rows(&ad.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, "adann adaptive full");

    ok(&["--config", s(&cfg), "baseline", "--problem", "rd1d", "--method", "ann", "--data", s(&data), "--out", s(&d.join("ann"))]);
    ok(&["baseline", "--problem", "rd1d", "--method", "cn", "--data", s(&data), "--out", s(&d.join("cn"))]);
    let merged = d.join("table.csv");
    ok(&[
        "report", "--runs", s(&out.join("report.csv")), s(&ad.join("report.csv")),
        "--baselines", s(&d.join("cn/report.csv")), s(&d.join("ann/report.csv")),
        "--out", s(&merged),
    ]);
    let rows = load_rows(&merged).unwrap();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0].method, "ann");
    assert_eq!(rows[0].trainable_params, Some(35 * 100 + 100 + 100 * 220 + 220 + 220 * 150 + 150 + 150 * 35 + 35));
    assert_eq!(rows[1].method, FNO_PLACEHOLDER);
    assert!(rows[1].l2.is_none());
}

#[test]
fn rd1d_base_parameter_count() {
    let p = Preset::Rd1d;
    let op = p.problem().grid.laplacian().unwrap();
    let w = from_lirk_params(LirkParams::CRANK_NICOLSON, &op, 1.0, p.base_blocks()).unwrap();
    assert_eq!(w.param_count(), 30625);
}
