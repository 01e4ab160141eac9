use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_difflab"))
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run_in(runs: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = bin();
    cmd.arg("--runs-dir").arg(runs).args(args);
    match threads {
        Some(t) => cmd.env("LAB_THREADS", t),
        None => cmd.env_remove("LAB_THREADS"),
    };
    cmd.output().expect("spawn difflab")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(
        out.status.success(),
        "difflab failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn checksums(dir: &Path) -> BTreeMap<String, String> {
    let text = std::fs::read_to_string(dir.join("manifest.toml")).unwrap();
    let v: toml::Table = text.parse().unwrap();
    v["checksums"]
        .as_table()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap().to_string()))
        .collect()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn empty_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "empty.toml", "");
    let out = run_in(tmp.path(), &["run", cfg.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn schema_violations_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    for (body, field) in [
        ("experiment = \"oracle\"\n[oracle]\nsigma = [0.2]\n", "sigma"),
        ("experiment = \"oracle\"\n[oracle]\nhsq = [-1.0]\n", "hsq"),
        ("experiment = \"sweep\"\n[sweep]\nmask = \"after:2\"\n", "mask"),
        ("experiment = \"sample\"\n[sample]\ndataset = \"swissroll\"\n", "model"),
        ("[oracle]\nhsq = [1.0]\n", "experiment"),
    ] {
        let cfg = write(tmp.path(), "bad.toml", body);
        let out = run_in(tmp.path(), &["run", cfg.to_str().unwrap()], None);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "{body}: {err}");
        assert!(err.contains(field), "{body}: {err}");
    }
}

#[test]
fn bad_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["oracle", "--hsq", "1"], Some("zero"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_run_is_reproducible_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = repo_root().join("configs/table.toml");
    let a = run_dir(&run_in(tmp.path(), &["run", cfg.to_str().unwrap()], None));
    let b = run_dir(&run_in(tmp.path(), &["run", cfg.to_str().unwrap()], None));
    assert_ne!(a, b);
    assert_eq!(checksums(&a), checksums(&b));
    let replay = run_dir(&run_in(tmp.path(), &["run", a.join("manifest.toml").to_str().unwrap()], None));
    assert_eq!(checksums(&a), checksums(&replay));

    let l = std::fs::read_to_string(a.join("oracle_L.csv")).unwrap();
    let mut lines = l.lines();
    assert_eq!(lines.next(), Some("hsq,sigma0,case,L,r2,error"));
    let case1: Vec<f64> = lines
        .filter_map(|row| {
            let f: Vec<&str> = row.split(',').collect();
            (f[2] == "1").then(|| f[3].parse().unwrap())
        })
        .collect();
    assert_eq!(case1.len(), 4);
    for v in case1 {
        assert!((v - 0.2567).abs() < 0.02 * 0.2567, "{v}");
    }
}

#[test]
fn flags_and_config_resolve_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_dir(&run_in(
        tmp.path(),
        &["oracle", "--sigma0", "0.3", "--hsq", "0,2", "--case", "3", "--epsilon", "0.01"],
        None,
    ));
    let cfg = write(
        tmp.path(),
        "o.toml",
        "experiment = \"oracle\"\n[oracle]\nsigma0 = [0.3]\nhsq = [0.0, 2.0]\ncase = [3]\nepsilon = [0.01]\n",
    );
    let b = run_dir(&run_in(tmp.path(), &["run", cfg.to_str().unwrap()], None));
    assert_eq!(checksums(&a), checksums(&b));
}

#[test]
fn sampling_is_independent_of_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "sample", "--dataset", "gmm2d", "--steps", "200", "--batch", "3000", "--seed", "4", "--alpha", "1.5",
        "--epsilon", "0.1", "--init", "exact",
    ];
    let one = run_dir(&run_in(tmp.path(), &args, Some("1")));
    let three = run_dir(&run_in(tmp.path(), &args, Some("3")));
    assert_eq!(checksums(&one), checksums(&three));
    let text = std::fs::read_to_string(one.join("samples.csv")).unwrap();
    assert!(text.starts_with("x0,x1\n"));
    assert_eq!(text.lines().count(), 3001);
}

#[test]
fn metrics_compares_sample_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mk = |seed: &str| {
        run_dir(&run_in(
            tmp.path(),
            &["sample", "--steps", "100", "--batch", "2000", "--seed", seed, "--init", "exact"],
            None,
        ))
        .join("samples.csv")
    };
    let (a, b) = (mk("1"), mk("2"));
    let same = run_dir(&run_in(
        tmp.path(),
        &["metrics", "--a", a.to_str().unwrap(), "--b", a.to_str().unwrap()],
        None,
    ));
    let row = std::fs::read_to_string(same.join("metrics.csv")).unwrap();
    assert_eq!(row.lines().next(), Some("kl,js,w1"));
    let vals: Vec<f64> = row.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals, vec![0.0, 0.0, 0.0]);
    let diff = run_dir(&run_in(
        tmp.path(),
        &["metrics", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap()],
        None,
    ));
    let row = std::fs::read_to_string(diff.join("metrics.csv")).unwrap();
    let vals: Vec<f64> = row.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(vals.iter().all(|v| *v > 0.0 && *v < 0.2), "{vals:?}");
}

#[test]
fn train_writes_model_loss_and_sml() {
    let tmp = tempfile::tempdir().unwrap();
    let base = run_dir(&run_in(
        tmp.path(),
        &["train", "--dataset", "gmm1d", "--steps", "300", "--sml-points", "10", "--sml-eval", "500"],
        None,
    ));
    let model = base.join("model.bin");
    assert!(model.is_file());
    assert_eq!(std::fs::read_to_string(base.join("loss.csv")).unwrap().lines().count(), 301);
    let other = run_dir(&run_in(
        tmp.path(),
        &[
            "train", "--dataset", "gmm1d", "--weight", "noise", "--steps", "300", "--sml-points", "10",
            "--sml-eval", "500", "--baseline", model.to_str().unwrap(),
        ],
        None,
    ));
    let sml = std::fs::read_to_string(other.join("sml.csv")).unwrap();
    assert!(sml.starts_with("t,sml,baseline_sml,relative\n"));
    assert_eq!(sml.lines().count(), 11);
    let sampled = run_dir(&run_in(
        tmp.path(),
        &["sample", "--dataset", "gmm1d", "--model", model.to_str().unwrap(), "--steps", "100", "--batch", "500"],
        None,
    ));
    assert!(sampled.join("summary.csv").is_file());
}

#[test]
fn fpsolve_reports_defect_and_tail() {
    let tmp = tempfile::tempdir().unwrap();
    let d = run_dir(&run_in(
        tmp.path(),
        &["fpsolve", "--hsq", "5", "--grid-n", "400", "--dt", "0.002"],
        None,
    ));
    let text = std::fs::read_to_string(d.join("fpsolve.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("hsq,L,tail_mass,defect,dt,converged,v_mass,error"));
    let f: Vec<&str> = lines.next().unwrap().split(',').collect();
    let l: f64 = f[1].parse().unwrap();
    // ((1 + h^2) / h^2)^2 / 4 at h^2 = 5
    assert!((l - 0.36).abs() < 0.01 * 0.36, "{l}");
    assert!(f[3].parse::<f64>().unwrap() < 1e-6);
}

#[test]
fn partial_failures_become_error_rows() {
    let tmp = tempfile::tempdir().unwrap();
    // a 400-cell grid far too narrow for sigma0 = 3 leaks mass at the boundary
    let d = run_dir(&run_in(
        tmp.path(),
        &["fpsolve", "--hsq", "1,2", "--sigma0", "3", "--grid-R", "3", "--grid-n", "400"],
        None,
    ));
    let text = std::fs::read_to_string(d.join("fpsolve.csv")).unwrap();
    assert!(text.lines().skip(1).all(|r| r.contains("domain too small")), "{text}");
}

#[test]
fn fig1a_config_reproduces_golden_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = repo_root().join("configs/fig1a.toml");
    let d = run_dir(&run_in(tmp.path(), &["run", cfg.to_str().unwrap()], None));
    let got = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let want = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/fig1a_sweep.csv")).unwrap();
    assert_eq!(got, want);
    let svg = std::fs::read_to_string(d.join("sweep_L.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("pde s0=0.5"));
}
