use std::path::{Path, PathBuf};
use std::process::Command;

use bdctm::data::{read_csv, ColumnSpec, Schema};
use bdctm::sampler::NutsConfig;
use bdctm::synthetic::{archetype, Archetype};
use bdctm::{Dataset, ModelSpec};
use bdctm_cli::artifacts::{summarize, DrawTable, FitArtifacts, Summary};
use bdctm_cli::commands::{diagnose, fit, predict, simulate, DiagnoseArgs, FitArgs, PredictArgs, SimulateArgs};
use bdctm_cli::CliError;

fn sampler(iterations: usize, burnin: usize, seed: u64) -> NutsConfig {
    NutsConfig {
        iterations,
        burnin,
        warmup: burnin,
        seed,
        ..NutsConfig::default()
    }
}

fn write_inputs(dir: &Path, spec: &ModelSpec, data: &Dataset, sampler: &NutsConfig) {
    let config = serde_json::json!({
        "response": spec.response,
        "terms": spec.terms,
        "sampler": sampler,
    });
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    let mut csv = Vec::new();
    data.write_csv(&mut csv).unwrap();
    std::fs::write(dir.join("data.csv"), csv).unwrap();
}

fn fit_args(dir: &Path, out: &str) -> FitArgs {
    FitArgs {
        config: dir.join("config.json"),
        data: dir.join("data.csv"),
        out: dir.join(out),
        seed: None,
        chains: None,
    }
}

fn data_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

fn schema(cols: &[(&str, ColumnSpec)]) -> Schema {
    Schema {
        columns: cols.iter().map(|(n, s)| (n.to_string(), s.clone())).collect(),
    }
}

#[test]
fn ingest_examples() {
    let counts = schema(&[("y", ColumnSpec::Count)]);
    let data = read_csv("y\n0\n5\n2\n".as_bytes(), &counts).unwrap();
    assert_eq!(data.n(), 3);
    assert_eq!(data.counts("y").unwrap(), &[0, 5, 2]);

    let err = CliError::from(read_csv("y\n0\n-1\n".as_bytes(), &counts).unwrap_err());
    assert_eq!(err.exit_code(), 3);
    let message = err.to_string();
    assert!(message.contains("row 2") && message.contains("\"y\""), "{message}");

    let grades = schema(&[(
        "grade",
        ColumnSpec::Ordinal {
            levels: vec!["no".into(), "weak".into(), "severe".into()],
        },
    )]);
    let data = read_csv("grade\nno\nweak\nsevere\n".as_bytes(), &grades).unwrap();
    assert_eq!(data.ordinal("grade").unwrap(), &[1, 2, 3]);
}

#[test]
fn protocol_sized_fit_writes_one_row_per_retained_draw() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, data) = archetype(Archetype::ShiftCount, 250, 1);
    write_inputs(dir.path(), &spec, &data, &sampler(2000, 1000, 3));
    let args = fit_args(dir.path(), "out");
    let manifest = fit(&args).unwrap();
    assert_eq!(data_rows(&args.out.join("draws.csv")), 1000);
    assert_eq!(manifest.outputs.len(), 3);
    assert_eq!(manifest.seed, 3);

    // draws reload to the summary statistics
    let summary: Summary = serde_json::from_slice(&std::fs::read(args.out.join("summary.json")).unwrap()).unwrap();
    let table = DrawTable::read(&args.out.join("draws.csv")).unwrap();
    let again = summarize(&table);
    assert_eq!(summary.parameters.len(), again.len());
    for (a, b) in summary.parameters.iter().zip(&again) {
        assert_eq!(a.name, b.name);
        for (x, y) in [(a.mean, b.mean), (a.sd, b.sd), (a.q2_5, b.q2_5), (a.q97_5, b.q97_5)] {
            assert!((x - y).abs() <= 1e-12, "{}: {x} vs {y}", a.name);
        }
    }
    assert!(summary.waic.is_some());
    assert!(table.columns.iter().any(|c| c.starts_with("tau2:")));

    // diagnose writes a rootogram with the documented columns
    let out = dir.path().join("diag");
    diagnose(&DiagnoseArgs {
        manifest: args.out.join("manifest.json"),
        data: dir.path().join("data.csv"),
        out: out.clone(),
        r_max: None,
        seed: None,
    })
    .unwrap();
    let mut rdr = csv::Reader::from_path(out.join("rootogram.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["r", "obs", "exp"]);
    let observed: f64 = rdr.records().map(|r| r.unwrap()[1].parse::<f64>().unwrap()).sum();
    assert_eq!(observed, 250.0);
    assert_eq!(data_rows(&out.join("residuals.csv")), 250);
}

#[test]
fn long_run_fit_keeps_iterations_minus_burnin() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, data) = archetype(Archetype::ProportionalOrdinal, 80, 2);
    write_inputs(dir.path(), &spec, &data, &sampler(10_000, 1000, 5));
    let args = fit_args(dir.path(), "out");
    fit(&args).unwrap();
    assert_eq!(data_rows(&args.out.join("draws.csv")), 9000);
}

#[test]
fn ordinal_predictions_sum_to_one_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, data) = archetype(Archetype::NonProportionalOrdinal, 120, 4);
    write_inputs(dir.path(), &spec, &data, &sampler(300, 150, 8));
    let first = fit_args(dir.path(), "a");
    let second = fit_args(dir.path(), "b");
    fit(&first).unwrap();
    fit(&second).unwrap();
    for file in ["draws.csv", "summary.json", "model.json"] {
        assert_eq!(
            std::fs::read(first.out.join(file)).unwrap(),
            std::fs::read(second.out.join(file)).unwrap(),
            "{file}"
        );
    }

    let out = dir.path().join("pred");
    let path = predict(&PredictArgs {
        manifest: first.out.join("manifest.json"),
        data: dir.path().join("data.csv"),
        out,
        ys: None,
    })
    .unwrap();
    let mut sums = vec![0.0; 120];
    let mut rdr = csv::Reader::from_path(path).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let row: usize = rec[0].parse().unwrap();
        sums[row] += rec[3].parse::<f64>().unwrap();
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }
}

#[test]
fn seed_and_chain_overrides_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, data) = archetype(Archetype::ShiftCount, 60, 3);
    write_inputs(dir.path(), &spec, &data, &sampler(120, 60, 1));
    let mut args = fit_args(dir.path(), "out");
    args.seed = Some(42);
    args.chains = Some(2);
    let manifest = fit(&args).unwrap();
    assert_eq!((manifest.seed, manifest.chains), (42, 2));
    let table = DrawTable::read(&args.out.join("draws.csv")).unwrap();
    assert_eq!(table.len(), 120);
    assert_eq!(table.chain.iter().filter(|&&c| c == 1).count(), 60);
}

#[test]
fn tampered_or_foreign_artifacts_are_stale() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, data) = archetype(Archetype::ShiftCount, 50, 6);
    write_inputs(dir.path(), &spec, &data, &sampler(60, 30, 1));
    let args = fit_args(dir.path(), "out");
    fit(&args).unwrap();
    let manifest_path = args.out.join("manifest.json");
    FitArtifacts::load(&manifest_path).unwrap();

    let draws = args.out.join("draws.csv");
    let mut bytes = std::fs::read(&draws).unwrap();
    bytes.extend_from_slice(b"0,99,1\n");
    std::fs::write(&draws, bytes).unwrap();
    let err = FitArtifacts::load(&manifest_path).unwrap_err();
    assert!(matches!(err, CliError::Stale(_)), "{err}");
    assert_eq!(err.exit_code(), 2);

    let mut manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    manifest["version"] = "0.0.0-old".into();
    std::fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let err = FitArtifacts::load(&manifest_path).unwrap_err();
    assert!(err.to_string().contains("0.0.0-old"), "{err}");
}

#[test]
fn simulate_two_replications_gives_fifty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "replications": 5,
        "n_train": 40,
        "n_test": 20,
        "seed": 3,
        "sampler": {"iterations": 60, "burnin": 30, "warmup": 30},
    });
    std::fs::write(dir.path().join("exp.json"), config.to_string()).unwrap();
    let out = dir.path().join("sim");
    let manifest = simulate(&SimulateArgs {
        config: dir.path().join("exp.json"),
        out: out.clone(),
        seed: None,
        replications: Some(2),
        chains: None,
    })
    .unwrap();
    assert_eq!(manifest.command, "simulate");
    let mut rdr = csv::Reader::from_path(out.join("results.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().take(6).collect::<Vec<_>>(),
        ["replication", "dgp", "model", "centered_oos_loglik", "runtime_s", "divergences"]
    );
    assert_eq!(rdr.records().count(), 50);
}

fn bdctm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bdctm"))
}

fn status_of(cmd: &mut Command) -> i32 {
    cmd.env("RUST_LOG", "off").output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, data) = archetype(Archetype::ShiftCount, 40, 2);
    write_inputs(dir.path(), &spec, &data, &sampler(40, 20, 1));
    let p = |name: &str| -> PathBuf { dir.path().join(name) };

    std::fs::write(p("bad.json"), r#"{"response": {"kind": "count", "column": "y"}, "terms": [{"kind": "spline"}]}"#).unwrap();
    let code = status_of(bdctm().args(["fit", "--config"]).arg(p("bad.json")).arg("--data").arg(p("data.csv")).arg("--out").arg(p("o1")));
    assert_eq!(code, 2);

    std::fs::write(p("nodata.csv"), "y,w\n1,0.5\n").unwrap();
    let code = status_of(bdctm().args(["fit", "--config"]).arg(p("config.json")).arg("--data").arg(p("nodata.csv")).arg("--out").arg(p("o2")));
    assert_eq!(code, 3);

    let code = status_of(
        bdctm()
            .args(["--threads", "1", "fit", "--config"])
            .arg(p("config.json"))
            .arg("--data")
            .arg(p("data.csv"))
            .arg("--out")
            .arg(p("o3")),
    );
    assert_eq!(code, 0);
    assert!(p("o3").join("manifest.json").exists());

    assert_eq!(CliError::from(bdctm::Error::Initialization("x".into())).exit_code(), 4);
    assert_eq!(
        CliError::from(bdctm::Error::Convergence {
            iterations: 1,
            message: String::new()
        })
        .exit_code(),
        4
    );
}
