//! End-to-end runs of the command-line surface on a small space: build a
//! table, search, derive, evaluate, plan, train, export metrics, and run a
//! tiny ablation grid.

use std::path::Path;
use std::process::Command;

fn tfnas() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfnas"))
}

fn write_micro_config(path: &Path) {
    let config = serde_json::json!({
        "stages": [
            {
                "index": 1,
                "channels_in": 4, "channels_out": 6,
                "max_layers": 2, "min_layers": 1,
                "activation": "relu", "searchable": true,
                "resolution_factor": 2.0
            },
            {
                "index": 2,
                "channels_in": 6, "channels_out": 8,
                "max_layers": 1, "min_layers": 1,
                "activation": "swish", "searchable": true,
                "resolution_factor": 1.0
            }
        ],
        "ops": [
            {
                "name": "k3_e3", "kernel_tag": 3, "expansion_init": 3.0,
                "expansion_interval": [2.0, 4.0], "se_expansion": 0.0
            },
            {
                "name": "k5_e3_se1", "kernel_tag": 5, "expansion_init": 3.0,
                "expansion_interval": [2.0, 4.0], "se_expansion": 1.0
            }
        ],
        "class_count": 3,
        "input_dim": 6,
        "seed": 5
    });
    std::fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn tfnas");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let lut = dir.path().join("lut.json");
    let arch = dir.path().join("arch.json");
    let metrics = dir.path().join("metrics.csv");
    let run_dir = dir.path().join("run");
    write_micro_config(&config);

    // lut build
    let out = run_ok(tfnas().args([
        "lut",
        "build",
        "--config",
        config.to_str().unwrap(),
        "--mode",
        "synthetic",
        "--stride",
        "1",
        "--out",
        lut.to_str().unwrap(),
    ]));
    assert!(out.contains("signatures"));
    let table = tfnas::latmodel::lut_load(&lut).unwrap();
    assert!(!table.entries.is_empty());

    // search
    let out = run_ok(tfnas().args([
        "search",
        "--config",
        config.to_str().unwrap(),
        "--lut",
        lut.to_str().unwrap(),
        "--objective",
        "ours",
        "--target-ms",
        "14.0",
        "--lambda1",
        "0.1",
        "--epochs",
        "6",
        "--warmup",
        "2",
        "--seed",
        "1",
        "--second-path",
        "random",
        "--depth-space",
        "sink",
        "--metrics-out",
        metrics.to_str().unwrap(),
        "--arch-out",
        arch.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
    ]));
    assert!(out.contains("search finished"));
    assert!(run_dir.join("state.json").exists());
    assert!(run_dir.join("metrics.json").exists());

    // metrics CSV: header + one row per epoch
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().next().unwrap().starts_with("# epoch,tau,"));

    // derive from the saved state reproduces the exported architecture
    let derived = dir.path().join("derived.json");
    run_ok(tfnas().args([
        "derive",
        "--state",
        run_dir.to_str().unwrap(),
        "--out",
        derived.to_str().unwrap(),
    ]));
    let a = tfnas::derive::import_arch(&arch).unwrap();
    let b = tfnas::derive::import_arch(&derived).unwrap();
    assert_eq!(a, b);

    // eval reports latency / cost / params
    let out = run_ok(tfnas().args([
        "eval",
        "--arch",
        arch.to_str().unwrap(),
        "--lut",
        lut.to_str().unwrap(),
    ]));
    let eval: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(eval["latency_ms"].as_f64().unwrap() > 0.0);
    assert!(eval["param_count"].as_u64().unwrap() > 0);

    // plan: standalone elasticity-scaling on the exported arch
    let out = run_ok(tfnas().args([
        "plan",
        "--arch",
        arch.to_str().unwrap(),
        "--lut",
        lut.to_str().unwrap(),
        "--target-ms",
        "13.0",
    ]));
    let plan: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(plan["final_latency_ms"].as_f64().unwrap() <= 13.0 + 1e-9);
    assert!(plan["passes"].as_array().unwrap().len() >= 2);

    // metrics export from the run dir matches the search's own CSV
    let exported = dir.path().join("exported.csv");
    run_ok(tfnas().args([
        "metrics",
        "export",
        "--run",
        run_dir.to_str().unwrap(),
        "--out",
        exported.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read_to_string(&metrics).unwrap(),
        std::fs::read_to_string(&exported).unwrap()
    );

    // train from scratch on a small data spec
    let data_spec = dir.path().join("data.json");
    std::fs::write(
        &data_spec,
        serde_json::json!({
            "class_count": 3,
            "input_dim": 6,
            "samples_per_class": 40,
            "cluster_spread": 0.4,
            "seed": 2
        })
        .to_string(),
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let out = run_ok(tfnas().args([
        "train",
        "--arch",
        arch.to_str().unwrap(),
        "--data-spec",
        data_spec.to_str().unwrap(),
        "--epochs",
        "5",
        "--seed",
        "3",
        "--report",
        report.to_str().unwrap(),
    ]));
    assert!(out.contains("accuracy"));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let acc = rep["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn ablation_grid_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let lut = dir.path().join("lut.json");
    write_micro_config(&config);
    run_ok(tfnas().args([
        "lut",
        "build",
        "--config",
        config.to_str().unwrap(),
        "--stride",
        "1",
        "--out",
        lut.to_str().unwrap(),
    ]));
    let out_dir = dir.path().join("ablate");
    run_ok(tfnas().args([
        "ablate",
        "--axis",
        "elastic_on_off",
        "--values",
        "on,off",
        "--seeds",
        "1,2",
        "--config",
        config.to_str().unwrap(),
        "--lut",
        lut.to_str().unwrap(),
        "--target-ms",
        "14.0",
        "--epochs",
        "5",
        "--warmup",
        "2",
        "--eval-epochs",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(out_dir.join("ablation-elastic_on_off.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5); // header + 2 values x 2 seeds
    assert!(lines.iter().skip(1).all(|l| l.ends_with("ok")));

    // identical flags column within a value
    let flags_on: Vec<&str> = lines[1..3]
        .iter()
        .map(|l| l.split(',').nth(6).unwrap())
        .collect();
    assert_eq!(flags_on[0], flags_on[1]);
}
