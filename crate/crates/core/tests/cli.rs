use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--synth", "default", "--synth-items", "40", "--synth-users", "50",
    "--encoder-layers", "12,6", "--mapper-hidden", "6",
    "--init-epochs", "3", "--coupled-epochs", "3", "--batch-size", "16",
];

fn cdrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrec"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("spawn cdrec")
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    cdrec(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_three_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = cdrec(&["--seed", "5", "synth", "--out", d.to_str().unwrap(), "--synth-items", "30", "--synth-users", "40"]);
        assert!(o.status.success(), "{o:?}");
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["source.csv", "target.csv", "truth.json"]);
    for f in &names {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(cdrec(&["synth"]).status.code(), Some(2));
}

#[test]
fn train_report_checkpoint_and_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = with(&["--seed", "7", "train", "--method", "cacdr", "--repeats", "3", "--out", out.to_str().unwrap()], TINY);
    let o = run(&args);
    assert!(o.status.success(), "{o:?}");
    let first = std::fs::read(out.join("report.json")).unwrap();
    let report = json(&out.join("report.json"));
    let repeats = report["repeats"].as_array().unwrap();
    assert_eq!(repeats.len(), 3);
    assert!(repeats.iter().all(|r| r["rmse"].as_f64().unwrap().is_finite()));
    assert_eq!(report["config"]["seed"], 7);
    assert_eq!(report["config"]["train"]["init"]["epochs"], 3);
    assert_eq!(report["config"]["train"]["coupled"]["lr"], 1e-5);

    let o = run(&args);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), first);

    let ckpt = out.join("checkpoint.json");
    let eval_args = with(&["--seed", "7", "--format", "json", "evaluate", "--checkpoint", ckpt.to_str().unwrap()], TINY);
    let o = run(&eval_args);
    assert!(o.status.success(), "{o:?}");
    let evaluated: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(evaluated["repeats"][0]["rmse"], repeats[0]["rmse"]);
}

#[test]
fn lfacdr_user_scenario_trains() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = with(&["train", "--method", "lfacdr", "--scenario", "users", "--repeats", "1", "--out", out.to_str().unwrap()], TINY);
    let o = run(&args);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(json(&out.join("report.json"))["config"]["scenario"], "users");
}

#[test]
fn ablate_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = run(&with(&["ablate", "--grid", "coupled", "--repeats", "2", "--out", out.to_str().unwrap()], TINY));
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    let header = text.lines().nth(1).unwrap();
    assert!(header.contains("without") && header.contains("with"), "{text}");
    assert_eq!(json(&out.join("ablation.json"))["ablation"]["cells"].as_array().unwrap().len(), 2);

    let o = run(&with(&["ablate", "--grid", "latent", "--dims", "4,6", "--repeats", "1", "--out", out.to_str().unwrap()], TINY));
    assert!(o.status.success(), "{o:?}");
    let rows = stdout(&o).lines().filter(|l| l.starts_with("k=")).count();
    assert_eq!(rows, 2);

    let o = run(&with(&["ablate", "--grid", "latent", "--dims", "8,0"], TINY));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_fails_on_fault_and_is_deterministic() {
    let ok = cdrec(&["--seed", "3", "gradcheck", "--nets", "10"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("PASS"));
    let again = cdrec(&["--seed", "3", "gradcheck", "--nets", "10"]);
    assert_eq!(stdout(&again), stdout(&ok));
    let bad = cdrec(&["--seed", "3", "gradcheck", "--nets", "10", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn exit_codes_for_numerical_and_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nan");
    let o = run(&with(&["train", "--repeats", "1", "--init-lr", "1e300", "--out", out.to_str().unwrap()], TINY));
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("cacdr init"), "{o:?}");

    let o = cdrec(&["train", "--data", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");
    let o = cdrec(&["train", "--unknown-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_then_train_on_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let mut source = String::from("user,item,rating\n");
    let mut target = String::from("user,item,rating\n");
    for i in 0..12 {
        for u in 0..10 {
            if (i + u) % 3 != 0 {
                source.push_str(&format!("su{u},item{i},{}\n", 1 + (i * u) % 5));
            }
            if (i + 2 * u) % 4 == 0 {
                target.push_str(&format!("tu{u},item{i},{}\n", 1 + (i + u) % 5));
            }
        }
    }
    std::fs::write(dir.path().join("s.csv"), source).unwrap();
    std::fs::write(dir.path().join("t.csv"), target).unwrap();
    let pair = dir.path().join("pair");
    let o = cdrec(&[
        "ingest",
        "--source", dir.path().join("s.csv").to_str().unwrap(),
        "--target", dir.path().join("t.csv").to_str().unwrap(),
        "--out", pair.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("6 shared items, source 40 ratings, target 30 ratings"), "{}", stdout(&o));

    let out = dir.path().join("run");
    let o = cdrec(&[
        "train", "--data", pair.to_str().unwrap(), "--repeats", "2",
        "--encoder-layers", "6,4", "--mapper-hidden", "4", "--init-epochs", "2",
        "--coupled-epochs", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let o = cdrec(&["train", "--data", pair.to_str().unwrap(), "--scenario", "users"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_documents_precedence() {
    let o = cdrec(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("flags, then the --config file"), "{text}");
    for cmd in ["synth", "ingest", "train", "evaluate", "ablate", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn config_file_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "synth = \"default\"\nsynth_items = 40\nsynth_users = 50\nencoder_layers = [12, 6]\nmapper_hidden = [6]\ninit_epochs = 2\ncoupled_epochs = 1\nrepeats = 2\nseed = 9\nformat = \"json\"\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = cdrec(&["--config", cfg.to_str().unwrap(), "train", "--out", out.to_str().unwrap(), "--coupled-epochs", "2"]);
    assert!(o.status.success(), "{o:?}");
    let printed: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed["config"]["seed"], 9);
    assert_eq!(printed["config"]["train"]["coupled"]["epochs"], 2);
    assert_eq!(printed["config"]["train"]["init"]["epochs"], 2);
    assert_eq!(printed["repeats"].as_array().unwrap().len(), 2);
}
