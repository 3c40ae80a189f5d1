mod common;

use std::fs;

use common::{graspbench, records_with_outcomes, s, toy_dir, EASY_AMB};
use graspbench_cli::commands::read_records;
use graspbench_core::dataset::{load_scene, save_scene, scene_to_json};

#[test]
fn ingest_reports_valid_cyclic_and_empty_dirs() {
    let toy = toy_dir().join("scenes");
    let ok = graspbench(&["ingest", "--scenes", s(&toy)]);
    assert_eq!(ok.code, 0, "{}", ok.stderr);
    assert!(ok.stdout.ends_with("40 scenes OK\n"), "{}", ok.stdout);

    let dir = tempfile::tempdir().unwrap();
    let empty = graspbench(&["ingest", "--scenes", s(dir.path())]);
    assert_eq!(empty.code, 1);
    assert!(empty.stdout.contains("0 scenes"));

    // one good scene plus one whose occlusion edges form a cycle
    fs::copy(toy.join("toy_000.json"), dir.path().join("a.json")).unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(toy.join("toy_001.json")).unwrap()).unwrap();
    v["occlusion"] = serde_json::json!([
        {"occluder": 0, "occluded": 1, "fraction": 0.2},
        {"occluder": 1, "occluded": 0, "fraction": 0.3}
    ]);
    fs::write(dir.path().join("b.json"), v.to_string()).unwrap();
    let bad = graspbench(&["ingest", "--scenes", s(dir.path())]);
    assert_eq!(bad.code, 1);
    assert!(bad.stdout.contains("cycle through objects [0, 1]"), "{}", bad.stdout);
    assert!(bad.stdout.contains("1 scenes OK, 1 invalid"));
}

#[test]
fn generate_counts_and_insufficient_pool() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    let toy = toy_dir();
    let out = graspbench(&["generate", "--scenes", s(&toy.join("scenes")), "--per-cell", "2", "--out", s(&manifest)]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(out.stdout.starts_with("12 scenarios"), "{}", out.stdout);
    let set: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(set["scenarios"].as_array().unwrap().len(), 12);

    let out = graspbench(&["generate", "--scenes", s(&toy.join("scenes")), "--per-cell", "500", "--out", s(&manifest)]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("eligible (scene, target) pairs, 500 required"), "{}", out.stderr);
}

#[test]
fn eval_is_reproducible_across_runs_and_workers() {
    let toy = toy_dir();
    let dir = tempfile::tempdir().unwrap();
    let config = toy.join("config.toml");
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "8", "8"].iter().enumerate() {
        let out_dir = dir.path().join(format!("run{i}"));
        let out = graspbench(&["eval", "--config", s(&config), "--out", s(&out_dir), "--workers", workers]);
        assert_eq!(out.code, 0, "{}", out.stderr);
        outputs.push((fs::read(out_dir.join("results.jsonl")).unwrap(), fs::read(out_dir.join("run.json")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0].0 == w[1].0));
    let records = read_records(&dir.path().join("run0/results.jsonl")).unwrap();
    assert_eq!(records.len(), 3 * 90);
    // runs in config order, then scenario id, then instruction index
    let runs = ["toy/spm", "toy/pm", "toy/p"];
    let keys: Vec<_> = records
        .iter()
        .map(|r| (runs.iter().position(|x| *x == r.run).unwrap(), r.scenario_id.clone(), r.instruction_index))
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    // a different seed changes the stochastic runs
    let other = dir.path().join("other");
    graspbench(&["eval", "--config", s(&config), "--out", s(&other), "--seed", "1"]);
    assert_ne!(fs::read(other.join("results.jsonl")).unwrap(), outputs[0].0);
}

#[test]
fn report_on_oracle_fixture_and_empty_results() {
    let toy = toy_dir();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("oracle");
    let out = graspbench(&[
        "eval",
        "--manifest",
        s(&toy.join("manifest.json")),
        "--scenes",
        s(&toy.join("scenes")),
        "--out",
        s(&out_dir),
        "--stop",
        "p",
        "--workers",
        "4",
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let results = out_dir.join("results.jsonl");
    let rep = graspbench(&[
        "report",
        "--results",
        s(&results),
        "--manifest",
        s(&toy.join("manifest.json")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(rep.code, 0, "{}", rep.stderr);
    let cells: Vec<&str> = rep.stdout.lines().filter(|l| l.contains("Amb.") || l.starts_with("Overall")).collect();
    assert_eq!(cells.len(), 7);
    for line in cells {
        assert!(line.contains("1.00  1.00  1.00"), "{line}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["pooled"]["spl"], 1.0);
    assert!(fs::read_to_string(out_dir.join("report.csv")).unwrap().starts_with("cell,episodes,sr,pe,spl"));

    // the published easy / ambiguous row of the reference system
    let template = read_records(&results).unwrap().remove(0);
    let fixture = records_with_outcomes(&template, EASY_AMB, &common::sr80_pe85());
    let path = dir.path().join("fixture.jsonl");
    fs::write(&path, fixture.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect::<String>()).unwrap();
    let rep = graspbench(&["report", "--results", s(&path)]);
    let row = rep.stdout.lines().find(|l| l.starts_with("Easy w Amb.")).unwrap();
    assert!(row.contains("10  0.80  0.85  0.68"), "{row}");

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let rep = graspbench(&["report", "--results", s(&empty)]);
    assert_eq!(rep.code, 1);
    assert!(rep.stderr.contains("no records"));
}

#[test]
fn report_checks_published_rows() {
    let ok = graspbench(&["report", "--published", s(&common::data_dir().join("published_real_world.json"))]);
    assert_eq!(ok.code, 0, "{}", ok.stderr);
    assert!(ok.stdout.contains("36 of 36 rows consistent"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"[{"source": "x", "cell": "c", "sr": 0.5, "pe": 0.5, "spl": 0.5}]"#).unwrap();
    let out = graspbench(&["report", "--published", s(&bad)]);
    assert_eq!(out.code, 1);
    assert!(out.stdout.contains("FAIL"));
}

#[test]
fn annotate_writes_png_with_one_mark_per_object() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("marks.png");
    let scene = toy_dir().join("scenes/toy_003.json");
    let out = graspbench(&["annotate", "--scene", s(&scene), "--out", s(&png), "--radius", "5"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let n = load_scene(&scene).unwrap().objects().len();
    assert!(out.stdout.contains(&format!("{n} marks")));
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");
    let again = dir.path().join("again.png");
    graspbench(&["annotate", "--scene", s(&scene), "--out", s(&again), "--radius", "5"]);
    assert_eq!(fs::read(&png).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn exit_codes_for_bad_config_and_unreachable_endpoint() {
    let toy = toy_dir();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seeed = 1\n").unwrap();
    let out = graspbench(&["eval", "--config", s(&cfg), "--manifest", s(&toy.join("manifest.json"))]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("seeed"), "{}", out.stderr);

    let flag = graspbench(&["eval", "--stop", "sp"]);
    assert_eq!(flag.code, 1);

    // nothing listens on port 9 of the loopback interface
    fs::write(
        &cfg,
        format!(
            "[reasoner]\nkind = \"remote\"\n[reasoner.endpoint]\nurl = \"http://127.0.0.1:9/chat\"\nmax_retries = 0\n\
             [paths]\nscenes = \"{}\"\nmanifest = \"{}\"\n",
            s(&toy.join("scenes")),
            s(&toy.join("manifest.json"))
        ),
    )
    .unwrap();
    let out = graspbench(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("r")), "--workers", "4"]);
    assert_eq!(out.code, 0, "reasoner errors are step failures: {}", out.stderr);
    let recs = read_records(&dir.path().join("r/results.jsonl")).unwrap();
    assert!(recs.iter().all(|r| !r.success && r.steps[0].decision_error.is_some()));
}

#[test]
fn synth_then_ingest_and_score_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let out = graspbench(&["synth", "--out", s(dir.path()), "--count", "12", "--seed", "3"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(graspbench(&["ingest", "--scenes", s(&dir.path().join("scenes"))]).code, 0);
    let scene = load_scene(&dir.path().join("scenes/toy_000.json")).unwrap();
    let copy = dir.path().join("copy.json");
    save_scene(&scene, &copy).unwrap();
    assert_eq!(scene_to_json(&load_scene(&copy).unwrap()), scene_to_json(&scene));

    let toy = toy_dir();
    let scores = dir.path().join("gpt.json");
    let out = graspbench(&[
        "score-instructions",
        "--scenes",
        s(&toy.join("scenes")),
        "--manifest",
        s(&toy.join("manifest.json")),
        "--out",
        s(&scores),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(out.stdout.contains("30 scenarios scored, 0 skipped, mean 1.000"), "{}", out.stdout);
}
