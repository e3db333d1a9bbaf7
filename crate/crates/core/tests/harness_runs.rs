use std::process::Command;

use chaosflow::harness::{
    evaluate, generate_scenarios, run_batch, run_pair, violation_pool, ArchiveStore, Catalog, GeneratorConfig, HarnessError,
    RunContext, RunMode,
};
use chaosflow::shipped;

fn demo() -> (GeneratorConfig, Catalog) {
    let cfg = GeneratorConfig::parse(shipped::DEMO_CONFIG).unwrap();
    let cat = Catalog::load(&cfg, std::path::Path::new(".")).unwrap();
    (cfg, cat)
}

#[test]
fn demo_scenarios_plant_one_violation_each() {
    let (cfg, cat) = demo();
    let scenarios = generate_scenarios(&cfg, &cat).unwrap();
    assert_eq!(scenarios.len(), 6);
    for s in &scenarios {
        assert_eq!(s.planted_violations.len(), 1);
        let pool = violation_pool(cat.topology(&s.topology).unwrap(), cat.flow(&s.flow).unwrap(), &cfg.violation_tiers);
        assert!(pool.contains(&s.planted_violations[0]));
        let planted = s.instantiate(&cat).unwrap();
        assert!(planted.edge(&s.planted_violations[0]).unwrap().is_violation());
    }
    assert_eq!(generate_scenarios(&cfg, &cat).unwrap(), scenarios);
}

#[test]
fn empty_cross_product_is_rejected() {
    let (mut cfg, cat) = demo();
    cfg.fault_templates.clear();
    assert!(matches!(generate_scenarios(&cfg, &cat), Err(HarnessError::EmptyCrossProduct)));
}

#[test]
fn pairs_share_seeds_and_differ_only_in_faults() {
    let (cfg, cat) = demo();
    let scenarios = generate_scenarios(&cfg, &cat).unwrap();
    let ctx = RunContext::from_config(&cat, &cfg);
    let pair = run_pair(&scenarios[0], &ctx, None).unwrap();
    assert_eq!(pair.baseline.seed, pair.chaos.seed);
    assert_eq!(pair.baseline.mode, RunMode::Baseline);
    let strip = |h: &[(String, String)]| h.iter().filter(|(k, _)| k != "x-havoc-faults" && k != "x-havoc-run").cloned().collect::<Vec<_>>();
    assert_eq!(strip(&pair.baseline.headers), strip(&pair.chaos.headers));
    assert!(pair.baseline.result.verdict.is_pass());
}

#[test]
fn archives_round_trip_and_recompute() {
    let (cfg, cat) = demo();
    let scenarios = generate_scenarios(&cfg, &cat).unwrap();
    let ctx = RunContext::from_config(&cat, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let store = ArchiveStore::open(dir.path()).unwrap();
    let pairs = run_batch(&scenarios, &ctx, Some(&store)).unwrap();
    let loaded = ArchiveStore::load_all(dir.path()).unwrap();
    assert_eq!(loaded.len(), 12);
    for a in &loaded {
        assert_eq!(a.compute_digest(), a.digest, "{}", a.run_id);
    }
    let chaos: Vec<_> = pairs.iter().map(|p| &p.chaos).collect();
    for c in chaos {
        let l = loaded.iter().find(|a| a.run_id == c.run_id).unwrap();
        assert_eq!(l, c);
    }
    let report = evaluate(&loaded).unwrap();
    let passes = loaded.iter().filter(|a| a.result.verdict.is_pass()).count();
    assert_eq!(report.overall.pass_rate, passes as f64 / loaded.len() as f64);

    // A second run appends new ids rather than overwriting.
    run_batch(&scenarios[..1], &ctx, Some(&store)).unwrap();
    let again = ArchiveStore::load_all(dir.path()).unwrap();
    assert_eq!(again.len(), 14);
    assert!(again.iter().any(|a| a.run_id == "s1-chaos-0001"));
}

#[test]
fn worker_count_does_not_change_digests() {
    let (mut cfg, cat) = demo();
    let scenarios = generate_scenarios(&cfg, &cat).unwrap();
    cfg.workers = 1;
    let one: Vec<String> = run_batch(&scenarios, &RunContext::from_config(&cat, &cfg), None).unwrap().iter().map(|p| p.chaos.digest.clone()).collect();
    cfg.workers = 8;
    let eight: Vec<String> = run_batch(&scenarios, &RunContext::from_config(&cat, &cfg), None).unwrap().iter().map(|p| p.chaos.digest.clone()).collect();
    assert_eq!(one, eight);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_chaosflow")).args(args).output().unwrap()
}

#[test]
fn cli_gen_run_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("demo.toml");
    std::fs::write(&config, shipped::DEMO_CONFIG).unwrap();
    let list = dir.path().join("scenarios.jsonl");
    let out = cli(&["gen", "--config", config.to_str().unwrap(), "--out", list.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&list).unwrap().lines().count(), 6);

    let archives = dir.path().join("out");
    let out = cli(&["run", "--config", config.to_str().unwrap(), "--scenario", "s1", "--out", archives.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(archives.join("s1-chaos-0000").join("archive.json").is_file());

    let out = cli(&["eval", "--archives", archives.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("metric overall pass_rate"));

    let out = cli(&["rca", "--archive", archives.join("s1-chaos-0000").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cli_errors_are_one_line() {
    let empty = tempfile::tempdir().unwrap();
    let out = cli(&["eval", "--archives", empty.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no archives found"));
    assert_eq!(err.trim_end().lines().count(), 1);

    for args in [&["frobnicate"][..], &["gen", "--config", "/nonexistent/cfg.toml"][..]] {
        let out = cli(args);
        assert!(!out.status.success());
        assert_eq!(String::from_utf8_lossy(&out.stderr).trim_end().lines().count(), 1);
    }

    let topo = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(topo.path(), shipped::RIDE_MIN).unwrap();
    assert!(cli(&["topo", "check", topo.path().to_str().unwrap()]).status.success());
    std::fs::write(topo.path(), "name = \"x\"\n[[services]]\nname = 3\n").unwrap();
    assert!(!cli(&["topo", "check", topo.path().to_str().unwrap()]).status.success());
}
