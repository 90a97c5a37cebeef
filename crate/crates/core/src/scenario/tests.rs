use super::*;

fn cfg(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    }
}

#[test]
fn every_scenario_passes() {
    for name in SCENARIOS {
        let r = run_scenario(name, &cfg(7)).unwrap();
        assert!(r.passed(), "{name}: {:#?}", r.checks);
    }
}

#[test]
fn fig4_ledger_is_deterministic_per_seed() {
    let a = fig4(&cfg(7)).unwrap();
    let b = fig4(&cfg(7)).unwrap();
    assert_eq!(a.ledger, b.ledger);
    assert_ne!(a.ledger, fig4(&cfg(8)).unwrap().ledger);
}

#[test]
fn fig5_ledger_is_deterministic_per_seed() {
    assert_eq!(fig5(&cfg(3)).unwrap().ledger, fig5(&cfg(3)).unwrap().ledger);
}

#[test]
fn ledger_written_to_configured_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.jsonl");
    let r = fig4(&ScenarioConfig {
        ledger_path: Some(path.clone()),
        ..cfg(1)
    })
    .unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), r.ledger);
    assert!(Chain::load(&path).is_ok());
}

#[test]
fn short_window_goes_stale_sooner() {
    let r = outage(&ScenarioConfig {
        validity_window_s: 60,
        ..cfg(2)
    })
    .unwrap();
    assert!(r.passed(), "{:#?}", r.checks);
}

#[test]
fn unknown_scenario_and_issuerless_topology() {
    assert!(matches!(run_scenario("fig9", &cfg(1)), Err(ScenarioError::UnknownScenario(_))));
    let mut topo = FederationTopology::default_four();
    for e in &mut topo.entities {
        e.marks.retain(|m| m != QEAA_MARK_TYPE);
    }
    let c = ScenarioConfig {
        topology: topo,
        ..cfg(1)
    };
    assert!(matches!(fig3(&c), Err(ScenarioError::NoIssuer)));
}
