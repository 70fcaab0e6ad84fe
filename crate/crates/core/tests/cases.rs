use std::path::{Path, PathBuf};

use num_complex::Complex64;
use tdmargin::case::{case_to_string, load_case, save_case};
use tdmargin::cvr::{build_extended_two_bus, feeder_equivalent_impedance, total_base_load};
use tdmargin::netmodel::{validate_network, BusKind};
use tdmargin::zipload::ZipLoad;
use tdmargin::Error;

fn case(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("cases").join(name)
}

const BUNDLED: [&str; 3] = ["two_bus_extended.json", "ieee9_4d.json", "ieee9_123d.json"];

#[test]
fn bundled_cases_load_and_flatten() {
    for name in BUNDLED {
        let sys = load_case(case(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(validate_network(&sys).is_valid(), "{name}");
        let flat = sys.flatten().unwrap();
        assert_eq!(flat.feeder_buses.len(), sys.feeders.len());
        let slack = sys
            .transmission
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        assert_eq!(slack, 1, "{name}");
    }
}

#[test]
fn two_bus_case_matches_builder() {
    let from_file = load_case(case("two_bus_extended.json")).unwrap();
    let built = build_extended_two_bus(
        Complex64::new(0.01, 0.06),
        Complex64::new(0.03, 0.06),
        ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3]).unwrap(),
        1.0,
    );
    assert_eq!(from_file, built);
}

#[test]
fn nine_bus_cases_carry_the_same_total_load() {
    let a = load_case(case("ieee9_4d.json")).unwrap();
    let b = load_case(case("ieee9_123d.json")).unwrap();
    // 90 + 100 + 125 MW.
    assert!((total_base_load(&a) - 3.15).abs() < 1e-12);
    assert!((total_base_load(&b) - 3.15).abs() < 1e-12);
    assert_eq!(b.feeders[0].replication, 32);
    assert_eq!(b.feeders[0].loads.len(), 11);
}

#[test]
fn four_node_feeder_collapses_to_its_series_sum() {
    let sys = load_case(case("ieee9_4d.json")).unwrap();
    let z = feeder_equivalent_impedance(&sys.feeders[0]).unwrap();
    assert!((z - Complex64::new(0.03, 0.06)).norm() < 1e-12, "{z}");
}

#[test]
fn saved_cases_reload_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    for name in BUNDLED {
        let sys = load_case(case(name)).unwrap();
        let path = dir.path().join(name);
        save_case(&sys, &path).unwrap();
        let again = load_case(&path).unwrap();
        assert_eq!(case_to_string(&again), case_to_string(&sys), "{name}");
        let drift = sys
            .feeders
            .iter()
            .zip(&again.feeders)
            .flat_map(|(f, g)| f.loads.values().zip(g.loads.values()))
            .map(|(a, b)| (a.p0 - b.p0).abs().max((a.q0 - b.q0).abs()))
            .fold(0.0, f64::max);
        assert!(drift < 1e-14, "{name}: load drift {drift}");
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_case(case("no_such_case.json")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn unknown_field_is_a_parse_error() {
    let text = std::fs::read_to_string(case("two_bus_extended.json"))
        .unwrap()
        .replacen("\"r\": 0.03", "\"resistance\": 0.03", 1);
    let err = tdmargin::case::case_from_str(&text, Path::new("edited.json")).unwrap_err();
    match err {
        Error::Parse { field, line, .. } => {
            assert!(field.starts_with("feeders[0].segments[0]"), "{field}");
            assert!(line > 1);
        }
        other => panic!("expected parse error, got {other}"),
    }
}
