//! The JSON files under `fixtures/` are the serialized built-in tableaux.
//! Set `QD_ERK_REGENERATE=1` to rewrite them.

use std::path::PathBuf;

use qd_erk::fixtures;
use qd_erk::tableau::{deserialize, serialize};
use qd_erk::trees::{default_tolerance, verify_order};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn json_fixtures_match_builtins() {
    let regenerate = std::env::var("QD_ERK_REGENERATE").is_ok_and(|v| v == "1");
    for (name, _) in fixtures::all(64) {
        let t = fixtures::by_name(name, fixtures::native_precision(name)).unwrap();
        let path = fixture_dir().join(format!("{name}.json"));
        let text = serialize(&t);
        if regenerate {
            std::fs::write(&path, &text).unwrap();
        }
        let on_disk = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(on_disk, text, "{name}.json is stale; rerun with QD_ERK_REGENERATE=1");
        assert_eq!(deserialize(&on_disk).unwrap(), t, "{name}");
    }
}

#[test]
fn json_fixtures_verify_at_claimed_order() {
    for (name, _) in fixtures::all(64) {
        let path = fixture_dir().join(format!("{name}.json"));
        let t = deserialize(&std::fs::read_to_string(path).unwrap()).unwrap();
        let p = t.claimed_order().unwrap();
        let rep = verify_order(&t, p, t.b(), &default_tolerance(t.precision_bits()));
        assert_eq!(rep.order_verified, p, "{name}");
    }
}
