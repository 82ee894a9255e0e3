use melo_core::scopedb::UpsertKind;
use melo_demo::{try_edit_run, Playground};

#[test]
fn playground_upserts_and_searches() {
    let mut pg = Playground::try_new(1.0).unwrap();
    assert_eq!(pg.try_upsert(0.0, 0.0, 1).unwrap(), UpsertKind::Added);
    assert_eq!(pg.try_upsert(1.5, 0.0, 1).unwrap(), UpsertKind::Expanded);
    assert_eq!(pg.try_upsert(2.0, 0.0, 2).unwrap(), UpsertKind::Conflicted);
    let hit: serde_json::Value = serde_json::from_str(&pg.try_search(0.1, 0.0).unwrap()).unwrap();
    assert_eq!(hit["hit"], 0);
    let miss: serde_json::Value = serde_json::from_str(&pg.try_search(-4.0, -4.0).unwrap()).unwrap();
    assert!(miss["hit"].is_null());
    assert!(pg.try_upsert(f64::NAN, 0.0, 0).is_err());
}

#[test]
fn radius_change_replays_inserts() {
    let mut pg = Playground::try_new(0.1).unwrap();
    for (x, y) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5)] {
        pg.try_upsert(x, y, 0).unwrap();
    }
    let count = |pg: &Playground| {
        let v: serde_json::Value = serde_json::from_str(&pg.state()).unwrap();
        v["clusters"].as_array().unwrap().len()
    };
    assert_eq!(count(&pg), 3);
    pg.try_set_r_init(1.0).unwrap();
    assert_eq!(count(&pg), 1);
    pg.try_set_r_init(0.1).unwrap();
    assert_eq!(count(&pg), 3);
    assert!(pg.try_set_r_init(-1.0).is_err());
}

#[test]
fn mini_edit_run_reports_metrics() {
    let out: serde_json::Value = serde_json::from_str(&try_edit_run(5, 1.0).unwrap()).unwrap();
    assert_eq!(out["edits"], 36);
    assert_eq!(out["batches"].as_array().unwrap().len(), 3);
    assert!(out["failure"].is_null());
    let again: serde_json::Value = serde_json::from_str(&try_edit_run(5, 1.0).unwrap()).unwrap();
    assert_eq!(out, again);
}
