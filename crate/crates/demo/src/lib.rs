//! WebAssembly bindings behind `www/index.html`.
//!
//! The `try_*` functions hold the logic and are plain Rust so they can be
//! tested natively; the exported wrappers only convert errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use melo_core::config::EngineConfig;
use melo_core::dynlora::BlockId;
use melo_core::editor::EditorState;
use melo_core::error::{MeloError, Result};
use melo_core::evalkit::{evaluate, prepare};
use melo_core::scopedb::{ScopeDb, UpsertKind};

const MINI_CONFIG: &str = include_str!("mini.toml");

fn js(e: MeloError) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo types serialize")
}

/// A 2-D scope database that can be replayed under a new initial radius.
#[wasm_bindgen]
pub struct Playground {
    points: Vec<([f64; 2], usize)>,
    db: ScopeDb,
}

#[derive(Serialize)]
struct ClusterView {
    center: [f64; 2],
    radius: f64,
    label: usize,
    members: Vec<([f64; 2], usize)>,
}

#[derive(Serialize)]
struct SearchView {
    nearest: Option<usize>,
    distance: Option<f64>,
    hit: Option<usize>,
    block: Option<usize>,
}

impl Playground {
    pub fn try_new(r_init: f64) -> Result<Self> {
        Ok(Self {
            points: Vec::new(),
            db: ScopeDb::new(2, r_init, 0)?,
        })
    }

    /// Inserts a key whose block is its insertion number.
    pub fn try_upsert(&mut self, x: f64, y: f64, label: usize) -> Result<UpsertKind> {
        let block = BlockId::new(self.points.len() + 1)?;
        let outcome = self.db.upsert_edit(&[x, y], block, label)?;
        self.points.push(([x, y], label));
        Ok(outcome.kind)
    }

    pub fn try_set_r_init(&mut self, r_init: f64) -> Result<()> {
        let points = std::mem::take(&mut self.points);
        *self = Self::try_new(r_init)?;
        for ([x, y], label) in points {
            self.try_upsert(x, y, label)?;
        }
        Ok(())
    }

    pub fn try_search(&self, x: f64, y: f64) -> Result<String> {
        let nearest = self.db.nearest_cluster(&[x, y])?;
        let hit = self.db.search(&[x, y])?;
        Ok(json(&SearchView {
            nearest: nearest.map(|n| n.0),
            distance: nearest.map(|n| n.1),
            hit: hit.map(|h| h.cluster),
            block: hit.map(|h| h.block.get()),
        }))
    }
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(r_init: f64) -> std::result::Result<Playground, JsError> {
        Self::try_new(r_init).map_err(js)
    }

    /// Returns the outcome kind, e.g. `"expanded"`.
    pub fn upsert(&mut self, x: f64, y: f64, label: usize) -> std::result::Result<String, JsError> {
        self.try_upsert(x, y, label).map(|k| json(&k).trim_matches('"').to_string()).map_err(js)
    }

    pub fn set_r_init(&mut self, r_init: f64) -> std::result::Result<(), JsError> {
        self.try_set_r_init(r_init).map_err(js)
    }

    pub fn search(&self, x: f64, y: f64) -> std::result::Result<String, JsError> {
        self.try_search(x, y).map_err(js)
    }

    pub fn clear(&mut self) {
        self.points.clear();
        self.db = ScopeDb::new(2, self.db.r_init(), 0).expect("radius already validated");
    }

    /// Clusters and counters as JSON.
    pub fn state(&self) -> String {
        let clusters: Vec<ClusterView> = self
            .db
            .clusters()
            .iter()
            .map(|c| ClusterView {
                center: [c.center[0], c.center[1]],
                radius: c.radius,
                label: c.label,
                members: c.members.iter().map(|m| ([m.key[0], m.key[1]], m.value.get())).collect(),
            })
            .collect();
        json(&serde_json::json!({ "clusters": clusters, "stats": self.db.stats() }))
    }
}

#[derive(Serialize)]
struct BatchView {
    block: usize,
    edits: usize,
    final_loss: f64,
    fit_accuracy: f64,
}

#[derive(Serialize)]
struct RunView {
    r_init: f64,
    batches: Vec<BatchView>,
    failure: Option<String>,
    edits: usize,
    es: f64,
    locality: f64,
    generality: f64,
    sequential_consistency: f64,
    clusters: usize,
    conflicts: usize,
    extra_params: usize,
}

/// Pretrains a tiny host, applies three edit batches and scores the result.
pub fn try_edit_run(seed: u64, r_init: f64) -> Result<String> {
    let mut cfg = EngineConfig::from_toml(MINI_CONFIG)?;
    cfg.seed = seed;
    cfg.editor.r_init = r_init;
    cfg.validate()?;
    let prepared = prepare(&cfg)?;
    let mut state = EditorState::new(prepared.model, &cfg.editor, cfg.seeds().adapters)?;
    let mut batches = Vec::new();
    let mut failure = None;
    for batch in &prepared.stream.batches {
        match state.apply_batch(batch) {
            Ok(r) => batches.push(BatchView {
                block: r.block.get(),
                edits: r.edits,
                final_loss: r.fit.final_loss,
                fit_accuracy: r.fit.accuracy,
            }),
            Err(e @ MeloError::EditFailure { .. }) => {
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let report = evaluate(&state, &prepared.stream.holdout, &prepared.stream.out_of_scope)?;
    Ok(json(&RunView {
        r_init,
        batches,
        failure,
        edits: report.edits,
        es: report.es,
        locality: report.locality,
        generality: report.generality,
        sequential_consistency: report.sequential_consistency,
        clusters: report.clusters,
        conflicts: report.conflicts,
        extra_params: report.extra_params,
    }))
}

#[wasm_bindgen]
pub fn edit_run(seed: u64, r_init: f64) -> std::result::Result<String, JsError> {
    try_edit_run(seed, r_init).map_err(js)
}
