//! Editing metrics, the end-to-end pipeline and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::dynlora::BlockId;
use crate::editor::{BatchReport, EditorConfig, EditorState, RoutingTrace};
use crate::error::{MeloError, Result};
use crate::hostnet::{pretrain, HostModel};
use crate::numkit::GradMask;
use crate::taskgen::{gen_base_task, gen_edit_stream, EditStream, Probe, Registry};

/// Fraction of applied edits predicting their fact's final label. Vacuously
/// 1.0 before any edit.
pub fn edit_success(state: &EditorState) -> Result<f64> {
    let mut finals: BTreeMap<usize, usize> = BTreeMap::new();
    for e in state.log().iter().flat_map(|b| &b.edits) {
        finals.insert(e.fact_id, e.label);
    }
    let edits: Vec<_> = state.log().iter().flat_map(|b| &b.edits).collect();
    if edits.is_empty() {
        return Ok(1.0);
    }
    let seqs: Vec<&[u32]> = edits.iter().map(|e| e.tokens.as_slice()).collect();
    let preds = predictions(state, &seqs)?;
    let hits = edits
        .iter()
        .zip(&preds)
        .filter(|(e, p)| finals[&e.fact_id] == **p)
        .count();
    Ok(hits as f64 / edits.len() as f64)
}

fn predictions(state: &EditorState, seqs: &[&[u32]]) -> Result<Vec<usize>> {
    state
        .infer_batch(seqs)
        .into_iter()
        .map(|r| r.map(|i| i.label))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityMiss {
    pub index: usize,
    pub fact_id: usize,
    pub label_changed: bool,
    pub trace: RoutingTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityResult {
    /// Fraction whose logits equal the base model's bit for bit.
    pub bitwise: f64,
    /// Fraction whose predicted label equals the base model's.
    pub label_level: f64,
    pub misses: Vec<LocalityMiss>,
}

pub fn locality(state: &EditorState, out_of_scope: &[Probe]) -> Result<LocalityResult> {
    if out_of_scope.is_empty() {
        return Ok(LocalityResult {
            bitwise: 1.0,
            label_level: 1.0,
            misses: Vec::new(),
        });
    }
    let seqs: Vec<&[u32]> = out_of_scope.iter().map(|p| p.tokens.as_slice()).collect();
    let base = state.base_logits(&seqs)?;
    let mut misses = Vec::new();
    let mut same_label = 0usize;
    for (i, r) in state.infer_batch(&seqs).into_iter().enumerate() {
        let inf = r?;
        let base_row = base.row(i);
        let base_label = crate::hostnet::argmax(base_row);
        if inf.label == base_label {
            same_label += 1;
        }
        let bitwise = inf.logits.iter().zip(base_row).all(|(a, b)| a.to_bits() == b.to_bits());
        if !bitwise {
            misses.push(LocalityMiss {
                index: i,
                fact_id: out_of_scope[i].fact_id,
                label_changed: inf.label != base_label,
                trace: inf.trace,
            });
        }
    }
    let n = out_of_scope.len() as f64;
    Ok(LocalityResult {
        bitwise: 1.0 - misses.len() as f64 / n,
        label_level: same_label as f64 / n,
        misses,
    })
}

/// Fraction of held-out renderings predicting their fact's final label.
pub fn generality(state: &EditorState, holdout: &[Probe]) -> Result<f64> {
    if holdout.is_empty() {
        return Ok(1.0);
    }
    let seqs: Vec<&[u32]> = holdout.iter().map(|p| p.tokens.as_slice()).collect();
    let preds = predictions(state, &seqs)?;
    let hits = holdout.iter().zip(&preds).filter(|(p, y)| p.label == **y).count();
    Ok(hits as f64 / holdout.len() as f64)
}

/// Fraction of edits from batches before the last whose current prediction
/// matches the prediction logged right after their own batch. Edits whose
/// fact was edited again later are held to the latest label instead.
pub fn sequential_consistency(state: &EditorState) -> Result<f64> {
    let log = state.log();
    if log.len() < 2 {
        return Ok(1.0);
    }
    let mut last_batch: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (t, b) in log.iter().enumerate() {
        for e in &b.edits {
            last_batch.insert(e.fact_id, (t, e.label));
        }
    }
    let earlier = &log[..log.len() - 1];
    let mut expected = Vec::new();
    let mut seqs: Vec<&[u32]> = Vec::new();
    for (t, b) in earlier.iter().enumerate() {
        for (e, &p) in b.edits.iter().zip(&b.predicted) {
            let (last, label) = last_batch[&e.fact_id];
            expected.push(if last > t { label } else { p });
            seqs.push(&e.tokens);
        }
    }
    let preds = predictions(state, &seqs)?;
    let hits = preds.iter().zip(&expected).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / expected.len() as f64)
}

/// Closed-form extra parameters: `layers · blocks · (m·p + p·d)`.
pub fn extra_param_count(layers: usize, blocks: usize, m: usize, d: usize, p: usize) -> usize {
    layers * blocks * (m * p + p * d)
}

/// Counts adapter entries enabled by the gradient mask of any trained block.
pub fn tallied_extra_params(state: &EditorState) -> Result<usize> {
    let mut total = 0;
    for a in state.adapters().adapters() {
        let (m, d) = a.dims();
        let r = a.rank();
        let mut mb = GradMask::all(m, r, false);
        let mut ma = GradMask::all(r, d, false);
        for b in state.log() {
            let range = b.block.range(a.partial_rank());
            mb.union_with(&GradMask::columns(m, r, range.clone()))?;
            ma.union_with(&GradMask::rows_range(r, d, range))?;
        }
        total += mb.enabled_count() + ma.enabled_count();
    }
    Ok(total)
}

/// Edits per minute, absent when nothing was edited or no time elapsed.
pub fn throughput(edits: usize, seconds: f64) -> Option<f64> {
    (edits > 0 && seconds > 0.0).then(|| edits as f64 * 60.0 / seconds)
}

/// Deterministic metrics of one editing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub edits: usize,
    pub es: f64,
    pub locality: f64,
    pub locality_label: f64,
    pub generality: f64,
    pub sequential_consistency: f64,
    pub clusters: usize,
    pub conflicts: usize,
    pub forgotten: usize,
    pub keys: usize,
    pub blocks_used: usize,
    pub extra_params: usize,
    pub locality_misses: Vec<LocalityMiss>,
}

pub const REPORT_CSV_HEADER: &str = "edits,es,locality,locality_label,generality,sequential_consistency,clusters,conflicts,forgotten,keys,blocks_used,extra_params,locality_misses";

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{REPORT_CSV_HEADER}\n{},{:?},{:?},{:?},{:?},{:?},{},{},{},{},{},{},{}\n",
            self.edits,
            self.es,
            self.locality,
            self.locality_label,
            self.generality,
            self.sequential_consistency,
            self.clusters,
            self.conflicts,
            self.forgotten,
            self.keys,
            self.blocks_used,
            self.extra_params,
            self.locality_misses.len()
        )
    }
}

pub fn evaluate(state: &EditorState, holdout: &[Probe], out_of_scope: &[Probe]) -> Result<EvalReport> {
    let loc = locality(state, out_of_scope)?;
    let stats = state.db().stats();
    let adapters = state.adapters();
    let (m, d) = adapters.adapters()[0].dims();
    Ok(EvalReport {
        edits: state.log().iter().map(|b| b.edits.len()).sum(),
        es: edit_success(state)?,
        locality: loc.bitwise,
        locality_label: loc.label_level,
        generality: generality(state, holdout)?,
        sequential_consistency: sequential_consistency(state)?,
        clusters: stats.clusters,
        conflicts: stats.conflicts,
        forgotten: stats.forgotten,
        keys: stats.keys,
        blocks_used: state.log().len(),
        extra_params: extra_param_count(adapters.layers().len(), state.log().len(), m, d, adapters.partial_rank()),
        locality_misses: loc.misses,
    })
}

/// Wall-clock cost of an editing run, kept apart from the deterministic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub edits: usize,
    pub seconds: f64,
    pub edits_per_minute: Option<f64>,
}

/// A generated benchmark with its pretrained host.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: EngineConfig,
    pub registry: Registry,
    pub stream: EditStream,
    pub model: HostModel,
}

pub fn prepare(config: &EngineConfig) -> Result<Prepared> {
    config.validate()?;
    let seeds = config.seeds();
    let registry = gen_base_task(&config.task_config(), seeds.task)?;
    let stream = gen_edit_stream(&registry, &config.stream, seeds.stream)?;
    let model = pretrain(&config.host, &registry.base_examples(), &config.pretrain, seeds.host)?;
    Ok(Prepared {
        config: config.clone(),
        registry,
        stream,
        model,
    })
}

pub struct EditRun {
    pub state: EditorState,
    pub reports: Vec<BatchReport>,
    pub timing: RunTiming,
    /// Set when a batch could not be fitted; later batches were not applied.
    pub failure: Option<MeloError>,
}

/// Applies `stream` batch by batch, stopping at the first edit failure.
pub fn run_edits(model: &HostModel, stream: &EditStream, editor: &EditorConfig, seed: u64) -> Result<EditRun> {
    let mut state = EditorState::new(model.clone(), editor, seed)?;
    let start = Instant::now();
    let mut reports = Vec::with_capacity(stream.batches.len());
    let mut failure = None;
    for batch in &stream.batches {
        match state.apply_batch(batch) {
            Ok(r) => reports.push(r),
            Err(e @ MeloError::EditFailure { .. }) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let edits = reports.iter().map(|r| r.edits).sum();
    Ok(EditRun {
        state,
        reports,
        timing: RunTiming {
            edits,
            seconds,
            edits_per_minute: throughput(edits, seconds),
        },
        failure,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Radius,
    PartialRank,
    KeyLayer,
}

impl FromStr for SweepAxis {
    type Err = MeloError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radius" => Ok(Self::Radius),
            "partial_rank" => Ok(Self::PartialRank),
            "key_layer" => Ok(Self::KeyLayer),
            _ => Err(MeloError::Config(format!(
                "unknown sweep axis {s:?} (radius, partial_rank, key_layer)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Radius => "radius",
            Self::PartialRank => "partial_rank",
            Self::KeyLayer => "key_layer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: Option<EvalReport>,
    pub seconds: f64,
    pub failure: Option<String>,
}

fn check_axis_value(axis: SweepAxis, v: f64, editor: &EditorConfig, layers: usize) -> Result<()> {
    let ok = match axis {
        SweepAxis::Radius => v.is_finite() && v >= 0.0,
        SweepAxis::PartialRank => v >= 1.0 && v.fract() == 0.0,
        SweepAxis::KeyLayer => {
            v >= 0.0
                && v.fract() == 0.0
                && crate::hostnet::LayerHookConfig::new(v as usize, editor.lora_layers.clone(), layers).is_ok()
        }
    };
    if ok {
        Ok(())
    } else {
        Err(MeloError::Config(format!("invalid {axis} sweep value {v}")))
    }
}

/// One editing run per value on the prepared stream and host. Radius and
/// key-layer points share the trained adapters and only rebuild routing.
pub fn sweep(prepared: &Prepared, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let editor = &prepared.config.editor;
    for &v in values {
        check_axis_value(axis, v, editor, prepared.config.host.layers)?;
    }
    let seed = prepared.config.seeds().adapters;
    let stream = &prepared.stream;
    let mut rows = Vec::with_capacity(values.len());
    match axis {
        SweepAxis::PartialRank => {
            for &v in values {
                let p = v as usize;
                let cfg = EditorConfig {
                    partial_rank: p,
                    rank: p * (editor.rank / editor.partial_rank).max(1),
                    ..editor.clone()
                };
                let start = Instant::now();
                let run = run_edits(&prepared.model, stream, &cfg, seed)?;
                rows.push(finish_row(v, &run.state, run.failure, stream, start)?);
            }
        }
        SweepAxis::Radius | SweepAxis::KeyLayer => {
            let start = Instant::now();
            let run = run_edits(&prepared.model, stream, editor, seed)?;
            let train_seconds = start.elapsed().as_secs_f64();
            if let Some(f) = run.failure {
                return Ok(values
                    .iter()
                    .map(|&v| SweepRow {
                        value: v,
                        report: None,
                        seconds: train_seconds,
                        failure: Some(f.to_string()),
                    })
                    .collect());
            }
            rows = sweep_routing(&run.state, stream, axis, values)?;
            for row in &mut rows {
                row.seconds += train_seconds;
            }
        }
    }
    Ok(rows)
}

/// Radius or key-layer sweep over an already edited state: adapters are kept
/// and only the database is rebuilt for each value.
pub fn sweep_routing(state: &EditorState, stream: &EditStream, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let editor = state.config();
    for &v in values {
        check_axis_value(axis, v, editor, state.model().config().layers)?;
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let start = Instant::now();
        let (r, l) = match axis {
            SweepAxis::Radius => (v, editor.key_layer),
            SweepAxis::KeyLayer => (editor.r_init, v as usize),
            SweepAxis::PartialRank => {
                return Err(MeloError::Config("partial rank sweeps retrain; use sweep".into()));
            }
        };
        let (replayed, _) = state.replay_routing(r, l)?;
        rows.push(finish_row(v, &replayed, None, stream, start)?);
    }
    Ok(rows)
}

fn finish_row(
    value: f64,
    state: &EditorState,
    failure: Option<MeloError>,
    stream: &EditStream,
    start: Instant,
) -> Result<SweepRow> {
    let report = match failure {
        Some(_) => None,
        None => Some(evaluate(state, &stream.holdout, &stream.out_of_scope)?),
    };
    Ok(SweepRow {
        value,
        report,
        seconds: start.elapsed().as_secs_f64(),
        failure: failure.map(|e| e.to_string()),
    })
}

pub const SWEEP_CSV_HEADER: &str =
    "value,es,locality,locality_label,generality,clusters,conflicts,forgotten,runtime_s,failure";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        match &r.report {
            Some(e) => writeln!(
                out,
                "{:?},{:?},{:?},{:?},{:?},{},{},{},{:.3},",
                r.value, e.es, e.locality, e.locality_label, e.generality, e.clusters, e.conflicts, e.forgotten, r.seconds
            )?,
            None => writeln!(
                out,
                "{:?},,,,,,,,{:.3},\"{}\"",
                r.value,
                r.seconds,
                r.failure.as_deref().unwrap_or("").replace('"', "'")
            )?,
        }
    }
    Ok(())
}

/// Counts how often consecutive values break a monotone trend.
pub fn inversions(values: &[f64], non_decreasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if non_decreasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

/// Block ids referenced by the database, for auditing routing.
pub fn referenced_blocks(state: &EditorState) -> Vec<BlockId> {
    let mut out: Vec<BlockId> = state
        .db()
        .clusters()
        .iter()
        .flat_map(|c| c.members.iter().map(|m| m.value))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}
