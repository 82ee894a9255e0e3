//! Sequential editing: one adapter block per batch plus key routing.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynlora::{train_block, AdapterSet, BlockId, TrainOptions, TrainReport};
use crate::error::{MeloError, Result};
use crate::hostnet::{argmax, Example, HostModel, LayerHookConfig};
use crate::numkit::Matrix;
use crate::scopedb::{ScopeDb, UpsertKind};
use crate::taskgen::Edit;

/// Adapter and routing settings for an editing session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    pub key_layer: usize,
    pub lora_layers: Vec<usize>,
    /// Initial adapter rank; adapters grow by one block at a time past it.
    pub rank: usize,
    pub partial_rank: usize,
    pub alpha: f64,
    pub r_init: f64,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            key_layer: 1,
            lora_layers: vec![2, 3, 4, 5],
            rank: 20,
            partial_rank: 2,
            alpha: 8.0,
            r_init: 2.0,
            iterations: 100,
            lr: 0.5,
        }
    }
}

/// One applied batch as recorded in the edit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedBatch {
    pub block: BlockId,
    pub edits: Vec<Edit>,
    /// Routed predictions for `edits` right after this batch was applied.
    pub predicted: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeTally {
    pub added: usize,
    pub expanded: usize,
    pub conflicted: usize,
    pub absorbed_same_label: usize,
    pub overwritten_new_label: usize,
    pub removed: usize,
}

impl OutcomeTally {
    fn count(&mut self, kind: UpsertKind, removed: usize) {
        match kind {
            UpsertKind::Added => self.added += 1,
            UpsertKind::Expanded => self.expanded += 1,
            UpsertKind::Conflicted => self.conflicted += 1,
            UpsertKind::AbsorbedSameLabel => self.absorbed_same_label += 1,
            UpsertKind::OverwrittenNewLabel => self.overwritten_new_label += 1,
        }
        self.removed += removed;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub block: BlockId,
    pub edits: usize,
    pub fit: TrainReport,
    pub outcomes: OutcomeTally,
    /// Fraction of the batch predicting its label after routing.
    pub routed_accuracy: f64,
}

/// Where an input was sent at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub block: Option<BlockId>,
    pub nearest_cluster: Option<usize>,
    /// Distance from the key to the nearest cluster center.
    pub distance: Option<f64>,
    /// Matched member inside the nearest cluster, when in scope.
    pub member: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub label: usize,
    pub trace: RoutingTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditorState {
    pub(crate) model: HostModel,
    pub(crate) hooks: LayerHookConfig,
    pub(crate) adapters: AdapterSet,
    pub(crate) db: ScopeDb,
    pub(crate) config: EditorConfig,
    pub(crate) log: Vec<LoggedBatch>,
}

impl EditorState {
    pub fn new(model: HostModel, config: &EditorConfig, seed: u64) -> Result<Self> {
        if !model.is_frozen() {
            return Err(MeloError::Contract("editing needs a frozen host".into()));
        }
        let hooks = LayerHookConfig::new(config.key_layer, config.lora_layers.clone(), model.config().layers)?;
        let adapters = AdapterSet::for_model(
            &model,
            hooks.lora_layers(),
            config.rank,
            config.partial_rank,
            config.alpha,
            seed,
        )?;
        let db = ScopeDb::new(model.config().width, config.r_init, config.key_layer)?;
        let mut config = config.clone();
        config.lora_layers = hooks.lora_layers().to_vec();
        Ok(Self {
            model,
            hooks,
            adapters,
            db,
            config,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &HostModel {
        &self.model
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn db(&self) -> &ScopeDb {
        &self.db
    }

    pub fn config(&self) -> &EditorConfig {
        &self.config
    }

    pub fn log(&self) -> &[LoggedBatch] {
        &self.log
    }

    pub fn next_block(&self) -> BlockId {
        BlockId::new(self.log.len() + 1).expect("positive")
    }

    /// Keys for `seqs` at the configured layer, in input order.
    pub fn keys(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); seqs.len()];
        for (len, idx) in by_length(seqs) {
            let group: Vec<&[u32]> = idx.iter().map(|&i| seqs[i]).collect();
            debug_assert!(group.iter().all(|s| s.len() == len));
            let keys = self.model.hidden_batch(&group, self.hooks.key_layer())?;
            for (k, &i) in idx.iter().enumerate() {
                out[i] = keys.row(k).to_vec();
            }
        }
        Ok(out)
    }

    /// Trains the next block on `batch`, then files every edit key under it.
    /// A batch that cannot be fitted leaves the state untouched.
    pub fn apply_batch(&mut self, batch: &[Edit]) -> Result<BatchReport> {
        let labels = self.model.config().labels;
        if let Some(e) = batch.iter().find(|e| e.label >= labels) {
            return Err(MeloError::Input(format!("edit label {} outside {labels} classes", e.label)));
        }
        let t = self.next_block();
        let examples: Vec<Example> = batch
            .iter()
            .map(|e| Example {
                tokens: e.tokens.clone(),
                label: e.label,
            })
            .collect();
        let opts = TrainOptions {
            iterations: self.config.iterations,
            eta: self.config.lr,
        };
        let fit = train_block(&mut self.adapters, &self.model, &examples, t, &opts)?;
        let (outcomes, routed_accuracy) = self.route_batch(t, batch)?;
        Ok(BatchReport {
            block: t,
            edits: batch.len(),
            fit,
            outcomes,
            routed_accuracy,
        })
    }

    /// Files the keys of a batch whose block is already trained and logs the
    /// routed predictions.
    fn route_batch(&mut self, t: BlockId, batch: &[Edit]) -> Result<(OutcomeTally, f64)> {
        let seqs: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let keys = self.keys(&seqs)?;
        let mut outcomes = OutcomeTally::default();
        for (e, k) in batch.iter().zip(&keys) {
            let o = self.db.upsert_edit(k, t, e.label)?;
            outcomes.count(o.kind, o.removed);
        }
        let predicted: Vec<usize> = self
            .infer_batch(&seqs)
            .into_iter()
            .map(|r| r.map(|i| i.label))
            .collect::<Result<_>>()?;
        let hits = predicted.iter().zip(batch).filter(|(p, e)| **p == e.label).count();
        self.log.push(LoggedBatch {
            block: t,
            edits: batch.to_vec(),
            predicted,
        });
        Ok((outcomes, hits as f64 / batch.len() as f64))
    }

    /// Rebuilds the database and edit log for another radius or key layer,
    /// keeping the trained adapters. Block training never reads the
    /// database and a block's entries are only written by its own batch, so
    /// the result equals a fresh run with the new routing settings.
    pub fn replay_routing(&self, r_init: f64, key_layer: usize) -> Result<(Self, Vec<OutcomeTally>)> {
        let config = EditorConfig {
            r_init,
            key_layer,
            ..self.config.clone()
        };
        let hooks = LayerHookConfig::new(key_layer, config.lora_layers.clone(), self.model.config().layers)?;
        let mut out = Self {
            model: self.model.clone(),
            hooks,
            adapters: self.adapters.clone(),
            db: ScopeDb::new(self.model.config().width, r_init, key_layer)?,
            config,
            log: Vec::with_capacity(self.log.len()),
        };
        let mut tallies = Vec::with_capacity(self.log.len());
        for b in &self.log {
            tallies.push(out.route_batch(b.block, &b.edits)?.0);
        }
        Ok((out, tallies))
    }

    pub fn infer(&self, tokens: &[u32]) -> Result<Inference> {
        self.infer_batch(&[tokens]).pop().expect("one result")
    }

    /// Routes every input independently; inputs sharing a length and an
    /// active block run through one forward pass.
    pub fn infer_batch(&self, seqs: &[&[u32]]) -> Vec<Result<Inference>> {
        let mut out: Vec<Option<Result<Inference>>> = (0..seqs.len()).map(|_| None).collect();
        let mut valid = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            match self.model.check_batch(&[s]) {
                Ok(_) => valid.push(i),
                Err(e) => out[i] = Some(Err(e)),
            }
        }
        let valid_seqs: Vec<&[u32]> = valid.iter().map(|&i| seqs[i]).collect();
        let routed = self.keys(&valid_seqs).and_then(|keys| {
            keys.iter()
                .map(|k| {
                    let nearest = self.db.nearest_cluster(k)?;
                    let hit = self.db.search(k)?;
                    Ok(RoutingTrace {
                        block: hit.map(|h| h.block),
                        nearest_cluster: nearest.map(|n| n.0),
                        distance: nearest.map(|n| n.1),
                        member: hit.map(|h| h.member),
                    })
                })
                .collect::<Result<Vec<_>>>()
        });
        let traces = match routed {
            Ok(t) => t,
            Err(e) => {
                for &i in &valid {
                    out[i] = Some(Err(e.clone()));
                }
                return out.into_iter().map(Option::unwrap).collect();
            }
        };

        let mut groups: BTreeMap<(usize, Option<BlockId>), Vec<usize>> = BTreeMap::new();
        for (k, trace) in traces.iter().enumerate() {
            groups.entry((valid_seqs[k].len(), trace.block)).or_default().push(k);
        }
        for ((_, block), members) in groups {
            let group: Vec<&[u32]> = members.iter().map(|&k| valid_seqs[k]).collect();
            match self.model.forward_batch(&group, &self.adapters.with_block(block)) {
                Ok(logits) => {
                    for (row, &k) in members.iter().enumerate() {
                        let l = logits.row(row).to_vec();
                        out[valid[k]] = Some(Ok(Inference {
                            label: argmax(&l),
                            logits: l,
                            trace: traces[k].clone(),
                        }));
                    }
                }
                Err(e) => {
                    for &k in &members {
                        out[valid[k]] = Some(Err(e.clone()));
                    }
                }
            }
        }
        out.into_iter().map(|o| o.expect("every index filled")).collect()
    }

    /// Logits of the unedited host for `seqs`, in input order.
    pub fn base_logits(&self, seqs: &[&[u32]]) -> Result<Matrix> {
        let mut out = Matrix::zeros(seqs.len(), self.model.config().labels);
        for (_, idx) in by_length(seqs) {
            let group: Vec<&[u32]> = idx.iter().map(|&i| seqs[i]).collect();
            let logits = self.model.forward_batch(&group, &crate::hostnet::NoDelta)?;
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(logits.row(r));
            }
        }
        Ok(out)
    }
}

fn by_length(seqs: &[&[u32]]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        m.entry(s.len()).or_default().push(i);
    }
    m
}

/// Writes one JSON line per inference: `{index, label, block, nearest_cluster, distance, member}`.
pub fn write_traces<W: Write>(results: &[Result<Inference>], mut out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        index: usize,
        label: Option<usize>,
        #[serde(flatten)]
        trace: Option<&'a RoutingTrace>,
        error: Option<String>,
    }
    for (index, r) in results.iter().enumerate() {
        let line = match r {
            Ok(i) => Line {
                index,
                label: Some(i.label),
                trace: Some(&i.trace),
                error: None,
            },
            Err(e) => Line {
                index,
                label: None,
                trace: None,
                error: Some(e.to_string()),
            },
        };
        let s = serde_json::to_string(&line).map_err(|e| MeloError::Format(e.to_string()))?;
        writeln!(out, "{s}")?;
    }
    Ok(())
}
