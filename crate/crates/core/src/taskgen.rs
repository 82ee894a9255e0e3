//! Synthetic fact-classification benchmark for sequential editing.
//!
//! Vocabulary layout: `[frames | relations | query | subjects]`. A fact is a
//! unique subject token plus a relation token; every rendering (template) of
//! the fact is `frame.. subject relation query`, where only the frame tokens
//! vary. Rephrasings therefore share the core span and end on the same shared
//! query token, so a shallow layer sees nearly identical last-token states
//! while deeper layers separate facts.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MeloError, Result};
use crate::hostnet::Example;
use crate::rng::derived;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_facts: usize,
    pub num_labels: usize,
    pub vocab_size: usize,
    pub templates_per_fact: usize,
    pub frame_slots: usize,
    pub frame_tokens: usize,
    pub relation_tokens: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_facts: 200,
            num_labels: 11,
            vocab_size: 512,
            templates_per_fact: 20,
            frame_slots: 1,
            frame_tokens: 24,
            relation_tokens: 8,
        }
    }
}

impl TaskConfig {
    pub fn seq_len(&self) -> usize {
        self.frame_slots + 3
    }

    fn query_token(&self) -> u32 {
        (self.frame_tokens + self.relation_tokens) as u32
    }

    fn first_subject(&self) -> usize {
        self.frame_tokens + self.relation_tokens + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub fact_id: usize,
    pub templates: Vec<Vec<u32>>,
    pub base_label: usize,
}

/// Every fact of the benchmark with its renderings and base label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub facts: Vec<Fact>,
    pub num_labels: usize,
}

impl Registry {
    /// Base-task examples: every template of every fact with its base label.
    pub fn base_examples(&self) -> Vec<Example> {
        self.facts
            .iter()
            .flat_map(|f| {
                f.templates.iter().map(move |t| Example {
                    tokens: t.clone(),
                    label: f.base_label,
                })
            })
            .collect()
    }
}

pub fn gen_base_task(cfg: &TaskConfig, seed: u64) -> Result<Registry> {
    if cfg.num_labels < 2 {
        return Err(MeloError::Generation("num_labels must be at least 2".into()));
    }
    if cfg.num_facts == 0 || cfg.templates_per_fact < 4 {
        return Err(MeloError::Generation(
            "need at least one fact and four templates per fact".into(),
        ));
    }
    if cfg.frame_slots == 0 || cfg.frame_tokens < 2 || cfg.relation_tokens == 0 {
        return Err(MeloError::Generation(
            "need at least one frame slot, two frame tokens and one relation".into(),
        ));
    }
    let subjects = cfg.vocab_size.saturating_sub(cfg.first_subject());
    if subjects < cfg.num_facts {
        return Err(MeloError::Generation(format!(
            "vocabulary {} leaves {subjects} subject tokens for {} facts",
            cfg.vocab_size, cfg.num_facts
        )));
    }
    let framings = (cfg.frame_tokens as f64).powi(cfg.frame_slots as i32);
    if framings < cfg.templates_per_fact as f64 {
        return Err(MeloError::Generation(format!(
            "{} frame tokens in {} slots cannot give {} distinct templates",
            cfg.frame_tokens, cfg.frame_slots, cfg.templates_per_fact
        )));
    }

    let mut rng = derived(seed, 0x5441_534b);
    let mut subject_pool: Vec<usize> = (cfg.first_subject()..cfg.vocab_size).collect();
    subject_pool.shuffle(&mut rng);
    // round-robin labels so every class is present, then shuffle
    let mut labels: Vec<usize> = (0..cfg.num_facts).map(|i| i % cfg.num_labels).collect();
    labels.shuffle(&mut rng);

    let facts = (0..cfg.num_facts)
        .map(|fact_id| {
            let subject = subject_pool[fact_id] as u32;
            let relation = (cfg.frame_tokens + rng.random_range(0..cfg.relation_tokens)) as u32;
            let mut framings: BTreeSet<Vec<u32>> = BTreeSet::new();
            let mut templates = Vec::with_capacity(cfg.templates_per_fact);
            while templates.len() < cfg.templates_per_fact {
                let frame: Vec<u32> = (0..cfg.frame_slots)
                    .map(|_| rng.random_range(0..cfg.frame_tokens) as u32)
                    .collect();
                if framings.insert(frame.clone()) {
                    let mut t = frame;
                    t.extend([subject, relation, cfg.query_token()]);
                    templates.push(t);
                }
            }
            Fact {
                fact_id,
                templates,
                base_label: labels[fact_id],
            }
        })
        .collect();
    Ok(Registry {
        facts,
        num_labels: cfg.num_labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub n_batches: usize,
    pub batch_size: usize,
    pub edit_fraction: f64,
    pub recur_fraction: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_batches: 10,
            batch_size: 100,
            edit_fraction: 0.6,
            recur_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub fact_id: usize,
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// A probe input with the label it is scored against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub fact_id: usize,
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStream {
    pub batches: Vec<Vec<Edit>>,
    /// Unseen renderings of edited facts, labelled with the fact's final label.
    pub holdout: Vec<Probe>,
    /// Renderings of never-edited facts, labelled with their base label.
    pub out_of_scope: Vec<Probe>,
}

impl EditStream {
    pub fn edit_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Last label assigned to each edited fact, in fact-id order.
    pub fn final_labels(&self) -> Vec<(usize, usize)> {
        let mut out = std::collections::BTreeMap::new();
        for e in self.batches.iter().flatten() {
            out.insert(e.fact_id, e.label);
        }
        out.into_iter().collect()
    }

    /// Every edit input scored against its fact's final label. Recurring
    /// inputs appear once.
    pub fn final_edits(&self) -> Vec<Probe> {
        let finals: std::collections::BTreeMap<usize, usize> =
            self.final_labels().into_iter().collect();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in self.batches.iter().flatten() {
            if seen.insert(e.tokens.clone()) {
                out.push(Probe {
                    fact_id: e.fact_id,
                    tokens: e.tokens.clone(),
                    label: finals[&e.fact_id],
                });
            }
        }
        out
    }
}

pub fn gen_edit_stream(registry: &Registry, cfg: &StreamConfig, seed: u64) -> Result<EditStream> {
    if !(0.0..=1.0).contains(&cfg.edit_fraction) || !(0.0..1.0).contains(&cfg.recur_fraction) {
        return Err(MeloError::Generation(
            "edit_fraction must be in [0,1] and recur_fraction in [0,1)".into(),
        ));
    }
    let Some(templates) = registry.facts.first().map(|f| f.templates.len()) else {
        return Err(MeloError::Generation("registry has no facts".into()));
    };
    let per_fact = templates / 2;
    if !cfg.batch_size.is_multiple_of(per_fact) {
        return Err(MeloError::Generation(format!(
            "batch size {} is not a multiple of {per_fact} edit templates per fact",
            cfg.batch_size
        )));
    }
    let slots = cfg.batch_size / per_fact;
    let occurrences = slots * cfg.n_batches;
    let unique = (occurrences as f64 / (1.0 + cfg.recur_fraction)).round() as usize;
    let recurring = occurrences - unique;
    let cap = (cfg.edit_fraction * registry.facts.len() as f64).floor() as usize;
    if unique > cap {
        return Err(MeloError::Generation(format!(
            "stream needs {unique} edited facts but only {cap} of {} may be edited",
            registry.facts.len()
        )));
    }
    if cfg.n_batches > 0 && recurring > 0 && cfg.n_batches < 2 {
        return Err(MeloError::Generation("recurring edits need at least two batches".into()));
    }

    let mut rng = derived(seed, 0x5354_524d);
    let mut order: Vec<usize> = (0..registry.facts.len()).collect();
    order.shuffle(&mut rng);
    let (edited, untouched) = order.split_at(unique);

    // each edited fact's templates: first half edited, second half held out
    let mut splits: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(unique);
    for _ in edited {
        let mut idx: Vec<usize> = (0..templates).collect();
        idx.shuffle(&mut rng);
        let (e, h) = idx.split_at(per_fact);
        splits.push((e.to_vec(), h.to_vec()));
    }

    // re-edit quota spread evenly over batches 1..n
    let mut quota = vec![0usize; cfg.n_batches];
    for i in 0..recurring {
        quota[1 + i % (cfg.n_batches - 1)] += 1;
    }

    let mut current: Vec<usize> = edited.iter().map(|&f| registry.facts[f].base_label).collect();
    let mut next_first = 0usize;
    let mut recur_pool: Vec<usize> = Vec::new();
    let mut batches = Vec::with_capacity(cfg.n_batches);
    for q in quota {
        let mut members: Vec<usize> = Vec::with_capacity(slots);
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..q {
            if recur_pool.is_empty() {
                return Err(MeloError::Generation("not enough earlier facts to re-edit".into()));
            }
            let k = rng.random_range(0..recur_pool.len());
            chosen.push(recur_pool.swap_remove(k));
        }
        let firsts: Vec<usize> = (next_first..next_first + slots - q).collect();
        next_first += slots - q;
        members.extend(&firsts);
        members.extend(&chosen);
        members.shuffle(&mut rng);

        let mut batch = Vec::with_capacity(cfg.batch_size);
        for &m in &members {
            let fact = &registry.facts[edited[m]];
            let choices: Vec<usize> = (0..registry.num_labels).filter(|&l| l != current[m]).collect();
            let label = *choices.choose(&mut rng).expect("at least two labels");
            current[m] = label;
            for &t in &splits[m].0 {
                batch.push(Edit {
                    fact_id: fact.fact_id,
                    tokens: fact.templates[t].clone(),
                    label,
                });
            }
        }
        recur_pool.extend(firsts);
        batches.push(batch);
    }

    let holdout = edited
        .iter()
        .enumerate()
        .flat_map(|(m, &f)| {
            let fact = &registry.facts[f];
            let label = current[m];
            splits[m].1.iter().map(move |&t| Probe {
                fact_id: fact.fact_id,
                tokens: fact.templates[t].clone(),
                label,
            })
        })
        .collect();
    let mut oos: Vec<usize> = untouched.to_vec();
    oos.sort_unstable();
    let out_of_scope = oos
        .iter()
        .flat_map(|&f| {
            let fact = &registry.facts[f];
            fact.templates.iter().map(move |t| Probe {
                fact_id: fact.fact_id,
                tokens: t.clone(),
                label: fact.base_label,
            })
        })
        .collect();
    Ok(EditStream {
        batches,
        holdout,
        out_of_scope,
    })
}

/// Split tag of a dataset record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Base,
    /// 1-based batch number.
    Edit(usize),
    Holdout,
    Oos,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Base => f.write_str("base"),
            Split::Edit(t) => write!(f, "edit:{t}"),
            Split::Holdout => f.write_str("holdout"),
            Split::Oos => f.write_str("oos"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = MeloError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "holdout" => Ok(Split::Holdout),
            "oos" => Ok(Split::Oos),
            _ => s
                .strip_prefix("edit:")
                .and_then(|t| t.parse().ok())
                .filter(|&t: &usize| t >= 1)
                .map(Split::Edit)
                .ok_or_else(|| MeloError::Format(format!("unknown split {s:?}"))),
        }
    }
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub fact_id: usize,
    pub tokens: Vec<u32>,
    pub label: usize,
    pub split: Split,
}

/// Flattens a registry and a stream into dataset records, base split first.
pub fn to_records(registry: &Registry, stream: &EditStream) -> Vec<Record> {
    let mut out: Vec<Record> = registry
        .base_examples()
        .into_iter()
        .zip(registry.facts.iter().flat_map(|f| f.templates.iter().map(|_| f.fact_id)))
        .map(|(e, fact_id)| Record {
            fact_id,
            tokens: e.tokens,
            label: e.label,
            split: Split::Base,
        })
        .collect();
    for (t, batch) in stream.batches.iter().enumerate() {
        out.extend(batch.iter().map(|e| Record {
            fact_id: e.fact_id,
            tokens: e.tokens.clone(),
            label: e.label,
            split: Split::Edit(t + 1),
        }));
    }
    for (split, probes) in [(Split::Holdout, &stream.holdout), (Split::Oos, &stream.out_of_scope)] {
        out.extend(probes.iter().map(|p| Record {
            fact_id: p.fact_id,
            tokens: p.tokens.clone(),
            label: p.label,
            split,
        }));
    }
    out
}

/// Rebuilds base examples and an edit stream from dataset records.
pub fn from_records(records: &[Record]) -> Result<(Vec<Example>, EditStream)> {
    let mut base = Vec::new();
    let mut stream = EditStream::default();
    for r in records {
        match r.split {
            Split::Base => base.push(Example {
                tokens: r.tokens.clone(),
                label: r.label,
            }),
            Split::Edit(t) => {
                if stream.batches.len() < t {
                    stream.batches.resize_with(t, Vec::new);
                }
                stream.batches[t - 1].push(Edit {
                    fact_id: r.fact_id,
                    tokens: r.tokens.clone(),
                    label: r.label,
                });
            }
            Split::Holdout => stream.holdout.push(Probe {
                fact_id: r.fact_id,
                tokens: r.tokens.clone(),
                label: r.label,
            }),
            Split::Oos => stream.out_of_scope.push(Probe {
                fact_id: r.fact_id,
                tokens: r.tokens.clone(),
                label: r.label,
            }),
        }
    }
    if let Some(t) = stream.batches.iter().position(Vec::is_empty) {
        return Err(MeloError::Format(format!("edit batch {} has no records", t + 1)));
    }
    Ok((base, stream))
}
