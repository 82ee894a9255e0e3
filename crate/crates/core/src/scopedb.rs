//! Key → block store organised as labelled clusters with dynamic radii.
//!
//! Centers are fixed when a cluster is created. Distances are exact
//! Euclidean over a linear scan; ties go to the lowest cluster id and then
//! to the earliest inserted member.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynlora::BlockId;
use crate::error::{shape_err, MeloError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub key: Vec<f64>,
    pub value: BlockId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub center: Vec<f64>,
    pub radius: f64,
    pub label: usize,
    pub members: Vec<Member>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsertKind {
    Added,
    Expanded,
    Conflicted,
    AbsorbedSameLabel,
    OverwrittenNewLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsertOutcome {
    pub kind: UpsertKind,
    /// Cluster ids touched, the created one last.
    pub clusters: Vec<usize>,
    /// Member keys deleted by a conflict shrink.
    pub removed: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub cluster: usize,
    /// Index of the matched member inside the cluster.
    pub member: usize,
    pub block: BlockId,
    /// Distance from the query to the cluster center.
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbStats {
    pub clusters: usize,
    pub conflicts: usize,
    pub forgotten: usize,
    pub keys: usize,
    pub upserts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScopeDb {
    dim: usize,
    r_init: f64,
    key_layer: usize,
    pub(crate) clusters: Vec<ClusterRecord>,
    pub(crate) conflicts: usize,
    pub(crate) forgotten: usize,
    pub(crate) upserts: usize,
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl ScopeDb {
    pub fn new(dim: usize, r_init: f64, key_layer: usize) -> Result<Self> {
        if dim == 0 {
            return Err(MeloError::Config("key dimension must be positive".into()));
        }
        if !(r_init.is_finite() && r_init >= 0.0) {
            return Err(MeloError::Config(format!("initial radius {r_init} must be finite and >= 0")));
        }
        Ok(Self {
            dim,
            r_init,
            key_layer,
            clusters: Vec::new(),
            conflicts: 0,
            forgotten: 0,
            upserts: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn r_init(&self) -> f64 {
        self.r_init
    }

    pub fn key_layer(&self) -> usize {
        self.key_layer
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    fn check(&self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(shape_err("scopedb", format!("key of {} vs database {}", key.len(), self.dim)));
        }
        if key.iter().any(|v| !v.is_finite()) {
            return Err(MeloError::Numeric("non-finite key".into()));
        }
        Ok(())
    }

    pub fn nearest_cluster(&self, key: &[f64]) -> Result<Option<(usize, f64)>> {
        self.check(key)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.clusters.iter().enumerate() {
            let d = distance(&c.center, key);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        Ok(best)
    }

    pub fn search(&self, key: &[f64]) -> Result<Option<SearchHit>> {
        let Some((ci, d)) = self.nearest_cluster(key)? else {
            return Ok(None);
        };
        let c = &self.clusters[ci];
        if d > c.radius {
            return Ok(None);
        }
        let member = nearest_member(c, key);
        Ok(Some(SearchHit {
            cluster: ci,
            member,
            block: c.members[member].value,
            distance: d,
        }))
    }

    pub fn upsert_edit(&mut self, key: &[f64], value: BlockId, label: usize) -> Result<UpsertOutcome> {
        let nearest = self.nearest_cluster(key)?;
        self.upserts += 1;
        let outcome = match nearest {
            Some((ci, d)) if d <= self.clusters[ci].radius + self.r_init => {
                let c = &mut self.clusters[ci];
                let same = c.label == label;
                if d > c.radius && same {
                    c.radius = d;
                    c.members.push(Member {
                        key: key.to_vec(),
                        value,
                    });
                    UpsertOutcome {
                        kind: UpsertKind::Expanded,
                        clusters: vec![ci],
                        removed: 0,
                    }
                } else if d > c.radius {
                    let half = d / 2.0;
                    c.radius = half - 1e-9 * d;
                    let before = c.members.len();
                    let r = c.radius;
                    let center = c.center.clone();
                    c.members.retain(|m| distance(&m.key, &center) <= r);
                    let removed = before - c.members.len();
                    self.forgotten += removed;
                    self.conflicts += 1;
                    self.clusters.push(ClusterRecord {
                        center: key.to_vec(),
                        radius: half,
                        label,
                        members: vec![Member {
                            key: key.to_vec(),
                            value,
                        }],
                    });
                    UpsertOutcome {
                        kind: UpsertKind::Conflicted,
                        clusters: vec![ci, self.clusters.len() - 1],
                        removed,
                    }
                } else if same {
                    match c.members.iter_mut().find(|m| m.key == key) {
                        Some(m) => m.value = value,
                        None => c.members.push(Member {
                            key: key.to_vec(),
                            value,
                        }),
                    }
                    UpsertOutcome {
                        kind: UpsertKind::AbsorbedSameLabel,
                        clusters: vec![ci],
                        removed: 0,
                    }
                } else {
                    let j = nearest_member(c, key);
                    c.members[j].value = value;
                    c.label = label;
                    UpsertOutcome {
                        kind: UpsertKind::OverwrittenNewLabel,
                        clusters: vec![ci],
                        removed: 0,
                    }
                }
            }
            _ => {
                self.clusters.push(ClusterRecord {
                    center: key.to_vec(),
                    radius: self.r_init,
                    label,
                    members: vec![Member {
                        key: key.to_vec(),
                        value,
                    }],
                });
                UpsertOutcome {
                    kind: UpsertKind::Added,
                    clusters: vec![self.clusters.len() - 1],
                    removed: 0,
                }
            }
        };
        debug_assert!(self.containment_holds());
        Ok(outcome)
    }

    /// Every member lies inside its cluster's radius and no cluster is empty.
    pub fn containment_holds(&self) -> bool {
        self.clusters.iter().all(|c| {
            !c.members.is_empty() && c.members.iter().all(|m| distance(&m.key, &c.center) <= c.radius)
        })
    }

    pub fn stats(&self) -> DbStats {
        DbStats {
            clusters: self.clusters.len(),
            conflicts: self.conflicts,
            forgotten: self.forgotten,
            keys: self.clusters.iter().map(|c| c.members.len()).sum(),
            upserts: self.upserts,
        }
    }

    /// One JSON line per cluster: `{center, radius, label, member_count}`.
    pub fn dump_clusters<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            center: &'a [f64],
            radius: f64,
            label: usize,
            member_count: usize,
        }
        for c in &self.clusters {
            let line = Line {
                center: &c.center,
                radius: c.radius,
                label: c.label,
                member_count: c.members.len(),
            };
            let s = serde_json::to_string(&line).map_err(|e| MeloError::Format(e.to_string()))?;
            writeln!(out, "{s}")?;
        }
        Ok(())
    }

    /// Raw member keys as CSV: `cluster,block,k0,k1,...`.
    pub fn dump_keys<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|i| format!("k{i}")).collect();
        writeln!(out, "cluster,block,{}", header.join(","))?;
        for (ci, c) in self.clusters.iter().enumerate() {
            for m in &c.members {
                let vals: Vec<String> = m.key.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{ci},{},{}", m.value, vals.join(","))?;
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        dim: usize,
        r_init: f64,
        key_layer: usize,
        clusters: Vec<ClusterRecord>,
        counters: (usize, usize, usize),
    ) -> Result<Self> {
        let mut db = Self::new(dim, r_init, key_layer)?;
        if clusters
            .iter()
            .any(|c| c.center.len() != dim || c.members.iter().any(|m| m.key.len() != dim))
        {
            return Err(MeloError::Format("stored key dimension mismatch".into()));
        }
        db.clusters = clusters;
        (db.conflicts, db.forgotten, db.upserts) = counters;
        if !db.containment_holds() {
            return Err(MeloError::Format("stored clusters violate containment".into()));
        }
        Ok(db)
    }
}

fn nearest_member(c: &ClusterRecord, key: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, m) in c.members.iter().enumerate() {
        let d = distance(&m.key, key);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn blk(t: usize) -> BlockId {
        BlockId::new(t).unwrap()
    }

    #[test]
    fn empty_db() {
        let db = ScopeDb::new(2, 1.0, 0).unwrap();
        assert_eq!(db.nearest_cluster(&[0.0, 0.0]).unwrap(), None);
        assert_eq!(db.search(&[0.0, 0.0]).unwrap(), None);
        assert_eq!(db.stats(), DbStats::default());
    }

    #[test]
    fn negative_radius_rejected_zero_allowed() {
        assert!(ScopeDb::new(2, -1.0, 0).is_err());
        assert!(ScopeDb::new(2, 0.0, 0).is_ok());
    }

    #[test]
    fn first_upsert_adds_with_initial_radius() {
        let mut db = ScopeDb::new(2, 1.5, 0).unwrap();
        let out = db.upsert_edit(&[3.0, 4.0], blk(1), 7).unwrap();
        assert_eq!(out.kind, UpsertKind::Added);
        assert_eq!(db.clusters()[0].radius, 1.5);
        assert_eq!(db.nearest_cluster(&[3.0, 4.0]).unwrap(), Some((0, 0.0)));
        assert_eq!(db.search(&[3.0, 4.0]).unwrap().unwrap().block, blk(1));
    }

    #[test]
    fn expand_to_distance() {
        let mut db = ScopeDb::new(2, 1.0, 0).unwrap();
        db.upsert_edit(&[0.0, 0.0], blk(1), 0).unwrap();
        db.clusters[0].radius = 2.0;
        let out = db.upsert_edit(&[2.5, 0.0], blk(2), 0).unwrap();
        assert_eq!(out.kind, UpsertKind::Expanded);
        assert_eq!(db.clusters()[0].radius, 2.5);
    }

    #[test]
    fn conflict_halves_distance() {
        let mut db = ScopeDb::new(2, 4.0, 0).unwrap();
        db.upsert_edit(&[0.0, 0.0], blk(1), 0).unwrap();
        db.clusters[0].radius = 2.0;
        let out = db.upsert_edit(&[6.0, 0.0], blk(2), 1).unwrap();
        assert_eq!(out.kind, UpsertKind::Conflicted);
        assert_eq!(out.clusters, vec![0, 1]);
        assert_eq!(db.clusters()[0].radius, 3.0 - 6e-9);
        assert_eq!(db.clusters()[1].radius, 3.0);
        assert_eq!(db.clusters()[1].label, 1);
        assert_eq!(db.stats().conflicts, 1);
        // the midpoint ties to cluster 0, whose shrunk ball excludes it
        assert_eq!(db.search(&[3.0, 0.0]).unwrap(), None);
        assert_eq!(db.search(&[3.0 + 1e-6, 0.0]).unwrap().unwrap().cluster, 1);
        assert_eq!(db.search(&[3.0 - 1e-6, 0.0]).unwrap().unwrap().cluster, 0);
    }

    #[test]
    fn conflict_shrink_forgets_far_member() {
        let mut db = ScopeDb::new(1, 3.0, 0).unwrap();
        db.upsert_edit(&[0.0], blk(1), 0).unwrap();
        db.upsert_edit(&[1.0], blk(1), 0).unwrap();
        db.clusters[0].members.push(Member {
            key: vec![2.8],
            value: blk(1),
        });
        db.clusters[0].radius = 3.0;
        // d = 4 shrinks to 2 - eps; the member at 2.8 goes
        let out = db.upsert_edit(&[-4.0], blk(2), 5).unwrap();
        assert_eq!(out.kind, UpsertKind::Conflicted);
        assert_eq!(out.removed, 1);
        assert_eq!(db.stats().forgotten, 1);
        assert_eq!(db.clusters()[0].members.len(), 2);
        assert!(db.containment_holds());
    }

    #[test]
    fn in_radius_cases() {
        let mut db = ScopeDb::new(1, 1.0, 0).unwrap();
        db.upsert_edit(&[0.0], blk(1), 3).unwrap();
        let a = db.upsert_edit(&[0.5], blk(1), 3).unwrap();
        assert_eq!(a.kind, UpsertKind::AbsorbedSameLabel);
        let o = db.upsert_edit(&[0.4], blk(2), 4).unwrap();
        assert_eq!(o.kind, UpsertKind::OverwrittenNewLabel);
        // nearest member (0.5) now points at block 2, the query itself is not stored
        assert_eq!(db.clusters()[0].label, 4);
        assert_eq!(db.clusters()[0].members.len(), 2);
        assert_eq!(db.search(&[0.5]).unwrap().unwrap().block, blk(2));
        assert_eq!(db.search(&[0.0]).unwrap().unwrap().block, blk(1));
        // same label, identical key: value replaced, no duplicate
        db.upsert_edit(&[0.0], blk(3), 4).unwrap();
        assert_eq!(db.clusters()[0].members.len(), 2);
        assert_eq!(db.search(&[0.0]).unwrap().unwrap().block, blk(3));
    }

    #[test]
    fn distant_keys_make_separate_clusters() {
        let mut db = ScopeDb::new(1, 1.0, 0).unwrap();
        for k in 0..5 {
            db.upsert_edit(&[10.0 * k as f64], blk(1), 0).unwrap();
        }
        assert_eq!(db.stats().clusters, 5);
        assert_eq!(db.search(&[25.0]).unwrap(), None);
    }

    #[test]
    fn wrong_dimension_is_shape_error() {
        let mut db = ScopeDb::new(2, 1.0, 0).unwrap();
        assert!(matches!(db.upsert_edit(&[1.0], blk(1), 0), Err(MeloError::Shape { .. })));
        assert!(matches!(db.search(&[1.0, 2.0, 3.0]), Err(MeloError::Shape { .. })));
    }

    #[test]
    fn dumps_have_one_record_per_cluster_and_key() {
        let mut db = ScopeDb::new(2, 1.0, 0).unwrap();
        db.upsert_edit(&[0.0, 0.0], blk(1), 0).unwrap();
        db.upsert_edit(&[0.5, 0.0], blk(1), 0).unwrap();
        db.upsert_edit(&[9.0, 0.0], blk(2), 1).unwrap();
        let mut jl = Vec::new();
        db.dump_clusters(&mut jl).unwrap();
        let jl = String::from_utf8(jl).unwrap();
        assert_eq!(jl.lines().count(), 2);
        assert!(jl.lines().next().unwrap().contains("\"member_count\":2"));
        let mut csv = Vec::new();
        db.dump_keys(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), "cluster,block,k0,k1");
    }

    proptest! {
        #[test]
        fn counters_monotone_and_containment_holds(
            seed in any::<u64>(),
            r_init in 0.0f64..3.0,
        ) {
            let mut rng = seeded(seed);
            let mut db = ScopeDb::new(2, r_init, 0).unwrap();
            let mut last = db.stats();
            for i in 0..200 {
                let k = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
                db.upsert_edit(&k, blk(1 + i / 20), rng.random_range(0..3)).unwrap();
                prop_assert!(db.containment_holds());
                let s = db.stats();
                prop_assert!(s.conflicts >= last.conflicts && s.forgotten >= last.forgotten);
                prop_assert_eq!(s.upserts, last.upserts + 1);
                last = s;
            }
        }
    }
}
