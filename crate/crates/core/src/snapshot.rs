//! Binary engine snapshot.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MELO" | u32 version | u64 len, config TOML | [32] sha256(config TOML)
//! u8 status (0 complete, 1 incomplete) | u64 failed batch
//! host:     u8 frozen | u64 n | n × tensor
//! adapters: u64 n | n × (u64 layer, u64 p, f64 alpha, u64 seed, tensor B, tensor A)
//! db:       u64 dim | f64 r_init | u64 key layer | u64 conflicts | u64 forgotten
//!           | u64 upserts | u64 n | n × cluster
//! log:      u64 n | n × batch
//! [32] sha256 of everything above
//! ```
//!
//! A tensor is `u64 rows, u64 cols` followed by `rows·cols` f64 values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::EngineConfig;
use crate::dynlora::{AdapterSet, BlockId, DynLoraAdapter};
use crate::editor::{EditorState, LoggedBatch};
use crate::error::{MeloError, Result};
use crate::hostnet::{HostModel, LayerHookConfig};
use crate::numkit::Matrix;
use crate::scopedb::{ClusterRecord, Member, ScopeDb};
use crate::taskgen::Edit;

pub const MAGIC: &[u8; 4] = b"MELO";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// An edit run stopped at block `failed_batch` (1-based); the state holds
    /// every batch applied before it.
    Incomplete { failed_batch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub config: EngineConfig,
    pub status: RunStatus,
    pub state: EditorState,
}

impl Snapshot {
    /// The stored config echoes `config` with the editor section taken from
    /// the state, so the file describes exactly what it holds.
    pub fn new(config: &EngineConfig, state: EditorState, status: RunStatus) -> Result<Self> {
        let mut config = config.clone();
        if config.host != *state.model().config() {
            return Err(MeloError::Contract("config host section differs from the model".into()));
        }
        config.editor = state.config().clone();
        Ok(Self { config, status, state })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let toml = self.config.to_toml();
        w.u64(toml.len() as u64);
        w.buf.extend_from_slice(toml.as_bytes());
        w.buf.extend_from_slice(&Sha256::digest(toml.as_bytes()));
        match self.status {
            RunStatus::Complete => {
                w.u8(0);
                w.u64(0);
            }
            RunStatus::Incomplete { failed_batch } => {
                w.u8(1);
                w.u64(failed_batch as u64);
            }
        }

        let s = &self.state;
        w.u8(s.model.is_frozen() as u8);
        let params = s.model.params();
        w.u64(params.len() as u64);
        for p in params {
            w.tensor(p);
        }

        let adapters = s.adapters.adapters();
        w.u64(adapters.len() as u64);
        for a in adapters {
            w.u64(a.layer_id() as u64);
            w.u64(a.partial_rank() as u64);
            w.f64(a.alpha());
            w.u64(a.seed());
            w.tensor(a.b());
            w.tensor(a.a());
        }

        let db = &s.db;
        w.u64(db.dim() as u64);
        w.f64(db.r_init());
        w.u64(db.key_layer() as u64);
        w.u64(db.conflicts as u64);
        w.u64(db.forgotten as u64);
        w.u64(db.upserts as u64);
        w.u64(db.clusters().len() as u64);
        for c in db.clusters() {
            w.vec(&c.center);
            w.f64(c.radius);
            w.u64(c.label as u64);
            w.u64(c.members.len() as u64);
            for m in &c.members {
                w.vec(&m.key);
                w.u64(m.value.get() as u64);
            }
        }

        w.u64(s.log.len() as u64);
        for b in &s.log {
            w.u64(b.block.get() as u64);
            w.u64(b.edits.len() as u64);
            for e in &b.edits {
                w.u64(e.fact_id as u64);
                w.u64(e.label as u64);
                w.u64(e.tokens.len() as u64);
                for &t in &e.tokens {
                    w.u32(t);
                }
            }
            w.u64(b.predicted.len() as u64);
            for &p in &b.predicted {
                w.u64(p as u64);
            }
        }

        let digest = Sha256::digest(&w.buf);
        w.buf.extend_from_slice(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(MeloError::Format("not a snapshot (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(MeloError::Format(format!(
                "snapshot version {version} is not supported (expected {VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(MeloError::Format("snapshot checksum mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };

        let toml_len = r.len()?;
        let toml = std::str::from_utf8(r.take(toml_len)?)
            .map_err(|_| MeloError::Format("config echo is not UTF-8".into()))?
            .to_string();
        if Sha256::digest(toml.as_bytes()).as_slice() != r.take(32)? {
            return Err(MeloError::Format("config echo does not match its checksum".into()));
        }
        let config = EngineConfig::from_toml(&toml)
            .map_err(|e| MeloError::Format(format!("config echo: {e}")))?;
        let status = match (r.u8()?, r.u64()?) {
            (0, _) => RunStatus::Complete,
            (1, b) => RunStatus::Incomplete {
                failed_batch: b as usize,
            },
            (s, _) => return Err(MeloError::Format(format!("unknown run status {s}"))),
        };

        let frozen = r.u8()? != 0;
        let n = r.len()?;
        let params = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let model = HostModel::from_params(config.host.clone(), params, frozen)?;

        let n = r.len()?;
        let mut adapters = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = r.u64()? as usize;
            let p = r.u64()? as usize;
            let alpha = r.f64()?;
            let seed = r.u64()?;
            let b = r.tensor()?;
            let a = r.tensor()?;
            adapters.push(DynLoraAdapter::from_parts(b, a, p, alpha, layer, seed)?);
        }
        let adapters = AdapterSet::from_adapters(adapters)?;

        let dim = r.u64()? as usize;
        let r_init = r.f64()?;
        let key_layer = r.u64()? as usize;
        let counters = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
        let n = r.len()?;
        let mut clusters = Vec::with_capacity(n);
        for _ in 0..n {
            let center = r.vec()?;
            let radius = r.f64()?;
            let label = r.u64()? as usize;
            let k = r.len()?;
            let mut members = Vec::with_capacity(k);
            for _ in 0..k {
                let key = r.vec()?;
                let value = r.block()?;
                members.push(Member { key, value });
            }
            clusters.push(ClusterRecord {
                center,
                radius,
                label,
                members,
            });
        }
        let db = ScopeDb::from_parts(dim, r_init, key_layer, clusters, counters)?;

        let n = r.len()?;
        let mut log = Vec::with_capacity(n);
        for _ in 0..n {
            let block = r.block()?;
            let k = r.len()?;
            let mut edits = Vec::with_capacity(k);
            for _ in 0..k {
                let fact_id = r.u64()? as usize;
                let label = r.u64()? as usize;
                let len = r.len()?;
                let tokens = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                edits.push(Edit {
                    fact_id,
                    tokens,
                    label,
                });
            }
            let k = r.len()?;
            let predicted = (0..k).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            log.push(LoggedBatch { block, edits, predicted });
        }
        if r.pos != body.len() {
            return Err(MeloError::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }

        let editor = config.editor.clone();
        let hooks = LayerHookConfig::new(editor.key_layer, editor.lora_layers.clone(), model.config().layers)
            .map_err(|e| MeloError::Format(format!("stored hooks: {e}")))?;
        if adapters.layers() != hooks.lora_layers() || db.key_layer() != editor.key_layer || db.dim() != model.config().width {
            return Err(MeloError::Format("stored state disagrees with its config echo".into()));
        }
        let state = EditorState {
            model,
            hooks,
            adapters,
            db,
            config: editor,
            log,
        };
        Ok(Self { config, status, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn tensor(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &x in m.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| MeloError::Format(format!("unexpected end of snapshot at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count that must fit in the remaining bytes at one byte per item.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(MeloError::Format(format!("count {n} exceeds remaining snapshot bytes")));
        }
        Ok(n as usize)
    }
    fn block(&mut self) -> Result<BlockId> {
        BlockId::new(self.u64()? as usize).map_err(|_| MeloError::Format("block index 0 in snapshot".into()))
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| MeloError::Format(format!("tensor {rows}x{cols} exceeds snapshot size")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::EditorConfig;
    use crate::hostnet::{pretrain, Example, HostConfig, PretrainOptions};

    fn tiny() -> (EngineConfig, EditorState) {
        let host = HostConfig {
            vocab: 16,
            width: 8,
            ffn: 12,
            heads: 2,
            layers: 3,
            labels: 3,
            max_len: 4,
            ..Default::default()
        };
        let data: Vec<Example> = (0..6)
            .map(|i| Example {
                tokens: vec![i as u32 + 1, 9, 10],
                label: i % 3,
            })
            .collect();
        let opts = PretrainOptions {
            epochs: 200,
            lr: 1e-2,
            batch_size: 6,
            ..Default::default()
        };
        let model = pretrain(&host, &data, &opts, 3).unwrap();
        let editor = EditorConfig {
            key_layer: 0,
            lora_layers: vec![1, 2],
            rank: 2,
            partial_rank: 1,
            alpha: 4.0,
            r_init: 0.5,
            iterations: 60,
            lr: 0.5,
        };
        let config = EngineConfig {
            host,
            pretrain: opts,
            editor: editor.clone(),
            ..Default::default()
        };
        let mut state = EditorState::new(model, &editor, 5).unwrap();
        let batch = vec![Edit {
            fact_id: 0,
            tokens: vec![1, 9, 10],
            label: 2,
        }];
        state.apply_batch(&batch).unwrap();
        (config, state)
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let (config, state) = tiny();
        let snap = Snapshot::new(&config, state, RunStatus::Complete).unwrap();
        let bytes = snap.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Snapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state.model().checksum(), snap.state.model().checksum());
    }

    #[test]
    fn incomplete_marker_survives() {
        let (config, state) = tiny();
        let snap = Snapshot::new(&config, state, RunStatus::Incomplete { failed_batch: 2 }).unwrap();
        let back = Snapshot::from_bytes(&snap.to_bytes()).unwrap();
        assert_eq!(back.status, RunStatus::Incomplete { failed_batch: 2 });
    }

    #[test]
    fn rejects_version_magic_and_tampering() {
        let (config, state) = tiny();
        let bytes = Snapshot::new(&config, state, RunStatus::Complete).unwrap().to_bytes();

        let mut v = bytes.clone();
        v[4] = 9;
        let err = Snapshot::from_bytes(&v).unwrap_err();
        assert!(matches!(&err, MeloError::Format(m) if m.contains("version")), "{err}");

        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(Snapshot::from_bytes(&m), Err(MeloError::Format(_))));

        let mut t = bytes.clone();
        let mid = t.len() / 2;
        t[mid] ^= 1;
        assert!(matches!(Snapshot::from_bytes(&t), Err(MeloError::Format(_))));

        assert!(matches!(Snapshot::from_bytes(&bytes[..bytes.len() - 1]), Err(MeloError::Format(_))));
    }

    #[test]
    fn host_mismatch_rejected_on_build() {
        let (mut config, state) = tiny();
        config.host.labels = 4;
        assert!(matches!(
            Snapshot::new(&config, state, RunStatus::Complete),
            Err(MeloError::Contract(_))
        ));
    }
}
