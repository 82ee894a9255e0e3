//! Small transformer token classifier used as the frozen base model.
//!
//! Pre-norm causal encoder stack: token + position embeddings, `layers`
//! blocks of multi-head self-attention and a ReLU feed-forward network, then a
//! final layer norm and a linear head read at the last position. Two hooks are
//! exposed for editing:
//!
//! * [`HostModel::hidden_at`] captures the residual stream after a layer.
//! * [`FfnDelta`] lets a caller add a term to the output projection of any
//!   feed-forward block (the low-rank adapter attachment point).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MeloError, Result};
use crate::numkit::{Adam, Matrix, Tape, Var};
use crate::rng::derived;

/// Which position(s) of a layer's output form the key vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPooling {
    #[default]
    LastToken,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    pub vocab: usize,
    pub width: usize,
    pub ffn: usize,
    pub heads: usize,
    pub layers: usize,
    pub labels: usize,
    pub max_len: usize,
    pub key_pooling: KeyPooling,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            vocab: 512,
            width: 64,
            ffn: 128,
            heads: 4,
            layers: 6,
            labels: 11,
            max_len: 16,
            key_pooling: KeyPooling::LastToken,
        }
    }
}

impl HostConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("width", self.width),
            ("ffn", self.ffn),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(MeloError::Config(format!("host.{name} must be positive")));
            }
        }
        if self.labels < 2 {
            return Err(MeloError::Config("host.labels must be at least 2".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(MeloError::Config(format!(
                "host.width {} not divisible by host.heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Where keys are read and where adapters attach.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHookConfig {
    key_layer: usize,
    lora_layers: Vec<usize>,
}

impl LayerHookConfig {
    /// The key layer must sit strictly below every adapter layer so keys do
    /// not depend on which block is active.
    pub fn new(key_layer: usize, mut lora_layers: Vec<usize>, layers: usize) -> Result<Self> {
        lora_layers.sort_unstable();
        lora_layers.dedup();
        let Some(&lowest) = lora_layers.first() else {
            return Err(MeloError::Config("at least one adapter layer is required".into()));
        };
        if key_layer >= lowest {
            return Err(MeloError::Config(format!(
                "key layer {key_layer} must precede every adapter layer (lowest is {lowest})"
            )));
        }
        if let Some(&bad) = lora_layers.iter().find(|&&l| l >= layers) {
            return Err(MeloError::Config(format!(
                "adapter layer {bad} out of range for {layers} layers"
            )));
        }
        Ok(Self {
            key_layer,
            lora_layers,
        })
    }

    pub fn key_layer(&self) -> usize {
        self.key_layer
    }

    pub fn lora_layers(&self) -> &[usize] {
        &self.lora_layers
    }

    /// First layer whose computation can be altered by an adapter.
    pub fn first_edited_layer(&self) -> usize {
        self.lora_layers[0]
    }
}

/// Additive term on a feed-forward output projection.
pub trait FfnDelta {
    /// Given the post-activation input `hidden` of layer `layer`'s output
    /// projection, returns the term to add to that projection's output, or
    /// `None` to leave the layer untouched.
    fn ffn_delta<'t>(&'t self, tape: &mut Tape<'t>, layer: usize, hidden: Var)
        -> Result<Option<Var>>;
}

/// The absent adapter: every layer runs its base weights only.
pub struct NoDelta;

impl FfnDelta for NoDelta {
    fn ffn_delta<'t>(&'t self, _: &mut Tape<'t>, _: usize, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub(crate) ln1_g: Matrix,
    pub(crate) ln1_b: Matrix,
    pub(crate) wq: Matrix,
    pub(crate) wk: Matrix,
    pub(crate) wv: Matrix,
    pub(crate) wo: Matrix,
    pub(crate) ln2_g: Matrix,
    pub(crate) ln2_b: Matrix,
    pub(crate) w1: Matrix,
    pub(crate) b1: Matrix,
    pub(crate) w2: Matrix,
    pub(crate) b2: Matrix,
}

impl Block {
    fn params(&self) -> [&Matrix; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g,
            &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostModel {
    config: HostConfig,
    pub(crate) tok_emb: Matrix,
    pub(crate) pos_emb: Matrix,
    pub(crate) blocks: Vec<Block>,
    pub(crate) lnf_g: Matrix,
    pub(crate) lnf_b: Matrix,
    pub(crate) head_w: Matrix,
    pub(crate) head_b: Matrix,
    frozen: bool,
}

/// Tape handles for one block's parameters.
pub struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Tape handles for every host parameter, bound without copying.
pub struct HostVars {
    tok: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
}

impl HostVars {
    /// Handles in the same canonical order as [`HostModel::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok, self.pos];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b, self.head_w, self.head_b]);
        out
    }
}

impl HostModel {
    pub fn init(config: HostConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived(seed, 0x484f_5354);
        let (w, f) = (config.width, config.ffn);
        let proj_std = 1.0 / (w as f64).sqrt();
        let out_std = proj_std / ((2 * config.layers) as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_g: Matrix::filled(1, w, 1.0),
                ln1_b: Matrix::zeros(1, w),
                wq: Matrix::gaussian(w, w, proj_std, &mut rng),
                wk: Matrix::gaussian(w, w, proj_std, &mut rng),
                wv: Matrix::gaussian(w, w, proj_std, &mut rng),
                wo: Matrix::gaussian(w, w, out_std, &mut rng),
                ln2_g: Matrix::filled(1, w, 1.0),
                ln2_b: Matrix::zeros(1, w),
                w1: Matrix::gaussian(w, f, proj_std, &mut rng),
                b1: Matrix::zeros(1, f),
                w2: Matrix::gaussian(f, w, out_std * (w as f64 / f as f64).sqrt(), &mut rng),
                b2: Matrix::zeros(1, w),
            })
            .collect();
        Ok(Self {
            tok_emb: Matrix::gaussian(config.vocab, w, 1.0, &mut rng),
            pos_emb: Matrix::gaussian(config.max_len, w, 0.5, &mut rng),
            blocks,
            lnf_g: Matrix::filled(1, w, 1.0),
            lnf_b: Matrix::zeros(1, w),
            head_w: Matrix::gaussian(w, config.labels, proj_std, &mut rng),
            head_b: Matrix::zeros(1, config.labels),
            config,
            frozen: false,
        })
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Rebuilds a model from parameters in [`HostModel::params`] order.
    pub(crate) fn from_params(config: HostConfig, params: Vec<Matrix>, frozen: bool) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        let slots = model.params_mut();
        if slots.len() != params.len() {
            return Err(MeloError::Format(format!(
                "expected {} host tensors, found {}",
                slots.len(),
                params.len()
            )));
        }
        for (i, (slot, p)) in slots.into_iter().zip(params).enumerate() {
            if slot.shape() != p.shape() {
                return Err(MeloError::Format(format!(
                    "host tensor {i}: expected {:?}, found {:?}",
                    slot.shape(),
                    p.shape()
                )));
            }
            *slot = p;
        }
        model.frozen = frozen;
        Ok(model)
    }

    /// Output and input dimensions `(m, d)` of every feed-forward output
    /// projection.
    pub fn ffn_out_dims(&self) -> (usize, usize) {
        (self.config.width, self.config.ffn)
    }

    /// All parameters in a fixed canonical order.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// SHA-256 over the bit patterns of every parameter, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update((p.rows() as u64).to_le_bytes());
            h.update((p.cols() as u64).to_le_bytes());
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that `seqs` is a non-empty batch of equal-length, in-vocabulary
    /// token sequences and returns the common length.
    pub fn check_batch(&self, seqs: &[&[u32]]) -> Result<usize> {
        let Some(first) = seqs.first() else {
            return Err(MeloError::Input("empty batch".into()));
        };
        let len = first.len();
        if len == 0 {
            return Err(MeloError::Input("empty token sequence".into()));
        }
        if len > self.config.max_len {
            return Err(MeloError::Input(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        for s in seqs {
            if s.len() != len {
                return Err(MeloError::Input(format!(
                    "mixed sequence lengths {len} and {} in one batch",
                    s.len()
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.config.vocab) {
                return Err(MeloError::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab
                )));
            }
        }
        Ok(len)
    }

    /// Binds every parameter onto `tape` by reference.
    pub fn bind<'t>(&'t self, tape: &mut Tape<'t>) -> HostVars {
        self.bind_with(tape, true)
    }

    /// Like [`HostModel::bind`], but backward skips every host weight.
    pub fn bind_frozen<'t>(&'t self, tape: &mut Tape<'t>) -> HostVars {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&'t self, tape: &mut Tape<'t>, trainable: bool) -> HostVars {
        let mut leaf = |m: &'t Matrix| if trainable { tape.borrow(m) } else { tape.constant(m) };
        let tok = leaf(&self.tok_emb);
        let pos = leaf(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_g: leaf(&b.ln1_g),
                ln1_b: leaf(&b.ln1_b),
                wq: leaf(&b.wq),
                wk: leaf(&b.wk),
                wv: leaf(&b.wv),
                wo: leaf(&b.wo),
                ln2_g: leaf(&b.ln2_g),
                ln2_b: leaf(&b.ln2_b),
                w1: leaf(&b.w1),
                b1: leaf(&b.b1),
                w2: leaf(&b.w2),
                b2: leaf(&b.b2),
            })
            .collect();
        HostVars {
            tok,
            pos,
            blocks,
            lnf_g: leaf(&self.lnf_g),
            lnf_b: leaf(&self.lnf_b),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }

    /// Token + position embeddings for a checked batch, stacked row-wise.
    pub fn embed(&self, tape: &mut Tape<'_>, vars: &HostVars, seqs: &[&[u32]]) -> Result<Var> {
        let seg_len = self.check_batch(seqs)?;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..seg_len).collect();
        let t = tape.embed(vars.tok, &ids)?;
        let p = tape.embed(vars.pos, &positions)?;
        tape.add(t, p)
    }

    /// Runs block `l` on the stacked residual stream `x`.
    pub fn block<'t, D: FfnDelta + ?Sized>(
        &self,
        tape: &mut Tape<'t>,
        vars: &HostVars,
        l: usize,
        x: Var,
        seg_len: usize,
        delta: &'t D,
    ) -> Result<Var> {
        let v = &vars.blocks[l];
        let h = tape.layer_norm(x, v.ln1_g, v.ln1_b)?;
        let q = tape.matmul(h, v.wq)?;
        let k = tape.matmul(h, v.wk)?;
        let vv = tape.matmul(h, v.wv)?;
        let att = tape.attention(q, k, vv, self.config.heads, seg_len, true)?;
        let att = tape.matmul(att, v.wo)?;
        let x = tape.add(x, att)?;

        let h = tape.layer_norm(x, v.ln2_g, v.ln2_b)?;
        let f = tape.matmul(h, v.w1)?;
        let f = tape.add_row(f, v.b1)?;
        let f = tape.relu(f);
        let mut out = tape.matmul(f, v.w2)?;
        if let Some(d) = delta.ffn_delta(tape, l, f)? {
            out = tape.add(out, d)?;
        }
        let out = tape.add_row(out, v.b2)?;
        tape.add(x, out)
    }

    /// Final norm and classifier head applied at the last position of every
    /// sequence; returns `n_seq x labels` logits.
    pub fn head(&self, tape: &mut Tape<'_>, vars: &HostVars, x: Var, seg_len: usize) -> Result<Var> {
        let n_seq = tape.value(x).rows() / seg_len;
        let last: Vec<usize> = (0..n_seq).map(|s| s * seg_len + seg_len - 1).collect();
        let pooled = tape.select_rows(x, &last)?;
        let h = tape.layer_norm(pooled, vars.lnf_g, vars.lnf_b)?;
        let logits = tape.matmul(h, vars.head_w)?;
        tape.add_row(logits, vars.head_b)
    }

    /// Runs blocks `from..layers` and the head on a residual stream recorded
    /// on `tape`.
    pub fn forward_from<'t, D: FfnDelta + ?Sized>(
        &self,
        tape: &mut Tape<'t>,
        vars: &HostVars,
        mut x: Var,
        from: usize,
        seg_len: usize,
        delta: &'t D,
    ) -> Result<Var> {
        for l in from..self.config.layers {
            x = self.block(tape, vars, l, x, seg_len, delta)?;
        }
        self.head(tape, vars, x, seg_len)
    }

    /// Residual stream after blocks `0..upto`, stacked `(n_seq * len) x width`.
    /// Adapters are never consulted, so this prefix is shared by every block.
    pub fn residual_after(&self, seqs: &[&[u32]], upto: usize) -> Result<Matrix> {
        if upto > self.config.layers {
            return Err(MeloError::Config(format!(
                "layer {upto} beyond {} layers",
                self.config.layers
            )));
        }
        let seg_len = self.check_batch(seqs)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut x = self.embed(&mut tape, &vars, seqs)?;
        for l in 0..upto {
            x = self.block(&mut tape, &vars, l, x, seg_len, &NoDelta)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Logits for a batch of equal-length sequences.
    pub fn forward_batch<D: FfnDelta + ?Sized>(&self, seqs: &[&[u32]], delta: &D) -> Result<Matrix> {
        let seg_len = self.check_batch(seqs)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = self.embed(&mut tape, &vars, seqs)?;
        let logits = self.forward_from(&mut tape, &vars, x, 0, seg_len, delta)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits for one sequence. `None` runs the unedited base model.
    pub fn forward(&self, tokens: &[u32], delta: Option<&dyn FfnDelta>) -> Result<Vec<f64>> {
        let logits = match delta {
            Some(d) => self.forward_batch(&[tokens], d)?,
            None => self.forward_batch(&[tokens], &NoDelta)?,
        };
        Ok(logits.into_data())
    }

    /// Pools a stacked residual stream into one key row per sequence.
    pub fn pool_keys(&self, stream: &Matrix, seg_len: usize) -> Matrix {
        let n_seq = stream.rows() / seg_len;
        let w = stream.cols();
        let mut keys = Matrix::zeros(n_seq, w);
        for s in 0..n_seq {
            match self.config.key_pooling {
                KeyPooling::LastToken => {
                    keys.row_mut(s).copy_from_slice(stream.row(s * seg_len + seg_len - 1));
                }
                KeyPooling::MeanPool => {
                    let out = keys.row_mut(s);
                    for r in 0..seg_len {
                        for (o, v) in out.iter_mut().zip(stream.row(s * seg_len + r)) {
                            *o += v;
                        }
                    }
                    for o in out.iter_mut() {
                        *o /= seg_len as f64;
                    }
                }
            }
        }
        keys
    }

    /// Key vectors (hidden state after block `l`) for a batch.
    pub fn hidden_batch(&self, seqs: &[&[u32]], l: usize) -> Result<Matrix> {
        if l >= self.config.layers {
            return Err(MeloError::Config(format!(
                "key layer {l} out of range for {} layers",
                self.config.layers
            )));
        }
        let stream = self.residual_after(seqs, l + 1)?;
        Ok(self.pool_keys(&stream, seqs[0].len()))
    }

    /// Key vector for one sequence: the hidden state after block `l`.
    pub fn hidden_at(&self, tokens: &[u32], l: usize) -> Result<Vec<f64>> {
        Ok(self.hidden_batch(&[tokens], l)?.into_data())
    }

    /// Predicted class per sequence (argmax, lowest index on ties).
    pub fn predict_batch<D: FfnDelta + ?Sized>(&self, seqs: &[&[u32]], delta: &D) -> Result<Vec<usize>> {
        let logits = self.forward_batch(seqs, delta)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One supervised example for pretraining.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub target_accuracy: f64,
    pub weight_decay: f64,
    /// Epochs to run even after the target accuracy is reached.
    pub min_epochs: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 3e-3,
            batch_size: 32,
            target_accuracy: 1.0,
            weight_decay: 0.0,
            min_epochs: 0,
        }
    }
}

/// Trains a freshly initialized host on `data` until training accuracy
/// reaches the target, then freezes it.
pub fn pretrain(
    config: &HostConfig,
    data: &[Example],
    opts: &PretrainOptions,
    seed: u64,
) -> Result<HostModel> {
    if data.is_empty() {
        return Err(MeloError::Input("pretraining dataset is empty".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= config.labels) {
        return Err(MeloError::Input(format!(
            "label {} outside head of {} classes",
            bad.label, config.labels
        )));
    }
    if opts.batch_size == 0 {
        return Err(MeloError::Config("pretrain.batch_size must be positive".into()));
    }
    let mut model = HostModel::init(config.clone(), seed)?;
    for e in data {
        model.check_batch(&[&e.tokens])?;
    }
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();
    let mut opt = Adam::new(opts.lr, &shapes).with_weight_decay(opts.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = derived(seed, 0x5052_4554);

    let mut accuracy = training_accuracy(&model, data)?;
    let mut epochs = 0;
    while (accuracy < opts.target_accuracy || epochs < opts.min_epochs) && epochs < opts.epochs {
        order.shuffle(&mut rng);
        // equal-length groups keep every mini-batch stackable
        order.sort_by_key(|&i| data[i].tokens.len());
        for chunk in length_chunks(&order, data, opts.batch_size) {
            let grads = batch_gradients(&model, data, &chunk)?;
            let mut params = model.params_mut();
            opt.step(&mut params, &grads)?;
        }
        epochs += 1;
        accuracy = training_accuracy(&model, data)?;
    }
    if accuracy < opts.target_accuracy {
        return Err(MeloError::Pretrain {
            accuracy,
            epochs,
            target: opts.target_accuracy,
        });
    }
    model.freeze();
    Ok(model)
}

/// Splits a length-sorted index list into mini-batches that never mix lengths.
fn length_chunks(order: &[usize], data: &[Example], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &i in order {
        match out.last_mut() {
            Some(c) if c.len() < size && data[c[0]].tokens.len() == data[i].tokens.len() => c.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

fn batch_gradients(model: &HostModel, data: &[Example], idx: &[usize]) -> Result<Vec<Matrix>> {
    let seqs: Vec<&[u32]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
    let targets: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
    let seg_len = seqs[0].len();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = model.embed(&mut tape, &vars, &seqs)?;
    let logits = model.forward_from(&mut tape, &vars, x, 0, seg_len, &NoDelta)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let mut grads = tape.backward(loss)?;
    Ok(vars.all().into_iter().map(|v| grads.take(v)).collect())
}

/// Fraction of `data` the model classifies correctly with no adapters.
pub fn training_accuracy(model: &HostModel, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(1.0);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data[i].tokens.len());
    let mut correct = 0usize;
    for chunk in length_chunks(&order, data, 256) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|&i| data[i].tokens.as_slice()).collect();
        let preds = model.predict_batch(&seqs, &NoDelta)?;
        correct += chunk
            .iter()
            .zip(preds)
            .filter(|(&i, p)| data[i].label == *p)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HostConfig {
        HostConfig {
            vocab: 20,
            width: 8,
            ffn: 12,
            heads: 2,
            layers: 3,
            labels: 3,
            max_len: 6,
            key_pooling: KeyPooling::LastToken,
        }
    }

    #[test]
    fn hook_config_rejects_key_layer_at_or_above_adapters() {
        assert!(LayerHookConfig::new(2, vec![3, 4], 6).is_ok());
        assert!(LayerHookConfig::new(3, vec![3, 4], 6).is_err());
        assert!(LayerHookConfig::new(5, vec![3, 4], 6).is_err());
        assert!(LayerHookConfig::new(0, vec![], 6).is_err());
        assert!(LayerHookConfig::new(0, vec![6], 6).is_err());
    }

    #[test]
    fn single_fact_pretrains_to_full_accuracy() {
        let data = vec![Example {
            tokens: vec![1, 2, 3],
            label: 2,
        }];
        let model = pretrain(&tiny(), &data, &PretrainOptions::default(), 7).unwrap();
        assert!(model.is_frozen());
        assert_eq!(training_accuracy(&model, &data).unwrap(), 1.0);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let data: Vec<Example> = (0..6)
            .map(|i| Example {
                tokens: vec![i as u32, (i + 7) as u32, 19],
                label: i % 3,
            })
            .collect();
        let a = pretrain(&tiny(), &data, &PretrainOptions::default(), 11).unwrap();
        let b = pretrain(&tiny(), &data, &PretrainOptions::default(), 11).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bits_eq(y)));
    }

    #[test]
    fn unreachable_accuracy_is_reported() {
        // identical inputs with different labels cannot both be fit
        let data = vec![
            Example { tokens: vec![1, 2], label: 0 },
            Example { tokens: vec![1, 2], label: 1 },
        ];
        let opts = PretrainOptions { epochs: 3, ..Default::default() };
        assert!(matches!(
            pretrain(&tiny(), &data, &opts, 1),
            Err(MeloError::Pretrain { epochs: 3, .. })
        ));
    }

    #[test]
    fn token_and_layer_errors() {
        let m = HostModel::init(tiny(), 3).unwrap();
        assert!(matches!(m.forward(&[25], None), Err(MeloError::Input(_))));
        assert!(matches!(m.hidden_at(&[], 0), Err(MeloError::Input(_))));
        assert!(matches!(m.hidden_at(&[1, 2], 3), Err(MeloError::Config(_))));
    }

    #[test]
    fn hidden_state_is_pure() {
        let m = HostModel::init(tiny(), 3).unwrap();
        let a = m.hidden_at(&[4, 5, 6], 1).unwrap();
        let b = m.hidden_at(&[4, 5, 6], 1).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn batched_forward_matches_single_forward_bitwise() {
        let m = HostModel::init(tiny(), 5).unwrap();
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let batched = m.forward_batch(&refs, &NoDelta).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let single = m.forward(s, None).unwrap();
            assert!(single.iter().zip(batched.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let m = HostModel::init(tiny(), 8).unwrap();
        let data = [Example { tokens: vec![3, 1, 4], label: 1 }];
        let grads = batch_gradients(&m, &data, &[0]).unwrap();
        assert_eq!(grads.len(), m.params().len());
        for (g, p) in grads.iter().zip(m.params()) {
            assert_eq!(g.shape(), p.shape());
        }
        // unused embedding rows stay zero; used ones do not
        assert!(grads[0].row(3).iter().any(|v| *v != 0.0));
        assert!(grads[0].row(9).iter().all(|v| *v == 0.0));
    }
}
