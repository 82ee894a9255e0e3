//! Low-rank adapters whose rank dimension is cut into per-batch blocks.
//!
//! Block `t` (1-based) owns columns `[(t-1)p, tp)` of `B` and the same rows
//! of `A`. Training touches only that block; inference loads at most one
//! block and skips the adapter entirely when none is selected.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MeloError, Result};
use crate::hostnet::{argmax, Example, FfnDelta, HostModel, HostVars};
use crate::numkit::{sgd_step_in_place, GradMask, Matrix, Tape, Var};
use crate::rng::{derived, sub_seed};

/// Standard deviation of the Gaussian `A` initialisation.
pub const A_INIT_STD: f64 = 0.02;

/// 1-based block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(usize);

impl BlockId {
    pub fn new(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(MeloError::Index("block ids start at 1".into()));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Rank indices `[(t-1)p, tp)` owned by this block.
    pub fn range(self, p: usize) -> Range<usize> {
        (self.0 - 1) * p..self.0 * p
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynLoraAdapter {
    b: Matrix,
    a: Matrix,
    p: usize,
    alpha: f64,
    layer_id: usize,
    seed: u64,
}

fn a_rows(block: usize, p: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = derived(seed, block as u64);
    Matrix::gaussian(p, d, A_INIT_STD, &mut rng)
}

/// Fresh adapter with `B = 0` and Gaussian `A`. Each block's rows of `A` come
/// from their own stream, so growing an adapter later yields the same rows an
/// initially larger adapter would have had.
pub fn init_adapter(m: usize, d: usize, r: usize, p: usize, alpha: f64, seed: u64) -> Result<DynLoraAdapter> {
    if m == 0 || d == 0 {
        return Err(MeloError::Config(format!("adapter dims {m}x{d} must be positive")));
    }
    if p == 0 || r == 0 || !r.is_multiple_of(p) {
        return Err(MeloError::Config(format!(
            "rank {r} must be a positive multiple of partial rank {p}"
        )));
    }
    if !alpha.is_finite() {
        return Err(MeloError::Config("alpha must be finite".into()));
    }
    let mut a = Matrix::zeros(0, d);
    for block in 0..r / p {
        a = a.vcat(&a_rows(block, p, d, seed))?;
    }
    Ok(DynLoraAdapter {
        b: Matrix::zeros(m, r),
        a,
        p,
        alpha,
        layer_id: 0,
        seed,
    })
}

impl DynLoraAdapter {
    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn partial_rank(&self) -> usize {
        self.p
    }

    pub fn n_blocks(&self) -> usize {
        self.rank() / self.p
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output and input dimensions `(m, d)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.p as f64
    }

    fn check_block(&self, t: BlockId) -> Result<()> {
        if t.get() > self.n_blocks() {
            return Err(MeloError::Index(format!(
                "block {t} out of range 1..={}",
                self.n_blocks()
            )));
        }
        Ok(())
    }

    /// Copies of `(W_B^t, W_A^t)`: `m x p` and `p x d`.
    pub fn block_slice(&self, t: BlockId) -> Result<(Matrix, Matrix)> {
        self.check_block(t)?;
        Ok((self.b.slice_cols(t.range(self.p))?, self.a.slice_rows(t.range(self.p))?))
    }

    /// `(alpha/p) W_B^t (W_A^t x)`, or the zero vector when no block is active.
    pub fn forward_delta(&self, x: &[f64], active: Option<BlockId>) -> Result<Vec<f64>> {
        let (m, d) = self.dims();
        if x.len() != d {
            return Err(shape_err("forward_delta", format!("input {} vs adapter {d}", x.len())));
        }
        let Some(t) = active else {
            return Ok(vec![0.0; m]);
        };
        let (wb, wa) = self.block_slice(t)?;
        let z = Matrix::row_vector(x).matmul_nt(&wa)?;
        Ok(z.matmul_nt(&wb)?.scale(self.scaling()).into_data())
    }

    /// Appends zero columns to `B` and Gaussian rows to `A` until block `t`
    /// exists. Returns the number of blocks added.
    pub fn grow_to(&mut self, t: BlockId) -> Result<usize> {
        let (m, d) = self.dims();
        let before = self.n_blocks();
        for block in before..t.get() {
            self.b = self.b.hcat(&Matrix::zeros(m, self.p))?;
            self.a = self.a.vcat(&a_rows(block, self.p, d, self.seed))?;
        }
        Ok(t.get().saturating_sub(before))
    }

    /// Trainable entries one block adds to this adapter: `m·p + p·d`.
    pub fn params_per_block(&self) -> usize {
        let (m, d) = self.dims();
        m * self.p + self.p * d
    }

    pub(crate) fn from_parts(b: Matrix, a: Matrix, p: usize, alpha: f64, layer_id: usize, seed: u64) -> Result<Self> {
        if b.cols() != a.rows() || p == 0 || !b.cols().is_multiple_of(p) {
            return Err(MeloError::Format(format!(
                "adapter B {:?} / A {:?} inconsistent with partial rank {p}",
                b.shape(),
                a.shape()
            )));
        }
        Ok(Self {
            b,
            a,
            p,
            alpha,
            layer_id,
            seed,
        })
    }
}

/// One adapter per edited host layer, all sharing block geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    adapters: Vec<DynLoraAdapter>,
}

impl AdapterSet {
    /// Adapters on the output projection of the feed-forward sublayer of
    /// every layer in `layers`.
    pub fn for_model(model: &HostModel, layers: &[usize], r: usize, p: usize, alpha: f64, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(MeloError::Config("no adapter layers".into()));
        }
        let (m, d) = model.ffn_out_dims();
        let mut adapters = Vec::with_capacity(layers.len());
        for &l in layers {
            if l >= model.config().layers {
                return Err(MeloError::Config(format!("adapter layer {l} out of range")));
            }
            let mut a = init_adapter(m, d, r, p, alpha, sub_seed(seed, 0x4c4f_5241 + l as u64))?;
            a.layer_id = l;
            adapters.push(a);
        }
        adapters.sort_by_key(|a| a.layer_id);
        if adapters.windows(2).any(|w| w[0].layer_id == w[1].layer_id) {
            return Err(MeloError::Config("duplicate adapter layer".into()));
        }
        Ok(Self { adapters })
    }

    pub(crate) fn from_adapters(adapters: Vec<DynLoraAdapter>) -> Result<Self> {
        let Some(first) = adapters.first() else {
            return Err(MeloError::Format("empty adapter set".into()));
        };
        let geometry = (first.rank(), first.p);
        if adapters.iter().any(|a| (a.rank(), a.p) != geometry) {
            return Err(MeloError::Format("adapters disagree on block geometry".into()));
        }
        Ok(Self { adapters })
    }

    pub fn adapters(&self) -> &[DynLoraAdapter] {
        &self.adapters
    }

    pub fn layers(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.layer_id).collect()
    }

    pub fn n_blocks(&self) -> usize {
        self.adapters[0].n_blocks()
    }

    pub fn partial_rank(&self) -> usize {
        self.adapters[0].p
    }

    pub fn grow_to(&mut self, t: BlockId) -> Result<usize> {
        let mut added = 0;
        for a in &mut self.adapters {
            added = a.grow_to(t)?;
        }
        Ok(added)
    }

    /// Trainable entries a single block adds across all adapted layers.
    pub fn params_per_block(&self) -> usize {
        self.adapters.iter().map(DynLoraAdapter::params_per_block).sum()
    }

    /// Hook that applies block `active` (or nothing) during a host forward.
    pub fn with_block(&self, active: Option<BlockId>) -> ActiveBlock<'_> {
        ActiveBlock { set: self, active }
    }
}

/// An adapter set with one block selected for inference.
pub struct ActiveBlock<'a> {
    set: &'a AdapterSet,
    active: Option<BlockId>,
}

impl FfnDelta for ActiveBlock<'_> {
    fn ffn_delta<'t>(&'t self, tape: &mut Tape<'t>, layer: usize, hidden: Var) -> Result<Option<Var>> {
        let Some(t) = self.active else {
            return Ok(None);
        };
        let Some(adapter) = self.set.adapters.iter().find(|a| a.layer_id == layer) else {
            return Ok(None);
        };
        adapter.check_block(t)?;
        let b = tape.borrow(&adapter.b);
        let a = tape.borrow(&adapter.a);
        block_delta(tape, hidden, b, a, t.range(adapter.p), adapter.scaling()).map(Some)
    }
}

fn block_delta(tape: &mut Tape<'_>, hidden: Var, b: Var, a: Var, range: Range<usize>, scale: f64) -> Result<Var> {
    let wa = tape.slice_rows(a, range.clone())?;
    let wb = tape.slice_cols(b, range)?;
    let z = tape.matmul_nt(hidden, wa)?;
    let out = tape.matmul_nt(z, wb)?;
    tape.scale(out, scale)
}

/// Training-time hook: adapter matrices are tape leaves so gradients reach them.
struct TrainHook {
    vars: BTreeMap<usize, (Var, Var, f64)>,
    range: Range<usize>,
}

impl FfnDelta for TrainHook {
    fn ffn_delta<'t>(&'t self, tape: &mut Tape<'t>, layer: usize, hidden: Var) -> Result<Option<Var>> {
        match self.vars.get(&layer) {
            Some(&(b, a, scale)) => block_delta(tape, hidden, b, a, self.range.clone(), scale).map(Some),
            None => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub iterations: usize,
    pub eta: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 100,
            eta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub block: BlockId,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Fits block `t` of every adapter to `batch` with full-batch SGD restricted
/// to the block's columns of `B` and rows of `A`. The batch must be fitted
/// exactly within the iteration budget; on failure the block is restored and
/// the unfit inputs are reported by position.
pub fn train_block(
    adapters: &mut AdapterSet,
    model: &HostModel,
    batch: &[Example],
    t: BlockId,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if !model.is_frozen() {
        return Err(MeloError::Contract("adapters train against a frozen host".into()));
    }
    if batch.is_empty() {
        return Err(MeloError::Input("empty edit batch".into()));
    }
    if !(opts.eta.is_finite() && opts.eta > 0.0) {
        return Err(MeloError::Config(format!("learning rate {} must be positive", opts.eta)));
    }
    let labels = model.config().labels;
    if let Some(e) = batch.iter().find(|e| e.label >= labels) {
        return Err(MeloError::Input(format!("label {} out of range", e.label)));
    }
    adapters.grow_to(t)?;
    let backup = adapters.clone();

    let groups = Prefix::build(model, batch, adapters.layers()[0])?;
    let p = adapters.partial_rank();
    let range = t.range(p);
    let mut initial_loss = f64::NAN;
    let mut loss = f64::NAN;
    for it in 0..opts.iterations {
        let (l, grads) = match groups.loss_and_grads(model, adapters, range.clone()) {
            Ok(v) => v,
            Err(e) => {
                *adapters = backup;
                return Err(e);
            }
        };
        if it == 0 {
            initial_loss = l;
        }
        loss = l;
        for (adapter, (gb, ga)) in adapters.adapters.iter_mut().zip(grads) {
            let (m, d) = adapter.dims();
            let r = adapter.rank();
            sgd_step_in_place(&mut adapter.b, &gb, opts.eta, &GradMask::columns(m, r, range.clone()))?;
            sgd_step_in_place(&mut adapter.a, &ga, opts.eta, &GradMask::rows_range(r, d, range.clone()))?;
        }
    }
    let preds = groups.predict(model, adapters, t)?;
    let unfit: Vec<usize> = preds
        .iter()
        .filter(|&&(i, y)| y != batch[i].label)
        .map(|&(i, _)| i)
        .collect();
    let accuracy = 1.0 - unfit.len() as f64 / batch.len() as f64;
    if !unfit.is_empty() {
        *adapters = backup;
        return Err(MeloError::EditFailure {
            batch: t.get(),
            accuracy,
            unfit,
        });
    }
    if opts.iterations == 0 {
        initial_loss = groups.loss_and_grads(model, adapters, range)?.0;
        loss = initial_loss;
    }
    Ok(TrainReport {
        block: t,
        iterations: opts.iterations,
        initial_loss,
        final_loss: loss,
        accuracy,
    })
}

/// Residual streams entering the first adapted layer, cached per sequence
/// length. The prefix never sees an adapter, so it is computed once.
struct Prefix {
    from: usize,
    groups: Vec<Group>,
    total: usize,
}

struct Group {
    positions: Vec<usize>,
    targets: Vec<usize>,
    seg_len: usize,
    stream: Matrix,
}

impl Prefix {
    fn build(model: &HostModel, batch: &[Example], from: usize) -> Result<Self> {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in batch.iter().enumerate() {
            by_len.entry(e.tokens.len()).or_default().push(i);
        }
        let mut groups = Vec::with_capacity(by_len.len());
        for (seg_len, positions) in by_len {
            let seqs: Vec<&[u32]> = positions.iter().map(|&i| batch[i].tokens.as_slice()).collect();
            let stream = model.residual_after(&seqs, from)?;
            let targets = positions.iter().map(|&i| batch[i].label).collect();
            groups.push(Group {
                positions,
                targets,
                seg_len,
                stream,
            });
        }
        Ok(Self {
            from,
            groups,
            total: batch.len(),
        })
    }

    /// Mean cross-entropy over the whole batch and its gradient with respect
    /// to every adapter's full `B` and `A`.
    fn loss_and_grads(
        &self,
        model: &HostModel,
        adapters: &AdapterSet,
        range: Range<usize>,
    ) -> Result<(f64, Vec<(Matrix, Matrix)>)> {
        let mut total_loss = 0.0;
        let mut acc: Vec<(Matrix, Matrix)> = adapters
            .adapters
            .iter()
            .map(|a| (Matrix::zeros(a.b.rows(), a.b.cols()), Matrix::zeros(a.a.rows(), a.a.cols())))
            .collect();
        for g in &self.groups {
            let weight = g.targets.len() as f64 / self.total as f64;
            let mut tape = Tape::new();
            let vars: HostVars = model.bind_frozen(&mut tape);
            let mut hook = TrainHook {
                vars: BTreeMap::new(),
                range: range.clone(),
            };
            for a in &adapters.adapters {
                let b = tape.borrow(&a.b);
                let av = tape.borrow(&a.a);
                hook.vars.insert(a.layer_id, (b, av, a.scaling()));
            }
            let x = tape.constant(&g.stream);
            let hook_vars: Vec<(Var, Var)> = hook.vars.values().map(|&(b, a, _)| (b, a)).collect();
            let logits = model.forward_from(&mut tape, &vars, x, self.from, g.seg_len, &hook)?;
            let loss = tape.cross_entropy(logits, &g.targets)?;
            total_loss += weight * tape.value(loss).get(0, 0);
            let grads = tape.backward(loss)?;
            for ((gb, ga), (bv, av)) in acc.iter_mut().zip(hook_vars) {
                *gb = gb.add(&grads.get(bv).scale(weight))?;
                *ga = ga.add(&grads.get(av).scale(weight))?;
            }
        }
        Ok((total_loss, acc))
    }

    /// `(batch position, predicted label)` with block `t` active.
    fn predict(&self, model: &HostModel, adapters: &AdapterSet, t: BlockId) -> Result<Vec<(usize, usize)>> {
        let hook = adapters.with_block(Some(t));
        let mut out = Vec::with_capacity(self.total);
        for g in &self.groups {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let x = tape.borrow(&g.stream);
            let logits = model.forward_from(&mut tape, &vars, x, self.from, g.seg_len, &hook)?;
            let logits = tape.value(logits);
            out.extend(g.positions.iter().enumerate().map(|(k, &i)| (i, argmax(logits.row(k)))));
        }
        out.sort_unstable();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn trained_like(seed: u64) -> DynLoraAdapter {
        let mut a = init_adapter(6, 5, 8, 2, 4.0, seed).unwrap();
        a.b = Matrix::gaussian(6, 8, 1.0, &mut seeded(seed + 1));
        a
    }

    #[test]
    fn ten_blocks_for_rank_20_partial_2() {
        let a = init_adapter(1024, 512, 20, 2, 1.0, 0).unwrap();
        assert_eq!(a.n_blocks(), 10);
        assert_eq!(a.params_per_block(), 1024 * 2 + 2 * 512);
    }

    #[test]
    fn indivisible_rank_is_config_error() {
        assert!(matches!(init_adapter(8, 8, 5, 2, 1.0, 0), Err(MeloError::Config(_))));
    }

    #[test]
    fn fresh_adapter_b_zero_a_small_gaussian() {
        let a = init_adapter(64, 128, 20, 2, 1.0, 9).unwrap();
        assert!(a.b().data().iter().all(|v| *v == 0.0));
        let n = a.a().len() as f64;
        let mean = a.a().sum() / n;
        let std = (a.a().data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002 && (std - A_INIT_STD).abs() < 0.002, "{mean} {std}");
        assert_eq!(a, init_adapter(64, 128, 20, 2, 1.0, 9).unwrap());
        for t in 1..=10 {
            let d = a.forward_delta(&[1.0; 128], Some(BlockId::new(t).unwrap())).unwrap();
            assert!(d.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn block_ranges() {
        assert_eq!(BlockId::new(1).unwrap().range(2), 0..2);
        assert_eq!(BlockId::new(3).unwrap().range(4), 8..12);
        assert!(BlockId::new(0).is_err());
    }

    #[test]
    fn block_slice_matches_range_and_rejects_out_of_range() {
        let a = trained_like(3);
        let (wb, wa) = a.block_slice(BlockId::new(2).unwrap()).unwrap();
        assert_eq!(wb.shape(), (6, 2));
        assert_eq!(wa.shape(), (2, 5));
        assert_eq!(wb.get(4, 1), a.b().get(4, 3));
        assert_eq!(wa.get(0, 2), a.a().get(2, 2));
        assert!(matches!(a.block_slice(BlockId::new(5).unwrap()), Err(MeloError::Index(_))));
    }

    #[test]
    fn inactive_delta_is_zero_and_shape_checked() {
        let a = trained_like(4);
        assert_eq!(a.forward_delta(&[1.0; 5], None).unwrap(), vec![0.0; 6]);
        assert!(matches!(a.forward_delta(&[1.0; 4], None), Err(MeloError::Shape { .. })));
    }

    #[test]
    fn active_delta_matches_dense_oracle() {
        // zero every block but t, then the full product equals the block product
        let mut a = trained_like(5);
        let t = BlockId::new(3).unwrap();
        let keep = t.range(2);
        for r in 0..6 {
            for c in 0..8 {
                if !keep.contains(&c) {
                    a.b.set(r, c, 0.0);
                }
            }
        }
        let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
        let dense = a.b.matmul(&a.a).unwrap();
        let expect: Vec<f64> = (0..6)
            .map(|i| (0..5).map(|j| dense.get(i, j) * x[j]).sum::<f64>() * 4.0 / 2.0)
            .collect();
        let got = a.forward_delta(&x, Some(t)).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn growth_appends_the_rows_a_larger_adapter_would_have() {
        let mut small = init_adapter(4, 3, 4, 2, 1.0, 11).unwrap();
        let big = init_adapter(4, 3, 8, 2, 1.0, 11).unwrap();
        assert_eq!(small.grow_to(BlockId::new(4).unwrap()).unwrap(), 2);
        assert_eq!(small, big);
        assert_eq!(small.grow_to(BlockId::new(2).unwrap()).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn delta_ignores_other_blocks(seed in any::<u64>(), t in 1usize..=4) {
            let a = trained_like(seed);
            let mut other = a.clone();
            let range = BlockId::new(t).unwrap().range(2);
            let mut rng = seeded(seed ^ 0xabc);
            let noise_b = Matrix::gaussian(6, 8, 5.0, &mut rng);
            let noise_a = Matrix::gaussian(8, 5, 5.0, &mut rng);
            for r in 0..6 {
                for c in (0..8).filter(|c| !range.contains(c)) {
                    other.b.set(r, c, noise_b.get(r, c));
                }
            }
            for r in (0..8).filter(|r| !range.contains(r)) {
                for c in 0..5 {
                    other.a.set(r, c, noise_a.get(r, c));
                }
            }
            let x = [0.1, -0.4, 0.9, 0.0, 2.0];
            let id = Some(BlockId::new(t).unwrap());
            let lhs = a.forward_delta(&x, id).unwrap();
            let rhs = other.forward_delta(&x, id).unwrap();
            prop_assert!(lhs.iter().zip(&rhs).all(|(l, r)| l.to_bits() == r.to_bits()));
        }
    }
}
