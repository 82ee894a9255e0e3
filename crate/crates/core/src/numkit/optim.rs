use std::ops::Range;

use super::matrix::Matrix;
use crate::error::{shape_err, Result};

/// Per-entry trainability selector for one parameter matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl GradMask {
    pub fn all(rows: usize, cols: usize, enabled: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![enabled; rows * cols],
        }
    }

    /// Enables exactly the columns in `range`.
    pub fn columns(rows: usize, cols: usize, range: Range<usize>) -> Self {
        let mut m = Self::all(rows, cols, false);
        for r in 0..rows {
            for c in range.clone().filter(|&c| c < cols) {
                m.bits[r * cols + c] = true;
            }
        }
        m
    }

    /// Enables exactly the rows in `range`.
    pub fn rows_range(rows: usize, cols: usize, range: Range<usize>) -> Self {
        let mut m = Self::all(rows, cols, false);
        for r in range.filter(|&r| r < rows) {
            m.bits[r * cols..(r + 1) * cols].fill(true);
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_enabled(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    /// Enables every entry enabled in `other`.
    pub fn union_with(&mut self, other: &GradMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "mask union",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn enabled_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Returns `param - eta * grad` on masked-in entries; masked-out entries are
/// copied bit for bit.
pub fn sgd_step(param: &Matrix, grad: &Matrix, eta: f64, mask: &GradMask) -> Result<Matrix> {
    let mut out = param.clone();
    sgd_step_in_place(&mut out, grad, eta, mask)?;
    Ok(out)
}

pub fn sgd_step_in_place(param: &mut Matrix, grad: &Matrix, eta: f64, mask: &GradMask) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != mask.shape() {
        return Err(shape_err(
            "sgd_step",
            format!(
                "param {:?}, grad {:?}, mask {:?}",
                param.shape(),
                grad.shape(),
                mask.shape()
            ),
        ));
    }
    grad.ensure_finite("sgd_step gradient")?;
    for ((p, g), on) in param.data_mut().iter_mut().zip(grad.data()).zip(&mask.bits) {
        if *on {
            *p -= eta * g;
        }
    }
    Ok(())
}

/// Adam with bias correction and optional decoupled weight decay. Used only
/// to pretrain the host network.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Updates `params[i]` with `grads[i]`; both must match the shapes the
    /// optimizer was built with.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(shape_err(
                "adam",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.first.len()),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || g.shape() != self.first[i].shape() {
                return Err(shape_err(
                    "adam",
                    format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            g.ensure_finite("adam gradient")?;
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * ((m[j] / c1) / ((v[j] / c2).sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}
