//! Analytic tape gradients against central finite differences.

mod common;

use common::gradnet::{random_net, worst_relative_error, TOL};
use melo_core::numkit::{Matrix, Tape, Var};

#[test]
fn analytic_gradients_match_central_differences_on_random_nets() {
    for seed in 100..104 {
        let net = random_net(seed);
        let n_params: usize = net.params.iter().map(Matrix::len).sum();
        assert!(n_params <= 1000);
        let err = worst_relative_error(&net);
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn gradients_only_reach_the_sliced_block() {
    let net = random_net(3);
    let mut tape = Tape::new();
    let vars: Vec<Var> = net.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = (net.build)(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let gb = grads.get(vars[9]);
    let rank = gb.cols() / 2;
    for r in 0..gb.rows() {
        for c in 0..rank {
            assert_eq!(gb.get(r, c), 0.0);
        }
    }
}

#[test]
fn constant_leaves_do_not_change_trainable_gradients() {
    let net = random_net(5);
    let grads_with = |frozen: &[usize]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = net
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| if frozen.contains(&i) { tape.constant(p) } else { tape.borrow(p) })
            .collect();
        let loss = (net.build)(&mut tape, &vars);
        let g = tape.backward(loss).unwrap();
        (vars.iter().map(|v| g.get(*v)).collect::<Vec<Matrix>>(), vars.iter().map(|v| g.reached(*v)).collect::<Vec<bool>>())
    };
    let (all, _) = grads_with(&[]);
    let frozen: Vec<usize> = (0..9).chain([11]).collect();
    let (some, reached) = grads_with(&frozen);
    for i in 0..all.len() {
        if frozen.contains(&i) {
            assert!(!reached[i], "constant {i} received a gradient");
        } else {
            assert!(all[i].bits_eq(&some[i]), "param {i}");
        }
    }
}
