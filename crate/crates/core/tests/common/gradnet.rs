//! Random small networks for finite-difference gradient checks.

use melo_core::numkit::{Matrix, Tape, Var};
use melo_core::rng::{derived, Rng};
use rand::Rng as _;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// A randomly drawn small network: parameter shapes plus a loss builder.
pub struct Net {
    pub params: Vec<Matrix>,
    pub build: Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Var>,
}

fn loss_of(net: &Net, params: &[Matrix]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = (net.build)(&mut tape, &vars);
    tape.value(loss).get(0, 0)
}

/// Largest per-parameter relative error `‖analytic − numeric‖ / max(‖·‖)`.
pub fn worst_relative_error(net: &Net) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = net.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = (net.build)(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut numeric = Matrix::zeros(analytic.rows(), analytic.cols());
        for idx in 0..net.params[pi].len() {
            let mut plus = net.params.clone();
            plus[pi].data_mut()[idx] += EPS;
            let mut minus = net.params.clone();
            minus[pi].data_mut()[idx] -= EPS;
            numeric.data_mut()[idx] = (loss_of(net, &plus) - loss_of(net, &minus)) / (2.0 * EPS);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.frobenius().max(numeric.frobenius());
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Builds a random transformer-flavoured net touching every tape primitive.
pub fn random_net(seed: u64) -> Net {
    let mut rng: Rng = derived(seed, 0);
    let vocab = rng.random_range(5..9);
    let heads = rng.random_range(1..3);
    let width = heads * rng.random_range(2..4);
    let hidden = rng.random_range(3..7);
    let seg_len = rng.random_range(2..4);
    let n_seq = rng.random_range(1..3);
    let classes = rng.random_range(2..5);
    let causal = rng.random_bool(0.5);
    let rank = rng.random_range(1..3);
    // Distinct tokens within a segment; repeated keys make the q/k gradient
    // vanish identically and leave only rounding noise to compare.
    let mut ids = Vec::with_capacity(n_seq * seg_len);
    for _ in 0..n_seq {
        let mut seg: Vec<usize> = Vec::new();
        while seg.len() < seg_len {
            let t = rng.random_range(0..vocab);
            if !seg.contains(&t) {
                seg.push(t);
            }
        }
        ids.extend(seg);
    }
    let targets: Vec<usize> = (0..n_seq).map(|_| rng.random_range(0..classes)).collect();
    let last: Vec<usize> = (0..n_seq).map(|s| s * seg_len + seg_len - 1).collect();

    let shapes = [
        (vocab, width),      // 0 embedding
        (1, width),          // 1 ln gain
        (1, width),          // 2 ln bias
        (width, width),      // 3 wq
        (width, width),      // 4 wk
        (width, width),      // 5 wv
        (width, hidden),     // 6 w1
        (1, hidden),         // 7 b1
        (hidden, width),     // 8 w2
        (width, 2 * rank),   // 9 lora B (two blocks)
        (2 * rank, hidden),  // 10 lora A
        (width, classes),    // 11 head
    ];
    let mut params: Vec<Matrix> = shapes
        .iter()
        .map(|&(r, c)| Matrix::gaussian(r, c, 0.5, &mut rng))
        .collect();
    // layer-norm gain around 1
    for v in params[1].data_mut() {
        *v += 1.0;
    }

    let build = move |tape: &mut Tape<'_>, p: &[Var]| {
        let x = tape.embed(p[0], &ids).unwrap();
        let h = tape.layer_norm(x, p[1], p[2]).unwrap();
        let q = tape.matmul(h, p[3]).unwrap();
        let k = tape.matmul(h, p[4]).unwrap();
        let v = tape.matmul(h, p[5]).unwrap();
        let att = tape.attention(q, k, v, heads, seg_len, causal).unwrap();
        let x = tape.add(x, att).unwrap();
        let f = tape.matmul(x, p[6]).unwrap();
        let f = tape.add_row(f, p[7]).unwrap();
        let f = tape.relu(f);
        let out = tape.matmul(f, p[8]).unwrap();
        // low-rank delta through the second block only
        let a_blk = tape.slice_rows(p[10], rank..2 * rank).unwrap();
        let b_blk = tape.slice_cols(p[9], rank..2 * rank).unwrap();
        let z = tape.matmul_nt(f, a_blk).unwrap();
        let d = tape.matmul_nt(z, b_blk).unwrap();
        let d = tape.scale(d, 0.5).unwrap();
        let out = tape.add(out, d).unwrap();
        let x = tape.add(x, out).unwrap();
        let x = tape.tanh(x);
        let pooled = tape.select_rows(x, &last).unwrap();
        let logits = tape.matmul(pooled, p[11]).unwrap();
        tape.cross_entropy(logits, &targets).unwrap()
    };
    Net {
        params,
        build: Box::new(build),
    }
}
