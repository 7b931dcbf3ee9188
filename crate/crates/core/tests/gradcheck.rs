//! Reverse-mode gradients against central finite differences.

use layerlens::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

type Graph = fn(&mut Tape<f64>, &[Var]) -> Var;

struct Case {
    shapes: Vec<Vec<usize>>,
    build: Graph,
}

/// Builds each graph once for analytic gradients and many times for the
/// finite-difference oracle, which only reads forward values.
fn check(case: &Case, rng: &mut impl Rng) -> f64 {
    let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| random_tensor(rng, s)).collect();
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = (case.build)(&mut tape, &vars);
        tape.value(loss).unwrap().data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[k].set_flat(i, input.data()[i] + STEP).unwrap();
            minus[k].set_flat(i, input.data()[i] - STEP).unwrap();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    worst
}

fn cases() -> Vec<Case> {
    vec![
        // softmax of an affine map, weighted
        Case {
            shapes: vec![vec![3, 4], vec![4, 5], vec![5], vec![3, 5]],
            build: |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_row(h, v[2]).unwrap();
                let p = t.softmax_rows(h).unwrap();
                let w = t.mul(p, v[3]).unwrap();
                t.sum(w).unwrap()
            },
        },
        // layer norm with affine parameters
        Case {
            shapes: vec![vec![3, 4], vec![4], vec![4], vec![3, 4]],
            build: |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let w = t.mul(y, v[3]).unwrap();
                t.sum(w).unwrap()
            },
        },
        // causal self-attention pattern
        Case {
            shapes: vec![vec![4, 3], vec![3, 3], vec![3, 3]],
            build: |t, v| {
                let q = t.matmul(v[0], v[1]).unwrap();
                let kt = t.transpose(v[0]).unwrap();
                let s = t.matmul(q, kt).unwrap();
                let s = t.scale(s, 0.5).unwrap();
                let p = t.causal_softmax(s).unwrap();
                let o = t.matmul(p, v[0]).unwrap();
                let o = t.matmul(o, v[2]).unwrap();
                let o2 = t.mul(o, o).unwrap();
                t.sum(o2).unwrap()
            },
        },
        // column split and merge feeding a cross-entropy
        Case {
            shapes: vec![vec![3, 6], vec![6, 6]],
            build: |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let a = t.slice_cols(h, 0, 2).unwrap();
                let b = t.slice_cols(h, 2, 4).unwrap();
                let b = t.scale(b, -1.3).unwrap();
                let c = t.concat_cols(&[b, a]).unwrap();
                t.cross_entropy(c, &[(0, 1), (2, 5), (2, 0)]).unwrap()
            },
        },
        // embedding lookup with repeated rows
        Case {
            shapes: vec![vec![5, 3], vec![3, 4]],
            build: |t, v| {
                let e = t.gather_rows(v[0], &[4, 1, 4, 0]).unwrap();
                let h = t.matmul(e, v[1]).unwrap();
                t.cross_entropy(h, &[(3, 2), (1, 0)]).unwrap()
            },
        },
        // residual sum through two layer norms
        Case {
            shapes: vec![vec![2, 5], vec![5], vec![5], vec![5, 5]],
            build: |t, v| {
                let n = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let h = t.matmul(n, v[3]).unwrap();
                let r = t.add(v[0], h).unwrap();
                let n2 = t.layer_norm(r, v[1], v[2], 1e-5).unwrap();
                let sq = t.mul(n2, r).unwrap();
                t.sum(sq).unwrap()
            },
        },
    ]
}

#[test]
fn hundred_random_graphs_match_finite_differences() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2024);
    let cases = cases();
    let mut worst = 0f64;
    for trial in 0..100 {
        let case = &cases[trial % cases.len()];
        worst = worst.max(check(case, &mut rng));
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn relu_gradient_away_from_the_kink() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![-2.0, 0.5, 3.0]).unwrap());
    let r = tape.relu(x).unwrap();
    let sq = tape.mul(r, r).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 6.0]);
}
