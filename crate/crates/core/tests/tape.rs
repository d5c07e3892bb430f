//! Reverse-mode gradients of every tape operation against central finite
//! differences.

use crate_alpha_core::numerics::{Rng, Tape, Var};
use crate_alpha_core::oracle::{fd_grad, rel_err};
use crate_alpha_core::Matrix;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Contracts the op output with a fixed random weight so every output entry
/// contributes to the scalar.
fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let w = Rng::new(seed).uniform_matrix(r, c, -1.0, 1.0);
    let w = tape.constant(w);
    let h = tape.hadamard(out, w).unwrap();
    tape.sum(h)
}

fn eval(build: &Build, inputs: &[Matrix<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = scalarize(&mut tape, out, 99);
    tape.value(root).item()
}

fn check(name: &str, build: &Build, inputs: Vec<Matrix<f64>>, tol: f64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = scalarize(&mut tape, out, 99);
    let grads = tape.backward(root).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let f = |x: &Matrix<f64>| {
            let mut probe = inputs.clone();
            probe[i] = x.clone();
            eval(build, &probe)
        };
        let fd = fd_grad(f, &inputs[i], 1e-5);
        let e = rel_err(&grads.get(*v), &fd);
        assert!(e < tol, "{name}: input {i} rel err {e:e}");
    }
}

fn rand(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
    rng.uniform_matrix(r, c, -1.0, 1.0)
}

/// Entries pushed at least 0.1 away from zero so ReLU kinks stay out of
/// reach of the difference stencil.
fn off_zero(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
    rand(rng, r, c).map(|x| if x.abs() < 0.1 { x + 0.2f64.copysign(x) } else { x })
}

fn spd(rng: &mut Rng, n: usize) -> Matrix<f64> {
    let a = rand(rng, n, n);
    let mut m = a.matmul_t(&a).unwrap();
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    m
}

const TOL: f64 = 1e-6;

#[test]
fn products() {
    let mut rng = Rng::new(1);
    check(
        "matmul",
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
        vec![rand(&mut rng, 3, 4), rand(&mut rng, 4, 2)],
        TOL,
    );
    check(
        "t_matmul",
        &|t, v| t.t_matmul(v[0], v[1]).unwrap(),
        vec![rand(&mut rng, 4, 3), rand(&mut rng, 4, 2)],
        TOL,
    );
    check(
        "matmul_t",
        &|t, v| t.matmul_t(v[0], v[1]).unwrap(),
        vec![rand(&mut rng, 3, 4), rand(&mut rng, 2, 4)],
        TOL,
    );
    check(
        "shared operand",
        &|t, v| t.t_matmul(v[0], v[0]).unwrap(),
        vec![rand(&mut rng, 3, 4)],
        TOL,
    );
}

#[test]
fn elementwise() {
    let mut rng = Rng::new(2);
    let pair = |rng: &mut Rng| vec![rand(rng, 3, 4), rand(rng, 3, 4)];
    check("add", &|t, v| t.add(v[0], v[1]).unwrap(), pair(&mut rng), TOL);
    check("sub", &|t, v| t.sub(v[0], v[1]).unwrap(), pair(&mut rng), TOL);
    check("hadamard", &|t, v| t.hadamard(v[0], v[1]).unwrap(), pair(&mut rng), TOL);
    check("scale", &|t, v| t.scale(v[0], -1.7), vec![rand(&mut rng, 3, 4)], TOL);
    check(
        "scale_by",
        &|t, v| t.scale_by(v[0], v[1]).unwrap(),
        vec![rand(&mut rng, 3, 4), rand(&mut rng, 1, 1)],
        TOL,
    );
    check("shift", &|t, v| t.shift(v[0], 0.3), vec![rand(&mut rng, 3, 4)], TOL);
    check(
        "add_col",
        &|t, v| t.add_col(v[0], v[1]).unwrap(),
        vec![rand(&mut rng, 3, 4), rand(&mut rng, 3, 1)],
        TOL,
    );
    check("transpose", &|t, v| t.transpose(v[0]), vec![rand(&mut rng, 3, 4)], TOL);
    check("relu", &|t, v| t.relu(v[0]), vec![off_zero(&mut rng, 3, 4)], TOL);
    check(
        "softmax_cols",
        &|t, v| t.softmax_cols(v[0]),
        vec![rand(&mut rng, 3, 4)],
        TOL,
    );
}

#[test]
fn reductions() {
    let mut rng = Rng::new(3);
    check("sum", &|t, v| t.sum(v[0]), vec![rand(&mut rng, 3, 4)], TOL);
    check(
        "half_sq_norm",
        &|t, v| t.half_sq_norm(v[0]),
        vec![rand(&mut rng, 3, 4)],
        TOL,
    );
    check(
        "logdet",
        &|t, v| {
            // symmetrize so the perturbation stays in the domain
            let s = t.transpose(v[0]);
            let m = t.add(v[0], s).unwrap();
            t.logdet(m).unwrap()
        },
        vec![spd(&mut rng, 4).scale(0.5)],
        TOL,
    );
    check(
        "segment_mean",
        &|t, v| t.segment_mean(v[0], 2).unwrap(),
        vec![rand(&mut rng, 3, 6)],
        TOL,
    );
    check(
        "select_cols",
        &|t, v| t.select_cols(v[0], vec![0, 3, 3]).unwrap(),
        vec![rand(&mut rng, 3, 4)],
        TOL,
    );
}

#[test]
fn layer_norm() {
    let mut rng = Rng::new(4);
    check(
        "layer_norm_cols",
        &|t, v| t.layer_norm_cols(v[0], v[1], v[2], 1e-6).unwrap(),
        vec![rand(&mut rng, 5, 4), rand(&mut rng, 5, 1), rand(&mut rng, 5, 1)],
        TOL,
    );
}

#[test]
fn attention_ops() {
    let mut rng = Rng::new(5);
    // 2 heads of dim 3, 2 samples of 4 tokens
    check(
        "head_gram",
        &|t, v| t.head_gram(v[0], 2, 4, 0.7).unwrap(),
        vec![rand(&mut rng, 6, 8)],
        TOL,
    );
    check(
        "head_mix",
        &|t, v| t.head_mix(v[0], v[1], 2, 4).unwrap(),
        vec![rand(&mut rng, 6, 8), rand(&mut rng, 4, 16)],
        TOL,
    );
    check(
        "gram softmax mix",
        &|t, v| {
            let g = t.head_gram(v[0], 2, 4, 0.5).unwrap();
            let a = t.softmax_cols(g);
            t.head_mix(v[0], a, 2, 4).unwrap()
        },
        vec![rand(&mut rng, 6, 8)],
        TOL,
    );
}

#[test]
fn token_assembly() {
    let mut rng = Rng::new(6);
    check(
        "assemble with cls",
        &|t, v| t.assemble_tokens(v[0], Some(v[1]), v[2], 2).unwrap(),
        vec![rand(&mut rng, 3, 6), rand(&mut rng, 3, 1), rand(&mut rng, 3, 4)],
        TOL,
    );
    check(
        "assemble without cls",
        &|t, v| t.assemble_tokens(v[0], None, v[1], 2).unwrap(),
        vec![rand(&mut rng, 3, 6), rand(&mut rng, 3, 3)],
        TOL,
    );
}

#[test]
fn smoothed_cross_entropy() {
    let mut rng = Rng::new(7);
    for s in [0.0, 0.1] {
        check(
            "smoothed_ce",
            &move |t, v| t.smoothed_cross_entropy(v[0], &[2, 0, 1, 2], s).unwrap(),
            vec![rand(&mut rng, 3, 4).scale(3.0)],
            TOL,
        );
    }
}

#[test]
fn tape_loss_matches_direct_loss() {
    let mut rng = Rng::new(8);
    let logits = rand(&mut rng, 5, 6).scale(4.0);
    let labels = [0, 4, 2, 2, 1, 3];
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let l = tape.smoothed_cross_entropy(x, &labels, 0.1).unwrap();
    let direct = crate_alpha_core::optim::smoothed_ce(&logits, &labels, 0.1).unwrap();
    assert!((tape.value(l).item() - direct).abs() < 1e-12);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::<f64>::filled(2, 2, 1.0));
    let b = tape.param(Matrix::<f64>::filled(3, 1, 1.0));
    let s = tape.sum(a);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a), Matrix::filled(2, 2, 1.0));
    assert_eq!(g.get(b), Matrix::zeros(3, 1));
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::<f64>::zeros(2, 2));
    assert!(tape.backward(a).is_err());
}
