use super::*;
use proptest::prelude::*;

fn s(x: f64) -> Matrix {
    Matrix::scalar(x)
}

#[test]
fn square_value_and_gradient() {
    let (tape, leaves, out) = record(&[s(3.0)], |t, l| t.square(l[0])).unwrap();
    assert_eq!(tape.value(out).item(), 9.0);
    let g = tape.gradient(out, &leaves).unwrap();
    assert_eq!(g[leaves[0]].item(), 6.0);
}

#[test]
fn tanh_at_origin() {
    let (tape, _, out) = record(&[s(0.0)], |t, l| t.tanh(l[0])).unwrap();
    assert_eq!(tape.value(out).item(), 0.0);
}

#[test]
fn product_gradient() {
    let (tape, l, out) = record(&[s(2.0), s(5.0)], |t, l| t.mul(l[0], l[1])).unwrap();
    let g = tape.gradient(out, &l).unwrap();
    assert_eq!(g[l[0]].item(), 5.0);
    assert_eq!(g[l[1]].item(), 2.0);
}

#[test]
fn non_finite_reports_node() {
    let err = record(&[s(-1.0)], |t, l| {
        let e = t.exp(l[0]);
        t.log(l[0]);
        e
    })
    .unwrap_err();
    assert_eq!(err, DiffError::NonFinite { node: 2 });
}

#[test]
fn contract_violations() {
    let mut tape = Tape::new();
    let x = tape.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
    let y = tape.square(x);
    assert!(matches!(
        tape.gradient(y, &[x]),
        Err(DiffError::NotScalar { .. })
    ));
    let s = tape.sum(y);
    assert_eq!(
        tape.gradient(s, &[y]),
        Err(DiffError::NotALeaf { node: y.id() })
    );
    assert_eq!(
        tape.gradient(s, &[Var(99)]),
        Err(DiffError::UnknownNode { node: 99 })
    );
    assert!(matches!(
        tape.grad_of_grad_dot(s, &[x], &[], &[x]),
        Err(DiffError::CountMismatch { .. })
    ));
}

#[test]
fn missing_dependence_is_zero() {
    let (tape, l, out) = record(&[s(2.0), Matrix::zeros(2, 3)], |t, l| t.square(l[0])).unwrap();
    let g = tape.gradient(out, &l).unwrap();
    assert_eq!(g[l[1]], Matrix::zeros(2, 3));
}

#[test]
fn grad_of_grad_dot_closed_form() {
    // inner = (w x)² / 2, grad_w = w x², d(grad_w v)/dx = 2 w x v
    let mut tape = Tape::new();
    let w = tape.leaf(s(1.0));
    let x = tape.leaf(s(2.0));
    let wx = tape.mul(w, x);
    let sq = tape.square(wx);
    let inner = tape.scale(sq, 0.5);
    let g = tape.grad_of_grad_dot(inner, &[w], &[s(3.0)], &[x, w]).unwrap();
    assert_eq!(g[x].item(), 12.0);
    // d(w x² v)/dw = x² v = 12 as well
    assert_eq!(g[w].item(), 12.0);

    let mut tape = Tape::new();
    let w = tape.leaf(s(1.5));
    let unrelated = tape.leaf(s(4.0));
    let inner = tape.square(w);
    let g = tape
        .grad_of_grad_dot(inner, &[w], &[s(1.0)], &[unrelated])
        .unwrap();
    assert_eq!(g[unrelated].item(), 0.0);
}

#[test]
fn clip_gradient_vanishes_outside_bounds() {
    let x = Matrix::from_vec(1, 5, vec![0.5, 0.8, 1.0, 1.2, 1.7]);
    let (tape, l, out) = record(&[x], |t, l| {
        let c = t.clip(l[0], 0.8, 1.2);
        t.sum(c)
    })
    .unwrap();
    let g = tape.gradient(out, &l).unwrap();
    assert_eq!(g[l[0]].as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn min_tie_takes_first_argument() {
    let (tape, l, out) = record(&[s(1.0), s(1.0)], |t, l| t.min(l[0], l[1])).unwrap();
    let g = tape.gradient(out, &l).unwrap();
    assert_eq!((g[l[0]].item(), g[l[1]].item()), (1.0, 0.0));
}

#[test]
fn log_softmax_matches_direct_formula() {
    let z = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![1000.0, 0.0, -5.0]]);
    let (tape, _, out) = record(&[z.clone()], |t, l| t.log_softmax(l[0])).unwrap();
    let v = tape.value(out);
    let lse0 = (0.3f64.exp() + (-1.2f64).exp() + 2.0f64.exp()).ln();
    assert!((v[(0, 0)] - (0.3 - lse0)).abs() < 1e-14);
    assert!(v[(1, 0)].abs() < 1e-14);
    assert!(v.is_finite());
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

fn central_difference(f: &dyn Fn(&[Matrix]) -> f64, inputs: &[Matrix], h: f64) -> Vec<Matrix> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mut g = Matrix::zeros(m.rows(), m.cols());
            for idx in 0..m.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_mut_slice()[idx] += h;
                minus[k].as_mut_slice()[idx] -= h;
                g.as_mut_slice()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            g
        })
        .collect()
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let num = a.zip_map(b, |x, y| (x - y) * (x - y)).sum().sqrt();
    let den = a.dot(a).sqrt().max(b.dot(b).sqrt()).max(1e-12);
    num / den
}

fn mlp_loss(t: &mut Tape, l: &[Var]) -> Var {
    // l = [x, w1, b1, w2, b2, w3, b3, y]
    let mut h = l[0];
    for layer in 0..3 {
        let z = t.matmul(h, l[1 + 2 * layer]);
        let z = t.add_row(z, l[2 + 2 * layer]);
        h = if layer < 2 { t.tanh(z) } else { z };
    }
    let d = t.sub(h, l[7]);
    let sq = t.square(d);
    t.mean(sq)
}

fn seeded_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, "diff-test", (rows * 131 + cols) as u64);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect(),
    )
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let inputs = vec![
            seeded_matrix(4, 3, seed, 1.0),
            seeded_matrix(3, 5, seed + 10, 0.8),
            seeded_matrix(1, 5, seed + 20, 0.3),
            seeded_matrix(5, 4, seed + 30, 0.8),
            seeded_matrix(1, 4, seed + 40, 0.3),
            seeded_matrix(4, 2, seed + 50, 0.8),
            seeded_matrix(1, 2, seed + 60, 0.3),
            seeded_matrix(4, 2, seed + 70, 1.0),
        ];
        let (tape, l, out) = record(&inputs, mlp_loss).unwrap();
        let g = tape.gradient(out, &l).unwrap();
        let f = |x: &[Matrix]| {
            let (t, _, o) = record(x, mlp_loss).unwrap();
            t.value(o).item()
        };
        let fd = central_difference(&f, &inputs, 1e-5);
        for (k, fdk) in fd.iter().enumerate() {
            let e = rel_err(&g[l[k]], fdk);
            assert!(e <= 1e-6, "input {k}: relative error {e}");
        }
    }
}

#[test]
fn recorded_gradient_equals_plain_gradient() {
    let inputs: Vec<Matrix> = (0..8)
        .map(|i| {
            let shapes = [(4, 3), (3, 5), (1, 5), (5, 4), (1, 4), (4, 2), (1, 2), (4, 2)];
            seeded_matrix(shapes[i].0, shapes[i].1, 99 + i as u64, 0.7)
        })
        .collect();
    let (mut tape, l, out) = record(&inputs, mlp_loss).unwrap();
    let plain = tape.gradient(out, &l).unwrap();
    let rec = tape.gradient_recorded(out, &l).unwrap();
    for (k, v) in rec.iter().enumerate() {
        assert_eq!(tape.value(*v), &plain[l[k]]);
    }
}

#[test]
fn replay_reproduces_values_bit_exactly() {
    let inputs: Vec<Matrix> = [(4, 3), (3, 5), (1, 5), (5, 4), (1, 4), (4, 2), (1, 2), (4, 2)]
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| seeded_matrix(r, c, i as u64, 0.9))
        .collect();
    let (mut tape, l, out) = record(&inputs, mlp_loss).unwrap();
    tape.gradient_recorded(out, &l).unwrap();
    let replayed = tape.replay();
    for (i, v) in replayed.iter().enumerate() {
        assert_eq!(v, tape.value(Var(i)));
    }
}

#[test]
fn gradients_are_deterministic() {
    let inputs: Vec<Matrix> = [(4, 3), (3, 5), (1, 5), (5, 4), (1, 4), (4, 2), (1, 2), (4, 2)]
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| seeded_matrix(r, c, 7 + i as u64, 0.9))
        .collect();
    let run = || {
        let (t, l, o) = record(&inputs, mlp_loss).unwrap();
        t.gradient(o, &l).unwrap()
    };
    assert_eq!(run(), run());
}

// ---------------------------------------------------------------------------
// Random expressions
// ---------------------------------------------------------------------------

const N_LEAVES: usize = 3;

#[derive(Clone, Debug)]
struct Step {
    op: u8,
    a: usize,
    b: usize,
}

/// Builds a random expression over `N_LEAVES` leaves of shape 2x2. Each step
/// combines two earlier values; the final value is the sum of the last one.
/// Returns the output and the smallest distance of any kinked input to its
/// kink.
fn build_expr(t: &mut Tape, leaves: &[Var], steps: &[Step]) -> (Var, f64) {
    let mut vals: Vec<Var> = leaves.to_vec();
    let mut margin = f64::INFINITY;
    for st in steps {
        let a = vals[st.a % vals.len()];
        let b = vals[st.b % vals.len()];
        let out = match st.op % 13 {
            0 => t.add(a, b),
            1 => t.mul(a, b),
            2 => {
                // a / (b² + 1)
                let sq = t.square(b);
                let one = t.constant(Matrix::filled(2, 2, 1.0));
                let d = t.add(sq, one);
                t.div(a, d)
            }
            3 => t.neg(a),
            4 => {
                let d = t.value(a).map(|x| (x + 2.0).abs().min((x - 2.0).abs()));
                margin = margin.min(d.as_slice().iter().copied().fold(f64::INFINITY, f64::min));
                let c = t.clip(a, -2.0, 2.0);
                t.exp(c)
            }
            5 => {
                // log(a² + 0.5)
                let sq = t.square(a);
                let c = t.constant(Matrix::filled(2, 2, 0.5));
                let p = t.add(sq, c);
                t.log(p)
            }
            6 => t.tanh(a),
            7 => {
                let d = t.value(a).zip_map(t.value(b), |x, y| (x - y).abs());
                margin = margin.min(d.as_slice().iter().copied().fold(f64::INFINITY, f64::min));
                t.min(a, b)
            }
            8 => {
                let d = t.value(a).zip_map(t.value(b), |x, y| (x - y).abs());
                margin = margin.min(d.as_slice().iter().copied().fold(f64::INFINITY, f64::min));
                t.max(a, b)
            }
            9 => {
                let d = t.value(a).map(|x| (x + 0.5).abs().min((x - 0.5).abs()));
                margin = margin.min(d.as_slice().iter().copied().fold(f64::INFINITY, f64::min));
                t.clip(a, -0.5, 0.5)
            }
            10 => t.matmul(a, b),
            11 => t.square(a),
            _ => {
                let m = t.mean(a);
                let s = t.sum(b);
                let ms = t.mul(m, s);
                t.broadcast(ms, 2, 2)
            }
        };
        vals.push(out);
    }
    let last = *vals.last().unwrap();
    let out = t.sum(last);
    (out, margin)
}

fn steps_strategy() -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec(
        (0u8..13, 0usize..16, 0usize..16).prop_map(|(op, a, b)| Step { op, a, b }),
        1..=5,
    )
}

fn leaves_strategy() -> impl Strategy<Value = Vec<Matrix>> {
    prop::collection::vec(
        prop::collection::vec(-1.5f64..1.5, 4).prop_map(|v| Matrix::from_vec(2, 2, v)),
        N_LEAVES,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_expressions_match_finite_differences(steps in steps_strategy(), inputs in leaves_strategy()) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let (out, margin) = build_expr(&mut tape, &leaves, &steps);
        prop_assume!(margin > 1e-3);
        prop_assume!(tape.value(out).item().abs() < 1e6);
        let g = tape.gradient(out, &leaves).unwrap();
        let f = |x: &[Matrix]| {
            let mut t = Tape::new();
            let l: Vec<Var> = x.iter().map(|m| t.leaf(m.clone())).collect();
            let (o, _) = build_expr(&mut t, &l, &steps);
            t.value(o).item()
        };
        let fd = central_difference(&f, &inputs, 1e-5);
        for (k, fdk) in fd.iter().enumerate() {
            let gk = &g[leaves[k]];
            // finite differences straddling a kink are not meaningful
            let scale = gk.dot(gk).sqrt().max(fdk.dot(fdk).sqrt());
            prop_assume!(scale < 1e6);
            let e = rel_err(gk, fdk);
            prop_assert!(e <= 1e-6 || (scale < 1e-6 && e * scale < 1e-10),
                "leaf {k}: relative error {e}");
        }
    }

    #[test]
    fn gradient_is_linear(
        s1 in steps_strategy(),
        s2 in steps_strategy(),
        inputs in leaves_strategy(),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let (f, _) = build_expr(&mut tape, &leaves, &s1);
        let (g, _) = build_expr(&mut tape, &leaves, &s2);
        prop_assume!(tape.value(f).item().abs() < 1e6 && tape.value(g).item().abs() < 1e6);
        let af = tape.scale(f, alpha);
        let bg = tape.scale(g, beta);
        let h = tape.add(af, bg);
        let gf = tape.gradient(f, &leaves).unwrap();
        let gg = tape.gradient(g, &leaves).unwrap();
        let gh = tape.gradient(h, &leaves).unwrap();
        for &l in &leaves {
            let combo = gf[l].zip_map(&gg[l], |x, y| alpha * x + beta * y);
            let tol = 1e-12 * (1.0 + combo.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())));
            prop_assert!(gh[l].max_abs_diff(&combo) <= tol);
        }
    }

    #[test]
    fn mixed_second_derivatives_are_symmetric(
        steps in prop::collection::vec(
            (prop::sample::select(vec![0u8, 1, 2, 3, 5, 6, 10, 11, 12]), 0usize..16, 0usize..16)
                .prop_map(|(op, a, b)| Step { op, a, b }),
            1..=5,
        ),
        inputs in leaves_strategy(),
        i in 0usize..4,
        j in 0usize..4,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs[0].clone());
        let y = tape.leaf(inputs[1].clone());
        let z = tape.leaf(inputs[2].clone());
        let (f, _) = build_expr(&mut tape, &[x, y, z], &steps);
        prop_assume!(tape.value(f).item().abs() < 1e4);
        let mut ei = Matrix::zeros(2, 2);
        ei.as_mut_slice()[i] = 1.0;
        let mut ej = Matrix::zeros(2, 2);
        ej.as_mut_slice()[j] = 1.0;
        // d/dy_j (df/dx · e_i) versus d/dx_i (df/dy · e_j)
        let mut t1 = tape.clone();
        let a = t1.grad_of_grad_dot(f, &[x], &[ei], &[y]).unwrap()[y].as_slice()[j];
        let mut t2 = tape.clone();
        let b = t2.grad_of_grad_dot(f, &[y], &[ej], &[x]).unwrap()[x].as_slice()[i];
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs().max(b.abs())), "{a} vs {b}");
    }
}

#[test]
fn recorded_gradient_at_interior_node_is_partial() {
    let mut tape = Tape::new();
    let x = tape.leaf(Matrix::from_vec(1, 2, vec![1.5, -2.0]));
    let y = tape.square(x);
    let yy = tape.square(y);
    let s = tape.sum(yy);
    let g = tape.gradient_recorded(s, &[y]).unwrap();
    // ds/dy = 2y = 2x²
    assert_eq!(tape.value(g[0]).as_slice(), &[4.5, 8.0]);
    // the adjoint is still differentiable through y: d/dx Σ 2x² = 4x
    let t = tape.sum(g[0]);
    let gx = tape.gradient(t, &[x]).unwrap();
    assert_eq!(gx[x].as_slice(), &[6.0, -8.0]);
}
