use aggdiff::autodiff::{Matrix, Tape, Var};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |v| Matrix::from_shape_vec((rows, cols), v).unwrap())
}

fn f<'t>(x: Var<'t>, w: Var<'t>) -> Var<'t> {
    let h = x.dot(w).unwrap().tanh();
    let p = h.softplus().add_scalar(0.5).unwrap();
    p.ln().unwrap().add(h.sigmoid().square().unwrap()).unwrap().mean().unwrap()
}

fn value(x: &Matrix, w: &Matrix) -> f64 {
    let tape = Tape::new();
    f(tape.leaf(x.clone()), tape.leaf(w.clone())).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(x in matrix(3, 2), w in matrix(2, 4)) {
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let grads = tape.backward(f(xv, wv), &[xv, wv]).unwrap().into_vec();
        let h = 1e-5;
        for (k, base) in [&x, &w].into_iter().enumerate() {
            for (idx, &g) in grads[k].indexed_iter() {
                let (mut plus, mut minus) = (base.clone(), base.clone());
                plus[idx] += h;
                minus[idx] -= h;
                let fd = if k == 0 {
                    (value(&plus, &w) - value(&minus, &w)) / (2.0 * h)
                } else {
                    (value(&x, &plus) - value(&x, &minus)) / (2.0 * h)
                };
                prop_assert!((g - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_the_output(x in matrix(2, 3), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let grad = |scale_sq: f64, scale_tanh: f64| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = xv.square().unwrap().scale(scale_sq).unwrap()
                .add(xv.tanh().scale(scale_tanh).unwrap()).unwrap().sum();
            tape.backward(out, &[xv]).unwrap().into_vec().remove(0)
        };
        let combined = grad(a, b);
        let separate = grad(a, 0.0) + grad(0.0, b);
        for (c, s) in combined.iter().zip(separate.iter()) {
            prop_assert!((c - s).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn sum_gradient_is_ones(x in matrix(4, 3)) {
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let g = tape.backward(xv.sum(), &[xv]).unwrap().into_vec().remove(0);
        prop_assert!(g.iter().all(|&v| v == 1.0));
    }
}
