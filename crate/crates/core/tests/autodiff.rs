use proptest::prelude::*;
use rml::autodiff::{gelu_scalar, grad_check, Objective};
use rml::{DropoutMode, FrozenMasks, RngStream, Tape64, Tensor64, Var};

/// Objective built from a closure over the tape; every parameter is a leaf.
struct Probe<F> {
    build: F,
}

impl<F: FnMut(&mut Tape64, &[Var]) -> Var> Probe<F> {
    fn run(&mut self, params: &[Tensor64], grad: bool) -> rml::Result<(f64, Vec<Tensor64>)> {
        let mut tape = Tape64::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = (self.build)(&mut tape, &vars);
        let value = tape.value(loss).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad_tensor(v)).collect()))
    }
}

impl<F: FnMut(&mut Tape64, &[Var]) -> Var> Objective<f64> for Probe<F> {
    fn loss(&mut self, params: &[Tensor64]) -> rml::Result<f64> {
        Ok(self.run(params, false)?.0)
    }

    fn loss_and_grad(&mut self, params: &[Tensor64]) -> rml::Result<(f64, Vec<Tensor64>)> {
        self.run(params, true)
    }
}

/// Contracts an op output against fixed weights so every output element
/// gets a distinct adjoint.
fn weighted(tape: &mut Tape64, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = RngStream::new(seed);
    let w: Vec<f64> = (0..tape.value(out).len()).map(|_| 0.5 + rng.uniform()).collect();
    let w = tape.constant(Tensor64::new(&shape, w).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn mat(rows: usize, cols: usize, values: &[f64]) -> Tensor64 {
    Tensor64::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap()
}

fn check(params: &[Tensor64], build: impl FnMut(&mut Tape64, &[Var]) -> Var) -> f64 {
    let mut probe = Probe { build };
    let report = grad_check(&mut probe, params, 1e-5, 1e-6).unwrap();
    report.max_rel_err
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape64::new();
    let i = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i, a).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    let x = tape.constant(mat(1, 1, &[2.0]));
    let y = tape.constant(mat(1, 1, &[3.0]));
    let out = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(out).data(), &[6.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape64::new();
    let a = tape.constant(Tensor64::zeros(&[2, 3]));
    let b = tape.constant(Tensor64::zeros(&[2, 3]));
    assert!(tape.matmul(a, b).is_err());
}

#[test]
fn softmax_symmetry_and_overflow() {
    let mut tape = Tape64::new();
    let x = tape.constant(mat(1, 3, &[0.0, 0.0, 0.0]));
    let s = tape.softmax_rows(x).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(mat(1, 2, &[1000.0, 0.0]));
    let s = tape.softmax_rows(x).unwrap();
    let out = tape.value(s).data();
    assert!((out[0] - 1.0).abs() <= 1e-12 && out[1].abs() <= 1e-12);
}

#[test]
fn gelu_reference_values() {
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    // x * Phi(x) with Phi(1) from the standard normal table.
    assert!((gelu_scalar(1.0f64) - 0.841_344_7).abs() <= 1e-5);
    assert!(gelu_scalar(-10.0f64).abs() <= 1e-12);
}

#[test]
fn dropout_identity_cases() {
    let mut tape = Tape64::new();
    let x = tape.param(Tensor64::ones(&[4, 5]));
    let mut rng = RngStream::new(1);
    let same = tape.dropout(x, 0.0, &mut DropoutMode::Live(&mut rng)).unwrap();
    assert_eq!(tape.value(same).data(), tape.value(x).data());
    let off = tape.dropout(x, 0.7, &mut DropoutMode::Off).unwrap();
    assert_eq!(tape.value(off).data(), tape.value(x).data());
    assert!(tape.dropout(x, 1.0, &mut DropoutMode::Off).is_err());
}

#[test]
fn dropout_statistics() {
    let n = 1_000_000;
    let mut tape = Tape64::new();
    let x = tape.constant(Tensor64::ones(&[1000, 1000]));
    let mut rng = RngStream::new(7);
    let y = tape.dropout(x, 0.2, &mut DropoutMode::Live(&mut rng)).unwrap();
    let out = tape.value(y).data();
    let zeros = out.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    let mean = out.iter().sum::<f64>() / n as f64;
    assert!((0.198..=0.202).contains(&zeros), "zero fraction {zeros}");
    assert!((0.995..=1.005).contains(&mean), "mean {mean}");
}

#[test]
fn backward_analytic_cases() {
    let mut tape = Tape64::new();
    let x = tape.param(Tensor64::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]).unwrap());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape64::new();
    let x = tape.param(Tensor64::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape64::new();
    let x = tape.param(Tensor64::ones(&[2, 2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn gradcheck_passes_quadratic_and_catches_sign_flip() {
    let params = [mat(2, 3, &[0.3, -1.2, 0.7, 2.0, -0.4, 1.1])];
    let err = check(&params, |tape, v| {
        let sq = tape.mul(v[0], v[0]).unwrap();
        tape.sum(sq)
    });
    assert!(err <= 1e-6);

    struct Flipped;
    impl Objective<f64> for Flipped {
        fn loss(&mut self, p: &[Tensor64]) -> rml::Result<f64> {
            Ok(p[0].data().iter().map(|x| x * x).sum())
        }
        fn loss_and_grad(&mut self, p: &[Tensor64]) -> rml::Result<(f64, Vec<Tensor64>)> {
            let mut g = p[0].map(|x| 2.0 * x);
            g.data_mut()[1] = -g.data()[1];
            Ok((self.loss(p)?, vec![g]))
        }
    }
    let report = grad_check(&mut Flipped, &params, 1e-5, 1e-6).unwrap();
    assert!(!report.pass);
    assert_eq!(report.worst, (0, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradient(v in values(20)) {
        let params = [mat(3, 4, &v), mat(4, 2, &v[12..])];
        let err = check(&params, |t, p| {
            let o = t.matmul(p[0], p[1]).unwrap();
            weighted(t, o, 1)
        });
        prop_assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn elementwise_gradients(v in values(24)) {
        let params = [mat(2, 3, &v), mat(2, 3, &v[6..]), mat(1, 3, &v[12..])];
        let err = check(&params, |t, p| {
            let a = t.add(p[0], p[1]).unwrap();
            let s = t.sub(a, p[1]).unwrap();
            let m = t.mul(s, p[1]).unwrap();
            let r = t.add_row(m, p[2]).unwrap();
            let g = t.gelu(r);
            let tr = t.transpose(g).unwrap();
            let sc = t.scale(tr, 0.7);
            let w = weighted(t, sc, 2);
            let mean = t.mean(p[0]);
            t.add(w, mean).unwrap()
        });
        prop_assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn softmax_gradient_and_rows(v in values(6)) {
        let params = [mat(2, 3, &v)];
        let err = check(&params, |t, p| {
            let s = t.softmax_rows(p[0]).unwrap();
            weighted(t, s, 3)
        });
        prop_assert!(err <= 1e-6, "{err}");
        let mut tape = Tape64::new();
        let x = tape.constant(params[0].clone());
        let s = tape.softmax_rows(x).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gradient(v in values(12)) {
        let x = mat(3, 4, &v);
        prop_assume!((0..3).all(|r| x.row(r).iter().map(|a| a * a).sum::<f64>() > 0.1));
        let err = check(&[x], |t, p| {
            let n = t.l2_normalize_rows(p[0], 0.0).unwrap();
            weighted(t, n, 4)
        });
        prop_assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn stacking_gradients(v in values(18)) {
        let params = [mat(2, 3, &v), mat(2, 3, &v[6..]), mat(2, 3, &v[12..])];
        let err = check(&params, |t, p| {
            let c = t.concat_rows(p[0], p[1]).unwrap();
            let i = t.interleave_rows(&[p[0], p[1], p[2]]).unwrap();
            let a = weighted(t, c, 5);
            let b = weighted(t, i, 6);
            t.add(a, b).unwrap()
        });
        prop_assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn block_gradients(v in values(36)) {
        // Two samples of three tokens, width 4.
        let params = [mat(6, 4, &v), mat(6, 4, &v[12..]), mat(6, 4, &v[6..])];
        let err = check(&params, |t, p| {
            let s = t.block_scores(p[0], p[1], 3, 0.5).unwrap();
            let a = t.softmax_rows(s).unwrap();
            let m = t.block_mix(a, p[2], 3).unwrap();
            let f = t.block_sum(m, 3).unwrap();
            weighted(t, f, 7)
        });
        prop_assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn nll_gradients(v in values(16), targets in prop::collection::vec(0usize..4, 4)) {
        let err = check(&[mat(4, 4, &v)], |t, p| t.nll_logits(p[0], &targets, false).unwrap());
        prop_assert!(err <= 1e-6, "{err}");

        let diag: Vec<usize> = (0..4).map(|i| (i + 1 + targets[i] % 3) % 4).collect();
        let err = check(&[mat(4, 4, &v)], |t, p| t.nll_logits(p[0], &diag, true).unwrap());
        prop_assert!(err <= 1e-6, "{err}");

        let err = check(&[mat(4, 4, &v)], |t, p| {
            let q = t.softmax_rows(p[0]).unwrap();
            t.nll_probs(q, &targets, 1e-9).unwrap()
        });
        prop_assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn frozen_dropout_gradient(v in values(12), seed in any::<u64>()) {
        let mut masks = FrozenMasks::new(RngStream::new(seed));
        let err = check(&[mat(3, 4, &v)], |t, p| {
            masks.rewind();
            let d = t.dropout(p[0], 0.3, &mut DropoutMode::Frozen(&mut masks)).unwrap();
            let g = t.gelu(d);
            weighted(t, g, 8)
        });
        prop_assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn forward_values_are_finite(v in prop::collection::vec(-1e3f64..1e3, 12)) {
        let mut tape = Tape64::new();
        let x = tape.param(mat(3, 4, &v));
        let s = tape.softmax_rows(x).unwrap();
        let g = tape.gelu(x);
        let l = tape.nll_logits(x, &[0, 1, 2], false).unwrap();
        prop_assert!(tape.value(s).all_finite() && tape.value(g).all_finite());
        prop_assert!(tape.value(l).all_finite());
        tape.backward(l).unwrap();
        prop_assert!(tape.grad_tensor(x).all_finite());
    }
}
