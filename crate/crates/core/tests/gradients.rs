use dere_grl::diff::{grad_check, relative_error, Tape, Tensor};
use dere_grl::harness::gradcheck_suite::{loss_checks, model_check, negative_control, op_checks, STEP, TOLERANCE};
use dere_grl::losses::{loss_mc, loss_total, loss_wc_with_centers, LossTerms, LossWeights};
use dere_grl::model::Variant;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[test]
fn every_op_passes_central_differences() {
    for seed in SEEDS {
        for case in op_checks(seed).unwrap() {
            assert!(case.report.passed(), "{} seed {seed}: {:?}", case.name, case.report);
        }
    }
}

#[test]
fn every_loss_passes_central_differences() {
    for seed in SEEDS {
        for case in loss_checks(seed).unwrap() {
            assert!(case.report.passed(), "{} seed {seed}: {:?}", case.name, case.report);
        }
    }
}

#[test]
fn every_variant_passes_end_to_end() {
    for seed in SEEDS {
        for v in Variant::ALL {
            let case = model_check(seed, v).unwrap();
            assert!(case.report.passed(), "{} seed {seed}: {:?}", case.name, case.report);
            assert!(case.report.coordinates > 50);
        }
    }
}

#[test]
fn checker_rejects_wrong_backward() {
    for seed in SEEDS {
        let case = negative_control(seed).unwrap();
        assert!(!case.report.passed(), "seed {seed}: {:?}", case.report);
        assert!(case.report.max_rel_error > 0.1);
    }
}

#[test]
fn relative_error_uses_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    assert!(relative_error(1e-9, 2e-9) < 1e-2);
}

#[test]
fn mean_center_gradient_is_deviation_over_n() {
    let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 5.0], vec![4.0, 0.0]]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let l = loss_mc(&mut tape, v).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(v).unwrap();
    for r in 0..3 {
        for c in 0..2 {
            let mean = (0..3).map(|i| x.get(i, c)).sum::<f64>() / 3.0;
            assert!((g.get(r, c) - (x.get(r, c) - mean) / 3.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_lambda_removes_term_from_gradient() {
    let w = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
    let f = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 3.0]]).unwrap();
    let grads = |centers: Tensor| {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.9]]).unwrap());
        let fv = tape.param(f.clone());
        let wv = tape.param(w.clone());
        let me = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        let mc = loss_mc(&mut tape, fv).unwrap();
        let wc = loss_wc_with_centers(&mut tape, wv, centers).unwrap();
        let terms = LossTerms { me, mc: Some(mc), wc: Some(wc), b: None };
        let weights = LossWeights { lambda1: 0.7, lambda2: 0.0, lambda3: 0.0 };
        let total = loss_total(&mut tape, &terms, &weights).unwrap();
        tape.backward(total).unwrap();
        [tape.grad(logits).unwrap(), tape.grad(fv).unwrap(), tape.grad(wv).unwrap_or_else(|| Tensor::zeros(&[2, 2]))]
    };
    let a = grads(Tensor::zeros(&[2, 2]));
    let b = grads(Tensor::full(&[2, 2], 3.0));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.bits(), y.bits());
    }
}

#[test]
fn grad_check_catches_nonfinite_function() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let r = grad_check(
        |t, v| {
            let s = t.scale(v, f64::NAN)?;
            t.sum(s)
        },
        &x,
        STEP,
        TOLERANCE,
    );
    if let Ok(report) = r {
        assert!(!report.passed());
    }
}
