//! Determinant derivative identities and the consistency check between the
//! matrix-propagated Jacobian determinant and the exponential of the
//! accumulated log-determinant.
//!
//! The gradient of `det` is the signed cofactor matrix. The second-order
//! contraction is checked against a directional second central difference of
//! `det` (the declared finite-difference oracle); an analytic second-cofactor
//! path is intentionally not implemented since this is never a hot path.

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Matrix of signed cofactors `(-1)^{i+j} M_{ij}(A)`.
pub fn cofactor_matrix(a: &Mat) -> Mat {
    let n = a.n();
    let mut out = Mat::zeros(n);
    if n == 1 {
        out.set(0, 0, 1.0);
        return out;
    }
    for i in 0..n {
        for j in 0..n {
            let minor = a.minor_matrix(i, j).det();
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            out.set(i, j, sign * minor);
        }
    }
    out
}

/// Entry (i, j) of the gradient of `det` is the signed cofactor, so this is
/// just `cofactor_matrix` under its analytic name.
pub fn det_gradient(a: &Mat) -> Mat {
    cofactor_matrix(a)
}

/// First-order identity: `sum_{ij} d(det)/dA_ij (BA)_ij` against `det(A) tr(B)`.
/// Returns `(lhs, rhs)`.
pub fn first_order_identity(a: &Mat, b: &Mat) -> Result<(f64, f64)> {
    if a.n() != b.n() {
        return Err(Error::Dimension { expected: a.n(), got: b.n() });
    }
    let grad = det_gradient(a);
    let ba = b.mul(a);
    let lhs: f64 = grad.data().iter().zip(ba.data()).map(|(g, m)| g * m).sum();
    let rhs = a.det() * b.trace();
    Ok((lhs, rhs))
}

/// Second-order identity:
/// `sum d^2(det)/dA_ij dA_kl (BA)_ij (BA)_kl` against `(tr(B)^2 - tr(B^2)) det(A)`.
///
/// The left side is the directional second derivative of `det` along `BA`,
/// estimated by a central difference with step `h = 1e-4 (1 + ||A||_F)`.
pub fn second_order_identity(a: &Mat, b: &Mat) -> Result<(f64, f64)> {
    if a.n() != b.n() {
        return Err(Error::Dimension { expected: a.n(), got: b.n() });
    }
    let ba = b.mul(a);
    let h = 1e-4 * (1.0 + a.frobenius());
    let mut plus = a.clone();
    plus.add_assign_scaled(&ba, h);
    let mut minus = a.clone();
    minus.add_assign_scaled(&ba, -h);
    let lhs = (plus.det() - 2.0 * a.det() + minus.det()) / (h * h);
    let trb = b.trace();
    let rhs = (trb * trb - b.trace_mul(b)) * a.det();
    Ok((lhs, rhs))
}

/// Relative gap between `det(J)` and `exp(bv + mart)`.
pub fn liouville_consistency(jac: &Mat, bv: f64, mart: f64) -> Result<f64> {
    let det = jac.det();
    if det <= 0.0 {
        return Err(Error::DeterminantSign { step: 0, time: 0.0, point: 0 });
    }
    let liouville = (bv + mart).exp();
    Ok((det - liouville).abs() / liouville)
}

/// One row of the identity check table.
#[derive(Clone, Debug, serde::Serialize)]
pub struct IdentityCheckRow {
    pub check: &'static str,
    pub d: usize,
    pub samples: usize,
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Random test matrix: entries uniform in [-1, 1], rejecting |det| < 1e-3 so
/// relative tolerances stay meaningful.
pub fn random_test_matrix(rng: &mut impl rand::Rng, n: usize) -> Mat {
    loop {
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = Mat::from_row_major(n, data);
        if m.det().abs() >= 1e-3 {
            return m;
        }
    }
}

/// Run the full identity suite on `samples` random pairs per dimension
/// d = 2..=5 and report the worst relative deviations.
pub fn identities_table(samples: usize, seed: u64) -> Vec<IdentityCheckRow> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for d in 2..=5 {
        let mut dev_grad: f64 = 0.0;
        let mut dev_first: f64 = 0.0;
        let mut dev_second: f64 = 0.0;
        for _ in 0..samples {
            let a = random_test_matrix(&mut rng, d);
            let b = random_test_matrix(&mut rng, d);
            let grad = det_gradient(&a);
            let fd = fd_det_gradient(&a, 1e-5);
            for i in 0..d {
                for j in 0..d {
                    let scale = 1.0 + grad.at(i, j).abs();
                    dev_grad = dev_grad.max((grad.at(i, j) - fd.at(i, j)).abs() / scale);
                }
            }
            let (lhs, rhs) = first_order_identity(&a, &b).expect("same size");
            dev_first = dev_first.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
            let (lhs, rhs) = second_order_identity(&a, &b).expect("same size");
            dev_second = dev_second.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
        }
        for (check, dev, tol) in [
            ("det_gradient_vs_fd", dev_grad, 1e-6),
            ("first_order_identity", dev_first, 1e-8),
            ("second_order_identity", dev_second, 1e-5),
        ] {
            rows.push(IdentityCheckRow {
                check,
                d,
                samples,
                max_rel_dev: dev,
                tolerance: tol,
                pass: dev <= tol,
            });
        }
    }
    rows
}

/// Render the identity table as CSV.
pub fn identities_csv(rows: &[IdentityCheckRow]) -> String {
    let mut out = String::from("check,d,samples,max_rel_dev,tolerance,pass\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.check, r.d, r.samples, r.max_rel_dev, r.tolerance, r.pass
        ));
    }
    out
}

/// Central finite-difference gradient of `det`; oracle for `det_gradient`.
pub fn fd_det_gradient(a: &Mat, h: f64) -> Mat {
    let n = a.n();
    let mut out = Mat::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mut plus = a.clone();
            plus.add_at(i, j, h);
            let mut minus = a.clone();
            minus.add_at(i, j, -h);
            out.set(i, j, (plus.det() - minus.det()) / (2.0 * h));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn gradient_of_identity_is_identity() {
        let grad = det_gradient(&Mat::identity(2));
        assert_eq!(grad, Mat::identity(2));
    }

    #[test]
    fn gradient_2x2_closed_form() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let grad = det_gradient(&a);
        let expected = Mat::from_rows(&[vec![4.0, -3.0], vec![-2.0, 1.0]]);
        assert_eq!(grad, expected);
    }

    #[test]
    fn gradient_matches_finite_differences_4x4() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_test_matrix(&mut rng, 4);
            let grad = det_gradient(&a);
            let fd = fd_det_gradient(&a, 1e-5);
            for i in 0..4 {
                for j in 0..4 {
                    let scale = 1.0 + grad.at(i, j).abs();
                    assert!(
                        (grad.at(i, j) - fd.at(i, j)).abs() / scale < 1e-6,
                        "entry ({i},{j}): {} vs {}",
                        grad.at(i, j),
                        fd.at(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn adjugate_identity() {
        // A * adj(A) = det(A) I, with adj = cofactor transpose.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for n in 2..=5 {
            let a = random_test_matrix(&mut rng, n);
            let cof = cofactor_matrix(&a);
            let det = a.det();
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += a.at(i, k) * cof.at(j, k);
                    }
                    let expected = if i == j { det } else { 0.0 };
                    assert!((s - expected).abs() <= 1e-9 * (1.0 + det.abs()), "({i},{j}): {s} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn first_order_trivial_cases() {
        let i2 = Mat::identity(2);
        let (lhs, rhs) = first_order_identity(&i2, &i2).unwrap();
        assert_eq!(lhs, 2.0);
        assert_eq!(rhs, 2.0);
        let zero = Mat::zeros(3);
        let a = Mat::identity(3);
        let (lhs, rhs) = first_order_identity(&a, &zero).unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
    }

    #[test]
    fn first_order_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for n in 2..=5 {
            for _ in 0..100 {
                let a = random_test_matrix(&mut rng, n);
                let b = random_test_matrix(&mut rng, n);
                let (lhs, rhs) = first_order_identity(&a, &b).unwrap();
                assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + rhs.abs()), "n={n}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn second_order_trivial_cases() {
        let i2 = Mat::identity(2);
        let (lhs, rhs) = second_order_identity(&i2, &i2).unwrap();
        assert_eq!(rhs, 2.0);
        assert!((lhs - 2.0).abs() < 1e-5);

        let nilpotent = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        let (lhs, rhs) = second_order_identity(&i2, &nilpotent).unwrap();
        assert_eq!(rhs, 0.0);
        assert!(lhs.abs() < 1e-5);
    }

    #[test]
    fn second_order_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for n in 2..=3 {
            for _ in 0..100 {
                let a = random_test_matrix(&mut rng, n);
                let b = random_test_matrix(&mut rng, n);
                let (lhs, rhs) = second_order_identity(&a, &b).unwrap();
                assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()), "n={n}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn consistency_trivial_and_sign_error() {
        let id = Mat::identity(3);
        assert_eq!(liouville_consistency(&id, 0.0, 0.0).unwrap(), 0.0);
        let mut neg = Mat::identity(2);
        neg.set(0, 0, -1.0);
        assert!(matches!(liouville_consistency(&neg, 0.0, 0.0), Err(Error::DeterminantSign { .. })));
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn mat_strategy(n: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Mat::from_row_major(n, v))
    }

    proptest! {
        // Identity ii holds for arbitrary matrices, singular ones included.
        #[test]
        fn first_order_identity_everywhere(n in 2usize..=4, seed_a in 0u64..1000, seed_b in 0u64..1000) {
            use rand::SeedableRng;
            let mut ra = rand_chacha::ChaCha12Rng::seed_from_u64(seed_a);
            let mut rb = rand_chacha::ChaCha12Rng::seed_from_u64(seed_b ^ 0xabcd);
            use rand::Rng;
            let a = Mat::from_row_major(n, (0..n * n).map(|_| ra.gen_range(-1.0..1.0)).collect());
            let b = Mat::from_row_major(n, (0..n * n).map(|_| rb.gen_range(-1.0..1.0)).collect());
            let (lhs, rhs) = first_order_identity(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        // The cofactor transpose is the adjugate: A adj(A) = det(A) I.
        #[test]
        fn adjugate_identity_everywhere(a in mat_strategy(3)) {
            let cof = cofactor_matrix(&a);
            let det = a.det();
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += a.at(i, k) * cof.at(j, k);
                    }
                    let expect = if i == j { det } else { 0.0 };
                    prop_assert!((s - expect).abs() <= 1e-12 * (1.0 + det.abs()) + 1e-12);
                }
            }
        }
    }
}
