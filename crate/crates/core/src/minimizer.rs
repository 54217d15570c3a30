//! Pointwise feedback synthesis: minimize `phi(v) = 1/2 v'R v + y v` over
//! the admissible set, where `y = (xi'P + p')(B + M(xi))`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::model::{control_matrix, AdmissibleSet, BilinearDynamics};

/// Relative eigenvalue floor separating invertible from singular `R`.
pub const PD_THRESHOLD: f64 = 1e-10;

/// `y = (xi'P + p')(B(t) + M(t, xi))`, returned as a column vector of length `nu`.
pub fn feedback_gradient_row(
    xi: &DVector<f64>,
    pm: &DMatrix<f64>,
    pv: &DVector<f64>,
    dynamics: &BilinearDynamics,
    t: f64,
) -> Result<DVector<f64>> {
    let n = dynamics.n();
    if pm.shape() != (n, n) || pv.len() != n {
        return Err(invalid(format!(
            "gradient row: P is {:?} and p has length {}, expected n = {n}",
            pm.shape(),
            pv.len()
        )));
    }
    let m = dynamics.b().eval(t) + control_matrix(xi, dynamics, t)?;
    // (xi'P + p')(B + M) transposed; P is symmetric
    let costate = pm * xi + pv;
    Ok(m.transpose() * costate)
}

/// `1/2 v'R v + y v`
pub fn objective(y: &DVector<f64>, r: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    0.5 * v.dot(&(r * v)) + y.dot(v)
}

/// Global minimizer of `1/2 v'R v + y v` over `set`.
///
/// Finite sets are searched exhaustively, keeping the lowest index on ties.
/// Unconstrained problems need `R` positive definite. Boxes need a diagonal
/// `R` and are minimized componentwise; a zero-weight component with zero
/// slope goes to its lower bound.
pub fn argmin_control(y: &DVector<f64>, r: &DMatrix<f64>, set: &AdmissibleSet) -> Result<DVector<f64>> {
    let nu = y.len();
    if r.shape() != (nu, nu) {
        return Err(invalid(format!("R is {:?}, expected {nu}x{nu}", r.shape())));
    }
    match set {
        AdmissibleSet::FiniteSet(points) => {
            let mut best = 0;
            let mut best_val = f64::INFINITY;
            for (i, p) in points.iter().enumerate() {
                if p.len() != nu {
                    return Err(invalid(format!("admissible point {i} has length {}, expected {nu}", p.len())));
                }
                let val = objective(y, r, p);
                if val < best_val {
                    best = i;
                    best_val = val;
                }
            }
            points
                .get(best)
                .cloned()
                .ok_or_else(|| invalid("finite admissible set is empty"))
        }
        AdmissibleSet::Unconstrained => {
            let sym = (r + r.transpose()) * 0.5;
            let eig = sym.clone().symmetric_eigenvalues();
            let norm = eig.amax();
            if norm == 0.0 || eig.min() <= PD_THRESHOLD * norm {
                // a flat objective is bounded: any control is optimal
                if y.iter().all(|v| *v == 0.0) {
                    return Ok(DVector::zeros(nu));
                }
                return Err(Error::UnboundedObjective(
                    "unconstrained control needs a positive definite R".into(),
                ));
            }
            let chol = sym
                .cholesky()
                .ok_or_else(|| Error::UnboundedObjective("R is not positive definite".into()))?;
            Ok(-chol.solve(y))
        }
        AdmissibleSet::Box { lo, hi } => {
            if lo.len() != nu || hi.len() != nu {
                return Err(invalid(format!("box bounds must have length {nu}")));
            }
            for i in 0..nu {
                for k in 0..nu {
                    if i != k && r[(i, k)] != 0.0 {
                        return Err(Error::UnsupportedSet(
                            "box constraints require a diagonal control weight".into(),
                        ));
                    }
                }
            }
            let v = DVector::from_fn(nu, |i, _| {
                let (ri, yi) = (r[(i, i)], y[i]);
                if ri > 0.0 {
                    (-yi / ri).clamp(lo[i], hi[i])
                } else if yi < 0.0 {
                    hi[i]
                } else {
                    lo[i]
                }
            });
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::UnboundedObjective(
                    "box component with zero weight has an infinite bound".into(),
                ));
            }
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientProvider;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn savs_set() -> AdmissibleSet {
        AdmissibleSet::FiniteSet(vec![v(&[0.0, 1.0]), v(&[1.0, 0.0]), v(&[0.0, 0.0])])
    }

    fn scalar_dynamics() -> BilinearDynamics {
        let c = |x: f64| CoefficientProvider::constant(DMatrix::from_element(1, 1, x));
        BilinearDynamics::new(c(0.0), c(1.0), vec![c(1.0)], c(0.0), DVector::zeros(1)).unwrap()
    }

    #[test]
    fn gradient_row_examples() {
        let d = scalar_dynamics();
        let one = |x: f64| DMatrix::from_element(1, 1, x);
        let zero = feedback_gradient_row(&v(&[3.0]), &one(0.0), &v(&[0.0]), &d, 0.0).unwrap();
        assert_eq!(zero[0], 0.0);
        // M(t, 0) = 0 leaves p'B
        let at_origin = feedback_gradient_row(&v(&[0.0]), &one(5.0), &v(&[2.5]), &d, 0.0).unwrap();
        assert_eq!(at_origin[0], 2.5);
        let y = feedback_gradient_row(&v(&[3.0]), &one(2.0), &v(&[1.0]), &d, 0.0).unwrap();
        assert_eq!(y[0], 28.0);
        assert!(feedback_gradient_row(&v(&[3.0]), &DMatrix::zeros(2, 2), &v(&[1.0]), &d, 0.0).is_err());
    }

    #[test]
    fn finite_set_table_search() {
        let got = argmin_control(&v(&[-3.0, 2.0]), &DMatrix::zeros(2, 2), &savs_set()).unwrap();
        assert_eq!(got, v(&[1.0, 0.0]));
        let tie = argmin_control(&v(&[0.0, 0.0]), &DMatrix::zeros(2, 2), &savs_set()).unwrap();
        assert_eq!(tie, v(&[0.0, 1.0]));
    }

    #[test]
    fn unconstrained_stationary_point() {
        let got = argmin_control(&v(&[1.0, -2.0]), &DMatrix::identity(2, 2), &AdmissibleSet::Unconstrained).unwrap();
        assert_eq!(got, v(&[-1.0, 2.0]));
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            argmin_control(&v(&[1.0, 1.0]), &singular, &AdmissibleSet::Unconstrained),
            Err(Error::UnboundedObjective(_))
        ));
        assert!(matches!(
            argmin_control(&v(&[1.0, 1.0]), &DMatrix::zeros(2, 2), &AdmissibleSet::Unconstrained),
            Err(Error::UnboundedObjective(_))
        ));
        let flat = argmin_control(&v(&[0.0, 0.0]), &DMatrix::zeros(2, 2), &AdmissibleSet::Unconstrained);
        assert_eq!(flat.unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn box_clamping_and_degenerate_channels() {
        let b = AdmissibleSet::Box { lo: v(&[-1.0, -1.0]), hi: v(&[1.0, 1.0]) };
        let got = argmin_control(&v(&[5.0, 0.5]), &DMatrix::identity(2, 2), &b).unwrap();
        assert_eq!(got, v(&[-1.0, -0.5]));

        let zero_r = DMatrix::zeros(2, 2);
        assert_eq!(argmin_control(&v(&[2.0, -2.0]), &zero_r, &b).unwrap(), v(&[-1.0, 1.0]));
        assert_eq!(argmin_control(&v(&[0.0, 0.0]), &zero_r, &b).unwrap(), v(&[-1.0, -1.0]));

        let coupled = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        assert!(matches!(argmin_control(&v(&[0.0, 0.0]), &coupled, &b), Err(Error::UnsupportedSet(_))));
    }

    #[test]
    fn unconstrained_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let l = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let r = &l * l.transpose() + DMatrix::identity(3, 3) * 0.1;
            let y = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let nu = argmin_control(&y, &r, &AdmissibleSet::Unconstrained).unwrap();
            let resid = (&r * &nu + &y).norm();
            assert!(resid <= 1e-10 * (r.norm() * nu.norm() + y.norm()));
        }
    }

    #[test]
    fn box_certificate_against_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lo = v(&[-1.0, 0.0, -2.0]);
        let hi = v(&[1.0, 0.5, 3.0]);
        let set = AdmissibleSet::Box { lo: lo.clone(), hi: hi.clone() };
        for _ in 0..20 {
            let r = DMatrix::from_diagonal(&DVector::from_fn(3, |i, _| if i == 1 { 0.0 } else { rng.gen_range(0.0..2.0) }));
            let y = DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0));
            let best = argmin_control(&y, &r, &set).unwrap();
            assert!(set.contains(&best));
            let fbest = objective(&y, &r, &best);
            for _ in 0..1000 {
                let cand = DVector::from_fn(3, |i, _| rng.gen_range(lo[i]..=hi[i]));
                assert!(fbest <= objective(&y, &r, &cand) + 1e-12);
            }
        }
    }

    fn arb_points() -> impl Strategy<Value = Vec<DVector<f64>>> {
        prop::collection::vec(prop::collection::vec(-3i32..4, 2), 1..8).prop_map(|pts| {
            let mut out: Vec<DVector<f64>> = Vec::new();
            for p in pts {
                let d = DVector::from_iterator(2, p.into_iter().map(f64::from));
                if !out.contains(&d) {
                    out.push(d);
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn finite_set_optimal_and_member(
            points in arb_points(),
            y in prop::collection::vec(-5.0f64..5.0, 2),
            rdiag in prop::collection::vec(0.0f64..2.0, 2),
        ) {
            let set = AdmissibleSet::FiniteSet(points.clone());
            let y = DVector::from_vec(y);
            let r = DMatrix::from_diagonal(&DVector::from_vec(rdiag));
            let best = argmin_control(&y, &r, &set).unwrap();
            prop_assert!(set.contains(&best));
            let fbest = objective(&y, &r, &best);
            for p in &points {
                prop_assert!(fbest <= objective(&y, &r, p));
            }
        }

        #[test]
        fn finite_set_scale_invariant(
            points in arb_points(),
            y in prop::collection::vec(-5.0f64..5.0, 2),
            alpha in 0.01f64..100.0,
        ) {
            let set = AdmissibleSet::FiniteSet(points.clone());
            let y = DVector::from_vec(y);
            let r = DMatrix::identity(2, 2) * 0.3;
            let vals: Vec<f64> = points.iter().map(|p| objective(&y, &r, p)).collect();
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let unique = vals.iter().filter(|x| (**x - min).abs() < 1e-9).count() == 1;
            prop_assume!(unique);
            let base = argmin_control(&y, &r, &set).unwrap();
            let scaled = argmin_control(&(&y * alpha), &(&r * alpha), &set).unwrap();
            prop_assert_eq!(base, scaled);
        }
    }
}
