//! Box-constrained weighted linear least squares via a primal active-set
//! method with fixed ordering.
//!
//! Minimizes `sum_r w_r (rows_r . x - rhs_r)^2 + epsilon ||x - anchor||^2`
//! subject to `lo <= x <= hi`. The Tikhonov term makes the problem strictly
//! convex, so the active-set iteration terminates at the unique minimizer;
//! all tie-breaks are by lowest index, which keeps the solver deterministic.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone)]
pub struct BoxLsqProblem {
    /// Constraint rows, one per condition.
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Nonnegative per-row weights.
    pub weights: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Regularization anchor (typically the previous step's solution).
    pub anchor: DVector<f64>,
    /// Relative Tikhonov strength; scaled by `trace(R^T W R)/n` internally.
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct BoxLsqSolution {
    pub x: DVector<f64>,
    /// Unweighted residual per row, `rows . x - rhs`.
    pub residuals: DVector<f64>,
    /// Weighted objective value (without the regularization term).
    pub weighted_misfit: f64,
    pub iterations: usize,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BoundState {
    Free,
    Lower,
    Upper,
}

pub fn solve_box_lsq(p: &BoxLsqProblem) -> Result<BoxLsqSolution> {
    let n = p.rows.ncols();
    let m = p.rows.nrows();
    if p.rhs.len() != m || p.weights.len() != m {
        return Err(invalid("rhs/weights length must match row count"));
    }
    if p.lower.len() != n || p.upper.len() != n || p.anchor.len() != n {
        return Err(invalid("bounds/anchor length must match column count"));
    }
    if p.weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(invalid("row weights must be nonnegative"));
    }
    for j in 0..n {
        if p.lower[j] > p.upper[j] {
            return Err(Error::InfeasibleStep {
                step: 0,
                electrode: j,
                lo: p.lower[j],
                hi: p.upper[j],
            });
        }
    }

    // Normalize the weight vector (pure objective scaling, same minimizer)
    // so the Tikhonov floor is set relative to the stiffest row. The row
    // stiffnesses span many decades in SI units, so the free subproblems
    // are solved by a stacked weighted QR rather than normal equations.
    let w_max = p.weights.amax();
    let w_scaled: DVector<f64> = if w_max > 0.0 {
        &p.weights / w_max
    } else {
        p.weights.clone()
    };
    let sqrt_w: Vec<f64> = w_scaled.iter().map(|w| w.sqrt()).collect();
    let trace: f64 = (0..m)
        .map(|r| w_scaled[r] * p.rows.row(r).norm_squared())
        .sum();
    let eps = (p.epsilon * (trace / n as f64)).max(f64::MIN_POSITIVE);
    let sqrt_eps = eps.sqrt();

    // Start from the clamped anchor; bounds touching it start active.
    let mut x = p.anchor.clone();
    let mut state = vec![BoundState::Free; n];
    for j in 0..n {
        if x[j] <= p.lower[j] {
            x[j] = p.lower[j];
            state[j] = BoundState::Lower;
        } else if x[j] >= p.upper[j] {
            x[j] = p.upper[j];
            state[j] = BoundState::Upper;
        }
    }

    let max_iter = 100 * (n + 1);
    for iter in 0..max_iter {
        let free: Vec<usize> = (0..n).filter(|&j| state[j] == BoundState::Free).collect();

        // Solve the equality-constrained subproblem on the free set via the
        // stacked least-squares system [sqrt(w) R; sqrt(eps) I].
        let mut target = x.clone();
        if !free.is_empty() {
            let nf = free.len();
            let mut a = DMatrix::zeros(m + nf, nf);
            let mut b = DVector::zeros(m + nf);
            for r in 0..m {
                let sw = sqrt_w[r];
                if sw == 0.0 {
                    continue;
                }
                let mut rr = p.rhs[r];
                for j in 0..n {
                    if state[j] != BoundState::Free {
                        rr -= p.rows[(r, j)] * x[j];
                    }
                }
                b[r] = sw * rr;
                for (jj, &j) in free.iter().enumerate() {
                    a[(r, jj)] = sw * p.rows[(r, j)];
                }
            }
            for (jj, &j) in free.iter().enumerate() {
                a[(m + jj, jj)] = sqrt_eps;
                b[m + jj] = sqrt_eps * p.anchor[j];
            }
            let xf = a
                .svd(true, true)
                .solve(&b, 0.0)
                .map_err(|e| Error::NonConvergence(format!("least-squares subproblem: {e}")))?;
            for (ii, &i) in free.iter().enumerate() {
                target[i] = xf[ii];
            }
        }

        // Ratio test along x -> target for the free coordinates.
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, BoundState)> = None;
        for &j in &free {
            let d = target[j] - x[j];
            if d > 0.0 && target[j] > p.upper[j] {
                let a = (p.upper[j] - x[j]) / d;
                if a < alpha - 1e-15 {
                    alpha = a.max(0.0);
                    blocking = Some((j, BoundState::Upper));
                }
            } else if d < 0.0 && target[j] < p.lower[j] {
                let a = (p.lower[j] - x[j]) / d;
                if a < alpha - 1e-15 {
                    alpha = a.max(0.0);
                    blocking = Some((j, BoundState::Lower));
                }
            }
        }

        if let Some((jb, side)) = blocking {
            for &j in &free {
                x[j] += alpha * (target[j] - x[j]);
            }
            x[jb] = if side == BoundState::Upper {
                p.upper[jb]
            } else {
                p.lower[jb]
            };
            state[jb] = side;
            continue;
        }

        // Full step accepted; check multipliers of the active bounds.
        for &j in &free {
            x[j] = target[j];
        }
        let resid = &p.rows * &x - &p.rhs;
        let mut grad = DVector::zeros(n);
        for i in 0..n {
            let mut g = eps * (x[i] - p.anchor[i]);
            for r in 0..m {
                g += w_scaled[r] * p.rows[(r, i)] * resid[r];
            }
            grad[i] = g;
        }
        let mut release: Option<(usize, f64)> = None;
        for j in 0..n {
            let v = match state[j] {
                BoundState::Free => continue,
                // At a lower bound optimality needs grad >= 0.
                BoundState::Lower => (-grad[j]).max(0.0),
                // At an upper bound optimality needs grad <= 0.
                BoundState::Upper => grad[j].max(0.0),
            };
            if v > 1e-12 * (1.0 + grad.amax()) {
                match release {
                    Some((_, best)) if best >= v => {}
                    _ => release = Some((j, v)),
                }
            }
        }
        match release {
            Some((j, _)) => {
                state[j] = BoundState::Free;
            }
            None => {
                let residuals = &p.rows * &x - &p.rhs;
                let weighted_misfit = residuals
                    .iter()
                    .zip(p.weights.iter())
                    .map(|(r, w)| w * r * r)
                    .sum();
                return Ok(BoxLsqSolution {
                    x,
                    residuals,
                    weighted_misfit,
                    iterations: iter + 1,
                    active_lower: (0..n).filter(|&j| state[j] == BoundState::Lower).collect(),
                    active_upper: (0..n).filter(|&j| state[j] == BoundState::Upper).collect(),
                });
            }
        }
    }
    Err(Error::NonConvergence(format!(
        "active-set solver exceeded {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn problem(
        rows: Vec<Vec<f64>>,
        rhs: Vec<f64>,
        weights: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        anchor: Vec<f64>,
        epsilon: f64,
    ) -> BoxLsqProblem {
        let m = rows.len();
        let n = rows[0].len();
        BoxLsqProblem {
            rows: DMatrix::from_fn(m, n, |i, j| rows[i][j]),
            rhs: DVector::from_vec(rhs),
            weights: DVector::from_vec(weights),
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
            anchor: DVector::from_vec(anchor),
            epsilon,
        }
    }

    #[test]
    fn unconstrained_consistent_system_is_solved_exactly() {
        // 6 consistent rows over 12 unknowns: residuals at solver tolerance.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let n = 12;
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let x_true: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rhs: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().zip(&x_true).map(|(a, b)| a * b).sum())
            .collect();
        let rhs_scale = rhs.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let p = problem(
            rows,
            rhs,
            vec![1.0; 6],
            vec![-1e6; n],
            vec![1e6; n],
            vec![0.0; n],
            1e-14,
        );
        let s = solve_box_lsq(&p).unwrap();
        assert!(
            s.residuals.amax() <= 1e-9 * rhs_scale,
            "residual {} vs rhs scale {}",
            s.residuals.amax(),
            rhs_scale
        );
        assert!(s.active_lower.is_empty() && s.active_upper.is_empty());
    }

    #[test]
    fn pinned_box_returns_the_pin_with_honest_residuals() {
        let p = problem(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![5.0, -5.0],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![0.0, 0.0],
            1e-12,
        );
        let s = solve_box_lsq(&p).unwrap();
        assert_eq!(s.x.as_slice(), &[1.0, 2.0]);
        assert_relative_eq!(s.residuals[0], -4.0);
        assert_relative_eq!(s.residuals[1], 7.0);
    }

    #[test]
    fn empty_box_is_an_error_naming_the_coordinate() {
        let p = problem(
            vec![vec![1.0, 0.0]],
            vec![0.0],
            vec![1.0],
            vec![0.0, 3.0],
            vec![1.0, 2.0],
            vec![0.0, 0.0],
            1e-12,
        );
        match solve_box_lsq(&p) {
            Err(Error::InfeasibleStep { electrode, .. }) => assert_eq!(electrode, 1),
            other => panic!("expected infeasible step, got {other:?}"),
        }
    }

    #[test]
    fn weight_ratio_trades_conflicting_rows() {
        // Two incompatible one-variable rows; weight 10 vs 1 pulls the
        // solution so the heavy row's residual is far smaller.
        let p = problem(
            vec![vec![1.0], vec![1.0]],
            vec![1.0, 0.0],
            vec![10.0, 1.0],
            vec![-10.0],
            vec![10.0],
            vec![0.0],
            1e-14,
        );
        let s = solve_box_lsq(&p).unwrap();
        // Weighted mean: x = 10/11.
        assert_relative_eq!(s.x[0], 10.0 / 11.0, max_relative = 1e-9);
        assert!(s.residuals[0].abs() < s.residuals[1].abs() / 5.0);
    }

    /// Brute-force oracle: enumerate every {lower, free, upper} assignment,
    /// solve the free subsystem, keep the best feasible KKT-satisfying point.
    fn brute_force(p: &BoxLsqProblem) -> DVector<f64> {
        let n = p.rows.ncols();
        let w = &p.weights / p.weights.amax();
        let mut q = p.rows.transpose() * DMatrix::from_diagonal(&w) * &p.rows;
        let mut c = p.rows.transpose() * DMatrix::from_diagonal(&w) * &p.rhs;
        let trace = (0..n).map(|i| q[(i, i)]).sum::<f64>();
        let eps = (p.epsilon * (trace / n as f64)).max(f64::MIN_POSITIVE);
        for i in 0..n {
            q[(i, i)] += eps;
            c[i] += eps * p.anchor[i];
        }
        let objective = |x: &DVector<f64>| -> f64 {
            (0.5 * x.transpose() * &q * x - c.transpose() * x)[(0, 0)]
        };
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..3usize.pow(n as u32) {
            let mut x = DVector::zeros(n);
            let mut rem = mask;
            let mut free = Vec::new();
            for j in 0..n {
                match rem % 3 {
                    0 => free.push(j),
                    1 => x[j] = p.lower[j],
                    _ => x[j] = p.upper[j],
                }
                rem /= 3;
            }
            if !free.is_empty() {
                let nf = free.len();
                let mut qf = DMatrix::zeros(nf, nf);
                let mut cf = DVector::zeros(nf);
                for (ii, &i) in free.iter().enumerate() {
                    let mut r = c[i];
                    for j in 0..n {
                        if !free.contains(&j) {
                            r -= q[(i, j)] * x[j];
                        }
                    }
                    cf[ii] = r;
                    for (jj, &j) in free.iter().enumerate() {
                        qf[(ii, jj)] = q[(i, j)];
                    }
                }
                match qf.cholesky() {
                    Some(ch) => {
                        let xf = ch.solve(&cf);
                        for (ii, &i) in free.iter().enumerate() {
                            x[i] = xf[ii];
                        }
                    }
                    None => continue,
                }
            }
            let feasible = (0..n).all(|j| x[j] >= p.lower[j] - 1e-9 && x[j] <= p.upper[j] + 1e-9);
            if !feasible {
                continue;
            }
            let f = objective(&x);
            match &best {
                Some((fb, _)) if *fb <= f => {}
                _ => best = Some((f, x)),
            }
        }
        best.expect("at least the all-clamped point is feasible").1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_brute_force_enumeration(seed in 0u64..2_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let n = 4;
            let m = 3;
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let rhs: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let weights: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..5.0)).collect();
            let mut lower = Vec::new();
            let mut upper = Vec::new();
            for _ in 0..n {
                let a: f64 = rng.gen_range(-1.5..1.0);
                let b: f64 = rng.gen_range(a..1.5f64.max(a + 0.1));
                lower.push(a);
                upper.push(b);
            }
            let anchor: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = problem(rows, rhs, weights, lower, upper, anchor, 1e-6);
            let s = solve_box_lsq(&p).unwrap();
            let bf = brute_force(&p);
            prop_assert!((s.x.clone() - bf).amax() < 1e-6,
                "active set {:?} disagrees with brute force", s.x.as_slice());
        }
    }
}
