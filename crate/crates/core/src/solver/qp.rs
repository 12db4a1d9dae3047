//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! Solves `min 1/2 x^T H x + g^T x` subject to `a_i^T x >= b_i`, where the
//! constraint normals `a_i` are the columns of an `n x m` matrix. `H` must be
//! positive definite. The method starts at the unconstrained minimizer and
//! adds the most violated constraint one at a time, keeping the factorization
//! `J = L^{-T} Q` updated with Givens rotations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint; zero for inactive constraints.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    /// Number of active-set changes.
    pub pivots: usize,
}

struct ActiveSet {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    idx: Vec<usize>,
    u: Vec<f64>,
}

impl ActiveSet {
    fn len(&self) -> usize {
        self.idx.len()
    }

    /// Appends the constraint whose transformed normal is `d = J^T a`.
    /// Returns false if it is linearly dependent on the active set.
    fn add(&mut self, d: &mut DVector<f64>) -> bool {
        let n = self.n;
        let iq = self.len();
        for jj in (iq + 1..n).rev() {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = cc.hypot(ss);
            if h.abs() < f64::EPSILON {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        for i in 0..=iq {
            self.r[(i, iq)] = d[i];
        }
        if d[iq].abs() <= f64::EPSILON * self.r_norm {
            for i in 0..=iq {
                self.r[(i, iq)] = 0.0;
            }
            return false;
        }
        self.r_norm = self.r_norm.max(d[iq].abs());
        true
    }

    /// Removes the active constraint at position `pos`.
    fn remove(&mut self, pos: usize) {
        let n = self.n;
        let iq = self.len();
        for i in pos..iq - 1 {
            for row in 0..n {
                self.r[(row, i)] = self.r[(row, i + 1)];
            }
        }
        for row in 0..n {
            self.r[(row, iq - 1)] = 0.0;
        }
        self.idx.remove(pos);
        self.u.remove(pos);
        let iq = iq - 1;
        if iq == 0 {
            return;
        }
        for jj in pos..iq {
            let mut cc = self.r[(jj, jj)];
            let mut ss = self.r[(jj + 1, jj)];
            let h = cc.hypot(ss);
            if h.abs() < f64::EPSILON {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }

    /// Primal step direction `z` and dual step `r` for a constraint normal.
    fn directions(&self, np: &DVector<f64>) -> (DVector<f64>, DVector<f64>, Vec<f64>) {
        let n = self.n;
        let iq = self.len();
        let d = self.j.tr_mul(np);
        let mut z = DVector::zeros(n);
        for c in iq..n {
            let dc = d[c];
            if dc != 0.0 {
                z.axpy(dc, &self.j.column(c), 1.0);
            }
        }
        let mut r = vec![0.0; iq];
        for i in (0..iq).rev() {
            let mut sum = d[i];
            for k in i + 1..iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        (d, z, r)
    }
}

/// Solves the QP; `a` holds one constraint normal per column.
pub fn solve(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    max_pivots: usize,
) -> Result<QpSolution, QpError> {
    let n = g.len();
    let m = a.ncols();
    assert_eq!(h.nrows(), n);
    assert_eq!(a.nrows(), n);
    assert_eq!(b.len(), m);

    let chol = h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let lt = chol.l().transpose();
    let j = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;

    let mut x = -chol.solve(g);
    let mut f = 0.5 * g.dot(&x);
    let mut set = ActiveSet {
        n,
        j,
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
        idx: Vec::new(),
        u: Vec::new(),
    };
    let norms: Vec<f64> = (0..m).map(|i| a.column(i).norm().max(1e-300)).collect();
    let mut in_set = vec![false; m];
    let mut excluded = vec![false; m];
    let mut pivots = 0usize;

    let slack = |x: &DVector<f64>, i: usize| a.column(i).dot(x) - b[i];
    let tol = |i: usize| 1e-10 * (1.0 + b[i].abs()) / norms[i];

    'outer: loop {
        // Most violated constraint by normalized slack.
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..m {
            if in_set[i] || excluded[i] {
                continue;
            }
            let s = slack(&x, i) / norms[i];
            if s < -tol(i) && worst.is_none_or(|(_, w)| s < w) {
                worst = Some((i, s));
            }
        }
        let Some((p, _)) = worst else {
            break;
        };
        let saved = (x.clone(), set.idx.clone(), set.u.clone(), f);
        let np = a.column(p).into_owned();
        let mut sp = slack(&x, p);
        let mut u_plus = 0.0;

        loop {
            pivots += 1;
            if pivots > max_pivots {
                return Err(QpError::IterationLimit);
            }
            let (mut d, z, r) = set.directions(&np);

            // Largest dual step keeping active multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let ratio = set.u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if z.norm_squared() > f64::EPSILON && zn > 0.0 {
                -sp / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if !t2.is_finite() {
                for (k, &rk) in r.iter().enumerate() {
                    set.u[k] -= t * rk;
                }
                u_plus += t;
                let pos = drop.expect("finite dual step has a blocking constraint");
                in_set[set.idx[pos]] = false;
                set.remove(pos);
                continue;
            }

            x.axpy(t, &z, 1.0);
            f += t * zn * (0.5 * t + u_plus);
            for (k, &rk) in r.iter().enumerate() {
                set.u[k] -= t * rk;
            }
            u_plus += t;

            if t2 <= t1 {
                if set.add(&mut d) {
                    set.idx.push(p);
                    set.u.push(u_plus);
                    in_set[p] = true;
                    continue 'outer;
                }
                // Linearly dependent: restore and skip this constraint.
                excluded[p] = true;
                let (sx, sidx, su, sf) = saved;
                // Rebuild the factorization for the restored active set.
                for &i in &set.idx.clone() {
                    in_set[i] = false;
                }
                set.j = lt
                    .solve_upper_triangular(&DMatrix::identity(n, n))
                    .ok_or(QpError::NotPositiveDefinite)?;
                set.r.fill(0.0);
                set.r_norm = 1.0;
                set.idx.clear();
                set.u.clear();
                for (&i, &ui) in sidx.iter().zip(&su) {
                    let mut di = set.j.tr_mul(&a.column(i));
                    if set.add(&mut di) {
                        set.idx.push(i);
                        set.u.push(ui);
                        in_set[i] = true;
                    }
                }
                x = sx;
                f = sf;
                continue 'outer;
            }

            let pos = drop.expect("partial step has a blocking constraint");
            in_set[set.idx[pos]] = false;
            set.remove(pos);
            sp = slack(&x, p);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &ui) in set.idx.iter().zip(&set.u) {
        multipliers[i] = ui;
    }
    let _ = f;
    let objective = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
    Ok(QpSolution {
        x,
        multipliers,
        objective,
        pivots,
    })
}
