//! Blocked posterior computations shared by EP and the Laplace method.
//!
//! Both methods represent the effective likelihood precision of observation
//! `i` as the 1-annihilating matrix `diag(pi_i) - pi_i pi_i' / sum(pi_i)`
//! (coupled mode) or as a plain diagonal (independent mode). Writing the
//! full precision as `D - D R (R' D R)^{-1} R' D`, where `D` stacks the `pi`
//! values class by class and `R` stacks `c` identity blocks, everything the
//! crate needs — marginal means and covariances, the log determinant
//! `log|I + K T|`, and predictive projections — comes out of `c` Cholesky
//! factorizations of `A_k = I + D_k^{1/2} K D_k^{1/2}` plus one of
//! `P = sum_k B_k` with `B_k = D_k^{1/2} A_k^{-1} D_k^{1/2}`, never forming
//! a `cn x cn` matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub(crate) struct BlockPosterior {
    pub n: usize,
    pub c: usize,
    pub coupled: bool,
    /// Shared `n x n` prior covariance (jitter included).
    pub k: DMatrix<f64>,
    /// `n x c` per-class precision diagonals (non-negative).
    pub pi: DMatrix<f64>,
    /// `n x c` natural location parameters.
    pub loc: DMatrix<f64>,
    /// `B_k = S_k A_k^{-1} S_k` for each class.
    pub b: Vec<DMatrix<f64>>,
    /// Cholesky of `P = sum_k B_k` (coupled mode only).
    pub p_chol: Option<Cholesky<f64, Dyn>>,
    /// Posterior mean, `n x c`.
    pub mean: DMatrix<f64>,
    /// `zeta = (I - M K) loc = K^{-1} mean`, `n x c`.
    pub zeta: DMatrix<f64>,
    /// Per-observation marginal covariance blocks (coupled mode).
    pub marg_cov: Vec<DMatrix<f64>>,
    /// Per-observation marginal variances, `n x c`.
    pub marg_var: DMatrix<f64>,
    /// `log |I + K T|`.
    pub logdet: f64,
}

impl BlockPosterior {
    /// Builds the factorized posterior. `pi` entries must be non-negative;
    /// in coupled mode every row must sum to something positive.
    pub fn build(
        k: &DMatrix<f64>,
        pi: &DMatrix<f64>,
        loc: &DMatrix<f64>,
        coupled: bool,
    ) -> Result<Self> {
        let n = k.nrows();
        let c = pi.ncols();
        if pi.nrows() != n || loc.nrows() != n || loc.ncols() != c {
            return Err(Error::InvalidInput("shape mismatch in posterior build".into()));
        }
        if pi.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("negative or non-finite site precision".into()));
        }

        let mut b = Vec::with_capacity(c);
        let mut logdet = 0.0;
        for class in 0..c {
            let s: DVector<f64> = DVector::from_fn(n, |i, _| pi[(i, class)].sqrt());
            let mut a = DMatrix::identity(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] += s[i] * k[(i, j)] * s[j];
                }
            }
            let chol = Cholesky::new(a).ok_or_else(|| {
                Error::Factorization(format!("class block {class} not positive definite"))
            })?;
            logdet += 2.0 * chol.l().diagonal().map(|v: f64| v.ln()).sum();
            let mut ainv = chol.inverse();
            for i in 0..n {
                for j in 0..n {
                    ainv[(i, j)] *= s[i] * s[j];
                }
            }
            b.push(ainv);
        }

        let p_chol = if coupled {
            let mut p = DMatrix::zeros(n, n);
            for bk in &b {
                p += bk;
            }
            for i in 0..n {
                let row_sum: f64 = (0..c).map(|class| pi[(i, class)]).sum();
                if row_sum <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "observation {i} carries no precision"
                    )));
                }
                logdet -= row_sum.ln();
            }
            let chol = Cholesky::new(p)
                .ok_or_else(|| Error::Factorization("coupling matrix P not positive definite".into()))?;
            logdet += 2.0 * chol.l().diagonal().map(|v: f64| v.ln()).sum();
            Some(chol)
        } else {
            None
        };

        // zeta_k = loc_k - B_k K loc_k (+ B_k P^{-1} sum_l B_l K loc_l).
        let mut r_cols: Vec<DVector<f64>> = Vec::with_capacity(c);
        for class in 0..c {
            r_cols.push(k * loc.column(class));
        }
        let correction = p_chol.as_ref().map(|pc| {
            let mut s_vec = DVector::zeros(n);
            for class in 0..c {
                s_vec += &b[class] * &r_cols[class];
            }
            pc.solve(&s_vec)
        });
        let mut zeta = DMatrix::zeros(n, c);
        for class in 0..c {
            let mut z = loc.column(class).into_owned();
            z -= &b[class] * &r_cols[class];
            if let Some(t) = &correction {
                z += &b[class] * t;
            }
            zeta.set_column(class, &z);
        }
        let mean = k * &zeta;

        // Marginals. With U_k = B_k K and W_k = L_P^{-1} U_k:
        // cov_i[k,l] = d_kl (K_ii - (K U_k)_ii) + dot(col_i W_k, col_i W_l).
        let mut d1 = DMatrix::zeros(n, c);
        let mut w: Vec<DMatrix<f64>> = Vec::new();
        for class in 0..c {
            let u = &b[class] * k;
            for i in 0..n {
                d1[(i, class)] = k.row(i).transpose().dot(&u.column(i).into_owned());
            }
            if let Some(pc) = &p_chol {
                let lw = pc.l().solve_lower_triangular(&u).ok_or_else(|| {
                    Error::Factorization("triangular solve against P failed".into())
                })?;
                w.push(lw);
            }
        }
        let mut marg_var = DMatrix::zeros(n, c);
        let mut marg_cov = Vec::new();
        if coupled {
            for i in 0..n {
                let mut cov_i = DMatrix::zeros(c, c);
                for k1 in 0..c {
                    for k2 in k1..c {
                        let mut v = w[k1].column(i).dot(&w[k2].column(i));
                        if k1 == k2 {
                            v += k[(i, i)] - d1[(i, k1)];
                        }
                        cov_i[(k1, k2)] = v;
                        cov_i[(k2, k1)] = v;
                    }
                }
                for class in 0..c {
                    marg_var[(i, class)] = cov_i[(class, class)];
                }
                marg_cov.push(cov_i);
            }
        } else {
            for i in 0..n {
                for class in 0..c {
                    marg_var[(i, class)] = k[(i, i)] - d1[(i, class)];
                }
            }
        }

        Ok(Self {
            n,
            c,
            coupled,
            k: k.clone(),
            pi: pi.clone(),
            loc: loc.clone(),
            b,
            p_chol,
            mean,
            zeta,
            marg_cov,
            marg_var,
            logdet,
        })
    }

    /// Marginal covariance of observation `i` as a dense `c x c` block.
    pub fn marginal_cov(&self, i: usize) -> DMatrix<f64> {
        if self.coupled {
            self.marg_cov[i].clone()
        } else {
            DMatrix::from_diagonal(&self.marg_var.row(i).transpose())
        }
    }

    /// Applies `M = T (I + K T)^{-1}` blockwise to an `n x c` matrix.
    pub fn apply_m(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, c) = (self.n, self.c);
        let mut bx: Vec<DVector<f64>> = Vec::with_capacity(c);
        for class in 0..c {
            bx.push(&self.b[class] * x.column(class));
        }
        let correction = self.p_chol.as_ref().map(|pc| {
            let mut s = DVector::zeros(n);
            for v in &bx {
                s += v;
            }
            pc.solve(&s)
        });
        let mut out = DMatrix::zeros(n, c);
        for (class, bxk) in bx.iter().enumerate() {
            let mut y = bxk.clone();
            if let Some(t) = &correction {
                y -= &self.b[class] * t;
            }
            out.set_column(class, &y);
        }
        out
    }

    /// `sum_k M_kk` as a dense `n x n` matrix, used by evidence gradients.
    pub fn m_diag_block_sum(&self) -> Result<DMatrix<f64>> {
        let n = self.n;
        let mut s = DMatrix::zeros(n, n);
        for bk in &self.b {
            s += bk;
            if let Some(pc) = &self.p_chol {
                let w = pc
                    .l()
                    .solve_lower_triangular(bk)
                    .ok_or_else(|| Error::Factorization("triangular solve against P failed".into()))?;
                s -= w.transpose() * w;
            }
        }
        Ok(s)
    }

    /// Latent predictive mean and covariance at each column of `kstar`
    /// (the `n x m` cross-covariance), with prior test variance `kss`.
    /// `mean_coeffs` left-multiplies `kstar`: EP passes `zeta`, Laplace the
    /// likelihood gradient at the mode.
    pub fn predict_latent(
        &self,
        kstar: &DMatrix<f64>,
        kss: f64,
        mean_coeffs: &DMatrix<f64>,
    ) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let (c, m) = (self.c, kstar.ncols());
        let mut g: Vec<DMatrix<f64>> = Vec::with_capacity(c);
        let mut h: Vec<DMatrix<f64>> = Vec::with_capacity(c);
        for class in 0..c {
            let gk = &self.b[class] * kstar;
            if let Some(pc) = &self.p_chol {
                let hk = pc
                    .l()
                    .solve_lower_triangular(&gk)
                    .ok_or_else(|| Error::Factorization("triangular solve against P failed".into()))?;
                h.push(hk);
            }
            g.push(gk);
        }
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let kj = kstar.column(j);
            let mean = DVector::from_fn(c, |class, _| kj.dot(&mean_coeffs.column(class)));
            let mut cov = DMatrix::zeros(c, c);
            for k1 in 0..c {
                for k2 in k1..c {
                    let mut v = if self.coupled {
                        h[k1].column(j).dot(&h[k2].column(j))
                    } else {
                        0.0
                    };
                    if k1 == k2 {
                        v += kss - kj.dot(&g[k1].column(j));
                    }
                    cov[(k1, k2)] = v;
                    cov[(k2, k1)] = v;
                }
            }
            out.push((mean, cov));
        }
        Ok(out)
    }
}
