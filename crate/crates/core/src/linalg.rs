//! Small dense and sparse linear algebra helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use nalgebra_sparse::CscMatrix;

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradients for a symmetric positive definite operator. Stops when
/// `|r| <= rel_tol * |b|`; returns the solution and the iteration count.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    rel_tol: f64,
    max_iters: usize,
) -> (Vec<f64>, usize) {
    let n = b.len();
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = rel_tol * norm2(b);
    if rr.sqrt() <= target {
        return (x, 0);
    }
    for k in 1..=max_iters {
        let ap = apply(&p);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return (x, k);
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    (x, max_iters)
}

/// Symmetric square root `V diag(sqrt(max(l, floor))) V'`.
pub fn sym_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_power(m, floor, 0.5)
}

/// Symmetric inverse square root with eigenvalues clipped below at `floor`.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_power(m, floor, -0.5)
}

fn sym_power(m: &DMatrix<f64>, floor: f64, power: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(floor).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Factorization of `A'A/gamma + rho I` for a sparse `A` whose rows come in
/// user blocks of `block` rows.
///
/// With `K = gamma rho I + A A'`, the push-through identity gives
///
/// ```text
/// (A'A/gamma + rho I)^{-1} v = (v - A' K^{-1} A v) / rho
/// ```
///
/// Columns touching a single block add a rank-one term to that block of `K`;
/// the remaining (global) columns `W` enter through Woodbury:
///
/// ```text
/// K = D + W W',   K^{-1} = D^{-1} - D^{-1} W (I + W' D^{-1} W)^{-1} W' D^{-1}
/// ```
///
/// so a solve costs one pass over `A`, `N` small `block x block` solves and
/// one `g x g` solve, `g` being the number of global columns.
#[derive(Clone, Debug)]
pub struct ShiftedGramFactor {
    a: CscMatrix<f64>,
    rho: f64,
    block: usize,
    blocks: Vec<Cholesky<f64, Dyn>>,
    global_cols: Vec<usize>,
    dinv_w: DMatrix<f64>,
    capacitance: Option<Cholesky<f64, Dyn>>,
}

impl ShiftedGramFactor {
    pub fn new(a: &CscMatrix<f64>, gamma: f64, rho: f64, block: usize) -> Result<Self> {
        let rows = a.nrows();
        if block == 0 || rows % block != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} rows do not split into blocks of {}",
                rows, block
            )));
        }
        let num_blocks = rows / block;
        let shift = gamma * rho;
        let mut dense_blocks = vec![DMatrix::<f64>::identity(block, block) * shift; num_blocks];
        let mut global_cols = Vec::new();
        for (j, col) in a.col_iter().enumerate() {
            let idx = col.row_indices();
            if idx.is_empty() {
                continue;
            }
            let first = idx[0] / block;
            if idx.iter().all(|&r| r / block == first) {
                let d = &mut dense_blocks[first];
                let vals = col.values();
                for (x, &rx) in idx.iter().enumerate() {
                    for (y, &ry) in idx.iter().enumerate() {
                        d[(rx % block, ry % block)] += vals[x] * vals[y];
                    }
                }
            } else {
                global_cols.push(j);
            }
        }
        let blocks = dense_blocks
            .into_iter()
            .map(|d| Cholesky::new(d).ok_or(Error::SingularSystem))
            .collect::<Result<Vec<_>>>()?;

        let g = global_cols.len();
        let mut dinv_w = DMatrix::zeros(rows, g);
        for (k, &j) in global_cols.iter().enumerate() {
            let col = a.col(j);
            let mut dense = vec![0.0; rows];
            for (&r, &v) in col.row_indices().iter().zip(col.values()) {
                dense[r] = v;
            }
            let solved = block_solve(&blocks, block, &dense);
            dinv_w.column_mut(k).copy_from_slice(&solved);
        }
        let capacitance = if g > 0 {
            let mut c = DMatrix::<f64>::identity(g, g);
            for (k, &j) in global_cols.iter().enumerate() {
                let col = a.col(j);
                for l in 0..g {
                    let s: f64 = col
                        .row_indices()
                        .iter()
                        .zip(col.values())
                        .map(|(&r, &v)| v * dinv_w[(r, l)])
                        .sum();
                    c[(k, l)] += s;
                }
            }
            let c = (&c + c.transpose()) * 0.5;
            Some(Cholesky::new(c).ok_or(Error::SingularSystem)?)
        } else {
            None
        };
        Ok(Self {
            a: a.clone(),
            rho,
            block,
            blocks,
            global_cols,
            dinv_w,
            capacitance,
        })
    }

    pub fn global_columns(&self) -> usize {
        self.global_cols.len()
    }

    /// `(A'A/gamma + rho I)^{-1} v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let y = crate::model::a_hat_mul(&self.a, v);
        let mut t = block_solve(&self.blocks, self.block, &y);
        if let Some(cap) = &self.capacitance {
            let g = self.global_cols.len();
            let mut s = DVector::zeros(g);
            for (k, &j) in self.global_cols.iter().enumerate() {
                let col = self.a.col(j);
                s[k] = col
                    .row_indices()
                    .iter()
                    .zip(col.values())
                    .map(|(&r, &val)| val * t[r])
                    .sum();
            }
            let s = cap.solve(&s);
            let correction = &self.dinv_w * s;
            for (ti, ci) in t.iter_mut().zip(correction.iter()) {
                *ti -= ci;
            }
        }
        let u = crate::model::a_hat_t_mul(&self.a, &t);
        v.iter()
            .zip(&u)
            .map(|(vi, ui)| (vi - ui) / self.rho)
            .collect()
    }
}

fn block_solve(blocks: &[Cholesky<f64, Dyn>], block: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for (u, chol) in blocks.iter().enumerate() {
        let seg = &y[u * block..(u + 1) * block];
        if seg.iter().all(|&v| v == 0.0) {
            continue;
        }
        let x = chol.solve(&DVector::from_column_slice(seg));
        out[u * block..(u + 1) * block].copy_from_slice(x.as_slice());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra_sparse::coo::CooMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cg_solves_spd_system() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = [1.0, 2.0, 3.0];
        let (x, _) = conjugate_gradient(
            |v| (&m * DVector::from_column_slice(v)).as_slice().to_vec(),
            &b,
            None,
            1e-14,
            50,
        );
        let r = &m * DVector::from_column_slice(&x) - DVector::from_column_slice(&b);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn square_root_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sym_sqrt(&m, 1e-12);
        assert!((&s * &s - &m).amax() < 1e-12);
        let is = sym_inv_sqrt(&m, 1e-12);
        assert!((&is * &s - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn structured_factor_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (block, users, cols) = (3, 4, 20);
        let mut coo = CooMatrix::new(block * users, cols);
        for j in 0..cols {
            if j % 4 == 0 {
                // global column
                for r in 0..block * users {
                    if rng.gen_bool(0.5) {
                        coo.push(r, j, rng.gen_range(-1.0..1.0));
                    }
                }
            } else {
                let u = rng.gen_range(0..users);
                for r in 0..block {
                    coo.push(u * block + r, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let a = CscMatrix::from(&coo);
        let (gamma, rho) = (0.7, 1.3);
        let f = ShiftedGramFactor::new(&a, gamma, rho, block).unwrap();
        assert!(f.global_columns() >= 1);

        let dense_a = DMatrix::from(&a);
        let m = dense_a.transpose() * &dense_a / gamma + DMatrix::identity(cols, cols) * rho;
        let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = f.solve(&v);
        let r = &m * DVector::from_column_slice(&x) - DVector::from_column_slice(&v);
        assert!(r.amax() < 1e-10, "residual {}", r.amax());
    }
}
