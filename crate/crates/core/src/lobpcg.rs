//! Block LOBPCG for the lowest eigenpairs of a Hermitian operator given only
//! as a matvec. Columns are kept explicitly orthonormal; the Rayleigh-Ritz
//! step uses a dense Hermitian eigensolver on the (≤ 3b)-dimensional subspace.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub struct LobpcgOutput {
    pub values: Vec<f64>,
    /// One vector per eigenpair, ascending eigenvalue order.
    pub vectors: Vec<Vec<C64>>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        s += x.conj() * y;
    }
    s
}

pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn axpy(y: &mut [C64], alpha: C64, x: &[C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn scale(y: &mut [C64], alpha: f64) {
    for v in y.iter_mut() {
        *v *= alpha;
    }
}

/// Orthogonalizes `cols` against the orthonormal set `basis` and then among
/// themselves (two Gram-Schmidt sweeps). Columns losing more than
/// `drop_ratio` of their norm are removed. `shadow`, when given, receives the
/// same linear combinations (used to carry A·P along with P).
fn orthonormalize(
    cols: &mut Vec<Vec<C64>>,
    mut shadow: Option<&mut Vec<Vec<C64>>>,
    basis: &[&Vec<C64>],
    basis_shadow: Option<&[&Vec<C64>]>,
    drop_ratio: f64,
) {
    let mut keep_cols: Vec<Vec<C64>> = Vec::with_capacity(cols.len());
    let mut keep_shadow: Vec<Vec<C64>> = Vec::with_capacity(cols.len());
    let taken: Vec<Vec<C64>> = std::mem::take(cols);
    let taken_shadow: Option<Vec<Vec<C64>>> = shadow.as_mut().map(|s| std::mem::take(*s));
    for (idx, mut v) in taken.into_iter().enumerate() {
        let mut sv = taken_shadow.as_ref().map(|s| s[idx].clone());
        let n0 = norm(&v);
        if n0 == 0.0 || !n0.is_finite() {
            continue;
        }
        for _sweep in 0..2 {
            for (bi, b) in basis.iter().enumerate() {
                let c = dot(b, &v);
                axpy(&mut v, -c, b);
                if let (Some(sv), Some(bs)) = (sv.as_mut(), basis_shadow) {
                    axpy(sv, -c, bs[bi]);
                }
            }
            for (ki, k) in keep_cols.iter().enumerate() {
                let c = dot(k, &v);
                axpy(&mut v, -c, k);
                if let Some(sv) = sv.as_mut() {
                    let ks: &Vec<C64> = &keep_shadow[ki];
                    axpy(sv, -c, ks);
                }
            }
        }
        let n1 = norm(&v);
        if n1 <= drop_ratio * n0 {
            continue;
        }
        scale(&mut v, 1.0 / n1);
        if let Some(sv) = sv.as_mut() {
            scale(sv, 1.0 / n1);
        }
        keep_cols.push(v);
        if let Some(sv) = sv {
            keep_shadow.push(sv);
        }
    }
    *cols = keep_cols;
    if let Some(s) = shadow {
        *s = keep_shadow;
    }
}

/// Eigen-decomposition of a small Hermitian matrix, ascending.
pub fn hermitian_eigen(h: DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let n = h.nrows();
    let sym = (&h + h.adjoint()) * C64::new(0.5, 0.0);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::<C64>::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vecs)
}

fn combine(cols: &[&Vec<C64>], coef: &DMatrix<C64>, c: usize, len: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); len];
    for (r, col) in cols.iter().enumerate() {
        let w = coef[(r, c)];
        if w != C64::new(0.0, 0.0) {
            axpy(&mut out, w, col);
        }
    }
    out
}

pub struct LobpcgParams {
    /// Number of leading pairs that must meet `tol`.
    pub n_conv: usize,
    pub tol: f64,
    pub max_iter: usize,
}

/// `apply(x, y)` writes y = A x; `precond(r, theta, w)` writes an approximate
/// (A − θ)^{-1} r. `x0` supplies the block (its size fixes the block size).
pub fn lobpcg<A, P>(apply: A, precond: P, x0: Vec<Vec<C64>>, params: &LobpcgParams) -> Result<LobpcgOutput>
where
    A: Fn(&[C64], &mut [C64]),
    P: Fn(&[C64], f64, &mut [C64]),
{
    let len = x0[0].len();
    let bsize = x0.len();
    let matvec = |x: &Vec<C64>| {
        let mut y = vec![C64::new(0.0, 0.0); len];
        apply(x, &mut y);
        y
    };

    let mut x = x0;
    orthonormalize(&mut x, None, &[], None, 1e-10);
    if x.len() < bsize {
        return Err(Error::Invalid("initial block is rank deficient".into()));
    }
    let mut ax: Vec<Vec<C64>> = x.iter().map(matvec).collect();
    // initial Rayleigh-Ritz
    let mut hs = DMatrix::<C64>::zeros(bsize, bsize);
    for i in 0..bsize {
        for j in 0..bsize {
            hs[(i, j)] = dot(&x[i], &ax[j]);
        }
    }
    let (mut theta, y) = hermitian_eigen(hs);
    {
        let xr: Vec<&Vec<C64>> = x.iter().collect();
        let axr: Vec<&Vec<C64>> = ax.iter().collect();
        let nx: Vec<Vec<C64>> = (0..bsize).map(|c| combine(&xr, &y, c, len)).collect();
        let nax: Vec<Vec<C64>> = (0..bsize).map(|c| combine(&axr, &y, c, len)).collect();
        x = nx;
        ax = nax;
    }
    let mut p: Vec<Vec<C64>> = Vec::new();
    let mut ap: Vec<Vec<C64>> = Vec::new();
    let mut residuals = vec![f64::INFINITY; bsize];
    let mut fresh = true;

    for iter in 0..params.max_iter {
        let r: Vec<Vec<C64>> = (0..bsize)
            .map(|c| {
                let mut rc = ax[c].clone();
                axpy(&mut rc, C64::new(-theta[c], 0.0), &x[c]);
                rc
            })
            .collect();
        for c in 0..bsize {
            residuals[c] = norm(&r[c]);
        }
        if residuals[..params.n_conv].iter().all(|&v| v <= params.tol) {
            if fresh {
                return Ok(LobpcgOutput {
                    values: theta,
                    vectors: x,
                    residuals,
                    iterations: iter,
                });
            }
            // tracked A·X can drift; confirm with explicit products
            ax = x.iter().map(matvec).collect();
            fresh = true;
            continue;
        }
        fresh = false;

        let mut w: Vec<Vec<C64>> = Vec::new();
        for c in 0..bsize {
            if residuals[c] > params.tol {
                let mut wc = vec![C64::new(0.0, 0.0); len];
                precond(&r[c], theta[c], &mut wc);
                w.push(wc);
            }
        }
        let xr: Vec<&Vec<C64>> = x.iter().collect();
        let axr: Vec<&Vec<C64>> = ax.iter().collect();
        orthonormalize(&mut p, Some(&mut ap), &xr, Some(&axr), 1e-8);
        let mut basis: Vec<&Vec<C64>> = xr.clone();
        basis.extend(p.iter());
        orthonormalize(&mut w, None, &basis, None, 1e-10);
        let aw: Vec<Vec<C64>> = w.iter().map(matvec).collect();

        let mut s: Vec<&Vec<C64>> = x.iter().collect();
        s.extend(w.iter());
        s.extend(p.iter());
        let mut as_: Vec<&Vec<C64>> = ax.iter().collect();
        as_.extend(aw.iter());
        as_.extend(ap.iter());
        let dim = s.len();
        let mut hs = DMatrix::<C64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                hs[(i, j)] = dot(s[i], as_[j]);
            }
        }
        let (vals, y) = hermitian_eigen(hs);
        let nx: Vec<Vec<C64>> = (0..bsize).map(|c| combine(&s, &y, c, len)).collect();
        let nax: Vec<Vec<C64>> = (0..bsize).map(|c| combine(&as_, &y, c, len)).collect();
        // P = component of the new X outside the old X
        let mut ytail = y.clone();
        for rrow in 0..bsize {
            for c in 0..dim {
                ytail[(rrow, c)] = C64::new(0.0, 0.0);
            }
        }
        let np: Vec<Vec<C64>> = (0..bsize).map(|c| combine(&s, &ytail, c, len)).collect();
        let nap: Vec<Vec<C64>> = (0..bsize).map(|c| combine(&as_, &ytail, c, len)).collect();
        x = nx;
        ax = nax;
        p = np;
        ap = nap;
        theta = vals[..bsize].to_vec();
        // guard against orthogonality drift of X
        if iter % 10 == 9 {
            let mut xx = std::mem::take(&mut x);
            let mut axx = std::mem::take(&mut ax);
            orthonormalize(&mut xx, Some(&mut axx), &[], None, 1e-10);
            if xx.len() < bsize {
                return Err(Error::NotConverged {
                    iterations: iter,
                    residual: residuals[..params.n_conv].iter().cloned().fold(0.0, f64::max),
                });
            }
            x = xx;
            ax = axx;
        }
    }
    Err(Error::NotConverged {
        iterations: params.max_iter,
        residual: residuals[..params.n_conv].iter().cloned().fold(0.0, f64::max),
    })
}
