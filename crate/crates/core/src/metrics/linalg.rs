//! Dense symmetric linear algebra on row-major square matrices.

use crate::Scalar;

/// Eigen-decomposition of a symmetric matrix: Householder reduction to
/// tridiagonal form followed by implicit QL iterations. Returns eigenvalues
/// in ascending order and the row-major matrix whose columns are the
/// matching eigenvectors.
pub fn sym_eigen<S: Scalar>(a: &[S], n: usize) -> (Vec<S>, Vec<S>) {
    assert_eq!(a.len(), n * n, "matrix is not {n}x{n}");
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut v = a.to_vec();
    let mut d = vec![S::zero(); n];
    let mut e = vec![S::zero(); n];
    tridiagonalize(&mut v, &mut d, &mut e, n);
    ql_implicit(&mut v, &mut d, &mut e, n, true);
    sort_pairs(d, v, n)
}

/// Eigenvalues only, ascending.
pub fn sym_eigenvalues<S: Scalar>(a: &[S], n: usize) -> Vec<S> {
    assert_eq!(a.len(), n * n, "matrix is not {n}x{n}");
    if n == 0 {
        return Vec::new();
    }
    let mut v = a.to_vec();
    let mut d = vec![S::zero(); n];
    let mut e = vec![S::zero(); n];
    tridiagonalize(&mut v, &mut d, &mut e, n);
    ql_implicit(&mut v, &mut d, &mut e, n, false);
    d.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    d
}

fn sort_pairs<S: Scalar>(d: Vec<S>, v: Vec<S>, n: usize) -> (Vec<S>, Vec<S>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| d[i]).collect();
    let mut vecs = vec![S::zero(); n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + col] = v[r * n + src];
        }
    }
    (vals, vecs)
}

/// Householder reduction; on return `v` holds the accumulated transform,
/// `d` the diagonal and `e[1..]` the sub-diagonal.
fn tridiagonalize<S: Scalar>(v: &mut [S], d: &mut [S], e: &mut [S], n: usize) {
    let at = |r: usize, c: usize| r * n + c;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = S::zero();
        let mut h = S::zero();
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == S::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = S::zero();
                v[at(j, i)] = S::zero();
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > S::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = S::zero();
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = S::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = S::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = S::one();
        let h = d[i + 1];
        if h != S::zero() {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = S::zero();
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = S::zero();
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = S::zero();
    }
    v[at(n - 1, n - 1)] = S::one();
    e[0] = S::zero();
}

/// Implicit-shift QL on the tridiagonal `(d, e)`; rotations are applied to
/// `v` when `vectors` is set.
fn ql_implicit<S: Scalar>(v: &mut [S], d: &mut [S], e: &mut [S], n: usize, vectors: bool) {
    let at = |r: usize, c: usize| r * n + c;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = S::zero();
    let mut f = S::zero();
    let mut tst1 = S::zero();
    let eps = S::epsilon();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            for _iter in 0..200 {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (S::lit(2.0) * e[l]);
                let mut r = p.hypot(S::one());
                if p < S::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for x in d.iter_mut().skip(l + 2) {
                    *x -= h;
                }
                f += h;
                p = d[m];
                let mut c = S::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = S::zero();
                let mut s2 = S::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    if vectors {
                        for k in 0..n {
                            let hk = v[at(k, i + 1)];
                            v[at(k, i + 1)] = s * v[at(k, i)] + c * hk;
                            v[at(k, i)] = c * v[at(k, i)] - s * hk;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = S::zero();
    }
}

pub fn identity<S: Scalar>(n: usize) -> Vec<S> {
    let mut m = vec![S::zero(); n * n];
    (0..n).for_each(|i| m[i * n + i] = S::one());
    m
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == S::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `V diag(f(lambda)) V^T`.
pub fn spectral_map<S: Scalar>(vals: &[S], vecs: &[S], n: usize, f: impl Fn(S) -> S) -> Vec<S> {
    let fv: Vec<S> = vals.iter().map(|&l| f(l)).collect();
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = S::zero();
            for k in 0..n {
                acc += vecs[i * n + k] * fv[k] * vecs[j * n + k];
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    out
}

/// Smallest eigenvalue below `-tol`, if any; otherwise the eigenvalues with
/// small negatives clamped to zero.
pub fn clamp_psd<S: Scalar>(vals: &[S], tol: S) -> Result<Vec<S>, S> {
    let worst = vals.iter().copied().fold(S::infinity(), S::min);
    if worst < -tol {
        return Err(worst);
    }
    Ok(vals.iter().map(|&l| l.max(S::zero())).collect())
}

/// Principal square root of a symmetric positive-semidefinite matrix.
pub fn sqrtm_psd<S: Scalar>(a: &[S], n: usize, tol: S) -> Result<Vec<S>, S> {
    let (vals, vecs) = sym_eigen(a, n);
    let vals = clamp_psd(&vals, tol)?;
    Ok(spectral_map(&vals, &vecs, n, |l| l.sqrt()))
}
