//! Partial symmetric eigendecomposition: the largest few eigenpairs of a
//! dense symmetric matrix.
//!
//! Householder reduction to tridiagonal form, Sturm-sequence bisection for the
//! wanted eigenvalues, inverse iteration on the tridiagonal for their vectors
//! and back-transformation through the stored reflectors. Only the requested
//! vectors are ever formed, which keeps the cost at one `O(n^3)` reduction.

use nalgebra::DMatrix;

/// Householder reflector `H = I - tau * v v^T` acting on indices `k+1..n`.
struct Reflector {
    v: Vec<f64>,
    tau: f64,
}

struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
    reflectors: Vec<Reflector>,
}

/// Reduce the symmetric row-major `a` (n x n, consumed) to tridiagonal form.
fn tridiagonalize(mut a: Vec<f64>, n: usize) -> Tridiagonal {
    let mut off = vec![0.0; n.saturating_sub(1)];
    let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
    let mut p = vec![0.0; n];
    let mut w = vec![0.0; n];

    for k in 0..n.saturating_sub(2) {
        let m = n - k - 1;
        let base = k + 1;
        let mut v: Vec<f64> = (0..m).map(|i| a[(base + i) * n + k]).collect();
        let sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma == 0.0 {
            off[k] = 0.0;
            reflectors.push(Reflector { v, tau: 0.0 });
            continue;
        }
        let alpha = if v[0] >= 0.0 { -sigma } else { sigma };
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        let tau = 2.0 / vtv;

        // p = tau * A22 v
        for i in 0..m {
            let row = &a[(base + i) * n + base..(base + i) * n + n];
            p[i] = tau * row.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        }
        let half = 0.5 * tau * p[..m].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..m {
            w[i] = p[i] - half * v[i];
        }
        // A22 -= v w^T + w v^T
        for i in 0..m {
            let (vi, wi) = (v[i], w[i]);
            let row = &mut a[(base + i) * n + base..(base + i) * n + n];
            for ((x, &vj), &wj) in row.iter_mut().zip(&v).zip(&w[..m]) {
                *x -= vi * wj + wi * vj;
            }
        }
        off[k] = alpha;
        reflectors.push(Reflector { v, tau });
    }
    if n >= 2 {
        off[n - 2] = a[(n - 1) * n + n - 2];
    }
    let diag = (0..n).map(|i| a[i * n + i]).collect();
    Tridiagonal {
        diag,
        off,
        reflectors,
    }
}

impl Tridiagonal {
    fn n(&self) -> usize {
        self.diag.len()
    }

    fn scale(&self) -> f64 {
        let d = self.diag.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let o = self.off.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        d + 2.0 * o
    }

    fn pivmin(&self) -> f64 {
        let b2 = self.off.iter().fold(1.0f64, |m, x| m.max(x * x));
        f64::MIN_POSITIVE * b2
    }

    /// Number of eigenvalues strictly below `x`.
    fn count_below(&self, x: f64, pivmin: f64) -> usize {
        let mut count = 0;
        let mut q = self.diag[0] - x;
        if q.abs() < pivmin {
            q = -pivmin;
        }
        if q < 0.0 {
            count += 1;
        }
        for i in 1..self.n() {
            let b = self.off[i - 1];
            q = self.diag[i] - x - b * b / q;
            if q.abs() < pivmin {
                q = -pivmin;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// The `j`-th smallest eigenvalue (0-based) by bisection.
    fn eigenvalue(&self, j: usize) -> f64 {
        let n = self.n();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 }
                + if i + 1 < n { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        let pad = f64::EPSILON * n as f64 * (lo.abs().max(hi.abs())) + self.pivmin();
        lo -= pad;
        hi += pad;
        let pivmin = self.pivmin();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if hi - lo <= 2.0 * f64::EPSILON * lo.abs().max(hi.abs()) + pivmin {
                break;
            }
            if self.count_below(mid, pivmin) > j {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Eigenvector of the tridiagonal for `lambda` by inverse iteration,
    /// orthogonalized against `cluster` (vectors of nearby eigenvalues).
    fn inverse_iteration(&self, lambda: f64, start: Vec<f64>, cluster: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n();
        let floor = f64::EPSILON * self.scale().max(f64::MIN_POSITIVE.sqrt());
        let lu = TridiagonalLu::factor(
            &self.off,
            &self.diag.iter().map(|d| d - lambda).collect::<Vec<_>>(),
            &self.off,
            floor,
        );
        let mut x = start;
        for _ in 0..5 {
            orthogonalize(&mut x, cluster);
            normalize(&mut x);
            lu.solve(&mut x);
        }
        orthogonalize(&mut x, cluster);
        normalize(&mut x);
        debug_assert_eq!(x.len(), n);
        x
    }

    fn back_transform(&self, t: &mut [f64]) {
        for (k, r) in self.reflectors.iter().enumerate().rev() {
            if r.tau == 0.0 {
                continue;
            }
            let seg = &mut t[k + 1..];
            let s = r.tau * seg.iter().zip(&r.v).map(|(x, y)| x * y).sum::<f64>();
            for (x, &vi) in seg.iter_mut().zip(&r.v) {
                *x -= s * vi;
            }
        }
    }
}

/// LU factorization with partial pivoting of a tridiagonal matrix.
struct TridiagonalLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn factor(sub: &[f64], diag: &[f64], sup: &[f64], floor: f64) -> Self {
        let n = diag.len();
        let mut dl = sub.to_vec();
        let mut d = diag.to_vec();
        let mut du = sup.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                } else {
                    dl[i] = 0.0;
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swapped[i] = true;
            }
        }
        for p in d.iter_mut() {
            if p.abs() < floor {
                *p = if *p < 0.0 { -floor } else { floor };
            }
        }
        Self {
            dl,
            d,
            du,
            du2,
            swapped,
        }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n >= 2 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
        let big = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !big.is_finite() {
            // overflow on an exactly singular shift: any finite direction
            // from the solve is an eigenvector, so rescale it
            for x in b.iter_mut() {
                *x = if x.is_infinite() { x.signum() } else { 0.0 };
            }
        }
    }
}

fn orthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let s: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
        for (a, b) in x.iter_mut().zip(q) {
            *a -= s * b;
        }
    }
}

fn normalize(x: &mut [f64]) {
    // divide by the largest entry first so squaring cannot overflow
    let big = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(big > 0.0 && big.is_finite()) {
        return;
    }
    x.iter_mut().for_each(|v| *v /= big);
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= n);
}

/// Deterministic start vectors in (-1, 1).
struct StartVectors(u64);

impl StartVectors {
    fn next(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                self.0 = self
                    .0
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }
}

/// Largest `count` eigenpairs of the symmetric row-major `a` (n x n),
/// eigenvalues in descending order. Vectors are unit-norm, sign unspecified.
pub(crate) fn top_eigenpairs(a: Vec<f64>, n: usize, count: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert!(count <= n && a.len() == n * n);
    if count == 0 {
        return (Vec::new(), Vec::new());
    }
    let tri = tridiagonalize(a, n);
    let values: Vec<f64> = (0..count).map(|i| tri.eigenvalue(n - 1 - i)).collect();

    let cluster_gap = 1e-3 * tri.scale();
    let mut starts = StartVectors(0x853c_49e6_748f_ea9b);
    let mut tri_vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut cluster_start = 0;
    for (i, &lambda) in values.iter().enumerate() {
        if i > 0 && (values[i - 1] - lambda).abs() > cluster_gap {
            cluster_start = i;
        }
        let v = tri.inverse_iteration(lambda, starts.next(n), &tri_vectors[cluster_start..i]);
        tri_vectors.push(v);
    }
    let vectors = tri_vectors
        .into_iter()
        .map(|mut t| {
            tri.back_transform(&mut t);
            normalize(&mut t);
            t
        })
        .collect();
    (values, vectors)
}

/// Largest `count` eigenpairs of a symmetric `n x n` operator given only by
/// its action on blocks of column vectors.
///
/// Block Krylov subspace with full reorthogonalization and Rayleigh-Ritz on
/// the projected matrix, extended until every wanted Ritz pair has residual
/// at most `tol` times the largest Ritz value magnitude. The basis grows to
/// at most `n`, where the projection is exact.
pub(crate) fn top_eigenpairs_krylov(
    n: usize,
    count: usize,
    block: usize,
    tol: f64,
    apply: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert!(count <= n);
    if count == 0 {
        return (Vec::new(), Vec::new());
    }
    let block = block.clamp(count, n);
    let mut starts = StartVectors(0x2545_f491_4f6c_dd1d);
    let mut basis = DMatrix::<f64>::zeros(n, 0);
    let mut image = DMatrix::<f64>::zeros(n, 0);
    let mut fresh = random_block(&mut starts, n, block);
    loop {
        let accepted = orthonormalize_against(&basis, fresh);
        let accepted = if accepted.ncols() == 0 && basis.ncols() < n {
            // the basis spans an invariant subspace; continue from new directions
            let r = random_block(&mut starts, n, block.min(n - basis.ncols()));
            orthonormalize_against(&basis, r)
        } else {
            accepted
        };
        if accepted.ncols() > 0 {
            let applied = apply(&accepted);
            basis = append_columns(basis, &accepted);
            image = append_columns(image, &applied);
        }
        let s = basis.ncols();
        let h = basis.tr_mul(&image);
        let h_sym: Vec<f64> = (0..s * s)
            .map(|k| {
                let (i, j) = (k / s, k % s);
                0.5 * (h[(i, j)] + h[(j, i)])
            })
            .collect();
        let want = count.min(s);
        let (values, small) = top_eigenpairs(h_sym, s, want);
        let u = DMatrix::from_fn(s, want, |i, j| small[j][i]);
        let ritz = &basis * &u;
        let mut residual = &image * &u;
        for (j, &theta) in values.iter().enumerate() {
            let mut col = residual.column_mut(j);
            col.axpy(-theta, &ritz.column(j), 1.0);
        }
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let converged = want == count
            && (0..count).all(|j| residual.column(j).norm() <= tol * scale.max(f64::MIN_POSITIVE));
        if converged || s >= n || (accepted.ncols() == 0) {
            let vectors = (0..want)
                .map(|j| {
                    let mut v: Vec<f64> = ritz.column(j).iter().copied().collect();
                    normalize(&mut v);
                    v
                })
                .collect();
            return (values, vectors);
        }
        let first = s - accepted.ncols();
        fresh = image.columns(first, accepted.ncols()).into_owned();
    }
}

fn random_block(starts: &mut StartVectors, n: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(n, cols);
    for j in 0..cols {
        m.column_mut(j).copy_from_slice(&starts.next(n));
    }
    m
}

fn append_columns(m: DMatrix<f64>, extra: &DMatrix<f64>) -> DMatrix<f64> {
    let c = m.ncols();
    let mut out = m.resize_horizontally(c + extra.ncols(), 0.0);
    out.columns_mut(c, extra.ncols()).copy_from(extra);
    out
}

/// Orthonormalize the columns of `w` against `basis` and each other, two
/// passes of block Gram-Schmidt, dropping columns that are (numerically)
/// already in the span.
fn orthonormalize_against(basis: &DMatrix<f64>, mut w: DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let before: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    for _ in 0..2 {
        if basis.ncols() > 0 {
            let coeff = basis.tr_mul(&w);
            w.gemm(-1.0, basis, &coeff, 1.0);
        }
    }
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(w.ncols());
    for (j, col) in w.column_iter().enumerate() {
        let mut v: Vec<f64> = col.iter().copied().collect();
        for _ in 0..2 {
            for q in &kept {
                let s: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= s * b);
            }
            if basis.ncols() > 0 {
                let s = basis.tr_mul(&DMatrix::from_column_slice(n, 1, &v));
                let corr = basis * s;
                v.iter_mut().zip(corr.iter()).for_each(|(a, b)| *a -= b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if before[j] > 0.0 && norm > 1e-10 * before[j] {
            v.iter_mut().for_each(|x| *x /= norm);
            kept.push(v);
        }
    }
    let mut out = DMatrix::<f64>::zeros(n, kept.len());
    for (j, v) in kept.iter().enumerate() {
        out.column_mut(j).copy_from_slice(v);
    }
    out
}
