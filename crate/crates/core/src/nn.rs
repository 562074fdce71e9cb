//! Forward/backward kernels shared by the backbone, heads and classifiers.
//!
//! Everything is generic over [`Real`] so the same code runs in f32 for
//! training and in f64 for finite-difference checks. Row reductions (means,
//! variances, softmax normalizers, dot products) accumulate in f64.

use std::fmt::Debug;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha * A @ B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// Mutable strided matrix view.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a @ b + beta * c`. When `beta` is zero `c` is overwritten.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape mismatch");
    assert!(a.fits() && b.fits(), "operand view exceeds storage");
    assert!(
        c.rows == 0 || c.cols == 0 || (c.rows - 1) * c.rs + (c.cols - 1) * c.cs < c.data.len(),
        "output view exceeds storage"
    );
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Row-major owned matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> View<'_, T> {
        View::row_major(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, T> {
        ViewMut::row_major(&mut self.data, self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

pub fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    assert_eq!(dst.len(), src.len());
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

/// `y = x @ w^T + b` with `w` stored `out x in`.
pub fn linear<T: Real>(x: &Mat<T>, w: &[T], b: &[T]) -> Mat<T> {
    let out = b.len();
    let inp = x.cols;
    assert_eq!(w.len(), out * inp, "weight size mismatch");
    let mut y = Mat::zeros(x.rows, out);
    for r in 0..x.rows {
        y.row_mut(r).copy_from_slice(b);
    }
    gemm(T::one(), x.view(), View::row_major(w, out, inp).t(), T::one(), y.view_mut());
    y
}

/// Accumulates `dw += dy^T x`, `db += sum_rows dy` and returns `dx = dy @ w`.
pub fn linear_backward<T: Real>(x: &Mat<T>, w: &[T], dy: &Mat<T>, dw: &mut [T], db: &mut [T]) -> Mat<T> {
    let (out, inp) = (dy.cols, x.cols);
    linear_param_grads(x, dy, dw, db);
    let mut dx = Mat::zeros(x.rows, inp);
    gemm(T::one(), dy.view(), View::row_major(w, out, inp), T::zero(), dx.view_mut());
    dx
}

/// Parameter-only half of [`linear_backward`].
pub fn linear_param_grads<T: Real>(x: &Mat<T>, dy: &Mat<T>, dw: &mut [T], db: &mut [T]) {
    let (out, inp) = (dy.cols, x.cols);
    assert_eq!(x.rows, dy.rows);
    assert_eq!(dw.len(), out * inp);
    assert_eq!(db.len(), out);
    gemm(T::one(), dy.view().t(), x.view(), T::one(), ViewMut::row_major(dw, out, inp));
    for (j, slot) in db.iter_mut().enumerate() {
        let s: f64 = (0..dy.rows).map(|r| dy.data[r * out + j].f64()).sum();
        *slot = T::of(slot.f64() + s);
    }
}

pub const LN_EPS: f64 = 1e-6;

pub struct LnCache<T> {
    pub xhat: Mat<T>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm<T: Real>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> (Mat<T>, LnCache<T>) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let (xh, yr) = (xhat.row_mut(r), &mut y.data[r * d..(r + 1) * d]);
        for j in 0..d {
            let v = (row[j].f64() - mean) * rs;
            xh[j] = T::of(v);
            yr[j] = T::of(v * gamma[j].f64() + beta[j].f64());
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    cache: &LnCache<T>,
    gamma: &[T],
    dy: &Mat<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Mat<T> {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dg = vec![0.0f64; d];
    let mut dbt = vec![0.0f64; d];
    for r in 0..dy.rows {
        let (g, xh) = (dy.row(r), cache.xhat.row(r));
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            let gj = g[j].f64();
            dg[j] += gj * xh[j].f64();
            dbt[j] += gj;
            let dxh = gj * gamma[j].f64();
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j].f64();
        }
        let (m1, m2) = (sum_dxh / d as f64, sum_dxh_xh / d as f64);
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            let dxh = g[j].f64() * gamma[j].f64();
            out[j] = T::of(rs * (dxh - m1 - xh[j].f64() * m2));
        }
    }
    for j in 0..d {
        dgamma[j] = T::of(dgamma[j].f64() + dg[j]);
        dbeta[j] = T::of(dbeta[j].f64() + dbt[j]);
    }
    dx
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu<T: Real>(x: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|v| {
                let v = v.f64();
                T::of(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
            })
            .collect(),
    }
}

pub fn gelu_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(v, g)| {
                let v = v.f64();
                let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
                T::of(g.f64() * (cdf + v * pdf))
            })
            .collect(),
    }
}

/// In-place numerically stable row softmax.
pub fn softmax_rows<T: Real>(m: &mut Mat<T>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
        let mut sum = 0.0;
        let exps: Vec<f64> = row
            .iter()
            .map(|v| {
                let e = (v.f64() - max).exp();
                sum += e;
                e
            })
            .collect();
        for (slot, e) in row.iter_mut().zip(exps) {
            *slot = T::of(e / sum);
        }
    }
}

/// Multi-head self-attention core on a packed `n x 3d` qkv matrix laid out as
/// `[q | k | v]`, each split into `heads` contiguous column groups.
///
/// Returns the concatenated head outputs (`n x d`) and per-head probabilities.
pub fn attention<T: Real>(qkv: &Mat<T>, heads: usize) -> (Mat<T>, Vec<Mat<T>>) {
    let n = qkv.rows;
    let d = qkv.cols / 3;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = View { data: &qkv.data[h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        let k = View { data: &qkv.data[d + h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        let v = View { data: &qkv.data[2 * d + h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        let mut s = Mat::zeros(n, n);
        gemm(scale, q, k.t(), T::zero(), s.view_mut());
        softmax_rows(&mut s);
        let o = ViewMut { data: &mut out.data[h * dh..], rows: n, cols: dh, rs: d, cs: 1 };
        gemm(T::one(), s.view(), v, T::zero(), o);
        probs.push(s);
    }
    (out, probs)
}

/// Backward of [`attention`]; returns the gradient w.r.t. the packed qkv.
pub fn attention_backward<T: Real>(qkv: &Mat<T>, probs: &[Mat<T>], d_out: &Mat<T>) -> Mat<T> {
    let n = qkv.rows;
    let d = qkv.cols / 3;
    let heads = probs.len();
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dqkv = Mat::zeros(n, 3 * d);
    for (h, p) in probs.iter().enumerate() {
        let q = View { data: &qkv.data[h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        let k = View { data: &qkv.data[d + h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        let v = View { data: &qkv.data[2 * d + h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        let d_o = View { data: &d_out.data[h * dh..], rows: n, cols: dh, rs: d, cs: 1 };

        let dv = ViewMut { data: &mut dqkv.data[2 * d + h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        gemm(T::one(), p.view().t(), d_o, T::zero(), dv);

        let mut dp = Mat::zeros(n, n);
        gemm(T::one(), d_o, v.t(), T::zero(), dp.view_mut());
        // softmax backward: ds = p * (dp - <dp, p>_row)
        for r in 0..n {
            let (pr, dpr) = (p.row(r), dp.row_mut(r));
            let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
            for j in 0..n {
                dpr[j] = T::of(pr[j].f64() * (dpr[j].f64() - dot));
            }
        }
        let ds = dp;
        let dq = ViewMut { data: &mut dqkv.data[h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        gemm(scale, ds.view(), k, T::zero(), dq);
        let dk = ViewMut { data: &mut dqkv.data[d + h * dh..], rows: n, cols: dh, rs: 3 * d, cs: 1 };
        gemm(scale, ds.view().t(), q, T::zero(), dk);
    }
    dqkv
}

/// Softmax cross-entropy for one logit row; returns `(loss, dlogits)`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (f64, Vec<T>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
    let exps: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(j, e)| T::of(e / sum - if j == label { 1.0 } else { 0.0 }))
        .collect();
    (loss, grad)
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // Numerical derivative of a scalar functional `<dy, f(x)>` w.r.t. x.
    fn numeric_dx(x: &Mat<f64>, dy: &Mat<f64>, f: impl Fn(&Mat<f64>) -> Mat<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.data.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                let (yp, ym) = (f(&xp), f(&xm));
                yp.data.iter().zip(&ym.data).zip(&dy.data).map(|((a, b), g)| (a - b) * g).sum::<f64>() / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn linear_matches_naive_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 5, 4);
        let w = rand_mat(&mut rng, 3, 4);
        let b = vec![0.1, -0.2, 0.3];
        let y = linear(&x, &w.data, &b);
        for r in 0..5 {
            for o in 0..3 {
                let naive: f64 = (0..4).map(|i| x.data[r * 4 + i] * w.data[o * 4 + i]).sum::<f64>() + b[o];
                assert!((y.data[r * 3 + o] - naive).abs() < 1e-12);
            }
        }
        let dy = rand_mat(&mut rng, 5, 3);
        let (mut dw, mut db) = (vec![0.0; 12], vec![0.0; 3]);
        let dx = linear_backward(&x, &w.data, &dy, &mut dw, &mut db);
        close(&dx.data, &numeric_dx(&x, &dy, |x| linear(x, &w.data, &b)), 1e-6);
        let wm = w.clone();
        close(&dw, &numeric_dx(&wm, &dy, |w| linear(&x, &w.data, &b)), 1e-6);
    }

    #[test]
    fn layer_norm_backward_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 6);
        let g = rand_mat(&mut rng, 1, 6).data;
        let b = rand_mat(&mut rng, 1, 6).data;
        let dy = rand_mat(&mut rng, 3, 6);
        let (_, cache) = layer_norm(&x, &g, &b);
        let (mut dg, mut db) = (vec![0.0; 6], vec![0.0; 6]);
        let dx = layer_norm_backward(&cache, &g, &dy, &mut dg, &mut db);
        close(&dx.data, &numeric_dx(&x, &dy, |x| layer_norm(x, &g, &b).0), 1e-6);
        let gm = Mat::from_vec(1, 6, g.clone());
        let dg_num = numeric_dx(&gm, &dy, |gm| layer_norm(&x, &gm.data, &b).0);
        close(&dg, &dg_num, 1e-6);
    }

    #[test]
    fn gelu_backward_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 2, 7);
        let dy = rand_mat(&mut rng, 2, 7);
        close(&gelu_backward(&x, &dy).data, &numeric_dx(&x, &dy, gelu), 1e-6);
        assert!((gelu(&Mat::from_vec(1, 1, vec![1.0f64])).data[0] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn attention_backward_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qkv = rand_mat(&mut rng, 5, 12);
        let dy = rand_mat(&mut rng, 5, 4);
        let (_, probs) = attention(&qkv, 2);
        for p in &probs {
            for r in 0..p.rows {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let dq = attention_backward(&qkv, &probs, &dy);
        close(&dq.data, &numeric_dx(&qkv, &dy, |q| attention(q, 2).0), 1e-6);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = [0.3f64, -1.0, 2.0];
        let (loss, g) = cross_entropy(&logits, 1);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = logits;
            p[i] += h;
            let mut m = logits;
            m[i] -= h;
            let num = (cross_entropy(&p, 1).0 - cross_entropy(&m, 1).0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-7);
        }
        assert!(loss > 0.0);
    }
}
