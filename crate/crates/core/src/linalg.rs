//! Row-major dense helpers on plain slices. Matrices are `rows x cols` with
//! element `(r, c)` at `r * cols + c`.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = m * v`.
pub fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&m[r * cols..(r + 1) * cols], v);
    }
}

/// `out += m^T * v`.
pub fn matvec_t_acc(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for r in 0..rows {
        let vr = v[r];
        if vr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x * vr;
        }
    }
}

/// `m += a * b^T` where `a` has `rows` entries and `b` has `cols`.
pub fn outer_acc(m: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut m[r * cols..(r + 1) * cols];
        for (x, &bc) in row.iter_mut().zip(b) {
            *x += ar * bc;
        }
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Cosine similarity; `None` if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Accumulates `scale * d cos(a, b) / d a` into `grad_a` and the same for `b`.
///
/// Uses the unclamped quotient so the result is the true derivative even when
/// rounding pushes the cosine marginally outside [-1, 1].
pub fn cosine_grad_acc(a: &[f64], b: &[f64], scale: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    let inv = 1.0 / (na * nb);
    let cos = dot(a, b) * inv;
    let ka = cos / (na * na);
    let kb = cos / (nb * nb);
    for k in 0..a.len() {
        grad_a[k] += scale * (b[k] * inv - ka * a[k]);
        grad_b[k] += scale * (a[k] * inv - kb * b[k]);
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
