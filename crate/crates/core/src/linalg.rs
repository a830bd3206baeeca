//! Dense row-major helpers shared by the encoders and the head.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = m * v` for a `rows x v.len()` row-major matrix.
pub fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    debug_assert_eq!(m.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = dot(row, v);
    }
}

/// `out = m^T * v` for a `v.len() x out.len()` row-major matrix.
pub fn matvec_t(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert_eq!(m.len(), v.len() * cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&vi, row) in v.iter().zip(m.chunks_exact(cols)) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += vi * r;
        }
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
