//! Small dense-vector helpers shared by the encoders and the classifier.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `v / |v|`, or `None` when the norm is zero or not finite.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

/// Backward pass of `u = z / |z|`: maps `dL/du` to `dL/dz = (I - u u^T) dL/du / |z|`.
pub fn normalize_backward(unit: &[f64], z_norm: f64, upstream: &[f64]) -> Vec<f64> {
    let along = dot(unit, upstream);
    unit.iter()
        .zip(upstream)
        .map(|(u, g)| (g - along * u) / z_norm)
        .collect()
}

/// Row-major `rows x cols` matrix times vector.
pub fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    m.chunks_exact(cols).map(|row| dot(row, v)).collect()
}

/// Transposed product `m^T v` for a row-major `rows x cols` matrix.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(v.len(), rows);
    let mut out = vec![0.0; cols];
    for (row, &scale) in m.chunks_exact(cols).zip(v) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r * scale;
        }
    }
    out
}
