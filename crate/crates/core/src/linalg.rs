//! Small dense-vector helpers shared by the kernels and the learner.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_p(a: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        return norm2(a);
    }
    if p.is_infinite() {
        return a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    }
    a.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Row-major `rows x cols` matrix times vector.
pub fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    (0..rows)
        .map(|r| dot(&m[r * cols..(r + 1) * cols], v))
        .collect()
}

pub fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Nested-matrix product `a * b`.
pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; cols];
            for k in 0..inner {
                let r = row[k];
                if r != 0.0 {
                    for (o, bv) in out.iter_mut().zip(&b[k]) {
                        *o += r * bv;
                    }
                }
            }
            out
        })
        .collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    (0..cols)
        .map(|c| (0..rows).map(|r| a[r][c]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms() {
        assert_eq!(norm2(&[3.0, 4.0]), 5.0);
        assert_eq!(norm_p(&[3.0, -4.0], 1.0), 7.0);
        assert_eq!(norm_p(&[3.0, -4.0], f64::INFINITY), 4.0);
    }

    #[test]
    fn matmul_identity() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let i = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(matmul(&a, &i), a);
        assert_eq!(transpose(&a), vec![vec![1.0, 3.0], vec![2.0, 4.0]]);
    }
}
