//! Small fixed-size vector helpers.

pub type V3 = [f64; 3];

/// Determinant of the matrix with columns `a`, `b`, `c` by cofactor expansion.
#[inline]
pub fn det3(a: &V3, b: &V3, c: &V3) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - b[0] * (a[1] * c[2] - a[2] * c[1]) + c[0] * (a[1] * b[2] - a[2] * b[1])
}

#[inline]
pub fn cross(a: &V3, b: &V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn dot(a: &V3, b: &V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &V3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &V3, y: &V3) -> V3 {
    [alpha * x[0] + y[0], alpha * x[1] + y[1], alpha * x[2] + y[2]]
}

#[inline]
pub fn scale(alpha: f64, x: &V3) -> V3 {
    [alpha * x[0], alpha * x[1], alpha * x[2]]
}

#[inline]
pub fn sub(a: &V3, b: &V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn normalize(a: &V3) -> V3 {
    let n = norm(a);
    scale(1.0 / n, a)
}

/// 3x3 matrix stored by rows.
pub type M3 = [[f64; 3]; 3];

pub fn mat_det(m: &M3) -> f64 {
    // det of rows equals det of columns
    det3(&m[0], &m[1], &m[2])
}

/// Inverse by the adjugate; `None` if the determinant is below `floor` in magnitude.
pub fn mat_inv(m: &M3, floor: f64) -> Option<M3> {
    let d = mat_det(m);
    if !(d.abs() > floor) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / d;
        }
    }
    Some(inv)
}

pub fn mat_vec(m: &M3, v: &V3) -> V3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_t_vec(m: &M3, v: &V3) -> V3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Binomial coefficient for small arguments.
pub fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_of_identity_and_permutation() {
        let e = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(det3(&e[0], &e[1], &e[2]), 1.0);
        assert_eq!(det3(&e[1], &e[0], &e[2]), -1.0);
    }

    #[test]
    fn inverse_round_trip() {
        let m = [[2.0, 1.0, 0.5], [0.0, 3.0, -1.0], [1.0, 0.0, 1.0]];
        let inv = mat_inv(&m, 1e-12).unwrap();
        for i in 0..3 {
            let col = [inv[0][i], inv[1][i], inv[2][i]];
            let r = mat_vec(&m, &col);
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r[j] - want).abs() < 1e-14);
            }
        }
    }
}
