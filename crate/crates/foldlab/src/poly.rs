//! Polynomials in one and four variables, and truncated Taylor series.

use serde::{Deserialize, Serialize};

/// Univariate polynomial with coefficients in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Poly(coeffs)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn derivative(&self) -> Poly {
        if self.0.len() <= 1 {
            return Poly(vec![0.0]);
        }
        Poly(self.0.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect())
    }

    /// Value of the `n`-th derivative at `t`.
    pub fn eval_deriv(&self, t: f64, n: usize) -> f64 {
        let mut acc = 0.0;
        for (i, c) in self.0.iter().enumerate().rev() {
            if i < n {
                break;
            }
            acc = acc * t + c * falling(i, n);
        }
        acc
    }

    pub fn degree(&self) -> usize {
        self.0.iter().rposition(|c| *c != 0.0).unwrap_or(0)
    }
}

/// Falling factorial i (i-1) ... (i-n+1).
pub fn falling(i: usize, n: usize) -> f64 {
    (0..n).fold(1.0, |acc, k| acc * (i - k) as f64)
}

/// Polynomial in the four variables (x1, x2, x3, y3).
#[derive(Clone, Debug, Default)]
pub struct MPoly {
    terms: Vec<([u8; 4], f64)>,
}

impl MPoly {
    pub fn zero() -> Self {
        MPoly { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        MPoly { terms: vec![([0; 4], c)] }
    }

    pub fn var(i: usize) -> Self {
        let mut e = [0u8; 4];
        e[i] = 1;
        MPoly { terms: vec![(e, 1.0)] }
    }

    fn normalize(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<([u8; 4], f64)> = Vec::with_capacity(self.terms.len());
        for (e, c) in self.terms {
            match out.last_mut() {
                Some((le, lc)) if *le == e => *lc += c,
                _ => out.push((e, c)),
            }
        }
        out.retain(|(_, c)| *c != 0.0);
        MPoly { terms: out }
    }

    pub fn add(&self, other: &MPoly) -> MPoly {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        MPoly { terms }.normalize()
    }

    pub fn scale(&self, s: f64) -> MPoly {
        MPoly { terms: self.terms.iter().map(|(e, c)| (*e, c * s)).collect() }.normalize()
    }

    pub fn mul(&self, other: &MPoly) -> MPoly {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e = [ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2], ea[3] + eb[3]];
                terms.push((e, ca * cb));
            }
        }
        MPoly { terms }.normalize()
    }

    /// Substitute this polynomial into a univariate polynomial: p(self).
    pub fn compose(&self, p: &Poly) -> MPoly {
        let mut acc = MPoly::zero();
        for c in p.0.iter().rev() {
            acc = acc.mul(self).add(&MPoly::constant(*c));
        }
        acc
    }

    /// Value of the partial derivative with multi-index `alpha` at `p`.
    pub fn deriv_at(&self, p: &[f64; 4], alpha: [u8; 4]) -> f64 {
        let mut sum = 0.0;
        'terms: for (e, c) in &self.terms {
            let mut v = *c;
            for i in 0..4 {
                if e[i] < alpha[i] {
                    continue 'terms;
                }
                v *= falling(e[i] as usize, alpha[i] as usize);
                v *= p[i].powi((e[i] - alpha[i]) as i32);
            }
            sum += v;
        }
        sum
    }

    pub fn eval(&self, p: &[f64; 4]) -> f64 {
        self.deriv_at(p, [0; 4])
    }
}

/// Truncated Taylor series in one variable, coefficients c_0..c_{N-1}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Series<const N: usize>(pub [f64; N]);

impl<const N: usize> Series<N> {
    pub fn constant(c: f64) -> Self {
        let mut a = [0.0; N];
        a[0] = c;
        Series(a)
    }

    /// The series of the identity map around the expansion point, without constant term.
    pub fn identity() -> Self {
        let mut a = [0.0; N];
        if N > 1 {
            a[1] = 1.0;
        }
        Series(a)
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut a = self.0;
        for i in 0..N {
            a[i] += o.0[i];
        }
        Series(a)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut a = self.0;
        for v in a.iter_mut() {
            *v *= s;
        }
        Series(a)
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut a = [0.0; N];
        for i in 0..N {
            for j in 0..N - i {
                a[i + j] += self.0[i] * o.0[j];
            }
        }
        Series(a)
    }

    /// Derivative of order `n` at the expansion point.
    pub fn deriv(&self, n: usize) -> f64 {
        self.0[n] * (1..=n).fold(1.0, |acc, k| acc * k as f64)
    }

    /// Series of p(s0 + self) where self has zero constant term.
    pub fn compose_poly(&self, p: &Poly, s0: f64) -> Self {
        // Taylor coefficients of p at s0
        let mut taylor = [0.0; N];
        let mut fact = 1.0;
        for (n, t) in taylor.iter_mut().enumerate() {
            if n > 0 {
                fact *= n as f64;
            }
            *t = p.eval_deriv(s0, n) / fact;
        }
        let mut acc = Series::constant(0.0);
        for c in taylor.iter().rev() {
            acc = acc.mul(self).add(&Series::constant(*c));
        }
        acc
    }

    /// Given p with p'(s0) != 0, the series sigma(eps) with p(s0 + sigma) = p(s0) + eps.
    pub fn invert_poly(p: &Poly, s0: f64) -> Self {
        let a1 = p.eval_deriv(s0, 1);
        let eps = Series::<N>::identity();
        let mut sigma = eps.scale(1.0 / a1);
        for _ in 0..N {
            // p(s0 + sigma) - p(s0) - eps should vanish; Newton-like correction
            let mut resid = sigma.compose_poly(p, s0);
            resid.0[0] = 0.0;
            let r = resid.add(&eps.scale(-1.0));
            sigma = sigma.add(&r.scale(-1.0 / a1));
        }
        sigma
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_derivatives() {
        let p = Poly::new(vec![1.0, -2.0, 0.0, 3.0]);
        assert_eq!(p.eval(2.0), 1.0 - 4.0 + 24.0);
        assert_eq!(p.eval_deriv(2.0, 1), -2.0 + 36.0);
        assert_eq!(p.eval_deriv(2.0, 2), 36.0);
        assert_eq!(p.eval_deriv(2.0, 3), 18.0);
        assert_eq!(p.eval_deriv(2.0, 4), 0.0);
        assert_eq!(p.derivative().eval(2.0), p.eval_deriv(2.0, 1));
    }

    #[test]
    fn mpoly_compose_and_differentiate() {
        // (x1 - y3)^2 expanded
        let u = MPoly::var(0).add(&MPoly::var(3).scale(-1.0));
        let g = u.compose(&Poly::new(vec![0.0, 0.0, 1.0]));
        let p = [0.3, 0.0, 0.0, -0.2];
        assert!((g.eval(&p) - 0.25).abs() < 1e-15);
        assert!((g.deriv_at(&p, [1, 0, 0, 0]) - 1.0).abs() < 1e-15);
        assert!((g.deriv_at(&p, [1, 0, 0, 1]) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn series_inversion_of_cubic() {
        // s^3/6 around s0 = 1.3; compare with derivatives of the cube root
        let p = Poly::new(vec![0.0, 0.0, 0.0, 1.0 / 6.0]);
        let s0: f64 = 1.3;
        let sig = Series::<5>::invert_poly(&p, s0);
        // s' = 2/s^2, s'' = -8/s^5, s''' = 80/s^8
        assert_eq!(sig.deriv(0), 0.0);
        assert!((sig.deriv(1) - 2.0 / s0.powi(2)).abs() < 1e-12);
        assert!((sig.deriv(2) + 8.0 / s0.powi(5)).abs() < 1e-12);
        assert!((sig.deriv(3) - 80.0 / s0.powi(8)).abs() < 1e-11);
    }
}
