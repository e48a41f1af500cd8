//! Scalar fields on boxes in `(x1, x2, x3, y3)` and their derivative jets.
//!
//! A jet collects all partial derivatives up to a fixed order (at most 4) at
//! one point. Entries come from closed-form evaluators where a field provides
//! them and from nested central differences otherwise.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Axis-aligned box in `(x1, x2, x3, y3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

impl Domain {
    pub fn new(lo: [f64; 4], hi: [f64; 4]) -> Self {
        Domain { lo, hi }
    }

    pub fn check(&self, p: &[f64; 4]) -> Result<()> {
        for i in 0..4 {
            if !(p[i] >= self.lo[i] && p[i] <= self.hi[i]) {
                return Err(Error::OutOfDomain { point: *p, axis: i });
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64; 4]) -> bool {
        self.check(p).is_ok()
    }

    pub fn diameter(&self) -> f64 {
        (0..4).map(|i| (self.hi[i] - self.lo[i]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> [f64; 4] {
        std::array::from_fn(|i| 0.5 * (self.lo[i] + self.hi[i]))
    }

    /// Box shrunk by `m` on every side (clamped to its center).
    pub fn shrink(&self, m: f64) -> Domain {
        let c = self.center();
        Domain {
            lo: std::array::from_fn(|i| (self.lo[i] + m).min(c[i])),
            hi: std::array::from_fn(|i| (self.hi[i] - m).max(c[i])),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        std::array::from_fn(|i| self.lo[i] + (self.hi[i] - self.lo[i]) * rng.random::<f64>())
    }
}

/// Multi-index over the canonical variable order `(x1, x2, x3, y3)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex(pub [u8; 4]);

impl MultiIndex {
    pub const ZERO: MultiIndex = MultiIndex([0; 4]);

    pub fn order(&self) -> usize {
        self.0.iter().map(|&a| a as usize).sum()
    }

    /// Position of this index in [`indices`], valid when `order() <= MAX_ORDER`.
    pub fn index(&self) -> usize {
        let a = self.0;
        table().1[a[0] as usize * 125 + a[1] as usize * 25 + a[2] as usize * 5 + a[3] as usize]
    }

    /// `x_i` derivative (i in 0..3) followed by `m` derivatives in y3.
    pub fn x_y3(i: usize, m: u8) -> MultiIndex {
        let mut a = [0, 0, 0, m];
        a[i] += 1;
        MultiIndex(a)
    }

    pub fn y3(m: u8) -> MultiIndex {
        MultiIndex([0, 0, 0, m])
    }
}

fn table() -> &'static (Vec<MultiIndex>, Vec<usize>) {
    static T: OnceLock<(Vec<MultiIndex>, Vec<usize>)> = OnceLock::new();
    T.get_or_init(|| {
        let mut list = Vec::new();
        for n in 0..=MAX_ORDER as u8 {
            for a in (0..=n).rev() {
                for b in (0..=n - a).rev() {
                    for c in (0..=n - a - b).rev() {
                        list.push(MultiIndex([a, b, c, n - a - b - c]));
                    }
                }
            }
        }
        let mut lookup = vec![usize::MAX; 625];
        for (k, m) in list.iter().enumerate() {
            let a = m.0;
            lookup[a[0] as usize * 125 + a[1] as usize * 25 + a[2] as usize * 5 + a[3] as usize] = k;
        }
        (list, lookup)
    })
}

/// All multi-indices with total order at most `order`, graded.
pub fn indices(order: usize) -> &'static [MultiIndex] {
    let list = &table().0;
    let n = list.iter().take_while(|m| m.order() <= order).count();
    &list[..n]
}

/// A real function of `(x, y3)` on a box, with optional closed-form partials.
pub trait ScalarField: Send + Sync {
    fn domain(&self) -> &Domain;

    /// Value at `p`; callers are responsible for domain checks.
    fn eval(&self, p: &[f64; 4]) -> f64;

    fn closed_form(&self, _p: &[f64; 4], _alpha: MultiIndex) -> Option<f64> {
        None
    }

    /// Batched closed forms; fields with expensive shared setup override this.
    fn closed_forms(&self, p: &[f64; 4], alphas: &[MultiIndex]) -> Vec<Option<f64>> {
        alphas.iter().map(|a| self.closed_form(p, *a)).collect()
    }
}

/// How jet entries are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JetMode {
    /// Closed forms where available, finite differences for the rest.
    #[default]
    Auto,
    /// Closed forms only; missing entries are an error.
    ClosedForm,
    /// Finite differences only, with an optional uniform step.
    FiniteDifference { step: Option<f64> },
}

/// Partial derivatives up to `order` at one point.
#[derive(Clone, Debug)]
pub struct Jet {
    pub order: usize,
    pub point: [f64; 4],
    vals: Vec<f64>,
}

impl Jet {
    pub fn get(&self, alpha: MultiIndex) -> f64 {
        debug_assert!(alpha.order() <= self.order);
        self.vals[alpha.index()]
    }

    pub fn value(&self) -> f64 {
        self.vals[0]
    }

    /// Gradient in x of the `m`-th y3-derivative.
    pub fn grad_x_y3(&self, m: u8) -> [f64; 3] {
        std::array::from_fn(|i| self.get(MultiIndex::x_y3(i, m)))
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }
}

/// Default finite-difference step for a derivative of total order `m`,
/// balancing the O(h^2) truncation error against rounding.
pub fn default_step(diameter: f64, m: usize) -> f64 {
    diameter * f64::EPSILON.powf(1.0 / (m.max(1) as f64 + 2.0))
}

fn central_weights(m: u8) -> &'static [(i32, f64)] {
    match m {
        0 => &[(0, 1.0)],
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        _ => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
    }
}

fn reach(m: u8) -> f64 {
    match m {
        0 => 0.0,
        1 | 2 => 1.0,
        _ => 2.0,
    }
}

/// Partial derivative by nested one-dimensional central differences in
/// canonical variable order.
pub fn fd_partial(field: &dyn ScalarField, p: &[f64; 4], alpha: MultiIndex, h: f64) -> Result<f64> {
    let dom = field.domain();
    for i in 0..4 {
        let r = reach(alpha.0[i]) * h;
        if r > 0.0 && (p[i] - r < dom.lo[i] || p[i] + r > dom.hi[i]) {
            return Err(Error::InsufficientMargin { point: *p, reach: r });
        }
    }
    let w: [&[(i32, f64)]; 4] = std::array::from_fn(|i| central_weights(alpha.0[i]));
    let mut acc = 0.0;
    let mut q = *p;
    for &(o0, w0) in w[0] {
        q[0] = p[0] + o0 as f64 * h;
        for &(o1, w1) in w[1] {
            q[1] = p[1] + o1 as f64 * h;
            for &(o2, w2) in w[2] {
                q[2] = p[2] + o2 as f64 * h;
                for &(o3, w3) in w[3] {
                    q[3] = p[3] + o3 as f64 * h;
                    acc += w0 * w1 * w2 * w3 * field.eval(&q);
                }
            }
        }
    }
    Ok(acc / h.powi(alpha.order() as i32))
}

/// Jet of `field` at `p` up to `order`.
pub fn eval_jet(field: &dyn ScalarField, p: &[f64; 4], order: usize, mode: JetMode) -> Result<Jet> {
    if order > MAX_ORDER {
        return Err(Error::OrderTooHigh(order));
    }
    let dom = field.domain();
    dom.check(p)?;
    let idx = indices(order);
    let diam = dom.diameter();
    let mut vals = vec![0.0; idx.len()];
    match mode {
        JetMode::FiniteDifference { step } => {
            for (k, a) in idx.iter().enumerate() {
                let h = step.unwrap_or_else(|| default_step(diam, a.order()));
                vals[k] = if a.order() == 0 { field.eval(p) } else { fd_partial(field, p, *a, h)? };
            }
        }
        JetMode::ClosedForm | JetMode::Auto => {
            let cf = field.closed_forms(p, idx);
            for (k, a) in idx.iter().enumerate() {
                vals[k] = match cf[k] {
                    Some(v) => v,
                    None if mode == JetMode::ClosedForm => return Err(Error::MissingClosedForm(a.0)),
                    None if a.order() == 0 => field.eval(p),
                    None => fd_partial(field, p, *a, default_step(diam, a.order()))?,
                };
            }
        }
    }
    Ok(Jet { order, point: *p, vals })
}

/// Largest finite-difference stencil reach used by a default-step jet of `order`.
pub fn default_reach(dom: &Domain, order: usize) -> f64 {
    (1..=order.max(1)).map(|m| 2.0 * default_step(dom.diameter(), m)).fold(0.0, f64::max)
}

/// A field given by a closure, without closed forms.
pub struct FnField<F> {
    domain: Domain,
    f: F,
}

impl<F: Fn(&[f64; 4]) -> f64 + Send + Sync> FnField<F> {
    pub fn new(domain: Domain, f: F) -> Self {
        FnField { domain, f }
    }
}

impl<F: Fn(&[f64; 4]) -> f64 + Send + Sync> ScalarField for FnField<F> {
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn eval(&self, p: &[f64; 4]) -> f64 {
        (self.f)(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Domain {
        Domain::new([-1.0; 4], [1.0; 4])
    }

    #[test]
    fn index_table_is_consistent() {
        assert_eq!(indices(4).len(), 70);
        assert_eq!(indices(2).len(), 15);
        for (k, m) in indices(4).iter().enumerate() {
            assert_eq!(m.index(), k);
        }
        assert_eq!(MultiIndex::ZERO.index(), 0);
    }

    #[test]
    fn sine_in_y3() {
        let f = FnField::new(unit(), |p: &[f64; 4]| p[3].sin());
        let j = eval_jet(&f, &[0.0; 4], 3, JetMode::FiniteDifference { step: Some(1e-3) }).unwrap();
        assert!((j.get(MultiIndex::y3(1)) - 1.0).abs() < 1e-6);
        assert!((j.get(MultiIndex::y3(3)) + 1.0).abs() < 1e-3);
    }

    #[test]
    fn order_five_rejected() {
        let f = FnField::new(unit(), |p: &[f64; 4]| p[0]);
        assert!(matches!(eval_jet(&f, &[0.0; 4], 5, JetMode::Auto), Err(Error::OrderTooHigh(5))));
    }

    #[test]
    fn outside_domain_rejected() {
        let f = FnField::new(unit(), |p: &[f64; 4]| p[0]);
        assert!(matches!(
            eval_jet(&f, &[2.0, 0.0, 0.0, 0.0], 1, JetMode::Auto),
            Err(Error::OutOfDomain { axis: 0, .. })
        ));
    }

    #[test]
    fn margin_enforced() {
        let f = FnField::new(unit(), |p: &[f64; 4]| p[0]);
        let r = eval_jet(&f, &[1.0, 0.0, 0.0, 0.0], 1, JetMode::FiniteDifference { step: Some(1e-3) });
        assert!(matches!(r, Err(Error::InsufficientMargin { .. })));
    }

    #[test]
    fn mixed_partials_of_a_polynomial() {
        let f = FnField::new(unit(), |p: &[f64; 4]| p[0] * p[0] * p[3] + p[1] * p[2].powi(3));
        let p = [0.2, -0.3, 0.4, 0.1];
        let j = eval_jet(&f, &p, 4, JetMode::FiniteDifference { step: None }).unwrap();
        assert!((j.get(MultiIndex([2, 0, 0, 1])) - 2.0).abs() < 1e-6);
        assert!((j.get(MultiIndex([0, 1, 3, 0])) - 6.0).abs() < 1e-4);
        assert!((j.get(MultiIndex([1, 0, 0, 1])) - 0.4).abs() < 1e-7);
        assert!(j.get(MultiIndex([1, 1, 0, 0])).abs() < 1e-7);
    }
}
